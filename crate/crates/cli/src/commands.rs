//! Command bodies. Each validates its settings before computing and returns
//! the artifacts to write.

use std::fmt;

use anyhow::Result;
use dsa_lab::context_sim::{experiment_csv, run_experiment, Budget, ExperimentGrid, SyntheticTask};
use dsa_lab::dsa_attention::{
    count_operations, run_instrumented, AttentionMode, CostReport, IndexerParams,
};
use dsa_lab::grpo_core::{
    train_toy_policy, GrpoConfig, KlEstimator, ReplayOptions, ScriptedEnv, TrainConfig, TrainTrace,
};
use dsa_lab::indexer_training::{run_two_stage_schedule, ScheduleConfig, ToyIndexerInstance};
use dsa_lab::mla_attention::{MlaParams, ModelDims};
use dsa_lab::numerics::{Matrix, TieRule};
use dsa_lab::policy_sim::{Policy, SamplingConfig, TabularPolicy, ToyMoEPolicy};
use dsa_lab::rng::Stream;
use dsa_lab::verify::{run_property_suite, VerifyOptions};

use crate::config::RunConfig;
use crate::output::Artifact;

/// Settings rejected before any computation.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn invalid<T>(r: dsa_lab::Result<T>) -> Result<T> {
    r.map_err(|e| ConfigError(e.to_string()).into())
}

/// What a command produced.
#[derive(Debug, Default)]
pub struct Outcome {
    pub artifacts: Vec<Artifact>,
    /// Human-readable summary for stdout.
    pub summary: String,
    /// False when a check inside the command failed.
    pub ok: bool,
}

pub fn model_dims(cfg: &RunConfig) -> Result<ModelDims> {
    let dims = ModelDims {
        hidden: cfg.usize("dims.d"),
        heads: cfg.usize("dims.H"),
        head_dim: cfg.usize("dims.d_h"),
        latent_dim: cfg.usize("dims.d_c"),
        indexer_heads: cfg.usize("dims.H_I"),
        indexer_dim: cfg.usize("dims.d_I"),
        k_select: cfg.usize("indexer.k_select"),
    };
    invalid(dims.validate())?;
    Ok(dims)
}

pub fn grpo_config(cfg: &RunConfig) -> Result<GrpoConfig> {
    let g = GrpoConfig {
        epsilon: cfg.f64("grpo.epsilon"),
        beta: cfg.f64("grpo.beta"),
        delta: cfg.f64("grpo.delta"),
        kl_estimator: match cfg.str("grpo.kl") {
            "k3" => KlEstimator::K3,
            _ => KlEstimator::Unbiased,
        },
        sequence_masking: cfg.bool("grpo.masking"),
    };
    invalid(g.validate())?;
    Ok(g)
}

pub fn task(cfg: &RunConfig) -> Result<SyntheticTask> {
    let t = SyntheticTask {
        evidence_required: cfg.usize("ctx.K"),
        find_prob: cfg.f64("ctx.find_prob"),
        step_cost_min: cfg.u64("ctx.step_cost_min"),
        step_cost_max: cfg.u64("ctx.step_cost_max"),
        fidelity: cfg.f64("ctx.fidelity"),
        system_cost: cfg.u64("ctx.system_cost"),
        user_cost: cfg.u64("ctx.user_cost"),
        summary_cost: cfg.u64("ctx.summary_cost"),
        note_cost: cfg.u64("ctx.note_cost"),
    };
    invalid(t.validate())?;
    Ok(t)
}

fn budgets(cfg: &RunConfig) -> Result<Vec<Budget>> {
    let trigger = cfg.f64("ctx.trigger");
    cfg.int_list("ctx.window")
        .into_iter()
        .map(|w| invalid(Budget::new(w, trigger)))
        .collect()
}

pub fn cmd_verify(cfg: &RunConfig) -> Result<Outcome> {
    let budget = budgets(cfg)?[0];
    let opts = VerifyOptions {
        dims: model_dims(cfg)?,
        seed: cfg.seed(),
        seeds: cfg.usize("verify.seeds"),
        len: cfg.usize("verify.len"),
        tie_rule: if cfg.bool("verify.corrupt_tie_rule") {
            TieRule::Corrupted
        } else {
            TieRule::SmallerIndex
        },
        grpo: grpo_config(cfg)?,
        task: task(cfg)?,
        budget,
        ctx_trials: cfg.usize("verify.ctx_trials"),
    };
    let report = invalid(run_property_suite(&opts))?;
    let text = report.to_text();
    Ok(Outcome {
        artifacts: vec![Artifact::new("verify_report.txt", text.clone())],
        summary: text,
        ok: report.all_pass(),
    })
}

pub const BENCH_CHECK_HEADER: &str = "mode,L,instrumented_matches";

pub fn cmd_bench(cfg: &RunConfig) -> Result<Outcome> {
    let dims = model_dims(cfg)?;
    let grid = cfg.int_list("bench.L_grid");
    let max_instrumented = cfg.usize("bench.instrument_max_L");
    let mut csv = format!("{}\n", CostReport::CSV_HEADER);
    let mut check = format!("{BENCH_CHECK_HEADER}\n");
    let mut ok = true;
    let mut summary = String::new();
    for &len in &grid {
        let len = len as usize;
        let dense = count_operations(&dims, len, AttentionMode::Dense);
        let sparse = count_operations(&dims, len, AttentionMode::Sparse);
        for r in [&dense, &sparse] {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        summary.push_str(&format!(
            "L={len}: sparse/dense score ratio {:.6}\n",
            sparse.score_macs as f64 / dense.score_macs as f64
        ));
        if len <= max_instrumented {
            let mut rng = Stream::new(cfg.seed(), "bench.instance", len as u64);
            let h = Matrix::random_normal(len, dims.hidden, 1.0, &mut rng);
            let mp = MlaParams::random(&dims, &mut rng);
            let ip = IndexerParams::random(&dims, &mut rng);
            for (mode, predicted) in [
                (AttentionMode::Dense, &dense),
                (AttentionMode::Sparse, &sparse),
            ] {
                let (_, counted) = run_instrumented(&h, &mp, &ip, dims.k_select, mode)?;
                let matches = counted == predicted.counters();
                ok &= matches;
                check.push_str(&format!("{mode},{len},{matches}\n"));
            }
        }
    }
    Ok(Outcome {
        artifacts: vec![
            Artifact::new("bench.csv", csv),
            Artifact::new("bench_check.csv", check),
        ],
        summary,
        ok,
    })
}

fn initial_policy(cfg: &RunConfig) -> Result<Policy> {
    let vocab = cfg.usize("grpo.vocab");
    let contexts = cfg.usize("grpo.max_len");
    Ok(match cfg.str("grpo.policy") {
        "moe" => {
            let mut rng = Stream::new(cfg.seed(), "grpo.policy", 0);
            Policy::Moe(invalid(ToyMoEPolicy::random(
                contexts,
                vocab,
                cfg.usize("grpo.experts"),
                cfg.usize("grpo.features"),
                cfg.usize("grpo.top_r"),
                &mut rng,
            ))?)
        }
        _ => Policy::Tabular(TabularPolicy::uniform(contexts, vocab)),
    })
}

pub fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let t = TrainConfig {
        learning_rate: cfg.f64("grpo.lr"),
        steps: cfg.usize("grpo.steps"),
        group_size: cfg.usize("grpo.G"),
        max_len: cfg.usize("grpo.max_len"),
        updates_per_batch: cfg.usize("grpo.updates_per_batch"),
        sampling: SamplingConfig {
            top_p: cfg.f64("grpo.top_p"),
            top_k: cfg.usize("grpo.top_k"),
            greedy: false,
            perturbation: cfg.f64("grpo.perturbation"),
        },
        grpo: grpo_config(cfg)?,
        replay: ReplayOptions {
            keep_sampling_mask: cfg.bool("grpo.keep_sampling_mask"),
            keep_routing: cfg.bool("grpo.keep_routing"),
        },
        seed: cfg.seed(),
    };
    if !(t.sampling.top_p > 0.0 && t.sampling.top_p <= 1.0) {
        return Err(
            ConfigError(format!("grpo.top_p = {} outside (0, 1]", t.sampling.top_p)).into(),
        );
    }
    if t.sampling.perturbation < 0.0 {
        return Err(ConfigError("grpo.perturbation must be non-negative".into()).into());
    }
    Ok(t)
}

fn describe(label: &str, trace: &TrainTrace, max_reward: f64) -> String {
    let reached = trace
        .first_step_reaching(max_reward)
        .map_or("not reached".to_string(), |s| format!("reached at step {s}"));
    format!(
        "{label}: max reward {max_reward} {reached}; max divergence {:.6}\n",
        trace.max_divergence()
    )
}

pub fn cmd_grpo(cfg: &RunConfig) -> Result<Outcome> {
    let train = train_config(cfg)?;
    let vocab = cfg.usize("grpo.vocab");
    let optimal = cfg.usize("grpo.optimal_token");
    if optimal >= vocab {
        return Err(ConfigError(format!(
            "grpo.optimal_token = {optimal} outside the vocabulary"
        ))
        .into());
    }
    let env = ScriptedEnv::single_optimal(vocab, optimal);
    let init = initial_policy(cfg)?;
    let mut out = Outcome {
        ok: true,
        ..Outcome::default()
    };
    if cfg.bool("grpo.paired_masking") {
        for (masking, name) in [(true, "grpo_masked.csv"), (false, "grpo_unmasked.csv")] {
            let run = TrainConfig {
                grpo: GrpoConfig {
                    sequence_masking: masking,
                    ..train.grpo
                },
                ..train
            };
            let (_, trace) = train_toy_policy(&env, &init, &run)?;
            out.summary
                .push_str(&describe(name, &trace, env.max_reward()));
            out.artifacts.push(Artifact::new(name, trace.to_csv()));
        }
    } else {
        let (_, trace) = train_toy_policy(&env, &init, &train)?;
        out.summary = describe("grpo.csv", &trace, env.max_reward());
        out.artifacts
            .push(Artifact::new("grpo.csv", trace.to_csv()));
    }
    Ok(out)
}

pub fn cmd_ctxsim(cfg: &RunConfig) -> Result<Outcome> {
    let budgets = budgets(cfg)?;
    let grid = ExperimentGrid {
        strategies: cfg.strategies("ctx.strategies"),
        windows: budgets.iter().map(|b| b.window).collect(),
        trigger_fraction: budgets[0].trigger_fraction,
        trials: cfg.usize("ctx.trials"),
        max_steps: cfg.usize("ctx.max_steps"),
        task: task(cfg)?,
    };
    let rows = run_experiment(&grid, cfg.seed())?;
    let csv = experiment_csv(&rows);
    Ok(Outcome {
        artifacts: vec![Artifact::new("ctxsim.csv", csv.clone())],
        summary: csv,
        ok: true,
    })
}

pub fn cmd_schedule(cfg: &RunConfig) -> Result<Outcome> {
    let dims = model_dims(cfg)?;
    let schedule = ScheduleConfig {
        warmup_lr: cfg.f64("train.warmup_lr"),
        sparse_lr: cfg.f64("train.sparse_lr"),
        warmup_steps: cfg.usize("train.warmup_steps"),
        sparse_steps: cfg.usize("train.sparse_steps"),
        k_select: dims.k_select,
    };
    if schedule.warmup_steps + schedule.sparse_steps == 0 {
        return Err(ConfigError("schedule needs at least one step".into()).into());
    }
    let toy = invalid(ToyIndexerInstance::new(
        dims,
        cfg.usize("train.L"),
        cfg.seed(),
    ))?;
    let (_, trace) = run_two_stage_schedule(&schedule, &toy.batch()?, &toy.indexer)?;
    let first = trace.records.first().map_or(f64::NAN, |r| r.loss);
    let last = trace.records.last().map_or(f64::NAN, |r| r.loss);
    Ok(Outcome {
        artifacts: vec![Artifact::new("schedule.csv", trace.to_csv())],
        summary: format!(
            "loss {first:e} -> {last:e} over {} steps\n",
            trace.records.len()
        ),
        ok: true,
    })
}
