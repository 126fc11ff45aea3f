//! Property sweeps over every module, reported with measured deviations and
//! the tolerances they were held to.

use std::fmt;

use crate::context_sim::{
    assemble_context, parallel_member_seed, run_trajectory, run_trajectory_observed, Budget,
    Message, Role, Strategy, SyntheticTask, TrajectoryState,
};
use crate::dsa_attention::{
    count_operations, indexer_scores, masked_dense_simulation, run_instrumented, select_topk,
    sparse_attention, sparse_attention_over_cache, AttentionMode, IndexerParams, SelectionSet,
};
use crate::error::Result;
use crate::grpo_core::{
    evaluate_group, grpo_objective, objective_and_gradient, offpolicy_mask, unbiased_kl_estimate,
    GrpoConfig, PolicyEval, ReplayOptions, RolloutGroup,
};
use crate::indexer_training::{
    sparse_stage_loss, sparse_stage_loss_value, warmup_loss, warmup_loss_value, DetachedBatch,
    TargetDistribution,
};
use crate::mla_attention::{
    build_latent_cache, mha_attention_weights, mha_mode_attention, mqa_mode_attention, MlaParams,
    ModelDims,
};
use crate::numerics::{
    finite_diff_grad, kl_divergence, l1_normalize, max_abs_deviation, max_rel_deviation,
    softmax_masked, softmax_rows, topk_indices_with, Matrix, TieRule,
};
use crate::policy_sim::{sample_group, Policy, SamplingConfig, TabularPolicy, ToyMoEPolicy};
use crate::rng::Stream;

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyResult {
    pub module: &'static str,
    pub name: &'static str,
    pub pass: bool,
    /// Worst deviation or violation count seen over the sweep.
    pub measured: f64,
    pub tolerance: f64,
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}::{} measured={:e} tolerance={:e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.module,
            self.name,
            self.measured,
            self.tolerance
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub results: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.results.iter().all(|r| r.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &PropertyResult> {
        self.results.iter().filter(|r| !r.pass)
    }

    pub fn to_text(&self) -> String {
        let mut out: String = self.results.iter().map(|r| format!("{r}\n")).collect();
        let failed = self.failures().count();
        out.push_str(&format!(
            "{} properties, {} failed\n",
            self.results.len(),
            failed
        ));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyOptions {
    pub dims: ModelDims,
    pub seed: u64,
    /// Instances per randomized sweep.
    pub seeds: usize,
    /// Sequence length of attention instances.
    pub len: usize,
    /// Tie handling used by the top-k determinism property.
    pub tie_rule: TieRule,
    pub grpo: GrpoConfig,
    pub task: SyntheticTask,
    pub budget: Budget,
    /// Trajectories per strategy in the context-simulator sweeps.
    pub ctx_trials: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            dims: ModelDims::default(),
            seed: 0,
            seeds: 20,
            len: 12,
            tie_rule: TieRule::SmallerIndex,
            grpo: GrpoConfig::default(),
            task: SyntheticTask::default(),
            budget: Budget {
                window: 2000,
                trigger_fraction: Budget::DEFAULT_TRIGGER,
            },
            ctx_trials: 500,
        }
    }
}

impl VerifyOptions {
    /// Selection budget for sweeps: the configured `k_select`, capped so that
    /// selection is non-trivial at the sweep length.
    pub fn sweep_k(&self) -> usize {
        self.dims.k_select.min((self.len / 3).max(1))
    }
}

struct Suite<'a> {
    opts: &'a VerifyOptions,
    results: Vec<PropertyResult>,
}

impl Suite<'_> {
    fn check(
        &mut self,
        module: &'static str,
        name: &'static str,
        tolerance: f64,
        measured: Result<f64>,
    ) {
        let measured = measured.unwrap_or(f64::INFINITY);
        self.results.push(PropertyResult {
            module,
            name,
            pass: measured <= tolerance,
            measured,
            tolerance,
        });
    }

    fn stream(&self, ns: &str, i: usize) -> Stream {
        Stream::new(self.opts.seed, ns, i as u64)
    }

    fn attention_instance(&self, i: usize) -> (Matrix, MlaParams, IndexerParams) {
        let mut rng = self.stream("verify.attention", i);
        let d = &self.opts.dims;
        let h = Matrix::random_normal(self.opts.len, d.hidden, 1.0, &mut rng);
        let mp = MlaParams::random(d, &mut rng);
        let ip = IndexerParams::random(d, &mut rng);
        (h, mp, ip)
    }
}

/// Runs every property. Fails fast only on invalid options.
pub fn run_property_suite(opts: &VerifyOptions) -> Result<VerifyReport> {
    opts.dims.validate()?;
    opts.grpo.validate()?;
    opts.task.validate()?;
    Budget::new(opts.budget.window, opts.budget.trigger_fraction)?;
    if opts.len < 2 || opts.seeds == 0 || opts.ctx_trials == 0 {
        return Err(crate::LabError::Invalid(
            "sweeps need len >= 2 and at least one instance".into(),
        ));
    }
    let mut s = Suite {
        opts,
        results: Vec::new(),
    };
    numerics_properties(&mut s);
    mla_properties(&mut s);
    dsa_properties(&mut s);
    indexer_properties(&mut s);
    policy_properties(&mut s);
    grpo_properties(&mut s);
    context_properties(&mut s);
    Ok(VerifyReport { results: s.results })
}

fn random_prob(rng: &mut Stream, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.uniform() + 1e-3).collect();
    l1_normalize(&w).expect("positive weights").into_inner()
}

fn numerics_properties(s: &mut Suite) {
    let n = s.opts.seeds;
    s.check(
        "numerics",
        "kl_nonnegative_zero_iff_equal",
        1e-9,
        (|| {
            let mut worst: f64 = 0.0;
            for i in 0..n {
                let mut rng = s.stream("verify.kl", i);
                let p = random_prob(&mut rng, 6);
                let q = random_prob(&mut rng, 6);
                worst = worst
                    .max(-kl_divergence(&p, &q)?)
                    .max(kl_divergence(&p, &p)?);
                if p != q && kl_divergence(&p, &q)? <= 0.0 {
                    worst = f64::INFINITY;
                }
            }
            Ok(worst)
        })(),
    );
    s.check(
        "numerics",
        "softmax_rows_sum_and_shift",
        1e-9,
        (|| {
            let mut worst: f64 = 0.0;
            for i in 0..n {
                let mut rng = s.stream("verify.softmax", i);
                let scale = 10f64.powi(rng.below(7) as i32 - 3);
                let m = Matrix::random_normal(4, 7, scale, &mut rng);
                let out = softmax_rows(&m, None)?;
                let mut shifted = m.clone();
                let c = rng.uniform_range(-50.0, 50.0);
                shifted.data_mut().iter_mut().for_each(|x| *x += c);
                let out2 = softmax_rows(&shifted, None)?;
                for r in 0..4 {
                    worst = worst.max((out.row(r).iter().sum::<f64>() - 1.0).abs());
                }
                worst = worst.max(max_abs_deviation(out.data(), out2.data()));
            }
            Ok(worst)
        })(),
    );
    let rule = s.opts.tie_rule;
    s.check(
        "numerics",
        "topk_determinism",
        0.0,
        (|| {
            let mut mismatches = 0;
            for i in 0..n {
                let mut rng = s.stream("verify.topk", i);
                // coarse integer scores force ties
                let scores: Vec<f64> = (0..16).map(|_| rng.below(4) as f64).collect();
                let k = 1 + rng.below(15) as usize;
                if topk_indices_with(&scores, k, rule)? != topk_indices_with(&scores, k, rule)? {
                    mismatches += 1;
                }
            }
            Ok(mismatches as f64)
        })(),
    );
    s.check(
        "numerics",
        "l1_normalize_round_trip",
        1e-12,
        (|| {
            let mut worst: f64 = 0.0;
            for i in 0..n {
                let mut rng = s.stream("verify.l1", i);
                let v: Vec<f64> = (0..8).map(|_| rng.uniform() * 100.0).collect();
                let total: f64 = v.iter().sum();
                let back: Vec<f64> = l1_normalize(&v)?
                    .values()
                    .iter()
                    .map(|x| x * total)
                    .collect();
                worst = worst.max(max_rel_deviation(&back, &v));
            }
            Ok(worst)
        })(),
    );
}

fn mla_properties(s: &mut Suite) {
    let n = s.opts.seeds;
    s.check(
        "mla_attention",
        "mode_equivalence",
        1e-9,
        (|| {
            let mut worst: f64 = 0.0;
            for i in 0..n {
                let (h, mp, _) = s.attention_instance(i);
                let a = mha_mode_attention(&h, &mp)?;
                let b = mqa_mode_attention(&h, &mp)?;
                worst = worst.max(max_rel_deviation(b.u.data(), a.u.data()));
            }
            Ok(worst)
        })(),
    );
    s.check(
        "mla_attention",
        "causality",
        0.0,
        (|| {
            let mut worst: f64 = 0.0;
            for i in 0..n {
                let (h, mp, _) = s.attention_instance(i);
                let base = mqa_mode_attention(&h, &mp)?;
                let t = i % (h.rows() - 1);
                let mut h2 = h.clone();
                for r in t + 1..h.rows() {
                    h2.row_mut(r).iter_mut().for_each(|x| *x += 3.0);
                }
                let out = mqa_mode_attention(&h2, &mp)?;
                for r in 0..=t {
                    worst = worst.max(max_abs_deviation(out.u.row(r), base.u.row(r)));
                }
            }
            Ok(worst)
        })(),
    );
    s.check(
        "mla_attention",
        "weights_sum_to_one",
        1e-9,
        (|| {
            let mut worst: f64 = 0.0;
            for i in 0..n {
                let (h, mp, _) = s.attention_instance(i);
                for w in mha_attention_weights(&h, &mp)? {
                    for t in 0..w.rows() {
                        worst = worst.max((w.row(t).iter().sum::<f64>() - 1.0).abs());
                    }
                }
            }
            Ok(worst)
        })(),
    );
    s.check(
        "mla_attention",
        "head_permutation",
        1e-12,
        (|| {
            let mut worst: f64 = 0.0;
            for i in 0..n {
                let (h, mp, _) = s.attention_instance(i);
                let mut order: Vec<usize> = (0..mp.heads()).collect();
                order.rotate_left(1 + i % mp.heads());
                let a = mqa_mode_attention(&h, &mp)?;
                let b = mqa_mode_attention(&h, &mp.permute_heads(&order))?;
                worst = worst.max(max_rel_deviation(b.u.data(), a.u.data()));
            }
            Ok(worst)
        })(),
    );
}

fn random_selection(rng: &mut Stream, len: usize, k: usize) -> Result<SelectionSet> {
    let rows = (0..len)
        .map(|t| {
            let mut row: Vec<usize> = (0..=t).filter(|_| rng.bernoulli(0.5)).take(k).collect();
            if row.is_empty() {
                row.push(t);
            }
            row
        })
        .collect();
    SelectionSet::new(rows)
}

fn dsa_properties(s: &mut Suite) {
    let n = s.opts.seeds;
    let k = s.opts.sweep_k();
    s.check(
        "dsa_attention",
        "full_selection_is_dense",
        1e-12,
        (|| {
            let mut worst: f64 = 0.0;
            for i in 0..n {
                let (h, mp, ip) = s.attention_instance(i);
                let sel = select_topk(&indexer_scores(&h, &ip)?, h.rows())?;
                let a = sparse_attention(&h, &mp, &sel)?;
                let b = mqa_mode_attention(&h, &mp)?;
                worst = worst.max(max_rel_deviation(a.u.data(), b.u.data()));
            }
            Ok(worst)
        })(),
    );
    s.check(
        "dsa_attention",
        "oracle_equivalence",
        1e-10,
        (|| {
            let mut worst: f64 = 0.0;
            for i in 0..n {
                let (h, mp, _) = s.attention_instance(i);
                let mut rng = s.stream("verify.selection", i);
                let sel = random_selection(&mut rng, h.rows(), 1 + i % h.rows())?;
                let a = sparse_attention(&h, &mp, &sel)?;
                let b = masked_dense_simulation(&h, &mp, &sel)?;
                worst = worst.max(max_rel_deviation(a.u.data(), b.u.data()));
            }
            Ok(worst)
        })(),
    );
    s.check(
        "dsa_attention",
        "selection_causality",
        0.0,
        (|| {
            let mut violations = 0.0;
            for i in 0..n {
                let (h, mp, ip) = s.attention_instance(i);
                let sel = select_topk(&indexer_scores(&h, &ip)?, k)?;
                if (0..sel.len()).any(|t| sel.row(t).iter().any(|&s| s > t)) {
                    violations += 1.0;
                }
                let cache = build_latent_cache(&h, &mp)?;
                let base = sparse_attention_over_cache(&h, &cache, &mp, &sel, None)?;
                let t = h.rows() - 1;
                let Some(s_out) = (0..t).find(|&s| !sel.contains(t, s)) else {
                    continue;
                };
                let mut perturbed = cache.clone();
                perturbed
                    .entry_mut(s_out)
                    .iter_mut()
                    .for_each(|x| *x += 5.0);
                let out = sparse_attention_over_cache(&h, &perturbed, &mp, &sel, None)?;
                violations += max_abs_deviation(out.u.row(t), base.u.row(t));
            }
            Ok(violations)
        })(),
    );
    s.check(
        "dsa_attention",
        "instrumented_cost_matches_closed_form",
        0.0,
        (|| {
            let mut mismatches = 0.0;
            for (i, len) in [4usize, 9, 17].into_iter().enumerate() {
                let mut rng = s.stream("verify.cost", i);
                let dims = ModelDims {
                    k_select: k,
                    ..s.opts.dims
                };
                let h = Matrix::random_normal(len, dims.hidden, 1.0, &mut rng);
                let mp = MlaParams::random(&dims, &mut rng);
                let ip = IndexerParams::random(&dims, &mut rng);
                for mode in [AttentionMode::Dense, AttentionMode::Sparse] {
                    let (_, counted) = run_instrumented(&h, &mp, &ip, k, mode)?;
                    if counted != count_operations(&dims, len, mode).counters() {
                        mismatches += 1.0;
                    }
                }
            }
            Ok(mismatches)
        })(),
    );
    s.check(
        "dsa_attention",
        "selection_scale_covariance",
        0.0,
        (|| {
            let mut violations = 0.0;
            for i in 0..n {
                let (h, _, ip) = s.attention_instance(i);
                let c = 1.5 + 0.25 * i as f64;
                let mut scaled = ip.clone();
                scaled.w_q.iter_mut().for_each(|m| m.scale(c));
                scaled.w_k.scale(c);
                scaled.w_w.scale(c);
                let a = indexer_scores(&h, &ip)?;
                let b = indexer_scores(&h, &scaled)?;
                if select_topk(&a, k)? != select_topk(&b, k)? {
                    violations += 1.0;
                }
                // raw scores must move whenever any is non-zero
                if a.rows().iter().flatten().any(|x| *x != 0.0) && a.rows() == b.rows() {
                    violations += 1.0;
                }
            }
            Ok(violations)
        })(),
    );
}

fn indexer_properties(s: &mut Suite) {
    let n = s.opts.seeds;
    let k = s.opts.sweep_k();
    let instance =
        |s: &Suite, i: usize| -> Result<(Matrix, MlaParams, IndexerParams, DetachedBatch)> {
            let (h, mp, ip) = s.attention_instance(i);
            let batch = DetachedBatch::from_main_model(&h, &mp)?;
            Ok((h, mp, ip, batch))
        };
    s.check(
        "indexer_training",
        "detach_contract",
        0.0,
        (|| {
            let mut worst: f64 = 0.0;
            for i in 0..n {
                let (h, mp, ip, batch) = instance(s, i)?;
                let sel = select_topk(&indexer_scores(&batch.hidden, &ip)?, k)?;
                let before = (
                    warmup_loss(&batch, &ip)?.value,
                    sparse_stage_loss(&batch, &ip, &sel)?.value,
                );
                // perturb the main model, keep the cached target and indexer inputs
                let mut mp2 = mp.clone();
                mp2.w_dkv.scale(1.7);
                mp2.w_uk.iter_mut().for_each(|m| m.scale(-0.4));
                let fresh = DetachedBatch::from_main_model(&h, &mp2)?;
                let held = DetachedBatch::new(fresh.hidden, batch.target.clone())?;
                let after = (
                    warmup_loss(&held, &ip)?.value,
                    sparse_stage_loss(&held, &ip, &sel)?.value,
                );
                worst = worst
                    .max((before.0 - after.0).abs())
                    .max((before.1 - after.1).abs());
            }
            Ok(worst)
        })(),
    );
    s.check(
        "indexer_training",
        "loss_nonnegative_zero_at_target",
        1e-9,
        (|| {
            let mut worst: f64 = 0.0;
            for i in 0..n {
                let (_, _, ip, batch) = instance(s, i)?;
                let scores = indexer_scores(&batch.hidden, &ip)?;
                let sel = select_topk(&scores, k)?;
                let (sparse, _) = sparse_stage_loss_value(&batch.target, &scores, &sel)?;
                worst = worst
                    .max(-warmup_loss_value(&batch.target, &scores)?)
                    .max(-sparse);
                let matched = TargetDistribution::from_scores(&scores);
                worst = worst.max(warmup_loss_value(&matched, &scores)?.abs());
            }
            Ok(worst)
        })(),
    );
    s.check(
        "indexer_training",
        "saturated_sparse_equals_warmup",
        0.0,
        (|| {
            let mut worst: f64 = 0.0;
            for i in 0..n {
                let (_, _, ip, batch) = instance(s, i)?;
                let sel = SelectionSet::full(batch.hidden.rows());
                let a = warmup_loss(&batch, &ip)?;
                let b = sparse_stage_loss(&batch, &ip, &sel)?;
                worst = worst.max((a.value - b.value).abs());
                worst = worst.max(max_abs_deviation(&a.grad.flatten(), &b.grad.flatten()));
            }
            Ok(worst)
        })(),
    );
    s.check(
        "indexer_training",
        "gradient_finite_difference",
        1e-5,
        (|| {
            let mut worst: f64 = 0.0;
            for i in 0..n.max(20) {
                let (_, _, ip, batch) = instance(s, i)?;
                let sel = select_topk(&indexer_scores(&batch.hidden, &ip)?, k)?;
                let flat = ip.flatten();
                let warm = |x: &[f64]| {
                    warmup_loss(&batch, &IndexerParams::from_flat(&ip, x).unwrap())
                        .unwrap()
                        .value
                };
                let fd = finite_diff_grad(warm, &flat, 1e-6)?;
                worst = worst.max(max_rel_deviation(
                    &warmup_loss(&batch, &ip)?.grad.flatten(),
                    &fd,
                ));
                let sparse = |x: &[f64]| {
                    sparse_stage_loss(&batch, &IndexerParams::from_flat(&ip, x).unwrap(), &sel)
                        .unwrap()
                        .value
                };
                let fd = finite_diff_grad(sparse, &flat, 1e-6)?;
                worst = worst.max(max_rel_deviation(
                    &sparse_stage_loss(&batch, &ip, &sel)?.grad.flatten(),
                    &fd,
                ));
            }
            Ok(worst)
        })(),
    );
}

fn moe(s: &Suite, i: usize) -> Result<ToyMoEPolicy> {
    let mut rng = s.stream("verify.moe", i);
    ToyMoEPolicy::random(3, 6, 5, 4, 2, &mut rng)
}

fn policy_properties(s: &mut Suite) {
    let n = s.opts.seeds;
    let cfg = SamplingConfig {
        top_p: 0.8,
        top_k: 4,
        perturbation: 0.3,
        ..SamplingConfig::default()
    };
    s.check(
        "policy_sim",
        "shared_action_subspace",
        0.0,
        (|| {
            let mut nonfinite = 0.0;
            for i in 0..n {
                let old = Policy::Moe(moe(s, i)?);
                let mut cur = old.clone();
                let mut rng = s.stream("verify.drift", i);
                let drifted: Vec<f64> = cur
                    .params()
                    .iter()
                    .map(|p| p + 0.5 * rng.normal())
                    .collect();
                cur.set_params(&drifted)?;
                for rec in sample_group(&old, i as u64, 4, 5, &cfg, s.opts.seed)? {
                    for (t, &tok) in rec.tokens.iter().enumerate() {
                        for p in [&old, &cur] {
                            let lp = p.logprob(t, tok, Some(&rec.masks[t]), rec.route(t))?;
                            if !lp.is_finite() {
                                nonfinite += 1.0;
                            }
                        }
                    }
                }
            }
            Ok(nonfinite)
        })(),
    );
    s.check(
        "policy_sim",
        "replay_ignores_unrecorded_experts",
        0.0,
        (|| {
            let mut worst: f64 = 0.0;
            for i in 0..n {
                let p = moe(s, i)?;
                let ctx = i % 3;
                let (_, routed) = p.forward_with_routing(ctx);
                let base = p.forward_replay(ctx, &routed)?;
                let mut q = p.clone();
                for e in (0..q.experts.len()).filter(|e| !routed.contains(e)) {
                    q.experts[e].scale(-4.0);
                    q.router.add_at(ctx % q.router.rows(), e, 10.0);
                }
                worst = worst.max(max_abs_deviation(&q.forward_replay(ctx, &routed)?, &base));
            }
            Ok(worst)
        })(),
    );
    s.check(
        "policy_sim",
        "sampling_seed_determinism",
        0.0,
        (|| {
            let mut mismatches = 0.0;
            for i in 0..n {
                let p = Policy::Moe(moe(s, i)?);
                if sample_group(&p, 3, 4, 5, &cfg, s.opts.seed)?
                    != sample_group(&p, 3, 4, 5, &cfg, s.opts.seed)?
                {
                    mismatches += 1.0;
                }
            }
            Ok(mismatches)
        })(),
    );
    s.check(
        "policy_sim",
        "masked_distribution_sums_to_one",
        1e-12,
        (|| {
            let mut worst: f64 = 0.0;
            for i in 0..n {
                let p = Policy::Moe(moe(s, i)?);
                for rec in sample_group(&p, 0, 4, 5, &cfg, s.opts.seed)? {
                    for (t, mask) in rec.masks.iter().enumerate() {
                        let logits = p.forward_routed(t, rec.route(t))?;
                        let scaled: Vec<f64> = logits.iter().map(|l| l / p.temperature()).collect();
                        let probs = softmax_masked(&scaled, Some(mask)).unwrap_or_default();
                        worst = worst.max((probs.iter().sum::<f64>() - 1.0).abs());
                    }
                }
            }
            Ok(worst)
        })(),
    );
}

fn one_token_eval(old: f64, cur: f64, reference: f64) -> PolicyEval {
    PolicyEval {
        old: vec![vec![old]],
        cur: vec![vec![cur]],
        reference: vec![vec![reference]],
    }
}

fn grpo_instance(s: &Suite, i: usize) -> Result<(Policy, Policy, Vec<RolloutGroup>)> {
    let mut rng = s.stream("verify.grpo", i);
    let mut tab =
        || TabularPolicy::new(Matrix::random_normal(6, 5, 1.0, &mut rng), 1.0).map(Policy::Tabular);
    let (cur, reference, sampler) = (tab()?, tab()?, tab()?);
    let cfg = SamplingConfig {
        top_p: 0.9,
        perturbation: 0.2,
        ..SamplingConfig::default()
    };
    let mut groups = Vec::new();
    for q in 0..2 {
        let len = 1 + rng.below(6) as usize;
        let outputs = sample_group(&sampler, q, 4, len, &cfg, s.opts.seed ^ i as u64)?;
        let rewards = (0..4).map(|_| rng.normal()).collect();
        groups.push(RolloutGroup {
            question: q,
            outputs,
            rewards,
        });
    }
    Ok((cur, reference, groups))
}

fn grpo_properties(s: &mut Suite) {
    let n = s.opts.seeds;
    let cfg = s.opts.grpo;
    let replay = ReplayOptions::default();
    s.check(
        "grpo_core",
        "estimator_unbiased_by_enumeration",
        1e-10,
        (|| {
            let mut worst: f64 = 0.0;
            for i in 0..n {
                let mut rng = s.stream("verify.estimator", i);
                let (old, cur, refp) = (
                    random_prob(&mut rng, 3),
                    random_prob(&mut rng, 3),
                    random_prob(&mut rng, 3),
                );
                let truth = kl_divergence(&cur, &refp)?;
                let mut expect = 0.0;
                for v in 0..3 {
                    expect += old[v]
                        * unbiased_kl_estimate(
                            &one_token_eval(old[v].ln(), cur[v].ln(), refp[v].ln()),
                            0,
                            0,
                        )?;
                }
                worst = worst.max((expect - truth).abs());
            }
            Ok(worst)
        })(),
    );
    s.check(
        "grpo_core",
        "clip_inert_on_policy",
        0.0,
        (|| {
            let mut worst: f64 = 0.0;
            for i in 0..n {
                let (cur, reference, groups) = grpo_instance(s, i)?;
                let evals = groups
                    .iter()
                    .map(|g| {
                        evaluate_group(&cur, &reference, g, replay).map(|e| PolicyEval {
                            cur: e.old.clone(),
                            ..e
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let tight = grpo_objective(
                    &groups,
                    &evals,
                    &GrpoConfig {
                        epsilon: 0.01,
                        ..cfg
                    },
                )?;
                let loose = grpo_objective(
                    &groups,
                    &evals,
                    &GrpoConfig {
                        epsilon: 0.99,
                        ..cfg
                    },
                )?;
                worst = worst.max((tight.value - loose.value).abs());
            }
            Ok(worst)
        })(),
    );
    s.check(
        "grpo_core",
        "mask_constant_within_output",
        0.0,
        (|| {
            let mut violations = 0.0;
            for i in 0..n {
                let (cur, reference, groups) = grpo_instance(s, i)?;
                for g in &groups {
                    let eval = evaluate_group(&cur, &reference, g, replay)?;
                    let adv = crate::grpo_core::group_advantages(&g.rewards)?;
                    let mask = offpolicy_mask(&eval, &adv, cfg.delta);
                    for (o, rec) in g.outputs.iter().enumerate() {
                        if (0..rec.len()).any(|t| mask.value(o, t) != mask.value(o, 0)) {
                            violations += 1.0;
                        }
                    }
                }
            }
            Ok(violations)
        })(),
    );
    s.check(
        "grpo_core",
        "reward_shift_invariance",
        1e-12,
        (|| {
            let mut worst: f64 = 0.0;
            for i in 0..n {
                let (cur, reference, groups) = grpo_instance(s, i)?;
                let shifted: Vec<RolloutGroup> = groups
                    .iter()
                    .map(|g| RolloutGroup {
                        rewards: g.rewards.iter().map(|r| r + 2.5).collect(),
                        ..g.clone()
                    })
                    .collect();
                let (a, ga) = objective_and_gradient(&cur, &reference, &groups, &cfg, replay)?;
                let (b, gb) = objective_and_gradient(&cur, &reference, &shifted, &cfg, replay)?;
                if a.masks != b.masks {
                    return Ok(f64::INFINITY);
                }
                for (x, y) in a.advantages.iter().zip(&b.advantages) {
                    worst = worst.max(max_abs_deviation(&x.0, &y.0));
                }
                worst = worst
                    .max((a.value - b.value).abs())
                    .max(max_abs_deviation(&ga, &gb));
            }
            Ok(worst)
        })(),
    );
    s.check(
        "grpo_core",
        "gradient_finite_difference",
        1e-5,
        (|| {
            let mut worst: f64 = 0.0;
            for i in 0..n.max(20) {
                let (cur, reference, groups) = grpo_instance(s, i)?;
                let (_, grad) = objective_and_gradient(&cur, &reference, &groups, &cfg, replay)?;
                let f = |x: &[f64]| {
                    let mut p = cur.clone();
                    p.set_params(x).unwrap();
                    objective_and_gradient(&p, &reference, &groups, &cfg, replay)
                        .unwrap()
                        .0
                        .value
                };
                worst = worst.max(max_rel_deviation(
                    &grad,
                    &finite_diff_grad(f, &cur.params(), 1e-6)?,
                ));
            }
            Ok(worst)
        })(),
    );
}

/// A random message list with valid roles; reasoning only on assistants.
pub fn random_messages(rng: &mut Stream, max_len: usize) -> Vec<Message> {
    let n = rng.below(max_len as u64 + 1) as usize;
    (0..n)
        .map(|i| {
            let role = match rng.below(4) {
                0 => Role::System,
                1 => Role::User,
                2 => Role::Assistant,
                _ => Role::Tool,
            };
            let mut m = Message::new(role, format!("m{i}"), rng.below(50));
            if role == Role::Assistant && rng.bernoulli(0.7) {
                m.reasoning = Some(format!("r{i}"));
            }
            if role == Role::Tool && rng.bernoulli(0.3) {
                m.evidence = Some(rng.below(4) as usize);
            }
            m
        })
        .collect()
}

fn tool_messages(ms: &[Message]) -> Vec<&Message> {
    ms.iter().filter(|m| m.role == Role::Tool).collect()
}

fn context_properties(s: &mut Suite) {
    let opts = s.opts;
    let trials = opts.ctx_trials;
    let strategies = [
        Strategy::Summary,
        Strategy::Discard75,
        Strategy::DiscardAll,
        Strategy::ParallelFewestStep(3),
    ];
    s.check(
        "context_sim",
        "post_strategy_token_bound",
        0.0,
        (|| {
            let mut violations = 0.0;
            for strategy in strategies {
                for i in 0..trials {
                    let mut observe = |st: &TrajectoryState| {
                        if st.tokens_used >= opts.budget.window {
                            violations += 1.0;
                        }
                    };
                    run_trajectory_observed(
                        &opts.task,
                        &opts.budget,
                        strategy,
                        200,
                        opts.seed ^ i as u64,
                        &mut observe,
                    )?;
                }
            }
            Ok(violations)
        })(),
    );
    s.check("context_sim", "assemble_idempotent_preserves_tools", 0.0, {
        let mut violations = 0.0;
        for i in 0..trials {
            let mut rng = s.stream("verify.messages", i);
            let msgs = random_messages(&mut rng, 12);
            let once = assemble_context(&msgs);
            if assemble_context(&once) != once
                || tool_messages(&once) != tool_messages(&msgs)
                || once.len() != msgs.len()
            {
                violations += 1.0;
            }
        }
        Ok(violations)
    });
    s.check(
        "context_sim",
        "parallel_returns_minimum",
        0.0,
        (|| {
            let mut violations = 0.0;
            for i in 0..trials.min(200) {
                let seed = opts.seed ^ i as u64;
                let r = run_trajectory(
                    &opts.task,
                    &opts.budget,
                    Strategy::ParallelFewestStep(4),
                    200,
                    seed,
                )?;
                let best = (0..4)
                    .map(|j| {
                        run_trajectory(
                            &opts.task,
                            &opts.budget,
                            Strategy::NoManagement,
                            200,
                            parallel_member_seed(seed, j),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .filter(|m| m.success)
                    .map(|m| m.steps)
                    .min();
                if best.is_some() != r.success || best.is_some_and(|b| b != r.steps) {
                    violations += 1.0;
                }
            }
            Ok(violations)
        })(),
    );
    s.check(
        "context_sim",
        "seed_determinism",
        0.0,
        (|| {
            let mut mismatches = 0.0;
            for strategy in strategies {
                for i in 0..trials.min(100) {
                    let a = run_trajectory(
                        &opts.task,
                        &opts.budget,
                        strategy,
                        200,
                        opts.seed ^ i as u64,
                    )?;
                    let b = run_trajectory(
                        &opts.task,
                        &opts.budget,
                        strategy,
                        200,
                        opts.seed ^ i as u64,
                    )?;
                    if a != b {
                        mismatches += 1.0;
                    }
                }
            }
            Ok(mismatches)
        })(),
    );
}
