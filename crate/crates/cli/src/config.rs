//! `key=value` run configuration with documented defaults.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file,
//! `DSALAB_<KEY>` environment variables (key upper-cased, `.` replaced by
//! `_`), then the `--seed` flag.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use dsa_lab::context_sim::Strategy;

#[derive(Clone, Copy, Debug)]
enum Kind {
    Int { min: u64 },
    Real,
    Bool,
    IntList,
    Choice(&'static [&'static str]),
    Strategies,
}

struct KeySpec {
    key: &'static str,
    default: &'static str,
    kind: Kind,
    doc: &'static str,
}

const fn int(min: u64) -> Kind {
    Kind::Int { min }
}

const KEYS: &[KeySpec] = &[
    KeySpec {
        key: "seed",
        default: "0",
        kind: int(0),
        doc: "top-level seed for every stream",
    },
    KeySpec {
        key: "dims.d",
        default: "16",
        kind: int(1),
        doc: "hidden width",
    },
    KeySpec {
        key: "dims.H",
        default: "4",
        kind: int(1),
        doc: "attention heads",
    },
    KeySpec {
        key: "dims.d_h",
        default: "8",
        kind: int(1),
        doc: "per-head width",
    },
    KeySpec {
        key: "dims.d_c",
        default: "8",
        kind: int(1),
        doc: "latent width",
    },
    KeySpec {
        key: "dims.H_I",
        default: "2",
        kind: int(1),
        doc: "indexer heads",
    },
    KeySpec {
        key: "dims.d_I",
        default: "8",
        kind: int(1),
        doc: "indexer head width",
    },
    KeySpec {
        key: "indexer.k_select",
        default: "2048",
        kind: int(1),
        doc: "entries kept per query",
    },
    KeySpec {
        key: "train.warmup_lr",
        default: "1e-3",
        kind: Kind::Real,
        doc: "warm-up learning rate",
    },
    KeySpec {
        key: "train.sparse_lr",
        default: "7.3e-6",
        kind: Kind::Real,
        doc: "sparse-stage learning rate",
    },
    KeySpec {
        key: "train.warmup_steps",
        default: "200",
        kind: int(0),
        doc: "warm-up steps",
    },
    KeySpec {
        key: "train.sparse_steps",
        default: "1000",
        kind: int(0),
        doc: "sparse-stage steps",
    },
    KeySpec {
        key: "train.L",
        default: "32",
        kind: int(1),
        doc: "toy sequence length",
    },
    KeySpec {
        key: "verify.seeds",
        default: "20",
        kind: int(1),
        doc: "instances per sweep",
    },
    KeySpec {
        key: "verify.len",
        default: "12",
        kind: int(2),
        doc: "attention sweep length",
    },
    KeySpec {
        key: "verify.ctx_trials",
        default: "500",
        kind: int(1),
        doc: "trajectories per strategy",
    },
    KeySpec {
        key: "verify.corrupt_tie_rule",
        default: "false",
        kind: Kind::Bool,
        doc: "negative-control hook",
    },
    KeySpec {
        key: "bench.L_grid",
        default: "64,256,1024",
        kind: Kind::IntList,
        doc: "sequence lengths",
    },
    KeySpec {
        key: "bench.instrument_max_L",
        default: "1024",
        kind: int(0),
        doc: "largest L run with counters",
    },
    KeySpec {
        key: "grpo.lr",
        default: "0.1",
        kind: Kind::Real,
        doc: "policy learning rate",
    },
    KeySpec {
        key: "grpo.steps",
        default: "500",
        kind: int(1),
        doc: "training steps",
    },
    KeySpec {
        key: "grpo.G",
        default: "8",
        kind: int(2),
        doc: "group size",
    },
    KeySpec {
        key: "grpo.max_len",
        default: "2",
        kind: int(1),
        doc: "tokens per output",
    },
    KeySpec {
        key: "grpo.vocab",
        default: "4",
        kind: int(2),
        doc: "vocabulary size",
    },
    KeySpec {
        key: "grpo.optimal_token",
        default: "3",
        kind: int(0),
        doc: "rewarded token",
    },
    KeySpec {
        key: "grpo.policy",
        default: "tabular",
        kind: Kind::Choice(&["tabular", "moe"]),
        doc: "policy family",
    },
    KeySpec {
        key: "grpo.experts",
        default: "4",
        kind: int(1),
        doc: "MoE experts",
    },
    KeySpec {
        key: "grpo.top_r",
        default: "2",
        kind: int(1),
        doc: "MoE experts per token",
    },
    KeySpec {
        key: "grpo.features",
        default: "3",
        kind: int(1),
        doc: "MoE feature width",
    },
    KeySpec {
        key: "grpo.epsilon",
        default: "0.2",
        kind: Kind::Real,
        doc: "clip range",
    },
    KeySpec {
        key: "grpo.beta",
        default: "0.01",
        kind: Kind::Real,
        doc: "KL weight",
    },
    KeySpec {
        key: "grpo.delta",
        default: "0.05",
        kind: Kind::Real,
        doc: "masking threshold",
    },
    KeySpec {
        key: "grpo.kl",
        default: "unbiased",
        kind: Kind::Choice(&["unbiased", "k3"]),
        doc: "KL estimator",
    },
    KeySpec {
        key: "grpo.masking",
        default: "true",
        kind: Kind::Bool,
        doc: "off-policy sequence masking",
    },
    KeySpec {
        key: "grpo.keep_sampling_mask",
        default: "true",
        kind: Kind::Bool,
        doc: "replay truncation masks",
    },
    KeySpec {
        key: "grpo.keep_routing",
        default: "true",
        kind: Kind::Bool,
        doc: "replay expert routes",
    },
    KeySpec {
        key: "grpo.updates_per_batch",
        default: "1",
        kind: int(1),
        doc: "gradient steps per batch",
    },
    KeySpec {
        key: "grpo.top_p",
        default: "0.95",
        kind: Kind::Real,
        doc: "nucleus mass",
    },
    KeySpec {
        key: "grpo.top_k",
        default: "0",
        kind: int(0),
        doc: "top-k cut, 0 keeps all",
    },
    KeySpec {
        key: "grpo.perturbation",
        default: "0",
        kind: Kind::Real,
        doc: "sampling-time logit noise",
    },
    KeySpec {
        key: "grpo.paired_masking",
        default: "false",
        kind: Kind::Bool,
        doc: "also run the masking ablation",
    },
    KeySpec {
        key: "ctx.window",
        default: "1500,3000,6000",
        kind: Kind::IntList,
        doc: "context windows",
    },
    KeySpec {
        key: "ctx.trigger",
        default: "0.8",
        kind: Kind::Real,
        doc: "trigger fraction of the window",
    },
    KeySpec {
        key: "ctx.fidelity",
        default: "0.7",
        kind: Kind::Real,
        doc: "summary survival probability",
    },
    KeySpec {
        key: "ctx.find_prob",
        default: "0.1",
        kind: Kind::Real,
        doc: "per-step find probability",
    },
    KeySpec {
        key: "ctx.K",
        default: "4",
        kind: int(1),
        doc: "evidence items required",
    },
    KeySpec {
        key: "ctx.trials",
        default: "1000",
        kind: int(1),
        doc: "trials per grid cell",
    },
    KeySpec {
        key: "ctx.max_steps",
        default: "120",
        kind: int(1),
        doc: "step cap per trajectory",
    },
    KeySpec {
        key: "ctx.strategies",
        default: "NoManagement,Summary,Discard75,DiscardAll,ParallelFewestStep(4)",
        kind: Kind::Strategies,
        doc: "strategies to compare",
    },
    KeySpec {
        key: "ctx.step_cost_min",
        default: "40",
        kind: int(0),
        doc: "smallest tool-pair cost",
    },
    KeySpec {
        key: "ctx.step_cost_max",
        default: "160",
        kind: int(0),
        doc: "largest tool-pair cost",
    },
    KeySpec {
        key: "ctx.system_cost",
        default: "200",
        kind: int(0),
        doc: "system prompt cost",
    },
    KeySpec {
        key: "ctx.user_cost",
        default: "100",
        kind: int(0),
        doc: "user prompt cost",
    },
    KeySpec {
        key: "ctx.summary_cost",
        default: "120",
        kind: int(0),
        doc: "summary note cost",
    },
    KeySpec {
        key: "ctx.note_cost",
        default: "40",
        kind: int(0),
        doc: "findings note cost",
    },
];

pub const ENV_PREFIX: &str = "DSALAB_";

pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_uppercase().replace('.', "_"))
}

/// Validated settings; every key is present.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.key == key)
}

fn check_value(spec: &KeySpec, value: &str) -> Result<()> {
    let bad = |why: &str| anyhow!("config key {}: {why} (got {value:?})", spec.key);
    match spec.kind {
        Kind::Int { min } => {
            let v: u64 = value
                .parse()
                .map_err(|_| bad("expected a non-negative integer"))?;
            if v < min {
                return Err(bad(&format!("must be at least {min}")));
            }
        }
        Kind::Real => {
            let v: f64 = value.parse().map_err(|_| bad("expected a number"))?;
            if !v.is_finite() {
                return Err(bad("must be finite"));
            }
        }
        Kind::Bool => {
            value
                .parse::<bool>()
                .map_err(|_| bad("expected true or false"))?;
        }
        Kind::IntList => {
            let items: Vec<&str> = value.split(',').map(str::trim).collect();
            if items
                .iter()
                .any(|s| s.parse::<u64>().map_or(true, |v| v == 0))
            {
                return Err(bad("expected a comma-separated list of positive integers"));
            }
        }
        Kind::Choice(options) => {
            if !options.contains(&value) {
                return Err(bad(&format!("expected one of {}", options.join(", "))));
            }
        }
        Kind::Strategies => {
            for s in value.split(',') {
                s.parse::<Strategy>().map_err(|e| bad(&e.to_string()))?;
            }
        }
    }
    Ok(())
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|k| (k.key.to_string(), k.default.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let spec = spec(key).ok_or_else(|| anyhow!("unknown config key {key:?}"))?;
        let value = value.trim();
        check_value(spec, value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected key=value", n + 1))?;
            self.set(key.trim(), value)
                .with_context(|| format!("{origin}:{}", n + 1))?;
        }
        Ok(())
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        for spec in KEYS {
            let name = env_name(spec.key);
            if let Some(v) = lookup(&name) {
                self.set(spec.key, &v)
                    .with_context(|| format!("environment variable {name}"))?;
            }
        }
        Ok(())
    }

    pub fn load(
        path: Option<&Path>,
        seed: Option<u64>,
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            cfg.apply_text(&text, &p.display().to_string())?;
        }
        cfg.apply_env(env)?;
        if let Some(s) = seed {
            cfg.set("seed", &s.to_string())?;
        }
        Ok(cfg)
    }

    fn raw(&self, key: &str) -> &str {
        match self.values.get(key) {
            Some(v) => v,
            None => panic!("undeclared config key {key}"),
        }
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.raw(key).parse().expect("validated integer")
    }

    pub fn usize(&self, key: &str) -> usize {
        self.raw(key).parse().expect("validated integer")
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.raw(key).parse().expect("validated number")
    }

    pub fn bool(&self, key: &str) -> bool {
        self.raw(key).parse().expect("validated bool")
    }

    pub fn str(&self, key: &str) -> &str {
        self.raw(key)
    }

    pub fn int_list(&self, key: &str) -> Vec<u64> {
        self.raw(key)
            .split(',')
            .map(|s| s.trim().parse().expect("validated list"))
            .collect()
    }

    pub fn strategies(&self, key: &str) -> Vec<Strategy> {
        self.raw(key)
            .split(',')
            .map(|s| s.parse().expect("validated strategy"))
            .collect()
    }

    pub fn seed(&self) -> u64 {
        self.u64("seed")
    }

    /// Sorted `key=value` snapshot.
    pub fn snapshot(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Every key with its default and description.
    pub fn documentation() -> String {
        KEYS.iter()
            .map(|k| format!("{}={}  # {}\n", k.key, k.default, k.doc))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::default();
        for spec in KEYS {
            check_value(spec, spec.default).unwrap();
        }
        assert_eq!(cfg.usize("indexer.k_select"), 2048);
        assert_eq!(cfg.f64("ctx.trigger"), 0.8);
        assert_eq!(cfg.f64("train.warmup_lr"), 1e-3);
        assert_eq!(cfg.f64("train.sparse_lr"), 7.3e-6);
    }

    #[test]
    fn unknown_key_named() {
        let err = RunConfig::default()
            .apply_text("dims.X = 3", "cfg")
            .unwrap_err();
        assert!(format!("{err:#}").contains("dims.X"));
    }

    #[test]
    fn zero_heads_rejected() {
        let err = RunConfig::default()
            .apply_text("dims.H=0\n", "cfg")
            .unwrap_err();
        assert!(format!("{err:#}").contains("dims.H"));
    }

    #[test]
    fn comments_and_blank_lines() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# header\n\ngrpo.lr = 0.5  # faster\n", "cfg")
            .unwrap();
        assert_eq!(cfg.f64("grpo.lr"), 0.5);
    }

    #[test]
    fn precedence_file_env_flag() {
        let dir = std::env::temp_dir().join(format!("dsalab-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        std::fs::write(&path, "seed=5\ngrpo.G=6\nctx.K=2\n").unwrap();
        let env = |name: &str| match name {
            "DSALAB_GRPO_G" => Some("10".to_string()),
            "DSALAB_SEED" => Some("7".to_string()),
            _ => None,
        };
        let cfg = RunConfig::load(Some(&path), Some(9), env).unwrap();
        assert_eq!(cfg.u64("seed"), 9);
        assert_eq!(cfg.usize("grpo.G"), 10);
        assert_eq!(cfg.usize("ctx.K"), 2);
        let cfg = RunConfig::load(Some(&path), None, no_env).unwrap();
        assert_eq!(cfg.seed(), 5);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn env_names() {
        assert_eq!(env_name("dims.d_h"), "DSALAB_DIMS_D_H");
        assert_eq!(env_name("ctx.K"), "DSALAB_CTX_K");
    }

    #[test]
    fn list_and_choice_values() {
        let mut cfg = RunConfig::default();
        cfg.set("bench.L_grid", "512, 1024").unwrap();
        assert_eq!(cfg.int_list("bench.L_grid"), vec![512, 1024]);
        assert!(cfg.set("bench.L_grid", "").is_err());
        assert!(cfg.set("grpo.kl", "k2").is_err());
        cfg.set("ctx.strategies", "DiscardAll,ParallelFewestStep(2)")
            .unwrap();
        assert_eq!(
            cfg.strategies("ctx.strategies"),
            vec![Strategy::DiscardAll, Strategy::ParallelFewestStep(2)]
        );
    }
}
