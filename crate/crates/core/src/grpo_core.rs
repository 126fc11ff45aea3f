//! Group-relative policy optimization with the stabilizers needed for
//! off-policy rollouts: an importance-corrected K3 KL estimate, sequence
//! masking of divergent negative samples, and replay of sampling masks and
//! expert routes in the training pass.
//!
//! The objective for one group of `G` outputs is
//!
//! ```text
//! (1/G) Σ_i (1/|o_i|) Σ_t [ min(r Â_i, clip(r, 1−ε, 1+ε) Â_i) · M_i − β · KL̂_{i,t} ]
//! ```
//!
//! with `r = π_θ / π_old` per token and `Â_i = R_i − mean(R)`. Gradients are
//! taken with respect to the current log-probabilities only; `π_old`,
//! `π_ref`, `Â` and `M` are constants.

use crate::error::{LabError, Result};
use crate::policy_sim::{sample_group, Policy, SamplingConfig, SamplingRecord};

/// Which per-token KL estimator the penalty uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KlEstimator {
    /// K3 reweighted by `π_θ / π_old`; unbiased under sampling from `π_old`.
    #[default]
    Unbiased,
    /// Plain `r_ref − ln r_ref − 1` with `r_ref = π_ref / π_θ`.
    K3,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrpoConfig {
    /// Clip range ε.
    pub epsilon: f64,
    /// KL weight β.
    pub beta: f64,
    /// Off-policy masking threshold δ on the mean `ln(π_old / π_θ)`.
    pub delta: f64,
    pub kl_estimator: KlEstimator,
    /// When false every `M_i` is 1, which is the unmasked objective.
    pub sequence_masking: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            beta: 0.01,
            delta: 0.05,
            kl_estimator: KlEstimator::Unbiased,
            sequence_masking: true,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(LabError::Invalid(format!(
                "epsilon = {} outside (0, 1)",
                self.epsilon
            )));
        }
        if !(self.beta >= 0.0) {
            return Err(LabError::Invalid(format!(
                "beta = {} is negative",
                self.beta
            )));
        }
        if !(self.delta > 0.0) {
            return Err(LabError::Invalid(format!(
                "delta = {} must be positive",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Sampled outputs for one question with their scalar rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub question: u64,
    pub outputs: Vec<SamplingRecord>,
    pub rewards: Vec<f64>,
}

impl RolloutGroup {
    pub fn validate(&self) -> Result<()> {
        if self.outputs.len() < 2 {
            return Err(LabError::Invalid(
                "a group needs at least two outputs".into(),
            ));
        }
        if self.rewards.len() != self.outputs.len() {
            return Err(LabError::Shape("one reward per output required".into()));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(LabError::NonFinite("reward".into()));
        }
        if let Some(i) = self.outputs.iter().position(SamplingRecord::is_empty) {
            return Err(LabError::Empty(format!("output {i} has no tokens")));
        }
        Ok(())
    }
}

/// Per output, per token log-probabilities under the sampling, current and
/// reference policies, all over the carried sampling masks.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyEval {
    pub old: Vec<Vec<f64>>,
    pub cur: Vec<Vec<f64>>,
    pub reference: Vec<Vec<f64>>,
}

impl PolicyEval {
    pub fn outputs(&self) -> usize {
        self.old.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.old.len();
        if self.cur.len() != n || self.reference.len() != n {
            return Err(LabError::Shape(
                "evaluations disagree in output count".into(),
            ));
        }
        for i in 0..n {
            let len = self.old[i].len();
            if len == 0 {
                return Err(LabError::Empty(format!("output {i} has no tokens")));
            }
            if self.cur[i].len() != len || self.reference[i].len() != len {
                return Err(LabError::Shape(format!(
                    "output {i} evaluations disagree in length"
                )));
            }
            let all = self.old[i]
                .iter()
                .chain(&self.cur[i])
                .chain(&self.reference[i]);
            if all.into_iter().any(|x| !x.is_finite()) {
                return Err(LabError::NonFinite(format!(
                    "log-probability in output {i}"
                )));
            }
        }
        Ok(())
    }
}

/// `Â_i = R_i − mean(R)`, shared by every token of output `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageSet(pub Vec<f64>);

pub fn group_advantages(rewards: &[f64]) -> Result<AdvantageSet> {
    if rewards.len() < 2 {
        return Err(LabError::Invalid(
            "advantages need a group of at least two".into(),
        ));
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(AdvantageSet(rewards.iter().map(|r| r - mean).collect()))
}

/// Sequence-level keep flags; token `t` of output `i` uses `keep[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    pub keep: Vec<bool>,
}

impl MaskSet {
    pub fn all(n: usize) -> Self {
        Self {
            keep: vec![true; n],
        }
    }

    pub fn value(&self, i: usize, _t: usize) -> f64 {
        if self.keep[i] {
            1.0
        } else {
            0.0
        }
    }

    pub fn masked_count(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }
}

/// Mean per-token `ln π_old − ln π_θ` over one output.
pub fn mean_log_ratio(eval: &PolicyEval, i: usize) -> f64 {
    let n = eval.old[i].len() as f64;
    eval.old[i]
        .iter()
        .zip(&eval.cur[i])
        .map(|(o, c)| o - c)
        .sum::<f64>()
        / n
}

/// Drops output `i` iff `Â_i < 0` and its mean `ln(π_old/π_θ)` exceeds `δ`.
pub fn offpolicy_mask(eval: &PolicyEval, adv: &AdvantageSet, delta: f64) -> MaskSet {
    MaskSet {
        keep: (0..eval.outputs())
            .map(|i| !(adv.0[i] < 0.0 && mean_log_ratio(eval, i) > delta))
            .collect(),
    }
}

fn checked_exp(x: f64, output: usize, token: usize) -> Result<f64> {
    let v = x.exp();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(LabError::RatioOverflow { output, token })
    }
}

/// `(π_θ/π_old) · (π_ref/π_θ − ln(π_ref/π_θ) − 1)` at one token.
pub fn unbiased_kl_estimate(eval: &PolicyEval, i: usize, t: usize) -> Result<f64> {
    let (lo, lc, lr) = (eval.old[i][t], eval.cur[i][t], eval.reference[i][t]);
    let ratio = checked_exp(lc - lo, i, t)?;
    let ref_ratio = checked_exp(lr - lc, i, t)?;
    Ok(ratio * (ref_ratio - (lr - lc) - 1.0))
}

/// Uncorrected K3: `π_ref/π_θ − ln(π_ref/π_θ) − 1`.
pub fn k3_estimate(eval: &PolicyEval, i: usize, t: usize) -> Result<f64> {
    let (lc, lr) = (eval.cur[i][t], eval.reference[i][t]);
    Ok(checked_exp(lr - lc, i, t)? - (lr - lc) - 1.0)
}

/// Estimator value and its derivative with respect to `ln π_θ`.
fn kl_term(est: KlEstimator, eval: &PolicyEval, i: usize, t: usize) -> Result<(f64, f64)> {
    let (lo, lc, lr) = (eval.old[i][t], eval.cur[i][t], eval.reference[i][t]);
    match est {
        KlEstimator::Unbiased => {
            let ratio = checked_exp(lc - lo, i, t)?;
            // d/dlc [e^{lr−lo} − ρ(lr − lc) − ρ] with ρ = e^{lc−lo}
            Ok((unbiased_kl_estimate(eval, i, t)?, ratio * (lc - lr)))
        }
        KlEstimator::K3 => {
            let ref_ratio = checked_exp(lr - lc, i, t)?;
            Ok((k3_estimate(eval, i, t)?, 1.0 - ref_ratio))
        }
    }
}

/// Clipped surrogate `min(rA, clip(r)A)` and its derivative in `ln π_θ`.
fn surrogate(ratio: f64, adv: f64, epsilon: f64) -> (f64, f64) {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    let value = (ratio * adv).min(clipped * adv);
    let active = (adv > 0.0 && ratio <= 1.0 + epsilon) || (adv < 0.0 && ratio >= 1.0 - epsilon);
    (value, if active { ratio * adv } else { 0.0 })
}

/// Objective value with `∂J/∂ ln π_θ` for every token of every group.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveEval {
    pub value: f64,
    /// `[group][output][token]`.
    pub token_grads: Vec<Vec<Vec<f64>>>,
    pub masks: Vec<MaskSet>,
    pub advantages: Vec<AdvantageSet>,
}

impl ObjectiveEval {
    pub fn masked_fraction(&self) -> f64 {
        let total: usize = self.masks.iter().map(|m| m.keep.len()).sum();
        let masked: usize = self.masks.iter().map(MaskSet::masked_count).sum();
        masked as f64 / total.max(1) as f64
    }
}

/// Masked GRPO objective averaged over groups. With masking disabled this
/// is the plain clipped objective.
pub fn grpo_objective(
    groups: &[RolloutGroup],
    evals: &[PolicyEval],
    cfg: &GrpoConfig,
) -> Result<ObjectiveEval> {
    cfg.validate()?;
    if groups.is_empty() {
        return Err(LabError::Empty("no rollout groups".into()));
    }
    if groups.len() != evals.len() {
        return Err(LabError::Shape("one evaluation per group required".into()));
    }
    let n_groups = groups.len() as f64;
    let mut value = 0.0;
    let mut token_grads = Vec::with_capacity(groups.len());
    let mut masks = Vec::with_capacity(groups.len());
    let mut advantages = Vec::with_capacity(groups.len());
    for (group, eval) in groups.iter().zip(evals) {
        group.validate()?;
        eval.validate()?;
        if eval.outputs() != group.outputs.len() {
            return Err(LabError::Shape(
                "evaluation does not match its group".into(),
            ));
        }
        let adv = group_advantages(&group.rewards)?;
        let mask = if cfg.sequence_masking {
            offpolicy_mask(eval, &adv, cfg.delta)
        } else {
            MaskSet::all(eval.outputs())
        };
        let g = eval.outputs() as f64;
        let mut group_value = 0.0;
        let mut grads = Vec::with_capacity(eval.outputs());
        for i in 0..eval.outputs() {
            let len = eval.old[i].len() as f64;
            let weight = 1.0 / (g * len * n_groups);
            let mut out_value = 0.0;
            let mut out_grads = Vec::with_capacity(eval.old[i].len());
            for t in 0..eval.old[i].len() {
                let ratio = checked_exp(eval.cur[i][t] - eval.old[i][t], i, t)?;
                let (s, ds) = surrogate(ratio, adv.0[i], cfg.epsilon);
                let m = mask.value(i, t);
                let (k, dk) = if cfg.beta > 0.0 {
                    kl_term(cfg.kl_estimator, eval, i, t)?
                } else {
                    (0.0, 0.0)
                };
                out_value += s * m - cfg.beta * k;
                out_grads.push(weight * (ds * m - cfg.beta * dk));
            }
            group_value += out_value / len;
            grads.push(out_grads);
        }
        value += group_value / g / n_groups;
        token_grads.push(grads);
        masks.push(mask);
        advantages.push(adv);
    }
    if !value.is_finite() {
        return Err(LabError::NonFinite("GRPO objective".into()));
    }
    Ok(ObjectiveEval {
        value,
        token_grads,
        masks,
        advantages,
    })
}

/// What the training pass replays from sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReplayOptions {
    /// Evaluate `π_θ` and `π_ref` over the recorded truncation masks.
    pub keep_sampling_mask: bool,
    /// Evaluate MoE policies on the recorded expert routes.
    pub keep_routing: bool,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self {
            keep_sampling_mask: true,
            keep_routing: true,
        }
    }
}

fn step_view(
    rec: &SamplingRecord,
    t: usize,
    replay: ReplayOptions,
) -> (Option<&[bool]>, Option<&[usize]>) {
    let mask = replay.keep_sampling_mask.then(|| rec.masks[t].as_slice());
    let route = if replay.keep_routing {
        rec.route(t)
    } else {
        None
    };
    (mask, route)
}

/// Log-probabilities of a group's tokens under the current and reference
/// policies; `old` comes straight from the sampling records.
pub fn evaluate_group(
    current: &Policy,
    reference: &Policy,
    group: &RolloutGroup,
    replay: ReplayOptions,
) -> Result<PolicyEval> {
    let mut eval = PolicyEval {
        old: Vec::with_capacity(group.outputs.len()),
        cur: Vec::with_capacity(group.outputs.len()),
        reference: Vec::with_capacity(group.outputs.len()),
    };
    for rec in &group.outputs {
        let mut cur = Vec::with_capacity(rec.len());
        let mut refr = Vec::with_capacity(rec.len());
        for (t, &tok) in rec.tokens.iter().enumerate() {
            let (mask, route) = step_view(rec, t, replay);
            cur.push(current.logprob(t, tok, mask, route)?);
            refr.push(reference.logprob(t, tok, mask, route)?);
        }
        eval.old.push(rec.old_logprobs.clone());
        eval.cur.push(cur);
        eval.reference.push(refr);
    }
    Ok(eval)
}

/// Chains per-token `∂J/∂ ln π_θ` into the policy parameters.
pub fn policy_gradient(
    policy: &Policy,
    groups: &[RolloutGroup],
    objective: &ObjectiveEval,
    replay: ReplayOptions,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; policy.params().len()];
    for (group, grads) in groups.iter().zip(&objective.token_grads) {
        for (rec, out_grads) in group.outputs.iter().zip(grads) {
            for (t, (&tok, &g)) in rec.tokens.iter().zip(out_grads).enumerate() {
                if g == 0.0 {
                    continue;
                }
                let (mask, route) = step_view(rec, t, replay);
                policy.accumulate_logprob_grad(t, tok, mask, route, g, &mut grad)?;
            }
        }
    }
    Ok(grad)
}

/// Objective value and its gradient over the current policy's parameters.
pub fn objective_and_gradient(
    current: &Policy,
    reference: &Policy,
    groups: &[RolloutGroup],
    cfg: &GrpoConfig,
    replay: ReplayOptions,
) -> Result<(ObjectiveEval, Vec<f64>)> {
    let evals = groups
        .iter()
        .map(|g| evaluate_group(current, reference, g, replay))
        .collect::<Result<Vec<_>>>()?;
    let objective = grpo_objective(groups, &evals, cfg)?;
    let grad = policy_gradient(current, groups, &objective, replay)?;
    Ok((objective, grad))
}

/// Scripted environment: each token carries a fixed reward and a sequence
/// scores the mean over its tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ScriptedEnv {
    pub token_rewards: Vec<f64>,
}

impl ScriptedEnv {
    /// Reward 1 for `optimal`, 0 for every other token.
    pub fn single_optimal(vocab: usize, optimal: usize) -> Self {
        Self {
            token_rewards: (0..vocab)
                .map(|v| if v == optimal { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn reward(&self, tokens: &[usize]) -> f64 {
        tokens.iter().map(|&t| self.token_rewards[t]).sum::<f64>() / tokens.len() as f64
    }

    pub fn max_reward(&self) -> f64 {
        self.token_rewards
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub group_size: usize,
    pub max_len: usize,
    /// Gradient steps taken on each sampled batch.
    pub updates_per_batch: usize,
    pub sampling: SamplingConfig,
    pub grpo: GrpoConfig,
    pub replay: ReplayOptions,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            steps: 500,
            group_size: 8,
            max_len: 2,
            updates_per_batch: 1,
            sampling: SamplingConfig {
                top_p: 0.95,
                ..SamplingConfig::default()
            },
            grpo: GrpoConfig::default(),
            replay: ReplayOptions::default(),
            seed: 0,
        }
    }
}

/// One row of the training trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub mean_reward: f64,
    /// Objective at the first update of the step.
    pub objective: f64,
    /// Mean `ln π_old − ln π_θ` over the batch's tokens, with `π_θ` after
    /// the step's updates.
    pub mean_log_ratio: f64,
    /// Fraction of outputs dropped by sequence masking, over all updates.
    pub masked_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TrainRecord>,
}

impl TrainTrace {
    pub const CSV_HEADER: &'static str =
        "step,mean_reward,objective,mean_log_ratio,masked_fraction";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{:?},{:?},{:?},{:?}\n",
                r.step, r.mean_reward, r.objective, r.mean_log_ratio, r.masked_fraction
            ));
        }
        out
    }

    /// Largest per-step divergence diagnostic.
    pub fn max_divergence(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.mean_log_ratio)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// First step whose sampled batch scored `target`.
    pub fn first_step_reaching(&self, target: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.mean_reward >= target)
            .map(|r| r.step)
    }
}

fn batch_log_ratio(eval: &PolicyEval) -> f64 {
    let (sum, n) = eval
        .old
        .iter()
        .zip(&eval.cur)
        .flat_map(|(o, c)| o.iter().zip(c))
        .fold((0.0, 0usize), |(s, n), (o, c)| (s + (o - c), n + 1));
    sum / n.max(1) as f64
}

/// Sample → reward → objective → gradient ascent, one question per step.
/// The reference policy is the initial policy. Returns the final policy and
/// the per-step trace.
pub fn train_toy_policy(
    env: &ScriptedEnv,
    initial: &Policy,
    cfg: &TrainConfig,
) -> Result<(Policy, TrainTrace)> {
    cfg.grpo.validate()?;
    if env.token_rewards.len() != initial.vocab() {
        return Err(LabError::Shape(
            "environment and policy vocabularies differ".into(),
        ));
    }
    let reference = initial.clone();
    let mut policy = initial.clone();
    let mut trace = TrainTrace::default();
    for step in 0..cfg.steps {
        let outputs = sample_group(
            &policy,
            step as u64,
            cfg.group_size,
            cfg.max_len,
            &cfg.sampling,
            cfg.seed,
        )?;
        let rewards: Vec<f64> = outputs.iter().map(|o| env.reward(&o.tokens)).collect();
        let group = RolloutGroup {
            question: step as u64,
            outputs,
            rewards,
        };
        let groups = std::slice::from_ref(&group);
        let mut first_objective = None;
        let mut masked = 0.0;
        for _ in 0..cfg.updates_per_batch.max(1) {
            let (objective, grad) =
                objective_and_gradient(&policy, &reference, groups, &cfg.grpo, cfg.replay)
                    .map_err(|e| match e {
                        LabError::NonFinite(what) => LabError::Diverged { step, what },
                        LabError::RatioOverflow { output, token } => LabError::Diverged {
                            step,
                            what: format!("importance ratio at output {output}, token {token}"),
                        },
                        other => other,
                    })?;
            first_objective.get_or_insert(objective.value);
            masked += objective.masked_fraction();
            let mut params = policy.params();
            for (p, g) in params.iter_mut().zip(&grad) {
                *p += cfg.learning_rate * g;
            }
            if params.iter().any(|p| !p.is_finite()) {
                return Err(LabError::Diverged {
                    step,
                    what: "policy parameters".into(),
                });
            }
            policy.set_params(&params)?;
        }
        let after = evaluate_group(&policy, &reference, &group, cfg.replay)?;
        trace.records.push(TrainRecord {
            step,
            mean_reward: group.rewards.iter().sum::<f64>() / group.rewards.len() as f64,
            objective: first_objective.unwrap_or(0.0),
            mean_log_ratio: batch_log_ratio(&after),
            masked_fraction: masked / cfg.updates_per_batch.max(1) as f64,
        });
    }
    Ok((policy, trace))
}
