//! Toy policies that sample rollouts and record what the training pass must
//! replay: the top-p/top-k truncation mask of every step and, for the
//! mixture-of-experts policy, the experts each step was routed to.
//!
//! A policy maps a context index to vocabulary logits. Step `t` of a rollout
//! reads context `t mod n_contexts`.

use std::fmt::Write as _;

use crate::error::{LabError, Result};
use crate::numerics::{dot, log_softmax_masked, softmax_masked, topk_indices, Matrix};
use crate::rng::Stream;

/// Logit table: one row of vocabulary logits per context.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    pub logits: Matrix,
    pub temperature: f64,
}

impl TabularPolicy {
    pub fn new(logits: Matrix, temperature: f64) -> Result<Self> {
        let p = Self {
            logits,
            temperature,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn uniform(contexts: usize, vocab: usize) -> Self {
        Self {
            logits: Matrix::zeros(contexts, vocab),
            temperature: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.logits.cols() < 2 || self.logits.rows() == 0 {
            return Err(LabError::Invalid(
                "tabular policy needs V >= 2 and a context".into(),
            ));
        }
        check_temperature(self.temperature)
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(LabError::Invalid(format!(
            "temperature must be positive, got {t}"
        )))
    }
}

/// Mixture-of-experts policy: per-context router logits choose `top_r` of
/// `E` linear experts, whose outputs on the context features are mixed by
/// gates renormalized over the routed set.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyMoEPolicy {
    /// `n_contexts × E`.
    pub router: Matrix,
    /// Per expert, `V × F`.
    pub experts: Vec<Matrix>,
    /// `n_contexts × F`, fixed.
    pub features: Matrix,
    pub top_r: usize,
    pub temperature: f64,
}

impl ToyMoEPolicy {
    pub fn random(
        contexts: usize,
        vocab: usize,
        experts: usize,
        features: usize,
        top_r: usize,
        rng: &mut Stream,
    ) -> Result<Self> {
        let p = Self {
            router: Matrix::random_normal(contexts, experts, 1.0, rng),
            experts: (0..experts)
                .map(|_| {
                    Matrix::random_normal(vocab, features, 1.0 / (features as f64).sqrt(), rng)
                })
                .collect(),
            features: Matrix::random_normal(contexts, features, 1.0, rng),
            top_r,
            temperature: 1.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn vocab(&self) -> usize {
        self.experts.first().map_or(0, Matrix::rows)
    }

    fn validate(&self) -> Result<()> {
        let e = self.experts.len();
        if e == 0 || self.router.cols() != e {
            return Err(LabError::Invalid(
                "router width must equal the expert count".into(),
            ));
        }
        if !(1..=e).contains(&self.top_r) {
            return Err(LabError::Invalid(format!(
                "top_r = {} outside 1..={e}",
                self.top_r
            )));
        }
        let (v, f) = (self.experts[0].rows(), self.features.cols());
        if v < 2 || self.experts.iter().any(|m| m.rows() != v || m.cols() != f) {
            return Err(LabError::Invalid(
                "experts must all be V × F with V >= 2".into(),
            ));
        }
        if self.features.rows() != self.router.rows() {
            return Err(LabError::Invalid(
                "feature and router context counts differ".into(),
            ));
        }
        check_temperature(self.temperature)
    }

    fn context_row(&self, ctx: usize) -> usize {
        ctx % self.router.rows()
    }

    /// Routes by the current router (smaller index wins ties) and returns
    /// the mixed logits with the routed experts.
    pub fn forward_with_routing(&self, ctx: usize) -> (Vec<f64>, Vec<usize>) {
        let row = self.context_row(ctx);
        let routed = topk_indices(self.router.row(row), self.top_r).expect("router has experts");
        let logits = self.mix(row, &routed);
        (logits, routed)
    }

    /// Evaluates the recorded experts regardless of what the router prefers
    /// now. Gates come from the current router logits over the recorded set.
    pub fn forward_replay(&self, ctx: usize, routed: &[usize]) -> Result<Vec<f64>> {
        self.check_route(routed)?;
        Ok(self.mix(self.context_row(ctx), routed))
    }

    fn check_route(&self, routed: &[usize]) -> Result<()> {
        if routed.len() != self.top_r {
            return Err(LabError::MalformedRouting(format!(
                "{} experts recorded, top_r = {}",
                routed.len(),
                self.top_r
            )));
        }
        if routed.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LabError::MalformedRouting(
                "expert list must be sorted and distinct".into(),
            ));
        }
        if routed.last().is_some_and(|&e| e >= self.experts.len()) {
            return Err(LabError::MalformedRouting(
                "expert index out of range".into(),
            ));
        }
        Ok(())
    }

    fn gates(&self, row: usize, routed: &[usize]) -> Vec<f64> {
        let r: Vec<f64> = routed.iter().map(|&e| self.router.get(row, e)).collect();
        softmax_masked(&r, None).expect("non-empty route")
    }

    fn mix(&self, row: usize, routed: &[usize]) -> Vec<f64> {
        let x = self.features.row(row);
        let mut out = vec![0.0; self.vocab()];
        for (&e, g) in routed.iter().zip(self.gates(row, routed)) {
            for (o, y) in out.iter_mut().zip(self.experts[e].matvec(x)) {
                *o += g * y;
            }
        }
        out
    }

    /// Gradient of the step log-probability over router logits and expert
    /// weights. With `a_e = ∂lp/∂y · y_e`, the router gradient on a routed
    /// expert is `g_e (a_e − Σ_f g_f a_f)`; expert `e` receives `g_e ∂lp/∂y xᵀ`.
    fn accumulate_logprob_grad(
        &self,
        ctx: usize,
        token: usize,
        mask: Option<&[bool]>,
        route: Option<&[usize]>,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        let routed = match route {
            Some(r) => {
                self.check_route(r)?;
                r.to_vec()
            }
            None => self.forward_with_routing(ctx).1,
        };
        let row = self.context_row(ctx);
        let scaled: Vec<f64> = self
            .mix(row, &routed)
            .iter()
            .map(|x| x / self.temperature)
            .collect();
        let (lp, dy) = logprob_logit_grad(&scaled, token, mask, self.temperature)?;
        let x = self.features.row(row);
        let gates = self.gates(row, &routed);
        let outputs: Vec<Vec<f64>> = routed.iter().map(|&e| self.experts[e].matvec(x)).collect();
        let a: Vec<f64> = outputs.iter().map(|y| dot(&dy, y)).collect();
        let mean_a: f64 = gates.iter().zip(&a).map(|(g, a)| g * a).sum();
        let e_count = self.experts.len();
        for (n, &e) in routed.iter().enumerate() {
            grad[row * e_count + e] += scale * gates[n] * (a[n] - mean_a);
        }
        let router_len = self.router.data().len();
        let (v, f) = (self.vocab(), self.features.cols());
        for (n, &e) in routed.iter().enumerate() {
            let base = router_len + e * v * f;
            for (i, &dyi) in dy.iter().enumerate() {
                let s = scale * gates[n] * dyi;
                for (j, &xj) in x.iter().enumerate() {
                    grad[base + i * f + j] += s * xj;
                }
            }
        }
        Ok(lp)
    }
}

/// Either toy policy.
#[derive(Clone, Debug, PartialEq)]
pub enum Policy {
    Tabular(TabularPolicy),
    Moe(ToyMoEPolicy),
}

/// Vocabulary logits for one step and the routing that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct StepForward {
    pub logits: Vec<f64>,
    pub routed: Option<Vec<usize>>,
}

impl Policy {
    pub fn vocab(&self) -> usize {
        match self {
            Self::Tabular(p) => p.logits.cols(),
            Self::Moe(m) => m.vocab(),
        }
    }

    pub fn temperature(&self) -> f64 {
        match self {
            Self::Tabular(p) => p.temperature,
            Self::Moe(m) => m.temperature,
        }
    }

    pub fn is_moe(&self) -> bool {
        matches!(self, Self::Moe(_))
    }

    /// Raw logits under the policy's own routing.
    pub fn forward(&self, ctx: usize) -> StepForward {
        match self {
            Self::Tabular(p) => StepForward {
                logits: p.logits.row(ctx % p.logits.rows()).to_vec(),
                routed: None,
            },
            Self::Moe(m) => {
                let (logits, routed) = m.forward_with_routing(ctx);
                StepForward {
                    logits,
                    routed: Some(routed),
                }
            }
        }
    }

    /// Logits under a recorded route when given (MoE only).
    pub fn forward_routed(&self, ctx: usize, route: Option<&[usize]>) -> Result<Vec<f64>> {
        match (self, route) {
            (Self::Moe(m), Some(r)) => m.forward_replay(ctx, r),
            _ => Ok(self.forward(ctx).logits),
        }
    }

    fn scaled(&self, logits: &[f64]) -> Vec<f64> {
        let t = self.temperature();
        logits.iter().map(|x| x / t).collect()
    }

    /// Step probabilities over the full vocabulary at the policy temperature.
    pub fn probs(&self, logits: &[f64]) -> Vec<f64> {
        softmax_masked(&self.scaled(logits), None).expect("non-empty vocabulary")
    }

    /// Flat parameter vector: the logit table, or router then experts.
    pub fn params(&self) -> Vec<f64> {
        match self {
            Self::Tabular(p) => p.logits.data().to_vec(),
            Self::Moe(m) => {
                let mut out = m.router.data().to_vec();
                for e in &m.experts {
                    out.extend_from_slice(e.data());
                }
                out
            }
        }
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.params().len() {
            return Err(LabError::Shape(format!(
                "policy has {} parameters, got {}",
                self.params().len(),
                flat.len()
            )));
        }
        match self {
            Self::Tabular(p) => p.logits.data_mut().copy_from_slice(flat),
            Self::Moe(m) => {
                let n = m.router.data().len();
                m.router.data_mut().copy_from_slice(&flat[..n]);
                let mut at = n;
                for e in &mut m.experts {
                    let k = e.data().len();
                    e.data_mut().copy_from_slice(&flat[at..at + k]);
                    at += k;
                }
            }
        }
        Ok(())
    }

    /// Log-probability of `token` renormalized over `mask` (all tokens when
    /// `None`), evaluated under `route` when given.
    pub fn logprob(
        &self,
        ctx: usize,
        token: usize,
        mask: Option<&[bool]>,
        route: Option<&[usize]>,
    ) -> Result<f64> {
        let logits = self.forward_routed(ctx, route)?;
        masked_logprob_of_logits(&self.scaled(&logits), token, mask)
    }

    /// Adds `scale · ∂ logprob / ∂ params` into `grad` and returns the
    /// log-probability. Routing choices are constants; gates are not.
    pub fn accumulate_logprob_grad(
        &self,
        ctx: usize,
        token: usize,
        mask: Option<&[bool]>,
        route: Option<&[usize]>,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        match self {
            Self::Tabular(p) => {
                let row = ctx % p.logits.rows();
                let v = p.logits.cols();
                let (lp, d) = logprob_logit_grad(
                    &self.scaled(p.logits.row(row)),
                    token,
                    mask,
                    p.temperature,
                )?;
                for (g, dv) in grad[row * v..(row + 1) * v].iter_mut().zip(&d) {
                    *g += scale * dv;
                }
                Ok(lp)
            }
            Self::Moe(m) => m.accumulate_logprob_grad(ctx, token, mask, route, scale, grad),
        }
    }
}

fn masked_logprob_of_logits(scaled: &[f64], token: usize, mask: Option<&[bool]>) -> Result<f64> {
    if token >= scaled.len() {
        return Err(LabError::Invalid(format!(
            "token {token} outside vocabulary"
        )));
    }
    if let Some(m) = mask {
        if m.len() != scaled.len() {
            return Err(LabError::Shape("mask width differs from vocabulary".into()));
        }
        if !m[token] {
            return Err(LabError::TokenOutsideMask { token });
        }
    }
    let lp = log_softmax_masked(scaled, mask).ok_or(LabError::TokenOutsideMask { token })?;
    Ok(lp[token])
}

/// Log-probability and its gradient with respect to the unscaled logits.
fn logprob_logit_grad(
    scaled: &[f64],
    token: usize,
    mask: Option<&[bool]>,
    temperature: f64,
) -> Result<(f64, Vec<f64>)> {
    let lp = masked_logprob_of_logits(scaled, token, mask)?;
    let probs = softmax_masked(scaled, mask).expect("token is allowed");
    let grad = probs
        .iter()
        .enumerate()
        .map(|(v, &p)| (f64::from(u8::from(v == token)) - p) / temperature)
        .collect();
    Ok((lp, grad))
}

/// Log of the policy probability renormalized over the allowed set.
pub fn masked_logprob(policy: &Policy, ctx: usize, token: usize, mask: &[bool]) -> Result<f64> {
    policy.logprob(ctx, token, Some(mask), None)
}

/// Keeps the `top_k` most probable tokens, then the shortest prefix of them,
/// by descending probability, whose mass reaches `top_p`. Ties rank the
/// smaller index first. At least one token always survives.
pub fn truncation_mask(probs: &[f64], top_p: f64, top_k: usize) -> Vec<bool> {
    let v = probs.len();
    let k = if top_k == 0 { v } else { top_k.min(v) };
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut mask = vec![false; v];
    let mut mass = 0.0;
    for &i in order.iter().take(k) {
        mask[i] = true;
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    mask
}

/// Sampling-time settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingConfig {
    pub top_p: f64,
    /// 0 keeps the whole vocabulary.
    pub top_k: usize,
    /// Take the most probable allowed token instead of sampling.
    pub greedy: bool,
    /// Standard deviation of Gaussian noise added to the logits at sampling
    /// time only; models inference/training numerical mismatch.
    pub perturbation: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            top_p: 1.0,
            top_k: 0,
            greedy: false,
            perturbation: 0.0,
        }
    }
}

/// Per-step expert lists recorded at sampling time.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoutingRecord {
    pub steps: Vec<Vec<usize>>,
}

/// One sampled output and everything needed to replay it.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingRecord {
    pub tokens: Vec<usize>,
    /// Log-probability of each token under the sampling distribution,
    /// renormalized over that step's mask.
    pub old_logprobs: Vec<f64>,
    pub masks: Vec<Vec<bool>>,
    pub routing: Option<RoutingRecord>,
}

impl SamplingRecord {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn route(&self, t: usize) -> Option<&[usize]> {
        self.routing.as_ref().map(|r| r.steps[t].as_slice())
    }

    /// Tab-separated line: `tokens`, `logprobs`, `masks`, `routing`.
    ///
    /// Steps are joined with `|`. A mask is run-length encoded as
    /// alternating `T<n>`/`F<n>` runs. Routing is `-` when absent.
    /// Log-probabilities use Rust's shortest round-trip float formatting.
    pub fn to_line(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        let lps = self
            .old_logprobs
            .iter()
            .map(|x| format!("{x:?}"))
            .collect::<Vec<_>>()
            .join(",");
        let masks = self
            .masks
            .iter()
            .map(|m| rle_encode(m))
            .collect::<Vec<_>>()
            .join("|");
        let routing = match &self.routing {
            None => "-".to_string(),
            Some(r) => r
                .steps
                .iter()
                .map(|s| join(s))
                .collect::<Vec<_>>()
                .join("|"),
        };
        format!("{}\t{}\t{}\t{}", join(&self.tokens), lps, masks, routing)
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim_end_matches(['\n', '\r']).split('\t').collect();
        let [tokens, lps, masks, routing] = fields[..] else {
            return Err(LabError::Parse(format!(
                "expected 4 tab-separated fields, got {}",
                fields.len()
            )));
        };
        let split = |s: &str, sep: char| -> Vec<String> {
            if s.is_empty() {
                Vec::new()
            } else {
                s.split(sep).map(str::to_string).collect()
            }
        };
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| LabError::Parse(format!("{s:?}: {e}")))
        };
        let tokens = split(tokens, ',')
            .iter()
            .map(|s| parse_usize(s))
            .collect::<Result<Vec<_>>>()?;
        let old_logprobs = split(lps, ',')
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| LabError::Parse(format!("{s:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let masks = split(masks, '|')
            .iter()
            .map(|s| rle_decode(s))
            .collect::<Result<Vec<_>>>()?;
        let routing = if routing == "-" {
            None
        } else {
            let steps = split(routing, '|')
                .iter()
                .map(|s| {
                    split(s, ',')
                        .iter()
                        .map(|x| parse_usize(x))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Some(RoutingRecord { steps })
        };
        let rec = Self {
            tokens,
            old_logprobs,
            masks,
            routing,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if self.old_logprobs.len() != n || self.masks.len() != n {
            return Err(LabError::Parse("record fields disagree in length".into()));
        }
        if self.routing.as_ref().is_some_and(|r| r.steps.len() != n) {
            return Err(LabError::Parse(
                "routing length disagrees with tokens".into(),
            ));
        }
        for (t, (&tok, m)) in self.tokens.iter().zip(&self.masks).enumerate() {
            if m.get(tok) != Some(&true) {
                return Err(LabError::Parse(format!(
                    "step {t}: token {tok} is not allowed by its mask"
                )));
            }
        }
        if self.old_logprobs.iter().any(|x| !x.is_finite()) {
            return Err(LabError::Parse("non-finite log-probability".into()));
        }
        Ok(())
    }
}

fn rle_encode(mask: &[bool]) -> String {
    let mut out = String::new();
    let mut i = 0;
    while i < mask.len() {
        let v = mask[i];
        let run = mask[i..].iter().take_while(|&&x| x == v).count();
        let _ = write!(out, "{}{run}", if v { 'T' } else { 'F' });
        i += run;
    }
    out
}

fn rle_decode(s: &str) -> Result<Vec<bool>> {
    let mut out = Vec::new();
    let mut chars = s.char_indices().peekable();
    while let Some((start, c)) = chars.next() {
        let v = match c {
            'T' => true,
            'F' => false,
            _ => return Err(LabError::Parse(format!("bad mask run at {start} in {s:?}"))),
        };
        let mut digits = String::new();
        while let Some(&(_, d)) = chars.peek() {
            if !d.is_ascii_digit() {
                break;
            }
            digits.push(d);
            chars.next();
        }
        let n: usize = digits
            .parse()
            .map_err(|_| LabError::Parse(format!("missing run length in {s:?}")))?;
        out.extend(std::iter::repeat_n(v, n));
    }
    Ok(out)
}

/// Samples `group_size` rollouts of `max_len` tokens for one question.
///
/// Rollout `i` draws from `Stream::new(child_seed(seed, "policy.sample",
/// question), "policy.rollout", i)`; per step it first draws the
/// perturbation noise (one normal per vocabulary entry, only when
/// perturbation is non-zero) and then one uniform for the token.
pub fn sample_group(
    policy: &Policy,
    question: u64,
    group_size: usize,
    max_len: usize,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<Vec<SamplingRecord>> {
    if group_size < 2 {
        return Err(LabError::Invalid(
            "a group needs at least two outputs".into(),
        ));
    }
    if max_len == 0 {
        return Err(LabError::Invalid("max_len must be positive".into()));
    }
    if !(cfg.top_p > 0.0 && cfg.top_p <= 1.0) {
        return Err(LabError::Invalid(format!(
            "top_p = {} outside (0, 1]",
            cfg.top_p
        )));
    }
    let group_seed = Stream::child_seed(seed, "policy.sample", question);
    (0..group_size)
        .map(|i| {
            let mut rng = Stream::new(group_seed, "policy.rollout", i as u64);
            sample_one(policy, max_len, cfg, &mut rng)
        })
        .collect()
}

fn sample_one(
    policy: &Policy,
    max_len: usize,
    cfg: &SamplingConfig,
    rng: &mut Stream,
) -> Result<SamplingRecord> {
    let mut rec = SamplingRecord {
        tokens: Vec::with_capacity(max_len),
        old_logprobs: Vec::with_capacity(max_len),
        masks: Vec::with_capacity(max_len),
        routing: policy.is_moe().then(RoutingRecord::default),
    };
    for t in 0..max_len {
        let StepForward { mut logits, routed } = policy.forward(t);
        if cfg.perturbation != 0.0 {
            logits
                .iter_mut()
                .for_each(|x| *x += cfg.perturbation * rng.normal());
        }
        let scaled: Vec<f64> = logits.iter().map(|x| x / policy.temperature()).collect();
        let probs = softmax_masked(&scaled, None).expect("non-empty vocabulary");
        let mask = truncation_mask(&probs, cfg.top_p, cfg.top_k);
        let token = if cfg.greedy {
            // first maximum wins
            (0..probs.len())
                .filter(|&v| mask[v])
                .fold(None, |best: Option<usize>, v| match best {
                    Some(b) if probs[b] >= probs[v] => Some(b),
                    _ => Some(v),
                })
                .expect("mask keeps a token")
        } else {
            let allowed: Vec<f64> = probs
                .iter()
                .zip(&mask)
                .map(|(&p, &m)| if m { p } else { 0.0 })
                .collect();
            rng.categorical(&allowed)
        };
        let lp = masked_logprob_of_logits(&scaled, token, Some(&mask))?;
        rec.tokens.push(token);
        rec.old_logprobs.push(lp);
        rec.masks.push(mask);
        if let (Some(r), Some(route)) = (rec.routing.as_mut(), routed) {
            r.steps.push(route);
        }
    }
    Ok(rec)
}
