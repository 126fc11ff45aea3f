//! Indexer alignment: a target distribution from the main attention, the
//! dense warm-up and sparse-stage KL losses, and gradient descent on the
//! indexer alone.
//!
//! The main model enters only through a [`DetachedBatch`], a snapshot of the
//! hidden rows and the head-summed target taken once. Nothing computed from
//! the batch can reach `MlaParams` or the live hidden states, so the
//! indexer is optimized only by its own loss.

use std::fmt;

use crate::dsa_attention::{
    indexer_activations, select_topk, IndexScores, IndexerParams, SelectionSet,
};
use crate::error::{LabError, Result};
use crate::mla_attention::{mha_attention_weights, MlaParams};
use crate::numerics::{dot, kl_divergence, l1_normalize, softmax, Matrix};

/// Learning rate of the dense warm-up stage.
pub const WARMUP_LR: f64 = 1e-3;
/// Learning rate of the sparse training stage.
pub const SPARSE_LR: f64 = 7.3e-6;
/// Production warm-up length: 1000 steps of 16 × 128K tokens (2.1B tokens).
pub const PRODUCTION_WARMUP_STEPS: usize = 1000;
/// Production sparse-stage length: 15000 steps of 480 × 128K tokens (943.7B tokens).
pub const PRODUCTION_SPARSE_STEPS: usize = 15000;

/// Row `t` is a distribution over positions `0..=t`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetDistribution {
    rows: Vec<Vec<f64>>,
}

impl TargetDistribution {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (t, r) in rows.iter().enumerate() {
            if r.len() != t + 1 {
                return Err(LabError::Shape(format!(
                    "target row {t} has length {}",
                    r.len()
                )));
            }
            l1_normalize(r).map_err(|e| LabError::Degenerate(format!("target row {t}: {e}")))?;
            let sum: f64 = r.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(LabError::Degenerate(format!(
                    "target row {t} sums to {sum}"
                )));
            }
        }
        Ok(Self { rows })
    }

    /// Uses each score row's own softmax as the target; the fixed point of
    /// both losses.
    pub fn from_scores(scores: &IndexScores) -> Self {
        Self {
            rows: scores.rows().iter().map(|r| softmax(r)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.rows[t]
    }
}

/// Sum the per-head causal weight grids, then L1-normalize each row.
pub fn target_distribution(attn_weights: &[Matrix]) -> Result<TargetDistribution> {
    let first = attn_weights
        .first()
        .ok_or_else(|| LabError::Empty("no attention heads".into()))?;
    let len = first.rows();
    if attn_weights
        .iter()
        .any(|w| w.rows() != len || w.cols() < len)
    {
        return Err(LabError::Shape("attention grids disagree in shape".into()));
    }
    let rows = (0..len)
        .map(|t| {
            let summed: Vec<f64> = (0..=t)
                .map(|s| attn_weights.iter().map(|w| w.get(t, s)).sum())
                .collect();
            l1_normalize(&summed)
                .map(|p| p.into_inner())
                .map_err(|e| LabError::Degenerate(format!("target row {t}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TargetDistribution { rows })
}

/// Indexer inputs cut off from the main model.
#[derive(Clone, Debug, PartialEq)]
pub struct DetachedBatch {
    pub hidden: Matrix,
    pub target: TargetDistribution,
}

impl DetachedBatch {
    /// Runs dense MHA-mode attention once and freezes its head-summed target.
    pub fn from_main_model(h_seq: &Matrix, mp: &MlaParams) -> Result<Self> {
        let weights = mha_attention_weights(h_seq, mp)?;
        Ok(Self {
            hidden: h_seq.clone(),
            target: target_distribution(&weights)?,
        })
    }

    pub fn new(hidden: Matrix, target: TargetDistribution) -> Result<Self> {
        if hidden.rows() != target.len() {
            return Err(LabError::Shape(format!(
                "{} hidden rows but {} target rows",
                hidden.rows(),
                target.len()
            )));
        }
        Ok(Self { hidden, target })
    }
}

/// Loss value with its gradient over the indexer parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexerLoss {
    pub value: f64,
    pub grad: IndexerParams,
    /// Queries skipped because the selection held no target mass.
    pub skipped_rows: Vec<usize>,
}

/// Σ_t KL(p_t ‖ softmax(I_t)) without gradients.
pub fn warmup_loss_value(p: &TargetDistribution, scores: &IndexScores) -> Result<f64> {
    check_rows(p, scores)?;
    (0..p.len())
        .map(|t| kl_divergence(p.row(t), &softmax(scores.row(t))))
        .sum()
}

/// Sparse-stage loss without gradients. Returns the value and skipped rows.
pub fn sparse_stage_loss_value(
    p: &TargetDistribution,
    scores: &IndexScores,
    sel: &SelectionSet,
) -> Result<(f64, Vec<usize>)> {
    check_rows(p, scores)?;
    check_selection(p, sel)?;
    let mut value = 0.0;
    let mut skipped = Vec::new();
    for t in 0..p.len() {
        match restricted_row(p.row(t), scores.row(t), sel.row(t)) {
            Some((pr, ir)) => value += kl_divergence(&pr, &softmax(&ir))?,
            None => skipped.push(t),
        }
    }
    Ok((value, skipped))
}

fn check_rows(p: &TargetDistribution, scores: &IndexScores) -> Result<()> {
    if p.len() != scores.len() {
        return Err(LabError::Shape(format!(
            "target has {} rows, scores have {}",
            p.len(),
            scores.len()
        )));
    }
    Ok(())
}

fn check_selection(p: &TargetDistribution, sel: &SelectionSet) -> Result<()> {
    if sel.len() != p.len() {
        return Err(LabError::Shape(format!(
            "selection has {} rows, target has {}",
            sel.len(),
            p.len()
        )));
    }
    Ok(())
}

/// Restricts a target row and a score row to `selected`, renormalizing the
/// target; `None` when the selection carries no target mass.
fn restricted_row(p: &[f64], scores: &[f64], selected: &[usize]) -> Option<(Vec<f64>, Vec<f64>)> {
    let mass: Vec<f64> = selected.iter().map(|&s| p[s]).collect();
    let pr = l1_normalize(&mass).ok()?.into_inner();
    let ir = selected.iter().map(|&s| scores[s]).collect();
    Some((pr, ir))
}

/// Dense warm-up loss over the full causal prefix of every query.
pub fn warmup_loss(batch: &DetachedBatch, ip: &IndexerParams) -> Result<IndexerLoss> {
    let len = batch.hidden.rows();
    loss_with_grad(batch, ip, &SelectionSet::full(len))
}

/// Sparse-stage loss over the selected positions only.
pub fn sparse_stage_loss(
    batch: &DetachedBatch,
    ip: &IndexerParams,
    sel: &SelectionSet,
) -> Result<IndexerLoss> {
    check_selection(&batch.target, sel)?;
    loss_with_grad(batch, ip, sel)
}

/// Back-propagates `Σ_t KL(p̂_t ‖ softmax(I_{t,S_t}))` through the indexer.
///
/// With `g[t,s] = softmax(I_{t,S_t})_s − p̂_{t,s}` on `S_t`:
/// `∂/∂w[t,j] = Σ_s g·ReLU(z)`, `∂/∂z[t,s,j] = g·w[t,j]·1[z>0]`,
/// `z = q[t,j]·k[s]`, and the projections are linear in the hidden rows.
fn loss_with_grad(
    batch: &DetachedBatch,
    ip: &IndexerParams,
    sel: &SelectionSet,
) -> Result<IndexerLoss> {
    let h = &batch.hidden;
    if h.cols() != ip.hidden() {
        return Err(LabError::Shape(format!(
            "hidden rows have width {}, indexer expects {}",
            h.cols(),
            ip.hidden()
        )));
    }
    ip.validate()?;
    let len = h.rows();
    let acts = indexer_activations(h, ip);
    let heads = ip.heads();
    let di = ip.head_dim();

    let mut grad = ip.zeros_like();
    let mut grad_k: Vec<Vec<f64>> = vec![vec![0.0; di]; len];
    let mut value = 0.0;
    let mut skipped = Vec::new();

    for t in 0..len {
        let selected = sel.row(t);
        let zs: Vec<Vec<f64>> = selected
            .iter()
            .map(|&s| acts.q[t].iter().map(|q| dot(q, &acts.k[s])).collect())
            .collect();
        let scores: Vec<f64> = zs
            .iter()
            .map(|z| z.iter().zip(&acts.w[t]).map(|(z, w)| w * z.max(0.0)).sum())
            .collect();
        let mass: Vec<f64> = selected.iter().map(|&s| batch.target.row(t)[s]).collect();
        let Ok(p_hat) = l1_normalize(&mass) else {
            skipped.push(t);
            continue;
        };
        let q_soft = softmax(&scores);
        value += kl_divergence(p_hat.values(), &q_soft)?;

        let mut grad_w = vec![0.0; heads];
        let mut grad_q = vec![vec![0.0; di]; heads];
        for (n, &s) in selected.iter().enumerate() {
            let g = q_soft[n] - p_hat.values()[n];
            if g == 0.0 {
                continue;
            }
            for j in 0..heads {
                let z = zs[n][j];
                if z > 0.0 {
                    grad_w[j] += g * z;
                    let gz = g * acts.w[t][j];
                    for a in 0..di {
                        grad_q[j][a] += gz * acts.k[s][a];
                        grad_k[s][a] += gz * acts.q[t][j][a];
                    }
                }
            }
        }
        let ht = h.row(t);
        for j in 0..heads {
            grad.w_q[j].add_outer(&grad_q[j], ht, 1.0);
        }
        grad.w_w.add_outer(&grad_w, ht, 1.0);
    }
    for (s, gk) in grad_k.iter().enumerate() {
        grad.w_k.add_outer(gk, h.row(s), 1.0);
    }
    if !value.is_finite() {
        return Err(LabError::NonFinite("indexer loss".into()));
    }
    Ok(IndexerLoss {
        value,
        grad,
        skipped_rows: skipped,
    })
}

/// A seeded toy model for schedule runs: random attention and indexer
/// parameters plus Gaussian hidden rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyIndexerInstance {
    pub dims: crate::mla_attention::ModelDims,
    pub mla: MlaParams,
    pub indexer: IndexerParams,
    pub hidden: Matrix,
}

impl ToyIndexerInstance {
    pub fn new(dims: crate::mla_attention::ModelDims, len: usize, seed: u64) -> Result<Self> {
        dims.validate()?;
        if len == 0 {
            return Err(LabError::Invalid("sequence length must be positive".into()));
        }
        let mut rng = crate::rng::Stream::new(seed, "indexer.toy", 0);
        let mla = MlaParams::random(&dims, &mut rng);
        let indexer = IndexerParams::random(&dims, &mut rng);
        let hidden = Matrix::random_normal(len, dims.hidden, 1.0, &mut rng);
        Ok(Self {
            dims,
            mla,
            indexer,
            hidden,
        })
    }

    pub fn batch(&self) -> Result<DetachedBatch> {
        DetachedBatch::from_main_model(&self.hidden, &self.mla)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Warmup,
    Sparse,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Warmup => "warmup",
            Self::Sparse => "sparse",
        })
    }
}

/// Two-stage indexer schedule settings. Step counts default to desk scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub warmup_lr: f64,
    pub sparse_lr: f64,
    pub warmup_steps: usize,
    pub sparse_steps: usize,
    pub k_select: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            warmup_lr: WARMUP_LR,
            sparse_lr: SPARSE_LR,
            warmup_steps: 200,
            sparse_steps: 1000,
            k_select: crate::mla_attention::DEFAULT_K_SELECT,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub stage: Stage,
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub records: Vec<LossRecord>,
    /// Total sparse-stage rows skipped for lack of target mass.
    pub skipped_rows: usize,
}

impl LossTrace {
    pub const CSV_HEADER: &'static str = "stage,step,loss";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{},{:e}\n", r.stage, r.step, r.loss));
        }
        out
    }

    pub fn stage(&self, stage: Stage) -> impl Iterator<Item = &LossRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }
}

/// Plain gradient descent on the warm-up loss, then on the sparse-stage
/// loss with the selection recomputed from the current indexer every step.
/// Attention parameters stay frozen; each record is the loss before that
/// step's update.
pub fn run_two_stage_schedule(
    config: &ScheduleConfig,
    batch: &DetachedBatch,
    initial: &IndexerParams,
) -> Result<(IndexerParams, LossTrace)> {
    if config.warmup_steps == 0 && config.sparse_steps == 0 {
        return Err(LabError::Invalid("schedule needs at least one step".into()));
    }
    let mut ip = initial.clone();
    let mut trace = LossTrace::default();
    let mut global = 0;
    for step in 0..config.warmup_steps {
        let loss = warmup_loss(batch, &ip)?;
        if !loss.value.is_finite() {
            return Err(LabError::Diverged {
                step: global,
                what: "warm-up loss".into(),
            });
        }
        trace.records.push(LossRecord {
            stage: Stage::Warmup,
            step,
            loss: loss.value,
        });
        ip.axpy(-config.warmup_lr, &loss.grad);
        global += 1;
    }
    for step in 0..config.sparse_steps {
        let scores = crate::dsa_attention::indexer_scores(&batch.hidden, &ip).map_err(|_| {
            LabError::Diverged {
                step: global,
                what: "index scores".into(),
            }
        })?;
        let sel = select_topk(&scores, config.k_select)?;
        let loss = sparse_stage_loss(batch, &ip, &sel)?;
        if !loss.value.is_finite() {
            return Err(LabError::Diverged {
                step: global,
                what: "sparse-stage loss".into(),
            });
        }
        trace.skipped_rows += loss.skipped_rows.len();
        trace.records.push(LossRecord {
            stage: Stage::Sparse,
            step,
            loss: loss.value,
        });
        ip.axpy(-config.sparse_lr, &loss.grad);
        global += 1;
    }
    Ok((ip, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsa_attention::indexer_scores;
    use crate::mla_attention::ModelDims;
    use crate::numerics::{finite_diff_grad, max_rel_deviation};
    use crate::rng::Stream;

    fn dims(len_k: usize) -> ModelDims {
        ModelDims {
            hidden: 6,
            heads: 2,
            head_dim: 3,
            latent_dim: 4,
            indexer_heads: 2,
            indexer_dim: 3,
            k_select: len_k,
        }
    }

    fn instance(seed: u64, len: usize) -> (DetachedBatch, IndexerParams, MlaParams) {
        let dm = dims(3);
        let mut rng = Stream::new(seed, "test.indexer", 0);
        let mp = MlaParams::random(&dm, &mut rng);
        let ip = IndexerParams::random(&dm, &mut rng);
        let h = Matrix::random_normal(len, dm.hidden, 1.0, &mut rng);
        (DetachedBatch::from_main_model(&h, &mp).unwrap(), ip, mp)
    }

    fn fd_check(batch: &DetachedBatch, ip: &IndexerParams, sel: &SelectionSet) -> f64 {
        let analytic = loss_with_grad(batch, ip, sel).unwrap().grad.flatten();
        let f = |x: &[f64]| {
            let p = IndexerParams::from_flat(ip, x).unwrap();
            let scores = indexer_scores(&batch.hidden, &p).unwrap();
            sparse_stage_loss_value(&batch.target, &scores, sel)
                .unwrap()
                .0
        };
        let fd = finite_diff_grad(f, &ip.flatten(), 1e-6).unwrap();
        max_rel_deviation(&analytic, &fd)
    }

    #[test]
    fn identical_heads_give_that_head() {
        let mut rng = Stream::new(1, "test.target", 0);
        let raw = Matrix::random_normal(4, 4, 1.0, &mut rng);
        let head = Matrix::from_fn(4, 4, |t, s| {
            if s <= t {
                raw.get(t, s).abs() + 0.1
            } else {
                0.0
            }
        });
        let head = Matrix::from_fn(4, 4, |t, s| {
            head.get(t, s) / (0..=t).map(|x| head.get(t, x)).sum::<f64>()
        });
        let p = target_distribution(&[head.clone(), head.clone(), head.clone()]).unwrap();
        for t in 0..4 {
            assert!(max_rel_deviation(p.row(t), &head.row(t)[..=t]) < 1e-15);
        }
        let single = target_distribution(&[Matrix::from_rows(&[vec![1.0]]).unwrap()]).unwrap();
        assert_eq!(single.row(0), &[1.0]);
    }

    #[test]
    fn two_heads_sum_then_normalize() {
        let (batch, _, _) = instance(2, 5);
        let dm = dims(3);
        let mut rng = Stream::new(2, "test.indexer", 0);
        let mp = MlaParams::random(&dm, &mut rng);
        let w = mha_attention_weights(&batch.hidden, &mp).unwrap();
        let p = target_distribution(&w).unwrap();
        for t in 0..5 {
            let sums: Vec<f64> = (0..=t).map(|s| w[0].get(t, s) + w[1].get(t, s)).collect();
            let z: f64 = sums.iter().sum();
            for s in 0..=t {
                assert!((p.row(t)[s] - sums[s] / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_target_row_rejected() {
        let zero = Matrix::zeros(2, 2);
        assert!(matches!(
            target_distribution(&[zero]),
            Err(LabError::Degenerate(_))
        ));
    }

    #[test]
    fn self_target_has_zero_loss_and_gradient() {
        let (batch, ip, _) = instance(3, 6);
        let scores = indexer_scores(&batch.hidden, &ip).unwrap();
        let fixed = DetachedBatch::new(
            batch.hidden.clone(),
            TargetDistribution::from_scores(&scores),
        )
        .unwrap();
        let loss = warmup_loss(&fixed, &ip).unwrap();
        assert!(loss.value.abs() < 1e-9);
        assert!(loss.grad.flatten().iter().all(|g| g.abs() < 1e-9));
    }

    #[test]
    fn point_mass_against_flat_scores_costs_ln2() {
        let p = TargetDistribution::from_rows(vec![vec![1.0], vec![1.0, 0.0]]).unwrap();
        let scores = IndexScores::from_rows(vec![vec![0.3], vec![0.0, 0.0]]).unwrap();
        let v = warmup_loss_value(&p, &scores).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn warmup_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let (batch, ip, _) = instance(10 + seed, 6);
            let err = fd_check(&batch, &ip, &SelectionSet::full(6));
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn sparse_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let (batch, ip, _) = instance(20 + seed, 7);
            let sel = select_topk(&indexer_scores(&batch.hidden, &ip).unwrap(), 3).unwrap();
            let err = fd_check(&batch, &ip, &sel);
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn saturated_selection_equals_warmup() {
        let (batch, ip, _) = instance(4, 6);
        let a = warmup_loss(&batch, &ip).unwrap();
        let b = sparse_stage_loss(&batch, &ip, &SelectionSet::full(6)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn singleton_rows_contribute_nothing() {
        let (batch, ip, _) = instance(5, 5);
        let sel = SelectionSet::new((0..5).map(|t| vec![t]).collect()).unwrap();
        let loss = sparse_stage_loss(&batch, &ip, &sel).unwrap();
        assert!(loss.value.abs() < 1e-15);
    }

    #[test]
    fn massless_rows_are_skipped_and_reported() {
        let p = TargetDistribution::from_rows(vec![vec![1.0], vec![1.0, 0.0], vec![0.5, 0.5, 0.0]])
            .unwrap();
        let scores =
            IndexScores::from_rows(vec![vec![0.0], vec![0.0, 1.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let sel = SelectionSet::new(vec![vec![0], vec![1], vec![0, 2]]).unwrap();
        let (v, skipped) = sparse_stage_loss_value(&p, &scores, &sel).unwrap();
        assert_eq!(skipped, vec![1]);
        // row 2 restricted target is [1, 0] against softmax([0, 1])
        let want = -(1.0 / (1.0 + 1f64.exp())).ln();
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn main_model_perturbation_does_not_reach_the_loss() {
        let (batch, ip, mut mp) = instance(6, 6);
        let before = warmup_loss(&batch, &ip).unwrap();
        mp.w_q.iter_mut().for_each(|m| m.scale(3.0));
        mp.w_dkv.scale(-1.0);
        let _ = DetachedBatch::from_main_model(&batch.hidden, &mp).unwrap();
        let after = warmup_loss(&batch, &ip).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn zero_learning_rate_gives_flat_trace() {
        let (batch, ip, _) = instance(7, 8);
        let cfg = ScheduleConfig {
            warmup_lr: 0.0,
            sparse_lr: 0.0,
            warmup_steps: 5,
            sparse_steps: 5,
            k_select: 3,
        };
        let (_, trace) = run_two_stage_schedule(&cfg, &batch, &ip).unwrap();
        let w: Vec<f64> = trace.stage(Stage::Warmup).map(|r| r.loss).collect();
        let s: Vec<f64> = trace.stage(Stage::Sparse).map(|r| r.loss).collect();
        assert!(w.windows(2).all(|x| x[0] == x[1]));
        assert!(s.windows(2).all(|x| x[0] == x[1]));
        assert_eq!(trace.records.len(), 10);
    }

    #[test]
    fn fixed_point_schedule_stays_at_zero() {
        let (batch, ip, _) = instance(8, 8);
        let scores = indexer_scores(&batch.hidden, &ip).unwrap();
        let fixed = DetachedBatch::new(
            batch.hidden.clone(),
            TargetDistribution::from_scores(&scores),
        )
        .unwrap();
        let cfg = ScheduleConfig {
            warmup_steps: 20,
            sparse_steps: 20,
            k_select: 8,
            ..ScheduleConfig::default()
        };
        let (_, trace) = run_two_stage_schedule(&cfg, &fixed, &ip).unwrap();
        assert!(trace.records.iter().all(|r| r.loss.abs() < 1e-9));
    }

    #[test]
    fn defaults_carry_production_learning_rates() {
        let cfg = ScheduleConfig::default();
        assert_eq!(cfg.warmup_lr, 1e-3);
        assert_eq!(cfg.sparse_lr, 7.3e-6);
        assert_eq!((cfg.warmup_steps, cfg.sparse_steps), (200, 1000));
        assert_eq!(cfg.k_select, 2048);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let trace = LossTrace {
            records: vec![LossRecord {
                stage: Stage::Warmup,
                step: 0,
                loss: 0.5,
            }],
            skipped_rows: 0,
        };
        assert_eq!(trace.to_csv(), "stage,step,loss\nwarmup,0,5e-1\n");
    }
}
