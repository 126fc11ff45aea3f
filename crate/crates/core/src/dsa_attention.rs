//! Sparse attention driven by a lightning indexer.
//!
//! The indexer scores every causal pair `(t, s)` with a few ReLU-gated dot
//! products, the selector keeps the top `k_select` positions per query, and
//! the main attention (absorbed MLA) runs only over those latent entries.
//! A masked dense evaluation in MHA mode serves as the reference.

use std::fmt;

use crate::error::{LabError, Result};
use crate::mla_attention::{
    absorbed_attention, build_latent_cache, mha_core, AttentionOutput, LatentCache, MacCounter,
    MlaParams, ModelDims,
};
use crate::numerics::{dot, topk_indices_with, Matrix, TieRule};
use crate::rng::Stream;

/// Lightning indexer projections.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexerParams {
    /// Per indexer head, `d_I × d` query projection.
    pub w_q: Vec<Matrix>,
    /// `d_I × d` key projection shared by all heads.
    pub w_k: Matrix,
    /// `H_I × d` head-weight projection.
    pub w_w: Matrix,
}

impl IndexerParams {
    pub fn random(dims: &ModelDims, rng: &mut Stream) -> Self {
        let d = dims.hidden;
        let sd = 1.0 / (d as f64).sqrt();
        Self {
            w_q: (0..dims.indexer_heads)
                .map(|_| Matrix::random_normal(dims.indexer_dim, d, sd, rng))
                .collect(),
            w_k: Matrix::random_normal(dims.indexer_dim, d, sd, rng),
            w_w: Matrix::random_normal(dims.indexer_heads, d, sd, rng),
        }
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn head_dim(&self) -> usize {
        self.w_k.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w_k.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, di) = (self.hidden(), self.head_dim());
        if self.heads() == 0 || d == 0 || di == 0 {
            return Err(LabError::Shape("indexer needs positive dimensions".into()));
        }
        if self.w_q.iter().any(|m| m.rows() != di || m.cols() != d)
            || self.w_w.rows() != self.heads()
            || self.w_w.cols() != d
        {
            return Err(LabError::Shape(
                "indexer projection shapes are inconsistent".into(),
            ));
        }
        Ok(())
    }

    /// Number of scalar parameters; the layout of [`Self::flatten`].
    pub fn len(&self) -> usize {
        self.w_q.iter().map(|m| m.data().len()).sum::<usize>()
            + self.w_k.data().len()
            + self.w_w.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Query heads, then key projection, then head weights, each row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for m in &self.w_q {
            out.extend_from_slice(m.data());
        }
        out.extend_from_slice(self.w_k.data());
        out.extend_from_slice(self.w_w.data());
        out
    }

    pub fn from_flat(template: &Self, flat: &[f64]) -> Result<Self> {
        if flat.len() != template.len() {
            return Err(LabError::Shape(format!(
                "expected {} indexer parameters, got {}",
                template.len(),
                flat.len()
            )));
        }
        let mut out = template.clone();
        let mut at = 0;
        for m in out.w_q.iter_mut().chain([&mut out.w_k, &mut out.w_w]) {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(out)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_q: self
                .w_q
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
            w_k: Matrix::zeros(self.w_k.rows(), self.w_k.cols()),
            w_w: Matrix::zeros(self.w_w.rows(), self.w_w.cols()),
        }
    }

    /// `self += scale · other`, entrywise.
    pub fn axpy(&mut self, scale: f64, other: &Self) {
        for (a, b) in self
            .w_q
            .iter_mut()
            .chain([&mut self.w_k, &mut self.w_w])
            .zip(other.w_q.iter().chain([&other.w_k, &other.w_w]))
        {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
    }
}

/// Causal index scores: row `t` holds `I[t, 0..=t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexScores {
    rows: Vec<Vec<f64>>,
}

impl IndexScores {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        for (t, r) in rows.iter().enumerate() {
            if r.len() != t + 1 {
                return Err(LabError::Shape(format!(
                    "score row {t} has length {}",
                    r.len()
                )));
            }
            if r.iter().any(|x| !x.is_finite()) {
                return Err(LabError::NonFinite(format!("index score row {t}")));
            }
        }
        Ok(Self { rows })
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

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Per query `t`, the ascending positions `S_t ⊆ {0..=t}` it may attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionSet {
    rows: Vec<Vec<usize>>,
}

impl SelectionSet {
    /// Checks causality, ordering and uniqueness; sizes are not constrained so
    /// arbitrary patterns can be simulated.
    pub fn new(rows: Vec<Vec<usize>>) -> Result<Self> {
        for (t, r) in rows.iter().enumerate() {
            if r.is_empty() {
                return Err(LabError::Empty(format!("selection for query {t}")));
            }
            if r.windows(2).any(|w| w[0] >= w[1]) {
                return Err(LabError::Invalid(format!(
                    "selection row {t} is not strictly ascending"
                )));
            }
            if r.last().is_some_and(|&s| s > t) {
                return Err(LabError::Invalid(format!(
                    "selection row {t} reaches the future"
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn full(len: usize) -> Self {
        Self {
            rows: (0..len).map(|t| (0..=t).collect()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, t: usize) -> &[usize] {
        &self.rows[t]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn contains(&self, t: usize, s: usize) -> bool {
        self.rows[t].binary_search(&s).is_ok()
    }
}

fn check_hidden(h_seq: &Matrix, ip: &IndexerParams) -> Result<()> {
    ip.validate()?;
    if h_seq.cols() != ip.hidden() {
        return Err(LabError::Shape(format!(
            "hidden rows have width {}, indexer expects {}",
            h_seq.cols(),
            ip.hidden()
        )));
    }
    Ok(())
}

/// Projected indexer activations for one sequence.
pub(crate) struct IndexerActivations {
    /// `q[t][j]`, width `d_I`.
    pub q: Vec<Vec<Vec<f64>>>,
    /// `k[s]`, width `d_I`.
    pub k: Vec<Vec<f64>>,
    /// `w[t][j]`.
    pub w: Vec<Vec<f64>>,
}

pub(crate) fn indexer_activations(h_seq: &Matrix, ip: &IndexerParams) -> IndexerActivations {
    let len = h_seq.rows();
    IndexerActivations {
        q: (0..len)
            .map(|t| ip.w_q.iter().map(|m| m.matvec(h_seq.row(t))).collect())
            .collect(),
        k: (0..len).map(|s| ip.w_k.matvec(h_seq.row(s))).collect(),
        w: (0..len).map(|t| ip.w_w.matvec(h_seq.row(t))).collect(),
    }
}

/// `I[t, s] = Σ_j w[t, j] · ReLU(q[t, j] · k[s])` for every `s ≤ t`.
pub fn indexer_scores(h_seq: &Matrix, ip: &IndexerParams) -> Result<IndexScores> {
    indexer_scores_impl(h_seq, ip, None)
}

/// As [`indexer_scores`], tallying `H_I · (d_I + 1)` multiply-accumulates
/// per causal pair: one `d_I`-wide dot product and one weighted accumulate
/// per head.
pub fn indexer_scores_counted(
    h_seq: &Matrix,
    ip: &IndexerParams,
    counter: &mut MacCounter,
) -> Result<IndexScores> {
    indexer_scores_impl(h_seq, ip, Some(counter))
}

fn indexer_scores_impl(
    h_seq: &Matrix,
    ip: &IndexerParams,
    mut counter: Option<&mut MacCounter>,
) -> Result<IndexScores> {
    check_hidden(h_seq, ip)?;
    let acts = indexer_activations(h_seq, ip);
    let per_pair = (ip.heads() * (ip.head_dim() + 1)) as u64;
    let mut rows = Vec::with_capacity(h_seq.rows());
    for t in 0..h_seq.rows() {
        let row: Vec<f64> = (0..=t)
            .map(|s| {
                acts.q[t]
                    .iter()
                    .zip(&acts.w[t])
                    .map(|(q, &w)| w * dot(q, &acts.k[s]).max(0.0))
                    .sum()
            })
            .collect();
        if let Some(c) = counter.as_deref_mut() {
            c.indexer += (t as u64 + 1) * per_pair;
        }
        rows.push(row);
    }
    IndexScores::from_rows(rows)
}

pub fn select_topk(scores: &IndexScores, k_select: usize) -> Result<SelectionSet> {
    select_topk_with(scores, k_select, TieRule::SmallerIndex)
}

pub fn select_topk_with(
    scores: &IndexScores,
    k_select: usize,
    rule: TieRule,
) -> Result<SelectionSet> {
    if k_select == 0 {
        return Err(LabError::Invalid("k_select must be at least 1".into()));
    }
    let rows = scores
        .rows()
        .iter()
        .map(|r| topk_indices_with(r, k_select, rule))
        .collect::<Result<Vec<_>>>()?;
    Ok(SelectionSet { rows })
}

fn check_selection(len: usize, sel: &SelectionSet) -> Result<()> {
    if sel.len() != len {
        return Err(LabError::Shape(format!(
            "selection covers {} queries, sequence has {len}",
            sel.len()
        )));
    }
    Ok(())
}

/// Absorbed attention where query `t` normalizes only over `S_t`.
pub fn sparse_attention(
    h_seq: &Matrix,
    mp: &MlaParams,
    sel: &SelectionSet,
) -> Result<AttentionOutput> {
    let cache = build_latent_cache(h_seq, mp)?;
    sparse_attention_over_cache(h_seq, &cache, mp, sel, None)
}

pub fn sparse_attention_counted(
    h_seq: &Matrix,
    mp: &MlaParams,
    sel: &SelectionSet,
    counter: &mut MacCounter,
) -> Result<AttentionOutput> {
    let cache = build_latent_cache(h_seq, mp)?;
    sparse_attention_over_cache(h_seq, &cache, mp, sel, Some(counter))
}

/// Sparse attention of query rows `h_seq` over an explicit latent cache.
pub fn sparse_attention_over_cache(
    h_seq: &Matrix,
    cache: &LatentCache,
    mp: &MlaParams,
    sel: &SelectionSet,
    counter: Option<&mut MacCounter>,
) -> Result<AttentionOutput> {
    check_selection(h_seq.rows(), sel)?;
    absorbed_attention(h_seq, cache, mp, |t| sel.row(t).to_vec(), counter)
}

/// Dense MHA-mode attention with unselected scores forced to `-inf`.
pub fn masked_dense_simulation(
    h_seq: &Matrix,
    mp: &MlaParams,
    sel: &SelectionSet,
) -> Result<AttentionOutput> {
    check_selection(h_seq.rows(), sel)?;
    let keep = |t: usize, s: usize| sel.contains(t, s);
    mha_core(h_seq, mp, Some(&keep)).map(|(u, _)| u)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    Dense,
    Sparse,
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dense => "dense",
            Self::Sparse => "sparse",
        })
    }
}

/// Exact multiply-accumulate tallies for one pipeline evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub mode: AttentionMode,
    pub len: usize,
    pub k_select: usize,
    pub indexer_macs: u64,
    pub score_macs: u64,
    pub mix_macs: u64,
}

impl CostReport {
    pub const CSV_HEADER: &'static str = "mode,L,k_select,indexer_macs,score_macs,mix_macs";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.mode, self.len, self.k_select, self.indexer_macs, self.score_macs, self.mix_macs
        )
    }

    pub fn counters(&self) -> MacCounter {
        MacCounter {
            indexer: self.indexer_macs,
            score: self.score_macs,
            mix: self.mix_macs,
        }
    }
}

/// Closed-form tallies of the indexer plus main-attention pair work.
///
/// Attended pairs are `Σ_t (t+1)` dense and `Σ_t min(k, t+1)` sparse; each
/// costs `H · d_c` for the score and again for the mix. The indexer always
/// scores all `Σ_t (t+1)` pairs at `H_I · (d_I + 1)` each. Per-query
/// projections are linear in `L` and not counted.
pub fn count_operations(dims: &ModelDims, len: usize, mode: AttentionMode) -> CostReport {
    let len_u = len as u64;
    let k = dims.k_select as u64;
    let all_pairs = len_u * (len_u + 1) / 2;
    let attended = match mode {
        AttentionMode::Dense => all_pairs,
        // rows t < k contribute t+1, the remaining rows contribute k
        AttentionMode::Sparse => {
            let saturated = k.min(len_u);
            saturated * (saturated + 1) / 2 + (len_u - saturated) * k
        }
    };
    let per_pair = (dims.heads * dims.latent_dim) as u64;
    CostReport {
        mode,
        len,
        k_select: dims.k_select,
        indexer_macs: all_pairs * (dims.indexer_heads * (dims.indexer_dim + 1)) as u64,
        score_macs: attended * per_pair,
        mix_macs: attended * per_pair,
    }
}

/// Runs the full indexer → selection → attention pipeline with counters on.
/// Dense mode still evaluates the indexer but attends to every causal entry.
pub fn run_instrumented(
    h_seq: &Matrix,
    mp: &MlaParams,
    ip: &IndexerParams,
    k_select: usize,
    mode: AttentionMode,
) -> Result<(AttentionOutput, MacCounter)> {
    let mut counter = MacCounter::default();
    let scores = indexer_scores_counted(h_seq, ip, &mut counter)?;
    let sel = match mode {
        AttentionMode::Dense => SelectionSet::full(h_seq.rows()),
        AttentionMode::Sparse => select_topk(&scores, k_select)?,
    };
    let out = sparse_attention_counted(h_seq, mp, &sel, &mut counter)?;
    Ok((out, counter))
}
