//! Multi-head latent attention over a shared latent cache.
//!
//! Keys and values for head `h` are up-projections of one latent vector per
//! token, `K_h(s) = W_uk[h] c_s` and `V_h(s) = W_uv[h] c_s` with
//! `c_s = W_dkv h_s`. The MHA mode materializes per-head keys and values;
//! the MQA mode absorbs `W_uk[h]` into the query and `W_uv[h]` into the
//! output so every head scores and mixes the same latent entries. In exact
//! arithmetic the two are identical. No positional channel is modelled.

use crate::error::{LabError, Result};
use crate::numerics::{dot, softmax_masked, Matrix};
use crate::rng::Stream;

/// Dimensional configuration for attention and the indexer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    /// Hidden width `d`.
    pub hidden: usize,
    /// Attention head count `H`.
    pub heads: usize,
    /// Per-head width `d_h`.
    pub head_dim: usize,
    /// Latent width `d_c`.
    pub latent_dim: usize,
    /// Indexer head count `H_I`.
    pub indexer_heads: usize,
    /// Indexer head width `d_I`.
    pub indexer_dim: usize,
    /// Key-value entries kept per query.
    pub k_select: usize,
}

/// Production selection budget per query token.
pub const DEFAULT_K_SELECT: usize = 2048;

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            hidden: 16,
            heads: 4,
            head_dim: 8,
            latent_dim: 8,
            indexer_heads: 2,
            indexer_dim: 8,
            k_select: DEFAULT_K_SELECT,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("latent_dim", self.latent_dim),
            ("indexer_heads", self.indexer_heads),
            ("indexer_dim", self.indexer_dim),
            ("k_select", self.k_select),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(LabError::Invalid(format!(
                "dimension {name} must be positive"
            ))),
            None => Ok(()),
        }
    }
}

/// Learnable projections of one MLA layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MlaParams {
    /// `d_c × d` latent down-projection.
    pub w_dkv: Matrix,
    /// Per head, `d_h × d_c` key up-projection.
    pub w_uk: Vec<Matrix>,
    /// Per head, `d_h × d_c` value up-projection.
    pub w_uv: Vec<Matrix>,
    /// Per head, `d_h × d` query projection.
    pub w_q: Vec<Matrix>,
    /// `d × (H · d_h)` output projection.
    pub w_o: Matrix,
}

impl MlaParams {
    /// Gaussian initialization with `1/√fan_in` scaling.
    pub fn random(dims: &ModelDims, rng: &mut Stream) -> Self {
        let d = dims.hidden;
        let dc = dims.latent_dim;
        let dh = dims.head_dim;
        let sd = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let w_dkv = Matrix::random_normal(dc, d, sd(d), rng);
        let w_uk = (0..dims.heads)
            .map(|_| Matrix::random_normal(dh, dc, sd(dc), rng))
            .collect();
        let w_uv = (0..dims.heads)
            .map(|_| Matrix::random_normal(dh, dc, sd(dc), rng))
            .collect();
        let w_q = (0..dims.heads)
            .map(|_| Matrix::random_normal(dh, d, sd(d), rng))
            .collect();
        let w_o = Matrix::random_normal(d, dims.heads * dh, sd(dims.heads * dh), rng);
        Self {
            w_dkv,
            w_uk,
            w_uv,
            w_q,
            w_o,
        }
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn hidden(&self) -> usize {
        self.w_dkv.cols()
    }

    pub fn latent_dim(&self) -> usize {
        self.w_dkv.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.w_q.first().map_or(0, Matrix::rows)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, dc, dh, h) = (
            self.hidden(),
            self.latent_dim(),
            self.head_dim(),
            self.heads(),
        );
        if h == 0 || d == 0 || dc == 0 || dh == 0 {
            return Err(LabError::Shape(
                "MLA parameters need positive dimensions".into(),
            ));
        }
        if self.w_uk.len() != h || self.w_uv.len() != h {
            return Err(LabError::Shape(
                "per-head projection counts disagree".into(),
            ));
        }
        let bad = |m: &Matrix, r: usize, c: usize| m.rows() != r || m.cols() != c;
        if self.w_uk.iter().chain(&self.w_uv).any(|m| bad(m, dh, dc))
            || self.w_q.iter().any(|m| bad(m, dh, d))
            || bad(&self.w_o, d, h * dh)
        {
            return Err(LabError::Shape(
                "MLA projection shapes are inconsistent".into(),
            ));
        }
        Ok(())
    }

    /// Reorders heads, moving the matching `W_o` column blocks with them.
    pub fn permute_heads(&self, order: &[usize]) -> Self {
        let dh = self.head_dim();
        let pick = |v: &Vec<Matrix>| order.iter().map(|&h| v[h].clone()).collect();
        let w_o = Matrix::from_fn(self.w_o.rows(), self.w_o.cols(), |i, j| {
            let (slot, off) = (j / dh, j % dh);
            self.w_o.get(i, order[slot] * dh + off)
        });
        Self {
            w_dkv: self.w_dkv.clone(),
            w_uk: pick(&self.w_uk),
            w_uv: pick(&self.w_uv),
            w_q: pick(&self.w_q),
            w_o,
        }
    }
}

/// One latent vector per token position. Append-only.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatentCache {
    entries: Vec<Vec<f64>>,
}

impl LatentCache {
    pub fn push(&mut self, c: Vec<f64>) {
        self.entries.push(c);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, s: usize) -> &[f64] {
        &self.entries[s]
    }

    pub fn entry_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.entries[s]
    }

    pub fn entries(&self) -> &[Vec<f64>] {
        &self.entries
    }
}

/// Output rows `u_t`, one per query position.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    pub u: Matrix,
}

impl AttentionOutput {
    pub fn len(&self) -> usize {
        self.u.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.u.rows() == 0
    }
}

/// Multiply-accumulate tallies collected while attention runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCounter {
    pub indexer: u64,
    pub score: u64,
    pub mix: u64,
}

fn check_input(h_seq: &Matrix, params: &MlaParams) -> Result<()> {
    params.validate()?;
    if h_seq.cols() != params.hidden() {
        return Err(LabError::Shape(format!(
            "hidden rows have width {}, parameters expect {}",
            h_seq.cols(),
            params.hidden()
        )));
    }
    Ok(())
}

pub fn build_latent_cache(h_seq: &Matrix, params: &MlaParams) -> Result<LatentCache> {
    check_input(h_seq, params)?;
    let mut cache = LatentCache::default();
    for s in 0..h_seq.rows() {
        cache.push(params.w_dkv.matvec(h_seq.row(s)));
    }
    Ok(cache)
}

fn ensure_finite(u: &Matrix, what: &str) -> Result<()> {
    match u.data().iter().position(|x| !x.is_finite()) {
        Some(i) => Err(LabError::NonFinite(format!(
            "{what} output at row {}",
            i / u.cols().max(1)
        ))),
        None => Ok(()),
    }
}

/// Per-head causal attention weights of the MHA mode, each an `L × L` grid
/// with zeros above the diagonal.
pub fn mha_attention_weights(h_seq: &Matrix, params: &MlaParams) -> Result<Vec<Matrix>> {
    mha_core(h_seq, params, None).map(|(_, w)| w)
}

/// Dense MHA-mode attention with materialized per-head keys and values.
pub fn mha_mode_attention(h_seq: &Matrix, params: &MlaParams) -> Result<AttentionOutput> {
    mha_core(h_seq, params, None).map(|(u, _)| u)
}

/// Shared MHA-mode evaluation; `allowed(t, s)` keeps score entries, the rest
/// are forced to `-inf` before the softmax.
pub(crate) fn mha_core(
    h_seq: &Matrix,
    params: &MlaParams,
    allowed: Option<&dyn Fn(usize, usize) -> bool>,
) -> Result<(AttentionOutput, Vec<Matrix>)> {
    check_input(h_seq, params)?;
    let len = h_seq.rows();
    let dh = params.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let cache = build_latent_cache(h_seq, params)?;

    let mut concat = Matrix::zeros(len, params.heads() * dh);
    let mut weights = Vec::with_capacity(params.heads());
    for head in 0..params.heads() {
        let keys: Vec<Vec<f64>> = cache
            .entries()
            .iter()
            .map(|c| params.w_uk[head].matvec(c))
            .collect();
        let values: Vec<Vec<f64>> = cache
            .entries()
            .iter()
            .map(|c| params.w_uv[head].matvec(c))
            .collect();
        let mut grid = Matrix::zeros(len, len);
        for t in 0..len {
            let q = params.w_q[head].matvec(h_seq.row(t));
            let scores: Vec<f64> = (0..=t)
                .map(|s| match allowed {
                    Some(keep) if !keep(t, s) => f64::NEG_INFINITY,
                    _ => dot(&q, &keys[s]) * scale,
                })
                .collect();
            if scores.iter().any(|x| x.is_nan()) {
                return Err(LabError::NonFinite(format!("score row {t}, head {head}")));
            }
            let probs = softmax_masked(&scores, None)
                .filter(|p| p.iter().all(|x| x.is_finite()))
                .ok_or_else(|| LabError::Empty(format!("query {t} has no selected entries")))?;
            let out = &mut concat.row_mut(t)[head * dh..(head + 1) * dh];
            for (s, &a) in probs.iter().enumerate() {
                grid.set(t, s, a);
                if a != 0.0 {
                    for (o, v) in out.iter_mut().zip(&values[s]) {
                        *o += a * v;
                    }
                }
            }
        }
        weights.push(grid);
    }
    let u = project_out(&concat, params);
    ensure_finite(&u, "MHA-mode")?;
    Ok((AttentionOutput { u }, weights))
}

fn project_out(concat: &Matrix, params: &MlaParams) -> Matrix {
    let mut u = Matrix::zeros(concat.rows(), params.hidden());
    for t in 0..concat.rows() {
        u.row_mut(t)
            .copy_from_slice(&params.w_o.matvec(concat.row(t)));
    }
    u
}

/// Absorbed (MQA-mode) attention: every head scores and mixes the shared
/// latent entries directly.
pub fn mqa_mode_attention(h_seq: &Matrix, params: &MlaParams) -> Result<AttentionOutput> {
    let cache = build_latent_cache(h_seq, params)?;
    absorbed_attention(h_seq, &cache, params, |t| (0..=t).collect(), None)
}

pub fn mqa_mode_attention_counted(
    h_seq: &Matrix,
    params: &MlaParams,
    counter: &mut MacCounter,
) -> Result<AttentionOutput> {
    let cache = build_latent_cache(h_seq, params)?;
    absorbed_attention(h_seq, &cache, params, |t| (0..=t).collect(), Some(counter))
}

/// Absorbed attention of queries `h_seq` over `cache`, where query `t` may
/// only see the positions returned by `candidates(t)`.
///
/// Score and mix work is tallied per (query, key) pair: `H · d_c`
/// multiply-accumulates each for the latent dot product and the latent
/// accumulation.
pub(crate) fn absorbed_attention(
    h_seq: &Matrix,
    cache: &LatentCache,
    params: &MlaParams,
    candidates: impl Fn(usize) -> Vec<usize>,
    mut counter: Option<&mut MacCounter>,
) -> Result<AttentionOutput> {
    check_input(h_seq, params)?;
    let len = h_seq.rows();
    if cache.len() < len {
        return Err(LabError::Shape(format!(
            "cache holds {} entries for {len} queries",
            cache.len()
        )));
    }
    let dh = params.head_dim();
    let dc = params.latent_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut concat = Matrix::zeros(len, params.heads() * dh);
    for t in 0..len {
        let selected = candidates(t);
        if selected.is_empty() {
            return Err(LabError::Empty(format!(
                "query {t} has no selected entries"
            )));
        }
        if let Some(&s) = selected.iter().find(|&&s| s > t) {
            return Err(LabError::Invalid(format!(
                "query {t} selects future position {s}"
            )));
        }
        for head in 0..params.heads() {
            let q = params.w_q[head].matvec(h_seq.row(t));
            let q_latent = params.w_uk[head].transpose_matvec(&q);
            let scores: Vec<f64> = selected
                .iter()
                .map(|&s| dot(&q_latent, cache.entry(s)) * scale)
                .collect();
            if scores.iter().any(|x| !x.is_finite()) {
                return Err(LabError::NonFinite(format!("score row {t}, head {head}")));
            }
            let probs = softmax_masked(&scores, None).expect("non-empty selection");
            let mut context = vec![0.0; dc];
            for (&s, &a) in selected.iter().zip(&probs) {
                for (c, v) in context.iter_mut().zip(cache.entry(s)) {
                    *c += a * v;
                }
            }
            if let Some(counter) = counter.as_deref_mut() {
                let pairs = selected.len() as u64;
                counter.score += pairs * dc as u64;
                counter.mix += pairs * dc as u64;
            }
            let head_out = params.w_uv[head].matvec(&context);
            concat.row_mut(t)[head * dh..(head + 1) * dh].copy_from_slice(&head_out);
        }
    }
    let u = project_out(&concat, params);
    ensure_finite(&u, "MQA-mode")?;
    Ok(AttentionOutput { u })
}
