//! Cyclical self-supervision (CSS) over per-frame embedding sequences.
//!
//! A clip of `T` frame embeddings is split into a template region `P`, a
//! search region `Q` and a buffer region `B`. A template phase starting at
//! `p*` is soft-matched against every phase in `Q`; the matched phases are
//! advanced by `c` frames and averaged into a soft phase, which is matched
//! back against `P`. The loss is the cross-entropy of that second match
//! against `p* + c`.
//!
//! All similarity and softmax arithmetic runs in `f64` regardless of the
//! embedding scalar type. Gradients are derived by hand and returned in the
//! embedding scalar type.
//!
//! Indices are 0-based. The reference setup (frames 1-15 / 16-36 / 37-40,
//! template starts 1-13) becomes `P = 0..15`, `Q = 15..36`, `B = 36..40`,
//! `p* ∈ 0..13`.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;

/// Half-open range of frame indices within a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRange {
    pub start: usize,
    pub end: usize,
}

impl FrameRange {
    pub const fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    /// Converts an inclusive 1-based range (`first..=last`) to 0-based half-open.
    pub fn from_one_based(first: usize, last: usize) -> Self {
        assert!(
            first >= 1 && last >= first,
            "invalid 1-based range {first}-{last}"
        );
        Self::new(first - 1, last)
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn last(&self) -> Option<usize> {
        (!self.is_empty()).then(|| self.end - 1)
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..self.end).contains(&i)
    }

    pub fn iter(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// Per-frame feature vectors for one sampled clip, stored row-major `[len x dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence<T> {
    values: Vec<T>,
    len: usize,
    dim: usize,
    clip_indices: Vec<usize>,
}

impl<T: Scalar> EmbeddingSequence<T> {
    pub fn new(values: Vec<T>, len: usize, dim: usize) -> Result<Self> {
        Self::with_indices(values, len, dim, (0..len).collect())
    }

    pub fn with_indices(
        values: Vec<T>,
        len: usize,
        dim: usize,
        clip_indices: Vec<usize>,
    ) -> Result<Self> {
        contract!(dim >= 1, "embedding dimension must be positive");
        contract!(
            values.len() == len * dim,
            "expected {} values for a {len}x{dim} sequence, got {}",
            len * dim,
            values.len()
        );
        contract!(
            clip_indices.len() == len,
            "clip_indices has {} entries for {len} rows",
            clip_indices.len()
        );
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite embedding at row {} column {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self {
            values,
            len,
            dim,
            clip_indices,
        })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        contract!(!rows.is_empty(), "empty embedding sequence");
        let dim = rows[0].len();
        contract!(rows.iter().all(|r| r.len() == dim), "ragged embedding rows");
        Self::new(rows.concat(), rows.len(), dim)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn clip_indices(&self) -> &[usize] {
        &self.clip_indices
    }

    pub fn row(&self, t: usize) -> &[T] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    /// Every value multiplied by `factor`.
    pub fn scaled(&self, factor: T) -> Self {
        Self {
            values: self.values.iter().map(|&v| v * factor).collect(),
            len: self.len,
            dim: self.dim,
            clip_indices: self.clip_indices.clone(),
        }
    }

    fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.as_f64()).collect()
    }
}

/// `s` consecutive embeddings starting at frame `start`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseEmbedding<T> {
    values: Vec<T>,
    len: usize,
    dim: usize,
    start: usize,
}

impl<T: Scalar> PhaseEmbedding<T> {
    pub fn start(&self) -> usize {
        self.start
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn row(&self, k: usize) -> &[T] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }
}

/// How a CSS clip is cut into its three regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionPartition {
    pub template: FrameRange,
    pub search: FrameRange,
    pub buffer: FrameRange,
}

impl Default for RegionPartition {
    /// Frames 1-15 / 16-36 / 37-40 of a 40-frame clip.
    fn default() -> Self {
        Self {
            template: FrameRange::from_one_based(1, 15),
            search: FrameRange::from_one_based(16, 36),
            buffer: FrameRange::from_one_based(37, 40),
        }
    }
}

impl RegionPartition {
    /// Frames the partition spans; clips must be at least this long.
    pub fn clip_len(&self) -> usize {
        self.buffer.end
    }

    pub fn validate(&self, s: usize, c: usize) -> Result<()> {
        let (p, q, b) = (self.template, self.search, self.buffer);
        contract!(
            !p.is_empty() && !q.is_empty() && !b.is_empty(),
            "template, search and buffer regions must be non-empty"
        );
        contract!(
            p.end == q.start && q.end == b.start,
            "regions must be contiguous and ordered P < Q < B, got {p:?} {q:?} {b:?}"
        );
        contract!(
            p.len() < q.len(),
            "template region ({}) must be shorter than search region ({})",
            p.len(),
            q.len()
        );
        let overhang = q.end - 1 + c + s - 1;
        contract!(
            s >= 1 && overhang < b.end,
            "offset phases reach frame {overhang} but the buffer ends at {}",
            b.end - 1
        );
        Ok(())
    }
}

/// CSS hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CssConfig {
    /// Phase length in frames.
    pub s: usize,
    /// Temporal offset in frames.
    pub c: usize,
    pub tau: f64,
    pub w_css: f64,
    /// Valid template start indices.
    pub pstar_range: FrameRange,
}

impl Default for CssConfig {
    fn default() -> Self {
        Self {
            s: 3,
            c: 2,
            tau: 10.0,
            w_css: 0.01,
            pstar_range: FrameRange::from_one_based(1, 13),
        }
    }
}

impl CssConfig {
    pub fn validate(&self, partition: &RegionPartition) -> Result<()> {
        partition.validate(self.s, self.c)?;
        contract!(
            self.tau.is_finite() && self.tau > 0.0,
            "tau must be positive, got {}",
            self.tau
        );
        contract!(
            self.w_css >= 0.0,
            "w_css must be non-negative, got {}",
            self.w_css
        );
        let pr = self.pstar_range;
        let p = partition.template;
        contract!(
            !pr.is_empty() && pr.start >= p.start && pr.end <= p.end,
            "p* range {pr:?} must lie within the template region {p:?}"
        );
        let last = pr.end - 1;
        contract!(
            last + self.s - 1 < p.end && last + self.c < p.end,
            "template phases starting at {last} (s={}, c={}) must stay inside {p:?}",
            self.s,
            self.c
        );
        Ok(())
    }

    /// Uniform draw from the p* range.
    pub fn sample_pstar<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(self.pstar_range.start..self.pstar_range.end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionTag {
    Template,
    Search,
}

/// Softmax weights over the start indices of one region.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchProfile {
    weights: Vec<f64>,
    first: usize,
    region: RegionTag,
}

impl MatchProfile {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn region(&self) -> RegionTag {
        self.region
    }

    /// Clip index of `weights()[0]`.
    pub fn first_index(&self) -> usize {
        self.first
    }

    pub fn weight_at(&self, index: usize) -> f64 {
        index
            .checked_sub(self.first)
            .and_then(|i| self.weights.get(i).copied())
            .unwrap_or(0.0)
    }

    /// Clip index with the largest weight (earliest on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &w) in self.weights.iter().enumerate() {
            if w > self.weights[best] {
                best = i;
            }
        }
        self.first + best
    }
}

/// Probability-weighted phase; rows are convex combinations of sequence rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftPhase {
    values: Vec<f64>,
    len: usize,
    dim: usize,
}

impl SoftPhase {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Rows `t..t+s` of `seq`.
pub fn phase_embedding<T: Scalar>(
    seq: &EmbeddingSequence<T>,
    t: usize,
    s: usize,
) -> Result<PhaseEmbedding<T>> {
    contract!(s >= 1, "phase length must be at least 1");
    if t + s > seq.len {
        return Err(Error::Index(format!(
            "phase t={t}, s={s} needs frame {} but the clip has {} frames (t + s - 1 < T violated)",
            t + s - 1,
            seq.len
        )));
    }
    Ok(PhaseEmbedding {
        values: seq.values[t * seq.dim..(t + s) * seq.dim].to_vec(),
        len: s,
        dim: seq.dim,
        start: t,
    })
}

fn sq_dist_mean(a: &[f64], b: &[f64], dim: usize) -> f64 {
    let n = a.len();
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let s = n / dim;
    -sum / (dim * s) as f64
}

/// Negative mean squared distance between two phases; `0` iff they are equal.
pub fn phase_similarity<T: Scalar>(a: &PhaseEmbedding<T>, b: &PhaseEmbedding<T>) -> Result<f64> {
    contract!(
        a.len == b.len && a.dim == b.dim,
        "phase shapes differ: {}x{} vs {}x{}",
        a.len,
        a.dim,
        b.len,
        b.dim
    );
    let x: Vec<f64> = a.values.iter().map(|v| v.as_f64()).collect();
    let y: Vec<f64> = b.values.iter().map(|v| v.as_f64()).collect();
    Ok(sq_dist_mean(&x, &y, a.dim))
}

/// Max-subtracted softmax of `logits * tau`.
pub fn softmax_scaled(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    contract!(!logits.is_empty(), "softmax over an empty region");
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite similarity value".into()));
    }
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v * tau));
    let exps: Vec<f64> = logits.iter().map(|&v| (v * tau - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Similarities of a phase (`len x dim`, f64) against every start in `region`.
fn region_similarities(
    phase: &[f64],
    z: &[f64],
    total_len: usize,
    dim: usize,
    region: FrameRange,
) -> Result<Vec<f64>> {
    let s = phase.len() / dim;
    contract!(!region.is_empty(), "empty matching region");
    if region.end - 1 + s > total_len {
        return Err(Error::Index(format!(
            "phase starting at {} needs frame {} but the clip has {total_len} frames",
            region.end - 1,
            region.end - 2 + s
        )));
    }
    Ok(region
        .iter()
        .map(|q| sq_dist_mean(phase, &z[q * dim..(q + s) * dim], dim))
        .collect())
}

/// Softmax of template similarity over every phase start in `region`.
pub fn match_probabilities<T: Scalar>(
    template: &PhaseEmbedding<T>,
    seq: &EmbeddingSequence<T>,
    region: FrameRange,
    tau: f64,
) -> Result<MatchProfile> {
    contract!(
        template.dim == seq.dim,
        "template and sequence dimensions differ"
    );
    let phase: Vec<f64> = template.values.iter().map(|v| v.as_f64()).collect();
    let gammas = region_similarities(&phase, &seq.to_f64(), seq.len, seq.dim, region)?;
    Ok(MatchProfile {
        weights: softmax_scaled(&gammas, tau)?,
        first: region.start,
        region: RegionTag::Search,
    })
}

/// Expectation of the phase `c` frames after each weighted start.
pub fn soft_offset_phase<T: Scalar>(
    seq: &EmbeddingSequence<T>,
    alpha: &MatchProfile,
    c: usize,
    s: usize,
) -> Result<SoftPhase> {
    contract!(s >= 1, "phase length must be at least 1");
    let dim = seq.dim;
    let mut values = vec![0.0; s * dim];
    for (i, &w) in alpha.weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        let q = alpha.first + i;
        if q + c + s > seq.len {
            return Err(Error::Index(format!(
                "offset phase from q={q} (c={c}, s={s}) reaches frame {} past the clip end {}; \
                 the buffer region must absorb c + s - 1 frames after the search region",
                q + c + s - 1,
                seq.len - 1
            )));
        }
        let src = &seq.values[(q + c) * dim..(q + c + s) * dim];
        for (o, v) in values.iter_mut().zip(src) {
            *o += w * v.as_f64();
        }
    }
    Ok(SoftPhase {
        values,
        len: s,
        dim,
    })
}

/// Softmax of similarity between the soft phase and every template-region start.
pub fn template_match_probabilities<T: Scalar>(
    soft: &SoftPhase,
    seq: &EmbeddingSequence<T>,
    template_region: FrameRange,
    tau: f64,
) -> Result<MatchProfile> {
    contract!(
        soft.dim == seq.dim,
        "soft phase and sequence dimensions differ"
    );
    let deltas = region_similarities(
        &soft.values,
        &seq.to_f64(),
        seq.len,
        seq.dim,
        template_region,
    )?;
    Ok(MatchProfile {
        weights: softmax_scaled(&deltas, tau)?,
        first: template_region.start,
        region: RegionTag::Template,
    })
}

/// Intermediate quantities of the CSS forward pass for one sequence.
#[derive(Clone, Debug)]
pub struct CssTrace {
    pub alpha: MatchProfile,
    pub soft: SoftPhase,
    pub beta: MatchProfile,
    pub target: usize,
    pub loss: f64,
}

/// Loss and gradient for a batch of sequences.
#[derive(Clone, Debug)]
pub struct CssOutput<T> {
    pub loss: f64,
    /// One gradient per input sequence, same layout as its values.
    pub grads: Vec<Vec<T>>,
}

fn check_inputs<T: Scalar>(
    seq: &EmbeddingSequence<T>,
    partition: &RegionPartition,
    cfg: &CssConfig,
    pstar: usize,
) -> Result<()> {
    contract!(
        cfg.pstar_range.contains(pstar),
        "p*={pstar} outside the configured range {:?}",
        cfg.pstar_range
    );
    contract!(
        seq.len >= partition.clip_len(),
        "clip has {} frames but the partition needs {}",
        seq.len,
        partition.clip_len()
    );
    Ok(())
}

/// Forward pass for one sequence, keeping every intermediate.
pub fn css_trace<T: Scalar>(
    seq: &EmbeddingSequence<T>,
    partition: &RegionPartition,
    cfg: &CssConfig,
    pstar: usize,
) -> Result<CssTrace> {
    cfg.validate(partition)?;
    check_inputs(seq, partition, cfg, pstar)?;
    let template = phase_embedding(seq, pstar, cfg.s)?;
    let alpha = match_probabilities(&template, seq, partition.search, cfg.tau)?;
    let soft = soft_offset_phase(seq, &alpha, cfg.c, cfg.s)?;
    let beta = template_match_probabilities(&soft, seq, partition.template, cfg.tau)?;
    let target = pstar + cfg.c;
    let loss = -beta.weight_at(target).ln();
    Ok(CssTrace {
        alpha,
        soft,
        beta,
        target,
        loss,
    })
}

/// Loss of one sequence and its gradient w.r.t. every embedding value.
fn sequence_loss_and_grad(
    z: &[f64],
    len: usize,
    dim: usize,
    partition: &RegionPartition,
    cfg: &CssConfig,
    pstar: usize,
) -> Result<(f64, Vec<f64>)> {
    let (s, c, tau) = (cfg.s, cfg.c, cfg.tau);
    let norm = 2.0 / (dim * s) as f64;
    let (pr, qr) = (partition.template, partition.search);
    let row = |t: usize| &z[t * dim..(t + 1) * dim];

    let template = &z[pstar * dim..(pstar + s) * dim];
    let gammas = region_similarities(template, z, len, dim, qr)?;
    let alpha = softmax_scaled(&gammas, tau)?;

    let mut soft = vec![0.0; s * dim];
    for (i, &a) in alpha.iter().enumerate() {
        let q = qr.start + i;
        for (o, &v) in soft.iter_mut().zip(&z[(q + c) * dim..(q + c + s) * dim]) {
            *o += a * v;
        }
    }

    let deltas = region_similarities(&soft, z, len, dim, pr)?;
    let beta = softmax_scaled(&deltas, tau)?;
    let target = pstar + c - pr.start;
    let loss = -beta[target].ln();

    let mut grad = vec![0.0; z.len()];

    // d loss / d delta_p = tau * (beta_p - 1[p = target])
    let mut g_soft = vec![0.0; s * dim];
    for (i, &b) in beta.iter().enumerate() {
        let g_delta = tau * (b - if i == target { 1.0 } else { 0.0 });
        if g_delta == 0.0 {
            continue;
        }
        let p = pr.start + i;
        for k in 0..s {
            let zr = row(p + k);
            for j in 0..dim {
                let diff = soft[k * dim + j] - zr[j];
                g_soft[k * dim + j] -= g_delta * norm * diff;
                grad[(p + k) * dim + j] += g_delta * norm * diff;
            }
        }
    }

    // soft = sum_q alpha_q z[q + c ..]
    let mut g_alpha = vec![0.0; alpha.len()];
    for (i, &a) in alpha.iter().enumerate() {
        let base = (qr.start + i + c) * dim;
        let mut acc = 0.0;
        for (idx, &gs) in g_soft.iter().enumerate() {
            acc += gs * z[base + idx];
            grad[base + idx] += a * gs;
        }
        g_alpha[i] = acc;
    }

    let mean_g: f64 = alpha.iter().zip(&g_alpha).map(|(a, g)| a * g).sum();
    for (i, &a) in alpha.iter().enumerate() {
        let g_gamma = tau * a * (g_alpha[i] - mean_g);
        if g_gamma == 0.0 {
            continue;
        }
        let q = qr.start + i;
        for k in 0..s {
            for j in 0..dim {
                let diff = z[(pstar + k) * dim + j] - z[(q + k) * dim + j];
                grad[(pstar + k) * dim + j] -= g_gamma * norm * diff;
                grad[(q + k) * dim + j] += g_gamma * norm * diff;
            }
        }
    }

    Ok((loss, grad))
}

/// Mean CSS loss over a batch plus its gradient w.r.t. all embeddings.
pub fn css_loss<T: Scalar>(
    seqs: &[EmbeddingSequence<T>],
    partition: &RegionPartition,
    cfg: &CssConfig,
    pstars: &[usize],
) -> Result<CssOutput<T>> {
    cfg.validate(partition)?;
    contract!(!seqs.is_empty(), "empty CSS batch");
    contract!(
        seqs.len() == pstars.len(),
        "{} sequences but {} template starts",
        seqs.len(),
        pstars.len()
    );
    let scale = 1.0 / seqs.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(seqs.len());
    for (seq, &pstar) in seqs.iter().zip(pstars) {
        check_inputs(seq, partition, cfg, pstar)?;
        let (l, g) =
            sequence_loss_and_grad(&seq.to_f64(), seq.len, seq.dim, partition, cfg, pstar)?;
        loss += l * scale;
        grads.push(g.into_iter().map(|v| T::lit(v * scale)).collect());
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("CSS loss is {loss}")));
    }
    Ok(CssOutput { loss, grads })
}

/// Settings for [`gradient_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradientCheck {
    pub epsilon: f64,
    /// Number of randomly chosen coordinates to perturb.
    pub coords: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
}

impl Default for GradientCheck {
    fn default() -> Self {
        Self {
            epsilon: 3e-3,
            coords: 64,
            floor: 1e-6,
        }
    }
}

/// Largest relative error `|a - n| / max(|a|, |n|, floor)` between the analytic
/// gradient `a` and finite differences `n`, over a random coordinate subset.
///
/// `n` uses the fourth-order central stencil
/// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, whose truncation error
/// stays small at step sizes where rounding in the loss is negligible.
pub fn gradient_check<R: Rng + ?Sized>(
    seq: &EmbeddingSequence<f64>,
    partition: &RegionPartition,
    cfg: &CssConfig,
    pstar: usize,
    check: GradientCheck,
    rng: &mut R,
) -> Result<f64> {
    let analytic = css_loss(std::slice::from_ref(seq), partition, cfg, &[pstar])?;
    let grad = &analytic.grads[0];
    let n = seq.values.len();
    let coords = sample(rng, n, check.coords.min(n));
    let loss_at = |values: Vec<f64>| -> Result<f64> {
        let perturbed =
            EmbeddingSequence::with_indices(values, seq.len, seq.dim, seq.clip_indices.clone())?;
        Ok(css_loss(&[perturbed], partition, cfg, &[pstar])?.loss)
    };
    let mut worst = 0.0f64;
    for i in coords.iter() {
        let at = |k: f64| {
            let mut v = seq.values.clone();
            v[i] += k * check.epsilon;
            loss_at(v)
        };
        let numeric =
            (8.0 * (at(1.0)? - at(-1.0)?) - (at(2.0)? - at(-2.0)?)) / (12.0 * check.epsilon);
        let denom = grad[i].abs().max(numeric.abs()).max(check.floor);
        worst = worst.max((grad[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn seq1(rows: &[f64]) -> EmbeddingSequence<f64> {
        EmbeddingSequence::new(rows.to_vec(), rows.len(), 1).unwrap()
    }

    fn random_seq(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> EmbeddingSequence<f64> {
        let v = (0..len * dim).map(|_| StandardNormal.sample(rng)).collect();
        EmbeddingSequence::new(v, len, dim).unwrap()
    }

    #[test]
    fn reference_partition_is_zero_based() {
        let p = RegionPartition::default();
        assert_eq!(p.template, FrameRange::new(0, 15));
        assert_eq!(p.search, FrameRange::new(15, 36));
        assert_eq!(p.buffer, FrameRange::new(36, 40));
        assert_eq!(CssConfig::default().pstar_range, FrameRange::new(0, 13));
        CssConfig::default().validate(&p).unwrap();
    }

    #[test]
    fn phase_slices_rows() {
        let seq = seq1(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(phase_embedding(&seq, 1, 2).unwrap().values(), &[2.0, 3.0]);
        assert_eq!(phase_embedding(&seq, 0, 1).unwrap().values(), &[1.0]);
        let err = phase_embedding(&seq, 2, 3).unwrap_err();
        assert!(
            matches!(err, Error::Index(ref m) if m.contains("t + s - 1 < T")),
            "{err}"
        );
    }

    #[test]
    fn similarity_hand_values() {
        let a = EmbeddingSequence::new(vec![1.0, 0.0], 1, 2).unwrap();
        let b = EmbeddingSequence::new(vec![0.0, 2.0], 1, 2).unwrap();
        let (pa, pb) = (
            phase_embedding(&a, 0, 1).unwrap(),
            phase_embedding(&b, 0, 1).unwrap(),
        );
        assert_eq!(phase_similarity(&pa, &pb).unwrap(), -2.5);
        assert_eq!(phase_similarity(&pa, &pa).unwrap(), 0.0);

        let a = seq1(&[1.0, 2.0]);
        let b = seq1(&[1.0, 4.0]);
        let (pa, pb) = (
            phase_embedding(&a, 0, 2).unwrap(),
            phase_embedding(&b, 0, 2).unwrap(),
        );
        assert_eq!(phase_similarity(&pa, &pb).unwrap(), -2.0);

        let short = phase_embedding(&b, 0, 1).unwrap();
        assert!(matches!(
            phase_similarity(&pa, &short),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn softmax_hand_values() {
        let w = softmax_scaled(&[0.0, -1.0, -1.0], 1.0).unwrap();
        // e^0 / (1 + 2e^-1)
        let want = [0.576_116_884_9, 0.211_941_557_6, 0.211_941_557_6];
        for (x, y) in w.iter().zip(want) {
            assert!((x - y).abs() < 1e-4);
        }
        let sharp = softmax_scaled(&[0.0, -1.0, -1.0], 100.0).unwrap();
        assert!(sharp[0] >= 1.0 - 1e-10);
        assert!((sharp[1] - (-100.0f64).exp()).abs() < 1e-45);
        assert!(softmax_scaled(&[f64::NAN], 1.0).is_err());
        assert!(softmax_scaled(&[], 1.0).is_err());
    }

    #[test]
    fn identical_phases_give_uniform_alpha() {
        let seq = seq1(&[1.0; 10]);
        let t = phase_embedding(&seq, 0, 2).unwrap();
        let a = match_probabilities(&t, &seq, FrameRange::new(3, 7), 10.0).unwrap();
        for &w in a.weights() {
            assert!((w - 0.25).abs() < 1e-12);
        }
        assert!(match_probabilities(&t, &seq, FrameRange::new(3, 3), 1.0).is_err());
    }

    #[test]
    fn soft_phase_mixtures() {
        let seq = seq1(&[0.0, 2.0, 0.0, 4.0, 5.0]);
        let alpha = MatchProfile {
            weights: vec![0.5, 0.0, 0.5],
            first: 1,
            region: RegionTag::Search,
        };
        assert_eq!(
            soft_offset_phase(&seq, &alpha, 0, 1).unwrap().values(),
            &[3.0]
        );

        let one_hot = MatchProfile {
            weights: vec![0.0, 1.0, 0.0],
            first: 0,
            region: RegionTag::Search,
        };
        let soft = soft_offset_phase(&seq, &one_hot, 1, 2).unwrap();
        let hard = phase_embedding(&seq, 2, 2).unwrap();
        assert_eq!(soft.values(), hard.values());

        let err = soft_offset_phase(&seq, &alpha, 2, 1).unwrap_err();
        assert!(
            matches!(err, Error::Index(ref m) if m.contains("buffer")),
            "{err}"
        );
    }

    #[test]
    fn sharp_template_match_picks_exact_phase() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq = random_seq(&mut rng, 20, 4);
        let p0 = 5;
        let phase = phase_embedding(&seq, p0, 3).unwrap();
        let soft = SoftPhase {
            values: phase.values().to_vec(),
            len: 3,
            dim: 4,
        };
        let beta =
            template_match_probabilities(&soft, &seq, FrameRange::new(0, 12), 100.0).unwrap();
        assert!(beta.weight_at(p0) >= 1.0 - 1e-6);
        let sum: f64 = beta.weights().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_embeddings_give_ln_template_len() {
        let seq = EmbeddingSequence::new(vec![0.3f64; 40 * 8], 40, 8).unwrap();
        let out = css_loss(
            &[seq],
            &RegionPartition::default(),
            &CssConfig::default(),
            &[4],
        )
        .unwrap();
        assert!((out.loss - 15f64.ln()).abs() < 1e-12);
        assert!(out.grads[0].iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn rejects_bad_pstar_and_short_clips() {
        let part = RegionPartition::default();
        let cfg = CssConfig::default();
        let seq = EmbeddingSequence::new(vec![0.0f64; 40], 40, 1).unwrap();
        assert!(matches!(
            css_loss(std::slice::from_ref(&seq), &part, &cfg, &[13]),
            Err(Error::Contract(_))
        ));
        let short = EmbeddingSequence::new(vec![0.0f64; 39], 39, 1).unwrap();
        assert!(css_loss(&[short], &part, &cfg, &[0]).is_err());
        assert!(css_loss(&[seq], &part, &cfg, &[0, 1]).is_err());
    }

    #[test]
    fn partition_validation() {
        let mut p = RegionPartition::default();
        p.validate(3, 2).unwrap();
        assert!(p.validate(3, 3).is_err());
        p.search = FrameRange::new(15, 30);
        assert!(p.validate(3, 2).is_err());
        let q = RegionPartition {
            template: FrameRange::new(0, 25),
            search: FrameRange::new(25, 36),
            ..Default::default()
        };
        assert!(q.validate(3, 2).is_err());
        let cfg = CssConfig {
            pstar_range: FrameRange::new(0, 14),
            ..CssConfig::default()
        };
        assert!(cfg.validate(&RegionPartition::default()).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let part = RegionPartition::default();
        let cfg = CssConfig::default();
        let seq = random_seq(&mut rng, 40, 8);
        let err = gradient_check(&seq, &part, &cfg, 6, GradientCheck::default(), &mut rng).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn batch_loss_is_mean_of_singles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let part = RegionPartition::default();
        let cfg = CssConfig::default();
        let a = random_seq(&mut rng, 40, 4);
        let b = random_seq(&mut rng, 40, 4);
        let la = css_loss(std::slice::from_ref(&a), &part, &cfg, &[1]).unwrap();
        let lb = css_loss(std::slice::from_ref(&b), &part, &cfg, &[9]).unwrap();
        let both = css_loss(&[a, b], &part, &cfg, &[1, 9]).unwrap();
        assert!((both.loss - 0.5 * (la.loss + lb.loss)).abs() < 1e-12);
        for (g, h) in both.grads[1].iter().zip(&lb.grads[0]) {
            assert!((g - 0.5 * h).abs() < 1e-15);
        }
    }

    #[test]
    fn f32_sequences_use_double_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s64 = random_seq(&mut rng, 40, 8);
        let v32: Vec<f32> = s64.values().iter().map(|&v| v as f32).collect();
        let s32 = EmbeddingSequence::new(v32.clone(), 40, 8).unwrap();
        let back = EmbeddingSequence::new(v32.iter().map(|&v| v as f64).collect(), 40, 8).unwrap();
        let part = RegionPartition::default();
        let cfg = CssConfig::default();
        let a = css_loss(&[s32], &part, &cfg, &[3]).unwrap();
        let b = css_loss(&[back], &part, &cfg, &[3]).unwrap();
        assert_eq!(a.loss, b.loss);
    }

    #[test]
    fn rejects_non_finite_embeddings() {
        assert!(matches!(
            EmbeddingSequence::new(vec![0.0, f64::INFINITY], 2, 1),
            Err(Error::Numeric(_))
        ));
    }
}
