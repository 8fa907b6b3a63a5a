//! Token-level evaluation metrics: word error rate, mean absolute WER
//! difference, Fréchet distance over embedded sets, a paired per-frame
//! perceptual-distance proxy, and an onset desynchronization score.
//!
//! Feature extraction is pluggable: metrics take embedder objects identified
//! by name and seed, so a stronger embedding can be dropped in without
//! touching the metric arithmetic.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// WER value plus a flag for the undefined empty-reference case.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WerScore {
    pub value: f64,
    /// Set when the reference was empty but the hypothesis was not; such
    /// scores are excluded from aggregate statistics by default.
    pub empty_reference: bool,
}

/// Levenshtein distance over word ids divided by max(1, reference length).
pub fn wer(reference: &[u32], hypothesis: &[u32]) -> WerScore {
    if reference.is_empty() {
        return WerScore {
            value: hypothesis.len() as f64,
            empty_reference: !hypothesis.is_empty(),
        };
    }
    let edits = levenshtein(reference, hypothesis);
    WerScore {
        value: edits as f64 / reference.len() as f64,
        empty_reference: false,
    }
}

fn levenshtein(a: &[u32], b: &[u32]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        curr[0] = i;
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            curr[j] = (prev[j] + 1).min(curr[j - 1] + 1).min(prev[j - 1] + cost);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Mean absolute difference between paired WER values.
pub fn delta_wer(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Domain("delta WER needs at least one pair".into()));
    }
    Ok(pairs.iter().map(|(a, b)| (a - b).abs()).sum::<f64>() / pairs.len() as f64)
}

/// Gaussian moments fitted to a set of embedded vectors.
#[derive(Clone, Debug)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    /// Row-major d x d covariance.
    pub cov: Vec<f64>,
    pub dim: usize,
}

/// Sample mean and covariance (denominator n - 1) with optional diagonal
/// shrinkage.
pub fn fit_gaussian(vectors: &[Vec<f64>], shrinkage: Option<f64>) -> Result<GaussianFit> {
    let n = vectors.len();
    let dim = vectors.first().map_or(0, Vec::len);
    if dim == 0 {
        return Err(Error::Domain("cannot fit a Gaussian to no data".into()));
    }
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Shape("embedded vectors differ in dimension".into()));
    }
    if shrinkage.is_none() && n < dim + 1 {
        return Err(Error::Domain(format!(
            "need at least {} samples for a full-rank {dim}-dim covariance \
             (got {n}); enable shrinkage for small sets",
            dim + 1
        )));
    }
    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (m, &x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; dim * dim];
    let denom = (n as f64 - 1.0).max(1.0);
    for v in vectors {
        for i in 0..dim {
            let di = v[i] - mean[i];
            for j in 0..dim {
                cov[i * dim + j] += di * (v[j] - mean[j]) / denom;
            }
        }
    }
    if let Some(lambda) = shrinkage {
        for i in 0..dim {
            cov[i * dim + i] += lambda;
        }
    }
    Ok(GaussianFit { mean, cov, dim })
}

/// Squared Fréchet distance between two Gaussians:
/// ||mu1 - mu2||^2 + tr(C1 + C2 - 2 (C1 C2)^{1/2}).
///
/// The matrix square root goes through symmetric eigendecompositions with
/// eigenvalues clamped at zero, and the result is clamped at zero.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::Shape(format!(
            "Gaussian dimensions differ: {} vs {}",
            a.dim, b.dim
        )));
    }
    let dim = a.dim;
    for fit in [a, b] {
        if fit.mean.iter().any(|x| !x.is_finite()) || fit.cov.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite Gaussian moments".into()));
        }
        for i in 0..dim {
            for j in 0..dim {
                let x = fit.cov[i * dim + j];
                let y = fit.cov[j * dim + i];
                if (x - y).abs() > 1e-8 * (1.0 + x.abs().max(y.abs())) {
                    return Err(Error::Numeric(format!(
                        "covariance is not symmetric at ({i},{j}): {x} vs {y}"
                    )));
                }
            }
        }
    }
    let c1 = DMatrix::from_row_slice(dim, dim, &a.cov);
    let c2 = DMatrix::from_row_slice(dim, dim, &b.cov);
    let sqrt_c2 = sym_sqrt(&c2);
    // (C1 C2)^{1/2} has the same trace as (C2^{1/2} C1 C2^{1/2})^{1/2},
    // and the inner product is symmetric PSD.
    let inner = &sqrt_c2 * &c1 * &sqrt_c2;
    let inner = (&inner + inner.transpose()) * 0.5;
    let sqrt_inner = sym_sqrt(&inner);
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    let trace_term = c1.trace() + c2.trace() - 2.0 * sqrt_inner.trace();
    Ok((mean_term + trace_term).max(0.0))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let mut scaled = eig.eigenvectors.clone();
    for (c, &lambda) in eig.eigenvalues.iter().enumerate() {
        let root = lambda.max(0.0).sqrt();
        for r in 0..scaled.nrows() {
            scaled[(r, c)] *= root;
        }
    }
    &scaled * eig.eigenvectors.transpose()
}

/// Deterministic map from a whole token sequence to one embedding vector.
pub trait SequenceEmbedder: Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, tokens: &[u32]) -> Vec<f64>;
}

/// Deterministic per-token embedding used by the paired metric.
pub trait FrameEmbedder: Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed_frame(&self, token: u32) -> &[f64];
}

/// Seeded random projection of the normalized token histogram.
pub struct HistogramProjection {
    vocab: usize,
    dim: usize,
    seed: u64,
    /// dim x vocab, row-major.
    weights: Vec<f64>,
}

impl HistogramProjection {
    pub fn new(vocab: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..dim * vocab)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        HistogramProjection {
            vocab,
            dim,
            seed,
            weights,
        }
    }
}

impl SequenceEmbedder for HistogramProjection {
    fn id(&self) -> String {
        format!("histproj-{}d-seed{}", self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tokens: &[u32]) -> Vec<f64> {
        let mut hist = vec![0.0f64; self.vocab];
        for &t in tokens {
            assert!((t as usize) < self.vocab, "token outside embedder vocab");
            hist[t as usize] += 1.0;
        }
        if !tokens.is_empty() {
            let inv = 1.0 / tokens.len() as f64;
            for h in &mut hist {
                *h *= inv;
            }
        }
        (0..self.dim)
            .map(|d| {
                hist.iter()
                    .zip(&self.weights[d * self.vocab..(d + 1) * self.vocab])
                    .map(|(&h, &w)| h * w)
                    .sum()
            })
            .collect()
    }
}

/// Seeded per-token lookup table.
pub struct TokenTable {
    vocab: usize,
    dim: usize,
    seed: u64,
    table: Vec<f64>,
}

impl TokenTable {
    pub fn new(vocab: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..vocab * dim)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        TokenTable {
            vocab,
            dim,
            seed,
            table,
        }
    }
}

impl FrameEmbedder for TokenTable {
    fn id(&self) -> String {
        format!("toktable-{}d-seed{}", self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_frame(&self, token: u32) -> &[f64] {
        let t = token as usize;
        assert!(t < self.vocab, "token outside embedder vocab");
        &self.table[t * self.dim..(t + 1) * self.dim]
    }
}

/// Fréchet distance between Gaussian fits of two embedded sets.
pub fn fad(
    set_a: &[Vec<u32>],
    set_b: &[Vec<u32>],
    embedder: &dyn SequenceEmbedder,
) -> Result<f64> {
    fad_with_shrinkage(set_a, set_b, embedder, None)
}

pub fn fad_with_shrinkage(
    set_a: &[Vec<u32>],
    set_b: &[Vec<u32>],
    embedder: &dyn SequenceEmbedder,
    shrinkage: Option<f64>,
) -> Result<f64> {
    let embed_all = |set: &[Vec<u32>]| -> Vec<Vec<f64>> {
        set.iter().map(|s| embedder.embed(s)).collect()
    };
    let fit_a = fit_gaussian(&embed_all(set_a), shrinkage)?;
    let fit_b = fit_gaussian(&embed_all(set_b), shrinkage)?;
    frechet_distance(&fit_a, &fit_b)
}

/// Mean over pairs of the mean per-frame Euclidean distance between the
/// embedded sequences.
pub fn lpaps_proxy(
    pairs: &[(Vec<u32>, Vec<u32>)],
    embedder: &dyn FrameEmbedder,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Domain("paired metric needs at least one pair".into()));
    }
    let mut total = 0.0;
    for (idx, (generated, reference)) in pairs.iter().enumerate() {
        if generated.len() != reference.len() {
            return Err(Error::Shape(format!(
                "pair {idx}: lengths {} vs {} differ",
                generated.len(),
                reference.len()
            )));
        }
        if generated.is_empty() {
            continue;
        }
        let mut acc = 0.0;
        for (&g, &r) in generated.iter().zip(reference) {
            let eg = embedder.embed_frame(g);
            let er = embedder.embed_frame(r);
            let dist: f64 = eg
                .iter()
                .zip(er)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            acc += dist;
        }
        total += acc / generated.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Onset alignment error: greedy in-order matching of two sorted onset lists.
/// Matched pairs within `max_offset` contribute their absolute difference;
/// everything unmatched contributes `max_offset`. The sum is averaged over
/// max(1, longer list length).
pub fn desync_analog(
    gen_onsets: &[usize],
    gt_onsets: &[usize],
    max_offset: f64,
) -> Result<f64> {
    for (name, list) in [("generated", gen_onsets), ("reference", gt_onsets)] {
        if list.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Domain(format!(
                "{name} onset list must be sorted ascending"
            )));
        }
    }
    let mut i = 0;
    let mut j = 0;
    let mut total = 0.0;
    while i < gen_onsets.len() && j < gt_onsets.len() {
        let a = gen_onsets[i] as f64;
        let b = gt_onsets[j] as f64;
        if (a - b).abs() <= max_offset {
            total += (a - b).abs();
            i += 1;
            j += 1;
        } else if a < b {
            total += max_offset;
            i += 1;
        } else {
            total += max_offset;
            j += 1;
        }
    }
    total += max_offset * ((gen_onsets.len() - i) + (gt_onsets.len() - j)) as f64;
    let denom = gen_onsets.len().max(gt_onsets.len()).max(1) as f64;
    Ok(total / denom)
}

/// Ordered key = value report emitted by the evaluation command.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub entries: Vec<(String, String)>,
}

impl EvalReport {
    pub fn push(&mut self, key: &str, value: impl std::fmt::Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<EvalReport> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Input(format!("report line {} has no '='", lineno + 1))
            })?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(EvalReport { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&[1, 2, 3, 4], &[1, 2, 3, 4]).value, 0.0);
        assert_eq!(wer(&[1, 2, 3, 4], &[1, 5, 3, 4]).value, 0.25);
        assert_eq!(wer(&[1, 2], &[1]).value, 0.5);
    }

    #[test]
    fn wer_empty_reference_conventions() {
        let both_empty = wer(&[], &[]);
        assert_eq!(both_empty.value, 0.0);
        assert!(!both_empty.empty_reference);
        let hyp_only = wer(&[], &[4, 4, 4]);
        assert_eq!(hyp_only.value, 3.0);
        assert!(hyp_only.empty_reference);
    }

    #[test]
    fn wer_insertion_deletion_symmetry() {
        // One insertion against a length-4 reference costs the same as one
        // deletion.
        assert_eq!(wer(&[1, 2, 3, 4], &[1, 2, 3]).value, 0.25);
        assert_eq!(wer(&[1, 2, 3, 4], &[1, 2, 3, 4, 5]).value, 0.25);
    }

    #[test]
    fn delta_wer_examples() {
        assert!((delta_wer(&[(0.3, 0.2), (0.5, 0.5)]).unwrap() - 0.05).abs() < 1e-12);
        assert_eq!(delta_wer(&[(0.4, 0.4), (0.0, 0.0)]).unwrap(), 0.0);
        assert_eq!(delta_wer(&[(0.0, 1.0)]).unwrap(), 1.0);
        assert!(matches!(delta_wer(&[]), Err(Error::Domain(_))));
    }

    fn diag_fit(mean: Vec<f64>, var: f64) -> GaussianFit {
        let dim = mean.len();
        let mut cov = vec![0.0; dim * dim];
        for i in 0..dim {
            cov[i * dim + i] = var;
        }
        GaussianFit { mean, cov, dim }
    }

    #[test]
    fn frechet_examples() {
        let a = diag_fit(vec![0.0, 0.0], 1.0);
        assert!(frechet_distance(&a, &a).unwrap() <= 1e-9);

        let b = diag_fit(vec![3.0, 0.0], 1.0);
        assert!((frechet_distance(&a, &b).unwrap() - 9.0).abs() <= 1e-9);

        let wide = diag_fit(vec![0.0, 0.0], 4.0);
        assert!((frechet_distance(&wide, &a).unwrap() - 2.0).abs() <= 1e-9);
    }

    #[test]
    fn frechet_is_symmetric_and_rejects_bad_input() {
        let a = diag_fit(vec![0.2, -0.4, 1.0], 0.7);
        let mut b = diag_fit(vec![-1.0, 0.3, 0.1], 1.9);
        b.cov[1] = 0.2;
        b.cov[3] = 0.2;
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
        assert!(ab >= 0.0);

        let mut asym = b.clone();
        asym.cov[1] = 5.0;
        assert!(matches!(
            frechet_distance(&a, &asym),
            Err(Error::Numeric(_))
        ));
        let mut nan = a.clone();
        nan.mean[0] = f64::NAN;
        assert!(matches!(frechet_distance(&nan, &b), Err(Error::Numeric(_))));
    }

    #[test]
    fn fad_behaviour() {
        let embedder = HistogramProjection::new(10, 3, 7);
        let set_a: Vec<Vec<u32>> = (0..8)
            .map(|i| (0..20).map(|j| ((i + j) % 7) as u32).collect())
            .collect();
        assert!(fad(&set_a, &set_a, &embedder).unwrap() <= 1e-6);

        let set_b: Vec<Vec<u32>> = (0..8)
            .map(|i| (0..20).map(|j| ((i * j) % 9 + 1) as u32).collect())
            .collect();
        assert!(fad(&set_a, &set_b, &embedder).unwrap() > 0.0);

        // Order within a set does not matter.
        let mut shuffled = set_a.clone();
        shuffled.swap(0, 5);
        shuffled.swap(2, 7);
        let direct = fad(&set_a, &set_b, &embedder).unwrap();
        let swapped = fad(&shuffled, &set_b, &embedder).unwrap();
        assert!((direct - swapped).abs() < 1e-12);
    }

    #[test]
    fn fad_small_set_needs_shrinkage() {
        let embedder = HistogramProjection::new(10, 6, 7);
        let small: Vec<Vec<u32>> = (0..3).map(|i| vec![i as u32; 5]).collect();
        assert!(matches!(
            fad(&small, &small, &embedder),
            Err(Error::Domain(_))
        ));
        let with = fad_with_shrinkage(&small, &small, &embedder, Some(1e-6)).unwrap();
        assert!(with <= 1e-6);
    }

    #[test]
    fn lpaps_examples() {
        let embedder = TokenTable::new(8, 4, 3);
        let identical = vec![(vec![1u32, 2, 3], vec![1u32, 2, 3])];
        assert_eq!(lpaps_proxy(&identical, &embedder).unwrap(), 0.0);

        // One differing frame out of 100 contributes d/100.
        let mut gen = vec![5u32; 100];
        gen[40] = 6;
        let reference = vec![5u32; 100];
        let d: f64 = {
            let a = embedder.embed_frame(6);
            let b = embedder.embed_frame(5);
            a.iter()
                .zip(b)
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let got = lpaps_proxy(&[(gen.clone(), reference.clone())], &embedder).unwrap();
        assert!((got - d / 100.0).abs() < 1e-12);

        // Symmetric in the pair order.
        let swapped = lpaps_proxy(&[(reference, gen)], &embedder).unwrap();
        assert!((got - swapped).abs() < 1e-15);

        let ragged = vec![(vec![1u32, 2], vec![1u32])];
        assert!(matches!(
            lpaps_proxy(&ragged, &embedder),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn desync_examples() {
        assert_eq!(desync_analog(&[10, 50], &[10, 50], 25.0).unwrap(), 0.0);
        assert_eq!(desync_analog(&[12, 50], &[10, 50], 25.0).unwrap(), 1.0);
        assert_eq!(desync_analog(&[], &[50], 25.0).unwrap(), 25.0);
        assert_eq!(desync_analog(&[], &[], 25.0).unwrap(), 0.0);
        assert!(matches!(
            desync_analog(&[50, 10], &[], 25.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn report_roundtrip() {
        let mut report = EvalReport::default();
        report.push("metric.wer_mean", format!("{:.6}", 0.25));
        report.push("samples", 100);
        report.push("embedder.sequence", "histproj-16d-seed7");
        let text = report.to_text();
        let parsed = EvalReport::parse(&text).unwrap();
        assert_eq!(parsed, report);
        assert_eq!(parsed.get("metric.wer_mean"), Some("0.250000"));
    }
}
