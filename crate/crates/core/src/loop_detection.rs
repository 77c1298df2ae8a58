//! Place-embedding comparison, loop-pair detection and ROC evaluation.
//!
//! Scores are cosine *discrepancies* `1 − cos(a, b)`: 0 for identical
//! directions, 2 for antipodal ones. A pair is a loop candidate when its score
//! is strictly below ζ and the frames are more than `adjacency_exclusion`
//! indices apart. The literal cosine-similarity reading is available through
//! [`Polarity::Cosine`].

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoopDetectError {
    #[error("zero-norm or non-finite embedding")]
    ZeroNorm,
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("need at least {needed} embeddings, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("scores and labels differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("ROC needs at least one positive and one negative label")]
    DegenerateLabels,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, LoopDetectError>;

/// Unit-norm global descriptor of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    v: Vec<f64>,
}

impl Embedding {
    /// Normalizes `v` to unit length.
    pub fn from_raw(v: Vec<f64>) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(LoopDetectError::ZeroNorm);
        }
        Ok(Embedding {
            v: v.into_iter().map(|x| x / norm).collect(),
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.v
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }
}

/// Which quantity is compared against ζ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// score = 1 − cosine similarity (tight-match threshold)
    #[default]
    OneMinusCosine,
    /// score = cosine similarity, thresholded the same way
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopDetectConfig {
    pub zeta: f64,
    pub adjacency_exclusion: usize,
    pub polarity: Polarity,
}

impl Default for LoopDetectConfig {
    fn default() -> Self {
        LoopDetectConfig {
            zeta: 0.045,
            adjacency_exclusion: 18,
            polarity: Polarity::OneMinusCosine,
        }
    }
}

impl LoopDetectConfig {
    pub fn validate(&self) -> Result<()> {
        // ζ = 0 is accepted: it is the degenerate "detect nothing" threshold.
        if !(self.zeta >= 0.0 && self.zeta < 2.0) {
            return Err(LoopDetectError::InvalidConfig(format!(
                "zeta must lie in [0, 2), got {}",
                self.zeta
            )));
        }
        Ok(())
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LoopDetectError::DimensionMismatch(a.len(), b.len()));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(na > 0.0 && nb > 0.0 && na.is_finite() && nb.is_finite()) {
        return Err(LoopDetectError::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `1 − cos(a, b)`, clamped to `[0, 2]`.
pub fn discrepancy(a: &Embedding, b: &Embedding) -> Result<f64> {
    discrepancy_raw(a.as_slice(), b.as_slice())
}

/// [`discrepancy`] on unnormalized vectors.
pub fn discrepancy_raw(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine(a, b)?)
}

/// Dense symmetric matrix of pairwise discrepancies.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub s: DMatrix<f64>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.s.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.s.nrows() == 0
    }

    /// Dense CSV, one row per line, no header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.s.nrows() {
            let row: Vec<String> = self.s.row(r).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn similarity_matrix(embeddings: &[Embedding]) -> Result<SimilarityMatrix> {
    let n = embeddings.len();
    if n < 2 {
        return Err(LoopDetectError::TooFew { needed: 2, got: n });
    }
    let mut s = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = discrepancy(&embeddings[i], &embeddings[j])?;
            s[(i, j)] = d;
            s[(j, i)] = d;
        }
    }
    Ok(SimilarityMatrix { s })
}

/// A detected loop pair; always `i < j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub i: usize,
    pub j: usize,
    pub score: f64,
}

/// All non-adjacent pairs scoring strictly below ζ, sorted by score (ties by
/// `(i, j)`).
pub fn detect_loops(embeddings: &[Embedding], cfg: &LoopDetectConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let n = embeddings.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in (i + cfg.adjacency_exclusion + 1)..n {
            let c = cosine(embeddings[i].as_slice(), embeddings[j].as_slice())?;
            let score = match cfg.polarity {
                Polarity::OneMinusCosine => 1.0 - c,
                Polarity::Cosine => c,
            };
            if score < cfg.zeta {
                out.push(Detection { i, j, score });
            }
        }
    }
    out.sort_by(|a, b| a.score.total_cmp(&b.score).then((a.i, a.j).cmp(&(b.i, b.j))));
    Ok(out)
}

/// One operating point of a ROC curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Pairs with `score <= threshold` are predicted positive.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    /// Starts at (0, 0) and ends at (1, 1).
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl Roc {
    /// TPR at the given FPR, linearly interpolated along the curve.
    pub fn tpr_at_fpr(&self, fpr: f64) -> f64 {
        let pts = &self.points;
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if fpr >= a.fpr && fpr <= b.fpr {
                if b.fpr == a.fpr {
                    return b.tpr;
                }
                let t = (fpr - a.fpr) / (b.fpr - a.fpr);
                return a.tpr + t * (b.tpr - a.tpr);
            }
        }
        pts.last().map_or(0.0, |p| p.tpr)
    }
}

/// ROC of discrepancy scores (lower = more likely positive). Tied scores form
/// a single operating point; AUC uses the trapezoid rule.
pub fn roc(scores: &[f64], labels: &[bool]) -> Result<Roc> {
    if scores.len() != labels.len() {
        return Err(LoopDetectError::LengthMismatch(scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(LoopDetectError::DegenerateLabels);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut points = vec![RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < idx.len() {
        let thr = scores[idx[k]];
        while k < idx.len() && scores[idx[k]] == thr {
            if labels[idx[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push(RocPoint {
            threshold: thr,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok(Roc { points, auc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::from_raw(v.to_vec()).unwrap()
    }

    fn random_embeddings(n: usize, dim: usize, seed: u64) -> Vec<Embedding> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        (0..n)
            .map(|_| emb(&(0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect()
    }

    #[test]
    fn discrepancy_basic_cases() {
        let a = emb(&[1.0, 0.0, 0.0]);
        assert_eq!(discrepancy(&a, &a).unwrap(), 0.0);
        assert_eq!(discrepancy(&a, &emb(&[0.0, 3.0, 0.0])).unwrap(), 1.0);
        assert_eq!(discrepancy(&a, &emb(&[-2.0, 0.0, 0.0])).unwrap(), 2.0);
        assert_eq!(discrepancy_raw(&[0.0, 0.0], &[1.0, 0.0]), Err(LoopDetectError::ZeroNorm));
        assert!(Embedding::from_raw(vec![0.0; 4]).is_err());
    }

    #[test]
    fn embeddings_have_unit_norm() {
        for e in random_embeddings(20, 16, 3) {
            let n: f64 = e.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn similarity_matrix_cases() {
        let same = vec![emb(&[1.0, 2.0]); 4];
        assert!(similarity_matrix(&same).unwrap().s.iter().all(|v| v.abs() < 1e-15));
        let orth = similarity_matrix(&[emb(&[1.0, 0.0]), emb(&[0.0, 1.0])]).unwrap();
        assert_eq!(orth.s[(0, 1)], 1.0);
        assert_eq!(orth.s[(1, 0)], 1.0);
        assert!(matches!(similarity_matrix(&same[..1]), Err(LoopDetectError::TooFew { .. })));
    }

    #[test]
    fn similarity_matrix_matches_naive_oracle() {
        let es = random_embeddings(50, 8, 11);
        let m = similarity_matrix(&es).unwrap();
        for i in 0..50 {
            for j in 0..50 {
                let expected = if i == j {
                    0.0
                } else {
                    let (a, b) = (es[i].as_slice(), es[j].as_slice());
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                    1.0 - (dot / (na * nb)).clamp(-1.0, 1.0)
                };
                assert_eq!(m.s[(i, j)], expected);
                assert!((0.0..=2.0).contains(&m.s[(i, j)]));
            }
        }
    }

    #[test]
    fn detect_revisit_and_exclusion() {
        let cfg = LoopDetectConfig::default();
        let mut es = random_embeddings(130, 16, 5);
        es[110] = es[10].clone();
        es[60] = es[55].clone();
        let found = detect_loops(&es, &cfg).unwrap();
        assert!(found.iter().any(|d| d.i == 10 && d.j == 110 && d.score == 0.0));
        assert!(!found.iter().any(|d| d.i == 55 && d.j == 60));
        assert!(found.iter().all(|d| d.i < d.j && d.j - d.i > 18));
        assert!(found.windows(2).all(|w| w[0].score <= w[1].score));

        let zero = LoopDetectConfig { zeta: 0.0, ..cfg };
        assert!(detect_loops(&es, &zero).unwrap().is_empty());
        assert!(detect_loops(&es, &LoopDetectConfig { zeta: 2.5, ..cfg }).is_err());
    }

    #[test]
    fn cosine_polarity_thresholds_similarity() {
        let es = vec![emb(&[1.0, 0.0]), emb(&[1.0, 0.0]), emb(&[0.0, 1.0])];
        let cfg = LoopDetectConfig {
            zeta: 0.045,
            adjacency_exclusion: 0,
            polarity: Polarity::Cosine,
        };
        let found = detect_loops(&es, &cfg).unwrap();
        let pairs: Vec<_> = found.iter().map(|d| (d.i, d.j)).collect();
        assert_eq!(pairs, vec![(0, 2), (1, 2)]);
    }

    #[test]
    fn roc_oracles() {
        let r = roc(&[0.1, 0.9], &[true, false]).unwrap();
        assert_eq!(r.auc, 1.0);
        let r = roc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap();
        assert_eq!(r.auc, 0.5);
        assert_eq!(r.points.len(), 2);
        assert!(matches!(roc(&[0.1, 0.2], &[true, true]), Err(LoopDetectError::DegenerateLabels)));
        assert!(matches!(roc(&[0.1], &[true, false]), Err(LoopDetectError::LengthMismatch(1, 2))));
    }

    #[test]
    fn roc_random_labels_near_half() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(99);
        let scores: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let mut labels: Vec<bool> = (0..10_000).map(|i| i % 2 == 0).collect();
        labels.shuffle(&mut rng);
        let r = roc(&scores, &labels).unwrap();
        assert!((r.auc - 0.5).abs() < 0.02, "auc {}", r.auc);
    }

    #[test]
    fn roc_auc_matches_pair_counting() {
        // AUC equals P(score_pos < score_neg) + ½ P(tie)
        let scores = [0.1, 0.4, 0.35, 0.8, 0.4, 0.2, 0.9, 0.05];
        let labels = [true, false, true, false, true, false, false, true];
        let r = roc(&scores, &labels).unwrap();
        let mut wins = 0.0;
        let mut total = 0.0;
        for (sp, _) in scores.iter().zip(labels).filter(|(_, l)| *l) {
            for (sn, _) in scores.iter().zip(labels).filter(|(_, l)| !*l) {
                total += 1.0;
                wins += if sp < sn { 1.0 } else if sp == sn { 0.5 } else { 0.0 };
            }
        }
        assert_relative_eq!(r.auc, wins / total, epsilon = 1e-12);
    }

    #[test]
    fn tpr_at_fpr_interpolates() {
        let r = roc(&[0.1, 0.2, 0.3, 0.4], &[true, false, true, false]).unwrap();
        // points: (0,0) (0,.5) (.5,.5) (.5,1) (1,1)
        assert_relative_eq!(r.tpr_at_fpr(0.25), 0.5);
        assert_relative_eq!(r.tpr_at_fpr(0.75), 1.0);
        assert_relative_eq!(r.tpr_at_fpr(0.0), 0.5);
    }

    fn random_rotation(rng: &mut Xoshiro256PlusPlus, dim: usize) -> DMatrix<f64> {
        let m = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
        m.qr().q()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn detection_invariant_under_rotation(seed in 0u64..1000) {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            // clustered embeddings so that some pairs are detected
            let centers = random_embeddings(4, 6, seed + 1);
            let es: Vec<Embedding> = (0..60)
                .map(|k| {
                    let c = centers[k % 4].as_slice();
                    emb(&c.iter().map(|x| x + rng.random_range(-0.05..0.05)).collect::<Vec<_>>())
                })
                .collect();
            let q = random_rotation(&mut rng, 6);
            let rotated: Vec<Embedding> = es
                .iter()
                .map(|e| emb((&q * nalgebra::DVector::from_column_slice(e.as_slice())).as_slice()))
                .collect();
            let cfg = LoopDetectConfig { adjacency_exclusion: 3, ..Default::default() };
            let a = detect_loops(&es, &cfg).unwrap();
            let b = detect_loops(&rotated, &cfg).unwrap();
            let pa: std::collections::BTreeSet<_> = a.iter().map(|d| (d.i, d.j)).collect();
            let pb: std::collections::BTreeSet<_> = b.iter().map(|d| (d.i, d.j)).collect();
            // pairs with score within rounding of ζ may flip; everything else must agree
            for p in pa.symmetric_difference(&pb) {
                let d = discrepancy(&es[p.0], &es[p.1]).unwrap();
                prop_assert!((d - cfg.zeta).abs() < 1e-9);
            }
            for (x, y) in a.iter().zip(&b) {
                if (x.i, x.j) == (y.i, y.j) {
                    prop_assert!((x.score - y.score).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn raising_zeta_is_monotone(seed in 0u64..1000, z1 in 0.0f64..1.0, dz in 0.0f64..0.9) {
            let es = random_embeddings(40, 3, seed);
            let c1 = LoopDetectConfig { zeta: z1, adjacency_exclusion: 2, ..Default::default() };
            let c2 = LoopDetectConfig { zeta: z1 + dz, ..c1 };
            let small: std::collections::BTreeSet<_> =
                detect_loops(&es, &c1).unwrap().iter().map(|d| (d.i, d.j)).collect();
            let big: std::collections::BTreeSet<_> =
                detect_loops(&es, &c2).unwrap().iter().map(|d| (d.i, d.j)).collect();
            prop_assert!(small.is_subset(&big));
        }
    }
}
