//! Fréchet distance between Gaussian fits of classifier features, and a
//! cosine alignment score between dual-encoder image and caption
//! embeddings, aggregated per background category.

use std::fmt::Write as _;

use crate::datasynth::{Background, Sample};
use crate::nn::{self, ModelKind, Vocabulary};
use crate::training::Checkpoint;
use crate::{Error, Result, Tensor};

/// Fewer images than this leave the covariance rank-deficient; the image
/// path then shrinks it towards a scaled identity.
pub const MIN_FULL_RANK: usize = nn::FEATURE_DIM + 1;
/// Eigenvalues more negative than this fraction of the largest magnitude are
/// treated as a genuine loss of positive semidefiniteness.
pub const EIGEN_CLAMP_REL: f64 = 1e-6;
const EIGEN_CLAMP_ABS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub count: usize,
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub cov: Vec<f64>,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sample mean and unbiased covariance (two passes). A single sample
    /// yields a zero covariance.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n == 0 {
            return Err(Error::Eval("feature statistics of an empty set".into()));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(Error::Eval("feature vectors must share a nonzero length".into()));
        }
        let mut mean = vec![0.0; d];
        for f in features {
            mean.iter_mut().zip(f).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for f in features {
            let c: Vec<f64> = f.iter().zip(&mean).map(|(v, m)| v - m).collect();
            for i in 0..d {
                for j in i..d {
                    cov[i * d + j] += c[i] * c[j];
                }
            }
        }
        let denom = (n.max(2) - 1) as f64;
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / denom;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(Self { count: n, mean, cov })
    }

    /// `(1 − λ)·Σ + λ·(tr Σ / d)·I`.
    pub fn shrink(&mut self, lambda: f64) {
        let d = self.dim();
        let avg = (0..d).map(|i| self.cov[i * d + i]).sum::<f64>() / d as f64;
        for i in 0..d {
            for j in 0..d {
                let v = &mut self.cov[i * d + j];
                *v *= 1.0 - lambda;
                if i == j {
                    *v += lambda * avg;
                }
            }
        }
    }
}

/// Classifier-feature statistics of `images`. With fewer than
/// [`MIN_FULL_RANK`] images the covariance is shrunk with weight
/// `(MIN_FULL_RANK − n) / MIN_FULL_RANK` and a warning is logged.
pub fn feature_stats(images: &[&Tensor], classifier: &Checkpoint) -> Result<FeatureStats> {
    classifier.expect_kind(ModelKind::Classifier)?;
    if images.is_empty() {
        return Err(Error::Eval("feature statistics of an empty image set".into()));
    }
    let (features, _) = nn::classifier_features(&classifier.params, images)?;
    let mut stats = FeatureStats::from_features(&features)?;
    if images.len() < MIN_FULL_RANK {
        log::warn!(
            "only {} images for feature statistics; shrinking covariance",
            images.len()
        );
        stats.shrink((MIN_FULL_RANK - images.len()) as f64 / MIN_FULL_RANK as f64);
    }
    Ok(stats)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and row-major eigenvectors (column `k` pairs with
/// eigenvalue `k`).
pub fn symmetric_eigen(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    (0..d).for_each(|i| v[i * d + i] = 1.0);
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        return (vec![0.0; d], v);
    }
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * d + j] * m[i * d + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[q * d + q] - m[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (m[k * d + p], m[k * d + q]);
                    m[k * d + p] = c * akp - s * akq;
                    m[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (m[p * d + k], m[q * d + k]);
                    m[p * d + k] = c * apk - s * aqk;
                    m[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[k * d + p], v[k * d + q]);
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..d).map(|i| m[i * d + i]).collect(), v)
}

/// Clamps eigenvalues that are negative only by round-off; rejects larger
/// violations.
fn clamp_eigenvalues(vals: &mut [f64], what: &str) -> Result<()> {
    let biggest = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = EIGEN_CLAMP_REL * biggest + EIGEN_CLAMP_ABS;
    for v in vals.iter_mut() {
        if *v < -tol {
            return Err(Error::Eval(format!(
                "{what} is not positive semidefinite: eigenvalue {v:e} below -{tol:e}"
            )));
        }
        *v = v.max(0.0);
    }
    Ok(())
}

fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// `‖μ₁ − μ₂‖² + tr Σ₁ + tr Σ₂ − 2·tr (√Σ₁ Σ₂ √Σ₁)^{1/2}`, with `√Σ₁` and the
/// final root taken through symmetric eigendecompositions.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::Eval(format!("dimension mismatch: {d} vs {}", b.dim())));
    }
    let (mut l1, q1) = symmetric_eigen(&a.cov, d);
    clamp_eigenvalues(&mut l1, "first covariance")?;
    clamp_eigenvalues(&mut symmetric_eigen(&b.cov, d).0, "second covariance")?;
    let mut root = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            root[i * d + j] = (0..d).map(|k| q1[i * d + k] * l1[k].sqrt() * q1[j * d + k]).sum();
        }
    }
    let mut m = matmul(&matmul(&root, &b.cov, d), &root, d);
    for i in 0..d {
        for j in i + 1..d {
            let s = 0.5 * (m[i * d + j] + m[j * d + i]);
            m[i * d + j] = s;
            m[j * d + i] = s;
        }
    }
    let (mut lm, _) = symmetric_eigen(&m, d);
    clamp_eigenvalues(&mut lm, "covariance product")?;
    let tr_sqrt: f64 = lm.iter().map(|v| v.sqrt()).sum();
    let dmu: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let tr1: f64 = (0..d).map(|i| a.cov[i * d + i]).sum();
    let tr2: f64 = (0..d).map(|i| b.cov[i * d + i]).sum();
    Ok((dmu + tr1 + tr2 - 2.0 * tr_sqrt).max(0.0))
}

/// `100 · max(cos(u, v), 0)`.
pub fn alignment_from_embeddings(image: &[f64], text: &[f64]) -> Result<f64> {
    if image.len() != text.len() {
        return Err(Error::Eval("embedding dimensions differ".into()));
    }
    let nu = image.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = text.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Eval("zero-norm embedding".into()));
    }
    let cos = image.iter().zip(text).map(|(x, y)| x * y).sum::<f64>() / (nu * nv);
    Ok(100.0 * cos.max(0.0))
}

pub fn alignment_score(image: &Tensor, caption: &str, dual: &Checkpoint, vocab: &Vocabulary) -> Result<f64> {
    dual.expect_kind(ModelKind::DualEncoder)?;
    let ie = nn::dual_image_embedding(&dual.params, &[image])?;
    let te = nn::dual_text_embedding(&dual.params, vocab, &[caption])?;
    alignment_from_embeddings(&ie[0], &te[0])
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryScore {
    pub category: Background,
    pub fid: f64,
    pub alignment: f64,
    pub n_generated: usize,
    pub n_real: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub categories: Vec<CategoryScore>,
    pub fid_mean: f64,
    pub fid_median: f64,
    pub alignment_mean: f64,
    pub alignment_median: f64,
    /// Categories found on one side only, with the side that had them.
    pub skipped: Vec<(Background, &'static str)>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

impl ScoreReport {
    /// Aggregates per-category rows (sorted into category order).
    pub fn from_categories(mut categories: Vec<CategoryScore>, skipped: Vec<(Background, &'static str)>) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::Eval("no category present on both sides".into()));
        }
        categories.sort_by_key(|c| c.category);
        let fids: Vec<f64> = categories.iter().map(|c| c.fid).collect();
        let aligns: Vec<f64> = categories.iter().map(|c| c.alignment).collect();
        Ok(Self {
            fid_mean: mean(&fids),
            fid_median: median(&fids),
            alignment_mean: mean(&aligns),
            alignment_median: median(&aligns),
            categories,
            skipped,
        })
    }

    /// Tab-separated `category  metric  value` lines followed by the overall
    /// aggregates and any skipped categories.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# category\tmetric\tvalue\n");
        for c in &self.categories {
            let name = c.category.word();
            let _ = writeln!(s, "{name}\tfid\t{}", c.fid);
            let _ = writeln!(s, "{name}\talignment\t{}", c.alignment);
            let _ = writeln!(s, "{name}\tn_generated\t{}", c.n_generated);
            let _ = writeln!(s, "{name}\tn_real\t{}", c.n_real);
        }
        let _ = writeln!(s, "overall\tfid_mean\t{}", self.fid_mean);
        let _ = writeln!(s, "overall\tfid_median\t{}", self.fid_median);
        let _ = writeln!(s, "overall\talignment_mean\t{}", self.alignment_mean);
        let _ = writeln!(s, "overall\talignment_median\t{}", self.alignment_median);
        for (cat, side) in &self.skipped {
            let _ = writeln!(s, "skipped\t{}\tonly in {side}", cat.word());
        }
        s
    }
}

fn sorted(samples: &[Sample]) -> Vec<&Sample> {
    let mut v: Vec<&Sample> = samples.iter().collect();
    v.sort_by(|a, b| (&a.file, &a.caption).cmp(&(&b.file, &b.caption)));
    v
}

/// Per-category FID of generated against real images of the same category,
/// and mean alignment of generated images with their captions. Inputs are
/// sorted by file name first, so the result ignores input order.
pub fn report(generated: &[Sample], real: &[Sample], classifier: &Checkpoint, dual: &Checkpoint) -> Result<ScoreReport> {
    if generated.is_empty() || real.is_empty() {
        return Err(Error::Eval("report needs nonempty generated and real sets".into()));
    }
    let (gen, real) = (sorted(generated), sorted(real));
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for &cat in Background::ALL {
        let g: Vec<&Sample> = gen.iter().copied().filter(|s| s.category == cat).collect();
        let r: Vec<&Sample> = real.iter().copied().filter(|s| s.category == cat).collect();
        match (g.is_empty(), r.is_empty()) {
            (true, true) => continue,
            (false, true) => {
                log::warn!("category {} only among generated images; skipped", cat.word());
                skipped.push((cat, "generated"));
                continue;
            }
            (true, false) => {
                log::warn!("category {} only among real images; skipped", cat.word());
                skipped.push((cat, "real"));
                continue;
            }
            _ => {}
        }
        let gi: Vec<&Tensor> = g.iter().map(|s| &s.image).collect();
        let ri: Vec<&Tensor> = r.iter().map(|s| &s.image).collect();
        let fid = frechet_distance(&feature_stats(&gi, classifier)?, &feature_stats(&ri, classifier)?)?;
        dual.expect_kind(ModelKind::DualEncoder)?;
        let ie = nn::dual_image_embedding(&dual.params, &gi)?;
        let caps: Vec<&str> = g.iter().map(|s| s.caption.as_str()).collect();
        let te = nn::dual_text_embedding(&dual.params, &dual.vocab, &caps)?;
        let mut total = 0.0;
        for (u, v) in ie.iter().zip(&te) {
            total += alignment_from_embeddings(u, v)?;
        }
        rows.push(CategoryScore {
            category: cat,
            fid,
            alignment: total / g.len() as f64,
            n_generated: g.len(),
            n_real: r.len(),
        });
    }
    ScoreReport::from_categories(rows, skipped)
}
