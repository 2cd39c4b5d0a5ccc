//! Explanation-quality metrics: perturbation faithfulness, Gini
//! sparseness, global SSIM, and residual map comparison. These back both
//! the baseline method evaluation and the global optimizer loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::models::{logit_value, reconstruction_metrics, LogitModel};
use crate::seed::derive;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum QualityError {
    #[error("degenerate variance: {0}")]
    DegenerateVariance(&'static str),
    #[error("all-zero attribution vector")]
    AllZero,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, QualityError>;

/// Perturbation-faithfulness configuration. Each draw blanks a random
/// subset of `ceil(subset_fraction * d)` features to the zero baseline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaithfulnessConfig {
    pub n_perturbations: usize,
    pub subset_fraction: f32,
    pub seed: u64,
}

impl Default for FaithfulnessConfig {
    fn default() -> Self {
        FaithfulnessConfig {
            n_perturbations: 20,
            subset_fraction: 0.1,
            seed: 0,
        }
    }
}

impl FaithfulnessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_perturbations < 3 {
            return Err(QualityError::InvalidArg(format!(
                "need at least 3 perturbations, got {}",
                self.n_perturbations
            )));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction < 1.0) {
            return Err(QualityError::InvalidArg(format!(
                "subset fraction must lie in (0, 1), got {}",
                self.subset_fraction
            )));
        }
        Ok(())
    }

    pub fn subset_size(&self, d: usize) -> usize {
        ((self.subset_fraction as f64 * d as f64).ceil() as usize).clamp(1, d)
    }
}

/// Draws `n` seeded index subsets of the given size from `0..d`
/// (partial Fisher-Yates; indices within a subset are distinct).
pub fn draw_subsets(d: usize, size: usize, n: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<u32> = (0..d as u32).collect();
    (0..n)
        .map(|_| {
            for i in 0..size.min(d) {
                let j = rng.gen_range(i..d);
                pool.swap(i, j);
            }
            let mut subset = pool[..size.min(d)].to_vec();
            subset.sort_unstable();
            subset
        })
        .collect()
}

/// For each subset, the model-output change `f(x) - f(x[S := 0])` on the
/// requested class logit.
pub fn subset_deltas<M: LogitModel>(
    model: &M,
    x: &Tensor,
    class: usize,
    subsets: &[Vec<u32>],
) -> Result<Vec<f32>> {
    let fx = logit_value(model, x, class)?;
    let mut out = Vec::with_capacity(subsets.len());
    for subset in subsets {
        let mut perturbed = x.clone();
        {
            let data = perturbed.data_mut();
            for &i in subset {
                data[i as usize] = 0.0;
            }
        }
        out.push(fx - logit_value(model, &perturbed, class)?);
    }
    Ok(out)
}

/// Pearson correlation between per-subset attribution sums and
/// precomputed output deltas.
pub fn faithfulness_from_pairs(g: &[f32], subsets: &[Vec<u32>], deltas: &[f32]) -> Result<f32> {
    if subsets.len() != deltas.len() || subsets.len() < 3 {
        return Err(QualityError::InvalidArg(format!(
            "{} subsets vs {} deltas",
            subsets.len(),
            deltas.len()
        )));
    }
    let sums: Vec<f64> = subsets
        .iter()
        .map(|s| s.iter().map(|&i| g[i as usize] as f64).sum())
        .collect();
    let deltas: Vec<f64> = deltas.iter().map(|&d| d as f64).collect();
    pearson(&sums, &deltas)
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f32> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0f64;
    let mut va = 0.0f64;
    let mut vb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        num += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va <= 0.0 {
        return Err(QualityError::DegenerateVariance(
            "attribution subset sums are constant across draws",
        ));
    }
    if vb <= 0.0 {
        return Err(QualityError::DegenerateVariance(
            "model output change is constant across draws",
        ));
    }
    Ok(((num / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0)) as f32)
}

/// Faithfulness of attribution `g` for input `x`: Pearson correlation
/// between subset attribution sums and the matching output drops over
/// seeded random subsets.
pub fn faithfulness<M: LogitModel>(
    model: &M,
    g: &[f32],
    x: &Tensor,
    class: usize,
    cfg: &FaithfulnessConfig,
) -> Result<f32> {
    cfg.validate()?;
    if g.len() != x.numel() {
        return Err(QualityError::ShapeMismatch(format!(
            "attribution has {} values, input has {}",
            g.len(),
            x.numel()
        )));
    }
    let subsets = draw_subsets(
        x.numel(),
        cfg.subset_size(x.numel()),
        cfg.n_perturbations,
        cfg.seed,
    );
    let deltas = subset_deltas(model, x, class, &subsets)?;
    faithfulness_from_pairs(g, &subsets, &deltas)
}

/// Cohort-level faithfulness of one shared map: the mean over subjects of
/// per-subject faithfulness, with the subset stream split per subject.
pub fn cohort_faithfulness<M: LogitModel>(
    model: &M,
    g: &[f32],
    subjects: &[Tensor],
    class: usize,
    cfg: &FaithfulnessConfig,
) -> Result<f32> {
    if subjects.is_empty() {
        return Err(QualityError::InvalidArg("no evaluation subjects".into()));
    }
    let mut acc = 0.0f64;
    for (i, x) in subjects.iter().enumerate() {
        let sub_cfg = FaithfulnessConfig {
            seed: derive(cfg.seed, "cohort-faith", i as u64),
            ..*cfg
        };
        acc += faithfulness(model, g, x, class, &sub_cfg)? as f64;
    }
    Ok((acc / subjects.len() as f64) as f32)
}

/// Gini index of the absolute attribution values: 0 for uniform maps,
/// approaching 1 as mass concentrates on a single feature.
pub fn sparseness(g: &[f32]) -> Result<f32> {
    if g.is_empty() {
        return Err(QualityError::InvalidArg("empty attribution vector".into()));
    }
    let mut v: Vec<f64> = g.iter().map(|&x| (x as f64).abs()).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let total: f64 = v.iter().sum();
    if total <= 0.0 {
        return Err(QualityError::AllZero);
    }
    let d = v.len() as f64;
    let mut acc = 0.0f64;
    for (k, value) in v.iter().enumerate() {
        // k is 0-based here; the sort-rank formula is 1-based.
        acc += (value / total) * ((d - (k + 1) as f64 + 0.5) / d);
    }
    Ok((1.0 - 2.0 * acc) as f32)
}

/// Global (non-windowed) SSIM over all values, population statistics.
pub fn ssim(x: &[f32], y: &[f32], c1: f32, c2: f32) -> Result<f32> {
    if x.len() != y.len() || x.is_empty() {
        return Err(QualityError::ShapeMismatch(format!(
            "{} vs {} values",
            x.len(),
            y.len()
        )));
    }
    if !(c1 > 0.0 && c2 > 0.0) {
        return Err(QualityError::InvalidArg(
            "SSIM stabilizers must be positive".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let my = y.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mut vx = 0.0f64;
    let mut vy = 0.0f64;
    let mut cov = 0.0f64;
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a as f64 - mx, b as f64 - my);
        vx += dx * dx;
        vy += dy * dy;
        cov += dx * dy;
    }
    vx /= n;
    vy /= n;
    cov /= n;
    let (c1, c2) = (c1 as f64, c2 as f64);
    let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
    let den = (mx * mx + my * my + c1) * (vx + vy + c2);
    Ok((num / den) as f32)
}

/// Residual statistics (RMSE, MAE, MSM) between an explanation and a
/// reference map (downstream: the cohort's first structural component).
pub fn map_compare(g: &[f32], reference: &[f32]) -> Result<(f32, f32, f32)> {
    reconstruction_metrics(reference, g).map_err(|e| QualityError::ShapeMismatch(e.to_string()))
}

/// One row of the per-method quality table.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityRow {
    pub method: String,
    pub rmse: f32,
    pub mae: f32,
    pub msm: f32,
    pub sparseness: f32,
    /// `None` when the faithfulness correlation was degenerate.
    pub faithfulness: Option<f32>,
}

/// Quality table with the evaluation columns
/// RMSE, MAE, MSM, sparseness, faithfulness.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct QualityReport {
    pub rows: Vec<QualityRow>,
}

impl QualityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,rmse,mae,msm,sparseness,faithfulness\n");
        for r in &self.rows {
            let faith = match r.faithfulness {
                Some(f) => format!("{f:.6}"),
                None => "nan".to_string(),
            };
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{}\n",
                r.method, r.rmse, r.mae, r.msm, r.sparseness, faith
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LinearModel;

    fn linear_model(w: Vec<f32>) -> LinearModel {
        let d = w.len();
        LinearModel::new(
            Tensor::new(vec![1, d], w).unwrap(),
            Tensor::from_vec(vec![0.0]),
        )
    }

    #[test]
    fn linear_model_with_product_map_is_perfectly_faithful() {
        let w: Vec<f32> = (0..32).map(|i| (i as f32 - 16.0) * 0.1 + 0.05).collect();
        let x: Vec<f32> = (0..32)
            .map(|i| ((i * 7 + 3) % 11) as f32 * 0.2 - 1.0)
            .collect();
        let model = linear_model(w.clone());
        let g: Vec<f32> = w.iter().zip(&x).map(|(a, b)| a * b).collect();
        let xt = Tensor::from_vec(x);
        let cfg = FaithfulnessConfig::default();
        let f = faithfulness(&model, &g, &xt, 0, &cfg).unwrap();
        assert!((f - 1.0).abs() <= 1e-6, "got {f}");
        let neg: Vec<f32> = g.iter().map(|v| -v).collect();
        let fneg = faithfulness(&model, &neg, &xt, 0, &cfg).unwrap();
        assert!((fneg + 1.0).abs() <= 1e-6, "got {fneg}");
    }

    #[test]
    fn constant_model_is_degenerate() {
        let model = linear_model(vec![0.0; 16]);
        let g = vec![1.0f32; 16];
        let x = Tensor::from_vec(vec![0.5; 16]);
        assert!(matches!(
            faithfulness(&model, &g, &x, 0, &FaithfulnessConfig::default()),
            Err(QualityError::DegenerateVariance(_))
        ));
    }

    #[test]
    fn faithfulness_is_deterministic_and_scale_invariant() {
        let w: Vec<f32> = (0..24).map(|i| (i as f32) * 0.07 - 0.8).collect();
        let model = linear_model(w.clone());
        let x: Vec<f32> = (0..24).map(|i| ((i % 5) as f32) * 0.3 - 0.6).collect();
        let xt = Tensor::from_vec(x);
        let cfg = FaithfulnessConfig {
            seed: 9,
            ..Default::default()
        };
        // An imperfect explanation (raw weights) still correlates; scaling
        // it cannot change a Pearson correlation.
        let f1 = faithfulness(&model, &w, &xt, 0, &cfg).unwrap();
        let f2 = faithfulness(&model, &w, &xt, 0, &cfg).unwrap();
        assert_eq!(f1, f2);
        let scaled: Vec<f32> = w.iter().map(|v| 3.5 * v).collect();
        let f3 = faithfulness(&model, &scaled, &xt, 0, &cfg).unwrap();
        assert!((f1 - f3).abs() <= 1e-6);
    }

    #[test]
    fn sparseness_analytic_cases() {
        assert!((sparseness(&[0.25; 4]).unwrap() - 0.0).abs() < 1e-7);
        assert!((sparseness(&[0.0, 0.0, 0.0, 1.0]).unwrap() - 0.75).abs() < 1e-7);
        assert!((sparseness(&[1.0, 3.0]).unwrap() - 0.25).abs() < 1e-7);
        assert!(matches!(sparseness(&[0.0; 4]), Err(QualityError::AllZero)));
    }

    #[test]
    fn ssim_identity_symmetry_and_constant_case() {
        let x: Vec<f32> = (0..64).map(|i| (i as f32 * 0.37).sin()).collect();
        assert_eq!(ssim(&x, &x, 1e-4, 9e-4).unwrap(), 1.0);
        let y: Vec<f32> = (0..64).map(|i| (i as f32 * 0.11).cos()).collect();
        assert_eq!(
            ssim(&x, &y, 1e-4, 9e-4).unwrap(),
            ssim(&y, &x, 1e-4, 9e-4).unwrap()
        );
        let zeros = vec![0.0f32; 32];
        let ones = vec![1.0f32; 32];
        let s = ssim(&zeros, &ones, 1e-4, 9e-4).unwrap();
        assert!((s - 1.0e-4).abs() <= 1e-6, "got {s}");
    }

    #[test]
    fn map_compare_hand_case() {
        let reference = vec![0.0f32; 8];
        let g = vec![0.5f32; 8];
        let (rmse, mae, msm) = map_compare(&g, &reference).unwrap();
        assert!((rmse - 0.5).abs() < 1e-6);
        assert!((mae - 0.5).abs() < 1e-6);
        assert!((msm - 0.25).abs() < 1e-6);
    }
}
