//! Reconstruction and classification metrics with per-fold reports.

use super::{Result, TrainError};

/// Residual statistics of `reconstructed - original`:
/// RMSE = sqrt(mean(r^2)), MAE = mean(|r|), MSM = mean(r^2).
pub fn reconstruction_metrics(original: &[f32], reconstructed: &[f32]) -> Result<(f32, f32, f32)> {
    if original.len() != reconstructed.len() || original.is_empty() {
        return Err(TrainError::InvalidConfig(format!(
            "reconstruction_metrics: {} vs {} values",
            original.len(),
            reconstructed.len()
        )));
    }
    let mut sq = 0.0f64;
    let mut ab = 0.0f64;
    for (o, r) in original.iter().zip(reconstructed) {
        let d = (*r - *o) as f64;
        sq += d * d;
        ab += d.abs();
    }
    let n = original.len() as f64;
    let msm = sq / n;
    Ok((msm.sqrt() as f32, (ab / n) as f32, msm as f32))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassificationMetrics {
    pub f1: f32,
    pub accuracy: f32,
    pub sensitivity: f32,
    pub precision: f32,
    /// Set when any ratio had a zero denominator and was reported as 0.
    pub zero_division: bool,
}

/// Confusion-matrix metrics with the shorter-term class (label 1) as
/// positive. Sensitivity is the recall of that class.
pub fn classification_metrics(labels: &[usize], preds: &[usize]) -> Result<ClassificationMetrics> {
    if labels.len() != preds.len() || labels.is_empty() {
        return Err(TrainError::InvalidConfig(format!(
            "classification_metrics: {} labels vs {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    if labels.iter().chain(preds).any(|&v| v > 1) {
        return Err(TrainError::InvalidConfig("labels must be binary".into()));
    }
    let (mut tp, mut tn, mut fp, mut fne) = (0usize, 0usize, 0usize, 0usize);
    for (&l, &p) in labels.iter().zip(preds) {
        match (l, p) {
            (1, 1) => tp += 1,
            (0, 0) => tn += 1,
            (0, 1) => fp += 1,
            (1, 0) => fne += 1,
            _ => unreachable!(),
        }
    }
    let mut zero_division = false;
    let mut ratio = |num: usize, den: usize| -> f32 {
        if den == 0 {
            zero_division = true;
            0.0
        } else {
            num as f32 / den as f32
        }
    };
    let accuracy = (tp + tn) as f32 / labels.len() as f32;
    let sensitivity = ratio(tp, tp + fne);
    let precision = ratio(tp, tp + fp);
    let f1 = if precision + sensitivity > 0.0 {
        2.0 * precision * sensitivity / (precision + sensitivity)
    } else {
        zero_division = true;
        0.0
    };
    Ok(ClassificationMetrics {
        f1,
        accuracy,
        sensitivity,
        precision,
        zero_division,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconFold {
    pub fold: usize,
    pub train_loss: f32,
    pub val_loss: f32,
    pub rmse: f32,
    pub mae: f32,
    pub msm: f32,
}

/// Per-fold reconstruction metrics plus mean/std aggregates (population
/// std over folds).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ReconReport {
    pub folds: Vec<ReconFold>,
}

fn mean_std(values: &[f32]) -> (f32, f32) {
    let n = values.len() as f64;
    let mean: f64 = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var: f64 = values
        .iter()
        .map(|&v| (v as f64 - mean) * (v as f64 - mean))
        .sum::<f64>()
        / n;
    (mean as f32, var.sqrt() as f32)
}

impl ReconReport {
    pub fn aggregate(&self) -> [(f32, f32); 5] {
        let cols: [Vec<f32>; 5] = [
            self.folds.iter().map(|f| f.train_loss).collect(),
            self.folds.iter().map(|f| f.val_loss).collect(),
            self.folds.iter().map(|f| f.rmse).collect(),
            self.folds.iter().map(|f| f.mae).collect(),
            self.folds.iter().map(|f| f.msm).collect(),
        ];
        cols.map(|c| mean_std(&c))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,train_loss,val_loss,rmse,mae,msm\n");
        for f in &self.folds {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                f.fold, f.train_loss, f.val_loss, f.rmse, f.mae, f.msm
            ));
        }
        let agg = self.aggregate();
        out.push_str(&format!(
            "mean,{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            agg[0].0, agg[1].0, agg[2].0, agg[3].0, agg[4].0
        ));
        out.push_str(&format!(
            "std,{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            agg[0].1, agg[1].1, agg[2].1, agg[3].1, agg[4].1
        ));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifFold {
    pub fold: usize,
    pub train_loss: f32,
    pub val_loss: f32,
    pub metrics: ClassificationMetrics,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ClassifReport {
    pub folds: Vec<ClassifFold>,
}

impl ClassifReport {
    pub fn mean_accuracy(&self) -> f32 {
        let (m, _) = mean_std(
            &self
                .folds
                .iter()
                .map(|f| f.metrics.accuracy)
                .collect::<Vec<_>>(),
        );
        m
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,train_loss,val_loss,f1,accuracy,sensitivity,precision\n");
        for f in &self.folds {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                f.fold,
                f.train_loss,
                f.val_loss,
                f.metrics.f1,
                f.metrics.accuracy,
                f.metrics.sensitivity,
                f.metrics.precision
            ));
        }
        let cols: [Vec<f32>; 6] = [
            self.folds.iter().map(|f| f.train_loss).collect(),
            self.folds.iter().map(|f| f.val_loss).collect(),
            self.folds.iter().map(|f| f.metrics.f1).collect(),
            self.folds.iter().map(|f| f.metrics.accuracy).collect(),
            self.folds.iter().map(|f| f.metrics.sensitivity).collect(),
            self.folds.iter().map(|f| f.metrics.precision).collect(),
        ];
        let agg = cols.map(|c| mean_std(&c));
        out.push_str(&format!(
            "mean,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            agg[0].0, agg[1].0, agg[2].0, agg[3].0, agg[4].0, agg[5].0
        ));
        out.push_str(&format!(
            "std,{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            agg[0].1, agg[1].1, agg[2].1, agg[3].1, agg[4].1, agg[5].1
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_volumes_have_zero_residual_metrics() {
        let v = vec![0.3f32, 0.7, 0.1];
        assert_eq!(reconstruction_metrics(&v, &v).unwrap(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn constant_residual_hand_case() {
        let orig = vec![0.0f32; 16];
        let recon = vec![0.1f32; 16];
        let (rmse, mae, msm) = reconstruction_metrics(&orig, &recon).unwrap();
        assert!((rmse - 0.1).abs() < 1e-6);
        assert!((mae - 0.1).abs() < 1e-6);
        assert!((msm - 0.01).abs() < 1e-7);
    }

    #[test]
    fn rmse_squared_equals_msm() {
        let orig = vec![0.2f32, -0.4, 1.5, 0.0, 0.9];
        let recon = vec![0.5f32, 0.1, 1.0, -0.3, 1.2];
        let (rmse, _, msm) = reconstruction_metrics(&orig, &recon).unwrap();
        assert!((rmse * rmse - msm).abs() < 1e-6);
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let m = classification_metrics(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!(
            (m.f1, m.accuracy, m.sensitivity, m.precision),
            (1.0, 1.0, 1.0, 1.0)
        );
        assert!(!m.zero_division);
    }

    #[test]
    fn all_negative_predictions_flag_zero_division() {
        let m = classification_metrics(&[1, 1, 0, 0], &[0, 0, 0, 0]).unwrap();
        assert_eq!(m.sensitivity, 0.0);
        assert_eq!(m.precision, 0.0);
        assert!(m.zero_division);
    }

    #[test]
    fn hand_counted_confusion_case() {
        let m = classification_metrics(&[1, 1, 0, 0], &[1, 0, 0, 0]).unwrap();
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.sensitivity, 0.5);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-6);
        assert_eq!(m.accuracy, 0.75);
    }
}
