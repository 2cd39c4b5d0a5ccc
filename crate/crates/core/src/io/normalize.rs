//! Zero-mean/unit-variance scaling for cohort matrices and min-max
//! scaling to `[0, 1]` for volumes and maps.

use super::{IoError, Result};

/// Per-voxel mean and population standard deviation recorded by
/// [`zscore_standardize`]. Zero-variance columns keep `std == 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardizeStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Standardizes each column of a `rows x cols` row-major matrix to mean 0
/// and standard deviation 1 (population). Zero-variance columns pass
/// through as 0.
pub fn zscore_standardize(
    data: &[f32],
    rows: usize,
    cols: usize,
) -> Result<(Vec<f32>, StandardizeStats)> {
    if rows < 2 {
        return Err(IoError::Invalid(format!(
            "z-scoring requires at least 2 subjects, got {rows}"
        )));
    }
    if data.len() != rows * cols {
        return Err(IoError::Invalid(format!(
            "matrix length {} does not equal {rows}x{cols}",
            data.len()
        )));
    }
    let mut mean = vec![0.0f64; cols];
    for r in 0..rows {
        for c in 0..cols {
            mean[c] += data[r * cols + c] as f64;
        }
    }
    for m in &mut mean {
        *m /= rows as f64;
    }
    let mut var = vec![0.0f64; cols];
    for r in 0..rows {
        for c in 0..cols {
            let d = data[r * cols + c] as f64 - mean[c];
            var[c] += d * d;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / rows as f64).sqrt()).collect();
    let mut out = vec![0.0f32; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            if std[c] > 0.0 {
                out[r * cols + c] = ((data[r * cols + c] as f64 - mean[c]) / std[c]) as f32;
            }
        }
    }
    Ok((
        out,
        StandardizeStats {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: std.iter().map(|&s| s as f32).collect(),
        },
    ))
}

/// Inverse of [`zscore_standardize`]; zero-variance columns restore the
/// recorded mean.
pub fn zscore_destandardize(data: &[f32], rows: usize, stats: &StandardizeStats) -> Vec<f32> {
    let cols = stats.mean.len();
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = data[r * cols + c] * stats.std[c] + stats.mean[c];
        }
    }
    out
}

/// In-place min-max scaling to `[0, 1]`; constant input becomes all zeros.
pub fn minmax_normalize(values: &mut [f32]) {
    if values.is_empty() {
        return;
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for v in values.iter() {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if hi > lo {
        let inv = 1.0 / (hi - lo);
        for v in values.iter_mut() {
            *v = (*v - lo) * inv;
        }
    } else {
        values.fill(0.0);
    }
}

pub fn minmax_normalized(values: &[f32]) -> Vec<f32> {
    let mut out = values.to_vec();
    minmax_normalize(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_column_standardizes_to_unit() {
        // Column [1, 3]: population std is 1, so values land on -1 and 1.
        let (out, stats) = zscore_standardize(&[1.0, 3.0], 2, 1).unwrap();
        assert_eq!(out, vec![-1.0, 1.0]);
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.std, vec![1.0]);
    }

    #[test]
    fn constant_column_passes_through_as_zero() {
        let (out, stats) = zscore_standardize(&[5.0, 5.0], 2, 1).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
        assert_eq!(stats.std, vec![0.0]);
    }

    #[test]
    fn standardizing_standardized_data_is_identity() {
        let data = vec![-1.0, 0.5, 1.0, -0.5, 0.0, 0.0];
        let (once, _) = zscore_standardize(&data, 3, 2).unwrap();
        let (twice, _) = zscore_standardize(&once, 3, 2).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn destandardize_inverts() {
        let data = vec![1.0, 2.0, 3.0, 7.0, 5.0, 7.0];
        let (out, stats) = zscore_standardize(&data, 3, 2).unwrap();
        let back = zscore_destandardize(&out, 3, &stats);
        for (a, b) in data.iter().zip(&back) {
            assert!((a - b).abs() <= 1e-4);
        }
    }

    #[test]
    fn single_subject_matrix_errors() {
        assert!(zscore_standardize(&[1.0, 2.0], 1, 2).is_err());
    }

    #[test]
    fn minmax_examples() {
        let mut v = vec![2.0, 4.0, 6.0];
        minmax_normalize(&mut v);
        assert_eq!(v, vec![0.0, 0.5, 1.0]);
        let mut c = vec![7.0, 7.0];
        minmax_normalize(&mut c);
        assert_eq!(c, vec![0.0, 0.0]);
        // Idempotence.
        let mut again = v.clone();
        minmax_normalize(&mut again);
        assert_eq!(again, v);
    }
}
