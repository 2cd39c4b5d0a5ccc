//! PCA for the small-sample regime (subjects far fewer than voxels).
//!
//! The decomposition runs on the `subjects x subjects` Gram matrix of the
//! row-centered data via cyclic Jacobi rotations, so the voxel-space
//! covariance is never formed. Components are the top right singular
//! vectors; each is sign-canonicalized so its largest-magnitude entry is
//! positive, which makes the fit deterministic.

use crate::io::VolumeHeader;
use crate::seed::fingerprint_f32;

use super::{CohortMatrix, LatentError, Result};

/// Fitted basis: voxel mean, orthonormal components (rows of `k x voxels`),
/// and explained-variance ratios.
#[derive(Clone, Debug)]
pub struct PcaBasis {
    pub mean: Vec<f32>,
    components: Vec<f32>,
    pub explained_variance_ratio: Vec<f32>,
    pub k: usize,
    cols: usize,
    header: VolumeHeader,
    fingerprint: u64,
}

impl PcaBasis {
    /// Assembles a basis from raw parts (e.g. one loaded from disk or
    /// constructed for a controlled experiment). Component rows are laid
    /// out `k x voxels`.
    pub fn from_parts(
        mean: Vec<f32>,
        components: Vec<f32>,
        explained_variance_ratio: Vec<f32>,
        header: VolumeHeader,
    ) -> Result<Self> {
        let cols = header.num_voxels();
        if mean.len() != cols || components.len() % cols != 0 {
            return Err(LatentError::DimMismatch(format!(
                "mean {} / components {} vs {} voxels",
                mean.len(),
                components.len(),
                cols
            )));
        }
        let k = components.len() / cols;
        if explained_variance_ratio.len() != k {
            return Err(LatentError::DimMismatch(format!(
                "{} variance ratios for {k} components",
                explained_variance_ratio.len()
            )));
        }
        let mut fp = fingerprint_f32(&components) ^ fingerprint_f32(&mean);
        fp ^= (k as u64).wrapping_mul(0x9e3779b97f4a7c15);
        Ok(PcaBasis {
            mean,
            components,
            explained_variance_ratio,
            k,
            cols,
            header,
            fingerprint: fp,
        })
    }

    pub fn component(&self, i: usize) -> &[f32] {
        &self.components[i * self.cols..(i + 1) * self.cols]
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn header(&self) -> &VolumeHeader {
        &self.header
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Scores of one flattened row in this basis.
    pub fn project(&self, row: &[f32]) -> Result<Vec<f32>> {
        if row.len() != self.cols {
            return Err(LatentError::DimMismatch(format!(
                "row has {} values, basis expects {}",
                row.len(),
                self.cols
            )));
        }
        let mut scores = Vec::with_capacity(self.k);
        for i in 0..self.k {
            let comp = self.component(i);
            let mut acc = 0.0f64;
            for j in 0..self.cols {
                acc += (row[j] - self.mean[j]) as f64 * comp[j] as f64;
            }
            scores.push(acc as f32);
        }
        Ok(scores)
    }

    /// Reconstructs a row from scores (mean plus component mixture).
    pub fn reconstruct(&self, scores: &[f32]) -> Vec<f32> {
        let mut out = self.mean.clone();
        for (i, s) in scores.iter().enumerate().take(self.k) {
            let comp = self.component(i);
            for j in 0..self.cols {
                out[j] += s * comp[j];
            }
        }
        out
    }
}

/// Eigen-decomposition pieces shared by `fit_pca` and `select_k_by_variance`.
struct GramEigen {
    eigenvalues: Vec<f64>,
    eigenvectors: Vec<Vec<f64>>, // one vector per eigenvalue, length = rows
    total: f64,
    centered: Vec<f64>,
    mean: Vec<f64>,
}

fn gram_eigen(m: &CohortMatrix) -> Result<GramEigen> {
    let (rows, cols) = (m.rows(), m.cols());
    if rows < 2 {
        return Err(LatentError::TooFewSubjects(rows));
    }
    let mut mean = vec![0.0f64; cols];
    for r in 0..rows {
        let row = m.row(r);
        for c in 0..cols {
            mean[c] += row[c] as f64;
        }
    }
    for v in &mut mean {
        *v /= rows as f64;
    }
    let mut centered = vec![0.0f64; rows * cols];
    for r in 0..rows {
        let row = m.row(r);
        for c in 0..cols {
            centered[r * cols + c] = row[c] as f64 - mean[c];
        }
    }
    let mut gram = vec![vec![0.0f64; rows]; rows];
    for i in 0..rows {
        for j in i..rows {
            let mut acc = 0.0f64;
            let (a, b) = (&centered[i * cols..], &centered[j * cols..]);
            for c in 0..cols {
                acc += a[c] * b[c];
            }
            gram[i][j] = acc;
            gram[j][i] = acc;
        }
    }
    let total: f64 = (0..rows).map(|i| gram[i][i]).sum();
    let (eigenvalues, eigenvectors) = jacobi_symmetric(gram);
    Ok(GramEigen {
        eigenvalues,
        eigenvectors,
        total,
        centered,
        mean,
    })
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors) sorted by descending eigenvalue.
fn jacobi_symmetric(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0f64; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let off = |a: &Vec<Vec<f64>>| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += a[i][j] * a[i][j];
            }
        }
        s
    };
    let scale: f64 = (0..n).map(|i| a[i][i].abs()).fold(1e-300, f64::max);
    let tol = (scale * 1e-14).powi(2) * n as f64 * n as f64;
    for _sweep in 0..100 {
        if off(&a) <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() <= scale * 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let (aip, aiq) = (a[i][p], a[i][q]);
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for i in 0..n {
                    let (api, aqi) = (a[p][i], a[q][i]);
                    a[p][i] = c * api - s * aqi;
                    a[q][i] = s * api + c * aqi;
                }
                for row in v.iter_mut() {
                    let (vip, viq) = (row[p], row[q]);
                    row[p] = c * vip - s * viq;
                    row[q] = s * vip + c * viq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i][i].max(0.0)).collect();
    let eigenvectors: Vec<Vec<f64>> = order
        .iter()
        .map(|&col| (0..n).map(|r| v[r][col]).collect())
        .collect();
    (eigenvalues, eigenvectors)
}

/// Fits the top-k principal components of a cohort matrix.
pub fn fit_pca(m: &CohortMatrix, k: usize) -> Result<PcaBasis> {
    let (rows, cols) = (m.rows(), m.cols());
    let max_k = (rows - 1).min(cols);
    if rows < 2 {
        return Err(LatentError::TooFewSubjects(rows));
    }
    if k < 1 || k > max_k {
        return Err(LatentError::KOutOfRange { k, max: max_k });
    }
    let eig = gram_eigen(m)?;
    let rank_eps = eig.eigenvalues.first().copied().unwrap_or(0.0).max(1e-300) * 1e-12;
    let rank = eig.eigenvalues.iter().filter(|&&l| l > rank_eps).count();
    if k > rank {
        return Err(LatentError::RankDeficient { requested: k, rank });
    }
    let mut components = Vec::with_capacity(k * cols);
    for i in 0..k {
        let sigma = eig.eigenvalues[i].sqrt();
        let u = &eig.eigenvectors[i];
        let mut comp = vec![0.0f64; cols];
        for (r, &ur) in u.iter().enumerate() {
            if ur == 0.0 {
                continue;
            }
            let row = &eig.centered[r * cols..(r + 1) * cols];
            for c in 0..cols {
                comp[c] += ur * row[c];
            }
        }
        for c in &mut comp {
            *c /= sigma;
        }
        // Sign canonicalization: largest-|entry| coordinate made positive,
        // first index winning ties.
        let mut best = 0usize;
        for (c, val) in comp.iter().enumerate() {
            if val.abs() > comp[best].abs() {
                best = c;
            }
        }
        if comp[best] < 0.0 {
            for c in &mut comp {
                *c = -*c;
            }
        }
        components.extend(comp.iter().map(|&c| c as f32));
    }
    let total = eig.total.max(1e-300);
    let explained_variance_ratio: Vec<f32> = eig.eigenvalues[..k]
        .iter()
        .map(|&l| (l / total) as f32)
        .collect();
    let mean: Vec<f32> = eig.mean.iter().map(|&v| v as f32).collect();
    let mut fp = fingerprint_f32(&components) ^ fingerprint_f32(&mean);
    fp ^= (k as u64).wrapping_mul(0x9e3779b97f4a7c15);
    Ok(PcaBasis {
        mean,
        components,
        explained_variance_ratio,
        k,
        cols,
        header: m.header().clone(),
        fingerprint: fp,
    })
}

/// Smallest k whose cumulative explained-variance ratio exceeds
/// `threshold`; falls back to the effective rank (at most rows - 1) when
/// no k reaches it.
pub fn select_k_by_variance(m: &CohortMatrix, threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(LatentError::Invalid(format!(
            "variance threshold must be in (0, 1], got {threshold}"
        )));
    }
    let eig = gram_eigen(m)?;
    let total = eig.total.max(1e-300);
    let rank_eps = eig.eigenvalues.first().copied().unwrap_or(0.0).max(1e-300) * 1e-12;
    let max_k = (m.rows() - 1).min(m.cols());
    let mut cum = 0.0f64;
    for (i, &l) in eig.eigenvalues.iter().take(max_k).enumerate() {
        cum += l / total;
        if cum > threshold {
            return Ok(i + 1);
        }
    }
    let rank = eig.eigenvalues[..max_k]
        .iter()
        .filter(|&&l| l > rank_eps)
        .count();
    Ok(rank.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{Group, Stage, VolumeHeader};
    use crate::latent::RowLabel;

    fn label(i: usize) -> RowLabel {
        RowLabel {
            subject_id: format!("s{i:02}"),
            stage: Stage::Pre,
            group: Group::Longer,
        }
    }

    fn matrix(rows: Vec<Vec<f32>>, dims: [usize; 3]) -> CohortMatrix {
        let labels = (0..rows.len()).map(label).collect();
        let data = rows.into_iter().flatten().collect();
        CohortMatrix::from_rows(VolumeHeader::isotropic(dims), labels, data).unwrap()
    }

    #[test]
    fn two_subjects_span_one_component_with_full_variance() {
        let m = matrix(
            vec![vec![1.0, 0.0, 2.0, 5.0], vec![3.0, 4.0, 2.0, 1.0]],
            [1, 1, 4],
        );
        let basis = fit_pca(&m, 1).unwrap();
        assert_eq!(basis.k, 1);
        assert!((basis.explained_variance_ratio[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn full_basis_reconstructs_centered_data() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f32>> = (0..6)
            .map(|_| (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let m = matrix(rows, [1, 4, 5]);
        let basis = fit_pca(&m, 5).unwrap();
        for r in 0..m.rows() {
            let scores = basis.project(m.row(r)).unwrap();
            let recon = basis.reconstruct(&scores);
            for (a, b) in recon.iter().zip(m.row(r)) {
                assert!((a - b).abs() < 1e-3, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn deterministic_basis_across_runs() {
        let m = matrix(
            vec![
                vec![1.0, 2.0, 0.5, -1.0],
                vec![0.0, 1.0, 2.5, 0.0],
                vec![2.0, -1.0, 1.5, 3.0],
            ],
            [1, 1, 4],
        );
        let a = fit_pca(&m, 2).unwrap();
        let b = fit_pca(&m, 2).unwrap();
        assert_eq!(a.components, b.components);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn constructed_spectrum_selects_expected_k() {
        // Six rows at +-2 e1, +-sqrt(3) e2, +-sqrt(3) e3: eigenvalue ratios
        // 0.4 / 0.3 / 0.3, so the 0.6 threshold needs 2 components and the
        // 0.8 threshold needs 3.
        let s3 = 3.0f32.sqrt();
        let rows = vec![
            vec![2.0, 0.0, 0.0, 0.0],
            vec![-2.0, 0.0, 0.0, 0.0],
            vec![0.0, s3, 0.0, 0.0],
            vec![0.0, -s3, 0.0, 0.0],
            vec![0.0, 0.0, s3, 0.0],
            vec![0.0, 0.0, -s3, 0.0],
        ];
        let m = matrix(rows, [1, 1, 4]);
        assert_eq!(select_k_by_variance(&m, 0.6).unwrap(), 2);
        assert_eq!(select_k_by_variance(&m, 0.8).unwrap(), 3);
    }

    #[test]
    fn rank_one_data_selects_one_component_at_any_threshold() {
        let m = matrix(
            vec![
                vec![1.0, 2.0, 3.0, 4.0],
                vec![2.0, 4.0, 6.0, 8.0],
                vec![0.5, 1.0, 1.5, 2.0],
            ],
            [1, 1, 4],
        );
        for threshold in [0.1, 0.5, 0.8, 1.0] {
            assert_eq!(select_k_by_variance(&m, threshold).unwrap(), 1);
        }
    }

    #[test]
    fn k_out_of_range_errors() {
        let m = matrix(vec![vec![1.0, 0.0], vec![0.0, 1.0]], [1, 1, 2]);
        assert!(matches!(
            fit_pca(&m, 2),
            Err(LatentError::KOutOfRange { .. })
        ));
        assert!(matches!(
            fit_pca(&m, 0),
            Err(LatentError::KOutOfRange { .. })
        ));
    }
}
