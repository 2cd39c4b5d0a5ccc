//! Kernel SHAP over contiguous cubic voxel groups.
//!
//! Coalition payoffs come from the class logit with absent groups set to
//! the zero baseline. The Shapley-kernel-weighted least squares is solved
//! with the all-on/all-off coalitions enforced exactly: the empty payoff
//! anchors the offset and the full payoff enters as a sum constraint that
//! eliminates one unknown. When `n_coalitions` covers `2^G`, every
//! coalition is enumerated and the solution is exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::io::Volume;
use crate::models::{logit_value, LogitModel};
use crate::tensor::Tensor;

use super::{AttributionError, AttributionMap, Method, Result};

/// Assigns every voxel to a cubic block of side `group_size` (edge blocks
/// are smaller). Returns (group id per voxel, group count).
fn voxel_groups(dims: [usize; 3], group_size: usize) -> (Vec<u32>, usize) {
    let blocks = [
        dims[0].div_ceil(group_size),
        dims[1].div_ceil(group_size),
        dims[2].div_ceil(group_size),
    ];
    let mut ids = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let b = ((i / group_size) * blocks[1] + j / group_size) * blocks[2]
                    + k / group_size;
                ids.push(b as u32);
            }
        }
    }
    (ids, blocks[0] * blocks[1] * blocks[2])
}

fn shapley_kernel_weight(g: usize, s: usize) -> f64 {
    // (G - 1) / (C(G, s) * s * (G - s))
    let mut binom = 1.0f64;
    for i in 1..=s {
        binom *= (g - s + i) as f64 / i as f64;
    }
    (g as f64 - 1.0) / (binom * s as f64 * (g - s) as f64)
}

/// Seeded interior coalition masks (0 < |z| < G), sizes drawn from the
/// Shapley-kernel size distribution.
fn sample_masks(g: usize, n: usize, seed: u64) -> Vec<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size_weights: Vec<f64> = (1..g)
        .map(|s| (g as f64 - 1.0) / (s as f64 * (g - s) as f64))
        .collect();
    let total: f64 = size_weights.iter().sum();
    let mut masks = Vec::with_capacity(n);
    let mut pool: Vec<usize> = (0..g).collect();
    for _ in 0..n {
        let mut draw = rng.gen_range(0.0..total);
        let mut size = 1usize;
        for (i, w) in size_weights.iter().enumerate() {
            if draw < *w {
                size = i + 1;
                break;
            }
            draw -= w;
            size = i + 1;
        }
        for i in 0..size {
            let j = rng.gen_range(i..g);
            pool.swap(i, j);
        }
        let mut mask = vec![false; g];
        for &p in &pool[..size] {
            mask[p] = true;
        }
        masks.push(mask);
    }
    masks
}

fn all_interior_masks(g: usize) -> Vec<Vec<bool>> {
    let mut masks = Vec::with_capacity((1usize << g) - 2);
    for bits in 1..((1usize << g) - 1) {
        masks.push((0..g).map(|i| bits & (1 << i) != 0).collect());
    }
    masks
}

/// Gaussian elimination with partial pivoting; `a` is row-major `n x n`.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let mut pivot = col;
        for row in (col + 1)..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if a[pivot * n + col].abs() < 1e-12 {
            return Err(AttributionError::SingularSystem);
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        for row in (col + 1)..n {
            let factor = a[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0f64; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in (row + 1)..n {
            acc -= a[row * n + k] * x[k];
        }
        x[row] = acc / a[row * n + row];
    }
    Ok(x)
}

/// Kernel SHAP attribution. Each group's coefficient is spread uniformly
/// over its voxels, preserving the completeness sum.
pub fn kernel_shap<M: LogitModel>(
    model: &M,
    x: &Volume,
    class: usize,
    n_coalitions: usize,
    group_size: usize,
    seed: u64,
) -> Result<AttributionMap> {
    if group_size == 0 {
        return Err(AttributionError::Invalid("group size must be >= 1".into()));
    }
    if class >= model.n_classes() {
        return Err(AttributionError::InvalidClass {
            class,
            n_classes: model.n_classes(),
        });
    }
    let (group_of, n_groups) = voxel_groups(x.header.dims, group_size);
    if n_coalitions < n_groups + 2 {
        return Err(AttributionError::InsufficientCoalitions {
            needed: n_groups + 2,
            groups: n_groups,
            got: n_coalitions,
        });
    }
    let shape = x.to_tensor().shape().to_vec();
    let payoff = |mask: Option<&[bool]>| -> Result<f32> {
        let data: Vec<f32> = match mask {
            None => x.voxels.clone(),
            Some(m) => x
                .voxels
                .iter()
                .zip(&group_of)
                .map(|(&v, &g)| if m[g as usize] { v } else { 0.0 })
                .collect(),
        };
        Ok(logit_value(model, &Tensor::new(shape.clone(), data)?, class)?)
    };
    let v_full = payoff(None)?;
    let v_empty = payoff(Some(&vec![false; n_groups]))?;
    let delta = (v_full - v_empty) as f64;

    if n_groups == 1 {
        let counts = group_counts(&group_of, 1);
        let values = spread(&group_of, &[delta], &counts);
        return Ok(finish(x, values, class));
    }

    let exhaustive = n_groups < usize::BITS as usize && n_coalitions >= (1usize << n_groups);
    let masks = if exhaustive {
        all_interior_masks(n_groups)
    } else {
        sample_masks(n_groups, n_coalitions - 2, seed)
    };

    // Weighted least squares over interior coalitions with the last
    // group's coefficient eliminated through the sum constraint.
    let unknowns = n_groups - 1;
    let mut normal = vec![0.0f64; unknowns * unknowns];
    let mut rhs = vec![0.0f64; unknowns];
    for mask in &masks {
        let s = mask.iter().filter(|&&m| m).count();
        debug_assert!(s > 0 && s < n_groups);
        let w = shapley_kernel_weight(n_groups, s);
        let t = (payoff(Some(mask))? - v_empty) as f64;
        let z_last = mask[n_groups - 1];
        let r = t - if z_last { delta } else { 0.0 };
        let row: Vec<f64> = (0..unknowns)
            .map(|i| (mask[i] as i32 - z_last as i32) as f64)
            .collect();
        for i in 0..unknowns {
            if row[i] == 0.0 {
                continue;
            }
            rhs[i] += w * row[i] * r;
            for j in 0..unknowns {
                normal[i * unknowns + j] += w * row[i] * row[j];
            }
        }
    }
    let head = solve_dense(normal, rhs)?;
    let mut phi = head;
    let sum_head: f64 = phi.iter().sum();
    phi.push(delta - sum_head);

    let counts = group_counts(&group_of, n_groups);
    let values = spread(&group_of, &phi, &counts);
    Ok(finish(x, values, class))
}

fn group_counts(group_of: &[u32], n_groups: usize) -> Vec<usize> {
    let mut counts = vec![0usize; n_groups];
    for &g in group_of {
        counts[g as usize] += 1;
    }
    counts
}

fn spread(group_of: &[u32], phi: &[f64], counts: &[usize]) -> Vec<f32> {
    group_of
        .iter()
        .map(|&g| (phi[g as usize] / counts[g as usize] as f64) as f32)
        .collect()
}

fn finish(x: &Volume, values: Vec<f32>, class: usize) -> AttributionMap {
    AttributionMap {
        header: x.header.clone(),
        values,
        method: Method::KernelShap,
        target_class: class,
        subject_id: String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::VolumeHeader;
    use crate::models::LinearModel;

    fn vec_volume(values: Vec<f32>) -> Volume {
        let n = values.len();
        Volume::new(VolumeHeader::isotropic([1, 1, n]), values).unwrap()
    }

    fn linear(w: Vec<f32>) -> LinearModel {
        let d = w.len();
        LinearModel::new(
            Tensor::new(vec![1, d], w).unwrap(),
            Tensor::from_vec(vec![0.0]),
        )
    }

    #[test]
    fn exhaustive_linear_case_recovers_w_times_x() {
        let w = vec![0.5f32, -1.5, 2.0, 0.25];
        let x = vec_volume(vec![1.0, 2.0, -0.5, 4.0]);
        let map = kernel_shap(&linear(w.clone()), &x, 0, 16, 1, 0).unwrap();
        for ((m, wi), xi) in map.values.iter().zip(&w).zip(&x.voxels) {
            assert!((m - wi * xi).abs() < 1e-4, "{m} vs {}", wi * xi);
        }
    }

    #[test]
    fn constant_model_yields_zero_coefficients() {
        let w = vec![0.0f32; 4];
        let x = vec_volume(vec![1.0, 2.0, 3.0, 4.0]);
        let map = kernel_shap(&linear(w), &x, 0, 16, 1, 3).unwrap();
        assert!(map.values.iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let w: Vec<f32> = (0..8).map(|i| (i as f32) * 0.2 - 0.7).collect();
        let x = vec_volume((0..8).map(|i| (i % 3) as f32 - 1.0).collect());
        let a = kernel_shap(&linear(w.clone()), &x, 0, 40, 1, 11).unwrap();
        let b = kernel_shap(&linear(w), &x, 0, 40, 1, 11).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn insufficient_coalitions_error() {
        let w = vec![1.0f32; 8];
        let x = vec_volume(vec![1.0; 8]);
        assert!(matches!(
            kernel_shap(&linear(w), &x, 0, 9, 1, 0),
            Err(AttributionError::InsufficientCoalitions { .. })
        ));
    }

    #[test]
    fn grouped_attribution_spreads_uniformly() {
        // Two groups of two voxels each; completeness: the map sums to
        // f(x) - f(0).
        let w = vec![1.0f32, 2.0, -1.0, 0.5];
        let x = vec_volume(vec![1.0, 1.0, 1.0, 1.0]);
        let map = kernel_shap(&linear(w.clone()), &x, 0, 16, 2, 0).unwrap();
        let total: f32 = map.values.iter().sum();
        let expect: f32 = w.iter().sum();
        assert!((total - expect).abs() < 1e-4);
        assert!((map.values[0] - map.values[1]).abs() < 1e-6);
        assert!((map.values[2] - map.values[3]).abs() < 1e-6);
    }
}
