//! PCA globalization of cohort saliency maps: the first three principal
//! components of the pooled (min-max normalized) maps plus a weighted
//! average of per-method mean maps, weighted by per-method faithfulness.

use std::collections::BTreeMap;

use crate::io::{minmax_normalized, Volume};
use crate::latent::{fit_pca, CohortMatrix, LatentError};

use super::{AttributionError, AttributionMap, Method, Result};

#[derive(Clone, Debug)]
pub struct GlobalizationResult {
    /// First three PCs as min-max normalized volumes (zero-padded when
    /// the centered map matrix has lower rank).
    pub components: Vec<Volume>,
    /// The same components before normalization; orthonormal in
    /// flattened space.
    pub components_raw: Vec<Vec<f32>>,
    pub explained_variance: Vec<f32>,
    /// Weighted average of per-method mean maps.
    pub weighted_average: Volume,
    /// Normalized nonnegative weights, one per method present.
    pub weights: Vec<(Method, f32)>,
}

/// Globalizes a pooled cohort of attribution maps.
///
/// `method_faithfulness` supplies one quality score per method present in
/// `maps`; weights are the scores clamped at zero and normalized to sum 1
/// (uniform if all are nonpositive).
pub fn globalize(
    maps: &[AttributionMap],
    method_faithfulness: &[(Method, f32)],
) -> Result<GlobalizationResult> {
    if maps.len() < 4 {
        return Err(AttributionError::TooFewMaps(maps.len()));
    }
    let header = maps[0].header.clone();
    let cols = header.num_voxels();
    for m in maps {
        if m.header.dims != header.dims {
            return Err(AttributionError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                m.header.dims, header.dims
            )));
        }
    }
    let normalized: Vec<Vec<f32>> = maps.iter().map(|m| minmax_normalized(&m.values)).collect();

    // Pooled PCA over the normalized maps; identical maps have rank-0
    // centered data and produce zero components with zero variance.
    let mut flat = Vec::with_capacity(maps.len() * cols);
    for row in &normalized {
        flat.extend_from_slice(row);
    }
    let matrix = CohortMatrix::unlabeled(header.clone(), maps.len(), flat)?;
    let want = 3usize.min(maps.len() - 1);
    let basis = match fit_pca(&matrix, want) {
        Ok(b) => Some(b),
        Err(LatentError::RankDeficient { rank, .. }) => {
            if rank == 0 {
                None
            } else {
                Some(fit_pca(&matrix, rank)?)
            }
        }
        Err(e) => return Err(e.into()),
    };
    let mut components_raw = Vec::with_capacity(3);
    let mut explained_variance = Vec::with_capacity(3);
    if let Some(b) = &basis {
        for i in 0..b.k {
            components_raw.push(b.component(i).to_vec());
            explained_variance.push(b.explained_variance_ratio[i]);
        }
    }
    while components_raw.len() < 3 {
        components_raw.push(vec![0.0; cols]);
        explained_variance.push(0.0);
    }
    let components = components_raw
        .iter()
        .map(|c| Volume {
            header: header.clone(),
            voxels: minmax_normalized(c),
        })
        .collect();

    // Per-method mean maps and faithfulness-proportional weights.
    let mut by_method: BTreeMap<Method, (Vec<f64>, usize)> = BTreeMap::new();
    for (map, norm) in maps.iter().zip(&normalized) {
        let entry = by_method
            .entry(map.method)
            .or_insert_with(|| (vec![0.0; cols], 0));
        for (a, &v) in entry.0.iter_mut().zip(norm) {
            *a += v as f64;
        }
        entry.1 += 1;
    }
    let mut raw_weights = Vec::new();
    for method in by_method.keys() {
        let w = method_faithfulness
            .iter()
            .find(|(m, _)| m == method)
            .map(|(_, w)| *w)
            .ok_or_else(|| AttributionError::MissingWeight(method.to_string()))?;
        raw_weights.push((*method, w.max(0.0)));
    }
    let total: f32 = raw_weights.iter().map(|(_, w)| w).sum();
    let weights: Vec<(Method, f32)> = if total > 0.0 {
        raw_weights.iter().map(|(m, w)| (*m, w / total)).collect()
    } else {
        let uniform = 1.0 / raw_weights.len() as f32;
        raw_weights.iter().map(|(m, _)| (*m, uniform)).collect()
    };

    let mut avg = vec![0.0f64; cols];
    for (method, weight) in &weights {
        let (sum, count) = &by_method[method];
        for (a, s) in avg.iter_mut().zip(sum) {
            *a += *weight as f64 * (s / *count as f64);
        }
    }
    Ok(GlobalizationResult {
        components,
        components_raw,
        explained_variance,
        weighted_average: Volume {
            header,
            voxels: avg.iter().map(|&v| v as f32).collect(),
        },
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::VolumeHeader;

    fn map(method: Method, values: Vec<f32>) -> AttributionMap {
        let n = values.len();
        AttributionMap {
            header: VolumeHeader::isotropic([1, 1, n]),
            values,
            method,
            target_class: 1,
            subject_id: String::new(),
        }
    }

    #[test]
    fn identical_maps_degenerate_to_zero_components_and_common_average() {
        let common = vec![0.2f32, 0.8, 0.4, 0.0];
        let maps: Vec<AttributionMap> = (0..4)
            .map(|_| map(Method::GuidedBackprop, common.clone()))
            .collect();
        let result = globalize(&maps, &[(Method::GuidedBackprop, 0.5)]).unwrap();
        assert!(result.explained_variance.iter().all(|&v| v == 0.0));
        assert!(result.components_raw[0].iter().all(|&v| v == 0.0));
        // Weighted average equals the (normalized) common map.
        let expect = minmax_normalized(&common);
        for (a, b) in result.weighted_average.voxels.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn endpoint_weights_pick_one_method_mean() {
        let m1 = vec![1.0f32, 0.0, 0.0, 0.0];
        let m2 = vec![0.0f32, 1.0, 0.0, 0.0];
        let maps = vec![
            map(Method::GradientShap, m1.clone()),
            map(Method::GradientShap, m1.clone()),
            map(Method::KernelShap, m2.clone()),
            map(Method::KernelShap, m2),
        ];
        let result = globalize(
            &maps,
            &[(Method::GradientShap, 0.9), (Method::KernelShap, 0.0)],
        )
        .unwrap();
        for (a, b) in result.weighted_average.voxels.iter().zip(&m1) {
            assert!((a - b).abs() < 1e-6);
        }
        let w: f32 = result.weights.iter().map(|(_, w)| w).sum();
        assert!((w - 1.0).abs() < 1e-6);
    }

    #[test]
    fn two_cluster_cohort_separates_on_first_component() {
        // Two clusters of maps; PC1 scores must separate them by sign.
        let mut maps = Vec::new();
        for i in 0..4 {
            let bump = i as f32 * 0.01;
            maps.push(map(
                Method::GuidedBackprop,
                vec![1.0, 1.0 - bump, 0.0, bump],
            ));
            maps.push(map(Method::GuidedBackprop, vec![bump, 0.0, 1.0 - bump, 1.0]));
        }
        let result = globalize(&maps, &[(Method::GuidedBackprop, 1.0)]).unwrap();
        assert!(result.explained_variance[0] > 0.5);
        let pc1 = &result.components_raw[0];
        // Project each normalized map on PC1 and check the sign split.
        let mean: Vec<f32> = {
            let mut acc = vec![0.0f32; 4];
            for m in &maps {
                let n = minmax_normalized(&m.values);
                for (a, b) in acc.iter_mut().zip(&n) {
                    *a += b / maps.len() as f32;
                }
            }
            acc
        };
        let mut signs = Vec::new();
        for m in &maps {
            let n = minmax_normalized(&m.values);
            let score: f32 = n
                .iter()
                .zip(&mean)
                .zip(pc1)
                .map(|((v, mu), c)| (v - mu) * c)
                .sum();
            signs.push(score > 0.0);
        }
        for i in (0..8).step_by(2) {
            assert_eq!(signs[i], signs[0]);
            assert_eq!(signs[i + 1], !signs[0]);
        }
    }

    #[test]
    fn fewer_than_four_maps_is_rejected() {
        let maps = vec![map(Method::KernelShap, vec![1.0, 0.0])];
        assert!(matches!(
            globalize(&maps, &[(Method::KernelShap, 1.0)]),
            Err(AttributionError::TooFewMaps(1))
        ));
    }
}
