//! Voxel-wise variability maps between two projected subgroups.
//!
//! The voxel-wise K-vector of a subgroup is the back-mapping
//! `p[i](voxel) = component_i(voxel) * mean_score_i` — each component's
//! loading at that voxel scaled by the subgroup's mean score on that
//! component. The map compares those K-vectors voxel by voxel, either by
//! Euclidean distance (magnitude) or cosine similarity (orientation).

use std::fmt;

use crate::io::VolumeHeader;

use super::{CohortMatrix, LatentError, PcaBasis, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    Euclidean,
    Cosine,
}

impl MapKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MapKind::Euclidean => "euclidean",
            MapKind::Cosine => "cosine",
        }
    }
}

impl fmt::Display for MapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariabilityMap {
    pub header: VolumeHeader,
    pub values: Vec<f32>,
    pub kind: MapKind,
    /// Voxels whose cosine similarity was undefined (zero norm) and was
    /// reported as 0.
    pub degenerate_voxels: usize,
}

/// Mean PCA scores of a subgroup, tied to the basis that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedGroup {
    pub mean_scores: Vec<f32>,
    basis_fingerprint: u64,
}

/// Projects the selected rows and averages their scores per component.
pub fn project_group(basis: &PcaBasis, m: &CohortMatrix, rows: &[usize]) -> Result<ProjectedGroup> {
    if rows.is_empty() {
        return Err(LatentError::Invalid("empty subgroup".into()));
    }
    let mut acc = vec![0.0f64; basis.k];
    for &r in rows {
        if r >= m.rows() {
            return Err(LatentError::Invalid(format!("row {r} out of range")));
        }
        let scores = basis.project(m.row(r))?;
        for (a, s) in acc.iter_mut().zip(&scores) {
            *a += *s as f64;
        }
    }
    let n = rows.len() as f64;
    Ok(ProjectedGroup {
        mean_scores: acc.iter().map(|&a| (a / n) as f32).collect(),
        basis_fingerprint: basis.fingerprint(),
    })
}

fn check_basis(a: &ProjectedGroup, b: &ProjectedGroup, basis: &PcaBasis) -> Result<()> {
    if a.basis_fingerprint != basis.fingerprint() || b.basis_fingerprint != basis.fingerprint() {
        return Err(LatentError::BasisMismatch);
    }
    if a.mean_scores.len() != basis.k || b.mean_scores.len() != basis.k {
        return Err(LatentError::BasisMismatch);
    }
    Ok(())
}

/// Per-voxel Euclidean distance between the two subgroups' voxel-wise
/// K-vectors. Values are always nonnegative.
pub fn euclidean_map(
    a: &ProjectedGroup,
    b: &ProjectedGroup,
    basis: &PcaBasis,
) -> Result<VariabilityMap> {
    check_basis(a, b, basis)?;
    let cols = basis.cols();
    let mut values = vec![0.0f32; cols];
    for i in 0..basis.k {
        let comp = basis.component(i);
        let diff = a.mean_scores[i] as f64 - b.mean_scores[i] as f64;
        for (v, &c) in values.iter_mut().zip(comp) {
            let term = c as f64 * diff;
            *v += (term * term) as f32;
        }
    }
    for v in &mut values {
        *v = v.sqrt();
    }
    Ok(VariabilityMap {
        header: basis.header().clone(),
        values,
        kind: MapKind::Euclidean,
        degenerate_voxels: 0,
    })
}

/// Per-voxel cosine similarity between the two subgroups' voxel-wise
/// K-vectors; zero-norm voxels report 0 and are counted.
pub fn cosine_map(
    a: &ProjectedGroup,
    b: &ProjectedGroup,
    basis: &PcaBasis,
) -> Result<VariabilityMap> {
    check_basis(a, b, basis)?;
    let cols = basis.cols();
    let mut num = vec![0.0f64; cols];
    let mut na = vec![0.0f64; cols];
    let mut nb = vec![0.0f64; cols];
    for i in 0..basis.k {
        let comp = basis.component(i);
        let (sa, sb) = (a.mean_scores[i] as f64, b.mean_scores[i] as f64);
        for (j, &c) in comp.iter().enumerate() {
            let (pa, pb) = (c as f64 * sa, c as f64 * sb);
            num[j] += pa * pb;
            na[j] += pa * pa;
            nb[j] += pb * pb;
        }
    }
    let mut degenerate = 0usize;
    let values: Vec<f32> = (0..cols)
        .map(|j| {
            let den = na[j].sqrt() * nb[j].sqrt();
            if den > 0.0 {
                ((num[j] / den).clamp(-1.0, 1.0)) as f32
            } else {
                degenerate += 1;
                0.0
            }
        })
        .collect();
    Ok(VariabilityMap {
        header: basis.header().clone(),
        values,
        kind: MapKind::Cosine,
        degenerate_voxels: degenerate,
    })
}

/// First-component comparison of a pre cohort against a post cohort.
///
/// One basis is fitted on the stacked pre+post rows so both subgroups are
/// expressed in the same K=1 space; the result equals `euclidean_map` on
/// that shared basis.
pub fn first_component_group_comparison(
    pre: &CohortMatrix,
    post: &CohortMatrix,
) -> Result<VariabilityMap> {
    if pre.header().dims != post.header().dims {
        return Err(LatentError::DimMismatch(format!(
            "{:?} vs {:?}",
            pre.header().dims,
            post.header().dims
        )));
    }
    let combined = pre.vstack(post)?;
    let basis = super::fit_pca(&combined, 1)?;
    let pre_rows: Vec<usize> = (0..pre.rows()).collect();
    let post_rows: Vec<usize> = (pre.rows()..combined.rows()).collect();
    let a = project_group(&basis, &combined, &pre_rows)?;
    let b = project_group(&basis, &combined, &post_rows)?;
    euclidean_map(&a, &b, &basis)
}

/// Magnitude (Euclidean) and orientation (cosine) maps over all k
/// components of the fitted basis.
pub fn global_variability(
    a: &ProjectedGroup,
    b: &ProjectedGroup,
    basis: &PcaBasis,
) -> Result<(VariabilityMap, VariabilityMap)> {
    Ok((euclidean_map(a, b, basis)?, cosine_map(a, b, basis)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{Group, Stage, VolumeHeader};
    use crate::latent::{fit_pca, RowLabel};

    fn label(i: usize, stage: Stage) -> RowLabel {
        RowLabel {
            subject_id: format!("s{i:02}"),
            stage,
            group: Group::Longer,
        }
    }

    fn matrix(rows: Vec<Vec<f32>>, stage: Stage) -> CohortMatrix {
        let labels = (0..rows.len()).map(|i| label(i, stage)).collect();
        let dims = [1, 1, rows[0].len()];
        let data = rows.into_iter().flatten().collect();
        CohortMatrix::from_rows(VolumeHeader::isotropic(dims), labels, data).unwrap()
    }

    #[test]
    fn identical_subgroups_give_zero_map_and_unit_cosine() {
        let m = matrix(
            vec![
                vec![1.0, -1.0, 0.5, 2.0],
                vec![0.0, 1.0, -0.5, 1.0],
                vec![2.0, 0.0, 1.5, 0.0],
                vec![1.0, 1.0, 1.0, 1.0],
            ],
            Stage::Pre,
        );
        let basis = fit_pca(&m, 2).unwrap();
        let g = project_group(&basis, &m, &[0, 1]).unwrap();
        let e = euclidean_map(&g, &g, &basis).unwrap();
        assert!(e.values.iter().all(|&v| v == 0.0));
        let c = cosine_map(&g, &g, &basis).unwrap();
        for (j, &v) in c.values.iter().enumerate() {
            // Voxels with zero loading across components are degenerate.
            let degenerate = (0..basis.k).all(|i| {
                basis.component(i)[j] * g.mean_scores[i] == 0.0
            });
            if !degenerate {
                assert!((v - 1.0).abs() < 1e-6, "voxel {j}: {v}");
            }
        }
    }

    #[test]
    fn hand_computed_distance_three_four_five() {
        // Constructed basis with unit loadings at voxel 0 on both
        // components; mean scores (0, 3) vs (4, 0) put the voxel-wise
        // vectors 5 apart: sqrt(16 + 9).
        use crate::latent::PcaBasis;
        let header = VolumeHeader::isotropic([1, 1, 2]);
        let basis = PcaBasis::from_parts(
            vec![0.0, 0.0],
            vec![1.0, 0.0, 1.0, 0.0], // two components, loading 1 at voxel 0
            vec![0.6, 0.4],
            header,
        )
        .unwrap();
        let a = ProjectedGroup {
            mean_scores: vec![0.0, 3.0],
            basis_fingerprint: basis.fingerprint(),
        };
        let b = ProjectedGroup {
            mean_scores: vec![4.0, 0.0],
            basis_fingerprint: basis.fingerprint(),
        };
        let map = euclidean_map(&a, &b, &basis).unwrap();
        assert!((map.values[0] - 5.0).abs() < 1e-6);

        // Cosine analytic cases on the same construction.
        let parallel = cosine_map(&a, &a, &basis).unwrap();
        assert!((parallel.values[0] - 1.0).abs() < 1e-6);
        let orthogonal = cosine_map(&a, &b, &basis).unwrap();
        assert!(orthogonal.values[0].abs() < 1e-6);
        let opposite = ProjectedGroup {
            mean_scores: vec![0.0, -3.0],
            basis_fingerprint: basis.fingerprint(),
        };
        let anti = cosine_map(&a, &opposite, &basis).unwrap();
        assert!((anti.values[0] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn basis_mismatch_is_detected() {
        let m1 = matrix(
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            Stage::Pre,
        );
        let m2 = matrix(
            vec![vec![2.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 1.0]],
            Stage::Post,
        );
        let b1 = fit_pca(&m1, 1).unwrap();
        let b2 = fit_pca(&m2, 1).unwrap();
        let g1 = project_group(&b1, &m1, &[0, 1]).unwrap();
        let g2 = project_group(&b2, &m2, &[0, 1]).unwrap();
        assert!(matches!(
            euclidean_map(&g1, &g2, &b1),
            Err(LatentError::BasisMismatch)
        ));
    }

    #[test]
    fn scaling_representations_scales_euclidean_map() {
        let m = matrix(
            vec![
                vec![1.0, 2.0, 0.0, 1.0],
                vec![0.0, 1.0, 1.0, 0.0],
                vec![2.0, 0.0, 0.5, 1.5],
                vec![1.0, 1.0, 2.0, 0.5],
            ],
            Stage::Pre,
        );
        let basis = fit_pca(&m, 2).unwrap();
        let a = project_group(&basis, &m, &[0, 1]).unwrap();
        let b = project_group(&basis, &m, &[2, 3]).unwrap();
        let base = euclidean_map(&a, &b, &basis).unwrap();
        let c = 3.0f32;
        let scaled_a = ProjectedGroup {
            mean_scores: a.mean_scores.iter().map(|s| c * s).collect(),
            basis_fingerprint: basis.fingerprint(),
        };
        let scaled_b = ProjectedGroup {
            mean_scores: b.mean_scores.iter().map(|s| c * s).collect(),
            basis_fingerprint: basis.fingerprint(),
        };
        let scaled = euclidean_map(&scaled_a, &scaled_b, &basis).unwrap();
        for (orig, sc) in base.values.iter().zip(&scaled.values) {
            assert!((sc - c.abs() * orig).abs() < 1e-4);
        }
    }

    #[test]
    fn first_component_comparison_of_identical_cohorts_is_zero() {
        let pre = matrix(
            vec![vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 1.0]],
            Stage::Pre,
        );
        let post = matrix(
            vec![vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 1.0]],
            Stage::Post,
        );
        let map = first_component_group_comparison(&pre, &post).unwrap();
        assert!(map.values.iter().all(|&v| v.abs() < 1e-5));
    }

    #[test]
    fn global_variability_with_k1_matches_euclidean() {
        let m = matrix(
            vec![
                vec![1.0, 2.0, 0.0],
                vec![0.0, 1.0, 1.0],
                vec![2.0, 0.0, 0.5],
                vec![1.0, 1.0, 2.0],
            ],
            Stage::Pre,
        );
        let basis = fit_pca(&m, 1).unwrap();
        let a = project_group(&basis, &m, &[0, 1]).unwrap();
        let b = project_group(&basis, &m, &[2, 3]).unwrap();
        let (mag, orient) = global_variability(&a, &b, &basis).unwrap();
        let direct = euclidean_map(&a, &b, &basis).unwrap();
        assert_eq!(mag.values, direct.values);
        assert_eq!(orient.kind, MapKind::Cosine);
    }
}
