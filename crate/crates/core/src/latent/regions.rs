//! Atlas-based significant-region selection from variability maps.
//!
//! Percentiles are computed by linear interpolation over nonbackground
//! voxels only (atlas label 0 is excluded), since background dominates
//! the volume and would flatten the thresholds.

use crate::io::Atlas;

use super::{LatentError, MapKind, Result, VariabilityMap};

#[derive(Clone, Debug, PartialEq)]
pub struct RegionRow {
    pub label: i32,
    pub name: String,
    pub n_voxels: usize,
    /// Region max for euclidean maps, region min for cosine maps.
    pub extreme: f32,
    /// Fraction of region voxels beyond the spatial-extent threshold
    /// (above P80 for euclidean, below P5 for cosine).
    pub frac_beyond: f32,
    pub selected: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionReport {
    pub kind: MapKind,
    pub rows: Vec<RegionRow>,
}

impl RegionReport {
    pub fn selected(&self) -> Vec<&RegionRow> {
        self.rows.iter().filter(|r| r.selected).collect()
    }

    /// CSV with the fixed header `region,n_voxels,max,frac_above,selected`.
    /// For cosine reports the `max` column carries the region minimum and
    /// `frac_above` the fraction below the 5th percentile.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("region,n_voxels,max,frac_above,selected\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{}\n",
                r.name, r.n_voxels, r.extreme, r.frac_beyond, r.selected
            ));
        }
        out
    }
}

/// Linear-interpolation percentile of ascending-sorted values.
pub fn percentile_linear(sorted: &[f32], q: f64) -> f32 {
    assert!(!sorted.is_empty());
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = (rank - lo as f64) as f32;
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

struct RegionIndex {
    labels: Vec<i32>,
    voxels_by_region: Vec<Vec<usize>>,
}

fn region_index(map: &VariabilityMap, atlas: &Atlas) -> Result<RegionIndex> {
    if map.header.dims != atlas.header.dims {
        return Err(LatentError::DimMismatch(format!(
            "map {:?} vs atlas {:?}",
            map.header.dims, atlas.header.dims
        )));
    }
    let mut labels: Vec<i32> = atlas
        .labels
        .iter()
        .copied()
        .filter(|&l| l != 0)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    labels.sort_unstable();
    let pos: std::collections::BTreeMap<i32, usize> =
        labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let mut voxels_by_region = vec![Vec::new(); labels.len()];
    for (v, &l) in atlas.labels.iter().enumerate() {
        if l != 0 {
            voxels_by_region[pos[&l]].push(v);
        }
    }
    Ok(RegionIndex {
        labels,
        voxels_by_region,
    })
}

fn nonbackground_sorted(map: &VariabilityMap, atlas: &Atlas) -> Vec<f32> {
    let mut vals: Vec<f32> = map
        .values
        .iter()
        .zip(&atlas.labels)
        .filter(|(_, &l)| l != 0)
        .map(|(&v, _)| v)
        .collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vals
}

fn region_name(atlas: &Atlas, label: i32) -> String {
    atlas
        .label_table
        .get(&label)
        .cloned()
        .unwrap_or_else(|| format!("label_{label}"))
}

/// Euclidean-map rule: a region is selected iff its max voxel strictly
/// exceeds the whole-map 95th percentile AND at least half its voxels
/// strictly exceed the 80th percentile.
pub fn significant_regions_euclidean(map: &VariabilityMap, atlas: &Atlas) -> Result<RegionReport> {
    if map.kind != MapKind::Euclidean {
        return Err(LatentError::WrongKind {
            expected: "euclidean",
            found: map.kind.as_str(),
        });
    }
    let index = region_index(map, atlas)?;
    let sorted = nonbackground_sorted(map, atlas);
    if sorted.is_empty() {
        return Err(LatentError::Invalid("atlas has no nonbackground voxels".into()));
    }
    let p95 = percentile_linear(&sorted, 95.0);
    let p80 = percentile_linear(&sorted, 80.0);
    let rows = index
        .labels
        .iter()
        .zip(&index.voxels_by_region)
        .map(|(&label, voxels)| {
            let mut max = f32::NEG_INFINITY;
            let mut above = 0usize;
            for &v in voxels {
                let x = map.values[v];
                max = max.max(x);
                if x > p80 {
                    above += 1;
                }
            }
            let frac = above as f32 / voxels.len() as f32;
            RegionRow {
                label,
                name: region_name(atlas, label),
                n_voxels: voxels.len(),
                extreme: max,
                frac_beyond: frac,
                selected: max > p95 && frac >= 0.5,
            }
        })
        .collect();
    Ok(RegionReport {
        kind: MapKind::Euclidean,
        rows,
    })
}

/// Cosine-map rule: a region is selected iff its minimum voxel falls
/// strictly below the whole-map 5th percentile AND its voxel count is at
/// least the 20th percentile of region sizes.
pub fn significant_regions_cosine(map: &VariabilityMap, atlas: &Atlas) -> Result<RegionReport> {
    if map.kind != MapKind::Cosine {
        return Err(LatentError::WrongKind {
            expected: "cosine",
            found: map.kind.as_str(),
        });
    }
    let index = region_index(map, atlas)?;
    let sorted = nonbackground_sorted(map, atlas);
    if sorted.is_empty() {
        return Err(LatentError::Invalid("atlas has no nonbackground voxels".into()));
    }
    let p5 = percentile_linear(&sorted, 5.0);
    let mut sizes: Vec<f32> = index
        .voxels_by_region
        .iter()
        .map(|v| v.len() as f32)
        .collect();
    sizes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let size_p20 = percentile_linear(&sizes, 20.0);
    let rows = index
        .labels
        .iter()
        .zip(&index.voxels_by_region)
        .map(|(&label, voxels)| {
            let mut min = f32::INFINITY;
            let mut below = 0usize;
            for &v in voxels {
                let x = map.values[v];
                min = min.min(x);
                if x < p5 {
                    below += 1;
                }
            }
            RegionRow {
                label,
                name: region_name(atlas, label),
                n_voxels: voxels.len(),
                extreme: min,
                frac_beyond: below as f32 / voxels.len() as f32,
                selected: min < p5 && voxels.len() as f32 >= size_p20,
            }
        })
        .collect();
    Ok(RegionReport {
        kind: MapKind::Cosine,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::VolumeHeader;
    use std::collections::BTreeMap;

    fn atlas_two_regions(n_a: usize, n_b: usize) -> Atlas {
        let n = n_a + n_b;
        let mut table = BTreeMap::new();
        table.insert(1, "region_a".to_string());
        table.insert(2, "region_b".to_string());
        let labels: Vec<i32> = (0..n).map(|i| if i < n_a { 1 } else { 2 }).collect();
        Atlas::new(VolumeHeader::isotropic([1, 1, n]), labels, table).unwrap()
    }

    fn map_of(values: Vec<f32>, kind: MapKind) -> VariabilityMap {
        VariabilityMap {
            header: VolumeHeader::isotropic([1, 1, values.len()]),
            values,
            kind,
            degenerate_voxels: 0,
        }
    }

    #[test]
    fn top_quartile_region_selected_bottom_not() {
        // Region A holds the top 25% of values (75..100), region B the
        // rest (0..75). P95 = 95, P80 = 80; region A has max 99 > 95 and
        // all values > 80 except 75..=80, comfortably over half.
        let n = 100;
        let values: Vec<f32> = (0..n).map(|i| i as f32).collect();
        let atlas = {
            let mut table = BTreeMap::new();
            table.insert(1, "low".to_string());
            table.insert(2, "high".to_string());
            let labels: Vec<i32> = (0..n).map(|i| if i < 75 { 1 } else { 2 }).collect();
            Atlas::new(VolumeHeader::isotropic([1, 1, n]), labels, table).unwrap()
        };
        let report =
            significant_regions_euclidean(&map_of(values, MapKind::Euclidean), &atlas).unwrap();
        let high = report.rows.iter().find(|r| r.name == "high").unwrap();
        let low = report.rows.iter().find(|r| r.name == "low").unwrap();
        assert!(high.selected);
        assert!(!low.selected);
    }

    #[test]
    fn constant_map_selects_nothing() {
        let atlas = atlas_two_regions(4, 4);
        let e = significant_regions_euclidean(&map_of(vec![1.0; 8], MapKind::Euclidean), &atlas)
            .unwrap();
        assert!(e.rows.iter().all(|r| !r.selected));
        let c =
            significant_regions_cosine(&map_of(vec![0.5; 8], MapKind::Cosine), &atlas).unwrap();
        assert!(c.rows.iter().all(|r| !r.selected));
    }

    #[test]
    fn single_hot_voxel_without_extent_is_rejected() {
        // Region A gets one extreme voxel but only 10% of its voxels above
        // P80, so the conjunction fails.
        let mut values = vec![0.0f32; 100];
        for (i, v) in values.iter_mut().enumerate().take(50) {
            *v = if i == 0 { 1000.0 } else { 0.1 + (i as f32) * 0.001 };
        }
        for (i, v) in values.iter_mut().enumerate().skip(50) {
            *v = 10.0 + i as f32; // region B supplies the upper percentiles
        }
        let atlas = atlas_two_regions(50, 50);
        let report =
            significant_regions_euclidean(&map_of(values, MapKind::Euclidean), &atlas).unwrap();
        let a = &report.rows[0];
        assert!(a.extreme > 100.0);
        assert!(a.frac_beyond < 0.5);
        assert!(!a.selected);
    }

    #[test]
    fn cosine_volume_gate_excludes_tiny_regions() {
        // Ten regions: nine of size 10 and one singleton holding the most
        // anti-aligned voxel. Size P20 exceeds 1, so the singleton is out.
        let n = 91;
        let mut values = vec![0.9f32; n];
        values[90] = -1.0; // singleton region voxel, far below P5
        values[0] = -0.5; // big-region voxel below P5
        let mut table = BTreeMap::new();
        let mut labels = vec![0i32; n];
        for r in 0..9 {
            table.insert(r as i32 + 1, format!("big_{r}"));
            for i in 0..10 {
                labels[r * 10 + i] = r as i32 + 1;
            }
        }
        table.insert(100, "tiny".to_string());
        labels[90] = 100;
        let atlas = Atlas::new(VolumeHeader::isotropic([1, 1, n]), labels, table).unwrap();
        let report =
            significant_regions_cosine(&map_of(values, MapKind::Cosine), &atlas).unwrap();
        let tiny = report.rows.iter().find(|r| r.name == "tiny").unwrap();
        assert!(!tiny.selected, "volume gate must exclude the singleton");
        let big0 = report.rows.iter().find(|r| r.name == "big_0").unwrap();
        assert!(big0.selected, "anti-aligned large region is selected");
    }

    #[test]
    fn kind_mismatch_errors() {
        let atlas = atlas_two_regions(2, 2);
        let wrong = map_of(vec![0.0; 4], MapKind::Cosine);
        assert!(matches!(
            significant_regions_euclidean(&wrong, &atlas),
            Err(LatentError::WrongKind { .. })
        ));
    }
}
