//! Subjects-by-voxels cohort matrix with per-row stage/group labels.

use crate::io::{zscore_standardize, Group, Stage, StandardizeStats, Volume, VolumeHeader};

use super::{LatentError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowLabel {
    pub subject_id: String,
    pub stage: Stage,
    pub group: Group,
}

/// Row-major `subjects x voxels` matrix; all rows share one header.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortMatrix {
    header: VolumeHeader,
    labels: Vec<RowLabel>,
    data: Vec<f32>,
}

impl CohortMatrix {
    pub fn from_volumes(items: &[(RowLabel, &Volume)]) -> Result<Self> {
        if items.is_empty() {
            return Err(LatentError::TooFewSubjects(0));
        }
        let header = items[0].1.header.clone();
        let cols = header.num_voxels();
        let mut data = Vec::with_capacity(items.len() * cols);
        let mut labels = Vec::with_capacity(items.len());
        let mut seen = std::collections::BTreeSet::new();
        for (label, volume) in items {
            if volume.header.dims != header.dims {
                return Err(LatentError::DimMismatch(format!(
                    "{:?} vs {:?}",
                    volume.header.dims, header.dims
                )));
            }
            if !seen.insert((label.subject_id.clone(), label.stage)) {
                return Err(LatentError::LabelCollision(format!(
                    "{}/{}",
                    label.subject_id, label.stage
                )));
            }
            data.extend_from_slice(&volume.voxels);
            labels.push(label.clone());
        }
        Ok(CohortMatrix {
            header,
            labels,
            data,
        })
    }

    pub fn from_rows(header: VolumeHeader, labels: Vec<RowLabel>, data: Vec<f32>) -> Result<Self> {
        let cols = header.num_voxels();
        if labels.len() * cols != data.len() {
            return Err(LatentError::DimMismatch(format!(
                "{} rows x {} cols != {} values",
                labels.len(),
                cols,
                data.len()
            )));
        }
        Ok(CohortMatrix {
            header,
            labels,
            data,
        })
    }

    /// Matrix with synthetic row labels, for data that is not a subject
    /// cohort (e.g. stacked attribution maps fed to PCA).
    pub fn unlabeled(header: VolumeHeader, rows: usize, data: Vec<f32>) -> Result<Self> {
        let labels = (0..rows)
            .map(|i| RowLabel {
                subject_id: format!("row{i:04}"),
                stage: Stage::Pre,
                group: Group::Longer,
            })
            .collect();
        Self::from_rows(header, labels, data)
    }

    pub fn header(&self) -> &VolumeHeader {
        &self.header
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn cols(&self) -> usize {
        self.header.num_voxels()
    }

    pub fn labels(&self) -> &[RowLabel] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let cols = self.cols();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Row indices whose label matches the given stage/group filters.
    pub fn rows_where(&self, stage: Option<Stage>, group: Option<Group>) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| stage.map_or(true, |s| l.stage == s))
            .filter(|(_, l)| group.map_or(true, |g| l.group == g))
            .map(|(i, _)| i)
            .collect()
    }

    /// Per-voxel zero-mean/unit-variance scaling (population std).
    pub fn standardize(&self) -> Result<(CohortMatrix, StandardizeStats)> {
        let (data, stats) = zscore_standardize(&self.data, self.rows(), self.cols())?;
        Ok((
            CohortMatrix {
                header: self.header.clone(),
                labels: self.labels.clone(),
                data,
            },
            stats,
        ))
    }

    /// Stacks two cohorts sharing a header into one matrix.
    pub fn vstack(&self, other: &CohortMatrix) -> Result<CohortMatrix> {
        if self.header.dims != other.header.dims {
            return Err(LatentError::DimMismatch(format!(
                "{:?} vs {:?}",
                self.header.dims, other.header.dims
            )));
        }
        let mut labels = self.labels.clone();
        labels.extend(other.labels.iter().cloned());
        let mut seen = std::collections::BTreeSet::new();
        for l in &labels {
            if !seen.insert((l.subject_id.clone(), l.stage)) {
                return Err(LatentError::LabelCollision(format!(
                    "{}/{}",
                    l.subject_id, l.stage
                )));
            }
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(CohortMatrix {
            header: self.header.clone(),
            labels,
            data,
        })
    }
}
