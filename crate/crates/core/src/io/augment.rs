//! Training-time augmentation: seeded in-plane rotation, in-plane integer
//! shifts, and a global multiplicative intensity factor.
//!
//! "In plane" means the first two axes; the third axis is never shifted
//! or rotated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Volume;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Rotation drawn uniformly from `[-max, +max]` degrees.
    pub max_rotation_deg: f32,
    /// Integer shifts drawn uniformly from `[-max, +max]` voxels per
    /// in-plane axis.
    pub max_shift: usize,
    /// Intensity factor drawn uniformly from `[lo, hi]`.
    pub intensity_lo: f32,
    pub intensity_hi: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation_deg: 15.0,
            max_shift: 20,
            intensity_lo: 0.8,
            intensity_hi: 1.2,
        }
    }
}

/// Applies rotation, shift, then intensity scaling with a seeded RNG.
/// Degenerate ranges (zero rotation/shift, `lo == hi == 1`) reduce to the
/// identity; output shape always equals input shape.
pub fn augment(volume: &Volume, cfg: &AugmentConfig, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle_deg: f32 = if cfg.max_rotation_deg > 0.0 {
        rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
    } else {
        0.0
    };
    let s = cfg.max_shift as i64;
    let shift0: i64 = rng.gen_range(-s..=s);
    let shift1: i64 = rng.gen_range(-s..=s);
    let factor: f32 = if cfg.intensity_hi > cfg.intensity_lo {
        rng.gen_range(cfg.intensity_lo..=cfg.intensity_hi)
    } else {
        cfg.intensity_lo
    };

    let rotated = rotate_in_plane(volume, angle_deg);
    let mut out = shift_in_plane(&rotated, shift0, shift1);
    for v in &mut out.voxels {
        *v *= factor;
    }
    out
}

/// Bilinear in-plane rotation about the volume center, zero fill outside.
fn rotate_in_plane(volume: &Volume, angle_deg: f32) -> Volume {
    if angle_deg == 0.0 {
        return volume.clone();
    }
    let [d0, d1, d2] = volume.header.dims;
    let theta = (angle_deg as f64).to_radians();
    let (sin, cos) = (theta.sin() as f32, theta.cos() as f32);
    let c0 = (d0 as f32 - 1.0) / 2.0;
    let c1 = (d1 as f32 - 1.0) / 2.0;
    let mut out = vec![0.0f32; volume.voxels.len()];
    for i in 0..d0 {
        let di = i as f32 - c0;
        for j in 0..d1 {
            let dj = j as f32 - c1;
            // Inverse mapping: sample the source at the back-rotated point.
            let si = c0 + cos * di + sin * dj;
            let sj = c1 - sin * di + cos * dj;
            if si < 0.0 || sj < 0.0 || si > (d0 - 1) as f32 || sj > (d1 - 1) as f32 {
                continue;
            }
            let i0 = si.floor() as usize;
            let j0 = sj.floor() as usize;
            let i1 = (i0 + 1).min(d0 - 1);
            let j1 = (j0 + 1).min(d1 - 1);
            let fi = si - i0 as f32;
            let fj = sj - j0 as f32;
            for k in 0..d2 {
                let v00 = volume.voxels[(i0 * d1 + j0) * d2 + k];
                let v01 = volume.voxels[(i0 * d1 + j1) * d2 + k];
                let v10 = volume.voxels[(i1 * d1 + j0) * d2 + k];
                let v11 = volume.voxels[(i1 * d1 + j1) * d2 + k];
                let v0 = v00 + (v01 - v00) * fj;
                let v1 = v10 + (v11 - v10) * fj;
                out[(i * d1 + j) * d2 + k] = v0 + (v1 - v0) * fi;
            }
        }
    }
    Volume {
        header: volume.header.clone(),
        voxels: out,
    }
}

fn shift_in_plane(volume: &Volume, shift0: i64, shift1: i64) -> Volume {
    if shift0 == 0 && shift1 == 0 {
        return volume.clone();
    }
    let [d0, d1, d2] = volume.header.dims;
    let mut out = vec![0.0f32; volume.voxels.len()];
    for i in 0..d0 as i64 {
        let si = i - shift0;
        if si < 0 || si >= d0 as i64 {
            continue;
        }
        for j in 0..d1 as i64 {
            let sj = j - shift1;
            if sj < 0 || sj >= d1 as i64 {
                continue;
            }
            let dst = ((i as usize) * d1 + j as usize) * d2;
            let src = ((si as usize) * d1 + sj as usize) * d2;
            out[dst..dst + d2].copy_from_slice(&volume.voxels[src..src + d2]);
        }
    }
    Volume {
        header: volume.header.clone(),
        voxels: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::VolumeHeader;

    fn sample_volume() -> Volume {
        let voxels = (0..4 * 4 * 4).map(|v| (v % 13) as f32 * 0.1).collect();
        Volume::new(VolumeHeader::isotropic([4, 4, 4]), voxels).unwrap()
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let v = sample_volume();
        let cfg = AugmentConfig::default();
        let a = augment(&v, &cfg, 7);
        let b = augment(&v, &cfg, 7);
        assert_eq!(a, b);
        assert_eq!(a.header.dims, v.header.dims);
    }

    #[test]
    fn degenerate_config_is_identity() {
        let v = sample_volume();
        let cfg = AugmentConfig {
            max_rotation_deg: 0.0,
            max_shift: 0,
            intensity_lo: 1.0,
            intensity_hi: 1.0,
        };
        assert_eq!(augment(&v, &cfg, 3), v);
    }

    #[test]
    fn intensity_factor_scales_multiplicatively() {
        let v = Volume::new(VolumeHeader::isotropic([2, 2, 2]), vec![1.0; 8]).unwrap();
        let cfg = AugmentConfig {
            max_rotation_deg: 0.0,
            max_shift: 0,
            intensity_lo: 1.2,
            intensity_hi: 1.2,
        };
        let out = augment(&v, &cfg, 1);
        for x in out.voxels {
            assert!((x - 1.2).abs() < 1e-6);
        }
    }

    #[test]
    fn augmentation_never_produces_nan() {
        let v = sample_volume();
        let cfg = AugmentConfig::default();
        for seed in 0..50 {
            let out = augment(&v, &cfg, seed);
            assert!(out.voxels.iter().all(|x| x.is_finite()));
            assert_eq!(out.voxels.len(), v.voxels.len());
        }
    }
}
