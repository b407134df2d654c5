//! Intensity normalization and random spatial augmentation.
//!
//! Bias-field correction is expected to have been applied upstream; every
//! function here consumes already-corrected intensities.

use ndarray::{Array3, Array4, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::sample_trilinear;
use crate::volumes::{BrainMask, LabelMap, Modality, MultiModalVolume};

/// Channels whose masked standard deviation falls below this are zeroed.
pub const MIN_STD: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Normalized {
    pub volume: MultiModalVolume,
    /// Constant channels that were set to zero.
    pub degenerate: Vec<Modality>,
}

/// Per-channel z-score over the brain mask, population standard deviation.
/// Voxels outside the mask are set to zero.
pub fn zscore_normalize(volume: &MultiModalVolume, mask: &BrainMask) -> Result<Normalized> {
    let mask = mask.mask();
    if mask.dim() != {
        let [x, y, z] = volume.shape();
        (x, y, z)
    } {
        return Err(Error::ShapeMismatch(
            "brain mask does not match volume".to_string(),
        ));
    }
    let n = mask.iter().filter(|&&m| m).count() as f64;
    let mut data = volume.data().clone();
    let mut degenerate = Vec::new();
    for (modality, mut channel) in Modality::ALL.into_iter().zip(data.outer_iter_mut()) {
        let mut sum = 0.0;
        Zip::from(&channel).and(mask).for_each(|&v, &m| {
            if m {
                sum += v;
            }
        });
        let mean = sum / n;
        let mut sq = 0.0;
        Zip::from(&channel).and(mask).for_each(|&v, &m| {
            if m {
                sq += (v - mean) * (v - mean);
            }
        });
        let std = (sq / n).sqrt();
        if std < MIN_STD {
            log::warn!("{modality:?} channel is constant inside the brain mask; zeroing it");
            degenerate.push(modality);
            channel.fill(0.0);
            continue;
        }
        Zip::from(&mut channel).and(mask).for_each(|v, &m| {
            *v = if m { (*v - mean) / std } else { 0.0 };
        });
    }
    Ok(Normalized {
        volume: MultiModalVolume::new(data, *volume.geometry())?,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_range_deg: (f64, f64),
    pub scale_range: (f64, f64),
    pub mirror_prob_per_axis: f64,
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            rotation_range_deg: (-6.0, 6.0),
            scale_range: (0.9, 1.1),
            mirror_prob_per_axis: 0.5,
            seed: 0,
        }
    }
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            rotation_range_deg: (0.0, 0.0),
            scale_range: (1.0, 1.0),
            mirror_prob_per_axis: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.rotation_range_deg;
        if lo > hi || (lo + hi).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "rotation range must be symmetric about 0, got ({lo}, {hi})"
            )));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= 1.0 && 1.0 <= hi) {
            return Err(Error::Config(format!(
                "scale range must be positive and contain 1.0, got ({lo}, {hi})"
            )));
        }
        if !(0.0..=1.0).contains(&self.mirror_prob_per_axis) {
            return Err(Error::Config(format!(
                "mirror probability must lie in [0, 1], got {}",
                self.mirror_prob_per_axis
            )));
        }
        Ok(())
    }

    /// Draws the concrete transform for this seed.
    pub fn sample(&self) -> SpatialTransform {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (rlo, rhi) = self.rotation_range_deg;
        let angles_deg = std::array::from_fn(|_| rng.random_range(rlo..=rhi));
        let (slo, shi) = self.scale_range;
        let scale = rng.random_range(slo..=shi);
        let mirror = std::array::from_fn(|_| rng.random_bool(self.mirror_prob_per_axis));
        SpatialTransform {
            angles_deg,
            scale,
            mirror,
        }
    }
}

/// Rotation about each axis (applied x, then y, then z) and isotropic scaling
/// about the volume centre, followed by optional per-axis mirroring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialTransform {
    pub angles_deg: [f64; 3],
    pub scale: f64,
    pub mirror: [bool; 3],
}

impl SpatialTransform {
    fn is_rigid_identity(&self) -> bool {
        self.angles_deg.iter().all(|&a| a == 0.0) && self.scale == 1.0
    }

    fn rotation(&self) -> [[f64; 3]; 3] {
        let [ax, ay, az] = self.angles_deg.map(f64::to_radians);
        let rx = [
            [1.0, 0.0, 0.0],
            [0.0, ax.cos(), -ax.sin()],
            [0.0, ax.sin(), ax.cos()],
        ];
        let ry = [
            [ay.cos(), 0.0, ay.sin()],
            [0.0, 1.0, 0.0],
            [-ay.sin(), 0.0, ay.cos()],
        ];
        let rz = [
            [az.cos(), -az.sin(), 0.0],
            [az.sin(), az.cos(), 0.0],
            [0.0, 0.0, 1.0],
        ];
        matmul(&rz, &matmul(&ry, &rx))
    }

    /// Maps an output voxel to the input position it samples from.
    fn source_fn(&self, shape: [usize; 3]) -> impl Fn([usize; 3]) -> [f64; 3] + '_ {
        let rot = self.rotation();
        let centre = shape.map(|n| (n as f64 - 1.0) / 2.0);
        let mirror = self.mirror;
        let inv_scale = 1.0 / self.scale;
        move |p| {
            let q: [f64; 3] = std::array::from_fn(|d| {
                let v = if mirror[d] { shape[d] - 1 - p[d] } else { p[d] };
                v as f64 - centre[d]
            });
            // inverse rotation is the transpose
            std::array::from_fn(|i| {
                let r = rot[0][i] * q[0] + rot[1][i] * q[1] + rot[2][i] * q[2];
                centre[i] + r * inv_scale
            })
        }
    }

    pub fn apply_image(&self, image: &Array3<f64>) -> Array3<f64> {
        let (x, y, z) = image.dim();
        let shape = [x, y, z];
        if self.is_rigid_identity() {
            return mirror_axes(image, self.mirror);
        }
        let source = self.source_fn(shape);
        let view = image.view();
        Array3::from_shape_fn(shape, |(i, j, k)| sample_trilinear(&view, source([i, j, k])))
    }

    pub fn apply_labels(&self, labels: &Array3<u8>) -> Array3<u8> {
        let (x, y, z) = labels.dim();
        let shape = [x, y, z];
        if self.is_rigid_identity() {
            return mirror_axes(labels, self.mirror);
        }
        let source = self.source_fn(shape);
        Array3::from_shape_fn(shape, |(i, j, k)| {
            let p = source([i, j, k]);
            let mut idx = [0usize; 3];
            for d in 0..3 {
                let r = p[d].round();
                if r < 0.0 || r >= shape[d] as f64 {
                    return 0;
                }
                idx[d] = r as usize;
            }
            labels[idx]
        })
    }
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

pub(crate) fn mirror_axes<T: Clone>(a: &Array3<T>, mirror: [bool; 3]) -> Array3<T> {
    let mut view = a.view();
    for (d, &m) in mirror.iter().enumerate() {
        if m {
            view.invert_axis(Axis(d));
        }
    }
    view.to_owned()
}

/// Randomly rotates, scales and mirrors a case. Images use trilinear
/// interpolation, labels nearest neighbour; out-of-volume samples read 0.
pub fn augment(
    volume: &MultiModalVolume,
    labels: &LabelMap,
    params: &AugmentParams,
) -> Result<(MultiModalVolume, LabelMap)> {
    if volume.shape() != labels.shape() {
        return Err(Error::ShapeMismatch(format!(
            "volume {:?} vs labels {:?}",
            volume.shape(),
            labels.shape()
        )));
    }
    params.validate()?;
    let transform = params.sample();
    let [x, y, z] = volume.shape();
    let mut data = Array4::zeros((4, x, y, z));
    for (src, mut dst) in volume.data().outer_iter().zip(data.outer_iter_mut()) {
        dst.assign(&transform.apply_image(&src.to_owned()));
    }
    let new_labels = transform.apply_labels(labels.labels());
    Ok((
        MultiModalVolume::new(data, *volume.geometry())?,
        LabelMap::new(new_labels, *labels.geometry())?,
    ))
}
