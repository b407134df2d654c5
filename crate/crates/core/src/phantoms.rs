//! Synthetic nested-sphere tumour phantoms.

use ndarray::{Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{Geometry, LabelMap, MultiModalVolume, EDEMA, ENHANCING, NECROSIS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub brain_centre: [f64; 3],
    /// Semi-axes of the brain ellipsoid in voxels.
    pub brain_radii: [f64; 3],
    /// Healthy-tissue intensity per modality (flair, t1, t1ce, t2).
    pub base_intensity: [f64; 4],
    pub tumour_centre: [f64; 3],
    pub r_wt: f64,
    pub r_tc: f64,
    pub r_et: f64,
    /// Intensity offset per modality for edema, necrosis and enhancing tissue.
    pub offsets: [[f64; 3]; 4],
    pub noise_sigma: f64,
    pub seed: u64,
    pub spacing: [f64; 3],
}

impl PhantomSpec {
    /// Brain filling most of the volume with a centred tumour.
    pub fn centred(shape: [usize; 3], r_wt: f64, r_tc: f64, r_et: f64, seed: u64) -> Self {
        let centre = shape.map(|n| (n as f64 - 1.0) / 2.0);
        Self {
            shape,
            brain_centre: centre,
            brain_radii: shape.map(|n| n as f64 * 0.45),
            base_intensity: [100.0, 120.0, 110.0, 90.0],
            tumour_centre: centre,
            r_wt,
            r_tc,
            r_et,
            offsets: [
                [80.0, 40.0, 60.0],
                [-10.0, -50.0, -20.0],
                [10.0, -30.0, 150.0],
                [90.0, 70.0, 40.0],
            ],
            noise_sigma: 5.0,
            seed,
            spacing: [1.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Phantom(m));
        if self.shape.iter().any(|&n| n == 0) {
            return fail(format!("empty volume shape {:?}", self.shape));
        }
        let radii = [self.r_wt, self.r_tc, self.r_et];
        if radii.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return fail(format!("radii must be finite and non-negative, got {radii:?}"));
        }
        if self.r_tc > 0.0 && self.r_tc >= self.r_wt || self.r_et > 0.0 && self.r_et >= self.r_tc {
            return fail(format!("radii must satisfy r_wt > r_tc > r_et, got {radii:?}"));
        }
        if !(self.noise_sigma >= 0.0) {
            return fail(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        for axis in 0..3 {
            let c = self.tumour_centre[axis];
            let n = self.shape[axis] as f64;
            if c - self.r_wt < -0.5 || c + self.r_wt > n - 0.5 {
                return fail(format!(
                    "tumour of radius {} at {:?} exceeds volume {:?}",
                    self.r_wt, self.tumour_centre, self.shape
                ));
            }
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return fail(format!("spacing must be positive, got {:?}", self.spacing));
        }
        Ok(())
    }
}

fn dist(p: [usize; 3], c: [f64; 3]) -> f64 {
    (0..3)
        .map(|a| (p[a] as f64 - c[a]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Builds the volume and its labels; identical specs give identical output.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(MultiModalVolume, LabelMap)> {
    spec.validate()?;
    let [nx, ny, nz] = spec.shape;
    let labels = Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| {
        let d = dist([x, y, z], spec.tumour_centre);
        if d < spec.r_et {
            ENHANCING
        } else if d < spec.r_tc {
            NECROSIS
        } else if d < spec.r_wt {
            EDEMA
        } else {
            0
        }
    });
    let inside_brain = |x: usize, y: usize, z: usize| {
        let p = [x, y, z];
        (0..3)
            .map(|a| ((p[a] as f64 - spec.brain_centre[a]) / spec.brain_radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    };
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Phantom(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = Array4::zeros((4, nx, ny, nz));
    for ((x, y, z), &label) in labels.indexed_iter() {
        if label == 0 && !inside_brain(x, y, z) {
            continue;
        }
        let region = match label {
            EDEMA => Some(0),
            NECROSIS => Some(1),
            ENHANCING => Some(2),
            _ => None,
        };
        for m in 0..4 {
            let offset = region.map_or(0.0, |r| spec.offsets[m][r]);
            // keep brain voxels strictly positive so the brain mask is exact
            data[[m, x, y, z]] = (spec.base_intensity[m] + offset + noise.sample(&mut rng)).max(1e-3);
        }
    }
    let geometry = Geometry::with_spacing(spec.spacing);
    let volume = MultiModalVolume::new(data, geometry)?;
    let labels = LabelMap::new(labels, geometry)?;
    Ok((volume, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::labels_to_subregions;
    use std::f64::consts::PI;

    #[test]
    fn counts_match_sphere_volumes() {
        let spec = PhantomSpec::centred([48; 3], 16.0, 10.0, 6.0, 3);
        let (_, labels) = make_phantom(&spec).unwrap();
        let masks = labels_to_subregions(&labels);
        assert!(masks.is_nested());
        for (count, r) in masks.counts().iter().zip([16.0, 10.0, 6.0]) {
            let expected = 4.0 / 3.0 * PI * f64::powi(r, 3);
            let rel = (*count as f64 - expected).abs() / expected;
            assert!(rel < 0.05, "r={r}: {count} vs {expected:.1}");
        }
    }

    #[test]
    fn zero_et_radius_gives_empty_et() {
        let spec = PhantomSpec::centred([32; 3], 10.0, 6.0, 0.0, 1);
        let (_, labels) = make_phantom(&spec).unwrap();
        let counts = labels_to_subregions(&labels).counts();
        assert_eq!(counts[2], 0);
        assert!(counts[1] > 0);
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = PhantomSpec::centred([24; 3], 8.0, 5.0, 3.0, 9);
        let (a, la) = make_phantom(&spec).unwrap();
        let (b, lb) = make_phantom(&spec).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(la.labels(), lb.labels());
        let other = PhantomSpec { seed: 10, ..spec };
        assert_ne!(make_phantom(&other).unwrap().0.data(), a.data());
    }

    #[test]
    fn rejects_out_of_bounds_and_unnested_radii() {
        let mut spec = PhantomSpec::centred([24; 3], 8.0, 5.0, 3.0, 0);
        spec.tumour_centre = [4.0, 12.0, 12.0];
        assert!(matches!(make_phantom(&spec), Err(Error::Phantom(_))));
        let spec = PhantomSpec::centred([24; 3], 5.0, 8.0, 3.0, 0);
        assert!(make_phantom(&spec).is_err());
    }

    #[test]
    fn background_outside_brain_is_zero() {
        let spec = PhantomSpec::centred([20; 3], 5.0, 3.0, 1.0, 0);
        let (vol, _) = make_phantom(&spec).unwrap();
        assert!(vol.data().slice(ndarray::s![.., 0, 0, 0]).iter().all(|&v| v == 0.0));
        assert!(vol.data().slice(ndarray::s![.., 10, 10, 10]).iter().all(|&v| v > 0.0));
    }
}
