//! Coarse-to-fine prediction: localisation on a downsampled volume, patch
//! prediction around the tumour with flip averaging, cascade restriction,
//! ensembling and thresholding.

use ndarray::{Array3, Array4, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Predictor;
use crate::patches::{extract, plan_patches, stitch};
use crate::resample::resize_trilinear;
use crate::volumes::{bounding_box, BoundingBox, MultiModalVolume, ProbabilityMaps, SubregionMasks};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdPolicy {
    pub wt_threshold: f64,
    pub tc_threshold: f64,
    pub et_threshold: f64,
    /// Tried in order while the ET mask is empty.
    pub et_fallback_ladder: Vec<f64>,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        Self {
            wt_threshold: 0.5,
            tc_threshold: 0.5,
            et_threshold: 0.4,
            et_fallback_ladder: vec![0.3, 0.2, 0.1],
        }
    }
}

impl ThresholdPolicy {
    pub fn validate(&self) -> Result<()> {
        let all = [self.wt_threshold, self.tc_threshold, self.et_threshold];
        if all
            .iter()
            .chain(&self.et_fallback_ladder)
            .any(|t| !(*t > 0.0 && *t < 1.0))
        {
            return Err(Error::Config("thresholds must lie in (0, 1)".to_string()));
        }
        let mut prev = self.et_threshold;
        for &t in &self.et_fallback_ladder {
            if t >= prev {
                return Err(Error::Config(format!(
                    "ET fallback ladder must decrease strictly from {}, got {:?}",
                    self.et_threshold, self.et_fallback_ladder
                )));
            }
            prev = t;
        }
        Ok(())
    }
}

/// Flip test-time augmentation over all eight axis-mirroring combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtaConfig {
    pub enabled: bool,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self { enabled: true }
    }
}

impl TtaConfig {
    /// The identity comes first.
    pub fn flip_set(&self) -> Vec<[bool; 3]> {
        if !self.enabled {
            return vec![[false; 3]];
        }
        (0..8u8)
            .map(|bits| [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0])
            .collect()
    }
}

/// Mirrors the spatial axes of a channel-first array.
pub fn flip(a: &Array4<f64>, axes: [bool; 3]) -> Array4<f64> {
    let mut view = a.view();
    for (d, &f) in axes.iter().enumerate() {
        if f {
            view.invert_axis(Axis(d + 1));
        }
    }
    view.to_owned()
}

/// Mean over the flip set of `unflip(predict(flip(patch)))`.
pub fn tta_predict(model: &dyn Predictor, patch: &Array4<f64>, tta: &TtaConfig) -> Result<Array4<f64>> {
    let flips = tta.flip_set();
    let outputs: Vec<Array4<f64>> = flips
        .par_iter()
        .map(|&axes| Ok(flip(&model.predict(&flip(patch, axes))?, axes)))
        .collect::<Result<_>>()?;
    // pairwise sum: a constant prediction survives the average bit-exactly
    let mut level = outputs;
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        let mut it = level.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a += &b;
            }
            next.push(a);
        }
        level = next;
    }
    let sum = level.pop().expect("at least the identity flip");
    Ok(sum / flips.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    /// Thresholded coarse whole-tumour mask at full resolution.
    pub mask: Array3<bool>,
    /// Bounding box of the mask, or the whole volume when it is empty.
    pub bbox: BoundingBox,
}

/// Predicts the whole tumour on the volume resized to the model's patch size
/// and maps the result back to full resolution.
pub fn localize(model: &dyn Predictor, volume: &MultiModalVolume, wt_threshold: f64) -> Result<Localization> {
    let shape = volume.shape();
    let coarse = model.patch_size();
    let channels: Vec<Array3<f64>> = volume
        .data()
        .outer_iter()
        .map(|c| resize_trilinear(c, coarse))
        .collect();
    let views: Vec<_> = channels.iter().map(|c| c.view()).collect();
    let input = ndarray::stack(Axis(0), &views).expect("equal shapes");
    let out = model.predict(&input)?;
    let wt = resize_trilinear(out.index_axis(Axis(0), 0), shape);
    let mask = wt.mapv(|p| p >= wt_threshold);
    let bbox = bounding_box(&mask).unwrap_or_else(|| BoundingBox::full(shape));
    Ok(Localization { mask, bbox })
}

/// Predicts every patch covering `bbox` and stitches them at full size.
fn predict_region(
    model: &dyn Predictor,
    volume: &MultiModalVolume,
    bbox: &BoundingBox,
    tta: &TtaConfig,
) -> Result<Array4<f64>> {
    let plan = plan_patches(bbox, volume.shape(), model.patch_size())?;
    let outputs: Vec<Array4<f64>> = plan
        .specs
        .par_iter()
        .map(|spec| tta_predict(model, &extract(volume.data().view(), spec), tta))
        .collect::<Result<_>>()?;
    stitch(&outputs, &plan)
}

fn check_channels(model: &dyn Predictor, expected: usize, what: &str) -> Result<()> {
    if model.out_channels() != expected {
        return Err(Error::ShapeMismatch(format!(
            "{what} model has {} output channels, expected {expected}",
            model.out_channels()
        )));
    }
    Ok(())
}

pub fn predict_multitask(
    model: &dyn Predictor,
    volume: &MultiModalVolume,
    tta: &TtaConfig,
    policy: &ThresholdPolicy,
) -> Result<ProbabilityMaps> {
    check_channels(model, 3, "multi-task")?;
    let loc = localize(model, volume, policy.wt_threshold)?;
    ProbabilityMaps::from_stacked(predict_region(model, volume, &loc.bbox, tta)?)
}

/// The three single-channel stages of the cascade.
#[derive(Clone, Copy)]
pub struct CascadeModels<'a> {
    pub wt: &'a dyn Predictor,
    pub tc: &'a dyn Predictor,
    pub et: &'a dyn Predictor,
}

/// Predicts one stage inside `region`; zero everywhere outside it.
fn restricted_stage(
    model: &dyn Predictor,
    volume: &MultiModalVolume,
    region: &Array3<bool>,
    tta: &TtaConfig,
) -> Result<Array3<f64>> {
    let Some(bbox) = bounding_box(region) else {
        return Ok(Array3::zeros(region.raw_dim()));
    };
    let mut prob = predict_region(model, volume, &bbox, tta)?
        .index_axis_move(Axis(0), 0);
    Zip::from(&mut prob).and(region).for_each(|p, &inside| {
        if !inside {
            *p = 0.0;
        }
    });
    Ok(prob)
}

pub fn predict_cascaded(
    models: CascadeModels<'_>,
    volume: &MultiModalVolume,
    tta: &TtaConfig,
    policy: &ThresholdPolicy,
) -> Result<ProbabilityMaps> {
    check_channels(models.wt, 1, "WT")?;
    check_channels(models.tc, 1, "TC")?;
    check_channels(models.et, 1, "ET")?;
    let loc = localize(models.wt, volume, policy.wt_threshold)?;
    let wt = predict_region(models.wt, volume, &loc.bbox, tta)?.index_axis_move(Axis(0), 0);
    let wt_mask = wt.mapv(|p| p >= policy.wt_threshold);
    let tc = restricted_stage(models.tc, volume, &wt_mask, tta)?;
    let tc_mask = tc.mapv(|p| p >= policy.tc_threshold);
    let et = restricted_stage(models.et, volume, &tc_mask, tta)?;
    ProbabilityMaps::new(wt, tc, et)
}

/// Voxel-wise mean of two models' probabilities.
pub fn ensemble(a: &ProbabilityMaps, b: &ProbabilityMaps) -> Result<ProbabilityMaps> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "cannot ensemble {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mean = |x: &Array3<f64>, y: &Array3<f64>| Zip::from(x).and(y).map_collect(|&p, &q| (p + q) / 2.0);
    ProbabilityMaps::new(mean(&a.wt, &b.wt), mean(&a.tc, &b.tc), mean(&a.et, &b.et))
}

/// The first threshold in `[et_threshold, ladder...]` that yields a non-empty
/// ET mask, or `None` if every one leaves it empty.
pub fn select_et_threshold(et: &Array3<f64>, policy: &ThresholdPolicy) -> Option<f64> {
    let max = et.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    std::iter::once(policy.et_threshold)
        .chain(policy.et_fallback_ladder.iter().copied())
        .find(|&t| max >= t)
}

pub fn threshold_subregions(probs: &ProbabilityMaps, policy: &ThresholdPolicy) -> SubregionMasks {
    let et = match select_et_threshold(&probs.et, policy) {
        Some(t) => probs.et.mapv(|p| p >= t),
        None => Array3::from_elem(probs.et.raw_dim(), false),
    };
    SubregionMasks {
        wt: probs.wt.mapv(|p| p >= policy.wt_threshold),
        tc: probs.tc.mapv(|p| p >= policy.tc_threshold),
        et,
        hierarchy_enforced: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::Geometry;

    struct Constant(f64, usize);

    impl Predictor for Constant {
        fn patch_size(&self) -> [usize; 3] {
            [8; 3]
        }
        fn out_channels(&self) -> usize {
            self.1
        }
        fn predict(&self, patch: &Array4<f64>) -> Result<Array4<f64>> {
            let s = patch.shape();
            Ok(Array4::from_elem((self.1, s[1], s[2], s[3]), self.0))
        }
    }

    fn volume(shape: [usize; 3]) -> MultiModalVolume {
        MultiModalVolume::new(Array4::from_elem((4, shape[0], shape[1], shape[2]), 1.0), Geometry::default()).unwrap()
    }

    #[test]
    fn flip_set_has_identity_and_eight_members() {
        let set = TtaConfig::default().flip_set();
        assert_eq!(set.len(), 8);
        assert_eq!(set[0], [false; 3]);
        let unique: std::collections::HashSet<_> = set.iter().collect();
        assert_eq!(unique.len(), 8);
    }

    #[test]
    fn empty_localization_falls_back_to_full_volume() {
        let loc = localize(&Constant(0.1, 3), &volume([10, 12, 9]), 0.5).unwrap();
        assert_eq!(loc.bbox, BoundingBox::full([10, 12, 9]));
        assert!(!loc.mask.iter().any(|&v| v));
    }

    #[test]
    fn ensemble_mean_and_mismatch() {
        let a = ProbabilityMaps::new(Array3::from_elem((2, 2, 2), 0.4), Array3::zeros((2, 2, 2)), Array3::zeros((2, 2, 2))).unwrap();
        let b = ProbabilityMaps::new(Array3::from_elem((2, 2, 2), 0.6), Array3::zeros((2, 2, 2)), Array3::zeros((2, 2, 2))).unwrap();
        let e = ensemble(&a, &b).unwrap();
        assert!(e.wt.iter().all(|&p| (p - 0.5).abs() < 1e-15));
        assert_eq!(ensemble(&a, &a).unwrap(), a);
        assert!(ensemble(&a, &ProbabilityMaps::zeros([3; 3])).is_err());
    }

    #[test]
    fn empty_wt_stage_zeroes_cascade() {
        let zero = Constant(0.0, 1);
        let one = Constant(1.0, 1);
        let models = CascadeModels { wt: &zero, tc: &one, et: &one };
        let probs = predict_cascaded(models, &volume([12; 3]), &TtaConfig::default(), &ThresholdPolicy::default()).unwrap();
        assert!(probs.tc.iter().chain(probs.et.iter()).all(|&p| p == 0.0));
    }

    #[test]
    fn policy_validation() {
        assert!(ThresholdPolicy::default().validate().is_ok());
        let bad = ThresholdPolicy {
            et_fallback_ladder: vec![0.3, 0.3],
            ..ThresholdPolicy::default()
        };
        assert!(bad.validate().is_err());
        let bad = ThresholdPolicy {
            wt_threshold: 1.0,
            ..ThresholdPolicy::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let m = Constant(0.5, 1);
        assert!(predict_multitask(&m, &volume([8; 3]), &TtaConfig::default(), &ThresholdPolicy::default()).is_err());
    }
}
