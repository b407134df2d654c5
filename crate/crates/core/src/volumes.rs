//! Volumetric data types, the BraTS label codec and brain-mask derivation.
//!
//! Every spatial array is indexed `[x, y, z]`, matching the voxel order of the
//! NIfTI files the data comes from. Multi-channel arrays put the channel axis
//! first.

use ndarray::{Array3, Array4, ArrayView3, Axis, Zip};

use crate::error::{Error, Result};

/// MR sequence. The declaration order is the channel order used everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Flair,
    T1,
    T1c,
    T2,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Flair, Modality::T1, Modality::T1c, Modality::T2];

    pub fn channel(self) -> usize {
        self as usize
    }

    /// File-name suffix of the BraTS distribution, e.g. `_t1ce` for T1c.
    pub fn file_suffix(self) -> &'static str {
        match self {
            Modality::Flair => "flair",
            Modality::T1 => "t1",
            Modality::T1c => "t1ce",
            Modality::T2 => "t2",
        }
    }
}

/// Tumour subregion, in the channel order used by every 3-channel array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subregion {
    Wt,
    Tc,
    Et,
}

impl Subregion {
    pub const ALL: [Subregion; 3] = [Subregion::Wt, Subregion::Tc, Subregion::Et];

    pub fn channel(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Subregion::Wt => "wt",
            Subregion::Tc => "tc",
            Subregion::Et => "et",
        }
    }
}

impl std::str::FromStr for Subregion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wt" => Ok(Subregion::Wt),
            "tc" => Ok(Subregion::Tc),
            "et" => Ok(Subregion::Et),
            other => Err(Error::Config(format!("unknown subregion {other:?}"))),
        }
    }
}

pub type Affine = [[f64; 4]; 4];

/// Voxel size and voxel-to-world transform shared by a case's volumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub spacing: [f64; 3],
    pub affine: Affine,
}

impl Geometry {
    /// Axis-aligned geometry with the given spacing and zero origin.
    pub fn with_spacing(spacing: [f64; 3]) -> Self {
        let mut affine = [[0.0; 4]; 4];
        for (i, s) in spacing.iter().enumerate() {
            affine[i][i] = *s;
        }
        affine[3][3] = 1.0;
        Self { spacing, affine }
    }

    pub fn isotropic(spacing: f64) -> Self {
        Self::with_spacing([spacing; 3])
    }

    fn validate(&self) -> Result<()> {
        if self.spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "voxel spacing must be positive, got {:?}",
                self.spacing
            )))
        }
    }
}

impl Default for Geometry {
    fn default() -> Self {
        Self::isotropic(1.0)
    }
}

/// Four co-registered MR channels, `[channel, x, y, z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalVolume {
    data: Array4<f64>,
    geometry: Geometry,
}

impl MultiModalVolume {
    pub fn new(data: Array4<f64>, geometry: Geometry) -> Result<Self> {
        if data.shape()[0] != Modality::ALL.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} channels, got {}",
                Modality::ALL.len(),
                data.shape()[0]
            )));
        }
        geometry.validate()?;
        Ok(Self { data, geometry })
    }

    /// Stacks one array per modality in channel order.
    pub fn from_channels(channels: [Array3<f64>; 4], geometry: Geometry) -> Result<Self> {
        let shape = channels[0].dim();
        if channels.iter().any(|c| c.dim() != shape) {
            return Err(Error::ShapeMismatch(
                "modalities do not share one shape".to_string(),
            ));
        }
        let views: Vec<_> = channels.iter().map(|c| c.view()).collect();
        let data = ndarray::stack(Axis(0), &views)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Self::new(data, geometry)
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array4<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array4<f64> {
        self.data
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn channel(&self, modality: Modality) -> ArrayView3<'_, f64> {
        self.data.index_axis(Axis(0), modality.channel())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrainMask {
    mask: Array3<bool>,
}

impl BrainMask {
    pub fn new(mask: Array3<bool>) -> Result<Self> {
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyBrain);
        }
        Ok(Self { mask })
    }

    pub fn mask(&self) -> &Array3<bool> {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Union of the nonzero supports of all modalities.
pub fn brain_mask(volume: &MultiModalVolume) -> Result<BrainMask> {
    let mut mask = Array3::from_elem(volume.shape(), false);
    for channel in volume.data().outer_iter() {
        Zip::from(&mut mask).and(&channel).for_each(|m, &v| *m |= v != 0.0);
    }
    BrainMask::new(mask)
}

pub const BACKGROUND: u8 = 0;
pub const NECROSIS: u8 = 1;
pub const EDEMA: u8 = 2;
pub const ENHANCING: u8 = 4;

pub fn is_valid_label(value: i64) -> bool {
    matches!(value, 0 | 1 | 2 | 4)
}

/// Integer segmentation over the BraTS labels {0, 1, 2, 4}.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    labels: Array3<u8>,
    geometry: Geometry,
}

impl LabelMap {
    pub fn new(labels: Array3<u8>, geometry: Geometry) -> Result<Self> {
        if let Some((index, &value)) = labels
            .indexed_iter()
            .find(|(_, &v)| !is_valid_label(v as i64))
        {
            return Err(Error::InvalidLabel {
                value: value as i64,
                index: [index.0, index.1, index.2],
            });
        }
        geometry.validate()?;
        Ok(Self { labels, geometry })
    }

    pub fn zeros(shape: [usize; 3], geometry: Geometry) -> Self {
        Self {
            labels: Array3::zeros(shape),
            geometry,
        }
    }

    pub fn labels(&self) -> &Array3<u8> {
        &self.labels
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn shape(&self) -> [usize; 3] {
        let (x, y, z) = self.labels.dim();
        [x, y, z]
    }

    pub fn with_geometry(mut self, geometry: Geometry) -> Self {
        self.geometry = geometry;
        self
    }
}

/// Whole tumour, tumour core and enhancing tumour as binary volumes.
///
/// `hierarchy_enforced` distinguishes post-processed masks, which satisfy
/// `et ⊆ tc ⊆ wt`, from raw thresholded predictions, which may not.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubregionMasks {
    pub wt: Array3<bool>,
    pub tc: Array3<bool>,
    pub et: Array3<bool>,
    pub hierarchy_enforced: bool,
}

impl SubregionMasks {
    /// Raw (pre-hierarchy) masks; only the shapes are checked.
    pub fn new(wt: Array3<bool>, tc: Array3<bool>, et: Array3<bool>) -> Result<Self> {
        if wt.dim() != tc.dim() || wt.dim() != et.dim() {
            return Err(Error::ShapeMismatch(
                "subregion masks differ in shape".to_string(),
            ));
        }
        Ok(Self {
            wt,
            tc,
            et,
            hierarchy_enforced: false,
        })
    }

    pub fn empty(shape: [usize; 3]) -> Self {
        Self {
            wt: Array3::from_elem(shape, false),
            tc: Array3::from_elem(shape, false),
            et: Array3::from_elem(shape, false),
            hierarchy_enforced: true,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        let (x, y, z) = self.wt.dim();
        [x, y, z]
    }

    pub fn is_nested(&self) -> bool {
        Zip::from(&self.wt)
            .and(&self.tc)
            .and(&self.et)
            .all(|&w, &t, &e| (!e || t) && (!t || w))
    }

    pub fn channels(&self) -> [&Array3<bool>; 3] {
        [&self.wt, &self.tc, &self.et]
    }

    pub fn get(&self, region: Subregion) -> &Array3<bool> {
        self.channels()[region.channel()]
    }

    pub fn counts(&self) -> [usize; 3] {
        self.channels()
            .map(|m| m.iter().filter(|&&v| v).count())
    }
}

/// Per-subregion sigmoid probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMaps {
    pub wt: Array3<f64>,
    pub tc: Array3<f64>,
    pub et: Array3<f64>,
}

impl ProbabilityMaps {
    pub fn new(wt: Array3<f64>, tc: Array3<f64>, et: Array3<f64>) -> Result<Self> {
        if wt.dim() != tc.dim() || wt.dim() != et.dim() {
            return Err(Error::ShapeMismatch(
                "probability maps differ in shape".to_string(),
            ));
        }
        let maps = Self { wt, tc, et };
        if maps
            .channels()
            .iter()
            .any(|c| c.iter().any(|p| !(0.0..=1.0).contains(p)))
        {
            return Err(Error::ShapeMismatch(
                "probabilities must lie in [0, 1]".to_string(),
            ));
        }
        Ok(maps)
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            wt: Array3::zeros(shape),
            tc: Array3::zeros(shape),
            et: Array3::zeros(shape),
        }
    }

    /// Splits a `[3, x, y, z]` array in WT, TC, ET channel order.
    pub fn from_stacked(stacked: Array4<f64>) -> Result<Self> {
        if stacked.shape()[0] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected 3 probability channels, got {}",
                stacked.shape()[0]
            )));
        }
        let mut it = stacked.outer_iter();
        let wt = it.next().unwrap().to_owned();
        let tc = it.next().unwrap().to_owned();
        let et = it.next().unwrap().to_owned();
        Self::new(wt, tc, et)
    }

    pub fn to_stacked(&self) -> Array4<f64> {
        ndarray::stack(Axis(0), &[self.wt.view(), self.tc.view(), self.et.view()])
            .expect("channels share one shape")
    }

    pub fn shape(&self) -> [usize; 3] {
        let (x, y, z) = self.wt.dim();
        [x, y, z]
    }

    pub fn channels(&self) -> [&Array3<f64>; 3] {
        [&self.wt, &self.tc, &self.et]
    }

    pub fn get(&self, region: Subregion) -> &Array3<f64> {
        self.channels()[region.channel()]
    }
}

pub fn labels_to_subregions(labels: &LabelMap) -> SubregionMasks {
    let l = labels.labels();
    SubregionMasks {
        wt: l.mapv(|v| v != BACKGROUND),
        tc: l.mapv(|v| v == NECROSIS || v == ENHANCING),
        et: l.mapv(|v| v == ENHANCING),
        hierarchy_enforced: true,
    }
}

/// Fuses nested masks into a label map with the given geometry.
pub fn subregions_to_labels(masks: &SubregionMasks, geometry: Geometry) -> Result<LabelMap> {
    if !masks.is_nested() {
        return Err(Error::NotNested);
    }
    let mut labels = Array3::zeros(masks.shape());
    Zip::from(&mut labels)
        .and(&masks.wt)
        .and(&masks.tc)
        .and(&masks.et)
        .for_each(|l, &w, &t, &e| {
            *l = if e {
                ENHANCING
            } else if t {
                NECROSIS
            } else if w {
                EDEMA
            } else {
                BACKGROUND
            };
        });
    Ok(LabelMap { labels, geometry })
}

/// Half-open voxel box `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Self {
        Self { lo, hi }
    }

    pub fn full(shape: [usize; 3]) -> Self {
        Self {
            lo: [0; 3],
            hi: shape,
        }
    }

    /// Box of the given extent whose centre is `centre` (rounded down).
    pub fn centred(centre: [usize; 3], extent: [usize; 3]) -> Self {
        let lo = std::array::from_fn(|d| centre[d] - extent[d] / 2);
        let hi = std::array::from_fn(|d| lo[d] + extent[d]);
        Self { lo, hi }
    }

    pub fn extent(&self) -> [usize; 3] {
        std::array::from_fn(|d| self.hi[d].saturating_sub(self.lo[d]))
    }

    pub fn is_empty(&self) -> bool {
        self.extent().contains(&0)
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|d| self.lo[d] <= p[d] && p[d] < self.hi[d])
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        (0..3).all(|d| self.lo[d] <= other.lo[d] && other.hi[d] <= self.hi[d])
    }
}

/// Tight box around the true voxels of `mask`, `None` when it is empty.
pub fn bounding_box(mask: &Array3<bool>) -> Option<BoundingBox> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for ((x, y, z), &m) in mask.indexed_iter() {
        if m {
            any = true;
            for (d, v) in [x, y, z].into_iter().enumerate() {
                lo[d] = lo[d].min(v);
                hi[d] = hi[d].max(v + 1);
            }
        }
    }
    any.then_some(BoundingBox { lo, hi })
}
