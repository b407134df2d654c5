//! BraTS-layout case directories, NIfTI persistence, pipeline configuration
//! and CSV outputs.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{ThresholdPolicy, TtaConfig};
use crate::network::{ModelRole, NetworkConfig};
use crate::objectives::CaseMetrics;
use crate::postprocess::{Connectivity, PostprocessConfig};
use crate::trainer::TrainConfig;
use crate::volumes::{Affine, Geometry, LabelMap, Modality, MultiModalVolume};

/// Environment variable that replaces `output_root` from the config file.
pub const OUTPUT_ENV: &str = "DCUNET_OUTPUT";

fn nifti_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Nifti {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn header_geometry(h: &NiftiHeader) -> Geometry {
    let spacing = [h.pixdim[1], h.pixdim[2], h.pixdim[3]].map(|s| s.abs() as f64);
    let mut affine: Affine = [[0.0; 4]; 4];
    affine[3][3] = 1.0;
    if h.sform_code > 0 {
        for (row, src) in affine.iter_mut().zip([h.srow_x, h.srow_y, h.srow_z]) {
            for (dst, v) in row.iter_mut().zip(src) {
                *dst = v as f64;
            }
        }
    } else if h.qform_code > 0 {
        let (b, c, d) = (h.quatern_b as f64, h.quatern_c as f64, h.quatern_d as f64);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let r = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ];
        let scale = [spacing[0], spacing[1], spacing[2] * qfac];
        for i in 0..3 {
            for j in 0..3 {
                affine[i][j] = r[i][j] * scale[j];
            }
        }
        affine[0][3] = h.quatern_x as f64;
        affine[1][3] = h.quatern_y as f64;
        affine[2][3] = h.quatern_z as f64;
    } else {
        for i in 0..3 {
            affine[i][i] = spacing[i];
        }
    }
    Geometry { spacing, affine }
}

fn geometry_header(geometry: &Geometry) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    h.pixdim = [1.0; 8];
    for i in 0..3 {
        h.pixdim[i + 1] = geometry.spacing[i] as f32;
    }
    h.sform_code = 1;
    h.qform_code = 0;
    let rows: Vec<[f32; 4]> = geometry.affine[..3]
        .iter()
        .map(|r| r.map(|v| v as f32))
        .collect();
    h.srow_x = rows[0];
    h.srow_y = rows[1];
    h.srow_z = rows[2];
    h.xyzt_units = 2; // millimetres
    h
}

/// Reads a 3D NIfTI volume as `f64` (slope and intercept applied).
pub fn read_volume(path: &Path) -> Result<(Array3<f64>, Geometry)> {
    if !path.exists() {
        return Err(Error::MissingModality(path.to_path_buf()));
    }
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| nifti_err(path, e))?;
    let geometry = header_geometry(obj.header());
    let data = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| nifti_err(path, e))?;
    // tolerate trailing singleton dimensions
    let shape: Vec<usize> = data.shape().to_vec();
    if shape.len() < 3 || shape[3..].iter().any(|&d| d != 1) {
        return Err(nifti_err(path, format!("expected a 3D volume, got shape {shape:?}")));
    }
    let data = if shape.len() == 3 {
        data.into_dimensionality::<Ix3>()
    } else {
        data.as_standard_layout()
            .into_owned()
            .into_shape_with_order(ndarray::IxDyn(&shape[..3]))
            .and_then(|a| a.into_dimensionality::<Ix3>())
    }
    .map_err(|e| nifti_err(path, e))?;
    Ok((data, geometry))
}

fn atomic_target(path: &Path) -> Result<tempfile::NamedTempFile> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    // keep the extension so the writer picks the same compression
    let suffix = if name.ends_with(".nii.gz") {
        ".nii.gz"
    } else if name.ends_with(".nii") {
        ".nii"
    } else {
        ""
    };
    Ok(tempfile::Builder::new().prefix(".tmp-").suffix(suffix).tempfile_in(dir)?)
}

fn write_nifti(
    path: &Path,
    geometry: &Geometry,
    write: impl FnOnce(WriterOptions<'_>) -> nifti::Result<()>,
) -> Result<()> {
    let header = geometry_header(geometry);
    let tmp = atomic_target(path)?;
    write(WriterOptions::new(tmp.path()).reference_header(&header)).map_err(|e| nifti_err(path, e))?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Writes a label map as gzip NIfTI-1 with unsigned 8-bit data.
pub fn save_labelmap(labels: &LabelMap, path: &Path) -> Result<()> {
    write_nifti(path, labels.geometry(), |w| w.write_nifti(labels.labels()))
}

pub fn load_labelmap(path: &Path) -> Result<LabelMap> {
    let (data, geometry) = read_volume(path)?;
    let mut labels = Array3::<u8>::zeros(data.raw_dim());
    for ((idx, &v), out) in data.indexed_iter().zip(labels.iter_mut()) {
        if v.fract() != 0.0 || !crate::volumes::is_valid_label(v as i64) {
            return Err(Error::InvalidLabel {
                value: v as i64,
                index: [idx.0, idx.1, idx.2],
            });
        }
        *out = v as u8;
    }
    LabelMap::new(labels, geometry)
}

/// Writes one channel as gzip NIfTI-1 with 32-bit float data.
pub fn save_volume(data: &Array3<f64>, geometry: &Geometry, path: &Path) -> Result<()> {
    write_nifti(path, geometry, |w| w.write_nifti(&data.mapv(|v| v as f32)))
}

pub fn modality_path(dir: &Path, case_id: &str, modality: Modality) -> PathBuf {
    dir.join(format!("{case_id}_{}.nii.gz", modality.file_suffix()))
}

pub fn seg_path(dir: &Path, case_id: &str) -> PathBuf {
    dir.join(format!("{case_id}_seg.nii.gz"))
}

/// A case directory named after its case id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseRecord {
    pub case_id: String,
    pub modalities: [PathBuf; 4],
    pub segmentation: Option<PathBuf>,
}

impl CaseRecord {
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let case_id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| Error::Config(format!("{} has no directory name", dir.display())))?;
        let modalities = Modality::ALL.map(|m| modality_path(dir, &case_id, m));
        if let Some(missing) = modalities.iter().find(|p| !p.exists()) {
            return Err(Error::MissingModality(missing.clone()));
        }
        let seg = seg_path(dir, &case_id);
        Ok(Self {
            case_id,
            modalities,
            segmentation: seg.exists().then_some(seg),
        })
    }
}

#[derive(Debug, Clone)]
pub struct LoadedCase {
    pub case_id: String,
    pub volume: MultiModalVolume,
    pub labels: Option<LabelMap>,
}

pub fn load_case(dir: &Path) -> Result<LoadedCase> {
    let record = CaseRecord::from_dir(dir)?;
    let mut channels = Vec::with_capacity(4);
    let mut reference: Option<Geometry> = None;
    for path in &record.modalities {
        let (data, geometry) = read_volume(path)?;
        if let Some(g) = &reference {
            if *g != geometry || channels.first().map(|c: &Array3<f64>| c.dim()) != Some(data.dim()) {
                return Err(Error::ShapeMismatch(format!(
                    "{} disagrees with the first modality in shape or affine",
                    path.display()
                )));
            }
        } else {
            reference = Some(geometry);
        }
        channels.push(data);
    }
    let geometry = reference.expect("four modalities");
    let channels: [Array3<f64>; 4] = channels.try_into().expect("four modalities");
    let volume = MultiModalVolume::from_channels(channels, geometry)?;
    let labels = match &record.segmentation {
        Some(path) => {
            let labels = load_labelmap(path)?;
            if labels.shape() != volume.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "{} has shape {:?}, volume has {:?}",
                    path.display(),
                    labels.shape(),
                    volume.shape()
                )));
            }
            // segmentations follow the image geometry
            Some(labels.with_geometry(geometry))
        }
        None => None,
    };
    Ok(LoadedCase {
        case_id: record.case_id,
        volume,
        labels,
    })
}

/// Writes the four modalities in BraTS layout under `dir/<case_id>/`.
pub fn save_case(root: &Path, case_id: &str, volume: &MultiModalVolume, labels: Option<&LabelMap>) -> Result<PathBuf> {
    let dir = root.join(case_id);
    fs::create_dir_all(&dir)?;
    for m in Modality::ALL {
        save_volume(&volume.channel(m).to_owned(), volume.geometry(), &modality_path(&dir, case_id, m))?;
    }
    if let Some(labels) = labels {
        save_labelmap(labels, &seg_path(&dir, case_id))?;
    }
    Ok(dir)
}

/// Case directories under `root`, sorted by name.
pub fn list_cases(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Writes `contents` so that `path` only ever holds a complete file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::Builder::new().prefix(".tmp-").tempfile_in(dir)?;
    tmp.write_all(contents)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => "NaN".to_string(),
    }
}

/// Per-case metrics and a trailing MEAN row; undefined HD95 is written as NaN.
pub fn metrics_csv(rows: &[(String, CaseMetrics)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["case_id", "dice_wt", "dice_tc", "dice_et", "hd95_wt", "hd95_tc", "hd95_et"])
        .map_err(csv_err)?;
    let record = |id: &str, m: &CaseMetrics| {
        let mut r = vec![id.to_string()];
        r.extend(m.dice.iter().map(|d| fmt_metric(Some(*d))));
        r.extend(m.hd95.iter().map(|h| fmt_metric(*h)));
        r
    };
    for (id, m) in rows {
        w.write_record(record(id, m)).map_err(csv_err)?;
    }
    let metrics: Vec<CaseMetrics> = rows.iter().map(|(_, m)| m.clone()).collect();
    w.write_record(record("MEAN", &CaseMetrics::mean(&metrics))).map_err(csv_err)?;
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("ascii csv"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    Multitask,
    Cascaded,
    Ensemble,
}

impl std::str::FromStr for Framework {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "multitask" => Ok(Framework::Multitask),
            "cascaded" => Ok(Framework::Cascaded),
            "ensemble" => Ok(Framework::Ensemble),
            other => Err(Error::Config(format!("unknown framework {other:?}"))),
        }
    }
}

/// Every tunable of the pipeline as flat keys. An empty file gives the
/// published training and inference settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub data_root: PathBuf,
    pub output_root: PathBuf,
    pub framework: Framework,

    pub in_channels: usize,
    pub patch_size: [usize; 3],
    pub depth: usize,
    pub base_filters: usize,
    pub groupnorm_groups: usize,
    pub init_seed: u64,

    pub initial_lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub l2_weight: f64,
    pub dropout: f64,
    pub augmentation: bool,
    pub seed: u64,
    pub val_fraction: f64,
    pub record_time: bool,

    pub wt_threshold: f64,
    pub tc_threshold: f64,
    pub et_threshold: f64,
    pub et_fallback_ladder: Vec<f64>,

    pub min_component_voxels: usize,
    pub min_et_voxels: usize,
    pub connectivity: Connectivity,

    pub tta: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let net = NetworkConfig::default();
        let train = TrainConfig::default();
        let policy = ThresholdPolicy::default();
        let post = PostprocessConfig::default();
        Self {
            data_root: PathBuf::from("data"),
            output_root: PathBuf::from("output"),
            framework: Framework::Ensemble,
            in_channels: net.in_channels,
            patch_size: net.patch_size,
            depth: net.depth,
            base_filters: net.base_filters,
            groupnorm_groups: net.groupnorm_groups,
            init_seed: net.init_seed,
            initial_lr: train.initial_lr,
            plateau_factor: train.plateau_factor,
            plateau_patience: train.plateau_patience,
            early_stop_patience: train.early_stop_patience,
            max_epochs: train.max_epochs,
            batch_size: train.batch_size,
            l2_weight: train.l2_weight,
            dropout: train.dropout,
            augmentation: train.augmentation,
            seed: train.seed,
            val_fraction: train.val_fraction,
            record_time: train.record_time,
            wt_threshold: policy.wt_threshold,
            tc_threshold: policy.tc_threshold,
            et_threshold: policy.et_threshold,
            et_fallback_ladder: policy.et_fallback_ladder,
            min_component_voxels: post.min_component_voxels,
            min_et_voxels: post.min_et_voxels,
            connectivity: post.connectivity,
            tta: TtaConfig::default().enabled,
        }
    }
}

impl PipelineConfig {
    pub fn from_yaml(text: &str) -> Result<Self> {
        let config: Self = if text.trim().is_empty() {
            Self::default()
        } else {
            serde_yaml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("config serializes")
    }

    /// Parses the file, then applies the output-root environment override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut config = Self::from_yaml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(out) = std::env::var_os(OUTPUT_ENV) {
            config.output_root = PathBuf::from(out);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.network(ModelRole::Multitask).validate()?;
        self.train().validate()?;
        self.thresholds().validate()?;
        self.postprocess().validate()
    }

    pub fn network(&self, role: ModelRole) -> NetworkConfig {
        NetworkConfig {
            in_channels: self.in_channels,
            out_channels: role.out_channels(),
            patch_size: self.patch_size,
            depth: self.depth,
            base_filters: self.base_filters,
            groupnorm_groups: self.groupnorm_groups,
            dropout_rate: self.dropout,
            weight_decay: self.l2_weight,
            init_seed: self.init_seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            initial_lr: self.initial_lr,
            plateau_factor: self.plateau_factor,
            plateau_patience: self.plateau_patience,
            early_stop_patience: self.early_stop_patience,
            max_epochs: self.max_epochs,
            batch_size: self.batch_size,
            l2_weight: self.l2_weight,
            dropout: self.dropout,
            augmentation: self.augmentation,
            seed: self.seed,
            val_fraction: self.val_fraction,
            record_time: self.record_time,
        }
    }

    pub fn thresholds(&self) -> ThresholdPolicy {
        ThresholdPolicy {
            wt_threshold: self.wt_threshold,
            tc_threshold: self.tc_threshold,
            et_threshold: self.et_threshold,
            et_fallback_ladder: self.et_fallback_ladder.clone(),
        }
    }

    pub fn postprocess(&self) -> PostprocessConfig {
        PostprocessConfig {
            min_component_voxels: self.min_component_voxels,
            min_et_voxels: self.min_et_voxels,
            connectivity: self.connectivity,
        }
    }

    pub fn tta(&self) -> TtaConfig {
        TtaConfig { enabled: self.tta }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::CaseMetrics;
    use ndarray::Array3;

    fn oblique() -> Geometry {
        Geometry {
            spacing: [1.0, 1.5, 2.0],
            affine: [
                [-1.0, 0.0, 0.0, 90.5],
                [0.0, 1.5, 0.0, -126.25],
                [0.0, 0.0, 2.0, -72.0],
                [0.0, 0.0, 0.0, 1.0],
            ],
        }
    }

    fn labels() -> LabelMap {
        let arr = Array3::from_shape_fn((5, 6, 7), |(x, y, z)| [0u8, 1, 2, 4][(x + 2 * y + 3 * z) % 4]);
        LabelMap::new(arr, oblique()).unwrap()
    }

    #[test]
    fn labelmap_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.nii.gz");
        let original = labels();
        save_labelmap(&original, &path).unwrap();
        let loaded = load_labelmap(&path).unwrap();
        assert_eq!(loaded.labels(), original.labels());
        assert_eq!(loaded.geometry(), original.geometry());
        // header: NIfTI-1 single-file magic and uint8 datatype code
        let obj = ReaderOptions::new().read_file(&path).unwrap();
        assert_eq!(&obj.header().magic, b"n+1\0");
        assert_eq!(obj.header().datatype, 2);
        assert_eq!(&obj.header().dim[..4], &[3, 5, 6, 7]);
        let zeros = LabelMap::zeros([3, 3, 3], Geometry::default());
        save_labelmap(&zeros, &path).unwrap();
        assert!(load_labelmap(&path).unwrap().labels().iter().all(|&v| v == 0));
    }

    #[test]
    fn case_round_trip_and_missing_modality() {
        let dir = tempfile::tempdir().unwrap();
        let data = ndarray::Array4::from_shape_fn((4, 5, 6, 7), |(c, x, y, z)| (c * 100 + x * 7 + y * 3 + z) as f64 * 0.5);
        let vol = MultiModalVolume::new(data, oblique()).unwrap();
        let case_dir = save_case(dir.path(), "case_001", &vol, Some(&labels())).unwrap();
        let loaded = load_case(&case_dir).unwrap();
        assert_eq!(loaded.case_id, "case_001");
        assert_eq!(loaded.volume.data(), vol.data());
        assert_eq!(loaded.volume.geometry(), vol.geometry());
        assert_eq!(loaded.labels.unwrap().labels(), labels().labels());
        let t2 = modality_path(&case_dir, "case_001", Modality::T2);
        fs::remove_file(&t2).unwrap();
        match load_case(&case_dir) {
            Err(Error::MissingModality(p)) => assert_eq!(p, t2),
            other => panic!("expected missing modality, got {other:?}"),
        }
    }

    #[test]
    fn label_three_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.nii.gz");
        let mut arr = Array3::<f64>::zeros((3, 3, 3));
        arr[[1, 2, 0]] = 3.0;
        save_volume(&arr, &Geometry::default(), &path).unwrap();
        assert!(matches!(
            load_labelmap(&path),
            Err(Error::InvalidLabel { value: 3, index: [1, 2, 0] })
        ));
    }

    #[test]
    fn config_defaults_round_trip_and_rejection() {
        let empty = PipelineConfig::from_yaml("").unwrap();
        assert_eq!(empty, PipelineConfig::default());
        assert_eq!(empty.initial_lr, 5e-4);
        let custom = PipelineConfig::from_yaml("depth: 3\nbase_filters: 4\ngroupnorm_groups: 2\npatch_size: [32, 32, 32]\nframework: cascaded\n").unwrap();
        assert_eq!(custom.depth, 3);
        assert_eq!(custom.framework, Framework::Cascaded);
        assert_eq!(PipelineConfig::from_yaml(&custom.to_yaml()).unwrap(), custom);
        assert!(PipelineConfig::from_yaml("learning_rate: 0.1\n").is_err());
        assert!(PipelineConfig::from_yaml("base_filters: 12\n").is_err());
    }

    #[test]
    fn metrics_csv_has_mean_row_and_nan() {
        let rows = vec![
            ("a".to_string(), CaseMetrics { dice: [1.0, 0.5, 1.0], hd95: [Some(0.0), Some(2.0), None] }),
            ("b".to_string(), CaseMetrics { dice: [0.5, 0.5, 0.0], hd95: [Some(1.0), Some(4.0), None] }),
        ];
        let text = metrics_csv(&rows).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "case_id,dice_wt,dice_tc,dice_et,hd95_wt,hd95_tc,hd95_et");
        assert!(lines[1].ends_with(",NaN"));
        assert_eq!(lines[3], "MEAN,0.750000,0.500000,0.500000,0.500000,3.000000,NaN");
    }
}
