//! `.mt` tensor container, dataset manifests and dataset validation.
//!
//! Layout of a `.mt` file:
//!
//! ```text
//! b"MUSCTENS"                      8 bytes
//! header_len: u64 little-endian    8 bytes
//! header: UTF-8 JSON               header_len bytes, {"dtype":"f32","shape":[..]}
//! payload                          row-major, little-endian values
//! ```

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry3d::PointCloud;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"MUSCTENS";

/// Upper bound on the JSON header, guards against reading garbage lengths.
const MAX_HEADER_LEN: u64 = 1 << 20;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("missing MUSCTENS magic header")]
    MagicMismatch,
    #[error("malformed tensor header: {0}")]
    Header(String),
    #[error("shape declares {declared} values but payload holds {found}")]
    ShapeOverflow { declared: String, found: usize },
    #[error("non-finite value at flat index {index}")]
    NonFiniteValue { index: usize },
    #[error("shape mismatch: expected {expected}, found {found:?}")]
    ShapeMismatch { expected: String, found: Vec<usize> },
    #[error("dtype mismatch: expected {expected:?}, found {found:?}")]
    DTypeMismatch { expected: DType, found: DType },
    #[error("manifest error: {0}")]
    Manifest(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl TensorHeader {
    /// Number of values, `None` on overflow.
    pub fn numel(&self) -> Option<usize> {
        self.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
        }
    }
}

/// A typed, shaped, row-major tensor as stored in a `.mt` file.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    shape: Vec<usize>,
    data: TensorData,
}

impl TensorFile {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        let header = TensorHeader {
            dtype: data.dtype(),
            shape,
        };
        check_numel(&header, data.len())?;
        Ok(Self {
            shape: header.shape,
            data,
        })
    }

    pub fn f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::F32(values))
    }

    pub fn u8(shape: Vec<usize>, values: Vec<u8>) -> Result<Self, TensorError> {
        Self::new(shape, TensorData::U8(values))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn header(&self) -> TensorHeader {
        TensorHeader {
            dtype: self.dtype(),
            shape: self.shape.clone(),
        }
    }

    pub fn as_f32(&self) -> Result<&[f32], TensorError> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U8(_) => Err(TensorError::DTypeMismatch {
                expected: DType::F32,
                found: DType::U8,
            }),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8], TensorError> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            TensorData::F32(_) => Err(TensorError::DTypeMismatch {
                expected: DType::U8,
                found: DType::F32,
            }),
        }
    }

    pub fn into_f32(self) -> Result<Vec<f32>, TensorError> {
        match self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U8(_) => Err(TensorError::DTypeMismatch {
                expected: DType::F32,
                found: DType::U8,
            }),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), TensorError> {
        let header = serde_json::to_vec(&self.header())
            .map_err(|e| TensorError::Header(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        match &self.data {
            TensorData::F32(v) => {
                let mut buf = Vec::with_capacity(v.len() * 4);
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
            TensorData::U8(v) => w.write_all(v)?,
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, TensorError> {
        let header = read_header(&mut r)?;
        let numel = header.numel().ok_or_else(|| TensorError::ShapeOverflow {
            declared: format!("{:?} (overflows)", header.shape),
            found: 0,
        })?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let size = header.dtype.size();
        if payload.len() % size != 0 || payload.len() / size != numel {
            return Err(TensorError::ShapeOverflow {
                declared: numel.to_string(),
                found: payload.len() / size,
            });
        }
        let data = match header.dtype {
            DType::U8 => TensorData::U8(payload),
            DType::F32 => {
                let values: Vec<f32> = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                if let Some(index) = values.iter().position(|v| !v.is_finite()) {
                    return Err(TensorError::NonFiniteValue { index });
                }
                TensorData::F32(values)
            }
        };
        Ok(Self {
            shape: header.shape,
            data,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to Vec cannot fail");
        out
    }
}

fn check_numel(header: &TensorHeader, found: usize) -> Result<(), TensorError> {
    match header.numel() {
        Some(n) if n == found => Ok(()),
        Some(n) => Err(TensorError::ShapeOverflow {
            declared: n.to_string(),
            found,
        }),
        None => Err(TensorError::ShapeOverflow {
            declared: format!("{:?} (overflows)", header.shape),
            found,
        }),
    }
}

fn read_header<R: Read>(r: &mut R) -> Result<TensorHeader, TensorError> {
    read_header_with_len(r).map(|(h, _)| h)
}

fn read_header_with_len<R: Read>(r: &mut R) -> Result<(TensorHeader, u64), TensorError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => TensorError::MagicMismatch,
        _ => TensorError::Io(e),
    })?;
    if &magic != MAGIC {
        return Err(TensorError::MagicMismatch);
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER_LEN {
        return Err(TensorError::Header(format!("header length {len} too large")));
    }
    let mut header = vec![0u8; len as usize];
    r.read_exact(&mut header)?;
    let header = serde_json::from_slice(&header).map_err(|e| TensorError::Header(e.to_string()))?;
    Ok((header, len))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<TensorFile, TensorError> {
    TensorFile::read_from(BufReader::new(File::open(path)?))
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &TensorFile) -> Result<(), TensorError> {
    if let Some(parent) = path.as_ref().parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    tensor.write_to(BufWriter::new(File::create(path)?))
}

/// Reads only the header and checks the file length against it.
pub fn probe_tensor(path: impl AsRef<Path>) -> Result<TensorHeader, TensorError> {
    let file = File::open(path.as_ref())?;
    let total = file.metadata()?.len();
    let mut r = BufReader::new(file);
    let (header, header_len) = read_header_with_len(&mut r)?;
    let numel = header.numel().ok_or_else(|| TensorError::ShapeOverflow {
        declared: format!("{:?} (overflows)", header.shape),
        found: 0,
    })?;
    let payload = total.saturating_sub(16 + header_len) as usize;
    let size = header.dtype.size();
    if payload % size != 0 || payload / size != numel {
        return Err(TensorError::ShapeOverflow {
            declared: numel.to_string(),
            found: payload / size,
        });
    }
    Ok(header)
}

/// Organized (image-aligned) point cloud; `(0,0,0)` pixels are invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct OrganizedPointCloud {
    pub height: usize,
    pub width: usize,
    pub points: Vec<[f32; 3]>,
    pub valid_mask: Vec<bool>,
}

impl OrganizedPointCloud {
    pub fn from_tensor(tensor: &TensorFile) -> Result<Self, TensorError> {
        let shape = tensor.shape();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(TensorError::ShapeMismatch {
                expected: "H x W x 3".into(),
                found: shape.to_vec(),
            });
        }
        let values = tensor.as_f32()?;
        let points: Vec<[f32; 3]> = values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let valid_mask = points.iter().map(|p| *p != [0.0, 0.0, 0.0]).collect();
        Ok(Self {
            height: shape[0],
            width: shape[1],
            points,
            valid_mask,
        })
    }

    pub fn valid_count(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }

    /// True when no valid point survived; such clouds are accepted but flagged.
    pub fn is_empty(&self) -> bool {
        self.valid_count() == 0
    }

    /// Valid points in pixel row-major order together with their flat pixel index.
    pub fn to_point_cloud<T: Scalar>(&self) -> Option<(PointCloud<T>, Vec<usize>)> {
        let mut pts = Vec::new();
        let mut pixels = Vec::new();
        for (i, (p, &ok)) in self.points.iter().zip(&self.valid_mask).enumerate() {
            if ok {
                pts.push([T::lit(p[0] as f64), T::lit(p[1] as f64), T::lit(p[2] as f64)]);
                pixels.push(i);
            }
        }
        PointCloud::new(pts).ok().map(|c| (c, pixels))
    }
}

/// Loads an organized XYZ map; `shape`, when given, must match `(H, W)`.
pub fn load_xyz_map(
    path: impl AsRef<Path>,
    shape: Option<(usize, usize)>,
) -> Result<OrganizedPointCloud, TensorError> {
    let tensor = load_tensor(path.as_ref())?;
    let cloud = OrganizedPointCloud::from_tensor(&tensor)?;
    if let Some((h, w)) = shape {
        if (cloud.height, cloud.width) != (h, w) {
            return Err(TensorError::ShapeMismatch {
                expected: format!("{h} x {w} x 3"),
                found: tensor.shape().to_vec(),
            });
        }
    }
    if cloud.is_empty() {
        log::warn!("xyz map {} has no valid points", path.as_ref().display());
    }
    Ok(cloud)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
    #[default]
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_feature_paths: Option<Vec<PathBuf>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xyz_map_shape: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<Intrinsics>,
    /// Pixel resolution of the source image; falls back to the mask or xyz map shape.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_shape: Option<(usize, usize)>,
    #[serde(default)]
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
}

impl SampleManifest {
    pub fn has_image(&self) -> bool {
        self.image_feature_paths.as_ref().is_some_and(|p| !p.is_empty())
    }

    pub fn has_cloud(&self) -> bool {
        self.cloud_path.is_some()
    }

    pub fn has_alignment(&self) -> bool {
        self.xyz_map_shape.is_some() || self.intrinsics.is_some()
    }
}

/// `dataset.json`: a list of samples, paths relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default)]
    pub name: String,
    pub samples: Vec<SampleManifest>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    /// Accepts either the `dataset.json` path or the directory holding it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TensorError> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path.push("dataset.json");
        }
        let text = fs::read_to_string(&path)?;
        let mut manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| TensorError::Manifest(e.to_string()))?;
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TensorError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| TensorError::Manifest(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    EmptyDataset,
    DuplicateId,
    NoModality,
    NoAlignmentRoute,
    MissingPath,
    Unreadable,
    StageCountMismatch,
    FeatureDimMismatch,
    PatchCountMismatch,
    NotSquareGrid,
    ShapeMismatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationEntry {
    pub sample_id: String,
    pub kind: IssueKind,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub entries: Vec<ValidationEntry>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has(&self, kind: IssueKind) -> bool {
        self.entries.iter().any(|e| e.kind == kind)
    }

    fn push(&mut self, sample_id: &str, kind: IssueKind, message: impl Into<String>) {
        self.entries.push(ValidationEntry {
            sample_id: sample_id.to_string(),
            kind,
            message: message.into(),
        });
    }
}

/// Checks every sample and reports all defects; never aborts.
///
/// Image features must agree across samples on stage count and per-stage channel
/// count, and each sample's stages must share a square patch count.
pub fn validate_dataset(manifest: &DatasetManifest) -> ValidationReport {
    let mut report = ValidationReport::default();
    if manifest.samples.is_empty() {
        report.push("", IssueKind::EmptyDataset, "dataset lists no samples");
        return report;
    }
    let mut seen = HashSet::new();
    // (stage count, per-stage channels) of the first sample with image features
    let mut reference: Option<(String, Vec<usize>)> = None;

    for s in &manifest.samples {
        let id = s.sample_id.as_str();
        if !seen.insert(id) {
            report.push(id, IssueKind::DuplicateId, "sample id appears more than once");
        }
        if !s.has_image() && !s.has_cloud() {
            report.push(id, IssueKind::NoModality, "neither image features nor cloud present");
        }
        if s.has_image() && s.has_cloud() && !s.has_alignment() {
            report.push(
                id,
                IssueKind::NoAlignmentRoute,
                "both modalities present but no xyz_map_shape or intrinsics",
            );
        }

        if let Some(paths) = s.image_feature_paths.as_ref().filter(|p| !p.is_empty()) {
            let mut channels = Vec::with_capacity(paths.len());
            let mut patch_count = None;
            let mut readable = true;
            for p in paths {
                match probe_checked(manifest, p, id, &mut report) {
                    Some(h) if h.shape.len() == 2 && h.dtype == DType::F32 => {
                        channels.push(h.shape[1]);
                        match patch_count {
                            None => patch_count = Some(h.shape[0]),
                            Some(m) if m != h.shape[0] => report.push(
                                id,
                                IssueKind::PatchCountMismatch,
                                format!("{}: {} patches, earlier stage has {m}", p.display(), h.shape[0]),
                            ),
                            _ => {}
                        }
                    }
                    Some(h) => {
                        readable = false;
                        report.push(
                            id,
                            IssueKind::ShapeMismatch,
                            format!("{}: expected f32 M x C, found {:?} {:?}", p.display(), h.dtype, h.shape),
                        );
                    }
                    None => readable = false,
                }
            }
            if let Some(m) = patch_count {
                let side = (m as f64).sqrt().round() as usize;
                if side * side != m {
                    report.push(id, IssueKind::NotSquareGrid, format!("{m} patches is not a square grid"));
                }
            }
            if readable {
                match &reference {
                    None => reference = Some((id.to_string(), channels)),
                    Some((ref_id, ref_ch)) => {
                        if ref_ch.len() != channels.len() {
                            report.push(
                                id,
                                IssueKind::StageCountMismatch,
                                format!("{} image stages, sample {ref_id} has {}", channels.len(), ref_ch.len()),
                            );
                        } else if *ref_ch != channels {
                            report.push(
                                id,
                                IssueKind::FeatureDimMismatch,
                                format!("per-stage channels {channels:?}, sample {ref_id} has {ref_ch:?}"),
                            );
                        }
                    }
                }
            }
        }

        if let Some(p) = &s.cloud_path {
            if let Some(h) = probe_checked(manifest, p, id, &mut report) {
                let organized = h.shape.len() == 3 && h.shape[2] == 3;
                let flat = h.shape.len() == 2 && h.shape[1] == 3;
                if h.dtype != DType::F32 || !(organized || flat) {
                    report.push(
                        id,
                        IssueKind::ShapeMismatch,
                        format!("cloud must be f32 H x W x 3 or M x 3, found {:?}", h.shape),
                    );
                } else if let Some((eh, ew)) = s.xyz_map_shape {
                    if !organized || (h.shape[0], h.shape[1]) != (eh, ew) {
                        report.push(
                            id,
                            IssueKind::ShapeMismatch,
                            format!("xyz_map_shape ({eh}, {ew}) disagrees with cloud {:?}", h.shape),
                        );
                    }
                }
                if flat && s.has_image() && s.intrinsics.is_none() {
                    report.push(
                        id,
                        IssueKind::NoAlignmentRoute,
                        "unorganized cloud with image features needs intrinsics",
                    );
                }
            }
        }

        if let Some(p) = &s.mask_path {
            if let Some(h) = probe_checked(manifest, p, id, &mut report) {
                if h.dtype != DType::U8 || h.shape.len() != 2 {
                    report.push(id, IssueKind::ShapeMismatch, format!("mask must be u8 H x W, found {:?}", h.shape));
                } else {
                    let expected = s.image_shape.or(s.xyz_map_shape);
                    if let Some((eh, ew)) = expected {
                        if (h.shape[0], h.shape[1]) != (eh, ew) {
                            report.push(
                                id,
                                IssueKind::ShapeMismatch,
                                format!("mask {:?} disagrees with image shape ({eh}, {ew})", h.shape),
                            );
                        }
                    }
                }
            }
        }
    }
    report
}

fn probe_checked(
    manifest: &DatasetManifest,
    p: &Path,
    id: &str,
    report: &mut ValidationReport,
) -> Option<TensorHeader> {
    let full = manifest.resolve(p);
    if !full.exists() {
        report.push(id, IssueKind::MissingPath, format!("missing file {}", full.display()));
        return None;
    }
    match probe_tensor(&full) {
        Ok(h) => Some(h),
        Err(e) => {
            report.push(id, IssueKind::Unreadable, format!("{}: {e}", full.display()));
            None
        }
    }
}
