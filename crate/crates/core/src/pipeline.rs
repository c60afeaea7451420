//! End-to-end orchestration: load and validate a dataset, group and aggregate
//! features, mutually score every subset, build maps, rescore, and write the
//! run artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::anomaly_maps::{
    classify, fuse_maps, idw_interpolate, render_3d_to_pixels, upsample_2d, AnomalyMap, IdwParams, MapError,
    MapSpace,
};
use crate::geometry3d::{build_groups, GeometryError, GroupParams, GroupSet, PointCloud};
use crate::matrix::Matrix;
use crate::msm::{
    build_projection_map, pair_scores, partition_subsets, score_sample, CrossModalAlignment, MsmConfig, MsmError,
    PixelRoute, SampleScores, ScoreSets,
};
use crate::rescon::{combine_features, rescon, RsconError};
use crate::snamd::{aggregate_stack, PatchFeatureStack, SnamdError};
use crate::synth_bench::cloud_feature_stack;
use crate::tensor_io::{
    load_tensor, probe_tensor, validate_dataset, write_tensor, DatasetManifest, OrganizedPointCloud, SampleManifest,
    TensorError, TensorFile, ValidationReport,
};
use crate::Real;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("dataset failed validation with {} issue(s)", .0.entries.len())]
    Validation(ValidationReport),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sample {id}: {message}")]
    Sample { id: String, message: String },
    #[error("missing artifacts: {0}")]
    MissingArtifacts(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Snamd(#[from] SnamdError),
    #[error(transparent)]
    Msm(#[from] MsmError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Rescon(#[from] RsconError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn sample_err(id: &str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Sample {
        id: id.to_string(),
        message: e.to_string(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModalitySelection {
    #[serde(rename = "2d")]
    Image,
    #[serde(rename = "3d")]
    Cloud,
    #[default]
    #[serde(rename = "multimodal")]
    Multimodal,
}

impl ModalitySelection {
    pub fn uses_image(self) -> bool {
        self != ModalitySelection::Cloud
    }

    pub fn uses_cloud(self) -> bool {
        self != ModalitySelection::Image
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalitySelection::Image => "2d",
            ModalitySelection::Cloud => "3d",
            ModalitySelection::Multimodal => "multimodal",
        }
    }
}

impl std::str::FromStr for ModalitySelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "2d" => Ok(Self::Image),
            "3d" => Ok(Self::Cloud),
            "multimodal" => Ok(Self::Multimodal),
            other => Err(format!("unknown modality {other:?} (expected 2d, 3d or multimodal)")),
        }
    }
}

/// Every effective hyperparameter of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub modality: ModalitySelection,
    pub num_groups: usize,
    pub group_size: usize,
    pub k_iter: usize,
    pub curvature_threshold: f64,
    pub degrees: Vec<usize>,
    pub interval_percent: f64,
    pub cae: bool,
    pub rescon_k: usize,
    pub cloud_stages: usize,
    pub idw_power: f64,
    pub idw_k: usize,
    pub idw_epsilon: f64,
    pub subsets: usize,
    pub subset_seed: u64,
    pub png: bool,
    pub cache_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let g = GroupParams::default();
        Self {
            modality: ModalitySelection::Multimodal,
            num_groups: g.num_groups,
            group_size: g.group_size,
            k_iter: g.k_iter,
            curvature_threshold: g.curvature_threshold,
            degrees: vec![1, 3, 5],
            interval_percent: 30.0,
            cae: true,
            rescon_k: 7,
            cloud_stages: 3,
            idw_power: 2.0,
            idw_k: 3,
            idw_epsilon: 1e-12,
            subsets: 1,
            subset_seed: 0,
            png: false,
            cache_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn group_params(&self) -> GroupParams {
        GroupParams {
            num_groups: self.num_groups,
            group_size: self.group_size,
            k_iter: self.k_iter,
            curvature_threshold: self.curvature_threshold,
        }
    }

    pub fn msm(&self) -> MsmConfig {
        MsmConfig {
            interval_percent: self.interval_percent,
            cae_enabled: self.cae,
        }
    }

    pub fn idw(&self) -> IdwParams {
        IdwParams {
            power: self.idw_power,
            k_nn: self.idw_k,
            epsilon: self.idw_epsilon,
        }
    }

    pub fn check(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.interval_percent > 0.0 && self.interval_percent <= 100.0) {
            return bad(format!("interval_percent {} outside (0, 100]", self.interval_percent));
        }
        if self.subsets == 0 {
            return bad("subsets must be at least 1".into());
        }
        if self.cloud_stages == 0 {
            return bad("cloud_stages must be at least 1".into());
        }
        crate::snamd::check_degrees(&self.degrees)?;
        Ok(())
    }
}

/// Point cloud of one sample with its grouping and aggregated descriptors.
#[derive(Clone, Debug)]
pub struct PreparedCloud {
    pub cloud: PointCloud<Real>,
    pub route: Option<PixelRoute>,
    pub groups: GroupSet,
    pub stack: PatchFeatureStack<Real>,
}

#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub id: String,
    pub image_shape: (usize, usize),
    pub image: Option<PatchFeatureStack<Real>>,
    pub cloud: Option<PreparedCloud>,
    pub alignment: Option<CrossModalAlignment<Real>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    #[serde(flatten)]
    pub seconds: BTreeMap<String, f64>,
}

impl StageTimings {
    fn add(&mut self, stage: &str, since: Instant) {
        *self.seconds.entry(stage.to_string()).or_default() += since.elapsed().as_secs_f64();
    }
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub samples: Vec<PreparedSample>,
    pub timings: StageTimings,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.samples.iter().position(|s| s.id == id)
    }
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn stack_tensors(stack: &PatchFeatureStack<Real>) -> Result<Vec<TensorFile>, TensorError> {
    stack
        .stages
        .iter()
        .map(|m| TensorFile::f32(vec![m.rows(), m.cols()], m.as_slice().to_vec()))
        .collect()
}

fn matrix_from_tensor(t: TensorFile, what: &str) -> Result<Matrix<Real>, TensorError> {
    let shape = t.shape().to_vec();
    if shape.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            expected: format!("{what}: M x C"),
            found: shape,
        });
    }
    let data = t.into_f32()?;
    Matrix::from_vec(shape[0], shape[1], data).ok_or(TensorError::ShapeMismatch {
        expected: what.into(),
        found: shape,
    })
}

fn load_cached_stages(dir: &Path, key: &str, stages: usize) -> Option<Vec<Matrix<Real>>> {
    (0..stages)
        .map(|k| {
            let t = load_tensor(dir.join(format!("{key}_s{k}.mt"))).ok()?;
            matrix_from_tensor(t, "cached stage").ok()
        })
        .collect()
}

fn store_cached_stages(dir: &Path, key: &str, stack: &PatchFeatureStack<Real>) -> Result<(), TensorError> {
    for (k, t) in stack_tensors(stack)?.iter().enumerate() {
        write_tensor(dir.join(format!("{key}_s{k}.mt")), t)?;
    }
    Ok(())
}

fn resolve_image_shape(manifest: &DatasetManifest, s: &SampleManifest, grid_side: Option<usize>) -> (usize, usize) {
    if let Some(shape) = s.image_shape.or(s.xyz_map_shape) {
        return shape;
    }
    if let Some(h) = s.mask_path.as_ref().and_then(|p| probe_tensor(manifest.resolve(p)).ok()) {
        if h.shape.len() == 2 {
            return (h.shape[0], h.shape[1]);
        }
    }
    let g = grid_side.unwrap_or(1);
    (g, g)
}

fn prepare_image(
    manifest: &DatasetManifest,
    s: &SampleManifest,
    cfg: &PipelineConfig,
) -> Result<Option<PatchFeatureStack<Real>>, PipelineError> {
    let Some(paths) = s.image_feature_paths.as_ref().filter(|p| !p.is_empty()) else {
        return Ok(None);
    };
    let bytes = paths
        .iter()
        .map(|p| fs::read(manifest.resolve(p)))
        .collect::<Result<Vec<_>, _>>()?;
    let key = cfg.cache_dir.as_ref().map(|_| {
        let degrees = serde_json::to_vec(&cfg.degrees).unwrap_or_default();
        let mut parts: Vec<&[u8]> = vec![b"image", &degrees];
        parts.extend(bytes.iter().map(Vec::as_slice));
        format!("img_{}", sha256_hex(&parts))
    });
    if let (Some(dir), Some(key)) = (&cfg.cache_dir, &key) {
        if let Some(stages) = load_cached_stages(dir, key, paths.len()) {
            return Ok(Some(PatchFeatureStack::image(stages)?));
        }
    }
    let stages = bytes
        .into_iter()
        .map(|b| matrix_from_tensor(TensorFile::read_from(&b[..])?, "image features"))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| sample_err(&s.sample_id, e))?;
    let stack = PatchFeatureStack::image(stages).map_err(|e| sample_err(&s.sample_id, e))?;
    let aggregated = aggregate_stack(&stack, &cfg.degrees)?;
    if let (Some(dir), Some(key)) = (&cfg.cache_dir, &key) {
        store_cached_stages(dir, key, &aggregated)?;
    }
    Ok(Some(aggregated))
}

fn load_cloud(
    s: &SampleManifest,
    image_shape: (usize, usize),
    bytes: &[u8],
) -> Result<(PointCloud<Real>, Option<PixelRoute>), PipelineError> {
    let tensor = TensorFile::read_from(bytes)?;
    let shape = tensor.shape().to_vec();
    if shape.len() == 3 {
        let organized = OrganizedPointCloud::from_tensor(&tensor)?;
        let (cloud, pixels) = organized
            .to_point_cloud::<Real>()
            .ok_or_else(|| sample_err(&s.sample_id, "xyz map has no valid points"))?;
        let route = PixelRoute::Organized {
            height: organized.height,
            width: organized.width,
            pixel_of_point: pixels,
        };
        return Ok((cloud, Some(route)));
    }
    let values = tensor.into_f32()?;
    let points = values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let cloud = PointCloud::new(points).map_err(|e| sample_err(&s.sample_id, e))?;
    let route = s.intrinsics.map(|intrinsics| PixelRoute::Pinhole {
        intrinsics,
        height: image_shape.0,
        width: image_shape.1,
    });
    Ok((cloud, route))
}

fn prepare_cloud(
    manifest: &DatasetManifest,
    s: &SampleManifest,
    cfg: &PipelineConfig,
    image_shape: (usize, usize),
    timings: &mut StageTimings,
) -> Result<Option<PreparedCloud>, PipelineError> {
    let Some(path) = &s.cloud_path else {
        return Ok(None);
    };
    let bytes = fs::read(manifest.resolve(path))?;
    let (cloud, route) = load_cloud(s, image_shape, &bytes)?;
    let key = cfg.cache_dir.as_ref().map(|_| {
        let params = serde_json::to_vec(&(cfg.group_params(), &cfg.degrees, cfg.cloud_stages)).unwrap_or_default();
        format!("cld_{}", sha256_hex(&[b"cloud", &params, &bytes]))
    });
    let t0 = Instant::now();
    let cached_groups = match (&cfg.cache_dir, &key) {
        (Some(dir), Some(key)) => fs::read(dir.join(format!("{key}_groups.json")))
            .ok()
            .and_then(|b| serde_json::from_slice::<GroupSet>(&b).ok()),
        _ => None,
    };
    let groups = match cached_groups {
        Some(g) => g,
        None => {
            let g = build_groups(&cloud, cfg.group_params()).map_err(|e| sample_err(&s.sample_id, e))?;
            if let (Some(dir), Some(key)) = (&cfg.cache_dir, &key) {
                fs::create_dir_all(dir)?;
                fs::write(dir.join(format!("{key}_groups.json")), serde_json::to_vec(&g)?)?;
            }
            g
        }
    };
    timings.add("grouping", t0);
    let t1 = Instant::now();
    let cached = match (&cfg.cache_dir, &key) {
        (Some(dir), Some(key)) => load_cached_stages(dir, key, cfg.cloud_stages),
        _ => None,
    };
    let stack = match cached {
        Some(stages) => PatchFeatureStack::cloud(stages, groups.centers(&cloud), groups.high_curvature_flags())?,
        None => {
            let raw = cloud_feature_stack(&cloud, &groups, cfg.cloud_stages);
            let aggregated = aggregate_stack(&raw, &cfg.degrees).map_err(|e| sample_err(&s.sample_id, e))?;
            if let (Some(dir), Some(key)) = (&cfg.cache_dir, &key) {
                store_cached_stages(dir, key, &aggregated)?;
            }
            aggregated
        }
    };
    timings.add("aggregation", t1);
    Ok(Some(PreparedCloud {
        cloud,
        route,
        groups,
        stack,
    }))
}

/// Validates the dataset, then groups and aggregates every sample.
pub fn prepare(manifest: &DatasetManifest, cfg: &PipelineConfig) -> Result<Prepared, PipelineError> {
    cfg.check()?;
    let report = validate_dataset(manifest);
    if !report.is_ok() {
        return Err(PipelineError::Validation(report));
    }
    let mut timings = StageTimings::default();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for s in &manifest.samples {
        let t = Instant::now();
        let image = if cfg.modality.uses_image() {
            prepare_image(manifest, s, cfg)?
        } else {
            None
        };
        timings.add("aggregation", t);
        let image_shape = resolve_image_shape(manifest, s, image.as_ref().and_then(|i| i.grid_side()));
        let cloud = if cfg.modality.uses_cloud() {
            prepare_cloud(manifest, s, cfg, image_shape, &mut timings)?
        } else {
            None
        };
        if image.is_none() && cloud.is_none() {
            return Err(sample_err(&s.sample_id, format!("no data for modality {}", cfg.modality.name())));
        }
        let t = Instant::now();
        let alignment = match (&image, &cloud) {
            (Some(img), Some(c)) if c.route.is_some() => {
                let side = img.grid_side().expect("image stacks are grids");
                let map = build_projection_map(&c.cloud, c.route.as_ref(), side, &c.groups.centers(&c.cloud))?;
                Some(CrossModalAlignment::from_map(&map))
            }
            _ => None,
        };
        if alignment.is_some() {
            timings.add("grouping", t);
        }
        samples.push(PreparedSample {
            id: s.sample_id.clone(),
            image_shape,
            image,
            cloud,
            alignment,
        });
    }
    check_consistency(&samples)?;
    Ok(Prepared { samples, timings })
}

fn check_consistency(samples: &[PreparedSample]) -> Result<(), PipelineError> {
    let first = &samples[0];
    for s in samples {
        if s.image.is_some() != first.image.is_some() || s.cloud.is_some() != first.cloud.is_some() {
            return Err(sample_err(&s.id, "modalities differ from the first sample"));
        }
        if let (Some(a), Some(b)) = (&s.image, &first.image) {
            if a.channels() != b.channels() || a.num_patches() != b.num_patches() {
                return Err(sample_err(&s.id, "image feature shape differs from the first sample"));
            }
        }
    }
    Ok(())
}

type PairRows = Arc<Vec<Vec<Real>>>;

/// Lazily filled per-ordered-pair score rows, shareable across partitions.
pub struct PairCache {
    n: usize,
    image: Vec<OnceLock<PairRows>>,
    cloud: Vec<OnceLock<PairRows>>,
}

impl PairCache {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            image: (0..n * n).map(|_| OnceLock::new()).collect(),
            cloud: (0..n * n).map(|_| OnceLock::new()).collect(),
        }
    }

    /// Computes every missing `(query, gallery)` pair in parallel.
    pub fn fill(&self, prepared: &Prepared, pairs: &[(usize, usize)]) -> Result<(), PipelineError> {
        pairs.par_iter().try_for_each(|&(i, j)| -> Result<(), PipelineError> {
            let (qi, gj) = (&prepared.samples[i], &prepared.samples[j]);
            let slot = i * self.n + j;
            if let (Some(q), Some(g)) = (&qi.image, &gj.image) {
                if self.image[slot].get().is_none() {
                    let _ = self.image[slot].set(Arc::new(pair_scores(q, g)?));
                }
            }
            if let (Some(q), Some(g)) = (&qi.cloud, &gj.cloud) {
                if self.cloud[slot].get().is_none() {
                    let _ = self.cloud[slot].set(Arc::new(pair_scores(&q.stack, &g.stack)?));
                }
            }
            Ok(())
        })
    }

    fn sets(&self, slots: &[OnceLock<PairRows>], query: usize, gallery: &[usize]) -> Option<ScoreSets<Real>> {
        let rows: Vec<PairRows> = gallery
            .iter()
            .map(|&j| slots[query * self.n + j].get().cloned())
            .collect::<Option<_>>()?;
        let rows: Vec<&[Vec<Real>]> = rows.iter().map(|r| r.as_slice()).collect();
        ScoreSets::from_gallery_rows(gallery.to_vec(), &rows).ok()
    }
}

#[derive(Clone, Debug)]
pub struct SampleResult {
    pub index: usize,
    pub id: String,
    pub subset: usize,
    pub scores: SampleScores<Real>,
    pub map: AnomalyMap<Real>,
    pub c: Real,
    pub c_hat: Real,
}

/// RsCon audit record with sample ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RsconEntry {
    pub sample_id: String,
    pub subset: usize,
    pub c: f64,
    pub c_hat: f64,
    pub neighbors: Vec<String>,
    pub weights: Vec<f64>,
    pub isolated: bool,
}

#[derive(Clone, Debug)]
pub struct PartitionResult {
    /// Scored samples in dataset order.
    pub samples: Vec<SampleResult>,
    pub rescon: Vec<RsconEntry>,
    pub timings: StageTimings,
    pub cae_applied: bool,
}

fn sample_maps(s: &PreparedSample, scores: &SampleScores<Real>, cfg: &PipelineConfig) -> Result<AnomalyMap<Real>, PipelineError> {
    let (h, w) = s.image_shape;
    let image_map = match (&s.image, &scores.image) {
        (Some(stack), Some(patch)) => Some(upsample_2d(patch, stack.grid_side().expect("grid"), h, w)?),
        _ => None,
    };
    let cloud_map = match (&s.cloud, &scores.cloud) {
        (Some(c), Some(group)) => {
            let centers = c.groups.centers(&c.cloud);
            let per_point = idw_interpolate(&centers, group, c.cloud.points(), cfg.idw())?;
            Some(match &c.route {
                Some(route) => render_3d_to_pixels(&per_point, c.cloud.points(), Some(route))?,
                None => AnomalyMap::new(MapSpace::Point { count: per_point.len() }, per_point)?,
            })
        }
        _ => None,
    };
    Ok(match (image_map, cloud_map) {
        (Some(a), Some(b)) if a.space() == b.space() => fuse_maps(&a, &b)?,
        (Some(a), _) => a,
        (None, Some(b)) => b,
        (None, None) => unreachable!("prepared samples carry at least one modality"),
    })
}

fn salient(s: &PreparedSample, scores: &SampleScores<Real>) -> Result<Vec<Real>, PipelineError> {
    let mut parts = Vec::new();
    if let (Some(stack), Some(patch)) = (&s.image, &scores.image) {
        parts.push(crate::rescon::salient_feature(stack, patch)?);
    }
    if let (Some(c), Some(group)) = (&s.cloud, &scores.cloud) {
        parts.push(crate::rescon::salient_feature(&c.stack, group)?);
    }
    Ok(combine_features(&parts))
}

/// Scores each subset against itself (gallery = subset minus the query),
/// builds maps and rescores per subset.
pub fn score_partition(
    prepared: &Prepared,
    subsets: &[Vec<usize>],
    cfg: &PipelineConfig,
    cache: &PairCache,
) -> Result<PartitionResult, PipelineError> {
    cfg.check()?;
    let mut timings = StageTimings::default();
    if let Some(small) = subsets.iter().find(|s| s.len() < 2) {
        return Err(PipelineError::Config(format!(
            "every subset needs at least 2 samples, got {}",
            small.len()
        )));
    }
    let t = Instant::now();
    let jobs: Vec<(usize, usize)> = subsets
        .iter()
        .enumerate()
        .flat_map(|(k, s)| s.iter().map(move |&i| (k, i)))
        .collect();
    let pairs: Vec<(usize, usize)> = subsets
        .iter()
        .flat_map(|s| s.iter().flat_map(move |&i| s.iter().filter(move |&&j| j != i).map(move |&j| (i, j))))
        .collect();
    cache.fill(prepared, &pairs)?;
    let msm = cfg.msm();
    let scored: Vec<SampleScores<Real>> = jobs
        .par_iter()
        .map(|&(k, i)| {
            let gallery: Vec<usize> = subsets[k].iter().copied().filter(|&j| j != i).collect();
            let s = &prepared.samples[i];
            let image = s.image.as_ref().and_then(|_| cache.sets(&cache.image, i, &gallery));
            let cloud = s.cloud.as_ref().and_then(|_| cache.sets(&cache.cloud, i, &gallery));
            score_sample(image.as_ref(), cloud.as_ref(), s.alignment.as_ref(), &msm).map_err(|e| sample_err(&s.id, e))
        })
        .collect::<Result<_, _>>()?;
    timings.add("scoring", t);

    let t = Instant::now();
    let maps: Vec<AnomalyMap<Real>> = jobs
        .par_iter()
        .zip(&scored)
        .map(|(&(_, i), sc)| sample_maps(&prepared.samples[i], sc, cfg))
        .collect::<Result<_, _>>()?;
    timings.add("maps", t);

    let t = Instant::now();
    let c: Vec<Real> = maps.iter().map(classify).collect::<Result<_, _>>()?;
    let mut c_hat = c.clone();
    let mut rescon_entries = Vec::new();
    let mut offset = 0;
    for (k, subset) in subsets.iter().enumerate() {
        let range = offset..offset + subset.len();
        offset += subset.len();
        let feats: Vec<Vec<Real>> = range
            .clone()
            .map(|q| salient(&prepared.samples[jobs[q].1], &scored[q]))
            .collect::<Result<_, _>>()?;
        let features = Matrix::from_rows(&feats).ok_or_else(|| PipelineError::Config("salient features differ in length".into()))?;
        let out = rescon(&features, &c[range.clone()], cfg.rescon_k.min(subset.len() - 1))?;
        for (local, rec) in out.records.iter().enumerate() {
            c_hat[range.start + local] = out.scores[local];
            rescon_entries.push(RsconEntry {
                sample_id: prepared.samples[subset[local]].id.clone(),
                subset: k,
                c: rec.c,
                c_hat: rec.c_hat,
                neighbors: rec.neighbors.iter().map(|&j| prepared.samples[subset[j]].id.clone()).collect(),
                weights: rec.weights.clone(),
                isolated: rec.isolated,
            });
        }
    }
    timings.add("rescon", t);

    let cae_applied = cfg.cae && prepared.samples.iter().any(|s| s.alignment.is_some());
    let mut samples: Vec<SampleResult> = jobs
        .iter()
        .zip(scored)
        .zip(maps)
        .enumerate()
        .map(|(q, ((&(k, i), scores), map))| SampleResult {
            index: i,
            id: prepared.samples[i].id.clone(),
            subset: k,
            scores,
            map,
            c: c[q],
            c_hat: c_hat[q],
        })
        .collect();
    samples.sort_by_key(|s| s.index);
    Ok(PartitionResult {
        samples,
        rescon: rescon_entries,
        timings,
        cae_applied,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScoreRecord {
    pub sample_id: String,
    pub subset: usize,
    pub c: f64,
    pub c_hat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoresFile {
    pub samples: Vec<SampleScoreRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dataset: String,
    pub dataset_path: PathBuf,
    pub num_samples: usize,
    pub modality: String,
    pub stages: Vec<String>,
    pub timings: StageTimings,
    pub config: PipelineConfig,
    pub workers: usize,
    pub subsets: Vec<Vec<String>>,
    pub cae_applied: bool,
    pub isolated_samples: Vec<String>,
}

pub const MAPS_DIR: &str = "maps";
pub const PLOTS_DIR: &str = "plots";

/// Runs the whole pipeline on `dataset` with a pool of `workers` threads and
/// writes artifacts under `out_dir`.
pub fn run(dataset: &Path, cfg: &PipelineConfig, out_dir: &Path, workers: usize) -> Result<RunSummary, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    pool.install(|| run_inner(dataset, cfg, out_dir, workers.max(1)))
}

fn run_inner(dataset: &Path, cfg: &PipelineConfig, out_dir: &Path, workers: usize) -> Result<RunSummary, PipelineError> {
    let manifest = DatasetManifest::load(dataset)?;
    let prepared = prepare(&manifest, cfg)?;
    let subsets = partition_subsets(prepared.len(), cfg.subsets, cfg.subset_seed)?;
    let cache = PairCache::new(prepared.len());
    let result = score_partition(&prepared, &subsets, cfg, &cache)?;
    write_artifacts(out_dir, &result, cfg)?;

    let mut timings = prepared.timings.clone();
    for (k, v) in &result.timings.seconds {
        *timings.seconds.entry(k.clone()).or_default() += v;
    }
    let order = ["grouping", "aggregation", "scoring", "maps", "rescon"];
    let stages = order
        .iter()
        .filter(|s| timings.seconds.contains_key(**s))
        .map(|s| s.to_string())
        .collect();
    let summary = RunSummary {
        dataset: manifest.name.clone(),
        dataset_path: dataset.to_path_buf(),
        num_samples: prepared.len(),
        modality: cfg.modality.name().to_string(),
        stages,
        timings,
        config: cfg.clone(),
        workers,
        subsets: subsets
            .iter()
            .map(|s| s.iter().map(|&i| prepared.samples[i].id.clone()).collect())
            .collect(),
        cae_applied: result.cae_applied,
        isolated_samples: result
            .rescon
            .iter()
            .filter(|r| r.isolated)
            .map(|r| r.sample_id.clone())
            .collect(),
    };
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

pub fn write_artifacts(out_dir: &Path, result: &PartitionResult, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let maps_dir = out_dir.join(MAPS_DIR);
    fs::create_dir_all(&maps_dir)?;
    for s in &result.samples {
        write_tensor(maps_dir.join(format!("{}.mt", s.id)), &s.map.to_tensor()?)?;
        if cfg.png {
            if let MapSpace::Pixel { height, width } = s.map.space() {
                let values: Vec<f32> = s.map.values().to_vec();
                let img = crate::report::heatmap_png(&values, height, width, crate::report::Colormap::Turbo, None);
                let dir = out_dir.join(PLOTS_DIR);
                fs::create_dir_all(&dir)?;
                img.save(dir.join(format!("{}.png", s.id)))
                    .map_err(|e| PipelineError::Io(std::io::Error::other(e)))?;
            }
        }
    }
    let scores = ScoresFile {
        samples: result
            .samples
            .iter()
            .map(|s| SampleScoreRecord {
                sample_id: s.id.clone(),
                subset: s.subset,
                c: s.c as f64,
                c_hat: s.c_hat as f64,
            })
            .collect(),
    };
    fs::write(out_dir.join("scores.json"), serde_json::to_string_pretty(&scores)?)?;
    fs::write(out_dir.join("rescon.json"), serde_json::to_string_pretty(&result.rescon)?)?;
    Ok(())
}
