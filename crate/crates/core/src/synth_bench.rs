//! Synthetic multimodal benchmark: prototype-based patch features with planted
//! outliers, organized point clouds with matching bumps, a simple geometric
//! group descriptor, and brute-force reference implementations.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry3d::{GroupSet, PointCloud};
use crate::matrix::Matrix;
use crate::rescon::WindowMask;
use crate::scalar::Scalar;
use crate::snamd::PatchFeatureStack;
use crate::tensor_io::{write_tensor, DatasetManifest, Label, SampleManifest, TensorError, TensorFile};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_samples: usize,
    pub grid_side: usize,
    pub pixels_per_patch: usize,
    pub channels: usize,
    pub stages: usize,
    pub prototypes: usize,
    pub noise_sigma: f64,
    /// Fraction of samples that carry an anomaly.
    pub anomaly_rate: f64,
    pub anomaly_magnitude: f64,
    /// Height of the box raised on every cloud, in plane units.
    pub box_height: f64,
    pub bump_amplitude: f64,
    pub depth_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_samples: 40,
            grid_side: 28,
            pixels_per_patch: 4,
            channels: 8,
            stages: 3,
            prototypes: 4,
            noise_sigma: 0.05,
            anomaly_rate: 0.05,
            anomaly_magnitude: 1.0,
            box_height: 0.03,
            bump_amplitude: 0.03,
            depth_noise: 3e-4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn image_side(&self) -> usize {
        self.grid_side * self.pixels_per_patch
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.into()));
        if self.num_samples == 0 || self.grid_side < 3 || self.pixels_per_patch == 0 {
            return bad("need samples, grid_side >= 3 and pixels_per_patch >= 1");
        }
        if self.channels < 2 || self.stages == 0 || self.prototypes == 0 {
            return bad("need channels >= 2, stages >= 1, prototypes >= 1");
        }
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return bad("anomaly_rate must lie in [0, 1]");
        }
        if !(self.noise_sigma >= 0.0) || !(self.anomaly_magnitude > 3.0 * self.noise_sigma) {
            return bad("anomaly_magnitude must exceed 3x noise_sigma");
        }
        if !(self.depth_noise >= 0.0 && self.bump_amplitude >= 0.0 && self.box_height >= 0.0) {
            return bad("cloud amplitudes must be non-negative");
        }
        Ok(())
    }

    /// Seeded number of anomalous samples: `round(rate * N)`, at least one
    /// whenever the rate is positive.
    pub fn anomalous_count(&self) -> usize {
        if self.anomaly_rate <= 0.0 {
            return 0;
        }
        ((self.anomaly_rate * self.num_samples as f64).round() as usize).clamp(1, self.num_samples)
    }
}

/// Patch rectangle `(row, col, height, width)` in grid units.
pub type PatchRect = [usize; 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleTruth {
    pub sample_id: String,
    pub anomalous: bool,
    pub region: Option<PatchRect>,
    pub anomalous_patches: Vec<usize>,
    pub mask_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub anomalous_count: usize,
    pub samples: Vec<SampleTruth>,
}

impl GroundTruth {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path.push("ground_truth.json");
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// One generated sample held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub stages: Vec<Matrix<f64>>,
    /// Organized `H x W` map, row-major.
    pub xyz: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
    pub region: Option<PatchRect>,
}

/// Per-stage prototypes: unit vectors spanning the first half of the channels.
pub fn prototypes(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<f64>>> {
    let half = config.channels / 2;
    (0..config.stages)
        .map(|_| {
            (0..config.prototypes)
                .map(|_| {
                    let mut v = vec![0.0; config.channels];
                    for x in v.iter_mut().take(half) {
                        *x = rng.sample(StandardNormal);
                    }
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    v.iter_mut().for_each(|x| *x /= n);
                    v
                })
                .collect()
        })
        .collect()
}

/// Unit vector in the channels outside the prototype subspace.
fn outlier_direction(channels: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let half = channels / 2;
    let mut u = vec![0.0; channels];
    for x in u.iter_mut().skip(half) {
        *x = rng.sample(StandardNormal);
    }
    let n = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    u.iter_mut().for_each(|x| *x /= n);
    u
}

/// Normal patch: prototype plus isotropic noise.
pub fn normal_patch(proto: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    proto
        .iter()
        .map(|&p| p + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Planted patch: prototype, noise inside the prototype subspace, and a
/// `magnitude` step along `direction` (orthogonal to every prototype).
pub fn anomalous_patch(proto: &[f64], direction: &[f64], magnitude: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let half = proto.len() / 2;
    proto
        .iter()
        .zip(direction)
        .enumerate()
        .map(|(c, (&p, &u))| {
            let noise = if c < half {
                sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            p + noise + magnitude * u
        })
        .collect()
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates sample `index`; `anomalous` decides whether a region is planted.
pub fn generate_sample(
    config: &SynthConfig,
    protos: &[Vec<Vec<f64>>],
    index: usize,
    anomalous: bool,
) -> SynthSample {
    let mut rng = sample_rng(config.seed, index as u64 + 1);
    let g = config.grid_side;
    let region = anomalous.then(|| {
        let h = rng.random_range(1..=3usize.min(g));
        let w = rng.random_range(1..=3usize.min(g));
        [rng.random_range(0..=g - h), rng.random_range(0..=g - w), h, w]
    });
    let in_region = |m: usize| {
        region.is_some_and(|[r0, c0, h, w]| {
            let (r, c) = (m / g, m % g);
            r >= r0 && r < r0 + h && c >= c0 && c < c0 + w
        })
    };
    let stages = protos
        .iter()
        .map(|stage_protos| {
            let direction = outlier_direction(config.channels, &mut rng);
            let rows: Vec<Vec<f64>> = (0..g * g)
                .map(|m| {
                    let proto = &stage_protos[rng.random_range(0..stage_protos.len())];
                    if in_region(m) {
                        anomalous_patch(proto, &direction, config.anomaly_magnitude, config.noise_sigma, &mut rng)
                    } else {
                        normal_patch(proto, config.noise_sigma, &mut rng)
                    }
                })
                .collect();
            Matrix::from_rows(&rows).expect("uniform rows")
        })
        .collect();

    let side = config.image_side();
    let pp = config.pixels_per_patch;
    let mask: Vec<bool> = (0..side * side)
        .map(|px| in_region((px / side / pp) * g + (px % side) / pp))
        .collect();
    let spacing = 1.0 / side as f64;
    let tilt = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)];
    let (box_r, box_c) = ((side / 4, side / 2), (side / 2, 3 * side / 4));
    let xyz = (0..side * side)
        .map(|px| {
            let (r, c) = (px / side, px % side);
            let x = (c as f64 - side as f64 / 2.0) * spacing;
            let y = (r as f64 - side as f64 / 2.0) * spacing;
            let mut z = 1.0 + tilt[0] * x + tilt[1] * y + config.depth_noise * rng.sample::<f64, _>(StandardNormal);
            if (box_r.0..box_r.1).contains(&r) && (box_c.0..box_c.1).contains(&c) {
                z += config.box_height;
            }
            if let Some([r0, c0, h, w]) = region {
                let (pr0, pc0, ph, pw) = (r0 * pp, c0 * pp, h * pp, w * pp);
                if (pr0..pr0 + ph).contains(&r) && (pc0..pc0 + pw).contains(&c) {
                    let u = PI * ((r - pr0) as f64 + 0.5) / ph as f64;
                    let v = PI * ((c - pc0) as f64 + 0.5) / pw as f64;
                    z += config.bump_amplitude * u.sin().powi(2) * v.sin().powi(2);
                }
            }
            [x, y, z]
        })
        .collect();
    SynthSample {
        stages,
        xyz,
        mask,
        region,
    }
}

/// Seeded choice of which samples are anomalous.
pub fn anomalous_indices(config: &SynthConfig) -> Vec<usize> {
    let mut rng = sample_rng(config.seed, 0);
    let mut ids: Vec<usize> = (0..config.num_samples).collect();
    ids.shuffle(&mut rng);
    let mut chosen = ids[..config.anomalous_count()].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Generates every sample in memory.
pub fn generate_in_memory(config: &SynthConfig) -> Result<Vec<SynthSample>, SynthError> {
    config.validate()?;
    let protos = prototypes(config, &mut sample_rng(config.seed, u64::MAX));
    let anomalous = anomalous_indices(config);
    Ok((0..config.num_samples)
        .into_par_iter()
        .map(|i| generate_sample(config, &protos, i, anomalous.binary_search(&i).is_ok()))
        .collect())
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:04}")
}

/// Writes a full dataset directory: `dataset.json`, `ground_truth.json` and
/// per-sample feature, xyz and mask tensors.
pub fn generate_synthetic_dataset(
    config: &SynthConfig,
    out_dir: impl AsRef<Path>,
) -> Result<(DatasetManifest, GroundTruth), SynthError> {
    let out_dir = out_dir.as_ref();
    let samples = generate_in_memory(config)?;
    let side = config.image_side();
    let g = config.grid_side;
    let mut manifests = Vec::with_capacity(samples.len());
    let mut truths = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let id = sample_id(i);
        let rel = PathBuf::from("samples").join(&id);
        let mut feature_paths = Vec::new();
        for (k, stage) in s.stages.iter().enumerate() {
            let p = rel.join(format!("feat_s{k}.mt"));
            let values = stage.as_slice().iter().map(|&v| v as f32).collect();
            write_tensor(out_dir.join(&p), &TensorFile::f32(vec![stage.rows(), stage.cols()], values)?)?;
            feature_paths.push(p);
        }
        let xyz_path = rel.join("xyz.mt");
        let xyz: Vec<f32> = s.xyz.iter().flat_map(|p| p.map(|v| v as f32)).collect();
        write_tensor(out_dir.join(&xyz_path), &TensorFile::f32(vec![side, side, 3], xyz)?)?;
        let mask_path = rel.join("mask.mt");
        let mask = s.mask.iter().map(|&m| u8::from(m)).collect();
        write_tensor(out_dir.join(&mask_path), &TensorFile::u8(vec![side, side], mask)?)?;
        let anomalous = s.region.is_some();
        manifests.push(SampleManifest {
            sample_id: id.clone(),
            image_feature_paths: Some(feature_paths),
            cloud_path: Some(xyz_path),
            xyz_map_shape: Some((side, side)),
            intrinsics: None,
            image_shape: Some((side, side)),
            label: if anomalous { Label::Anomalous } else { Label::Normal },
            mask_path: Some(mask_path.clone()),
        });
        let anomalous_patches = s.region.map_or_else(Vec::new, |[r0, c0, h, w]| {
            (r0..r0 + h).flat_map(|r| (c0..c0 + w).map(move |c| r * g + c)).collect()
        });
        truths.push(SampleTruth {
            sample_id: id,
            anomalous,
            region: s.region,
            anomalous_patches,
            mask_path,
        });
    }
    let manifest = DatasetManifest {
        name: format!("synthetic-{}", config.seed),
        samples: manifests,
        root: out_dir.to_path_buf(),
    };
    manifest.save(out_dir.join("dataset.json"))?;
    let truth = GroundTruth {
        config: config.clone(),
        anomalous_count: truths.iter().filter(|t| t.anomalous).count(),
        samples: truths,
    };
    fs::write(out_dir.join("ground_truth.json"), serde_json::to_string_pretty(&truth)?)?;
    Ok((manifest, truth))
}

/// Length of [`geometric_descriptor`].
pub const DESCRIPTOR_LEN: usize = 17;
const HIST_BINS: usize = 8;

/// Shape descriptor of a point group:
///
/// `[l0, l1, l2, sv, mean_r, std_r, mean|h|/mean_r, |mean h^3|/mean_r^3, |n_z|, hist(8)]`
///
/// with `l*` the ascending covariance eigenvalues, `sv` the surface variation,
/// `r` the distances to the centroid, `h` the offsets along the smallest
/// eigenvector `n` and `hist` the radial histogram of `r / max r`. Everything
/// is centroid-relative; only `|n_z|` depends on orientation.
pub fn geometric_descriptor<T: Scalar>(cloud: &PointCloud<T>, members: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); DESCRIPTOR_LEN];
    if members.is_empty() {
        return out;
    }
    let n = members.len() as f64;
    let pts: Vec<[f64; 3]> = members.iter().map(|&i| cloud.point(i).map(|v| v.as_f64())).collect();
    let mut mean = [0.0; 3];
    for p in &pts {
        for k in 0..3 {
            mean[k] += p[k] / n;
        }
    }
    let offsets: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]]).collect();
    let mut cov = Matrix3::<f64>::zeros();
    for d in &offsets {
        for r in 0..3 {
            for c in 0..3 {
                cov[(r, c)] += d[r] * d[c] / n;
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let lambda: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    let normal = eig.eigenvectors.column(order[0]);
    let total: f64 = lambda.iter().sum();
    let sv = if total > 0.0 { lambda[0] / total } else { 0.0 };

    let radii: Vec<f64> = offsets.iter().map(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()).collect();
    let mean_r = radii.iter().sum::<f64>() / n;
    let std_r = (radii.iter().map(|r| (r - mean_r).powi(2)).sum::<f64>() / n).sqrt();
    let heights: Vec<f64> = offsets
        .iter()
        .map(|d| d[0] * normal[0] + d[1] * normal[1] + d[2] * normal[2])
        .collect();
    let (h_abs, h3) = if mean_r > 0.0 {
        (
            heights.iter().map(|h| h.abs()).sum::<f64>() / n / mean_r,
            (heights.iter().map(|h| h.powi(3)).sum::<f64>() / n).abs() / mean_r.powi(3),
        )
    } else {
        (0.0, 0.0)
    };
    let max_r = radii.iter().cloned().fold(0.0, f64::max);
    let mut hist = [0.0; HIST_BINS];
    for r in &radii {
        let bin = if max_r > 0.0 {
            ((r / max_r * HIST_BINS as f64) as usize).min(HIST_BINS - 1)
        } else {
            0
        };
        hist[bin] += 1.0 / n;
    }
    let values = [
        lambda[0],
        lambda[1],
        lambda[2],
        sv,
        mean_r,
        std_r,
        h_abs,
        h3,
        normal[2].abs(),
    ];
    for (o, v) in out.iter_mut().zip(values.iter().chain(hist.iter())) {
        *o = T::lit(*v);
    }
    out
}

/// 3D feature stack from descriptors: stage `s` (1-based) describes the first
/// `ceil(K_P * s / S)` members of each group, coarse to fine in extent.
pub fn cloud_feature_stack<T: Scalar>(
    cloud: &PointCloud<T>,
    groups: &GroupSet,
    stages: usize,
) -> PatchFeatureStack<T> {
    let stage_mats = (1..=stages)
        .map(|s| {
            let rows: Vec<Vec<T>> = groups
                .groups
                .par_iter()
                .map(|g| {
                    let k = (g.member_indices.len() * s).div_ceil(stages).max(1);
                    geometric_descriptor(cloud, &g.member_indices[..k])
                })
                .collect();
            Matrix::from_rows(&rows).expect("uniform descriptor length")
        })
        .collect();
    PatchFeatureStack::cloud(stage_mats, groups.centers(cloud), groups.high_curvature_flags())
        .expect("consistent stack")
}

/// Naive minimum L2 distance per query row, accumulated in `f64`.
pub fn oracle_pairwise_min<T: Scalar>(query: &Matrix<T>, gallery: &Matrix<T>) -> Vec<f64> {
    let mut out = Vec::with_capacity(query.rows());
    for i in 0..query.rows() {
        let mut best = f64::INFINITY;
        for j in 0..gallery.rows() {
            let mut acc = 0.0f64;
            for c in 0..query.cols() {
                let d = query.get(i, c).as_f64() - gallery.get(j, c).as_f64();
                acc += d * d;
            }
            let d = acc.sqrt();
            if d < best {
                best = d;
            }
        }
        out.push(best);
    }
    out
}

/// Per-sample rescoring: `c_i / 2 + 1/2 * sum_j w_ij c_j / sum_j w_ij` over
/// the masked neighbors; isolated samples keep `c_i`.
pub fn oracle_rescore<T: Scalar>(c: &[T], w: &Matrix<T>, mask: &WindowMask) -> Vec<f64> {
    (0..c.len())
        .map(|i| {
            let weights: Vec<(usize, f64)> = mask.neighbors[i].iter().map(|&j| (j, w.get(i, j).as_f64())).collect();
            let total: f64 = weights.iter().map(|(_, x)| x).sum();
            if total <= 0.0 {
                return c[i].as_f64();
            }
            let neighbor_mean: f64 = weights.iter().map(|&(j, x)| x / total * c[j].as_f64()).sum();
            c[i].as_f64() / 2.0 + neighbor_mean / 2.0
        })
        .collect()
}
