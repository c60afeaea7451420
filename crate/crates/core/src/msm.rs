//! Mutual scoring: every sample scores every other sample's patches by the
//! minimum feature distance, score sets are reduced by an interval average over
//! their lowest `X%`, stages are averaged, and the two modalities can raise each
//! other's scores through cross-modal anomaly enhancement (CAE).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry3d::{knn_of_point, Point3, PointCloud};
use crate::matrix::Matrix;
use crate::scalar::{cmp_finite, Scalar};
use crate::snamd::PatchFeatureStack;
use crate::tensor_io::Intrinsics;

#[derive(Debug, Error, PartialEq)]
pub enum MsmError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("score set is empty")]
    EmptyScoreSet,
    #[error("interval percentage must be in (0, 100], got {0}")]
    InvalidPercent(f64),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("no 2D/3D alignment route available")]
    NoAlignmentRoute,
    #[error("cannot split {samples} samples into {subsets} subsets")]
    TooManySubsets { samples: usize, subsets: usize },
}

/// Minimum L2 distance from every query row to any gallery row.
///
/// Distances are accumulated channel by channel over a contiguous copy of the
/// gallery columns, so the inner loop runs over gallery patches.
pub fn min_distances<T: Scalar>(query: &Matrix<T>, gallery: &Matrix<T>) -> Vec<T> {
    assert_eq!(query.cols(), gallery.cols(), "channel mismatch");
    let cols = gallery.transposed();
    let mg = gallery.rows();
    let mut acc = vec![T::zero(); mg];
    let mut out = Vec::with_capacity(query.rows());
    for qi in 0..query.rows() {
        let q = query.row(qi);
        acc.iter_mut().for_each(|a| *a = T::zero());
        for (c, &qc) in q.iter().enumerate() {
            for (a, &g) in acc.iter_mut().zip(cols.row(c)) {
                let d = qc - g;
                *a = *a + d * d;
            }
        }
        out.push(lane_min(&acc).sqrt());
    }
    out
}

fn lane_min<T: Scalar>(v: &[T]) -> T {
    const LANES: usize = 8;
    let mut m = [T::infinity(); LANES];
    let chunks = v.chunks_exact(LANES);
    let rest = chunks.remainder();
    for ch in chunks {
        for l in 0..LANES {
            m[l] = if ch[l] < m[l] { ch[l] } else { m[l] };
        }
    }
    let mut best = T::infinity();
    for &x in m.iter().chain(rest) {
        if x < best {
            best = x;
        }
    }
    best
}

/// Per-stage minimum distances of every query patch to one gallery sample.
pub fn pair_scores<T: Scalar>(
    query: &PatchFeatureStack<T>,
    gallery: &PatchFeatureStack<T>,
) -> Result<Vec<Vec<T>>, MsmError> {
    check_compatible(query, gallery)?;
    Ok(query
        .stages
        .iter()
        .zip(&gallery.stages)
        .map(|(q, g)| min_distances(q, g))
        .collect())
}

fn check_compatible<T: Scalar>(a: &PatchFeatureStack<T>, b: &PatchFeatureStack<T>) -> Result<(), MsmError> {
    if a.modality != b.modality {
        return Err(MsmError::DimensionMismatch("modalities differ".into()));
    }
    if a.channels() != b.channels() {
        return Err(MsmError::DimensionMismatch(format!(
            "stage channels {:?} vs {:?}",
            a.channels(),
            b.channels()
        )));
    }
    Ok(())
}

/// One patch's scores from every gallery sample, tagged by source sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet<T> {
    pub sources: Vec<usize>,
    pub scores: Vec<T>,
}

impl<T: Scalar> ScoreSet<T> {
    pub fn new(sources: Vec<usize>, scores: Vec<T>) -> Result<Self, MsmError> {
        if sources.len() != scores.len() {
            return Err(MsmError::LengthMismatch {
                left: sources.len(),
                right: scores.len(),
            });
        }
        Ok(Self { sources, scores })
    }

    /// Sources numbered `0..n`.
    pub fn untagged(scores: Vec<T>) -> Self {
        Self {
            sources: (0..scores.len()).collect(),
            scores,
        }
    }
}

/// Score sets of every (stage, patch) of one query against a gallery.
/// Layout: `data[(stage * patches + patch) * gallery + j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSets<T> {
    sources: Vec<usize>,
    stages: usize,
    patches: usize,
    data: Vec<T>,
}

impl<T: Scalar> ScoreSets<T> {
    /// Builds from per-gallery `[stage][patch]` score rows.
    pub fn from_gallery_rows<R: AsRef<[Vec<T>]>>(sources: Vec<usize>, rows: &[R]) -> Result<Self, MsmError> {
        if sources.len() != rows.len() {
            return Err(MsmError::LengthMismatch {
                left: sources.len(),
                right: rows.len(),
            });
        }
        if rows.is_empty() {
            return Err(MsmError::EmptyScoreSet);
        }
        let stages = rows[0].as_ref().len();
        let patches = rows[0].as_ref().first().map_or(0, Vec::len);
        let n = rows.len();
        let mut data = vec![T::zero(); stages * patches * n];
        for (j, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != stages || r.iter().any(|s| s.len() != patches) {
                return Err(MsmError::DimensionMismatch("gallery rows disagree in shape".into()));
            }
            for (s, per_patch) in r.iter().enumerate() {
                for (m, &v) in per_patch.iter().enumerate() {
                    data[(s * patches + m) * n + j] = v;
                }
            }
        }
        Ok(Self {
            sources,
            stages,
            patches,
            data,
        })
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    pub fn num_stages(&self) -> usize {
        self.stages
    }

    pub fn num_patches(&self) -> usize {
        self.patches
    }

    pub fn gallery_len(&self) -> usize {
        self.sources.len()
    }

    #[inline]
    pub fn set(&self, stage: usize, patch: usize) -> &[T] {
        let n = self.sources.len();
        let at = (stage * self.patches + patch) * n;
        &self.data[at..at + n]
    }

    #[inline]
    pub fn set_mut(&mut self, stage: usize, patch: usize) -> &mut [T] {
        let n = self.sources.len();
        let at = (stage * self.patches + patch) * n;
        &mut self.data[at..at + n]
    }

    pub fn score_set(&self, stage: usize, patch: usize) -> ScoreSet<T> {
        ScoreSet {
            sources: self.sources.clone(),
            scores: self.set(stage, patch).to_vec(),
        }
    }

    /// Interval average of every (stage, patch) set: `[stage][patch]`.
    pub fn interval_averages(&self, x_percent: f64) -> Result<Vec<Vec<T>>, MsmError> {
        (0..self.stages)
            .map(|s| {
                (0..self.patches)
                    .map(|m| interval_average_of(self.set(s, m), &self.sources, x_percent))
                    .collect()
            })
            .collect()
    }
}

/// Scores every query patch against each gallery sample.
pub fn mutual_score<T: Scalar>(
    query: &PatchFeatureStack<T>,
    gallery: &[(usize, &PatchFeatureStack<T>)],
) -> Result<ScoreSets<T>, MsmError> {
    let rows = gallery
        .iter()
        .map(|(_, g)| pair_scores(query, g))
        .collect::<Result<Vec<_>, _>>()?;
    ScoreSets::from_gallery_rows(gallery.iter().map(|(id, _)| *id).collect(), &rows)
}

/// Number of scores kept by the interval average: `max(1, floor(X% * n))`.
pub fn interval_count(x_percent: f64, n: usize) -> usize {
    // small slack so e.g. 30% of 10 is exactly 3 despite binary rounding
    (((x_percent * n as f64) / 100.0 + 1e-9).floor() as usize).clamp(1, n.max(1))
}

/// Mean of the lowest `X%` of a score set (ties broken by source id).
pub fn interval_average<T: Scalar>(set: &ScoreSet<T>, x_percent: f64) -> Result<T, MsmError> {
    interval_average_of(&set.scores, &set.sources, x_percent)
}

fn interval_average_of<T: Scalar>(scores: &[T], sources: &[usize], x_percent: f64) -> Result<T, MsmError> {
    if !(x_percent > 0.0 && x_percent <= 100.0) {
        return Err(MsmError::InvalidPercent(x_percent));
    }
    if scores.is_empty() {
        return Err(MsmError::EmptyScoreSet);
    }
    let k = interval_count(x_percent, scores.len());
    let mut order: Vec<(T, usize)> = scores.iter().copied().zip(sources.iter().copied()).collect();
    let by_key = |a: &(T, usize), b: &(T, usize)| cmp_finite(&a.0, &b.0).then(a.1.cmp(&b.1));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, by_key);
        order.truncate(k);
    }
    order.sort_unstable_by(by_key);
    let sum = order.iter().fold(T::zero(), |acc, &(v, _)| acc + v);
    Ok(sum / T::of_usize(k))
}

/// Arithmetic mean across stages, per patch.
pub fn fuse_stages<T: Scalar>(per_stage: &[Vec<T>]) -> Vec<T> {
    let Some(first) = per_stage.first() else {
        return Vec::new();
    };
    let s = T::of_usize(per_stage.len());
    (0..first.len())
        .map(|m| per_stage.iter().fold(T::zero(), |acc, st| acc + st[m]) / s)
        .collect()
}

/// How 3D points land on image pixels.
#[derive(Clone, Debug, PartialEq)]
pub enum PixelRoute {
    /// Organized XYZ map: each point already knows its flat pixel index.
    Organized {
        height: usize,
        width: usize,
        pixel_of_point: Vec<usize>,
    },
    /// Pinhole projection, rounded to the nearest pixel.
    Pinhole {
        intrinsics: Intrinsics,
        height: usize,
        width: usize,
    },
}

impl PixelRoute {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            PixelRoute::Organized { height, width, .. } | PixelRoute::Pinhole { height, width, .. } => {
                (*height, *width)
            }
        }
    }

    /// Flat pixel index of point `i`, or `None` when it falls outside the image.
    pub fn pixel_of<T: Scalar>(&self, i: usize, p: &Point3<T>) -> Option<usize> {
        match self {
            PixelRoute::Organized { pixel_of_point, .. } => pixel_of_point.get(i).copied(),
            PixelRoute::Pinhole {
                intrinsics,
                height,
                width,
            } => {
                let (x, y, z) = (p[0].as_f64(), p[1].as_f64(), p[2].as_f64());
                if z <= 0.0 {
                    return None;
                }
                let u = (intrinsics.fx * x / z + intrinsics.cx).round();
                let v = (intrinsics.fy * y / z + intrinsics.cy).round();
                if u < 0.0 || v < 0.0 || u >= *width as f64 || v >= *height as f64 {
                    return None;
                }
                Some(v as usize * width + u as usize)
            }
        }
    }
}

/// Patch of the `grid_side x grid_side` grid covering a flat pixel index.
pub fn patch_of_pixel(pixel: usize, height: usize, width: usize, grid_side: usize) -> usize {
    let (row, col) = (pixel / width, pixel % width);
    (row * grid_side / height) * grid_side + col * grid_side / width
}

/// Links 2D patches, 3D points and 3D groups of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionMap {
    /// `P_{i,m}`: point indices per 2D patch.
    pub patch_points: Vec<Vec<usize>>,
    /// Nearest group center per point (ties by smaller group index).
    pub point_owner: Vec<usize>,
    pub point_pixel: Vec<Option<usize>>,
    pub height: usize,
    pub width: usize,
    pub grid_side: usize,
    pub num_groups: usize,
}

pub fn build_projection_map<T: Scalar>(
    cloud: &PointCloud<T>,
    route: Option<&PixelRoute>,
    grid_side: usize,
    group_centers: &[Point3<T>],
) -> Result<ProjectionMap, MsmError> {
    let route = route.ok_or(MsmError::NoAlignmentRoute)?;
    if group_centers.is_empty() {
        return Err(MsmError::DimensionMismatch("no group centers".into()));
    }
    let (height, width) = route.shape();
    let mut patch_points = vec![Vec::new(); grid_side * grid_side];
    let mut point_pixel = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.points().iter().enumerate() {
        let px = route.pixel_of(i, p);
        if let Some(px) = px {
            patch_points[patch_of_pixel(px, height, width, grid_side)].push(i);
        }
        point_pixel.push(px);
    }
    let point_owner = nearest_centers(cloud.points(), group_centers);
    Ok(ProjectionMap {
        patch_points,
        point_owner,
        point_pixel,
        height,
        width,
        grid_side,
        num_groups: group_centers.len(),
    })
}

/// Nearest center index for every point.
pub fn nearest_centers<T: Scalar>(points: &[Point3<T>], centers: &[Point3<T>]) -> Vec<usize> {
    use rayon::prelude::*;
    points
        .par_iter()
        .map(|p| knn_of_point(centers, p, None, 1)[0])
        .collect()
}

/// Sparse averaging operator: each output row is a weighted mean of inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignTable<T> {
    rows: Vec<Vec<(usize, T)>>,
}

impl<T: Scalar> AlignTable<T> {
    fn from_memberships(rows: Vec<Vec<usize>>) -> Self {
        let rows = rows
            .into_iter()
            .map(|mut targets| {
                if targets.is_empty() {
                    return Vec::new();
                }
                let total = T::of_usize(targets.len());
                targets.sort_unstable();
                let mut out: Vec<(usize, T)> = Vec::new();
                let mut i = 0;
                while i < targets.len() {
                    let t = targets[i];
                    let run = targets[i..].iter().take_while(|&&x| x == t).count();
                    out.push((t, T::of_usize(run) / total));
                    i += run;
                }
                out
            })
            .collect();
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[(usize, T)] {
        &self.rows[i]
    }

    /// Weighted mean of `values` per row; empty rows give 0.
    pub fn apply(&self, values: &[T]) -> Vec<T> {
        self.rows
            .iter()
            .map(|r| r.iter().fold(T::zero(), |acc, &(i, w)| acc + w * values[i]))
            .collect()
    }
}

impl ProjectionMap {
    /// 3D group scores -> 2D patches: mean over the patch's points of their owner's score.
    pub fn image_alignment<T: Scalar>(&self) -> AlignTable<T> {
        AlignTable::from_memberships(
            self.patch_points
                .iter()
                .map(|pts| pts.iter().map(|&p| self.point_owner[p]).collect())
                .collect(),
        )
    }

    /// 2D patch scores -> 3D groups: mean over the group's owned, projected
    /// points of the covering patch's score.
    pub fn cloud_alignment<T: Scalar>(&self) -> AlignTable<T> {
        let mut rows = vec![Vec::new(); self.num_groups];
        for (p, &owner) in self.point_owner.iter().enumerate() {
            if let Some(px) = self.point_pixel[p] {
                rows[owner].push(patch_of_pixel(px, self.height, self.width, self.grid_side));
            }
        }
        AlignTable::from_memberships(rows)
    }
}

/// Aligned 3D score per 2D patch (0 where the patch has no points).
pub fn cae_align<T: Scalar>(map: &ProjectionMap, group_scores: &[T]) -> Vec<T> {
    map.image_alignment().apply(group_scores)
}

/// Affine map of `source` onto `[min(target), max(target)]`; a constant
/// source maps to `min(target)`.
pub fn rescale_to_range<T: Scalar>(source: &[T], target: &[T]) -> Vec<T> {
    if source.is_empty() || target.is_empty() {
        return source.to_vec();
    }
    let (smin, smax) = min_max(source);
    let (tmin, tmax) = min_max(target);
    let span = smax - smin;
    if span <= T::zero() {
        return vec![tmin; source.len()];
    }
    let scale = (tmax - tmin) / span;
    source
        .iter()
        .map(|&v| {
            // pin the endpoints exactly
            if v == smax {
                tmax
            } else {
                tmin + (v - smin) * scale
            }
        })
        .collect()
}

fn min_max<T: Scalar>(v: &[T]) -> (T, T) {
    v.iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Population standard deviation.
pub fn population_std<T: Scalar>(v: &[T]) -> T {
    if v.is_empty() {
        return T::zero();
    }
    let n = T::of_usize(v.len());
    let mean = v.iter().fold(T::zero(), |a, &x| a + x) / n;
    (v.iter().fold(T::zero(), |a, &x| a + (x - mean) * (x - mean)) / n).sqrt()
}

/// Confidence weight `clamp(1 - std, 0, 1)` of an aligned, rescaled set.
pub fn confidence_weight<T: Scalar>(aligned: &[T]) -> T {
    (T::one() - population_std(aligned)).max(T::zero()).min(T::one())
}

/// `a <- a + lambda * max(aligned, a)` per gallery sample.
pub fn cae_enhance<T: Scalar>(a_2d: &[T], aligned_rescaled: &[T]) -> Result<Vec<T>, MsmError> {
    if a_2d.len() != aligned_rescaled.len() {
        return Err(MsmError::LengthMismatch {
            left: a_2d.len(),
            right: aligned_rescaled.len(),
        });
    }
    let lambda = confidence_weight(aligned_rescaled);
    Ok(a_2d
        .iter()
        .zip(aligned_rescaled)
        .map(|(&a, &p)| a + lambda * p.max(a))
        .collect())
}

/// Enhances `target` sets with `other`'s raw scores mapped through `table`.
fn enhance_sets<T: Scalar>(
    target: &ScoreSets<T>,
    other: &ScoreSets<T>,
    table: &AlignTable<T>,
) -> Result<ScoreSets<T>, MsmError> {
    if target.sources != other.sources {
        return Err(MsmError::DimensionMismatch("modalities scored against different galleries".into()));
    }
    if target.stages != other.stages {
        return Err(MsmError::DimensionMismatch(format!(
            "{} vs {} stages across modalities",
            target.stages, other.stages
        )));
    }
    if table.len() != target.patches {
        return Err(MsmError::DimensionMismatch("alignment table does not match patch count".into()));
    }
    let n = target.gallery_len();
    let mut out = target.clone();
    let mut aligned = vec![T::zero(); n];
    for s in 0..target.stages {
        for m in 0..target.patches {
            aligned.iter_mut().for_each(|a| *a = T::zero());
            for &(src, w) in table.row(m) {
                for (a, &v) in aligned.iter_mut().zip(other.set(s, src)) {
                    *a = *a + w * v;
                }
            }
            let own = target.set(s, m);
            let rescaled = rescale_to_range(&aligned, own);
            let enhanced = cae_enhance(own, &rescaled)?;
            out.set_mut(s, m).copy_from_slice(&enhanced);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsmConfig {
    /// Percentage of lowest scores kept by the interval average.
    pub interval_percent: f64,
    pub cae_enabled: bool,
}

impl Default for MsmConfig {
    fn default() -> Self {
        Self {
            interval_percent: 30.0,
            cae_enabled: true,
        }
    }
}

/// Fused per-patch scores of one sample, per available modality.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleScores<T> {
    pub image: Option<Vec<T>>,
    pub cloud: Option<Vec<T>>,
}

/// Cross-modal alignment tables of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossModalAlignment<T> {
    pub to_image: AlignTable<T>,
    pub to_cloud: AlignTable<T>,
}

impl<T: Scalar> CrossModalAlignment<T> {
    pub fn from_map(map: &ProjectionMap) -> Self {
        Self {
            to_image: map.image_alignment(),
            to_cloud: map.cloud_alignment(),
        }
    }
}

/// CAE (when both modalities and an alignment are present and enabled),
/// then interval average and stage fusion, per modality.
pub fn score_sample<T: Scalar>(
    image: Option<&ScoreSets<T>>,
    cloud: Option<&ScoreSets<T>>,
    alignment: Option<&CrossModalAlignment<T>>,
    config: &MsmConfig,
) -> Result<SampleScores<T>, MsmError> {
    let (image, cloud) = match (image, cloud, alignment) {
        (Some(i), Some(c), Some(a)) if config.cae_enabled => {
            // both directions read the other modality's raw sets
            let i2 = enhance_sets(i, c, &a.to_image)?;
            let c2 = enhance_sets(c, i, &a.to_cloud)?;
            (Some(i2), Some(c2))
        }
        (i, c, _) => (i.cloned(), c.cloned()),
    };
    let reduce = |sets: Option<ScoreSets<T>>| -> Result<Option<Vec<T>>, MsmError> {
        sets.map(|s| Ok(fuse_stages(&s.interval_averages(config.interval_percent)?)))
            .transpose()
    };
    Ok(SampleScores {
        image: reduce(image)?,
        cloud: reduce(cloud)?,
    })
}

/// Seeded shuffle of `0..n` split into `g` parts whose sizes differ by at most one.
pub fn partition_subsets(n: usize, g: usize, seed: u64) -> Result<Vec<Vec<usize>>, MsmError> {
    if g == 0 || g > n {
        return Err(MsmError::TooManySubsets { samples: n, subsets: g });
    }
    let mut ids: Vec<usize> = (0..n).collect();
    if g > 1 {
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let (base, extra) = (n / g, n % g);
    let mut out = Vec::with_capacity(g);
    let mut start = 0;
    for part in 0..g {
        let len = base + usize::from(part < extra);
        let mut subset = ids[start..start + len].to_vec();
        subset.sort_unstable();
        out.push(subset);
        start += len;
    }
    Ok(out)
}
