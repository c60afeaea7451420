//! Patch scores to dense anomaly maps: bilinear upsampling on the image side,
//! inverse-distance interpolation onto points on the cloud side, rendering of
//! point scores into pixels, additive fusion and max-based classification.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry3d::{dist2, knn_of_point, Point3};
use crate::msm::PixelRoute;
use crate::scalar::Scalar;
use crate::tensor_io::{TensorError, TensorFile};

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("maps live in different spaces: {0:?} vs {1:?}")]
    SpaceMismatch(MapSpace, MapSpace),
    #[error("map is empty")]
    EmptyMap,
    #[error("no 2D/3D alignment route available")]
    NoAlignmentRoute,
    #[error("invalid interpolation parameters: {0}")]
    InvalidParams(String),
    #[error("map contains a non-finite value at {0}")]
    NonFinite(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MapSpace {
    Pixel { height: usize, width: usize },
    Point { count: usize },
}

impl MapSpace {
    pub fn len(&self) -> usize {
        match *self {
            MapSpace::Pixel { height, width } => height * width,
            MapSpace::Point { count } => count,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> Vec<usize> {
        match *self {
            MapSpace::Pixel { height, width } => vec![height, width],
            MapSpace::Point { count } => vec![count],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap<T> {
    space: MapSpace,
    values: Vec<T>,
    sample_score: T,
}

impl<T: Scalar> AnomalyMap<T> {
    pub fn new(space: MapSpace, values: Vec<T>) -> Result<Self, MapError> {
        if values.len() != space.len() {
            return Err(MapError::ShapeMismatch(format!(
                "{} values for a space of {}",
                values.len(),
                space.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(MapError::NonFinite(i));
        }
        let sample_score = max_of(&values).unwrap_or_else(T::zero);
        Ok(Self {
            space,
            values,
            sample_score,
        })
    }

    pub fn space(&self) -> MapSpace {
        self.space
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn sample_score(&self) -> T {
        self.sample_score
    }

    pub fn to_tensor(&self) -> Result<TensorFile, TensorError> {
        TensorFile::f32(
            self.space.shape(),
            self.values.iter().map(|v| v.as_f64() as f32).collect(),
        )
    }
}

fn max_of<T: Scalar>(v: &[T]) -> Option<T> {
    v.iter().copied().reduce(|a, b| if b > a { b } else { a })
}

/// Corner-aligned bilinear upsampling of a `grid_side x grid_side` score grid.
pub fn upsample_2d<T: Scalar>(
    patch_scores: &[T],
    grid_side: usize,
    height: usize,
    width: usize,
) -> Result<AnomalyMap<T>, MapError> {
    if grid_side == 0 || patch_scores.len() != grid_side * grid_side {
        return Err(MapError::ShapeMismatch(format!(
            "{} scores for a {grid_side}x{grid_side} grid",
            patch_scores.len()
        )));
    }
    if height < grid_side || width < grid_side {
        return Err(MapError::ShapeMismatch(format!(
            "output {height}x{width} smaller than grid {grid_side}"
        )));
    }
    let axis = |n: usize| -> Vec<(usize, usize, T)> {
        (0..n)
            .map(|i| {
                if n == 1 {
                    return (0, 0, T::zero());
                }
                let num = i * (grid_side - 1);
                let lo = num / (n - 1);
                let frac = T::of_usize(num - lo * (n - 1)) / T::of_usize(n - 1);
                (lo, (lo + 1).min(grid_side - 1), frac)
            })
            .collect()
    };
    let rows = axis(height);
    let cols = axis(width);
    let g = |r: usize, c: usize| patch_scores[r * grid_side + c];
    let values: Vec<T> = (0..height * width)
        .into_par_iter()
        .map(|px| {
            let (y0, y1, fy) = rows[px / width];
            let (x0, x1, fx) = cols[px % width];
            let (a, b, c, d) = (g(y0, x0), g(y0, x1), g(y1, x0), g(y1, x1));
            let top = a * (T::one() - fx) + b * fx;
            let bottom = c * (T::one() - fx) + d * fx;
            let v = top * (T::one() - fy) + bottom * fy;
            let lo = a.min(b).min(c.min(d));
            let hi = a.max(b).max(c.max(d));
            v.max(lo).min(hi)
        })
        .collect();
    AnomalyMap::new(MapSpace::Pixel { height, width }, values)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdwParams {
    pub power: f64,
    pub k_nn: usize,
    pub epsilon: f64,
}

impl Default for IdwParams {
    fn default() -> Self {
        Self {
            power: 2.0,
            k_nn: 3,
            epsilon: 1e-12,
        }
    }
}

/// Inverse-distance interpolation of group scores onto arbitrary points.
pub fn idw_interpolate<T: Scalar>(
    centers: &[Point3<T>],
    scores: &[T],
    points: &[Point3<T>],
    params: IdwParams,
) -> Result<Vec<T>, MapError> {
    if centers.is_empty() || centers.len() != scores.len() {
        return Err(MapError::ShapeMismatch(format!(
            "{} centers with {} scores",
            centers.len(),
            scores.len()
        )));
    }
    if !(params.power > 0.0) || params.k_nn == 0 || !(params.epsilon >= 0.0) {
        return Err(MapError::InvalidParams(format!("{params:?}")));
    }
    let k = params.k_nn.min(centers.len());
    let half_power = T::lit(params.power / 2.0);
    let eps = T::lit(params.epsilon);
    Ok(points
        .par_iter()
        .map(|q| {
            let near = knn_of_point(centers, q, None, k);
            let d2: Vec<T> = near.iter().map(|&c| dist2(&centers[c], q)).collect();
            if let Some(hit) = d2.iter().position(|&d| d == T::zero()) {
                return scores[near[hit]];
            }
            let mut num = T::zero();
            let mut den = T::zero();
            let mut lo = T::infinity();
            let mut hi = T::neg_infinity();
            for (&c, &d) in near.iter().zip(&d2) {
                let w = T::one() / (d.powf(half_power) + eps);
                num = num + w * scores[c];
                den = den + w;
                lo = lo.min(scores[c]);
                hi = hi.max(scores[c]);
            }
            (num / den).max(lo).min(hi)
        })
        .collect())
}

/// Writes point scores into pixel space; pixels without a point stay 0 and
/// pixels hit by several points keep the largest score.
pub fn render_3d_to_pixels<T: Scalar>(
    point_scores: &[T],
    points: &[Point3<T>],
    route: Option<&PixelRoute>,
) -> Result<AnomalyMap<T>, MapError> {
    let route = route.ok_or(MapError::NoAlignmentRoute)?;
    if point_scores.len() != points.len() {
        return Err(MapError::ShapeMismatch(format!(
            "{} scores for {} points",
            point_scores.len(),
            points.len()
        )));
    }
    let (height, width) = route.shape();
    let mut values = vec![T::zero(); height * width];
    let mut hit = vec![false; height * width];
    for (i, (p, &s)) in points.iter().zip(point_scores).enumerate() {
        if let Some(px) = route.pixel_of(i, p) {
            if px >= values.len() {
                return Err(MapError::ShapeMismatch(format!("pixel {px} outside {height}x{width}")));
            }
            if !hit[px] || s > values[px] {
                values[px] = s;
                hit[px] = true;
            }
        }
    }
    AnomalyMap::new(MapSpace::Pixel { height, width }, values)
}

/// Elementwise sum of two maps over the same space.
pub fn fuse_maps<T: Scalar>(a: &AnomalyMap<T>, b: &AnomalyMap<T>) -> Result<AnomalyMap<T>, MapError> {
    if a.space != b.space {
        return Err(MapError::SpaceMismatch(a.space, b.space));
    }
    AnomalyMap::new(a.space, a.values.iter().zip(&b.values).map(|(&x, &y)| x + y).collect())
}

/// Sample-level score: the map maximum.
pub fn classify<T: Scalar>(map: &AnomalyMap<T>) -> Result<T, MapError> {
    max_of(&map.values).ok_or(MapError::EmptyMap)
}
