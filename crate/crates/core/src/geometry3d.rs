//! Point-cloud sampling and grouping: farthest point sampling, KNN groups,
//! PCA surface variation and curvature-gated Iterative Point Grouping (IPG).
//!
//! Every selection breaks distance ties by the smaller point index.

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{cmp_finite, Scalar};

pub type Point3<T> = [T; 3];

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("requested {requested} points from a cloud of {available}")]
    CountExceedsCloud { requested: usize, available: usize },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point {index} has a non-finite coordinate")]
    NonFinitePoint { index: usize },
    #[error("index {index} out of range for cloud of {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid grouping parameters: {0}")]
    InvalidParams(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T> {
    points: Vec<Point3<T>>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(points: Vec<Point3<T>>) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        if let Some(index) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(GeometryError::NonFinitePoint { index });
        }
        Ok(Self { points })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn point(&self, i: usize) -> &Point3<T> {
        &self.points[i]
    }

    pub fn points(&self) -> &[Point3<T>] {
        &self.points
    }

    fn check_index(&self, index: usize) -> Result<(), GeometryError> {
        if index < self.len() {
            Ok(())
        } else {
            Err(GeometryError::IndexOutOfRange {
                index,
                len: self.len(),
            })
        }
    }

    fn check_count(&self, requested: usize) -> Result<(), GeometryError> {
        if requested <= self.len() {
            Ok(())
        } else {
            Err(GeometryError::CountExceedsCloud {
                requested,
                available: self.len(),
            })
        }
    }
}

#[inline]
pub fn dist2<T: Scalar>(a: &Point3<T>, b: &Point3<T>) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Index of the lexicographically smallest `(x, y, z)`; the deterministic FPS seed.
pub fn lexicographic_seed<T: Scalar>(cloud: &PointCloud<T>) -> usize {
    let mut best = 0;
    for (i, p) in cloud.points.iter().enumerate().skip(1) {
        let b = &cloud.points[best];
        let less = p
            .iter()
            .zip(b)
            .map(|(x, y)| cmp_finite(x, y))
            .find(|o| o.is_ne())
            .is_some_and(|o| o.is_lt());
        if less {
            best = i;
        }
    }
    best
}

/// Greedy farthest point sampling starting at `seed_index`.
pub fn farthest_point_sample<T: Scalar>(
    cloud: &PointCloud<T>,
    m: usize,
    seed_index: usize,
) -> Result<Vec<usize>, GeometryError> {
    cloud.check_count(m)?;
    cloud.check_index(seed_index)?;
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut chosen = Vec::with_capacity(m);
    let mut min_d = vec![T::infinity(); cloud.len()];
    let mut taken = vec![false; cloud.len()];
    let mut current = seed_index;
    for _ in 0..m {
        chosen.push(current);
        taken[current] = true;
        let c = cloud.points[current];
        let mut next = usize::MAX;
        let mut best = T::neg_infinity();
        for (i, (p, d)) in cloud.points.iter().zip(min_d.iter_mut()).enumerate() {
            let nd = dist2(p, &c);
            if nd < *d {
                *d = nd;
            }
            // strict `>` keeps the smallest index on ties
            if !taken[i] && *d > best {
                best = *d;
                next = i;
            }
        }
        if next == usize::MAX {
            break;
        }
        current = next;
    }
    Ok(chosen)
}

/// Indices of the `k` nearest points to `center` (center first), sorted by
/// `(distance, index)`.
pub fn knn_group<T: Scalar>(
    cloud: &PointCloud<T>,
    center_index: usize,
    k: usize,
) -> Result<Vec<usize>, GeometryError> {
    cloud.check_index(center_index)?;
    cloud.check_count(k)?;
    Ok(knn_of_point(cloud.points(), &cloud.points[center_index], Some(center_index), k))
}

/// `k` nearest entries of `points` to `query`. When `anchor` is given it is
/// placed first regardless of ties with coincident points.
pub(crate) fn knn_of_point<T: Scalar>(
    points: &[Point3<T>],
    query: &Point3<T>,
    anchor: Option<usize>,
    k: usize,
) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let mut cand: Vec<(T, usize)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != anchor)
        .map(|(i, p)| (dist2(p, query), i))
        .collect();
    let want = if anchor.is_some() { k - 1 } else { k }.min(cand.len());
    let by_key = |a: &(T, usize), b: &(T, usize)| cmp_finite(&a.0, &b.0).then(a.1.cmp(&b.1));
    if want > 0 && want < cand.len() {
        cand.select_nth_unstable_by(want - 1, by_key);
        cand.truncate(want);
    }
    cand.truncate(want);
    cand.sort_unstable_by(by_key);
    let mut out = Vec::with_capacity(k);
    out.extend(anchor);
    out.extend(cand.into_iter().map(|(_, i)| i));
    out
}

/// PCA surface variation `λ0 / (λ0 + λ1 + λ2)` of the given points, in `[0, 1/3]`.
/// Coincident points (zero total variance) give 0.
pub fn surface_variation_of<T: Scalar>(cloud: &PointCloud<T>, indices: &[usize]) -> T {
    let eig = covariance_eigenvalues(cloud, indices);
    let total = eig[0] + eig[1] + eig[2];
    if total <= f64::EPSILON * 1e-6 || !total.is_finite() {
        return T::zero();
    }
    T::lit((eig[0] / total).clamp(0.0, 1.0 / 3.0))
}

/// Ascending eigenvalues of the population covariance of the selected points,
/// accumulated in `f64`.
pub fn covariance_eigenvalues<T: Scalar>(cloud: &PointCloud<T>, indices: &[usize]) -> [f64; 3] {
    if indices.is_empty() {
        return [0.0; 3];
    }
    let n = indices.len() as f64;
    let mut mean = [0.0f64; 3];
    for &i in indices {
        for (m, c) in mean.iter_mut().zip(cloud.points[i]) {
            *m += c.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = Matrix3::<f64>::zeros();
    for &i in indices {
        let p = cloud.points[i];
        let d = [p[0].as_f64() - mean[0], p[1].as_f64() - mean[1], p[2].as_f64() - mean[2]];
        for r in 0..3 {
            for c in 0..3 {
                cov[(r, c)] += d[r] * d[c];
            }
        }
    }
    cov /= n;
    let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().map(|v| v.max(0.0)).collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    [ev[0], ev[1], ev[2]]
}

/// Surface variation over the `k_nbr`-neighbourhood of `center_index`.
pub fn surface_variation<T: Scalar>(
    cloud: &PointCloud<T>,
    center_index: usize,
    k_nbr: usize,
) -> Result<T, GeometryError> {
    if k_nbr < 4 {
        return Err(GeometryError::InvalidParams(format!(
            "curvature neighbourhood needs at least 4 points, got {k_nbr}"
        )));
    }
    let nbrs = knn_group(cloud, center_index, k_nbr)?;
    Ok(surface_variation_of(cloud, &nbrs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointGroup {
    pub center_index: usize,
    /// `K_P` unique indices, center first, then in insertion order.
    pub member_indices: Vec<usize>,
    pub curvature: f64,
    pub regrouped: bool,
}

/// Curvature-gated regrouping: start from the `k_iter` nearest points of the
/// center, then repeatedly add the `k_iter` points closest to the current group
/// (point-to-set distance), truncating the last batch so exactly `k_p` remain.
pub fn ipg_regroup<T: Scalar>(
    cloud: &PointCloud<T>,
    center_index: usize,
    k_p: usize,
    k_iter: usize,
) -> Result<PointGroup, GeometryError> {
    if k_iter == 0 || k_iter >= k_p {
        return Err(GeometryError::InvalidParams(format!(
            "need 0 < K_iter < K_P, got K_iter={k_iter}, K_P={k_p}"
        )));
    }
    cloud.check_count(k_p)?;
    let mut members = knn_group(cloud, center_index, k_iter)?;
    let n = cloud.len();
    let mut in_group = vec![false; n];
    // squared point-to-group distance, kept current as members are added
    let mut d = vec![T::infinity(); n];
    let absorb = |idx: usize, d: &mut [T]| {
        let p = cloud.points[idx];
        for (q, dq) in cloud.points.iter().zip(d.iter_mut()) {
            let nd = dist2(q, &p);
            if nd < *dq {
                *dq = nd;
            }
        }
    };
    for &m in &members {
        in_group[m] = true;
        absorb(m, &mut d);
    }
    while members.len() < k_p {
        let take = k_iter.min(k_p - members.len());
        let mut cand: Vec<(T, usize)> = (0..n).filter(|&i| !in_group[i]).map(|i| (d[i], i)).collect();
        let by_key = |a: &(T, usize), b: &(T, usize)| cmp_finite(&a.0, &b.0).then(a.1.cmp(&b.1));
        if take < cand.len() {
            cand.select_nth_unstable_by(take - 1, by_key);
            cand.truncate(take);
        }
        cand.sort_unstable_by(by_key);
        // the whole batch is chosen against the previous group before absorbing
        for &(_, i) in &cand {
            in_group[i] = true;
            members.push(i);
        }
        for &(_, i) in &cand {
            absorb(i, &mut d);
        }
    }
    Ok(PointGroup {
        center_index,
        curvature: surface_variation_of(cloud, &members).as_f64(),
        member_indices: members,
        regrouped: true,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupParams {
    pub num_groups: usize,
    pub group_size: usize,
    pub k_iter: usize,
    pub curvature_threshold: f64,
}

impl Default for GroupParams {
    fn default() -> Self {
        Self {
            num_groups: 1024,
            group_size: 128,
            k_iter: 80,
            curvature_threshold: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSet {
    pub groups: Vec<PointGroup>,
    pub params: GroupParams,
}

impl GroupSet {
    pub fn centers<T: Scalar>(&self, cloud: &PointCloud<T>) -> Vec<Point3<T>> {
        self.groups.iter().map(|g| *cloud.point(g.center_index)).collect()
    }

    pub fn high_curvature_flags(&self) -> Vec<bool> {
        self.groups.iter().map(|g| g.regrouped).collect()
    }
}

/// FPS centers, KNN groups, curvature at each center, and IPG for groups whose
/// curvature exceeds the threshold. The curvature of a group is measured on its
/// own KNN membership.
pub fn build_groups<T: Scalar>(cloud: &PointCloud<T>, params: GroupParams) -> Result<GroupSet, GeometryError> {
    let GroupParams {
        num_groups,
        group_size,
        k_iter,
        curvature_threshold,
    } = params;
    if num_groups == 0 || group_size == 0 {
        return Err(GeometryError::InvalidParams("empty grouping requested".into()));
    }
    if curvature_threshold.is_nan() {
        return Err(GeometryError::InvalidParams("curvature threshold is NaN".into()));
    }
    cloud.check_count(num_groups)?;
    cloud.check_count(group_size)?;
    let centers = farthest_point_sample(cloud, num_groups, lexicographic_seed(cloud))?;
    let groups = centers
        .par_iter()
        .map(|&c| {
            let members = knn_group(cloud, c, group_size)?;
            let curvature = if group_size >= 4 {
                surface_variation_of(cloud, &members).as_f64()
            } else {
                0.0
            };
            if curvature > curvature_threshold && k_iter > 0 && k_iter < group_size {
                let mut g = ipg_regroup(cloud, c, group_size, k_iter)?;
                g.curvature = curvature;
                Ok(g)
            } else {
                Ok(PointGroup {
                    center_index: c,
                    member_indices: members,
                    curvature,
                    regrouped: false,
                })
            }
        })
        .collect::<Result<Vec<_>, GeometryError>>()?;
    Ok(GroupSet { groups, params })
}
