//! Similar-neighbourhood aggregation with multiple degrees.
//!
//! Each patch is replaced by a similarity-weighted pool over its `r x r` grid
//! window (images) or its `r` nearest group centers (clouds), for every degree
//! `r`; the per-degree results are fused by an elementwise mean, which is the
//! block-averaging projection of their concatenation back to `C` channels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry3d::{knn_of_point, Point3};
use crate::matrix::Matrix;
use crate::scalar::{squared_distance, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum SnamdError {
    #[error("image aggregation degree must be odd, got {0}")]
    EvenDegree(usize),
    #[error("degree {degree} exceeds the {groups} available groups")]
    DegreeExceedsGroups { degree: usize, groups: usize },
    #[error("degrees must be ascending, unique and start at 1: {0:?}")]
    InvalidDegrees(Vec<usize>),
    #[error("patch {index} out of range for {len} patches")]
    PatchOutOfRange { index: usize, len: usize },
    #[error("malformed feature stack: {0}")]
    InvalidStack(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Cloud,
}

/// Spatial arrangement of the patches of a stack.
#[derive(Clone, Debug, PartialEq)]
pub enum PatchLayout<T> {
    /// Row-major `side x side` token grid.
    Grid { side: usize },
    /// Point groups with their center coordinates and high-curvature flags.
    Groups {
        centers: Vec<Point3<T>>,
        high_curvature: Vec<bool>,
    },
}

/// Per-sample, per-stage patch features (`M x C_s` per stage).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatureStack<T> {
    pub modality: Modality,
    pub stages: Vec<Matrix<T>>,
    pub layout: PatchLayout<T>,
}

impl<T: Scalar> PatchFeatureStack<T> {
    pub fn image(stages: Vec<Matrix<T>>) -> Result<Self, SnamdError> {
        let m = stages.first().map_or(0, Matrix::rows);
        let side = (m as f64).sqrt().round() as usize;
        if side * side != m {
            return Err(SnamdError::InvalidStack(format!("{m} patches is not a square grid")));
        }
        let s = Self {
            modality: Modality::Image,
            stages,
            layout: PatchLayout::Grid { side },
        };
        s.validate()?;
        Ok(s)
    }

    pub fn cloud(
        stages: Vec<Matrix<T>>,
        centers: Vec<Point3<T>>,
        high_curvature: Vec<bool>,
    ) -> Result<Self, SnamdError> {
        let s = Self {
            modality: Modality::Cloud,
            stages,
            layout: PatchLayout::Groups {
                centers,
                high_curvature,
            },
        };
        s.validate()?;
        Ok(s)
    }

    pub fn num_patches(&self) -> usize {
        self.stages.first().map_or(0, Matrix::rows)
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.stages.iter().map(Matrix::cols).collect()
    }

    pub fn grid_side(&self) -> Option<usize> {
        match self.layout {
            PatchLayout::Grid { side } => Some(side),
            PatchLayout::Groups { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<(), SnamdError> {
        if self.stages.is_empty() {
            return Err(SnamdError::InvalidStack("no stages".into()));
        }
        let m = self.num_patches();
        if self.stages.iter().any(|s| s.rows() != m) {
            return Err(SnamdError::InvalidStack("stages disagree on patch count".into()));
        }
        if self.stages.iter().any(|s| !s.is_finite()) {
            return Err(SnamdError::InvalidStack("non-finite feature".into()));
        }
        match &self.layout {
            PatchLayout::Grid { side } if side * side != m => Err(SnamdError::InvalidStack(format!(
                "grid side {side} does not match {m} patches"
            ))),
            PatchLayout::Groups {
                centers,
                high_curvature,
            } if centers.len() != m || high_curvature.len() != m => Err(SnamdError::InvalidStack(
                "group centers/flags do not match patch count".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Row-major indices of the `r x r` window centred at `m`, clipped at the border.
pub fn neighborhood_2d(grid_side: usize, m: usize, r: usize) -> Result<Vec<usize>, SnamdError> {
    if r % 2 == 0 {
        return Err(SnamdError::EvenDegree(r));
    }
    if m >= grid_side * grid_side {
        return Err(SnamdError::PatchOutOfRange {
            index: m,
            len: grid_side * grid_side,
        });
    }
    let half = r / 2;
    let (row, col) = (m / grid_side, m % grid_side);
    let rows = row.saturating_sub(half)..=(row + half).min(grid_side - 1);
    let cols = col.saturating_sub(half)..=(col + half).min(grid_side - 1);
    Ok(rows
        .flat_map(|i| cols.clone().map(move |j| i * grid_side + j))
        .collect())
}

/// The `r` nearest group centers to center `m` (self first), ties by index.
pub fn neighborhood_3d<T: Scalar>(
    group_centers: &[Point3<T>],
    m: usize,
    r: usize,
) -> Result<Vec<usize>, SnamdError> {
    if r > group_centers.len() {
        return Err(SnamdError::DegreeExceedsGroups {
            degree: r,
            groups: group_centers.len(),
        });
    }
    if m >= group_centers.len() {
        return Err(SnamdError::PatchOutOfRange {
            index: m,
            len: group_centers.len(),
        });
    }
    Ok(knn_of_point(group_centers, &group_centers[m], Some(m), r))
}

/// Similarity-weighted pooling: `mean_j exp(-||f_j - f_center||) * f_j`.
pub fn swpool<'a, T: Scalar>(center: &[T], neighbors: impl IntoIterator<Item = &'a [T]>) -> Vec<T> {
    let mut out = vec![T::zero(); center.len()];
    let mut count = 0usize;
    for f in neighbors {
        let w = (-squared_distance(f, center).sqrt()).exp();
        for (o, &v) in out.iter_mut().zip(f) {
            *o = *o + w * v;
        }
        count += 1;
    }
    if count > 0 {
        let n = T::of_usize(count);
        out.iter_mut().for_each(|o| *o = *o / n);
    }
    out
}

/// Plain average pooling over the same window, for comparison with [`swpool`].
pub fn mean_pool<'a, T: Scalar>(neighbors: impl IntoIterator<Item = &'a [T]>, channels: usize) -> Vec<T> {
    let mut out = vec![T::zero(); channels];
    let mut count = 0usize;
    for f in neighbors {
        for (o, &v) in out.iter_mut().zip(f) {
            *o = *o + v;
        }
        count += 1;
    }
    if count > 0 {
        let n = T::of_usize(count);
        out.iter_mut().for_each(|o| *o = *o / n);
    }
    out
}

/// Per-degree neighbourhoods of every patch, shared by all stages.
fn neighborhoods<T: Scalar>(
    layout: &PatchLayout<T>,
    m: usize,
    degrees: &[usize],
) -> Result<Vec<Vec<Vec<usize>>>, SnamdError> {
    (0..m)
        .map(|p| {
            degrees
                .iter()
                .map(|&r| match layout {
                    PatchLayout::Grid { side } => neighborhood_2d(*side, p, r),
                    PatchLayout::Groups {
                        centers,
                        high_curvature,
                    } => {
                        // high-curvature groups aggregate only themselves at every degree
                        let r = if high_curvature[p] { 1 } else { r };
                        neighborhood_3d(centers, p, r)
                    }
                })
                .collect()
        })
        .collect()
}

pub fn check_degrees(degrees: &[usize]) -> Result<(), SnamdError> {
    let ascending = degrees.windows(2).all(|w| w[0] < w[1]);
    if degrees.first() != Some(&1) || !ascending {
        return Err(SnamdError::InvalidDegrees(degrees.to_vec()));
    }
    Ok(())
}

/// Aggregates every stage of `stack` over the given degrees; shapes are preserved.
pub fn aggregate_stack<T: Scalar>(
    stack: &PatchFeatureStack<T>,
    degrees: &[usize],
) -> Result<PatchFeatureStack<T>, SnamdError> {
    check_degrees(degrees)?;
    stack.validate()?;
    let m = stack.num_patches();
    let nbrs = neighborhoods(&stack.layout, m, degrees)?;
    let inv_degrees = T::one() / T::of_usize(degrees.len());
    let stages = stack
        .stages
        .iter()
        .map(|feat| {
            let c = feat.cols();
            let mut out = Matrix::zeros(m, c);
            if c == 0 {
                return out;
            }
            out.as_mut_slice()
                .par_chunks_mut(c)
                .zip(nbrs.par_iter())
                .enumerate()
                .for_each(|(p, (dst, per_degree))| {
                    let center = feat.row(p);
                    for idx in per_degree {
                        let pooled = swpool(center, idx.iter().map(|&q| feat.row(q)));
                        for (d, v) in dst.iter_mut().zip(pooled) {
                            *d = *d + v;
                        }
                    }
                    dst.iter_mut().for_each(|d| *d = *d * inv_degrees);
                });
            out
        })
        .collect();
    Ok(PatchFeatureStack {
        modality: stack.modality,
        stages,
        layout: stack.layout.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn grid_windows() {
        assert_eq!(neighborhood_2d(4, 6, 1).unwrap(), vec![6]);
        assert_eq!(neighborhood_2d(4, 0, 3).unwrap(), vec![0, 1, 4, 5]);
        assert_eq!(neighborhood_2d(4, 0, 2), Err(SnamdError::EvenDegree(2)));
        for m in 0..64 {
            let (r0, c0) = (m as i64 / 8, m as i64 % 8);
            let brute: Vec<usize> = (0..64)
                .filter(|&q| {
                    let (r, c) = (q as i64 / 8, q as i64 % 8);
                    (r - r0).abs().max((c - c0).abs()) <= 2
                })
                .collect();
            assert_eq!(neighborhood_2d(8, m, 5).unwrap(), brute);
        }
    }

    #[test]
    fn group_neighborhoods() {
        let centers: Vec<[f64; 3]> = [0.0, 1.0, 2.0, 5.0].iter().map(|&x| [x, 0.0, 0.0]).collect();
        assert_eq!(neighborhood_3d(&centers, 1, 1).unwrap(), vec![1]);
        assert_eq!(neighborhood_3d(&centers, 1, 3).unwrap(), vec![1, 0, 2]);
        assert!(matches!(
            neighborhood_3d(&centers, 1, 5),
            Err(SnamdError::DegreeExceedsGroups { .. })
        ));
    }

    #[test]
    fn swpool_limits() {
        let c = [0.3, -1.0];
        assert_eq!(swpool(&c, [&c[..]]), c.to_vec());
        let out = swpool(&[0.0f64], [&[0.0][..], &[50.0][..]]);
        assert!(out[0].abs() < 1e-6);
    }

    #[test]
    fn swpool_matches_literal_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_matrix(9, 8, &mut rng);
        let center = f.row(4);
        let got = swpool(center, (0..9).map(|j| f.row(j)));
        for ch in 0..8 {
            let mut acc = 0.0;
            for j in 0..9 {
                let mut d = 0.0;
                for k in 0..8 {
                    d += (f.get(j, k) - center[k]).powi(2);
                }
                acc += (-d.sqrt()).exp() * f.get(j, ch);
            }
            assert!((got[ch] - acc / 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degree_one_is_identity_and_constant_field_is_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let stack = PatchFeatureStack::image(vec![random_matrix(36, 4, &mut rng)]).unwrap();
        let out = aggregate_stack(&stack, &[1]).unwrap();
        assert_eq!(out, stack);
        let constant = PatchFeatureStack::image(vec![Matrix::from_vec(36, 3, vec![0.25; 108]).unwrap()]).unwrap();
        let out = aggregate_stack(&constant, &[1, 3, 5]).unwrap();
        assert_eq!(out, constant);
        assert!(aggregate_stack(&constant, &[3, 5]).is_err());
        assert!(aggregate_stack(&constant, &[1, 5, 3]).is_err());
        assert!(matches!(
            aggregate_stack(&constant, &[1, 2]),
            Err(SnamdError::EvenDegree(2))
        ));
    }

    #[test]
    fn aggregate_matches_literal_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let feat = random_matrix(36, 5, &mut rng);
        let stack = PatchFeatureStack::image(vec![feat.clone(), random_matrix(36, 3, &mut rng)]).unwrap();
        let out = aggregate_stack(&stack, &[1, 3, 5]).unwrap();
        assert_eq!(out.channels(), vec![5, 3]);
        for m in 0..36 {
            let (r0, c0) = (m as i64 / 6, m as i64 % 6);
            let mut fused = [0.0; 5];
            for r in [1i64, 3, 5] {
                let h = r / 2;
                let mut acc = [0.0; 5];
                let mut n = 0.0;
                for q in 0..36usize {
                    let (rr, cc) = (q as i64 / 6, q as i64 % 6);
                    if (rr - r0).abs() <= h && (cc - c0).abs() <= h {
                        let d: f64 = (0..5).map(|k| (feat.get(q, k) - feat.get(m, k)).powi(2)).sum();
                        let w = (-d.sqrt()).exp();
                        for k in 0..5 {
                            acc[k] += w * feat.get(q, k);
                        }
                        n += 1.0;
                    }
                }
                for k in 0..5 {
                    fused[k] += acc[k] / n / 3.0;
                }
            }
            for k in 0..5 {
                assert!((out.stages[0].get(m, k) - fused[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn high_curvature_groups_use_degree_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let feat = random_matrix(10, 4, &mut rng);
        let centers: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        let mut flags = vec![false; 10];
        flags[3] = true;
        let stack = PatchFeatureStack::cloud(vec![feat.clone()], centers.clone(), flags).unwrap();
        let out = aggregate_stack(&stack, &[1, 3, 5]).unwrap();
        assert_eq!(out.stages[0].row(3), feat.row(3));
        assert_ne!(out.stages[0].row(4), feat.row(4));
    }

    #[test]
    fn anti_dilution_against_mean_pool() {
        let side = 7;
        let mut data = vec![1.0f64; side * side * 2];
        for i in 0..side * side {
            data[2 * i + 1] = 0.0;
        }
        let outlier = 24;
        // outlier offset orthogonal to the prototype
        data[2 * outlier + 1] = 5.0;
        let feat = Matrix::from_vec(side * side, 2, data).unwrap();
        let proto = [1.0, 0.0];
        for r in [3, 5] {
            let idx = neighborhood_2d(side, outlier, r).unwrap();
            let sw = swpool(feat.row(outlier), idx.iter().map(|&q| feat.row(q)));
            let avg = mean_pool(idx.iter().map(|&q| feat.row(q)), 2);
            assert!(squared_distance(&sw, &proto) > squared_distance(&avg, &proto));
        }
    }
}
