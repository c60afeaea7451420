//! Re-scoring with a constrained neighborhood (RsCon): sample-level scores are
//! pulled halfway towards the similarity-weighted mean of each sample's `k`
//! most similar peers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::scalar::{cmp_finite, l2_norm, Scalar};
use crate::snamd::PatchFeatureStack;

#[derive(Debug, Error, PartialEq)]
pub enum RsconError {
    #[error("salient features need at least 2 stages, got {0}")]
    StageCountTooSmall(usize),
    #[error("window size {k} invalid for {n} samples")]
    WindowTooLarge { k: usize, n: usize },
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

/// Penultimate-stage feature row of the highest-scoring patch (first on ties).
pub fn salient_feature<T: Scalar>(stack: &PatchFeatureStack<T>, patch_scores: &[T]) -> Result<Vec<T>, RsconError> {
    let s = stack.num_stages();
    if s < 2 {
        return Err(RsconError::StageCountTooSmall(s));
    }
    if patch_scores.len() != stack.num_patches() || patch_scores.is_empty() {
        return Err(RsconError::LengthMismatch {
            left: patch_scores.len(),
            right: stack.num_patches(),
        });
    }
    let best = argmax(patch_scores);
    Ok(stack.stages[s - 2].row(best).to_vec())
}

pub(crate) fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn normalized<T: Scalar>(v: &[T]) -> Vec<T> {
    let n = l2_norm(v);
    if n > T::zero() {
        v.iter().map(|&x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Normalizes each modality's feature, concatenates, and normalizes the result.
pub fn combine_features<T: Scalar>(parts: &[Vec<T>]) -> Vec<T> {
    let joined: Vec<T> = parts.iter().flat_map(|p| normalized(p)).collect();
    normalized(&joined)
}

/// Clamped dot-product similarity with a zero diagonal.
pub fn similarity_graph<T: Scalar>(features: &Matrix<T>) -> Result<Matrix<T>, RsconError> {
    let n = features.rows();
    if n < 2 {
        return Err(RsconError::TooFewSamples(n));
    }
    let data: Vec<T> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let fi = features.row(i);
            (0..n).map(move |j| {
                if i == j {
                    return T::zero();
                }
                let dot = fi.iter().zip(features.row(j)).fold(T::zero(), |a, (&x, &y)| a + x * y);
                dot.max(T::zero())
            })
        })
        .collect();
    Ok(Matrix::from_vec(n, n, data).expect("square"))
}

/// For each sample, the `k` most similar other samples (ties by smaller index),
/// listed by decreasing similarity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowMask {
    pub neighbors: Vec<Vec<usize>>,
}

impl WindowMask {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].contains(&j)
    }

    /// Mask with every off-diagonal entry set.
    pub fn full(n: usize) -> Self {
        Self {
            neighbors: (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect(),
        }
    }

    pub fn to_dense<T: Scalar>(&self) -> Matrix<T> {
        let n = self.neighbors.len();
        let mut m = Matrix::zeros(n, n);
        for (i, row) in self.neighbors.iter().enumerate() {
            for &j in row {
                m.set(i, j, T::one());
            }
        }
        m
    }
}

pub fn window_mask<T: Scalar>(w: &Matrix<T>, k: usize) -> Result<WindowMask, RsconError> {
    let n = w.rows();
    if k == 0 || k + 1 > n {
        return Err(RsconError::WindowTooLarge { k, n });
    }
    let neighbors = (0..n)
        .map(|i| {
            let mut cand: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            cand.sort_by(|&a, &b| cmp_finite(&w.get(i, b), &w.get(i, a)).then(a.cmp(&b)));
            cand.truncate(k);
            cand
        })
        .collect();
    Ok(WindowMask { neighbors })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rescored<T> {
    pub scores: Vec<T>,
    /// Samples whose masked similarity mass was zero; they keep their score.
    pub isolated: Vec<usize>,
}

/// `C_hat = (D^-1 (M * W) C + C) / 2`, evaluated as a dense masked mat-vec.
pub fn rescore<T: Scalar>(c: &[T], w: &Matrix<T>, mask: &WindowMask) -> Result<Rescored<T>, RsconError> {
    let n = c.len();
    if w.rows() != n || w.cols() != n || mask.neighbors.len() != n {
        return Err(RsconError::LengthMismatch { left: n, right: w.rows() });
    }
    let m: Matrix<T> = mask.to_dense();
    let half = T::lit(0.5);
    let mut scores = Vec::with_capacity(n);
    let mut isolated = Vec::new();
    for i in 0..n {
        let mut mass = T::zero();
        let mut acc = T::zero();
        for j in 0..n {
            let mw = m.get(i, j) * w.get(i, j);
            mass = mass + mw;
            acc = acc + mw * c[j];
        }
        if mass > T::zero() {
            scores.push(half * (acc / mass + c[i]));
        } else {
            isolated.push(i);
            scores.push(c[i]);
        }
    }
    Ok(Rescored { scores, isolated })
}

/// Per-sample audit record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RsconRecord {
    pub sample: usize,
    pub c: f64,
    pub c_hat: f64,
    pub neighbors: Vec<usize>,
    pub weights: Vec<f64>,
    pub isolated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RsconOutcome<T> {
    pub scores: Vec<T>,
    pub records: Vec<RsconRecord>,
}

/// Full RsCon pass over one set of samples. Fewer than two samples, or
/// `k = 0`, leave scores unchanged; `k` is capped at `n - 1`.
pub fn rescon<T: Scalar>(features: &Matrix<T>, c: &[T], k: usize) -> Result<RsconOutcome<T>, RsconError> {
    let n = c.len();
    if features.rows() != n {
        return Err(RsconError::LengthMismatch {
            left: features.rows(),
            right: n,
        });
    }
    let identity = |scores: Vec<T>| RsconOutcome {
        records: scores
            .iter()
            .enumerate()
            .map(|(i, &s)| RsconRecord {
                sample: i,
                c: s.as_f64(),
                c_hat: s.as_f64(),
                neighbors: Vec::new(),
                weights: Vec::new(),
                isolated: true,
            })
            .collect(),
        scores,
    };
    if n < 2 || k == 0 {
        return Ok(identity(c.to_vec()));
    }
    let w = similarity_graph(features)?;
    let mask = window_mask(&w, k.min(n - 1))?;
    let out = rescore(c, &w, &mask)?;
    let records = (0..n)
        .map(|i| RsconRecord {
            sample: i,
            c: c[i].as_f64(),
            c_hat: out.scores[i].as_f64(),
            neighbors: mask.neighbors[i].clone(),
            weights: mask.neighbors[i].iter().map(|&j| w.get(i, j).as_f64()).collect(),
            isolated: out.isolated.contains(&i),
        })
        .collect();
    Ok(RsconOutcome {
        scores: out.scores,
        records,
    })
}
