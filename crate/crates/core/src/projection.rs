//! Deterministic 2-D projection of context trajectories.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Loadings below this magnitude count as zero for the sign convention.
const SIGN_EPS: f64 = 1e-12;

/// Principal axes of a point set, strongest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit axes; each one's first loading above `SIGN_EPS` in magnitude is positive.
    pub axes: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

impl Pca {
    /// Fits up to `k` axes from the covariance of the mean-centered points.
    pub fn fit(points: &[Vec<f64>], k: usize) -> Result<Pca> {
        let n = points.len();
        if n == 0 {
            return Err(Error::Evaluation("cannot project an empty point set".into()));
        }
        let d = points[0].len();
        if d == 0 || points.iter().any(|p| p.len() != d) {
            return Err(Error::Evaluation("points must share a nonzero dimension".into()));
        }
        if points.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Evaluation("points must be finite".into()));
        }
        let mean: Vec<f64> = (0..d)
            .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64)
            .collect();
        let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
        let cov = centered.transpose() * &centered / n as f64;
        let eig = SymmetricEigen::new(cov);

        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let (axes, variances) = order
            .into_iter()
            .take(k.min(d))
            .map(|c| {
                let mut axis: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
                if axis.iter().find(|v| v.abs() > SIGN_EPS).is_some_and(|&v| v < 0.0) {
                    axis.iter_mut().for_each(|v| *v = -*v);
                }
                (axis, eig.eigenvalues[c].max(0.0))
            })
            .unzip();
        Ok(Pca { mean, axes, variances })
    }

    /// Coordinates of `point` along each axis.
    pub fn project(&self, point: &[f64]) -> Vec<f64> {
        self.axes
            .iter()
            .map(|a| a.iter().zip(point).zip(&self.mean).map(|((w, x), m)| w * (x - m)).sum())
            .collect()
    }
}

/// Projects points onto their top two principal axes. A missing second axis
/// (one-dimensional input) gives `y = 0`.
pub fn project_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let pca = Pca::fit(points, 2)?;
    Ok(points
        .iter()
        .map(|p| {
            let c = pca.project(p);
            [c[0], c.get(1).copied().unwrap_or(0.0)]
        })
        .collect())
}

/// One projected context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    /// Context index: 0 is the leading context, k closes utterance k.
    pub k: usize,
    pub x: f64,
    pub y: f64,
    /// Speaker of the utterance the context closes (`start` for k = 0).
    pub speaker: String,
}

/// Builds trajectory points from contexts and the speakers of the utterances
/// they close (`speakers.len() + 1 == contexts.len()`).
pub fn trajectory(contexts: &[Vec<f64>], speakers: &[String]) -> Result<Vec<TrajectoryPoint>> {
    if contexts.len() != speakers.len() + 1 {
        return Err(Error::Contract(format!(
            "{} contexts for {} utterances",
            contexts.len(),
            speakers.len()
        )));
    }
    let xy = project_2d(contexts)?;
    Ok(xy
        .into_iter()
        .enumerate()
        .map(|(k, [x, y])| TrajectoryPoint {
            k,
            x,
            y,
            speaker: if k == 0 {
                "start".to_string()
            } else {
                speakers[k - 1].clone()
            },
        })
        .collect())
}
