use nalgebra::{DMatrix, SymmetricEigen};

use super::{ScoreVector, NUM_BANDS};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PcaProjection {
    pub points: Vec<[f64; 2]>,
    /// Eigenvalues of the two leading axes, in descending order.
    pub explained_variance: [f64; 2],
    /// Unit loading vectors of the two leading axes.
    pub axes: [Vec<f64>; 2],
    pub mean: Vec<f64>,
}

/// Feature rows of the bands present in every vector, followed by the total.
pub fn score_features(scores: &[ScoreVector]) -> Result<Vec<Vec<f64>>> {
    let shared: Vec<usize> = (0..NUM_BANDS)
        .filter(|&b| !scores.is_empty() && scores.iter().all(|s| s.band_scores[b].is_some()))
        .collect();
    if shared.is_empty() && !scores.is_empty() {
        return Err(Error::NoOverlappingBands);
    }
    Ok(scores
        .iter()
        .map(|s| {
            let mut row: Vec<f64> = shared.iter().map(|&b| s.band_scores[b].expect("shared band")).collect();
            row.push(s.total_score);
            row
        })
        .collect())
}

/// Mean-centered projection onto the two leading principal axes of the
/// sample covariance (divisor `n − 1`). Each axis is signed so its
/// largest-magnitude loading is positive.
pub fn pca_project(rows: &[Vec<f64>]) -> Result<PcaProjection> {
    let n = rows.len();
    if n < 3 {
        return Err(Error::InvalidParams(format!("PCA needs at least 3 vectors, got {n}")));
    }
    let dim = rows[0].len();
    if dim == 0 || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::InvalidParams("PCA rows must share a positive dimension".into()));
    }
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, dim, |i, j| rows[i][j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n - 1) as f64;
    if cov.trace() <= 0.0 {
        return Err(Error::Degenerate("all score vectors are identical".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let axis = |k: usize| -> (Vec<f64>, f64) {
        let Some(&col) = order.get(k) else {
            return (vec![0.0; dim], 0.0);
        };
        let mut v: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        (v, eig.eigenvalues[col].max(0.0))
    };
    let (a1, l1) = axis(0);
    let (a2, l2) = axis(1);
    let points = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let dot = |a: &[f64]| row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
            [dot(&a1), dot(&a2)]
        })
        .collect();
    Ok(PcaProjection {
        points,
        explained_variance: [l1, l2],
        axes: [a1, a2],
        mean,
    })
}
