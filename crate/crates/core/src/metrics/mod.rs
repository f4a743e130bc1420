//! Surface distance, image similarity, correlation helpers and fit evaluation.

mod distance;
mod eval;

pub use distance::{
    closest_point_on_triangle, directed_hausdorff, hausdorff, hausdorff_brute_force,
    point_triangle_distance_sq, SurfaceIndex,
};
pub use eval::{evaluate_fit, periodicity_error, EvalConfig, EvalReport, FrameMetrics, GroundTruth};

use thiserror::Error;

use crate::flow::FlowError;
use crate::mesh::MeshError;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mesh has no vertices or faces")]
    EmptyMesh,
    #[error("frames differ in size: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("reference frame is all zero; PSNR peak is undefined")]
    ZeroPeak,
    #[error("ground truth needs the mesh at t = 0")]
    MissingInitialMesh,
    #[error("ground truth lists {meshes} meshes for {frames} frames")]
    FrameCount { meshes: usize, frames: usize },
    #[error("need at least 2 values of equal length, got {0} and {1}")]
    SeriesLength(usize, usize),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// `10 log10(peak² / MSE)` with `peak` the maximum of the reference `b`.
/// Identical inputs give `+∞`.
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64, MetricsError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MetricsError::ShapeMismatch(a.len(), b.len()));
    }
    let peak = b.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
    if !(peak > 0.0) {
        return Err(MetricsError::ZeroPeak);
    }
    psnr_with_peak(a, b, peak)
}

/// PSNR with an explicit peak intensity.
pub fn psnr_with_peak(a: &[f32], b: &[f32], peak: f64) -> Result<f64, MetricsError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MetricsError::ShapeMismatch(a.len(), b.len()));
    }
    if !(peak > 0.0) {
        return Err(MetricsError::ZeroPeak);
    }
    let sse: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    let mse = sse / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn check_series(x: &[f64], y: &[f64]) -> Result<(), MetricsError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(MetricsError::SeriesLength(x.len(), y.len()));
    }
    Ok(())
}

/// Pearson correlation; `NaN` when either series is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_series(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_series(x, y)?;
    pearson(&ranks(x), &ranks(y))
}
