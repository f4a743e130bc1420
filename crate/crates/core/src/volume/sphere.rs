//! Synthetic phantom: a centered sphere whose radius follows a known growth
//! law, rendered as soft occupancy frames plus a matching icosphere per frame.

use serde::{Deserialize, Serialize};

use super::{Volume4D, VolumeError};
use crate::mesh::TriangleMesh;
use crate::neural_field::encode_time;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrowthKind {
    Linear,
    Exponential,
    Periodic,
}

impl std::str::FromStr for GrowthKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Self::Linear),
            "exponential" => Ok(Self::Exponential),
            "periodic" => Ok(Self::Periodic),
            other => Err(format!("unknown growth pattern {other:?}")),
        }
    }
}

/// `linear`: `r0 (1 + rate t)`; `exponential`: `r0 exp(rate t)`;
/// `periodic`: `r0 + amplitude sin(2π t / period)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthPattern {
    pub kind: GrowthKind,
    pub base_radius_mm: f64,
    /// Growth rate for linear/exponential, amplitude in mm for periodic.
    pub parameter: f64,
    pub period: f64,
}

impl GrowthPattern {
    pub fn linear(base_radius_mm: f64, rate: f64) -> Self {
        Self {
            kind: GrowthKind::Linear,
            base_radius_mm,
            parameter: rate,
            period: 1.0,
        }
    }

    pub fn exponential(base_radius_mm: f64, rate: f64) -> Self {
        Self {
            kind: GrowthKind::Exponential,
            base_radius_mm,
            parameter: rate,
            period: 1.0,
        }
    }

    pub fn periodic(base_radius_mm: f64, amplitude_mm: f64) -> Self {
        Self {
            kind: GrowthKind::Periodic,
            base_radius_mm,
            parameter: amplitude_mm,
            period: 1.0,
        }
    }
}

/// Sphere radius in mm at normalized time `t`.
pub fn radius_at(pattern: &GrowthPattern, t: f64) -> Result<f64, VolumeError> {
    let r0 = pattern.base_radius_mm;
    let radius = match pattern.kind {
        GrowthKind::Linear => r0 * (1.0 + pattern.parameter * t),
        GrowthKind::Exponential => r0 * (pattern.parameter * t).exp(),
        GrowthKind::Periodic => {
            // the phase-exact encoder makes r(0) and r(period) identical
            let (_, s) = encode_time(t, pattern.period)
                .map_err(|e| VolumeError::InvalidParameter(e.to_string()))?;
            r0 + pattern.parameter * s
        }
    };
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(VolumeError::NonPositiveRadius { t, radius });
    }
    Ok(radius)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereSeriesConfig {
    pub pattern: GrowthPattern,
    /// Voxels per axis (cubic grid).
    pub grid: usize,
    pub spacing_mm: f64,
    pub frames: usize,
    /// Width of the linear intensity ramp across the sphere boundary.
    pub edge_width_mm: f64,
    pub subdivisions: u32,
}

impl SphereSeriesConfig {
    /// Defaults scaled to the grid: base radius 20% of the grid width,
    /// periodic amplitude 40% of it, growth rates that keep the largest
    /// sphere inside, 2-voxel ramp.
    pub fn for_pattern(kind: GrowthKind, grid: usize, frames: usize) -> Self {
        let spacing_mm = 1.0;
        let r0 = 0.2 * grid as f64 * spacing_mm;
        let pattern = match kind {
            GrowthKind::Linear => GrowthPattern::linear(r0, 0.5),
            GrowthKind::Exponential => GrowthPattern::exponential(r0, 0.4),
            GrowthKind::Periodic => GrowthPattern::periodic(r0, 0.4 * r0),
        };
        Self {
            pattern,
            grid,
            spacing_mm,
            frames,
            edge_width_mm: 2.0 * spacing_mm,
            subdivisions: 4,
        }
    }

    /// Rescales every length (spacing, radius, ramp, periodic amplitude) so
    /// the voxel spacing becomes `spacing_mm`.
    pub fn with_spacing(mut self, spacing_mm: f64) -> Self {
        let f = spacing_mm / self.spacing_mm;
        self.spacing_mm = spacing_mm;
        self.edge_width_mm *= f;
        self.pattern.base_radius_mm *= f;
        if self.pattern.kind == GrowthKind::Periodic {
            self.pattern.parameter *= f;
        }
        self
    }

    pub fn center(&self) -> [f64; 3] {
        [0.5 * (self.grid - 1) as f64 * self.spacing_mm; 3]
    }

    pub fn frame_times(&self) -> Vec<f64> {
        let last = (self.frames - 1) as f64;
        (0..self.frames).map(|i| i as f64 / last).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SphereSeries {
    pub volume: Volume4D,
    pub meshes: Vec<TriangleMesh>,
    pub radii_mm: Vec<f64>,
}

pub fn make_sphere_series(config: &SphereSeriesConfig) -> Result<SphereSeries, VolumeError> {
    let bad = |m: &str| Err(VolumeError::InvalidParameter(m.to_string()));
    if config.frames < 2 {
        return bad("need at least 2 frames");
    }
    if config.grid < 4 {
        return bad("grid must have at least 4 voxels per axis");
    }
    if !(config.spacing_mm > 0.0) {
        return bad("spacing must be positive");
    }
    if !(config.edge_width_mm > 0.0) {
        return bad("edge width must be positive");
    }
    if !(config.pattern.base_radius_mm > 0.0) {
        return bad("base radius must be positive");
    }
    let times = config.frame_times();
    let radii = times
        .iter()
        .map(|&t| radius_at(&config.pattern, t))
        .collect::<Result<Vec<_>, _>>()?;
    let half_extent = 0.5 * (config.grid - 1) as f64 * config.spacing_mm;
    let max_r = radii.iter().copied().fold(0.0, f64::max);
    if max_r + 0.5 * config.edge_width_mm > half_extent {
        return Err(VolumeError::SphereExceedsGrid {
            radius_mm: max_r,
            half_extent_mm: half_extent,
        });
    }

    let n = config.grid;
    let center = config.center();
    // distance of every voxel center to the sphere center, shared by all frames
    let mut dist = Vec::with_capacity(n * n * n);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let p = [x, y, z].map(|i| i as f64 * config.spacing_mm);
                let d2: f64 = (0..3).map(|d| (p[d] - center[d]).powi(2)).sum();
                dist.push(d2.sqrt());
            }
        }
    }
    let w = config.edge_width_mm;
    let frames = radii
        .iter()
        .map(|&r| {
            dist.iter()
                .map(|&d| (0.5 - (d - r) / w).clamp(0.0, 1.0) as f32)
                .collect()
        })
        .collect();
    let volume = Volume4D::new([n; 3], [config.spacing_mm; 3], [0.0; 3], times, frames)?;
    let meshes = radii
        .iter()
        .map(|&r| TriangleMesh::icosphere(config.subdivisions, r, center))
        .collect();
    Ok(SphereSeries {
        volume,
        meshes,
        radii_mm: radii,
    })
}
