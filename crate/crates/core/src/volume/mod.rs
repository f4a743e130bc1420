//! 4D image container, coordinate normalization and differentiable
//! trilinear sampling.

mod io;
mod sphere;

pub use io::{from_v4d_bytes, read_v4d, to_v4d_bytes, write_v4d, V4D_MAGIC};
pub use sphere::{make_sphere_series, radius_at, GrowthKind, GrowthPattern, SphereSeries, SphereSeriesConfig};

use thiserror::Error;

use crate::real::Real;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("bad magic at offset {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported container version {0:?}")]
    UnsupportedVersion(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("sphere of radius {radius_mm} mm does not fit in the grid (half extent {half_extent_mm} mm)")]
    SphereExceedsGrid { radius_mm: f64, half_extent_mm: f64 },
    #[error("growth pattern yields non-positive radius {radius} at t = {t}")]
    NonPositiveRadius { t: f64, radius: f64 },
    #[error("invalid sphere series parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `N` scalar frames sharing one grid. Frames are stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D {
    shape: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    frame_times: Vec<f64>,
    frames: Vec<Vec<f32>>,
}

impl Volume4D {
    /// `shape` is `[nx, ny, nz]`, `origin` the world position of voxel `(0,0,0)`.
    pub fn new(
        shape: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        frame_times: Vec<f64>,
        frames: Vec<Vec<f32>>,
    ) -> Result<Self, VolumeError> {
        let invalid = |m: String| Err(VolumeError::Invalid(m));
        if shape.iter().any(|&n| n < 2) {
            return invalid(format!("every axis needs at least 2 voxels, got {shape:?}"));
        }
        if !spacing.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return invalid(format!("spacing must be positive, got {spacing:?}"));
        }
        if !origin.iter().all(|o| o.is_finite()) {
            return invalid("origin must be finite".into());
        }
        if frames.len() < 2 {
            return invalid(format!("need at least 2 frames, got {}", frames.len()));
        }
        if frames.len() != frame_times.len() {
            return invalid(format!(
                "{} frames but {} frame times",
                frames.len(),
                frame_times.len()
            ));
        }
        let voxels = shape[0] * shape[1] * shape[2];
        if let Some(i) = frames.iter().position(|f| f.len() != voxels) {
            return invalid(format!("frame {i} does not match shape {shape:?}"));
        }
        if frame_times[0] != 0.0 || *frame_times.last().unwrap() != 1.0 {
            return invalid("frame times must start at 0 and end at 1".into());
        }
        if frame_times.windows(2).any(|w| !(w[1] > w[0])) {
            return invalid("frame times must be strictly increasing".into());
        }
        Ok(Self {
            shape,
            spacing,
            origin,
            frame_times,
            frames,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn frame_times(&self) -> &[f64] {
        &self.frame_times
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// Normalized period; frame times always span exactly one.
    pub fn period(&self) -> f64 {
        1.0
    }

    pub fn frame(&self, i: usize) -> Frame<'_> {
        Frame {
            data: &self.frames[i],
            shape: self.shape,
        }
    }

    pub fn frames(&self) -> impl Iterator<Item = Frame<'_>> {
        (0..self.frames.len()).map(|i| self.frame(i))
    }

    pub fn normalizer(&self) -> DomainNormalizer {
        let hi = [0, 1, 2].map(|d| self.origin[d] + (self.shape[d] - 1) as f64 * self.spacing[d]);
        DomainNormalizer {
            lo: self.origin,
            hi,
        }
    }

    pub(crate) fn raw_frames(&self) -> &[Vec<f32>] {
        &self.frames
    }
}

/// Borrowed view of one 3D frame.
#[derive(Debug, Clone, Copy)]
pub struct Frame<'a> {
    data: &'a [f32],
    shape: [usize; 3],
}

impl<'a> Frame<'a> {
    pub fn new(data: &'a [f32], shape: [usize; 3]) -> Self {
        assert_eq!(data.len(), shape[0] * shape[1] * shape[2]);
        assert!(shape.iter().all(|&n| n >= 2));
        Self { data, shape }
    }

    pub fn data(&self) -> &'a [f32] {
        self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn voxel(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[x + self.shape[0] * (y + self.shape[1] * z)]
    }

    /// Normalized coordinate of voxel center `(x, y, z)`.
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let idx = [x, y, z];
        [0, 1, 2].map(|d| 2.0 * idx[d] as f64 / (self.shape[d] - 1) as f64 - 1.0)
    }

    /// Trilinear value and its gradient with respect to the normalized point.
    ///
    /// Coordinates outside `[-1, 1]` are clamped to the border; the gradient
    /// along a clamped axis is zero.
    pub fn sample<T: Real>(&self, p: [T; 3]) -> (T, [T; 3]) {
        let half = T::from_f64_lossy(0.5);
        let mut base = [0usize; 3];
        let mut frac = [T::zero(); 3];
        let mut inside = [true; 3];
        let mut dfdu = [T::zero(); 3];
        for d in 0..3 {
            let n1 = T::from_usize(self.shape[d] - 1).unwrap();
            dfdu[d] = half * n1;
            let mut f = (p[d] + T::one()) * half * n1;
            if !(f >= T::zero()) {
                f = T::zero();
                inside[d] = false;
            } else if f > n1 {
                f = n1;
                inside[d] = false;
            }
            let i0 = f.floor().to_usize().unwrap().min(self.shape[d] - 2);
            base[d] = i0;
            frac[d] = f - T::from_usize(i0).unwrap();
        }
        let c = |dx: usize, dy: usize, dz: usize| {
            T::from_f32(self.voxel(base[0] + dx, base[1] + dy, base[2] + dz)).unwrap()
        };
        let [fx, fy, fz] = frac;
        let (gx, gy, gz) = (T::one() - fx, T::one() - fy, T::one() - fz);
        let (c000, c100, c010, c110) = (c(0, 0, 0), c(1, 0, 0), c(0, 1, 0), c(1, 1, 0));
        let (c001, c101, c011, c111) = (c(0, 0, 1), c(1, 0, 1), c(0, 1, 1), c(1, 1, 1));
        // interpolate along x, then y, then z
        let c00 = c000 * gx + c100 * fx;
        let c10 = c010 * gx + c110 * fx;
        let c01 = c001 * gx + c101 * fx;
        let c11 = c011 * gx + c111 * fx;
        let c0 = c00 * gy + c10 * fy;
        let c1 = c01 * gy + c11 * fy;
        let value = c0 * gz + c1 * fz;

        let dx = ((c100 - c000) * gy + (c110 - c010) * fy) * gz + ((c101 - c001) * gy + (c111 - c011) * fy) * fz;
        let dy = (c10 - c00) * gz + (c11 - c01) * fz;
        let dz = c1 - c0;
        let mut grad = [dx, dy, dz];
        for d in 0..3 {
            grad[d] = if inside[d] { grad[d] * dfdu[d] } else { T::zero() };
        }
        (value, grad)
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

/// Linear map between world millimeters and `[-1, 1]³`; the voxel centers
/// at both ends of each axis map to -1 and +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainNormalizer {
    lo: [f64; 3],
    hi: [f64; 3],
}

impl DomainNormalizer {
    pub fn new(lo: [f64; 3], hi: [f64; 3]) -> Self {
        assert!((0..3).all(|d| hi[d] > lo[d]), "empty domain");
        Self { lo, hi }
    }

    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        (self.lo, self.hi)
    }

    pub fn to_normalized(&self, w: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|d| 2.0 * (w[d] - self.lo[d]) / (self.hi[d] - self.lo[d]) - 1.0)
    }

    pub fn to_world(&self, u: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|d| self.lo[d] + 0.5 * (u[d] + 1.0) * (self.hi[d] - self.lo[d]))
    }

    /// Converts a displacement in normalized units to millimeters.
    pub fn vector_to_world(&self, u: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|d| 0.5 * u[d] * (self.hi[d] - self.lo[d]))
    }

    pub fn contains_world(&self, w: [f64; 3], slack: f64) -> bool {
        let u = self.to_normalized(w);
        u.iter().all(|c| c.abs() <= 1.0 + slack)
    }
}
