//! Explicit Euler integration of a velocity field.
//!
//! Every integrator walks an explicit time grid, `x_{k+1} = x_k + (t_{k+1} -
//! t_k) v(x_k, t_k)`. Integrating a prefix and then the matching suffix of a
//! grid therefore performs exactly the same floating-point operations as the
//! full pass. A decreasing grid integrates backward in time.

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape};
use crate::mesh::{MeshError, TriangleMesh};
use crate::neural_field::{ModelError, ParamNodes, VelocityFieldModel};
use crate::real::Real;
use crate::volume::DomainNormalizer;

/// Positions outside `[-DOMAIN_SLACK, DOMAIN_SLACK]³` are logged.
pub const DOMAIN_SLACK: f64 = 1.5;

/// Points per independently integrated block in parallel evaluation.
const PAR_CHUNK: usize = 512;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("non-finite velocity at integration step {step}")]
    NonFiniteVelocity { step: usize },
    #[error("need at least one integration step")]
    NoSteps,
    #[error("invalid time grid: {0}")]
    TimeGrid(String),
    #[error("non-finite seed position at point {0}")]
    NonFiniteSeed(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// A velocity field in normalized coordinates.
pub trait VelocityField<T: Real>: Sync {
    fn velocity(&self, points: &[[T; 3]], t: f64) -> Result<Vec<[T; 3]>, FlowError>;
}

impl<T: Real> VelocityField<T> for VelocityFieldModel<T> {
    fn velocity(&self, points: &[[T; 3]], t: f64) -> Result<Vec<[T; 3]>, FlowError> {
        Ok(VelocityFieldModel::velocity(self, points, t)?)
    }
}

/// Analytic field evaluated point by point in double precision.
pub struct PointwiseField<F>(pub F);

impl<T: Real, F> VelocityField<T> for PointwiseField<F>
where
    F: Fn([f64; 3], f64) -> [f64; 3] + Sync,
{
    fn velocity(&self, points: &[[T; 3]], t: f64) -> Result<Vec<[T; 3]>, FlowError> {
        Ok(points
            .iter()
            .map(|p| {
                let v = (self.0)(p.map(|c| c.to_f64_lossy()), t);
                v.map(T::from_f64_lossy)
            })
            .collect())
    }
}

/// Positions of every seed at every grid time, stored step-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    times: Vec<f64>,
    positions: Vec<Vec<[T; 3]>>,
}

impl<T: Real> Trajectory<T> {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn num_points(&self) -> usize {
        self.positions[0].len()
    }

    /// All positions at grid index `k`; index 0 holds the seeds.
    pub fn at_step(&self, k: usize) -> &[[T; 3]] {
        &self.positions[k]
    }

    pub fn seeds(&self) -> &[[T; 3]] {
        &self.positions[0]
    }

    pub fn end(&self) -> &[[T; 3]] {
        self.positions.last().unwrap()
    }

    pub fn position(&self, point: usize, step: usize) -> [T; 3] {
        self.positions[step][point]
    }

    /// CSV rows `point_id,step,t,x,y,z` with positions in world mm.
    pub fn to_csv(&self, normalizer: &DomainNormalizer) -> String {
        let mut out = String::from("point_id,step,t,x,y,z\n");
        for p in 0..self.num_points() {
            for (k, &t) in self.times.iter().enumerate() {
                let w = normalizer.to_world(self.positions[k][p].map(|c| c.to_f64_lossy()));
                out.push_str(&format!("{p},{k},{t},{},{},{}\n", w[0], w[1], w[2]));
            }
        }
        out
    }
}

/// `steps + 1` equally spaced times from `t_start` to `t_end`, endpoints exact.
pub fn uniform_grid(t_start: f64, t_end: f64, steps: usize) -> Result<Vec<f64>, FlowError> {
    if steps == 0 {
        return Err(FlowError::NoSteps);
    }
    if !(t_start.is_finite() && t_end.is_finite()) || t_start == t_end {
        return Err(FlowError::TimeGrid(format!(
            "cannot span [{t_start}, {t_end}]"
        )));
    }
    let mut grid: Vec<f64> = (0..steps)
        .map(|k| t_start + (t_end - t_start) * k as f64 / steps as f64)
        .collect();
    grid.push(t_end);
    Ok(grid)
}

/// Integration grid whose step boundaries include every frame time, with
/// `steps_per_frame` equal sub-steps between consecutive frames. Frame `i`
/// sits at grid index `i * steps_per_frame`.
pub fn frame_grid(frame_times: &[f64], steps_per_frame: usize) -> Result<Vec<f64>, FlowError> {
    if steps_per_frame == 0 {
        return Err(FlowError::NoSteps);
    }
    if frame_times.len() < 2 {
        return Err(FlowError::TimeGrid("need at least two frame times".into()));
    }
    if !frame_times.windows(2).all(|w| w[1] > w[0]) {
        return Err(FlowError::TimeGrid("frame times must be strictly increasing".into()));
    }
    let mut grid = Vec::with_capacity((frame_times.len() - 1) * steps_per_frame + 1);
    for w in frame_times.windows(2) {
        let seg = uniform_grid(w[0], w[1], steps_per_frame)?;
        grid.extend_from_slice(&seg[..steps_per_frame]);
    }
    grid.push(*frame_times.last().unwrap());
    Ok(grid)
}

fn check_grid(grid: &[f64]) -> Result<(), FlowError> {
    if grid.len() < 2 {
        return Err(FlowError::NoSteps);
    }
    let inc = grid.windows(2).all(|w| w[1] > w[0]);
    let dec = grid.windows(2).all(|w| w[1] < w[0]);
    if !(inc || dec) || !grid.iter().all(|t| t.is_finite()) {
        return Err(FlowError::TimeGrid("grid must be strictly monotone".into()));
    }
    Ok(())
}

fn warn_outside_slack<T: Real>(points: &[[T; 3]], step: usize) {
    let limit = T::from_f64_lossy(DOMAIN_SLACK);
    let outside = points
        .iter()
        .filter(|p| p.iter().any(|c| c.abs() > limit))
        .count();
    if outside > 0 {
        log::warn!("{outside} trajectories left the [-{DOMAIN_SLACK}, {DOMAIN_SLACK}]³ domain by step {step}");
    }
}

/// Integrates `seeds` along `grid`, retaining every intermediate position.
pub fn integrate_grid<T: Real, F: VelocityField<T> + ?Sized>(
    field: &F,
    seeds: &[[T; 3]],
    grid: &[f64],
) -> Result<Trajectory<T>, FlowError> {
    check_grid(grid)?;
    if let Some(i) = seeds.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
        return Err(FlowError::NonFiniteSeed(i));
    }
    let mut positions = Vec::with_capacity(grid.len());
    positions.push(seeds.to_vec());
    let mut warned = false;
    for (k, w) in grid.windows(2).enumerate() {
        let x = &positions[k];
        let v = field.velocity(x, w[0])?;
        if !v.iter().flatten().all(|c| c.is_finite()) {
            return Err(FlowError::NonFiniteVelocity { step: k });
        }
        let h = T::from_f64_lossy(w[1] - w[0]);
        let next: Vec<[T; 3]> = x
            .iter()
            .zip(&v)
            .map(|(p, v)| [0, 1, 2].map(|d| p[d] + h * v[d]))
            .collect();
        if !warned {
            warn_outside_slack(&next, k + 1);
            warned = next
                .iter()
                .any(|p| p.iter().any(|c| c.abs() > T::from_f64_lossy(DOMAIN_SLACK)));
        }
        positions.push(next);
    }
    Ok(Trajectory {
        times: grid.to_vec(),
        positions,
    })
}

/// `steps` uniform Euler steps from `t_start` to `t_end`.
pub fn integrate<T: Real, F: VelocityField<T> + ?Sized>(
    field: &F,
    seeds: &[[T; 3]],
    t_start: f64,
    t_end: f64,
    steps: usize,
) -> Result<Trajectory<T>, FlowError> {
    integrate_grid(field, seeds, &uniform_grid(t_start, t_end, steps)?)
}

/// Final positions only, integrating fixed-size blocks of points on up to
/// `workers` threads. The result does not depend on `workers`.
pub fn integrate_end_par<T: Real, F: VelocityField<T> + ?Sized>(
    field: &F,
    seeds: &[[T; 3]],
    grid: &[f64],
    workers: usize,
) -> Result<Vec<[T; 3]>, FlowError> {
    let run = |chunk: &[[T; 3]]| integrate_grid(field, chunk, grid).map(|tr| tr.end().to_vec());
    let blocks: Vec<Result<Vec<[T; 3]>, FlowError>> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("thread pool");
        pool.install(|| seeds.par_chunks(PAR_CHUNK).map(run).collect())
    } else {
        seeds.chunks(PAR_CHUNK).map(run).collect()
    };
    let mut out = Vec::with_capacity(seeds.len());
    for b in blocks {
        out.extend(b?);
    }
    Ok(out)
}

/// `φ_{t_i}(seeds)` for every frame time, indexed `[frame][point]`, from one
/// Euler pass over [`frame_grid`].
pub fn flow_at_frames<T: Real, F: VelocityField<T> + ?Sized>(
    field: &F,
    seeds: &[[T; 3]],
    frame_times: &[f64],
    steps_per_frame: usize,
) -> Result<Vec<Vec<[T; 3]>>, FlowError> {
    let traj = integrate_grid(field, seeds, &frame_grid(frame_times, steps_per_frame)?)?;
    Ok((0..frame_times.len())
        .map(|i| traj.at_step(i * steps_per_frame).to_vec())
        .collect())
}

/// Approximates `φ_t⁻¹(targets)` by integrating backward from `t` to 0.
pub fn inverse_map<T: Real, F: VelocityField<T> + ?Sized>(
    field: &F,
    targets: &[[T; 3]],
    t: f64,
    steps: usize,
) -> Result<Vec<[T; 3]>, FlowError> {
    if t == 0.0 {
        return Ok(targets.to_vec());
    }
    Ok(integrate(field, targets, t, 0.0, steps)?.end().to_vec())
}

/// Backward integration along the reversed prefix `grid[..=k]`, the exact
/// step boundaries a forward pass over `grid` used to reach index `k`.
pub fn inverse_map_on_grid<T: Real, F: VelocityField<T> + ?Sized>(
    field: &F,
    targets: &[[T; 3]],
    grid: &[f64],
    k: usize,
    workers: usize,
) -> Result<Vec<[T; 3]>, FlowError> {
    if k == 0 {
        return Ok(targets.to_vec());
    }
    let reversed: Vec<f64> = grid[..=k].iter().rev().copied().collect();
    integrate_end_par(field, targets, &reversed, workers)
}

fn warn_outside_bounds(mesh: &TriangleMesh, normalizer: &DomainNormalizer) {
    let outside = mesh
        .vertices()
        .iter()
        .filter(|&&v| !normalizer.contains_world(v, 0.0))
        .count();
    if outside > 0 {
        log::warn!("{outside} mesh vertices lie outside the volume bounds");
    }
}

/// Advects the vertices of a `t = 0` mesh along `grid`, returning the mesh at
/// each requested grid index. Each vertex moves by its denormalized
/// displacement, so a zero displacement reproduces it bit for bit.
pub fn deform_mesh_on_grid<T: Real, F: VelocityField<T> + ?Sized>(
    field: &F,
    mesh: &TriangleMesh,
    normalizer: &DomainNormalizer,
    grid: &[f64],
    indices: &[usize],
) -> Result<Vec<TriangleMesh>, FlowError> {
    warn_outside_bounds(mesh, normalizer);
    let seeds: Vec<[T; 3]> = mesh
        .vertices()
        .iter()
        .map(|&v| normalizer.to_normalized(v).map(T::from_f64_lossy))
        .collect();
    let traj = integrate_grid(field, &seeds, grid)?;
    indices
        .iter()
        .map(|&k| {
            let moved = mesh
                .vertices()
                .iter()
                .zip(traj.at_step(k).iter().zip(traj.seeds()))
                .map(|(&w, (p, p0))| {
                    let du = [0, 1, 2].map(|d| p[d].to_f64_lossy() - p0[d].to_f64_lossy());
                    let dw = normalizer.vector_to_world(du);
                    [0, 1, 2].map(|d| w[d] + dw[d])
                })
                .collect();
            Ok(mesh.with_vertices(moved)?)
        })
        .collect()
}

/// The `t = 0` mesh advected forward to time `t` in `steps` Euler steps.
pub fn deform_mesh<T: Real, F: VelocityField<T> + ?Sized>(
    field: &F,
    mesh: &TriangleMesh,
    t: f64,
    steps: usize,
    normalizer: &DomainNormalizer,
) -> Result<TriangleMesh, FlowError> {
    if t == 0.0 {
        return Ok(mesh.clone());
    }
    let grid = uniform_grid(0.0, t, steps)?;
    Ok(deform_mesh_on_grid(field, mesh, normalizer, &grid, &[steps])?.remove(0))
}

/// Records Euler integration of `seeds: [B, 3]` on `tape` and returns the
/// position node at every grid index.
pub fn integrate_on_tape<T: Real>(
    tape: &mut Tape<T>,
    model: &VelocityFieldModel<T>,
    params: &ParamNodes,
    seeds: NodeId,
    grid: &[f64],
) -> Result<Vec<NodeId>, FlowError> {
    check_grid(grid)?;
    let mut nodes = Vec::with_capacity(grid.len());
    nodes.push(seeds);
    for w in grid.windows(2) {
        let x = *nodes.last().unwrap();
        let v = model.velocity_on_tape(tape, params, x, w[0])?;
        let dx = tape.scale(v, T::from_f64_lossy(w[1] - w[0]))?;
        nodes.push(tape.add(x, dx)?);
    }
    Ok(nodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn seeds(n: usize) -> Vec<[f64; 3]> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        (0..n)
            .map(|_| [0; 3].map(|_: i32| rng.gen_range(-0.5..0.5)))
            .collect()
    }

    #[test]
    fn constant_field_is_exact() {
        let c = [0.5, -0.25, 0.125];
        let f = PointwiseField(move |_, _| c);
        let p = seeds(5);
        let tr = integrate(&f, &p, 0.0, 1.0, 4).unwrap();
        assert_eq!(tr.seeds(), &p[..]);
        for (a, b) in tr.end().iter().zip(&p) {
            assert_eq!(*a, [0, 1, 2].map(|d| b[d] + c[d]));
        }
        let moved: Vec<_> = tr.at_step(2).to_vec();
        let back = inverse_map(&f, &moved, 0.5, 2).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn linear_field_matches_euler_recursion() {
        let f = PointwiseField(|x: [f64; 3], _| x);
        let p = vec![[1.0, -2.0, 0.5]];
        for s in [1, 3, 10, 50] {
            let end = integrate(&f, &p, 0.0, 1.0, s).unwrap().end()[0];
            let g = (1.0 + 1.0 / s as f64).powi(s as i32);
            for d in 0..3 {
                assert!((end[d] - g * p[0][d]).abs() < 1e-12);
            }
        }
        let times: Vec<f64> = (0..5).map(|i| i as f64 / 4.0).collect();
        let frames = flow_at_frames(&f, &p, &times, 1).unwrap();
        for (k, fr) in frames.iter().enumerate() {
            let g = 1.25f64.powi(k as i32);
            assert!((fr[0][0] - g).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_field_is_identity() {
        let f = PointwiseField(|_, _| [0.0; 3]);
        let p = seeds(7);
        let frames = flow_at_frames(&f, &p, &[0.0, 1.0], 1).unwrap();
        assert_eq!(frames, vec![p.clone(), p.clone()]);
        assert_eq!(inverse_map(&f, &p, 0.7, 9).unwrap(), p);
        let mesh = TriangleMesh::icosphere(1, 5.0, [10.0; 3]);
        let norm = DomainNormalizer::new([0.0; 3], [20.0; 3]);
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(deform_mesh::<f64, _>(&f, &mesh, t, 7, &norm).unwrap(), mesh);
        }
    }

    #[test]
    fn frames_agree_with_plain_integration() {
        let f = PointwiseField(|x: [f64; 3], t: f64| [x[1] * t, -x[0], 0.3 * (t * 6.0).sin()]);
        let p = seeds(6);
        let times: Vec<f64> = (0..7).map(|i| i as f64 / 6.0).collect();
        let frames = flow_at_frames(&f, &p, &times, 3).unwrap();
        let grid = frame_grid(&times, 3).unwrap();
        let tr = integrate_grid(&f, &p, &grid).unwrap();
        for i in 0..times.len() {
            assert_eq!(frames[i], tr.at_step(3 * i));
        }
    }

    #[test]
    fn composition_on_shared_grid_is_bit_identical() {
        let f = PointwiseField(|x: [f64; 3], t: f64| [x[2].sin(), x[0] * t, -x[1]]);
        let p = seeds(10);
        let grid = uniform_grid(0.0, 1.0, 24).unwrap();
        let full = integrate_grid(&f, &p, &grid).unwrap();
        let first = integrate_grid(&f, &p, &grid[..=9]).unwrap();
        let second = integrate_grid(&f, first.end(), &grid[9..]).unwrap();
        assert_eq!(second.end(), full.end());
    }

    #[test]
    fn radial_field_matches_analytic_flow() {
        // v = a x gives r(t) = r0 exp(a t)
        let a = 0.5;
        let f = PointwiseField(move |x: [f64; 3], _| x.map(|c| a * c));
        let mesh = TriangleMesh::icosphere(2, 0.3, [0.0; 3]);
        let norm = DomainNormalizer::new([-1.0; 3], [1.0; 3]);
        let out = deform_mesh::<f64, _>(&f, &mesh, 1.0, 128, &norm).unwrap();
        assert_eq!(out.faces(), mesh.faces());
        let exact = 0.3 * a.exp();
        for v in out.vertices() {
            let r = v.iter().map(|c| c * c).sum::<f64>().sqrt();
            assert!((r - exact).abs() < 1e-3, "{r} vs {exact}");
        }
    }

    #[test]
    fn inverse_round_trip_for_smooth_field() {
        let f = PointwiseField(|x: [f64; 3], t: f64| {
            [0.2 * x[1], -0.2 * x[0] + 0.1 * t, 0.1 * (3.0 * x[0]).sin()]
        });
        let p = seeds(20);
        let fwd = integrate(&f, &p, 0.0, 0.8, 256).unwrap();
        let back = inverse_map(&f, fwd.end(), 0.8, 256).unwrap();
        for (a, b) in back.iter().zip(&p) {
            let e: f64 = (0..3).map(|d| (a[d] - b[d]).powi(2)).sum::<f64>().sqrt();
            assert!(e < 1e-3);
        }
    }

    #[test]
    fn parallel_end_positions_do_not_depend_on_workers() {
        let f = PointwiseField(|x: [f64; 3], t: f64| [x[1] * t, x[2], -x[0]]);
        let p = seeds(1500);
        let grid = uniform_grid(0.0, 1.0, 8).unwrap();
        let one = integrate_end_par(&f, &p, &grid, 1).unwrap();
        let three = integrate_end_par(&f, &p, &grid, 3).unwrap();
        assert_eq!(one, three);
        assert_eq!(one, integrate_grid(&f, &p, &grid).unwrap().end());
    }

    #[test]
    fn non_finite_velocity_names_the_step() {
        let f = PointwiseField(|_, t: f64| if t > 0.4 { [f64::NAN; 3] } else { [0.0; 3] });
        let err = integrate(&f, &seeds(2), 0.0, 1.0, 10).unwrap_err();
        assert!(matches!(err, FlowError::NonFiniteVelocity { step: 5 }));
    }

    #[test]
    fn grids_place_frames_on_boundaries() {
        let times = [0.0, 0.25, 0.5, 1.0];
        let g = frame_grid(&times, 4).unwrap();
        assert_eq!(g.len(), 13);
        for (i, &t) in times.iter().enumerate() {
            assert_eq!(g[4 * i], t);
        }
        assert!(frame_grid(&[0.0, 0.5, 0.4], 1).is_err());
        assert!(uniform_grid(0.0, 1.0, 0).is_err());
    }
}
