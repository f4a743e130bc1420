//! Objective assembly and optimization.
//!
//! The data term follows each sampled point along its forward trajectory and
//! compares the intensity it sees in every earlier frame with the intensity
//! at its end position in the last frame:
//! `Σ_{i<N-1} mean_P (I_i(x_i) - I_{N-1}(x_{N-1}))²` with `x_i = φ_{t_i}(P)`.
//! The cycle term is `mean_P ‖P - φ_T(P)‖²`.

mod adam;
mod config;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use config::{FitConfig, Precision, Sampling, CONFIG_KEYS};

use std::time::Instant;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape};
use crate::flow::{frame_grid, integrate_on_tape, FlowError};
use crate::neural_field::{ModelError, ParamNodes, VelocityFieldModel};
use crate::real::Real;
use crate::volume::Volume4D;

/// Frame-0 intensity above which a voxel counts as foreground.
pub const FOREGROUND_THRESHOLD: f32 = 0.1;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for config key {key:?}: {reason}")]
    ConfigValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("config line {line}: expected `key = value`, got {text:?}")]
    ConfigSyntax { line: usize, text: String },
    #[error("need at least one sample point")]
    NoPoints,
    #[error("foreground sampling requested but frame 0 has no voxel above {FOREGROUND_THRESHOLD}")]
    EmptyForeground,
    #[error("volume needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("non-finite loss at epoch {epoch} (first produced by {op})")]
    NonFiniteLoss { epoch: usize, op: &'static str },
    #[error("optimizer state does not match the parameters")]
    AdamShape,
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl TrainingError {
    /// Whether the failure is numerical rather than a usage or data problem.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainingError::NonFiniteLoss { .. }
                | TrainingError::Flow(FlowError::NonFiniteVelocity { .. })
        )
    }
}

/// Draws `n` normalized points. Foreground sampling places every even
/// index near a random foreground voxel of frame 0 (uniform jitter of one
/// voxel) and every odd index uniformly.
pub fn sample_points_with(
    volume: &Volume4D,
    n: usize,
    strategy: Sampling,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<[f64; 3]>, TrainingError> {
    if n == 0 {
        return Err(TrainingError::NoPoints);
    }
    let unit = Uniform::new_inclusive(-1.0, 1.0);
    match strategy {
        Sampling::Uniform => Ok((0..n)
            .map(|_| [0; 3].map(|_: u8| unit.sample(rng)))
            .collect()),
        Sampling::Foreground => {
            let frame = volume.frame(0);
            let fg: Vec<usize> = frame
                .data()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > FOREGROUND_THRESHOLD)
                .map(|(i, _)| i)
                .collect();
            if fg.is_empty() {
                return Err(TrainingError::EmptyForeground);
            }
            let [nx, ny, _] = volume.shape();
            let pick = Uniform::new(0, fg.len());
            let jitter = Uniform::new_inclusive(-0.5, 0.5);
            let voxel = volume.shape().map(|s| 2.0 / (s - 1) as f64);
            Ok((0..n)
                .map(|i| {
                    if i % 2 == 1 {
                        return [0; 3].map(|_: u8| unit.sample(rng));
                    }
                    let idx = fg[pick.sample(rng)];
                    let c = frame.voxel_center(idx % nx, (idx / nx) % ny, idx / (nx * ny));
                    [0, 1, 2].map(|d| (c[d] + voxel[d] * jitter.sample(rng)).clamp(-1.0, 1.0))
                })
                .collect())
        }
    }
}

pub fn sample_points(
    volume: &Volume4D,
    n: usize,
    strategy: Sampling,
    seed: u64,
) -> Result<Vec<[f64; 3]>, TrainingError> {
    sample_points_with(volume, n, strategy, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Sampling stream of one epoch; stream 0 is left to weight initialization.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn check_frames(volume: &Volume4D) -> Result<(), TrainingError> {
    if volume.num_frames() < 2 {
        return Err(TrainingError::TooFewFrames(volume.num_frames()));
    }
    Ok(())
}

fn sum_nodes<T: Real>(tape: &mut Tape<T>, nodes: &[NodeId]) -> Result<NodeId, AutodiffError> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.add(acc, n)?;
    }
    Ok(acc)
}

/// Data term from recorded positions; `positions[i * steps_per_frame]` is
/// the trajectory node at frame `i`.
fn data_term<T: Real>(
    tape: &mut Tape<T>,
    volume: &Volume4D,
    positions: &[NodeId],
    steps_per_frame: usize,
) -> Result<NodeId, TrainingError> {
    let last = volume.num_frames() - 1;
    let end_frame = volume.frame(last);
    let target = tape.gather(positions[last * steps_per_frame], |p| end_frame.sample(p))?;
    let mut terms = Vec::with_capacity(last);
    for i in 0..last {
        let frame = volume.frame(i);
        let seen = tape.gather(positions[i * steps_per_frame], |p| frame.sample(p))?;
        terms.push(tape.mse(seen, target)?);
    }
    Ok(sum_nodes(tape, &terms)?)
}

/// `mean ‖P - φ_T(P)‖²`, three times the per-coordinate mean square.
fn cycle_term<T: Real>(tape: &mut Tape<T>, seeds: NodeId, end: NodeId) -> Result<NodeId, TrainingError> {
    let m = tape.mse(end, seeds)?;
    Ok(tape.scale(m, T::from_f64_lossy(3.0))?)
}

fn seed_node<T: Real>(tape: &mut Tape<T>, points: &[[T; 3]]) -> Result<NodeId, TrainingError> {
    Ok(tape.constant(points.iter().flatten().copied().collect(), &[points.len(), 3])?)
}

/// Records the data term for `points` on `tape`.
pub fn data_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &VelocityFieldModel<T>,
    params: &ParamNodes,
    volume: &Volume4D,
    points: &[[T; 3]],
    steps_per_frame: usize,
) -> Result<NodeId, TrainingError> {
    check_frames(volume)?;
    let seeds = seed_node(tape, points)?;
    let grid = frame_grid(volume.frame_times(), steps_per_frame)?;
    let positions = integrate_on_tape(tape, model, params, seeds, &grid)?;
    data_term(tape, volume, &positions, steps_per_frame)
}

/// Records the cycle term for `points` over one full period split into
/// `steps` uniform Euler steps.
pub fn cycle_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &VelocityFieldModel<T>,
    params: &ParamNodes,
    points: &[[T; 3]],
    steps: usize,
) -> Result<NodeId, TrainingError> {
    let seeds = seed_node(tape, points)?;
    let grid = crate::flow::uniform_grid(0.0, model.period(), steps)?;
    let positions = integrate_on_tape(tape, model, params, seeds, &grid)?;
    cycle_term(tape, seeds, *positions.last().unwrap())
}

/// Settings that define the objective independently of the optimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub use_cycle: bool,
    pub steps_per_frame: usize,
    pub chunk_size: usize,
    pub workers: usize,
}

impl From<&FitConfig> for ObjectiveConfig {
    fn from(c: &FitConfig) -> Self {
        Self {
            lambda: c.lambda,
            use_cycle: c.uses_cycle(),
            steps_per_frame: c.steps_per_frame,
            chunk_size: c.chunk_size,
            workers: c.workers,
        }
    }
}

/// Objective values over a full point set. `cycle` is always measured; it
/// enters `total` only when the cycle term is in use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub data: f64,
    pub cycle: f64,
    pub total: f64,
}

struct ChunkResult<T> {
    values: LossValues,
    grads: Option<Vec<Vec<T>>>,
    non_finite: Option<&'static str>,
}

fn chunk_objective<T: Real>(
    model: &VelocityFieldModel<T>,
    volume: &Volume4D,
    points: &[[T; 3]],
    grid: &[f64],
    weight: f64,
    cfg: &ObjectiveConfig,
    with_grad: bool,
) -> Result<ChunkResult<T>, TrainingError> {
    let mut tape = Tape::new();
    let params = model.register(&mut tape)?;
    let seeds = seed_node(&mut tape, points)?;
    let positions = integrate_on_tape(&mut tape, model, &params, seeds, grid)?;
    let data = data_term(&mut tape, volume, &positions, cfg.steps_per_frame)?;
    let cycle = cycle_term(&mut tape, seeds, *positions.last().unwrap())?;
    let objective = if cfg.use_cycle {
        let reg = tape.scale(cycle, T::from_f64_lossy(cfg.lambda))?;
        tape.add(data, reg)?
    } else {
        data
    };
    let total = tape.scale(objective, T::from_f64_lossy(weight))?;
    let w = |id| weight * tape.scalar(id).to_f64_lossy();
    let values = LossValues {
        data: w(data),
        cycle: w(cycle),
        total: w(objective),
    };
    let non_finite = tape.non_finite().map(|nf| nf.op);
    let grads = if with_grad && non_finite.is_none() {
        tape.backward(total)?;
        Some(params.take_gradients(&mut tape))
    } else {
        None
    };
    Ok(ChunkResult {
        values,
        grads,
        non_finite,
    })
}

/// Objective value and optionally its gradient over `points`, evaluated in
/// fixed chunks whose contributions are summed in index order. The result
/// does not depend on the number of workers.
fn evaluate_chunks<T: Real>(
    model: &VelocityFieldModel<T>,
    volume: &Volume4D,
    points: &[[T; 3]],
    cfg: &ObjectiveConfig,
    with_grad: bool,
) -> Result<(LossValues, Option<Vec<Vec<T>>>, Option<&'static str>), TrainingError> {
    check_frames(volume)?;
    if points.is_empty() {
        return Err(TrainingError::NoPoints);
    }
    let grid = frame_grid(volume.frame_times(), cfg.steps_per_frame)?;
    let n = points.len() as f64;
    let run = |chunk: &[[T; 3]]| {
        chunk_objective(model, volume, chunk, &grid, chunk.len() as f64 / n, cfg, with_grad)
    };
    let chunk = cfg.chunk_size.max(1);
    let results: Vec<Result<ChunkResult<T>, TrainingError>> = if cfg.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .expect("thread pool");
        pool.install(|| points.par_chunks(chunk).map(run).collect())
    } else {
        points.chunks(chunk).map(run).collect()
    };
    let mut values = LossValues {
        data: 0.0,
        cycle: 0.0,
        total: 0.0,
    };
    let mut grads: Option<Vec<Vec<T>>> = None;
    let mut non_finite = None;
    for r in results {
        let r = r?;
        values.data += r.values.data;
        values.cycle += r.values.cycle;
        values.total += r.values.total;
        non_finite = non_finite.or(r.non_finite);
        if let Some(g) = r.grads {
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, &y) in a.iter_mut().zip(b) {
                            *x = *x + y;
                        }
                    }
                }
            }
        }
    }
    Ok((values, grads, non_finite))
}

/// Objective value at `points` without recording gradients.
pub fn objective_value<T: Real>(
    model: &VelocityFieldModel<T>,
    volume: &Volume4D,
    points: &[[T; 3]],
    cfg: &ObjectiveConfig,
) -> Result<LossValues, TrainingError> {
    Ok(evaluate_chunks(model, volume, points, cfg, false)?.0)
}

/// Objective value and gradient in `[w0, b0, w1, b1, ..]` order.
pub fn objective_gradient<T: Real>(
    model: &VelocityFieldModel<T>,
    volume: &Volume4D,
    points: &[[T; 3]],
    cfg: &ObjectiveConfig,
) -> Result<(LossValues, Vec<Vec<T>>), TrainingError> {
    let (values, grads, non_finite) = evaluate_chunks(model, volume, points, cfg, true)?;
    match (grads, non_finite) {
        (Some(g), None) => Ok((values, g)),
        (_, op) => Err(TrainingError::NonFiniteLoss {
            epoch: 0,
            op: op.unwrap_or("objective"),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub data_loss: f64,
    pub cycle_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub config: FitConfig,
    pub history: Vec<EpochLoss>,
    pub wall_time_s: f64,
    /// Set when `lambda > 0` but the cycle term is disabled.
    pub lambda_ignored: bool,
    pub checkpoint: Option<String>,
}

impl FitReport {
    /// `epoch,data_loss,cycle_loss,total`, one row per epoch. Values use the
    /// shortest representation that round-trips.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,data_loss,cycle_loss,total\n");
        for e in &self.history {
            out.push_str(&format!(
                "{},{:?},{:?},{:?}\n",
                e.epoch, e.data_loss, e.cycle_loss, e.total
            ));
        }
        out
    }

    pub fn summary_json(&self) -> String {
        let last = self.history.last();
        let summary = serde_json::json!({
            "config": self.config,
            "epochs": self.history.len(),
            "first_total": self.history.first().map(|e| e.total),
            "final": last,
            "wall_time_s": self.wall_time_s,
            "lambda_ignored": self.lambda_ignored,
            "checkpoint": self.checkpoint,
        });
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    }
}

/// Optimizes a freshly initialized model on `volume`.
///
/// Every epoch draws a new point set from the seed's epoch stream, evaluates
/// the objective and its gradient, and applies one Adam step. `on_epoch` is
/// called after each step.
pub fn fit<T: Real>(
    volume: &Volume4D,
    config: &FitConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<(VelocityFieldModel<T>, FitReport), TrainingError> {
    config.validate()?;
    check_frames(volume)?;
    let start = Instant::now();
    let mut model = VelocityFieldModel::<T>::init(config.seed, &config.field_config())?;
    let objective = ObjectiveConfig::from(config);
    let adam = AdamConfig::with_learning_rate(config.learning_rate);
    let mut state = AdamState::zeros_like(&model.parameters());
    if config.lambda_ignored() {
        log::warn!("lambda = {} is ignored because the cycle term is disabled", config.lambda);
    }
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let points: Vec<[T; 3]> = sample_points_with(
            volume,
            config.points_per_epoch,
            config.sampling,
            &mut epoch_rng(config.seed, epoch),
        )?
        .into_iter()
        .map(|p| p.map(T::from_f64_lossy))
        .collect();
        let (values, grads, non_finite) = evaluate_chunks(&model, volume, &points, &objective, true)?;
        let grads = match (grads, non_finite) {
            (Some(g), None) if values.total.is_finite() => g,
            (_, op) => {
                return Err(TrainingError::NonFiniteLoss {
                    epoch,
                    op: op.unwrap_or("objective"),
                })
            }
        };
        adam_step(&mut model.parameters_mut(), &grads, &mut state, &adam)?;
        let row = EpochLoss {
            epoch,
            data_loss: values.data,
            cycle_loss: values.cycle,
            total: values.total,
        };
        log::debug!("epoch {epoch}: total {:.6e}", row.total);
        on_epoch(&row);
        history.push(row);
    }
    let report = FitReport {
        config: config.clone(),
        history,
        wall_time_s: start.elapsed().as_secs_f64(),
        lambda_ignored: config.lambda_ignored(),
        checkpoint: None,
    };
    Ok((model, report))
}
