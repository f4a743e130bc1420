use std::path::PathBuf;

use clap::Args;
use perimotion::training::{Precision, Sampling};
use perimotion::volume::GrowthKind;

#[derive(Args)]
pub struct GenArgs {
    /// linear, exponential or periodic
    #[arg(long)]
    pub pattern: GrowthKind,
    #[arg(long, default_value_t = 48)]
    pub grid: usize,
    #[arg(long, default_value_t = 25)]
    pub frames: usize,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub spacing: f64,
    /// Base radius in mm (default 20% of the grid width).
    #[arg(long, allow_negative_numbers = true)]
    pub radius: Option<f64>,
    /// Growth rate of the linear and exponential patterns.
    #[arg(long, allow_negative_numbers = true)]
    pub rate: Option<f64>,
    /// Periodic amplitude in mm (default 40% of the radius).
    #[arg(long, allow_negative_numbers = true)]
    pub amplitude: Option<f64>,
    /// Width of the intensity ramp at the surface, in mm.
    #[arg(long, allow_negative_numbers = true)]
    pub edge_width: Option<f64>,
    /// Icosphere subdivision level of the ground-truth meshes.
    #[arg(long, default_value_t = 4)]
    pub subdivisions: u32,
}

#[derive(Args)]
pub struct FitArgs {
    /// Input V4D volume.
    #[arg(long)]
    pub volume: PathBuf,
    /// `key = value` file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Any config key, as `key=value`; may repeat and wins over other flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub sampling: Option<Sampling>,
    /// Drop the cycle-consistency term.
    #[arg(long)]
    pub no_cycle: bool,
    /// Feed raw time instead of its unit-circle encoding.
    #[arg(long)]
    pub no_time_encoding: bool,
}

#[derive(Args)]
pub struct DeformArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// OBJ mesh at t = 0, in world mm.
    #[arg(long)]
    pub mesh: PathBuf,
    /// Volume the model was fitted to; defines the normalized domain.
    #[arg(long)]
    pub volume: PathBuf,
    /// Comma-separated normalized times in [0, 1].
    #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
    pub times: Vec<f64>,
    /// Map times outside [0, 1] into one period instead of failing.
    #[arg(long)]
    pub wrap: bool,
    /// Euler steps per unit time.
    #[arg(long, default_value_t = 24)]
    pub steps: usize,
    /// Also write trajectories of this many evenly spaced vertices.
    #[arg(long, default_value_t = 0)]
    pub trajectory_points: usize,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub volume: PathBuf,
    /// Directory of `frame_NNN.obj` reference meshes; frame 0 is required.
    #[arg(long)]
    pub gt_dir: PathBuf,
    /// Loss CSV from `fit`, plotted when given.
    #[arg(long)]
    pub loss: Option<PathBuf>,
    /// Voxel stride of the PSNR grid; 0 skips PSNR.
    #[arg(long, default_value_t = 2)]
    pub psnr_stride: usize,
    #[arg(long, default_value_t = 1)]
    pub steps_per_frame: usize,
    /// Random probes for the periodicity error.
    #[arg(long, default_value_t = 2000)]
    pub probes: usize,
    #[arg(long, default_value_t = 0)]
    pub probe_seed: u64,
}
