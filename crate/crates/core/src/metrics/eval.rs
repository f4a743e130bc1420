use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::{hausdorff, pearson, psnr_with_peak, MetricsError};
use crate::flow::{
    deform_mesh_on_grid, frame_grid, integrate_end_par, inverse_map_on_grid, uniform_grid,
    VelocityField,
};
use crate::mesh::{mesh_volume, TriangleMesh};
use crate::real::Real;
use crate::volume::{DomainNormalizer, Volume4D};

/// Reference meshes per frame; frame 0 is mandatory, the rest may be absent.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub meshes: Vec<Option<TriangleMesh>>,
}

impl GroundTruth {
    pub fn all(meshes: Vec<TriangleMesh>) -> Self {
        Self {
            meshes: meshes.into_iter().map(Some).collect(),
        }
    }

    pub fn initial_only(mesh: TriangleMesh, frames: usize) -> Self {
        let mut meshes = vec![None; frames];
        meshes[0] = Some(mesh);
        Self { meshes }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub steps_per_frame: usize,
    /// Voxel stride of the PSNR grid; `None` skips PSNR.
    pub psnr_stride: Option<usize>,
    pub probe_points: usize,
    pub probe_seed: u64,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            steps_per_frame: 1,
            psnr_stride: Some(2),
            probe_points: 2000,
            probe_seed: 0,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMetrics {
    pub frame: usize,
    pub t: f64,
    pub hsd_mm: Option<f64>,
    pub psnr_db: Option<f64>,
    pub volume_mm3: f64,
    pub reference_volume_mm3: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub frames: Vec<FrameMetrics>,
    /// The `t = 0` mesh advected to every frame.
    pub meshes: Vec<TriangleMesh>,
    pub periodicity_error_mm: f64,
}

fn opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_infinite() => "inf".into(),
        Some(x) => format!("{x:?}"),
        None => String::new(),
    }
}

fn json_num(v: Option<f64>) -> Value {
    match v {
        Some(x) if x.is_infinite() => json!("inf"),
        Some(x) => json!(x),
        None => Value::Null,
    }
}

impl EvalReport {
    fn hsd_values(&self) -> Vec<f64> {
        self.frames.iter().filter_map(|f| f.hsd_mm).collect()
    }

    /// Mean HSD over frames that have a reference mesh.
    pub fn mean_hsd_mm(&self) -> Option<f64> {
        let v = self.hsd_values();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn max_hsd_mm(&self) -> Option<f64> {
        self.hsd_values().into_iter().reduce(f64::max)
    }

    /// Mean PSNR over frames with a finite value.
    pub fn mean_psnr_db(&self) -> Option<f64> {
        let v: Vec<f64> = self
            .frames
            .iter()
            .filter_map(|f| f.psnr_db)
            .filter(|p| p.is_finite())
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn predicted_volumes(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.volume_mm3).collect()
    }

    pub fn reference_volumes(&self) -> Vec<Option<f64>> {
        self.frames.iter().map(|f| f.reference_volume_mm3).collect()
    }

    /// Predicted and reference volumes over frames that have a reference.
    fn volume_pairs(&self) -> (Vec<f64>, Vec<f64>) {
        self.frames
            .iter()
            .filter_map(|f| f.reference_volume_mm3.map(|r| (f.volume_mm3, r)))
            .unzip()
    }

    /// Pearson correlation of predicted against reference volume.
    pub fn volume_pearson(&self) -> Option<f64> {
        let (p, r) = self.volume_pairs();
        pearson(&p, &r).ok()
    }

    /// `|V_pred - V_ref| / V_ref` at the frame with the largest reference
    /// volume.
    pub fn peak_volume_error(&self) -> Option<f64> {
        let (p, r) = self.volume_pairs();
        let i = (0..r.len()).max_by(|&a, &b| r[a].total_cmp(&r[b]))?;
        Some((p[i] - r[i]).abs() / r[i])
    }

    /// `frame,t,hsd_mm,psnr_db,volume_mm3,reference_volume_mm3`; missing
    /// values are empty cells and identical images show `inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,t,hsd_mm,psnr_db,volume_mm3,reference_volume_mm3\n");
        for f in &self.frames {
            out.push_str(&format!(
                "{},{:?},{},{},{:?},{}\n",
                f.frame,
                f.t,
                opt(f.hsd_mm),
                opt(f.psnr_db),
                f.volume_mm3,
                opt(f.reference_volume_mm3)
            ));
        }
        out
    }

    pub fn summary_json(&self) -> String {
        let missing: Vec<usize> = self
            .frames
            .iter()
            .filter(|f| f.hsd_mm.is_none())
            .map(|f| f.frame)
            .collect();
        let v = json!({
            "frames": self.frames.len(),
            "mean_hsd_mm": self.mean_hsd_mm(),
            "max_hsd_mm": self.max_hsd_mm(),
            "mean_psnr_db": self.mean_psnr_db(),
            "psnr_peak": "maximum intensity of the reference frame",
            "periodicity_error_mm": self.periodicity_error_mm,
            "volume_pearson": self.volume_pearson(),
            "peak_volume_rel_error": self.peak_volume_error(),
            "frames_without_reference_mesh": missing,
            "volume_mm3": self.predicted_volumes(),
            "reference_volume_mm3": self.reference_volumes(),
            "psnr_db": self.frames.iter().map(|f| json_num(f.psnr_db)).collect::<Vec<_>>(),
        });
        serde_json::to_string_pretty(&v).expect("summary serializes")
    }
}

/// Mean world-space distance `‖P - φ_T(P)‖` after one period on `grid`.
pub fn periodicity_error<T: Real, F: VelocityField<T> + ?Sized>(
    field: &F,
    normalizer: &DomainNormalizer,
    probes: &[[T; 3]],
    grid: &[f64],
    workers: usize,
) -> Result<f64, MetricsError> {
    let end = integrate_end_par(field, probes, grid, workers)?;
    let total: f64 = probes
        .iter()
        .zip(&end)
        .map(|(p, q)| {
            let du = [0, 1, 2].map(|d| q[d].to_f64_lossy() - p[d].to_f64_lossy());
            let w = normalizer.vector_to_world(du);
            (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt()
        })
        .sum();
    Ok(total / probes.len().max(1) as f64)
}

/// PSNR of frame 0 pulled back to frame `i` against frame `i`, on voxel
/// centers taken every `stride` voxels.
fn warped_psnr<T: Real, F: VelocityField<T> + ?Sized>(
    field: &F,
    volume: &Volume4D,
    grid: &[f64],
    frame: usize,
    grid_index: usize,
    stride: usize,
    workers: usize,
) -> Result<Option<f64>, MetricsError> {
    let target = volume.frame(frame);
    let source = volume.frame(0);
    let [nx, ny, nz] = volume.shape();
    let mut points = Vec::new();
    let mut reference = Vec::new();
    for z in (0..nz).step_by(stride) {
        for y in (0..ny).step_by(stride) {
            for x in (0..nx).step_by(stride) {
                points.push(target.voxel_center(x, y, z).map(T::from_f64_lossy));
                reference.push(target.voxel(x, y, z));
            }
        }
    }
    let peak = target.max_value() as f64;
    if !(peak > 0.0) {
        return Ok(None);
    }
    let pulled = inverse_map_on_grid(field, &points, grid, grid_index, workers)?;
    let warped: Vec<f32> = pulled
        .iter()
        .map(|&p| source.sample(p).0.to_f64_lossy() as f32)
        .collect();
    Ok(Some(psnr_with_peak(&warped, &reference, peak)?))
}

/// Deforms the `t = 0` reference mesh through every frame and scores it.
pub fn evaluate_fit<T: Real, F: VelocityField<T> + ?Sized>(
    field: &F,
    volume: &Volume4D,
    truth: &GroundTruth,
    config: &EvalConfig,
) -> Result<EvalReport, MetricsError> {
    let n = volume.num_frames();
    if truth.meshes.len() != n {
        return Err(MetricsError::FrameCount {
            meshes: truth.meshes.len(),
            frames: n,
        });
    }
    let initial = truth.meshes[0].as_ref().ok_or(MetricsError::MissingInitialMesh)?;
    let normalizer = volume.normalizer();
    let spf = config.steps_per_frame;
    let grid = frame_grid(volume.frame_times(), spf)?;
    let indices: Vec<usize> = (0..n).map(|i| i * spf).collect();
    let meshes = deform_mesh_on_grid(field, initial, &normalizer, &grid, &indices)?;

    let mut frames = Vec::with_capacity(n);
    for (i, mesh) in meshes.iter().enumerate() {
        let reference = truth.meshes[i].as_ref();
        let hsd_mm = reference.map(|r| hausdorff(mesh, r)).transpose()?;
        let reference_volume_mm3 = reference.map(mesh_volume).transpose()?;
        let psnr_db = match config.psnr_stride {
            Some(stride) => warped_psnr(field, volume, &grid, i, i * spf, stride.max(1), config.workers)?,
            None => None,
        };
        frames.push(FrameMetrics {
            frame: i,
            t: volume.frame_times()[i],
            hsd_mm,
            psnr_db,
            volume_mm3: mesh_volume(mesh)?,
            reference_volume_mm3,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.probe_seed);
    let unit = Uniform::new_inclusive(-1.0, 1.0);
    let probes: Vec<[T; 3]> = (0..config.probe_points)
        .map(|_| [0; 3].map(|_: u8| T::from_f64_lossy(unit.sample(&mut rng))))
        .collect();
    let cycle_grid = uniform_grid(0.0, volume.period(), (n - 1) * spf)?;
    let periodicity_error_mm = periodicity_error(field, &normalizer, &probes, &cycle_grid, config.workers)?;

    Ok(EvalReport {
        frames,
        meshes,
        periodicity_error_mm,
    })
}
