//! Sine-activated coordinate network representing a time-dependent velocity
//! field, with time optionally encoded on the unit circle so that the field
//! is exactly periodic.
//!
//! Network input is `[x, y, z, cos(2πt/T), sin(2πt/T)]` (or `[x, y, z, t]`
//! with the encoding disabled). All hidden layers apply `sin(ω·(xW + b))`;
//! the output layer is linear and three wide.
//!
//! # Checkpoint layout
//!
//! | offset | size      | content                                        |
//! |--------|-----------|------------------------------------------------|
//! | 0      | 8         | magic `VFIELD01`                               |
//! | 8      | 1         | endianness tag, `b'L'` (little endian)         |
//! | 9      | 1         | time encoding flag (0 or 1)                    |
//! | 10     | 2         | `u16` number of affine layers `L`              |
//! | 12     | 4·(L+1)   | `u32` layer widths, input first                |
//! | ..     | 8         | `f64` omega                                    |
//! | ..     | 8         | `f64` period                                   |
//! | ..     | ..        | per layer: `f32` weights `[in, out]` row-major, then `f32` bias `[out]` |
//!
//! All integers and floats are little endian.

use std::io::{Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{kernels, AutodiffError, NodeId, Tape};
use crate::real::Real;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VFIELD01";
const LITTLE_ENDIAN_TAG: u8 = b'L';

/// Phase resolution of the time encoder, in fractions of a period.
const PHASE_BITS: u32 = 32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("period must be positive and finite, got {0}")]
    InvalidPeriod(f64),
    #[error("non-finite {0} passed to the velocity field")]
    NonFiniteInput(&'static str),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("checkpoint: bad magic at offset 0")]
    BadMagic,
    #[error("checkpoint: unsupported endianness tag {0:#04x} at offset 8")]
    UnsupportedEndianness(u8),
    #[error("checkpoint: truncated at offset {offset} (needed {needed} more bytes)")]
    Truncated { offset: usize, needed: usize },
    #[error("checkpoint: {0} trailing bytes")]
    TrailingBytes(usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Maps time onto the unit circle, `(cos(2πt/T), sin(2πt/T))`.
///
/// The phase is rounded to a `2^-32` fraction of the period before the
/// trigonometric evaluation, so `t` and `t + T` yield the same encoding
/// bit for bit, and quarter periods land exactly on the axes.
pub fn encode_time(t: f64, period: f64) -> Result<(f64, f64), ModelError> {
    if !(period > 0.0 && period.is_finite()) {
        return Err(ModelError::InvalidPeriod(period));
    }
    if !t.is_finite() {
        return Err(ModelError::NonFiniteInput("time"));
    }
    let full = 1i64 << PHASE_BITS;
    let ticks = ((t / period) * full as f64).round() as i64;
    let phase = ticks.rem_euclid(full);
    let quarter = full >> 2;
    let quadrant = phase / quarter;
    let rest = phase % quarter;
    let angle = std::f64::consts::TAU * rest as f64 / full as f64;
    let (s, c) = angle.sin_cos();
    Ok(match quadrant {
        0 => (c, s),
        1 => (-s, c),
        2 => (-c, -s),
        _ => (s, -c),
    })
}

/// Architecture and frequency of a [`VelocityFieldModel`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FieldConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub omega: f64,
    pub period: f64,
    pub time_encoding: bool,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 3,
            hidden_width: 256,
            omega: 6.0,
            period: 1.0,
            time_encoding: true,
        }
    }
}

impl FieldConfig {
    pub fn input_width(&self) -> usize {
        if self.time_encoding {
            5
        } else {
            4
        }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(std::iter::repeat(self.hidden_width).take(self.hidden_layers));
        w.push(3);
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    /// Row-major `[fan_in, fan_out]`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Velocity field `H_θ(p, t)`: spatial point in normalized coordinates and
/// normalized time to a velocity in normalized units per unit time.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityFieldModel<T> {
    layers: Vec<Layer<T>>,
    omega: f64,
    period: f64,
    time_encoding: bool,
}

/// Parameter leaves of a model registered on a tape, in `[w0, b0, w1, b1, ..]` order.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    nodes: Vec<NodeId>,
}

impl ParamNodes {
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    /// Moves the gradients out of the tape, in parameter order.
    pub fn take_gradients<T: Real>(&self, tape: &mut Tape<T>) -> Vec<Vec<T>> {
        self.nodes.iter().map(|&n| tape.take_grad(n)).collect()
    }
}

impl<T: Real> VelocityFieldModel<T> {
    /// Sine-network initialization: first layer weights `U(-1/fan_in, 1/fan_in)`,
    /// later weights `U(-√(6/fan_in)/ω, √(6/fan_in)/ω)`, biases
    /// `U(-1/√fan_in, 1/√fan_in)`. Deterministic in `seed`.
    pub fn init(seed: u64, config: &FieldConfig) -> Result<Self, ModelError> {
        validate_config(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = config.widths();
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = if i == 0 {
                1.0 / fan_in as f64
            } else {
                (6.0 / fan_in as f64).sqrt() / config.omega
            };
            let wdist = Uniform::new_inclusive(-bound, bound);
            let weight = (0..fan_in * fan_out)
                .map(|_| T::from_f64_lossy(wdist.sample(&mut rng)))
                .collect();
            let bbound = 1.0 / (fan_in as f64).sqrt();
            let bdist = Uniform::new_inclusive(-bbound, bbound);
            let bias = (0..fan_out)
                .map(|_| T::from_f64_lossy(bdist.sample(&mut rng)))
                .collect();
            layers.push(Layer {
                weight,
                bias,
                fan_in,
                fan_out,
            });
        }
        Ok(Self {
            layers,
            omega: config.omega,
            period: config.period,
            time_encoding: config.time_encoding,
        })
    }

    pub fn from_layers(
        layers: Vec<Layer<T>>,
        omega: f64,
        period: f64,
        time_encoding: bool,
    ) -> Result<Self, ModelError> {
        let model = Self {
            layers,
            omega,
            period,
            time_encoding,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), ModelError> {
        let arch = |m: String| Err(ModelError::InvalidArchitecture(m));
        if self.layers.len() < 2 {
            return arch(format!("need at least 2 layers, got {}", self.layers.len()));
        }
        let want_in = if self.time_encoding { 5 } else { 4 };
        if self.layers[0].fan_in != want_in {
            return arch(format!(
                "input width {} does not match time encoding (expected {want_in})",
                self.layers[0].fan_in
            ));
        }
        if self.layers.last().unwrap().fan_out != 3 {
            return arch("output width must be 3".into());
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.len() != l.fan_in * l.fan_out || l.bias.len() != l.fan_out {
                return arch(format!("layer {i} buffers do not match its shape"));
            }
            if i > 0 && self.layers[i - 1].fan_out != l.fan_in {
                return arch(format!("layer {i} input width does not chain"));
            }
            if !l.weight.iter().chain(&l.bias).all(|v| v.is_finite()) {
                return arch(format!("layer {i} holds non-finite weights"));
            }
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return arch(format!("omega must be positive, got {}", self.omega));
        }
        if !(self.period > 0.0 && self.period.is_finite()) {
            return Err(ModelError::InvalidPeriod(self.period));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn time_encoding(&self) -> bool {
        self.time_encoding
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Flat parameter buffers in `[w0, b0, w1, b1, ..]` order.
    pub fn parameters(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn cast<U: Real>(&self) -> VelocityFieldModel<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect();
        VelocityFieldModel {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: conv(&l.weight),
                    bias: conv(&l.bias),
                    fan_in: l.fan_in,
                    fan_out: l.fan_out,
                })
                .collect(),
            omega: self.omega,
            period: self.period,
            time_encoding: self.time_encoding,
        }
    }

    /// Time features appended to every spatial point.
    pub fn time_features(&self, t: f64) -> Result<Vec<T>, ModelError> {
        if self.time_encoding {
            let (c, s) = encode_time(t, self.period)?;
            Ok(vec![T::from_f64_lossy(c), T::from_f64_lossy(s)])
        } else {
            if !t.is_finite() {
                return Err(ModelError::NonFiniteInput("time"));
            }
            Ok(vec![T::from_f64_lossy(t)])
        }
    }

    /// Velocity at each point, without recording anything.
    pub fn velocity(&self, points: &[[T; 3]], t: f64) -> Result<Vec<[T; 3]>, ModelError> {
        if !points.iter().flatten().all(|v| v.is_finite()) {
            return Err(ModelError::NonFiniteInput("point"));
        }
        let tf = self.time_features(t)?;
        let width = 3 + tf.len();
        let mut x = Vec::with_capacity(points.len() * width);
        for p in points {
            x.extend_from_slice(p);
            x.extend_from_slice(&tf);
        }
        let batch = points.len();
        let omega = T::from_f64_lossy(self.omega);
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = if i < last {
                kernels::sine_layer(&x, &l.weight, &l.bias, batch, l.fan_in, l.fan_out, omega).0
            } else {
                kernels::affine(&x, &l.weight, &l.bias, batch, l.fan_in, l.fan_out)
            };
        }
        Ok(x.chunks_exact(3).map(|v| [v[0], v[1], v[2]]).collect())
    }

    /// Records every weight and bias as a trainable leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> Result<ParamNodes, ModelError> {
        let mut nodes = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            nodes.push(tape.parameter(l.weight.clone(), &[l.fan_in, l.fan_out])?);
            nodes.push(tape.parameter(l.bias.clone(), &[l.fan_out])?);
        }
        Ok(ParamNodes { nodes })
    }

    /// Velocity of `points: [B, 3]` on the tape, differentiable with respect
    /// to both the parameters and the points.
    pub fn velocity_on_tape(
        &self,
        tape: &mut Tape<T>,
        params: &ParamNodes,
        points: NodeId,
        t: f64,
    ) -> Result<NodeId, ModelError> {
        let batch = tape.shape(points)[0];
        let tf = self.time_features(t)?;
        let cols = tf.len();
        let time = tape.constant(tf.repeat(batch), &[batch, cols])?;
        let mut x = tape.concat_cols(&[points, time])?;
        let omega = T::from_f64_lossy(self.omega);
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            let (w, b) = (params.nodes[2 * i], params.nodes[2 * i + 1]);
            x = if i < last {
                tape.sine_layer(x, w, b, omega)?
            } else {
                tape.affine(x, w, b)?
            };
        }
        Ok(x)
    }
}

fn validate_config(config: &FieldConfig) -> Result<(), ModelError> {
    if config.hidden_layers == 0 || config.hidden_width == 0 {
        return Err(ModelError::InvalidArchitecture(
            "need at least one hidden layer of positive width".into(),
        ));
    }
    if !(config.omega > 0.0 && config.omega.is_finite()) {
        return Err(ModelError::InvalidArchitecture(format!(
            "omega must be positive, got {}",
            config.omega
        )));
    }
    if !(config.period > 0.0 && config.period.is_finite()) {
        return Err(ModelError::InvalidPeriod(config.period));
    }
    Ok(())
}

impl VelocityFieldModel<f32> {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * self.parameter_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(LITTLE_ENDIAN_TAG);
        out.push(self.time_encoding as u8);
        out.extend_from_slice(&(self.layers.len() as u16).to_le_bytes());
        out.extend_from_slice(&(self.layers[0].fan_in as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.fan_out as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.omega.to_le_bytes());
        out.extend_from_slice(&self.period.to_le_bytes());
        for l in &self.layers {
            for v in l.weight.iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(ModelError::BadMagic);
        }
        let tag = r.take(1)?[0];
        if tag != LITTLE_ENDIAN_TAG {
            return Err(ModelError::UnsupportedEndianness(tag));
        }
        let time_encoding = match r.take(1)?[0] {
            0 => false,
            1 => true,
            other => {
                return Err(ModelError::InvalidArchitecture(format!(
                    "time encoding flag {other} at offset 9"
                )))
            }
        };
        let n_layers = u16::from_le_bytes(r.array()?) as usize;
        let widths = (0..=n_layers)
            .map(|_| r.array().map(|b| u32::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let omega = f64::from_le_bytes(r.array()?);
        let period = f64::from_le_bytes(r.array()?);
        let mut layers = Vec::with_capacity(n_layers);
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let weight = r.f32s(fan_in * fan_out)?;
            let bias = r.f32s(fan_out)?;
            layers.push(Layer {
                weight,
                bias,
                fan_in,
                fan_out,
            });
        }
        if r.pos != bytes.len() {
            return Err(ModelError::TrailingBytes(bytes.len() - r.pos));
        }
        Self::from_layers(layers, omega, period, time_encoding)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(ModelError::Truncated {
                offset: self.pos,
                needed: n - (self.bytes.len() - self.pos).min(n),
            }),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ModelError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, ModelError> {
        let raw = self.take(n.checked_mul(4).ok_or(ModelError::Truncated {
            offset: self.pos,
            needed: usize::MAX,
        })?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
