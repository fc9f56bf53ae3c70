//! Classical eye-state features: Gabor filter banks, local binary patterns,
//! and PERCLOS fatigue scoring.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaborParams {
    pub theta: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub psi: f64,
    pub size: usize,
}

impl GaborParams {
    pub fn validate(&self) -> Result<()> {
        if self.size < 3 || self.size.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "gabor kernel size {} must be odd and >= 3",
                self.size
            )));
        }
        if self.lambda.is_nan() || self.lambda <= 0.0 || self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(Error::invalid("gabor lambda and sigma must be > 0"));
        }
        if ![self.theta, self.gamma, self.psi].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("gabor parameters must be finite"));
        }
        Ok(())
    }
}

/// Real Gabor kernel `size × size`, centered on the middle pixel.
pub fn gabor_kernel(p: &GaborParams) -> Result<Tensor> {
    p.validate()?;
    let half = (p.size / 2) as f64;
    let (sin, cos) = p.theta.sin_cos();
    let mut data = Vec::with_capacity(p.size * p.size);
    for row in 0..p.size {
        for col in 0..p.size {
            let x = col as f64 - half;
            let y = row as f64 - half;
            let xr = x * cos + y * sin;
            let yr = -x * sin + y * cos;
            let envelope = (-(xr * xr + p.gamma * p.gamma * yr * yr) / (2.0 * p.sigma * p.sigma)).exp();
            data.push((envelope * (2.0 * PI * xr / p.lambda + p.psi).cos()) as f32);
        }
    }
    Tensor::new(vec![p.size, p.size], data)
}

/// A bank of Gabor kernels over `orientations` evenly spaced angles in
/// `[0, π)` and one wavelength per scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaborBank {
    pub orientations: usize,
    pub wavelengths: Vec<f64>,
    /// Envelope width as a multiple of the wavelength.
    pub sigma_ratio: f64,
    pub gamma: f64,
    pub psi: f64,
    pub size: usize,
}

impl GaborBank {
    /// `orientations` angles × `scales` wavelengths of 4, 8, 16, ... px.
    pub fn new(orientations: usize, scales: usize) -> Self {
        Self {
            orientations,
            wavelengths: (0..scales).map(|s| 4.0 * 2f64.powi(s as i32)).collect(),
            sigma_ratio: 0.56,
            gamma: 0.5,
            psi: 0.0,
            size: 7,
        }
    }

    pub fn with_psi(mut self, psi: f64) -> Self {
        self.psi = psi;
        self
    }

    /// Kernel parameters, wavelength-major.
    pub fn params(&self) -> Vec<GaborParams> {
        self.wavelengths
            .iter()
            .flat_map(|&lambda| {
                (0..self.orientations).map(move |k| GaborParams {
                    theta: PI * k as f64 / self.orientations as f64,
                    lambda,
                    sigma: self.sigma_ratio * lambda,
                    gamma: self.gamma,
                    psi: self.psi,
                    size: self.size,
                })
            })
            .collect()
    }
}

impl Default for GaborBank {
    fn default() -> Self {
        Self::new(4, 2)
    }
}

/// Accepts `(H, W)` or `(H, W, 1)`.
fn grayscale_dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [h, w] | [h, w, 1] => Ok((*h, *w)),
        other => Err(Error::invalid(format!(
            "expected a grayscale image, got shape {other:?}"
        ))),
    }
}

/// Valid-mode 2-D convolution (kernel flipped) of a grayscale image with
/// every kernel in the bank, stacked along a trailing channel axis.
pub fn gabor_bank(image: &Tensor, bank: &GaborBank) -> Result<Tensor> {
    let (h, w) = grayscale_dims(image)?;
    let params = bank.params();
    if params.is_empty() {
        return Err(Error::invalid("gabor bank has no kernels"));
    }
    let kernels = params.iter().map(gabor_kernel).collect::<Result<Vec<_>>>()?;
    let k = bank.size;
    if h < k || w < k {
        return Err(Error::invalid(format!("{h}x{w} image smaller than {k}x{k} kernel")));
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let channels = kernels.len();
    let img = image.data();
    let mut out = vec![0.0f32; oh * ow * channels];
    for (ch, kernel) in kernels.iter().enumerate() {
        let kd = kernel.data();
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0f32;
                for i in 0..k {
                    let row = &img[(y + i) * w + x..(y + i) * w + x + k];
                    let krow = &kd[(k - 1 - i) * k..(k - i) * k];
                    for j in 0..k {
                        acc += row[j] * krow[k - 1 - j];
                    }
                }
                out[(y * ow + x) * channels + ch] = acc;
            }
        }
    }
    Tensor::new(vec![oh, ow, channels], out)
}

/// Offsets of the 8 neighbours, clockwise from the top-left.
const LBP_NEIGHBOURS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)];

/// 8-bit local binary pattern codes for every interior pixel, shape
/// `(H-2, W-2)`. A bit is set when the neighbour is `>=` the centre; the
/// top-left neighbour is the most significant bit.
pub fn lbp_map(image: &Tensor) -> Result<Tensor> {
    let (h, w) = grayscale_dims(image)?;
    if h < 3 || w < 3 {
        return Err(Error::invalid(format!("LBP needs at least a 3x3 image, got {h}x{w}")));
    }
    let img = image.data();
    let mut out = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let center = img[y * w + x];
            let mut code = 0u8;
            for (dy, dx) in LBP_NEIGHBOURS {
                let v = img[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
                code = (code << 1) | u8::from(v >= center);
            }
            out.push(code as f32);
        }
    }
    Tensor::new(vec![h - 2, w - 2], out)
}

/// Single-channel texture map the size of the input: half LBP code, half
/// mean Gabor magnitude, zero on the border the filters cannot reach.
pub fn feature_image(image: &Tensor, bank: &GaborBank) -> Result<Tensor> {
    let (h, w) = grayscale_dims(image)?;
    let lbp = lbp_map(image)?;
    let gabor = gabor_bank(image, bank)?;
    let (gh, gw, gc) = (gabor.shape()[0], gabor.shape()[1], gabor.shape()[2]);
    let off = bank.size / 2;
    let mut out = vec![0.0f32; h * w];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            out[y * w + x] = 0.5 * lbp.data()[(y - 1) * (w - 2) + (x - 1)] / 255.0;
        }
    }
    for y in 0..gh {
        for x in 0..gw {
            let px = &gabor.data()[(y * gw + x) * gc..(y * gw + x + 1) * gc];
            let energy = px.iter().map(|v| v.abs()).sum::<f32>() / gc as f32;
            out[(y + off) * w + x + off] += 0.5 * energy.min(1.0);
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EyeState {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameStateSequence {
    states: Vec<EyeState>,
    fps: f64,
}

impl FrameStateSequence {
    pub fn new(states: Vec<EyeState>, fps: f64) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::invalid("frame sequence is empty"));
        }
        if !fps.is_finite() || fps <= 0.0 {
            return Err(Error::invalid("fps must be > 0"));
        }
        Ok(Self { states, fps })
    }

    pub fn states(&self) -> &[EyeState] {
        &self.states
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    /// Two seconds of frames, at least one frame, at most the sequence length.
    pub fn default_window(&self) -> usize {
        ((2.0 * self.fps).round() as usize).clamp(1, self.states.len())
    }
}

/// Fraction of closed frames in every window of `window_frames`
/// consecutive frames.
pub fn perclos(seq: &FrameStateSequence, window_frames: usize) -> Result<Vec<f64>> {
    let n = seq.states.len();
    if window_frames == 0 || window_frames > n {
        return Err(Error::invalid(format!(
            "window of {window_frames} frames invalid for {n} frames"
        )));
    }
    let closed: Vec<usize> = seq.states.iter().map(|s| usize::from(*s == EyeState::Closed)).collect();
    let mut count: usize = closed[..window_frames].iter().sum();
    let mut out = Vec::with_capacity(n - window_frames + 1);
    out.push(count as f64 / window_frames as f64);
    for i in window_frames..n {
        count = count + closed[i] - closed[i - window_frames];
        out.push(count as f64 / window_frames as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverState {
    Alert,
    Fatigued,
}

pub const DEFAULT_PERCLOS_THRESHOLD: f64 = 0.4;

/// Fatigued iff the PERCLOS value reaches the threshold.
pub fn fatigue_judgment(perclos_values: &[f64], threshold: f64) -> Vec<DriverState> {
    perclos_values
        .iter()
        .map(|&v| {
            if v >= threshold {
                DriverState::Fatigued
            } else {
                DriverState::Alert
            }
        })
        .collect()
}

/// How a frame sequence is turned into per-position fatigue judgments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum FatigueRule {
    Perclos {
        window_frames: usize,
        threshold: f64,
    },
    /// Fatigued at every frame that ends a run of at least `frames`
    /// consecutive closed frames.
    ConsecutiveClosed {
        frames: usize,
    },
}

pub fn judge_sequence(seq: &FrameStateSequence, rule: FatigueRule) -> Result<Vec<DriverState>> {
    match rule {
        FatigueRule::Perclos {
            window_frames,
            threshold,
        } => Ok(fatigue_judgment(&perclos(seq, window_frames)?, threshold)),
        FatigueRule::ConsecutiveClosed { frames } => {
            if frames == 0 {
                return Err(Error::invalid("consecutive-frame rule needs frames >= 1"));
            }
            let mut run = 0;
            Ok(seq
                .states
                .iter()
                .map(|s| {
                    run = if *s == EyeState::Closed { run + 1 } else { 0 };
                    if run >= frames {
                        DriverState::Fatigued
                    } else {
                        DriverState::Alert
                    }
                })
                .collect())
        }
    }
}
