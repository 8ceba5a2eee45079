//! Atmospheric scattering: transmission from depth, the forward haze model,
//! its analytic inverse, and a pseudo-infrared channel for synthetic scenes.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ColorSpace, ImageTensor};
use crate::tensor::{Shape, Tensor};

/// Depth in metres.
pub const MAX_DEPTH_M: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("depth buffer of {} for {height}x{width}", data.len())));
        }
        if let Some(bad) = data.iter().find(|d| !d.is_finite() || **d < 0.0) {
            return Err(Error::InvalidInput(format!("depth {bad} is negative or non-finite")));
        }
        Ok(DepthMap { height, width, data })
    }

    pub fn constant(height: usize, width: usize, d: f64) -> Result<Self> {
        Self::new(height, width, vec![d; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HazeParams {
    /// Scattering coefficient per metre.
    pub beta: f64,
    /// Global atmospheric light per RGB channel.
    pub airlight: [f64; 3],
}

impl HazeParams {
    pub fn new(beta: f64, airlight: [f64; 3]) -> Result<Self> {
        let p = HazeParams { beta, airlight };
        p.validate()?;
        Ok(p)
    }

    pub fn gray(beta: f64, a: f64) -> Result<Self> {
        Self::new(beta, [a; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::InvalidInput(format!("scattering coefficient {} must be >= 0", self.beta)));
        }
        if self.airlight.iter().any(|a| !(a.is_finite() && *a > 0.0 && *a <= 1.0)) {
            return Err(Error::InvalidInput(format!("atmospheric light {:?} must lie in (0, 1]", self.airlight)));
        }
        Ok(())
    }

    fn airlight_for(&self, channel: usize, channels: usize) -> f64 {
        if channels == 1 {
            0.299 * self.airlight[0] + 0.587 * self.airlight[1] + 0.114 * self.airlight[2]
        } else {
            self.airlight[channel]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FogPreset {
    Mist,
    Medium,
    Dense,
}

impl FogPreset {
    pub const ALL: [FogPreset; 3] = [FogPreset::Mist, FogPreset::Medium, FogPreset::Dense];

    /// Scattering coefficient per metre for depths in `[0, 30]` m.
    pub fn beta(self) -> f64 {
        match self {
            FogPreset::Mist => 0.06,
            FogPreset::Medium => 0.12,
            FogPreset::Dense => 0.24,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FogPreset::Mist => "mist",
            FogPreset::Medium => "medium",
            FogPreset::Dense => "dense",
        }
    }
}

impl fmt::Display for FogPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FogPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mist" => Ok(FogPreset::Mist),
            "medium" => Ok(FogPreset::Medium),
            "dense" => Ok(FogPreset::Dense),
            other => Err(Error::Config(format!("unknown fog preset {other:?} (mist|medium|dense)"))),
        }
    }
}

/// `t(x) = exp(-beta * d(x))`
pub fn transmission_from_depth(d: &DepthMap, p: &HazeParams) -> Result<ImageTensor> {
    p.validate()?;
    let data = d.data.iter().map(|&z| (-p.beta * z).exp() as f32).collect();
    ImageTensor::new(Tensor::from_vec(Shape::new(1, 1, d.height, d.width), data)?, ColorSpace::Gray)
}

fn check_aligned(img: &ImageTensor, t: &ImageTensor) -> Result<()> {
    if t.channels() != 1 || !img.same_dims(t) {
        return Err(Error::Shape(format!(
            "transmission {}x{}x{} does not align with image {}x{}",
            t.height(),
            t.width(),
            t.channels(),
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// `I = J t + A (1 - t)`
pub fn apply_scattering(clean: &ImageTensor, t: &ImageTensor, p: &HazeParams) -> Result<ImageTensor> {
    check_aligned(clean, t)?;
    p.validate()?;
    let c = clean.channels();
    let tp = t.plane(0);
    let mut out = Tensor::zeros(clean.tensor().shape());
    for ch in 0..c {
        let a = p.airlight_for(ch, c);
        for ((o, &j), &tv) in out.plane_mut(0, ch).iter_mut().zip(clean.plane(ch)).zip(tp) {
            let tv = tv as f64;
            *o = (j as f64 * tv + a * (1.0 - tv)).clamp(0.0, 1.0) as f32;
        }
    }
    ImageTensor::new(out, clean.color())
}

pub const DEFAULT_T_MIN: f64 = 0.05;

/// `J = (I - A (1 - t)) / t`, clamped to `[0, 1]`; every `t` must reach `t_min`.
pub fn analytic_dehaze(hazy: &ImageTensor, t: &ImageTensor, p: &HazeParams, t_min: f64) -> Result<ImageTensor> {
    check_aligned(hazy, t)?;
    p.validate()?;
    if let Some(&low) = t.plane(0).iter().find(|&&v| (v as f64) < t_min) {
        return Err(Error::DegenerateTransmission { value: low as f64, floor: t_min });
    }
    let c = hazy.channels();
    let tp = t.plane(0);
    let mut out = Tensor::zeros(hazy.tensor().shape());
    for ch in 0..c {
        let a = p.airlight_for(ch, c);
        for ((o, &i), &tv) in out.plane_mut(0, ch).iter_mut().zip(hazy.plane(ch)).zip(tp) {
            let tv = tv as f64;
            *o = ((i as f64 - a * (1.0 - tv)) / tv).clamp(0.0, 1.0) as f32;
        }
    }
    ImageTensor::new(out, hazy.color())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InfraredParams {
    /// Attenuation coefficient of the infrared band, per metre.
    pub beta_ir: f64,
    /// Level the infrared signal decays toward with distance.
    pub background: f64,
    /// Optional additive Gaussian noise `(seed, sigma)`.
    pub noise: Option<(u64, f64)>,
}

impl InfraredParams {
    pub const BETA_RATIO: f64 = 0.1;
    pub const BACKGROUND: f64 = 0.5;

    /// Infrared attenuation tied to a visible-band coefficient.
    pub fn for_visible(beta: f64) -> Self {
        InfraredParams { beta_ir: Self::BETA_RATIO * beta, background: Self::BACKGROUND, noise: None }
    }
}

/// Pseudo-infrared: scene luminance attenuated with the much weaker infrared
/// coefficient, so structure survives where the visible band is hazed out.
pub fn synth_infrared(clean: &ImageTensor, d: &DepthMap, ir: &InfraredParams) -> Result<ImageTensor> {
    if clean.height() != d.height || clean.width() != d.width {
        return Err(Error::Shape("depth map does not align with image".into()));
    }
    if !(ir.beta_ir.is_finite() && ir.beta_ir >= 0.0) {
        return Err(Error::InvalidInput(format!("infrared coefficient {} must be >= 0", ir.beta_ir)));
    }
    let lum = clean.luminance();
    let mut rng = ir.noise.map(|(seed, _)| ChaCha8Rng::seed_from_u64(seed));
    let data = lum
        .plane(0)
        .iter()
        .zip(&d.data)
        .map(|(&l, &z)| {
            let t = (-ir.beta_ir * z).exp();
            let mut v = l as f64 * t + ir.background * (1.0 - t);
            if let (Some(rng), Some((_, sigma))) = (rng.as_mut(), ir.noise) {
                v += sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
            }
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    ImageTensor::new(Tensor::from_vec(Shape::new(1, 1, d.height, d.width), data)?, ColorSpace::Infrared)
}
