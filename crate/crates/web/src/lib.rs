//! Browser bindings: a procedural scene that can be hazed, dehazed with the
//! physical model, and probed with the cross-modal inconsistency map.

use wasm_bindgen::prelude::*;

use vifnet::fusion::{inconsistency_map, FusionWeights};
use vifnet::haze::{analytic_dehaze, apply_scattering, synth_infrared, transmission_from_depth, HazeParams, InfraredParams, MAX_DEPTH_M};
use vifnet::imaging::{sobel_edges, FeatureMap, ImageTensor};
use vifnet::scene::{render_scene, Scene};

fn js(e: vifnet::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// RGBA bytes for a canvas `ImageData`; one-channel images are drawn gray.
fn rgba(img: &ImageTensor, gain: f32) -> Vec<u8> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = img.at(y, x, if c == 1 { 0 } else { ch }) * gain;
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
    }
    out
}

#[wasm_bindgen]
pub struct Demo {
    scene: Scene,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, seed: u64) -> Result<Demo, JsError> {
        Ok(Demo { scene: render_scene(size, size, seed).map_err(js)? })
    }

    pub fn size(&self) -> usize {
        self.scene.clean.width()
    }

    pub fn clean(&self) -> Vec<u8> {
        rgba(&self.scene.clean, 1.0)
    }

    /// Depth drawn near-white, far-black.
    pub fn depth(&self) -> Vec<u8> {
        let d = &self.scene.depth;
        let img = ImageTensor::from_fn(d.height(), d.width(), vifnet::imaging::ColorSpace::Gray, |y, x, _| {
            (1.0 - d.at(y, x) / MAX_DEPTH_M) as f32
        })
        .expect("depth image");
        rgba(&img, 1.0)
    }

    /// Hazy visible image for scattering coefficient `beta` and gray airlight.
    pub fn hazy(&self, beta: f64, airlight: f64) -> Result<Vec<u8>, JsError> {
        Ok(rgba(&self.hazed(beta, airlight)?.0, 1.0))
    }

    pub fn infrared(&self, beta: f64) -> Result<Vec<u8>, JsError> {
        Ok(rgba(&self.infrared_image(beta)?, 1.0))
    }

    /// Inverts the scattering model with the true transmission floored at `t_min`.
    pub fn dehaze(&self, beta: f64, airlight: f64, t_min: f64) -> Result<Vec<u8>, JsError> {
        let (hazy, t, p) = self.hazed(beta, airlight)?;
        Ok(rgba(&analytic_dehaze(&hazy, &t, &p, t_min).map_err(js)?, 1.0))
    }

    /// Inconsistency map between the edge maps of the hazy visible image and
    /// the infrared image, scaled so the largest attainable value is white.
    pub fn inconsistency(&self, beta: f64, airlight: f64, alpha: f64, beta_w: f64) -> Result<Vec<u8>, JsError> {
        let w = FusionWeights { alpha, beta_w };
        w.validate().map_err(js)?;
        let edges = |img: &ImageTensor| -> Result<FeatureMap<f64>, JsError> {
            let e = sobel_edges(&img.luminance()).map_err(js)?;
            FeatureMap::new(e.tensor().cast(), 1).map_err(js)
        };
        let s_vi = edges(&self.hazed(beta, airlight)?.0)?;
        let s_in = edges(&self.infrared_image(beta)?)?;
        let f = inconsistency_map(&s_vi, &s_in, &w).map_err(js)?;
        let img = ImageTensor::new(f.tensor.cast(), vifnet::imaging::ColorSpace::Gray).map_err(js)?;
        Ok(rgba(&img, (1.0 / alpha.max(beta_w)) as f32))
    }
}

impl Demo {
    fn hazed(&self, beta: f64, airlight: f64) -> Result<(ImageTensor, ImageTensor, HazeParams), JsError> {
        let p = HazeParams::gray(beta, airlight).map_err(js)?;
        let t = transmission_from_depth(&self.scene.depth, &p).map_err(js)?;
        let hazy = apply_scattering(&self.scene.clean, &t, &p).map_err(js)?;
        Ok((hazy, t, p))
    }

    fn infrared_image(&self, beta: f64) -> Result<ImageTensor, JsError> {
        synth_infrared(&self.scene.clean, &self.scene.depth, &InfraredParams::for_visible(beta)).map_err(js)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn views_are_canvas_sized_and_inversion_restores_the_scene() {
        let d = Demo::new(32, 4).ok().unwrap();
        let n = d.size() * d.size() * 4;
        let clean = d.clean();
        assert_eq!(clean.len(), n);
        assert_eq!(d.depth().len(), n);
        let hazy = d.hazy(0.06, 0.9).ok().unwrap();
        assert_ne!(hazy, clean);
        assert_eq!(d.infrared(0.06).ok().unwrap().len(), n);
        let back = d.dehaze(0.06, 0.9, 0.01).ok().unwrap();
        assert!(back.iter().zip(&clean).all(|(a, b)| a.abs_diff(*b) <= 1));
        let f = d.inconsistency(0.12, 0.9, 0.5, 0.5).ok().unwrap();
        assert!(f.chunks(4).all(|p| p[3] == 255));
    }
}
