//! Procedural outdoor scenes: sky, a textured ground plane, box facades and
//! shaded spheres, rendered to clean radiance plus metric depth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::haze::{DepthMap, MAX_DEPTH_M};
use crate::imaging::{ColorSpace, ImageTensor, MIN_IMAGE_DIM};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub clean: ImageTensor,
    pub depth: DepthMap,
}

struct Canvas {
    w: usize,
    rgb: Vec<[f64; 3]>,
    depth: Vec<f64>,
}

impl Canvas {
    fn put(&mut self, y: usize, x: usize, d: f64, c: [f64; 3]) {
        let i = y * self.w + x;
        if d < self.depth[i] {
            self.depth[i] = d;
            self.rgb[i] = c;
        }
    }
}

fn color<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

fn scale(c: [f64; 3], s: f64) -> [f64; 3] {
    [c[0] * s, c[1] * s, c[2] * s]
}

/// Renders one scene; the same seed always yields the same pixels.
pub fn render_scene(height: usize, width: usize, seed: u64) -> Result<Scene> {
    if height < MIN_IMAGE_DIM || width < MIN_IMAGE_DIM {
        return Err(Error::Config(format!("scene {height}x{width} below the {MIN_IMAGE_DIM}-pixel minimum")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height, width);
    let mut cv = Canvas { w, rgb: vec![[0.0; 3]; h * w], depth: vec![f64::INFINITY; h * w] };

    // Sky: vertical gradient at the far plane.
    let horizon = (h as f64 * rng.random_range(0.3..0.5)) as usize;
    // Desaturated blue-gray, brighter toward the horizon.
    let base: f64 = rng.random_range(0.5..0.75);
    let tint: f64 = rng.random_range(0.0..0.15);
    let top = [base - tint, base - tint / 2.0, base + tint / 2.0];
    let low = top.map(|v| (v + rng.random_range(0.1..0.2)).min(0.95));
    for y in 0..h {
        let a = (y as f64 / horizon.max(1) as f64).min(1.0);
        let c = [0, 1, 2].map(|k| top[k] * (1.0 - a) + low[k] * a);
        for x in 0..w {
            cv.put(y, x, MAX_DEPTH_M, c);
        }
    }

    // Ground plane: depth falls off as 1/(row below horizon).
    let near = rng.random_range(1.5..5.0);
    let k = near * (h - horizon) as f64;
    let focal = w as f64 * 0.8;
    let g1 = color(&mut rng, 0.15, 0.55);
    let g2 = color(&mut rng, 0.25, 0.75);
    let tile = rng.random_range(0.8..2.5);
    for y in horizon..h {
        let d = (k / (y - horizon + 1) as f64).min(MAX_DEPTH_M);
        for x in 0..w {
            let u = (x as f64 - w as f64 / 2.0) * d / focal;
            let checker = ((u / tile).floor() as i64 + (d / tile).floor() as i64).rem_euclid(2) == 0;
            cv.put(y, x, d, if checker { g1 } else { g2 });
        }
    }
    let ground_row = |d: f64| horizon as f64 + k / d - 1.0;

    // Box facades with a window grid, drawn with a depth test.
    for _ in 0..rng.random_range(2..6) {
        let d: f64 = rng.random_range(5.0..MAX_DEPTH_M - 2.0);
        let base = ground_row(d).min(h as f64 - 1.0);
        let bw = rng.random_range(0.15..0.45) * w as f64 * 8.0 / d.max(8.0);
        let bh = rng.random_range(0.2..0.7) * h as f64 * 8.0 / d.max(8.0);
        let x0 = rng.random_range(-0.2..1.0) * w as f64;
        let wall = color(&mut rng, 0.2, 0.9);
        let glass = color(&mut rng, 0.05, 0.4);
        let period = rng.random_range(3.0..7.0);
        let (ys, ye) = ((base - bh).max(0.0) as usize, base.max(0.0) as usize);
        let (xs, xe) = (x0.max(0.0) as usize, ((x0 + bw) as usize).min(w));
        for y in ys..=ye.min(h - 1) {
            for x in xs..xe {
                let (py, px) = ((y as f64 - ys as f64) % period, (x as f64 - xs as f64) % period);
                let window = py > period * 0.35 && px > period * 0.35;
                cv.put(y, x, d, if window { glass } else { wall });
            }
        }
    }

    // Lambert-shaded spheres resting near the ground.
    let light = {
        let l = [rng.random_range(-0.6..0.6), rng.random_range(-0.9..-0.3), -0.6f64];
        let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        [l[0] / n, l[1] / n, l[2] / n]
    };
    for _ in 0..rng.random_range(1..4) {
        let d: f64 = rng.random_range(3.0..20.0);
        let r_px = rng.random_range(0.05..0.15) * h as f64 * 6.0 / d.max(6.0);
        let cy = ground_row(d) - r_px;
        let cx = rng.random_range(0.1..0.9) * w as f64;
        let r_m = r_px * d / focal;
        let albedo = color(&mut rng, 0.3, 1.0);
        let (y0, y1) = ((cy - r_px).max(0.0) as usize, ((cy + r_px).ceil() as usize).min(h));
        let (x0, x1) = ((cx - r_px).max(0.0) as usize, ((cx + r_px).ceil() as usize).min(w));
        for y in y0..y1 {
            for x in x0..x1 {
                let (dy, dx) = ((y as f64 + 0.5 - cy) / r_px, (x as f64 + 0.5 - cx) / r_px);
                let rho2 = dx * dx + dy * dy;
                if rho2 >= 1.0 {
                    continue;
                }
                let nz = -(1.0 - rho2).sqrt();
                let lambert = (dx * light[0] + dy * light[1] + nz * light[2]).max(0.0);
                cv.put(y, x, (d + r_m * nz).max(0.0), scale(albedo, 0.25 + 0.75 * lambert));
            }
        }
    }

    // Fine texture so local structure is present everywhere.
    let mut data = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        let grain = rng.random_range(-0.015..0.015);
        for c in 0..3 {
            data[c * h * w + i] = (cv.rgb[i][c] + grain).clamp(0.0, 1.0) as f32;
        }
    }
    let depth = cv.depth.iter().map(|d| d.clamp(0.0, MAX_DEPTH_M)).collect();
    Ok(Scene {
        clean: ImageTensor::new(Tensor::from_vec(Shape::new(1, 3, h, w), data)?, ColorSpace::Rgb)?,
        depth: DepthMap::new(h, w, depth)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_valid() {
        let a = render_scene(64, 80, 3).unwrap();
        assert_eq!(a, render_scene(64, 80, 3).unwrap());
        assert_ne!(a.clean, render_scene(64, 80, 4).unwrap().clean);
        assert_eq!((a.clean.height(), a.clean.width()), (64, 80));
        assert!(a.depth.data().iter().all(|d| (0.0..=MAX_DEPTH_M).contains(d)));
        // Sky sits at the far plane and the bottom row is near.
        assert_eq!(a.depth.at(0, 0), MAX_DEPTH_M);
        assert!(a.depth.at(63, 40) < 10.0);
        assert!(render_scene(4, 64, 1).is_err());
    }
}
