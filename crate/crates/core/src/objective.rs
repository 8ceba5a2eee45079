//! Training losses and image quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{sobel_graph, ImageTensor};
use crate::nn::{Graph, Kernel2d, Var};
use crate::tensor::Elem;

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const GAUSS_TAPS: usize = 11;
pub const GAUSS_SIGMA: f64 = 1.5;
pub const DICE_C3: f64 = 1.0;
pub const PSNR_CAP_DB: f64 = 100.0;
pub const PSNR_MSE_FLOOR: f64 = 1e-10;
/// Lower bound applied to each per-scale similarity before exponentiation.
pub const MS_SSIM_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 1.0, lambda2: 0.2, lambda3: 0.05 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda1, self.lambda2, self.lambda3];
        if l.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative, got {l:?}")));
        }
        if l.iter().all(|&v| v == 0.0) {
            return Err(Error::Config("all loss weights are zero".into()));
        }
        Ok(())
    }
}

/// Multi-scale SSIM settings; the luminance and contrast-structure exponents
/// share one weight per scale.
#[derive(Clone, Debug, PartialEq)]
pub struct MsSsimConfig {
    pub weights: Vec<f64>,
    pub c1: f64,
    pub c2: f64,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        MsSsimConfig { weights: MS_SSIM_WEIGHTS.to_vec(), c1: SSIM_C1, c2: SSIM_C2 }
    }
}

impl MsSsimConfig {
    /// The first `m` standard weights, renormalized to sum to one.
    pub fn with_scales(m: usize) -> Result<Self> {
        if m == 0 || m > MS_SSIM_WEIGHTS.len() {
            return Err(Error::Config(format!("MS-SSIM scale count must be 1..=5, got {m}")));
        }
        let w = &MS_SSIM_WEIGHTS[..m];
        let total: f64 = w.iter().sum();
        Ok(MsSsimConfig { weights: w.iter().map(|v| v / total).collect(), ..Default::default() })
    }

    /// Most scales (up to five) whose coarsest level still fits a window.
    pub fn fitting(h: usize, w: usize) -> Result<Self> {
        let side = h.min(w);
        let m = (1..=MS_SSIM_WEIGHTS.len()).rev().find(|&m| min_side(m) <= side).ok_or_else(|| {
            Error::ScaleConfig(format!("{h}x{w} is smaller than one {GAUSS_TAPS}-pixel window"))
        })?;
        if m == MS_SSIM_WEIGHTS.len() {
            Ok(Self::default())
        } else {
            Self::with_scales(m)
        }
    }

    pub fn scales(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Config("MS-SSIM needs at least one positive exponent".into()));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::Config("MS-SSIM constants must be positive".into()));
        }
        Ok(())
    }

    pub fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let need = min_side(self.scales());
        if h.min(w) < need {
            return Err(Error::ScaleConfig(format!(
                "{h}x{w} too small for {} scales (needs {need} px)",
                self.scales()
            )));
        }
        Ok(())
    }
}

fn min_side(m: usize) -> usize {
    (1usize << (m - 1)) * GAUSS_TAPS
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps() -> Vec<f64> {
    let c = (GAUSS_TAPS / 2) as f64;
    let raw: Vec<f64> = (0..GAUSS_TAPS).map(|i| (-(i as f64 - c).powi(2) / (2.0 * GAUSS_SIGMA * GAUSS_SIGMA)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn gauss_blur<T: Elem>(g: &Graph<T>, x: Var) -> Var {
    let taps = gaussian_taps();
    let row = Kernel2d::new(1, GAUSS_TAPS, taps.clone());
    let col = Kernel2d::new(GAUSS_TAPS, 1, taps);
    let y = g.filter(x, &row);
    g.filter(y, &col)
}

/// Contrast-structure and luminance maps over valid Gaussian windows.
fn ssim_parts<T: Elem>(g: &Graph<T>, x: Var, y: Var, c1: f64, c2: f64) -> (Var, Var) {
    let mx = gauss_blur(g, x);
    let my = gauss_blur(g, y);
    let mx2 = g.square(mx);
    let my2 = g.square(my);
    let mxy = g.mul(mx, my);
    let sxx = g.sub(gauss_blur(g, g.square(x)), mx2);
    let syy = g.sub(gauss_blur(g, g.square(y)), my2);
    let sxy = g.sub(gauss_blur(g, g.mul(x, y)), mxy);
    let cs_num = g.affine(sxy, 2.0, c2);
    let cs_den = g.affine(g.add(sxx, syy), 1.0, c2);
    let cs = g.div(cs_num, cs_den);
    let l_num = g.affine(mxy, 2.0, c1);
    let l_den = g.affine(g.add(mx2, my2), 1.0, c1);
    let l = g.div(l_num, l_den);
    (l, cs)
}

pub fn l1_graph<T: Elem>(g: &Graph<T>, x: Var, y: Var) -> Var {
    let d = g.sub(x, y);
    g.mean(g.abs(d))
}

/// Mean over the batch of `1 − MS-SSIM`.
pub fn ms_ssim_graph<T: Elem>(g: &Graph<T>, x: Var, y: Var, cfg: &MsSsimConfig) -> Var {
    let m = cfg.scales();
    let (mut x, mut y) = (x, y);
    let mut prod: Option<Var> = None;
    for (i, &w) in cfg.weights.iter().enumerate() {
        if i > 0 {
            x = g.avg_pool2x(x);
            y = g.avg_pool2x(y);
        }
        let (l, cs) = ssim_parts(g, x, y, cfg.c1, cfg.c2);
        let map = if i + 1 == m { g.mul(l, cs) } else { cs };
        let v = g.mean_per_item(map);
        let v = g.clamp(v, MS_SSIM_FLOOR, f64::INFINITY);
        let v = g.powf(v, w);
        prod = Some(match prod {
            None => v,
            Some(p) => g.mul(p, v),
        });
    }
    let score = g.mean(prod.expect("at least one scale"));
    g.one_minus(score)
}

/// Per-channel Dice ratio on Sobel maps, summed over channels and averaged over
/// the batch.
pub fn dice_graph<T: Elem>(g: &Graph<T>, x: Var, y: Var) -> Var {
    let n = g.shape(x).n;
    let a = sobel_graph(g, x);
    let b = sobel_graph(g, y);
    let saa = g.sum_spatial(g.square(a));
    let sbb = g.sum_spatial(g.square(b));
    let sab = g.sum_spatial(g.mul(a, b));
    let num = g.affine(g.add(saa, sbb), 1.0, DICE_C3);
    let den = g.affine(sab, 2.0, DICE_C3);
    let ratio = g.div(num, den);
    g.affine(g.sum(ratio), 1.0 / n as f64, 0.0)
}

/// Graph handles for each enabled loss term and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l1: Option<Var>,
    pub ms_ssim: Option<Var>,
    pub dice: Option<Var>,
    pub total: Var,
}

/// Weighted sum of the three terms; terms with a zero weight are skipped.
pub fn total_loss_graph<T: Elem>(g: &Graph<T>, x: Var, y: Var, w: &LossWeights, cfg: &MsSsimConfig) -> LossVars {
    let l1 = (w.lambda1 > 0.0).then(|| l1_graph(g, x, y));
    let ms = (w.lambda2 > 0.0).then(|| ms_ssim_graph(g, x, y, cfg));
    let dice = (w.lambda3 > 0.0).then(|| dice_graph(g, x, y));
    let mut total: Option<Var> = None;
    for (term, lambda) in [(l1, w.lambda1), (ms, w.lambda2), (dice, w.lambda3)] {
        if let Some(t) = term {
            let s = g.affine(t, lambda, 0.0);
            total = Some(match total {
                None => s,
                Some(acc) => g.add(acc, s),
            });
        }
    }
    LossVars { l1, ms_ssim: ms, dice, total: total.expect("validated weights") }
}

fn check_same(x: &ImageTensor, y: &ImageTensor) -> Result<()> {
    if x.tensor().shape() != y.tensor().shape() {
        return Err(Error::Shape(format!("{} vs {}", x.tensor().shape(), y.tensor().shape())));
    }
    Ok(())
}

fn eval<F: FnOnce(&Graph<f64>, Var, Var) -> Var>(x: &ImageTensor, y: &ImageTensor, f: F) -> f64 {
    let g = Graph::new();
    let (a, b) = (g.constant(x.tensor().cast()), g.constant(y.tensor().cast()));
    let out = f(&g, a, b);
    g.scalar(out)
}

pub fn l1_loss(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_same(x, y)?;
    Ok(eval(x, y, |g, a, b| l1_graph(g, a, b)))
}

pub fn ms_ssim_loss(x: &ImageTensor, y: &ImageTensor, cfg: &MsSsimConfig) -> Result<f64> {
    check_same(x, y)?;
    cfg.validate()?;
    cfg.check_size(x.height(), x.width())?;
    Ok(eval(x, y, |g, a, b| ms_ssim_graph(g, a, b, cfg)))
}

pub fn dice_edge_loss(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_same(x, y)?;
    if x.channels() != 3 {
        return Err(Error::Shape(format!("edge loss needs 3 channels, got {}", x.channels())));
    }
    Ok(eval(x, y, dice_graph))
}

pub fn total_loss(x: &ImageTensor, y: &ImageTensor, w: &LossWeights, cfg: &MsSsimConfig) -> Result<f64> {
    w.validate()?;
    let mut total = 0.0;
    if w.lambda1 > 0.0 {
        total += w.lambda1 * l1_loss(x, y)?;
    }
    if w.lambda2 > 0.0 {
        total += w.lambda2 * ms_ssim_loss(x, y, cfg)?;
    }
    if w.lambda3 > 0.0 {
        total += w.lambda3 * dice_edge_loss(x, y)?;
    }
    Ok(total)
}

pub fn mse(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_same(x, y)?;
    let s: f64 = x.data().iter().zip(y.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok(s / x.data().len() as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn psnr(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

/// Single-scale SSIM, averaged over valid windows and channels.
pub fn ssim(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_same(x, y)?;
    if x.height().min(x.width()) < GAUSS_TAPS {
        return Err(Error::ScaleConfig(format!("SSIM needs at least {GAUSS_TAPS} px per side")));
    }
    Ok(eval(x, y, |g, a, b| {
        let (l, cs) = ssim_parts(g, a, b, SSIM_C1, SSIM_C2);
        g.mean(g.mul(l, cs))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{sobel_edges, ColorSpace};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
        let color = if c == 1 { ColorSpace::Gray } else { ColorSpace::Rgb };
        let v: Vec<f32> = (0..c * h * w).map(|_| rng.random()).collect();
        ImageTensor::from_fn(h, w, color, |y, x, ch| v[(ch * h + y) * w + x]).unwrap()
    }

    /// SSIM statistics computed window by window with explicit loops.
    fn direct_window_stats(x: &[f64], y: &[f64], w: usize, top: usize, left: usize) -> (f64, f64, f64, f64, f64) {
        let taps = gaussian_taps();
        let (mut mx, mut my) = (0.0, 0.0);
        for i in 0..GAUSS_TAPS {
            for j in 0..GAUSS_TAPS {
                let k = taps[i] * taps[j];
                let p = (top + i) * w + left + j;
                mx += k * x[p];
                my += k * y[p];
            }
        }
        let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
        for i in 0..GAUSS_TAPS {
            for j in 0..GAUSS_TAPS {
                let k = taps[i] * taps[j];
                let p = (top + i) * w + left + j;
                vx += k * (x[p] - mx).powi(2);
                vy += k * (y[p] - my).powi(2);
                cxy += k * (x[p] - mx) * (y[p] - my);
            }
        }
        (mx, my, vx, vy, cxy)
    }

    /// Per-plane mean luminance and contrast-structure terms.
    fn direct_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> (f64, f64) {
        let (mut ls, mut css) = (0.0, 0.0);
        let mut count = 0.0;
        for top in 0..=h - GAUSS_TAPS {
            for left in 0..=w - GAUSS_TAPS {
                let (mx, my, vx, vy, cxy) = direct_window_stats(x, y, w, top, left);
                let l = (2.0 * mx * my + SSIM_C1) / (mx * mx + my * my + SSIM_C1);
                let cs = (2.0 * cxy + SSIM_C2) / (vx + vy + SSIM_C2);
                ls += l * cs;
                css += cs;
                count += 1.0;
            }
        }
        (ls / count, css / count)
    }

    fn planes(img: &ImageTensor) -> Vec<Vec<f64>> {
        (0..img.channels()).map(|c| img.plane(c).iter().map(|&v| v as f64).collect()).collect()
    }

    fn pool(p: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                out.push((p[2 * y * w + 2 * x] + p[2 * y * w + 2 * x + 1] + p[(2 * y + 1) * w + 2 * x] + p[(2 * y + 1) * w + 2 * x + 1]) / 4.0);
            }
        }
        out
    }

    #[test]
    fn ssim_matches_direct_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let x = rand_img(16, 16, 3, &mut rng);
            let y = rand_img(16, 16, 3, &mut rng);
            let (px, py) = (planes(&x), planes(&y));
            let want: f64 = (0..3).map(|c| direct_plane(&px[c], &py[c], 16, 16).0).sum::<f64>() / 3.0;
            assert!((ssim(&x, &y).unwrap() - want).abs() < 1e-9);
        }
    }

    #[test]
    fn ms_ssim_two_scales_matches_direct_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_img(32, 32, 1, &mut rng);
        // Correlated pair keeps every contrast-structure mean positive.
        let y = ImageTensor::from_fn(32, 32, ColorSpace::Gray, |r, c, _| 0.7 * x.at(r, c, 0) + 0.3 * rng_val(r, c)).unwrap();
        let cfg = MsSsimConfig::with_scales(2).unwrap();
        let (px, py) = (planes(&x).remove(0), planes(&y).remove(0));
        let (_, cs1) = direct_plane(&px, &py, 32, 32);
        let (ssim2, _) = direct_plane(&pool(&px, 32, 32), &pool(&py, 32, 32), 16, 16);
        let want = 1.0 - cs1.powf(cfg.weights[0]) * ssim2.powf(cfg.weights[1]);
        assert!((ms_ssim_loss(&x, &y, &cfg).unwrap() - want).abs() < 1e-9);
    }

    fn rng_val(r: usize, c: usize) -> f32 {
        ((r * 37 + c * 11) % 17) as f32 / 17.0
    }

    #[test]
    fn ms_ssim_constant_images_follow_luminance_formula() {
        let cfg = MsSsimConfig::default();
        let (c1, c2) = (0.3f32, 0.7f32);
        let x = ImageTensor::filled(176, 176, ColorSpace::Rgb, c1).unwrap();
        let y = ImageTensor::filled(176, 176, ColorSpace::Rgb, c2).unwrap();
        let (a, b) = (c1 as f64, c2 as f64);
        let l = (2.0 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1);
        let want = 1.0 - l.powf(MS_SSIM_WEIGHTS[4]);
        assert!((ms_ssim_loss(&x, &y, &cfg).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn ms_ssim_scale_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_img(96, 96, 3, &mut rng);
        assert!(matches!(ms_ssim_loss(&x, &x, &MsSsimConfig::default()), Err(Error::ScaleConfig(_))));
        assert_eq!(MsSsimConfig::fitting(96, 96).unwrap().scales(), 4);
        assert_eq!(MsSsimConfig::fitting(240, 240).unwrap(), MsSsimConfig::default());
        assert!(MsSsimConfig::fitting(10, 40).is_err());
        let w: f64 = MsSsimConfig::with_scales(3).unwrap().weights.iter().sum();
        assert!((w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn floors_at_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = MsSsimConfig::fitting(48, 48).unwrap();
        for _ in 0..3 {
            let x = rand_img(48, 48, 3, &mut rng);
            assert_eq!(l1_loss(&x, &x).unwrap(), 0.0);
            assert!(ms_ssim_loss(&x, &x, &cfg).unwrap().abs() < 1e-6);
            assert!((dice_edge_loss(&x, &x).unwrap() - 3.0).abs() < 1e-9);
            let w = LossWeights::default();
            assert!((total_loss(&x, &x, &w, &cfg).unwrap() - 3.0 * w.lambda3).abs() < 1e-6);
        }
        let flat = ImageTensor::filled(16, 16, ColorSpace::Rgb, 0.2).unwrap();
        let other = ImageTensor::filled(16, 16, ColorSpace::Rgb, 0.9).unwrap();
        assert_eq!(dice_edge_loss(&flat, &other).unwrap(), 3.0);
    }

    #[test]
    fn l1_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_img(9, 9, 3, &mut rng);
        let x = ImageTensor::from_fn(9, 9, ColorSpace::Rgb, |r, c, ch| 0.5 * x.at(r, c, ch)).unwrap();
        let y = ImageTensor::from_fn(9, 9, ColorSpace::Rgb, |r, c, ch| x.at(r, c, ch) + 0.125).unwrap();
        assert!((l1_loss(&x, &y).unwrap() - 0.125).abs() < 1e-7);
        let z = rand_img(9, 9, 3, &mut rng);
        let want = x.data().iter().zip(z.data()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum::<f64>() / x.data().len() as f64;
        assert!((l1_loss(&x, &z).unwrap() - want).abs() < 1e-12);
        let g = rand_img(9, 9, 1, &mut rng);
        assert!(matches!(l1_loss(&x, &g), Err(Error::Shape(_))));
    }

    #[test]
    fn dice_matches_two_stage_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let x = rand_img(8, 8, 3, &mut rng);
            let y = rand_img(8, 8, 3, &mut rng);
            let (ex, ey) = (sobel_edges(&x).unwrap(), sobel_edges(&y).unwrap());
            let mut want = 0.0;
            for c in 0..3 {
                let (a, b) = (ex.plane(c), ey.plane(c));
                let saa: f64 = a.iter().map(|&v| (v as f64).powi(2)).sum();
                let sbb: f64 = b.iter().map(|&v| (v as f64).powi(2)).sum();
                let sab: f64 = a.iter().zip(b).map(|(&u, &v)| u as f64 * v as f64).sum();
                want += (saa + sbb + DICE_C3) / (2.0 * sab + DICE_C3);
            }
            let got = dice_edge_loss(&x, &y).unwrap();
            // The edge images went through f32 storage; the loss stays in f64.
            assert!((got - want).abs() <= 1e-6 * want);
            assert!(got >= 3.0);
            assert_eq!(got, dice_edge_loss(&y, &x).unwrap());
        }
        let gray = rand_img(8, 8, 1, &mut rng);
        assert!(matches!(dice_edge_loss(&gray, &gray), Err(Error::Shape(_))));
    }

    #[test]
    fn total_is_weighted_sum_of_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = MsSsimConfig::fitting(24, 24).unwrap();
        let x = rand_img(24, 24, 3, &mut rng);
        let y = rand_img(24, 24, 3, &mut rng);
        let w = LossWeights { lambda1: 0.7, lambda2: 0.4, lambda3: 0.1 };
        let want = 0.7 * l1_loss(&x, &y).unwrap() + 0.4 * ms_ssim_loss(&x, &y, &cfg).unwrap() + 0.1 * dice_edge_loss(&x, &y).unwrap();
        assert_eq!(total_loss(&x, &y, &w, &cfg).unwrap(), want);
        let only = LossWeights { lambda1: 2.0, lambda2: 0.0, lambda3: 0.0 };
        assert_eq!(total_loss(&x, &y, &only, &cfg).unwrap(), 2.0 * l1_loss(&x, &y).unwrap());
        let g = Graph::<f64>::new();
        let v = total_loss_graph(&g, g.constant(x.tensor().cast()), g.constant(y.tensor().cast()), &w, &cfg);
        assert!((g.scalar(v.total) - want).abs() < 1e-12);
        assert!(LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 }.validate().is_err());
        assert!(LossWeights { lambda1: -1.0, lambda2: 0.0, lambda3: 1.0 }.validate().is_err());
    }

    #[test]
    fn psnr_examples_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_img(16, 16, 3, &mut rng);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP_DB);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let a = ImageTensor::filled(16, 16, ColorSpace::Rgb, 0.25).unwrap();
        let b = ImageTensor::filled(16, 16, ColorSpace::Rgb, 0.375).unwrap();
        // 0.125² = 1/64 → 10·log10(64)
        assert!((psnr(&a, &b).unwrap() - 10.0 * 64f64.log10()).abs() < 1e-9);
        let mut last = f64::INFINITY;
        for k in 1..10 {
            let y = ImageTensor::from_fn(16, 16, ColorSpace::Rgb, |r, c, ch| 0.9 * x.at(r, c, ch) + 0.01 * k as f32).unwrap();
            let base = ImageTensor::from_fn(16, 16, ColorSpace::Rgb, |r, c, ch| 0.9 * x.at(r, c, ch)).unwrap();
            let p = psnr(&base, &y).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    fn fd_check(h: usize, f: impl Fn(&Graph<f64>, Var, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_img(h, h, 3, &mut rng).tensor().cast::<f64>();
        let y = rand_img(h, h, 3, &mut rng).tensor().cast::<f64>();
        let g = Graph::new();
        let xv = g.leaf(x.clone());
        let l = f(&g, xv, g.constant(y.clone()));
        let grads = g.backward(l);
        let an = grads.get(xv).unwrap().clone();
        let eval = |t: crate::tensor::Tensor<f64>| {
            let g = Graph::new();
            let v = f(&g, g.constant(t), g.constant(y.clone()));
            g.scalar(v)
        };
        let h_ = 1e-6;
        for _ in 0..20 {
            let j = rng.random_range(0..x.len());
            let mut up = x.clone();
            up.data_mut()[j] += h_;
            let mut dn = x.clone();
            dn.data_mut()[j] -= h_;
            let fd = (eval(up) - eval(dn)) / (2.0 * h_);
            let a = an.data()[j];
            assert!((fd - a).abs() <= 1e-3 * fd.abs().max(a.abs()).max(1e-8), "[{j}] fd {fd} vs {a}");
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        fd_check(12, |g, x, y| l1_graph(g, x, y));
        let cfg = MsSsimConfig::with_scales(1).unwrap();
        fd_check(12, move |g, x, y| ms_ssim_graph(g, x, y, &cfg));
        fd_check(12, dice_graph);
    }
}
