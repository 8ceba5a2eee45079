//! Acceptance suite. Run with `cargo test --release --test acceptance`.
//! `VIFNET_ACCEPT_ONLY=name,name` restricts the run to some criteria.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vifnet::data::{generate_dataset_with, misalign, scaled_offset, synth_scene, Dataset, GenerateOptions, SampleTriplet, Split};
use vifnet::dsfe::{dsfe_forward, Dsfe};
use vifnet::backbone::BranchConfig;
use vifnet::fusion::{inconsistency_map, FusionWeights, ModelConfig, Variant, VifnetModel};
use vifnet::haze::{analytic_dehaze, apply_scattering, FogPreset, HazeParams};
use vifnet::imaging::{ColorSpace, FeatureMap, FeaturePyramid, ImageTensor};
use vifnet::nn::{Ctx, Graph, ParamStore, Var};
use vifnet::objective::{
    dice_edge_loss, dice_graph, gaussian_taps, l1_graph, l1_loss, ms_ssim_graph, ms_ssim_loss, psnr, ssim, total_loss_graph,
    LossWeights, MsSsimConfig, GAUSS_TAPS, SSIM_C1, SSIM_C2,
};
use vifnet::train::{evaluate, train, Passthrough, TrainConfig};
use vifnet::Tensor;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_image(h: usize, w: usize, color: ColorSpace, rng: &mut ChaCha8Rng) -> ImageTensor {
    let n = color.channels() * h * w;
    let v: Vec<f32> = (0..n).map(|_| rng.random()).collect();
    ImageTensor::from_fn(h, w, color, |y, x, c| v[(c * h + y) * w + x]).unwrap()
}

/// Random image with smooth structure plus noise, so SSIM statistics vary.
fn textured(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    let (fy, fx, ph): (f32, f32, f32) = (rng.random_range(0.05..0.6), rng.random_range(0.05..0.6), rng.random_range(0.0..6.0));
    let noise: Vec<f32> = (0..3 * h * w).map(|_| rng.random_range(-0.2..0.2)).collect();
    ImageTensor::from_fn(h, w, ColorSpace::Rgb, |y, x, c| {
        let base = 0.5 + 0.3 * ((y as f32 * fy + ph + c as f32).sin() * (x as f32 * fx).cos());
        (base + noise[(c * h + y) * w + x]).clamp(0.0, 1.0)
    })
    .unwrap()
}

fn haze_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (h, w) = (25, 40);
    let j = rand_image(h, w, ColorSpace::Rgb, &mut rng);
    let t = ImageTensor::from_fn(h, w, ColorSpace::Gray, |_, _, _| 0.0).unwrap();
    let tv: Vec<f32> = (0..h * w).map(|_| rng.random_range(0.1..=1.0)).collect();
    let t = ImageTensor::new(Tensor::from_vec(t.tensor().shape(), tv).unwrap(), ColorSpace::Gray).unwrap();
    let p = HazeParams::new(0.12, [rng.random_range(0.8..1.0), rng.random_range(0.8..1.0), rng.random_range(0.8..1.0)]).unwrap();
    let back = analytic_dehaze(&apply_scattering(&j, &t, &p).unwrap(), &t, &p, 0.05).unwrap();
    let err = back.tensor().max_abs_diff(j.tensor());
    let secs = start.elapsed().as_secs_f64();
    ensure(err <= 1e-6 && secs < 1.0, format!("{} pixels, max error {err:.2e}, {secs:.3} s", h * w))
}

fn loss_floors() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = MsSsimConfig::fitting(192, 192).unwrap();
    let (mut worst_l1, mut worst_ms, mut worst_dice) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10 {
        let x = textured(192, 192, &mut rng);
        worst_l1 = worst_l1.max(l1_loss(&x, &x).unwrap().abs());
        worst_ms = worst_ms.max(ms_ssim_loss(&x, &x, &cfg).unwrap().abs());
        worst_dice = worst_dice.max((dice_edge_loss(&x, &x).unwrap() - 3.0).abs());
    }
    ensure(
        worst_l1 == 0.0 && worst_ms <= 1e-6 && worst_dice <= 1e-6,
        format!("10 images, {} MS-SSIM scales: |L1| {worst_l1:.1e}, |L_M| {worst_ms:.1e}, |Dice-3| {worst_dice:.1e}", cfg.scales()),
    )
}

fn close(fd: f64, an: f64) -> bool {
    (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()) || (fd - an).abs() <= 1e-9
}

/// Central differences on 20 input pixels of a loss of `x` against `y`.
fn input_gradient_check(name: &str, x: &Tensor<f64>, y: &Tensor<f64>, f: &dyn Fn(&Graph<f64>, Var, Var) -> Var) -> Check {
    let eval = |x: &Tensor<f64>| {
        let g = Graph::new();
        let l = f(&g, g.constant(x.clone()), g.constant(y.clone()));
        g.scalar(l)
    };
    let g = Graph::new();
    let xv = g.leaf(x.clone());
    let l = f(&g, xv, g.constant(y.clone()));
    let grads = g.backward(l);
    let an = grads.get(xv).expect("input gradient").clone();
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let i = rng.random_range(0..x.len());
        let (mut up, mut dn) = (x.clone(), x.clone());
        up.data_mut()[i] += h;
        dn.data_mut()[i] -= h;
        let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
        let a = an.data()[i];
        if !close(fd, a) {
            return Err(format!("{name}: pixel {i} fd {fd:.6e} vs analytic {a:.6e}"));
        }
        worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-12));
    }
    Ok(format!("{name} {worst:.1e}"))
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig { base_channels: 8, dsfe_width: 8, variant: Variant::DsfeInconsistency, ..ModelConfig::default() }
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 16;
    let x: Tensor<f64> = textured(n, n, &mut rng).tensor().cast();
    // A perturbed copy keeps every SSIM scale positive, away from the clamp.
    let jitter: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-0.1..0.1)).collect();
    let y = Tensor::from_vec(x.shape(), x.data().iter().zip(&jitter).map(|(v, j)| (v + j).clamp(0.0, 1.0)).collect()).unwrap();
    let ms = MsSsimConfig::fitting(n, n).unwrap();
    let w = LossWeights::default();
    let mut parts = vec![
        input_gradient_check("l1", &x, &y, &|g, a, b| l1_graph(g, a, b))?,
        input_gradient_check("ms_ssim", &x, &y, &|g, a, b| ms_ssim_graph(g, a, b, &ms))?,
        input_gradient_check("dice", &x, &y, &|g, a, b| dice_graph(g, a, b))?,
        input_gradient_check("total", &x, &y, &|g, a, b| total_loss_graph(g, a, b, &w, &ms).total)?,
    ];

    // Parameters of the whole network under the hybrid loss.
    for variant in Variant::ALL {
        let cfg = ModelConfig { variant, ..tiny_model_config() };
        let mut model = VifnetModel::<f64>::new(cfg, 4).unwrap();
        let vi: Tensor<f64> = textured(n, n, &mut rng).tensor().cast();
        let ir: Tensor<f64> = textured(n, n, &mut rng).luminance().tensor().cast();
        let loss = |m: &VifnetModel<f64>, grads: bool| -> (f64, Vec<Tensor<f64>>) {
            let g = Graph::new();
            let cx = Ctx::train(&g, &m.params);
            let out = m.forward(&cx, g.constant(vi.clone()), g.constant(ir.clone())).output;
            let l = total_loss_graph(&g, out, g.constant(y.clone()), &w, &ms).total;
            if !grads {
                return (g.scalar(l), Vec::new());
            }
            let mut gr = g.backward(l);
            (g.scalar(l), cx.param_grads(&mut gr))
        };
        let (_, grads) = loss(&model, true);
        let ids: Vec<_> = model.params.ids().collect();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let id = ids[rng.random_range(0..ids.len())];
            let j = rng.random_range(0..model.params.get(id).len());
            let orig = model.params.get(id).data()[j];
            model.params.get_mut(id).data_mut()[j] = orig + h;
            let up = loss(&model, false).0;
            model.params.get_mut(id).data_mut()[j] = orig - h;
            let dn = loss(&model, false).0;
            model.params.get_mut(id).data_mut()[j] = orig;
            let fd = (up - dn) / (2.0 * h);
            let an = grads[id.0].data()[j];
            if !close(fd, an) {
                return Err(format!("{} {}[{j}]: fd {fd:.6e} vs analytic {an:.6e}", variant.name(), model.params.name(id)));
            }
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-12));
        }
        parts.push(format!("{} {worst:.1e}", variant.name()));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, format!("worst relative error: {}; {secs:.1} s", parts.join(", ")))
}

fn inconsistency_algebra() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = FusionWeights::default();
    let mut worst_comp = 0.0f64;
    for _ in 0..100 {
        let (h, wd) = (rng.random_range(1..9), rng.random_range(1..9));
        let a: Vec<f64> = (0..h * wd).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..h * wd).map(|_| rng.random()).collect();
        let m = |v: &[f64]| FeatureMap::<f64>::from_fn(1, h, wd, 1, |_, y, x| v[y * wd + x]).unwrap();
        let f = inconsistency_map(&m(&a), &m(&b), &w).unwrap();
        for (k, &got) in f.tensor.data().iter().enumerate() {
            let want = w.alpha * (a[k] * b[k]) + w.beta_w * ((1.0 - a[k]) * (1.0 - b[k]));
            if got != want {
                return Err(format!("pixel {k}: {got} vs scalar {want}"));
            }
        }
        if inconsistency_map(&m(&b), &m(&a), &w).unwrap() != f {
            return Err("not symmetric".into());
        }
        let ca: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        let cb: Vec<f64> = b.iter().map(|v| 1.0 - v).collect();
        worst_comp = worst_comp.max(inconsistency_map(&m(&ca), &m(&cb), &w).unwrap().tensor.max_abs_diff(&f.tensor));
    }
    ensure(worst_comp <= 1e-12, format!("100 pairs exact; complement deviation {worst_comp:.1e}"))
}

fn dsfe_contracts() -> Check {
    let cfg = BranchConfig::with_base(8);
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = Dsfe::new(&mut store, "dsfe", &cfg, 8, &mut rng).unwrap();
    let n = 32;
    let level = |s: u32, shift: f64| {
        let c = 2 * cfg.width(s as usize);
        let hs = n >> (s - 1);
        FeatureMap::from_fn(c, hs, hs, s, |c, y, x| ((c * 13 + y * 5 + x * 3) as f64 * 0.21).sin() + shift).unwrap()
    };
    let pyr = |k: Option<usize>| {
        let sh = |i: usize| if k == Some(i) { 0.4 } else { 0.0 };
        FeaturePyramid::new([level(1, sh(0)), level(2, sh(1)), level(3, sh(2))]).unwrap()
    };
    let base = dsfe_forward(&pyr(None), &d, &store).unwrap();
    for (i, m) in base.maps.iter().enumerate() {
        let s = m.shape();
        if (s.c, s.h, s.w) != (1, n >> i, n >> i) {
            return Err(format!("scale {} has shape {s}", i + 1));
        }
        if !m.tensor.data().iter().all(|&v| v > 0.0 && v < 1.0) {
            return Err(format!("scale {} leaves (0, 1)", i + 1));
        }
    }
    for k in 0..3 {
        let moved = dsfe_forward(&pyr(Some(k)), &d, &store).unwrap();
        for i in 0..3 {
            let changed = moved.maps[i].tensor.max_abs_diff(&base.maps[i].tensor) > 0.0;
            if changed != (k <= i) {
                return Err(format!("Stru{} {} on F_ED{}", i + 1, if changed { "depends" } else { "does not depend" }, k + 1));
            }
        }
    }
    Ok("3 scales (32, 16, 8 px) in (0, 1); Stru_i depends on exactly F_ED1..i".into())
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let taps = gaussian_taps();
    let (mut dp, mut ds) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (h, w) = (rng.random_range(11..24), rng.random_range(11..24));
        let x = textured(h, w, &mut rng);
        let y = textured(h, w, &mut rng);
        let (xd, yd) = (x.data(), y.data());
        let mse: f64 = xd.iter().zip(yd).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / xd.len() as f64;
        dp = dp.max((psnr(&x, &y).unwrap() - 10.0 * (1.0 / mse).log10()).abs());
        let mut total = 0.0;
        let mut count = 0usize;
        for c in 0..3 {
            let (px, py) = (x.plane(c), y.plane(c));
            for top in 0..=h - GAUSS_TAPS {
                for left in 0..=w - GAUSS_TAPS {
                    let mut m = [0.0f64; 5];
                    for i in 0..GAUSS_TAPS {
                        for j in 0..GAUSS_TAPS {
                            let k = taps[i] * taps[j];
                            let (a, b) = (px[(top + i) * w + left + j] as f64, py[(top + i) * w + left + j] as f64);
                            m[0] += k * a;
                            m[1] += k * b;
                            m[2] += k * a * a;
                            m[3] += k * b * b;
                            m[4] += k * a * b;
                        }
                    }
                    let (vx, vy, cxy) = (m[2] - m[0] * m[0], m[3] - m[1] * m[1], m[4] - m[0] * m[1]);
                    let l = (2.0 * m[0] * m[1] + SSIM_C1) / (m[0] * m[0] + m[1] * m[1] + SSIM_C1);
                    let cs = (2.0 * cxy + SSIM_C2) / (vx + vy + SSIM_C2);
                    total += l * cs;
                    count += 1;
                }
            }
        }
        ds = ds.max((ssim(&x, &y).unwrap() - total / count as f64).abs());
    }
    ensure(dp <= 1e-6 && ds <= 1e-6, format!("50 pairs: max |dPSNR| {dp:.1e} dB, max |dSSIM| {ds:.1e}"))
}

/// Shared state for the criteria that train.
struct Lab {
    root: PathBuf,
    desk: Option<(Dataset, Dataset)>,
    models: HashMap<(Variant, u64), VifnetModel<f32>>,
}

const DESK_SCENES: usize = 200;
const DESK_SEED: u64 = 2024;
const DESK_RUN_SEED: u64 = 1;
const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];

fn log(msg: &str) {
    eprintln!("    {msg}");
}

impl Lab {
    fn data(&mut self) -> &(Dataset, Dataset) {
        if self.desk.is_none() {
            let dir = self.root.join("desk_data");
            let _ = std::fs::remove_dir_all(&dir);
            let m = generate_dataset_with(DESK_SCENES, &FogPreset::ALL, DESK_SEED, &dir, &GenerateOptions::default()).unwrap();
            let tr = Dataset::load(&m, Split::Train).unwrap();
            let val = Dataset::load(&m, Split::Val).unwrap();
            log(&format!("desk dataset: {} train / {} val triplets", tr.len(), val.len()));
            self.desk = Some((tr, val));
        }
        self.desk.as_ref().unwrap()
    }

    fn config(seed: u64, variant: Variant) -> TrainConfig {
        let mut c = TrainConfig::desk();
        c.seed = seed;
        c.model.variant = variant;
        c
    }

    /// Desk-scale model, trained once per (variant, seed).
    fn model(&mut self, variant: Variant, seed: u64) -> &VifnetModel<f32> {
        if !self.models.contains_key(&(variant, seed)) {
            let cfg = Self::config(seed, variant);
            let (tr, _) = self.data().clone();
            let start = Instant::now();
            let iters = cfg.iterations;
            let out = train(VifnetModel::new(cfg.model, seed).unwrap(), &tr, &cfg, None, |r| {
                if (r.step + 1) % 1000 == 0 {
                    log(&format!("{} seed {seed}: step {} loss {:.4}", variant.name(), r.step + 1, r.total));
                }
            })
            .unwrap();
            log(&format!("{} seed {seed}: {iters} steps in {:.0} s", variant.name(), start.elapsed().as_secs_f64()));
            self.models.insert((variant, seed), out.model);
        }
        &self.models[&(variant, seed)]
    }
}

fn overfit() -> Check {
    let start = Instant::now();
    let presets = [FogPreset::Mist, FogPreset::Medium, FogPreset::Dense, FogPreset::Medium];
    let samples: Vec<SampleTriplet> = presets
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let s = synth_scene(i, &[p], 11, 96, 96, 30.0 / 65535.0).unwrap().remove(0);
            SampleTriplet::new(s.hazy, s.infrared, s.clean, p, s.entry.id).unwrap()
        })
        .collect();
    let data = Dataset::from_samples(Split::Train, samples);
    let mut cfg = TrainConfig::desk();
    cfg.iterations = 2000;
    cfg.augment = false;
    cfg.lr = 1e-3;
    let out = train(VifnetModel::new(cfg.model, 0).unwrap(), &data, &cfg, None, |_| {}).unwrap();
    let m = evaluate(&out.model, &data).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let per: Vec<String> = m.rows.iter().filter_map(|r| r.preset.map(|p| format!("{p} {:.2}", r.psnr))).collect();
    ensure(
        m.overall().psnr >= 30.0 && secs <= 900.0,
        format!("train PSNR {:.2} dB ({}), {secs:.0} s", m.overall().psnr, per.join(", ")),
    )
}

fn desk_training(lab: &mut Lab) -> Check {
    let val = lab.data().1.clone();
    let hazy = evaluate(&Passthrough, &val).unwrap();
    let m = evaluate(lab.model(Variant::DsfeInconsistency, DESK_RUN_SEED), &val).unwrap();
    let p = |t: &vifnet::train::MetricsTable, f: FogPreset| t.get(f).unwrap().psnr;
    let gain = p(&m, FogPreset::Dense) - p(&hazy, FogPreset::Dense);
    let ordered = p(&m, FogPreset::Mist) >= p(&m, FogPreset::Medium) && p(&m, FogPreset::Medium) >= p(&m, FogPreset::Dense);
    ensure(
        gain >= 3.0 && ordered,
        format!(
            "val PSNR mist/medium/dense {:.2}/{:.2}/{:.2} dB; dense hazy baseline {:.2} dB, gain {gain:+.2} dB",
            p(&m, FogPreset::Mist),
            p(&m, FogPreset::Medium),
            p(&m, FogPreset::Dense),
            p(&hazy, FogPreset::Dense)
        ),
    )
}

fn ablation_direction(lab: &mut Lab) -> Check {
    let val = lab.data().1.clone();
    let mut mean = HashMap::new();
    for v in Variant::ALL {
        let mut acc = 0.0;
        for seed in ABLATION_SEEDS {
            acc += evaluate(lab.model(v, seed), &val).unwrap().overall().psnr;
        }
        mean.insert(v, acc / ABLATION_SEEDS.len() as f64);
    }
    let (b, d, f) = (mean[&Variant::BasicFusion], mean[&Variant::Dsfe], mean[&Variant::DsfeInconsistency]);
    ensure(
        d >= b - 0.2 && f >= d - 0.2,
        format!("mean val PSNR over {} seeds: basic {b:.2}, +dsfe {d:.2}, +dsfe+inconsistency {f:.2} dB", ABLATION_SEEDS.len()),
    )
}

fn misalignment(lab: &mut Lab) -> Check {
    let val = lab.data().1.clone();
    let offset = scaled_offset(val.samples[0].width());
    let shifted = Dataset::from_samples(Split::Val, val.samples.iter().map(|s| misalign(s, offset).unwrap()).collect());
    let model = lab.model(Variant::DsfeInconsistency, DESK_RUN_SEED);
    let (a, m) = (evaluate(model, &val).unwrap().overall().psnr, evaluate(model, &shifted).unwrap().overall().psnr);
    ensure(m < a, format!("aligned {a:.3} dB, infrared shifted {offset} px {m:.3} dB ({:+.3} dB)", m - a))
}

fn main() {
    let only: Option<Vec<String>> =
        std::env::var("VIFNET_ACCEPT_ONLY").ok().map(|s| s.split(',').map(|t| t.trim().to_string()).collect());
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&root).unwrap();
    let mut lab = Lab { root, desk: None, models: HashMap::new() };
    type Criterion = (&'static str, Box<dyn Fn(&mut Lab) -> Check>);
    let criteria: Vec<Criterion> = vec![
        ("haze_oracle", Box::new(|_| haze_oracle())),
        ("loss_floors", Box::new(|_| loss_floors())),
        ("gradient_suite", Box::new(|_| gradient_suite())),
        ("inconsistency_algebra", Box::new(|_| inconsistency_algebra())),
        ("dsfe_contracts", Box::new(|_| dsfe_contracts())),
        ("metric_oracles", Box::new(|_| metric_oracles())),
        ("overfit", Box::new(|_| overfit())),
        ("desk_training", Box::new(desk_training)),
        ("misalignment", Box::new(misalignment)),
        ("ablation_direction", Box::new(ablation_direction)),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (name, run) in &criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|n| n == name)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(|| run(&mut lab))).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("PASS  {name:<22} {d}  [{secs:.1} s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name:<22} {d}  [{secs:.1} s]");
            }
        }
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
