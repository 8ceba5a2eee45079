//! Supervised training, evaluation harness and the ablation runner.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{misalign, stack, Dataset, SampleTriplet};
use crate::error::{Error, Result};
use crate::fusion::{vifnet_forward, ModelConfig, Variant, VifnetModel};
use crate::haze::{analytic_dehaze, transmission_from_depth, FogPreset, DEFAULT_T_MIN};
use crate::imaging::{ColorSpace, ImageTensor};
use crate::io::{save_checkpoint, write_png};
use crate::nn::{clip_global_norm, Adam, CosineSchedule, Ctx, Graph};
use crate::objective::{psnr, ssim, total_loss_graph, LossWeights, MsSsimConfig};
use crate::tensor::{Shape, Tensor};

pub const LOSS_CSV: &str = "loss.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const SAMPLE_DIR: &str = "samples";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub crop: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Random crops and flips; off means center crops.
    pub augment: bool,
    pub loss_weights: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl TrainConfig {
    /// Full-scale recipe.
    pub fn full() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 8,
            iterations: 100_000,
            weight_decay: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            crop: 240,
            seed: 0,
            grad_clip: 1.0,
            checkpoint_every: 5000,
            augment: true,
            loss_weights: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }

    /// Single-CPU budget.
    pub fn desk() -> Self {
        let mut c = Self::full();
        c.lr = 5e-4;
        c.batch_size = 1;
        c.iterations = 5000;
        c.crop = 96;
        c.checkpoint_every = 1000;
        c.model.base_channels = 16;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("Adam betas must lie in [0, 1), got {b}"));
            }
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return bad(format!("grad_clip must be nonnegative, got {}", self.grad_clip));
        }
        if self.crop == 0 || self.crop % 4 != 0 {
            return bad(format!("crop {} must be a positive multiple of 4", self.crop));
        }
        self.loss_weights.validate()?;
        self.model.validate()?;
        self.ms_ssim().map(|_| ())
    }

    pub fn ms_ssim(&self) -> Result<MsSsimConfig> {
        MsSsimConfig::fitting(self.crop, self.crop)
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule { base: self.lr, total: self.iterations }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub l1: Option<f64>,
    pub ms_ssim: Option<f64>,
    pub dice: Option<f64>,
    pub grad_norm: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "step,lr,total,l1,ms_ssim,dice,grad_norm";

    pub fn csv_line(&self) -> String {
        let o = |v: Option<f64>| v.map(|x| format!("{x:.8}")).unwrap_or_default();
        format!(
            "{},{:.6e},{:.8},{},{},{},{:.6}",
            self.step,
            self.lr,
            self.total,
            o(self.l1),
            o(self.ms_ssim),
            o(self.dice),
            self.grad_norm
        )
    }
}

/// Owns a model and its optimizer state.
pub struct Trainer {
    pub model: VifnetModel<f32>,
    pub cfg: TrainConfig,
    adam: Adam<f32>,
    ms: MsSsimConfig,
}

impl Trainer {
    pub fn new(model: VifnetModel<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        crate::nn::flush_denormals();
        let adam = Adam::new(&model.params, cfg.adam_beta1, cfg.adam_beta2, cfg.weight_decay);
        let ms = cfg.ms_ssim()?;
        Ok(Trainer { model, cfg, adam, ms })
    }

    fn graph_loss(&self, g: &Graph<f32>, cx: &Ctx<f32>, batch: &[SampleTriplet]) -> Result<(crate::objective::LossVars, f64)> {
        let (vi, ir, gt) = stack(batch)?;
        let out = self.model.forward(cx, g.constant(vi), g.constant(ir));
        let lv = total_loss_graph(g, out.output, g.constant(gt), &self.cfg.loss_weights, &self.ms);
        Ok((lv, g.scalar(lv.total) as f64))
    }

    /// Loss on a batch without updating anything.
    pub fn loss(&self, batch: &[SampleTriplet]) -> Result<f64> {
        let g = Graph::new();
        let cx = Ctx::infer(&g, &self.model.params);
        Ok(self.graph_loss(&g, &cx, batch)?.1)
    }

    /// One optimizer step at an explicit learning rate.
    pub fn step_with_lr(&mut self, step: usize, batch: &[SampleTriplet], lr: f64) -> Result<LossRecord> {
        let g = Graph::new();
        let cx = Ctx::train(&g, &self.model.params);
        let (lv, total) = self.graph_loss(&g, &cx, batch)?;
        let scalar = |v: Option<crate::nn::Var>| v.map(|v| g.scalar(v) as f64);
        let rec = LossRecord {
            step,
            lr,
            total,
            l1: scalar(lv.l1),
            ms_ssim: scalar(lv.ms_ssim),
            dice: scalar(lv.dice),
            grad_norm: 0.0,
        };
        if !total.is_finite() {
            return Err(Error::Diverged { step, last_good: None });
        }
        let mut grads = g.backward(lv.total);
        let mut grads = cx.param_grads(&mut grads);
        drop(cx);
        let norm = if self.cfg.grad_clip > 0.0 {
            clip_global_norm(&mut grads, self.cfg.grad_clip)
        } else {
            grads.iter().map(|t| t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>()).sum::<f64>().sqrt()
        };
        if !norm.is_finite() {
            return Err(Error::Diverged { step, last_good: None });
        }
        self.adam.update(&mut self.model.params, &grads, lr);
        Ok(LossRecord { grad_norm: norm, ..rec })
    }

    pub fn step(&mut self, step: usize, batch: &[SampleTriplet]) -> Result<LossRecord> {
        let lr = self.cfg.schedule().lr(step);
        self.step_with_lr(step, batch, lr)
    }
}

/// Files written under a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn loss_csv(&self) -> PathBuf {
        self.root.join(LOSS_CSV)
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join(METRICS_CSV)
    }

    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.root.join(CHECKPOINT_DIR).join(format!("step_{step:07}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT)
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join(SAMPLE_DIR)
    }
}

pub struct TrainOutcome {
    pub model: VifnetModel<f32>,
    pub history: Vec<LossRecord>,
}

/// Trains `model` on `data`; the model's own architecture config is used and
/// `cfg.model` is ignored. With a run directory, writes the loss history,
/// periodic checkpoints and sample outputs.
pub fn train(
    model: VifnetModel<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    run: Option<&RunDir>,
    mut progress: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    if data.is_empty() {
        return Err(Error::Config(format!("{} split is empty", data.split.name())));
    }
    let mut loss_log = match run {
        Some(r) => {
            fs::create_dir_all(r.root.join(CHECKPOINT_DIR)).map_err(|e| Error::io(&r.root, e))?;
            let path = r.loss_csv();
            let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{}", LossRecord::CSV_HEADER).map_err(|e| Error::io(&path, e))?;
            Some((w, path))
        }
        None => None,
    };
    let mut last_good: Option<PathBuf> = None;
    let mut history = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let batch: Vec<SampleTriplet> =
            data.batch(cfg.batch_size, cfg.crop, cfg.seed, step, cfg.augment)?.into_iter().map(|c| c.triplet).collect();
        let rec = trainer.step(step, &batch).map_err(|e| match e {
            Error::Diverged { step, .. } => Error::Diverged { step, last_good: last_good.clone() },
            other => other,
        })?;
        if let Some((w, path)) = loss_log.as_mut() {
            writeln!(w, "{}", rec.csv_line()).map_err(|e| Error::io(&*path, e))?;
        }
        progress(&rec);
        history.push(rec);
        let done = step + 1;
        if let Some(r) = run {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.iterations {
                let p = r.checkpoint(done);
                save_checkpoint(&p, &trainer.model)?;
                write_sample(r, done, &trainer.model, &data.samples[0])?;
                if let Some((w, path)) = loss_log.as_mut() {
                    w.flush().map_err(|e| Error::io(&*path, e))?;
                }
                last_good = Some(p);
            }
        }
    }
    if let Some(r) = run {
        save_checkpoint(&r.final_checkpoint(), &trainer.model)?;
        write_sample(r, cfg.iterations, &trainer.model, &data.samples[0])?;
    }
    if let Some((mut w, path)) = loss_log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainOutcome { model: trainer.model, history })
}

fn write_sample(run: &RunDir, step: usize, model: &VifnetModel<f32>, s: &SampleTriplet) -> Result<()> {
    let out = model.dehaze(s)?;
    write_png(&run.samples().join(format!("step_{step:07}_{}.png", s.id)), &out)
}

/// Reflect-pads the bottom and right edges up to a multiple of `m`.
pub fn pad_to_multiple(img: &ImageTensor, m: usize) -> Result<ImageTensor> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok(img.clone());
    }
    if ph - h >= h || pw - w >= w {
        return Err(Error::Shape(format!("{h}x{w} too small to pad to a multiple of {m}")));
    }
    let r = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
    let mut data = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        let p = img.plane(ch);
        for y in 0..ph {
            for x in 0..pw {
                data.push(p[r(y, h) * w + r(x, w)]);
            }
        }
    }
    ImageTensor::new(Tensor::from_vec(Shape::new(1, c, ph, pw), data)?, img.color())
}

/// Anything that turns a triplet's hazy input into a restored image.
pub trait Dehazer {
    fn dehaze(&self, s: &SampleTriplet) -> Result<ImageTensor>;
}

/// Full-resolution inference at any size, padding to the network's stride.
pub fn dehaze_image(model: &VifnetModel<f32>, visible: &ImageTensor, infrared: &ImageTensor) -> Result<ImageTensor> {
    let (h, w) = (visible.height(), visible.width());
    let vi = pad_to_multiple(visible, 4)?;
    let ir = pad_to_multiple(infrared, 4)?;
    vifnet_forward(&vi, &ir, model)?.crop(0, 0, h, w)
}

impl Dehazer for VifnetModel<f32> {
    fn dehaze(&self, s: &SampleTriplet) -> Result<ImageTensor> {
        dehaze_image(self, &s.hazy_visible, &s.infrared)
    }
}

/// Returns the hazy input unchanged.
pub struct Passthrough;

impl Dehazer for Passthrough {
    fn dehaze(&self, s: &SampleTriplet) -> Result<ImageTensor> {
        Ok(s.hazy_visible.clone())
    }
}

/// Inverts the scattering model with the true depth and airlight, flooring
/// the transmission at `t_min`.
pub struct AnalyticOracle {
    pub t_min: f64,
}

impl Default for AnalyticOracle {
    fn default() -> Self {
        AnalyticOracle { t_min: DEFAULT_T_MIN }
    }
}

impl Dehazer for AnalyticOracle {
    fn dehaze(&self, s: &SampleTriplet) -> Result<ImageTensor> {
        let (Some(d), Some(p)) = (&s.depth, &s.haze) else {
            return Err(Error::Config(format!("{} carries no depth or haze parameters", s.id)));
        };
        let t = transmission_from_depth(d, p)?;
        let floor = self.t_min as f32;
        let t = ImageTensor::new(t.tensor().map(|v| v.max(floor)), ColorSpace::Gray)?;
        analytic_dehaze(&s.hazy_visible, &t, p, self.t_min)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    /// `None` for the all-preset mean.
    pub preset: Option<FogPreset>,
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn get(&self, preset: FogPreset) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.preset == Some(preset))
    }

    pub fn overall(&self) -> &MetricsRow {
        self.rows.iter().find(|r| r.preset.is_none()).expect("overall row")
    }

    pub fn to_csv(&self, dataset: &str, split: &str) -> String {
        let mut s = String::from("dataset,split,preset,count,psnr,ssim\n");
        for r in &self.rows {
            let p = r.preset.map(|p| p.name()).unwrap_or("all");
            let _ = writeln!(s, "{dataset},{split},{p},{},{:.4},{:.6}", r.count, r.psnr, r.ssim);
        }
        s
    }
}

/// Per-sample metrics of a dehazer over a split.
pub fn score(d: &dyn Dehazer, data: &Dataset) -> Result<Vec<(FogPreset, f64, f64)>> {
    if data.is_empty() {
        return Err(Error::Config(format!("{} split is empty", data.split.name())));
    }
    data.samples
        .iter()
        .map(|s| {
            let out = d.dehaze(s)?;
            Ok((s.preset, psnr(&out, &s.clean_gt)?, ssim(&out, &s.clean_gt)?))
        })
        .collect()
}

pub fn evaluate(d: &dyn Dehazer, data: &Dataset) -> Result<MetricsTable> {
    Ok(summarize(&score(d, data)?))
}

fn summarize(scores: &[(FogPreset, f64, f64)]) -> MetricsTable {
    let mean = |preset: Option<FogPreset>| {
        let sel: Vec<_> = scores.iter().filter(|s| preset.is_none_or(|p| s.0 == p)).collect();
        let n = sel.len();
        (n > 0).then(|| MetricsRow {
            preset,
            count: n,
            psnr: sel.iter().map(|s| s.1).sum::<f64>() / n as f64,
            ssim: sel.iter().map(|s| s.2).sum::<f64>() / n as f64,
        })
    };
    let mut rows: Vec<MetricsRow> = FogPreset::ALL.into_iter().filter_map(|p| mean(Some(p))).collect();
    rows.extend(mean(None));
    MetricsTable { rows }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossSubset {
    L1,
    L1MsSsim,
    L1Dice,
    All,
}

impl LossSubset {
    pub const ALL: [LossSubset; 4] = [LossSubset::L1, LossSubset::L1MsSsim, LossSubset::L1Dice, LossSubset::All];

    /// Zeroes the weights of the terms left out.
    pub fn weights(self, base: LossWeights) -> LossWeights {
        let (m, d) = match self {
            LossSubset::L1 => (false, false),
            LossSubset::L1MsSsim => (true, false),
            LossSubset::L1Dice => (false, true),
            LossSubset::All => (true, true),
        };
        LossWeights {
            lambda1: base.lambda1,
            lambda2: if m { base.lambda2 } else { 0.0 },
            lambda3: if d { base.lambda3 } else { 0.0 },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossSubset::L1 => "l1",
            LossSubset::L1MsSsim => "l1+ms_ssim",
            LossSubset::L1Dice => "l1+dice",
            LossSubset::All => "l1+ms_ssim+dice",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    Table3,
    Table4,
    Misalign,
}

impl std::str::FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table3" => Ok(Grid::Table3),
            "table4" => Ok(Grid::Table4),
            "misalign" => Ok(Grid::Misalign),
            other => Err(Error::Config(format!("unknown grid {other:?} (table3|table4|misalign)"))),
        }
    }
}

/// Infrared offset of the misalignment study, in pixels at 240-pixel width.
pub const MISALIGN_PX_AT_240: u32 = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationSpec {
    pub variant: Variant,
    pub losses: LossSubset,
    /// Offset in pixels at 240-pixel width, scaled to the evaluated width.
    pub misalignment: Option<u32>,
}

pub fn grid_specs(grid: Grid) -> Vec<AblationSpec> {
    let spec = |variant, losses, misalignment| AblationSpec { variant, losses, misalignment };
    match grid {
        Grid::Table3 => Variant::ALL.into_iter().map(|v| spec(v, LossSubset::All, None)).collect(),
        Grid::Table4 => LossSubset::ALL.into_iter().map(|l| spec(Variant::DsfeInconsistency, l, None)).collect(),
        Grid::Misalign => vec![
            spec(Variant::DsfeInconsistency, LossSubset::All, None),
            spec(Variant::DsfeInconsistency, LossSubset::All, Some(MISALIGN_PX_AT_240)),
        ],
    }
}

#[derive(Clone, Debug)]
pub struct AblationBudget {
    /// Shared recipe; variant and loss weights are overridden per spec.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub spec: AblationSpec,
    pub preset: Option<FogPreset>,
    pub psnr: f64,
    pub ssim: f64,
    pub seeds: usize,
}

/// Evaluates with the infrared of every sample shifted by the scaled offset.
pub fn misaligned(data: &Dataset, px_at_240: u32) -> Result<Dataset> {
    let samples = data
        .samples
        .iter()
        .map(|s| misalign(s, (px_at_240 as f64 * s.width() as f64 / 240.0).round() as i64))
        .collect::<Result<_>>()?;
    Ok(Dataset::from_samples(data.split, samples))
}

/// Trains each distinct (variant, loss subset) once per seed under the same
/// budget and scores it on `val`, shifting the infrared where requested.
pub fn ablate(
    train_set: &Dataset,
    val: &Dataset,
    specs: &[AblationSpec],
    budget: &AblationBudget,
    mut progress: impl FnMut(&str),
) -> Result<Vec<AblationRow>> {
    if budget.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut scores: BTreeMap<usize, Vec<MetricsTable>> = BTreeMap::new();
    let mut trained: Vec<(Variant, LossSubset)> = Vec::new();
    for s in specs {
        if !trained.contains(&(s.variant, s.losses)) {
            trained.push((s.variant, s.losses));
        }
    }
    for &(variant, losses) in &trained {
        for &seed in &budget.seeds {
            let mut cfg = budget.train.clone();
            cfg.seed = seed;
            cfg.model.variant = variant;
            cfg.loss_weights = losses.weights(budget.train.loss_weights);
            progress(&format!("training {} / {} / seed {seed}", variant.name(), losses.name()));
            let model = VifnetModel::new(cfg.model, seed)?;
            let out = train(model, train_set, &cfg, None, |_| {})?;
            for (i, s) in specs.iter().enumerate() {
                if (s.variant, s.losses) != (variant, losses) {
                    continue;
                }
                let table = match s.misalignment {
                    None => evaluate(&out.model, val)?,
                    Some(px) => evaluate(&out.model, &misaligned(val, px)?)?,
                };
                scores.entry(i).or_default().push(table);
            }
        }
    }
    let mut rows = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let tables = &scores[&i];
        let presets: Vec<Option<FogPreset>> = tables[0].rows.iter().map(|r| r.preset).collect();
        for preset in presets {
            let pick: Vec<&MetricsRow> =
                tables.iter().map(|t| t.rows.iter().find(|r| r.preset == preset).expect("same presets")).collect();
            let n = pick.len() as f64;
            rows.push(AblationRow {
                spec: *spec,
                preset,
                psnr: pick.iter().map(|r| r.psnr).sum::<f64>() / n,
                ssim: pick.iter().map(|r| r.ssim).sum::<f64>() / n,
                seeds: pick.len(),
            });
        }
    }
    Ok(rows)
}

pub const ABLATION_CSV_HEADER: &str = "variant,dsfe,inconsistency,l1,ms_ssim,dice,misalign_px_at_240,preset,psnr,ssim,seeds";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_CSV_HEADER}\n");
    let yn = |b: bool| if b { "yes" } else { "no" };
    for r in rows {
        let w = r.spec.losses.weights(LossWeights::default());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{:.4},{:.6},{}",
            r.spec.variant.name(),
            yn(r.spec.variant.uses_dsfe()),
            yn(r.spec.variant.uses_inconsistency()),
            yn(w.lambda1 > 0.0),
            yn(w.lambda2 > 0.0),
            yn(w.lambda3 > 0.0),
            r.spec.misalignment.map(|m| m.to_string()).unwrap_or_else(|| "0".into()),
            r.preset.map(|p| p.name()).unwrap_or("all"),
            r.psnr,
            r.ssim,
            r.seeds
        );
    }
    s
}

/// Human-readable grid: one line per spec, PSNR/SSIM per preset.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let tick = |b: bool| if b { "x" } else { " " };
    let mut s = String::from("variant             DSFE incons losses            misalign");
    let presets: Vec<Option<FogPreset>> = {
        let mut p: Vec<_> = rows.iter().map(|r| r.preset).collect();
        p.dedup();
        let mut seen = Vec::new();
        for q in p {
            if !seen.contains(&q) {
                seen.push(q);
            }
        }
        seen
    };
    for p in &presets {
        let _ = write!(s, " | {:>15}", p.map(|p| p.name()).unwrap_or("all"));
    }
    s.push('\n');
    let mut specs: Vec<AblationSpec> = Vec::new();
    for r in rows {
        if !specs.contains(&r.spec) {
            specs.push(r.spec);
        }
    }
    for spec in specs {
        let _ = write!(
            s,
            "{:<19} [{}]  [{}]   {:<17} {:>8}",
            spec.variant.name(),
            tick(spec.variant.uses_dsfe()),
            tick(spec.variant.uses_inconsistency()),
            spec.losses.name(),
            spec.misalignment.map(|m| format!("{m}px")).unwrap_or_else(|| "-".into())
        );
        for p in &presets {
            match rows.iter().find(|r| r.spec == spec && r.preset == *p) {
                Some(r) => {
                    let _ = write!(s, " | {:>6.2} / {:.4}", r.psnr, r.ssim);
                }
                None => s.push_str(" |               -"),
            }
        }
        s.push('\n');
    }
    s
}
