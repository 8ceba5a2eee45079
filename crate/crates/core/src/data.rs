//! Synthetic dataset generation, the on-disk manifest, batch loading with
//! paired augmentation, and the infrared misalignment injector.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::haze::{
    apply_scattering, synth_infrared, transmission_from_depth, DepthMap, FogPreset, HazeParams, InfraredParams, MAX_DEPTH_M,
};
use crate::imaging::{ColorSpace, ImageTensor};
use crate::io::{quantized, read_depth_png16, read_png, write_depth_png16, write_png};
use crate::scene::render_scene;
use crate::tensor::{Shape, Tensor};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const DEFAULT_SCENE_SIZE: usize = 128;
/// Standard deviation of the sensor noise added to synthetic infrared.
pub const INFRARED_NOISE: f64 = 0.01;
/// One scene in `VAL_MODULUS` (by id hash) goes to validation.
pub const VAL_MODULUS: u64 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split {other:?} (train|val)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub scene: String,
    pub preset: FogPreset,
    pub split: Split,
    pub hazy: String,
    pub infrared: String,
    pub gt: String,
    pub depth: String,
    pub beta: f64,
    pub airlight: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub misalignment: Option<i64>,
}

/// Paths in entries are relative to `root`, which is not serialized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Metres per unit of the 16-bit depth PNGs.
    pub depth_scale: f64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("manifest serialization: {e}")))
    }

    pub fn from_toml(text: &str, root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let mut m: DatasetManifest =
            toml::from_str(text).map_err(|e| Error::Format { path, message: e.to_string() })?;
        m.root = root.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_toml(&text, root)
    }

    pub fn write(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))
    }

    fn validate(&self) -> Result<()> {
        let mut ids: Vec<&str> = self.entries.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate manifest id {}", w[0])));
        }
        Ok(())
    }

    /// Checks that every referenced file exists.
    pub fn check_files(&self) -> Result<()> {
        for e in &self.entries {
            for rel in [&e.hazy, &e.infrared, &e.gt, &e.depth] {
                let p = self.root.join(rel);
                if !p.is_file() {
                    return Err(Error::MissingFile(p));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// FNV-1a, used to assign scenes to splits independently of generation order.
pub fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

pub fn split_of(scene: &str) -> Split {
    if fnv1a(scene) % VAL_MODULUS == 0 {
        Split::Val
    } else {
        Split::Train
    }
}

/// Per-scene seed derived from the dataset seed.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index as u64 + 1);
    r.random()
}

#[derive(Clone, Debug)]
pub struct GenerateOptions {
    pub height: usize,
    pub width: usize,
    /// Worker threads; generation output does not depend on this.
    pub workers: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions { height: DEFAULT_SCENE_SIZE, width: DEFAULT_SCENE_SIZE, workers: 1 }
    }
}

/// In-memory result of synthesizing one scene under one preset.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub entry: ManifestEntry,
    pub hazy: ImageTensor,
    pub infrared: ImageTensor,
    pub clean: ImageTensor,
    pub depth: DepthMap,
}

/// Renders one scene under every preset. The clean image and depth are
/// quantized first so the stored files reproduce the haze exactly.
pub fn synth_scene(index: usize, presets: &[FogPreset], seed: u64, h: usize, w: usize, depth_scale: f64) -> Result<Vec<SynthSample>> {
    let s = scene_seed(seed, index);
    let scene = render_scene(h, w, s)?;
    let clean = quantized(&scene.clean);
    let depth = DepthMap::new(
        h,
        w,
        scene.depth.data().iter().map(|&d| (d / depth_scale).round().clamp(0.0, 65535.0) * depth_scale).collect(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x5eed);
    let a = rng.random_range(0.8..=1.0);
    let name = format!("s{index:05}");
    presets
        .iter()
        .map(|&preset| {
            let p = HazeParams::gray(preset.beta(), a)?;
            let t = transmission_from_depth(&depth, &p)?;
            let hazy = apply_scattering(&clean, &t, &p)?;
            let mut ir = InfraredParams::for_visible(preset.beta());
            ir.noise = Some((s.wrapping_add(preset as u64 + 1), INFRARED_NOISE));
            let infrared = synth_infrared(&clean, &depth, &ir)?;
            let file = format!("{name}_{preset}.png");
            let entry = ManifestEntry {
                id: format!("{name}_{preset}"),
                scene: name.clone(),
                preset,
                split: split_of(&name),
                hazy: format!("hazy/{file}"),
                infrared: format!("ir/{file}"),
                gt: format!("gt/{file}"),
                depth: format!("depth/{file}"),
                beta: p.beta,
                airlight: p.airlight,
                misalignment: None,
            };
            Ok(SynthSample { entry, hazy, infrared, clean: clean.clone(), depth: depth.clone() })
        })
        .collect()
}

fn write_sample(root: &Path, s: &SynthSample, depth_scale: f64) -> Result<()> {
    write_png(&root.join(&s.entry.hazy), &s.hazy)?;
    write_png(&root.join(&s.entry.infrared), &s.infrared)?;
    write_png(&root.join(&s.entry.gt), &s.clean)?;
    write_depth_png16(&root.join(&s.entry.depth), &s.depth, depth_scale)
}

pub fn generate_dataset(n_scenes: usize, presets: &[FogPreset], seed: u64, out: &Path) -> Result<DatasetManifest> {
    generate_dataset_with(n_scenes, presets, seed, out, &GenerateOptions::default())
}

pub fn generate_dataset_with(
    n_scenes: usize,
    presets: &[FogPreset],
    seed: u64,
    out: &Path,
    opts: &GenerateOptions,
) -> Result<DatasetManifest> {
    if n_scenes == 0 {
        return Err(Error::Config("need at least one scene".into()));
    }
    if presets.is_empty() {
        return Err(Error::Config("need at least one fog preset".into()));
    }
    let depth_scale = MAX_DEPTH_M / 65535.0;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let workers = opts.workers.clamp(1, n_scenes);
    let run = |k: usize| -> Result<Vec<ManifestEntry>> {
        let mut entries = Vec::new();
        for i in (k..n_scenes).step_by(workers) {
            for s in synth_scene(i, presets, seed, opts.height, opts.width, depth_scale)? {
                write_sample(out, &s, depth_scale)?;
                entries.push(s.entry);
            }
        }
        Ok(entries)
    };
    let parts: Vec<Result<Vec<ManifestEntry>>> = if workers == 1 {
        vec![run(0)]
    } else {
        std::thread::scope(|sc| {
            let handles: Vec<_> = (0..workers).map(|k| sc.spawn(move || run(k))).collect();
            handles.into_iter().map(|h| h.join().expect("generator worker panicked")).collect()
        })
    };
    let mut entries = Vec::new();
    for p in parts {
        entries.extend(p?);
    }
    entries.sort_by(|a, b| (&a.scene, a.preset).cmp(&(&b.scene, b.preset)));
    let m = DatasetManifest { root: out.to_path_buf(), seed, height: opts.height, width: opts.width, depth_scale, entries };
    m.write()?;
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleTriplet {
    pub hazy_visible: ImageTensor,
    pub infrared: ImageTensor,
    pub clean_gt: ImageTensor,
    pub preset: FogPreset,
    pub id: String,
    /// Horizontal infrared offset in pixels, if one was injected.
    pub misalignment: Option<i64>,
    pub haze: Option<HazeParams>,
    pub depth: Option<DepthMap>,
}

impl SampleTriplet {
    pub fn new(hazy_visible: ImageTensor, infrared: ImageTensor, clean_gt: ImageTensor, preset: FogPreset, id: impl Into<String>) -> Result<Self> {
        if hazy_visible.channels() != 3 || clean_gt.channels() != 3 || infrared.channels() != 1 {
            return Err(Error::Shape("triplet needs 3-channel visible and ground truth and 1-channel infrared".into()));
        }
        if !hazy_visible.same_dims(&infrared) || !hazy_visible.same_dims(&clean_gt) {
            return Err(Error::Shape("triplet images are not aligned".into()));
        }
        Ok(SampleTriplet {
            hazy_visible,
            infrared,
            clean_gt,
            preset,
            id: id.into(),
            misalignment: None,
            haze: None,
            depth: None,
        })
    }

    pub fn height(&self) -> usize {
        self.hazy_visible.height()
    }

    pub fn width(&self) -> usize {
        self.hazy_visible.width()
    }

    fn map_images(&self, f: impl Fn(&ImageTensor) -> Result<ImageTensor>) -> Result<SampleTriplet> {
        Ok(SampleTriplet {
            hazy_visible: f(&self.hazy_visible)?,
            infrared: f(&self.infrared)?,
            clean_gt: f(&self.clean_gt)?,
            preset: self.preset,
            id: self.id.clone(),
            misalignment: self.misalignment,
            haze: self.haze,
            depth: None,
        })
    }
}

pub fn load_triplet(m: &DatasetManifest, e: &ManifestEntry) -> Result<SampleTriplet> {
    let r = &m.root;
    let mut t = SampleTriplet::new(
        read_png(&r.join(&e.hazy), ColorSpace::Rgb)?,
        read_png(&r.join(&e.infrared), ColorSpace::Infrared)?,
        read_png(&r.join(&e.gt), ColorSpace::Rgb)?,
        e.preset,
        e.id.clone(),
    )?;
    t.haze = Some(HazeParams::new(e.beta, e.airlight)?);
    t.depth = Some(read_depth_png16(&r.join(&e.depth), m.depth_scale)?);
    if let Some(off) = e.misalignment {
        t = misalign(&t, off)?;
    }
    Ok(t)
}

/// A split held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub split: Split,
    pub samples: Vec<SampleTriplet>,
}

impl Dataset {
    pub fn load(m: &DatasetManifest, split: Split) -> Result<Self> {
        let samples = m.split(split).map(|e| load_triplet(m, e)).collect::<Result<_>>()?;
        Ok(Dataset { split, samples })
    }

    pub fn from_samples(split: Split, samples: Vec<SampleTriplet>) -> Self {
        Dataset { split, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn min_dims(&self) -> Option<(usize, usize)> {
        let h = self.samples.iter().map(|s| s.height()).min()?;
        let w = self.samples.iter().map(|s| s.width()).min()?;
        Some((h, w))
    }

    /// Samples a batch; identical for identical `(seed, step)`.
    pub fn batch(&self, batch_size: usize, crop: usize, seed: u64, step: usize, augment: bool) -> Result<Vec<CroppedTriplet>> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let Some((h, w)) = self.min_dims() else {
            return Err(Error::Config(format!("{} split is empty", self.split.name())));
        };
        if crop == 0 || crop > h || crop > w {
            return Err(Error::Config(format!("crop {crop} exceeds the smallest image ({h}x{w})")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step as u64);
        (0..batch_size)
            .map(|_| {
                let s = &self.samples[rng.random_range(0..self.samples.len())];
                let window = if augment {
                    CropWindow {
                        y0: rng.random_range(0..=s.height() - crop),
                        x0: rng.random_range(0..=s.width() - crop),
                        size: crop,
                        flipped: rng.random_bool(0.5),
                    }
                } else {
                    CropWindow { y0: (s.height() - crop) / 2, x0: (s.width() - crop) / 2, size: crop, flipped: false }
                };
                Ok(CroppedTriplet { triplet: window.apply(s)?, window, source: s.id.clone() })
            })
            .collect()
    }
}

/// The geometric operator applied to a loaded triplet: crop, then an
/// optional horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub y0: usize,
    pub x0: usize,
    pub size: usize,
    pub flipped: bool,
}

impl CropWindow {
    pub fn apply(&self, t: &SampleTriplet) -> Result<SampleTriplet> {
        t.map_images(|img| {
            let c = img.crop(self.y0, self.x0, self.size, self.size)?;
            Ok(if self.flipped { c.flip_horizontal() } else { c })
        })
    }
}

#[derive(Clone, Debug)]
pub struct CroppedTriplet {
    pub triplet: SampleTriplet,
    pub window: CropWindow,
    pub source: String,
}

pub fn load_batch(
    m: &DatasetManifest,
    split: Split,
    batch_size: usize,
    crop: usize,
    seed: u64,
    step: usize,
) -> Result<Vec<CroppedTriplet>> {
    Dataset::load(m, split)?.batch(batch_size, crop, seed, step, true)
}

/// Stacks triplets into `(visible, infrared, ground truth)` batch tensors.
pub fn stack(items: &[SampleTriplet]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let col = |f: fn(&SampleTriplet) -> &ImageTensor| {
        Tensor::stack_batch(&items.iter().map(|t| f(t).tensor().clone()).collect::<Vec<_>>())
    };
    Ok((col(|t| &t.hazy_visible)?, col(|t| &t.infrared)?, col(|t| &t.clean_gt)?))
}

fn reflect(i: i64, n: i64) -> usize {
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period.max(1));
    if j >= n {
        j = period - j;
    }
    j as usize
}

/// Shifts the infrared image `offset_px` columns to the right (negative:
/// left), filling the uncovered border by reflection.
pub fn misalign(t: &SampleTriplet, offset_px: i64) -> Result<SampleTriplet> {
    let (h, w) = (t.height(), t.width());
    if offset_px.unsigned_abs() as usize >= h.min(w) {
        return Err(Error::Config(format!("offset {offset_px} must be smaller than the image ({h}x{w})")));
    }
    if offset_px == 0 {
        return Ok(t.clone());
    }
    let src = t.infrared.plane(0);
    let mut data = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = src[y * w + reflect(x as i64 - offset_px, w as i64)];
        }
    }
    let mut out = t.clone();
    out.infrared = ImageTensor::new(Tensor::from_vec(Shape::new(1, 1, h, w), data)?, ColorSpace::Infrared)?;
    out.misalignment = Some(t.misalignment.unwrap_or(0) + offset_px);
    Ok(out)
}

/// A 30-pixel offset at 240 pixels, scaled to `width`.
pub fn scaled_offset(width: usize) -> i64 {
    (30.0 * width as f64 / 240.0).round() as i64
}
