//! Inconsistency fusion and the full three-stage network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{check_divisible, BranchConfig, EncoderDecoder, OutputActivation};
use crate::dsfe::{self, Dsfe};
use crate::error::{Error, Result};
use crate::imaging::{ColorSpace, FeatureMap, ImageTensor};
use crate::nn::{Ctx, Graph, ParamStore, Var};
use crate::tensor::{Elem, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionWeights {
    pub alpha: f64,
    pub beta_w: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights { alpha: 0.5, beta_w: 0.5 }
    }
}

impl FusionWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.alpha) || !ok(self.beta_w) || self.alpha + self.beta_w <= 0.0 {
            return Err(Error::Config(format!(
                "fusion weights must be nonnegative with a positive sum, got alpha={} beta_w={}",
                self.alpha, self.beta_w
            )));
        }
        Ok(())
    }
}

fn check_pair<T: Elem>(a: &FeatureMap<T>, b: &FeatureMap<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `α·s_vi·s_in + β_w·(1 − s_vi)·(1 − s_in)` per pixel.
pub fn inconsistency_map<T: Elem>(s_vi: &FeatureMap<T>, s_in: &FeatureMap<T>, w: &FusionWeights) -> Result<FeatureMap<T>> {
    check_pair(s_vi, s_in, "inconsistency map")?;
    w.validate()?;
    let g = Graph::new();
    let f = inconsistency_graph(&g, g.constant(s_vi.tensor.clone()), g.constant(s_in.tensor.clone()), w);
    FeatureMap::new((*g.value(f)).clone(), s_vi.scale)
}

/// `F ⊙ s_in`
pub fn weighted_structure<T: Elem>(f: &FeatureMap<T>, s_in: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    check_pair(f, s_in, "weighted structure")?;
    FeatureMap::new(f.tensor.zip_map(&s_in.tensor, |a, b| a * b), f.scale)
}

pub fn inconsistency_graph<T: Elem>(g: &Graph<T>, s_vi: Var, s_in: Var, w: &FusionWeights) -> Var {
    let agree = g.mul(s_vi, s_in);
    let agree = g.affine(agree, w.alpha, 0.0);
    let (c_vi, c_in) = (g.one_minus(s_vi), g.one_minus(s_in));
    let disagree = g.mul(c_vi, c_in);
    let disagree = g.affine(disagree, w.beta_w, 0.0);
    g.add(agree, disagree)
}

/// Ablation ladder: what the infrared branch feeds into the fusion encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Concatenated infrared encoder/decoder features, no structure maps.
    BasicFusion,
    /// Both modalities' structure maps, unweighted.
    Dsfe,
    /// Infrared structure gated by the inconsistency map.
    DsfeInconsistency,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::BasicFusion, Variant::Dsfe, Variant::DsfeInconsistency];

    pub fn name(self) -> &'static str {
        match self {
            Variant::BasicFusion => "basic_fusion",
            Variant::Dsfe => "dsfe",
            Variant::DsfeInconsistency => "dsfe_inconsistency",
        }
    }

    pub fn uses_dsfe(self) -> bool {
        self != Variant::BasicFusion
    }

    pub fn uses_inconsistency(self) -> bool {
        self == Variant::DsfeInconsistency
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (basic_fusion, dsfe, dsfe_inconsistency)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub cpab_reduction: usize,
    pub dsfe_width: usize,
    pub variant: Variant,
    pub fusion: FusionWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let b = BranchConfig::default();
        ModelConfig {
            base_channels: b.base_channels,
            cpab_reduction: b.cpab_reduction,
            dsfe_width: dsfe::DEFAULT_WIDTH,
            variant: Variant::DsfeInconsistency,
            fusion: FusionWeights::default(),
        }
    }
}

impl ModelConfig {
    pub fn branch(&self) -> BranchConfig {
        BranchConfig { base_channels: self.base_channels, n_scales: 3, cpab_reduction: self.cpab_reduction }
    }

    pub fn validate(&self) -> Result<()> {
        self.branch().validate()?;
        self.fusion.validate()
    }
}

#[derive(Clone, Debug)]
struct Arch {
    visible: EncoderDecoder,
    infrared: EncoderDecoder,
    dsfe: Option<(Dsfe, Dsfe)>,
    fusion: EncoderDecoder,
}

/// Every learnable tensor of the network plus the layout that reads them.
#[derive(Clone, Debug)]
pub struct VifnetModel<T = f32> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    arch: Arch,
}

/// Graph handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub output: Var,
    pub coarse_visible: Var,
    pub structure_visible: Option<[Var; 3]>,
    pub structure_infrared: Option<[Var; 3]>,
    pub inconsistency: Option<[Var; 3]>,
    pub injected: [Var; 3],
}

/// Intermediate maps exposed for inspection.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub output: ImageTensor,
    pub structure_visible: Option<[FeatureMap; 3]>,
    pub structure_infrared: Option<[FeatureMap; 3]>,
    pub inconsistency: Option<[FeatureMap; 3]>,
    pub weighted: Option<[FeatureMap; 3]>,
}

impl<T: Elem> VifnetModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let b = cfg.branch();
        let plain = [None; 3];
        let visible = EncoderDecoder::new(&mut params, "visible", b, 3, 3, OutputActivation::Identity, plain, &mut rng)?;
        let infrared = EncoderDecoder::new(&mut params, "infrared", b, 1, 1, OutputActivation::Identity, plain, &mut rng)?;
        let dsfe = if cfg.variant.uses_dsfe() {
            Some((
                Dsfe::new(&mut params, "dsfe_vi", &b, cfg.dsfe_width, &mut rng)?,
                Dsfe::new(&mut params, "dsfe_in", &b, cfg.dsfe_width, &mut rng)?,
            ))
        } else {
            None
        };
        let inject = match cfg.variant {
            Variant::BasicFusion => [1, 2, 3].map(|s| Some(2 * b.width(s))),
            Variant::Dsfe => [Some(2); 3],
            Variant::DsfeInconsistency => [Some(1); 3],
        };
        let fusion = EncoderDecoder::new(&mut params, "fusion", b, 3, 3, OutputActivation::Sigmoid, inject, &mut rng)?;
        Ok(VifnetModel { cfg, params, arch: Arch { visible, infrared, dsfe, fusion } })
    }

    pub fn cast<U: Elem>(&self) -> VifnetModel<U> {
        VifnetModel { cfg: self.cfg, params: self.params.cast(), arch: self.arch.clone() }
    }

    pub fn check_finite(&self) -> Result<()> {
        for id in self.params.ids() {
            if !self.params.get(id).all_finite() {
                return Err(Error::CorruptModel(format!("parameter {} holds non-finite values", self.params.name(id))));
            }
        }
        Ok(())
    }

    /// Builds the forward graph on `[n, 3, h, w]` visible and `[n, 1, h, w]`
    /// infrared batches.
    pub fn forward(&self, cx: &Ctx<T>, i_vi: Var, i_in: Var) -> ForwardVars {
        self.forward_inner(cx, i_vi, i_in, false)
    }

    fn forward_inner(&self, cx: &Ctx<T>, i_vi: Var, i_in: Var, silence_infrared: bool) -> ForwardVars {
        let g = cx.g;
        let a = &self.arch;
        let vi = a.visible.forward(cx, i_vi, None);
        let ir = a.infrared.forward(cx, i_in, None);
        let ed = |v: &crate::backbone::EdVars| [0, 1, 2].map(|i| g.concat(&[v.encoded[i], v.decoded[i]]));
        let (f_vi, f_in) = (ed(&vi), ed(&ir));
        let mut out = ForwardVars {
            output: vi.out,
            coarse_visible: vi.out,
            structure_visible: None,
            structure_infrared: None,
            inconsistency: None,
            injected: f_in,
        };
        if let Some((d_vi, d_in)) = &a.dsfe {
            let s_vi = d_vi.forward(cx, f_vi);
            let mut s_in = d_in.forward(cx, f_in);
            if silence_infrared {
                s_in = s_in.map(|s| g.affine(s, 0.0, 0.0));
            }
            out.structure_visible = Some(s_vi);
            out.structure_infrared = Some(s_in);
            out.injected = if self.cfg.variant.uses_inconsistency() {
                let f = [0, 1, 2].map(|i| inconsistency_graph(g, s_vi[i], s_in[i], &self.cfg.fusion));
                out.inconsistency = Some(f);
                [0, 1, 2].map(|i| g.mul(f[i], s_in[i]))
            } else {
                [0, 1, 2].map(|i| g.concat(&[s_vi[i], s_in[i]]))
            };
        } else if silence_infrared {
            out.injected = f_in.map(|f| g.affine(f, 0.0, 0.0));
        }
        let start = g.add(i_vi, vi.out);
        out.output = a.fusion.forward(cx, start, Some(out.injected)).out;
        out
    }

    fn check_inputs(&self, i_vi: &ImageTensor, i_in: &ImageTensor) -> Result<()> {
        if i_vi.channels() != 3 {
            return Err(Error::Shape(format!("visible input needs 3 channels, got {}", i_vi.channels())));
        }
        if i_in.channels() != 1 {
            return Err(Error::Shape(format!("infrared input needs 1 channel, got {}", i_in.channels())));
        }
        if !i_vi.same_dims(i_in) {
            return Err(Error::Shape(format!(
                "visible {}x{} and infrared {}x{} are not aligned",
                i_vi.height(),
                i_vi.width(),
                i_in.height(),
                i_in.width()
            )));
        }
        check_divisible(i_vi.height(), i_vi.width())?;
        self.check_finite()
    }

    /// Runs the network and keeps the fusion-stage maps for inspection.
    pub fn trace(&self, i_vi: &ImageTensor, i_in: &ImageTensor) -> Result<ForwardTrace> {
        self.check_inputs(i_vi, i_in)?;
        let g = Graph::new();
        let cx = Ctx::infer(&g, &self.params);
        let v = self.forward(&cx, g.constant(i_vi.tensor().cast()), g.constant(i_in.tensor().cast()));
        let maps = |vars: Option<[Var; 3]>| -> Result<Option<[FeatureMap; 3]>> {
            let Some(vars) = vars else { return Ok(None) };
            let m = |i: usize| FeatureMap::new(g.value(vars[i]).cast(), i as u32 + 1);
            Ok(Some([m(0)?, m(1)?, m(2)?]))
        };
        let output = ImageTensor::from_tensor_clamped(g.value(v.output).cast(), ColorSpace::Rgb)?;
        let weighted = if self.cfg.variant.uses_inconsistency() { maps(Some(v.injected))? } else { None };
        Ok(ForwardTrace {
            output,
            structure_visible: maps(v.structure_visible)?,
            structure_infrared: maps(v.structure_infrared)?,
            inconsistency: maps(v.inconsistency)?,
            weighted,
        })
    }

    /// Batched inference on raw tensors; no input validation beyond shapes.
    pub fn predict(&self, vi: &Tensor<T>, ir: &Tensor<T>) -> Tensor<T> {
        let g = Graph::new();
        let cx = Ctx::infer(&g, &self.params);
        let v = self.forward(&cx, g.constant(vi.clone()), g.constant(ir.clone()));
        (*g.value(v.output)).clone()
    }
}

/// Dehazes one aligned visible/infrared pair.
pub fn vifnet_forward<T: Elem>(i_vi: &ImageTensor, i_in: &ImageTensor, model: &VifnetModel<T>) -> Result<ImageTensor> {
    model.check_inputs(i_vi, i_in)?;
    let out = model.predict(&i_vi.tensor().cast(), &i_in.tensor().cast());
    ImageTensor::from_tensor_clamped(out.cast(), ColorSpace::Rgb)
}
