//! Per-modality encoder-decoder with skip connections and channel-pixel
//! attention.

use rand::Rng;

use crate::error::{Error, Result};
use crate::imaging::{FeatureMap, FeaturePyramid, ImageTensor};
use crate::nn::{Conv2d, ConvAct, Ctx, Graph, PRelu, ParamStore, Var};
use crate::tensor::{Elem, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchConfig {
    pub base_channels: usize,
    pub n_scales: usize,
    pub cpab_reduction: usize,
}

impl Default for BranchConfig {
    fn default() -> Self {
        BranchConfig { base_channels: 24, n_scales: 3, cpab_reduction: 8 }
    }
}

impl BranchConfig {
    pub fn with_base(base_channels: usize) -> Self {
        BranchConfig { base_channels, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 4 {
            return Err(Error::Config(format!("base_channels {} must be at least 4", self.base_channels)));
        }
        if self.n_scales != 3 {
            return Err(Error::Config(format!("n_scales is fixed at 3, got {}", self.n_scales)));
        }
        if self.cpab_reduction == 0 || self.base_channels % self.cpab_reduction != 0 {
            return Err(Error::Config(format!(
                "cpab_reduction {} must divide base_channels {}",
                self.cpab_reduction, self.base_channels
            )));
        }
        Ok(())
    }

    /// Channel width at pyramid level 1..=3.
    pub fn width(&self, scale: usize) -> usize {
        self.base_channels << (scale - 1)
    }
}

/// Per-channel negative slopes.
#[derive(Clone, Debug, PartialEq)]
pub struct PReluParams {
    pub slopes: Vec<f64>,
}

/// `k` for `k > 0`, `a_j k` otherwise, channel by channel.
pub fn prelu<T: Elem>(x: &FeatureMap<T>, p: &PReluParams) -> Result<FeatureMap<T>> {
    if p.slopes.len() != x.channels() {
        return Err(Error::Shape(format!("{} slopes for {} channels", p.slopes.len(), x.channels())));
    }
    if p.slopes.iter().any(|a| !a.is_finite()) {
        return Err(Error::InvalidInput("non-finite PReLU slope".into()));
    }
    let g = Graph::<T>::new();
    let xv = g.constant(x.tensor.clone());
    let slopes = Tensor::from_vec(Shape::new(1, p.slopes.len(), 1, 1), p.slopes.iter().map(|&v| T::lit(v)).collect())?;
    let a = g.constant(slopes);
    let y = g.prelu(xv, a);
    FeatureMap::new((*g.value(y)).clone(), x.scale)
}

/// Channel attention followed by pixel attention, both sigmoid gated.
#[derive(Clone, Debug)]
pub struct Cpab {
    pub ca_reduce: Conv2d,
    pub ca_act: PRelu,
    pub ca_expand: Conv2d,
    pub pa_reduce: Conv2d,
    pub pa_act: PRelu,
    pub pa_out: Conv2d,
    pub channels: usize,
}

impl Cpab {
    pub fn new<T: Elem, R: Rng>(store: &mut ParamStore<T>, name: &str, channels: usize, reduction: usize, rng: &mut R) -> Self {
        let mid = (channels / reduction).max(1);
        let block = Cpab {
            ca_reduce: Conv2d::new(store, &format!("{name}.ca.reduce"), channels, mid, 1, 1, rng),
            ca_act: PRelu::new(store, &format!("{name}.ca.act"), mid),
            ca_expand: Conv2d::new(store, &format!("{name}.ca.expand"), mid, channels, 1, 1, rng),
            pa_reduce: Conv2d::new(store, &format!("{name}.pa.reduce"), channels, mid, 1, 1, rng),
            pa_act: PRelu::new(store, &format!("{name}.pa.act"), mid),
            pa_out: Conv2d::new(store, &format!("{name}.pa.out"), mid, 1, 1, 1, rng),
            channels,
        };
        // Gates start nearly open; stacked half-closed gates starve the deep
        // layers of signal early in training.
        for id in [block.ca_expand.bias, block.pa_out.bias] {
            store.get_mut(id).data_mut().fill(T::lit(Self::GATE_BIAS));
        }
        block
    }

    pub const GATE_BIAS: f64 = 3.0;

    pub fn forward<T: Elem>(&self, cx: &Ctx<T>, x: Var) -> Var {
        let g = cx.g;
        let pooled = g.mean_spatial(x);
        let c = self.ca_reduce.forward(cx, pooled);
        let c = self.ca_act.forward(cx, c);
        let c = self.ca_expand.forward(cx, c);
        let c = g.sigmoid(c);
        let x = g.mul(x, c);
        let p = self.pa_reduce.forward(cx, x);
        let p = self.pa_act.forward(cx, p);
        let p = self.pa_out.forward(cx, p);
        let p = g.sigmoid(p);
        g.mul(x, p)
    }
}

/// Applies one attention block to a single feature map.
pub fn cpab_forward<T: Elem>(x: &FeatureMap<T>, block: &Cpab, params: &ParamStore<T>) -> Result<FeatureMap<T>> {
    if x.channels() != block.channels {
        return Err(Error::Shape(format!("CPAB expects {} channels, got {}", block.channels, x.channels())));
    }
    let g = Graph::new();
    let cx = Ctx::infer(&g, params);
    let xv = g.constant(x.tensor.clone());
    let y = block.forward(&cx, xv);
    FeatureMap::new((*g.value(y)).clone(), x.scale)
}

/// `x + conv(prelu(conv(x)))`
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub first: ConvAct,
    pub second: Conv2d,
}

impl ResBlock {
    pub fn new<T: Elem, R: Rng>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        ResBlock {
            first: ConvAct::new(store, &format!("{name}.0"), channels, channels, 3, 1, rng),
            second: Conv2d::new(store, &format!("{name}.1"), channels, channels, 3, 1, rng),
        }
    }

    pub fn forward<T: Elem>(&self, cx: &Ctx<T>, x: Var) -> Var {
        let y = self.first.forward(cx, x);
        let y = self.second.forward(cx, y);
        cx.g.add(x, y)
    }
}

/// Side input merged into an encoder level: expanded to the level's width by a
/// 1×1 convolution, concatenated, then folded back with another 1×1.
#[derive(Clone, Debug)]
pub struct Injection {
    pub expand: ConvAct,
    pub merge: ConvAct,
    pub in_channels: usize,
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    blocks: [ResBlock; 2],
    attention: Cpab,
    injection: Option<Injection>,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: ConvAct,
    merge: ConvAct,
    attention: Cpab,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

/// Three-level encoder-decoder shared by both input branches and by the
/// fusion stage.
#[derive(Clone, Debug)]
pub struct EncoderDecoder {
    pub cfg: BranchConfig,
    pub in_channels: usize,
    pub out_channels: usize,
    pub activation: OutputActivation,
    stem: ConvAct,
    levels: [EncoderLevel; 3],
    down: [ConvAct; 2],
    bottom_block: ResBlock,
    bottom_attention: Cpab,
    decoder: [DecoderLevel; 2],
    pub head: Conv2d,
}

/// Graph handles for one encoder-decoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EdVars {
    pub encoded: [Var; 3],
    pub decoded: [Var; 3],
    pub out: Var,
}

impl EncoderDecoder {
    /// `inject` lists side-input channel counts per level (`None` = no side input).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Elem, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: BranchConfig,
        in_channels: usize,
        out_channels: usize,
        activation: OutputActivation,
        inject: [Option<usize>; 3],
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let r = cfg.cpab_reduction;
        let stem = ConvAct::new(store, &format!("{name}.stem"), in_channels, cfg.width(1), 3, 1, rng);
        let make_level = |store: &mut ParamStore<T>, s: usize, rng: &mut R| {
            let w = cfg.width(s);
            EncoderLevel {
                blocks: [
                    ResBlock::new(store, &format!("{name}.enc{s}.res0"), w, rng),
                    ResBlock::new(store, &format!("{name}.enc{s}.res1"), w, rng),
                ],
                attention: Cpab::new(store, &format!("{name}.enc{s}.cpab"), w, r, rng),
                injection: inject[s - 1].map(|ic| Injection {
                    expand: ConvAct::new(store, &format!("{name}.enc{s}.inject.expand"), ic, w, 1, 1, rng),
                    merge: ConvAct::new(store, &format!("{name}.enc{s}.inject.merge"), 2 * w, w, 1, 1, rng),
                    in_channels: ic,
                }),
            }
        };
        let l1 = make_level(store, 1, rng);
        let d1 = ConvAct::new(store, &format!("{name}.down1"), cfg.width(1), cfg.width(2), 3, 2, rng);
        let l2 = make_level(store, 2, rng);
        let d2 = ConvAct::new(store, &format!("{name}.down2"), cfg.width(2), cfg.width(3), 3, 2, rng);
        let l3 = make_level(store, 3, rng);
        let bottom_block = ResBlock::new(store, &format!("{name}.dec3.res"), cfg.width(3), rng);
        let bottom_attention = Cpab::new(store, &format!("{name}.dec3.cpab"), cfg.width(3), r, rng);
        let make_dec = |store: &mut ParamStore<T>, s: usize, rng: &mut R| {
            let (wide, w) = (cfg.width(s + 1), cfg.width(s));
            DecoderLevel {
                up: ConvAct::new(store, &format!("{name}.dec{s}.up"), wide, w, 3, 1, rng),
                merge: ConvAct::new(store, &format!("{name}.dec{s}.merge"), 2 * w, w, 1, 1, rng),
                attention: Cpab::new(store, &format!("{name}.dec{s}.cpab"), w, r, rng),
            }
        };
        let dec2 = make_dec(store, 2, rng);
        let dec1 = make_dec(store, 1, rng);
        let head = Conv2d::new(store, &format!("{name}.head"), cfg.width(1), out_channels, 3, 1, rng);
        Ok(EncoderDecoder {
            cfg,
            in_channels,
            out_channels,
            activation,
            stem,
            levels: [l1, l2, l3],
            down: [d1, d2],
            bottom_block,
            bottom_attention,
            decoder: [dec2, dec1],
            head,
        })
    }

    pub fn injection_channels(&self) -> [Option<usize>; 3] {
        [0, 1, 2].map(|i| self.levels[i].injection.as_ref().map(|inj| inj.in_channels))
    }

    pub fn forward<T: Elem>(&self, cx: &Ctx<T>, x: Var, side: Option<[Var; 3]>) -> EdVars {
        let g = cx.g;
        let mut h = self.stem.forward(cx, x);
        let mut encoded = Vec::with_capacity(3);
        for (i, level) in self.levels.iter().enumerate() {
            if i > 0 {
                h = self.down[i - 1].forward(cx, h);
            }
            for b in &level.blocks {
                h = b.forward(cx, h);
            }
            h = level.attention.forward(cx, h);
            if let (Some(inj), Some(side)) = (&level.injection, side) {
                let e = inj.expand.forward(cx, side[i]);
                let cat = g.concat(&[h, e]);
                h = inj.merge.forward(cx, cat);
            }
            encoded.push(h);
        }
        let d3 = self.bottom_block.forward(cx, encoded[2]);
        let d3 = self.bottom_attention.forward(cx, d3);
        let mut d = d3;
        let mut decoded = vec![d3];
        for (lvl, skip) in self.decoder.iter().zip([encoded[1], encoded[0]]) {
            let u = g.upsample2x(d);
            let u = lvl.up.forward(cx, u);
            let cat = g.concat(&[u, skip]);
            let m = lvl.merge.forward(cx, cat);
            d = lvl.attention.forward(cx, m);
            decoded.push(d);
        }
        let out = self.head.forward(cx, d);
        let out = match self.activation {
            OutputActivation::Identity => out,
            OutputActivation::Sigmoid => g.sigmoid(out),
        };
        EdVars {
            encoded: [encoded[0], encoded[1], encoded[2]],
            decoded: [decoded[2], decoded[1], decoded[0]],
            out,
        }
    }
}

/// One input branch: weights plus the architecture that reads them.
#[derive(Clone, Debug)]
pub struct Branch<T> {
    pub params: ParamStore<T>,
    pub net: EncoderDecoder,
}

impl<T: Elem> Branch<T> {
    pub fn new<R: Rng>(cfg: BranchConfig, in_channels: usize, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = EncoderDecoder::new(
            &mut params,
            "branch",
            cfg,
            in_channels,
            in_channels,
            OutputActivation::Identity,
            [None; 3],
            rng,
        )?;
        Ok(Branch { params, net })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutputs<T = f32> {
    pub encoded: FeaturePyramid<T>,
    pub decoded: FeaturePyramid<T>,
    pub coarse: FeatureMap<T>,
}

pub(crate) fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Shape(format!("input {h}x{w} must be divisible by 4")));
    }
    Ok(())
}

pub(crate) fn pyramid_from<T: Elem>(g: &Graph<T>, vars: [Var; 3]) -> Result<FeaturePyramid<T>> {
    let maps = [0usize, 1, 2].map(|i| FeatureMap { tensor: (*g.value(vars[i])).clone(), scale: i as u32 + 1 });
    FeaturePyramid::new(maps)
}

/// Runs one branch on an image: encoder and decoder pyramids plus the coarse
/// full-resolution reconstruction.
pub fn branch_forward<T: Elem>(img: &ImageTensor, branch: &Branch<T>) -> Result<BranchOutputs<T>> {
    check_divisible(img.height(), img.width())?;
    if img.channels() != branch.net.in_channels {
        return Err(Error::Shape(format!(
            "branch expects {} channels, image has {}",
            branch.net.in_channels,
            img.channels()
        )));
    }
    let g = Graph::new();
    let cx = Ctx::infer(&g, &branch.params);
    let x = g.constant(img.tensor().cast());
    let v = branch.net.forward(&cx, x, None);
    Ok(BranchOutputs {
        encoded: pyramid_from(&g, v.encoded)?,
        decoded: pyramid_from(&g, v.decoded)?,
        coarse: FeatureMap::new((*g.value(v.out)).clone(), 1)?,
    })
}
