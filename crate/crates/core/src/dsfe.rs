//! Deep structure feature extraction: a cascade that turns an encoder-decoder
//! pyramid into one structure probability map per scale.

use rand::Rng;

use crate::backbone::{BranchConfig, Cpab};
use crate::error::{Error, Result};
use crate::imaging::{concat_channels, FeatureMap, FeaturePyramid};
use crate::nn::{Conv2d, ConvAct, Ctx, Graph, ParamStore, Var};
use crate::tensor::Elem;

pub const DEFAULT_WIDTH: usize = 32;

/// Convolution, PReLU, then attention, at a fixed internal width.
#[derive(Clone, Debug)]
pub struct StructBlock {
    pub conv: ConvAct,
    pub attention: Cpab,
}

impl StructBlock {
    fn new<T: Elem, R: Rng>(store: &mut ParamStore<T>, name: &str, cin: usize, width: usize, reduction: usize, rng: &mut R) -> Self {
        StructBlock {
            conv: ConvAct::new(store, &format!("{name}.conv"), cin, width, 3, 1, rng),
            attention: Cpab::new(store, &format!("{name}.cpab"), width, reduction, rng),
        }
    }

    fn forward<T: Elem>(&self, cx: &Ctx<T>, x: Var) -> Var {
        let y = self.conv.forward(cx, x);
        self.attention.forward(cx, y)
    }
}

#[derive(Clone, Debug)]
pub struct Dsfe {
    pub width: usize,
    pub in_channels: [usize; 3],
    pub blocks: [StructBlock; 5],
    pub heads: [Conv2d; 3],
}

impl Dsfe {
    pub fn new<T: Elem, R: Rng>(store: &mut ParamStore<T>, name: &str, branch: &BranchConfig, width: usize, rng: &mut R) -> Result<Self> {
        if width == 0 || width % branch.cpab_reduction != 0 {
            return Err(Error::Config(format!("DSFE width {width} must be a positive multiple of {}", branch.cpab_reduction)));
        }
        let r = branch.cpab_reduction;
        let (k1, k2, k3) = (branch.width(1), branch.width(2), branch.width(3));
        Ok(Dsfe {
            width,
            in_channels: [2 * k1, 2 * k2, 2 * k3],
            blocks: [
                StructBlock::new(store, &format!("{name}.b1"), 2 * k1, width, r, rng),
                StructBlock::new(store, &format!("{name}.b2"), 2 * k1 + 2 * k2, width, r, rng),
                StructBlock::new(store, &format!("{name}.b3"), width, width, r, rng),
                StructBlock::new(store, &format!("{name}.b4"), width + 2 * k3, width, r, rng),
                StructBlock::new(store, &format!("{name}.b5"), width, width, r, rng),
            ],
            heads: [1, 2, 3].map(|s| Conv2d::new(store, &format!("{name}.head{s}"), width, 1, 3, 1, rng)),
        })
    }

    fn head<T: Elem>(&self, cx: &Ctx<T>, i: usize, x: Var) -> Var {
        let y = self.heads[i].forward(cx, x);
        cx.g.sigmoid(y)
    }

    /// Structure maps for the three scales, finest first. `f_ed[i]` is the
    /// channel concatenation of encoder and decoder features at level `i + 1`.
    pub fn forward<T: Elem>(&self, cx: &Ctx<T>, f_ed: [Var; 3]) -> [Var; 3] {
        let g = cx.g;
        let b = &self.blocks;
        let s1 = self.head(cx, 0, b[0].forward(cx, f_ed[0]));
        let down = g.avg_pool2x(f_ed[0]);
        let t2 = b[1].forward(cx, g.concat(&[down, f_ed[1]]));
        let s2 = self.head(cx, 1, b[2].forward(cx, t2));
        let down = g.avg_pool2x(t2);
        let t3 = b[3].forward(cx, g.concat(&[down, f_ed[2]]));
        let s3 = self.head(cx, 2, b[4].forward(cx, t3));
        [s1, s2, s3]
    }
}

/// One single-channel map per scale with values in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureMaps<T = f32> {
    pub maps: [FeatureMap<T>; 3],
}

/// Joins an encoder level with its matching decoder level along channels.
pub fn fuse_scale<T: Elem>(encoded: &FeatureMap<T>, decoded: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    concat_channels(encoded, decoded)
}

pub fn fuse_pyramids<T: Elem>(encoded: &FeaturePyramid<T>, decoded: &FeaturePyramid<T>) -> Result<FeaturePyramid<T>> {
    let e = encoded.maps();
    let d = decoded.maps();
    FeaturePyramid::new([fuse_scale(&e[0], &d[0])?, fuse_scale(&e[1], &d[1])?, fuse_scale(&e[2], &d[2])?])
}

/// Runs the cascade on an already fused pyramid.
pub fn dsfe_forward<T: Elem>(f_ed: &FeaturePyramid<T>, dsfe: &Dsfe, params: &ParamStore<T>) -> Result<StructureMaps<T>> {
    for (m, &c) in f_ed.maps().iter().zip(&dsfe.in_channels) {
        if m.channels() != c {
            return Err(Error::Shape(format!("DSFE level {} expects {c} channels, got {}", m.scale, m.channels())));
        }
    }
    let g = Graph::new();
    let cx = Ctx::infer(&g, params);
    let v = f_ed.maps().clone().map(|m| g.constant(m.tensor));
    let s = dsfe.forward(&cx, v);
    let maps = [0usize, 1, 2].map(|i| FeatureMap { tensor: (*g.value(s[i])).clone(), scale: i as u32 + 1 });
    Ok(StructureMaps { maps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Grads;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pyramid(cfg: &BranchConfig, h: usize, seed: f64) -> FeaturePyramid<f64> {
        let m = |s: u32| {
            let c = 2 * cfg.width(s as usize);
            let hs = h >> (s - 1);
            FeatureMap::from_fn(c, hs, hs, s, |c, y, x| ((c * 17 + y * 5 + x * 3) as f64 * 0.13 + seed).sin()).unwrap()
        };
        FeaturePyramid::new([m(1), m(2), m(3)]).unwrap()
    }

    fn setup() -> (BranchConfig, ParamStore<f64>, Dsfe) {
        let cfg = BranchConfig::with_base(8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let d = Dsfe::new(&mut store, "dsfe", &cfg, 8, &mut rng).unwrap();
        (cfg, store, d)
    }

    #[test]
    fn outputs_are_open_unit_interval_maps() {
        let (cfg, store, d) = setup();
        let s = dsfe_forward(&pyramid(&cfg, 16, 0.3), &d, &store).unwrap();
        for (i, m) in s.maps.iter().enumerate() {
            assert_eq!(m.shape().c, 1);
            assert_eq!(m.shape().h, 16 >> i);
            assert!(m.tensor.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    fn perturbed(p: &FeaturePyramid<f64>, level: usize) -> FeaturePyramid<f64> {
        let mut maps = p.maps().clone();
        maps[level].tensor = maps[level].tensor.map(|v| v + 0.5);
        FeaturePyramid::new(maps).unwrap()
    }

    #[test]
    fn each_map_depends_on_exactly_the_finer_levels() {
        let (cfg, store, d) = setup();
        let p = pyramid(&cfg, 16, 0.3);
        let base = dsfe_forward(&p, &d, &store).unwrap();
        for level in 0..3 {
            let moved = dsfe_forward(&perturbed(&p, level), &d, &store).unwrap();
            for out in 0..3 {
                let diff = moved.maps[out].tensor.max_abs_diff(&base.maps[out].tensor);
                if level <= out {
                    assert!(diff > 1e-9, "Stru{} ignores F_ED{}", out + 1, level + 1);
                } else {
                    assert_eq!(diff, 0.0, "Stru{} reads F_ED{}", out + 1, level + 1);
                }
            }
        }
    }

    #[test]
    fn fuse_scale_concatenates_and_checks_scale() {
        let a = FeatureMap::<f64>::from_fn(96, 60, 60, 3, |c, y, x| (c + y + x) as f64).unwrap();
        let s = fuse_scale(&a, &a.zeros_like()).unwrap();
        assert_eq!((s.shape().c, s.shape().h, s.shape().w), (192, 60, 60));
        assert_eq!(&s.tensor.data()[..a.tensor.len()], a.tensor.data());
        assert!(s.tensor.data()[a.tensor.len()..].iter().all(|&v| v == 0.0));
        let b = FeatureMap::<f64>::from_fn(96, 60, 60, 2, |_, _, _| 1.0).unwrap();
        assert!(matches!(fuse_scale(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let (cfg, mut store, d) = setup();
        let p = pyramid(&cfg, 8, 0.7);
        let loss = |store: &ParamStore<f64>| -> (f64, Vec<crate::tensor::Tensor<f64>>) {
            let g = Graph::new();
            let cx = Ctx::train(&g, store);
            let v = p.maps().clone().map(|m| g.constant(m.tensor));
            let s = d.forward(&cx, v);
            let parts: Vec<Var> = s.iter().enumerate().map(|(i, &m)| {
                let sq = g.square(m);
                let total = g.sum(sq);
                g.affine(total, (i + 1) as f64, 0.0)
            }).collect();
            let l = g.add(g.add(parts[0], parts[1]), parts[2]);
            let mut grads: Grads<f64> = g.backward(l);
            (g.scalar(l), cx.param_grads(&mut grads))
        };
        let (_, grads) = loss(&store);
        let h = 1e-6;
        let ids: Vec<_> = store.ids().collect();
        for (k, &id) in ids.iter().enumerate().step_by(5) {
            let j = (k * 7) % store.get(id).len();
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + h;
            let up = loss(&store).0;
            store.get_mut(id).data_mut()[j] = orig - h;
            let dn = loss(&store).0;
            store.get_mut(id).data_mut()[j] = orig;
            let fd = (up - dn) / (2.0 * h);
            let an = grads[id.0].data()[j];
            assert!((fd - an).abs() <= 1e-5 * (1.0 + fd.abs()), "{}[{j}]: fd {fd} vs {an}", store.name(id));
        }
    }
}
