use rand::Rng;

use crate::nn::graph::Var;
use crate::nn::kernels::ConvGeom;
use crate::nn::params::{kaiming_uniform, Ctx, ParamId, ParamStore};
use crate::tensor::{Elem, Shape, Tensor};

/// Square-kernel convolution with bias and "same" zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2d {
    pub fn new<T: Elem, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), kaiming_uniform(Shape::new(cout, cin, k, k), rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(Shape::new(1, cout, 1, 1)));
        Conv2d { weight, bias, geom: ConvGeom { k, stride, pad: k / 2 }, cin, cout }
    }

    pub fn forward<T: Elem>(&self, cx: &Ctx<T>, x: Var) -> Var {
        cx.g.conv2d(x, cx.p(self.weight), Some(cx.p(self.bias)), self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct PRelu {
    pub slope: ParamId,
}

impl PRelu {
    pub const INIT_SLOPE: f64 = 0.25;

    pub fn new<T: Elem>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let slope = store.add(
            format!("{name}.slope"),
            Tensor::full(Shape::new(1, channels, 1, 1), T::lit(Self::INIT_SLOPE)),
        );
        PRelu { slope }
    }

    pub fn forward<T: Elem>(&self, cx: &Ctx<T>, x: Var) -> Var {
        cx.g.prelu(x, cx.p(self.slope))
    }
}

/// Convolution followed by PReLU.
#[derive(Clone, Debug)]
pub struct ConvAct {
    pub conv: Conv2d,
    pub act: PRelu,
}

impl ConvAct {
    pub fn new<T: Elem, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        ConvAct {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, k, stride, rng),
            act: PRelu::new(store, &format!("{name}.act"), cout),
        }
    }

    pub fn forward<T: Elem>(&self, cx: &Ctx<T>, x: Var) -> Var {
        let y = self.conv.forward(cx, x);
        self.act.forward(cx, y)
    }
}
