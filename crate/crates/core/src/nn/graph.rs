//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node holding its value and a
//! closure that maps the node's output gradient onto its parents. Nodes are
//! appended in evaluation order, so a reverse sweep is a valid topological
//! order for [`Graph::backward`].

use std::cell::RefCell;
use std::rc::Rc;

use crate::nn::kernels::{self, ConvGeom, Kernel2d};
use crate::tensor::{Elem, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

type BackFn<T> = Box<dyn Fn(&Tensor<T>, &mut Grads<T>)>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    back: Option<BackFn<T>>,
}

pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Gradients indexed by node, produced by [`Graph::backward`].
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
    wanted: Vec<bool>,
}

impl<T: Elem> Grads<T> {
    fn wants(&self, v: Var) -> bool {
        self.wanted[v.0]
    }

    fn add(&mut self, v: Var, g: Tensor<T>) {
        match &mut self.slots[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Applies `f` to a gradient only when the target wants one.
    fn add_with(&mut self, v: Var, f: impl FnOnce() -> Tensor<T>) {
        if self.wants(v) {
            let g = f();
            self.add(v, g);
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

fn same_shape(a: Shape, b: Shape, op: &str) {
    assert_eq!(a, b, "{op}: operand shapes differ");
}

/// Index map for broadcasting `small` against `big` where each axis of
/// `small` either matches or is 1.
fn bcast_index(big: Shape, small: Shape) -> impl Fn(usize, usize, usize, usize) -> usize {
    assert!(
        (small.n == big.n || small.n == 1)
            && (small.c == big.c || small.c == 1)
            && (small.h == big.h || small.h == 1)
            && (small.w == big.w || small.w == 1),
        "cannot broadcast {small} to {big}"
    );
    move |n, c, y, x| {
        let n = if small.n == 1 { 0 } else { n };
        let c = if small.c == 1 { 0 } else { c };
        let y = if small.h == 1 { 0 } else { y };
        let x = if small.w == 1 { 0 } else { x };
        ((n * small.c + c) * small.h + y) * small.w + x
    }
}

impl<T: Elem> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::with_capacity(512)) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, requires_grad: bool, back: Option<BackFn<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), requires_grad, back: if requires_grad { back } else { None } });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Scalar value of a `[1,1,1,1]` node.
    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "node is not a scalar");
        val.data()[0]
    }

    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, false, None)
    }

    /// A leaf whose gradient is collected by [`Graph::backward`].
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        self.push(t, true, None)
    }

    pub fn backward(&self, root: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.len(), 1, "backward root must be a scalar");
        let mut grads = Grads {
            slots: (0..nodes.len()).map(|_| None).collect(),
            wanted: nodes.iter().map(|n| n.requires_grad).collect(),
        };
        if !nodes[root.0].requires_grad {
            return grads;
        }
        grads.slots[root.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            let Some(back) = node.back.as_ref() else { continue };
            if let Some(g) = grads.slots[id].take() {
                back(&g, &mut grads);
                // leaves keep nothing; intermediate gradients are dropped once consumed
            }
        }
        grads
    }

    fn unary(
        &self,
        a: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static, // (input, output) -> local derivative
    ) -> Var {
        let av = self.value(a);
        let out = av.map(f);
        let rg = self.rg(a);
        let outv = Rc::new(out.clone());
        self.push(
            out,
            rg,
            Some(Box::new(move |g, grads| {
                grads.add_with(a, || {
                    let mut r = g.clone();
                    for ((rv, &x), &y) in r.data_mut().iter_mut().zip(av.data()).zip(outv.data()) {
                        *rv *= df(x, y);
                    }
                    r
                })
            })),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av.shape(), bv.shape(), "add");
        let out = av.zip_map(&bv, |x, y| x + y);
        self.push(
            out,
            self.rg(a) || self.rg(b),
            Some(Box::new(move |g, grads| {
                grads.add_with(a, || g.clone());
                grads.add_with(b, || g.clone());
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av.shape(), bv.shape(), "sub");
        let out = av.zip_map(&bv, |x, y| x - y);
        self.push(
            out,
            self.rg(a) || self.rg(b),
            Some(Box::new(move |g, grads| {
                grads.add_with(a, || g.clone());
                grads.add_with(b, || g.map(|v| -v));
            })),
        )
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av.shape(), bv.shape(), "div");
        let out = av.zip_map(&bv, |x, y| x / y);
        self.push(
            out,
            self.rg(a) || self.rg(b),
            Some(Box::new(move |g, grads| {
                grads.add_with(a, || g.zip_map(&bv, |gv, y| gv / y));
                grads.add_with(b, || {
                    let t = g.zip_map(&av, |gv, x| gv * x);
                    t.zip_map(&bv, |v, y| -v / (y * y))
                });
            })),
        )
    }

    /// Elementwise product where `b` may broadcast along any axis of size 1.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.bcast_binary(a, b, false)
    }

    /// Elementwise sum where `b` may broadcast along any axis of size 1.
    pub fn add_bcast(&self, a: Var, b: Var) -> Var {
        self.bcast_binary(a, b, true)
    }

    fn bcast_binary(&self, a: Var, b: Var, is_add: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (big, small) = (av.shape(), bv.shape());
        let idx = bcast_index(big, small);
        let mut out = Tensor::zeros(big);
        {
            let (ad, bd) = (av.data(), bv.data());
            let od = out.data_mut();
            let mut i = 0;
            for n in 0..big.n {
                for c in 0..big.c {
                    for y in 0..big.h {
                        for x in 0..big.w {
                            let bvv = bd[idx(n, c, y, x)];
                            od[i] = if is_add { ad[i] + bvv } else { ad[i] * bvv };
                            i += 1;
                        }
                    }
                }
            }
        }
        self.push(
            out,
            self.rg(a) || self.rg(b),
            Some(Box::new(move |g, grads| {
                let idx = bcast_index(big, small);
                grads.add_with(a, || {
                    if is_add {
                        return g.clone();
                    }
                    let mut r = g.clone();
                    let rd = r.data_mut();
                    let bd = bv.data();
                    let mut i = 0;
                    for n in 0..big.n {
                        for c in 0..big.c {
                            for y in 0..big.h {
                                for x in 0..big.w {
                                    rd[i] *= bd[idx(n, c, y, x)];
                                    i += 1;
                                }
                            }
                        }
                    }
                    r
                });
                grads.add_with(b, || {
                    let mut r = Tensor::zeros(small);
                    let rd = r.data_mut();
                    let (gd, ad) = (g.data(), av.data());
                    let mut i = 0;
                    for n in 0..big.n {
                        for c in 0..big.c {
                            for y in 0..big.h {
                                for x in 0..big.w {
                                    let v = if is_add { gd[i] } else { gd[i] * ad[i] };
                                    rd[idx(n, c, y, x)] += v;
                                    i += 1;
                                }
                            }
                        }
                    }
                    r
                });
            })),
        )
    }

    /// `scale * x + shift`
    pub fn affine(&self, a: Var, scale: f64, shift: f64) -> Var {
        let (s, b) = (T::lit(scale), T::lit(shift));
        self.unary(a, move |x| s * x + b, move |_, _| s)
    }

    pub fn one_minus(&self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    pub fn square(&self, a: Var) -> Var {
        let two = T::lit(2.0);
        self.unary(a, |x| x * x, move |x, _| two * x)
    }

    /// `sqrt(x + eps) - sqrt(eps)`: smooth at zero and exactly zero there.
    pub fn sqrt_eps(&self, a: Var, eps: f64) -> Var {
        let e = T::lit(eps);
        let root = e.sqrt();
        let half = T::lit(0.5);
        self.unary(a, move |x| (x + e).sqrt() - root, move |x, _| half / (x + e).sqrt())
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), |x, _| if x > T::zero() { T::one() } else if x < T::zero() { -T::one() } else { T::zero() })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), |_, y| y * (T::one() - y))
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::lit(lo), T::lit(hi));
        self.unary(a, move |x| x.max(l).min(h), move |x, _| if x >= l && x <= h { T::one() } else { T::zero() })
    }

    /// `x^p` for `x > 0`.
    pub fn powf(&self, a: Var, p: f64) -> Var {
        let pt = T::lit(p);
        let pm1 = T::lit(p - 1.0);
        self.unary(a, move |x| x.powf(pt), move |x, _| pt * x.powf(pm1))
    }

    /// Per-channel parametric ReLU; `slope` is `[1, c, 1, 1]`.
    pub fn prelu(&self, x: Var, slope: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(slope));
        let sh = xv.shape();
        assert_eq!(sv.len(), sh.c, "prelu: one slope per channel");
        let mut out = (*xv).clone();
        for n in 0..sh.n {
            for c in 0..sh.c {
                let a = sv.data()[c];
                for v in out.plane_mut(n, c) {
                    if *v <= T::zero() {
                        *v *= a;
                    }
                }
            }
        }
        self.push(
            out,
            self.rg(x) || self.rg(slope),
            Some(Box::new(move |g, grads| {
                grads.add_with(x, || {
                    let mut r = g.clone();
                    for n in 0..sh.n {
                        for c in 0..sh.c {
                            let a = sv.data()[c];
                            for (rv, &xi) in r.plane_mut(n, c).iter_mut().zip(xv.plane(n, c)) {
                                if xi <= T::zero() {
                                    *rv *= a;
                                }
                            }
                        }
                    }
                    r
                });
                grads.add_with(slope, || {
                    let mut r = Tensor::zeros(sv.shape());
                    for n in 0..sh.n {
                        for c in 0..sh.c {
                            let s: T = g
                                .plane(n, c)
                                .iter()
                                .zip(xv.plane(n, c))
                                .filter(|(_, &xi)| xi <= T::zero())
                                .map(|(&gv, &xi)| gv * xi)
                                .sum();
                            r.data_mut()[c] += s;
                        }
                    }
                    r
                });
            })),
        )
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let xs = xv.shape();
        let ws = wv.shape();
        assert_eq!(ws.c, xs.c, "conv2d: weight expects {} input channels, got {}", ws.c, xs.c);
        assert!(ws.h == geom.k && ws.w == geom.k, "conv2d: kernel size mismatch");
        let bv = b.map(|b| self.value(b));
        let out = kernels::conv2d_forward(&xv, &wv, bv.as_deref(), geom);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            out,
            rg,
            Some(Box::new(move |g, grads| {
                let need_x = grads.wants(x);
                let need_w = grads.wants(w);
                let cg = kernels::conv2d_backward(&xv, &wv, g, geom, need_x, need_w);
                if let Some(gx) = cg.x {
                    grads.add(x, gx);
                }
                if need_w {
                    grads.add(w, cg.w);
                }
                if let Some(b) = b {
                    if grads.wants(b) {
                        grads.add(b, cg.b);
                    }
                }
            })),
        )
    }

    pub fn avg_pool2x(&self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let out = kernels::avg_pool2x_forward(&xv);
        self.push(out, self.rg(x), Some(Box::new(move |g, grads| grads.add_with(x, || kernels::avg_pool2x_backward(s, g)))))
    }

    pub fn upsample2x(&self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let out = kernels::upsample2x_forward(&xv);
        self.push(out, self.rg(x), Some(Box::new(move |g, grads| grads.add_with(x, || kernels::upsample2x_backward(s, g)))))
    }

    pub fn pad_reflect(&self, x: Var, pad: usize) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let out = kernels::pad_reflect_forward(&xv, pad);
        self.push(
            out,
            self.rg(x),
            Some(Box::new(move |g, grads| grads.add_with(x, || kernels::pad_reflect_backward(s, g, pad)))),
        )
    }

    /// Fixed-kernel valid correlation on every channel.
    pub fn filter(&self, x: Var, k: &Kernel2d) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let out = kernels::filter_valid_forward(&xv, k);
        let k = k.clone();
        self.push(
            out,
            self.rg(x),
            Some(Box::new(move |g, grads| grads.add_with(x, || kernels::filter_valid_backward(s, g, &k)))),
        )
    }

    /// Concatenates along the channel axis in argument order.
    pub fn concat(&self, parts: &[Var]) -> Var {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let first = vals[0].shape();
        for v in &vals {
            let s = v.shape();
            assert!(s.n == first.n && s.h == first.h && s.w == first.w, "concat: {s} vs {first}");
        }
        let widths: Vec<usize> = vals.iter().map(|v| v.shape().c).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(first.with_c(total));
        let plane = first.plane();
        for n in 0..first.n {
            let dst = out.item_mut(n);
            let mut off = 0;
            for v in &vals {
                let src = v.item(n);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let parts = parts.to_vec();
        self.push(
            out,
            rg,
            Some(Box::new(move |g, grads| {
                let mut start = 0;
                for (&p, &c) in parts.iter().zip(&widths) {
                    grads.add_with(p, || {
                        let mut r = Tensor::zeros(first.with_c(c));
                        for n in 0..first.n {
                            let src = &g.item(n)[start * plane..(start + c) * plane];
                            r.item_mut(n).copy_from_slice(src);
                        }
                        r
                    });
                    start += c;
                }
            })),
        )
    }

    pub fn sum(&self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let out = Tensor::scalar(xv.sum());
        self.push(out, self.rg(x), Some(Box::new(move |g, grads| grads.add_with(x, || Tensor::full(s, g.data()[0])))))
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.shape(x).numel();
        let s = self.sum(x);
        self.affine(s, 1.0 / n as f64, 0.0)
    }

    /// Sum over the spatial axes: `[n, c, h, w] -> [n, c, 1, 1]`.
    pub fn sum_spatial(&self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
        for n in 0..s.n {
            for c in 0..s.c {
                out.data_mut()[n * s.c + c] = xv.plane(n, c).iter().copied().sum();
            }
        }
        self.push(
            out,
            self.rg(x),
            Some(Box::new(move |g, grads| {
                grads.add_with(x, || {
                    let mut r = Tensor::zeros(s);
                    for n in 0..s.n {
                        for c in 0..s.c {
                            r.plane_mut(n, c).fill(g.data()[n * s.c + c]);
                        }
                    }
                    r
                })
            })),
        )
    }

    /// Global average pool: `[n, c, h, w] -> [n, c, 1, 1]`.
    pub fn mean_spatial(&self, x: Var) -> Var {
        let p = self.shape(x).plane();
        let s = self.sum_spatial(x);
        self.affine(s, 1.0 / p as f64, 0.0)
    }

    /// Mean over everything but the batch axis: `[n, c, h, w] -> [n, 1, 1, 1]`.
    pub fn mean_per_item(&self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let m = s.c * s.plane();
        let inv = T::lit(1.0 / m as f64);
        let data = (0..s.n).map(|n| xv.item(n).iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::from_vec(Shape::new(s.n, 1, 1, 1), data).expect("shape");
        self.push(
            out,
            self.rg(x),
            Some(Box::new(move |g, grads| {
                grads.add_with(x, || {
                    let mut r = Tensor::zeros(s);
                    for n in 0..s.n {
                        r.item_mut(n).fill(g.data()[n] * inv);
                    }
                    r
                })
            })),
        )
    }
}
