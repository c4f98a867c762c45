//! A small differentiable-network stack: tensors, a fixed layer set with
//! hand-written backward passes, losses, Adam and a finite-difference checker.
//!
//! Networks are plain layer lists ([`NetworkSpec`]); U-Net style skips refer
//! back to an earlier layer's output by index. Activations are batched
//! `N × C × H × W`; dense layers see the flattened item.

mod gradcheck;
mod io;
mod loss;
mod ops;
mod optim;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_with, GradcheckReport};
pub use io::{read_weights, write_weights};
pub use loss::{mse_loss, weighted_bce_loss, Loss, BCE_EPS};
pub use optim::{adam_step, Adam};
pub use tensor::{Real, Tensor};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use ops::ConvGeom;
use tensor::{gemm, Mat};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    Maxpool2,
    Upsample2Nearest,
    /// Concatenate, along channels, the output of layer `source` after the
    /// current activation.
    SkipConcat {
        source: usize,
    },
    GlobalAvgPool,
    Dense {
        inp: usize,
        out: usize,
    },
    Sigmoid,
    /// `relu(x + conv(relu(conv(x))))` with two 3×3 same-padding convs.
    ResidualBlock {
        ch: usize,
    },
    /// Append two channels holding normalized pixel-center x and y in [-1, 1].
    CoordChannels,
    /// Per-channel softmax over the plane, reduced to the expected normalized
    /// `((x + 0.5) / W, (y + 0.5) / H)`; output `2C` values.
    SpatialSoftArgmax,
}

impl LayerSpec {
    pub fn conv(in_ch: usize, out_ch: usize, k: usize) -> Self {
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            k,
            stride: 1,
            pad: k / 2,
        }
    }

    /// Parameter names and shapes, layer `i`.
    fn params(&self, i: usize) -> Vec<(String, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d { in_ch, out_ch, k, .. } => vec![
                (format!("L{i:02}.w"), vec![out_ch, in_ch, k, k]),
                (format!("L{i:02}.b"), vec![out_ch]),
            ],
            LayerSpec::Dense { inp, out } => vec![
                (format!("L{i:02}.w"), vec![out, inp]),
                (format!("L{i:02}.b"), vec![out]),
            ],
            LayerSpec::ResidualBlock { ch } => vec![
                (format!("L{i:02}.w1"), vec![ch, ch, 3, 3]),
                (format!("L{i:02}.b1"), vec![ch]),
                (format!("L{i:02}.w2"), vec![ch, ch, 3, 3]),
                (format!("L{i:02}.b2"), vec![ch]),
            ],
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Item shape without the batch extent, usually `[C, H, W]`.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

fn chw(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Shape(format!("{what} needs a C×H×W input, got {shape:?}"))),
    }
}

impl NetworkSpec {
    /// Item shapes of every activation: the input, then each layer's output.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let s = &shapes[i];
            let ctx = |m: String| Error::Shape(format!("layer {i}: {m}"));
            let next = match *layer {
                LayerSpec::Conv2d {
                    in_ch,
                    out_ch,
                    k,
                    stride,
                    pad,
                } => {
                    let (c, h, w) = chw(s, "conv2d")?;
                    if c != in_ch {
                        return Err(ctx(format!("conv2d expects {in_ch} channels, got {c}")));
                    }
                    if k == 0 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k || out_ch == 0 {
                        return Err(ctx(format!("conv2d k={k} stride={stride} does not fit {h}×{w}")));
                    }
                    let (ho, wo) = ConvGeom { c, h, w, k, stride, pad }.out_hw();
                    vec![out_ch, ho, wo]
                }
                LayerSpec::Relu | LayerSpec::Sigmoid => s.clone(),
                LayerSpec::Maxpool2 => {
                    let (c, h, w) = chw(s, "maxpool2")?;
                    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
                        return Err(ctx(format!("maxpool2 needs even extents, got {h}×{w}")));
                    }
                    vec![c, h / 2, w / 2]
                }
                LayerSpec::Upsample2Nearest => {
                    let (c, h, w) = chw(s, "upsample2")?;
                    vec![c, 2 * h, 2 * w]
                }
                LayerSpec::SkipConcat { source } => {
                    if source >= i {
                        return Err(ctx(format!("skip source {source} is not an earlier layer")));
                    }
                    let (c, h, w) = chw(s, "skip_concat")?;
                    let (cs, hs, ws) = chw(&shapes[source + 1], "skip source")?;
                    if (h, w) != (hs, ws) {
                        return Err(ctx(format!("skip source is {hs}×{ws}, current {h}×{w}")));
                    }
                    vec![c + cs, h, w]
                }
                LayerSpec::GlobalAvgPool => vec![chw(s, "global_avg_pool")?.0],
                LayerSpec::Dense { inp, out } => {
                    let f: usize = s.iter().product();
                    if f != inp {
                        return Err(ctx(format!("dense expects {inp} inputs, got {f}")));
                    }
                    vec![out]
                }
                LayerSpec::ResidualBlock { ch } => {
                    let (c, _, _) = chw(s, "residual_block")?;
                    if c != ch {
                        return Err(ctx(format!("residual block expects {ch} channels, got {c}")));
                    }
                    s.clone()
                }
                LayerSpec::CoordChannels => {
                    let (c, h, w) = chw(s, "coord_channels")?;
                    vec![c + 2, h, w]
                }
                LayerSpec::SpatialSoftArgmax => vec![2 * chw(s, "spatial_soft_argmax")?.0],
            };
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().expect("input shape"))
    }

    /// Names and shapes of all parameters in layer order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers.iter().enumerate().flat_map(|(i, l)| l.params(i)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Index of each layer's first parameter tensor.
    fn param_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.layers.len());
        let mut k = 0;
        for (i, l) in self.layers.iter().enumerate() {
            off.push(k);
            k += l.params(i).len();
        }
        off
    }
}

/// Named parameters plus Adam state.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    pub names: Vec<String>,
    pub params: Vec<Tensor<T>>,
    pub adam_m: Vec<Tensor<T>>,
    pub adam_v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> Weights<T> {
    /// He-uniform weights, zero biases.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in spec.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if shape.len() == 1 {
                vec![T::zero(); n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let limit = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| T::of(rng.random_range(-limit..limit))).collect()
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        Ok(Self::from_params(names, params))
    }

    pub fn from_params(names: Vec<String>, params: Vec<Tensor<T>>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            names,
            adam_m: zeros.clone(),
            adam_v: zeros,
            params,
            step: 0,
        }
    }

    /// Check names and shapes against a spec.
    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let expect = spec.param_shapes();
        if expect.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "network has {} parameter tensors, weights {}",
                expect.len(),
                self.params.len()
            )));
        }
        for ((name, shape), (n, p)) in expect.iter().zip(self.names.iter().zip(&self.params)) {
            if name != n || shape.as_slice() != p.shape() {
                return Err(Error::Shape(format!("expected {name} {shape:?}, found {n} {:?}", p.shape())));
            }
        }
        for (m, p) in self.adam_m.iter().chain(&self.adam_v).zip(self.params.iter().cycle()) {
            if m.shape() != p.shape() {
                return Err(Error::Shape("optimizer state does not match parameters".into()));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Weights<U> {
        Weights {
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            adam_m: self.adam_m.iter().map(Tensor::cast).collect(),
            adam_v: self.adam_v.iter().map(Tensor::cast).collect(),
            step: self.step,
        }
    }
}

#[derive(Clone, Debug)]
enum Aux<T> {
    None,
    PoolIndex(Vec<u32>),
    /// Inner activation of a residual block.
    Inner(Vec<T>),
    Softmax(Vec<T>),
}

/// Activations saved by [`forward`] for [`backward`].
#[derive(Clone, Debug, Default)]
pub struct Cache<T> {
    acts: Vec<Tensor<T>>,
    aux: Vec<Aux<T>>,
}

impl<T: Real> Cache<T> {
    pub fn output(&self) -> Option<&Tensor<T>> {
        self.acts.last()
    }

    /// Piecewise-linear branch taken at every relu and pool; equal patterns
    /// mean two inputs lie in the same smooth region.
    pub(crate) fn pattern(&self, spec: &NetworkSpec) -> Vec<u32> {
        let mut out = Vec::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            match (layer, &self.aux[i]) {
                (LayerSpec::Relu, _) => out.extend(self.acts[i].data().iter().map(|&v| (v > T::zero()) as u32)),
                (LayerSpec::ResidualBlock { .. }, Aux::Inner(a1)) => {
                    out.extend(a1.iter().map(|&v| (v > T::zero()) as u32));
                    out.extend(self.acts[i + 1].data().iter().map(|&v| (v > T::zero()) as u32));
                }
                (_, Aux::PoolIndex(idx)) => out.extend_from_slice(idx),
                _ => {}
            }
        }
        out
    }
}

/// Gradients of a scalar loss.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub params: Vec<Tensor<T>>,
    pub input: Tensor<T>,
}

fn batched(n: usize, item: &[usize]) -> Vec<usize> {
    let mut s = vec![n];
    s.extend_from_slice(item);
    s
}

fn conv_geom(spec: &LayerSpec, inp: &[usize]) -> ConvGeom {
    let (c, h, w) = (inp[0], inp[1], inp[2]);
    match *spec {
        LayerSpec::Conv2d { k, stride, pad, .. } => ConvGeom { c, h, w, k, stride, pad },
        _ => ConvGeom {
            c,
            h,
            w,
            k: 3,
            stride: 1,
            pad: 1,
        },
    }
}

/// Run the network on a batch. The cache feeds [`backward`].
pub fn forward<T: Real>(spec: &NetworkSpec, weights: &Weights<T>, input: &Tensor<T>) -> Result<(Tensor<T>, Cache<T>)> {
    let shapes = spec.shapes()?;
    weights.check(spec)?;
    if input.shape().len() != spec.input.len() + 1 || input.item_shape() != spec.input.as_slice() {
        return Err(Error::Shape(format!(
            "network input is {:?} per item, got {:?}",
            spec.input,
            input.shape()
        )));
    }
    let n = input.batch();
    let offsets = spec.param_offsets();
    let mut acts = vec![input.clone()];
    let mut aux = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        let x = &acts[i];
        let (si, so) = (&shapes[i], &shapes[i + 1]);
        let mut y = Tensor::zeros(batched(n, so));
        let p = &weights.params[offsets[i]..];
        let mut a = Aux::None;
        match *layer {
            LayerSpec::Conv2d { out_ch, .. } => {
                ops::conv_forward(&conv_geom(layer, si), out_ch, n, x.data(), p[0].data(), p[1].data(), y.data_mut());
            }
            LayerSpec::Relu => {
                for (o, &v) in y.data_mut().iter_mut().zip(x.data()) {
                    *o = v.max(T::zero());
                }
            }
            LayerSpec::Sigmoid => {
                for (o, &v) in y.data_mut().iter_mut().zip(x.data()) {
                    *o = T::one() / (T::one() + (-v).exp());
                }
            }
            LayerSpec::Maxpool2 => {
                let mut idx = vec![0u32; y.len()];
                ops::maxpool_forward(n * si[0], si[1], si[2], x.data(), y.data_mut(), &mut idx);
                a = Aux::PoolIndex(idx);
            }
            LayerSpec::Upsample2Nearest => ops::upsample_forward(n * si[0], si[1], si[2], x.data(), y.data_mut()),
            LayerSpec::SkipConcat { source } => {
                let s = &acts[source + 1];
                let (lx, ls) = (x.item_len(), s.item_len());
                for b in 0..n {
                    let dst = &mut y.data_mut()[b * (lx + ls)..(b + 1) * (lx + ls)];
                    dst[..lx].copy_from_slice(x.item(b));
                    dst[lx..].copy_from_slice(s.item(b));
                }
            }
            LayerSpec::GlobalAvgPool => {
                let hw = si[1] * si[2];
                let inv = T::of(1.0 / hw as f64);
                for (o, plane) in y.data_mut().iter_mut().zip(x.data().chunks(hw)) {
                    *o = plane.iter().copied().sum::<T>() * inv;
                }
            }
            LayerSpec::Dense { inp, out } => {
                for (b, row) in y.data_mut().chunks_mut(out).enumerate() {
                    row.copy_from_slice(p[1].data());
                    gemm(Mat::n(p[0].data(), out, inp), Mat::n(x.item(b), inp, 1), T::one(), row);
                }
            }
            LayerSpec::ResidualBlock { ch } => {
                let g = conv_geom(layer, si);
                let mut a1 = vec![T::zero(); y.len()];
                ops::conv_forward(&g, ch, n, x.data(), p[0].data(), p[1].data(), &mut a1);
                a1.iter_mut().for_each(|v| *v = v.max(T::zero()));
                ops::conv_forward(&g, ch, n, &a1, p[2].data(), p[3].data(), y.data_mut());
                for (o, &v) in y.data_mut().iter_mut().zip(x.data()) {
                    *o = (*o + v).max(T::zero());
                }
                a = Aux::Inner(a1);
            }
            LayerSpec::CoordChannels => {
                let (c, h, w) = (si[0], si[1], si[2]);
                let (gx, gy) = ops::grid::<T>(h, w);
                let two = T::of(2.0);
                let lx = c * h * w;
                for b in 0..n {
                    let dst = &mut y.data_mut()[b * (lx + 2 * h * w)..(b + 1) * (lx + 2 * h * w)];
                    dst[..lx].copy_from_slice(x.item(b));
                    for k in 0..h * w {
                        dst[lx + k] = two * gx[k] - T::one();
                        dst[lx + h * w + k] = two * gy[k] - T::one();
                    }
                }
            }
            LayerSpec::SpatialSoftArgmax => {
                a = Aux::Softmax(ops::soft_argmax_forward(n * si[0], si[1], si[2], x.data(), y.data_mut()));
            }
        }
        if !y.all_finite() {
            return Err(Error::NumericalFailure(format!("non-finite activation after layer {i}")));
        }
        acts.push(y);
        aux.push(a);
    }
    let out = acts.last().expect("output").clone();
    Ok((out, Cache { acts, aux }))
}

/// Gradients of a scalar loss with respect to every parameter and the input,
/// given `grad_out = dL/d(output)`.
pub fn backward<T: Real>(
    spec: &NetworkSpec,
    weights: &Weights<T>,
    cache: &Cache<T>,
    grad_out: &Tensor<T>,
) -> Result<Gradients<T>> {
    if cache.acts.len() != spec.layers.len() + 1 || cache.aux.len() != spec.layers.len() {
        return Err(Error::State("no forward cache for this network".into()));
    }
    let shapes = spec.shapes()?;
    weights.check(spec)?;
    let out = cache.acts.last().expect("output");
    if grad_out.shape() != out.shape() {
        return Err(Error::Shape(format!(
            "output gradient {:?} does not match output {:?}",
            grad_out.shape(),
            out.shape()
        )));
    }
    let n = out.batch();
    let offsets = spec.param_offsets();
    let mut grads: Vec<Tensor<T>> = weights.params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
    let mut pending: Vec<Option<Tensor<T>>> = vec![None; spec.layers.len() + 1];
    let mut g = grad_out.clone();
    for (i, layer) in spec.layers.iter().enumerate().rev() {
        if let Some(extra) = pending[i + 1].take() {
            for (a, b) in g.data_mut().iter_mut().zip(extra.data()) {
                *a += *b;
            }
        }
        let x = &cache.acts[i];
        let y = &cache.acts[i + 1];
        let si = &shapes[i];
        let mut gx = Tensor::zeros(x.shape().to_vec());
        let o = offsets[i];
        match *layer {
            LayerSpec::Conv2d { out_ch, .. } => {
                let (gw, rest) = grads[o..].split_at_mut(1);
                ops::conv_backward(
                    &conv_geom(layer, si),
                    out_ch,
                    n,
                    x.data(),
                    weights.params[o].data(),
                    g.data(),
                    gw[0].data_mut(),
                    rest[0].data_mut(),
                    Some(gx.data_mut()),
                );
            }
            LayerSpec::Relu => {
                for ((d, &gy), &v) in gx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *d = if v > T::zero() { gy } else { T::zero() };
                }
            }
            LayerSpec::Sigmoid => {
                for ((d, &gy), &s) in gx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *d = gy * s * (T::one() - s);
                }
            }
            LayerSpec::Maxpool2 => {
                let Aux::PoolIndex(idx) = &cache.aux[i] else {
                    return Err(Error::State("pool cache missing".into()));
                };
                for (&k, &gy) in idx.iter().zip(g.data()) {
                    gx.data_mut()[k as usize] += gy;
                }
            }
            LayerSpec::Upsample2Nearest => ops::upsample_backward(n * si[0], si[1], si[2], g.data(), gx.data_mut()),
            LayerSpec::SkipConcat { source } => {
                let src = &cache.acts[source + 1];
                let (lx, ls) = (x.item_len(), src.item_len());
                let mut gs = Tensor::zeros(src.shape().to_vec());
                for b in 0..n {
                    let gb = &g.data()[b * (lx + ls)..(b + 1) * (lx + ls)];
                    gx.data_mut()[b * lx..(b + 1) * lx].copy_from_slice(&gb[..lx]);
                    gs.data_mut()[b * ls..(b + 1) * ls].copy_from_slice(&gb[lx..]);
                }
                match &mut pending[source + 1] {
                    Some(acc) => acc.data_mut().iter_mut().zip(gs.data()).for_each(|(a, b)| *a += *b),
                    slot => *slot = Some(gs),
                }
            }
            LayerSpec::GlobalAvgPool => {
                let hw = si[1] * si[2];
                let inv = T::of(1.0 / hw as f64);
                for (plane, &gy) in gx.data_mut().chunks_mut(hw).zip(g.data()) {
                    plane.fill(gy * inv);
                }
            }
            LayerSpec::Dense { inp, out } => {
                let (gw, rest) = grads[o..].split_at_mut(1);
                let w = weights.params[o].data();
                for b in 0..n {
                    let gy = &g.data()[b * out..(b + 1) * out];
                    gemm(Mat::n(gy, out, 1), Mat::n(x.item(b), 1, inp), T::one(), gw[0].data_mut());
                    for (gb, &v) in rest[0].data_mut().iter_mut().zip(gy) {
                        *gb += v;
                    }
                    gemm(Mat::t(w, out, inp), Mat::n(gy, out, 1), T::zero(), &mut gx.data_mut()[b * inp..(b + 1) * inp]);
                }
            }
            LayerSpec::ResidualBlock { ch } => {
                let Aux::Inner(a1) = &cache.aux[i] else {
                    return Err(Error::State("residual cache missing".into()));
                };
                let geom = conv_geom(layer, si);
                let gs: Vec<T> = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gy, &v)| if v > T::zero() { gy } else { T::zero() })
                    .collect();
                let mut ga1 = vec![T::zero(); a1.len()];
                {
                    let (_, tail) = grads[o..].split_at_mut(2);
                    let (gw2, gb2) = tail.split_at_mut(1);
                    ops::conv_backward(
                        &geom,
                        ch,
                        n,
                        a1,
                        weights.params[o + 2].data(),
                        &gs,
                        gw2[0].data_mut(),
                        gb2[0].data_mut(),
                        Some(&mut ga1),
                    );
                }
                for (d, &v) in ga1.iter_mut().zip(a1) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                let (gw1, rest) = grads[o..].split_at_mut(1);
                ops::conv_backward(
                    &geom,
                    ch,
                    n,
                    x.data(),
                    weights.params[o].data(),
                    &ga1,
                    gw1[0].data_mut(),
                    rest[0].data_mut(),
                    Some(gx.data_mut()),
                );
                for (d, &v) in gx.data_mut().iter_mut().zip(&gs) {
                    *d += v;
                }
            }
            LayerSpec::CoordChannels => {
                let lx = x.item_len();
                let ly = y.item_len();
                for b in 0..n {
                    gx.data_mut()[b * lx..(b + 1) * lx].copy_from_slice(&g.data()[b * ly..b * ly + lx]);
                }
            }
            LayerSpec::SpatialSoftArgmax => {
                let Aux::Softmax(prob) = &cache.aux[i] else {
                    return Err(Error::State("softmax cache missing".into()));
                };
                ops::soft_argmax_backward(n * si[0], si[1], si[2], prob, g.data(), gx.data_mut());
            }
        }
        g = gx;
    }
    Ok(Gradients { params: grads, input: g })
}
