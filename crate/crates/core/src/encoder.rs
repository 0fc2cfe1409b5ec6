//! Trainable feature extractor with hand-written backprop.
//!
//! Activations are per-item and row-major: spatial tensors are HWC, and
//! `Flatten` is a no-op on the data. Batches are processed in fixed-size
//! chunks so that parallel gradient reduction is bit-reproducible for any
//! thread count.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Items per gradient-accumulation chunk. Independent of the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Spatial { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl ActShape {
    pub fn len(self) -> usize {
        match self {
            ActShape::Spatial { h, w, c } => h * w * c,
            ActShape::Flat(d) => d,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// Same-padded 3x3 convolution. Weights are `[out][3][3][in]`.
    Conv3x3 {
        in_ch: usize,
        out_ch: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    Relu,
    MaxPool2x2,
    Flatten,
    /// `y = x W + b` with `W` stored `[in][out]`.
    Affine {
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
}

impl Layer {
    pub fn conv3x3(in_ch: usize, out_ch: usize, rng: &mut Rng) -> Self {
        let fan_in = 9 * in_ch;
        Layer::Conv3x3 {
            in_ch,
            out_ch,
            weights: he_uniform(out_ch * fan_in, fan_in, rng),
            bias: vec![0.0; out_ch],
        }
    }

    pub fn affine(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Layer::Affine {
            in_dim,
            out_dim,
            weights: he_uniform(in_dim * out_dim, in_dim, rng),
            bias: vec![0.0; out_dim],
        }
    }

    fn output_shape(&self, input: ActShape) -> Result<ActShape> {
        let mismatch = || Error::Config(format!("layer {self} cannot accept input {input:?}"));
        match (self, input) {
            (Layer::Conv3x3 { in_ch, out_ch, .. }, ActShape::Spatial { h, w, c }) if c == *in_ch => {
                Ok(ActShape::Spatial { h, w, c: *out_ch })
            }
            (Layer::Relu, s) => Ok(s),
            (Layer::MaxPool2x2, ActShape::Spatial { h, w, c }) if h >= 2 && w >= 2 => {
                Ok(ActShape::Spatial { h: h / 2, w: w / 2, c })
            }
            (Layer::Flatten, s) => Ok(ActShape::Flat(s.len())),
            (Layer::Affine { in_dim, out_dim, .. }, ActShape::Flat(d)) if d == *in_dim => {
                Ok(ActShape::Flat(*out_dim))
            }
            _ => Err(mismatch()),
        }
    }

    fn params(&self) -> Vec<&[f64]> {
        match self {
            Layer::Conv3x3 { weights, bias, .. } | Layer::Affine { weights, bias, .. } => {
                vec![weights, bias]
            }
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Conv3x3 { weights, bias, .. } | Layer::Affine { weights, bias, .. } => {
                vec![weights, bias]
            }
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Conv3x3 { in_ch, out_ch, .. } => write!(f, "conv3x3:{in_ch}:{out_ch}"),
            Layer::Relu => f.write_str("relu"),
            Layer::MaxPool2x2 => f.write_str("maxpool2"),
            Layer::Flatten => f.write_str("flatten"),
            Layer::Affine { in_dim, out_dim, .. } => write!(f, "affine:{in_dim}:{out_dim}"),
        }
    }
}

fn he_uniform(n: usize, fan_in: usize, rng: &mut Rng) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.uniform(-bound, bound)).collect()
}

/// Feature extractor: either a layer stack or an identity passthrough over
/// precomputed descriptors.
#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    Network {
        input: ActShape,
        layers: Vec<Layer>,
        output_dim: usize,
    },
    Passthrough { dim: usize },
}

/// Per-layer values cached by the forward pass.
#[derive(Debug)]
enum Cache {
    Conv { input: Vec<f64> },
    Relu { mask: Vec<bool> },
    MaxPool { argmax: Vec<u32>, in_len: usize },
    Flatten,
    Affine { input: Vec<f64> },
}

/// Forward activations needed by [`Encoder::backward`]. Consumed by it, so a
/// tape cannot be replayed.
#[derive(Debug)]
pub struct EncoderTape {
    items: Vec<Vec<Cache>>,
    batch: usize,
}

/// Gradients for every trainable array, in [`Encoder::params`] order, plus
/// the gradient with respect to the encoder input.
#[derive(Clone, Debug)]
pub struct EncoderGrads {
    pub params: Vec<Vec<f64>>,
    pub input: Tensor<f64>,
}

impl Encoder {
    pub fn network(input: ActShape, layers: Vec<Layer>) -> Result<Self> {
        let mut shape = input;
        for layer in &layers {
            shape = layer.output_shape(shape)?;
        }
        let output_dim = match shape {
            ActShape::Flat(d) => d,
            s => {
                return Err(Error::Config(format!(
                    "encoder must end in a flat descriptor, ends in {s:?}"
                )))
            }
        };
        Ok(Encoder::Network {
            input,
            layers,
            output_dim,
        })
    }

    /// Conv(3→32)+ReLU+Pool, Conv(32→64)+ReLU+Pool, Flatten, Affine(→D).
    pub fn small_cnn(height: usize, width: usize, output_dim: usize, rng: &mut Rng) -> Result<Self> {
        let flat = 64 * (height / 4) * (width / 4);
        Self::network(
            ActShape::Spatial { h: height, w: width, c: 3 },
            vec![
                Layer::conv3x3(3, 32, rng),
                Layer::Relu,
                Layer::MaxPool2x2,
                Layer::conv3x3(32, 64, rng),
                Layer::Relu,
                Layer::MaxPool2x2,
                Layer::Flatten,
                Layer::affine(flat, output_dim, rng),
            ],
        )
    }

    pub fn passthrough(dim: usize) -> Self {
        Encoder::Passthrough { dim }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Encoder::Network { output_dim, .. } => *output_dim,
            Encoder::Passthrough { dim } => *dim,
        }
    }

    pub fn input_shape(&self) -> ActShape {
        match self {
            Encoder::Network { input, .. } => *input,
            Encoder::Passthrough { dim } => ActShape::Flat(*dim),
        }
    }

    pub fn is_passthrough(&self) -> bool {
        matches!(self, Encoder::Passthrough { .. })
    }

    pub fn layers(&self) -> &[Layer] {
        match self {
            Encoder::Network { layers, .. } => layers,
            Encoder::Passthrough { .. } => &[],
        }
    }

    /// Trainable arrays in a fixed order (weights then bias, per layer).
    pub fn params(&self) -> Vec<&[f64]> {
        self.layers().iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Encoder::Network { layers, .. } => layers.iter_mut().flat_map(Layer::params_mut).collect(),
            Encoder::Passthrough { .. } => Vec::new(),
        }
    }

    /// Architecture description, e.g. `input=32x32x3;conv3x3:3:32;relu;...`.
    pub fn architecture(&self) -> String {
        match self {
            Encoder::Passthrough { dim } => format!("passthrough:{dim}"),
            Encoder::Network { input, layers, .. } => {
                let mut s = match input {
                    ActShape::Spatial { h, w, c } => format!("input={h}x{w}x{c}"),
                    ActShape::Flat(d) => format!("input={d}"),
                };
                for l in layers {
                    s.push(';');
                    s.push_str(&l.to_string());
                }
                s
            }
        }
    }

    /// Rebuilds a zero-initialised encoder from [`Encoder::architecture`].
    pub fn from_architecture(spec: &str) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("bad encoder architecture `{spec}`: {what}"));
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(s));
        if let Some(d) = spec.strip_prefix("passthrough:") {
            return Ok(Encoder::Passthrough { dim: num(d)? });
        }
        let mut parts = spec.split(';');
        let input = parts
            .next()
            .and_then(|p| p.strip_prefix("input="))
            .ok_or_else(|| bad("missing input"))?;
        let dims: Vec<usize> = input.split('x').map(num).collect::<Result<_>>()?;
        let input = match dims.as_slice() {
            [d] => ActShape::Flat(*d),
            [h, w, c] => ActShape::Spatial { h: *h, w: *w, c: *c },
            _ => return Err(bad(input)),
        };
        let mut layers = Vec::new();
        for p in parts {
            let fields: Vec<&str> = p.split(':').collect();
            let layer = match fields.as_slice() {
                ["conv3x3", i, o] => {
                    let (in_ch, out_ch) = (num(i)?, num(o)?);
                    Layer::Conv3x3 {
                        in_ch,
                        out_ch,
                        weights: vec![0.0; out_ch * 9 * in_ch],
                        bias: vec![0.0; out_ch],
                    }
                }
                ["affine", i, o] => {
                    let (in_dim, out_dim) = (num(i)?, num(o)?);
                    Layer::Affine {
                        in_dim,
                        out_dim,
                        weights: vec![0.0; in_dim * out_dim],
                        bias: vec![0.0; out_dim],
                    }
                }
                ["relu"] => Layer::Relu,
                ["maxpool2"] => Layer::MaxPool2x2,
                ["flatten"] => Layer::Flatten,
                _ => return Err(bad(p)),
            };
            layers.push(layer);
        }
        Self::network(input, layers)
    }

    fn check_batch(&self, batch: &Tensor<f64>) -> Result<usize> {
        let expected = match self.input_shape() {
            ActShape::Spatial { h, w, c } => vec![h, w, c],
            ActShape::Flat(d) => vec![d],
        };
        if batch.rank() != expected.len() + 1 || batch.shape()[1..] != expected[..] {
            return Err(Error::Dimension(format!(
                "encoder expects [B, {expected:?}], got {:?}",
                batch.shape()
            )));
        }
        Ok(batch.rows())
    }

    /// Descriptors `[B, D]` plus the tape for [`Encoder::backward`].
    pub fn forward(&self, batch: &Tensor<f64>) -> Result<(Tensor<f64>, EncoderTape)> {
        let b = self.check_batch(batch)?;
        let (input, layers, d) = match self {
            Encoder::Passthrough { dim } => {
                let out = batch.clone().reshape(vec![b, *dim])?;
                return Ok((out, EncoderTape { items: Vec::new(), batch: b }));
            }
            Encoder::Network { input, layers, output_dim } => (*input, layers, *output_dim),
        };
        let results: Vec<(Vec<f64>, Vec<Cache>)> = (0..b)
            .into_par_iter()
            .map(|n| forward_item(input, layers, batch.row(n).to_vec()))
            .collect();
        let mut data = Vec::with_capacity(b * d);
        let mut items = Vec::with_capacity(b);
        for (out, cache) in results {
            data.extend_from_slice(&out);
            items.push(cache);
        }
        let out = Tensor::new_unchecked_values(vec![b, d], data)?;
        Ok((out, EncoderTape { items, batch: b }))
    }

    /// Inference-only forward pass.
    pub fn encode(&self, batch: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(self.forward(batch)?.0)
    }

    /// Gradients of a scalar loss given `∂L/∂descriptors`.
    pub fn backward(&self, tape: EncoderTape, grad: &Tensor<f64>) -> Result<EncoderGrads> {
        let d = self.output_dim();
        if grad.shape() != [tape.batch, d] {
            return Err(Error::Dimension(format!(
                "descriptor gradient must be [{}, {d}], got {:?}",
                tape.batch,
                grad.shape()
            )));
        }
        let (input, layers) = match self {
            Encoder::Passthrough { .. } => {
                return Ok(EncoderGrads {
                    params: Vec::new(),
                    input: grad.clone(),
                })
            }
            Encoder::Network { input, layers, .. } => (*input, layers),
        };
        let shapes = layer_input_shapes(input, layers);
        let zero_params: Vec<Vec<f64>> = self.params().iter().map(|p| vec![0.0; p.len()]).collect();

        let items: Vec<(usize, Vec<Cache>)> = tape.items.into_iter().enumerate().collect();
        let chunks: Vec<(Vec<Vec<f64>>, Vec<(usize, Vec<f64>)>)> = items
            .into_par_iter()
            .chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut acc = zero_params.clone();
                let mut input_grads = Vec::with_capacity(chunk.len());
                for (n, caches) in chunk {
                    let gi = backward_item(layers, &shapes, caches, grad.row(n).to_vec(), &mut acc);
                    input_grads.push((n, gi));
                }
                (acc, input_grads)
            })
            .collect();

        let mut params = zero_params;
        let in_len = input.len();
        let mut input_data = vec![0.0; tape.batch * in_len];
        for (acc, igs) in chunks {
            for (p, a) in params.iter_mut().zip(acc) {
                p.iter_mut().zip(a).for_each(|(x, y)| *x += y);
            }
            for (n, g) in igs {
                input_data[n * in_len..(n + 1) * in_len].copy_from_slice(&g);
            }
        }
        let mut in_shape = vec![tape.batch];
        match input {
            ActShape::Spatial { h, w, c } => in_shape.extend([h, w, c]),
            ActShape::Flat(d) => in_shape.push(d),
        }
        Ok(EncoderGrads {
            params,
            input: Tensor::new_unchecked_values(in_shape, input_data)?,
        })
    }
}

fn layer_input_shapes(input: ActShape, layers: &[Layer]) -> Vec<ActShape> {
    let mut shapes = Vec::with_capacity(layers.len());
    let mut s = input;
    for l in layers {
        shapes.push(s);
        s = l.output_shape(s).expect("validated at construction");
    }
    shapes
}

fn forward_item(input: ActShape, layers: &[Layer], mut x: Vec<f64>) -> (Vec<f64>, Vec<Cache>) {
    let mut shape = input;
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let out_shape = layer.output_shape(shape).expect("validated at construction");
        let (y, cache) = match layer {
            Layer::Conv3x3 { in_ch, out_ch, weights, bias } => {
                let ActShape::Spatial { h, w, .. } = shape else { unreachable!() };
                let y = conv_forward(&x, h, w, *in_ch, *out_ch, weights, bias);
                (y, Cache::Conv { input: x })
            }
            Layer::Relu => {
                let mask: Vec<bool> = x.iter().map(|&v| v > 0.0).collect();
                let y = x.iter().map(|&v| v.max(0.0)).collect();
                (y, Cache::Relu { mask })
            }
            Layer::MaxPool2x2 => {
                let ActShape::Spatial { h, w, c } = shape else { unreachable!() };
                let (y, argmax) = maxpool_forward(&x, h, w, c);
                (y, Cache::MaxPool { argmax, in_len: x.len() })
            }
            Layer::Flatten => (x, Cache::Flatten),
            Layer::Affine { in_dim, out_dim, weights, bias } => {
                let mut y = bias.clone();
                for i in 0..*in_dim {
                    let xi = x[i];
                    if xi != 0.0 {
                        let row = &weights[i * out_dim..(i + 1) * out_dim];
                        y.iter_mut().zip(row).for_each(|(a, w)| *a += xi * w);
                    }
                }
                (y, Cache::Affine { input: x })
            }
        };
        caches.push(cache);
        x = y;
        shape = out_shape;
    }
    (x, caches)
}

/// Zero-padded 3x3 patch at `(y, x)`, laid out `[3][3][in]`.
fn gather_patch(input: &[f64], h: usize, w: usize, c: usize, y: usize, x: usize, patch: &mut [f64]) {
    for dy in 0..3 {
        for dx in 0..3 {
            let dst = &mut patch[(dy * 3 + dx) * c..(dy * 3 + dx + 1) * c];
            let (sy, sx) = (y as isize + dy as isize - 1, x as isize + dx as isize - 1);
            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                dst.fill(0.0);
            } else {
                let o = (sy as usize * w + sx as usize) * c;
                dst.copy_from_slice(&input[o..o + c]);
            }
        }
    }
}

fn conv_forward(input: &[f64], h: usize, w: usize, in_ch: usize, out_ch: usize, weights: &[f64], bias: &[f64]) -> Vec<f64> {
    let k = 9 * in_ch;
    let mut patch = vec![0.0; k];
    let mut out = vec![0.0; h * w * out_ch];
    for y in 0..h {
        for x in 0..w {
            gather_patch(input, h, w, in_ch, y, x, &mut patch);
            let dst = &mut out[(y * w + x) * out_ch..(y * w + x + 1) * out_ch];
            for (o, d) in dst.iter_mut().enumerate() {
                let wr = &weights[o * k..(o + 1) * k];
                *d = bias[o] + wr.iter().zip(&patch).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    out
}

fn maxpool_forward(input: &[f64], h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut argmax = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let mut best = usize::MAX;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = ((2 * y + dy) * w + 2 * x + dx) * c + ch;
                    if best == usize::MAX || input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                argmax.push(best as u32);
            }
        }
    }
    (out, argmax)
}

fn backward_item(
    layers: &[Layer],
    shapes: &[ActShape],
    caches: Vec<Cache>,
    mut g: Vec<f64>,
    acc: &mut [Vec<f64>],
) -> Vec<f64> {
    // Index of each layer's first trainable array within `acc`.
    let mut offsets = Vec::with_capacity(layers.len());
    let mut next = 0;
    for l in layers {
        offsets.push(next);
        next += l.params().len();
    }
    for (li, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
        g = match (layer, cache) {
            (Layer::Conv3x3 { in_ch, out_ch, weights, .. }, Cache::Conv { input }) => {
                let ActShape::Spatial { h, w, .. } = shapes[li] else { unreachable!() };
                let (gw, rest) = acc[offsets[li]..].split_first_mut().expect("weights");
                let gb = &mut rest[0];
                conv_backward(&input, h, w, *in_ch, *out_ch, weights, &g, gw, gb)
            }
            (Layer::Relu, Cache::Relu { mask }) => {
                g.iter().zip(&mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect()
            }
            (Layer::MaxPool2x2, Cache::MaxPool { argmax, in_len }) => {
                let mut gi = vec![0.0; in_len];
                for (v, &i) in g.iter().zip(&argmax) {
                    gi[i as usize] += v;
                }
                gi
            }
            (Layer::Flatten, Cache::Flatten) => g,
            (Layer::Affine { in_dim, out_dim, weights, .. }, Cache::Affine { input }) => {
                let (gw, rest) = acc[offsets[li]..].split_first_mut().expect("weights");
                rest[0].iter_mut().zip(&g).for_each(|(b, v)| *b += v);
                let mut gi = vec![0.0; *in_dim];
                for i in 0..*in_dim {
                    let row = &weights[i * out_dim..(i + 1) * out_dim];
                    gi[i] = row.iter().zip(&g).map(|(a, b)| a * b).sum();
                    let xi = input[i];
                    if xi != 0.0 {
                        let grow = &mut gw[i * out_dim..(i + 1) * out_dim];
                        grow.iter_mut().zip(&g).for_each(|(a, b)| *a += xi * b);
                    }
                }
                gi
            }
            _ => unreachable!("cache does not match layer"),
        };
    }
    g
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    h: usize,
    w: usize,
    in_ch: usize,
    out_ch: usize,
    weights: &[f64],
    g: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let k = 9 * in_ch;
    let mut patch = vec![0.0; k];
    let mut gpatch = vec![0.0; k];
    let mut gi = vec![0.0; h * w * in_ch];
    for y in 0..h {
        for x in 0..w {
            gather_patch(input, h, w, in_ch, y, x, &mut patch);
            gpatch.fill(0.0);
            let go = &g[(y * w + x) * out_ch..(y * w + x + 1) * out_ch];
            for (o, &v) in go.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                gb[o] += v;
                let gwr = &mut gw[o * k..(o + 1) * k];
                gwr.iter_mut().zip(&patch).for_each(|(a, p)| *a += v * p);
                let wr = &weights[o * k..(o + 1) * k];
                gpatch.iter_mut().zip(wr).for_each(|(a, wv)| *a += v * wv);
            }
            for dy in 0..3 {
                for dx in 0..3 {
                    let (sy, sx) = (y as isize + dy as isize - 1, x as isize + dx as isize - 1);
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    let o = (sy as usize * w + sx as usize) * in_ch;
                    let src = &gpatch[(dy * 3 + dx) * in_ch..(dy * 3 + dx + 1) * in_ch];
                    gi[o..o + in_ch].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
    gi
}
