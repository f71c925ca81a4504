//! Layer graph: sequential stacks of convolutions, normalizations,
//! activations and residual blocks, with explicit forward traces and
//! reverse-mode backward passes.

use crate::error::{Error, Result};
use crate::nets::ops::{self, Activation, ConvGeom, PadMode, Padding};
use crate::nets::params::{Init, ParamId, ParamRegistry, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: Padding,
}

impl Conv2d {
    fn geom(&self, x: (usize, usize, usize)) -> Result<ConvGeom> {
        let (c, h, w) = x;
        if c != self.in_c {
            return Err(Error::Model(format!(
                "convolution expects {} input channels, got {c}",
                self.in_c
            )));
        }
        let g = ConvGeom {
            in_c: c,
            in_h: h,
            in_w: w,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        };
        if !g.valid() {
            return Err(Error::Dimension(format!(
                "{h}x{w} input is too small for a {k}x{k} convolution",
                k = self.k
            )));
        }
        Ok(g)
    }
}

#[derive(Clone, Debug)]
pub struct Deconv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Deconv2d {
    fn geom(&self, x: (usize, usize, usize)) -> Result<ConvGeom> {
        let (c, h, w) = x;
        if c != self.in_c {
            return Err(Error::Model(format!(
                "transposed convolution expects {} input channels, got {c}",
                self.in_c
            )));
        }
        ops::deconv_geom(self.out_c, h, w, self.k, self.stride, self.pad)
            .ok_or_else(|| Error::Dimension(format!("invalid transposed convolution input {h}x{w}")))
    }
}

#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv2d),
    Deconv(Deconv2d),
    Norm(InstanceNorm),
    Act(Activation),
    MaxPool2,
    /// `y = x + body(x)`
    Residual(Seq),
}

#[derive(Clone, Debug, Default)]
pub struct Seq {
    pub layers: Vec<Layer>,
}

/// Values retained by a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub enum LayerTrace<T> {
    Input(Tensor<T>),
    Nested(SeqTrace<T>),
}

#[derive(Clone, Debug, Default)]
pub struct SeqTrace<T> {
    pub traces: Vec<LayerTrace<T>>,
}

impl<T> SeqTrace<T> {
    /// Shapes of the inputs seen by each layer, in order.
    pub fn input_shapes(&self) -> Vec<(usize, usize, usize)>
    where
        T: Scalar,
    {
        self.traces
            .iter()
            .filter_map(|t| match t {
                LayerTrace::Input(x) => Some(x.shape()),
                LayerTrace::Nested(_) => None,
            })
            .collect()
    }
}

impl Layer {
    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: Tensor<T>) -> Result<(Tensor<T>, LayerTrace<T>)> {
        let y = match self {
            Layer::Conv(c) => {
                let g = c.geom(x.shape())?;
                ops::conv2d_forward(&x, p.get(c.weight), c.bias.map(|b| p.get(b)), c.out_c, &g)
            }
            Layer::Deconv(d) => {
                let g = d.geom(x.shape())?;
                ops::deconv2d_forward(&x, p.get(d.weight), d.bias.map(|b| p.get(b)), &g)
            }
            Layer::Norm(n) => ops::instance_norm_forward(&x, p.get(n.gamma), p.get(n.beta)),
            Layer::Act(a) => a.forward(&x),
            Layer::MaxPool2 => ops::maxpool2_forward(&x),
            Layer::Residual(body) => {
                let (mut y, trace) = body.forward(p, x.clone())?;
                y.ensure_same_shape(&x, "residual branch")?;
                y.add_assign(&x);
                return Ok((y, LayerTrace::Nested(trace)));
            }
        };
        Ok((y, LayerTrace::Input(x)))
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        trace: &LayerTrace<T>,
        gy: Tensor<T>,
        mut grads: Option<&mut ParamSet<T>>,
    ) -> Tensor<T> {
        let x = match (self, trace) {
            (Layer::Residual(body), LayerTrace::Nested(t)) => {
                let mut gx = body.backward(p, t, gy.clone(), grads);
                gx.add_assign(&gy);
                return gx;
            }
            (_, LayerTrace::Input(x)) => x,
            _ => unreachable!("trace does not match layer"),
        };
        match self {
            Layer::Conv(c) => {
                let g = c.geom(x.shape()).expect("validated in forward");
                let (gw, gb) = split_grads(&mut grads, c.weight, c.bias);
                ops::conv2d_backward(x, p.get(c.weight), c.out_c, &g, &gy, gw, gb)
            }
            Layer::Deconv(d) => {
                let g = d.geom(x.shape()).expect("validated in forward");
                let (gw, gb) = split_grads(&mut grads, d.weight, d.bias);
                ops::deconv2d_backward(x, p.get(d.weight), &g, &gy, gw, gb)
            }
            Layer::Norm(n) => {
                let (gg, gb) = split_grads(&mut grads, n.gamma, Some(n.beta));
                ops::instance_norm_backward(x, p.get(n.gamma), &gy, gg, gb)
            }
            Layer::Act(a) => a.backward(x, &gy),
            Layer::MaxPool2 => ops::maxpool2_backward(x, &gy),
            Layer::Residual(_) => unreachable!(),
        }
    }
}

/// Borrows two distinct gradient buffers from one set.
/// Global residual head of the generators: `clamp(base + r, −1, 1)`.
/// Returns the output and, per element, whether the clamp was inactive.
pub(crate) fn residual_clamp<T: Scalar>(base: &Tensor<T>, r: &Tensor<T>) -> (Tensor<T>, Vec<bool>) {
    let (lo, hi) = (-T::one(), T::one());
    let mut pass = Vec::with_capacity(r.len());
    let mut y = r.clone();
    for (v, &b) in y.data_mut().iter_mut().zip(base.data()) {
        let s = b + *v;
        let inside = s > lo && s < hi;
        pass.push(inside);
        *v = if inside { s } else if s >= hi { hi } else { lo };
    }
    (y, pass)
}

/// Gradient through [`residual_clamp`]; identical for `base` and `r`.
pub(crate) fn residual_clamp_backward<T: Scalar>(gy: &Tensor<T>, pass: &[bool]) -> Tensor<T> {
    let mut g = gy.clone();
    for (v, &p) in g.data_mut().iter_mut().zip(pass) {
        if !p {
            *v = T::zero();
        }
    }
    g
}

fn split_grads<'a, T: Scalar>(
    grads: &'a mut Option<&mut ParamSet<T>>,
    a: ParamId,
    b: Option<ParamId>,
) -> (Option<&'a mut [T]>, Option<&'a mut [T]>) {
    let Some(g) = grads.as_deref_mut() else {
        return (None, None);
    };
    let params = g.params_mut();
    match b {
        None => (Some(params[a.0].data.as_mut_slice()), None),
        Some(b) => {
            assert_ne!(a, b);
            let (lo, hi, swapped) = if a.0 < b.0 { (a.0, b.0, false) } else { (b.0, a.0, true) };
            let (left, right) = params.split_at_mut(hi);
            let first = left[lo].data.as_mut_slice();
            let second = right[0].data.as_mut_slice();
            if swapped {
                (Some(second), Some(first))
            } else {
                (Some(first), Some(second))
            }
        }
    }
}

impl Seq {
    pub fn new(layers: Vec<Layer>) -> Self {
        Seq { layers }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: Tensor<T>) -> Result<(Tensor<T>, SeqTrace<T>)> {
        let mut cur = x;
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, t) = layer.forward(p, cur)?;
            traces.push(t);
            cur = y;
        }
        Ok((cur, SeqTrace { traces }))
    }

    /// Forward pass that keeps no trace.
    pub fn infer<T: Scalar>(&self, p: &ParamSet<T>, x: Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x;
        for layer in &self.layers {
            cur = layer.forward(p, cur)?.0;
        }
        Ok(cur)
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        trace: &SeqTrace<T>,
        gy: Tensor<T>,
        mut grads: Option<&mut ParamSet<T>>,
    ) -> Tensor<T> {
        let mut g = gy;
        for (layer, t) in self.layers.iter().zip(&trace.traces).rev() {
            g = layer.backward(p, t, g, grads.as_deref_mut());
        }
        g
    }
}

/// Declares layers and their parameters under hierarchical names.
#[derive(Debug, Default)]
pub struct Builder {
    registry: ParamRegistry,
}

impl Builder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_specs(self) -> Vec<crate::nets::params::ParamSpec> {
        self.registry.into_specs()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(&mut self, name: &str, in_c: usize, out_c: usize, k: usize, stride: usize, pad: Padding) -> Layer {
        let bound = 1.0 / ((in_c * k * k) as f64).sqrt();
        let weight = self.registry.add(format!("{name}.weight"), vec![out_c, in_c, k, k], Init::Uniform(bound));
        let bias = Some(self.registry.add(format!("{name}.bias"), vec![out_c], Init::Uniform(bound)));
        Layer::Conv(Conv2d {
            weight,
            bias,
            in_c,
            out_c,
            k,
            stride,
            pad,
        })
    }

    pub fn deconv(&mut self, name: &str, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Layer {
        let bound = 1.0 / ((out_c * k * k) as f64).sqrt();
        let weight = self.registry.add(format!("{name}.weight"), vec![in_c, out_c, k, k], Init::Uniform(bound));
        let bias = Some(self.registry.add(format!("{name}.bias"), vec![out_c], Init::Uniform(bound)));
        Layer::Deconv(Deconv2d {
            weight,
            bias,
            in_c,
            out_c,
            k,
            stride,
            pad,
        })
    }

    pub fn norm(&mut self, name: &str, c: usize) -> Layer {
        let gamma = self.registry.add(format!("{name}.gamma"), vec![c], Init::Constant(1.0));
        let beta = self.registry.add(format!("{name}.beta"), vec![c], Init::Constant(0.0));
        Layer::Norm(InstanceNorm { gamma, beta })
    }

    /// conv3×3 → IN → ReLU → conv3×3 → IN, plus identity skip.
    pub fn res_block(&mut self, name: &str, c: usize) -> Layer {
        let pad = Padding::uniform(1, PadMode::Reflect);
        Layer::Residual(Seq::new(vec![
            self.conv(&format!("{name}.conv1"), c, c, 3, 1, pad),
            self.norm(&format!("{name}.norm1"), c),
            Layer::Act(Activation::Relu),
            self.conv(&format!("{name}.conv2"), c, c, 3, 1, pad),
            self.norm(&format!("{name}.norm2"), c),
        ]))
    }

    /// 5×5 stride-2 convolution → IN → ReLU; halves the spatial size.
    pub fn conv_block(&mut self, name: &str, in_c: usize, out_c: usize) -> Vec<Layer> {
        vec![
            self.conv(&format!("{name}.conv"), in_c, out_c, 5, 2, Padding::uniform(2, PadMode::Zero)),
            self.norm(&format!("{name}.norm"), out_c),
            Layer::Act(Activation::Relu),
        ]
    }

    /// 4×4 stride-2 transposed convolution (padding 1) → IN → ReLU; doubles
    /// the spatial size exactly.
    pub fn deconv_block(&mut self, name: &str, in_c: usize, out_c: usize) -> Vec<Layer> {
        vec![
            self.deconv(&format!("{name}.deconv"), in_c, out_c, 4, 2, 1),
            self.norm(&format!("{name}.norm"), out_c),
            Layer::Act(Activation::Relu),
        ]
    }

    /// 7×7 reflect-padded convolution → IN → ReLU.
    pub fn in_block(&mut self, name: &str, in_c: usize, out_c: usize) -> Vec<Layer> {
        vec![
            self.conv(&format!("{name}.conv"), in_c, out_c, 7, 1, Padding::uniform(3, PadMode::Reflect)),
            self.norm(&format!("{name}.norm"), out_c),
            Layer::Act(Activation::Relu),
        ]
    }

    /// 7×7 reflect-padded convolution → tanh.
    pub fn out_block(&mut self, name: &str, in_c: usize, out_c: usize) -> Vec<Layer> {
        vec![
            self.conv(&format!("{name}.conv"), in_c, out_c, 7, 1, Padding::uniform(3, PadMode::Reflect)),
            Layer::Act(Activation::Tanh),
        ]
    }
}
