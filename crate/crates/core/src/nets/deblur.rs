//! Per-scale deblurring generator and the coarse-to-fine cascade that shares
//! one parameter record across every scale.

use crate::error::{Error, Result};
use crate::imgcore::{downsample_tensor, upsample_tensor, upsample_tensor_backward};
use crate::nets::layers::{residual_clamp, residual_clamp_backward, Builder, Seq, SeqTrace};
use crate::nets::params::{set_init, Init, ParamSet, ParamSpec};
use crate::nets::Architecture;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Blurred RGB + upsampled previous estimate RGB + edge map.
pub const DEBLUR_INPUT_CHANNELS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DeblurGeneratorConfig {
    /// Channels after the input block; the encoder widens to 2× and 4× this.
    pub width: usize,
    pub res_blocks: usize,
}

impl Default for DeblurGeneratorConfig {
    fn default() -> Self {
        DeblurGeneratorConfig {
            width: 64,
            res_blocks: 6,
        }
    }
}

/// InBlock(7→w) → ConvBlock(w→2w) → ConvBlock(2w→4w) → ResBlocks(4w)
/// → DeconvBlock(4w→2w) → DeconvBlock(2w→w) → OutBlock(w→3, tanh), whose
/// output is added to the blurred input and clamped to `[-1, 1]`.
///
/// Without that global residual the network could not see absolute
/// intensities: instance norm right after the first convolution removes any
/// per-channel offset or gain of the input.
#[derive(Clone, Debug)]
pub struct DeblurGenerator {
    config: DeblurGeneratorConfig,
    stages: Vec<(&'static str, Seq)>,
    specs: Vec<ParamSpec>,
}

#[derive(Clone, Debug)]
pub struct ScaleTrace<T> {
    stages: Vec<SeqTrace<T>>,
    /// Output shape of every stage, in order.
    pub stage_shapes: Vec<(usize, usize, usize)>,
    pass: Vec<bool>,
}

impl DeblurGenerator {
    pub fn new(config: DeblurGeneratorConfig) -> Self {
        let w = config.width;
        let mut b = Builder::new();
        let mut stages = vec![
            ("in", Seq::new(b.in_block("in", DEBLUR_INPUT_CHANNELS, w))),
            ("down1", Seq::new(b.conv_block("down1", w, 2 * w))),
            ("down2", Seq::new(b.conv_block("down2", 2 * w, 4 * w))),
        ];
        let res = (0..config.res_blocks)
            .map(|i| b.res_block(&format!("res{i}"), 4 * w))
            .collect();
        stages.push(("res", Seq::new(res)));
        stages.push(("up1", Seq::new(b.deconv_block("up1", 4 * w, 2 * w))));
        stages.push(("up2", Seq::new(b.deconv_block("up2", 2 * w, w))));
        stages.push(("out", Seq::new(b.out_block("out", w, 3))));
        let mut specs = b.into_specs();
        // the residual head starts as the identity
        set_init(&mut specs, "out.", Init::Constant(0.0));
        DeblurGenerator { config, stages, specs }
    }

    pub fn config(&self) -> DeblurGeneratorConfig {
        self.config
    }

    pub fn stage_names(&self) -> Vec<&'static str> {
        self.stages.iter().map(|(n, _)| *n).collect()
    }

    /// One scale: 7-channel input to a 3-channel signed-range output of the
    /// same spatial size.
    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: Tensor<T>) -> Result<(Tensor<T>, ScaleTrace<T>)> {
        let (c, h, w) = x.shape();
        if c != DEBLUR_INPUT_CHANNELS {
            return Err(Error::Model(format!(
                "deblur generator expects {DEBLUR_INPUT_CHANNELS} input channels, got {c}"
            )));
        }
        if h % 4 != 0 || w % 4 != 0 || h < 4 || w < 4 {
            return Err(Error::Dimension(format!(
                "deblur generator input {h}x{w} must be a positive multiple of 4"
            )));
        }
        let base = x.slice_channels(0, 3);
        let mut cur = x;
        let mut stages = Vec::with_capacity(self.stages.len());
        let mut stage_shapes = Vec::with_capacity(self.stages.len());
        for (_, seq) in &self.stages {
            let (y, t) = seq.forward(p, cur)?;
            stage_shapes.push(y.shape());
            stages.push(t);
            cur = y;
        }
        let (y, pass) = residual_clamp(&base, &cur);
        Ok((
            y,
            ScaleTrace {
                stages,
                stage_shapes,
                pass,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        t: &ScaleTrace<T>,
        gy: Tensor<T>,
        mut grads: Option<&mut ParamSet<T>>,
    ) -> Tensor<T> {
        let g_out = residual_clamp_backward(&gy, &t.pass);
        let mut g = g_out.clone();
        for ((_, seq), tr) in self.stages.iter().zip(&t.stages).rev() {
            g = seq.backward(p, tr, g, grads.as_deref_mut());
        }
        for c in 0..3 {
            for (a, &b) in g.plane_mut(c).iter_mut().zip(g_out.plane(c)) {
                *a += b;
            }
        }
        g
    }
}

impl Architecture for DeblurGenerator {
    fn header(&self) -> String {
        format!(
            "deblur_generator(width={},res_blocks={})",
            self.config.width, self.config.res_blocks
        )
    }
    fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }
}

#[derive(Clone, Debug)]
pub struct MultiScaleTrace<T> {
    pub scales: Vec<ScaleTrace<T>>,
    /// Spatial size of each scale, coarse to fine.
    pub sizes: Vec<(usize, usize)>,
}

/// Coarse-to-fine cascade. `blur_levels` runs coarse→fine; `edge_full` is the
/// signed-range edge map at the finest resolution and is area-downsampled to
/// each scale. The coarsest scale receives its own blurred level as the
/// previous estimate; every finer scale receives the bilinear 2× upsampling
/// of the scale below.
pub fn multiscale_forward<T: Scalar>(
    gen: &DeblurGenerator,
    p: &ParamSet<T>,
    blur_levels: &[Tensor<T>],
    edge_full: &Tensor<T>,
) -> Result<(Vec<Tensor<T>>, MultiScaleTrace<T>)> {
    let n = blur_levels.len();
    if n == 0 {
        return Err(Error::Config("empty pyramid".into()));
    }
    let finest = blur_levels[n - 1].shape();
    if edge_full.height() != finest.1 || edge_full.width() != finest.2 || edge_full.channels() != 1 {
        return Err(Error::Shape(format!(
            "edge map {:?} does not match finest level {:?}",
            edge_full.shape(),
            finest
        )));
    }
    let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(n);
    let mut scales = Vec::with_capacity(n);
    let mut sizes = Vec::with_capacity(n);
    for (i, blurred) in blur_levels.iter().enumerate() {
        let factor = 1usize << (n - 1 - i);
        let edge = if factor == 1 {
            edge_full.clone()
        } else {
            downsample_tensor(edge_full, factor)?
        };
        let prev = match outputs.last() {
            None => blurred.clone(),
            Some(o) => upsample_tensor(o, 2),
        };
        let input = Tensor::concat_channels(&[blurred, &prev, &edge])?;
        let (y, t) = gen.forward(p, input)?;
        sizes.push((blurred.height(), blurred.width()));
        outputs.push(y);
        scales.push(t);
    }
    Ok((outputs, MultiScaleTrace { scales, sizes }))
}

/// Backpropagates per-scale output gradients (coarse→fine, same order as the
/// outputs) through the cascade, including the upsampled hand-off between
/// scales. Returns nothing: inputs are data, not parameters.
pub fn multiscale_backward<T: Scalar>(
    gen: &DeblurGenerator,
    p: &ParamSet<T>,
    trace: &MultiScaleTrace<T>,
    mut output_grads: Vec<Tensor<T>>,
    mut grads: Option<&mut ParamSet<T>>,
) {
    let n = trace.scales.len();
    assert_eq!(output_grads.len(), n, "one gradient per scale");
    for i in (0..n).rev() {
        let g = std::mem::replace(&mut output_grads[i], Tensor::zeros(0, 0, 0));
        let gin = gen.backward(p, &trace.scales[i], g, grads.as_deref_mut());
        if i > 0 {
            let g_prev = gin.slice_channels(3, 3);
            let (h, w) = trace.sizes[i - 1];
            let carried = upsample_tensor_backward(&g_prev, h, w);
            output_grads[i - 1].add_assign(&carried);
        }
    }
}
