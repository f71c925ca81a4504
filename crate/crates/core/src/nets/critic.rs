//! Convolutional patch critic (Wasserstein critic, no output nonlinearity).

use crate::error::{Error, Result};
use crate::nets::layers::{Builder, Layer, Seq, SeqTrace};
use crate::nets::ops::{Activation, PadMode, Padding};
use crate::nets::params::{ParamSet, ParamSpec};
use crate::nets::Architecture;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CriticConfig {
    pub in_channels: usize,
    pub width: usize,
    /// Number of stride-2 convolutions; 3 gives a 70×70 receptive field.
    pub n_layers: usize,
}

impl CriticConfig {
    pub fn image(width: usize, n_layers: usize) -> Self {
        CriticConfig {
            in_channels: 3,
            width,
            n_layers,
        }
    }
    pub fn edge(width: usize, n_layers: usize) -> Self {
        CriticConfig {
            in_channels: 1,
            width,
            n_layers,
        }
    }
}

/// Stack of 4×4 convolutions: `n_layers` stride-2 stages (no normalization
/// on the first), one stride-1 stage, then a stride-1 projection to a single
/// score channel. Stride-1 stages pad asymmetrically so an `H×W` input gives
/// an `H/2^n × W/2^n` score map exactly.
#[derive(Clone, Debug)]
pub struct PatchCritic {
    config: CriticConfig,
    body: Seq,
    specs: Vec<ParamSpec>,
}

/// Patch scores and their mean (the scalar used as `D(x)`).
#[derive(Clone, Debug, PartialEq)]
pub struct CriticOutput {
    pub map: Tensor<f32>,
    pub mean: f64,
}

impl PatchCritic {
    pub fn new(config: CriticConfig) -> Self {
        let CriticConfig {
            in_channels,
            width,
            n_layers,
        } = config;
        assert!(n_layers >= 1, "critic needs at least one stride-2 layer");
        let down = Padding::uniform(1, PadMode::Zero);
        let same = Padding::same_even(4, PadMode::Zero);
        let lrelu = Layer::Act(Activation::LeakyRelu(LEAKY_SLOPE));
        let mut b = Builder::new();
        let mut layers = vec![b.conv("conv0", in_channels, width, 4, 2, down), lrelu.clone()];
        let mut mult = 1;
        for n in 1..n_layers {
            let prev = mult;
            mult = (1 << n).min(8);
            layers.push(b.conv(&format!("conv{n}"), width * prev, width * mult, 4, 2, down));
            layers.push(b.norm(&format!("norm{n}"), width * mult));
            layers.push(lrelu.clone());
        }
        let prev = mult;
        mult = (1 << n_layers).min(8);
        layers.push(b.conv(&format!("conv{n_layers}"), width * prev, width * mult, 4, 1, same));
        layers.push(b.norm(&format!("norm{n_layers}"), width * mult));
        layers.push(lrelu);
        layers.push(b.conv("score", width * mult, 1, 4, 1, same));
        PatchCritic {
            config,
            body: Seq::new(layers),
            specs: b.into_specs(),
        }
    }

    pub fn config(&self) -> CriticConfig {
        self.config
    }

    /// Total spatial reduction between input and score map.
    pub fn reduction(&self) -> usize {
        1 << self.config.n_layers
    }

    pub fn receptive_field(&self) -> usize {
        // two stride-1 4×4 layers, then n stride-2 4×4 layers
        let mut r = 1 + 3 + 3;
        for _ in 0..self.config.n_layers {
            r = r * 2 + 2;
        }
        r
    }

    pub fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        let (c, h, w) = x.shape();
        if c != self.config.in_channels {
            return Err(Error::Model(format!(
                "critic expects {} channels, got {c}",
                self.config.in_channels
            )));
        }
        let r = self.reduction();
        if h < r || w < r || h % r != 0 || w % r != 0 {
            return Err(Error::Dimension(format!(
                "critic input {h}x{w} must be a positive multiple of {r}"
            )));
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: Tensor<T>) -> Result<(Tensor<T>, SeqTrace<T>)> {
        self.check_input(&x)?;
        self.body.forward(p, x)
    }

    /// Backward pass for `scale · mean(map)`.
    pub fn backward_mean<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        trace: &SeqTrace<T>,
        map_shape: (usize, usize, usize),
        scale: T,
        grads: Option<&mut ParamSet<T>>,
    ) -> Tensor<T> {
        let (c, h, w) = map_shape;
        let g = scale / T::from_f64((c * h * w) as f64);
        self.body.backward(p, trace, Tensor::full(c, h, w, g), grads)
    }

    pub fn score(&self, p: &ParamSet<f32>, x: &Tensor<f32>) -> Result<CriticOutput> {
        let (map, _) = self.forward(p, x.clone())?;
        let mean = map.mean_f64();
        Ok(CriticOutput { map, mean })
    }
}

impl Architecture for PatchCritic {
    fn header(&self) -> String {
        format!(
            "patch_critic(in={},width={},n_layers={})",
            self.config.in_channels, self.config.width, self.config.n_layers
        )
    }
    fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }
}
