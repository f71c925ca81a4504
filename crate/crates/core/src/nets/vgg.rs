//! Fixed feature network for the perceptual loss: the convolutional trunk of
//! a 19-layer VGG network up to its third block.
//!
//! Weights are read from a named-tensor store (see [`crate::nets::store`])
//! holding `conv{b}_{i}.weight` `[out, in, 3, 3]` and `conv{b}_{i}.bias`
//! `[out]` for `(b, i)` in `1_1, 1_2, 2_1, 2_2, 3_1, 3_2, 3_3`. Without a
//! weights file a seeded random network of the same topology is used; losses
//! computed with it are metrics in the mathematical sense but carry no
//! pretrained semantics.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nets::layers::{Builder, Layer, Seq};
use crate::nets::ops::{Activation, PadMode, Padding};
use crate::nets::params::{Init, ParamSet, ParamSpec};
use crate::nets::{store, Architecture};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const WEIGHTS_ENV: &str = "EDGEBLUR_WEIGHTS";
pub const RANDOM_FEATURE_SEED: u64 = 0x5647_4731_3900_0033;

/// ImageNet statistics used to preprocess unit-range RGB input.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Post-activation outputs that can be tapped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum FeatureLayer {
    Conv1_1,
    Conv1_2,
    Conv2_1,
    Conv2_2,
    Conv3_1,
    Conv3_2,
    Conv3_3,
}

impl FeatureLayer {
    const ALL: [(FeatureLayer, &'static str, usize, usize); 7] = [
        (FeatureLayer::Conv1_1, "conv1_1", 3, 64),
        (FeatureLayer::Conv1_2, "conv1_2", 64, 64),
        (FeatureLayer::Conv2_1, "conv2_1", 64, 128),
        (FeatureLayer::Conv2_2, "conv2_2", 128, 128),
        (FeatureLayer::Conv3_1, "conv3_1", 128, 256),
        (FeatureLayer::Conv3_2, "conv3_2", 256, 256),
        (FeatureLayer::Conv3_3, "conv3_3", 256, 256),
    ];

    pub fn name(self) -> &'static str {
        Self::ALL[self as usize].1
    }

    pub fn channels(self) -> usize {
        Self::ALL[self as usize].3
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().find(|e| e.1 == s).map(|e| e.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum WeightsSource {
    File(PathBuf),
    Random(u64),
}

#[derive(Clone, Debug)]
pub struct Vgg19Features {
    layer: FeatureLayer,
    body: Seq,
    specs: Vec<ParamSpec>,
}

impl Vgg19Features {
    pub fn new(layer: FeatureLayer) -> Self {
        let mut b = Builder::new();
        let mut layers = Vec::new();
        for (i, &(id, name, in_c, out_c)) in FeatureLayer::ALL.iter().enumerate() {
            if id > layer {
                break;
            }
            if i == 2 || i == 4 {
                layers.push(Layer::MaxPool2);
            }
            layers.push(b.conv(name, in_c, out_c, 3, 1, Padding::uniform(1, PadMode::Zero)));
            layers.push(Layer::Act(Activation::Relu));
        }
        let mut specs = b.into_specs();
        // variance-preserving init for the random stand-in
        for s in &mut specs {
            if s.shape.len() == 4 {
                let fan_in = (s.shape[1] * s.shape[2] * s.shape[3]) as f64;
                s.init = Init::Uniform((6.0 / fan_in).sqrt());
            } else {
                s.init = Init::Constant(0.0);
            }
        }
        Vgg19Features {
            layer,
            body: Seq::new(layers),
            specs,
        }
    }

    pub fn layer(&self) -> FeatureLayer {
        self.layer
    }

    /// Spatial reduction between input and tapped features.
    pub fn reduction(&self) -> usize {
        match self.layer {
            FeatureLayer::Conv1_1 | FeatureLayer::Conv1_2 => 1,
            FeatureLayer::Conv2_1 | FeatureLayer::Conv2_2 => 2,
            _ => 4,
        }
    }
}

impl Architecture for Vgg19Features {
    fn header(&self) -> String {
        format!("vgg19_features(upto={})", self.layer.name())
    }
    fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }
}

/// Frozen perceptual feature extractor with its weights.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    arch: Vgg19Features,
    params: ParamSet<f32>,
    source: WeightsSource,
}

impl FeatureExtractor {
    pub fn random(layer: FeatureLayer, seed: u64) -> Self {
        let arch = Vgg19Features::new(layer);
        let params = ParamSet::init(arch.specs(), seed);
        FeatureExtractor {
            arch,
            params,
            source: WeightsSource::Random(seed),
        }
    }

    /// Loads the needed tensors from a store file; extra tensors (deeper
    /// layers) are ignored.
    pub fn from_file(layer: FeatureLayer, path: &Path) -> Result<Self> {
        let arch = Vgg19Features::new(layer);
        let tensors = store::read(path)?;
        let mut params = Vec::with_capacity(arch.specs().len());
        for s in arch.specs() {
            let t = tensors
                .iter()
                .find(|t| t.name == s.name)
                .ok_or_else(|| Error::Model(format!("{}: missing tensor {}", path.display(), s.name)))?;
            if t.shape != s.shape {
                return Err(Error::Model(format!(
                    "{}: tensor {} has shape {:?}, expected {:?}",
                    path.display(),
                    s.name,
                    t.shape,
                    s.shape
                )));
            }
            params.push(t.clone());
        }
        Ok(FeatureExtractor {
            arch,
            params: ParamSet::from_params(params),
            source: WeightsSource::File(path.to_path_buf()),
        })
    }

    /// Uses the file named by `EDGEBLUR_WEIGHTS` when set, otherwise the
    /// seeded random stand-in.
    pub fn from_env(layer: FeatureLayer) -> Result<Self> {
        match std::env::var_os(WEIGHTS_ENV) {
            Some(p) if !p.is_empty() => Self::from_file(layer, Path::new(&p)),
            _ => Ok(Self::random(layer, RANDOM_FEATURE_SEED)),
        }
    }

    pub fn source(&self) -> &WeightsSource {
        &self.source
    }
    pub fn arch(&self) -> &Vgg19Features {
        &self.arch
    }
    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    fn preprocess<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
        let x = match x.channels() {
            3 => x.clone(),
            1 => x.repeat_channels(3),
            c => return Err(Error::Shape(format!("feature input must have 1 or 3 channels, got {c}"))),
        };
        let mut y = x;
        for c in 0..3 {
            let m = T::from_f64(IMAGENET_MEAN[c]);
            let s = T::from_f64(1.0 / IMAGENET_STD[c]);
            for v in y.plane_mut(c) {
                *v = (*v - m) * s;
            }
        }
        Ok(y)
    }

    /// Features of a unit-range 1- or 3-channel tensor.
    pub fn features<T: Scalar>(&self, params: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.arch.body.infer(params, Self::preprocess(x)?)
    }

    /// Features together with a function mapping a feature gradient back to
    /// the input gradient.
    pub fn features_with_grad<'a, T: Scalar>(
        &'a self,
        params: &'a ParamSet<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, impl Fn(Tensor<T>) -> Tensor<T> + 'a)> {
        let in_channels = x.channels();
        let (f, trace) = self.arch.body.forward(params, Self::preprocess(x)?)?;
        let backward = move |g: Tensor<T>| {
            let mut gx = self.arch.body.backward(params, &trace, g, None);
            for c in 0..3 {
                let s = T::from_f64(1.0 / IMAGENET_STD[c]);
                for v in gx.plane_mut(c) {
                    *v *= s;
                }
            }
            if in_channels == 1 {
                let mut g1 = gx.slice_channels(0, 1);
                g1.add_assign(&gx.slice_channels(1, 1));
                g1.add_assign(&gx.slice_channels(2, 1));
                g1
            } else {
                gx
            }
        };
        Ok((f, backward))
    }
}
