//! Trainable networks, the frozen perceptual feature network, and the
//! small tensor engine they run on.

pub mod critic;
pub mod deblur;
pub mod edge;
pub mod layers;
pub mod ops;
pub mod params;
pub mod store;
pub mod vgg;

pub use critic::{CriticConfig, CriticOutput, PatchCritic};
pub use deblur::{multiscale_backward, multiscale_forward, DeblurGenerator, DeblurGeneratorConfig, MultiScaleTrace};
pub use edge::{EdgeGenerator, EdgeGeneratorConfig};
pub use params::{ParamSet, ParamSpec};
pub use vgg::{FeatureExtractor, FeatureLayer};

use crate::edgeops::{EdgeMap, EdgeRole};
use crate::error::{Error, Result};
use crate::imgcore::{Image, RangeTag, ScalePyramid};
use crate::tensor::Tensor;

/// A network topology with named, shaped parameters.
pub trait Architecture {
    fn header(&self) -> String;
    fn specs(&self) -> &[ParamSpec];

    fn fingerprint(&self) -> String {
        params::fingerprint(&self.header(), self.specs())
    }

    fn init_params(&self, seed: u64) -> ParamSet<f32> {
        ParamSet::init(self.specs(), seed)
    }
}

/// Parameters tagged with the fingerprint of the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub fingerprint: String,
    pub params: ParamSet<f32>,
}

impl ModelParams {
    pub fn init(arch: &impl Architecture, seed: u64) -> Self {
        ModelParams {
            fingerprint: arch.fingerprint(),
            params: arch.init_params(seed),
        }
    }

    /// Fails with a message naming both fingerprints when `arch` is not the
    /// architecture these parameters were built for.
    pub fn check(&self, arch: &impl Architecture) -> Result<()> {
        let expected = arch.fingerprint();
        if self.fingerprint != expected {
            return Err(Error::Model(format!(
                "parameter fingerprint {} does not match architecture {} ({expected})",
                self.fingerprint,
                arch.header()
            )));
        }
        self.params.check_against(arch.specs())?;
        if let Some(name) = self.params.first_non_finite() {
            return Err(Error::Model(format!("parameter {name} is not finite")));
        }
        Ok(())
    }
}

fn signed(img: &Image) -> Tensor<f32> {
    img.to_range(RangeTag::Signed).into_tensor()
}

/// Restores a blurred edge map. Output is tagged [`EdgeRole::Restored`].
pub fn edge_generator_forward(arch: &EdgeGenerator, params: &ModelParams, e_b: &EdgeMap) -> Result<EdgeMap> {
    params.check(arch)?;
    let y = arch.infer(&params.params, signed(&e_b.image))?;
    EdgeMap::new(Image::new_clamped(y, RangeTag::Signed)?, EdgeRole::Restored)
}

/// One scale of the deblurring generator.
pub fn deblur_scale_forward(
    arch: &DeblurGenerator,
    params: &ModelParams,
    blurred: &Image,
    prev_upsampled: &Image,
    edge: &EdgeMap,
) -> Result<Image> {
    params.check(arch)?;
    if blurred.channels() != 3 || prev_upsampled.channels() != 3 {
        return Err(Error::Shape("blurred and previous estimate must be RGB".into()));
    }
    let (b, pv, e) = (signed(blurred), signed(prev_upsampled), signed(&edge.image));
    let x = Tensor::concat_channels(&[&b, &pv, &e])?;
    let (y, _) = arch.forward(&params.params, x)?;
    Image::new_clamped(y, RangeTag::Signed)
}

/// Runs the cascade over an image pyramid; returns the per-scale restorations.
pub fn multiscale_forward_images(
    arch: &DeblurGenerator,
    params: &ModelParams,
    blur_pyr: &ScalePyramid,
    edge_full: &EdgeMap,
) -> Result<ScalePyramid> {
    params.check(arch)?;
    let levels: Vec<Tensor<f32>> = blur_pyr.levels.iter().map(signed).collect();
    let (outs, _) = multiscale_forward(arch, &params.params, &levels, &signed(&edge_full.image))?;
    let levels = outs
        .into_iter()
        .map(|t| Image::new_clamped(t, RangeTag::Signed))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScalePyramid { levels })
}

/// Patch scores for a signed-range image (or edge map).
pub fn critic_forward(arch: &PatchCritic, params: &ModelParams, img: &Image) -> Result<CriticOutput> {
    params.check(arch)?;
    arch.score(&params.params, &signed(img))
}

/// Perceptual features of a unit-range image; single-channel inputs are
/// replicated to three channels first.
pub fn feature_extract(fe: &FeatureExtractor, img: &Image) -> Result<Tensor<f32>> {
    fe.features(fe.params(), &img.to_range(RangeTag::Unit).into_tensor())
}
