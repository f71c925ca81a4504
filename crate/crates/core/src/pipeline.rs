//! Inference with a trained deblur-stage checkpoint.

use std::path::Path;

use crate::edgeops::{extract_edges, EdgeMap, EdgeRole};
use crate::error::{Error, Result};
use crate::imgcore::{build_tensor_pyramid, pad_image_to_multiple, unpad_image, Image, RangeTag};
use crate::metrics::Restorer;
use crate::nets::{
    multiscale_forward, Architecture, DeblurGenerator, DeblurGeneratorConfig, EdgeGenerator, EdgeGeneratorConfig,
    ParamSet,
};
use crate::trainer::{checkpoint, Checkpoint, Stage, TrainConfig};

pub struct Pipeline {
    num_scales: usize,
    gen: DeblurGenerator,
    params: ParamSet<f32>,
    edge: Option<(EdgeGenerator, ParamSet<f32>)>,
    id: String,
}

/// A restoration plus the edge map that conditioned it.
pub struct Restoration {
    pub image: Image,
    pub edges: EdgeMap,
}

impl Pipeline {
    pub fn from_checkpoint(dir: &Path) -> Result<Pipeline> {
        Self::from_checkpoint_with(dir, None)
    }

    /// With `expected`, the checkpoint's generator must match the
    /// architecture that configuration describes.
    pub fn from_checkpoint_with(dir: &Path, expected: Option<&TrainConfig>) -> Result<Pipeline> {
        let ck = Checkpoint::load(dir)?;
        Self::from_loaded(ck, expected)
    }

    pub fn from_loaded(ck: Checkpoint, expected: Option<&TrainConfig>) -> Result<Pipeline> {
        if ck.stage() != Stage::Deblur {
            return Err(Error::Config("inference needs a deblur-stage checkpoint".into()));
        }
        let cfg = expected.unwrap_or(&ck.config);
        let gen = DeblurGenerator::new(DeblurGeneratorConfig {
            width: cfg.deblur_width,
            res_blocks: cfg.res_blocks,
        });
        checkpoint::check_model("deblur generator", &gen, &ck.generator)?;
        let edge = match (cfg.use_edge, ck.edge) {
            (true, Some(e)) => {
                let arch = EdgeGenerator::new(EdgeGeneratorConfig { width: cfg.edge_width });
                checkpoint::check_model("edge network", &arch, &e)?;
                Some((arch, e.params))
            }
            (true, None) => return Err(Error::Model("checkpoint has no edge network but use_edge is set".into())),
            (false, _) => None,
        };
        let id = ck.generator.params.content_hash()[..16].to_string();
        Ok(Pipeline {
            num_scales: cfg.num_scales,
            gen,
            params: ck.generator.params,
            edge,
            id,
        })
    }

    pub fn uses_edge_network(&self) -> bool {
        self.edge.is_some()
    }

    pub fn generator(&self) -> &DeblurGenerator {
        &self.gen
    }

    /// Inputs are reflect-padded to this multiple and cropped back after.
    pub fn size_multiple(&self) -> usize {
        4 << (self.num_scales - 1)
    }

    /// Pads, extracts and restores edges, runs the cascade, and crops the
    /// finest output back to the input size. Output is in unit range.
    pub fn restore_full(&self, blurred: &Image) -> Result<Restoration> {
        if blurred.channels() != 3 {
            return Err(Error::Shape(format!("expected an RGB image, got {} channels", blurred.channels())));
        }
        let (_, h, w) = blurred.shape();
        let padded = pad_image_to_multiple(&blurred.to_range(RangeTag::Unit), self.size_multiple());
        let e_b = extract_edges(&padded);
        let edge_signed = e_b.image.to_range(RangeTag::Signed).into_tensor();
        let (edge_input, edges) = match &self.edge {
            Some((arch, p)) => {
                let y = arch.infer(p, edge_signed)?;
                let img = Image::new_clamped(y.clone(), RangeTag::Signed)?;
                (y, EdgeMap::new(img, EdgeRole::Restored)?)
            }
            None => (edge_signed, e_b),
        };
        let levels = build_tensor_pyramid(&padded.to_range(RangeTag::Signed).into_tensor(), self.num_scales)?;
        let (outs, _) = multiscale_forward(&self.gen, &self.params, &levels, &edge_input)?;
        let finest = outs.into_iter().last().expect("at least one scale");
        let out = Image::new_clamped(finest, RangeTag::Signed)?.to_range(RangeTag::Unit);
        let edges = EdgeMap::new(unpad_image(&edges.image, h, w), edges.role)?;
        Ok(Restoration {
            image: unpad_image(&out, h, w),
            edges,
        })
    }

    pub fn fingerprint(&self) -> String {
        self.gen.fingerprint()
    }
}

impl Restorer for Pipeline {
    fn restore(&self, blurred: &Image) -> Result<Image> {
        Ok(self.restore_full(blurred)?.image)
    }
    fn checkpoint_id(&self) -> String {
        self.id.clone()
    }
}
