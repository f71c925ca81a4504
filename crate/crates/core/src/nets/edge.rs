//! Lightweight encoder-decoder that restores sharp edges from blurred ones.

use crate::error::{Error, Result};
use crate::nets::layers::{residual_clamp, residual_clamp_backward, Builder, Seq, SeqTrace};
use crate::nets::params::{set_init, Init, ParamSet, ParamSpec};
use crate::nets::Architecture;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EdgeGeneratorConfig {
    pub width: usize,
}

impl Default for EdgeGeneratorConfig {
    fn default() -> Self {
        EdgeGeneratorConfig { width: 32 }
    }
}

/// U-shaped generator over single-channel edge maps. Every encoder
/// convolution is followed by a residual block and every decoder
/// deconvolution is preceded by one; mirrored encoder features are
/// concatenated onto the decoder path.
///
/// ```text
/// x ─ enc0 (7×7, w) ─┬─ enc1 (↓2, 2w) ─┬─ enc2 (↓2, 4w) ─ dec2 (res, ↑2, 2w) ─┐
///                    │                 └──────────────── concat ──────────────┤
///                    │                                   dec1 (res, ↑2, w) ───┤
///                    └──────────────────────────────────── concat ────────────┤
///                                                        out (7×7, tanh) ─────┘
/// ```
///
/// The output head adds the input edge map and clamps to `[-1, 1]`, so the
/// network predicts a correction to the blurred edges.
#[derive(Clone, Debug)]
pub struct EdgeGenerator {
    config: EdgeGeneratorConfig,
    enc0: Seq,
    enc1: Seq,
    enc2: Seq,
    dec2: Seq,
    dec1: Seq,
    out: Seq,
    specs: Vec<ParamSpec>,
}

#[derive(Clone, Debug)]
pub struct EdgeTrace<T> {
    enc0: SeqTrace<T>,
    enc1: SeqTrace<T>,
    enc2: SeqTrace<T>,
    dec2: SeqTrace<T>,
    dec1: SeqTrace<T>,
    out: SeqTrace<T>,
    pass: Vec<bool>,
}

impl EdgeGenerator {
    pub fn new(config: EdgeGeneratorConfig) -> Self {
        let w = config.width;
        let mut b = Builder::new();
        let mut enc0 = b.in_block("enc0", 1, w);
        enc0.push(b.res_block("enc0.res", w));
        let mut enc1 = b.conv_block("enc1", w, 2 * w);
        enc1.push(b.res_block("enc1.res", 2 * w));
        let mut enc2 = b.conv_block("enc2", 2 * w, 4 * w);
        enc2.push(b.res_block("enc2.res", 4 * w));
        let mut dec2 = vec![b.res_block("dec2.res", 4 * w)];
        dec2.extend(b.deconv_block("dec2", 4 * w, 2 * w));
        let mut dec1 = vec![b.res_block("dec1.res", 4 * w)];
        dec1.extend(b.deconv_block("dec1", 4 * w, w));
        let out = b.out_block("out", 2 * w, 1);
        let mut specs = b.into_specs();
        // the residual head starts as the identity
        set_init(&mut specs, "out.", Init::Constant(0.0));
        EdgeGenerator {
            config,
            enc0: Seq::new(enc0),
            enc1: Seq::new(enc1),
            enc2: Seq::new(enc2),
            dec2: Seq::new(dec2),
            dec1: Seq::new(dec1),
            out: Seq::new(out),
            specs,
        }
    }

    pub fn config(&self) -> EdgeGeneratorConfig {
        self.config
    }

    fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        let (c, h, w) = x.shape();
        if c != 1 {
            return Err(Error::Model(format!("edge generator expects 1 channel, got {c}")));
        }
        if h % 4 != 0 || w % 4 != 0 || h < 4 || w < 4 {
            return Err(Error::Dimension(format!(
                "edge generator input {h}x{w} must be a positive multiple of 4"
            )));
        }
        Ok(())
    }

    /// Signed-range edge map in, signed-range restored edge map out.
    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: Tensor<T>) -> Result<(Tensor<T>, EdgeTrace<T>)> {
        self.check_input(&x)?;
        let base = x.clone();
        let (a0, enc0) = self.enc0.forward(p, x)?;
        let (a1, enc1) = self.enc1.forward(p, a0.clone())?;
        let (a2, enc2) = self.enc2.forward(p, a1.clone())?;
        let (b2, dec2) = self.dec2.forward(p, a2)?;
        let (b1, dec1) = self.dec1.forward(p, Tensor::concat_channels(&[&b2, &a1])?)?;
        let (r, out) = self.out.forward(p, Tensor::concat_channels(&[&b1, &a0])?)?;
        let (y, pass) = residual_clamp(&base, &r);
        Ok((
            y,
            EdgeTrace {
                enc0,
                enc1,
                enc2,
                dec2,
                dec1,
                out,
                pass,
            },
        ))
    }

    pub fn infer<T: Scalar>(&self, p: &ParamSet<T>, x: Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(p, x)?.0)
    }

    /// Accumulates parameter gradients into `grads`; returns the input gradient.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        t: &EdgeTrace<T>,
        gy: Tensor<T>,
        mut grads: Option<&mut ParamSet<T>>,
    ) -> Tensor<T> {
        let w = self.config.width;
        let g_res = residual_clamp_backward(&gy, &t.pass);
        let g_cat0 = self.out.backward(p, &t.out, g_res.clone(), grads.as_deref_mut());
        let g_b1 = g_cat0.slice_channels(0, w);
        let g_a0_skip = g_cat0.slice_channels(w, w);
        let g_cat1 = self.dec1.backward(p, &t.dec1, g_b1, grads.as_deref_mut());
        let g_b2 = g_cat1.slice_channels(0, 2 * w);
        let g_a1_skip = g_cat1.slice_channels(2 * w, 2 * w);
        let g_a2 = self.dec2.backward(p, &t.dec2, g_b2, grads.as_deref_mut());
        let mut g_a1 = self.enc2.backward(p, &t.enc2, g_a2, grads.as_deref_mut());
        g_a1.add_assign(&g_a1_skip);
        let mut g_a0 = self.enc1.backward(p, &t.enc1, g_a1, grads.as_deref_mut());
        g_a0.add_assign(&g_a0_skip);
        let mut gx = self.enc0.backward(p, &t.enc0, g_a0, grads);
        gx.add_assign(&g_res);
        gx
    }
}

impl Architecture for EdgeGenerator {
    fn header(&self) -> String {
        format!("edge_generator(width={})", self.config.width)
    }
    fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }
}
