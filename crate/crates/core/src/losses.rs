//! Training objectives: adversarial terms, gradient penalty, and the
//! pixel / perceptual / dark-channel content losses with their composites.
//!
//! Content losses take tensors in the unit range unless noted and return the
//! loss value plus, for the `_grad` variants, the gradient with respect to
//! the second (generated) argument.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::edgeops::dark_channel_trace;
use crate::error::{Error, Result};
use crate::nets::critic::PatchCritic;
use crate::nets::params::ParamSet;
use crate::nets::vgg::FeatureExtractor;
use crate::scalar::{Dual, Scalar};
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f64 = 100.0;
pub const DEFAULT_LAMBDA_GP: f64 = 10.0;

/// Mean squared error over all `C·H·W` entries.
pub fn pixel_loss<T: Scalar>(y: &Tensor<T>, yhat: &Tensor<T>) -> Result<f64> {
    y.ensure_same_shape(yhat, "pixel loss")?;
    let s: f64 = y
        .data()
        .iter()
        .zip(yhat.data())
        .map(|(&a, &b)| {
            let d = b.re() - a.re();
            d * d
        })
        .sum();
    Ok(s / y.len() as f64)
}

pub fn pixel_loss_grad<T: Scalar>(y: &Tensor<T>, yhat: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let loss = pixel_loss(y, yhat)?;
    let k = T::from_f64(2.0 / y.len() as f64);
    let mut g = yhat.clone();
    for (gv, &a) in g.data_mut().iter_mut().zip(y.data()) {
        *gv = (*gv - a) * k;
    }
    Ok((loss, g))
}

fn check_spatial<T: Scalar>(y: &Tensor<T>, yhat: &Tensor<T>, what: &str) -> Result<()> {
    if y.height() != yhat.height() || y.width() != yhat.width() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", y.shape(), yhat.shape())));
    }
    Ok(())
}

/// Mean absolute difference between the dark channels of `y` and `yhat`.
pub fn dark_channel_loss<T: Scalar>(y: &Tensor<T>, yhat: &Tensor<T>, window: usize) -> Result<f64> {
    Ok(dark_channel_loss_grad(y, yhat, window)?.0)
}

/// The minimum's subgradient routes to the selected argmin; `|0|` has zero
/// subgradient.
pub fn dark_channel_loss_grad<T: Scalar>(y: &Tensor<T>, yhat: &Tensor<T>, window: usize) -> Result<(f64, Tensor<T>)> {
    check_spatial(y, yhat, "dark channel loss")?;
    let a = dark_channel_trace(y, window)?;
    let b = dark_channel_trace(yhat, window)?;
    let n = a.values.len() as f64;
    let mut loss = 0.0;
    let mut g = Tensor::zeros(yhat.channels(), yhat.height(), yhat.width());
    let step = T::from_f64(1.0 / n);
    for (p, (&va, &vb)) in a.values.data().iter().zip(b.values.data()).enumerate() {
        let d = vb.re() - va.re();
        loss += d.abs();
        if d > 0.0 {
            g.data_mut()[b.argmin[p]] += step;
        } else if d < 0.0 {
            g.data_mut()[b.argmin[p]] -= step;
        }
    }
    Ok((loss / n, g))
}

/// Mean squared distance between feature maps of `y` and `yhat`.
pub fn perceptual_loss(fe: &FeatureExtractor, y: &Tensor<f32>, yhat: &Tensor<f32>) -> Result<f64> {
    y.ensure_same_shape(yhat, "perceptual loss")?;
    let fy = fe.features(fe.params(), y)?;
    let fh = fe.features(fe.params(), yhat)?;
    pixel_loss(&fy, &fh)
}

/// Perceptual loss against precomputed target features, with the gradient
/// with respect to `yhat`.
pub fn perceptual_loss_grad<T: Scalar>(
    fe: &FeatureExtractor,
    params: &ParamSet<T>,
    target_features: &Tensor<T>,
    yhat: &Tensor<T>,
) -> Result<(f64, Tensor<T>)> {
    let (fh, backward) = fe.features_with_grad(params, yhat)?;
    let (loss, gf) = pixel_loss_grad(target_features, &fh)?;
    Ok((loss, backward(gf)))
}

/// A differentiable scalar critic `D(x)`.
pub trait Critic<T: Scalar> {
    fn score(&self, x: &Tensor<T>) -> Result<f64>;
    /// `D(x)` and `∇ₓD(x)`.
    fn score_with_input_grad(&self, x: &Tensor<T>) -> Result<(f64, Tensor<T>)>;
}

/// A patch critic bound to a parameter set; `D(x)` is the mean patch score.
pub struct BoundCritic<'a, T> {
    pub arch: &'a PatchCritic,
    pub params: &'a ParamSet<T>,
}

impl<T: Scalar> Critic<T> for BoundCritic<'_, T> {
    fn score(&self, x: &Tensor<T>) -> Result<f64> {
        let (map, _) = self.arch.forward(self.params, x.clone())?;
        Ok(map.mean_f64())
    }

    fn score_with_input_grad(&self, x: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
        let (map, trace) = self.arch.forward(self.params, x.clone())?;
        let g = self.arch.backward_mean(self.params, &trace, map.shape(), T::one(), None);
        Ok((map.mean_f64(), g))
    }
}

/// `ε·real + (1−ε)·fake`
pub fn interpolate<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    real.ensure_same_shape(fake, "gradient penalty interpolation")?;
    let e = T::from_f64(eps);
    let one_minus = T::from_f64(1.0 - eps);
    let mut out = fake.clone();
    for (o, &r) in out.data_mut().iter_mut().zip(real.data()) {
        *o = e * r + one_minus * *o;
    }
    Ok(out)
}

/// `(‖g‖−1)²` when `squared`, else the literal `‖g‖−1`.
pub fn penalty_from_norm(norm: f64, squared: bool) -> f64 {
    if squared {
        (norm - 1.0) * (norm - 1.0)
    } else {
        norm - 1.0
    }
}

fn penalty_slope(norm: f64, squared: bool) -> f64 {
    if squared {
        2.0 * (norm - 1.0)
    } else {
        1.0
    }
}

fn l2_norm<T: Scalar>(t: &Tensor<T>) -> f64 {
    t.data().iter().map(|v| v.re() * v.re()).sum::<f64>().sqrt()
}

/// Gradient penalty at one interpolate `x̂ = ε·real + (1−ε)·fake`, with ε drawn
/// from `U[0,1]` by `rng`. Batches are single images, so the expectation is
/// a single sample.
pub fn gradient_penalty<T: Scalar, C: Critic<T>, R: Rng>(
    critic: &C,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    rng: &mut R,
    squared: bool,
) -> Result<f64> {
    let eps: f64 = rng.gen();
    let x_hat = interpolate(real, fake, eps)?;
    let (_, g) = critic.score_with_input_grad(&x_hat)?;
    if !g.all_finite() {
        return Err(Error::Model("critic input gradient is not finite".into()));
    }
    Ok(penalty_from_norm(l2_norm(&g), squared))
}

pub fn gradient_penalty_seeded<T: Scalar, C: Critic<T>>(
    critic: &C,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    seed: u64,
    squared: bool,
) -> Result<f64> {
    gradient_penalty(critic, real, fake, &mut ChaCha8Rng::seed_from_u64(seed), squared)
}

/// Penalty at `x̂` together with its gradient with respect to the critic's
/// parameters.
#[derive(Clone, Debug)]
pub struct PenaltyGrad<T> {
    pub penalty: f64,
    pub grad_norm: f64,
    pub grads: ParamSet<T>,
}

/// Exact parameter gradient of the gradient penalty.
///
/// With `g = ∇ₓD(x̂; θ)`, `∇_θ‖g‖ = (∂²D/∂θ∂x)·g / ‖g‖`, and the mixed term is
/// the directional derivative of `∇_θD` as the input moves along `g`. That
/// derivative is obtained by one forward/backward pass in dual numbers with
/// input `x̂ + ε·g`.
pub fn patch_critic_penalty_grad<T: Scalar>(
    arch: &PatchCritic,
    params: &ParamSet<T>,
    x_hat: &Tensor<T>,
    squared: bool,
) -> Result<PenaltyGrad<T>> {
    let (map, trace) = arch.forward(params, x_hat.clone())?;
    let g = arch.backward_mean(params, &trace, map.shape(), T::one(), None);
    if !g.all_finite() {
        return Err(Error::Model("critic input gradient is not finite".into()));
    }
    let norm = l2_norm(&g);
    let penalty = penalty_from_norm(norm, squared);
    if norm == 0.0 {
        return Ok(PenaltyGrad {
            penalty,
            grad_norm: norm,
            grads: params.zeros_like(),
        });
    }
    let dual_params = params.cast(Dual::constant);
    let mut x_dual = x_hat.cast(Dual::constant);
    for (d, &gv) in x_dual.data_mut().iter_mut().zip(g.data()) {
        d.eps = gv;
    }
    let (map_d, trace_d) = arch.forward(&dual_params, x_dual)?;
    let mut grads_d = dual_params.zeros_like();
    arch.backward_mean(&dual_params, &trace_d, map_d.shape(), Dual::constant(T::one()), Some(&mut grads_d));
    let k = T::from_f64(penalty_slope(norm, squared) / norm);
    let grads = grads_d.cast(|d| d.eps * k);
    Ok(PenaltyGrad {
        penalty,
        grad_norm: norm,
        grads,
    })
}

/// `(g_loss, c_loss)` for the edge networks: `g = −D(fake)`,
/// `c = D(fake) − D(real) + λ_gp·GP`.
pub fn edge_adv_losses<C: Critic<f32>, R: Rng>(
    critic: &C,
    e_real: &Tensor<f32>,
    e_fake: &Tensor<f32>,
    lambda_gp: f64,
    squared: bool,
    rng: &mut R,
) -> Result<(f64, f64)> {
    e_real.ensure_same_shape(e_fake, "adversarial loss")?;
    let d_fake = critic.score(e_fake)?;
    let d_real = critic.score(e_real)?;
    let gp = gradient_penalty(critic, e_real, e_fake, rng, squared)?;
    Ok((-d_fake, d_fake - d_real + lambda_gp * gp))
}

/// Per-scale [`edge_adv_losses`] with one shared critic, averaged over scales.
pub fn deblur_adv_losses<C: Critic<f32>, R: Rng>(
    critic: &C,
    real_levels: &[Tensor<f32>],
    fake_levels: &[Tensor<f32>],
    lambda_gp: f64,
    squared: bool,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if real_levels.len() != fake_levels.len() || real_levels.is_empty() {
        return Err(Error::Shape(format!(
            "pyramids have {} and {} levels",
            real_levels.len(),
            fake_levels.len()
        )));
    }
    let (mut g, mut c) = (0.0, 0.0);
    for (r, f) in real_levels.iter().zip(fake_levels) {
        let (gi, ci) = edge_adv_losses(critic, r, f, lambda_gp, squared, rng)?;
        g += gi;
        c += ci;
    }
    let n = real_levels.len() as f64;
    Ok((g / n, c / n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportKind {
    Critic,
    Generator,
}

/// Loss values of one optimization step.
///
/// For generator reports `total = adv + weight·(feat + pixel + dc)` with
/// `weight = λ`; for critic reports `total = adv + weight·gp` with
/// `weight = λ_gp`, where `adv = D(fake) − D(real)`. All parts are means over
/// scales and `scale_breakdown` holds the per-scale totals, whose mean is
/// `total`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub kind: ReportKind,
    pub stage: String,
    pub epoch: u64,
    pub step: u64,
    pub adv: f64,
    pub pixel: f64,
    pub feat: f64,
    pub dc: f64,
    pub gp: f64,
    pub weight: f64,
    pub total: f64,
    pub scale_breakdown: Vec<f64>,
}

/// Per-scale loss terms of the deblurring generator.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScaleTerms {
    pub adv: f64,
    pub pixel: f64,
    pub feat: f64,
    pub dc: f64,
}

impl LossReport {
    fn blank(kind: ReportKind) -> Self {
        LossReport {
            kind,
            stage: String::new(),
            epoch: 0,
            step: 0,
            adv: 0.0,
            pixel: 0.0,
            feat: 0.0,
            dc: 0.0,
            gp: 0.0,
            weight: 0.0,
            total: 0.0,
            scale_breakdown: Vec::new(),
        }
    }

    pub fn recompute_total(&self) -> f64 {
        match self.kind {
            ReportKind::Generator => self.adv + self.weight * (self.feat + self.pixel + self.dc),
            ReportKind::Critic => self.adv + self.weight * self.gp,
        }
    }

    /// Finite parts, non-negative content terms, and a total that matches
    /// its parts within 1e-6.
    pub fn check_consistency(&self) -> Result<()> {
        let parts = [self.adv, self.pixel, self.feat, self.dc, self.gp, self.total];
        if parts.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrainingDiverged {
                context: format!("{} {:?} step {}", self.stage, self.kind, self.step),
                detail: format!("non-finite loss {self:?}"),
            });
        }
        if self.pixel < 0.0 || self.feat < 0.0 || self.dc < 0.0 {
            return Err(Error::Model(format!("negative content loss in {self:?}")));
        }
        let r = self.recompute_total();
        if (r - self.total).abs() > 1e-6 * (1.0 + r.abs()) {
            return Err(Error::Model(format!(
                "loss total {} does not match recomputed {r}",
                self.total
            )));
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("loss report serializes")
    }

    pub fn with_position(mut self, stage: &str, epoch: u64, step: u64) -> Self {
        self.stage = stage.to_string();
        self.epoch = epoch;
        self.step = step;
        self
    }
}

/// `L_EG = L_adv1 + λ·L_feat(E_s, E_r)`
pub fn edge_total_loss(adv: f64, feat: f64, lambda: f64) -> LossReport {
    let total = adv + lambda * feat;
    LossReport {
        adv,
        feat,
        weight: lambda,
        total,
        scale_breakdown: vec![total],
        ..LossReport::blank(ReportKind::Generator)
    }
}

/// `L_MS = L_adv2 + λ·L_cont`, with `L_cont` the scale mean of
/// `feat + pixel + dc` (or `feat` alone when `use_combined_content` is off).
pub fn deblur_total_loss(scales: &[ScaleTerms], lambda: f64, use_combined_content: bool) -> LossReport {
    let n = scales.len().max(1) as f64;
    let mut r = LossReport::blank(ReportKind::Generator);
    r.weight = lambda;
    for s in scales {
        let (pixel, dc) = if use_combined_content { (s.pixel, s.dc) } else { (0.0, 0.0) };
        r.adv += s.adv / n;
        r.feat += s.feat / n;
        r.pixel += pixel / n;
        r.dc += dc / n;
        r.scale_breakdown.push(s.adv + lambda * (s.feat + pixel + dc));
    }
    r.total = r.recompute_total();
    r
}

/// Critic objective report: `adv` is the mean of `D(fake) − D(real)` over
/// scales and `gp` the mean penalty.
pub fn critic_report(per_scale: &[(f64, f64)], lambda_gp: f64) -> LossReport {
    let n = per_scale.len().max(1) as f64;
    let mut r = LossReport::blank(ReportKind::Critic);
    r.weight = lambda_gp;
    for &(adv, gp) in per_scale {
        r.adv += adv / n;
        r.gp += gp / n;
        r.scale_breakdown.push(adv + lambda_gp * gp);
    }
    r.total = r.recompute_total();
    r
}
