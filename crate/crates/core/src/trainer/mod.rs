//! Two-stage adversarial training.
//!
//! The edge stage trains the edge generator against a one-channel critic.
//! The deblur stage freezes that network and trains the multi-scale
//! generator against a shared RGB critic. Each data batch gets
//! `critic_steps_per_gen` critic updates followed by one generator update.

pub mod checkpoint;
pub mod config;
pub mod optim;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use checkpoint::Checkpoint;
pub use config::{lr_schedule, ConfigSources, Preset, Stage, TrainConfig};
pub use optim::{Adam, AdamHyper};

use crate::dataio::{load_entry, DatasetManifest, SamplePair};
use crate::edgeops::extract_edges;
use crate::error::{Error, Result};
use crate::imgcore::{build_tensor_pyramid, random_crop_pair_with, Image, RangeTag};
use crate::losses::{
    critic_report, penalty_from_norm, BoundCritic, Critic, dark_channel_loss_grad, deblur_total_loss, edge_total_loss, interpolate, patch_critic_penalty_grad,
    perceptual_loss_grad, pixel_loss_grad, LossReport, ScaleTerms,
};
use crate::nets::{
    multiscale_backward, multiscale_forward, Architecture, CriticConfig, DeblurGenerator, DeblurGeneratorConfig,
    EdgeGenerator, EdgeGeneratorConfig, FeatureExtractor, ModelParams, ParamSet, PatchCritic,
};
use crate::tensor::Tensor;

pub const LOG_FILE: &str = "train_log.ndjson";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const CRASH_DIR: &str = "crash";

/// Independent sub-seed for one consumer of the run seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let d = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(tag.as_bytes()).finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Sample order of one epoch; depends only on the seed and the epoch.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch-{epoch}"))));
    order
}

/// Indexed access to training pairs.
pub trait Dataset {
    fn len(&self) -> usize;
    fn load(&self, index: usize) -> Result<SamplePair>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Dataset for [SamplePair] {
    fn len(&self) -> usize {
        <[SamplePair]>::len(self)
    }
    fn load(&self, index: usize) -> Result<SamplePair> {
        Ok(self[index].clone())
    }
}

impl Dataset for Vec<SamplePair> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn load(&self, index: usize) -> Result<SamplePair> {
        self.as_slice().load(index)
    }
}

impl Dataset for DatasetManifest {
    fn len(&self) -> usize {
        self.entries.len()
    }
    fn load(&self, index: usize) -> Result<SamplePair> {
        load_entry(self.source, &self.entries[index])
    }
}

fn signed(img: &Image) -> Tensor<f32> {
    img.to_range(RangeTag::Signed).into_tensor()
}

fn to_unit(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| 0.5 * v + 0.5)
}

/// One prepared training sample, all tensors in signed range.
#[derive(Clone, Debug)]
pub struct Sample {
    /// Blurred pyramid, coarse to fine (deblur stage only).
    pub blur_levels: Vec<Tensor<f32>>,
    /// Critic targets, coarse to fine: the sharp pyramid, or the sharp edge
    /// map in the edge stage.
    pub real_levels: Vec<Tensor<f32>>,
    /// Blurred edges in the edge stage; the generator's edge channel in the
    /// deblur stage.
    pub edge_input: Tensor<f32>,
}

/// Samples plus the generator outputs cached for the critic steps.
#[derive(Clone, Debug)]
pub struct Batch {
    pub samples: Vec<Sample>,
    fakes: Option<(u64, Vec<Vec<Tensor<f32>>>)>,
}

impl Batch {
    pub fn new(samples: Vec<Sample>) -> Self {
        Batch { samples, fakes: None }
    }
}

enum Generator {
    Edge(EdgeGenerator),
    Deblur(DeblurGenerator),
}

enum GenTrace {
    Edge(crate::nets::edge::EdgeTrace<f32>),
    Deblur(crate::nets::MultiScaleTrace<f32>),
}

impl Generator {
    fn arch(&self) -> &dyn ArchRef {
        match self {
            Generator::Edge(g) => g,
            Generator::Deblur(g) => g,
        }
    }
}

/// Object-safe view of [`Architecture`].
trait ArchRef {
    fn fp(&self) -> String;
    fn spec_list(&self) -> &[crate::nets::ParamSpec];
}

impl<A: Architecture> ArchRef for A {
    fn fp(&self) -> String {
        self.fingerprint()
    }
    fn spec_list(&self) -> &[crate::nets::ParamSpec] {
        self.specs()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub generator_steps: u64,
    pub critic_steps: u64,
}

pub struct Trainer {
    cfg: TrainConfig,
    fe: FeatureExtractor,
    gen: Generator,
    gen_params: ParamSet<f32>,
    gen_opt: Adam,
    critic: PatchCritic,
    critic_params: ParamSet<f32>,
    critic_opt: Adam,
    edge: Option<(EdgeGenerator, ModelParams)>,
    rng: ChaCha8Rng,
    epoch: u64,
    cursor: u64,
    counters: Counters,
    gen_version: u64,
}

fn edge_arch(cfg: &TrainConfig) -> EdgeGenerator {
    EdgeGenerator::new(EdgeGeneratorConfig { width: cfg.edge_width })
}

fn critic_arch(cfg: &TrainConfig) -> PatchCritic {
    PatchCritic::new(match cfg.stage {
        Stage::Edge => CriticConfig::edge(cfg.critic_width, cfg.critic_layers),
        Stage::Deblur => CriticConfig::image(cfg.critic_width, cfg.critic_layers),
    })
}

fn deblur_arch(cfg: &TrainConfig) -> DeblurGenerator {
    DeblurGenerator::new(DeblurGeneratorConfig {
        width: cfg.deblur_width,
        res_blocks: cfg.res_blocks,
    })
}

/// Loads the frozen edge network named by an edge-stage checkpoint.
pub fn load_edge_network(path: &Path, cfg: &TrainConfig) -> Result<(EdgeGenerator, ModelParams)> {
    let ck = Checkpoint::load(path)?;
    if ck.stage() != Stage::Edge {
        return Err(Error::Config(format!("{} is not an edge-stage checkpoint", path.display())));
    }
    if ck.config.edge_width != cfg.edge_width {
        return Err(Error::Config(format!(
            "edge checkpoint has edge_width {} but the configuration says {}",
            ck.config.edge_width, cfg.edge_width
        )));
    }
    let arch = edge_arch(cfg);
    checkpoint::check_model("edge network", &arch, &ck.generator)?;
    Ok((arch, ck.generator))
}

impl Trainer {
    /// Fresh state; parameters are initialised from sub-seeds of `cfg.seed`.
    pub fn new(cfg: TrainConfig) -> Result<Trainer> {
        let fe = FeatureExtractor::from_env(cfg.feature_layer()?)?;
        Self::with_features(cfg, fe)
    }

    pub fn with_features(cfg: TrainConfig, fe: FeatureExtractor) -> Result<Trainer> {
        cfg.validate()?;
        let critic = critic_arch(&cfg);
        let critic_params = critic.init_params(derive_seed(cfg.seed, "critic"));
        let (gen, gen_params, edge) = match cfg.stage {
            Stage::Edge => {
                let g = edge_arch(&cfg);
                let p = g.init_params(derive_seed(cfg.seed, "generator"));
                (Generator::Edge(g), p, None)
            }
            Stage::Deblur => {
                let g = deblur_arch(&cfg);
                let p = g.init_params(derive_seed(cfg.seed, "generator"));
                let edge = if cfg.use_edge {
                    Some(load_edge_network(Path::new(&cfg.edge_checkpoint), &cfg)?)
                } else {
                    None
                };
                (Generator::Deblur(g), p, edge)
            }
        };
        Ok(Trainer {
            gen_opt: Adam::new(&gen_params),
            critic_opt: Adam::new(&critic_params),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "stream")),
            cfg,
            fe,
            gen,
            gen_params,
            critic,
            critic_params,
            edge,
            epoch: 0,
            cursor: 0,
            counters: Counters::default(),
            gen_version: 0,
        })
    }

    /// Restores a saved run. The checkpoint's own configuration is used.
    pub fn from_checkpoint(ck: Checkpoint, fe: FeatureExtractor) -> Result<Trainer> {
        let cfg = ck.config.clone();
        let critic = critic_arch(&cfg);
        checkpoint::check_model("critic", &critic, &ck.critic)?;
        checkpoint::check_moments("critic", &ck.critic.params, &ck.critic_opt)?;
        let gen = match cfg.stage {
            Stage::Edge => Generator::Edge(edge_arch(&cfg)),
            Stage::Deblur => Generator::Deblur(deblur_arch(&cfg)),
        };
        let expected = gen.arch().fp();
        if ck.generator.fingerprint != expected {
            return Err(Error::Model(format!(
                "generator fingerprint {} in checkpoint does not match configured architecture {expected}",
                ck.generator.fingerprint
            )));
        }
        ck.generator.params.check_against(gen.arch().spec_list())?;
        checkpoint::check_moments("generator", &ck.generator.params, &ck.generator_opt)?;
        let edge = match (cfg.stage, cfg.use_edge, ck.edge) {
            (Stage::Deblur, true, Some(e)) => {
                let arch = edge_arch(&cfg);
                checkpoint::check_model("edge network", &arch, &e)?;
                Some((arch, e))
            }
            (Stage::Deblur, true, None) => {
                return Err(Error::Integrity("deblur checkpoint with use_edge lacks the edge network".into()))
            }
            _ => None,
        };
        let mut rng = ChaCha8Rng::from_seed(ck.rng_seed);
        rng.set_word_pos(ck.rng_word_pos);
        Ok(Trainer {
            cfg,
            fe,
            gen,
            gen_params: ck.generator.params,
            gen_opt: ck.generator_opt,
            critic,
            critic_params: ck.critic.params,
            critic_opt: ck.critic_opt,
            edge,
            rng,
            epoch: ck.epoch,
            cursor: ck.cursor,
            counters: Counters {
                generator_steps: ck.global_step,
                critic_steps: ck.critic_steps,
            },
            gen_version: 0,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            epoch: self.epoch,
            cursor: self.cursor,
            global_step: self.counters.generator_steps,
            critic_steps: self.counters.critic_steps,
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos(),
            generator: ModelParams {
                fingerprint: self.gen.arch().fp(),
                params: self.gen_params.clone(),
            },
            generator_opt: self.gen_opt.clone(),
            critic: ModelParams {
                fingerprint: self.critic.fingerprint(),
                params: self.critic_params.clone(),
            },
            critic_opt: self.critic_opt.clone(),
            edge: self.edge.as_ref().map(|(_, p)| p.clone()),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Changes how long the run goes on; nothing else about a restored run
    /// may change.
    pub fn extend_run(&mut self, epochs: u64, max_steps: u64, checkpoint_every: u64) {
        self.cfg.epochs = epochs;
        self.cfg.max_steps = max_steps;
        self.cfg.checkpoint_every = checkpoint_every;
    }
    pub fn counters(&self) -> Counters {
        self.counters
    }
    pub fn epoch(&self) -> u64 {
        self.epoch
    }
    pub fn generator_params(&self) -> &ParamSet<f32> {
        &self.gen_params
    }
    pub fn critic_params(&self) -> &ParamSet<f32> {
        &self.critic_params
    }
    pub fn edge_params(&self) -> Option<&ParamSet<f32>> {
        self.edge.as_ref().map(|(_, p)| &p.params)
    }

    fn stage_name(&self) -> &'static str {
        self.cfg.stage.name()
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.cfg.adam_beta1,
            beta2: self.cfg.adam_beta2,
            eps: self.cfg.adam_eps,
        }
    }

    /// Crops (and optionally flips) pairs with the trainer's stream and
    /// derives the tensors the steps need.
    pub fn prepare_batch(&mut self, pairs: &[SamplePair]) -> Result<Batch> {
        let mut samples = Vec::with_capacity(pairs.len());
        for pair in pairs {
            let (mut b, mut s, _) = random_crop_pair_with(&pair.blurred, &pair.sharp, self.cfg.crop, &mut self.rng)
                .map_err(|e| Error::Data(format!("pair {}: {e}", pair.id)))?;
            if self.cfg.flip_augment && self.rng.gen_bool(0.5) {
                b = b.flip_horizontal();
                s = s.flip_horizontal();
            }
            samples.push(self.sample_from(&b, &s)?);
        }
        Ok(Batch::new(samples))
    }

    /// Uses a whole pair without cropping.
    pub fn sample_from(&self, blurred: &Image, sharp: &Image) -> Result<Sample> {
        let e_b = signed(&extract_edges(blurred).image);
        Ok(match self.cfg.stage {
            Stage::Edge => Sample {
                blur_levels: Vec::new(),
                real_levels: vec![signed(&extract_edges(sharp).image)],
                edge_input: e_b,
            },
            Stage::Deblur => {
                let edge_input = match &self.edge {
                    Some((arch, p)) => arch.infer(&p.params, e_b)?,
                    None => e_b,
                };
                Sample {
                    blur_levels: build_tensor_pyramid(&signed(blurred), self.cfg.num_scales)?,
                    real_levels: build_tensor_pyramid(&signed(sharp), self.cfg.num_scales)?,
                    edge_input,
                }
            }
        })
    }

    fn generate(&self, s: &Sample) -> Result<(Vec<Tensor<f32>>, GenTrace)> {
        match &self.gen {
            Generator::Edge(g) => {
                let (y, t) = g.forward(&self.gen_params, s.edge_input.clone())?;
                Ok((vec![y], GenTrace::Edge(t)))
            }
            Generator::Deblur(g) => {
                let (ys, t) = multiscale_forward(g, &self.gen_params, &s.blur_levels, &s.edge_input)?;
                Ok((ys, GenTrace::Deblur(t)))
            }
        }
    }

    /// Generator outputs of the current generator, coarse to fine.
    pub fn restore_levels(&self, s: &Sample) -> Result<Vec<Tensor<f32>>> {
        Ok(self.generate(s)?.0)
    }

    fn diverged(&self, kind: &str, detail: String) -> Error {
        Error::TrainingDiverged {
            context: format!(
                "{} stage, epoch {}, {kind} (generator step {}, critic step {})",
                self.stage_name(),
                self.epoch,
                self.counters.generator_steps,
                self.counters.critic_steps
            ),
            detail,
        }
    }

    fn guard(&self, kind: &str, report: &LossReport, grads: &ParamSet<f32>) -> Result<()> {
        report.check_consistency().map_err(|e| self.diverged(kind, e.to_string()))?;
        if let Some(name) = grads.first_non_finite() {
            return Err(self.diverged(kind, format!("non-finite gradient in {name}")));
        }
        Ok(())
    }

    /// One critic update on `batch`. Generator outputs are computed once per
    /// generator version and reused by consecutive critic steps.
    fn ensure_fakes(&self, batch: &mut Batch) -> Result<()> {
        let stale = batch.fakes.as_ref().map_or(true, |(v, _)| *v != self.gen_version);
        if stale {
            let fakes = batch
                .samples
                .iter()
                .map(|s| Ok(self.generate(s)?.0))
                .collect::<Result<Vec<_>>>()?;
            batch.fakes = Some((self.gen_version, fakes));
        }
        Ok(())
    }

    /// The critic loss on `batch` with the penalty averaged over the given
    /// interpolation weights instead of a random draw; no update is made.
    pub fn critic_objective(&self, batch: &mut Batch, eps: &[f64]) -> Result<f64> {
        self.ensure_fakes(batch)?;
        let fakes = &batch.fakes.as_ref().expect("fakes cached").1;
        let critic = BoundCritic {
            arch: &self.critic,
            params: &self.critic_params,
        };
        let mut total = 0.0;
        let mut count = 0.0;
        for (s, fake_levels) in batch.samples.iter().zip(fakes) {
            for (real, fake) in s.real_levels.iter().zip(fake_levels) {
                let mut gp = 0.0;
                for &e in eps {
                    let (_, g) = critic.score_with_input_grad(&interpolate(real, fake, e)?)?;
                    let norm = g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
                    gp += penalty_from_norm(norm, self.cfg.gp_squared);
                }
                total += critic.score(fake)? - critic.score(real)? + self.cfg.lambda_gp * gp / eps.len() as f64;
                count += 1.0;
            }
        }
        Ok(total / count)
    }

    pub fn critic_step(&mut self, batch: &mut Batch) -> Result<LossReport> {
        self.ensure_fakes(batch)?;
        let fakes = &batch.fakes.as_ref().expect("fakes cached").1;
        let n_scales = batch.samples[0].real_levels.len();
        let nb = batch.samples.len() as f64;
        let w = 1.0 / (n_scales as f64 * nb);
        let mut grads = self.critic_params.zeros_like();
        let mut per_scale = vec![(0.0, 0.0); n_scales];
        for (s, fake_levels) in batch.samples.iter().zip(fakes) {
            for (i, (real, fake)) in s.real_levels.iter().zip(fake_levels).enumerate() {
                let p = &self.critic_params;
                let (mf, tf) = self.critic.forward(p, fake.clone())?;
                self.critic.backward_mean(p, &tf, mf.shape(), w as f32, Some(&mut grads));
                let (mr, tr) = self.critic.forward(p, real.clone())?;
                self.critic.backward_mean(p, &tr, mr.shape(), -w as f32, Some(&mut grads));
                let eps: f64 = self.rng.gen();
                let x_hat = interpolate(real, fake, eps)?;
                let pg = patch_critic_penalty_grad(&self.critic, p, &x_hat, self.cfg.gp_squared).map_err(|e| match e {
                    Error::Model(m) => self.diverged("critic step", m),
                    e => e,
                })?;
                grads.add_scaled(&pg.grads, (self.cfg.lambda_gp * w) as f32);
                per_scale[i].0 += (mf.mean_f64() - mr.mean_f64()) / nb;
                per_scale[i].1 += pg.penalty / nb;
            }
        }
        let report = critic_report(&per_scale, self.cfg.lambda_gp).with_position(
            self.stage_name(),
            self.epoch,
            self.counters.critic_steps + 1,
        );
        self.guard("critic step", &report, &grads)?;
        let lr = lr_schedule(self.epoch, &self.cfg);
        let h = self.hyper();
        self.critic_opt.step(&mut self.critic_params, &grads, lr, h);
        self.counters.critic_steps += 1;
        Ok(report)
    }

    /// One generator update on `batch`.
    pub fn generator_step(&mut self, batch: &mut Batch) -> Result<LossReport> {
        let nb = batch.samples.len() as f64;
        let lambda = self.cfg.lambda_content;
        let combined = self.cfg.use_combined_content && self.cfg.stage == Stage::Deblur;
        let mut grads = self.gen_params.zeros_like();
        let mut terms: Vec<ScaleTerms> = Vec::new();
        for s in &batch.samples {
            let (outs, trace) = self.generate(s)?;
            let n = outs.len();
            terms.resize(n, ScaleTerms::default());
            let mut out_grads = Vec::with_capacity(n);
            for (i, (out, real)) in outs.iter().zip(&s.real_levels).enumerate() {
                let (map, tr) = self.critic.forward(&self.critic_params, out.clone())?;
                let mut g =
                    self.critic
                        .backward_mean(&self.critic_params, &tr, map.shape(), (-1.0 / (n as f64 * nb)) as f32, None);
                let (u, su) = (to_unit(out), to_unit(real));
                let target = self.fe.features(self.fe.params(), &su)?;
                let (feat, mut gu) = perceptual_loss_grad(&self.fe, self.fe.params(), &target, &u)?;
                let (mut pixel, mut dc) = (0.0, 0.0);
                if combined {
                    let (pv, gp) = pixel_loss_grad(&su, &u)?;
                    let (dv, gd) = dark_channel_loss_grad(&su, &u, self.cfg.dc_window)?;
                    gu.add_assign(&gp);
                    gu.add_assign(&gd);
                    pixel = pv;
                    dc = dv;
                }
                // d(unit)/d(signed) = 1/2
                g.add_scaled(&gu, (0.5 * lambda / (n as f64 * nb)) as f32);
                out_grads.push(g);
                let t = &mut terms[i];
                t.adv += -map.mean_f64() / nb;
                t.feat += feat / nb;
                t.pixel += pixel / nb;
                t.dc += dc / nb;
            }
            match (&self.gen, trace) {
                (Generator::Edge(g), GenTrace::Edge(t)) => {
                    let gy = out_grads.pop().expect("one output");
                    g.backward(&self.gen_params, &t, gy, Some(&mut grads));
                }
                (Generator::Deblur(g), GenTrace::Deblur(t)) => {
                    multiscale_backward(g, &self.gen_params, &t, out_grads, Some(&mut grads));
                }
                _ => unreachable!("trace matches generator"),
            }
        }
        let report = match self.cfg.stage {
            Stage::Edge => edge_total_loss(terms[0].adv, terms[0].feat, lambda),
            Stage::Deblur => deblur_total_loss(&terms, lambda, self.cfg.use_combined_content),
        }
        .with_position(self.stage_name(), self.epoch, self.counters.generator_steps + 1);
        self.guard("generator step", &report, &grads)?;
        let lr = lr_schedule(self.epoch, &self.cfg);
        let h = self.hyper();
        self.gen_opt.step(&mut self.gen_params, &grads, lr, h);
        self.counters.generator_steps += 1;
        self.gen_version += 1;
        Ok(report)
    }

    /// Critic steps then one generator step; reports in execution order.
    pub fn cycle(&mut self, batch: &mut Batch) -> Result<Vec<LossReport>> {
        let mut out = Vec::with_capacity(self.cfg.critic_steps_per_gen + 1);
        for _ in 0..self.cfg.critic_steps_per_gen {
            out.push(self.critic_step(batch)?);
        }
        out.push(self.generator_step(batch)?);
        Ok(out)
    }

    fn check_params(&self) -> Result<()> {
        for (what, p) in [("generator", &self.gen_params), ("critic", &self.critic_params)] {
            if let Some(name) = p.first_non_finite() {
                return Err(self.diverged("parameter check", format!("{what} parameter {name} is not finite")));
            }
        }
        Ok(())
    }
}

/// Where a run went and how far it got.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoints: Vec<PathBuf>,
    pub counters: Counters,
    pub last_reports: Vec<LossReport>,
}

impl TrainSummary {
    pub fn final_checkpoint(&self) -> &Path {
        self.checkpoints.last().expect("every run saves a checkpoint")
    }
}

fn checkpoint_path(out: &Path, t: &Trainer) -> PathBuf {
    let name = if t.cursor == 0 {
        format!("epoch-{:04}", t.epoch)
    } else {
        format!("epoch-{:04}-step-{:07}", t.epoch, t.counters.generator_steps)
    };
    out.join(CHECKPOINT_DIR).join(name)
}

fn log_line(log: &mut File, out: &Path, line: &str) -> Result<()> {
    writeln!(log, "{line}").map_err(|e| Error::io(out.join(LOG_FILE), e))
}

/// Runs (or resumes) a training stage, writing the log and checkpoints under
/// `out`. A fresh run saves an initial checkpoint; checkpoints follow every
/// `checkpoint_every` epochs and at the end. On divergence the state before
/// the failing update is saved to `out/crash` and the error returned.
pub fn train(trainer: &mut Trainer, data: &dyn Dataset, out: &Path) -> Result<TrainSummary> {
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(LOG_FILE);
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let echo = serde_json::json!({"event": "config", "stage": trainer.stage_name(), "config": trainer.cfg.to_toml()});
    log_line(&mut log, out, &echo.to_string())?;

    let mut summary = TrainSummary {
        checkpoints: Vec::new(),
        counters: trainer.counters,
        last_reports: Vec::new(),
    };
    let save = |t: &Trainer, summary: &mut TrainSummary| -> Result<()> {
        let p = checkpoint_path(out, t);
        t.checkpoint().save(&p)?;
        summary.checkpoints.push(p);
        Ok(())
    };
    if trainer.counters == Counters::default() && trainer.epoch == 0 && trainer.cursor == 0 {
        save(trainer, &mut summary)?;
    }
    let n = data.len();
    let bs = trainer.cfg.batch_size;
    let capped = |t: &Trainer| t.cfg.max_steps > 0 && t.counters.generator_steps >= t.cfg.max_steps;
    'epochs: while trainer.epoch < trainer.cfg.epochs {
        let order = epoch_order(trainer.cfg.seed, trainer.epoch, n);
        while (trainer.cursor as usize) < n {
            if capped(trainer) {
                break 'epochs;
            }
            let start = trainer.cursor as usize;
            let idx = &order[start..(start + bs).min(n)];
            let pairs = idx.iter().map(|&i| data.load(i)).collect::<Result<Vec<_>>>()?;
            let snapshot = trainer.checkpoint();
            let result = trainer
                .prepare_batch(&pairs)
                .and_then(|mut b| trainer.cycle(&mut b))
                .and_then(|r| trainer.check_params().map(|_| r));
            let reports = match result {
                Ok(r) => r,
                Err(e @ Error::TrainingDiverged { .. }) => {
                    snapshot.save(&out.join(CRASH_DIR))?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            for r in &reports {
                log_line(&mut log, out, &r.to_json_line())?;
            }
            summary.last_reports = reports;
            trainer.cursor = (start + idx.len()) as u64;
        }
        trainer.epoch += 1;
        trainer.cursor = 0;
        let every = trainer.cfg.checkpoint_every;
        if every > 0 && trainer.epoch % every == 0 && trainer.epoch < trainer.cfg.epochs {
            save(trainer, &mut summary)?;
        }
    }
    let last = checkpoint_path(out, trainer);
    if summary.checkpoints.last() != Some(&last) {
        save(trainer, &mut summary)?;
    }
    summary.counters = trainer.counters;
    Ok(summary)
}
