//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use edgeblur::dataio::{scan_gopro, scan_kohler, Split};
use edgeblur::edgeops::dark_channel_trace;
use edgeblur::error::Error;
use edgeblur::imgcore::{pad_to_multiple, build_tensor_pyramid, write_png, Image, RangeTag};
use edgeblur::losses::{
    dark_channel_loss, dark_channel_loss_grad, gradient_penalty_seeded, perceptual_loss_grad, pixel_loss,
    pixel_loss_grad, BoundCritic, Critic, ReportKind,
};
use edgeblur::metrics::{psnr, ssim};
use edgeblur::nets::deblur::DEBLUR_INPUT_CHANNELS;
use edgeblur::nets::{
    multiscale_forward, CriticConfig, DeblurGenerator, DeblurGeneratorConfig, FeatureExtractor, FeatureLayer,
    PatchCritic, ParamSet,
};
use edgeblur::nets::vgg::{IMAGENET_MEAN, IMAGENET_STD};
use edgeblur::nets::Architecture;
use edgeblur::pipeline::Pipeline;
use edgeblur::scalar::Dual;
use edgeblur::tensor::Tensor;
use edgeblur::trainer::{lr_schedule, train, Checkpoint, ConfigSources, Preset, Stage, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn rand_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(c, h, w, |_, _, _| rng.gen::<f64>())
}

fn resolve(stage: Stage, overrides: &[&str]) -> TrainConfig {
    let ov: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    TrainConfig::resolve(&ConfigSources {
        overrides: &ov,
        stage: Some(stage),
        ..Default::default()
    })
    .expect("valid config")
}

/// Smallest config that still runs every part of the pipeline.
const TINY: &[&str] = &[
    "crop=16",
    "num_scales=2",
    "critic_layers=2",
    "critic_width=4",
    "edge_width=4",
    "deblur_width=4",
    "res_blocks=1",
    "feature_layer=conv2_2",
    "dc_window=3",
];

fn tiny(stage: Stage, extra: &[&str]) -> TrainConfig {
    let mut ov = TINY.to_vec();
    ov.extend_from_slice(extra);
    resolve(stage, &ov)
}

fn trainer(cfg: TrainConfig) -> Trainer {
    Trainer::new(cfg).expect("trainer builds")
}

// ---------------------------------------------------------------- oracles

fn loop_mse(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s / a.len() as f64
}

/// Direct dark channel: min over all channels of a clipped window.
fn brute_dark(t: &Tensor<f64>, window: usize) -> Vec<f64> {
    let (c, h, w) = t.shape();
    let r = window as isize / 2;
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut m = f64::INFINITY;
            for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                    for ch in 0..c {
                        m = m.min(t.at(ch, yy as usize, xx as usize));
                    }
                }
            }
            out.push(m);
        }
    }
    out
}

/// 3×3 zero-padded convolution followed by ReLU, written as plain loops.
fn naive_conv_relu(x: &[f64], in_c: usize, h: usize, w: usize, weight: &[f32], bias: &[f32]) -> Vec<f64> {
    let out_c = bias.len();
    let mut y = vec![0.0; out_c * h * w];
    for o in 0..out_c {
        for i in 0..h {
            for j in 0..w {
                let mut s = bias[o] as f64;
                for c in 0..in_c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (yy, xx) = (i as isize + ky as isize - 1, j as isize + kx as isize - 1);
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                continue;
                            }
                            let wv = weight[((o * in_c + c) * 3 + ky) * 3 + kx] as f64;
                            s += wv * x[(c * h + yy as usize) * w + xx as usize];
                        }
                    }
                }
                y[(o * h + i) * w + j] = s.max(0.0);
            }
        }
    }
    y
}

fn naive_maxpool(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let at = |a: usize, b: usize| x[(ch * h + a) * w + b];
                y[(ch * oh + i) * ow + j] = at(2 * i, 2 * j).max(at(2 * i, 2 * j + 1)).max(at(2 * i + 1, 2 * j)).max(at(2 * i + 1, 2 * j + 1));
            }
        }
    }
    y
}

/// VGG trunk up to conv3_3 from the named weights, in f64 loops.
fn naive_vgg(fe: &FeatureExtractor, x: &Tensor<f64>) -> Vec<f64> {
    let (_, mut h, mut w) = x.shape();
    let mut cur: Vec<f64> = (0..3 * h * w)
        .map(|i| {
            let c = i / (h * w);
            (x.data()[i] - IMAGENET_MEAN[c]) / IMAGENET_STD[c]
        })
        .collect();
    let mut c = 3;
    for name in ["conv1_1", "conv1_2", "pool", "conv2_1", "conv2_2", "pool", "conv3_1", "conv3_2", "conv3_3"] {
        if name == "pool" {
            cur = naive_maxpool(&cur, c, h, w);
            h /= 2;
            w /= 2;
            continue;
        }
        let wt = &fe.params().by_name(&format!("{name}.weight")).expect("weight").data;
        let b = &fe.params().by_name(&format!("{name}.bias")).expect("bias").data;
        cur = naive_conv_relu(&cur, c, h, w, wt, b);
        c = b.len();
    }
    cur
}

struct Quadratic {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Critic<f64> for Quadratic {
    fn score(&self, x: &Tensor<f64>) -> edgeblur::error::Result<f64> {
        Ok(x.data().iter().enumerate().map(|(i, v)| 0.5 * self.a[i] * v * v + self.b[i] * v).sum())
    }
    fn score_with_input_grad(&self, x: &Tensor<f64>) -> edgeblur::error::Result<(f64, Tensor<f64>)> {
        let mut g = x.clone();
        for (i, v) in g.data_mut().iter_mut().enumerate() {
            *v = self.a[i] * *v + self.b[i];
        }
        Ok((self.score(x)?, g))
    }
}

/// Gradient norm at `x` by forward-mode differentiation, one input element
/// at a time.
fn forward_mode_grad_norm(arch: &PatchCritic, p: &ParamSet<f64>, x: &Tensor<f64>) -> f64 {
    let pd = p.cast(Dual::constant);
    let mut sq = 0.0;
    for k in 0..x.len() {
        let mut xd = x.cast(Dual::constant);
        xd.data_mut()[k].eps = 1.0;
        let (map, _) = arch.forward(&pd, xd).expect("critic forward");
        let d: f64 = map.data().iter().map(|v| v.eps).sum::<f64>() / map.len() as f64;
        sq += d * d;
    }
    sq.sqrt()
}

fn eps_for(seed: u64) -> f64 {
    ChaCha8Rng::seed_from_u64(seed).gen()
}

// ---------------------------------------------------------------- criteria

fn c1_loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (y, yh) = (rand_tensor(&mut rng, 3, 8, 8), rand_tensor(&mut rng, 3, 8, 8));
        let e = rel_err(pixel_loss(&y, &yh).unwrap(), loop_mse(y.data(), yh.data()));
        ensure!(e <= 1e-6, "pixel loss off by {e:e}");
        worst = worst.max(e);
    }

    let fe = FeatureExtractor::random(FeatureLayer::Conv3_3, 7);
    let p64 = fe.params().cast(|v| v as f64);
    for _ in 0..20 {
        let (y, yh) = (rand_tensor(&mut rng, 3, 8, 8), rand_tensor(&mut rng, 3, 8, 8));
        let target = fe.features(&p64, &y).unwrap();
        let (loss, _) = perceptual_loss_grad(&fe, &p64, &target, &yh).unwrap();
        let oracle = loop_mse(&naive_vgg(&fe, &y), &naive_vgg(&fe, &yh));
        let e = rel_err(loss, oracle);
        ensure!(e <= 1e-6, "perceptual loss {loss} vs oracle {oracle}");
        worst = worst.max(e);
    }

    for i in 0..20 {
        let (y, yh) = (rand_tensor(&mut rng, 3, 9, 7), rand_tensor(&mut rng, 3, 9, 7));
        let window = [1, 3, 5, 35][i % 4];
        let (a, b) = (brute_dark(&y, window), brute_dark(&yh, window));
        let oracle = a.iter().zip(&b).map(|(p, q)| (q - p).abs()).sum::<f64>() / a.len() as f64;
        let e = rel_err(dark_channel_loss(&y, &yh, window).unwrap(), oracle);
        ensure!(e <= 1e-6, "dark channel loss off by {e:e} (window {window})");
        worst = worst.max(e);
    }

    for seed in 0..20u64 {
        let n = 3 * 4 * 4;
        let q = Quadratic {
            a: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            b: (0..n).map(|_| rng.gen_range(-0.2..0.2)).collect(),
        };
        let (real, fake) = (rand_tensor(&mut rng, 3, 4, 4), rand_tensor(&mut rng, 3, 4, 4));
        let eps = eps_for(seed);
        let mut sq = 0.0;
        for i in 0..n {
            let x = eps * real.data()[i] + (1.0 - eps) * fake.data()[i];
            let g = q.a[i] * x + q.b[i];
            sq += g * g;
        }
        let oracle = (sq.sqrt() - 1.0).powi(2);
        let e = rel_err(gradient_penalty_seeded(&q, &real, &fake, seed, true).unwrap(), oracle);
        ensure!(e <= 1e-6, "quadratic-critic penalty off by {e:e}");
        worst = worst.max(e);
    }

    let arch = PatchCritic::new(CriticConfig::image(4, 2));
    for seed in 0..20u64 {
        let p = arch.init_params(100 + seed).cast(|v| v as f64);
        let (real, fake) = (rand_tensor(&mut rng, 3, 8, 8), rand_tensor(&mut rng, 3, 8, 8));
        let eps = eps_for(seed);
        let mut x_hat = fake.clone();
        for (i, v) in x_hat.data_mut().iter_mut().enumerate() {
            *v = eps * real.data()[i] + (1.0 - eps) * fake.data()[i];
        }
        let oracle = (forward_mode_grad_norm(&arch, &p, &x_hat) - 1.0).powi(2);
        let critic = BoundCritic { arch: &arch, params: &p };
        let e = rel_err(gradient_penalty_seeded(&critic, &real, &fake, seed, true).unwrap(), oracle);
        ensure!(e <= 1e-6, "patch-critic penalty off by {e:e}");
        worst = worst.max(e);
    }
    Ok(format!("100 cases, worst relative error {worst:.1e}"))
}

fn c2_gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    let (mut worst, mut skipped, mut checked): (f64, usize, usize) = (0.0, 0, 0);
    for _ in 0..5 {
        let (y, yh) = (rand_tensor(&mut rng, 3, 8, 8), rand_tensor(&mut rng, 3, 8, 8));
        let (_, g) = pixel_loss_grad(&y, &yh).unwrap();
        for k in 0..yh.len() {
            let (mut p, mut m) = (yh.clone(), yh.clone());
            p.data_mut()[k] += h;
            m.data_mut()[k] -= h;
            let fd = (pixel_loss(&y, &p).unwrap() - pixel_loss(&y, &m).unwrap()) / (2.0 * h);
            let e = rel_err(g.data()[k], fd);
            ensure!(e <= 1e-3, "pixel gradient at {k}: {} vs {fd}", g.data()[k]);
            worst = worst.max(e);
            checked += 1;
        }

        let window = 3;
        let (_, g) = dark_channel_loss_grad(&y, &yh, window).unwrap();
        let base = dark_channel_trace(&yh, window).unwrap();
        let ref_vals = dark_channel_trace(&y, window).unwrap().values;
        let signs = |t: &Tensor<f64>| -> Vec<i8> {
            t.data().iter().zip(ref_vals.data()).map(|(b, a)| (b - a).signum() as i8).collect()
        };
        let base_signs = signs(&base.values);
        for k in 0..yh.len() {
            let (mut p, mut m) = (yh.clone(), yh.clone());
            p.data_mut()[k] += h;
            m.data_mut()[k] -= h;
            let (tp, tm) = (dark_channel_trace(&p, window).unwrap(), dark_channel_trace(&m, window).unwrap());
            // a tie point changes the selected minimum or a sign inside ±h
            if tp.argmin != base.argmin || tm.argmin != base.argmin || signs(&tp.values) != base_signs || signs(&tm.values) != base_signs {
                skipped += 1;
                continue;
            }
            let fd = (dark_channel_loss(&y, &p, window).unwrap() - dark_channel_loss(&y, &m, window).unwrap()) / (2.0 * h);
            let a = g.data()[k];
            let e = if a == 0.0 && fd.abs() < 1e-9 { 0.0 } else { rel_err(a, fd) };
            ensure!(e <= 1e-3, "dark channel gradient at {k}: {a} vs {fd}");
            worst = worst.max(e);
            checked += 1;
        }
    }
    Ok(format!("{checked} coordinates checked, {skipped} tie points excluded, worst {worst:.1e}"))
}

struct Linear(Vec<f64>);
impl Critic<f64> for Linear {
    fn score(&self, x: &Tensor<f64>) -> edgeblur::error::Result<f64> {
        Ok(x.data().iter().zip(&self.0).map(|(a, b)| a * b).sum())
    }
    fn score_with_input_grad(&self, x: &Tensor<f64>) -> edgeblur::error::Result<(f64, Tensor<f64>)> {
        let g = Tensor::from_vec(x.channels(), x.height(), x.width(), self.0.clone())?;
        Ok((self.score(x)?, g))
    }
}

fn c3_penalty_closed_forms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..10u64 {
        let (real, fake) = (rand_tensor(&mut rng, 3, 5, 5), rand_tensor(&mut rng, 3, 5, 5));
        let u: Vec<f64> = (0..real.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        let unit = Linear(u.iter().map(|v| v / norm).collect());
        let p = gradient_penalty_seeded(&unit, &real, &fake, seed, true).unwrap();
        ensure!(p <= 1e-10, "unit-gradient critic penalty {p:e}");
        let constant = Linear(vec![0.0; real.len()]);
        let p = gradient_penalty_seeded(&constant, &real, &fake, seed, true).unwrap();
        ensure!((p - 1.0).abs() <= 1e-10, "constant critic penalty {p}");
        for n in [1usize, 4, 48, 75, 1000] {
            let (r, f) = (rand_tensor(&mut rng, 1, 1, n), rand_tensor(&mut rng, 1, 1, n));
            let p = gradient_penalty_seeded(&Linear(vec![1.0; n]), &r, &f, seed, true).unwrap();
            let expect = ((n as f64).sqrt() - 1.0).powi(2);
            ensure!((p - expect).abs() <= 1e-8, "sum critic on {n}: {p} vs {expect}");
        }
    }
    Ok("unit, constant and sum critics match".into())
}

fn c4_shapes() -> Outcome {
    let gen = DeblurGenerator::new(DeblurGeneratorConfig::default());
    let params = gen.init_params(4);
    let cfg = TrainConfig::default();
    let multiple = 4 << (cfg.num_scales - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for size in [64usize, 128, 256, 250] {
        let img = Tensor::from_fn(3, size, size, |_, _, _| rng.gen_range(-1.0f32..1.0));
        let padded = pad_to_multiple(&img, multiple);
        let s = padded.height();
        ensure!(s % multiple == 0 && s >= size && s - size < multiple, "padding {size} gave {s}");
        let levels = build_tensor_pyramid(&padded, cfg.num_scales).map_err(|e| e.to_string())?;
        let edge = Tensor::zeros(1, s, s);
        let (outs, trace) = multiscale_forward(&gen, &params, &levels, &edge).map_err(|e| e.to_string())?;
        for (i, o) in outs.iter().enumerate() {
            let k = s >> (cfg.num_scales - 1 - i);
            ensure!(o.shape() == (3, k, k), "scale {i} of {size}: {:?}", o.shape());
            ensure!(trace.sizes[i] == (k, k), "scale {i} input size {:?}", trace.sizes[i]);
            let chans: Vec<usize> = trace.scales[i].stage_shapes.iter().map(|t| t.0).collect();
            ensure!(chans == [64, 128, 256, 256, 128, 64, 3], "channel ladder {chans:?}");
            let bottleneck = trace.scales[i].stage_shapes[2];
            ensure!(bottleneck == (256, k / 4, k / 4), "bottleneck {bottleneck:?}");
        }
    }
    ensure!(DEBLUR_INPUT_CHANNELS == 7, "input contract");
    let six = Tensor::zeros(6, 16, 16);
    ensure!(gen.forward(&params, six).is_err(), "6-channel input accepted");
    Ok("sizes 64/128/256/250 give exact pyramids, 7→64→128→256 ladder".into())
}

fn c5_schedule() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let pairs = common::synthetic_pairs(10, 16, 5);
    let mut t = trainer(tiny(Stage::Deblur, &["use_edge=false", "epochs=1"]));
    let summary = train(&mut t, &pairs, dir.path()).map_err(|e| e.to_string())?;
    let c = summary.counters;
    ensure!(c.generator_steps == 10 && c.critic_steps == 50, "counters {c:?}");
    let log = fs::read_to_string(dir.path().join("train_log.ndjson")).unwrap();
    let mut run = 0;
    for line in log.lines().skip(1) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        match v["kind"].as_str() {
            Some("critic") => run += 1,
            Some("generator") => {
                ensure!(run == 5, "{run} critic steps before a generator step");
                run = 0;
            }
            k => return Err(format!("unexpected record kind {k:?}")),
        }
    }
    let d = TrainConfig::default();
    let (a, b, c) = (lr_schedule(0, &d), lr_schedule(600, &d), lr_schedule(900, &d));
    ensure!(a == 1e-4 && b == 1e-6 && c == 1e-6, "lr {a} {b} {c}");
    for e in 0..700 {
        ensure!(lr_schedule(e + 1, &d) <= lr_schedule(e, &d), "lr rises at epoch {e}");
    }
    Ok("10 generator / 50 critic steps, lr 1e-4 → 1e-6".into())
}

/// Width-reduced configuration for the overfit run.
const SMOKE: &[&str] = &[
    "crop=64",
    "edge_width=8",
    "deblur_width=16",
    "res_blocks=3",
    "critic_width=16",
    "epochs=100000",
];

fn mean_psnr(restore: impl Fn(&Image) -> Image, pairs: &[edgeblur::dataio::SamplePair]) -> f64 {
    pairs.iter().map(|p| psnr(&p.sharp, &restore(&p.blurred)).unwrap()).sum::<f64>() / pairs.len() as f64
}

fn c6_overfit() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let pairs = common::synthetic_pairs(8, 64, 1);
    let baseline = mean_psnr(|b| b.clone(), &pairs);

    let mut ov = SMOKE.to_vec();
    ov.push("max_steps=300");
    let mut edge = trainer(resolve(Stage::Edge, &ov));
    let es = train(&mut edge, &pairs, &dir.path().join("edge")).map_err(|e| e.to_string())?;
    let edge_ck = es.final_checkpoint().to_string_lossy().into_owned();

    let mut ov = SMOKE.to_vec();
    let edge_key = format!("edge_checkpoint={edge_ck}");
    ov.push(&edge_key);
    let cfg = resolve(Stage::Deblur, &ov);
    ensure!(cfg.preset() == Preset::Proposed, "not the proposed preset");
    let mut t = trainer(cfg);
    let mut best = f64::NEG_INFINITY;
    let mut steps = 0;
    while steps < 2000 {
        steps += 250;
        t.extend_run(100_000, steps, 0);
        train(&mut t, &pairs, &dir.path().join("deblur")).map_err(|e| e.to_string())?;
        let pipe = Pipeline::from_loaded(t.checkpoint(), None).map_err(|e| e.to_string())?;
        let score = mean_psnr(|b| pipe.restore_full(b).unwrap().image, &pairs);
        report(&format!("    overfit: {steps} generator steps, mean PSNR {score:.3} dB (baseline {baseline:.3} dB)"));
        best = best.max(score);
        if score >= baseline + 1.0 {
            break;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(best >= baseline + 1.0, "best {best:.3} dB after {steps} steps, baseline {baseline:.3} dB");
    ensure!(secs <= 7200.0, "took {secs:.0} s");
    Ok(format!("{best:.2} dB vs baseline {baseline:.2} dB after {steps} steps in {secs:.0} s"))
}

fn c7_presets() -> Outcome {
    let matrix = [(Preset::B, false, false), (Preset::BE, true, false), (Preset::BC, false, true), (Preset::Proposed, true, true)];
    let dir = tempfile::tempdir().unwrap();
    let pairs = common::synthetic_pairs(4, 32, 7);
    let mut ov = TINY.to_vec();
    ov.extend_from_slice(&["crop=32", "num_scales=3", "max_steps=10", "epochs=1000"]);
    let mut edge = trainer(resolve(Stage::Edge, &ov));
    let edge_ck = train(&mut edge, &pairs, &dir.path().join("edge"))
        .map_err(|e| e.to_string())?
        .final_checkpoint()
        .to_string_lossy()
        .into_owned();
    for (preset, use_edge, combined) in matrix {
        let overrides: Vec<String> = ov
            .iter()
            .map(|s| s.to_string())
            .chain(["max_steps=50".to_string(), format!("edge_checkpoint={edge_ck}")])
            .collect();
        let cfg = TrainConfig::resolve(&ConfigSources {
            overrides: &overrides,
            preset: Some(preset),
            stage: Some(Stage::Deblur),
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        ensure!(cfg.use_edge == use_edge && cfg.use_combined_content == combined, "{preset} flags");
        let out = dir.path().join(preset.to_string());
        let mut t = trainer(cfg);
        let s = train(&mut t, &pairs, &out).map_err(|e| format!("{preset}: {e}"))?;
        ensure!(s.counters.generator_steps == 50, "{preset}: {:?}", s.counters);
        ensure!(t.generator_params().all_finite() && t.critic_params().all_finite(), "{preset}: non-finite");
        ensure!(!out.join("crash").exists(), "{preset}: crash snapshot written");
    }
    Ok("B, BE, BC, proposed flags match; 50 steps each".into())
}

fn c8_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let base = Tensor::from_fn(3, 32, 32, |_, _, _| rng.gen_range(0.0f32..(239.0 / 255.0)));
    let y = Image::new(base.clone(), RangeTag::Unit).unwrap();
    let shifted = Image::new(base.map(|v| v + 16.0 / 255.0), RangeTag::Unit).unwrap();
    let p = psnr(&y, &shifted).unwrap();
    let closed = 20.0 * (255.0f64 / 16.0).log10();
    ensure!((p - closed).abs() <= 1e-3, "psnr {p} vs {closed}");
    let s = ssim(&y, &y).unwrap();
    ensure!(s == 1.0, "ssim(y, y) = {s}");
    let c1 = (0.01f64).powi(2);
    for (a, b) in [(0.2f32, 0.7f32), (0.5, 0.5), (0.0, 1.0), (0.9, 0.1)] {
        let ia = Image::constant(3, 16, 16, a, RangeTag::Unit).unwrap();
        let ib = Image::constant(3, 16, 16, b, RangeTag::Unit).unwrap();
        let (la, lb) = (ia.luminance().tensor().data()[0] as f64, ib.luminance().tensor().data()[0] as f64);
        let closed = (2.0 * la * lb + c1) / (la * la + lb * lb + c1);
        let s = ssim(&ia, &ib).unwrap();
        ensure!((s - closed).abs() <= 1e-9, "constant ssim {s} vs {closed}");
    }
    Ok(format!("PSNR {p:.4} dB (closed form {closed:.4}), SSIM identities hold"))
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let pairs = common::synthetic_pairs(4, 16, 9);
    let cfg = tiny(Stage::Deblur, &["use_edge=false", "max_steps=10", "epochs=100", "seed=11"]);
    let run = |name: &str| {
        let mut t = trainer(cfg.clone());
        let s = train(&mut t, &pairs, &dir.path().join(name)).unwrap();
        dir_bytes(s.final_checkpoint())
    };
    ensure!(run("a") == run("b"), "two runs differ after 10 steps");

    let cfg = tiny(Stage::Deblur, &["use_edge=false", "epochs=3", "checkpoint_every=1", "seed=12"]);
    let full_out = dir.path().join("full");
    let mut t = trainer(cfg.clone());
    train(&mut t, &pairs, &full_out).unwrap();
    let records = |out: &Path| -> Vec<String> {
        fs::read_to_string(out.join("train_log.ndjson"))
            .unwrap()
            .lines()
            .filter(|l| l.contains("\"kind\""))
            .map(String::from)
            .collect()
    };
    let full = records(&full_out);
    let ck_dir = full_out.join("checkpoints/epoch-0001");
    let ck = Checkpoint::load(&ck_dir).map_err(|e| e.to_string())?;
    let fe = FeatureExtractor::from_env(ck.config.feature_layer().unwrap()).unwrap();
    let mut resumed = Trainer::from_checkpoint(ck.clone(), fe).map_err(|e| e.to_string())?;
    let resumed_out = dir.path().join("resumed");
    train(&mut resumed, &pairs, &resumed_out).unwrap();
    let tail = records(&resumed_out);
    ensure!(!tail.is_empty() && full.ends_with(&tail), "resumed reports differ from the uninterrupted run");
    let first: edgeblur::losses::LossReport = serde_json::from_str(&tail[0]).unwrap();
    ensure!(first.kind == ReportKind::Critic && first.epoch == 1, "first resumed record {first:?}");

    let again = dir.path().join("again");
    ck.save(&again).unwrap();
    ensure!(dir_bytes(&again) == dir_bytes(&ck_dir), "save→load→save changed bytes");
    Ok(format!("bit-identical checkpoints; resume reproduced {} records", tail.len()))
}

fn put_png(path: &Path) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    write_png(&Image::constant(3, 8, 8, 0.5, RangeTag::Unit).unwrap(), path).unwrap();
}

fn c10_ingestion() -> Outcome {
    let g = tempfile::tempdir().unwrap();
    for (split, seq, n) in [("train", "S1", 4), ("train", "S2", 3), ("test", "S3", 2)] {
        for k in 0..n {
            put_png(&g.path().join(format!("{split}/{seq}/blur/{k:06}.png")));
            put_png(&g.path().join(format!("{split}/{seq}/sharp/{k:06}.png")));
        }
    }
    put_png(&g.path().join("train/S1/blur/000100.png"));
    put_png(&g.path().join("test/S3/sharp/000200.png"));
    let m = scan_gopro(g.path()).map_err(|e| e.to_string())?;
    ensure!(m.count(Split::Train) == 7 && m.count(Split::Test) == 2, "counts {} / {}", m.count(Split::Train), m.count(Split::Test));
    ensure!(m.warnings.len() == 2, "warnings {:?}", m.warnings);

    let k = tempfile::tempdir().unwrap();
    for i in 1..=4 {
        put_png(&k.path().join(format!("GroundTruth{i}.png")));
        for j in 1..=12 {
            put_png(&k.path().join(format!("Blurry{i}_{j}.png")));
        }
    }
    let full = scan_kohler(k.path()).map_err(|e| e.to_string())?;
    ensure!(full.len() == 48 && full.count(Split::Test) == 48, "{} Köhler pairs", full.len());
    fs::remove_file(k.path().join("Blurry3_7.png")).unwrap();
    match scan_kohler(k.path()) {
        Err(Error::Integrity(msg)) => ensure!(msg.contains("3") && msg.contains("7"), "message {msg}"),
        other => return Err(format!("47-image tree gave {other:?}")),
    }
    Ok("GoPro 7+2 pairs with 2 warnings; 47-image Köhler tree rejected".into())
}

/// Writes straight to stdout so the lines show without `--nocapture`.
fn report(line: &str) {
    let mut out = std::io::stdout();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("loss oracle equivalence", c1_loss_oracles),
        ("gradient checks", c2_gradient_checks),
        ("gradient penalty closed forms", c3_penalty_closed_forms),
        ("architecture shapes", c4_shapes),
        ("schedule conformance", c5_schedule),
        ("overfit smoke test", c6_overfit),
        ("ablation presets", c7_presets),
        ("metric correctness", c8_metrics),
        ("determinism", c9_determinism),
        ("data ingestion", c10_ingestion),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => report(&format!("criterion {:>2} PASS {name}: {detail} [{secs:.1}s]", i + 1)),
            Err(detail) => {
                report(&format!("criterion {:>2} FAIL {name}: {detail} [{secs:.1}s]", i + 1));
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
