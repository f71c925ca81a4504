//! Synthetic paired data for integration tests.
#![allow(dead_code)]

use std::path::Path;

use edgeblur::dataio::{SamplePair, Source};
use edgeblur::imgcore::{write_png, Image, RangeTag};
use edgeblur::tensor::{reflect_index, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth background with a handful of flat-colored rectangles.
pub fn sharp_scene(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f32> {
    let base: [f32; 3] = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
    let slope: f32 = rng.gen_range(-0.3..0.3);
    let mut t = Tensor::from_fn(3, h, w, |c, y, _| (base[c] + slope * (y as f32 / h as f32 - 0.5)).clamp(0.0, 1.0));
    for _ in 0..6 {
        let (y0, x0) = (rng.gen_range(0..h - 4), rng.gen_range(0..w - 4));
        let (rh, rw) = (rng.gen_range(4..=h / 2), rng.gen_range(4..=w / 2));
        let col: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        for c in 0..3 {
            for y in y0..(y0 + rh).min(h) {
                for x in x0..(x0 + rw).min(w) {
                    *t.at_mut(c, y, x) = col[c];
                }
            }
        }
    }
    t
}

/// Linear motion blur of odd length `len` along direction `(dy, dx)`.
pub fn motion_blur(t: &Tensor<f32>, len: usize, dy: f32, dx: f32) -> Tensor<f32> {
    let (c, h, w) = t.shape();
    let r = (len / 2) as isize;
    Tensor::from_fn(c, h, w, |ch, y, x| {
        let mut s = 0.0;
        for k in -r..=r {
            let yy = reflect_index(y as isize + (k as f32 * dy).round() as isize, h);
            let xx = reflect_index(x as isize + (k as f32 * dx).round() as isize, w);
            s += t.at(ch, yy, xx);
        }
        s / len as f32
    })
}

pub fn synthetic_pairs(n: usize, size: usize, seed: u64) -> Vec<SamplePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let sharp = sharp_scene(&mut rng, size, size);
            let angle: f32 = rng.gen_range(0.0..std::f32::consts::PI);
            let blurred = motion_blur(&sharp, 7, angle.sin(), angle.cos());
            SamplePair {
                id: format!("synth_{i:03}"),
                source: Source::Custom,
                blurred: Image::new(blurred, RangeTag::Unit).unwrap(),
                sharp: Image::new(sharp, RangeTag::Unit).unwrap(),
            }
        })
        .collect()
}

/// Writes pairs in the custom `blur/` + `sharp/` layout.
pub fn write_custom(root: &Path, pairs: &[SamplePair]) {
    std::fs::create_dir_all(root.join("blur")).unwrap();
    std::fs::create_dir_all(root.join("sharp")).unwrap();
    for p in pairs {
        write_png(&p.blurred, root.join("blur").join(format!("{}.png", p.id))).unwrap();
        write_png(&p.sharp, root.join("sharp").join(format!("{}.png", p.id))).unwrap();
    }
}
