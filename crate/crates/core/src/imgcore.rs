//! Image representation, value-range conventions, resampling, pyramids,
//! cropping, padding and PNG I/O.
//!
//! Networks work in the signed range `[-1, 1]`; the perceptual feature network
//! and the dark-channel operator expect the unit range `[0, 1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{reflect_index, Tensor};

const RANGE_TOLERANCE: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RangeTag {
    /// `[0, 1]`
    Unit,
    /// `[-1, 1]`
    Signed,
}

impl RangeTag {
    pub fn bounds(self) -> (f32, f32) {
        match self {
            RangeTag::Unit => (0.0, 1.0),
            RangeTag::Signed => (-1.0, 1.0),
        }
    }
}

/// Floating-point planar raster with a declared value range.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    tensor: Tensor<f32>,
    range: RangeTag,
}

impl Image {
    /// Validates channel count, non-empty extent, finiteness and range.
    pub fn new(tensor: Tensor<f32>, range: RangeTag) -> Result<Self> {
        let (c, h, w) = tensor.shape();
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("image must have 1 or 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::Dimension(format!("empty image {h}x{w}")));
        }
        let (lo, hi) = range.bounds();
        for &v in tensor.data() {
            if !v.is_finite() {
                return Err(Error::Data("image contains a non-finite value".into()));
            }
            if v < lo - RANGE_TOLERANCE || v > hi + RANGE_TOLERANCE {
                return Err(Error::Data(format!(
                    "value {v} outside the {range:?} range [{lo}, {hi}]"
                )));
            }
        }
        Ok(Image { tensor, range })
    }

    /// Clamps into the range before validating; for network outputs that may
    /// overshoot by rounding.
    pub fn new_clamped(tensor: Tensor<f32>, range: RangeTag) -> Result<Self> {
        let (lo, hi) = range.bounds();
        Image::new(tensor.map(|v| v.clamp(lo, hi)), range)
    }

    pub fn constant(c: usize, h: usize, w: usize, v: f32, range: RangeTag) -> Result<Self> {
        Image::new(Tensor::full(c, h, w, v), range)
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }
    pub fn into_tensor(self) -> Tensor<f32> {
        self.tensor
    }
    pub fn range(&self) -> RangeTag {
        self.range
    }
    pub fn shape(&self) -> (usize, usize, usize) {
        self.tensor.shape()
    }
    pub fn channels(&self) -> usize {
        self.tensor.channels()
    }
    pub fn height(&self) -> usize {
        self.tensor.height()
    }
    pub fn width(&self) -> usize {
        self.tensor.width()
    }

    pub fn to_range(&self, target: RangeTag) -> Image {
        normalize(self, target)
    }

    pub fn flip_horizontal(&self) -> Image {
        Image {
            tensor: self.tensor.flip_horizontal(),
            range: self.range,
        }
    }

    /// Converts to a single channel using BT.601 luma weights (no-op for gray).
    pub fn luminance(&self) -> Image {
        if self.channels() == 1 {
            return self.clone();
        }
        let t = &self.tensor;
        let y = Tensor::from_fn(1, t.height(), t.width(), |_, y, x| {
            0.299 * t.at(0, y, x) + 0.587 * t.at(1, y, x) + 0.114 * t.at(2, y, x)
        });
        Image {
            tensor: y,
            range: self.range,
        }
    }
}

/// Affine remap between `[0,1]` and `[-1,1]`.
pub fn normalize(img: &Image, target: RangeTag) -> Image {
    if img.range == target {
        return img.clone();
    }
    let tensor = match target {
        RangeTag::Signed => img.tensor.map(|v| 2.0 * v - 1.0),
        RangeTag::Unit => img.tensor.map(|v| (v + 1.0) * 0.5),
    };
    Image { tensor, range: target }
}

fn check_factor(factor: usize) -> Result<()> {
    if factor == 2 || factor == 4 {
        Ok(())
    } else {
        Err(Error::Config(format!("resampling factor must be 2 or 4, got {factor}")))
    }
}

/// Area-average downsampling of a raw tensor. Any positive factor that divides
/// both spatial dimensions is accepted here; [`downsample`] restricts it.
pub fn downsample_tensor<T: Scalar>(t: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, h, w) = t.shape();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Dimension(format!(
            "{h}x{w} is not divisible by downsampling factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = T::from_f64(1.0 / (factor * factor) as f64);
    Ok(Tensor::from_fn(c, oh, ow, |ch, y, x| {
        let mut acc = T::zero();
        for dy in 0..factor {
            for dx in 0..factor {
                acc += t.at(ch, y * factor + dy, x * factor + dx);
            }
        }
        acc * inv
    }))
}

pub fn downsample(img: &Image, factor: usize) -> Result<Image> {
    check_factor(factor)?;
    Ok(Image {
        tensor: downsample_tensor(&img.tensor, factor)?,
        range: img.range,
    })
}

/// Source coordinate and weights for corner-aligned bilinear sampling: output
/// sample `o` of `n_out` maps to `o·(n_in−1)/(n_out−1)` in the input, so the
/// first and last samples of both grids coincide.
fn bilinear_taps(o: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    if n_in == 1 || n_out == 1 {
        return (0, 0, 0.0);
    }
    let pos = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
    let i0 = (pos.floor() as usize).min(n_in - 1);
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, pos - i0 as f64)
}

pub fn upsample_tensor<T: Scalar>(t: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (c, h, w) = t.shape();
    let (oh, ow) = (h * factor, w * factor);
    let ys: Vec<_> = (0..oh).map(|y| bilinear_taps(y, h, oh)).collect();
    let xs: Vec<_> = (0..ow).map(|x| bilinear_taps(x, w, ow)).collect();
    Tensor::from_fn(c, oh, ow, |ch, y, x| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let (fy, fx) = (T::from_f64(fy), T::from_f64(fx));
        let one = T::one();
        let top = t.at(ch, y0, x0) * (one - fx) + t.at(ch, y0, x1) * fx;
        let bot = t.at(ch, y1, x0) * (one - fx) + t.at(ch, y1, x1) * fx;
        top * (one - fy) + bot * fy
    })
}

/// Adjoint of [`upsample_tensor`]: scatters output gradients back to the
/// source grid of size `h × w`.
pub fn upsample_tensor_backward<T: Scalar>(g: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (c, oh, ow) = g.shape();
    let ys: Vec<_> = (0..oh).map(|y| bilinear_taps(y, h, oh)).collect();
    let xs: Vec<_> = (0..ow).map(|x| bilinear_taps(x, w, ow)).collect();
    let mut out = Tensor::zeros(c, h, w);
    let one = T::one();
    for ch in 0..c {
        for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::from_f64(fy);
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::from_f64(fx);
                let v = g.at(ch, y, x);
                *out.at_mut(ch, y0, x0) += v * (one - fy) * (one - fx);
                *out.at_mut(ch, y0, x1) += v * (one - fy) * fx;
                *out.at_mut(ch, y1, x0) += v * fy * (one - fx);
                *out.at_mut(ch, y1, x1) += v * fy * fx;
            }
        }
    }
    out
}

pub fn upsample(img: &Image, factor: usize) -> Result<Image> {
    check_factor(factor)?;
    Ok(Image {
        tensor: upsample_tensor(&img.tensor, factor),
        range: img.range,
    })
}

/// Coarse-to-fine list of images; `levels[k+1]` is exactly twice `levels[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalePyramid {
    pub levels: Vec<Image>,
}

impl ScalePyramid {
    pub const SCALE_FACTOR: usize = 2;

    pub fn num_scales(&self) -> usize {
        self.levels.len()
    }
    pub fn finest(&self) -> &Image {
        self.levels.last().expect("pyramid has at least one level")
    }
    pub fn coarsest(&self) -> &Image {
        &self.levels[0]
    }
}

pub fn build_pyramid(img: &Image, num_scales: usize) -> Result<ScalePyramid> {
    if num_scales == 0 {
        return Err(Error::Config("num_scales must be at least 1".into()));
    }
    let mut levels = vec![img.clone()];
    for _ in 1..num_scales {
        let next = downsample(levels.last().unwrap(), 2)?;
        levels.push(next);
    }
    levels.reverse();
    Ok(ScalePyramid { levels })
}

/// Same construction on raw tensors.
pub fn build_tensor_pyramid<T: Scalar>(t: &Tensor<T>, num_scales: usize) -> Result<Vec<Tensor<T>>> {
    if num_scales == 0 {
        return Err(Error::Config("num_scales must be at least 1".into()));
    }
    let mut levels = vec![t.clone()];
    for _ in 1..num_scales {
        let next = downsample_tensor(levels.last().unwrap(), 2)?;
        levels.push(next);
    }
    levels.reverse();
    Ok(levels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CropSpec {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

/// Crops the same random square window from both images.
pub fn random_crop_pair_with<R: Rng>(
    a: &Image,
    b: &Image,
    size: usize,
    rng: &mut R,
) -> Result<(Image, Image, CropSpec)> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "crop pair shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (_, h, w) = a.shape();
    if size == 0 || size > h.min(w) {
        return Err(Error::Dimension(format!("crop size {size} does not fit {h}x{w}")));
    }
    let top = rng.gen_range(0..=h - size);
    let left = rng.gen_range(0..=w - size);
    let spec = CropSpec { top, left, size };
    Ok((crop(a, spec), crop(b, spec), spec))
}

pub fn random_crop_pair(a: &Image, b: &Image, size: usize, seed: u64) -> Result<(Image, Image, CropSpec)> {
    random_crop_pair_with(a, b, size, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn crop(img: &Image, spec: CropSpec) -> Image {
    Image {
        tensor: img.tensor.crop(spec.top, spec.left, spec.size, spec.size),
        range: img.range,
    }
}

/// Reflect-pads the bottom and right edges so both dimensions become
/// multiples of `multiple`.
pub fn pad_to_multiple<T: Scalar>(t: &Tensor<T>, multiple: usize) -> Tensor<T> {
    let (c, h, w) = t.shape();
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if ph == h && pw == w {
        return t.clone();
    }
    Tensor::from_fn(c, ph, pw, |ch, y, x| {
        t.at(ch, reflect_index(y as isize, h), reflect_index(x as isize, w))
    })
}

pub fn pad_image_to_multiple(img: &Image, multiple: usize) -> Image {
    Image {
        tensor: pad_to_multiple(&img.tensor, multiple),
        range: img.range,
    }
}

/// Removes padding added by [`pad_image_to_multiple`].
pub fn unpad_image(img: &Image, h: usize, w: usize) -> Image {
    Image {
        tensor: img.tensor.crop(0, 0, h, w),
        range: img.range,
    }
}

/// Decodes an 8-bit PNG (gray, gray+alpha, RGB, RGBA or palette) into a
/// unit-range image. Alpha is discarded; `v / 255` exactly.
pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let decode_err = |msg: String| Error::Decode {
        path: path.to_path_buf(),
        msg,
    };
    let mut reader = decoder.read_info().map_err(|e| decode_err(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(decode_err(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let (src_channels, channels) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(decode_err("unexpanded palette image".into())),
    };
    let bytes = &buf[..info.buffer_size()];
    let stride = info.line_size;
    let tensor = Tensor::from_fn(channels, h, w, |c, y, x| {
        bytes[y * stride + x * src_channels + c] as f32 / 255.0
    });
    Image::new(tensor, RangeTag::Unit)
}

/// Quantizes to 8 bits (clamp, then round half up) and writes a PNG.
pub fn write_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_u8_interleaved(img);
    let (c, h, w) = img.shape();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(if c == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    encoder.set_depth(png::BitDepth::Eight);
    let encode_err = |e: png::EncodingError| Error::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(encode_err)?;
    writer.write_image_data(&bytes).map_err(encode_err)?;
    writer.finish().map_err(encode_err)?;
    Ok(())
}

/// 8-bit interleaved samples of the unit-range version of `img`.
pub fn to_u8_interleaved(img: &Image) -> Vec<u8> {
    let unit = img.to_range(RangeTag::Unit);
    let t = unit.tensor();
    let (c, h, w) = t.shape();
    let mut out = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(quantize_u8(t.at(ch, y, x)));
            }
        }
    }
    out
}

#[inline]
pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(t: Tensor<f32>) -> Image {
        Image::new(t, RangeTag::Unit).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let half = Image::constant(3, 4, 4, 0.5, RangeTag::Unit).unwrap();
        assert!(normalize(&half, RangeTag::Signed).tensor().data().iter().all(|&v| v == 0.0));
        let one = Image::constant(1, 2, 2, 1.0, RangeTag::Unit).unwrap();
        assert!(normalize(&one, RangeTag::Signed).tensor().data().iter().all(|&v| v == 1.0));
        let s = Image::constant(1, 2, 2, -0.2, RangeTag::Signed).unwrap();
        let u = normalize(&s, RangeTag::Unit);
        for &v in u.tensor().data() {
            assert!((v - (-0.2f32 + 1.0) / 2.0).abs() < 1e-7);
        }
        // idempotent
        assert_eq!(normalize(&half, RangeTag::Unit), half);
    }

    #[test]
    fn image_rejects_out_of_range_and_bad_channels() {
        assert!(Image::new(Tensor::full(1, 2, 2, 1.5), RangeTag::Unit).is_err());
        assert!(Image::new(Tensor::full(2, 2, 2, 0.5), RangeTag::Unit).is_err());
        assert!(Image::new(Tensor::full(1, 2, 2, f32::NAN), RangeTag::Unit).is_err());
        assert!(Image::new(Tensor::full(1, 0, 2, 0.0), RangeTag::Unit).is_err());
    }

    #[test]
    fn downsample_examples() {
        let c = Image::constant(3, 8, 8, 0.3, RangeTag::Unit).unwrap();
        let d = downsample(&c, 2).unwrap();
        assert_eq!(d.shape(), (3, 4, 4));
        assert!(d.tensor().data().iter().all(|&v| (v - 0.3).abs() < 1e-7));

        let x = unit(Tensor::from_vec(1, 2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        assert_eq!(downsample(&x, 2).unwrap().tensor().data(), &[0.5]);

        let ramp = unit(Tensor::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f32 / 15.0));
        let d = downsample(&ramp, 2).unwrap();
        for by in 0..2 {
            for bx in 0..2 {
                let mut s = 0.0;
                for y in 2 * by..2 * by + 2 {
                    for x in 2 * bx..2 * bx + 2 {
                        s += ramp.tensor().at(0, y, x);
                    }
                }
                assert!((d.tensor().at(0, by, bx) - s / 4.0).abs() < 1e-7);
            }
        }
        let odd = Image::constant(1, 5, 4, 0.1, RangeTag::Unit).unwrap();
        assert!(matches!(downsample(&odd, 2), Err(Error::Dimension(_))));
        assert!(downsample(&c, 3).is_err());
    }

    #[test]
    fn upsample_examples() {
        let c = Image::constant(1, 3, 5, 0.7, RangeTag::Unit).unwrap();
        let u = upsample(&c, 2).unwrap();
        assert_eq!(u.shape(), (1, 6, 10));
        assert!(u.tensor().data().iter().all(|&v| (v - 0.7).abs() < 1e-7));
        let back = downsample(&u, 2).unwrap();
        assert_eq!(back.shape(), c.shape());
        for (&a, &b) in back.tensor().data().iter().zip(c.tensor().data()) {
            assert!((a - b).abs() < 1e-7);
        }

        let row = unit(Tensor::from_vec(1, 1, 2, vec![0.0, 1.0]).unwrap());
        let up = upsample(&row, 2).unwrap();
        assert_eq!(up.shape(), (1, 2, 4));
        for y in 0..2 {
            let r: Vec<f32> = (0..4).map(|x| up.tensor().at(0, y, x)).collect();
            assert!(r.windows(2).all(|p| p[0] <= p[1]));
            assert_eq!(r[0], 0.0);
            assert_eq!(r[3], 1.0);
            assert!((r[1] - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Tensor::<f64>::from_fn(2, 3, 4, |c, y, x| ((c * 7 + y * 3 + x) as f64).sin());
        let g = Tensor::<f64>::from_fn(2, 6, 8, |c, y, x| ((c * 5 + y * 11 + x) as f64).cos());
        let ux = upsample_tensor(&x, 2);
        let lhs: f64 = ux.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let gb = upsample_tensor_backward(&g, 3, 4);
        let rhs: f64 = x.data().iter().zip(gb.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pyramid_examples() {
        let img = Image::constant(3, 256, 256, 0.25, RangeTag::Unit).unwrap();
        let p1 = build_pyramid(&img, 1).unwrap();
        assert_eq!(p1.levels, vec![img.clone()]);
        let p3 = build_pyramid(&img, 3).unwrap();
        let sizes: Vec<_> = p3.levels.iter().map(|l| l.height()).collect();
        assert_eq!(sizes, vec![64, 128, 256]);
        for l in &p3.levels {
            assert!(l.tensor().data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        }
        assert_eq!(p3.finest(), &img);
        assert!(build_pyramid(&img, 0).is_err());
        let bad = Image::constant(1, 6, 6, 0.0, RangeTag::Unit).unwrap();
        assert!(matches!(build_pyramid(&bad, 3), Err(Error::Dimension(_))));
    }

    #[test]
    fn crop_examples() {
        let a = unit(Tensor::from_fn(3, 16, 16, |c, y, x| ((c + y + x) % 7) as f32 / 7.0));
        let b = a.clone();
        let (ca, cb, spec) = random_crop_pair(&a, &b, 16, 3).unwrap();
        assert_eq!(spec, CropSpec { top: 0, left: 0, size: 16 });
        assert_eq!(ca, a);
        assert_eq!(cb, b);
        let r1 = random_crop_pair(&a, &b, 5, 9).unwrap();
        let r2 = random_crop_pair(&a, &b, 5, 9).unwrap();
        assert_eq!(r1, r2);
        assert!(matches!(random_crop_pair(&a, &b, 17, 0), Err(Error::Dimension(_))));
        let small = Image::constant(3, 8, 8, 0.0, RangeTag::Unit).unwrap();
        assert!(random_crop_pair(&a, &small, 4, 0).is_err());
    }

    #[test]
    fn seeded_crops_stay_in_bounds() {
        let a = Image::constant(1, 512, 512, 0.0, RangeTag::Unit).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let (_, _, s) = random_crop_pair_with(&a, &a, 256, &mut rng).unwrap();
            assert!(s.top + s.size <= 512 && s.left + s.size <= 512);
        }
    }

    #[test]
    fn pad_unpad_round_trip() {
        let img = unit(Tensor::from_fn(3, 250, 250, |c, y, x| ((c * 3 + y * 5 + x) % 11) as f32 / 11.0));
        let p = pad_image_to_multiple(&img, 16);
        assert_eq!(p.shape(), (3, 256, 256));
        assert_eq!(p.tensor().at(0, 250, 3), img.tensor().at(0, 248, 3));
        assert_eq!(unpad_image(&p, 250, 250), img);
    }

    #[test]
    fn png_round_trip_and_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = unit(Tensor::from_fn(3, 5, 7, |c, y, x| ((c * 31 + y * 7 + x * 3) % 256) as f32 / 255.0));
        write_png(&img, &path).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back, img);
        let white = Image::constant(1, 2, 2, 1.0, RangeTag::Unit).unwrap();
        write_png(&white, &path).unwrap();
        assert!(read_png(&path).unwrap().tensor().data().iter().all(|&v| v == 1.0));
        assert_eq!(quantize_u8(0.5), 128);
        assert_eq!(quantize_u8(-0.3), 0);
        assert_eq!(quantize_u8(1.7), 255);
    }
}
