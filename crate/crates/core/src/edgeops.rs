//! Edge extraction and the dark-channel operator.

use crate::error::{Error, Result};
use crate::imgcore::{Image, RangeTag};
use crate::scalar::Scalar;
use crate::tensor::{reflect_index, Tensor};

/// Which image an edge map was derived from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeRole {
    /// Extracted from a blurred input.
    Blurred,
    /// Produced by the edge generator.
    Restored,
    /// Extracted from a sharp reference.
    Sharp,
}

/// Single-channel unit-range edge strength map.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    pub image: Image,
    pub role: EdgeRole,
}

impl EdgeMap {
    pub fn new(image: Image, role: EdgeRole) -> Result<Self> {
        if image.channels() != 1 {
            return Err(Error::Shape(format!(
                "edge map must have one channel, got {}",
                image.channels()
            )));
        }
        Ok(EdgeMap {
            image: image.to_range(RangeTag::Unit),
            role,
        })
    }
}

/// Pluggable edge extractor.
pub trait EdgeOperator {
    fn extract(&self, img: &Image, role: EdgeRole) -> EdgeMap;
}

/// Sobel gradient magnitude, max over channels, scaled by `1 / (4√2)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sobel;

impl Sobel {
    /// Largest magnitude a unit-range input can produce: each 3×3 Sobel
    /// response is bounded by 4.
    pub const NORMALIZER: f32 = 4.0 * std::f32::consts::SQRT_2;
}

impl EdgeOperator for Sobel {
    fn extract(&self, img: &Image, role: EdgeRole) -> EdgeMap {
        let unit = img.to_range(RangeTag::Unit);
        let t = unit.tensor();
        let (c, h, w) = t.shape();
        let mut out = Tensor::<f32>::zeros(1, h, w);
        for ch in 0..c {
            let px = |y: isize, x: isize| t.at(ch, reflect_index(y, h), reflect_index(x, w));
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let gx = (px(y - 1, x + 1) + 2.0 * px(y, x + 1) + px(y + 1, x + 1))
                        - (px(y - 1, x - 1) + 2.0 * px(y, x - 1) + px(y + 1, x - 1));
                    let gy = (px(y + 1, x - 1) + 2.0 * px(y + 1, x) + px(y + 1, x + 1))
                        - (px(y - 1, x - 1) + 2.0 * px(y - 1, x) + px(y - 1, x + 1));
                    let mag = (gx * gx + gy * gy).sqrt() / Self::NORMALIZER;
                    let dst = out.at_mut(0, y as usize, x as usize);
                    if mag > *dst {
                        *dst = mag;
                    }
                }
            }
        }
        let image = Image::new_clamped(out, RangeTag::Unit).expect("sobel output is finite");
        EdgeMap { image, role }
    }
}

/// Sobel edge map of `img`; the role is recorded as [`EdgeRole::Blurred`]
/// unless re-tagged by the caller.
pub fn extract_edges(img: &Image) -> EdgeMap {
    Sobel.extract(img, EdgeRole::Blurred)
}

pub fn extract_edges_as(img: &Image, role: EdgeRole) -> EdgeMap {
    Sobel.extract(img, role)
}

pub const DEFAULT_DARK_CHANNEL_WINDOW: usize = 35;

/// Dark channel of a unit-range image.
#[derive(Clone, Debug, PartialEq)]
pub struct DarkChannelMap {
    pub image: Image,
    pub window: usize,
}

/// Dark channel values together with the flat index (into the source tensor)
/// of the selected minimum for every output pixel.
#[derive(Clone, Debug)]
pub struct DarkChannelTrace<T> {
    pub values: Tensor<T>,
    pub argmin: Vec<usize>,
}

fn check_window(window: usize) -> Result<()> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Config(format!(
            "dark channel window must be a positive odd integer, got {window}"
        )));
    }
    Ok(())
}

/// Min over channels and a `window × window` neighborhood clipped at the
/// borders. Ties resolve to the first candidate in (row, column, channel)
/// scan order, which fixes the subgradient used by the loss.
pub fn dark_channel_trace<T: Scalar>(t: &Tensor<T>, window: usize) -> Result<DarkChannelTrace<T>> {
    check_window(window)?;
    let (c, h, w) = t.shape();
    let plane = h * w;
    let r = window / 2;

    // per-pixel channel minimum
    let mut cmin = Vec::with_capacity(plane);
    let mut cidx = Vec::with_capacity(plane);
    for p in 0..plane {
        let mut best = t.data()[p];
        let mut bi = p;
        for ch in 1..c {
            let v = t.data()[ch * plane + p];
            if v < best {
                best = v;
                bi = ch * plane + p;
            }
        }
        cmin.push(best);
        cidx.push(bi);
    }

    // horizontal window min (leftmost on ties)
    let mut hmin = Vec::with_capacity(plane);
    let mut hidx = Vec::with_capacity(plane);
    for y in 0..h {
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r).min(w - 1);
            let mut best = cmin[y * w + x0];
            let mut bi = y * w + x0;
            for xx in x0 + 1..=x1 {
                let v = cmin[y * w + xx];
                if v < best {
                    best = v;
                    bi = y * w + xx;
                }
            }
            hmin.push(best);
            hidx.push(bi);
        }
    }

    // vertical window min (topmost on ties)
    let mut values = Vec::with_capacity(plane);
    let mut argmin = Vec::with_capacity(plane);
    for y in 0..h {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r).min(h - 1);
        for x in 0..w {
            let mut best = hmin[y0 * w + x];
            let mut bi = hidx[y0 * w + x];
            for yy in y0 + 1..=y1 {
                let v = hmin[yy * w + x];
                if v < best {
                    best = v;
                    bi = hidx[yy * w + x];
                }
            }
            values.push(best);
            argmin.push(cidx[bi]);
        }
    }
    Ok(DarkChannelTrace {
        values: Tensor::from_vec(1, h, w, values)?,
        argmin,
    })
}

pub fn dark_channel(img: &Image, window: usize) -> Result<DarkChannelMap> {
    let unit = img.to_range(RangeTag::Unit);
    let trace = dark_channel_trace(unit.tensor(), window)?;
    Ok(DarkChannelMap {
        image: Image::new(trace.values, RangeTag::Unit)?,
        window,
    })
}
