//! Image-quality metrics and the dataset evaluation harness.
//!
//! All metrics take unit-range images (other ranges are converted). SSIM
//! and MS-SSIM run on BT.601 luminance.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataio::{load_entry, DatasetManifest};
use crate::error::{Error, Result};
use crate::imgcore::{downsample_tensor, Image, RangeTag};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Smallest side for which the coarsest MS-SSIM level still fits a window.
pub const MSSSIM_MIN_SIZE: usize = SSIM_WINDOW << (MSSSIM_WEIGHTS.len() - 1);

fn unit_pair(y: &Image, yhat: &Image) -> Result<(Image, Image)> {
    if y.shape() != yhat.shape() {
        return Err(Error::Shape(format!("metric inputs {:?} and {:?}", y.shape(), yhat.shape())));
    }
    Ok((y.to_range(RangeTag::Unit), yhat.to_range(RangeTag::Unit)))
}

/// `10·log10(1/MSE)` with peak 1; `+∞` for identical images.
pub fn psnr(y: &Image, yhat: &Image) -> Result<f64> {
    let (a, b) = unit_pair(y, yhat)?;
    let mse = a
        .tensor()
        .data()
        .iter()
        .zip(b.tensor().data())
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            d * d
        })
        .sum::<f64>()
        / a.tensor().len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a single plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term of two luminance planes.
fn ssim_terms(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let k = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (mu_a, _, _) = filter_valid(a, h, w, &k);
    let (mu_b, _, _) = filter_valid(b, h, w, &k);
    let (aa, _, _) = filter_valid(&prod(a, a), h, w, &k);
    let (bb, _, _) = filter_valid(&prod(b, b), h, w, &k);
    let (ab, _, _) = filter_valid(&prod(a, b), h, w, &k);
    let n = mu_a.len() as f64;
    let (mut s_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        s_sum += l * cs;
        cs_sum += cs;
    }
    (s_sum / n, cs_sum / n)
}

fn luma64(img: &Image) -> Tensor<f64> {
    img.luminance().tensor().cast(|v| v as f64)
}

fn check_window(h: usize, w: usize) -> Result<()> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Windowed SSIM (11-tap Gaussian, σ = 1.5, valid region) on luminance.
pub fn ssim(y: &Image, yhat: &Image) -> Result<f64> {
    let (a, b) = unit_pair(y, yhat)?;
    check_window(a.height(), a.width())?;
    let (la, lb) = (luma64(&a), luma64(&b));
    Ok(ssim_terms(la.data(), lb.data(), la.height(), la.width()).0)
}

/// Five-level MS-SSIM with 2× area downsampling between levels. Negative
/// contrast-structure terms are clamped to zero before exponentiation.
pub fn msssim(y: &Image, yhat: &Image) -> Result<f64> {
    let (a, b) = unit_pair(y, yhat)?;
    if a.height() < MSSSIM_MIN_SIZE || a.width() < MSSSIM_MIN_SIZE {
        return Err(Error::Dimension(format!(
            "MS-SSIM needs at least {MSSSIM_MIN_SIZE}x{MSSSIM_MIN_SIZE} pixels, got {}x{}",
            a.height(),
            a.width()
        )));
    }
    let (mut la, mut lb) = (luma64(&a), luma64(&b));
    let levels = MSSSIM_WEIGHTS.len();
    let mut out = 1.0;
    for (j, &wt) in MSSSIM_WEIGHTS.iter().enumerate() {
        let (s, cs) = ssim_terms(la.data(), lb.data(), la.height(), la.width());
        let term = if j + 1 == levels { s } else { cs };
        out *= term.max(0.0).powf(wt);
        if j + 1 < levels {
            let (h2, w2) = (la.height() / 2 * 2, la.width() / 2 * 2);
            la = downsample_tensor(&la.crop(0, 0, h2, w2), 2)?;
            lb = downsample_tensor(&lb.crop(0, 0, h2, w2), 2)?;
        }
    }
    Ok(out)
}

/// Serializes infinite dB values as the string `"inf"`.
mod db {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(s) if s == "inf" => Ok(f64::INFINITY),
            serde_json::Value::Number(n) => n.as_f64().ok_or_else(|| serde::de::Error::custom("bad number")),
            other => Err(serde::de::Error::custom(format!("expected dB value, got {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub id: String,
    #[serde(with = "db")]
    pub psnr: f64,
    pub ssim: f64,
    /// Absent when the image is too small for five levels.
    pub msssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub checkpoint: String,
    pub rows: Vec<PairMetrics>,
    #[serde(with = "db")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_msssim: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

impl MetricReport {
    pub fn from_rows(dataset: &str, checkpoint: &str, mut rows: Vec<PairMetrics>) -> Self {
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let mean_msssim = rows
            .iter()
            .map(|r| r.msssim)
            .collect::<Option<Vec<f64>>>()
            .filter(|v| !v.is_empty())
            .map(|v| mean(v.into_iter()));
        MetricReport {
            dataset: dataset.to_string(),
            checkpoint: checkpoint.to_string(),
            mean_psnr: mean(rows.iter().map(|r| r.psnr)),
            mean_ssim: mean(rows.iter().map(|r| r.ssim)),
            mean_msssim,
            rows,
        }
    }

    /// Aggregates must recompute from the rows within 1e-9.
    pub fn check_consistency(&self) -> Result<()> {
        let again = MetricReport::from_rows(&self.dataset, &self.checkpoint, self.rows.clone());
        let close = |a: f64, b: f64| a == b || (a - b).abs() <= 1e-9;
        let ms_ok = match (self.mean_msssim, again.mean_msssim) {
            (Some(a), Some(b)) => close(a, b),
            (None, None) => true,
            _ => false,
        };
        let bounded = self
            .rows
            .iter()
            .all(|r| (-1.0..=1.0).contains(&r.ssim) && r.msssim.map_or(true, |m| (-1.0..=1.0).contains(&m)));
        if close(self.mean_psnr, again.mean_psnr) && close(self.mean_ssim, again.mean_ssim) && ms_ok && bounded {
            Ok(())
        } else {
            Err(Error::Integrity("metric aggregates do not match their rows".into()))
        }
    }

    /// `PSNR  SSIM  MSSIM` aggregate line.
    pub fn aggregate_row(&self) -> String {
        let ms = self.mean_msssim.map_or("-".to_string(), |v| format!("{v:.4}"));
        format!("{:<24} {:>8.3} {:>8.4} {:>8}", "mean", self.mean_psnr, self.mean_ssim, ms)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<24} {:>8} {:>8} {:>8}\n", "id", "PSNR", "SSIM", "MSSIM");
        for r in &self.rows {
            let ms = r.msssim.map_or("-".to_string(), |v| format!("{v:.4}"));
            out.push_str(&format!("{:<24} {:>8.3} {:>8.4} {:>8}\n", r.id, r.psnr, r.ssim, ms));
        }
        out.push_str(&self.aggregate_row());
        out.push('\n');
        out
    }
}

pub fn pair_metrics(id: &str, sharp: &Image, restored: &Image) -> Result<PairMetrics> {
    Ok(PairMetrics {
        id: id.to_string(),
        psnr: psnr(sharp, restored)?,
        ssim: ssim(sharp, restored)?,
        msssim: match msssim(sharp, restored) {
            Ok(v) => Some(v),
            Err(Error::Dimension(_)) => None,
            Err(e) => return Err(e),
        },
    })
}

/// Something that maps a blurred image to a restoration of the same shape.
pub trait Restorer {
    fn restore(&self, blurred: &Image) -> Result<Image>;
    /// Identifier recorded in reports.
    fn checkpoint_id(&self) -> String;
}

/// Returns the blurred input unchanged; gives the blurred baseline.
pub struct IdentityRestorer;

impl Restorer for IdentityRestorer {
    fn restore(&self, blurred: &Image) -> Result<Image> {
        Ok(blurred.clone())
    }
    fn checkpoint_id(&self) -> String {
        "identity".into()
    }
}

/// Restores and scores every pair of `manifest` in id order. When `rows_out`
/// is given each row is written there as a JSON line as soon as it is
/// computed, so a failure leaves the finished rows behind.
pub fn evaluate(
    manifest: &DatasetManifest,
    dataset: &str,
    restorer: &dyn Restorer,
    mut rows_out: Option<&mut dyn Write>,
) -> Result<MetricReport> {
    let mut rows = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        let ctx = |err: Error| Error::Data(format!("pair {}: {err}", e.id));
        let pair = load_entry(manifest.source, e).map_err(ctx)?;
        let restored = restorer.restore(&pair.blurred).map_err(ctx)?;
        let row = pair_metrics(&e.id, &pair.sharp, &restored).map_err(ctx)?;
        if let Some(w) = rows_out.as_deref_mut() {
            let line = serde_json::to_string(&row).expect("row serializes");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|err| Error::Data(format!("writing metric rows: {err}")))?;
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let report = MetricReport::from_rows(dataset, &restorer.checkpoint_id(), rows);
    report.check_consistency()?;
    Ok(report)
}
