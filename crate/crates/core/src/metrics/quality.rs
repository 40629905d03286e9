//! MSE, PSNR and SSIM, plus the comma-separated report.

use std::fmt;

use crate::data::ImageBuffer;
use crate::error::{Error, Result};

/// Pixel scale a metric is computed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Range {
    /// Pixels in `[0, 1]`.
    Unit,
    /// Pixels multiplied by 255.
    EightBit,
}

impl Range {
    pub fn max_value(self) -> f64 {
        match self {
            Range::Unit => 1.0,
            Range::EightBit => 255.0,
        }
    }
}

impl fmt::Display for Range {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Range::Unit => "unit",
            Range::EightBit => "8bit",
        })
    }
}

impl std::str::FromStr for Range {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(Range::Unit),
            "8bit" => Ok(Range::EightBit),
            other => Err(Error::Config(format!(
                "unknown range `{other}` (unit or 8bit)"
            ))),
        }
    }
}

fn same_dims(op: &'static str, a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::pre(
            op,
            format!("{}x{} vs {}x{}", a.h(), a.w(), b.h(), b.w()),
        ));
    }
    Ok(())
}

/// Mean squared pixel difference in the given range.
pub fn mse_metric(a: &ImageBuffer, b: &ImageBuffer, range: Range) -> Result<f64> {
    same_dims("mse", a, b)?;
    let k = range.max_value();
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| {
            let d = (x as f64 - y as f64) * k;
            d * d
        })
        .sum();
    Ok(sum / a.pixels().len() as f64)
}

/// Peak signal-to-noise ratio in decibels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Db(f64),
    /// MSE was zero.
    Identical,
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(v),
            Psnr::Identical => None,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v:.4}"),
            Psnr::Identical => f.write_str("identical"),
        }
    }
}

/// `20 log10(max_i / sqrt(mse))`.
pub fn psnr(mse: f64, max_i: f64) -> Result<Psnr> {
    if !(max_i > 0.0) || !(mse >= 0.0) || !mse.is_finite() {
        return Err(Error::pre(
            "psnr",
            format!("need mse >= 0 and max > 0, got mse={mse}, max={max_i}"),
        ));
    }
    if mse == 0.0 {
        return Ok(Psnr::Identical);
    }
    Ok(Psnr::Db(20.0 * (max_i / mse.sqrt()).log10()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the pixel values.
    pub range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.range).powi(2)
    }

    /// Normalized separable Gaussian taps.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

/// Similarity of one window from weighted moments.
pub fn ssim_from_moments(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64, p: &SsimParams) -> f64 {
    let (c1, c2) = (p.c1(), p.c2());
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

fn scaled(img: &ImageBuffer, k: f64) -> Vec<f64> {
    img.pixels().iter().map(|&v| v as f64 * k).collect()
}

/// Mean SSIM over every fully contained Gaussian window. Pixels are
/// multiplied by `p.range` first, so `range` 255 evaluates 8-bit values.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, p: &SsimParams) -> Result<f64> {
    same_dims("ssim", a, b)?;
    let (h, w) = a.dims();
    if h < p.window || w < p.window || p.window == 0 {
        return Err(Error::pre(
            "ssim",
            format!("{h}x{w} image is smaller than the {0}x{0} window", p.window),
        ));
    }
    let taps = p.taps();
    let x = scaled(a, p.range);
    let y = scaled(b, p.range);
    let prods = [
        x.clone(),
        y.clone(),
        x.iter().map(|v| v * v).collect(),
        y.iter().map(|v| v * v).collect(),
        x.iter().zip(&y).map(|(u, v)| u * v).collect::<Vec<f64>>(),
    ];
    let (oh, ow) = (h - p.window + 1, w - p.window + 1);
    let filtered: Vec<Vec<f64>> = prods.iter().map(|f| filter_valid(f, h, w, &taps)).collect();
    let mut total = 0.0;
    for i in 0..oh * ow {
        let (mx, my) = (filtered[0][i], filtered[1][i]);
        let vx = filtered[2][i] - mx * mx;
        let vy = filtered[3][i] - my * my;
        let cxy = filtered[4][i] - mx * my;
        total += ssim_from_moments(mx, my, vx, vy, cxy, p);
    }
    Ok(total / (oh * ow) as f64)
}

/// Separable valid-mode correlation with `taps` along both axes.
fn filter_valid(f: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = taps
                .iter()
                .enumerate()
                .map(|(t, g)| g * f[r * w + c + t])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps
                .iter()
                .enumerate()
                .map(|(t, g)| g * rows[(r + t) * ow + c])
                .sum();
        }
    }
    out
}

/// Single-window SSIM over the whole image with unweighted moments.
pub fn ssim_global(a: &ImageBuffer, b: &ImageBuffer, p: &SsimParams) -> Result<f64> {
    same_dims("ssim", a, b)?;
    let x = scaled(a, p.range);
    let y = scaled(b, p.range);
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
    let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
    let cxy = x
        .iter()
        .zip(&y)
        .map(|(u, v)| (u - mx) * (v - my))
        .sum::<f64>()
        / n;
    Ok(ssim_from_moments(mx, my, vx, vy, cxy, p))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub image: String,
    pub mse: f64,
    pub psnr: Psnr,
    pub ssim: f64,
}

/// Per-image scores and their means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub range: Range,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn new(range: Range) -> Self {
        Self {
            range,
            rows: Vec::new(),
        }
    }

    /// Scores one prediction against its ground truth.
    pub fn add(
        &mut self,
        image: impl Into<String>,
        pred: &ImageBuffer,
        truth: &ImageBuffer,
    ) -> Result<()> {
        let mse = mse_metric(pred, truth, self.range)?;
        let psnr = psnr(mse, self.range.max_value())?;
        let ssim = ssim(pred, truth, &SsimParams::default())?;
        self.rows.push(MetricRow {
            image: image.into(),
            mse,
            psnr,
            ssim,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn mean_mse(&self) -> f64 {
        self.rows.iter().map(|r| r.mse).sum::<f64>() / self.rows.len() as f64
    }

    /// Mean of the finite per-image PSNRs; `Identical` when every image
    /// matched exactly.
    pub fn mean_psnr(&self) -> Psnr {
        let db: Vec<f64> = self.rows.iter().filter_map(|r| r.psnr.db()).collect();
        if db.is_empty() {
            Psnr::Identical
        } else {
            Psnr::Db(db.iter().sum::<f64>() / db.len() as f64)
        }
    }

    pub fn mean_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len() as f64
    }
}

impl fmt::Display for MetricReport {
    /// `image,mse,psnr_db,ssim` per image, then a `mean` line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rows {
            writeln!(f, "{},{:e},{},{:.6}", r.image, r.mse, r.psnr, r.ssim)?;
        }
        if !self.rows.is_empty() {
            writeln!(
                f,
                "mean,{:e},{},{:.6}",
                self.mean_mse(),
                self.mean_psnr(),
                self.mean_ssim()
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_ranges() {
        let a = ImageBuffer::filled(4, 4, 0.5);
        let b = ImageBuffer::filled(4, 4, 0.6);
        // pixels are f32
        assert!((mse_metric(&a, &b, Range::Unit).unwrap() - 0.01).abs() < 1e-7);
        assert!((mse_metric(&a, &b, Range::EightBit).unwrap() - 650.25).abs() < 1e-3);
        assert_eq!(mse_metric(&a, &a, Range::Unit).unwrap(), 0.0);
        assert!(mse_metric(&a, &ImageBuffer::filled(4, 5, 0.5), Range::Unit).is_err());
    }

    #[test]
    fn psnr_values() {
        assert!((psnr(1.0, 255.0).unwrap().db().unwrap() - 48.1308).abs() < 1e-4);
        assert_eq!(psnr(0.0, 255.0).unwrap(), Psnr::Identical);
        assert!(psnr(-1.0, 1.0).is_err());
    }

    #[test]
    fn psnr_range_consistency() {
        let a = ImageBuffer::from_fn(8, 8, |r, c| ((r * 8 + c) % 13) as f32 / 13.0);
        let b = ImageBuffer::from_fn(8, 8, |r, c| ((r * 5 + c) % 11) as f32 / 11.0);
        let p8 = psnr(mse_metric(&a, &b, Range::EightBit).unwrap(), 255.0)
            .unwrap()
            .db()
            .unwrap();
        let pu = psnr(mse_metric(&a, &b, Range::Unit).unwrap(), 1.0)
            .unwrap()
            .db()
            .unwrap();
        assert!((p8 - pu).abs() < 1e-9);
    }

    #[test]
    fn ssim_constants_by_hand() {
        let zero = ImageBuffer::filled(16, 16, 0.0);
        let one = ImageBuffer::filled(16, 16, 1.0);
        let p = SsimParams::default();
        let expect = p.c1() / (1.0 + p.c1());
        assert!((ssim(&zero, &one, &p).unwrap() - expect).abs() < 1e-12);
        assert!((ssim_global(&zero, &one, &p).unwrap() - expect).abs() < 1e-12);
        assert!(ssim(
            &ImageBuffer::filled(8, 8, 0.0),
            &ImageBuffer::filled(8, 8, 0.0),
            &p
        )
        .is_err());
    }

    #[test]
    fn report_format() {
        let a = ImageBuffer::filled(11, 11, 0.5);
        let b = ImageBuffer::filled(11, 11, 0.25);
        let mut r = MetricReport::new(Range::Unit);
        r.add("x", &a, &a).unwrap();
        r.add("y", &a, &b).unwrap();
        let text = r.to_string();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("x,0e0,identical,1.000000"));
        assert!(lines[2].starts_with("mean,"));
    }
}
