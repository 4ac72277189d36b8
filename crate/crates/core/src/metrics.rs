//! PSNR, SSIM, flow divergence and bits-per-pixel reporting.

use crate::bitstream::CodedGop;
use crate::block::MotionField;
use crate::error::{Error, Result};
use crate::video::Frame;

/// PSNR is capped here when the reconstruction is exact (MSE = 0).
pub const PSNR_CAP: f64 = 99.0;

/// 10*log10(255^2 / MSE) over all samples of 8-bit frames.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(Error::shape(
            "psnr",
            format!("{}x{}x{}", a.width, a.height, a.channels),
            format!("{}x{}x{}", b.width, b.height, b.channels),
        ));
    }
    let (da, db) = (a.bytes()?, b.bytes()?);
    let mut acc = 0u64;
    for (x, y) in da.iter().zip(db.iter()) {
        let d = *x as i64 - *y as i64;
        acc += (d * d) as u64;
    }
    if acc == 0 {
        return Ok(PSNR_CAP);
    }
    let mse = acc as f64 / da.len() as f64;
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable 11x11 Gaussian filter, valid positions only.
fn gauss_filter(src: &[f64], w: usize, h: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let half = SSIM_WINDOW / 2;
    let vw = w - 2 * half;
    let vh = h - 2 * half;
    // horizontal pass: h rows x vw cols
    let mut tmp = vec![0.0; h * vw];
    for y in 0..h {
        for x in 0..vw {
            let mut acc = 0.0;
            for (k, g) in kernel.iter().enumerate() {
                acc += g * src[y * w + x + k];
            }
            tmp[y * vw + x] = acc;
        }
    }
    // vertical pass: vh rows x vw cols
    let mut out = vec![0.0; vh * vw];
    for y in 0..vh {
        for x in 0..vw {
            let mut acc = 0.0;
            for (k, g) in kernel.iter().enumerate() {
                acc += g * tmp[(y + k) * vw + x];
            }
            out[y * vw + x] = acc;
        }
    }
    out
}

/// Single-scale SSIM on luma: 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 255, averaged over all valid window positions.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape(
            "ssim",
            format!("{}x{}", a.width, a.height),
            format!("{}x{}", b.width, b.height),
        ));
    }
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Size(format!(
            "ssim needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let la: Vec<f64> = a.luma()?.iter().map(|&v| v as f64).collect();
    let lb: Vec<f64> = b.luma()?.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = la.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = lb.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = la.iter().zip(lb.iter()).map(|(x, y)| x * y).collect();

    let kernel = gaussian_kernel();
    let mu_x = gauss_filter(&la, w, h, &kernel);
    let mu_y = gauss_filter(&lb, w, h, &kernel);
    let e_xx = gauss_filter(&xx, w, h, &kernel);
    let e_yy = gauss_filter(&yy, w, h, &kernel);
    let e_xy = gauss_filter(&xy, w, h, &kernel);

    let c1 = (SSIM_K1 * 255.0) * (SSIM_K1 * 255.0);
    let c2 = (SSIM_K2 * 255.0) * (SSIM_K2 * 255.0);
    let mut acc = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = e_xx[i] - mx * mx;
        let var_y = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
        let den = (mx * mx + my * my + c1) * (var_x + var_y + c2);
        acc += num / den;
    }
    Ok(acc / mu_x.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowKind {
    Epe,
    Cosine,
}

impl std::str::FromStr for FlowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<FlowKind> {
        match s.to_ascii_lowercase().as_str() {
            "epe" => Ok(FlowKind::Epe),
            "cosine" => Ok(FlowKind::Cosine),
            other => Err(Error::Config(format!("unknown flow loss kind {other}"))),
        }
    }
}

/// Mean vector divergence between two aligned field sequences.
///
/// EPE is the Euclidean distance per vector; cosine is 1 - cos(angle), with
/// pairs containing a zero vector contributing 0. With `normalize`, x and y
/// components are divided by the frame width and height first.
pub fn flow_divergence(
    vg: &[MotionField],
    vp: &[MotionField],
    kind: FlowKind,
    normalize: bool,
) -> Result<f64> {
    if vg.len() != vp.len() {
        return Err(Error::shape("flow_divergence fields", vg.len(), vp.len()));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for (fg, fp) in vg.iter().zip(vp.iter()) {
        if (fg.grid_w, fg.grid_h) != (fp.grid_w, fp.grid_h) {
            return Err(Error::shape(
                "flow_divergence grids",
                format!("{}x{}", fg.grid_w, fg.grid_h),
                format!("{}x{}", fp.grid_w, fp.grid_h),
            ));
        }
        let (sw, sh) = if normalize {
            (
                (fg.grid_w * fg.block_w) as f64,
                (fg.grid_h * fg.block_h) as f64,
            )
        } else {
            (1.0, 1.0)
        };
        for (g, p) in fg.vectors.iter().zip(fp.vectors.iter()) {
            let gv = (g.0 as f64 / sw, g.1 as f64 / sh);
            let pv = (p.0 as f64 / sw, p.1 as f64 / sh);
            acc += match kind {
                FlowKind::Epe => {
                    let (dx, dy) = (gv.0 - pv.0, gv.1 - pv.1);
                    (dx * dx + dy * dy).sqrt()
                }
                FlowKind::Cosine => {
                    let gg = gv.0 * gv.0 + gv.1 * gv.1;
                    let pp = pv.0 * pv.0 + pv.1 * pv.1;
                    if gg == 0.0 || pp == 0.0 {
                        0.0
                    } else {
                        1.0 - (gv.0 * pv.0 + gv.1 * pv.1) / (gg * pp).sqrt()
                    }
                }
            };
            count += 1;
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(acc / count as f64)
}

/// Counted transmitted bits per referencing-frame pixel.
pub fn bpp(coded: &CodedGop) -> f64 {
    let pixels = coded.n_referencing as f64 * coded.width as f64 * coded.height as f64;
    coded.counted_bits() as f64 / pixels
}

/// Quality summary for one (codec, config, clip) run.
#[derive(Debug, Clone)]
pub struct QualityReport {
    pub psnr_frames: Vec<f64>,
    pub ssim_frames: Vec<f64>,
    pub epe: f64,
    pub cosine: f64,
    pub bpp: f64,
    pub encode_s: f64,
    pub decode_s: f64,
}

impl QualityReport {
    pub fn psnr_mean(&self) -> f64 {
        mean(&self.psnr_frames)
    }

    pub fn ssim_mean(&self) -> f64 {
        mean(&self.ssim_frames)
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

pub const CSV_HEADER: &str = "codec,params,bpp,psnr,ssim,epe,cosine,encode_s,decode_s";

/// One CSV row; fixed six-decimal formatting keeps reports byte-reproducible.
pub fn csv_row(codec: &str, params: &str, r: &QualityReport) -> String {
    format!(
        "{},{},{:.6},{:.4},{:.6},{:.6},{:.6},{:.3},{:.3}",
        codec,
        params,
        r.bpp,
        r.psnr_mean(),
        r.ssim_mean(),
        r.epe,
        r.cosine,
        r.encode_s,
        r.decode_s
    )
}
