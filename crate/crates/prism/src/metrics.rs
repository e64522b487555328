//! Image quality metrics for evaluation tables: PSNR and single-scale SSIM
//! over planar [0,1] images.

use crate::error::{Error, Result};
use crate::image_io::Image;
use std::fmt::Write as _;

/// Reported instead of infinity when the mean squared error is zero.
pub const PSNR_CAP_DB: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_shapes(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if a.channels != b.channels || a.h != b.h || a.w != b.w {
        return Err(Error::dims(op, &[a.channels, a.h, a.w], &[b.channels, b.h, b.w]));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for unit-range images, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_shapes("psnr", a, b)?;
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable valid-mode Gaussian blur of one channel plane; output is
/// `(h - 10) x (w - 10)`.
fn blur_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let wh = w - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * wh];
    for y in 0..h {
        for x in 0..wh {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * plane[y * w + x + i];
            }
            rows[y * wh + x] = acc;
        }
    }
    let hh = h - SSIM_WINDOW + 1;
    let mut out = vec![0.0; hh * wh];
    for y in 0..hh {
        for x in 0..wh {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * rows[(y + i) * wh + x];
            }
            out[y * wh + x] = acc;
        }
    }
    out
}

/// Single-scale structural similarity: 11x11 Gaussian window, sigma 1.5,
/// stabilizers (0.01)^2 and (0.03)^2, averaged over channels and valid
/// window positions.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes("ssim", a, b)?;
    if a.h < SSIM_WINDOW || a.w < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "ssim needs images at least {SSIM_WINDOW}px per side, got {}x{}",
            a.h, a.w
        )));
    }
    let (h, w, n) = (a.h, a.w, a.h * a.w);
    let k = gaussian_window();
    let mut total = 0.0;
    for c in 0..a.channels {
        let xs: Vec<f64> = a.data[c * n..(c + 1) * n].iter().map(|&v| v as f64).collect();
        let ys: Vec<f64> = b.data[c * n..(c + 1) * n].iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| x * y).collect();
        let mu_x = blur_valid(&xs, h, w, &k);
        let mu_y = blur_valid(&ys, h, w, &k);
        let m_xx = blur_valid(&xx, h, w, &k);
        let m_yy = blur_valid(&yy, h, w, &k);
        let m_xy = blur_valid(&xy, h, w, &k);
        let mut acc = 0.0;
        for i in 0..mu_x.len() {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let var_x = m_xx[i] - mx * mx;
            let var_y = m_yy[i] - my * my;
            let cov = m_xy[i] - mx * my;
            acc += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (var_x + var_y + SSIM_C2));
        }
        total += acc / mu_x.len() as f64;
    }
    Ok(total / a.channels as f64)
}

/// Per-view metric rows plus dataset means, serializable as the eval CSV.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub rows: Vec<(usize, usize, f64, f64)>,
}

impl MetricReport {
    pub fn push(&mut self, identity: usize, view: usize, psnr_db: f64, ssim: f64) {
        self.rows.push((identity, view, psnr_db, ssim));
    }

    pub fn view_count(&self) -> usize {
        self.rows.len()
    }

    pub fn mean_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.2).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.3).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// `identity,view,psnr_db,ssim` rows followed by a means row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("identity,view,psnr_db,ssim\n");
        for (i, v, p, q) in &self.rows {
            let _ = writeln!(s, "{i},{v},{p:.6},{q:.6}");
        }
        let _ = writeln!(s, "mean,,{:.6},{:.6}", self.mean_psnr(), self.mean_ssim());
        s
    }
}
