//! Quantitative evaluation: PSNR, SSIM (with analytic gradient for use in
//! losses), and a temporal-consistency proxy over difference maps.
//!
//! The temporal metric is a proxy, not optical-flow tOF: it is the mean L1
//! distance between the temporal difference maps of the two sequences. Do not
//! compare its numbers against flow-based tOF results.

use crate::error::{Error, Result};
use crate::image::{
    filter_sep_normalized, filter_sep_normalized_adjoint, gaussian_kernel_1d, ImageRgb,
};
use std::fmt::Write as _;

pub const PSNR_CAP_DB: f64 = 100.0;
const SSIM_C1: f64 = 1e-4; // (0.01)^2 on the [0,1] range
const SSIM_C2: f64 = 9e-4; // (0.03)^2
const SSIM_WINDOW_RADIUS: usize = 5; // 11x11 window
const SSIM_SIGMA: f64 = 1.5;

/// 10·log10(1/MSE) for images in [0,1], capped at 100 dB.
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "psnr {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let n = a.data.len() as f64;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean local SSIM with an 11×11 Gaussian window (σ=1.5), C1=(0.01)²,
/// C2=(0.03)². The window is renormalized at image borders so the metric is
/// defined on small buffers too.
pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    Ok(ssim_with_grad(a, b)?.0)
}

/// SSIM value plus the gradient of the mean SSIM w.r.t. `a`.
pub fn ssim_with_grad(a: &ImageRgb, b: &ImageRgb) -> Result<(f64, ImageRgb)> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "ssim {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (w, h) = (a.width, a.height);
    let kernel = gaussian_kernel_1d(SSIM_WINDOW_RADIUS, SSIM_SIGMA);
    let n_total = (w * h * 3) as f64;
    let mut mean_sum = 0.0;
    let mut grad_planes: Vec<Vec<f64>> = Vec::with_capacity(3);

    for c in 0..3 {
        let x = a.channel(c);
        let y = b.channel(c);
        let filt = |p: &[f64]| filter_sep_normalized(p, w, h, &kernel);
        let mu_x = filt(&x);
        let mu_y = filt(&y);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();
        let s_xx = filt(&xx);
        let s_yy = filt(&yy);
        let s_xy = filt(&xy);

        let mut g_mu_x = vec![0.0; w * h];
        let mut g_s_xx = vec![0.0; w * h];
        let mut g_s_xy = vec![0.0; w * h];
        for p in 0..w * h {
            let (mx, my) = (mu_x[p], mu_y[p]);
            let var_x = s_xx[p] - mx * mx;
            let var_y = s_yy[p] - my * my;
            let cov = s_xy[p] - mx * my;
            let a1 = 2.0 * mx * my + SSIM_C1;
            let a2 = 2.0 * cov + SSIM_C2;
            let b1 = mx * mx + my * my + SSIM_C1;
            let b2 = var_x + var_y + SSIM_C2;
            let d = b1 * b2;
            let s = (a1 * a2) / d;
            mean_sum += s;
            // ∂S/∂μx includes the -2μx / -μy paths through var_x and cov
            g_mu_x[p] = (2.0 * my * (a2 - a1)) / d - s * (2.0 * mx * (b2 - b1)) / d;
            g_s_xx[p] = -s / b2;
            g_s_xy[p] = 2.0 * a1 / d;
        }
        // adjoint filters back to pixel space
        let adj = |p: &[f64]| filter_sep_normalized_adjoint(p, w, h, &kernel);
        let t_mu = adj(&g_mu_x);
        let t_xx = adj(&g_s_xx);
        let t_xy = adj(&g_s_xy);
        let mut grad = vec![0.0; w * h];
        for p in 0..w * h {
            grad[p] = (t_mu[p] + t_xx[p] * 2.0 * x[p] + t_xy[p] * y[p]) / n_total;
        }
        grad_planes.push(grad);
    }
    let value = mean_sum / n_total;
    let grad = ImageRgb::from_channels(w, h, [&grad_planes[0], &grad_planes[1], &grad_planes[2]]);
    Ok((value, grad))
}

/// Mean L1 distance between temporal difference maps: lower is better, 0 when
/// both sequences share identical dynamics.
pub fn temporal_consistency(rendered: &[ImageRgb], reference: &[ImageRgb]) -> Result<f64> {
    if rendered.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!(
            "sequence lengths {} vs {}",
            rendered.len(),
            reference.len()
        )));
    }
    if rendered.len() < 2 {
        return Err(Error::ShapeMismatch(
            "temporal consistency needs at least 2 frames".into(),
        ));
    }
    let mut total = 0.0;
    let mut count = 0.0;
    for t in 0..rendered.len() - 1 {
        let (r0, r1) = (&rendered[t], &rendered[t + 1]);
        let (g0, g1) = (&reference[t], &reference[t + 1]);
        if !r0.same_shape(r1) || !r0.same_shape(g0) || !g0.same_shape(g1) {
            return Err(Error::ShapeMismatch(
                "temporal frames differ in shape".into(),
            ));
        }
        for i in 0..r0.data.len() {
            let dr = r1.data[i] - r0.data[i];
            let dg = g1.data[i] - g0.data[i];
            total += (dr - dg).abs();
        }
        count += r0.data.len() as f64;
    }
    Ok(total / count)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMetrics {
    pub frame_index: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-frame and mean quality of a rendered sequence against its reference.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub temporal_consistency: f64,
}

impl MetricReport {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// CSV rows: frame_index, psnr, ssim; then a `mean` summary row and the
    /// temporal-consistency proxy.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame_index,psnr,ssim\n");
        for f in &self.frames {
            writeln!(out, "{},{},{}", f.frame_index, f.psnr, f.ssim).unwrap();
        }
        writeln!(out, "mean,{},{}", self.mean_psnr, self.mean_ssim).unwrap();
        writeln!(out, "temporal_consistency,{},", self.temporal_consistency).unwrap();
        out
    }
}

/// Evaluate a rendered sequence against a reference sequence of equal length.
pub fn evaluate_sequence(rendered: &[ImageRgb], reference: &[ImageRgb]) -> Result<MetricReport> {
    if rendered.len() != reference.len() || rendered.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "evaluate_sequence lengths {} vs {}",
            rendered.len(),
            reference.len()
        )));
    }
    let mut frames = Vec::with_capacity(rendered.len());
    for (i, (r, g)) in rendered.iter().zip(reference).enumerate() {
        frames.push(FrameMetrics {
            frame_index: i,
            psnr: psnr(r, g)?,
            ssim: ssim(r, g)?,
        });
    }
    let n = frames.len() as f64;
    let mean_psnr = frames.iter().map(|f| f.psnr).sum::<f64>() / n;
    let mean_ssim = frames.iter().map(|f| f.ssim).sum::<f64>() / n;
    let temporal = if rendered.len() >= 2 {
        temporal_consistency(rendered, reference)?
    } else {
        0.0
    };
    Ok(MetricReport {
        frames,
        mean_psnr,
        mean_ssim,
        temporal_consistency: temporal,
    })
}
