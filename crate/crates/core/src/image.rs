//! Image buffers, PPM I/O, and the separable filters used by SSIM and the
//! edge-based perceptual proxy.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

/// H×W×3 interleaved RGB in [0,1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize) -> Self {
        ImageRgb {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for p in 0..width * height {
            img.data[p * 3..p * 3 + 3].copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &ImageRgb) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Copy of channel `c` as a planar buffer.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    pub fn from_channels(width: usize, height: usize, planes: [&[f64]; 3]) -> Self {
        let mut img = Self::new(width, height);
        for p in 0..width * height {
            for c in 0..3 {
                img.data[p * 3 + c] = planes[c][p];
            }
        }
        img
    }

    pub fn mean_abs_diff(&self, other: &ImageRgb) -> f64 {
        assert!(self.same_shape(other));
        let n = self.data.len() as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n
    }

    /// Serialize as binary PPM (P6, maxval 255), clamping to [0,1].
    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.width * self.height * 3);
        for v in &self.data {
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_ppm_bytes())?;
        Ok(())
    }

    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut token = || -> Result<String> {
            // skip whitespace and '#' comments
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Truncated("ppm header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = token()?;
        if magic != "P6" {
            return Err(Error::Format(format!("expected P6 ppm, found {magic:?}")));
        }
        let width: usize = token()?
            .parse()
            .map_err(|_| Error::Format("bad ppm width".into()))?;
        let height: usize = token()?
            .parse()
            .map_err(|_| Error::Format("bad ppm height".into()))?;
        let maxval: usize = token()?
            .parse()
            .map_err(|_| Error::Format("bad ppm maxval".into()))?;
        if maxval != 255 {
            return Err(Error::Format(format!("unsupported ppm maxval {maxval}")));
        }
        pos += 1; // single whitespace after maxval
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(Error::Truncated("ppm pixel data".into()));
        }
        let data = bytes[pos..pos + need]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        Ok(ImageRgb {
            width,
            height,
            data,
        })
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_ppm_bytes(&bytes)
    }
}

/// H×W scalar plane, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGray {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageGray {
    pub fn new(width: usize, height: usize) -> Self {
        ImageGray {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }
}

/// Symmetric 1-D Gaussian taps of length 2r+1, summing to 1.
pub fn gaussian_kernel_1d(radius: usize, sigma: f64) -> Vec<f64> {
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable filter with the kernel clipped at image borders and renormalized
/// per position, so it is well defined on images smaller than the window.
pub fn filter_sep_normalized(plane: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let tmp = filter_1d_rows(plane, w, h, kernel, false);
    filter_1d_cols(&tmp, w, h, kernel, false)
}

/// Adjoint of `filter_sep_normalized` (columns first, then rows).
pub fn filter_sep_normalized_adjoint(plane: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let tmp = filter_1d_cols(plane, w, h, kernel, true);
    filter_1d_rows(&tmp, w, h, kernel, true)
}

fn filter_1d_rows(plane: &[f64], w: usize, h: usize, kernel: &[f64], adjoint: bool) -> Vec<f64> {
    let r = kernel.len() / 2;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        let dst = &mut out[y * w..(y + 1) * w];
        pass_1d(row, dst, w, kernel, r, adjoint);
    }
    out
}

fn filter_1d_cols(plane: &[f64], w: usize, h: usize, kernel: &[f64], adjoint: bool) -> Vec<f64> {
    let r = kernel.len() / 2;
    let mut out = vec![0.0; w * h];
    let mut col = vec![0.0; h];
    let mut dst = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = plane[y * w + x];
        }
        dst.iter_mut().for_each(|v| *v = 0.0);
        pass_1d(&col, &mut dst, h, kernel, r, adjoint);
        for y in 0..h {
            out[y * w + x] = dst[y];
        }
    }
    out
}

fn pass_1d(src: &[f64], dst: &mut [f64], n: usize, kernel: &[f64], r: usize, adjoint: bool) {
    for i in 0..n {
        let lo = i.saturating_sub(r);
        let hi = (i + r).min(n - 1);
        let mut z = 0.0;
        for j in lo..=hi {
            z += kernel[j + r - i];
        }
        if adjoint {
            // scatter: dst[j] += k/z_i * src[i]
            let v = src[i] / z;
            for j in lo..=hi {
                dst[j] += kernel[j + r - i] * v;
            }
        } else {
            let mut acc = 0.0;
            for j in lo..=hi {
                acc += kernel[j + r - i] * src[j];
            }
            dst[i] = acc / z;
        }
    }
}

/// Sobel responses with replicate padding, scaled so each lies in [-1, 1]
/// for inputs in [0, 1].
pub fn sobel_xy(plane: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    let at = |x: i64, y: i64| -> f64 {
        let xc = x.clamp(0, w as i64 - 1) as usize;
        let yc = y.clamp(0, h as i64 - 1) as usize;
        plane[yc * w + xc]
    };
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let tl = at(x - 1, y - 1);
            let tc = at(x, y - 1);
            let tr = at(x + 1, y - 1);
            let ml = at(x - 1, y);
            let mr = at(x + 1, y);
            let bl = at(x - 1, y + 1);
            let bc = at(x, y + 1);
            let br = at(x + 1, y + 1);
            let i = y as usize * w + x as usize;
            gx[i] = ((tr + 2.0 * mr + br) - (tl + 2.0 * ml + bl)) / 4.0;
            gy[i] = ((bl + 2.0 * bc + br) - (tl + 2.0 * tc + tr)) / 4.0;
        }
    }
    (gx, gy)
}

/// Adjoint of `sobel_xy`: scatters gradients w.r.t. (gx, gy) back onto the
/// input plane, honoring the replicate padding.
pub fn sobel_xy_adjoint(g_gx: &[f64], g_gy: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    let mut add = |x: i64, y: i64, v: f64| {
        let xc = x.clamp(0, w as i64 - 1) as usize;
        let yc = y.clamp(0, h as i64 - 1) as usize;
        out[yc * w + xc] += v;
    };
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            let vx = g_gx[i] / 4.0;
            let vy = g_gy[i] / 4.0;
            add(x + 1, y - 1, vx);
            add(x + 1, y, 2.0 * vx);
            add(x + 1, y + 1, vx);
            add(x - 1, y - 1, -vx);
            add(x - 1, y, -2.0 * vx);
            add(x - 1, y + 1, -vx);
            add(x - 1, y + 1, vy);
            add(x, y + 1, 2.0 * vy);
            add(x + 1, y + 1, vy);
            add(x - 1, y - 1, -vy);
            add(x, y - 1, -2.0 * vy);
            add(x + 1, y - 1, -vy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ppm_roundtrip_is_lossless_for_8bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut img = ImageRgb::new(7, 5);
        for v in &mut img.data {
            *v = (rng.random_range(0..=255u32) as f64) / 255.0;
        }
        let bytes = img.to_ppm_bytes();
        let back = ImageRgb::from_ppm_bytes(&bytes).unwrap();
        assert_eq!(img, back);
        let bytes2 = back.to_ppm_bytes();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn ppm_rejects_truncation_and_bad_magic() {
        let img = ImageRgb::filled(4, 4, [0.5, 0.2, 0.1]);
        let bytes = img.to_ppm_bytes();
        match ImageRgb::from_ppm_bytes(&bytes[..bytes.len() - 5]) {
            Err(Error::Truncated(_)) => {}
            other => panic!("expected truncation error, got {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[1] = b'5';
        match ImageRgb::from_ppm_bytes(&bad) {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn normalized_filter_preserves_constants() {
        let k = gaussian_kernel_1d(5, 1.5);
        let plane = vec![0.7; 8 * 8];
        let out = filter_sep_normalized(&plane, 8, 8, &k);
        for v in out {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn filter_adjoint_matches_inner_product() {
        // <F x, y> == <x, F* y> for random x, y
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (9, 6);
        let k = gaussian_kernel_1d(5, 1.5);
        let x: Vec<f64> = (0..w * h).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..w * h).map(|_| rng.random::<f64>()).collect();
        let fx = filter_sep_normalized(&x, w, h, &k);
        let fty = filter_sep_normalized_adjoint(&y, w, h, &k);
        let lhs: f64 = fx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&fty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12, "lhs={lhs} rhs={rhs}");
    }

    #[test]
    fn sobel_adjoint_matches_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (w, h) = (8, 7);
        let x: Vec<f64> = (0..w * h).map(|_| rng.random::<f64>()).collect();
        let ygx: Vec<f64> = (0..w * h).map(|_| rng.random::<f64>()).collect();
        let ygy: Vec<f64> = (0..w * h).map(|_| rng.random::<f64>()).collect();
        let (gx, gy) = sobel_xy(&x, w, h);
        let adj = sobel_xy_adjoint(&ygx, &ygy, w, h);
        let lhs: f64 = gx.iter().zip(&ygx).map(|(a, b)| a * b).sum::<f64>()
            + gy.iter().zip(&ygy).map(|(a, b)| a * b).sum::<f64>();
        let rhs: f64 = x.iter().zip(&adj).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12, "lhs={lhs} rhs={rhs}");
    }
}
