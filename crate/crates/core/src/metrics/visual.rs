//! Image-level similarity: binarized pixel agreement and complex-wavelet SSIM.

use std::f64::consts::PI;
use std::sync::OnceLock;

use num_complex::Complex64;

use crate::raster::RasterImage;

pub const BINARIZE_THRESHOLD: u8 = 128;

/// Two images padded with white to a common size, content anchored top-left.
#[derive(Clone, Debug)]
pub struct CanvasPair {
    pub a: RasterImage,
    pub b: RasterImage,
}

impl CanvasPair {
    pub fn new(a: &RasterImage, b: &RasterImage) -> Self {
        Self::with_min_size(a, b, 1, 1)
    }

    pub fn with_min_size(a: &RasterImage, b: &RasterImage, min_w: usize, min_h: usize) -> Self {
        let w = a.width().max(b.width()).max(min_w);
        let h = a.height().max(b.height()).max(min_h);
        Self {
            a: a.pad_to(w, h),
            b: b.pad_to(w, h),
        }
    }
}

/// Percentage of canvas pixels whose binarized values agree.
pub fn pixel_match(a: &RasterImage, b: &RasterImage) -> f64 {
    let pair = CanvasPair::new(a, b);
    let total = pair.a.pixels().len();
    let equal = pair
        .a
        .pixels()
        .iter()
        .zip(pair.b.pixels())
        .filter(|(x, y)| (**x >= BINARIZE_THRESHOLD) == (**y >= BINARIZE_THRESHOLD))
        .count();
    100.0 * equal as f64 / total as f64
}

pub const CW_MIN_SIZE: usize = 32;
pub const CW_WAVELENGTHS: [f64; 2] = [8.0, 16.0];
pub const CW_ORIENTATIONS_DEG: [f64; 4] = [0.0, 45.0, 90.0, 135.0];
pub const CW_WINDOW: usize = 7;
pub const CW_STRIDE: usize = 4;
pub const CW_K_PER_COEFF: f64 = 0.01;

/// Separable complex Gabor kernel `g(x)·g(y)` with its DC term removed.
#[derive(Debug)]
struct GaborFilter {
    scale: usize,
    kx: Vec<Complex64>,
    ky: Vec<Complex64>,
    /// DC response of `kx ⊗ ky`; subtracted via the scale's Gaussian blur.
    dc: Complex64,
}

#[derive(Debug)]
struct GaussianKernel {
    taps: Vec<f64>,
}

#[derive(Debug)]
pub struct GaborBank {
    gaussians: Vec<GaussianKernel>,
    filters: Vec<GaborFilter>,
}

impl GaborBank {
    fn build() -> Self {
        let mut gaussians = Vec::new();
        let mut filters = Vec::new();
        for (scale, &wavelength) in CW_WAVELENGTHS.iter().enumerate() {
            let sigma = 0.5 * wavelength;
            let radius = (3.0 * sigma).ceil() as isize;
            let g: Vec<f64> = (-radius..=radius)
                .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
                .collect();
            let norm: f64 = g.iter().sum();
            let g: Vec<f64> = g.into_iter().map(|v| v / norm).collect();
            let omega = 2.0 * PI / wavelength;
            for &deg in &CW_ORIENTATIONS_DEG {
                let theta = deg.to_radians();
                let (wx, wy) = (omega * theta.cos(), omega * theta.sin());
                let carrier = |freq: f64| -> Vec<Complex64> {
                    (-radius..=radius)
                        .zip(&g)
                        .map(|(t, &gv)| Complex64::from_polar(gv, freq * t as f64))
                        .collect()
                };
                let kx = carrier(wx);
                let ky = carrier(wy);
                let dc = kx.iter().sum::<Complex64>() * ky.iter().sum::<Complex64>();
                filters.push(GaborFilter { scale, kx, ky, dc });
            }
            gaussians.push(GaussianKernel { taps: g });
        }
        Self { gaussians, filters }
    }

    pub fn shared() -> &'static GaborBank {
        static BANK: OnceLock<GaborBank> = OnceLock::new();
        BANK.get_or_init(GaborBank::build)
    }

    pub fn subbands(&self) -> usize {
        self.filters.len()
    }

    /// Complex coefficient maps, one per subband.
    pub fn decompose(&self, ink: &[f64], w: usize, h: usize) -> Vec<Vec<Complex64>> {
        let blurred: Vec<Vec<f64>> = self
            .gaussians
            .iter()
            .map(|g| {
                let rows = convolve_rows_real(ink, w, h, &g.taps);
                convolve_cols_real(&rows, w, h, &g.taps)
            })
            .collect();
        self.filters
            .iter()
            .map(|f| {
                let rows = convolve_rows_complex(ink, w, h, &f.kx);
                let mut out = convolve_cols_complex(&rows, w, h, &f.ky);
                for (c, b) in out.iter_mut().zip(&blurred[f.scale]) {
                    *c -= f.dc * b;
                }
                out
            })
            .collect()
    }
}

fn convolve_rows_real(src: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; w * h];
    for row in 0..h {
        let line = &src[row * w..(row + 1) * w];
        for col in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let x = col as isize + k as isize - r;
                if x >= 0 && (x as usize) < w {
                    acc += t * line[x as usize];
                }
            }
            out[row * w + col] = acc;
        }
    }
    out
}

fn convolve_cols_real(src: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; w * h];
    for row in 0..h {
        for (k, t) in taps.iter().enumerate() {
            let y = row as isize + k as isize - r;
            if y < 0 || y as usize >= h {
                continue;
            }
            let src_line = &src[y as usize * w..(y as usize + 1) * w];
            for (o, s) in out[row * w..(row + 1) * w].iter_mut().zip(src_line) {
                *o += t * s;
            }
        }
    }
    out
}

fn convolve_rows_complex(src: &[f64], w: usize, h: usize, taps: &[Complex64]) -> Vec<Complex64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![Complex64::new(0.0, 0.0); w * h];
    for row in 0..h {
        let line = &src[row * w..(row + 1) * w];
        for col in 0..w {
            let mut acc = Complex64::new(0.0, 0.0);
            for (k, t) in taps.iter().enumerate() {
                let x = col as isize + k as isize - r;
                if x >= 0 && (x as usize) < w {
                    let v = line[x as usize];
                    if v != 0.0 {
                        acc += t * v;
                    }
                }
            }
            out[row * w + col] = acc;
        }
    }
    out
}

fn convolve_cols_complex(src: &[Complex64], w: usize, h: usize, taps: &[Complex64]) -> Vec<Complex64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![Complex64::new(0.0, 0.0); w * h];
    for row in 0..h {
        for (k, t) in taps.iter().enumerate() {
            let y = row as isize + k as isize - r;
            if y < 0 || y as usize >= h {
                continue;
            }
            let src_line = &src[y as usize * w..(y as usize + 1) * w];
            for (o, s) in out[row * w..(row + 1) * w].iter_mut().zip(src_line) {
                *o += t * s;
            }
        }
    }
    out
}

fn ink(img: &RasterImage) -> Vec<f64> {
    img.pixels().iter().map(|&v| (255 - v) as f64 / 255.0).collect()
}

/// Top-left corners of every full window.
fn window_origins(w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let rows = (0..=h - CW_WINDOW).step_by(CW_STRIDE);
    rows.flat_map(move |r| (0..=w - CW_WINDOW).step_by(CW_STRIDE).map(move |c| (r, c)))
}

/// Per-window CW-SSIM values for every subband, in subband-major order.
pub fn cw_ssim_windows(a: &RasterImage, b: &RasterImage) -> Vec<f64> {
    let pair = CanvasPair::with_min_size(a, b, CW_MIN_SIZE, CW_MIN_SIZE);
    let (w, h) = (pair.a.width(), pair.a.height());
    let bank = GaborBank::shared();
    let ca = bank.decompose(&ink(&pair.a), w, h);
    let cb = bank.decompose(&ink(&pair.b), w, h);
    let k = CW_K_PER_COEFF * (CW_WINDOW * CW_WINDOW) as f64;
    let mut out = Vec::new();
    for (sa, sb) in ca.iter().zip(&cb) {
        for (r0, c0) in window_origins(w, h) {
            let mut cross = Complex64::new(0.0, 0.0);
            let mut energy = 0.0;
            for r in r0..r0 + CW_WINDOW {
                for c in c0..c0 + CW_WINDOW {
                    let (x, y) = (sa[r * w + c], sb[r * w + c]);
                    cross += x * y.conj();
                    energy += x.norm_sqr() + y.norm_sqr();
                }
            }
            out.push((2.0 * cross.norm() + k) / (energy + k));
        }
    }
    out
}

/// Mean windowed CW-SSIM over all subbands, × 100.
pub fn cw_ssim(a: &RasterImage, b: &RasterImage) -> f64 {
    let windows = cw_ssim_windows(a, b);
    100.0 * windows.iter().sum::<f64>() / windows.len() as f64
}
