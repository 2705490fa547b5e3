use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::DomainStyle;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LesionKind {
    None,
    Benign,
    Malignant,
}

impl LesionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LesionKind::None => "none",
            LesionKind::Benign => "benign",
            LesionKind::Malignant => "malignant",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(LesionKind::None),
            "benign" => Some(LesionKind::Benign),
            "malignant" => Some(LesionKind::Malignant),
            _ => None,
        }
    }
}

/// Lesion centre in pixel coordinates for both views; `-1` when absent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LesionMeta {
    pub kind: LesionKind,
    pub cc_row: f64,
    pub cc_col: f64,
    pub mlo_row: f64,
    pub mlo_col: f64,
    pub radius: f64,
}

struct Breast {
    width: f64,
    half_height: f64,
    centre_row: f64,
    /// Pectoral triangle legs (rows, cols) for the MLO view.
    pectoral: Option<(f64, f64)>,
    density: f64,
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Breast {
    fn sample<R: Rng + ?Sized>(s: f64, width: f64, mlo: bool, style: &DomainStyle, rng: &mut R) -> Self {
        let waves = (0..3)
            .map(|_| {
                let theta = rng.random_range(0.0..PI);
                let freq = style.texture_frequency * rng.random_range(0.7..1.3);
                let phase = rng.random_range(0.0..2.0 * PI);
                let amp = rng.random_range(0.6..1.0);
                (theta, freq, phase, amp)
            })
            .collect();
        Breast {
            width,
            half_height: rng.random_range(0.36..0.46) * s,
            centre_row: (0.5 + rng.random_range(-0.04..0.04)) * s,
            pectoral: mlo.then(|| (rng.random_range(0.30..0.45) * s, rng.random_range(0.15..0.25) * s)),
            density: rng.random_range(0.12..0.48),
            waves,
        }
    }

    /// Tissue mask in `[0,1]` with a soft skin line.
    fn mask(&self, y: f64, x: f64) -> f64 {
        let dx = x / self.width;
        let dy = (y - self.centre_row) / self.half_height;
        let r = (dx * dx + dy * dy).sqrt();
        ((1.0 - r) / 0.05).clamp(0.0, 1.0)
    }

    fn half_height_at(&self, x: f64) -> f64 {
        let u = (x / self.width).min(1.0);
        self.half_height * (1.0 - u * u).max(0.0).sqrt()
    }

    fn texture(&self, y: f64, x: f64, s: f64) -> f64 {
        let mut t = 0.0;
        let mut norm = 0.0;
        for &(theta, freq, phase, amp) in &self.waves {
            t += amp * (2.0 * PI * freq * (x * theta.cos() + y * theta.sin()) / s + phase).sin();
            norm += amp;
        }
        t / norm
    }
}

struct Blob {
    row: f64,
    col: f64,
    sigma: f64,
    amplitude: f64,
    spikes: Option<(f64, f64)>,
}

impl Blob {
    fn value(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.row, x - self.col);
        let r2 = dy * dy + dx * dx;
        let core = (-r2 / (2.0 * self.sigma * self.sigma)).exp();
        let spic = match self.spikes {
            Some((k, phase)) => {
                let ang = dy.atan2(dx);
                let ray = (k * ang + phase).cos().max(0.0).powi(6);
                let reach = 2.6 * self.sigma;
                ray * (-r2 / (2.0 * reach * reach)).exp() * 0.7
            }
            None => 0.0,
        };
        self.amplitude * (core + spic)
    }
}

fn raster<R: Rng + ?Sized>(size: usize, style: &DomainStyle, breast: &Breast, blob: Option<&Blob>, rng: &mut R) -> Tensor<f32> {
    let s = size as f64;
    let noise = Normal::new(0.0, style.noise_std).expect("finite noise std");
    let mut data = Vec::with_capacity(size * size);
    for yi in 0..size {
        for xi in 0..size {
            let (y, x) = (yi as f64 + 0.5, xi as f64 + 0.5);
            let m = breast.mask(y, x);
            let mut v = m * (breast.density + 0.08 * breast.texture(y, x, s));
            if let Some((ph, pw)) = breast.pectoral {
                if x / pw + y / ph < 1.0 {
                    v += 0.18 * m;
                }
            }
            if let Some(b) = blob {
                v += m * b.value(y, x);
            }
            let styled = style.intensity_offset + style.intensity_scale * v.clamp(0.0, 1.0).powf(style.gamma_exponent);
            data.push((styled + noise.sample(rng)).clamp(0.0, 1.0) as f32);
        }
    }
    Tensor::new(vec![1, size, size], data).expect("finite pixels")
}

/// Renders one CC/MLO pair. Lesions share their column across the two views
/// and sit at independent rows.
pub fn render_pair<R: Rng + ?Sized>(size: usize, style: &DomainStyle, malignant: bool, rng: &mut R) -> (Tensor<f32>, Tensor<f32>, LesionMeta) {
    let s = size as f64;
    let width = rng.random_range(0.75..0.92) * s;
    let cc = Breast::sample(s, width, false, style, rng);
    let mlo = Breast::sample(s, width, true, style, rng);
    let kind = if malignant {
        LesionKind::Malignant
    } else if rng.random_bool(0.5) {
        LesionKind::Benign
    } else {
        LesionKind::None
    };
    let (blobs, meta) = if kind == LesionKind::None {
        (None, LesionMeta { kind, cc_row: -1.0, cc_col: -1.0, mlo_row: -1.0, mlo_col: -1.0, radius: -1.0 })
    } else {
        let col = rng.random_range(0.30..0.75) * width;
        let row_in = |b: &Breast, rng: &mut R| b.centre_row + rng.random_range(-0.6..0.6) * b.half_height_at(col);
        let (r_cc, r_mlo) = (row_in(&cc, rng), row_in(&mlo, rng));
        let (sigma, amplitude, spiky) = if malignant {
            (rng.random_range(0.05..0.07) * s, rng.random_range(0.25..0.40), true)
        } else {
            (rng.random_range(0.06..0.09) * s, rng.random_range(0.06..0.14), false)
        };
        let spikes = spiky.then(|| (rng.random_range(5..=8) as f64, rng.random_range(0.0..2.0 * PI)));
        let make = |row: f64| Blob { row, col, sigma, amplitude, spikes };
        (
            Some((make(r_cc), make(r_mlo))),
            LesionMeta { kind, cc_row: r_cc, cc_col: col, mlo_row: r_mlo, mlo_col: col, radius: sigma },
        )
    };
    let cc_img = raster(size, style, &cc, blobs.as_ref().map(|b| &b.0), rng);
    let mlo_img = raster(size, style, &mlo, blobs.as_ref().map(|b| &b.1), rng);
    (cc_img, mlo_img, meta)
}
