use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, Split};
use crate::tensor::Tensor;

/// One draw of the image augmentation pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub angle_deg: f64,
    /// Translation in pixels along (x, y).
    pub translate: (f64, f64),
    pub scale: f64,
    pub shear_deg: f64,
    pub noise_sigma: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams =
        AugmentParams { flip: false, angle_deg: 0.0, translate: (0.0, 0.0), scale: 1.0, shear_deg: 0.0, noise_sigma: 0.0 };

    /// Flip with p = 0.5, rotation U(−15°, 15°), translation up to 10% of the
    /// side, scale U(0.8, 1.6), shear U(−25°, 25°), pixel noise σ = 0.005.
    pub fn sample<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Self {
        let t = 0.1 * size as f64;
        AugmentParams {
            flip: rng.random_bool(0.5),
            angle_deg: rng.random_range(-15.0..15.0),
            translate: (rng.random_range(-t..t), rng.random_range(-t..t)),
            scale: rng.random_range(0.8..1.6),
            shear_deg: rng.random_range(-25.0..25.0),
            noise_sigma: 0.005,
        }
    }

    fn is_geometric_identity(&self) -> bool {
        self.angle_deg == 0.0 && self.shear_deg == 0.0 && self.scale == 1.0 && self.translate == (0.0, 0.0)
    }

    /// Applies flip, then the affine warp (bilinear, zero outside), then
    /// clamped Gaussian pixel noise drawn from `rng`.
    pub fn apply<R: Rng + ?Sized>(&self, image: &Tensor<f32>, rng: &mut R) -> Tensor<f32> {
        let d = image.dims();
        let (h, w) = (d[d.len() - 2], d[d.len() - 1]);
        let planes = image.numel() / (h * w);
        let mut out = image.data().to_vec();
        if self.flip {
            for row in out.chunks_exact_mut(w) {
                row.reverse();
            }
        }
        if !self.is_geometric_identity() {
            let src = out.clone();
            let (a, b, c, dd) = self.inverse_matrix();
            let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
            for p in 0..planes {
                let plane = &src[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * h * w..(p + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        let (u, v) = (x as f64 - cx - self.translate.0, y as f64 - cy - self.translate.1);
                        let sx = a * u + b * v + cx;
                        let sy = c * u + dd * v + cy;
                        dst[y * w + x] = bilinear(plane, h, w, sy, sx) as f32;
                    }
                }
            }
        }
        if self.noise_sigma > 0.0 {
            let n = Normal::new(0.0, self.noise_sigma).expect("finite sigma");
            for v in &mut out {
                *v = (*v as f64 + n.sample(rng)).clamp(0.0, 1.0) as f32;
            }
        }
        Tensor::new(d.to_vec(), out).expect("finite pixels")
    }

    /// Inverse of `rotate · shear · scale` as `(a, b, c, d)` row-major.
    fn inverse_matrix(&self) -> (f64, f64, f64, f64) {
        let (t, k) = (self.angle_deg.to_radians(), self.shear_deg.to_radians().tan());
        let (co, si) = (t.cos(), t.sin());
        let s = self.scale;
        // forward = [[co, -si], [si, co]] · [[1, k], [0, 1]] · s
        let (m00, m01, m10, m11) = (co * s, (co * k - si) * s, si * s, (si * k + co) * s);
        let det = m00 * m11 - m01 * m10;
        (m11 / det, -m01 / det, -m10 / det, m00 / det)
    }
}

fn bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize] as f64
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + if fx > 0.0 { at(y0, x0 + 1.0) * fx } else { 0.0 };
    if fy == 0.0 {
        return top;
    }
    let bot = at(y0 + 1.0, x0) * (1.0 - fx) + if fx > 0.0 { at(y0 + 1.0, x0 + 1.0) * fx } else { 0.0 };
    top * (1.0 - fy) + bot * fy
}

/// Augments one training image with a fresh draw.
pub fn augment_image<R: Rng + ?Sized>(image: &Tensor<f32>, split: Split, rng: &mut R) -> Result<Tensor<f32>, DataError> {
    if split != Split::Train {
        return Err(DataError::TestSplit);
    }
    let size = *image.dims().last().unwrap();
    Ok(AugmentParams::sample(size, rng).apply(image, rng))
}

/// Augments both views with one shared geometric draw (so the lesion column
/// correspondence survives) and independent pixel noise.
pub fn augment_pair<R: Rng + ?Sized>(
    cc: &Tensor<f32>,
    mlo: &Tensor<f32>,
    split: Split,
    rng: &mut R,
) -> Result<(Tensor<f32>, Tensor<f32>), DataError> {
    if split != Split::Train {
        return Err(DataError::TestSplit);
    }
    let size = *cc.dims().last().unwrap();
    let p = AugmentParams::sample(size, rng);
    Ok((p.apply(cc, rng), p.apply(mlo, rng)))
}
