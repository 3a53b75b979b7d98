use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{resize, to_grayscale, GrayImage, ImageRGB, Raster};

pub const GIST_SCALES: usize = 4;
pub const GIST_ORIENTATIONS: usize = 8;
pub const GIST_BLOCKS: usize = 4;
pub const GIST_LEN: usize = GIST_SCALES * GIST_ORIENTATIONS * GIST_BLOCKS * GIST_BLOCKS;

/// Working size of the filtered luminance image.
const GIST_SIZE: usize = 128;
/// Symmetric padding added on each side before filtering.
const GIST_PAD: usize = 16;
const PADDED: usize = GIST_SIZE + 2 * GIST_PAD;

/// 512-d Gabor energy descriptor, L2-normalized (or all zero for flat images).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GistDescriptor(Vec<f32>);

impl GistDescriptor {
    pub fn from_vec(v: Vec<f32>) -> Result<Self> {
        if v.len() != GIST_LEN {
            return Err(Error::Dimensions(format!("GIST length {} != {GIST_LEN}", v.len())));
        }
        Ok(GistDescriptor(v))
    }

    pub fn zeros() -> Self {
        GistDescriptor(vec![0.0; GIST_LEN])
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()
    }

    /// Energy of one (scale, orientation) channel summed over the spatial blocks.
    pub fn channel_energy(&self, scale: usize, orientation: usize) -> f64 {
        let start = (scale * GIST_ORIENTATIONS + orientation) * GIST_BLOCKS * GIST_BLOCKS;
        self.0[start..start + GIST_BLOCKS * GIST_BLOCKS].iter().map(|v| *v as f64).sum()
    }
}

/// Peak normalized frequency (cycles per pixel) of a scale.
pub fn scale_frequency(scale: usize) -> f64 {
    0.3 / 1.85f64.powi(scale as i32)
}

/// Frequency response of the (scale, orientation) Gabor filter at normalized
/// frequency `(fx, fy)` in cycles per pixel. The DC response is forced to zero.
pub fn gabor_response(scale: usize, orientation: usize, fx: f64, fy: f64) -> f64 {
    let fr = (fx * fx + fy * fy).sqrt();
    if fr == 0.0 {
        return 0.0;
    }
    let f0 = scale_frequency(scale);
    let mut tr = fy.atan2(fx) + PI / GIST_ORIENTATIONS as f64 * orientation as f64;
    if tr < -PI {
        tr += 2.0 * PI;
    } else if tr > PI {
        tr -= 2.0 * PI;
    }
    // angular bandwidth 16 * n_orient^2 / 32^2 for 8 orientations
    let angular = 16.0 * (GIST_ORIENTATIONS * GIST_ORIENTATIONS) as f64 / (32.0 * 32.0);
    (-10.0 * 0.35 * (fr / f0 - 1.0).powi(2) - 2.0 * angular * PI * tr * tr).exp()
}

struct GistBank {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    filters: Vec<Vec<f64>>,
}

fn bank() -> &'static GistBank {
    static BANK: OnceLock<GistBank> = OnceLock::new();
    BANK.get_or_init(|| {
        let mut planner = FftPlanner::new();
        let freq = |k: usize| {
            let k = k as isize;
            let n = PADDED as isize;
            (if k < n / 2 { k } else { k - n }) as f64 / PADDED as f64
        };
        let mut filters = Vec::with_capacity(GIST_SCALES * GIST_ORIENTATIONS);
        for s in 0..GIST_SCALES {
            for o in 0..GIST_ORIENTATIONS {
                let mut f = vec![0.0; PADDED * PADDED];
                for ky in 0..PADDED {
                    for kx in 0..PADDED {
                        f[ky * PADDED + kx] = gabor_response(s, o, freq(kx), freq(ky));
                    }
                }
                filters.push(f);
            }
        }
        GistBank { forward: planner.plan_fft_forward(PADDED), inverse: planner.plan_fft_inverse(PADDED), filters }
    })
}

fn fft2(buf: &mut [Complex<f64>], fft: &Arc<dyn Fft<f64>>) {
    for row in buf.chunks_exact_mut(PADDED) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); PADDED];
    for x in 0..PADDED {
        for y in 0..PADDED {
            col[y] = buf[y * PADDED + x];
        }
        fft.process(&mut col);
        for y in 0..PADDED {
            buf[y * PADDED + x] = col[y];
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i - 1;
    }
    if i >= n {
        i = 2 * n - i - 1;
    }
    i.clamp(0, n - 1) as usize
}

/// Gabor energies of a luminance image, before normalization.
pub fn gist_energies(gray: &GrayImage) -> Vec<f64> {
    let small = resize(gray, GIST_SIZE, GIST_SIZE);
    let mean = small.data().iter().sum::<f64>() / small.len() as f64;
    let bank = bank();
    let mut spectrum: Vec<Complex<f64>> = (0..PADDED * PADDED)
        .map(|k| {
            let x = reflect((k % PADDED) as isize - GIST_PAD as isize, GIST_SIZE);
            let y = reflect((k / PADDED) as isize - GIST_PAD as isize, GIST_SIZE);
            Complex::new(small.get(x, y) - mean, 0.0)
        })
        .collect();
    fft2(&mut spectrum, &bank.forward);

    let block = GIST_SIZE / GIST_BLOCKS;
    let norm = 1.0 / (PADDED * PADDED) as f64;
    let mut out = Vec::with_capacity(GIST_LEN);
    let mut buf = vec![Complex::new(0.0, 0.0); PADDED * PADDED];
    for filter in &bank.filters {
        for ((b, s), g) in buf.iter_mut().zip(&spectrum).zip(filter) {
            *b = s * *g;
        }
        fft2(&mut buf, &bank.inverse);
        for by in 0..GIST_BLOCKS {
            for bx in 0..GIST_BLOCKS {
                let mut acc = 0.0;
                for y in by * block..(by + 1) * block {
                    for x in bx * block..(bx + 1) * block {
                        acc += buf[(y + GIST_PAD) * PADDED + x + GIST_PAD].norm() * norm;
                    }
                }
                out.push(acc / (block * block) as f64);
            }
        }
    }
    out
}

pub fn compute_gist(img: &ImageRGB) -> Result<GistDescriptor> {
    if img.width() < 32 || img.height() < 32 {
        return Err(Error::Dimensions(format!("GIST needs at least 32x32, got {}x{}", img.width(), img.height())));
    }
    Ok(gist_from_gray(&to_grayscale(img)))
}

pub(crate) fn gist_from_gray(gray: &Raster<f64>) -> GistDescriptor {
    let energies = gist_energies(gray);
    let norm = energies.iter().map(|e| e * e).sum::<f64>().sqrt();
    if norm < 1e-8 {
        return GistDescriptor::zeros();
    }
    GistDescriptor(energies.iter().map(|e| (e / norm) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: usize, h: usize) -> ImageRGB {
        ImageRGB::from_fn(w, h, |x, y| {
            let v = 0.5 + 0.2 * ((x as f64 * 0.37).sin() * (y as f64 * 0.21).cos()) + 0.1 * ((x * y) as f64 * 0.05).sin();
            [v, v * 0.9, v * 0.8]
        })
    }

    #[test]
    fn flat_image_gives_zero_vector() {
        let g = compute_gist(&ImageRGB::filled(64, 48, [0.3, 0.6, 0.2])).unwrap();
        assert_eq!(g.as_slice().len(), GIST_LEN);
        assert!(g.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_flat_image_is_unit_norm() {
        let g = compute_gist(&textured(80, 60)).unwrap();
        assert!((g.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_small_images() {
        assert!(compute_gist(&ImageRGB::filled(31, 64, [0.5; 3])).is_err());
    }

    #[test]
    fn intensity_scaling_keeps_direction() {
        let img = textured(96, 64);
        let half = img.map(|p| [p[0] * 0.5, p[1] * 0.5, p[2] * 0.5]);
        let a = compute_gist(&img).unwrap();
        let b = compute_gist(&half).unwrap();
        let cos: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| *x as f64 * *y as f64).sum();
        assert!(cos >= 0.999, "cosine {cos}");
    }

    #[test]
    fn grating_energy_follows_filter_orientation() {
        // horizontal stripes: intensity varies along y
        let scale = 1;
        let cycles_per_px = scale_frequency(scale);
        let img = ImageRGB::from_fn(GIST_SIZE, GIST_SIZE, |_, y| {
            let v = 0.5 + 0.4 * (2.0 * PI * cycles_per_px * y as f64).sin();
            [v; 3]
        });
        let g = compute_gist(&img).unwrap();
        // oracle: which filter passes the grating's two spectral peaks best
        let response = |o: usize| {
            gabor_response(scale, o, 0.0, cycles_per_px) + gabor_response(scale, o, 0.0, -cycles_per_px)
        };
        let aligned = (0..GIST_ORIENTATIONS).max_by(|a, b| response(*a).total_cmp(&response(*b))).unwrap();
        let orthogonal = (aligned + GIST_ORIENTATIONS / 2) % GIST_ORIENTATIONS;
        let e_aligned = g.channel_energy(scale, aligned);
        let e_orth = g.channel_energy(scale, orthogonal);
        assert!(e_aligned >= 3.0 * e_orth, "aligned {e_aligned} orthogonal {e_orth}");
        let best = (0..GIST_ORIENTATIONS)
            .max_by(|a, b| g.channel_energy(scale, *a).total_cmp(&g.channel_energy(scale, *b)))
            .unwrap();
        assert_eq!(best, aligned);
    }
}
