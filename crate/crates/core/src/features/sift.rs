use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::{to_grayscale, GrayImage, ImageRGB};

pub const SIFT_ORIENTATIONS: usize = 8;
pub const SIFT_CELLS: usize = 4;
pub const SIFT_DIM: usize = SIFT_ORIENTATIONS * SIFT_CELLS * SIFT_CELLS;
pub const DEFAULT_CELL: usize = 4;

/// One 128-d SIFT descriptor per pixel, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorGrid {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl DescriptorGrid {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * SIFT_DIM {
            return Err(Error::Dimensions(format!("descriptor grid {width}x{height} with {} values", data.len())));
        }
        Ok(DescriptorGrid { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn descriptor(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * SIFT_DIM;
        &self.data[i..i + SIFT_DIM]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Averages 2x2 blocks of descriptors (rounding sizes up).
    pub fn downsample(&self) -> DescriptorGrid {
        let w = self.width.div_ceil(2);
        let h = self.height.div_ceil(2);
        let mut data = vec![0f32; w * h * SIFT_DIM];
        data.par_chunks_mut(w * SIFT_DIM).enumerate().for_each(|(y, row)| {
            for x in 0..w {
                let out = &mut row[x * SIFT_DIM..(x + 1) * SIFT_DIM];
                let mut n = 0.0f32;
                for sy in 2 * y..(2 * y + 2).min(self.height) {
                    for sx in 2 * x..(2 * x + 2).min(self.width) {
                        n += 1.0;
                        for (o, v) in out.iter_mut().zip(self.descriptor(sx, sy)) {
                            *o += v;
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v /= n);
            }
        });
        DescriptorGrid { width: w, height: h, data }
    }
}

/// Standard SIFT normalization: unit L2, clamp at 0.2, unit L2 again.
pub fn normalize_sift(desc: &mut [f64]) {
    let norm = desc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-10 {
        desc.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    desc.iter_mut().for_each(|v| *v = (*v / norm).min(0.2));
    let norm = desc.iter().map(|v| v * v).sum::<f64>().sqrt();
    desc.iter_mut().for_each(|v| *v /= norm);
}

/// Gradient magnitude split into orientation channels with linear angular interpolation.
fn orientation_channels(gray: &GrayImage) -> Vec<Vec<f64>> {
    let (w, h) = gray.dims();
    let mut channels = vec![vec![0.0; w * h]; SIFT_ORIENTATIONS];
    let bin_width = 2.0 * PI / SIFT_ORIENTATIONS as f64;
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let dx = 0.5 * (gray.get_clamped(xi + 1, yi) - gray.get_clamped(xi - 1, yi));
            let dy = 0.5 * (gray.get_clamped(xi, yi + 1) - gray.get_clamped(xi, yi - 1));
            let mag = (dx * dx + dy * dy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let angle = dy.atan2(dx).rem_euclid(2.0 * PI) / bin_width;
            let b0 = angle.floor() as usize % SIFT_ORIENTATIONS;
            let frac = angle - angle.floor();
            let b1 = (b0 + 1) % SIFT_ORIENTATIONS;
            channels[b0][y * w + x] += mag * (1.0 - frac);
            channels[b1][y * w + x] += mag * frac;
        }
    }
    channels
}

/// Dense per-pixel SIFT on the luminance image with `cell x cell` pixel cells.
pub fn compute_dense_sift(img: &ImageRGB, cell: usize) -> Result<DescriptorGrid> {
    dense_sift_gray(&to_grayscale(img), cell)
}

pub fn dense_sift_gray(gray: &GrayImage, cell: usize) -> Result<DescriptorGrid> {
    let (w, h) = gray.dims();
    if cell == 0 || w < SIFT_CELLS * cell || h < SIFT_CELLS * cell {
        return Err(Error::Dimensions(format!("dense SIFT with cell {cell} needs at least {0}x{0}, got {w}x{h}", SIFT_CELLS * cell)));
    }
    let channels = orientation_channels(gray);
    // sum over the cell whose top-left corner is (x, y); zero outside the image
    let cell_sums: Vec<Vec<f64>> = channels
        .par_iter()
        .map(|ch| {
            let mut horiz = vec![0.0; w * h];
            for y in 0..h {
                for x in 0..w {
                    horiz[y * w + x] = (x..(x + cell).min(w)).map(|xx| ch[y * w + xx]).sum();
                }
            }
            let mut out = vec![0.0; w * h];
            for y in 0..h {
                for x in 0..w {
                    out[y * w + x] = (y..(y + cell).min(h)).map(|yy| horiz[yy * w + x]).sum();
                }
            }
            out
        })
        .collect();

    let half = (SIFT_CELLS / 2) as isize;
    let cell_i = cell as isize;
    let mut data = vec![0f32; w * h * SIFT_DIM];
    data.par_chunks_mut(w * SIFT_DIM).enumerate().for_each(|(y, row)| {
        let mut desc = [0f64; SIFT_DIM];
        for x in 0..w {
            let mut k = 0;
            for cy in 0..SIFT_CELLS as isize {
                for cx in 0..SIFT_CELLS as isize {
                    let ox = x as isize + (cx - half) * cell_i;
                    let oy = y as isize + (cy - half) * cell_i;
                    for (o, ch) in cell_sums.iter().enumerate() {
                        desc[k] = if ox <= -cell_i || oy <= -cell_i || ox >= w as isize || oy >= h as isize {
                            0.0
                        } else if ox >= 0 && oy >= 0 {
                            ch[oy as usize * w + ox as usize]
                        } else {
                            partial_cell(&channels[o], w, h, ox, oy, cell_i)
                        };
                        k += 1;
                    }
                }
            }
            normalize_sift(&mut desc);
            for (o, v) in row[x * SIFT_DIM..(x + 1) * SIFT_DIM].iter_mut().zip(desc.iter()) {
                *o = *v as f32;
            }
        }
    });
    DescriptorGrid::new(w, h, data)
}

/// Cell sum for a cell that starts left of or above the image.
fn partial_cell(ch: &[f64], w: usize, h: usize, ox: isize, oy: isize, cell: isize) -> f64 {
    let mut acc = 0.0;
    for y in oy.max(0)..(oy + cell).min(h as isize) {
        for x in ox.max(0)..(ox + cell).min(w as isize) {
            acc += ch[y as usize * w + x as usize];
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(w: usize, h: usize, seed: u64) -> ImageRGB {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = GrayImage::from_fn(w, h, |_, _| rng.random::<f64>());
        let g = crate::raster::gaussian_blur(&g, 1.0);
        g.map(|v| [*v; 3])
    }

    #[test]
    fn constant_image_has_zero_descriptors() {
        let grid = compute_dense_sift(&ImageRGB::filled(20, 20, [0.4; 3]), 4).unwrap();
        assert!(grid.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn copies_have_identical_descriptors() {
        let img = noise_image(24, 20, 1);
        let a = compute_dense_sift(&img, 4).unwrap();
        let b = compute_dense_sift(&img.clone(), 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn descriptors_are_normalized_and_clamped() {
        let grid = compute_dense_sift(&noise_image(32, 24, 2), 4).unwrap();
        for y in 0..24 {
            for x in 0..32 {
                let d = grid.descriptor(x, y);
                let n: f64 = d.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                assert!(n <= 1.0 + 1e-6);
                assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn normalization_clamps_before_renormalizing() {
        let mut d = [0.0f64; SIFT_DIM];
        d[0] = 10.0;
        d[1] = 1.0;
        normalize_sift(&mut d);
        // after clamping the dominant bin no longer dwarfs the second one
        assert!((d[0] / d[1] - 0.2 / (1.0 / 101f64.sqrt())).abs() < 1e-9);
    }

    #[test]
    fn shift_equivariance() {
        let w = 48;
        let h = 32;
        let base = noise_image(w + 8, h, 3);
        let a = ImageRGB::from_fn(w, h, |x, y| base.get(x + 8, y));
        let b = ImageRGB::from_fn(w, h, |x, y| base.get(x, y));
        // b(x + 8, y) == a(x, y)
        let ga = compute_dense_sift(&a, 4).unwrap();
        let gb = compute_dense_sift(&b, 4).unwrap();
        let margin = 10;
        for y in margin..h - margin {
            for x in margin..w - 8 - margin {
                for (p, q) in ga.descriptor(x, y).iter().zip(gb.descriptor(x + 8, y)) {
                    assert!((p - q).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn rejects_small_images() {
        assert!(compute_dense_sift(&ImageRGB::filled(15, 40, [0.1; 3]), 4).is_err());
    }

    #[test]
    fn downsample_halves_dims() {
        let grid = compute_dense_sift(&noise_image(17, 16, 4), 4).unwrap();
        let d = grid.downsample();
        assert_eq!(d.dims(), (9, 8));
    }
}
