//! Procedural RGBD scenes and sequences for examples and tests.
//!
//! Scenes are rooms seen by a level camera: a textured back wall at constant
//! depth above a checkered floor whose depth follows the ground-plane
//! perspective, with an optional box standing on the floor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::flow::FlowField;
use crate::raster::{gaussian_blur, DepthMap, GrayImage, ImageRGB, Raster};

/// Camera height above the floor, in meters.
const CAMERA_HEIGHT: f64 = 1.5;

/// Smooth noise normalized to [0, 1].
pub fn smooth_noise(width: usize, height: usize, sigma: f64, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = GrayImage::from_fn(width, height, |_, _| rng.random::<f64>());
    let g = gaussian_blur(&g, sigma);
    let (lo, hi) = g.data().iter().fold((f64::MAX, f64::MIN), |a, v| (a.0.min(*v), a.1.max(*v)));
    let span = (hi - lo).max(1e-12);
    g.map(|v| (v - lo) / span)
}

/// Geometry and colours of one room.
#[derive(Clone, Debug)]
pub struct Room {
    pub horizon: f64,
    pub focal: f64,
    pub wall_depth: f64,
    pub wall_color: [f64; 3],
    pub floor_color: [f64; 3],
    pub tile: f64,
    /// Scene width in pixels; the optical centre sits at its middle.
    pub width: usize,
    /// `(x_min, x_max, contact_row, height_px, color)` of the box, if any.
    pub object: Option<(usize, usize, usize, usize, [f64; 3])>,
    pub seed: u64,
}

/// Small jitter around a base colour: every room comes from the same building.
fn color(rng: &mut ChaCha8Rng, base: [f64; 3]) -> [f64; 3] {
    base.map(|c| c + rng.random_range(-0.05..0.05))
}

impl Room {
    pub fn random(seed: u64, width: usize, height: usize) -> Room {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = height as f64;
        let horizon = rng.random_range(0.3 * h..0.45 * h);
        let focal = width as f64;
        let wall_depth = rng.random_range(4.0..9.0);
        let wall_color = color(&mut rng, [0.6, 0.35, 0.3]);
        let floor_color = color(&mut rng, [0.78, 0.76, 0.7]);
        let tile = 0.6;
        let object = rng.random_bool(0.6).then(|| {
            let bw = rng.random_range(width / 8..width / 4);
            let x0 = rng.random_range(0..width - bw);
            let junction = (horizon + focal * CAMERA_HEIGHT / wall_depth).ceil() as usize;
            let contact = rng.random_range((junction + 4).min(height - 1)..height);
            let bh = rng.random_range(height / 8..height / 3);
            (x0, x0 + bw, contact, bh, color(&mut rng, [0.25, 0.45, 0.7]))
        });
        Room { horizon, focal, wall_depth, wall_color, floor_color, tile, width, object, seed }
    }

    /// Depth of the floor seen at image row `y`, or the wall depth above the junction.
    pub fn background_depth(&self, y: usize) -> f64 {
        let below = y as f64 + 0.5 - self.horizon;
        if below <= 0.0 {
            return self.wall_depth;
        }
        (self.focal * CAMERA_HEIGHT / below).min(self.wall_depth)
    }

    /// Brick wall in world units, supersampled 3x3, so apparent brick size
    /// shrinks with wall distance.
    pub fn wall_pixel(&self, x: f64, y: f64) -> [f64; 3] {
        const BRICK_W: f64 = 0.4;
        const BRICK_H: f64 = 0.15;
        const MORTAR: f64 = 0.025;
        let scale = self.wall_depth / self.focal;
        let mut acc = [0.0; 3];
        for sy in 0..3 {
            for sx in 0..3 {
                let wx = (x + (sx as f64 + 0.5) / 3.0) * scale;
                let wy = (self.horizon - y - (sy as f64 + 0.5) / 3.0) * scale + 10.0;
                let row = (wy / BRICK_H).floor();
                let shift = if (row as i64).rem_euclid(2) == 0 { 0.0 } else { 0.5 * BRICK_W };
                let col = ((wx + shift) / BRICK_W).floor();
                let fx = (wx + shift) / BRICK_W - col;
                let fy = wy / BRICK_H - row;
                let mortar = fx * BRICK_W < MORTAR || fy * BRICK_H < MORTAR;
                let px = if mortar {
                    [0.85; 3]
                } else {
                    let hsh = (col as i64).wrapping_mul(73_856_093) ^ (row as i64).wrapping_mul(19_349_663) ^ self.seed as i64;
                    let k = 0.75 + 0.5 * ((hsh.rem_euclid(1000)) as f64 / 1000.0);
                    self.wall_color.map(|c| (c * k).clamp(0.0, 1.0))
                };
                for c in 0..3 {
                    acc[c] += px[c] / 9.0;
                }
            }
        }
        acc
    }

    /// Renders the room into a `width x height` view whose left edge is scene column `offset`.
    pub fn render(&self, width: usize, height: usize, offset: usize) -> (ImageRGB, DepthMap) {
        let full_w = (width + offset).max(self.width);
        let fine = smooth_noise(full_w, height, 0.8, self.seed ^ 0xf1e);
        let cx = self.width as f64 / 2.0;
        let mut img = ImageRGB::filled(width, height, [0.0; 3]);
        let mut depth = vec![0.0; width * height];
        for y in 0..height {
            let d = self.background_depth(y);
            let floor = d < self.wall_depth;
            for x in 0..width {
                let sx = x + offset;
                let px = if floor {
                    let gx = (sx as f64 + 0.5 - cx) * d / self.focal;
                    let parity = ((gx / self.tile).floor() as i64 + (d / self.tile).floor() as i64).rem_euclid(2);
                    let k = if parity == 0 { 0.75 } else { 1.15 } + 0.2 * (fine.get(sx, y) - 0.5);
                    self.floor_color.map(|c| (c * k).clamp(0.0, 1.0))
                } else {
                    self.wall_pixel(sx as f64 - cx, y as f64)
                };
                img.set(x, y, px);
                depth[y * width + x] = d;
            }
        }
        if let Some((x0, x1, contact, bh, c)) = self.object {
            let d = self.background_depth(contact);
            for y in contact.saturating_sub(bh)..=contact.min(height - 1) {
                for sx in x0..x1 {
                    if sx < offset || sx - offset >= width {
                        continue;
                    }
                    let x = sx - offset;
                    let k = 0.8 + 0.4 * fine.get(sx, y);
                    img.set(x, y, c.map(|v| (v * k).clamp(0.0, 1.0)));
                    depth[y * width + x] = d;
                }
            }
        }
        (img, DepthMap::new(width, height, depth).expect("room depths are positive"))
    }
}

/// A random room scene with its ground-truth depth.
pub fn room_scene(seed: u64, width: usize, height: usize) -> (ImageRGB, DepthMap) {
    Room::random(seed, width, height).render(width, height, 0)
}

/// A static room filmed by a camera panning `step` pixels per frame, with the
/// exact frame-to-frame flows.
#[derive(Clone, Debug)]
pub struct PanSequence {
    pub frames: Vec<ImageRGB>,
    pub depths: Vec<DepthMap>,
    pub flows: Vec<FlowField>,
}

pub fn pan_sequence(seed: u64, width: usize, height: usize, frames: usize, step: usize) -> PanSequence {
    let mut room = Room::random(seed, width, height);
    room.width = width + step * frames;
    let (imgs, depths) = (0..frames).map(|t| room.render(width, height, t * step)).unzip();
    let n = width * height;
    let valid: Vec<bool> = (0..n).map(|i| i % width >= step).collect();
    let flow = FlowField::with_validity(width, height, vec![-(step as f64); n], vec![0.0; n], valid).expect("flow dims");
    PanSequence { frames: imgs, depths, flows: vec![flow; frames.saturating_sub(1)] }
}

/// Textured square sliding over a textured static background.
#[derive(Clone, Debug)]
pub struct MovingSquare {
    pub frames: Vec<ImageRGB>,
    /// Ground-truth square masks.
    pub masks: Vec<Raster<bool>>,
}

/// `size`-pixel square moving `step` pixels per frame to the right, 0.5
/// brighter than a mid-grey background.
pub fn moving_square(seed: u64, width: usize, height: usize, frames: usize, size: usize, step: usize) -> MovingSquare {
    let bg = smooth_noise(width, height, 1.5, seed).map(|v| 0.4 + 0.2 * v);
    let fg = smooth_noise(width, height, 1.5, seed + 1).map(|v| 0.9 + 0.1 * v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y0 = rng.random_range(2..height - size - 2);
    let x_start = rng.random_range(2..6);
    let mut out = MovingSquare { frames: Vec::new(), masks: Vec::new() };
    for t in 0..frames {
        let x0 = x_start + t * step;
        let inside = |x: usize, y: usize| (x0..x0 + size).contains(&x) && (y0..y0 + size).contains(&y);
        let img = ImageRGB::from_fn(width, height, |x, y| {
            let v = if inside(x, y) { fg.get(x - x0 + x_start, y) } else { bg.get(x, y) };
            [v; 3]
        });
        out.masks.push(Raster::from_fn(width, height, inside));
        out.frames.push(img);
    }
    out
}

/// A static room with a box sliding across its floor.
#[derive(Clone, Debug)]
pub struct MoverSequence {
    pub frames: Vec<ImageRGB>,
    pub depths: Vec<DepthMap>,
    pub masks: Vec<Raster<bool>>,
    /// Depth of the floor at the box's contact row.
    pub contact_depth: f64,
}

/// The box carries the wall's brick texture, so appearance alone suggests wall depth.
pub fn mover_sequence(seed: u64, width: usize, height: usize, frames: usize, step: usize) -> MoverSequence {
    let mut room = Room::random(seed, width, height);
    room.object = None;
    let (bg, bg_depth) = room.render(width, height, 0);
    let junction = (room.horizon + room.focal * CAMERA_HEIGHT / room.wall_depth).ceil() as usize;
    let contact = (junction + 3 * (height - junction) / 4).min(height - 2);
    let contact_depth = room.background_depth(contact);
    let bw = width / 4;
    let bh = height / 3;
    let mut out = MoverSequence { frames: Vec::new(), depths: Vec::new(), masks: Vec::new(), contact_depth };
    for t in 0..frames {
        let x0 = 2 + t * step;
        let inside = |x: usize, y: usize| (x0..x0 + bw).contains(&x) && (contact + 1 - bh..=contact).contains(&y);
        let img = ImageRGB::from_fn(width, height, |x, y| {
            if inside(x, y) {
                room.wall_pixel((x - x0) as f64, y as f64)
            } else {
                bg.get(x, y)
            }
        });
        let depth: Vec<f64> =
            (0..width * height).map(|i| if inside(i % width, i / width) { contact_depth } else { bg_depth.values()[i] }).collect();
        out.masks.push(Raster::from_fn(width, height, inside));
        out.depths.push(DepthMap::new(width, height, depth).expect("positive"));
        out.frames.push(img);
    }
    out
}
