//! Coarse-to-fine flow between a texture and a shifted copy, plus the
//! per-pixel confidence derived from the reprojection error.

use depth_transfer::flow::{estimate_flow, flow_confidence};
use depth_transfer::raster::{gaussian_blur, sample_bilinear, GrayImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> depth_transfer::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise = GrayImage::from_fn(96, 96, |_, _| rng.random::<f64>());
    let base = gaussian_blur(&noise, 2.0);
    // stretch contrast to [0.1, 0.9] so the data term is not swamped by smoothness
    let (lo, hi) = base.data().iter().fold((f64::MAX, f64::MIN), |(l, h), x| (l.min(*x), h.max(*x)));
    let base = base.map(|x| 0.1 + 0.8 * (x - lo) / (hi - lo));
    let (u, v) = (2.5, -1.0);
    let a = GrayImage::from_fn(64, 64, |x, y| base.get(x + 12, y + 12));
    let b = GrayImage::from_fn(64, 64, |x, y| sample_bilinear(&base, x as f64 + 12.0 - u, y as f64 + 12.0 - v).unwrap());

    let f = estimate_flow(&a, &b)?;
    let conf = flow_confidence(&a, &b, &f)?;
    let (mut epe, mut n) = (0.0, 0);
    for y in 8..56 {
        for x in 8..56 {
            let (fu, fv) = f.at(y * 64 + x);
            epe += (fu - u).hypot(fv - v);
            n += 1;
        }
    }
    let mean_conf = conf.data().iter().sum::<f64>() / conf.data().len() as f64;
    println!("true flow ({u}, {v}); interior endpoint error {:.3} px; mean confidence {mean_conf:.3}", epe / n as f64);
    Ok(())
}
