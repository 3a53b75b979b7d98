//! Depth to disparity to a synthesized right view, composed as a red-cyan
//! anaglyph. Pass an output directory to keep the images.

use depth_transfer::io::save_rgb;
use depth_transfer::synthetic::room_scene;
use depth_transfer::viewsynth::{compose_anaglyph, compose_side_by_side, depth_to_disparity, render_view, StereoParams};

fn main() -> depth_transfer::Result<()> {
    let (left, depth) = room_scene(2, 96, 72);
    let disp = depth_to_disparity(&depth, &StereoParams { max_disparity: 6.0, ..StereoParams::default() })?;
    let (lo, hi) = disp.data().iter().fold((f64::MAX, f64::MIN), |(l, h), d| (l.min(*d), h.max(*d)));
    let (right, holes) = render_view(&left, &disp)?;
    println!("disparity range [{lo:.2}, {hi:.2}] px; {} pixels filled", holes.iter().filter(|h| **h).count());

    if let Some(dir) = std::env::args_os().nth(1) {
        let dir = std::path::Path::new(&dir);
        save_rgb(&compose_anaglyph(&left, &right)?, &dir.join("anaglyph.png"))?;
        save_rgb(&compose_side_by_side(&left, &right)?, &dir.join("sbs.png"))?;
    }
    Ok(())
}
