//! Moving-object segmentation on a textured square sliding over a static
//! background.

use depth_transfer::flow::FlowParams;
use depth_transfer::motionseg::{detect_motion, RansacParams, SegmentParams};
use depth_transfer::synthetic::moving_square;

fn main() -> depth_transfer::Result<()> {
    // the background is a per-pixel median, so the square has to leave each
    // pixel uncovered for most of the clip
    let s = moving_square(1, 96, 64, 16, 20, 3);
    let a = detect_motion(&s.frames, &RansacParams::default(), &FlowParams::default(), &SegmentParams::default())?;
    for (t, (m, gt)) in a.masks.iter().zip(&s.masks).enumerate() {
        let inter = m.mask.data().iter().zip(gt.data()).filter(|(a, b)| **a && **b).count();
        let union = m.mask.data().iter().zip(gt.data()).filter(|(a, b)| **a || **b).count();
        println!("frame {t:2}: {:4} moving pixels, {} components, IoU {:.3}", m.moving_pixels(), m.components.len(), inter as f64 / union.max(1) as f64);
    }
    Ok(())
}
