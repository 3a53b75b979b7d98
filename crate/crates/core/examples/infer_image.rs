//! Single-image depth transfer against an in-memory database of rooms.
//! Pass an output path to save the estimate as a 16-bit PNG.

use depth_transfer::database::{Database, MemoryFrame};
use depth_transfer::eval::depth_metrics;
use depth_transfer::optimizer::{infer_image, PipelineParams};
use depth_transfer::synthetic::room_scene;

fn main() -> depth_transfer::Result<()> {
    let frames = (0..30)
        .map(|s| {
            let (image, depth) = room_scene(s, 96, 72);
            MemoryFrame { source: format!("room{s:02}"), frame: 0, image, depth }
        })
        .collect();
    let db = Database::from_frames(frames, (96, 72))?;

    // a room the database has never seen
    let (img, truth) = room_scene(500, 96, 72);
    let r = infer_image(&db, &img, &PipelineParams::default())?;
    let m = depth_metrics(&r.depth, &truth)?;
    println!("candidates: {:?}", r.candidates.iter().map(|c| c.candidate.index).collect::<Vec<_>>());
    println!("IRLS objective {:.1} -> {:.1} in {} iterations", r.solve.trace[0], r.solve.trace.last().unwrap(), r.solve.outer_iterations);
    println!("rel {:.3}  log10 {:.3}  rms {:.3}", m.rel, m.log10, m.rms);

    if let Some(out) = std::env::args_os().nth(1) {
        depth_transfer::io::save_depth_png(&r.depth, out.as_ref())?;
    }
    Ok(())
}
