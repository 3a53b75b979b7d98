//! Video depth transfer on a panning synthetic sequence, with and without
//! the temporal coherence term.

use depth_transfer::database::{Database, MemoryFrame};
use depth_transfer::eval::depth_metrics;
use depth_transfer::optimizer::{infer_video, PipelineParams};
use depth_transfer::synthetic::{pan_sequence, room_scene};

fn main() -> depth_transfer::Result<()> {
    let frames = (0..20)
        .map(|s| {
            let (image, depth) = room_scene(s, 96, 72);
            MemoryFrame { source: format!("room{s:02}"), frame: 0, image, depth }
        })
        .collect();
    let db = Database::from_frames(frames, (96, 72))?;
    let seq = pan_sequence(100, 96, 72, 5, 2);

    for temporal in [true, false] {
        let mut p = PipelineParams::default();
        p.objective.temporal = temporal;
        p.objective.motion = false;
        let r = infer_video(&db, &seq.frames, &p)?;
        let rels: Vec<String> = r
            .depths
            .iter()
            .zip(&seq.depths)
            .map(|(d, gt)| depth_metrics(d, gt).map(|m| format!("{:.3}", m.rel)))
            .collect::<depth_transfer::Result<_>>()?;
        println!("temporal {temporal:<5} per-frame rel [{}]", rels.join(", "));
    }
    Ok(())
}
