//! Benchmarks a database against a held-out test directory and prints the
//! per-item CSV and the aggregate metrics.

use depth_transfer::database::{Database, MemoryFrame};
use depth_transfer::eval::{run_benchmark, BenchmarkConfig, Protocol};
use depth_transfer::io::{save_depth_png, save_rgb};
use depth_transfer::synthetic::room_scene;

fn main() -> depth_transfer::Result<()> {
    let frames = (0..30)
        .map(|s| {
            let (image, depth) = room_scene(s, 96, 72);
            MemoryFrame { source: format!("room{s:02}"), frame: 0, image, depth }
        })
        .collect();
    let db = Database::from_frames(frames, (96, 72))?;

    let dir = tempfile::tempdir().expect("tempdir");
    for s in 300..306u64 {
        let item = dir.path().join(format!("test{s}"));
        std::fs::create_dir_all(&item).expect("item dir");
        let (img, depth) = room_scene(s, 96, 72);
        save_rgb(&img, &item.join("img_00000.png"))?;
        save_depth_png(&depth, &item.join("depth_00000.png"))?;
    }

    for protocol in [Protocol::Make3d, Protocol::Rgbd] {
        let cfg = BenchmarkConfig { protocol, ..BenchmarkConfig::default() };
        let report = run_benchmark(&db, dir.path(), &cfg)?;
        println!("{protocol:?}: rel {:.3} log10 {:.3} rms {:.3}", report.rel, report.log10, report.rms);
        print!("{}", report.to_csv());
    }
    Ok(())
}
