//! Writes a small synthetic database to disk, ingests it, caches the
//! features and queries the nearest neighbours of a new image.

use depth_transfer::database::{image_features, Database, IngestOptions};
use depth_transfer::io::{save_depth_png, save_rgb};
use depth_transfer::synthetic::room_scene;

fn main() -> depth_transfer::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path().join("db");
    for s in 0..12u64 {
        let source = root.join(format!("room{s:02}"));
        std::fs::create_dir_all(&source).expect("source dir");
        let (img, depth) = room_scene(s, 96, 72);
        save_rgb(&img, &source.join("img_00000.png"))?;
        save_depth_png(&depth, &source.join("depth_00000.png"))?;
    }

    let opts = IngestOptions { canonical: Some((96, 72)), cache: None };
    let (db, skipped) = Database::ingest(&root, &opts)?;
    println!("ingested {} entries, skipped {}", db.len(), skipped.len());

    let cache = dir.path().join("features.dtdb");
    db.save_cache(&cache)?;
    let db = Database::load_cache(&cache)?;
    println!("cache reloaded: {} entries at {:?}", db.len(), db.canonical_size());

    let (query, _) = room_scene(3, 96, 72);
    for c in db.query_candidates(&image_features(&query, None)?, 5)? {
        println!("  {:<8} distance {:.4}", db.entries()[c.index].source, c.distance);
    }
    Ok(())
}
