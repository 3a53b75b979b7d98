//! Dense SIFT-flow alignment of one room to another and the warped depth
//! that results.

use depth_transfer::align::{align_with_energy, warp_depth, AlignParams};
use depth_transfer::eval::depth_metrics;
use depth_transfer::features::{compute_dense_sift, DEFAULT_CELL};
use depth_transfer::synthetic::room_scene;

fn main() -> depth_transfer::Result<()> {
    let (query, query_depth) = room_scene(4, 96, 72);
    let (cand, cand_depth) = room_scene(11, 96, 72);
    let (gq, gc) = (compute_dense_sift(&query, DEFAULT_CELL)?, compute_dense_sift(&cand, DEFAULT_CELL)?);
    let (warp, energy, identity) = align_with_energy(&gq, &gc, &AlignParams::default())?;
    println!("energy {energy:.1} (identity warp {identity:.1}); {:.1}% of pixels displaced", 100.0 * warp.nonzero_fraction());

    let before = depth_metrics(&cand_depth, &query_depth)?;
    let after = depth_metrics(&warp_depth(&cand_depth, &warp), &query_depth)?;
    println!("candidate depth vs query truth: rel {:.3} unwarped, {:.3} warped", before.rel, after.rel);
    Ok(())
}
