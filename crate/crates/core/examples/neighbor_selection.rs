//! Top-k nearest neighbours inside a 5x5 patch, as used by colour
//! calibration.

use lowlight::causal::{normalized_distances, select_neighbors, AscConfig};
use lowlight::imageio::procedural_scene;

fn main() -> lowlight::Result<()> {
    let config = AscConfig::default();
    let x = procedural_scene(12, 12, 5).to_tensor();
    let dist = normalized_distances(&x, config.patch);
    let sel = select_neighbors(&x, config)?;
    let w = x.dims()[3];
    for (y, xx) in [(2, 2), (6, 6), (9, 4)] {
        let p = y * w + xx;
        let picks: Vec<String> = (0..config.k)
            .map(|j| {
                let cand = sel.get(0, p, j);
                let (dy, dx) = ((cand / config.patch) as isize - 2, (cand % config.patch) as isize - 2);
                format!("({dy:+},{dx:+}) d={:.3}", dist.at(0, 0, cand, p))
            })
            .collect();
        println!("pixel ({y},{xx}): {}", picks.join("  "));
    }
    Ok(())
}
