//! Bottleneck entropy map of a freshly initialised model, and how the
//! attention value-path gradients respond when the map is rescaled.

use lowlight::imageio::{save_heatmap, Degradation};
use lowlight::network::{entropy_scale_sweep, synthetic_dataset, Model, ModelConfig};

fn main() -> lowlight::Result<()> {
    let model = Model::build(ModelConfig::toy())?;
    let pair = &synthetic_dataset(1, 32, 2, Degradation::default())?[0];
    let (low, high) = (pair.low.to_tensor(), pair.high.to_tensor());

    let (_, entropy) = model.enhance(&low)?;
    let map = entropy.expect("toy model has UaD enabled");
    println!("entropy map {:?}: min {:.4} mean {:.4} max {:.4}", map.dims(), map.min(), map.mean(), map.max());
    let path = std::env::temp_dir().join("lowlight-entropy.png");
    save_heatmap(&map, &path)?;
    println!("heatmap written to {}", path.display());

    for r in entropy_scale_sweep(&model, &low, &high, &[0.0, 0.5, 1.0, 2.0])? {
        println!(
            "scale {:<4} value-path |g| {:.4e} (ratio {:.3})  whole UaD |g| ratio {:.3}",
            r.scale, r.value_path_norm_scaled, r.value_path_ratio, r.block_ratio
        );
    }
    Ok(())
}
