//! Procedural well-lit scenes degraded into low-light pairs.
//!
//! `cargo run --example synth_pairs -- [out_dir]`

use lowlight::imageio::{self, Degradation};
use lowlight::network::synthetic_dataset;
use lowlight::objective::psnr;

fn main() -> lowlight::Result<()> {
    let out = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("lowlight-synth"));
    std::fs::create_dir_all(&out).map_err(|e| lowlight::Error::io(&out, e))?;

    let degradation = Degradation::default();
    let pairs = synthetic_dataset(4, 64, 0, degradation)?;
    println!("gamma {} scale {} sigma {}", degradation.gamma, degradation.scale, degradation.noise_sigma);
    for (i, pair) in pairs.iter().enumerate() {
        let (low, high) = (pair.low.to_tensor(), pair.high.to_tensor());
        println!("pair {i}: mean {:.3} -> {:.3}, psnr(low, high) {:.2} dB", high.mean(), low.mean(), psnr(&low, &high)?);
        imageio::save(&pair.low, out.join(format!("low{i}.png")))?;
        imageio::save(&pair.high, out.join(format!("high{i}.png")))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
