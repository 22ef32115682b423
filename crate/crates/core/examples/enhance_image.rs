//! Enhance an image with a checkpoint, or with a briefly trained toy model
//! when none is given.
//!
//! `cargo run --release --example enhance_image -- input.png output.png [checkpoint]`

use lowlight::imageio::{self, Degradation, Image};
use lowlight::network::{load_checkpoint_any, synthetic_dataset, train_toy, Model, ModelConfig, TrainConfig};
use lowlight::objective::{psnr, ssim_metric};

fn main() -> lowlight::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let model = match args.get(2) {
        Some(ckpt) => load_checkpoint_any(ckpt)?,
        None => {
            let mut m = Model::build(ModelConfig::toy())?;
            let data = synthetic_dataset(8, 32, 11, Degradation::default())?;
            train_toy(&mut m, &data, &TrainConfig { steps: 60, ..TrainConfig::default() })?;
            m
        }
    };
    let (input, reference) = match args.first() {
        Some(path) => (imageio::load(path)?, None),
        None => {
            // any size works: the model pads to its divisor and crops back
            let high = imageio::procedural_scene(45, 37, 99);
            (imageio::synth_lowlight(&high, Degradation::default(), 1)?, Some(high))
        }
    };
    let (out, entropy) = model.enhance(&input.to_tensor())?;
    if let Some(high) = reference {
        let gt = high.to_tensor();
        println!("psnr {:.2} -> {:.2} dB, ssim {:.3}", psnr(&input.to_tensor(), &gt)?, psnr(&out, &gt)?, ssim_metric(&out, &gt)?);
    }
    let dest = args.get(1).cloned().unwrap_or_else(|| std::env::temp_dir().join("lowlight-enhanced.png").display().to_string());
    imageio::save(&Image::from_tensor(&out, 0)?, &dest)?;
    println!("enhanced {}x{} image written to {dest}", input.width(), input.height());
    if let Some(map) = entropy {
        println!("bottleneck entropy mean {:.4}", map.mean());
    }
    Ok(())
}
