//! 200 Adam steps of the toy model on 16 synthetic 32x32 pairs.
//!
//! `cargo run --release --example train_toy -- [checkpoint_out]`

use lowlight::imageio::Degradation;
use lowlight::network::{save_checkpoint, synthetic_dataset, train_and_evaluate, Model, ModelConfig, TrainConfig};

fn main() -> lowlight::Result<()> {
    let data = synthetic_dataset(16, 32, 0, Degradation::default())?;
    let mut model = Model::build(ModelConfig::toy())?;
    println!("toy model: {} parameters", model.param_count());

    let config = TrainConfig::default();
    let (history, summary) = train_and_evaluate(&mut model, &data, &[], &config)?;
    for r in history.iter().step_by(20) {
        println!("step {:3}  lr {:.2e}  loss {:.5}", r.step, r.lr, r.loss.total);
    }
    let (a, b) = (summary.initial, summary.final_train);
    println!("eval loss {:.5} -> {:.5} ({:.1}%)", a.loss.total, b.loss.total, 100.0 * b.loss.total / a.loss.total);
    println!("psnr input {:.2} dB, output {:.2} -> {:.2} dB, ssim {:.3}", a.psnr_input, a.psnr_output, b.psnr_output, b.ssim_output);

    if let Some(path) = std::env::args().nth(1) {
        save_checkpoint(&model, &path)?;
        println!("checkpoint written to {path}");
    }
    Ok(())
}
