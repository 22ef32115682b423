//! The seven loss terms and their weighted total for one low/high pair,
//! with the low image as the prediction.

use lowlight::imageio::Degradation;
use lowlight::network::{len_target, synthetic_dataset};
use lowlight::numerics::{Precision, Tape};
use lowlight::objective::{Objective, ObjectiveConfig};

fn main() -> lowlight::Result<()> {
    let pair = &synthetic_dataset(1, 32, 1, Degradation::default())?[0];
    let (low, high) = (pair.low.to_tensor(), pair.high.to_tensor());
    let target = len_target(&low, &high)?;
    let config = ObjectiveConfig::default();
    let obj = Objective::new(config)?;

    let tape = Tape::new(Precision::F32);
    let half = tape.constant(target.map(|v| 0.5 * v));
    let (_, report) = obj.total_loss(&tape.constant(low), &tape.constant(high.clone()), &half, &tape.constant(target.clone()))?;
    let names = ["mse", "ssim", "per", "global", "color", "grad", "len"];
    for ((name, value), w) in names.iter().zip(report.terms()).zip(config.weights.as_array()) {
        println!("{name:<7} {value:10.5}  x {w:<4} = {:.5}", value * w);
    }
    println!("total   {:10.5}", report.total);

    let gt = tape.constant(high);
    let perfect = tape.constant(target);
    let (_, same) = obj.total_loss(&gt, &gt, &perfect, &perfect)?;
    println!("identical inputs with a perfect prior: total {}", same.total);
    Ok(())
}
