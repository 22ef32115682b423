//! Save a model, reload it, and confirm the forward pass is bit-identical.

use lowlight::network::{checkpoint_bytes, model_from_checkpoint_bytes, parse_checkpoint, Model, ModelConfig};
use lowlight::numerics::Tensor;

fn main() -> lowlight::Result<()> {
    let model = Model::build(ModelConfig { seed: 3, ..ModelConfig::toy() })?;
    let bytes = checkpoint_bytes(&model)?;
    let (header, payload) = parse_checkpoint(&bytes)?;
    println!("{} bytes: {} tensors, {} payload bytes", bytes.len(), header.params.len(), payload.len());
    for e in header.params.iter().take(4) {
        println!("  {:<32} {:?} @ {}", e.name, e.shape, e.offset);
    }

    let restored = model_from_checkpoint_bytes(&bytes)?;
    let x = Tensor::from_fn([1, 3, 16, 16], |_, c, h, w| ((c * 7 + h * 3 + w) % 11) as f64 / 40.0);
    let (a, _) = model.enhance(&x)?;
    let (b, _) = restored.enhance(&x)?;
    println!("parameters identical: {}", model.store.bit_eq(&restored.store));
    println!("outputs identical: {}", a.bit_eq(&b));
    Ok(())
}
