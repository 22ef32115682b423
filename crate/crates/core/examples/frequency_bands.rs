//! Gaussian frequency masks split a feature map into a low and a high band.

use lowlight::g2af::{G2af, G2afConfig};
use lowlight::imageio::procedural_scene;
use lowlight::nn::{Builder, Scope};
use lowlight::numerics::{Initializer, ParamStore, Precision, Tape};

fn main() -> lowlight::Result<()> {
    let x = procedural_scene(33, 33, 3).to_tensor();
    for (r_low, r_high) in [(0.05, 0.05), (0.3, 0.1), (1.0, 0.5)] {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(0);
        let config = G2afConfig { r_low_init: r_low, r_high_init: r_high, ..G2afConfig::default() };
        let g2af = G2af::build(&mut Builder::new(&mut store, &mut init), 3, config);

        let tape = Tape::new(Precision::F64);
        let bands = g2af.bands(&Scope::eval(&tape, &store), &tape.constant(x.clone()))?;
        let energy = |t: &lowlight::numerics::Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
        println!(
            "r_low {r_low:<4} r_high {r_high:<4} low-band energy {:10.3}  high-band energy {:10.3}  max |imag| {:.1e}",
            energy(bands.low.value()),
            energy(bands.high.value()),
            bands.max_imag
        );
    }
    Ok(())
}
