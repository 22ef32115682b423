//! Impulse response of the selective scan along one line, and the four
//! directional scans over a 2-D map.

use lowlight::causal::{scan_direction, ssm_scan_1d, SsmVars};
use lowlight::numerics::{Precision, Tape, Tensor};

fn main() -> lowlight::Result<()> {
    let tape = Tape::new(Precision::F64);
    let c = |v: f64| tape.constant(Tensor::full([1, 1, 1, 1], v));
    let tau = tape.constant(Tensor::zeros([4, 1, 1, 1]));
    let vars = SsmVars::new(c(0.8), c(1.0), c(0.5), c(0.0), tau)?;

    let mut impulse = Tensor::zeros([1, 1, 8, 1]).to_vec();
    impulse[0] = 1.0;
    let seq = tape.constant(Tensor::from_vec([1, 1, 8, 1], impulse)?);
    let y = ssm_scan_1d(&seq, &vars, 0)?;
    println!("impulse response (a=0.8, c=0.5): {:?}", y.value().data().iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>());

    let mut spot = Tensor::zeros([1, 1, 5, 5]).to_vec();
    spot[12] = 1.0;
    let map = tape.constant(Tensor::from_vec([1, 1, 5, 5], spot)?);
    for (p, name) in ["rows, left to right", "rows, right to left", "columns, top to bottom", "columns, bottom to top"].iter().enumerate() {
        let out = scan_direction(&map, &vars, p)?;
        println!("{name}:");
        for h in 0..5 {
            let row: Vec<String> = (0..5).map(|w| format!("{:6.3}", out.value().at(0, 0, h, w))).collect();
            println!("  {}", row.join(" "));
        }
    }
    Ok(())
}
