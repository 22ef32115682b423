//! Module ablation rows trained under the same protocol.
//!
//! `cargo run --release --example ablation -- [steps]`

use lowlight::cli::{ablation_table, parse_rows, run_ablation, RunConfig};
use lowlight::imageio::Degradation;
use lowlight::network::synthetic_dataset;

fn main() -> lowlight::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let mut config = RunConfig::default();
    config.train.steps = steps;
    let pairs = synthetic_dataset(18, 32, 0, Degradation::default())?;
    let rows = parse_rows("baseline,len,neco,uad,asc,full")?;
    let results = run_ablation(&config, &pairs, &rows)?;
    print!("{}", ablation_table(&results));
    Ok(())
}
