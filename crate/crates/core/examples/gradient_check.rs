//! Backward-pass gradients of every module against central differences in
//! 64-bit mode.
//!
//! `cargo run --release --example gradient_check -- [module] [seed]`

use lowlight::verify::{run_gradcheck, CheckTarget, DEFAULT_TOL};

fn main() -> lowlight::Result<()> {
    let mut args = std::env::args().skip(1);
    let targets = CheckTarget::parse_selection(&args.next().unwrap_or_else(|| "all".into()))?;
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let report = run_gradcheck(&targets, seed, DEFAULT_TOL)?;
    print!("{}", report.table());
    if let Some(diag) = &report.entropy_diagnostic {
        for d in diag {
            println!("entropy x{:<4} value-path gradient ratio {:.4}", d.scale, d.value_path_ratio);
        }
    }
    println!("{}", if report.passed { "all within tolerance" } else { "FAILED" });
    Ok(())
}
