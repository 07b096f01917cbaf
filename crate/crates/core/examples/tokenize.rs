//! Maps daily returns to tokens and back to bin midpoints.
//!
//! cargo run --example tokenize -- 0.012 -0.024 0.05

use returnformer::tokenizer::{midpoint, to_basis_points, tokenize, BinSpec, VOCAB_SIZE};

fn main() -> returnformer::Result<()> {
    let mut rets: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if rets.is_empty() {
        rets = vec![-0.024, 0.0, 0.0, 0.05, 0.048, -1.0, 0.9999, 3.5];
    }
    println!("{VOCAB_SIZE} tokens");
    println!("{:>10} {:>8} {:>6} {:>10} {:>22}", "return", "bp", "token", "midpoint", "interval (bp)");
    let spec = BinSpec::default();
    for r in rets {
        let t = tokenize(r)?;
        let (lo, hi) = spec.interval(t);
        println!(
            "{r:>10} {:>8} {:>6} {:>10} {:>22}",
            to_basis_points(r),
            t.0,
            midpoint(t),
            format!("({lo}, {hi}]")
        );
    }
    Ok(())
}
