//! Spanning regressions: a strategy with a planted alpha regressed on two
//! simulated factors, then a factor regressed on the strategy.
//!
//! cargo run --release --example spanning

use chrono::{Duration, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use returnformer::econometrics::{spanning_test, FactorTable};

fn main() -> returnformer::Result<()> {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let noise = Normal::new(0.0, 0.01).expect("valid sd");
    let start = NaiveDate::from_ymd_opt(2010, 1, 4).expect("valid date");
    let n = 1500;
    let dates: Vec<NaiveDate> = (0..n).map(|i| start + Duration::days(i)).collect();
    let mkt: Vec<f64> = (0..n).map(|_| 0.0003 + noise.sample(&mut r)).collect();
    let rev: Vec<f64> = (0..n).map(|_| 0.0001 + noise.sample(&mut r)).collect();
    // 0.2% a day of alpha plus exposure to both factors
    let strat: Vec<(NaiveDate, f64)> = (0..n as usize)
        .map(|i| (dates[i], 0.002 + 0.3 * mkt[i] + 0.8 * rev[i] + noise.sample(&mut r)))
        .collect();
    let factors = FactorTable {
        names: vec!["mkt".into(), "strev".into()],
        dates: dates.clone(),
        values: (0..n as usize).map(|i| vec![mkt[i], rev[i]]).collect(),
    };

    let fit = spanning_test(&strat, &factors, &["mkt", "strev"], 20, 252.0)?;
    println!("strategy on factors: alpha {:.1}%/yr (t {:.2}), adj R2 {:.1}%, {} days", fit.alpha_ann_pct, fit.t_alpha, fit.adj_r2_pct, fit.n_obs);
    for (name, b, t) in &fit.betas {
        println!("  beta {name:<6} {b:>7.3} (t {t:.2})");
    }

    let rev_series = factors.series("strev").expect("column exists");
    let back = spanning_test(&rev_series, &FactorTable::from_series("strategy", &strat), &["strategy"], 20, 252.0)?;
    println!(
        "strev on strategy: alpha {:.1}%/yr (t {:.2}), beta {:.3}",
        back.alpha_ann_pct, back.t_alpha, back.betas[0].1
    );
    Ok(())
}
