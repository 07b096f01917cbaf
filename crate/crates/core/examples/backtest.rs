//! Decile long-short backtest driven by the planted regime means, so the
//! portfolio machinery can be exercised without training a model.
//!
//! cargo run --release --example backtest

use returnformer::backtest::{net_of_cost, perf_stats, run_backtest, SortConfig, Weighting};
use returnformer::data::{generate_synthetic, SyntheticSpec};
use returnformer::forecast::{ForecastRow, ForecastTable};

fn main() -> returnformer::Result<()> {
    let syn = generate_synthetic(&SyntheticSpec::default())?;
    let cal = syn.panel.calendar();
    let rows = syn
        .panel
        .stocks
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            let syn = &syn;
            s.obs.iter().enumerate().map(move |(d, o)| ForecastRow {
                stock_id: s.id,
                date: o.date,
                horizon: 1,
                expected_return_bp: syn.planted_next_mean_bp(i, d),
            })
        })
        .collect();
    let table = ForecastTable { rows, skipped: 0 };

    println!("{:<8} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}", "weights", "price", "mean%", "t", "sd%", "sharpe", "mdd%");
    for weighting in [Weighting::Equal, Weighting::Value] {
        for min_price in [0.0, 1.0, 3.0, 5.0] {
            let cfg = SortConfig {
                weighting,
                min_price,
                ..SortConfig::default()
            };
            let series = run_backtest(&table, &syn.panel, &cfg, cal[1000], cal[cal.len() - 1])?;
            let s = perf_stats(&series.long_short(), 252.0, 20)?;
            println!(
                "{:<8} {min_price:>6} {:>8.1} {:>8.2} {:>8.1} {:>8.2} {:>8.1}",
                format!("{weighting:?}"),
                s.mean,
                s.t_mean,
                s.sd,
                s.sharpe,
                s.mdd
            );
        }
    }
    println!(
        "cost check: 119.1% gross at 400% daily turnover and 5 bp per trade nets {:.1}%",
        net_of_cost(119.1, 4.0, 0.0005, 252.0)
    );
    Ok(())
}
