//! Generates a planted two-regime panel, writes it as CSV, reloads it, and
//! splits it into train, validation and test periods.
//!
//! cargo run --release --example synthetic_panel -- [out.csv]

use returnformer::data::{generate_synthetic, load_panel, save_panel, split, SplitSpec, SyntheticSpec, UniverseFilter};
use returnformer::tokenizer::tokenize;

fn main() -> returnformer::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("synthetic_panel.csv"));
    let syn = generate_synthetic(&SyntheticSpec::default())?;
    save_panel(&syn.panel, &out)?;
    let (panel, report) = load_panel(&out, &UniverseFilter::default())?;
    println!(
        "{}: {} rows read, {} kept, {} stocks",
        out.display(),
        report.rows,
        report.kept,
        panel.stocks.len()
    );

    // empirical next-day token mean by latent state
    let mut sums = [(0.0, 0usize); 2];
    for (i, s) in syn.panel.stocks.iter().enumerate() {
        for d in 0..s.obs.len() - 1 {
            let t = tokenize(s.obs[d + 1].ret)?;
            let e = &mut sums[syn.states[i][d] as usize];
            e.0 += t.0 as f64;
            e.1 += 1;
        }
    }
    for (k, (sum, n)) in sums.iter().enumerate() {
        println!("state {k}: {n} days, mean next-day token {:.2}", sum / *n as f64);
    }

    let cal = panel.calendar();
    let splits = split(
        &panel,
        &SplitSpec {
            train: (cal[0], cal[699]),
            validation: (cal[700], cal[999]),
            test: (cal[1000], cal[cal.len() - 1]),
        },
    )?;
    println!(
        "train {} obs, validation {} obs, test {} obs",
        splits.train.n_obs(),
        splits.validation.n_obs(),
        splits.test.n_obs()
    );
    Ok(())
}
