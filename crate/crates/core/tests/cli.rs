use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_returnformer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

/// Synthetic panel plus a tiny trained checkpoint.
fn fixture(dir: &Path) -> (String, String) {
    let panel = p(dir, "panel.csv");
    let ckpt = p(dir, "model.ckpt");
    assert!(run(&["synth", "--out", &panel, "--stocks", "30", "--days", "500"]).status.success());
    let o = run(&[
        "train", "--panel", &panel, "--out", &ckpt, "--train-end", "2000-10-31", "--val-end", "2001-02-28",
        "--block-size", "32", "--d-model", "16", "--blocks", "1", "--heads", "2", "--steps", "30",
        "--batch-size", "8", "--eval-interval", "15",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    (panel, ckpt)
}

fn forecast(dir: &Path, panel: &str, ckpt: &str, threads: &str, name: &str) -> PathBuf {
    let out = dir.join(name);
    let o = run(&[
        "--threads", threads, "forecast", "--checkpoint", ckpt, "--panel", panel, "--from", "2001-03-01",
        "--to", "2001-12-31", "--min-window", "32", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn pipeline_outputs_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (panel, ckpt) = fixture(d);
    assert!(Path::new(&format!("{ckpt}.log.csv")).exists());

    // forecasts do not depend on the worker count
    let one = forecast(d, &panel, &ckpt, "1", "f1.csv");
    let four = forecast(d, &panel, &ckpt, "4", "f4.csv");
    assert_eq!(std::fs::read(&one).unwrap(), std::fs::read(four).unwrap());
    let f = one.to_str().unwrap();

    let ew = run(&["backtest", "--forecasts", f, "--panel", &panel, "--out-dir", &p(d, "ew")]);
    assert!(ew.status.success());
    let ew_out = stdout(&ew);
    assert_eq!(ew_out.lines().count(), 1 + 4 * 3, "header plus three legs per price filter");
    assert!(ew_out.lines().nth(1).unwrap().starts_with("long_short,ew,10,0,1,"));
    assert!(Path::new(&p(d, "ew")).join("stats.csv").exists());
    assert!(Path::new(&p(d, "ew")).join("cumulative_ew_m10_p0_h1.csv").exists());

    let vw = run(&["backtest", "--forecasts", f, "--panel", &panel, "--out-dir", &p(d, "vw"), "--weighting", "value"]);
    let vw_out = stdout(&vw);
    assert!(vw_out.lines().nth(1).unwrap().starts_with("long_short,vw,"));
    assert_ne!(ew_out.lines().nth(1).unwrap()[17..], vw_out.lines().nth(1).unwrap()[17..]);

    let skip = run(&["backtest", "--forecasts", f, "--panel", &panel, "--out-dir", &p(d, "skip"), "--skip-day", "--price-filters", "0"]);
    assert!(stdout(&skip).lines().nth(1).unwrap().starts_with("long_short,ew,10,0,2,"));

    let fmb = run(&["fmb", "--forecasts", f, "--panel", &panel]);
    assert!(fmb.status.success());
    assert!(stdout(&fmb).starts_with("horizon,intercept,slope,t_slope,adj_r2_pct,corr_pct,dates,dropped\n1,"));
}

#[test]
fn fmb_with_perfect_forecasts_has_unit_slope() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let panel = p(d, "panel.csv");
    assert!(run(&["synth", "--out", &panel, "--stocks", "20", "--days", "60"]).status.success());
    // forecast on date t equals the realized return on t+1, in basis points
    let text = std::fs::read_to_string(&panel).unwrap();
    let mut rows: Vec<(String, String, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].to_string(), f[2].parse().unwrap())
        })
        .collect();
    rows.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
    let mut out = String::from("stock_id,date,horizon,expected_return_bp\n");
    for w in rows.windows(2) {
        if w[0].0 == w[1].0 {
            out.push_str(&format!("{},{},1,{}\n", w[0].0, w[0].1, w[1].2 * 10_000.0));
        }
    }
    let f = p(d, "perfect.csv");
    std::fs::write(&f, out).unwrap();
    let o = run(&["fmb", "--forecasts", &f, "--panel", &panel]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o).lines().nth(1).unwrap().to_string();
    let fields: Vec<&str> = line.split(',').collect();
    assert_eq!(fields[2], "1.0000");
    assert_eq!(fields[4], "100.000");
}

#[test]
fn span_of_a_series_on_itself() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut series = String::from("date,holding_date,long,short,long_short,n_long,n_short\n");
    let mut factors = String::from("date,self\n");
    for i in 0..50 {
        let date = chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Duration::days(i);
        let v = ((i * 37 % 11) as f64 - 5.0) / 1000.0;
        series.push_str(&format!("{date},{date},0,0,{v},1,1\n"));
        factors.push_str(&format!("{date},{v}\n"));
    }
    std::fs::write(d.join("s.csv"), series).unwrap();
    std::fs::write(d.join("f.csv"), factors).unwrap();
    let o = run(&["span", "--series", &p(d, "s.csv"), "--factors", &p(d, "f.csv"), "--lags", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let row = stdout(&o).lines().nth(1).unwrap().to_string();
    let f: Vec<&str> = row.split(',').collect();
    assert_eq!(f[1].trim_start_matches('-'), "0.00");
    assert_eq!(f[4], "1.0000");
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run(&["synth"]).status.code(), Some(1), "missing --out");
    let missing = run(&["eval", "--checkpoint", "nope.ckpt", "--panel", "nope.csv"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope"));

    let panel = p(d, "panel.csv");
    assert!(run(&["synth", "--out", &panel, "--stocks", "5", "--days", "40"]).status.success());
    let bad_horizon = run(&["train", "--panel", &panel, "--out", &p(d, "m"), "--train-end", "2000-01-20", "--horizon", "7"]);
    assert_eq!(bad_horizon.status.code(), Some(1));

    std::fs::write(d.join("bad.cfg"), "stocks = 5\nbogus = 1\n").unwrap();
    let bad_key = run(&["--config", &p(d, "bad.cfg"), "synth", "--out", &p(d, "x.csv")]);
    assert_eq!(bad_key.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("bogus"));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.cfg"), "stocks = 3\ndays = 10\n").unwrap();
    let o = run(&["--config", &p(d, "c.cfg"), "synth", "--out", &p(d, "a.csv"), "--days", "12"]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(d.join("a.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 12);
}

#[test]
fn monthly_variant_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let panel = p(d, "panel.csv");
    let ckpt = p(d, "m20.ckpt");
    assert!(run(&["synth", "--out", &panel, "--stocks", "30", "--days", "700"]).status.success());
    let o = run(&[
        "train", "--panel", &panel, "--out", &ckpt, "--train-end", "2000-12-31", "--horizon", "20",
        "--block-size", "32", "--d-model", "16", "--blocks", "1", "--heads", "2", "--steps", "20",
        "--batch-size", "8", "--eval-interval", "10",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let f = p(d, "f20.csv");
    let o = run(&[
        "forecast", "--checkpoint", &ckpt, "--panel", &panel, "--from", "2001-01-01", "--to", "2002-09-30",
        "--horizon", "20", "--min-window", "32", "--out", &f,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(&f).unwrap();
    let dates: std::collections::BTreeSet<&str> = table.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(dates.len(), 21, "one forecast date per month end");
    assert!(table.lines().skip(1).all(|l| l.split(',').nth(2) == Some("20")));

    let bt = run(&["backtest", "--forecasts", &f, "--panel", &panel, "--out-dir", &p(d, "bt"), "--price-filters", "0"]);
    assert!(bt.status.success(), "{}", String::from_utf8_lossy(&bt.stderr));
    let first = stdout(&bt).lines().nth(1).unwrap().to_string();
    let periods: usize = first.split(',').nth(12).unwrap().parse().unwrap();
    assert_eq!(periods, 20, "the last month end has no following month");
}
