//! Command-line front end.
//!
//! A flat `key = value` file given with `--config` supplies defaults for any
//! long flag of the chosen subcommand; flags on the command line win. Keys
//! are flag names without the leading dashes (`d-model` or `d_model`).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use crate::backtest::{
    cross_sections, net_of_cost, perf_stats, run_backtest, write_cumulative, write_series, PerfStats,
    Rebalance, SortConfig, Weighting,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{
    generate_synthetic, load_panel, save_panel, Exchange, ReturnPanel, SyntheticSpec, UniverseFilter,
};
use crate::econometrics::{corr_from_r2, fama_macbeth, load_factors, spanning_test, FactorTable};
use crate::error::{Error, Result};
use crate::forecast::{build_forecast_table, load_forecasts, sample_paths, save_forecasts, ForecastRequest};
use crate::model::{Gpt, ModelConfig};
use crate::rng;
use crate::tokenizer::tokenize;
use crate::train::{evaluate_loss, save_training_log, train_with, TrainConfig, WindowSampler};

#[derive(Debug, Parser)]
#[command(name = "returnformer", version, about = "Transformer return forecasts and their evaluation")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Worker threads; 1 gives the bit-reproducible reference path.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Flat `key = value` file of flag defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded regime-switching panel as CSV.
    Synth(SynthArgs),
    /// Train a model on a panel and write a checkpoint plus training log.
    Train(TrainArgs),
    /// Mean cross-entropy of a checkpoint on a date range.
    Eval(EvalArgs),
    /// Expected-return forecasts for each stock-date.
    Forecast(ForecastArgs),
    /// Decile long-short portfolios and their statistics.
    Backtest(BacktestArgs),
    /// Fama-MacBeth regressions of realized on forecast returns.
    Fmb(FmbArgs),
    /// Spanning regressions of a portfolio on factors.
    Span(SpanArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub stocks: usize,
    #[arg(long, default_value_t = 2000)]
    pub days: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Daily probability of staying in the current regime.
    #[arg(long, default_value_t = 0.97)]
    pub persistence: f64,
    /// Regime means are +/- this many basis points.
    #[arg(long, default_value_t = 50.0)]
    pub state_mean_bp: f64,
    #[arg(long, default_value_t = 100.0)]
    pub noise_sd_bp: f64,
    #[arg(long, default_value = "2000-01-03")]
    pub start: NaiveDate,
}

#[derive(Debug, Args)]
pub struct UniverseArgs {
    /// Comma-separated exchanges to keep (NYSE, AMEX, NASDAQ, OTHER).
    #[arg(long, default_value = "NYSE,AMEX,NASDAQ")]
    pub exchanges: String,
    /// Keep every share code instead of common stocks (10, 11) only.
    #[arg(long)]
    pub all_share_codes: bool,
}

impl UniverseArgs {
    fn filter(&self) -> Result<UniverseFilter> {
        let exchanges = self
            .exchanges
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(Exchange::parse_name)
            .collect::<Result<Vec<_>>>()?;
        Ok(UniverseFilter {
            exchanges: Some(exchanges),
            share_codes: (!self.all_share_codes).then(|| vec![10, 11]),
        })
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 256)]
    pub block_size: usize,
    #[arg(long, default_value_t = 128)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub blocks: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub panel: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Training log path (defaults to the checkpoint path plus `.log.csv`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub universe: UniverseArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 10_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// 1 for next-day targets, 20 for 20-day-mean targets.
    #[arg(long, default_value_t = 1)]
    pub horizon: usize,
    #[arg(long, default_value_t = 500)]
    pub eval_interval: usize,
    #[arg(long, default_value_t = 20)]
    pub eval_batches: usize,
    /// First training date (defaults to the panel start).
    #[arg(long)]
    pub train_start: Option<NaiveDate>,
    #[arg(long)]
    pub train_end: NaiveDate,
    /// First validation date (defaults to the day after `train-end`).
    #[arg(long)]
    pub val_start: Option<NaiveDate>,
    /// Last validation date; omit to train without validation.
    #[arg(long)]
    pub val_end: Option<NaiveDate>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub panel: PathBuf,
    #[command(flatten)]
    pub universe: UniverseArgs,
    #[arg(long)]
    pub from: Option<NaiveDate>,
    #[arg(long)]
    pub to: Option<NaiveDate>,
    #[arg(long, default_value_t = 1)]
    pub horizon: usize,
    #[arg(long, default_value_t = 20)]
    pub batches: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub panel: PathBuf,
    #[command(flatten)]
    pub universe: UniverseArgs,
    #[arg(long)]
    pub from: NaiveDate,
    #[arg(long)]
    pub to: NaiveDate,
    /// 1: daily forecasts; 20: month-end forecasts from a 20-day-mean model.
    #[arg(long, default_value_t = 1)]
    pub horizon: usize,
    #[arg(long, default_value_t = 256)]
    pub min_window: usize,
    /// Sample paths of this many days from a daily model instead.
    #[arg(long)]
    pub path_days: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub paths: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightingArg {
    Equal,
    Value,
}

#[derive(Debug, Args)]
pub struct BacktestArgs {
    /// Forecast table CSV (or give `--checkpoint` to build one).
    #[arg(long)]
    pub forecasts: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub panel: PathBuf,
    #[command(flatten)]
    pub universe: UniverseArgs,
    #[arg(long)]
    pub from: Option<NaiveDate>,
    #[arg(long)]
    pub to: Option<NaiveDate>,
    /// Forecast horizon when building forecasts from a checkpoint.
    #[arg(long, default_value_t = 1)]
    pub horizon: usize,
    #[arg(long, default_value_t = 256)]
    pub min_window: usize,
    #[arg(long, default_value_t = 10)]
    pub quantiles: usize,
    #[arg(long, default_value_t = 10.0)]
    pub mcap_percentile: f64,
    /// Comma-separated minimum prices; one portfolio per value.
    #[arg(long, default_value = "0,1,3,5")]
    pub price_filters: String,
    #[arg(long, value_enum, default_value_t = WeightingArg::Equal)]
    pub weighting: WeightingArg,
    /// Realize returns one period later (skip a day or month).
    #[arg(long)]
    pub skip_day: bool,
    /// Market-cap breakpoints from NYSE stocks only.
    #[arg(long)]
    pub nyse_breakpoints: bool,
    /// Newey-West lags (default 20 daily, 4 monthly).
    #[arg(long)]
    pub lags: Option<usize>,
    /// Cost per trade in basis points, for a net-of-cost mean column.
    #[arg(long)]
    pub cost_bp: Option<f64>,
    /// Turnover per period assumed by the cost column.
    #[arg(long, default_value_t = 4.0)]
    pub turnover: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct FmbArgs {
    #[arg(long)]
    pub forecasts: PathBuf,
    #[arg(long)]
    pub panel: PathBuf,
    #[command(flatten)]
    pub universe: UniverseArgs,
    #[arg(long)]
    pub skip_day: bool,
    /// Newey-West lags (default 20 daily, 4 monthly).
    #[arg(long)]
    pub lags: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SpanArgs {
    /// Portfolio series CSV written by `backtest`.
    #[arg(long)]
    pub series: PathBuf,
    #[arg(long)]
    pub factors: PathBuf,
    /// Comma-separated factor names (default: every column).
    #[arg(long)]
    pub names: Option<String>,
    /// Monthly series: 12 periods per year and 4 default lags.
    #[arg(long)]
    pub monthly: bool,
    #[arg(long)]
    pub lags: Option<usize>,
    /// Regress each factor on the portfolio instead.
    #[arg(long)]
    pub reverse: bool,
}

/// Parses a flat `key = value` file; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("config line {}: expected key = value", i + 1))
        })?;
        let key = k.trim().replace('_', "-");
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("config key {key} given twice")));
        }
    }
    Ok(out)
}

/// Value of `--config` if present, found before full parsing.
fn find_config(args: &[String]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Inserts config-file entries as flags right after the subcommand name, so
/// anything given on the command line later overrides them.
fn splice_config(args: &[String], entries: &BTreeMap<String, String>) -> Result<Vec<String>> {
    let cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    let Some(pos) = args.iter().position(|a| names.contains(a)) else {
        return Ok(args.to_vec());
    };
    let sub = cmd.find_subcommand(&args[pos]).expect("listed above");
    let mut injected = Vec::new();
    for (key, value) in entries {
        if key == "config" {
            continue;
        }
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| Error::Config(format!("unknown config key {key} for {}", args[pos])))?;
        if arg.get_action().takes_values() {
            injected.push(format!("--{key}"));
            injected.push(value.clone());
        } else {
            match value.as_str() {
                "true" => injected.push(format!("--{key}")),
                "false" => {}
                other => {
                    return Err(Error::Config(format!("config key {key} expects true or false, got {other}")))
                }
            }
        }
    }
    let mut out = args[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

/// Runs the CLI and returns the process exit code.
pub fn run(args: Vec<String>, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32 {
    let args = match find_config(&args) {
        Some(path) => {
            let spliced = std::fs::read_to_string(&path)
                .map_err(|e| Error::io(&path, e))
                .and_then(|t| parse_config_text(&t))
                .and_then(|m| splice_config(&args, &m));
            match spliced {
                Ok(a) => a,
                Err(e) => {
                    let _ = writeln!(err, "error: {e}");
                    return e.exit_code();
                }
            }
        }
        None => args,
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    let result = match cli.threads {
        Some(0) => Err(Error::Config("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))
            .and_then(|pool| pool.install(|| dispatch(cli.command, out, err))),
        None => dispatch(cli.command, out, err),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Train(a) => cmd_train(&a, out, err),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Forecast(a) => cmd_forecast(&a, out, err),
        Command::Backtest(a) => cmd_backtest(&a, out, err),
        Command::Fmb(a) => cmd_fmb(&a, out),
        Command::Span(a) => cmd_span(&a, out),
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn load(path: &Path, universe: &UniverseArgs, err: &mut dyn Write) -> Result<ReturnPanel> {
    let (panel, report) = load_panel(path, &universe.filter()?)?;
    for (line, reason) in report.rejected.iter().take(10) {
        let _ = writeln!(err, "{}:{line}: rejected: {reason}", path.display());
    }
    if report.rejected.len() > 10 {
        let _ = writeln!(err, "... {} rows rejected in total", report.rejected.len());
    }
    if panel.is_empty() {
        return Err(Error::Data(format!("{}: no rows survive the filters", path.display())));
    }
    Ok(panel)
}

fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let spec = SyntheticSpec {
        n_stocks: a.stocks,
        n_days: a.days,
        state_means_bp: [a.state_mean_bp, -a.state_mean_bp],
        noise_sd_bp: a.noise_sd_bp,
        persistence: a.persistence,
        start: a.start,
        seed: a.seed,
    };
    let syn = generate_synthetic(&spec)?;
    save_panel(&syn.panel, &a.out)?;
    writeln!(out, "wrote {} observations for {} stocks to {}", syn.panel.n_obs(), a.stocks, a.out.display())
        .map_err(io_err)
}

fn model_config(m: &ModelArgs) -> ModelConfig {
    ModelConfig {
        block_size: m.block_size,
        d_model: m.d_model,
        n_blocks: m.blocks,
        n_heads: m.heads,
        dropout_p: m.dropout,
        ..ModelConfig::default()
    }
}

fn cmd_train(a: &TrainArgs, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<()> {
    let config = model_config(&a.model);
    config.validate()?;
    let cfg = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed: a.seed,
        horizon: a.horizon,
        eval_interval: a.eval_interval,
        eval_batches: a.eval_batches,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let val_start = a.val_start.unwrap_or(a.train_end + chrono::Duration::days(1));
    if val_start <= a.train_end {
        return Err(Error::Config("validation must start after train-end".into()));
    }
    if a.val_end.is_some_and(|e| e < val_start) {
        return Err(Error::Config("val-end precedes val-start".into()));
    }
    let panel = load(&a.panel, &a.universe, err)?;
    let train_start = a.train_start.unwrap_or(NaiveDate::MIN);
    let train_panel = panel.slice_dates(train_start, a.train_end);
    let val_panel = a.val_end.map(|end| panel.slice_dates(val_start, end));
    let model = Gpt::new(config, &mut rng::stream(a.seed, "init"))?;
    let _ = writeln!(err, "training {} parameters for {} steps", model.num_params(), a.steps);
    let outcome = train_with(model, &train_panel, val_panel.as_ref(), &cfg, |row| {
        let _ = writeln!(
            err,
            "step {:>6}  train {:.4}  val {}",
            row.step,
            row.train_loss,
            row.val_loss.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
        );
    })?;
    save_checkpoint(&outcome.model, &a.out)?;
    let log = a
        .log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.csv", a.out.display())));
    save_training_log(&outcome.history, &log)?;
    let last = outcome.history.last();
    writeln!(
        out,
        "final train loss {} val loss {}",
        last.map(|r| format!("{:.4}", r.train_loss)).unwrap_or_else(|| "-".into()),
        outcome.final_val_loss().map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
    )
    .map_err(io_err)
}

fn date_bounds(panel: &ReturnPanel, from: Option<NaiveDate>, to: Option<NaiveDate>) -> (NaiveDate, NaiveDate) {
    let cal = panel.calendar();
    (
        from.unwrap_or(cal[0]),
        to.unwrap_or(*cal.last().expect("nonempty panel")),
    )
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let panel = load(&a.panel, &a.universe, &mut std::io::sink())?;
    let (from, to) = date_bounds(&panel, a.from, a.to);
    let slice = panel.slice_dates(from, to);
    let sampler = WindowSampler::new(&slice, model.config.block_size, a.horizon)?;
    let loss = evaluate_loss(&model, &sampler, a.batches, a.batch_size, &mut rng::stream(a.seed, "train/eval"))?;
    writeln!(out, "cross_entropy,uniform\n{loss:.6},{:.6}", (model.config.vocab_size as f64).ln()).map_err(io_err)
}

fn cmd_forecast(a: &ForecastArgs, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let panel = load(&a.panel, &a.universe, err)?;
    let req = ForecastRequest {
        min_window: a.min_window,
        ..ForecastRequest::new(a.from, a.to, a.horizon)
    };
    let mut table = build_forecast_table(&model, &panel, &req)?;
    if let Some(m) = a.path_days {
        // replace exact next-day expectations with sampled m-day means
        let mut r = rng::stream(a.seed, "forecast/paths");
        let block = model.config.block_size;
        for row in &mut table.rows {
            let s = panel.stock(row.stock_id).expect("row from panel");
            let i = s.index_of(row.date).expect("row date in series");
            let start = (i + 1).saturating_sub(block);
            let window = s.obs[start..=i].iter().map(|o| tokenize(o.ret)).collect::<Result<Vec<_>>>()?;
            row.expected_return_bp = sample_paths(&model, &window, m, a.paths, &mut r)?;
            row.horizon = m;
        }
    }
    save_forecasts(&table, &a.out)?;
    writeln!(
        out,
        "wrote {} forecasts to {} ({} stock-dates skipped for short history)",
        table.rows.len(),
        a.out.display(),
        table.skipped
    )
    .map_err(io_err)
}

fn default_lags(rebalance: Rebalance) -> usize {
    match rebalance {
        Rebalance::Daily => 20,
        Rebalance::Monthly => 4,
    }
}

fn cmd_backtest(a: &BacktestArgs, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<()> {
    let panel = load(&a.panel, &a.universe, err)?;
    let (from, to) = date_bounds(&panel, a.from, a.to);
    let table = match (&a.forecasts, &a.checkpoint) {
        (Some(f), None) => load_forecasts(f)?,
        (None, Some(c)) => {
            let model = load_checkpoint(c)?;
            let req = ForecastRequest {
                min_window: a.min_window,
                ..ForecastRequest::new(from, to, a.horizon)
            };
            build_forecast_table(&model, &panel, &req)?
        }
        _ => return Err(Error::Config("give exactly one of --forecasts or --checkpoint".into())),
    };
    let monthly = table.rows.first().is_some_and(|r| r.horizon == 20);
    let rebalance = if monthly { Rebalance::Monthly } else { Rebalance::Daily };
    let lags = a.lags.unwrap_or(default_lags(rebalance));
    let prices = a
        .price_filters
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad price filter {p:?}"))))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let weight = match a.weighting {
        WeightingArg::Equal => Weighting::Equal,
        WeightingArg::Value => Weighting::Value,
    };
    let label_w = match weight {
        Weighting::Equal => "ew",
        Weighting::Value => "vw",
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["portfolio", "weighting", "mcap_pct", "price", "horizon", "mean", "t_mean", "sd", "sharpe", "min", "max", "mdd", "periods", "skipped"];
    if a.cost_bp.is_some() {
        header.push("net_mean");
    }
    w.write_record(&header)?;
    for price in prices {
        let cfg = SortConfig {
            n_quantiles: a.quantiles,
            mcap_percentile: a.mcap_percentile,
            min_price: price,
            weighting: weight,
            horizon_shift: if a.skip_day { 2 } else { 1 },
            rebalance,
            nyse_breakpoints: a.nyse_breakpoints,
        };
        let series = run_backtest(&table, &panel, &cfg, from, to)?;
        let stem = format!("{label_w}_m{}_p{}_h{}", a.mcap_percentile, price, cfg.horizon_shift);
        write_series(&series, create(&a.out_dir.join(format!("series_{stem}.csv")))?)?;
        write_cumulative(&series, create(&a.out_dir.join(format!("cumulative_{stem}.csv")))?)?;
        let legs: [(&str, Vec<f64>); 3] = [
            ("long_short", series.long_short()),
            ("long", series.periods.iter().map(|p| p.long).collect()),
            ("short", series.periods.iter().map(|p| p.short).collect()),
        ];
        for (name, returns) in legs {
            let s: PerfStats = perf_stats(&returns, rebalance.periods_per_year(), lags)?;
            let mut rec = vec![
                name.to_string(),
                label_w.to_string(),
                a.mcap_percentile.to_string(),
                price.to_string(),
                cfg.horizon_shift.to_string(),
                format!("{:.2}", s.mean),
                format!("{:.2}", s.t_mean),
                format!("{:.2}", s.sd),
                format!("{:.2}", s.sharpe),
                format!("{:.2}", s.min),
                format!("{:.2}", s.max),
                format!("{:.2}", s.mdd),
                s.n.to_string(),
                series.skipped.len().to_string(),
            ];
            if let Some(c) = a.cost_bp {
                let net = if name == "long_short" {
                    net_of_cost(s.mean, a.turnover, c / 10_000.0, rebalance.periods_per_year())
                } else {
                    f64::NAN
                };
                rec.push(format!("{net:.2}"));
            }
            w.write_record(&rec)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(a.out_dir.join("stats.csv"), &bytes).map_err(|e| Error::io(a.out_dir.join("stats.csv"), e))?;
    out.write_all(&bytes).map_err(io_err)
}

fn cmd_fmb(a: &FmbArgs, out: &mut dyn Write) -> Result<()> {
    let table = load_forecasts(&a.forecasts)?;
    let panel = load(&a.panel, &a.universe, &mut std::io::sink())?;
    let monthly = table.rows.first().is_some_and(|r| r.horizon == 20);
    let rebalance = if monthly { Rebalance::Monthly } else { Rebalance::Daily };
    let shift = if a.skip_day { 2 } else { 1 };
    let lags = a.lags.unwrap_or(default_lags(rebalance));
    let sections = cross_sections(&table, &panel, shift, rebalance);
    let r = fama_macbeth(&sections, lags)?;
    writeln!(out, "horizon,intercept,slope,t_slope,adj_r2_pct,corr_pct,dates,dropped").map_err(io_err)?;
    writeln!(
        out,
        "{shift},{:.4},{:.4},{:.2},{:.3},{:.2},{},{}",
        r.mean_intercept,
        r.mean_slope,
        r.t_slope,
        r.mean_adj_r2_pct,
        100.0 * corr_from_r2(r.mean_adj_r2_pct / 100.0),
        r.per_date.len(),
        r.dropped
    )
    .map_err(io_err)
}

fn read_series(path: &Path) -> Result<Vec<(NaiveDate, f64)>> {
    let mut rdr = csv::Reader::from_reader(File::open(path).map_err(|e| Error::io(path, e))?);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("{}: missing column {name}", path.display()),
        })
    };
    let (d, v) = (col("holding_date")?, col("long_short")?);
    rdr.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec?;
            let bad = || Error::Parse {
                line: i + 2,
                message: format!("{}: bad row", path.display()),
            };
            Ok((
                NaiveDate::parse_from_str(&rec[d], "%Y-%m-%d").map_err(|_| bad())?,
                rec[v].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

fn cmd_span(a: &SpanArgs, out: &mut dyn Write) -> Result<()> {
    let y = read_series(&a.series)?;
    let factors = load_factors(&a.factors)?;
    let names: Vec<String> = match &a.names {
        Some(n) => n.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => factors.names.clone(),
    };
    let (ppy, default) = if a.monthly { (12.0, 4) } else { (252.0, 20) };
    let lags = a.lags.unwrap_or(default);
    writeln!(out, "y,alpha_ann_pct,t_alpha,x,beta,t_beta,adj_r2_pct,n").map_err(io_err)?;
    if a.reverse {
        let portfolio = FactorTable::from_series("portfolio", &y);
        for name in &names {
            let fy = factors
                .series(name)
                .ok_or_else(|| Error::Config(format!("unknown factor {name}")))?;
            let r = spanning_test(&fy, &portfolio, &["portfolio"], lags, ppy)?;
            let (_, b, t) = &r.betas[0];
            writeln!(out, "{name},{:.2},{:.2},portfolio,{b:.4},{t:.2},{:.2},{}", r.alpha_ann_pct, r.t_alpha, r.adj_r2_pct, r.n_obs)
                .map_err(io_err)?;
        }
        return Ok(());
    }
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let r = spanning_test(&y, &factors, &refs, lags, ppy)?;
    for (name, b, t) in &r.betas {
        writeln!(
            out,
            "portfolio,{:.2},{:.2},{name},{b:.4},{t:.2},{:.2},{}",
            r.alpha_ann_pct, r.t_alpha, r.adj_r2_pct, r.n_obs
        )
        .map_err(io_err)?;
    }
    Ok(())
}
