//! Expected-return forecasts from next-token distributions.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::Mode;
use crate::data::{contiguous_runs, month_ends, ReturnPanel};
use crate::error::{Error, Result};
use crate::model::Gpt;
use crate::tensor::Scalar;
use crate::tokenizer::{midpoint, tokenize, TokenId};

/// Next-period distribution over return bins.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastDistribution {
    pub probs: Vec<f64>,
}

impl ForecastDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::NumericDomain(format!(
                "not a probability vector (sum {total})"
            )));
        }
        Ok(ForecastDistribution { probs })
    }

    pub fn expected_return_bp(&self) -> f64 {
        expected_return(&self.probs)
    }
}

/// `Σ_k probs[k] · midpoint(k)` in basis points.
pub fn expected_return(probs: &[f64]) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(k, p)| p * midpoint(TokenId(k as u16)))
        .sum()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Final-position distributions for equal-length windows, dropout off.
pub fn last_position_probs<F: Scalar>(model: &Gpt<F>, windows: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
    if windows.iter().any(|w| w.is_empty()) {
        return Err(Error::Contract("empty forecast window".into()));
    }
    // eval mode never draws from the rng
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let logits = model.forward_batch(windows, Mode::Eval, &mut unused)?;
    let t = windows[0].len();
    let v = model.config.vocab_size;
    let data = logits.data();
    Ok((0..windows.len())
        .map(|b| {
            let row = &data[(b * t + t - 1) * v..(b * t + t) * v];
            softmax(&row.iter().map(|x| x.as_f64()).collect::<Vec<_>>())
        })
        .collect())
}

pub fn forecast_distribution<F: Scalar>(model: &Gpt<F>, window: &[TokenId]) -> Result<ForecastDistribution> {
    let mut probs = last_position_probs(model, &[window])?;
    ForecastDistribution::new(probs.pop().unwrap())
}

/// Monte-Carlo `m`-day expected return: each path extends the window with
/// sampled tokens (keeping at most `block_size`), and scores the mean of its
/// sampled midpoints. Returns the average over paths in basis points.
pub fn sample_paths<F: Scalar>(
    model: &Gpt<F>,
    window: &[TokenId],
    m: usize,
    n_paths: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if m == 0 || n_paths == 0 {
        return Err(Error::Config("path sampling needs m >= 1 and n_paths >= 1".into()));
    }
    let block = model.config.block_size;
    let first = forecast_distribution(model, window)?;
    let first = WeightedIndex::new(&first.probs).map_err(|e| Error::NumericDomain(e.to_string()))?;
    let mut paths: Vec<Vec<TokenId>> = (0..n_paths)
        .map(|_| {
            let mut p = window.to_vec();
            p.push(TokenId(first.sample(rng) as u16));
            p
        })
        .collect();
    for _ in 1..m {
        for chunk in paths.chunks_mut(256) {
            let start = chunk[0].len().saturating_sub(block);
            let views: Vec<&[TokenId]> = chunk.iter().map(|p| &p[start..]).collect();
            let probs = last_position_probs(model, &views)?;
            for (p, dist) in chunk.iter_mut().zip(probs) {
                let w = WeightedIndex::new(&dist).map_err(|e| Error::NumericDomain(e.to_string()))?;
                p.push(TokenId(w.sample(rng) as u16));
            }
        }
    }
    let total: f64 = paths
        .iter()
        .map(|p| p[window.len()..].iter().map(|&t| midpoint(t)).sum::<f64>() / m as f64)
        .sum();
    Ok(total / n_paths as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForecastRow {
    pub stock_id: u64,
    pub date: NaiveDate,
    pub horizon: usize,
    pub expected_return_bp: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForecastTable {
    /// Ordered by date, then stock id.
    pub rows: Vec<ForecastRow>,
    /// Stock-dates with an observation but too little contiguous history.
    pub skipped: usize,
}

impl ForecastTable {
    pub fn by_date(&self) -> BTreeMap<NaiveDate, Vec<ForecastRow>> {
        let mut out: BTreeMap<NaiveDate, Vec<ForecastRow>> = BTreeMap::new();
        for r in &self.rows {
            out.entry(r.date).or_default().push(*r);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastRequest {
    pub from: NaiveDate,
    pub to: NaiveDate,
    /// 1: every trading date; 20: month-end dates only.
    pub horizon: usize,
    /// Fewest trailing contiguous observations a window may have.
    pub min_window: usize,
    /// Windows per forward pass.
    pub batch: usize,
}

impl ForecastRequest {
    pub fn new(from: NaiveDate, to: NaiveDate, horizon: usize) -> Self {
        ForecastRequest {
            from,
            to,
            horizon,
            min_window: 256,
            batch: 64,
        }
    }
}

struct Job {
    stock: usize,
    end: usize,
    len: usize,
}

/// Forecasts for every stock trading on each requested date, from a window of
/// `min(block_size, available)` trailing contiguous returns ending that date.
pub fn build_forecast_table<F: Scalar>(
    model: &Gpt<F>,
    panel: &ReturnPanel,
    req: &ForecastRequest,
) -> Result<ForecastTable> {
    if req.min_window == 0 || req.batch == 0 {
        return Err(Error::Config("min_window and batch must be at least 1".into()));
    }
    if !matches!(req.horizon, 1 | 20) {
        return Err(Error::Config(format!("horizon must be 1 or 20, got {}", req.horizon)));
    }
    let calendar = panel.calendar();
    let in_range: Vec<NaiveDate> = calendar
        .iter()
        .copied()
        .filter(|d| *d >= req.from && *d <= req.to)
        .collect();
    let dates = if req.horizon == 20 {
        // month ends of the full calendar, so a range ending mid-month does
        // not invent a month end
        let ends = month_ends(&calendar);
        in_range.into_iter().filter(|d| ends.binary_search(d).is_ok()).collect()
    } else {
        in_range
    };
    let block = model.config.block_size;

    let mut tokens = Vec::with_capacity(panel.stocks.len());
    let mut jobs = Vec::new();
    let mut skipped = 0;
    for (si, s) in panel.stocks.iter().enumerate() {
        tokens.push(s.obs.iter().map(|o| tokenize(o.ret)).collect::<Result<Vec<_>>>()?);
        let mut run_start = vec![0; s.obs.len()];
        for run in contiguous_runs(s, &calendar) {
            for i in run.clone() {
                run_start[i] = run.start;
            }
        }
        for d in &dates {
            let Some(i) = s.index_of(*d) else { continue };
            let avail = i + 1 - run_start[i];
            if avail < req.min_window {
                skipped += 1;
                continue;
            }
            jobs.push(Job {
                stock: si,
                end: i + 1,
                len: avail.min(block),
            });
        }
    }

    // batch windows of equal length; each batch is independent
    let mut order: Vec<usize> = (0..jobs.len()).collect();
    order.sort_by_key(|&j| jobs[j].len);
    let batches: Vec<&[usize]> = order
        .chunk_by(|&a, &b| jobs[a].len == jobs[b].len)
        .flat_map(|g| g.chunks(req.batch))
        .collect();
    let results: Vec<Vec<(usize, f64)>> = batches
        .par_iter()
        .map(|idx| {
            let windows: Vec<&[TokenId]> = idx
                .iter()
                .map(|&j| {
                    let job = &jobs[j];
                    &tokens[job.stock][job.end - job.len..job.end]
                })
                .collect();
            let probs = last_position_probs(model, &windows)?;
            Ok(idx.iter().copied().zip(probs.iter().map(|p| expected_return(p))).collect())
        })
        .collect::<Result<_>>()?;
    let mut er = vec![0.0; jobs.len()];
    for (j, v) in results.into_iter().flatten() {
        er[j] = v;
    }
    let mut rows: Vec<ForecastRow> = jobs
        .iter()
        .zip(er)
        .map(|(job, e)| {
            let s = &panel.stocks[job.stock];
            ForecastRow {
                stock_id: s.id,
                date: s.obs[job.end - 1].date,
                horizon: req.horizon,
                expected_return_bp: e,
            }
        })
        .collect();
    rows.sort_by_key(|r| (r.date, r.stock_id));
    Ok(ForecastTable { rows, skipped })
}

pub const FORECAST_HEADER: [&str; 4] = ["stock_id", "date", "horizon", "expected_return_bp"];

pub fn write_forecasts(table: &ForecastTable, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(FORECAST_HEADER)?;
    for r in &table.rows {
        w.write_record([
            r.stock_id.to_string(),
            r.date.format("%Y-%m-%d").to_string(),
            r.horizon.to_string(),
            r.expected_return_bp.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<forecasts>", e))?;
    Ok(())
}

pub fn read_forecasts(input: impl Read) -> Result<ForecastTable> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != FORECAST_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}", FORECAST_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let bad = |what: &str| Error::Parse {
            line,
            message: format!("bad {what}"),
        };
        rows.push(ForecastRow {
            stock_id: rec[0].parse().map_err(|_| bad("stock_id"))?,
            date: NaiveDate::parse_from_str(&rec[1], "%Y-%m-%d").map_err(|_| bad("date"))?,
            horizon: rec[2].parse().map_err(|_| bad("horizon"))?,
            expected_return_bp: rec[3].parse().map_err(|_| bad("expected_return_bp"))?,
        });
    }
    rows.sort_by_key(|r| (r.date, r.stock_id));
    Ok(ForecastTable { rows, skipped: 0 })
}

pub fn save_forecasts(table: &ForecastTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_forecasts(table, std::io::BufWriter::new(f))
}

pub fn load_forecasts(path: impl AsRef<Path>) -> Result<ForecastTable> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_forecasts(f)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Mean over dates of the cross-sectional rank correlation between forecasts
/// and `truth(stock_id, date)`. Dates where either side is constant are skipped.
pub fn mean_rank_correlation(
    table: &ForecastTable,
    truth: impl Fn(u64, NaiveDate) -> Option<f64>,
) -> Option<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for (date, rows) in table.by_date() {
        let (f, t): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter_map(|r| truth(r.stock_id, date).map(|t| (r.expected_return_bp, t)))
            .unzip();
        if f.len() < 2 {
            continue;
        }
        if let Some(c) = rank_correlation(&f, &t) {
            total += c;
            n += 1;
        }
    }
    (n > 0).then(|| total / n as f64)
}
