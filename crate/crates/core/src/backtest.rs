//! Decile long-short portfolios from forecast tables, and their statistics.

use std::collections::HashMap;
use std::io::Write;

use chrono::{Datelike, NaiveDate};

use crate::data::{ReturnPanel, StockSeries};
use crate::econometrics::{newey_west_mean_se, CrossSection};
use crate::error::{Error, Result};
use crate::forecast::{ForecastRow, ForecastTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    Equal,
    Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rebalance {
    Daily,
    Monthly,
}

impl Rebalance {
    pub fn periods_per_year(self) -> f64 {
        match self {
            Rebalance::Daily => 252.0,
            Rebalance::Monthly => 12.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SortConfig {
    pub n_quantiles: usize,
    /// Stocks below this market-cap percentile (0..100) are removed.
    pub mcap_percentile: f64,
    /// Stocks priced below this many dollars are removed.
    pub min_price: f64,
    pub weighting: Weighting,
    /// 1 realizes the next period; 2 skips one period.
    pub horizon_shift: usize,
    pub rebalance: Rebalance,
    /// Compute the market-cap percentile from NYSE stocks only.
    pub nyse_breakpoints: bool,
}

impl Default for SortConfig {
    fn default() -> Self {
        SortConfig {
            n_quantiles: 10,
            mcap_percentile: 10.0,
            min_price: 0.0,
            weighting: Weighting::Equal,
            horizon_shift: 1,
            rebalance: Rebalance::Daily,
            nyse_breakpoints: false,
        }
    }
}

impl SortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_quantiles < 2 {
            return Err(Error::Config("need at least 2 quantiles".into()));
        }
        if !(0.0..100.0).contains(&self.mcap_percentile) {
            return Err(Error::Config("mcap percentile must lie in [0, 100)".into()));
        }
        if !(self.min_price >= 0.0) {
            return Err(Error::Config("price filter must be nonnegative".into()));
        }
        if !matches!(self.horizon_shift, 1 | 2) {
            return Err(Error::Config("horizon shift must be 1 or 2".into()));
        }
        Ok(())
    }
}

/// Linear-interpolation percentile (`p` in 0..=100) of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let h = (v.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Quantile of each position after ranking by `(score, id)` ascending:
/// rank `r` of `n` lands in `floor(r·q/n)`, so sizes differ by at most one.
pub fn assign_quantiles(scores: &[(u64, f64)], q: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].1.total_cmp(&scores[b].1).then(scores[a].0.cmp(&scores[b].0)));
    let n = scores.len();
    let mut out = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank * q / n;
    }
    out
}

/// Looks up realized holding-period returns on the panel calendar.
pub struct Realized<'a> {
    panel: &'a ReturnPanel,
    calendar: Vec<NaiveDate>,
    index: HashMap<u64, usize>,
}

fn month_key(d: NaiveDate) -> i32 {
    d.year() * 12 + d.month0() as i32
}

impl<'a> Realized<'a> {
    pub fn new(panel: &'a ReturnPanel) -> Self {
        Realized {
            panel,
            calendar: panel.calendar(),
            index: panel.stocks.iter().enumerate().map(|(i, s)| (s.id, i)).collect(),
        }
    }

    pub fn stock(&self, id: u64) -> Option<&'a StockSeries> {
        self.index.get(&id).map(|&i| &self.panel.stocks[i])
    }

    /// Start of the holding period for a formation date: the trading date
    /// `shift` days later (daily), or the calendar month `shift` months later.
    pub fn holding_date(&self, date: NaiveDate, shift: usize, rebalance: Rebalance) -> Option<NaiveDate> {
        match rebalance {
            Rebalance::Daily => {
                let i = self.calendar.binary_search(&date).ok()?;
                self.calendar.get(i + shift).copied()
            }
            Rebalance::Monthly => {
                let target = month_key(date) + shift as i32;
                let i = self.calendar.partition_point(|d| month_key(*d) < target);
                self.calendar.get(i).filter(|d| month_key(**d) == target).copied()
            }
        }
    }

    /// Simple return of `id` over the holding period; `None` if the stock has
    /// no observation in it. Monthly returns compound the month's days.
    pub fn get(&self, id: u64, date: NaiveDate, shift: usize, rebalance: Rebalance) -> Option<f64> {
        let s = self.stock(id)?;
        let start = self.holding_date(date, shift, rebalance)?;
        match rebalance {
            Rebalance::Daily => s.index_of(start).map(|i| s.obs[i].ret),
            Rebalance::Monthly => {
                let m = month_key(start);
                let from = s.obs.partition_point(|o| o.date < start);
                let days: Vec<f64> = s.obs[from..]
                    .iter()
                    .take_while(|o| month_key(o.date) == m)
                    .map(|o| o.ret)
                    .collect();
                (!days.is_empty()).then(|| days.iter().fold(1.0, |w, r| w * (1.0 + r)) - 1.0)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PortfolioPeriod {
    /// Formation date.
    pub date: NaiveDate,
    /// First date of the holding period.
    pub holding: NaiveDate,
    pub long: f64,
    pub short: f64,
    pub long_short: f64,
    pub n_long: usize,
    pub n_short: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Formation {
    Formed(PortfolioPeriod),
    /// Fewer stocks than quantiles survived the filters.
    TooFew { date: NaiveDate, count: usize },
    /// The holding period lies beyond the panel.
    NoHolding { date: NaiveDate },
}

struct Candidate {
    id: u64,
    forecast: f64,
    mktcap: Option<f64>,
    exchange_nyse: bool,
}

/// Weighted mean of realized returns; stocks without one leave the leg and
/// the remaining weights are renormalized.
fn leg_return(members: &[(f64, Option<f64>)]) -> Option<(f64, usize)> {
    let live: Vec<(f64, f64)> = members.iter().filter_map(|(w, r)| r.map(|r| (*w, r))).collect();
    let total: f64 = live.iter().map(|p| p.0).sum();
    (total > 0.0).then(|| (live.iter().map(|(w, r)| w * r).sum::<f64>() / total, live.len()))
}

/// One period's long-short portfolio formed from `rows` (all on `date`).
pub fn form_portfolio(
    rows: &[ForecastRow],
    realized: &Realized,
    date: NaiveDate,
    cfg: &SortConfig,
) -> Result<Formation> {
    cfg.validate()?;
    let Some(holding) = realized.holding_date(date, cfg.horizon_shift, cfg.rebalance) else {
        return Ok(Formation::NoHolding { date });
    };
    let mut cands: Vec<Candidate> = Vec::with_capacity(rows.len());
    let mut prices = Vec::with_capacity(rows.len());
    for r in rows {
        let Some(s) = realized.stock(r.stock_id) else { continue };
        let Some(i) = s.index_of(date) else { continue };
        cands.push(Candidate {
            id: r.stock_id,
            forecast: r.expected_return_bp,
            mktcap: s.obs[i].mktcap,
            exchange_nyse: s.exchange == crate::data::Exchange::Nyse,
        });
        prices.push(s.obs[i].price);
    }
    let needs_mcap = cfg.mcap_percentile > 0.0 || cfg.weighting == Weighting::Value;
    let mut keep: Vec<bool> = cands.iter().map(|c| !needs_mcap || c.mktcap.is_some()).collect();
    if cfg.mcap_percentile > 0.0 {
        let base: Vec<f64> = cands
            .iter()
            .zip(&keep)
            .filter(|(c, k)| **k && (!cfg.nyse_breakpoints || c.exchange_nyse))
            .filter_map(|(c, _)| c.mktcap)
            .collect();
        let cut = percentile(&base, cfg.mcap_percentile);
        for (k, c) in keep.iter_mut().zip(&cands) {
            *k = *k && c.mktcap.is_some_and(|m| m >= cut);
        }
    }
    if cfg.min_price > 0.0 {
        for (k, p) in keep.iter_mut().zip(&prices) {
            *k = *k && p.is_some_and(|p| p >= cfg.min_price);
        }
    }
    let survivors: Vec<&Candidate> = cands.iter().zip(&keep).filter(|(_, k)| **k).map(|(c, _)| c).collect();
    if survivors.len() < cfg.n_quantiles {
        return Ok(Formation::TooFew {
            date,
            count: survivors.len(),
        });
    }
    let scores: Vec<(u64, f64)> = survivors.iter().map(|c| (c.id, c.forecast)).collect();
    let q = assign_quantiles(&scores, cfg.n_quantiles);
    let leg = |target: usize| -> Vec<(f64, Option<f64>)> {
        survivors
            .iter()
            .zip(&q)
            .filter(|(_, qi)| **qi == target)
            .map(|(c, _)| {
                let w = match cfg.weighting {
                    Weighting::Equal => 1.0,
                    Weighting::Value => c.mktcap.unwrap_or(0.0),
                };
                (w, realized.get(c.id, date, cfg.horizon_shift, cfg.rebalance))
            })
            .collect()
    };
    let (Some((long, n_long)), Some((short, n_short))) =
        (leg_return(&leg(cfg.n_quantiles - 1)), leg_return(&leg(0)))
    else {
        return Ok(Formation::TooFew { date, count: 0 });
    };
    Ok(Formation::Formed(PortfolioPeriod {
        date,
        holding,
        long,
        short,
        long_short: long - short,
        n_long,
        n_short,
    }))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PortfolioSeries {
    pub periods: Vec<PortfolioPeriod>,
    /// Formation dates skipped, with the number of surviving stocks.
    pub skipped: Vec<(NaiveDate, usize)>,
}

impl PortfolioSeries {
    pub fn long_short(&self) -> Vec<f64> {
        self.periods.iter().map(|p| p.long_short).collect()
    }

    /// `(holding date, long-short return)`, the series used in spanning tests.
    pub fn dated_long_short(&self) -> Vec<(NaiveDate, f64)> {
        self.periods.iter().map(|p| (p.holding, p.long_short)).collect()
    }
}

/// Forms a portfolio on every forecast date in `[from, to]`. Monthly
/// rebalancing uses only month-end formation dates.
pub fn run_backtest(
    table: &ForecastTable,
    panel: &ReturnPanel,
    cfg: &SortConfig,
    from: NaiveDate,
    to: NaiveDate,
) -> Result<PortfolioSeries> {
    cfg.validate()?;
    let realized = Realized::new(panel);
    let ends = crate::data::month_ends(&realized.calendar);
    let mut out = PortfolioSeries::default();
    for (date, rows) in table.by_date().range(from..=to) {
        if cfg.rebalance == Rebalance::Monthly && ends.binary_search(date).is_err() {
            continue;
        }
        match form_portfolio(rows, &realized, *date, cfg)? {
            Formation::Formed(p) => out.periods.push(p),
            Formation::TooFew { date, count } => out.skipped.push((date, count)),
            Formation::NoHolding { .. } => {}
        }
    }
    Ok(out)
}

/// Forecast/realized pairs in basis points, one cross section per forecast
/// date, for Fama-MacBeth regressions.
pub fn cross_sections(
    table: &ForecastTable,
    panel: &ReturnPanel,
    shift: usize,
    rebalance: Rebalance,
) -> Vec<CrossSection> {
    let realized = Realized::new(panel);
    table
        .by_date()
        .into_iter()
        .map(|(date, rows)| CrossSection {
            date,
            pairs: rows
                .iter()
                .filter_map(|r| {
                    realized
                        .get(r.stock_id, date, shift, rebalance)
                        .map(|x| (r.expected_return_bp, x * 10_000.0))
                })
                .collect(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerfStats {
    /// Annualized mean, percent.
    pub mean: f64,
    pub t_mean: f64,
    /// Annualized standard deviation, percent.
    pub sd: f64,
    pub sharpe: f64,
    pub min: f64,
    pub max: f64,
    /// Largest peak-to-trough fall of compounded wealth, percent.
    pub mdd: f64,
    pub n: usize,
}

pub fn perf_stats(returns: &[f64], periods_per_year: f64, nw_lags: usize) -> Result<PerfStats> {
    let n = returns.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("{n} periods (need 2)")));
    }
    let mean = returns.iter().sum::<f64>() / n as f64;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd == 0.0 {
        return Err(Error::NumericDomain("zero standard deviation; Sharpe undefined".into()));
    }
    let se = newey_west_mean_se(returns, nw_lags)?;
    let ann_mean = mean * periods_per_year * 100.0;
    let ann_sd = sd * periods_per_year.sqrt() * 100.0;
    Ok(PerfStats {
        mean: ann_mean,
        t_mean: if se > 0.0 { mean / se } else { f64::NAN },
        sd: ann_sd,
        sharpe: ann_mean / ann_sd,
        min: returns.iter().copied().fold(f64::INFINITY, f64::min) * 100.0,
        max: returns.iter().copied().fold(f64::NEG_INFINITY, f64::max) * 100.0,
        mdd: max_drawdown(returns) * 100.0,
        n,
    })
}

/// Largest fractional decline from a running peak of `Π(1 + r)`, starting at 1.
pub fn max_drawdown(returns: &[f64]) -> f64 {
    let mut wealth = 1.0;
    let mut peak = 1.0f64;
    let mut worst = 0.0f64;
    for r in returns {
        wealth *= 1.0 + r;
        peak = peak.max(wealth);
        worst = worst.max((peak - wealth) / peak);
    }
    worst
}

/// Annual mean (percent) after paying `cost` per unit of turnover each period.
pub fn net_of_cost(gross_annual_pct: f64, turnover: f64, cost: f64, periods_per_year: f64) -> f64 {
    gross_annual_pct - turnover * cost * periods_per_year * 100.0
}

/// `ln Π(1 + r)` after each period.
pub fn cumulative_log(returns: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    returns
        .iter()
        .map(|r| {
            acc += (1.0 + r).ln();
            acc
        })
        .collect()
}

pub fn write_series(series: &PortfolioSeries, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "holding_date", "long", "short", "long_short", "n_long", "n_short"])?;
    for p in &series.periods {
        w.write_record([
            p.date.to_string(),
            p.holding.to_string(),
            p.long.to_string(),
            p.short.to_string(),
            p.long_short.to_string(),
            p.n_long.to_string(),
            p.n_short.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<portfolio series>", e))?;
    Ok(())
}

/// Log cumulative returns of each leg, for plotting.
pub fn write_cumulative(series: &PortfolioSeries, out: impl Write) -> Result<()> {
    let legs = [
        cumulative_log(&series.periods.iter().map(|p| p.long_short).collect::<Vec<_>>()),
        cumulative_log(&series.periods.iter().map(|p| p.long).collect::<Vec<_>>()),
        cumulative_log(&series.periods.iter().map(|p| p.short).collect::<Vec<_>>()),
    ];
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "log_cum_long_short", "log_cum_long", "log_cum_short"])?;
    for (i, p) in series.periods.iter().enumerate() {
        w.write_record([
            p.holding.to_string(),
            legs[0][i].to_string(),
            legs[1][i].to_string(),
            legs[2][i].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<cumulative series>", e))?;
    Ok(())
}

pub fn write_stats(rows: &[(String, PerfStats)], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["portfolio", "mean", "t_mean", "sd", "sharpe", "min", "max", "mdd", "n"])?;
    for (name, s) in rows {
        w.write_record([
            name.clone(),
            format!("{:.2}", s.mean),
            format!("{:.2}", s.t_mean),
            format!("{:.2}", s.sd),
            format!("{:.2}", s.sharpe),
            format!("{:.2}", s.min),
            format!("{:.2}", s.max),
            format!("{:.2}", s.mdd),
            s.n.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<stats>", e))?;
    Ok(())
}
