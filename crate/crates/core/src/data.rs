//! Panel data: CSV ingestion with universe filters, date splits, and a
//! seeded regime-switching generator that stands in for real return data.
//!
//! CSV schema (header required, any column order):
//!
//! ```text
//! permno,date,ret,prc,mktcap,exchcd,shrcd
//! 10001,2001-01-02,0.0125,-23.5,152340.0,1,10
//! ```
//!
//! `ret` is a decimal simple return, `prc` may be negative (bid/ask midpoint
//! convention; its absolute value is used), `mktcap` is in thousands of
//! dollars. `prc` and `mktcap` may be empty.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

pub const CSV_HEADER: [&str; 7] = ["permno", "date", "ret", "prc", "mktcap", "exchcd", "shrcd"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Exchange {
    Nyse,
    Amex,
    Nasdaq,
    Other,
}

impl Exchange {
    /// CRSP exchange codes; when-issued codes 31-33 map to their exchange.
    pub fn from_code(code: i64) -> Self {
        match code {
            1 | 31 => Exchange::Nyse,
            2 | 32 => Exchange::Amex,
            3 | 33 => Exchange::Nasdaq,
            _ => Exchange::Other,
        }
    }

    pub fn code(self) -> i64 {
        match self {
            Exchange::Nyse => 1,
            Exchange::Amex => 2,
            Exchange::Nasdaq => 3,
            Exchange::Other => 0,
        }
    }

    pub fn parse_name(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "NYSE" => Ok(Exchange::Nyse),
            "AMEX" => Ok(Exchange::Amex),
            "NASDAQ" => Ok(Exchange::Nasdaq),
            "OTHER" => Ok(Exchange::Other),
            other => Err(Error::Config(format!("unknown exchange {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub date: NaiveDate,
    pub ret: f64,
    pub price: Option<f64>,
    /// Market value in thousands of dollars.
    pub mktcap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StockSeries {
    pub id: u64,
    pub exchange: Exchange,
    pub share_code: u16,
    pub obs: Vec<Observation>,
}

impl StockSeries {
    pub fn returns(&self) -> Vec<f64> {
        self.obs.iter().map(|o| o.ret).collect()
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        self.obs.binary_search_by_key(&date, |o| o.date).ok()
    }
}

/// Per-stock dated return series, stocks ordered by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReturnPanel {
    pub stocks: Vec<StockSeries>,
}

impl ReturnPanel {
    pub fn new(mut stocks: Vec<StockSeries>) -> Result<Self> {
        stocks.sort_by_key(|s| s.id);
        for w in stocks.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::Data(format!("stock {} appears twice", w[0].id)));
            }
        }
        for s in &stocks {
            validate_series(s)?;
        }
        Ok(ReturnPanel { stocks })
    }

    pub fn is_empty(&self) -> bool {
        self.stocks.is_empty()
    }

    pub fn n_obs(&self) -> usize {
        self.stocks.iter().map(|s| s.obs.len()).sum()
    }

    pub fn stock(&self, id: u64) -> Option<&StockSeries> {
        self.stocks
            .binary_search_by_key(&id, |s| s.id)
            .ok()
            .map(|i| &self.stocks[i])
    }

    /// Sorted union of all observation dates.
    pub fn calendar(&self) -> Vec<NaiveDate> {
        let mut dates: Vec<NaiveDate> = self
            .stocks
            .iter()
            .flat_map(|s| s.obs.iter().map(|o| o.date))
            .collect();
        dates.sort_unstable();
        dates.dedup();
        dates
    }

    /// Keeps observations with `from <= date <= to`; drops stocks left empty.
    pub fn slice_dates(&self, from: NaiveDate, to: NaiveDate) -> ReturnPanel {
        let stocks = self
            .stocks
            .iter()
            .filter_map(|s| {
                let obs: Vec<Observation> = s
                    .obs
                    .iter()
                    .filter(|o| o.date >= from && o.date <= to)
                    .copied()
                    .collect();
                (!obs.is_empty()).then(|| StockSeries { obs, ..s.clone() })
            })
            .collect();
        ReturnPanel { stocks }
    }

    pub fn filter_exchanges(&self, keep: &[Exchange]) -> ReturnPanel {
        ReturnPanel {
            stocks: self
                .stocks
                .iter()
                .filter(|s| keep.contains(&s.exchange))
                .cloned()
                .collect(),
        }
    }
}

fn validate_series(s: &StockSeries) -> Result<()> {
    for w in s.obs.windows(2) {
        if w[1].date <= w[0].date {
            return Err(Error::Data(format!(
                "stock {}: dates not strictly increasing ({} then {})",
                s.id, w[0].date, w[1].date
            )));
        }
    }
    for o in &s.obs {
        if !(o.ret >= -1.0) {
            return Err(Error::Data(format!(
                "stock {}: return {} on {} below -100%",
                s.id, o.ret, o.date
            )));
        }
        if let Some(m) = o.mktcap {
            if !(m > 0.0) {
                return Err(Error::Data(format!(
                    "stock {}: non-positive market value on {}",
                    s.id, o.date
                )));
            }
        }
    }
    Ok(())
}

/// Which rows of a CSV file enter the panel.
#[derive(Clone, Debug, PartialEq)]
pub struct UniverseFilter {
    pub exchanges: Option<Vec<Exchange>>,
    pub share_codes: Option<Vec<u16>>,
}

impl Default for UniverseFilter {
    /// Common stocks (share codes 10, 11) on NYSE, AMEX and NASDAQ.
    fn default() -> Self {
        UniverseFilter {
            exchanges: Some(vec![Exchange::Nyse, Exchange::Amex, Exchange::Nasdaq]),
            share_codes: Some(vec![10, 11]),
        }
    }
}

impl UniverseFilter {
    pub fn all() -> Self {
        UniverseFilter {
            exchanges: None,
            share_codes: None,
        }
    }

    pub fn exchanges(list: &[Exchange]) -> Self {
        UniverseFilter {
            exchanges: Some(list.to_vec()),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub rows: usize,
    pub kept: usize,
    pub dropped_exchange: usize,
    pub dropped_share_code: usize,
    pub missing_return: usize,
    /// Rows rejected for out-of-domain values, as `(line, reason)`.
    pub rejected: Vec<(usize, String)>,
}

fn parse_opt(field: &str, line: usize, name: &str) -> Result<Option<f64>> {
    let f = field.trim();
    if f.is_empty() || f.eq_ignore_ascii_case("nan") || f == "." {
        return Ok(None);
    }
    f.parse::<f64>().map(Some).map_err(|_| Error::Parse {
        line,
        message: format!("{name} {f:?} is not a number"),
    })
}

pub fn load_panel(path: impl AsRef<Path>, filter: &UniverseFilter) -> Result<(ReturnPanel, LoadReport)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_panel(file, filter)
}

pub fn read_panel(reader: impl std::io::Read, filter: &UniverseFilter) -> Result<(ReturnPanel, LoadReport)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: format!("missing column {name}"),
            })
    };
    let idx: Vec<usize> = CSV_HEADER.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let mut report = LoadReport::default();
    let mut by_stock: BTreeMap<u64, StockSeries> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        report.rows += 1;
        let get = |k: usize| rec.get(idx[k]).unwrap_or("");
        let permno: u64 = get(0).parse().map_err(|_| Error::Parse {
            line,
            message: format!("permno {:?} is not an integer", get(0)),
        })?;
        let date = NaiveDate::parse_from_str(get(1), "%Y-%m-%d").map_err(|_| Error::Parse {
            line,
            message: format!("date {:?} is not YYYY-MM-DD", get(1)),
        })?;
        let exchcd: i64 = get(5).parse().map_err(|_| Error::Parse {
            line,
            message: format!("exchcd {:?} is not an integer", get(5)),
        })?;
        let shrcd: u16 = get(6).parse().map_err(|_| Error::Parse {
            line,
            message: format!("shrcd {:?} is not an integer", get(6)),
        })?;
        let exchange = Exchange::from_code(exchcd);
        if let Some(keep) = &filter.share_codes {
            if !keep.contains(&shrcd) {
                report.dropped_share_code += 1;
                continue;
            }
        }
        if let Some(keep) = &filter.exchanges {
            if !keep.contains(&exchange) {
                report.dropped_exchange += 1;
                continue;
            }
        }
        let Some(ret) = parse_opt(get(2), line, "ret")? else {
            report.missing_return += 1;
            continue;
        };
        if !(ret >= -1.0) {
            report
                .rejected
                .push((line, format!("return {ret} is below -100%")));
            continue;
        }
        let price = parse_opt(get(3), line, "prc")?.map(f64::abs).filter(|p| *p > 0.0);
        let mktcap = parse_opt(get(4), line, "mktcap")?;
        if let Some(m) = mktcap {
            if !(m > 0.0) {
                report
                    .rejected
                    .push((line, format!("market value {m} is not positive")));
                continue;
            }
        }
        let series = by_stock.entry(permno).or_insert_with(|| StockSeries {
            id: permno,
            exchange,
            share_code: shrcd,
            obs: Vec::new(),
        });
        if let Some(last) = series.obs.last() {
            if date <= last.date {
                return Err(Error::Data(format!(
                    "stock {permno}: date {date} at line {line} does not follow {}",
                    last.date
                )));
            }
        }
        series.exchange = exchange;
        series.share_code = shrcd;
        series.obs.push(Observation {
            date,
            ret,
            price,
            mktcap,
        });
        report.kept += 1;
    }
    let panel = ReturnPanel::new(by_stock.into_values().collect())?;
    Ok((panel, report))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the panel in the CSV schema above, one row per observation,
/// ordered by stock then date.
pub fn write_panel(panel: &ReturnPanel, mut out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(&mut out);
    w.write_record(CSV_HEADER)?;
    for s in &panel.stocks {
        for o in &s.obs {
            w.write_record([
                s.id.to_string(),
                o.date.format("%Y-%m-%d").to_string(),
                o.ret.to_string(),
                fmt_opt(o.price),
                fmt_opt(o.mktcap),
                s.exchange.code().to_string(),
                s.share_code.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<panel>", e))?;
    Ok(())
}

pub fn save_panel(panel: &ReturnPanel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_panel(panel, std::io::BufWriter::new(file))
}

/// Closed, disjoint, ordered date ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: (NaiveDate, NaiveDate),
    pub validation: (NaiveDate, NaiveDate),
    pub test: (NaiveDate, NaiveDate),
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let ranges = [("train", self.train), ("validation", self.validation), ("test", self.test)];
        for (name, (a, b)) in ranges {
            if a > b {
                return Err(Error::Config(format!("{name} range starts after it ends")));
            }
        }
        for w in ranges.windows(2) {
            if w[0].1 .1 >= w[1].1 .0 {
                return Err(Error::Config(format!(
                    "{} range overlaps or follows {} range",
                    w[0].0, w[1].0
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: ReturnPanel,
    pub validation: ReturnPanel,
    pub test: ReturnPanel,
}

pub fn split(panel: &ReturnPanel, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    Ok(Splits {
        train: panel.slice_dates(spec.train.0, spec.train.1),
        validation: panel.slice_dates(spec.validation.0, spec.validation.1),
        test: panel.slice_dates(spec.test.0, spec.test.1),
    })
}

/// Maximal runs of a stock's observations that sit on consecutive dates of
/// `calendar` (sorted). A missing day in the middle splits the series.
pub fn contiguous_runs(series: &StockSeries, calendar: &[NaiveDate]) -> Vec<Range<usize>> {
    let pos: Vec<Option<usize>> = series
        .obs
        .iter()
        .map(|o| calendar.binary_search(&o.date).ok())
        .collect();
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=pos.len() {
        let breaks = i == pos.len()
            || match (pos[i - 1], pos[i]) {
                (Some(a), Some(b)) => b != a + 1,
                _ => true,
            };
        if breaks {
            if i > start {
                runs.push(start..i);
            }
            start = i;
        }
    }
    runs
}

/// Last calendar date of each month present in `calendar` (sorted input).
pub fn month_ends(calendar: &[NaiveDate]) -> Vec<NaiveDate> {
    let mut out: Vec<NaiveDate> = Vec::new();
    for w in calendar.windows(2) {
        if (w[0].year(), w[0].month()) != (w[1].year(), w[1].month()) {
            out.push(w[0]);
        }
    }
    if let Some(&last) = calendar.last() {
        out.push(last);
    }
    out
}

/// Weekdays starting at `start` (inclusive).
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

/// Two-state Markov regime generator. Each stock carries a latent state that
/// persists day to day with probability `persistence`; the daily return is
/// normal with a state-dependent mean and common noise, in basis points.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_stocks: usize,
    pub n_days: usize,
    pub state_means_bp: [f64; 2],
    pub noise_sd_bp: f64,
    pub persistence: f64,
    pub start: NaiveDate,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_stocks: 50,
            n_days: 2000,
            state_means_bp: [50.0, -50.0],
            noise_sd_bp: 100.0,
            persistence: 0.97,
            start: NaiveDate::from_ymd_opt(2000, 1, 3).unwrap(),
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPanel {
    pub spec: SyntheticSpec,
    pub panel: ReturnPanel,
    /// Latent state per stock (panel order) per day.
    pub states: Vec<Vec<u8>>,
}

impl SyntheticPanel {
    /// Expected next-day return in basis points given the state on `day`.
    pub fn planted_next_mean_bp(&self, stock: usize, day: usize) -> f64 {
        let s = self.states[stock][day] as usize;
        let p = self.spec.persistence;
        p * self.spec.state_means_bp[s] + (1.0 - p) * self.spec.state_means_bp[1 - s]
    }

    /// Expected mean return over the next `m` days, in basis points.
    pub fn planted_mean_over_bp(&self, stock: usize, day: usize, m: usize) -> f64 {
        let [a, b] = self.spec.state_means_bp;
        let center = (a + b) / 2.0;
        let half = (a - b) / 2.0;
        let sign = if self.states[stock][day] == 0 { 1.0 } else { -1.0 };
        // E[sign_{t+h}] = sign_t · (2p - 1)^h
        let rho = 2.0 * self.spec.persistence - 1.0;
        let decay: f64 = (1..=m).map(|h| rho.powi(h as i32)).sum::<f64>() / m as f64;
        center + sign * half * decay
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticPanel> {
    if spec.n_stocks == 0 || spec.n_days == 0 {
        return Err(Error::Config("synthetic panel needs at least one stock and one day".into()));
    }
    if !(0.0..=1.0).contains(&spec.persistence) || !(spec.noise_sd_bp >= 0.0) {
        return Err(Error::Config("persistence must lie in [0, 1] and noise sd be >= 0".into()));
    }
    let dates = business_days(spec.start, spec.n_days);
    let noise = Normal::new(0.0, spec.noise_sd_bp).map_err(|e| Error::Config(e.to_string()))?;
    let log_shares = Normal::new(9.0f64, 1.5).unwrap();
    let log_price = Normal::new(3.0f64, 1.0).unwrap();
    let mut stocks = Vec::with_capacity(spec.n_stocks);
    let mut states = Vec::with_capacity(spec.n_stocks);
    for i in 0..spec.n_stocks {
        let mut r = rng::stream(spec.seed, &format!("synthetic/stock/{i}"));
        let exchange = match r.gen_range(0..20) {
            0..=11 => Exchange::Nyse,
            12..=14 => Exchange::Amex,
            _ => Exchange::Nasdaq,
        };
        let share_code = if r.gen_bool(0.8) { 10 } else { 11 };
        // shares in thousands, so price × shares is in thousands of dollars
        let shares = log_shares.sample(&mut r).exp() / 1000.0;
        let mut price: f64 = log_price.sample(&mut r).exp();
        let mut state: u8 = r.gen_range(0..2);
        let mut obs = Vec::with_capacity(spec.n_days);
        let mut path = Vec::with_capacity(spec.n_days);
        for &date in &dates {
            let bp = spec.state_means_bp[state as usize] + noise.sample(&mut r);
            let ret = (bp / 10_000.0).max(-0.99);
            price *= 1.0 + ret;
            obs.push(Observation {
                date,
                ret,
                price: Some(price),
                mktcap: Some(price * shares),
            });
            path.push(state);
            if !r.gen_bool(spec.persistence) {
                state = 1 - state;
            }
        }
        stocks.push(StockSeries {
            id: 10_001 + i as u64,
            exchange,
            share_code,
            obs,
        });
        states.push(path);
    }
    Ok(SyntheticPanel {
        spec: spec.clone(),
        panel: ReturnPanel::new(stocks)?,
        states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::tokenize;

    const SAMPLE: &str = "permno,date,ret,prc,mktcap,exchcd,shrcd
10001,2001-01-02,0.01,-20.5,1000,1,10
10002,2001-01-02,-0.02,5,200,3,11
10001,2001-01-03,0.005,20.6,1005,1,10
10003,2001-01-02,0.03,7,300,2,12
10002,2001-01-03,,5,200,3,11
";

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    #[test]
    fn empty_file_gives_empty_panel() {
        let (p, r) = read_panel(CSV_HEADER.join(",").as_bytes(), &UniverseFilter::default()).unwrap();
        assert!(p.is_empty());
        assert_eq!(r.rows, 0);
    }

    #[test]
    fn default_filter_and_price_sign() {
        let (p, r) = read_panel(SAMPLE.as_bytes(), &UniverseFilter::default()).unwrap();
        assert_eq!(p.stocks.len(), 2);
        assert_eq!(r.dropped_share_code, 1);
        assert_eq!(r.missing_return, 1);
        assert_eq!(p.stock(10001).unwrap().obs[0].price, Some(20.5));
        assert_eq!(p.stock(10002).unwrap().exchange, Exchange::Nasdaq);
    }

    #[test]
    fn exchange_filter() {
        let (p, r) = read_panel(SAMPLE.as_bytes(), &UniverseFilter::exchanges(&[Exchange::Nyse])).unwrap();
        assert_eq!(p.stocks.len(), 1);
        assert!(p.stocks.iter().all(|s| s.exchange == Exchange::Nyse));
        assert_eq!(r.dropped_exchange, 2);
    }

    #[test]
    fn floor_violations_are_rejected_with_line() {
        let text = "permno,date,ret,prc,mktcap,exchcd,shrcd\n1,2001-01-02,-1.5,1,1,1,10\n1,2001-01-03,0.1,1,1,1,10\n";
        let (p, r) = read_panel(text.as_bytes(), &UniverseFilter::default()).unwrap();
        assert_eq!(p.n_obs(), 1);
        assert_eq!(r.rejected.len(), 1);
        assert_eq!(r.rejected[0].0, 2);
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = "permno,date,ret,prc,mktcap,exchcd,shrcd\n1,2001-01-02,0.1,1,1,1,10\n1,2001-13-03,0.1,1,1,1,10\n";
        match read_panel(text.as_bytes(), &UniverseFilter::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let text = "permno,date,ret,prc,mktcap,exchcd,shrcd\n1,2001-01-02,abc,1,1,1,10\n";
        assert!(matches!(
            read_panel(text.as_bytes(), &UniverseFilter::default()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn non_monotone_dates_name_the_stock() {
        let text = "permno,date,ret,prc,mktcap,exchcd,shrcd\n77,2001-01-03,0.1,1,1,1,10\n77,2001-01-02,0.1,1,1,1,10\n";
        match read_panel(text.as_bytes(), &UniverseFilter::default()) {
            Err(Error::Data(msg)) => assert!(msg.contains("77")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn write_then_load_round_trips() {
        let syn = generate_synthetic(&SyntheticSpec {
            n_stocks: 5,
            n_days: 40,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_panel(&syn.panel, &mut buf).unwrap();
        let (back, _) = read_panel(buf.as_slice(), &UniverseFilter::all()).unwrap();
        assert_eq!(back, syn.panel);
    }

    #[test]
    fn synthetic_is_seeded() {
        let spec = SyntheticSpec {
            n_stocks: 1,
            n_days: 10,
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.panel.n_obs(), 10);
        let c = generate_synthetic(&SyntheticSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.panel, c.panel);
    }

    #[test]
    fn state_conditional_means_differ_by_100bp() {
        let syn = generate_synthetic(&SyntheticSpec {
            n_stocks: 50,
            n_days: 2000,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let mut sums = [0.0; 2];
        let mut counts = [0usize; 2];
        for (s, st) in syn.panel.stocks.iter().zip(&syn.states) {
            for (o, &state) in s.obs.iter().zip(st) {
                sums[state as usize] += o.ret * 10_000.0;
                counts[state as usize] += 1;
            }
        }
        let m0 = sums[0] / counts[0] as f64;
        let m1 = sums[1] / counts[1] as f64;
        assert!(((m0 - m1) - 100.0).abs() < 3.0, "{m0} {m1}");
    }

    #[test]
    fn next_token_distribution_depends_on_state() {
        let syn = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let mut hist = [vec![1.0f64; 402], vec![1.0f64; 402]];
        for (s, st) in syn.panel.stocks.iter().zip(&syn.states) {
            for t in 0..s.obs.len() - 1 {
                let tok = tokenize(s.obs[t + 1].ret).unwrap().index();
                hist[st[t] as usize][tok] += 1.0;
            }
        }
        let norm = |h: &Vec<f64>| {
            let z: f64 = h.iter().sum();
            h.iter().map(|x| x / z).collect::<Vec<_>>()
        };
        let (p, q) = (norm(&hist[0]), norm(&hist[1]));
        let kl: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
        assert!(kl > 0.1, "{kl}");
    }

    #[test]
    fn split_conserves_observations() {
        let syn = generate_synthetic(&SyntheticSpec {
            n_stocks: 3,
            n_days: 30,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let cal = syn.panel.calendar();
        let spec = SplitSpec {
            train: (cal[0], cal[9]),
            validation: (cal[10], cal[19]),
            test: (cal[20], cal[29]),
        };
        let s = split(&syn.panel, &spec).unwrap();
        assert_eq!(s.train.n_obs() + s.validation.n_obs() + s.test.n_obs(), syn.panel.n_obs());
        assert_eq!(s.train.stocks.len(), 3);
        assert_eq!(s.test.stocks.len(), 3);
        // boundary date lands in the range that includes it
        assert_eq!(s.validation.stocks[0].obs[0].date, cal[10]);
        assert_eq!(s.train.stocks[0].obs.last().unwrap().date, cal[9]);

        let bad = SplitSpec {
            train: (cal[0], cal[10]),
            validation: (cal[10], cal[19]),
            test: (cal[20], cal[29]),
        };
        assert!(matches!(split(&syn.panel, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn runs_split_at_calendar_gaps() {
        let cal = business_days(d("2001-01-01"), 6);
        let obs = |i: usize| Observation {
            date: cal[i],
            ret: 0.0,
            price: None,
            mktcap: None,
        };
        let s = StockSeries {
            id: 1,
            exchange: Exchange::Nyse,
            share_code: 10,
            obs: vec![obs(0), obs(1), obs(3), obs(4), obs(5)],
        };
        assert_eq!(contiguous_runs(&s, &cal), vec![0..2, 2..5]);
    }

    #[test]
    fn month_end_dates() {
        let cal = vec![d("2001-01-30"), d("2001-01-31"), d("2001-02-01"), d("2001-02-27")];
        assert_eq!(month_ends(&cal), vec![d("2001-01-31"), d("2001-02-27")]);
    }
}
