//! OLS with Newey-West errors, Fama-MacBeth regressions and spanning tests.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct OlsFit {
    pub coef: Vec<f64>,
    pub residuals: Vec<f64>,
    pub r2: f64,
    /// `1 − (1 − R²)(T − 1)/(T − k − 1)`, k counting non-intercept columns.
    pub adj_r2: f64,
    /// `(XᵀX)⁻¹`, reused for sandwich covariances.
    pub xtx_inv: DMatrix<f64>,
}

/// Least squares via Householder QR. `x` is `T × (k+1)` with the intercept
/// column included by the caller.
pub fn ols(y: &[f64], x: &DMatrix<f64>) -> Result<OlsFit> {
    let (t, p) = x.shape();
    if y.len() != t {
        return Err(Error::ShapeMismatch {
            op: "ols",
            left: vec![t, p],
            right: vec![y.len()],
        });
    }
    if p == 0 || t <= p {
        return Err(Error::InsufficientData(format!(
            "{t} observations for {p} coefficients"
        )));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..p).any(|i| r[(i, i)].abs() <= 1e-10 * scale.max(f64::MIN_POSITIVE)) {
        return Err(Error::SingularDesign(format!("{t}×{p} design is rank deficient")));
    }
    let yv = DVector::from_column_slice(y);
    let qty = qr.q().transpose() * &yv;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::SingularDesign("triangular solve failed".into()))?;
    let fitted = x * &beta;
    let residuals: Vec<f64> = y.iter().zip(fitted.iter()).map(|(a, f)| a - f).collect();
    let mean = y.iter().sum::<f64>() / t as f64;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ssr: f64 = residuals.iter().map(|e| e * e).sum();
    let r2 = if sst > 0.0 { 1.0 - ssr / sst } else { f64::NAN };
    let k = (p - 1) as f64;
    let adj_r2 = 1.0 - (1.0 - r2) * (t as f64 - 1.0) / (t as f64 - k - 1.0);
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::SingularDesign("R is not invertible".into()))?;
    let xtx_inv = &r_inv * r_inv.transpose();
    Ok(OlsFit {
        coef: beta.iter().copied().collect(),
        residuals,
        r2,
        adj_r2,
        xtx_inv,
    })
}

/// Design matrix `[1, columns...]`.
pub fn with_intercept(columns: &[&[f64]]) -> DMatrix<f64> {
    let t = columns.first().map_or(0, |c| c.len());
    DMatrix::from_fn(t, columns.len() + 1, |i, j| if j == 0 { 1.0 } else { columns[j - 1][i] })
}

/// Long-run covariance `Σ_{j=0..L} w_j (Γ_j + Γ_jᵀ)` (Γ_0 counted once) of the
/// rows of `scores`, with Bartlett weights `w_j = 1 − j/(L+1)`.
pub fn newey_west_meat(scores: &DMatrix<f64>, lags: usize) -> Result<DMatrix<f64>> {
    let (t, k) = scores.shape();
    if lags >= t {
        return Err(Error::Config(format!("{lags} lags for {t} observations")));
    }
    let mut s = scores.transpose() * scores;
    for j in 1..=lags {
        let w = 1.0 - j as f64 / (lags as f64 + 1.0);
        let lead = scores.rows(j, t - j);
        let lag = scores.rows(0, t - j);
        let gamma = lead.transpose() * lag;
        s += (&gamma + gamma.transpose()) * w;
    }
    debug_assert_eq!(s.shape(), (k, k));
    Ok(s)
}

/// HAC covariance of OLS coefficients: `(XᵀX)⁻¹ S (XᵀX)⁻¹`.
pub fn newey_west_cov(x: &DMatrix<f64>, fit: &OlsFit, lags: usize) -> Result<DMatrix<f64>> {
    let scores = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * fit.residuals[i]);
    let meat = newey_west_meat(&scores, lags)?;
    Ok(&fit.xtx_inv * meat * &fit.xtx_inv)
}

pub fn newey_west_se(x: &DMatrix<f64>, fit: &OlsFit, lags: usize) -> Result<Vec<f64>> {
    let cov = newey_west_cov(x, fit, lags)?;
    Ok((0..cov.nrows()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect())
}

/// Newey-West standard error of a sample mean.
pub fn newey_west_mean_se(xs: &[f64], lags: usize) -> Result<f64> {
    let n = xs.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("{n} observations")));
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let e = DMatrix::from_fn(n, 1, |i, _| xs[i] - mean);
    let s = newey_west_meat(&e, lags)?;
    Ok((s[(0, 0)].max(0.0)).sqrt() / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossSection {
    pub date: NaiveDate,
    /// `(forecast, realized)` pairs, both in basis points.
    pub pairs: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FmbResult {
    pub mean_slope: f64,
    pub t_slope: f64,
    pub mean_intercept: f64,
    /// Mean adjusted R², in percent.
    pub mean_adj_r2_pct: f64,
    /// `(date, slope, adjusted R²)` for each date that entered the average.
    pub per_date: Vec<(NaiveDate, f64, f64)>,
    /// Dates dropped for too few observations or a constant forecast.
    pub dropped: usize,
}

/// Per-date regressions of realized on forecast returns, averaged over time
/// with a Newey-West t-statistic on the mean slope.
pub fn fama_macbeth(sections: &[CrossSection], lags: usize) -> Result<FmbResult> {
    let mut per_date = Vec::new();
    let mut intercepts = Vec::new();
    let mut dropped = 0;
    for cs in sections {
        if cs.pairs.len() < 3 {
            dropped += 1;
            continue;
        }
        let f: Vec<f64> = cs.pairs.iter().map(|p| p.0).collect();
        let r: Vec<f64> = cs.pairs.iter().map(|p| p.1).collect();
        match ols(&r, &with_intercept(&[&f])) {
            Ok(fit) if fit.adj_r2.is_finite() => {
                per_date.push((cs.date, fit.coef[1], fit.adj_r2));
                intercepts.push(fit.coef[0]);
            }
            Ok(_) | Err(Error::SingularDesign(_)) => dropped += 1,
            Err(e) => return Err(e),
        }
    }
    if per_date.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} usable cross sections (need 2)",
            per_date.len()
        )));
    }
    let n = per_date.len() as f64;
    let slopes: Vec<f64> = per_date.iter().map(|d| d.1).collect();
    let mean_slope = slopes.iter().sum::<f64>() / n;
    let se = newey_west_mean_se(&slopes, lags)?;
    Ok(FmbResult {
        mean_slope,
        t_slope: if se > 0.0 { mean_slope / se } else { f64::NAN },
        mean_intercept: intercepts.iter().sum::<f64>() / n,
        mean_adj_r2_pct: 100.0 * per_date.iter().map(|d| d.2).sum::<f64>() / n,
        per_date,
        dropped,
    })
}

/// Cross-sectional correlation implied by a mean R² (both as fractions).
pub fn corr_from_r2(r2: f64) -> f64 {
    r2.max(0.0).sqrt()
}

/// Dated factor returns (decimal), one column per named factor.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorTable {
    pub names: Vec<String>,
    pub dates: Vec<NaiveDate>,
    /// `values[i][j]`: factor `j` on `dates[i]`.
    pub values: Vec<Vec<f64>>,
}

impl FactorTable {
    pub fn from_series(name: &str, series: &[(NaiveDate, f64)]) -> Self {
        FactorTable {
            names: vec![name.to_string()],
            dates: series.iter().map(|s| s.0).collect(),
            values: series.iter().map(|s| vec![s.1]).collect(),
        }
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// `(date, value)` series of one factor.
    pub fn series(&self, name: &str) -> Option<Vec<(NaiveDate, f64)>> {
        let j = self.column(name)?;
        Some(self.dates.iter().zip(&self.values).map(|(d, v)| (*d, v[j])).collect())
    }
}

pub fn read_factors(input: impl Read) -> Result<FactorTable> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.get(0).map(str::trim) != Some("date") || headers.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            message: "factor header must be date,<factor>,...".into(),
        });
    }
    let names: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
    let mut dates = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let date = NaiveDate::parse_from_str(rec[0].trim(), "%Y-%m-%d").map_err(|_| Error::Parse {
            line,
            message: format!("date {:?} is not YYYY-MM-DD", &rec[0]),
        })?;
        if dates.last().is_some_and(|d| *d >= date) {
            return Err(Error::Data(format!("factor dates not increasing at line {line}")));
        }
        let row = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("{v:?} is not a number"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        dates.push(date);
        values.push(row);
    }
    Ok(FactorTable { names, dates, values })
}

pub fn load_factors(path: impl AsRef<Path>) -> Result<FactorTable> {
    let path = path.as_ref();
    read_factors(std::fs::File::open(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpanningResult {
    /// Annualized alpha in percentage points.
    pub alpha_ann_pct: f64,
    pub t_alpha: f64,
    /// `(factor, beta, t)`.
    pub betas: Vec<(String, f64, f64)>,
    pub adj_r2_pct: f64,
    pub n_obs: usize,
    /// Dates of `y` absent from the factor table.
    pub unmatched: usize,
}

/// Time-series regression of `y` on the named factors after an inner join on
/// dates. Fails with a join error when the join leaves too few dates.
pub fn spanning_test(
    y: &[(NaiveDate, f64)],
    factors: &FactorTable,
    names: &[&str],
    lags: usize,
    periods_per_year: f64,
) -> Result<SpanningResult> {
    let cols = names
        .iter()
        .map(|n| {
            factors
                .column(n)
                .ok_or_else(|| Error::Config(format!("unknown factor {n}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let index: HashMap<NaiveDate, usize> = factors.dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let mut ys = Vec::new();
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for (d, v) in y {
        match index.get(d) {
            Some(&i) => {
                ys.push(*v);
                rows.push(i);
            }
            None => missing.push(*d),
        }
    }
    let k = names.len();
    if ys.len() <= k + 1 {
        let examples = missing
            .iter()
            .take(5)
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(", ");
        return Err(Error::Join {
            count: missing.len(),
            examples,
        });
    }
    let x = DMatrix::from_fn(ys.len(), k + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            factors.values[rows[i]][cols[j - 1]]
        }
    });
    let fit = ols(&ys, &x)?;
    let se = newey_west_se(&x, &fit, lags)?;
    let t = |i: usize| if se[i] > 0.0 { fit.coef[i] / se[i] } else { f64::NAN };
    Ok(SpanningResult {
        alpha_ann_pct: fit.coef[0] * periods_per_year * 100.0,
        t_alpha: t(0),
        betas: names
            .iter()
            .enumerate()
            .map(|(j, n)| (n.to_string(), fit.coef[j + 1], t(j + 1)))
            .collect(),
        adj_r2_pct: 100.0 * fit.adj_r2,
        n_obs: ys.len(),
        unmatched: missing.len(),
    })
}
