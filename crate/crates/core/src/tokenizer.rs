//! Discretization of simple returns into a fixed dictionary of return bins.
//!
//! Returns are converted to integer basis points by truncation toward zero and
//! cut into right-closed intervals of `bin_width_bp`. The lowest token holds
//! everything at or below the lower clamp, the highest token everything above
//! the upper clamp. With the default 50 bp width over [-10000, 10000] the
//! dictionary has 402 tokens:
//!
//! | token | interval (bp)       | midpoint |
//! |-------|---------------------|----------|
//! | 0     | (-inf, -10000]      | -10000   |
//! | 1     | (-10000, -9950]     | -9975    |
//! | k     | (-10000+50(k-1), -10000+50k] | -10000+50k-25 |
//! | 400   | (9950, 10000]       | 9975     |
//! | 401   | (10000, inf)        | 10000    |

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenId(pub u16);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinSpec {
    pub bin_width_bp: i64,
    pub lower_clamp_bp: i64,
    pub upper_clamp_bp: i64,
}

impl Default for BinSpec {
    fn default() -> Self {
        BinSpec {
            bin_width_bp: 50,
            lower_clamp_bp: -10_000,
            upper_clamp_bp: 10_000,
        }
    }
}

/// Number of tokens in the default dictionary.
pub const VOCAB_SIZE: usize = 402;

impl BinSpec {
    pub fn new(bin_width_bp: i64, lower_clamp_bp: i64, upper_clamp_bp: i64) -> Result<Self> {
        if bin_width_bp <= 0 || upper_clamp_bp <= lower_clamp_bp {
            return Err(Error::Config(format!(
                "bin spec needs positive width and lower < upper, got width {bin_width_bp}, [{lower_clamp_bp}, {upper_clamp_bp}]"
            )));
        }
        if (upper_clamp_bp - lower_clamp_bp) % bin_width_bp != 0 {
            return Err(Error::Config(format!(
                "clamp range {} is not a multiple of the bin width {bin_width_bp}",
                upper_clamp_bp - lower_clamp_bp
            )));
        }
        Ok(BinSpec {
            bin_width_bp,
            lower_clamp_bp,
            upper_clamp_bp,
        })
    }

    pub fn vocab_size(&self) -> usize {
        (2 + (self.upper_clamp_bp - self.lower_clamp_bp) / self.bin_width_bp) as usize
    }

    fn last_token(&self) -> u16 {
        (self.vocab_size() - 1) as u16
    }

    /// Token of an integer basis-point value.
    pub fn tokenize_bp(&self, bp: i64) -> TokenId {
        if bp <= self.lower_clamp_bp {
            return TokenId(0);
        }
        if bp > self.upper_clamp_bp {
            return TokenId(self.last_token());
        }
        // Smallest k with lower + width*k >= bp, i.e. ceil((bp - lower) / width).
        let offset = bp - self.lower_clamp_bp;
        let k = (offset + self.bin_width_bp - 1) / self.bin_width_bp;
        TokenId(k as u16)
    }

    pub fn tokenize(&self, ret: f64) -> Result<TokenId> {
        if ret.is_nan() || ret < -1.0 {
            return Err(Error::InvalidReturn { value: ret });
        }
        Ok(self.tokenize_bp(to_basis_points(ret)))
    }

    pub fn tokenize_series(&self, rets: &[f64]) -> Result<Vec<TokenId>> {
        rets.iter()
            .enumerate()
            .map(|(position, &r)| {
                self.tokenize(r)
                    .map_err(|_| Error::InvalidReturnAt { position, value: r })
            })
            .collect()
    }

    /// Representative value of a token in basis points.
    pub fn midpoint(&self, token: TokenId) -> f64 {
        let k = token.0 as i64;
        if k == 0 {
            self.lower_clamp_bp as f64
        } else if k as u16 >= self.last_token() {
            self.upper_clamp_bp as f64
        } else {
            (self.lower_clamp_bp + self.bin_width_bp * k) as f64 - self.bin_width_bp as f64 / 2.0
        }
    }

    /// Midpoints for every token, indexed by token id.
    pub fn midpoints(&self) -> Vec<f64> {
        (0..self.vocab_size())
            .map(|k| self.midpoint(TokenId(k as u16)))
            .collect()
    }

    /// Interval `(lo, hi]` in basis points covered by a token. Open ends are infinite.
    pub fn interval(&self, token: TokenId) -> (f64, f64) {
        let k = token.0 as i64;
        if k == 0 {
            (f64::NEG_INFINITY, self.lower_clamp_bp as f64)
        } else if k as u16 >= self.last_token() {
            (self.upper_clamp_bp as f64, f64::INFINITY)
        } else {
            let hi = self.lower_clamp_bp + self.bin_width_bp * k;
            ((hi - self.bin_width_bp) as f64, hi as f64)
        }
    }
}

/// Integer portion of a return expressed in basis points.
pub fn to_basis_points(ret: f64) -> i64 {
    let bp = (ret * 10_000.0).trunc();
    if bp >= i64::MAX as f64 {
        i64::MAX
    } else {
        bp as i64
    }
}

pub fn tokenize(ret: f64) -> Result<TokenId> {
    BinSpec::default().tokenize(ret)
}

pub fn tokenize_series(rets: &[f64]) -> Result<Vec<TokenId>> {
    BinSpec::default().tokenize_series(rets)
}

pub fn midpoint(token: TokenId) -> f64 {
    BinSpec::default().midpoint(token)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_example_sequence() {
        let toks = tokenize_series(&[-0.024, 0.0, 0.0, 0.05, 0.048]).unwrap();
        let idx: Vec<u16> = toks.iter().map(|t| t.0).collect();
        assert_eq!(idx, vec![196, 200, 200, 210, 210]);
    }

    #[test]
    fn clamp_boundaries() {
        assert_eq!(tokenize(-1.0).unwrap(), TokenId(0));
        assert_eq!(tokenize(1.0).unwrap(), TokenId(400));
        // 1.00001 truncates to 10000 bp, still inside the last closed bin
        assert_eq!(tokenize(1.00001).unwrap(), TokenId(400));
        assert_eq!(tokenize(1.0001).unwrap(), TokenId(401));
        assert_eq!(tokenize(57.0).unwrap(), TokenId(401));
        assert_eq!(tokenize(-0.99999).unwrap(), TokenId(1));
    }

    #[test]
    fn midpoints_match_table_rows() {
        assert_eq!(midpoint(TokenId(0)), -10_000.0);
        assert_eq!(midpoint(TokenId(1)), -9_975.0);
        assert_eq!(midpoint(TokenId(2)), -9_925.0);
        assert_eq!(midpoint(TokenId(400)), 9_975.0);
        assert_eq!(midpoint(TokenId(401)), 10_000.0);
        assert_eq!(midpoint(TokenId(200)), -25.0);
        assert_eq!(midpoint(TokenId(210)), 475.0);
    }

    #[test]
    fn vocab_is_402() {
        assert_eq!(BinSpec::default().vocab_size(), VOCAB_SIZE);
    }

    #[test]
    fn below_floor_is_rejected() {
        match tokenize(-1.5) {
            Err(Error::InvalidReturn { value }) => assert_eq!(value, -1.5),
            other => panic!("unexpected {other:?}"),
        }
        assert!(tokenize(f64::NAN).is_err());
        match tokenize_series(&[0.01, 0.02, -2.0]) {
            Err(Error::InvalidReturnAt { position, .. }) => assert_eq!(position, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_series() {
        assert!(tokenize_series(&[]).unwrap().is_empty());
    }

    #[test]
    fn intervals_partition_the_line() {
        let spec = BinSpec::default();
        // Every integer bp in a wide range falls in exactly one interval.
        for bp in -10_100i64..=10_100 {
            let hits: Vec<usize> = (0..spec.vocab_size())
                .filter(|&k| {
                    let (lo, hi) = spec.interval(TokenId(k as u16));
                    (bp as f64) > lo && (bp as f64) <= hi
                })
                .collect();
            assert_eq!(hits.len(), 1, "bp {bp} hits {hits:?}");
            assert_eq!(hits[0], spec.tokenize_bp(bp).index());
        }
    }

    #[test]
    fn thousand_random_returns_fall_in_their_bins() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let spec = BinSpec::default();
        let rets: Vec<f64> = (0..1000).map(|_| rng.gen_range(-1.0..1.5)).collect();
        let toks = spec.tokenize_series(&rets).unwrap();
        for (r, t) in rets.iter().zip(&toks) {
            let bp = (r * 10_000.0).trunc();
            let (lo, hi) = spec.interval(*t);
            assert!(bp > lo && bp <= hi, "{r} -> {t} ({lo}, {hi}]");
        }
    }

    proptest! {
        #[test]
        fn monotone(a in -1.0f64..2.0, b in -1.0f64..2.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(tokenize(lo).unwrap() <= tokenize(hi).unwrap());
        }

        #[test]
        fn midpoint_within_half_bin(r in -0.9999f64..=1.0) {
            let bp = (r * 10_000.0).trunc();
            prop_assume!(bp > -10_000.0);
            let m = midpoint(tokenize(r).unwrap());
            prop_assert!((m - bp).abs() <= 25.0);
        }
    }
}
