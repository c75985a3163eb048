use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DuetError, Result};

/// Train/validation/test proportions, e.g. `7:1:2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64) -> Self {
        Self {
            ratios: [train, val, test],
        }
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::new(7.0, 1.0, 2.0)
    }
}

impl fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.ratios;
        write!(f, "{a}:{b}:{c}")
    }
}

impl FromStr for SplitSpec {
    type Err = DuetError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| DuetError::InvalidSplit(format!("cannot parse `{s}`")))?;
        match parts.as_slice() {
            [a, b, c] => Ok(SplitSpec::new(*a, *b, *c)),
            _ => Err(DuetError::InvalidSplit(format!(
                "`{s}` must have three parts"
            ))),
        }
    }
}

/// Contiguous, ordered, disjoint index intervals covering `[0, L)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitRanges {
    pub fn part(&self, name: &str) -> Option<Range<usize>> {
        match name {
            "train" => Some(self.train.clone()),
            "val" => Some(self.val.clone()),
            "test" => Some(self.test.clone()),
            _ => None,
        }
    }
}

/// Cuts `[0, len)` at the floor of the cumulative ratios.
///
/// Every segment must hold at least `lookback + horizon` timestamps.
pub fn split_dataset(
    len: usize,
    spec: SplitSpec,
    lookback: usize,
    horizon: usize,
) -> Result<SplitRanges> {
    let [a, b, c] = spec.ratios;
    if spec.ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(DuetError::InvalidSplit(format!(
            "ratios {spec} must be finite and nonnegative"
        )));
    }
    let total = a + b + c;
    if total <= 0.0 {
        return Err(DuetError::InvalidSplit(format!(
            "ratios {spec} sum to zero"
        )));
    }
    // The epsilon absorbs representation error such as 0.7 + 0.1 < 0.8.
    let cut = |frac: f64| ((len as f64 * frac / total) + 1e-9).floor() as usize;
    let b1 = cut(a).min(len);
    let b2 = cut(a + b).clamp(b1, len);
    let ranges = SplitRanges {
        train: 0..b1,
        val: b1..b2,
        test: b2..len,
    };
    let need = lookback + horizon;
    for (name, r) in [
        ("train", &ranges.train),
        ("val", &ranges.val),
        ("test", &ranges.test),
    ] {
        if r.len() < need {
            return Err(DuetError::InvalidSplit(format!(
                "{name} segment {r:?} has {} timestamps, needs at least {need}",
                r.len()
            )));
        }
    }
    Ok(ranges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn seven_one_two_on_a_hundred() {
        let r = split_dataset(100, "7:1:2".parse().unwrap(), 3, 2).unwrap();
        assert_eq!((r.train, r.val, r.test), (0..70, 70..80, 80..100));
    }

    #[test]
    fn etth1_six_two_two() {
        let r = split_dataset(14_400, SplitSpec::new(6.0, 2.0, 2.0), 96, 96).unwrap();
        assert_eq!((r.train, r.val, r.test), (0..8640, 8640..11520, 11520..14400));
    }

    #[test]
    fn fractional_ratios_do_not_lose_a_row() {
        let r = split_dataset(100, SplitSpec::new(0.7, 0.1, 0.2), 3, 2).unwrap();
        assert_eq!(r.val, 70..80);
    }

    #[test]
    fn degenerate_ratios() {
        assert!(matches!(
            split_dataset(100, SplitSpec::new(0.0, 0.0, 0.0), 3, 2),
            Err(DuetError::InvalidSplit(_))
        ));
        assert!(split_dataset(100, SplitSpec::new(1.0, -1.0, 2.0), 3, 2).is_err());
    }

    #[test]
    fn segment_too_short_for_a_window() {
        assert!(split_dataset(100, SplitSpec::new(7.0, 1.0, 2.0), 8, 4).is_err());
    }

    #[test]
    fn parse_errors() {
        assert!("7:1".parse::<SplitSpec>().is_err());
        assert!("a:b:c".parse::<SplitSpec>().is_err());
    }

    proptest! {
        #[test]
        fn ranges_partition_the_series(
            len in 30usize..2000,
            a in 1u32..10, b in 1u32..10, c in 1u32..10,
        ) {
            if let Ok(r) = split_dataset(len, SplitSpec::new(a as f64, b as f64, c as f64), 2, 1) {
                prop_assert_eq!(r.train.start, 0);
                prop_assert_eq!(r.train.end, r.val.start);
                prop_assert_eq!(r.val.end, r.test.start);
                prop_assert_eq!(r.test.end, len);
            }
        }
    }
}
