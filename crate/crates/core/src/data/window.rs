use std::ops::Range;

use ndarray::Array2;

use super::TimeSeriesDataset;
use crate::error::{DuetError, Result};

/// One supervised sample: look-back `x` (N×T) and target `y` (N×F).
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    /// First timestamp of `y` in the raw series.
    pub origin_index: usize,
}

/// All stride-1 windows whose target lies inside `range`.
///
/// The look-back may reach into whatever precedes `range`, so a segment
/// with full history yields `len - F + 1` windows and the first segment
/// yields `len - T - F + 1`. The last partial batch is never dropped.
pub fn make_windows(
    ds: &TimeSeriesDataset,
    range: Range<usize>,
    lookback: usize,
    horizon: usize,
) -> Result<Vec<WindowPair>> {
    let no_windows = || DuetError::NoWindows {
        len: range.len(),
        lookback,
        horizon,
    };
    if lookback == 0 || horizon == 0 || range.end > ds.len() {
        return Err(no_windows());
    }
    let first = range.start.max(lookback);
    let Some(last) = range.end.checked_sub(horizon) else {
        return Err(no_windows());
    };
    if first > last {
        return Err(no_windows());
    }
    let windows = (first..=last)
        .map(|origin| WindowPair {
            x: ds
                .values
                .slice(ndarray::s![.., origin - lookback..origin])
                .to_owned(),
            y: ds
                .values
                .slice(ndarray::s![.., origin..origin + horizon])
                .to_owned(),
            origin_index: origin,
        })
        .collect();
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn ramp(n: usize, l: usize) -> TimeSeriesDataset {
        let values = Array2::from_shape_fn((n, l), |(c, t)| (c * 1000 + t) as f64);
        TimeSeriesDataset::new(values, (0..n).map(|i| format!("c{i}")).collect()).unwrap()
    }

    #[test]
    fn first_segment_count_and_last_pair() {
        let ds = ramp(2, 10);
        let w = make_windows(&ds, 0..10, 3, 2).unwrap();
        assert_eq!(w.len(), 6);
        let last = w.last().unwrap();
        assert_eq!(last.x.row(0).to_vec(), vec![5.0, 6.0, 7.0]);
        assert_eq!(last.y.row(0).to_vec(), vec![8.0, 9.0]);
        assert_eq!(last.origin_index, 8);
    }

    #[test]
    fn minimal_window() {
        let ds = ramp(1, 2);
        assert_eq!(make_windows(&ds, 0..2, 1, 1).unwrap().len(), 1);
    }

    #[test]
    fn too_short() {
        let ds = ramp(1, 4);
        assert!(matches!(
            make_windows(&ds, 0..4, 3, 2),
            Err(DuetError::NoWindows { .. })
        ));
    }

    #[test]
    fn later_segment_borrows_history() {
        let ds = ramp(1, 20);
        let w = make_windows(&ds, 10..20, 3, 2).unwrap();
        assert_eq!(w.len(), 10 - 2 + 1);
        assert_eq!(w[0].origin_index, 10);
        assert_eq!(w[0].x.row(0).to_vec(), vec![7.0, 8.0, 9.0]);
    }

    proptest! {
        #[test]
        fn count_matches_enumeration(l in 2usize..60, t in 1usize..12, f in 1usize..12, start in 0usize..30) {
            prop_assume!(start < l);
            let ds = ramp(1, l);
            // Brute force: every origin whose target fits in the range and
            // whose look-back fits in the series.
            let expected = (start..l)
                .filter(|&o| o >= t && o + f <= l)
                .count();
            match make_windows(&ds, start..l, t, f) {
                Ok(w) => {
                    prop_assert_eq!(w.len(), expected);
                    for pair in &w {
                        prop_assert!(pair.origin_index >= start);
                        prop_assert!(pair.origin_index + f <= l);
                    }
                }
                Err(_) => prop_assert_eq!(expected, 0),
            }
            if start == 0 && l >= t + f {
                prop_assert_eq!(expected, l - t - f + 1);
            }
            if start >= t && l - start >= f {
                prop_assert_eq!(expected, l - start - f + 1);
            }
        }
    }
}
