use std::cell::RefCell;

use ndarray::{Array1, ArrayView1};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{DuetError, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Number of amplitude bins kept for a window of length `t`.
pub fn frequency_bins(t: usize) -> usize {
    t / 2
}

/// Magnitudes of the unnormalized DFT at bins `1..=T/2` (DC dropped).
pub fn frequency_amplitude(x: ArrayView1<f64>) -> Result<Array1<f64>> {
    let t = x.len();
    if t < 2 {
        return Err(DuetError::SeriesTooShort(t));
    }
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let fft = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(t));
    fft.process(&mut buf);
    Ok((1..=frequency_bins(t)).map(|b| buf[b].norm()).collect())
}
