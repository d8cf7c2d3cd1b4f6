//! Linear-phase FIR design (Hamming-windowed sinc) and zero-delay
//! application through FFT convolution.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::types::EegRecording;
use crate::error::{LblmError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterKind {
    Bandpass { lo: f64, hi: f64 },
    Lowpass { cutoff: f64 },
    Notch { f0: f64 },
}

/// Notch stop band half-width and transition width, Hz.
const NOTCH_HALF_WIDTH: f64 = 1.0;
const NOTCH_TRANSITION: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FirFilter {
    pub taps: Vec<f64>,
    pub fs: f64,
}

impl FirFilter {
    pub fn order(&self) -> usize {
        self.taps.len() - 1
    }

    pub fn group_delay(&self) -> usize {
        self.order() / 2
    }

    /// Complex gain at `freq` Hz with the group delay removed.
    pub fn gain(&self, freq: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * freq / self.fs;
        let (mut re, mut im) = (0.0, 0.0);
        for (n, h) in self.taps.iter().enumerate() {
            re += h * (w * n as f64).cos();
            im -= h * (w * n as f64).sin();
        }
        (re * re + im * im).sqrt()
    }

    /// Filters `x` and shifts by the group delay so the output is aligned
    /// with the input. Samples outside `x` are treated as zero.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        if x.is_empty() {
            return Vec::new();
        }
        let full = x.len() + self.taps.len() - 1;
        let size = full.next_power_of_two();
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(size);
        let inv = planner.plan_fft_inverse(size);
        let mut a: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(*v, 0.0)).collect();
        a.resize(size, Complex::new(0.0, 0.0));
        let mut b: Vec<Complex<f64>> = self.taps.iter().map(|v| Complex::new(*v, 0.0)).collect();
        b.resize(size, Complex::new(0.0, 0.0));
        fwd.process(&mut a);
        fwd.process(&mut b);
        for (p, q) in a.iter_mut().zip(&b) {
            *p *= q;
        }
        inv.process(&mut a);
        let scale = 1.0 / size as f64;
        let delay = self.group_delay();
        (0..x.len()).map(|i| a[i + delay].re * scale).collect()
    }
}

fn hamming(n: usize, len: usize) -> f64 {
    0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Unit-DC-gain lowpass with -6 dB point at `cutoff`.
fn lowpass_taps(cutoff: f64, fs: f64, order: usize) -> Vec<f64> {
    let len = order + 1;
    let fc = cutoff / fs;
    let mid = order as f64 / 2.0;
    let mut taps: Vec<f64> = (0..len)
        .map(|n| 2.0 * fc * sinc(2.0 * fc * (n as f64 - mid)) * hamming(n, len))
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

fn even_order(fs: f64, transition: f64) -> usize {
    let order = (4.0 * fs / transition).ceil() as usize;
    order + order % 2
}

/// Lower-edge transition width: a quarter of the edge, at least 2 Hz, at
/// most the edge itself.
fn lo_transition(lo: f64) -> f64 {
    (0.25 * lo).max(2.0).min(lo)
}

fn hi_transition(hi: f64, nyquist: f64) -> f64 {
    (0.25 * hi).max(2.0).min(nyquist - hi)
}

/// Designs the filter. Pass-band edges are placed half a transition width
/// inside the -6 dB cutoffs, order is `4 * fs / transition` rounded to even.
pub fn design(kind: FilterKind, fs: f64) -> Result<FirFilter> {
    let nyquist = fs / 2.0;
    let taps = match kind {
        FilterKind::Bandpass { lo, hi } => {
            if !(lo > 0.0 && lo < hi && hi < nyquist) {
                return Err(LblmError::config(format!(
                    "bandpass ({lo}, {hi}) Hz invalid for Nyquist {nyquist} Hz"
                )));
            }
            let tl = lo_transition(lo);
            let th = hi_transition(hi, nyquist);
            let order = even_order(fs, tl.min(th));
            let upper = lowpass_taps((hi + th / 2.0).min(nyquist), fs, order);
            let lower = lowpass_taps(lo - tl / 2.0, fs, order);
            upper.iter().zip(&lower).map(|(a, b)| a - b).collect()
        }
        FilterKind::Lowpass { cutoff } => {
            if !(cutoff > 0.0 && cutoff < nyquist) {
                return Err(LblmError::config(format!(
                    "lowpass cutoff {cutoff} Hz invalid for Nyquist {nyquist} Hz"
                )));
            }
            let tw = (0.25 * cutoff).min(nyquist - cutoff).max(f64::EPSILON);
            lowpass_taps(cutoff, fs, even_order(fs, tw))
        }
        FilterKind::Notch { f0 } => {
            let edge = NOTCH_HALF_WIDTH + NOTCH_TRANSITION / 2.0;
            if !(f0 - edge > 0.0 && f0 + edge < nyquist) {
                return Err(LblmError::config(format!(
                    "notch at {f0} Hz invalid for Nyquist {nyquist} Hz"
                )));
            }
            let order = even_order(fs, NOTCH_TRANSITION);
            let upper = lowpass_taps(f0 + edge, fs, order);
            let lower = lowpass_taps(f0 - edge, fs, order);
            let mut taps: Vec<f64> = lower.iter().zip(&upper).map(|(a, b)| a - b).collect();
            taps[order / 2] += 1.0;
            taps
        }
    };
    Ok(FirFilter { taps, fs })
}

/// Anti-alias lowpass used before decimation: cutoff `0.45 * target_fs`
/// with transition width `0.1 * target_fs`.
pub fn anti_alias(fs: f64, target_fs: f64) -> FirFilter {
    let order = even_order(fs, 0.1 * target_fs);
    FirFilter {
        taps: lowpass_taps(0.45 * target_fs, fs, order),
        fs,
    }
}

/// Applies the filter channel by channel.
pub fn fir_filter(rec: &EegRecording, kind: FilterKind) -> Result<EegRecording> {
    let filt = design(kind, rec.fs as f64)?;
    let data = rec.to_f64().iter().map(|c| filt.apply(c)).collect();
    Ok(rec.with_data(data))
}
