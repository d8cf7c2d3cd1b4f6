//! Spectral statistics: Welch PSD, canonical band powers and the two-level
//! repeated-measures F-score.

use std::fmt::Write as _;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{LblmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandDef {
    pub name: &'static str,
    pub lo: f64,
    pub hi: f64,
}

pub const BANDS: [BandDef; 5] = [
    BandDef { name: "delta", lo: 1.0, hi: 4.0 },
    BandDef { name: "theta", lo: 4.0, hi: 8.0 },
    BandDef { name: "alpha", lo: 8.0, hi: 13.0 },
    BandDef { name: "beta", lo: 13.0, hi: 30.0 },
    BandDef { name: "gamma", lo: 30.0, hi: 50.0 },
];

pub fn band_by_name(name: &str) -> Result<BandDef> {
    BANDS
        .iter()
        .copied()
        .find(|b| b.name == name)
        .ok_or_else(|| LblmError::config(format!("unknown band `{name}`")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsdEstimate {
    pub freqs: Vec<f64>,
    /// `channels x freqs`, one-sided density.
    pub power: Vec<Vec<f64>>,
    pub window_len: usize,
    pub overlap: usize,
}

impl PsdEstimate {
    /// Trapezoidal integral over all bins, per channel.
    pub fn total_power(&self) -> Vec<f64> {
        self.power.iter().map(|p| trapezoid(&self.freqs, p)).collect()
    }
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

fn hann(len: usize) -> Vec<f64> {
    // periodic form, the usual choice for spectral estimation
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Averaged Hann periodograms, scaled to a one-sided power density so that
/// integrating over frequency recovers the variance.
pub fn welch_psd(segment: &[Vec<f64>], fs: f64, window_len: usize, overlap: usize) -> Result<PsdEstimate> {
    let len = segment.first().map_or(0, |c| c.len());
    if window_len == 0 || window_len > len {
        return Err(LblmError::config(format!(
            "Welch window {window_len} does not fit a segment of {len} samples"
        )));
    }
    if overlap >= window_len {
        return Err(LblmError::config("Welch overlap must be shorter than the window"));
    }
    if segment.iter().any(|c| c.len() != len) {
        return Err(LblmError::shape("channels have unequal lengths"));
    }
    let hop = window_len - overlap;
    let nwin = (len - window_len) / hop + 1;
    let win = hann(window_len);
    let u: f64 = win.iter().map(|w| w * w).sum();
    let nbins = window_len / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window_len);
    let mut buf = vec![Complex::new(0.0, 0.0); window_len];
    let power = segment
        .iter()
        .map(|ch| {
            let mut acc = vec![0.0; nbins];
            for w in 0..nwin {
                let seg = &ch[w * hop..w * hop + window_len];
                let mean = seg.iter().sum::<f64>() / window_len as f64;
                for ((b, x), h) in buf.iter_mut().zip(seg).zip(&win) {
                    *b = Complex::new((x - mean) * h, 0.0);
                }
                fft.process(&mut buf);
                for (k, a) in acc.iter_mut().enumerate() {
                    let one_sided = if k == 0 || (window_len % 2 == 0 && k == window_len / 2) {
                        1.0
                    } else {
                        2.0
                    };
                    *a += one_sided * buf[k].norm_sqr() / (fs * u);
                }
            }
            acc.iter().map(|a| a / nwin as f64).collect()
        })
        .collect();
    let freqs = (0..nbins).map(|k| k as f64 * fs / window_len as f64).collect();
    Ok(PsdEstimate {
        freqs,
        power,
        window_len,
        overlap,
    })
}

/// 1 s windows with 50% overlap.
pub fn welch_default(segment: &[Vec<f64>], fs: f64) -> Result<PsdEstimate> {
    let w = fs.round() as usize;
    welch_psd(segment, fs, w, w / 2)
}

/// Trapezoidal integral over the bins with `lo <= f < hi`. A single bin
/// integrates over one bin width.
pub fn band_power(psd: &PsdEstimate, band: &BandDef) -> Result<Vec<f64>> {
    let nyq = psd.freqs.last().copied().unwrap_or(0.0);
    if band.lo < 0.0 || band.lo >= band.hi || band.lo > nyq {
        return Err(LblmError::config(format!(
            "band {} ({}, {}) outside [0, {nyq}] Hz",
            band.name, band.lo, band.hi
        )));
    }
    let idx: Vec<usize> = (0..psd.freqs.len())
        .filter(|&k| psd.freqs[k] >= band.lo && psd.freqs[k] < band.hi)
        .collect();
    if idx.is_empty() {
        return Err(LblmError::config(format!("band {} covers no frequency bins", band.name)));
    }
    let df = psd.freqs.get(1).copied().unwrap_or(1.0);
    let freqs: Vec<f64> = idx.iter().map(|&k| psd.freqs[k]).collect();
    Ok(psd
        .power
        .iter()
        .map(|p| {
            let vals: Vec<f64> = idx.iter().map(|&k| p[k]).collect();
            if vals.len() == 1 {
                vals[0] * df
            } else {
                trapezoid(&freqs, &vals)
            }
        })
        .collect())
}

/// One-way repeated-measures ANOVA with two levels for one channel.
/// `a[i]` and `b[i]` belong to subject `i`.
pub fn rm_anova_f(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len();
    if n != b.len() {
        return Err(LblmError::shape(format!("{n} subjects in one condition, {} in the other", b.len())));
    }
    if n < 2 {
        return Err(LblmError::config("repeated-measures ANOVA needs at least two subjects"));
    }
    let nf = n as f64;
    let grand = (a.iter().sum::<f64>() + b.iter().sum::<f64>()) / (2.0 * nf);
    let ma = a.iter().sum::<f64>() / nf;
    let mb = b.iter().sum::<f64>() / nf;
    let ss_cond = nf * ((ma - grand).powi(2) + (mb - grand).powi(2));
    let mut ss_err = 0.0;
    let mut ss_total = 0.0;
    for i in 0..n {
        let ms = 0.5 * (a[i] + b[i]);
        ss_err += (a[i] - ms - ma + grand).powi(2) + (b[i] - ms - mb + grand).powi(2);
        ss_total += (a[i] - grand).powi(2) + (b[i] - grand).powi(2);
    }
    let floor = 1e-24 * ss_total.max(f64::MIN_POSITIVE);
    if ss_cond <= floor {
        return Ok(0.0);
    }
    if ss_err <= 1e-20 * ss_total {
        return Err(LblmError::DegenerateVariance("zero within-subject error variance".into()));
    }
    Ok(ss_cond / (ss_err / (nf - 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FScoreRow {
    pub comparison: String,
    pub channel: usize,
    pub band: String,
    /// `None` when the within-subject error variance is zero.
    pub f: Option<f64>,
    pub n_subjects: usize,
}

impl FScoreRow {
    pub fn degenerate(&self) -> bool {
        self.f.is_none()
    }
}

/// Per-channel F for one band. `a` and `b` are `subjects x channels`.
pub fn fscore_rows(comparison: &str, band: &str, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<FScoreRow>> {
    let channels = a.first().map_or(0, |r| r.len());
    (0..channels)
        .map(|c| {
            let xa: Vec<f64> = a.iter().map(|r| r[c]).collect();
            let xb: Vec<f64> = b.iter().map(|r| r[c]).collect();
            let f = match rm_anova_f(&xa, &xb) {
                Ok(f) => Some(f),
                Err(LblmError::DegenerateVariance(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(FScoreRow {
                comparison: comparison.to_string(),
                channel: c,
                band: band.to_string(),
                f,
                n_subjects: xa.len(),
            })
        })
        .collect()
}

pub fn fscore_csv(rows: &[FScoreRow]) -> String {
    let mut s = String::from("comparison,channel,band,f,n_subjects,degenerate\n");
    for r in rows {
        let f = r.f.map_or(String::new(), |f| format!("{f:.9e}"));
        let _ = writeln!(s, "{},{},{},{},{},{}", r.comparison, r.channel, r.band, f, r.n_subjects, r.degenerate() as u8);
    }
    s
}
