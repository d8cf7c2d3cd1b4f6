use serde::{Deserialize, Serialize};

use super::filter::{anti_alias, design, fir_filter, FilterKind};
use super::types::{BandTag, Condition, EegRecording, TrialSegment};
use crate::error::{LblmError, Result};

/// Subtracts the cross-channel mean at every timestep.
pub fn average_rereference(rec: &EegRecording) -> Result<EegRecording> {
    let c = rec.channels();
    if c < 2 {
        return Err(LblmError::config(format!("re-referencing needs >= 2 channels, got {c}")));
    }
    let data = rereference_rows(&rec.to_f64());
    Ok(rec.with_data(data))
}

/// Average re-reference on `f64` rows.
pub fn rereference_rows(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let c = rows.len();
    let t = rows.first().map_or(0, |r| r.len());
    let mut out = rows.to_vec();
    for i in 0..t {
        let mean = rows.iter().map(|r| r[i]).sum::<f64>() / c as f64;
        for ch in out.iter_mut() {
            ch[i] -= mean;
        }
    }
    out
}

/// Anti-alias filter then integer decimation.
pub fn downsample(rec: &EegRecording, target_fs: f32) -> Result<EegRecording> {
    if !(target_fs > 0.0) {
        return Err(LblmError::config("target sampling rate must be positive"));
    }
    let ratio = rec.fs / target_fs;
    if ratio < 1.0 || (ratio - ratio.round()).abs() > 1e-6 {
        return Err(LblmError::config(format!(
            "cannot decimate {} Hz to {} Hz by an integer factor",
            rec.fs, target_fs
        )));
    }
    let ratio = ratio.round() as usize;
    if ratio == 1 {
        return Ok(rec.clone());
    }
    let filt = anti_alias(rec.fs as f64, target_fs as f64);
    let t_out = rec.len() / ratio;
    let data: Vec<Vec<f64>> = rec
        .to_f64()
        .iter()
        .map(|c| {
            let y = filt.apply(c);
            (0..t_out).map(|i| y[i * ratio]).collect()
        })
        .collect();
    let mut out = rec.with_data(data);
    out.fs = target_fs;
    for m in &mut out.trial_marks {
        m.start /= ratio;
    }
    out.trial_marks.retain(|m| m.start < t_out);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpochConfig {
    pub window_s: f64,
    pub overlap_s: f64,
}

impl Default for EpochConfig {
    fn default() -> Self {
        EpochConfig {
            window_s: 2.0,
            overlap_s: 0.5,
        }
    }
}

impl EpochConfig {
    pub fn window_len(&self, fs: f64) -> usize {
        (self.window_s * fs).round() as usize
    }

    pub fn hop_len(&self, fs: f64) -> usize {
        ((self.window_s - self.overlap_s) * fs).round() as usize
    }
}

fn slice_segment(rows: &[Vec<f64>], rec: &EegRecording, start: usize, len: usize, band: BandTag) -> TrialSegment {
    TrialSegment {
        data: rows.iter().map(|r| r[start..start + len].to_vec()).collect(),
        fs: rec.fs as f64,
        word: 0,
        semantic: 0,
        subject_id: rec.subject_id,
        session_id: rec.session_id,
        band,
        condition: None,
    }
}

/// Label-free sliding windows over the whole recording. A recording shorter
/// than one window yields no segments.
pub fn epoch_sliding(rec: &EegRecording, cfg: &EpochConfig, band: BandTag) -> Result<Vec<TrialSegment>> {
    let fs = rec.fs as f64;
    let win = cfg.window_len(fs);
    let hop = cfg.hop_len(fs);
    if win == 0 || hop == 0 {
        return Err(LblmError::config("epoch window and hop must be positive"));
    }
    let t = rec.len();
    if t < win {
        return Ok(Vec::new());
    }
    let rows = rec.to_f64();
    let count = (t - win) / hop + 1;
    Ok((0..count)
        .map(|i| slice_segment(&rows, rec, i * hop, win, band))
        .collect())
}

/// Windows cut at each trial mark of the given condition, carrying labels.
pub fn epoch_trials(
    rec: &EegRecording,
    cfg: &EpochConfig,
    condition: Condition,
    band: BandTag,
) -> Result<Vec<TrialSegment>> {
    let win = cfg.window_len(rec.fs as f64);
    let t = rec.len();
    let rows = rec.to_f64();
    let mut out = Vec::new();
    for m in rec.trial_marks.iter().filter(|m| m.condition == condition) {
        if m.start + win > t {
            return Err(LblmError::Truncation {
                start: m.start,
                end: m.start + win,
                len: t,
            });
        }
        let mut seg = slice_segment(&rows, rec, m.start, win, band);
        seg.word = m.word;
        seg.semantic = m.semantic;
        seg.condition = Some(condition);
        out.push(seg);
    }
    Ok(out)
}

/// For each raw segment, emits four copies: raw (1-50 Hz), alpha, beta and
/// gamma band-passed. Labels and identities are preserved.
pub fn multiband_mix(segments: &[TrialSegment]) -> Result<Vec<TrialSegment>> {
    let mut out = Vec::with_capacity(segments.len() * 4);
    for seg in segments {
        if seg.band != BandTag::Raw {
            return Err(LblmError::config("multiband_mix expects raw-tagged segments"));
        }
        for band in BandTag::ALL {
            let (lo, hi) = band.range();
            let filt = design(FilterKind::Bandpass { lo, hi }, seg.fs)?;
            let mut s = seg.clone();
            s.data = seg.data.iter().map(|c| filt.apply(c)).collect();
            s.band = band;
            out.push(s);
        }
    }
    Ok(out)
}

/// Band-passes a continuous recording into the four mixing bands. Filtering
/// before epoching avoids the edge transients of filtering short windows.
pub fn band_split(rec: &EegRecording) -> Result<Vec<(BandTag, EegRecording)>> {
    BandTag::ALL
        .iter()
        .map(|&band| {
            let (lo, hi) = band.range();
            Ok((band, fir_filter(rec, FilterKind::Bandpass { lo, hi })?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub band_lo: f64,
    pub band_hi: f64,
    pub notch_hz: Option<f64>,
    pub target_fs: f32,
    pub epoch: EpochConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            band_lo: 1.0,
            band_hi: 75.0,
            notch_hz: Some(50.0),
            target_fs: 250.0,
            epoch: EpochConfig::default(),
        }
    }
}

/// Band-pass, notch, average re-reference and downsample.
pub fn preprocess_recording(rec: &EegRecording, cfg: &PreprocessConfig) -> Result<EegRecording> {
    rec.validate()?;
    let mut r = fir_filter(
        rec,
        FilterKind::Bandpass {
            lo: cfg.band_lo,
            hi: cfg.band_hi,
        },
    )?;
    if let Some(f0) = cfg.notch_hz {
        r = fir_filter(&r, FilterKind::Notch { f0 })?;
    }
    r = average_rereference(&r)?;
    downsample(&r, cfg.target_fs)
}
