//! Synthetic multi-session recordings with planted class signatures.
//!
//! Each trial carries oscillatory bursts (Gaussian envelope) on a channel
//! subset, chosen by its word label. Background is pink noise with a shared
//! component plus optional line interference. Every session draws its own
//! per-channel gain and per-component phase/frequency offsets.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::types::{group, Condition, EegRecording, TrialMark, NUM_GROUPS, NUM_WORDS};
use crate::error::{LblmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub freq: f64,
    pub channels: Vec<usize>,
    /// Burst center, seconds after the trial start.
    pub center_s: f64,
    /// Gaussian envelope standard deviation, seconds.
    pub width_s: f64,
    /// Peak amplitude in units of `noise_level`.
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WordSignature {
    pub word: u8,
    pub components: Vec<Component>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub subjects: usize,
    pub sessions: usize,
    pub trials_per_session: usize,
    pub channels: usize,
    pub fs: f64,
    pub trial_s: f64,
    /// Pause between consecutive trials and before the first one.
    pub gap_s: f64,
    /// Conditions assigned to trials in rotation.
    pub conditions: Vec<Condition>,
    /// Signature gain during `read` trials; `rest` trials carry none.
    pub read_gain: f64,
    pub noise_level: f64,
    /// Multiplies every signature amplitude.
    pub snr: f64,
    /// Spread of session gain, phase and frequency offsets.
    pub drift: f64,
    /// Fraction of noise power shared by all channels.
    pub common_noise: f64,
    pub line_noise: f64,
    pub line_freq: f64,
    pub signatures: Vec<WordSignature>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            subjects: 2,
            sessions: 4,
            trials_per_session: 48,
            channels: 8,
            fs: 500.0,
            trial_s: 2.0,
            gap_s: 1.0,
            conditions: vec![Condition::Silent],
            read_gain: 0.5,
            noise_level: 10.0,
            snr: 1.0,
            drift: 0.15,
            common_noise: 0.3,
            line_noise: 0.5,
            line_freq: 50.0,
            signatures: default_signatures(8),
        }
    }
}

/// Group carrier frequencies: two alpha, two beta, two gamma.
pub const GROUP_FREQS: [f64; NUM_GROUPS] = [10.0, 20.0, 36.0, 12.0, 25.0, 44.0];

/// One strong group-level burst on two channels plus a weaker word-level
/// burst whose frequency and timing depend on the position within the group.
pub fn default_signatures(channels: usize) -> Vec<WordSignature> {
    (0..NUM_WORDS as u8)
        .map(|w| {
            let g = group(w) as usize;
            let k = (w % 4) as f64;
            let chans = vec![g % channels, (g + 2) % channels];
            let word_chans = vec![(g + 1) % channels];
            WordSignature {
                word: w,
                components: vec![
                    Component {
                        freq: GROUP_FREQS[g],
                        channels: chans,
                        center_s: 0.8,
                        width_s: 0.3,
                        amplitude: 0.8,
                    },
                    Component {
                        freq: GROUP_FREQS[g] + 1.5 * k - 2.0,
                        channels: word_chans,
                        center_s: 0.5 + 0.25 * k,
                        width_s: 0.15,
                        amplitude: 0.4,
                    },
                ],
            }
        })
        .collect()
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.signatures.is_empty() {
            return Err(LblmError::config("class-signature table is empty"));
        }
        if self.subjects == 0 || self.sessions == 0 || self.channels == 0 {
            return Err(LblmError::config("subjects, sessions and channels must be positive"));
        }
        if !(self.fs > 0.0 && self.trial_s > 0.0 && self.gap_s >= 0.0) {
            return Err(LblmError::config("fs and trial_s must be positive, gap_s non-negative"));
        }
        if self.conditions.is_empty() {
            return Err(LblmError::config("condition rotation is empty"));
        }
        if !(self.noise_level >= 0.0 && self.snr >= 0.0 && self.drift >= 0.0) {
            return Err(LblmError::config("noise_level, snr and drift must be non-negative"));
        }
        for sig in &self.signatures {
            if sig.word as usize >= NUM_WORDS {
                return Err(LblmError::Label {
                    label: sig.word as usize,
                    classes: NUM_WORDS,
                });
            }
            for c in &sig.components {
                if let Some(ch) = c.channels.iter().find(|ch| **ch >= self.channels) {
                    return Err(LblmError::config(format!(
                        "signature of word {} uses channel {ch} of {}",
                        sig.word, self.channels
                    )));
                }
                if !(c.freq > 0.0 && c.freq < self.fs / 2.0 && c.width_s > 0.0) {
                    return Err(LblmError::config(format!(
                        "signature of word {} has invalid frequency or width",
                        sig.word
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn trial_len(&self) -> usize {
        (self.trial_s * self.fs).round() as usize
    }

    pub fn gap_len(&self) -> usize {
        (self.gap_s * self.fs).round() as usize
    }

    pub fn session_len(&self) -> usize {
        self.gap_len() + self.trials_per_session * (self.trial_len() + self.gap_len())
    }

    fn signature(&self, word: u8) -> Option<&WordSignature> {
        self.signatures.iter().find(|s| s.word == word)
    }

    /// Words that have a signature, in label order.
    pub fn words(&self) -> Vec<u8> {
        let mut w: Vec<u8> = self.signatures.iter().map(|s| s.word).collect();
        w.sort_unstable();
        w.dedup();
        w
    }
}

/// Unit-variance 1/f noise of length `n`, shaped in the frequency domain.
pub fn pink_noise(rng: &mut ChaCha8Rng, planner: &mut FftPlanner<f64>, n: usize) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(normal.sample(rng), 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    buf[0] = Complex::new(0.0, 0.0);
    for k in 1..n {
        let f = k.min(n - k) as f64;
        buf[k] /= f.sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let x: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let mean = x.iter().sum::<f64>() / n as f64;
    let sd = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    x.iter().map(|v| (v - mean) / sd).collect()
}

struct SessionDrift {
    gain: Vec<f64>,
    /// Indexed by word, then component.
    phase: Vec<Vec<f64>>,
    freq_scale: f64,
}

fn session_drift(spec: &GeneratorSpec, subject_gain: &[f64], rng: &mut ChaCha8Rng) -> SessionDrift {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let gain = subject_gain
        .iter()
        .map(|g| (g * (1.0 + spec.drift * normal.sample(rng))).max(0.2))
        .collect();
    let phase = (0..NUM_WORDS as u8)
        .map(|w| {
            let n = spec.signature(w).map_or(0, |s| s.components.len());
            (0..n).map(|_| rng.gen_range(-PI..PI) * spec.drift.min(1.0)).collect()
        })
        .collect();
    let freq_scale = 1.0 + 0.05 * spec.drift * normal.sample(rng);
    SessionDrift {
        gain,
        phase,
        freq_scale,
    }
}

/// Balanced, shuffled word order over the signature vocabulary.
fn word_order(words: &[u8], n: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let mut block = words.to_vec();
        block.shuffle(rng);
        order.extend(block);
    }
    order.truncate(n);
    order.shuffle(rng);
    order
}

/// Generates `subjects x sessions` recordings, ordered by subject then session.
pub fn synth_dataset(spec: &GeneratorSpec, seed: u64) -> Result<Vec<EegRecording>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planner = FftPlanner::new();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let words = spec.words();
    let (trial_len, gap_len, total) = (spec.trial_len(), spec.gap_len(), spec.session_len());
    let mut out = Vec::with_capacity(spec.subjects * spec.sessions);
    for subject in 0..spec.subjects {
        let subject_gain: Vec<f64> = (0..spec.channels)
            .map(|_| (1.0 + 0.5 * spec.drift * normal.sample(&mut rng)).max(0.2))
            .collect();
        for session in 0..spec.sessions {
            let drift = session_drift(spec, &subject_gain, &mut rng);
            let common = pink_noise(&mut rng, &mut planner, total);
            let a = spec.common_noise.clamp(0.0, 1.0);
            let mut data: Vec<Vec<f64>> = (0..spec.channels)
                .map(|_| {
                    let own = pink_noise(&mut rng, &mut planner, total);
                    own.iter()
                        .zip(&common)
                        .map(|(o, c)| spec.noise_level * ((1.0 - a).sqrt() * o + a.sqrt() * c))
                        .collect()
                })
                .collect();
            let line_phase = rng.gen_range(0.0..2.0 * PI);
            let order = word_order(&words, spec.trials_per_session, &mut rng);
            let mut marks = Vec::with_capacity(order.len());
            for (i, &word) in order.iter().enumerate() {
                let start = gap_len + i * (trial_len + gap_len);
                let cond = spec.conditions[i % spec.conditions.len()];
                marks.push(TrialMark::new(start, word, cond));
                let gain = match cond {
                    Condition::Rest => continue,
                    Condition::Read => spec.read_gain,
                    Condition::Silent => 1.0,
                };
                let sig = spec.signature(word).expect("word drawn from signature table");
                for (ci, comp) in sig.components.iter().enumerate() {
                    let amp = gain * spec.snr * comp.amplitude * spec.noise_level;
                    let freq = comp.freq * drift.freq_scale;
                    let phase = drift.phase[word as usize][ci] + rng.gen_range(-0.3..0.3);
                    let jitter = 0.05 * normal.sample(&mut rng);
                    for t in 0..trial_len {
                        let ts = t as f64 / spec.fs;
                        let z = (ts - comp.center_s - jitter) / comp.width_s;
                        let v = amp * (-0.5 * z * z).exp() * (2.0 * PI * freq * ts + phase).sin();
                        for &ch in &comp.channels {
                            data[ch][start + t] += v;
                        }
                    }
                }
            }
            for (ch, row) in data.iter_mut().enumerate() {
                let g = drift.gain[ch];
                for (t, v) in row.iter_mut().enumerate() {
                    let line = spec.line_noise
                        * spec.noise_level
                        * (2.0 * PI * spec.line_freq * t as f64 / spec.fs + line_phase).sin();
                    *v = g * *v + line;
                }
            }
            out.push(EegRecording {
                data: data.into_iter().map(|c| c.into_iter().map(|v| v as f32).collect()).collect(),
                fs: spec.fs as f32,
                subject_id: subject as u16,
                session_id: session as u16,
                trial_marks: marks,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorSpec {
        GeneratorSpec {
            subjects: 2,
            sessions: 3,
            trials_per_session: 10,
            channels: 4,
            fs: 250.0,
            signatures: default_signatures(4),
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = synth_dataset(&small(), 9).unwrap();
        let b = synth_dataset(&small(), 9).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(&small(), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn counts_and_marks() {
        let recs = synth_dataset(&small(), 1).unwrap();
        assert_eq!(recs.len(), 6);
        for r in &recs {
            assert_eq!(r.trial_marks.len(), 10);
            assert_eq!(r.channels(), 4);
            r.validate().unwrap();
            for m in &r.trial_marks {
                assert_eq!(m.semantic, group(m.word));
                assert!(m.start + small().trial_len() <= r.len());
            }
        }
        assert_eq!(recs[4].subject_id, 1);
        assert_eq!(recs[4].session_id, 1);
    }

    #[test]
    fn words_are_balanced() {
        let spec = GeneratorSpec {
            trials_per_session: 48,
            ..small()
        };
        let recs = synth_dataset(&spec, 3).unwrap();
        let mut counts = [0usize; NUM_WORDS];
        for m in &recs[0].trial_marks {
            counts[m.word as usize] += 1;
        }
        assert!(counts.iter().all(|c| *c == 2));
    }

    #[test]
    fn empty_signature_table_is_config_error() {
        let spec = GeneratorSpec {
            signatures: vec![],
            ..small()
        };
        assert!(matches!(synth_dataset(&spec, 0), Err(LblmError::Config(_))));
    }

    #[test]
    fn condition_rotation() {
        let spec = GeneratorSpec {
            conditions: vec![Condition::Rest, Condition::Read, Condition::Silent],
            ..small()
        };
        let recs = synth_dataset(&spec, 2).unwrap();
        let conds: Vec<_> = recs[0].trial_marks.iter().map(|m| m.condition).collect();
        assert_eq!(&conds[..3], &[Condition::Rest, Condition::Read, Condition::Silent]);
    }

    #[test]
    fn pink_noise_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = pink_noise(&mut rng, &mut FftPlanner::new(), 4096);
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }
}
