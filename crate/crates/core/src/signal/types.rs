use serde::{Deserialize, Serialize};

use crate::error::{LblmError, Result};

pub const NUM_WORDS: usize = 24;
pub const NUM_GROUPS: usize = 6;

/// Vocabulary ordered so that word `w` belongs to group `w / 4`.
pub const WORDS: [&str; NUM_WORDS] = [
    "jumping", "running", "swimming", "going", //
    "happy", "sad", "fun", "horrible", //
    "college", "home", "battlefield", "here", //
    "mother", "cowboy", "professor", "me", //
    "one", "three", "eleven", "million", //
    "spoon", "alfa", "python", "telephone",
];

pub const GROUPS: [&str; NUM_GROUPS] = ["motion", "emotion", "location", "people", "number", "object"];

/// Semantic group of a word label.
pub fn group(word: u8) -> u8 {
    word / 4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Rest,
    Read,
    Silent,
}

impl Condition {
    pub fn code(self) -> u8 {
        match self {
            Condition::Rest => 0,
            Condition::Read => 1,
            Condition::Silent => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Condition::Rest),
            1 => Some(Condition::Read),
            2 => Some(Condition::Silent),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rest" => Ok(Condition::Rest),
            "read" => Ok(Condition::Read),
            "silent" => Ok(Condition::Silent),
            other => Err(LblmError::config(format!("unknown condition `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialMark {
    pub start: usize,
    pub word: u8,
    pub semantic: u8,
    pub condition: Condition,
}

impl TrialMark {
    pub fn new(start: usize, word: u8, condition: Condition) -> Self {
        TrialMark {
            start,
            word,
            semantic: group(word),
            condition,
        }
    }
}

/// Continuous multi-channel recording of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct EegRecording {
    /// `channels x timesteps`.
    pub data: Vec<Vec<f32>>,
    pub fs: f32,
    pub subject_id: u16,
    pub session_id: u16,
    pub trial_marks: Vec<TrialMark>,
}

impl EegRecording {
    pub fn channels(&self) -> usize {
        self.data.len()
    }

    pub fn len(&self) -> usize {
        self.data.first().map_or(0, |c| c.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if self.data.iter().any(|c| c.len() != t) {
            return Err(LblmError::shape("channels have unequal lengths"));
        }
        if !(self.fs > 0.0) {
            return Err(LblmError::config("sampling rate must be positive"));
        }
        for m in &self.trial_marks {
            if m.start >= t {
                return Err(LblmError::config(format!("trial mark {} outside [0, {t})", m.start)));
            }
            if m.word as usize >= NUM_WORDS || m.semantic as usize >= NUM_GROUPS {
                return Err(LblmError::Label {
                    label: m.word as usize,
                    classes: NUM_WORDS,
                });
            }
            if m.semantic != group(m.word) {
                return Err(LblmError::config(format!(
                    "semantic label {} does not match group of word {}",
                    m.semantic, m.word
                )));
            }
        }
        Ok(())
    }

    /// Channel data widened to `f64`.
    pub fn to_f64(&self) -> Vec<Vec<f64>> {
        self.data
            .iter()
            .map(|c| c.iter().map(|v| *v as f64).collect())
            .collect()
    }

    pub fn with_data(&self, data: Vec<Vec<f64>>) -> EegRecording {
        EegRecording {
            data: data
                .into_iter()
                .map(|c| c.into_iter().map(|v| v as f32).collect())
                .collect(),
            fs: self.fs,
            subject_id: self.subject_id,
            session_id: self.session_id,
            trial_marks: self.trial_marks.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandTag {
    Raw,
    Alpha,
    Beta,
    Gamma,
}

impl BandTag {
    pub const ALL: [BandTag; 4] = [BandTag::Raw, BandTag::Alpha, BandTag::Beta, BandTag::Gamma];

    /// Pass band in Hz.
    pub fn range(self) -> (f64, f64) {
        match self {
            BandTag::Raw => (1.0, 50.0),
            BandTag::Alpha => (8.0, 13.0),
            BandTag::Beta => (13.0, 30.0),
            BandTag::Gamma => (30.0, 50.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSegment {
    /// `channels x L`.
    pub data: Vec<Vec<f64>>,
    pub fs: f64,
    pub word: u8,
    pub semantic: u8,
    pub subject_id: u16,
    pub session_id: u16,
    pub band: BandTag,
    pub condition: Option<Condition>,
}

impl TrialSegment {
    pub fn channels(&self) -> usize {
        self.data.len()
    }

    pub fn len(&self) -> usize {
        self.data.first().map_or(0, |c| c.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_mapping_is_six_by_four() {
        for g in 0..NUM_GROUPS as u8 {
            let members: Vec<u8> = (0..NUM_WORDS as u8).filter(|w| group(*w) == g).collect();
            assert_eq!(members.len(), 4);
        }
        assert_eq!(WORDS[group(13) as usize * 4 + 1], "cowboy");
        assert_eq!(GROUPS[group(13) as usize], "people");
        assert_eq!(GROUPS[group(23) as usize], "object");
    }

    #[test]
    fn validate_rejects_mismatched_semantic() {
        let mut rec = EegRecording {
            data: vec![vec![0.0; 10]; 2],
            fs: 250.0,
            subject_id: 0,
            session_id: 0,
            trial_marks: vec![TrialMark::new(3, 5, Condition::Silent)],
        };
        rec.validate().unwrap();
        rec.trial_marks[0].semantic = 3;
        assert!(rec.validate().is_err());
        rec.trial_marks[0] = TrialMark::new(10, 5, Condition::Silent);
        assert!(rec.validate().is_err());
    }
}
