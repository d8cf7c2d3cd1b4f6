//! Binary dataset container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "LBLD" | version u16 = 1 | record count u32
//! per record:
//!   subject_id u16 | session_id u16 | channels u16 | timesteps u64 | fs f32
//!   trial count u32 | trials: (start u64, word u8, semantic u8, condition u8)*
//!   channels * timesteps f32 samples, row-major by channel
//! ```
//!
//! A JSON sidecar with the same stem and extension `.meta.json` records
//! how the file was made (generator spec, seed, processing chain).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::types::{Condition, EegRecording, TrialMark};
use crate::error::{LblmError, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"LBLD";
pub const DATASET_VERSION: u16 = 1;

pub fn encode_dataset(recordings: &[EegRecording]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(recordings.len() as u32).to_le_bytes());
    for rec in recordings {
        rec.validate()?;
        let c: u16 = rec
            .channels()
            .try_into()
            .map_err(|_| LblmError::config("too many channels for u16"))?;
        buf.extend_from_slice(&rec.subject_id.to_le_bytes());
        buf.extend_from_slice(&rec.session_id.to_le_bytes());
        buf.extend_from_slice(&c.to_le_bytes());
        buf.extend_from_slice(&(rec.len() as u64).to_le_bytes());
        buf.extend_from_slice(&rec.fs.to_le_bytes());
        buf.extend_from_slice(&(rec.trial_marks.len() as u32).to_le_bytes());
        for m in &rec.trial_marks {
            buf.extend_from_slice(&(m.start as u64).to_le_bytes());
            buf.push(m.word);
            buf.push(m.semantic);
            buf.push(m.condition.code());
        }
        for ch in &rec.data {
            for v in ch {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(LblmError::Format {
                offset: self.pos,
                msg: format!("truncated payload reading {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<Vec<EegRecording>> {
    let mut r = Reader { buf, pos: 0 };
    if buf.len() < 4 || &buf[..4] != DATASET_MAGIC {
        return Err(LblmError::Format {
            offset: 0,
            msg: "bad magic, expected \"LBLD\"".into(),
        });
    }
    r.pos = 4;
    let version = r.u16("version")?;
    if version != DATASET_VERSION {
        return Err(LblmError::Format {
            offset: 4,
            msg: format!("unsupported version {version}, expected {DATASET_VERSION}"),
        });
    }
    let count = r.u32("record count")?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let subject_id = r.u16("subject id")?;
        let session_id = r.u16("session id")?;
        let c = r.u16("channel count")? as usize;
        let t = r.u64("timestep count")? as usize;
        let fs = r.f32("sampling rate")?;
        let ntrials = r.u32("trial count")?;
        let mut trial_marks = Vec::with_capacity(ntrials.min(1 << 16) as usize);
        for _ in 0..ntrials {
            let at = r.pos;
            let start = r.u64("trial start")? as usize;
            let word = r.u8("word label")?;
            let semantic = r.u8("semantic label")?;
            let code = r.u8("condition")?;
            let condition = Condition::from_code(code).ok_or_else(|| LblmError::Format {
                offset: at + 10,
                msg: format!("unknown condition code {code}"),
            })?;
            trial_marks.push(TrialMark {
                start,
                word,
                semantic,
                condition,
            });
        }
        let bytes = c
            .checked_mul(t)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| LblmError::Format {
                offset: r.pos,
                msg: "sample count overflows".into(),
            })?;
        let raw = r.take(bytes, "samples")?;
        let data = raw
            .chunks_exact(4 * t.max(1))
            .take(c)
            .map(|ch| {
                ch.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect()
            })
            .collect::<Vec<Vec<f32>>>();
        let data = if t == 0 { vec![Vec::new(); c] } else { data };
        out.push(EegRecording {
            data,
            fs,
            subject_id,
            session_id,
            trial_marks,
        });
    }
    if r.pos != buf.len() {
        return Err(LblmError::Format {
            offset: r.pos,
            msg: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    Ok(out)
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| LblmError::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(LblmError::io(path, e));
    }
    Ok(())
}

pub fn write_dataset(recordings: &[EegRecording], path: &Path) -> Result<()> {
    write_atomic(path, &encode_dataset(recordings)?)
}

pub fn read_dataset(path: &Path) -> Result<Vec<EegRecording>> {
    let buf = fs::read(path).map_err(|e| LblmError::io(path, e))?;
    decode_dataset(&buf)
}

/// `data/foo.lbld` -> `data/foo.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

pub fn write_sidecar(path: &Path, meta: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(meta)?;
    write_atomic(&sidecar_path(path), text.as_bytes())
}

pub fn read_sidecar(path: &Path) -> Result<serde_json::Value> {
    let p = sidecar_path(path);
    let text = fs::read_to_string(&p).map_err(|e| LblmError::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Vec<EegRecording> {
        vec![
            EegRecording {
                data: vec![vec![1.5, -2.25, f32::MIN_POSITIVE], vec![0.0, 3.0e7, -0.1]],
                fs: 250.0,
                subject_id: 3,
                session_id: 7,
                trial_marks: vec![TrialMark::new(1, 17, Condition::Silent), TrialMark::new(2, 0, Condition::Rest)],
            },
            EegRecording {
                data: vec![vec![9.0; 4]; 3],
                fs: 1000.0,
                subject_id: 0,
                session_id: 1,
                trial_marks: vec![],
            },
        ]
    }

    #[test]
    fn roundtrip_exact() {
        let recs = sample();
        let bytes = encode_dataset(&recs).unwrap();
        assert_eq!(&bytes[..4], b"LBLD");
        assert_eq!(decode_dataset(&bytes).unwrap(), recs);
    }

    #[test]
    fn empty_list_is_valid() {
        let bytes = encode_dataset(&[]).unwrap();
        assert_eq!(bytes.len(), 10);
        assert!(decode_dataset(&bytes).unwrap().is_empty());
    }

    #[test]
    fn corrupted_magic_reports_offset_zero() {
        let mut bytes = encode_dataset(&sample()).unwrap();
        bytes[1] = b'X';
        match decode_dataset(&bytes) {
            Err(LblmError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_and_truncation_errors() {
        let mut bytes = encode_dataset(&sample()).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_dataset(&bytes), Err(LblmError::Format { offset: 4, .. })));
        let bytes = encode_dataset(&sample()).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        match decode_dataset(cut) {
            Err(LblmError::Format { offset, msg }) => {
                assert!(msg.contains("truncated"));
                assert!(offset < cut.len());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn file_roundtrip_with_sidecar() {
        let dir = std::env::temp_dir().join(format!("lblm-io-{}", std::process::id()));
        let path = dir.join("set.lbld");
        write_dataset(&sample(), &path).unwrap();
        write_sidecar(&path, &serde_json::json!({"seed": 4})).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), sample());
        assert_eq!(read_sidecar(&path).unwrap()["seed"], 4);
        assert!(dir.join("set.meta.json").exists());
        assert!(!dir.join("set.lbld.tmp").exists());
        std::fs::remove_dir_all(dir).unwrap();
    }

    proptest! {
        #[test]
        fn roundtrip_random(c in 1usize..4, t in 0usize..20, seed in any::<u32>(), fs in 1.0f32..2000.0) {
            let data: Vec<Vec<f32>> = (0..c)
                .map(|i| (0..t).map(|j| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add((i * 31 + j) as u32) & 0x7f7f_ffff)).collect())
                .collect();
            let marks = if t > 0 { vec![TrialMark::new(t - 1, (seed % 24) as u8, Condition::Read)] } else { vec![] };
            let rec = EegRecording { data, fs, subject_id: (seed % 5) as u16, session_id: 2, trial_marks: marks };
            let bytes = encode_dataset(std::slice::from_ref(&rec)).unwrap();
            let back = decode_dataset(&bytes).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(back[0].fs.to_bits(), rec.fs.to_bits());
            for (a, b) in back[0].data.iter().flatten().zip(rec.data.iter().flatten()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
