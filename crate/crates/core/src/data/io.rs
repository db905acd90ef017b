//! Binary trial file, all integers and floats little-endian:
//!
//! ```text
//! magic "SCND" | version u32 | n_trials u64 | n_subjects u32 | n_classes u32
//! | rank u32 | dims u32 × rank
//! then per trial: subject u32 | label u32 | features f64 × prod(dims)
//! ```

use std::path::Path;

use super::{Dataset, Split, Trial};
use crate::error::{Error, Result};
use crate::layers::SubjectId;

pub const MAGIC: &[u8; 4] = b"SCND";
pub const FORMAT_VERSION: u32 = 1;

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Input(format!("{what} {v} does not fit in u32")))
}

pub fn encode(dataset: &Dataset) -> Result<Vec<u8>> {
    dataset.validate()?;
    let width = dataset.feature_len();
    let mut out = Vec::with_capacity(32 + dataset.len() * (8 + 8 * width));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    out.extend_from_slice(&to_u32(dataset.subjects, "subject count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(dataset.classes, "class count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(dataset.shape.len(), "rank")?.to_le_bytes());
    for &d in &dataset.shape {
        out.extend_from_slice(&to_u32(d, "dimension")?.to_le_bytes());
    }
    for t in &dataset.trials {
        out.extend_from_slice(&t.subject.0.to_le_bytes());
        out.extend_from_slice(&to_u32(t.label, "label")?.to_le_bytes());
        for v in &t.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error(format!(
                "truncated: {what} needs {n} bytes, {} remain",
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn error(&self, message: String) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message,
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"SCND\""),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        });
    }
    let n_trials = r.u64("trial count")?;
    let subjects = r.u32("subject count")? as usize;
    let classes = r.u32("class count")? as usize;
    let rank = r.u32("rank")? as usize;
    let mut shape = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        let at = r.pos;
        let d = r.u32("dimension")? as usize;
        if d == 0 {
            return Err(Error::Format {
                offset: at as u64,
                message: "zero-length dimension".into(),
            });
        }
        shape.push(d);
    }
    if shape.is_empty() {
        return Err(r.error("feature shape has rank 0".into()));
    }
    let width: usize = shape.iter().product();
    let record = 8 + 8 * width;
    let remaining = (bytes.len() - r.pos) as u64;
    if n_trials.checked_mul(record as u64) != Some(remaining) {
        return Err(r.error(format!(
            "{n_trials} trials of {record} bytes do not match {remaining} remaining bytes"
        )));
    }
    let mut trials = Vec::with_capacity(n_trials as usize);
    for _ in 0..n_trials {
        let at = r.pos as u64;
        let subject = r.u32("subject")?;
        let label = r.u32("label")? as usize;
        if subject as usize >= subjects || label >= classes {
            return Err(Error::Format {
                offset: at,
                message: format!("subject {subject} or label {label} out of range"),
            });
        }
        let raw = r.take(8 * width, "features")?;
        let features = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        trials.push(Trial {
            subject: SubjectId(subject),
            label,
            features,
        });
    }
    Ok(Dataset {
        shape,
        subjects,
        classes,
        split: Split::Unspecified,
        trials,
    })
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(dataset)?).map_err(|e| Error::io(path, e))
}

/// Reads a trial file. The split is not stored and comes back as
/// [`Split::Unspecified`].
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
