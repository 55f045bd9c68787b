//! Sampled traces and the `EMT1` binary container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "EMT1" | u32 version = 1 | f64 sample_rate_hz | u64 n | f32 × n
//! optional: "ANNO" | u64 byte_len | UTF-8 JSON event tree
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::emulator::EventNode;

const MAGIC: &[u8; 4] = b"EMT1";
const ANNO: &[u8; 4] = b"ANNO";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("not an EMT1 file (bad magic)")]
    BadMagic,
    #[error("unsupported EMT1 version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated EMT1 file: {0}")]
    Truncated(&'static str),
    #[error("trailing chunk is not ANNO")]
    BadChunk,
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("invalid sample rate {0}")]
    BadSampleRate(f64),
    #[error("annotation JSON: {0}")]
    Annotation(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub sample_rate: f64,
    pub samples: Vec<f32>,
    /// Ground-truth event tree, only present on synthesized fixtures.
    pub annotation: Option<EventNode>,
}

impl Trace {
    pub fn new(sample_rate: f64, samples: Vec<f32>) -> Result<Self, TraceError> {
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(TraceError::BadSampleRate(sample_rate));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(TraceError::NonFinite(i));
        }
        Ok(Self { sample_rate, samples, annotation: None })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples per microsecond.
    pub fn samples_per_us(&self) -> f64 {
        self.sample_rate * 1e-6
    }

    pub fn to_us(&self, samples: f64) -> f64 {
        samples / self.samples_per_us()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), TraceError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.sample_rate.to_le_bytes())?;
        w.write_all(&(self.samples.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.samples.len() * 4);
        for s in &self.samples {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        w.write_all(&buf)?;
        if let Some(tree) = &self.annotation {
            let json = serde_json::to_vec(tree)?;
            w.write_all(ANNO)?;
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, TraceError> {
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        Self::from_bytes(&data)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, TraceError> {
        let mut cur = Cursor { data, pos: 0 };
        if cur.take(4, "magic")? != MAGIC {
            return Err(TraceError::BadMagic);
        }
        let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(TraceError::UnsupportedVersion(version));
        }
        let sample_rate = f64::from_le_bytes(cur.take(8, "sample rate")?.try_into().unwrap());
        let n = u64::from_le_bytes(cur.take(8, "sample count")?.try_into().unwrap());
        let byte_len =
            usize::try_from(n).ok().and_then(|n| n.checked_mul(4)).ok_or(TraceError::Truncated("samples"))?;
        let raw = cur.take(byte_len, "samples")?;
        let samples = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let mut trace = Trace::new(sample_rate, samples)?;

        if cur.remaining() > 0 {
            if cur.take(4, "chunk magic")? != ANNO {
                return Err(TraceError::BadChunk);
            }
            let len = u64::from_le_bytes(cur.take(8, "annotation length")?.try_into().unwrap());
            let json =
                cur.take(usize::try_from(len).map_err(|_| TraceError::Truncated("annotation"))?, "annotation")?;
            trace.annotation = Some(serde_json::from_slice(json)?);
        }
        Ok(trace)
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], TraceError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or(TraceError::Truncated(what))?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }
}
