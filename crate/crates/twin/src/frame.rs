//! Frames and the length-delimited record format.
//!
//! A record file is a sequence of `u32` little-endian byte lengths, each followed by
//! one JSON-encoded [`Frame`]:
//!
//! ```json
//! {"timestamp": 12.5,
//!  "vehicles": [{"raw_id": 37, "lane": 1,
//!                "features": {"vx": 27.1, "vy": 0.0, "psi": 0.0, "x": 412.3,
//!                             "y": 5.25, "n_left": 1.0, "n_right": 1.0}}]}
//! ```
//!
//! `timestamp` is seconds since the start of the stream, `x` is metres along the
//! segment, `y` metres from the right road edge (left is positive), `lane` counts from
//! the rightmost lane (0).

use std::collections::HashSet;
use std::io::{ErrorKind, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use xlane_core::VehicleFeatures;

use crate::error::{Result, TwinError};

pub type RawId = u32;
pub const RAW_ID_MAX: RawId = 10_000;
/// Upper bound on a single record, to reject garbage lengths early.
pub const MAX_RECORD_BYTES: u32 = 16 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameVehicle {
    pub raw_id: RawId,
    pub lane: u32,
    pub features: VehicleFeatures,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Frame {
    pub timestamp: f64,
    pub vehicles: Vec<FrameVehicle>,
}

impl Frame {
    pub fn vehicle(&self, raw_id: RawId) -> Option<&FrameVehicle> {
        self.vehicles.iter().find(|v| v.raw_id == raw_id)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.timestamp.is_finite() {
            return Err(TwinError::Format("non-finite timestamp".into()));
        }
        let mut seen = HashSet::with_capacity(self.vehicles.len());
        for v in &self.vehicles {
            if !(1..=RAW_ID_MAX).contains(&v.raw_id) {
                return Err(TwinError::Format(format!("raw id {} out of range", v.raw_id)));
            }
            if !seen.insert(v.raw_id) {
                return Err(TwinError::Format(format!("duplicate raw id {}", v.raw_id)));
            }
            v.features.validate()?;
        }
        Ok(())
    }
}

pub struct FrameWriter<W> {
    inner: W,
}

impl<W: Write> FrameWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn write(&mut self, frame: &Frame) -> Result<()> {
        let bytes = serde_json::to_vec(frame)?;
        self.inner.write_u32::<LittleEndian>(bytes.len() as u32)?;
        self.inner.write_all(&bytes)?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

/// Iterator over records; errors carry the byte offset of the failing record.
pub struct FrameReader<R> {
    inner: R,
    offset: u64,
    failed: bool,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            offset: 0,
            failed: false,
        }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    fn read_one(&mut self) -> Result<Option<Frame>> {
        let start = self.offset;
        let parse = |message: String| TwinError::Parse {
            offset: start,
            message,
        };
        let len = match self.inner.read_u32::<LittleEndian>() {
            Ok(n) => n,
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        if len > MAX_RECORD_BYTES {
            return Err(parse(format!("record length {len} exceeds limit")));
        }
        let mut buf = vec![0u8; len as usize];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| parse(format!("truncated record: {e}")))?;
        let frame: Frame = serde_json::from_slice(&buf).map_err(|e| parse(e.to_string()))?;
        frame.validate().map_err(|e| parse(e.to_string()))?;
        self.offset += 4 + len as u64;
        Ok(Some(frame))
    }
}

impl<R: Read> Iterator for FrameReader<R> {
    type Item = Result<Frame>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.read_one() {
            Ok(f) => f.map(Ok),
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

pub fn write_frames(path: impl AsRef<std::path::Path>, frames: &[Frame]) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut w = FrameWriter::new(file);
    for f in frames {
        w.write(f)?;
    }
    w.into_inner().flush()?;
    Ok(())
}

pub fn read_frames(path: impl AsRef<std::path::Path>) -> Result<Vec<Frame>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    FrameReader::new(file).collect()
}
