//! Paced frame streams from the simulator or a record file.

use std::io::Read;
use std::ops::ControlFlow;
use std::time::{Duration, Instant};

use crate::error::Result;
use crate::frame::{Frame, FrameReader};
use crate::sim::Simulator;

/// Anything that yields frames in timestamp order.
pub trait FrameSource: Send {
    /// `Ok(None)` at end of stream.
    fn next_frame(&mut self) -> Result<Option<Frame>>;
}

impl FrameSource for Simulator {
    fn next_frame(&mut self) -> Result<Option<Frame>> {
        Ok(Some(Simulator::next_frame(self)))
    }
}

pub struct RecordSource<R> {
    reader: FrameReader<R>,
}

impl<R: Read + Send> RecordSource<R> {
    pub fn new(inner: R) -> Self {
        Self {
            reader: FrameReader::new(inner),
        }
    }
}

impl RecordSource<std::io::BufReader<std::fs::File>> {
    pub fn open(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(Self::new(std::io::BufReader::new(std::fs::File::open(path)?)))
    }
}

impl<R: Read + Send> FrameSource for RecordSource<R> {
    fn next_frame(&mut self) -> Result<Option<Frame>> {
        self.reader.next().transpose()
    }
}

impl FrameSource for std::vec::IntoIter<Frame> {
    fn next_frame(&mut self) -> Result<Option<Frame>> {
        Ok(self.next())
    }
}

/// Emit frames so that stream time advances `rate` times faster than wall time.
/// `rate = f64::INFINITY` disables pacing. Returns the number of frames emitted.
pub fn stream_replay<S: FrameSource + ?Sized>(
    source: &mut S,
    rate: f64,
    mut emit: impl FnMut(Frame) -> ControlFlow<()>,
) -> Result<usize> {
    assert!(rate > 0.0, "replay rate must be positive");
    let start = Instant::now();
    let mut first_ts = None;
    let mut count = 0;
    while let Some(frame) = source.next_frame()? {
        let t0 = *first_ts.get_or_insert(frame.timestamp);
        if rate.is_finite() {
            let due = start + Duration::from_secs_f64(((frame.timestamp - t0) / rate).max(0.0));
            let now = Instant::now();
            if due > now {
                std::thread::sleep(due - now);
            }
        }
        count += 1;
        if emit(frame).is_break() {
            break;
        }
    }
    Ok(count)
}

/// Record `n` frames from the simulator.
pub fn record(sim: &mut Simulator, n: usize) -> Vec<Frame> {
    (0..n).map(|_| sim.next_frame()).collect()
}
