//! Event records, the `EVS1` event file format, and voxelization into event frames.
//!
//! `EVS1` layout (little-endian): magic `EVS1`, `u16` width, `u16` height, `u64` count,
//! then `count` records of `(u16 x, u16 y, u64 t_us, i8 polarity)`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"EVS1";
const HEADER_LEN: usize = 16;
const RECORD_LEN: usize = 13;

/// A single brightness-change event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// Timestamp in microseconds.
    pub t: u64,
    /// +1 or -1.
    pub p: i8,
}

/// Time-sorted events on a `width × height` sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    width: u16,
    height: u16,
    events: Vec<Event>,
}

impl EventStream {
    /// Validates coordinates and polarity, then sorts stably by timestamp.
    pub fn new(width: u16, height: u16, mut events: Vec<Event>) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            if e.x >= width || e.y >= height {
                return Err(Error::data(format!(
                    "event {i} at ({}, {}) outside {width}x{height}",
                    e.x, e.y
                )));
            }
            if e.p != 1 && e.p != -1 {
                return Err(Error::data(format!("event {i} has polarity {}", e.p)));
            }
        }
        events.sort_by_key(|e| e.t);
        Ok(EventStream { width, height, events })
    }

    pub fn width(&self) -> usize {
        self.width as usize
    }

    pub fn height(&self) -> usize {
        self.height as usize
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * self.events.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&(self.events.len() as u64).to_le_bytes());
        for e in &self.events {
            out.extend_from_slice(&e.x.to_le_bytes());
            out.extend_from_slice(&e.y.to_le_bytes());
            out.extend_from_slice(&e.t.to_le_bytes());
            out.push(e.p as u8);
        }
        out
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_event_file(&bytes)
    }
}

/// Parses an `EVS1` buffer. Errors carry the byte offset of the offending field.
pub fn parse_event_file(bytes: &[u8]) -> Result<EventStream> {
    let err = |offset: usize, msg: String| Error::Parse { offset, msg };
    if bytes.len() < HEADER_LEN {
        return Err(err(0, format!("header needs {HEADER_LEN} bytes, got {}", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(err(0, "missing EVS1 magic".into()));
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]);
    let height = u16::from_le_bytes([bytes[6], bytes[7]]);
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());

    let available = (bytes.len() - HEADER_LEN) / RECORD_LEN;
    if (available as u64) < count {
        let offset = HEADER_LEN + available * RECORD_LEN;
        return Err(err(offset, format!("truncated record {available} of {count}")));
    }
    let count = count as usize;
    let end = HEADER_LEN + count * RECORD_LEN;
    if bytes.len() != end {
        return Err(err(end, "trailing bytes after last record".into()));
    }

    let mut events = Vec::with_capacity(count);
    for (i, rec) in bytes[HEADER_LEN..end].chunks_exact(RECORD_LEN).enumerate() {
        let offset = HEADER_LEN + i * RECORD_LEN;
        let x = u16::from_le_bytes([rec[0], rec[1]]);
        let y = u16::from_le_bytes([rec[2], rec[3]]);
        let t = u64::from_le_bytes(rec[4..12].try_into().unwrap());
        let p = rec[12] as i8;
        if x >= width {
            return Err(err(offset, format!("x = {x} not below width {width}")));
        }
        if y >= height {
            return Err(err(offset + 2, format!("y = {y} not below height {height}")));
        }
        if p != 1 && p != -1 {
            return Err(err(offset + 12, format!("invalid polarity {p}")));
        }
        events.push(Event { x, y, t, p });
    }
    events.sort_by_key(|e| e.t);
    Ok(EventStream { width, height, events })
}

/// Dense `F × 3 × H × W` event frames.
///
/// Channel 0 holds positive-event counts and channel 1 negative-event counts, both
/// divided by the frame's largest count. Channel 2 holds the normalized timestamp of the
/// latest event at each pixel within the frame window, 0 where the pixel saw no event.
#[derive(Debug, Clone)]
pub struct EventFrameTensor<T> {
    pub data: Tensor<T>,
    /// `(t_start, t_end)` of each frame window in microseconds.
    pub windows: Vec<(f64, f64)>,
}

impl<T: Scalar> EventFrameTensor<T> {
    pub fn frames(&self) -> usize {
        self.data.dims()[0]
    }
}

/// Splits the observed time span into `frames` equal windows and returns each event's
/// window index. Windows are half-open except the last, which is closed at `t_max`.
pub fn window_assignment(stream: &EventStream, frames: usize) -> Vec<usize> {
    let (Some(first), Some(last)) = (stream.events.first(), stream.events.last()) else {
        return Vec::new();
    };
    let (t_min, span) = (first.t, last.t - first.t);
    stream
        .events
        .iter()
        .map(|e| window_index(e.t - t_min, span, frames))
        .collect()
}

#[inline]
fn window_index(dt: u64, span: u64, frames: usize) -> usize {
    if span == 0 {
        return frames - 1;
    }
    let f = (dt as u128 * frames as u128) / span as u128;
    (f as usize).min(frames - 1)
}

fn check_extents(stream: &EventStream, frames: usize, height: usize, width: usize) -> Result<()> {
    if frames == 0 {
        return Err(Error::config("voxelize needs at least one frame"));
    }
    if stream.height() != height || stream.width() != width {
        return Err(Error::config(format!(
            "stream is {}x{}, expected {height}x{width}",
            stream.height(),
            stream.width()
        )));
    }
    Ok(())
}

/// Raw per-frame polarity counts, `F × 2 × H × W`, before normalization.
pub fn voxel_counts(stream: &EventStream, frames: usize, height: usize, width: usize) -> Result<Tensor<f64>> {
    check_extents(stream, frames, height, width)?;
    let mut counts = Tensor::zeros(&[frames, 2, height, width]);
    let plane = height * width;
    let assignment = window_assignment(stream, frames);
    let d = counts.data_mut();
    for (e, &f) in stream.events.iter().zip(&assignment) {
        let ch = if e.p > 0 { 0 } else { 1 };
        d[(f * 2 + ch) * plane + e.y as usize * width + e.x as usize] += 1.0;
    }
    Ok(counts)
}

pub fn voxelize<T: Scalar>(
    stream: &EventStream,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<EventFrameTensor<T>> {
    let counts = voxel_counts(stream, frames, height, width)?;
    let plane = height * width;
    let mut data = Tensor::<T>::zeros(&[frames, 3, height, width]);

    let (t_min, span) = match (stream.events.first(), stream.events.last()) {
        (Some(a), Some(b)) => (a.t, b.t - a.t),
        _ => (0, 0),
    };
    let windows = (0..frames)
        .map(|f| {
            if stream.is_empty() {
                return (0.0, 0.0);
            }
            let start = t_min as f64 + span as f64 * f as f64 / frames as f64;
            let end = t_min as f64 + span as f64 * (f + 1) as f64 / frames as f64;
            (start, end)
        })
        .collect();

    let out = data.data_mut();
    for f in 0..frames {
        let c = &counts.data()[f * 2 * plane..(f + 1) * 2 * plane];
        let max = c.iter().fold(0.0f64, |m, &v| m.max(v)).max(1.0);
        let dst = &mut out[f * 3 * plane..f * 3 * plane + 2 * plane];
        for (o, &v) in dst.iter_mut().zip(c) {
            *o = T::c(v / max);
        }
    }

    // Events are time-sorted, so the last write per pixel is the latest event.
    for e in &stream.events {
        let dt = e.t - t_min;
        let f = window_index(dt, span, frames);
        let surface = if span == 0 {
            1.0
        } else {
            (dt as u128 * frames as u128 - f as u128 * span as u128) as f64 / span as f64
        };
        out[(f * 3 + 2) * plane + e.y as usize * width + e.x as usize] = T::c(surface);
    }

    Ok(EventFrameTensor { data, windows })
}
