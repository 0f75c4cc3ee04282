//! The `.evms` event-sample file format.
//!
//! Little-endian layout: magic `EVMS`, version u16 = 1, width u16, height
//! u16, class_id u8, eye u8 (0 = left, 1 = right), reserved u16,
//! peak_amplitude_millideg u32, duration_ns u64, event_count u64; then
//! `event_count` records of { t_ns u32, x u16, y u16, polarity u8
//! (0 = negative, 1 = positive), pad u8 }.

use std::path::Path;

use super::{Eye, LabeledSample};
use crate::dvs::{Event, EventStream, Polarity};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EVMS";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 34;
const RECORD_LEN: usize = 10;

/// Encode a sample into `.evms` bytes.
///
/// Only stream data and per-sample physical metadata are persisted;
/// generation bookkeeping (`raw_event_count`, `seed`) lives in the manifest.
pub fn encode_stream(sample: &LabeledSample) -> Result<Vec<u8>> {
    let s = &sample.stream;
    let mut buf = Vec::with_capacity(HEADER_LEN + s.len() * RECORD_LEN);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&s.width.to_le_bytes());
    buf.extend_from_slice(&s.height.to_le_bytes());
    buf.push(sample.class_id);
    buf.push(sample.eye as u8);
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&sample.peak_amplitude_millideg.to_le_bytes());
    buf.extend_from_slice(&sample.duration_ns.to_le_bytes());
    buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
    for e in &s.events {
        let t: u32 = e
            .t_ns
            .try_into()
            .map_err(|_| Error::domain(format!("event at {} ns exceeds u32 range", e.t_ns)))?;
        buf.extend_from_slice(&t.to_le_bytes());
        buf.extend_from_slice(&e.x.to_le_bytes());
        buf.extend_from_slice(&e.y.to_le_bytes());
        buf.push(e.polarity as u8);
        buf.push(0);
    }
    Ok(buf)
}

/// Write a sample to `path`, creating parent directories.
pub fn write_stream(sample: &LabeledSample, path: &Path) -> Result<()> {
    let bytes = encode_stream(sample)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Decode `.evms` bytes; errors carry the byte offset of the defect.
pub fn decode_stream(bytes: &[u8]) -> Result<LabeledSample> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            "file shorter than the fixed header",
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(0, "bad magic (expected EVMS)"));
    }
    let u16_at = |off: usize| u16::from_le_bytes(bytes[off..off + 2].try_into().expect("2 bytes"));
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
    let u64_at = |off: usize| u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));

    let version = u16_at(4);
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let width = u16_at(6);
    let height = u16_at(8);
    if width == 0 || height == 0 {
        return Err(Error::format(6, "zero sensor dimension"));
    }
    let class_id = bytes[10];
    if class_id as usize >= crate::scene::CLASS_COUNT {
        return Err(Error::format(10, format!("class id {class_id} out of range")));
    }
    let eye = match bytes[11] {
        0 => Eye::Left,
        1 => Eye::Right,
        other => return Err(Error::format(11, format!("bad eye byte {other}"))),
    };
    let peak_amplitude_millideg = u32_at(14);
    let duration_ns = u64_at(18);
    let event_count = u64_at(26) as usize;

    let expected = HEADER_LEN + event_count * RECORD_LEN;
    if bytes.len() != expected {
        return Err(Error::format(
            bytes.len().min(expected) as u64,
            format!("file size {} != header-implied {expected}", bytes.len()),
        ));
    }

    let mut events = Vec::with_capacity(event_count);
    for i in 0..event_count {
        let off = HEADER_LEN + i * RECORD_LEN;
        let t_ns = u64::from(u32_at(off));
        let x = u16_at(off + 4);
        let y = u16_at(off + 6);
        if x >= width {
            return Err(Error::format(
                (off + 4) as u64,
                format!("event x = {x} outside width {width}"),
            ));
        }
        if y >= height {
            return Err(Error::format(
                (off + 6) as u64,
                format!("event y = {y} outside height {height}"),
            ));
        }
        let polarity = Polarity::from_byte(bytes[off + 8]).ok_or_else(|| {
            Error::format((off + 8) as u64, format!("bad polarity byte {}", bytes[off + 8]))
        })?;
        events.push(Event { t_ns, x, y, polarity });
    }

    Ok(LabeledSample {
        stream: EventStream {
            width,
            height,
            events,
        },
        class_id,
        eye,
        peak_amplitude_millideg,
        duration_ns,
        raw_event_count: event_count as u64,
        resampled_event_count: event_count as u64,
        seed: 0,
    })
}

/// Read a sample from disk. `raw_event_count` and `seed` are not persisted in
/// the file; the returned sample carries the stored count and a zero seed,
/// and the dataset manifest remains authoritative for generation metadata.
pub fn read_stream(path: &Path) -> Result<LabeledSample> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_stream(&bytes)
}
