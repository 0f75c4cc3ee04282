//! Event-stream representations for learning: voxel grids, polarity-summed
//! frames, dense optical-flow targets, and the training losses built on them.

mod farneback;

pub use farneback::{farneback, FarnebackParams};

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3, Array4};


use crate::dvs::{EventStream, Polarity};
use crate::error::{Error, Result};

/// Binned event counts, shape `(t_bins, 2, height, width)`; channel 0 holds
/// positive-polarity counts, channel 1 negative.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub counts: Array4<u32>,
}

impl VoxelGrid {
    pub fn t_bins(&self) -> usize {
        self.counts.dim().0
    }

    pub fn height(&self) -> usize {
        self.counts.dim().2
    }

    pub fn width(&self) -> usize {
        self.counts.dim().3
    }

    pub fn total_events(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    /// Mirror horizontally (x -> width-1-x), matching a mirrored sample.
    pub fn mirror_x(&self) -> VoxelGrid {
        let (t, p, h, w) = self.counts.dim();
        VoxelGrid {
            counts: Array4::from_shape_fn((t, p, h, w), |(ti, pi, y, x)| {
                self.counts[[ti, pi, y, w - 1 - x]]
            }),
        }
    }
}

/// Bin `stream` into `t_bins` bins spanning `[0, window_ns]`.
///
/// An event at `t` lands in bin `floor(t * t_bins / window_ns)`, clamped to
/// the last bin at `t == window_ns`; events beyond the window are excluded.
/// Short sequences align at t = 0 with trailing bins left empty.
pub fn bin_events(stream: &EventStream, t_bins: usize, window_ns: u64) -> Result<VoxelGrid> {
    if t_bins == 0 {
        return Err(Error::domain("t_bins must be >= 1"));
    }
    if window_ns == 0 {
        return Err(Error::domain("window must be positive"));
    }
    let (h, w) = (stream.height as usize, stream.width as usize);
    let mut counts = Array4::zeros((t_bins, 2, h, w));
    for e in &stream.events {
        if e.t_ns > window_ns {
            continue;
        }
        let bin = ((e.t_ns as u128 * t_bins as u128) / window_ns as u128).min(t_bins as u128 - 1)
            as usize;
        let ch = match e.polarity {
            Polarity::Pos => 0,
            Polarity::Neg => 1,
        };
        counts[[bin, ch, e.y as usize, e.x as usize]] += 1;
    }
    Ok(VoxelGrid { counts })
}

/// Per-bin signed frames: positive counts minus negative counts.
pub fn polarity_sum(grid: &VoxelGrid) -> Array3<i32> {
    let (t, _, h, w) = grid.counts.dim();
    Array3::from_shape_fn((t, h, w), |(ti, y, x)| {
        grid.counts[[ti, 0, y, x]] as i32 - grid.counts[[ti, 1, y, x]] as i32
    })
}

/// Dense displacement field between two adjacent binned frames, pixels per
/// bin interval.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub u: Array2<f32>,
    pub v: Array2<f32>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            u: Array2::zeros((h, w)),
            v: Array2::zeros((h, w)),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.u.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(self.v.iter()).all(|v| v.is_finite())
    }
}

/// Normalize a signed frame to `[-1, 1]` by its max absolute count.
fn normalize_frame(frame: ndarray::ArrayView2<i32>) -> Array2<f32> {
    let max_abs = frame.iter().map(|v| v.abs()).max().unwrap_or(0);
    if max_abs == 0 {
        Array2::zeros(frame.dim())
    } else {
        frame.map(|&v| v as f32 / max_abs as f32)
    }
}

/// Farneback flow between each adjacent pair of polarity-summed frames,
/// normalized per frame before expansion; returns `t_bins - 1` fields.
pub fn flow_targets(grid: &VoxelGrid, params: &FarnebackParams) -> Result<Vec<FlowField>> {
    let t = grid.t_bins();
    if t < 2 {
        return Err(Error::domain("flow targets need at least 2 bins"));
    }
    let summed = polarity_sum(grid);
    let frames: Vec<Array2<f32>> = (0..t)
        .map(|ti| normalize_frame(summed.index_axis(ndarray::Axis(0), ti)))
        .collect();
    frames
        .windows(2)
        .map(|pair| farneback(&pair[0], &pair[1], params))
        .collect()
}

/// Mean squared endpoint error over one pair of fields:
/// `(1/(H*W)) * sum[(du)^2 + (dv)^2]`.
fn field_loss(predicted: &FlowField, target: &FlowField) -> Result<f64> {
    if predicted.dim() != target.dim() {
        return Err(Error::domain("flow fields must share dimensions"));
    }
    let (h, w) = predicted.dim();
    let mut acc = 0.0f64;
    for ((p, t), (q, s)) in predicted
        .u
        .iter()
        .zip(target.u.iter())
        .zip(predicted.v.iter().zip(target.v.iter()))
    {
        let du = (*p - *t) as f64;
        let dv = (*q - *s) as f64;
        acc += du * du + dv * dv;
    }
    Ok(acc / (h * w) as f64)
}

/// Flow loss averaged over the field pairs of one sample.
pub fn flow_loss(predicted: &[FlowField], target: &[FlowField]) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(Error::domain("predicted/target field counts differ"));
    }
    if predicted.is_empty() {
        return Err(Error::domain("flow loss needs at least one field pair"));
    }
    let mut acc = 0.0;
    for (p, t) in predicted.iter().zip(target) {
        acc += field_loss(p, t)?;
    }
    Ok(acc / predicted.len() as f64)
}

/// Combined training objective: `class_loss + lambda * flow_loss`.
pub fn total_loss(class_loss: f64, flow_loss: f64, lambda: f64) -> f64 {
    class_loss + lambda * flow_loss
}

const FLOW_CACHE_MAGIC: &[u8; 4] = b"EVFL";

/// Write flow-target fields as a little-endian binary cache:
/// magic `EVFL`, u32 field count, u32 height, u32 width, then per field the
/// `u` plane then the `v` plane, row-major f32.
pub fn write_flow_cache(path: &Path, fields: &[FlowField]) -> Result<()> {
    if fields.is_empty() {
        return Err(Error::domain("refusing to write an empty flow cache"));
    }
    let (h, w) = fields[0].dim();
    let mut buf = Vec::with_capacity(16 + fields.len() * 2 * h * w * 4);
    buf.extend_from_slice(FLOW_CACHE_MAGIC);
    buf.extend_from_slice(&(fields.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for f in fields {
        if f.dim() != (h, w) {
            return Err(Error::domain("flow cache fields must share dimensions"));
        }
        for plane in [&f.u, &f.v] {
            for &v in plane.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Read a flow cache written by [`write_flow_cache`].
pub fn read_flow_cache(path: &Path) -> Result<Vec<FlowField>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::format(0, "flow cache shorter than its header"));
    }
    if &bytes[0..4] != FLOW_CACHE_MAGIC {
        return Err(Error::format(0, "bad flow cache magic"));
    }
    let read_u32 = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
    let count = read_u32(4) as usize;
    let h = read_u32(8) as usize;
    let w = read_u32(12) as usize;
    let expected = 16 + count * 2 * h * w * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            bytes.len().min(expected) as u64,
            format!("flow cache size {} != expected {expected}", bytes.len()),
        ));
    }
    let mut off = 16;
    let mut fields = Vec::with_capacity(count);
    for _ in 0..count {
        let mut planes = [Array2::zeros((h, w)), Array2::zeros((h, w))];
        for plane in planes.iter_mut() {
            for v in plane.iter_mut() {
                *v = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
                off += 4;
            }
        }
        let [u, v] = planes;
        fields.push(FlowField { u, v });
    }
    Ok(fields)
}

/// Debug dump of a flow field as a PPM image: u maps to red/green around
/// mid-gray, v to blue.
pub fn write_flow_ppm(path: &Path, field: &FlowField) -> Result<()> {
    let (h, w) = field.dim();
    let max = field
        .u
        .iter()
        .chain(field.v.iter())
        .fold(1e-6f32, |m, &v| m.max(v.abs()));
    let mut buf = Vec::with_capacity(w * h * 3 + 32);
    write!(buf, "P6\n{w} {h}\n255\n").expect("in-memory write");
    for y in 0..h {
        for x in 0..w {
            let un = field.u[[y, x]] / max;
            let vn = field.v[[y, x]] / max;
            buf.push((127.0 + 127.0 * un) as u8);
            buf.push((127.0 - 127.0 * un) as u8);
            buf.push((127.0 + 127.0 * vn) as u8);
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
