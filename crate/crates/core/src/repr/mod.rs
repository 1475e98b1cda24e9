//! Tensor representations of event streams.
//!
//! All representations share the signed-voxel convention: each temporal bin
//! is a single channel and polarities are summed with their sign, so the
//! total grid mass equals the stream's polarity sum.

use crate::events::{Event, EventStream};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReprError {
    #[error("bins must be >= 1")]
    NoBins,
    #[error("window has zero length but the stream is non-empty")]
    DegenerateWindow,
    #[error("bin count {0} must be even")]
    OddBins(usize),
    #[error("segment count {0} must be odd")]
    EvenSegments(usize),
    #[error("motion edges need at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("frame {0} missing from the input range")]
    MissingFrame(i64),
    #[error("frames {0} and {1} are not contiguous in time")]
    NonContiguousFrames(i64, i64),
    #[error("frame {0} disagrees on sensor size")]
    SensorMismatch(i64),
    #[error("threshold must be positive, got {0}")]
    BadThreshold(f64),
}

/// A `bins`×`height`×`width` signed voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub bins: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl VoxelGrid {
    pub fn zeros(bins: usize, height: usize, width: usize) -> Self {
        Self {
            bins,
            height,
            width,
            data: vec![0.0; bins * height * width],
        }
    }

    pub fn from_data(bins: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), bins * height * width);
        Self {
            bins,
            height,
            width,
            data,
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, b: usize, y: usize, x: usize) -> f64 {
        self.data[(b * self.height + y) * self.width + x]
    }

    fn add(&mut self, b: usize, y: usize, x: usize, v: f64) {
        self.data[(b * self.height + y) * self.width + x] += v;
    }

    /// One temporal slice as a `height*width` slice.
    pub fn slice(&self, b: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.data[b * hw..(b + 1) * hw]
    }

    /// Total signed mass.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Mirrors every slice left-right.
    pub fn hflip(&self) -> Self {
        self.remap(self.height, self.width, |y, x| (y, self.width - 1 - x))
    }

    /// Mirrors every slice top-bottom.
    pub fn vflip(&self) -> Self {
        self.remap(self.height, self.width, |y, x| (self.height - 1 - y, x))
    }

    /// Rotates every slice by 90 degrees, matching the coordinate action of
    /// [`transform_events`] on the underlying events.
    pub fn rot90(&self) -> Self {
        self.remap(self.width, self.height, |yo, xo| {
            (self.height - 1 - xo, yo)
        })
    }

    fn remap(
        &self,
        out_h: usize,
        out_w: usize,
        src: impl Fn(usize, usize) -> (usize, usize),
    ) -> Self {
        let mut out = VoxelGrid::zeros(self.bins, out_h, out_w);
        for b in 0..self.bins {
            for y in 0..out_h {
                for x in 0..out_w {
                    let (sy, sx) = src(y, x);
                    out.data[(b * out_h + y) * out_w + x] = self.get(b, sy, sx);
                }
            }
        }
        out
    }
}

/// Voxel grids over three nested temporal windows around a reference frame.
#[derive(Debug, Clone)]
pub struct MultiWindowVoxels {
    pub long: VoxelGrid,
    pub mid: VoxelGrid,
    pub short: VoxelGrid,
    pub windows: (u32, u32, u32),
}

/// Documented default frame extents `(long, mid, short)` for the triple
/// temporal windows.
pub const MULTI_WINDOW_DEFAULTS: (u32, u32, u32) = (5, 1, 0);
/// Documented default bin count for the triple windows.
pub const MULTI_WINDOW_BINS: usize = 7;

/// An exposure voxelization split at its center into a forward half and a
/// time-reversed backward half, both iterating toward the exposure center.
#[derive(Debug, Clone)]
pub struct SplitVoxels {
    pub forward: VoxelGrid,
    pub backward: VoxelGrid,
}

/// Motion edge frame `e` with its threshold mask `m`.
#[derive(Debug, Clone)]
pub struct EdgeMap {
    pub height: usize,
    pub width: usize,
    pub e: Vec<f64>,
    pub m: Vec<f64>,
    pub tau: f64,
}

/// Distributes each event's polarity over the two nearest temporal bins.
///
/// An event at time `t` lands at the fractional bin coordinate
/// `t* = (B-1)(t - t_start)/(t_end - t_start)` and contributes
/// `p * max(0, 1 - |b - t*|)` to bins `floor(t*)` and `floor(t*)+1`.
/// Events exactly at the window end get full weight in the last bin.
pub fn voxelize(stream: &EventStream, bins: usize) -> Result<VoxelGrid, ReprError> {
    if bins == 0 {
        return Err(ReprError::NoBins);
    }
    let mut grid = VoxelGrid::zeros(
        bins,
        stream.sensor_height as usize,
        stream.sensor_width as usize,
    );
    if stream.is_empty() {
        return Ok(grid);
    }
    let span = stream.window_len();
    if span == 0 {
        return Err(ReprError::DegenerateWindow);
    }
    let scale = (bins as f64 - 1.0) / span as f64;
    for ev in stream.events() {
        let t_star = (ev.t - stream.t_start) as f64 * scale;
        let b0 = t_star.floor() as usize;
        let p = ev.p as f64;
        let (y, x) = (ev.y as usize, ev.x as usize);
        for b in [b0, b0 + 1] {
            if b < bins {
                let w = 1.0 - (b as f64 - t_star).abs();
                if w > 0.0 {
                    grid.add(b, y, x, p * w);
                }
            }
        }
        // t* == B-1 exactly: the loop above already gave bin B-1 weight 1.
    }
    Ok(grid)
}

/// Symmetric cumulative representation: channels accumulate signed polarity
/// over nested windows expanding from the exposure midpoint.
///
/// For `j = 1..B/2` and window half-width `Δ_j = j * span / B`, channel
/// `B/2 - j` covers `[t_mid - Δ_j, t_mid]` and channel `B/2 - 1 + j` covers
/// `(t_mid, t_mid + Δ_j]`. Events exactly at the midpoint count on the left.
pub fn scer(stream: &EventStream, bins: usize) -> Result<VoxelGrid, ReprError> {
    if bins == 0 {
        return Err(ReprError::NoBins);
    }
    if !bins.is_multiple_of(2) {
        return Err(ReprError::OddBins(bins));
    }
    let mut grid = VoxelGrid::zeros(
        bins,
        stream.sensor_height as usize,
        stream.sensor_width as usize,
    );
    if stream.is_empty() {
        return Ok(grid);
    }
    let span = stream.window_len() as f64;
    let t_mid = stream.t_start as f64 + span / 2.0;
    let half = bins / 2;
    for ev in stream.events() {
        let t = ev.t as f64;
        let p = ev.p as f64;
        let (y, x) = (ev.y as usize, ev.x as usize);
        for j in 1..=half {
            let delta = j as f64 * span / bins as f64;
            if t <= t_mid && t >= t_mid - delta {
                grid.add(half - j, y, x, p);
            } else if t > t_mid && t <= t_mid + delta {
                grid.add(half - 1 + j, y, x, p);
            }
        }
    }
    Ok(grid)
}

/// Voxelizes the event windows of frames `t-T ..= t+T` for each of the three
/// temporal extents, using `bins` bins per grid.
pub fn multi_window_voxelize(
    frames: &BTreeMap<i64, EventStream>,
    t: i64,
    t_long: u32,
    t_mid: u32,
    t_short: u32,
    bins: usize,
) -> Result<MultiWindowVoxels, ReprError> {
    let long = window_voxelize(frames, t, t_long, bins)?;
    let mid = window_voxelize(frames, t, t_mid, bins)?;
    let short = window_voxelize(frames, t, t_short, bins)?;
    Ok(MultiWindowVoxels {
        long,
        mid,
        short,
        windows: (t_long, t_mid, t_short),
    })
}

fn window_voxelize(
    frames: &BTreeMap<i64, EventStream>,
    t: i64,
    extent: u32,
    bins: usize,
) -> Result<VoxelGrid, ReprError> {
    let first = t - extent as i64;
    let last = t + extent as i64;
    let reference = frames.get(&t).ok_or(ReprError::MissingFrame(t))?;
    let mut events: Vec<Event> = Vec::new();
    let mut prev_end: Option<(i64, u64)> = None;
    for idx in first..=last {
        let frame = frames.get(&idx).ok_or(ReprError::MissingFrame(idx))?;
        if frame.sensor_width != reference.sensor_width
            || frame.sensor_height != reference.sensor_height
        {
            return Err(ReprError::SensorMismatch(idx));
        }
        if let Some((prev_idx, end)) = prev_end {
            if frame.t_start != end {
                return Err(ReprError::NonContiguousFrames(prev_idx, idx));
            }
        }
        prev_end = Some((idx, frame.t_end));
        events.extend_from_slice(frame.events());
    }
    let t_start = frames[&first].t_start;
    let t_end = frames[&last].t_end;
    let merged = EventStream::new(
        events,
        reference.sensor_width,
        reference.sensor_height,
        t_start,
        t_end,
    )
    .expect("concatenated contiguous frames remain valid");
    voxelize(&merged, bins)
}

/// Splits an `(M+1)`-bin exposure voxelization into forward and backward
/// halves; the backward half is reversed so both iterate toward the center.
pub fn split_voxels(stream: &EventStream, segments: usize) -> Result<SplitVoxels, ReprError> {
    if segments.is_multiple_of(2) {
        return Err(ReprError::EvenSegments(segments));
    }
    let bins = segments + 1;
    let full = voxelize(stream, bins)?;
    let half = bins / 2;
    let hw = full.height * full.width;
    let mut forward = VoxelGrid::zeros(half, full.height, full.width);
    let mut backward = VoxelGrid::zeros(half, full.height, full.width);
    for b in 0..half {
        forward.data[b * hw..(b + 1) * hw].copy_from_slice(full.slice(b));
        // Latest slice first: backward[0] = full[bins-1].
        backward.data[b * hw..(b + 1) * hw].copy_from_slice(full.slice(bins - 1 - b));
    }
    Ok(SplitVoxels { forward, backward })
}

/// Multiplies the two temporal slices closest to the exposure center and
/// thresholds the product into a binary mask.
pub fn motion_edge(grid: &VoxelGrid, tau: f64) -> Result<EdgeMap, ReprError> {
    if grid.bins < 2 {
        return Err(ReprError::TooFewBins(grid.bins));
    }
    if tau <= 0.0 {
        return Err(ReprError::BadThreshold(tau));
    }
    let lo = (grid.bins - 1) / 2;
    let a = grid.slice(lo);
    let b = grid.slice(lo + 1);
    let e: Vec<f64> = a.iter().zip(b).map(|(&u, &v)| u * v).collect();
    let m: Vec<f64> = e.iter().map(|&v| if v > tau { 1.0 } else { 0.0 }).collect();
    Ok(EdgeMap {
        height: grid.height,
        width: grid.width,
        e,
        m,
        tau,
    })
}

/// Spatial transforms that act on event coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialOp {
    HFlip,
    VFlip,
    Rot90,
    Rot180,
    Rot270,
}

/// Remaps event coordinates; timestamps and polarities are untouched.
///
/// `Rot90` maps `(x, y)` to `(H-1-y, x)` and swaps the sensor dimensions;
/// the other rotations compose it.
pub fn transform_events(stream: &EventStream, op: SpatialOp) -> EventStream {
    let (w, h) = (stream.sensor_width, stream.sensor_height);
    let (new_w, new_h) = match op {
        SpatialOp::HFlip | SpatialOp::VFlip | SpatialOp::Rot180 => (w, h),
        SpatialOp::Rot90 | SpatialOp::Rot270 => (h, w),
    };
    let events = stream
        .events()
        .iter()
        .map(|ev| {
            let (x, y) = match op {
                SpatialOp::HFlip => (w - 1 - ev.x, ev.y),
                SpatialOp::VFlip => (ev.x, h - 1 - ev.y),
                SpatialOp::Rot90 => (h - 1 - ev.y, ev.x),
                SpatialOp::Rot180 => (w - 1 - ev.x, h - 1 - ev.y),
                SpatialOp::Rot270 => (ev.y, w - 1 - ev.x),
            };
            Event { x, y, ..*ev }
        })
        .collect();
    EventStream::new(events, new_w, new_h, stream.t_start, stream.t_end)
        .expect("coordinate remap preserves stream invariants")
}

/// Restricts a stream to a square crop, shifting coordinates so the crop's
/// top-left corner becomes the origin. The time window is unchanged.
pub fn crop_events(stream: &EventStream, y0: u32, x0: u32, size: u32) -> EventStream {
    let events = stream
        .events()
        .iter()
        .filter(|ev| {
            ev.x >= x0 && ev.x < x0 + size && ev.y >= y0 && ev.y < y0 + size
        })
        .map(|ev| Event {
            x: ev.x - x0,
            y: ev.y - y0,
            ..*ev
        })
        .collect();
    EventStream::new(events, size, size, stream.t_start, stream.t_end)
        .expect("cropping preserves stream invariants")
}
