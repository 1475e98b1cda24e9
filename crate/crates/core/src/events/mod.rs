//! Event streams, image planes, and their on-disk formats.
//!
//! An event camera reports asynchronous per-pixel brightness changes as
//! `(t, x, y, p)` tuples. This module defines the validated in-memory types
//! plus two self-describing file formats: a directive-headed CSV for event
//! streams and binary PGM/PPM (maxval 255) for images.

mod csv;
mod pnm;

pub use csv::{parse_event_csv, write_event_csv};
pub use pnm::{load_image_pnm, save_image_pnm, PnmError};

use thiserror::Error;

/// A single camera event: timestamp in microseconds, pixel coordinates, and
/// the sign of the brightness change that triggered it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    /// Timestamp in microseconds.
    pub t: u64,
    /// Pixel column.
    pub x: u32,
    /// Pixel row.
    pub y: u32,
    /// Polarity, exactly -1 or +1.
    pub p: i8,
}

/// Errors raised while building or parsing event streams.
#[derive(Debug, Error)]
pub enum EventError {
    #[error("line {line}: malformed record: {msg}")]
    MalformedLine { line: usize, msg: String },
    #[error("line {line}: polarity {value} not allowed (must be -1 or +1; 0 is rejected)")]
    BadPolarity { line: usize, value: i64 },
    #[error("line {line}: event ({x},{y}) outside sensor bounds {width}x{height}")]
    OutOfBounds {
        line: usize,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },
    #[error("line {line}: event at t={t} outside window [{t_start},{t_end}]")]
    OutsideWindow {
        line: usize,
        t: u64,
        t_start: u64,
        t_end: u64,
    },
    #[error("missing or malformed sensor directive: {0}")]
    BadDirective(String),
    #[error("events are not sorted by timestamp")]
    Unsorted,
    #[error("window start {t_start} exceeds end {t_end}")]
    BadWindow { t_start: u64, t_end: u64 },
}

/// A time-ordered event stream within an exposure window.
///
/// Invariants, enforced on construction:
/// * timestamps are non-decreasing,
/// * every event lies inside `[t_start, t_end]`,
/// * coordinates are inside the sensor, polarity is exactly ±1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<Event>,
    pub sensor_width: u32,
    pub sensor_height: u32,
    pub t_start: u64,
    pub t_end: u64,
}

impl EventStream {
    /// Builds a stream from already-sorted events, validating every invariant.
    pub fn new(
        events: Vec<Event>,
        sensor_width: u32,
        sensor_height: u32,
        t_start: u64,
        t_end: u64,
    ) -> Result<Self, EventError> {
        if t_start > t_end {
            return Err(EventError::BadWindow { t_start, t_end });
        }
        for (i, ev) in events.iter().enumerate() {
            let line = i + 1;
            if ev.p != -1 && ev.p != 1 {
                return Err(EventError::BadPolarity {
                    line,
                    value: ev.p as i64,
                });
            }
            if ev.x >= sensor_width || ev.y >= sensor_height {
                return Err(EventError::OutOfBounds {
                    line,
                    x: ev.x,
                    y: ev.y,
                    width: sensor_width,
                    height: sensor_height,
                });
            }
            if ev.t < t_start || ev.t > t_end {
                return Err(EventError::OutsideWindow {
                    line,
                    t: ev.t,
                    t_start,
                    t_end,
                });
            }
            if i > 0 && events[i - 1].t > ev.t {
                return Err(EventError::Unsorted);
            }
        }
        Ok(Self {
            events,
            sensor_width,
            sensor_height,
            t_start,
            t_end,
        })
    }

    /// Like [`EventStream::new`] but stable-sorts the events by timestamp first.
    pub fn from_unsorted(
        mut events: Vec<Event>,
        sensor_width: u32,
        sensor_height: u32,
        t_start: u64,
        t_end: u64,
    ) -> Result<Self, EventError> {
        events.sort_by_key(|e| e.t);
        Self::new(events, sensor_width, sensor_height, t_start, t_end)
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

    /// Window length in microseconds.
    pub fn window_len(&self) -> u64 {
        self.t_end - self.t_start
    }

    /// Sum of event polarities (signed event mass).
    pub fn polarity_sum(&self) -> f64 {
        self.events.iter().map(|e| e.p as f64).sum()
    }
}

/// Errors raised by image-plane constructors.
#[derive(Debug, Error)]
pub enum ImageError {
    #[error("channel count {0} not supported (must be 1 or 3)")]
    BadChannels(usize),
    #[error("data length {got} does not match {height}x{width}x{channels}")]
    BadLength {
        got: usize,
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("value {0} outside [0,1]")]
    OutOfRange(f64),
}

/// A dense image with values in `[0, 1]`, stored row-major with interleaved
/// channels (`data[(y*width + x)*channels + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, ImageError> {
        if channels != 1 && channels != 3 {
            return Err(ImageError::BadChannels(channels));
        }
        if data.len() != height * width * channels {
            return Err(ImageError::BadLength {
                got: data.len(),
                height,
                width,
                channels,
            });
        }
        if let Some(&v) = data.iter().find(|v| !(0.0..=1.0).contains(*v) || v.is_nan()) {
            return Err(ImageError::OutOfRange(v));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// An all-zero image.
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
            .expect("zeros are valid")
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Crops a `size`×`size` square whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, y0: usize, x0: usize, size: usize) -> Self {
        assert!(y0 + size <= self.height && x0 + size <= self.width);
        let mut data = Vec::with_capacity(size * size * self.channels);
        for y in 0..size {
            for x in 0..size {
                for c in 0..self.channels {
                    data.push(self.get(y0 + y, x0 + x, c));
                }
            }
        }
        Self {
            height: size,
            width: size,
            channels: self.channels,
            data,
        }
    }

    /// Mirrors the image left-right.
    pub fn hflip(&self) -> Self {
        self.remap(self.height, self.width, |y, x| (y, self.width - 1 - x))
    }

    /// Mirrors the image top-bottom.
    pub fn vflip(&self) -> Self {
        self.remap(self.height, self.width, |y, x| (self.height - 1 - y, x))
    }

    /// Rotates by 90 degrees using the same coordinate action as
    /// [`crate::repr::transform_events`]: source `(x, y)` maps to
    /// `(H-1-y, x)` with swapped dimensions.
    pub fn rot90(&self) -> Self {
        // Output has width = self.height, height = self.width.
        self.remap(self.width, self.height, |yo, xo| {
            // Invert (xo, yo) = (H-1-y, x): y = H-1-xo, x = yo.
            (self.height - 1 - xo, yo)
        })
    }

    fn remap(
        &self,
        out_h: usize,
        out_w: usize,
        src: impl Fn(usize, usize) -> (usize, usize),
    ) -> Self {
        let mut data = Vec::with_capacity(out_h * out_w * self.channels);
        for y in 0..out_h {
            for x in 0..out_w {
                let (sy, sx) = src(y, x);
                for c in 0..self.channels {
                    data.push(self.get(sy, sx, c));
                }
            }
        }
        Self {
            height: out_h,
            width: out_w,
            channels: self.channels,
            data,
        }
    }

    /// Per-pixel luminance `(R+G+B)/3`; identity for single-channel images.
    pub fn luma(&self) -> ImagePlane {
        if self.channels == 1 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = (self.get(y, x, 0) + self.get(y, x, 1) + self.get(y, x, 2)) / 3.0;
                data.push(v);
            }
        }
        ImagePlane {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }
}
