//! `RTEV` event streams: a 16-byte header followed by packed 9-byte records.
//!
//! ```text
//! header:  "RTEV" | version u32 | width u16 | height u16 | duration_us u32
//! record:  t u32 | x u16 | y u16 | polarity u8
//! ```
//!
//! All integers little-endian. A duration of 0 means "until the last event".

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::write_atomic;
use crate::error::{invalid, Error, Result};
use crate::model::Dataset;
use crate::tensor::Tensor;

pub const EVENT_MAGIC: &[u8; 4] = b"RTEV";
pub const EVENT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;
pub const RECORD_LEN: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EventRecord {
    pub t: u32,
    pub x: u16,
    pub y: u16,
    pub polarity: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    pub width: u16,
    pub height: u16,
    pub duration_us: u32,
    pub events: Vec<EventRecord>,
}

impl EventStream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * self.events.len());
        out.extend_from_slice(EVENT_MAGIC);
        out.extend_from_slice(&EVENT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.duration_us.to_le_bytes());
        for e in &self.events {
            out.extend_from_slice(&e.t.to_le_bytes());
            out.extend_from_slice(&e.x.to_le_bytes());
            out.extend_from_slice(&e.y.to_le_bytes());
            out.push(e.polarity);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, msg: String| Error::Format { offset, msg };
        if bytes.len() < HEADER_LEN {
            return Err(fmt(bytes.len(), format!("event header needs {HEADER_LEN} bytes")));
        }
        if &bytes[0..4] != EVENT_MAGIC {
            return Err(fmt(0, "bad event magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != EVENT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: EVENT_VERSION,
            });
        }
        let width = u16::from_le_bytes([bytes[8], bytes[9]]);
        let height = u16::from_le_bytes([bytes[10], bytes[11]]);
        let duration_us = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let body = &bytes[HEADER_LEN..];
        if body.len() % RECORD_LEN != 0 {
            let whole = body.len() / RECORD_LEN * RECORD_LEN;
            return Err(fmt(HEADER_LEN + whole, "truncated event record".into()));
        }
        let mut events = Vec::with_capacity(body.len() / RECORD_LEN);
        let mut prev = 0u32;
        for (i, r) in body.chunks_exact(RECORD_LEN).enumerate() {
            let e = EventRecord {
                t: u32::from_le_bytes(r[0..4].try_into().unwrap()),
                x: u16::from_le_bytes([r[4], r[5]]),
                y: u16::from_le_bytes([r[6], r[7]]),
                polarity: r[8],
            };
            let offset = HEADER_LEN + i * RECORD_LEN;
            if e.t < prev {
                return Err(Error::NonMonotonicEvents {
                    index: i,
                    prev,
                    next: e.t,
                });
            }
            if e.x >= width || e.y >= height {
                return Err(fmt(
                    offset,
                    format!("event {i} at ({}, {}) outside {width}x{height}", e.x, e.y),
                ));
            }
            if e.polarity > 1 {
                return Err(fmt(offset + 8, format!("event {i} has polarity {}", e.polarity)));
            }
            prev = e.t;
            events.push(e);
        }
        Ok(EventStream {
            width,
            height,
            duration_us,
            events,
        })
    }

    /// Binary presence grid `[T, 2, H, W]`: `bin = floor(t * T / duration)`.
    pub fn bin(&self, steps: usize) -> Result<Tensor<f32>> {
        if steps == 0 {
            return invalid("binning needs at least one timestep");
        }
        let (h, w) = (self.height as usize, self.width as usize);
        let mut out = Tensor::zeros(&[steps, 2, h, w]);
        let duration = if self.duration_us > 0 {
            self.duration_us as u64
        } else {
            self.events.last().map_or(1, |e| e.t as u64 + 1)
        };
        for e in &self.events {
            let bin = ((e.t as u64 * steps as u64) / duration).min(steps as u64 - 1) as usize;
            out.set(&[bin, e.polarity as usize, e.y as usize, e.x as usize], 1.0);
        }
        Ok(out)
    }
}

/// Read a stream and bin it to `[T, 1, 2, H, W]`.
pub fn load_events(path: &Path, steps: usize) -> Result<Tensor<f32>> {
    let s = EventStream::from_bytes(&std::fs::read(path)?)?;
    let g = s.bin(steps)?;
    let sh = g.shape().to_vec();
    g.reshape(&[sh[0], 1, sh[1], sh[2], sh[3]])
}

#[derive(Clone, Copy, Debug)]
pub struct ToyEventSpec {
    pub width: u16,
    pub height: u16,
    pub duration_us: u32,
    pub substeps: u32,
    /// Expected random events per substep.
    pub noise_rate: f64,
}

impl Default for ToyEventSpec {
    fn default() -> Self {
        ToyEventSpec {
            width: 16,
            height: 16,
            duration_us: 100_000,
            substeps: 32,
            noise_rate: 0.3,
        }
    }
}

/// A bar sweeping across the sensor. Class `k` moves along angle
/// `2 pi k / classes` (class 0 to the right, image y pointing down).
/// Pixels the bar enters emit ON events, pixels it leaves emit OFF.
pub fn moving_bar<R: Rng>(class: usize, classes: usize, layout: &ToyEventSpec, rng: &mut R) -> EventStream {
    let theta = TAU * class as f64 / classes as f64;
    let (dx, dy) = (theta.cos(), theta.sin());
    let (nx, ny) = (-dy, dx);
    let (w, h) = (layout.width as usize, layout.height as usize);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let perp = rng.gen_range(-2.0..2.0);
    let along = rng.gen_range(-1.0..1.0);
    let travel = rng.gen_range(9.0..12.0);
    let half_len = rng.gen_range(3.5..6.5);
    let half_width = rng.gen_range(0.8..1.4);
    let steps = layout.substeps.max(2);
    let covered = |s: u32| -> Vec<bool> {
        let offset = along - travel / 2.0 + travel * s as f64 / (steps - 1) as f64;
        let (ox, oy) = (cx + perp * nx + offset * dx, cy + perp * ny + offset * dy);
        let mut m = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5 - ox, y as f64 + 0.5 - oy);
                m[y * w + x] = (px * dx + py * dy).abs() <= half_width && (px * nx + py * ny).abs() <= half_len;
            }
        }
        m
    };
    let slot = layout.duration_us as f64 / steps as f64;
    let mut events = Vec::new();
    let mut prev = covered(0);
    for s in 1..steps {
        let cur = covered(s);
        let t0 = s as f64 * slot;
        for (i, (&was, &now)) in prev.iter().zip(&cur).enumerate() {
            if was != now && rng.gen_bool(0.9) {
                events.push(EventRecord {
                    t: (t0 + rng.gen_range(0.0..slot)) as u32,
                    x: (i % w) as u16,
                    y: (i / w) as u16,
                    polarity: now as u8,
                });
            }
        }
        let noise = layout.noise_rate.floor() as usize + rng.gen_bool(layout.noise_rate.fract()) as usize;
        for _ in 0..noise {
            events.push(EventRecord {
                t: (t0 + rng.gen_range(0.0..slot)) as u32,
                x: rng.gen_range(0..layout.width),
                y: rng.gen_range(0..layout.height),
                polarity: rng.gen_range(0..2),
            });
        }
        prev = cur;
    }
    events.sort_by_key(|e| e.t);
    EventStream {
        width: layout.width,
        height: layout.height,
        duration_us: layout.duration_us,
        events,
    }
}

/// Stream `i` of a generated set. Sample `i` has class `i % classes`.
pub fn toy_stream(i: usize, classes: usize, seed: u64, layout: &ToyEventSpec) -> EventStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    moving_bar(i % classes, classes, layout, &mut rng)
}

pub fn sample_file_name(i: usize) -> String {
    format!("sample_{i:05}.rtev")
}

/// Write `samples` streams plus `manifest.csv` (`file,label`) into `dir`.
pub fn gen_toy_events(dir: &Path, classes: usize, samples: usize, seed: u64) -> Result<Vec<(String, usize)>> {
    if classes == 0 {
        return invalid("need at least one class");
    }
    std::fs::create_dir_all(dir)?;
    let layout = ToyEventSpec::default();
    let mut manifest = Vec::with_capacity(samples);
    for i in 0..samples {
        let name = sample_file_name(i);
        write_atomic(&dir.join(&name), &toy_stream(i, classes, seed, &layout).to_bytes())?;
        manifest.push((name, i % classes));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["file", "label"])?;
    for (f, l) in &manifest {
        w.write_record([f.as_str(), &l.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    write_atomic(&dir.join("manifest.csv"), &bytes)?;
    Ok(manifest)
}

/// Load a directory written by [`gen_toy_events`] (or any `manifest.csv`
/// of `file,label` rows).
pub fn load_event_dir(dir: &Path, steps: usize) -> Result<Dataset<f32>> {
    let mut r = csv::Reader::from_path(dir.join("manifest.csv"))?;
    let (mut samples, mut labels) = (Vec::new(), Vec::new());
    for row in r.records() {
        let row = row?;
        let (Some(file), Some(label)) = (row.get(0), row.get(1)) else {
            return Err(Error::Config("manifest rows need file,label".into()));
        };
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad label `{label}` in manifest")))?;
        let s = EventStream::from_bytes(&std::fs::read(dir.join(file))?)?;
        samples.push(s.bin(steps)?);
        labels.push(label);
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(samples, labels, classes)
}

/// The generated set, in memory, binned to `steps`.
pub fn toy_event_dataset(classes: usize, samples: usize, steps: usize, seed: u64) -> Result<Dataset<f32>> {
    let layout = ToyEventSpec::default();
    let grids = (0..samples)
        .map(|i| toy_stream(i, classes, seed, &layout).bin(steps))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(grids, (0..samples).map(|i| i % classes).collect(), classes)
}

/// Held-out rule for generated sets: every fifth sample.
pub fn is_test_index(i: usize) -> bool {
    i % 5 == 4
}
