//! Dense depth maps with validity masks, and their on-disk format.
//!
//! Depth images serialize as binary 16-bit PGM in 0.1 mm units (0 marks an
//! invalid pixel) with a sidecar text header carrying intrinsics and the
//! sensor pose. Writing then reading a file reproduces it byte for byte.

use std::io::{self, BufRead, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{Intrinsics, Pose};

const DEPTH_SCALE: f64 = 10.0; // stored units per mm
const MAX_STORABLE_MM: f64 = 65535.0 / DEPTH_SCALE;

#[derive(Debug, Error)]
pub enum DepthIoError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed PGM: {0}")]
    MalformedPgm(String),
    #[error("malformed depth header: {0}")]
    MalformedHeader(String),
}

/// Per-pixel depth in millimeters with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: u32,
    height: u32,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthImage {
    /// All-invalid image.
    pub fn new(width: u32, height: u32) -> Self {
        let n = (width as usize) * (height as usize);
        Self {
            width,
            height,
            depth: vec![0.0; n],
            valid: vec![false; n],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        (y as usize) * (self.width as usize) + (x as usize)
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> Option<f64> {
        let i = self.index(x, y);
        self.valid[i].then(|| self.depth[i])
    }

    #[inline]
    pub fn get_at(&self, i: usize) -> Option<f64> {
        self.valid[i].then(|| self.depth[i])
    }

    /// Marks a pixel valid. Depth must be finite and positive.
    pub fn set(&mut self, x: u32, y: u32, depth: f64) {
        assert!(depth.is_finite() && depth > 0.0, "invalid depth {depth}");
        let i = self.index(x, y);
        self.depth[i] = depth;
        self.valid[i] = true;
    }

    pub fn invalidate(&mut self, x: u32, y: u32) {
        let i = self.index(x, y);
        self.valid[i] = false;
        self.depth[i] = 0.0;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn invalid_fraction(&self) -> f64 {
        1.0 - self.valid_count() as f64 / self.len() as f64
    }

    /// Iterates `(x, y, depth)` over valid pixels in row-major order.
    pub fn iter_valid(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        (0..self.height).flat_map(move |y| {
            (0..self.width).filter_map(move |x| self.get(x, y).map(|d| (x, y, d)))
        })
    }

    pub fn same_dimensions(&self, other: &DepthImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Quantizes depths to the 0.1 mm storage grid, as writing does.
    pub fn quantized(&self) -> DepthImage {
        let mut out = DepthImage::new(self.width, self.height);
        for (x, y, d) in self.iter_valid() {
            let q = (d * DEPTH_SCALE).round().clamp(0.0, 65535.0);
            if q >= 1.0 {
                out.set(x, y, q / DEPTH_SCALE);
            }
        }
        out
    }

    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<(), DepthIoError> {
        write!(w, "P5\n{} {}\n65535\n", self.width, self.height)?;
        let mut buf = Vec::with_capacity(self.len() * 2);
        for i in 0..self.len() {
            let code = if self.valid[i] {
                let q = (self.depth[i] * DEPTH_SCALE).round();
                if !(1.0..=65535.0).contains(&q) {
                    0 // out of representable range: stored as invalid
                } else {
                    q as u16
                }
            } else {
                0
            };
            buf.extend_from_slice(&code.to_be_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_pgm<R: Read>(r: R) -> Result<Self, DepthIoError> {
        let mut reader = io::BufReader::new(r);
        let magic = read_pgm_token(&mut reader)?;
        if magic != "P5" {
            return Err(DepthIoError::MalformedPgm(format!(
                "expected magic P5, got {magic:?}"
            )));
        }
        let width: u32 = parse_pgm_number(&read_pgm_token(&mut reader)?, "width")?;
        let height: u32 = parse_pgm_number(&read_pgm_token(&mut reader)?, "height")?;
        let maxval: u32 = parse_pgm_number(&read_pgm_token(&mut reader)?, "maxval")?;
        if maxval != 65535 {
            return Err(DepthIoError::MalformedPgm(format!(
                "expected maxval 65535, got {maxval}"
            )));
        }
        let n = (width as usize) * (height as usize);
        let mut raw = vec![0u8; n * 2];
        reader.read_exact(&mut raw).map_err(|e| {
            DepthIoError::MalformedPgm(format!("truncated pixel data ({e})"))
        })?;
        let mut img = DepthImage::new(width, height);
        for i in 0..n {
            let code = u16::from_be_bytes([raw[i * 2], raw[i * 2 + 1]]);
            if code != 0 {
                img.depth[i] = f64::from(code) / DEPTH_SCALE;
                img.valid[i] = true;
            }
        }
        Ok(img)
    }

    pub fn save_pgm(&self, path: &Path) -> Result<(), DepthIoError> {
        let file = std::fs::File::create(path)?;
        self.write_pgm(io::BufWriter::new(file))
    }

    pub fn load_pgm(path: &Path) -> Result<Self, DepthIoError> {
        let file = std::fs::File::open(path)?;
        Self::read_pgm(file)
    }

    /// Largest depth representable by the 16-bit storage format, in mm.
    pub fn max_storable_mm() -> f64 {
        MAX_STORABLE_MM
    }
}

/// Reads one whitespace-delimited PGM header token, skipping `#` comments.
fn read_pgm_token<R: BufRead>(r: &mut R) -> Result<String, DepthIoError> {
    let mut token = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        let n = r.read(&mut byte)?;
        if n == 0 {
            if token.is_empty() {
                return Err(DepthIoError::MalformedPgm("unexpected end of header".into()));
            }
            return Ok(token);
        }
        let c = byte[0] as char;
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        if c == '#' {
            in_comment = true;
            continue;
        }
        if c.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            return Ok(token);
        }
        token.push(c);
    }
}

fn parse_pgm_number(token: &str, what: &str) -> Result<u32, DepthIoError> {
    token
        .parse()
        .map_err(|_| DepthIoError::MalformedPgm(format!("bad {what} {token:?}")))
}

/// Sidecar metadata stored next to a depth PGM: intrinsics plus the sensor
/// pose (row-major rotation, translation in mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMeta {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl DepthMeta {
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), DepthIoError> {
        let k = &self.intrinsics;
        writeln!(w, "fx {}", fmt_f64(k.fx))?;
        writeln!(w, "fy {}", fmt_f64(k.fy))?;
        writeln!(w, "cx {}", fmt_f64(k.cx))?;
        writeln!(w, "cy {}", fmt_f64(k.cy))?;
        writeln!(w, "width {}", k.width)?;
        writeln!(w, "height {}", k.height)?;
        let r = self.pose.rotation();
        let vals: Vec<String> = (0..3)
            .flat_map(|i| (0..3).map(move |j| fmt_f64(r[(i, j)])))
            .collect();
        writeln!(w, "rotation {}", vals.join(" "))?;
        let t = self.pose.translation();
        writeln!(w, "translation {} {} {}", fmt_f64(t.x), fmt_f64(t.y), fmt_f64(t.z))?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self, DepthIoError> {
        let mut fields = std::collections::BTreeMap::new();
        for (lineno, line) in io::BufReader::new(r).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, rest) = line.split_once(char::is_whitespace).ok_or_else(|| {
                DepthIoError::MalformedHeader(format!("line {}: missing value", lineno + 1))
            })?;
            fields.insert(key.to_string(), rest.trim().to_string());
        }
        let get = |key: &str| {
            fields
                .get(key)
                .ok_or_else(|| DepthIoError::MalformedHeader(format!("missing key {key:?}")))
        };
        let num = |key: &str| -> Result<f64, DepthIoError> {
            get(key)?.parse().map_err(|_| {
                DepthIoError::MalformedHeader(format!("key {key:?} is not a number"))
            })
        };
        let (fx, fy, cx, cy) = (num("fx")?, num("fy")?, num("cx")?, num("cy")?);
        let (width, height) = (num("width")? as u32, num("height")? as u32);
        if fx <= 0.0 || fy <= 0.0 || !(0.0..width as f64).contains(&cx)
            || !(0.0..height as f64).contains(&cy)
        {
            return Err(DepthIoError::MalformedHeader(
                "intrinsics out of range".into(),
            ));
        }
        let intrinsics = Intrinsics::new(fx, fy, cx, cy, width, height);
        let rot_vals: Vec<f64> = get("rotation")?
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| DepthIoError::MalformedHeader("bad rotation entries".into()))?;
        if rot_vals.len() != 9 {
            return Err(DepthIoError::MalformedHeader(format!(
                "rotation needs 9 entries, got {}",
                rot_vals.len()
            )));
        }
        let tr_vals: Vec<f64> = get("translation")?
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| DepthIoError::MalformedHeader("bad translation entries".into()))?;
        if tr_vals.len() != 3 {
            return Err(DepthIoError::MalformedHeader(format!(
                "translation needs 3 entries, got {}",
                tr_vals.len()
            )));
        }
        let rotation = Matrix3::from_row_slice(&rot_vals);
        let translation = Vector3::new(tr_vals[0], tr_vals[1], tr_vals[2]);
        let pose = Pose::new(rotation, translation)
            .map_err(|_| DepthIoError::MalformedHeader("rotation is not orthonormal".into()))?;
        Ok(Self { intrinsics, pose })
    }

    /// Sidecar path for a given PGM path (`foo.pgm` -> `foo.pgm.meta`).
    pub fn sidecar_path(pgm_path: &Path) -> std::path::PathBuf {
        let mut os = pgm_path.as_os_str().to_owned();
        os.push(".meta");
        os.into()
    }

    pub fn save(&self, pgm_path: &Path) -> Result<(), DepthIoError> {
        let file = std::fs::File::create(Self::sidecar_path(pgm_path))?;
        self.write(io::BufWriter::new(file))
    }

    pub fn load(pgm_path: &Path) -> Result<Self, DepthIoError> {
        let file = std::fs::File::open(Self::sidecar_path(pgm_path))?;
        Self::read(file)
    }
}

/// Shortest round-trippable decimal form.
fn fmt_f64(v: f64) -> String {
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().unwrap(), v);
    s
}
