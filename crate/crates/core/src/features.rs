//! Keypoints, per-image feature sets, and the GTBF feature file.
//!
//! GTBF layout (little-endian):
//!
//! ```text
//! "GTBF" u16 version=1 u16 descriptor_width_bits u32 image_count
//! per image:    u64 image_id u8 has_pose [f64 x_mm f64 y_mm f64 theta_deg] u32 keypoint_count
//! per keypoint: u32 id f32 x f32 y f32 size f32 orientation_deg [width/8 descriptor bytes]
//! ```
//!
//! A JSON-lines twin (one `ImageFeatures` object per line, descriptors as hex)
//! is accepted by [`read_feature_file`] for debugging.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::codec::{Reader, Writer};
use crate::descriptor::{Descriptor, DEFAULT_WIDTH_BITS};
use crate::error::{Error, FormatError, Result};
use crate::geometry::{normalize_deg, Pose2D};

pub const GTBF_MAGIC: &[u8; 4] = b"GTBF";
pub const GTBF_VERSION: u16 = 1;

/// Wraps into `[0, 360)` in f32 without letting rounding produce 360.0.
pub fn normalize_orientation(deg: f64) -> f32 {
    let v = normalize_deg(deg) as f32;
    if v >= 360.0 {
        0.0
    } else {
        v
    }
}

impl Serialize for Descriptor {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Descriptor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Descriptor::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub id: u32,
    pub x: f32,
    pub y: f32,
    pub size: f32,
    pub orientation_deg: f32,
    pub descriptor: Descriptor,
}

impl Keypoint {
    pub fn new(id: u32, x: f32, y: f32, size: f32, orientation_deg: f64, descriptor: Descriptor) -> Self {
        Self {
            id,
            x,
            y,
            size,
            orientation_deg: normalize_orientation(orientation_deg),
            descriptor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFeatures {
    pub image_id: u64,
    #[serde(default)]
    pub pose: Option<Pose2D>,
    pub keypoints: Vec<Keypoint>,
}

impl ImageFeatures {
    pub fn new(image_id: u64, keypoints: Vec<Keypoint>) -> Self {
        Self {
            image_id,
            pose: None,
            keypoints,
        }
    }

    pub fn with_pose(mut self, pose: Pose2D) -> Self {
        self.pose = Some(pose);
        self
    }

    pub fn keypoint(&self, id: u32) -> Option<&Keypoint> {
        // ids are insertion indices for canonical data; fall back to a scan
        match self.keypoints.get(id as usize) {
            Some(k) if k.id == id => Some(k),
            _ => self.keypoints.iter().find(|k| k.id == id),
        }
    }

    /// Descriptor width shared by every keypoint, `None` when empty.
    pub fn descriptor_width(&self) -> Result<Option<usize>> {
        let mut width = None;
        for k in &self.keypoints {
            let w = k.descriptor.width();
            match width {
                None => width = Some(w),
                Some(prev) if prev != w => return Err(Error::WidthMismatch { left: prev, right: w }),
                _ => {}
            }
        }
        Ok(width)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.keypoints.len());
        for k in &self.keypoints {
            if !seen.insert(k.id) {
                return Err(Error::invalid(format!(
                    "duplicate keypoint id {} in image {}",
                    k.id, self.image_id
                )));
            }
            if !(k.size > 0.0) || !k.size.is_finite() {
                return Err(Error::invalid(format!("keypoint {} has non-positive size", k.id)));
            }
            if !(0.0..360.0).contains(&k.orientation_deg) {
                return Err(Error::invalid(format!("keypoint {} orientation out of range", k.id)));
            }
        }
        self.descriptor_width()?;
        Ok(())
    }
}

fn dataset_width(images: &[ImageFeatures]) -> Result<usize> {
    let mut width = None;
    for img in images {
        if let Some(w) = img.descriptor_width()? {
            match width {
                None => width = Some(w),
                Some(prev) if prev != w => return Err(Error::WidthMismatch { left: prev, right: w }),
                _ => {}
            }
        }
    }
    Ok(width.unwrap_or(DEFAULT_WIDTH_BITS))
}

pub fn encode_features(images: &[ImageFeatures]) -> Result<Vec<u8>> {
    let width = dataset_width(images)?;
    let mut w = Writer::default();
    w.bytes(GTBF_MAGIC);
    w.u16(GTBF_VERSION);
    w.u16(width as u16);
    w.len_u32(images.len());
    for img in images {
        img.validate()?;
        w.u64(img.image_id);
        match img.pose {
            Some(p) => {
                w.u8(1);
                w.f64(p.x_mm);
                w.f64(p.y_mm);
                w.f64(p.theta_deg);
            }
            None => w.u8(0),
        }
        w.len_u32(img.keypoints.len());
        for k in &img.keypoints {
            w.u32(k.id);
            w.f32(k.x);
            w.f32(k.y);
            w.f32(k.size);
            w.f32(k.orientation_deg);
            w.bytes(&k.descriptor.to_bytes());
        }
    }
    Ok(w.buf)
}

pub fn decode_features(buf: &[u8]) -> std::result::Result<Vec<ImageFeatures>, FormatError> {
    let mut r = Reader::new(buf);
    r.magic(GTBF_MAGIC)?;
    r.version("GTBF", GTBF_VERSION)?;
    let width_off = r.offset();
    let width = r.u16()? as usize;
    if width == 0 || !width.is_multiple_of(8) {
        return Err(r.invalid(
            width_off,
            format!("descriptor width {width} is not a positive multiple of 8"),
        ));
    }
    let desc_bytes = width / 8;
    let count = r.count(13)?;
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let image_id = r.u64()?;
        let flag_off = r.offset();
        let pose = match r.u8()? {
            0 => None,
            1 => {
                let (x, y, t) = (r.f64()?, r.f64()?, r.f64()?);
                Some(Pose2D::new(x, y, t))
            }
            other => return Err(r.invalid(flag_off, format!("has_pose flag {other}"))),
        };
        let n = r.count(20 + desc_bytes)?;
        let mut keypoints = Vec::with_capacity(n);
        let mut seen = HashSet::with_capacity(n);
        for _ in 0..n {
            let kp_off = r.offset();
            let id = r.u32()?;
            let x = r.f32()?;
            let y = r.f32()?;
            let size = r.f32()?;
            let orientation = r.f32()?;
            let descriptor = Descriptor::from_bytes(r.take(desc_bytes)?).expect("width validated");
            if !(size > 0.0) || !size.is_finite() {
                return Err(r.invalid(kp_off, format!("keypoint {id} has invalid size {size}")));
            }
            if !orientation.is_finite() {
                return Err(r.invalid(kp_off, format!("keypoint {id} has non-finite orientation")));
            }
            if !seen.insert(id) {
                return Err(r.invalid(kp_off, format!("duplicate keypoint id {id}")));
            }
            keypoints.push(Keypoint::new(id, x, y, size, orientation as f64, descriptor));
        }
        images.push(ImageFeatures {
            image_id,
            pose,
            keypoints,
        });
    }
    r.finish()?;
    Ok(images)
}

fn decode_json_lines(text: &str) -> std::result::Result<Vec<ImageFeatures>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut img: ImageFeatures = serde_json::from_str(line).map_err(|e| FormatError::Json {
            line: i + 1,
            reason: e.to_string(),
        })?;
        for k in &mut img.keypoints {
            k.orientation_deg = normalize_orientation(k.orientation_deg as f64);
        }
        img.validate().map_err(|e| FormatError::Json {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(img);
    }
    Ok(out)
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<Vec<ImageFeatures>> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::Io(e).at_path(path))?;
    let first = buf.iter().find(|b| !b.is_ascii_whitespace()).copied();
    let parsed = if buf.starts_with(GTBF_MAGIC) || first != Some(b'{') {
        decode_features(&buf)
    } else {
        let text = std::str::from_utf8(&buf).map_err(|e| FormatError::Invalid {
            offset: e.valid_up_to() as u64,
            reason: "JSON feature file is not UTF-8".into(),
        });
        text.and_then(decode_json_lines)
    };
    parsed.map_err(|e| Error::Parse(e).at_path(path))
}

pub fn write_feature_file(path: impl AsRef<Path>, images: &[ImageFeatures]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_features(images)?;
    fs::write(path, bytes).map_err(|e| Error::Io(e).at_path(path))
}

pub fn write_feature_file_json(path: impl AsRef<Path>, images: &[ImageFeatures]) -> Result<()> {
    let path = path.as_ref();
    let write = || -> std::io::Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        for img in images {
            serde_json::to_writer(&mut out, img).map_err(std::io::Error::other)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    };
    write().map_err(|e| Error::Io(e).at_path(path))
}
