//! Sample container written by `gen-data`, plus PGM dumps.
//!
//! Layout, little-endian:
//!
//! ```text
//! "HARLDATA"            8 bytes magic
//! version               u32 (currently 1)
//! config echo           u32 length + UTF-8
//! sample count          u32
//! per sample:
//!   domain              u8 (0 source, 1 target)
//!   face gaze           2 x f64 (pitch, yaw)
//!   head pose           3 x f64 (pitch, yaw, roll)
//!   eye gaze count      u32, then 2 x f64 each
//!   landmarks flag      u8, then 10 x f64 if set
//!   left eye            u32 rows, u32 cols, row-major f64
//!   right eye flag      u8, then a matrix if set
//!   face flag           u8, then a matrix if set
//! ```

use std::fs;
use std::path::Path;

use harl::synth::{Domain, GazeAngles, HeadPose, Landmarks, Sample, LANDMARK_COUNT};
use harl::Matrix;

use crate::checkpoint::{put_matrix, put_str, put_u32, Reader};
use crate::error::{HarnessError, Result};

pub const DATA_MAGIC: &[u8; 8] = b"HARLDATA";
pub const DATA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DataFile {
    pub config_echo: String,
    pub samples: Vec<Sample>,
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_opt(out: &mut Vec<u8>, m: Option<&Matrix>) -> Result<()> {
    out.push(m.is_some() as u8);
    if let Some(m) = m {
        put_matrix(out, m)?;
    }
    Ok(())
}

fn flag(r: &mut Reader) -> Result<bool> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(HarnessError::Format(format!("bad flag byte {v}"))),
    }
}

impl DataFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(DATA_MAGIC);
        out.extend_from_slice(&DATA_VERSION.to_le_bytes());
        put_str(&mut out, &self.config_echo)?;
        put_u32(&mut out, self.samples.len())?;
        for s in &self.samples {
            out.push(match s.domain {
                Domain::Source => 0,
                Domain::Target => 1,
            });
            put_f64s(&mut out, &[s.face_gaze.pitch, s.face_gaze.yaw]);
            put_f64s(&mut out, &[s.head_pose.pitch, s.head_pose.yaw, s.head_pose.roll]);
            put_u32(&mut out, s.eye_gaze.len())?;
            for g in &s.eye_gaze {
                put_f64s(&mut out, &[g.pitch, g.yaw]);
            }
            out.push(s.landmarks.is_some() as u8);
            if let Some(l) = &s.landmarks {
                put_f64s(&mut out, &l.flatten());
            }
            put_matrix(&mut out, &s.left_eye)?;
            put_opt(&mut out, s.right_eye.as_ref())?;
            put_opt(&mut out, s.face.as_ref())?;
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.take(8).ok() != Some(DATA_MAGIC.as_slice()) {
            return Err(HarnessError::Format("not a data file (bad magic)".into()));
        }
        let version = r.u32()? as u32;
        if version != DATA_VERSION {
            return Err(HarnessError::Format(format!("unsupported data version {version}")));
        }
        let config_echo = r.str()?;
        let count = r.u32()?;
        let mut samples = Vec::new();
        for _ in 0..count {
            let domain = match r.u8()? {
                0 => Domain::Source,
                1 => Domain::Target,
                v => return Err(HarnessError::Format(format!("bad domain tag {v}"))),
            };
            let face_gaze = GazeAngles::new(r.f64()?, r.f64()?);
            let head_pose = HeadPose { pitch: r.f64()?, yaw: r.f64()?, roll: r.f64()? };
            let n = r.u32()?;
            let eye_gaze = (0..n).map(|_| Ok(GazeAngles::new(r.f64()?, r.f64()?))).collect::<Result<Vec<_>>>()?;
            let landmarks = if flag(&mut r)? {
                let v = (0..2 * LANDMARK_COUNT).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                Some(Landmarks::from_flat(&v))
            } else {
                None
            };
            let left_eye = r.matrix()?;
            let right_eye = if flag(&mut r)? { Some(r.matrix()?) } else { None };
            let face = if flag(&mut r)? { Some(r.matrix()?) } else { None };
            samples.push(Sample { domain, left_eye, right_eye, face, face_gaze, eye_gaze, landmarks, head_pose });
        }
        r.finish()?;
        Ok(Self { config_echo, samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// 8-bit binary PGM (P5); values are clamped to `[0, 1]`.
pub fn pgm_bytes(img: &Matrix) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.cols(), img.rows()).into_bytes();
    out.extend(img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Writes every image of every sample to `dir` as
/// `{index:05}_{domain}_{left|right|face}.pgm`. Returns the file count.
pub fn dump_pgm(samples: &[Sample], dir: &Path) -> Result<usize> {
    fs::create_dir_all(dir)?;
    let mut count = 0;
    for (i, s) in samples.iter().enumerate() {
        let tag = s.domain.tag();
        let images = [("left", Some(&s.left_eye)), ("right", s.right_eye.as_ref()), ("face", s.face.as_ref())];
        for (name, img) in images {
            if let Some(img) = img {
                fs::write(dir.join(format!("{i:05}_{tag}_{name}.pgm")), pgm_bytes(img))?;
                count += 1;
            }
        }
    }
    Ok(count)
}
