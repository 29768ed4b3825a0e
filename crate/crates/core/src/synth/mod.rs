//! Procedural hybrid-domain gaze world.
//!
//! Source samples are sharp single-eye renders carrying monocular gaze labels.
//! Target samples are degraded face renders with two eye crops, a face gaze
//! label, landmarks and head pose. The gap between them is controlled by the
//! noise, blur and brightness knobs of [`WorldConfig`].

mod batch;
mod geometry;
mod render;

pub use batch::{iris_edge_contrast, sample_batch};
pub use geometry::{angular_error, gaze_to_vector, GazeAngles, HeadPose};
pub use render::{
    blur, crop, crop_eye, eye_gaze_for, iris_centroid, render_eye, render_face, render_face_clean, Landmarks,
    EYE_SHIFT_PER_RAD, IRIS_RADIUS, IRIS_SHIFT, LANDMARK_COUNT, POSE_GAZE_COUPLING,
};

use crate::error::{invalid, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "source" => Some(Domain::Source),
            "target" => Some(Domain::Target),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    /// Gaze pitch and yaw are drawn from `[-max, max]` (radians).
    pub gaze_pitch_max: f64,
    pub gaze_yaw_max: f64,
    /// Head pitch, yaw, roll bound (radians).
    pub head_max: f64,
    pub sigma_source: f64,
    pub sigma_target: f64,
    /// Binomial blur width for target renders; 1 disables.
    pub blur_width: usize,
    /// Target brightness offset drawn from `[-j, j]`.
    pub brightness_jitter: f64,
    pub eye_size: usize,
    pub face_size: usize,
    pub supersample: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            gaze_pitch_max: 30f64.to_radians(),
            gaze_yaw_max: 30f64.to_radians(),
            head_max: 15f64.to_radians(),
            sigma_source: 0.01,
            sigma_target: 0.05,
            blur_width: 3,
            brightness_jitter: 0.2,
            eye_size: 16,
            face_size: 32,
            supersample: 2,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [self.gaze_pitch_max, self.gaze_yaw_max, self.head_max];
        if ranges.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return invalid("angle ranges must be positive and finite");
        }
        if self.gaze_pitch_max > std::f64::consts::FRAC_PI_2 {
            return invalid("gaze pitch range exceeds pi/2");
        }
        for (name, v) in [
            ("sigma_source", self.sigma_source),
            ("sigma_target", self.sigma_target),
            ("brightness_jitter", self.brightness_jitter),
        ] {
            if !v.is_finite() || v < 0.0 {
                return invalid(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.blur_width == 0 || self.blur_width.is_multiple_of(2) {
            return invalid(format!("blur_width must be odd, got {}", self.blur_width));
        }
        if self.eye_size < 4 || !self.eye_size.is_multiple_of(2) {
            return invalid(format!("eye_size must be even and >= 4, got {}", self.eye_size));
        }
        if self.face_size != 2 * self.eye_size {
            return invalid(format!("face_size must be 2 * eye_size, got {}", self.face_size));
        }
        if self.supersample == 0 {
            return invalid("supersample must be >= 1");
        }
        Ok(())
    }

    /// Evaluation world for cross-domain tests: target noise doubled, blur
    /// widened by 2, brightness range scaled by 1.5. Everything else is kept.
    pub fn shifted(&self) -> Self {
        Self {
            sigma_target: self.sigma_target * 2.0,
            blur_width: self.blur_width + 2,
            brightness_jitter: self.brightness_jitter * 1.5,
            ..self.clone()
        }
    }

    pub fn eye_pixels(&self) -> usize {
        self.eye_size * self.eye_size
    }

    pub fn face_pixels(&self) -> usize {
        self.face_size * self.face_size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub domain: Domain,
    /// Source samples keep their single eye here.
    pub left_eye: Matrix,
    pub right_eye: Option<Matrix>,
    pub face: Option<Matrix>,
    pub face_gaze: GazeAngles,
    /// Per-eye labels; empty for target samples.
    pub eye_gaze: Vec<GazeAngles>,
    pub landmarks: Option<Landmarks>,
    pub head_pose: HeadPose,
}

impl Sample {
    /// Gaze label the model is supervised with in this sample's domain.
    pub fn label(&self) -> GazeAngles {
        match self.domain {
            Domain::Source => self.eye_gaze[0],
            Domain::Target => self.face_gaze,
        }
    }
}
