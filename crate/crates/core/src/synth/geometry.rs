use std::f64::consts::PI;

/// Pitch/yaw gaze direction in radians.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct GazeAngles {
    pub pitch: f64,
    pub yaw: f64,
}

impl GazeAngles {
    pub const fn new(pitch: f64, yaw: f64) -> Self {
        Self { pitch, yaw }
    }

    pub fn from_degrees(pitch: f64, yaw: f64) -> Self {
        Self { pitch: pitch.to_radians(), yaw: yaw.to_radians() }
    }

    pub fn is_valid(&self) -> bool {
        self.pitch.is_finite() && self.yaw.is_finite() && self.pitch.abs() <= PI / 2.0 && self.yaw.abs() <= PI
    }
}

/// Head rotation in radians.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct HeadPose {
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
}

/// `(cos φ sin ψ, sin φ, cos φ cos ψ)`.
pub fn gaze_to_vector(a: GazeAngles) -> [f64; 3] {
    let (sp, cp) = a.pitch.sin_cos();
    let (sy, cy) = a.yaw.sin_cos();
    [cp * sy, sp, cp * cy]
}

/// Angle between two gaze directions, in degrees.
pub fn angular_error(a: GazeAngles, b: GazeAngles) -> f64 {
    let (u, v) = (gaze_to_vector(a), gaze_to_vector(b));
    let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    dot.clamp(-1.0, 1.0).acos().to_degrees()
}
