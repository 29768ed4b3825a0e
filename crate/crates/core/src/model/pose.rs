//! Landmark regression for the pose encoder.
//!
//! Targets are landmark coordinates relative to the face center, divided by
//! `LANDMARK_SCALE · face_size`.

use crate::error::{invalid, Result};
use crate::model::forward::{pose_penultimate, Bound};
use crate::model::{HarlParams, ModelConfig};
use crate::numerics::{Matrix, NodeId, Tape};
use crate::synth::{Landmarks, LANDMARK_COUNT};

pub const LANDMARK_SCALE: f64 = 0.25;

/// `b x 10` normalized landmark targets.
pub fn landmark_targets(landmarks: &[Landmarks], face_size: usize) -> Matrix {
    let (c, s) = (face_size as f64 / 2.0, LANDMARK_SCALE * face_size as f64);
    let flat: Vec<Vec<f64>> = landmarks.iter().map(|l| l.flatten().iter().map(|v| (v - c) / s).collect()).collect();
    Matrix::from_fn(flat.len(), 2 * LANDMARK_COUNT, |i, j| flat[i][j])
}

fn landmark_head(tape: &mut Tape, bound: &Bound, faces: &Matrix, cfg: &ModelConfig) -> NodeId {
    let z = pose_penultimate(tape, bound, faces, cfg.input_offset);
    tape.affine(z, bound.id("pose.w3"), bound.id("pose.b3"))
}

/// Mean squared error of the landmark head in normalized units.
pub fn landmark_loss_on_tape(tape: &mut Tape, bound: &Bound, faces: &Matrix, targets: &Matrix, cfg: &ModelConfig) -> Result<NodeId> {
    if faces.rows() != targets.rows() || targets.cols() != 2 * LANDMARK_COUNT {
        return invalid("landmark targets must be b x 10 and match the face batch");
    }
    let out = landmark_head(tape, bound, faces, cfg);
    if tape.value(out).shape() != targets.shape() {
        return invalid("landmark head width does not match the targets");
    }
    Ok(tape.mse(out, targets))
}

/// Predicted landmarks in face-pixel coordinates.
pub fn predict_landmarks(params: &HarlParams, faces: &Matrix, face_size: usize, cfg: &ModelConfig) -> Vec<Landmarks> {
    let mut tape = Tape::new();
    let bound = Bound::bind_constant(&mut tape, params);
    let out = landmark_head(&mut tape, &bound, faces, cfg);
    let (c, s) = (face_size as f64 / 2.0, LANDMARK_SCALE * face_size as f64);
    let out = tape.value(out);
    (0..out.rows()).map(|i| Landmarks::from_flat(&out.row(i).iter().map(|v| c + s * v).collect::<Vec<_>>())).collect()
}

/// Mean Euclidean landmark error in pixels over all points of all faces.
pub fn landmark_error_px(params: &HarlParams, faces: &Matrix, truth: &[Landmarks], face_size: usize, cfg: &ModelConfig) -> f64 {
    let pred = predict_landmarks(params, faces, face_size, cfg);
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        for (a, b) in p.points().iter().zip(t.points().iter()) {
            total += ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        }
    }
    total / (truth.len() * LANDMARK_COUNT) as f64
}

/// Penultimate pose features `Z_p` for a `b x face_pixels` batch.
pub fn pose_features(params: &HarlParams, faces: &Matrix, cfg: &ModelConfig) -> Matrix {
    let mut tape = Tape::new();
    let bound = Bound::bind_constant(&mut tape, params);
    let z = pose_penultimate(&mut tape, &bound, faces, cfg.input_offset);
    tape.value(z).clone()
}
