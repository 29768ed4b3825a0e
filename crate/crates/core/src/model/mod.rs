//! The dual-branch gaze network.
//!
//! A shared eye encoder maps 16×16 eye images (near-eye source renders and
//! eye crops from target faces alike) to `d_e` features; a monocular affine
//! regressor turns source features into gaze. The face branch encodes both
//! eye crops and the face, fuses them with [`crate::sgf`] (or concatenates
//! them in the baseline) and regresses face gaze with a two-layer head.
//! The pose encoder is pretrained on landmarks and frozen; with the pose
//! module disabled the same architecture is trained from scratch instead.
//!
//! Parameters are a list of named blocks so checkpoints and optimizers can
//! treat them uniformly.

mod forward;
mod pose;

pub use forward::{
    alignment_features, encode_eye, forward_face, monocular_regress, predict_face, total_loss, total_loss_on_tape, Bound, FaceOutputs,
    JointLossReport, LossNodes, SourceBatch, TargetBatch,
};
pub use pose::{landmark_error_px, landmark_loss_on_tape, landmark_targets, pose_features, predict_landmarks, LANDMARK_SCALE};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::numerics::{Gradients, Matrix};
use crate::rng::stream;
use crate::sgf::{SgfConfig, SgfParams};
use crate::synth::LANDMARK_COUNT;
use crate::uda::UdaConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Subtracted from every pixel before the encoders.
    pub input_offset: f64,
    pub eye_pixels: usize,
    pub face_pixels: usize,
    pub eye_hidden: usize,
    pub d_e: usize,
    pub pose_hidden: usize,
    pub d_p: usize,
    pub sgf: SgfConfig,
    pub uda: UdaConfig,
    /// Source branch on: monocular eye loss plus the alignment loss.
    pub enable_uda: bool,
    /// Pretrained, frozen pose encoder; otherwise trained from scratch.
    pub enable_pose: bool,
    pub enable_sgf: bool,
    /// Use all `2b` target eye rows (with the source batch duplicated)
    /// instead of alternating left/right rows.
    pub uda_both_eyes: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_offset: 0.5,
            eye_pixels: 256,
            face_pixels: 1024,
            eye_hidden: 128,
            d_e: 32,
            pose_hidden: 64,
            d_p: 32,
            sgf: SgfConfig::default(),
            uda: UdaConfig::default(),
            enable_uda: true,
            enable_pose: true,
            enable_sgf: true,
            uda_both_eyes: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.input_offset.is_finite() {
            return invalid("input_offset must be finite");
        }
        if self.d_e < 2 {
            return invalid(format!("d_e must be >= 2, got {}", self.d_e));
        }
        if [self.eye_pixels, self.face_pixels, self.eye_hidden, self.pose_hidden, self.d_p].contains(&0) {
            return invalid("model widths must be positive");
        }
        if self.enable_sgf {
            self.sgf.validate(self.d_p)?;
        } else if self.sgf.d_g == 0 {
            return invalid("d_g must be positive");
        }
        self.uda.validate()
    }

    /// Input width of the face head.
    pub fn head_input(&self) -> usize {
        if self.enable_sgf {
            self.sgf.d_g
        } else {
            2 * self.d_e + self.d_p
        }
    }

    pub fn landmark_outputs(&self) -> usize {
        2 * LANDMARK_COUNT
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub value: Matrix,
    /// Updated by [`sgd_step`]. Frozen pose blocks and the similarity MLP
    /// (which only shapes the hard top-k adjacency) are not.
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HarlParams {
    pub blocks: Vec<ParamBlock>,
}

fn he<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Matrix {
    let s = (gain / rows as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| s * rng.sample::<f64, _>(StandardNormal))
}

impl HarlParams {
    /// Random initialization. Each block draws from its own stream.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::new();
        let mut push = |name: &str, value: Matrix, trainable: bool| {
            blocks.push(ParamBlock { name: name.to_string(), value, trainable })
        };
        let rng = |name: &str| stream(seed, name, 0);
        let (p, h, d_e) = (cfg.eye_pixels, cfg.eye_hidden, cfg.d_e);
        push("eye.w1", he(p, h, 2.0, &mut rng("eye.w1")), true);
        push("eye.b1", Matrix::zeros(1, h), true);
        push("eye.w2", he(h, d_e, 1.0, &mut rng("eye.w2")), true);
        push("eye.b2", Matrix::zeros(1, d_e), true);

        let pose_trainable = !cfg.enable_pose;
        let (f, ph, d_p, lm) = (cfg.face_pixels, cfg.pose_hidden, cfg.d_p, cfg.landmark_outputs());
        push("pose.w1", he(f, ph, 2.0, &mut rng("pose.w1")), pose_trainable);
        push("pose.b1", Matrix::zeros(1, ph), pose_trainable);
        push("pose.w2", he(ph, d_p, 2.0, &mut rng("pose.w2")), pose_trainable);
        push("pose.b2", Matrix::zeros(1, d_p), pose_trainable);
        push("pose.w3", he(d_p, lm, 1.0, &mut rng("pose.w3")), pose_trainable);
        push("pose.b3", Matrix::zeros(1, lm), pose_trainable);

        push("reg.w", he(d_e, 2, 1.0, &mut rng("reg.w")), true);
        push("reg.b", Matrix::zeros(1, 2), true);

        if cfg.enable_sgf {
            let s = SgfParams::init(2 * d_e, &cfg.sgf, &mut rng("sgf"));
            push("sgf.sim_w1", s.sim_w1, false);
            push("sgf.sim_b1", s.sim_b1, false);
            push("sgf.sim_w2", s.sim_w2, false);
            push("sgf.sim_b2", s.sim_b2, false);
            push("sgf.layers", s.layers, true);
            push("sgf.readout_w", s.readout_w, true);
            push("sgf.readout_b", s.readout_b, true);
        }

        let (hin, d_g) = (cfg.head_input(), cfg.sgf.d_g);
        push("head.w1", he(hin, d_g, 2.0, &mut rng("head.w1")), true);
        push("head.b1", Matrix::zeros(1, d_g), true);
        push("head.w2", he(d_g, 2, 1.0, &mut rng("head.w2")), true);
        push("head.b2", Matrix::zeros(1, 2), true);
        Ok(Self { blocks })
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    /// Panics on unknown names; the layout is fixed by [`HarlParams::init`].
    pub fn get(&self, name: &str) -> &Matrix {
        &self.blocks[self.index_of(name).unwrap_or_else(|| panic!("no parameter block {name}"))].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Matrix {
        let i = self.index_of(name).unwrap_or_else(|| panic!("no parameter block {name}"));
        &mut self.blocks[i].value
    }

    pub fn has(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }

    /// Marks every pose block frozen (or trainable).
    pub fn set_pose_frozen(&mut self, frozen: bool) {
        for b in self.blocks.iter_mut().filter(|b| b.name.starts_with("pose.")) {
            b.trainable = !frozen;
        }
    }

    pub fn pose_frozen(&self) -> bool {
        self.blocks.iter().filter(|b| b.name.starts_with("pose.")).all(|b| !b.trainable)
    }

    /// Copies the pose blocks of `other` into `self`.
    pub fn load_pose_from(&mut self, other: &HarlParams) -> Result<()> {
        for b in other.blocks.iter().filter(|b| b.name.starts_with("pose.")) {
            let i = self.index_of(&b.name).ok_or_else(|| Error::InvalidInput(format!("no block {}", b.name)))?;
            if self.blocks[i].value.shape() != b.value.shape() {
                return invalid(format!("pose block {} has shape {:?}, expected {:?}", b.name, b.value.shape(), self.blocks[i].value.shape()));
            }
            self.blocks[i].value = b.value.clone();
        }
        Ok(())
    }

    /// SGF parameters in their typed form.
    pub fn sgf(&self) -> Option<SgfParams> {
        if !self.has("sgf.layers") {
            return None;
        }
        Some(SgfParams {
            sim_w1: self.get("sgf.sim_w1").clone(),
            sim_b1: self.get("sgf.sim_b1").clone(),
            sim_w2: self.get("sgf.sim_w2").clone(),
            sim_b2: self.get("sgf.sim_b2").clone(),
            layers: self.get("sgf.layers").clone(),
            readout_w: self.get("sgf.readout_w").clone(),
            readout_b: self.get("sgf.readout_b").clone(),
        })
    }

    /// Checks that the block layout matches what `cfg` would initialize.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = HarlParams::init(cfg, 0)?;
        if reference.blocks.len() != self.blocks.len() {
            return invalid(format!("expected {} parameter blocks, found {}", reference.blocks.len(), self.blocks.len()));
        }
        for (r, b) in reference.blocks.iter().zip(&self.blocks) {
            if r.name != b.name || r.value.shape() != b.value.shape() {
                return invalid(format!(
                    "parameter block mismatch: expected {} {:?}, found {} {:?}",
                    r.name,
                    r.value.shape(),
                    b.name,
                    b.value.shape()
                ));
            }
        }
        Ok(())
    }
}

/// Gradients per block, aligned with [`HarlParams::blocks`]; `None` where
/// the loss does not reach a block.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads(pub Vec<Option<Matrix>>);

impl ParamGrads {
    pub fn collect(grads: &Gradients, bound: &Bound) -> Self {
        Self(bound.ids().iter().map(|id| grads.get(*id).cloned()).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().map(Matrix::max_abs).fold(0.0, f64::max)
    }
}

/// `θ ← θ − lr·∇θ` on every trainable block with a gradient.
///
/// Nothing is changed if any gradient is non-finite.
pub fn sgd_step(params: &mut HarlParams, grads: &ParamGrads, lr: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return invalid(format!("learning rate must be finite and >= 0, got {lr}"));
    }
    if grads.0.len() != params.blocks.len() {
        return invalid("gradient list does not match the parameter blocks");
    }
    for (b, g) in params.blocks.iter().zip(&grads.0) {
        if let Some(g) = g {
            if g.shape() != b.value.shape() {
                return invalid(format!("gradient for {} has shape {:?}", b.name, g.shape()));
            }
            if b.trainable && !g.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for {}", b.name)));
            }
        }
    }
    for (b, g) in params.blocks.iter_mut().zip(&grads.0) {
        if let (true, Some(g)) = (b.trainable, g) {
            for (v, d) in b.value.data_mut().iter_mut().zip(g.data()) {
                *v -= lr * d;
            }
        }
    }
    Ok(())
}

/// One joint step: loss, backward, SGD. Returns the pre-update report.
pub fn train_step(params: &mut HarlParams, src: &SourceBatch, tgt: &TargetBatch, cfg: &ModelConfig, lr: f64) -> Result<JointLossReport> {
    let mut tape = crate::numerics::Tape::new();
    let bound = Bound::bind(&mut tape, params);
    let (nodes, report) = total_loss_on_tape(&mut tape, &bound, src, tgt, cfg)?;
    if !report.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {}", report.total)));
    }
    let grads = tape.backward(nodes.total)?;
    sgd_step(params, &ParamGrads::collect(&grads, &bound), lr)?;
    Ok(report)
}

#[cfg(test)]
mod tests;
