use std::rc::Rc;

use crate::error::{invalid, Result};
use crate::model::{HarlParams, ModelConfig};
use crate::numerics::{Matrix, NodeId, Tape};
use crate::sgf::{batch_adjacency, sgf_forward_on_tape, SgfNodes, SgfParams};
use crate::synth::{Domain, GazeAngles, Sample};
use crate::uda::{uda_loss_on_tape, AlignmentReport};

/// Tape handles for every parameter block, aligned with [`HarlParams::blocks`].
#[derive(Clone, Debug)]
pub struct Bound {
    ids: Vec<NodeId>,
    names: Vec<String>,
}

impl Bound {
    /// Trainable blocks become tape parameters, the rest constants.
    pub fn bind(tape: &mut Tape, params: &HarlParams) -> Self {
        Self::bind_with(tape, params, &[])
    }

    /// As [`Bound::bind`], but block `i` uses the given node for every
    /// `(i, node)` in `overrides`.
    pub fn bind_with(tape: &mut Tape, params: &HarlParams, overrides: &[(usize, NodeId)]) -> Self {
        let ids = params
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| match overrides.iter().find(|(j, _)| *j == i) {
                Some(&(_, id)) => id,
                None if b.trainable => tape.param(b.value.clone()),
                None => tape.constant(b.value.clone()),
            })
            .collect();
        Self { ids, names: params.blocks.iter().map(|b| b.name.clone()).collect() }
    }

    /// Every block as a constant; nothing records gradients.
    pub fn bind_constant(tape: &mut Tape, params: &HarlParams) -> Self {
        let ids = params.blocks.iter().map(|b| tape.constant(b.value.clone())).collect();
        Self { ids, names: params.blocks.iter().map(|b| b.name.clone()).collect() }
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn id(&self, name: &str) -> NodeId {
        let i = self.names.iter().position(|n| n == name).unwrap_or_else(|| panic!("no parameter block {name}"));
        self.ids[i]
    }
}

/// Source-domain batch: one eye image per row, with its gaze label.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceBatch {
    pub eyes: Matrix,
    /// `b x 2` (pitch, yaw).
    pub gaze: Matrix,
}

/// Target-domain batch: both eye crops and the face per row, face gaze labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBatch {
    pub left: Matrix,
    pub right: Matrix,
    pub face: Matrix,
    pub gaze: Matrix,
}

fn gaze_matrix(labels: impl Iterator<Item = GazeAngles>) -> Matrix {
    let rows: Vec<[f64; 2]> = labels.map(|g| [g.pitch, g.yaw]).collect();
    Matrix::from_fn(rows.len(), 2, |i, j| rows[i][j])
}

fn image_rows<'a>(images: impl Iterator<Item = &'a Matrix>) -> Matrix {
    let flat: Vec<&Matrix> = images.collect();
    Matrix::from_fn(flat.len(), flat[0].len(), |i, j| flat[i].data()[j])
}

impl SourceBatch {
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return invalid("empty source batch");
        }
        if samples.iter().any(|s| s.domain != Domain::Source || s.eye_gaze.is_empty()) {
            return invalid("source batch needs source samples with eye labels");
        }
        Ok(Self { eyes: image_rows(samples.iter().map(|s| &s.left_eye)), gaze: gaze_matrix(samples.iter().map(|s| s.eye_gaze[0])) })
    }

    pub fn len(&self) -> usize {
        self.eyes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TargetBatch {
    /// Fails on samples without both eye crops and a face.
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return invalid("empty target batch");
        }
        for (i, s) in samples.iter().enumerate() {
            if s.right_eye.is_none() || s.face.is_none() {
                return invalid(format!("sample {i} is missing an eye crop or the face image"));
            }
        }
        Ok(Self {
            left: image_rows(samples.iter().map(|s| &s.left_eye)),
            right: image_rows(samples.iter().map(|s| s.right_eye.as_ref().unwrap())),
            face: image_rows(samples.iter().map(|s| s.face.as_ref().unwrap())),
            gaze: gaze_matrix(samples.iter().map(|s| s.face_gaze)),
        })
    }

    pub fn len(&self) -> usize {
        self.left.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_width(m: &Matrix, width: usize, what: &str) -> Result<()> {
    if m.cols() != width {
        return invalid(format!("{what} rows must have {width} pixels, got {}", m.cols()));
    }
    Ok(())
}

/// Shared eye encoder on a `b x pixels` constant batch.
fn eye_features(tape: &mut Tape, bound: &Bound, images: &Matrix, offset: f64) -> NodeId {
    let x = tape.constant(images.map(|v| v - offset));
    let h = tape.affine(x, bound.id("eye.w1"), bound.id("eye.b1"));
    let h = tape.relu(h);
    tape.affine(h, bound.id("eye.w2"), bound.id("eye.b2"))
}

/// Penultimate pose features (`b x d_p`) of a `b x face_pixels` batch.
pub(crate) fn pose_penultimate(tape: &mut Tape, bound: &Bound, faces: &Matrix, offset: f64) -> NodeId {
    let x = tape.constant(faces.map(|v| v - offset));
    let h = tape.affine(x, bound.id("pose.w1"), bound.id("pose.b1"));
    let h = tape.relu(h);
    let z = tape.affine(h, bound.id("pose.w2"), bound.id("pose.b2"));
    tape.relu(z)
}

/// Face-branch node handles.
#[derive(Clone, Copy, Debug)]
pub struct FaceNodes {
    pub pred: NodeId,
    pub z_le: NodeId,
    pub z_re: NodeId,
    pub z_p: NodeId,
    pub z_g: NodeId,
}

fn sgf_params_on_tape(tape: &Tape, bound: &Bound) -> SgfParams {
    let v = |n: &str| tape.value(bound.id(n)).clone();
    SgfParams {
        sim_w1: v("sgf.sim_w1"),
        sim_b1: v("sgf.sim_b1"),
        sim_w2: v("sgf.sim_w2"),
        sim_b2: v("sgf.sim_b2"),
        layers: v("sgf.layers"),
        readout_w: v("sgf.readout_w"),
        readout_b: v("sgf.readout_b"),
    }
}

pub(crate) fn face_on_tape(tape: &mut Tape, bound: &Bound, tgt: &TargetBatch, cfg: &ModelConfig) -> Result<FaceNodes> {
    check_width(&tgt.left, cfg.eye_pixels, "left eye")?;
    check_width(&tgt.right, cfg.eye_pixels, "right eye")?;
    check_width(&tgt.face, cfg.face_pixels, "face")?;
    let z_le = eye_features(tape, bound, &tgt.left, cfg.input_offset);
    let z_re = eye_features(tape, bound, &tgt.right, cfg.input_offset);
    let z_p = pose_penultimate(tape, bound, &tgt.face, cfg.input_offset);
    let (fused, head_in) = if cfg.enable_sgf {
        let gaze = tape.hstack(&[z_le, z_re]);
        let sim = sgf_params_on_tape(tape, bound);
        let adjacency = Rc::new(batch_adjacency(tape.value(gaze), tape.value(z_p), &sim, cfg.sgf.k)?);
        let nodes = SgfNodes { layers: bound.id("sgf.layers"), readout_w: bound.id("sgf.readout_w"), readout_b: bound.id("sgf.readout_b") };
        let z_g = sgf_forward_on_tape(tape, gaze, z_p, &nodes, &sim, adjacency, &cfg.sgf)?;
        (Some(z_g), z_g)
    } else {
        (None, tape.hstack(&[z_le, z_re, z_p]))
    };
    let h = tape.affine(head_in, bound.id("head.w1"), bound.id("head.b1"));
    let h = tape.relu(h);
    let pred = tape.affine(h, bound.id("head.w2"), bound.id("head.b2"));
    // Without fusion the head's hidden layer plays the role of the fused feature.
    let z_g = fused.unwrap_or(h);
    Ok(FaceNodes { pred, z_le, z_re, z_p, z_g })
}

/// Values of one face-branch evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceOutputs {
    /// `b x 2` (pitch, yaw).
    pub pred: Matrix,
    pub z_le: Matrix,
    pub z_re: Matrix,
    pub z_p: Matrix,
    pub z_g: Matrix,
}

impl FaceOutputs {
    pub fn gaze(&self, i: usize) -> GazeAngles {
        GazeAngles::new(self.pred.get(i, 0), self.pred.get(i, 1))
    }
}

/// Face-branch prediction for a whole target batch, without gradients.
pub fn predict_face(params: &HarlParams, tgt: &TargetBatch, cfg: &ModelConfig) -> Result<FaceOutputs> {
    let mut tape = Tape::new();
    let bound = Bound::bind_constant(&mut tape, params);
    let n = face_on_tape(&mut tape, &bound, tgt, cfg)?;
    Ok(FaceOutputs {
        pred: tape.value(n.pred).clone(),
        z_le: tape.value(n.z_le).clone(),
        z_re: tape.value(n.z_re).clone(),
        z_p: tape.value(n.z_p).clone(),
        z_g: tape.value(n.z_g).clone(),
    })
}

/// Face-branch prediction for one target sample.
pub fn forward_face(sample: &Sample, params: &HarlParams, cfg: &ModelConfig) -> Result<FaceOutputs> {
    predict_face(params, &TargetBatch::from_samples(std::slice::from_ref(sample))?, cfg)
}

/// Eye features of one `eye x eye` image, or of each row of a `b x pixels`
/// batch.
pub fn encode_eye(images: &Matrix, params: &HarlParams, cfg: &ModelConfig) -> Result<Matrix> {
    let batch = if images.len() == cfg.eye_pixels && images.cols() != cfg.eye_pixels {
        Matrix::new(1, images.len(), images.data().to_vec())?
    } else {
        images.clone()
    };
    check_width(&batch, cfg.eye_pixels, "eye image")?;
    let mut tape = Tape::new();
    let bound = Bound::bind_constant(&mut tape, params);
    let z = eye_features(&mut tape, &bound, &batch, cfg.input_offset);
    Ok(tape.value(z).clone())
}

/// Monocular affine regressor on one feature vector.
pub fn monocular_regress(z: &[f64], params: &HarlParams) -> Result<GazeAngles> {
    let (w, b) = (params.get("reg.w"), params.get("reg.b"));
    if z.len() != w.rows() {
        return invalid(format!("feature has {} entries, regressor expects {}", z.len(), w.rows()));
    }
    let out = Matrix::row_vector(z).matmul(w).add(b);
    Ok(GazeAngles::new(out.get(0, 0), out.get(0, 1)))
}

/// Value of every term of the joint objective.
#[derive(Clone, Debug, PartialEq)]
pub struct JointLossReport {
    pub face_mse: f64,
    pub eye_mse: f64,
    pub angle: f64,
    pub scale: f64,
    pub uda: f64,
    pub lambda: f64,
    /// `face_mse + eye_mse + lambda·uda`.
    pub total: f64,
    pub alignment: Option<AlignmentReport>,
}

impl JointLossReport {
    /// Recomputes the total from its parts.
    pub fn recombined(&self) -> f64 {
        self.face_mse + self.eye_mse + self.lambda * self.uda
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub face_mse: NodeId,
    pub eye_mse: Option<NodeId>,
    pub uda: Option<NodeId>,
    pub face: FaceNodes,
    pub z_s: Option<NodeId>,
    pub z_t: Option<NodeId>,
}

/// Target eye rows fed to the alignment loss: alternating left/right crops,
/// or all `2b` crops when `both` is set.
fn target_eye_rows(tgt: &TargetBatch, both: bool) -> Matrix {
    if both {
        return Matrix::vstack(&[&tgt.left, &tgt.right]);
    }
    Matrix::from_fn(tgt.len(), tgt.left.cols(), |i, j| if i % 2 == 0 { tgt.left.get(i, j) } else { tgt.right.get(i, j) })
}

/// Records the joint objective `MSE(face) + MSE(eye) + λ·L_uda` on `tape`.
///
/// With `enable_uda` off the source batch is ignored and only the face
/// term remains.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    bound: &Bound,
    src: &SourceBatch,
    tgt: &TargetBatch,
    cfg: &ModelConfig,
) -> Result<(LossNodes, JointLossReport)> {
    cfg.validate()?;
    if tgt.gaze.shape() != (tgt.len(), 2) {
        return invalid("target labels must be b x 2");
    }
    let face = face_on_tape(tape, bound, tgt, cfg)?;
    let face_mse = tape.mse(face.pred, &tgt.gaze);
    let lambda = cfg.uda.lambda_weight;

    if !cfg.enable_uda {
        let report = JointLossReport {
            face_mse: tape.scalar(face_mse),
            eye_mse: 0.0,
            angle: 0.0,
            scale: 0.0,
            uda: 0.0,
            lambda,
            total: tape.scalar(face_mse),
            alignment: None,
        };
        let nodes = LossNodes { total: face_mse, face_mse, eye_mse: None, uda: None, face, z_s: None, z_t: None };
        return Ok((nodes, report));
    }

    if src.len() != tgt.len() {
        return invalid(format!("source and target batch sizes differ ({} vs {})", src.len(), tgt.len()));
    }
    check_width(&src.eyes, cfg.eye_pixels, "source eye")?;
    let z_src = eye_features(tape, bound, &src.eyes, cfg.input_offset);
    let eye_pred = tape.affine(z_src, bound.id("reg.w"), bound.id("reg.b"));
    let eye_mse = tape.mse(eye_pred, &src.gaze);

    let z_s = if cfg.uda_both_eyes { eye_features(tape, bound, &Matrix::vstack(&[&src.eyes, &src.eyes]), cfg.input_offset) } else { z_src };
    let z_t = eye_features(tape, bound, &target_eye_rows(tgt, cfg.uda_both_eyes), cfg.input_offset);
    let (uda_nodes, alignment) = uda_loss_on_tape(tape, z_s, z_t, &cfg.uda)?;
    let weighted = tape.scale(uda_nodes.total, lambda);
    let supervised = tape.add(face_mse, eye_mse);
    let total = tape.add(supervised, weighted);

    let report = JointLossReport {
        face_mse: tape.scalar(face_mse),
        eye_mse: tape.scalar(eye_mse),
        angle: alignment.angle,
        scale: alignment.scale,
        uda: alignment.total,
        lambda,
        total: tape.scalar(total),
        alignment: Some(alignment),
    };
    let nodes = LossNodes { total, face_mse, eye_mse: Some(eye_mse), uda: Some(uda_nodes.total), face, z_s: Some(z_s), z_t: Some(z_t) };
    Ok((nodes, report))
}

/// Value-only joint objective.
pub fn total_loss(params: &HarlParams, src: &SourceBatch, tgt: &TargetBatch, cfg: &ModelConfig) -> Result<JointLossReport> {
    let mut tape = Tape::new();
    let bound = Bound::bind_constant(&mut tape, params);
    Ok(total_loss_on_tape(&mut tape, &bound, src, tgt, cfg)?.1)
}

/// The two batches the alignment loss compares, `(Z_s, Z_t)`.
pub fn alignment_features(params: &HarlParams, src: &SourceBatch, tgt: &TargetBatch, cfg: &ModelConfig) -> Result<(Matrix, Matrix)> {
    let cfg = ModelConfig { enable_uda: true, ..cfg.clone() };
    let mut tape = Tape::new();
    let bound = Bound::bind_constant(&mut tape, params);
    let (nodes, _) = total_loss_on_tape(&mut tape, &bound, src, tgt, &cfg)?;
    Ok((tape.value(nodes.z_s.unwrap()).clone(), tape.value(nodes.z_t.unwrap()).clone()))
}
