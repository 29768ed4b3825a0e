//! Pose pretraining, the joint training loop, evaluation and feature dumps.
//!
//! Every data stream is keyed off the run seed: training batches come from
//! the world `derive_seed(seed, "train-world", world.seed)` with batch index
//! = step, evaluation samples from a separate evaluation-only world, and
//! parameters from `derive_seed(seed, "init", 0)`. Variants that share a
//! seed therefore see identical data.

use std::fs;
use std::path::Path;
use std::time::Instant;

use harl::model::{
    landmark_error_px, landmark_loss_on_tape, landmark_targets, predict_face, sgd_step, total_loss_on_tape, Bound, HarlParams,
    ParamGrads, SourceBatch, TargetBatch,
};
use harl::numerics::Tape;
use harl::rng::{derive_seed, stream};
use harl::synth::{angular_error, eye_gaze_for, render_eye, sample_batch, Domain, GazeAngles, Sample, WorldConfig};
use harl::{Error, Matrix};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{usage, HarnessError, Result};
use crate::metrics::{MetricsRecord, MetricsWriter};

/// Largest batch pushed through the network at once during evaluation.
const EVAL_CHUNK: usize = 100;

pub fn train_world(cfg: &RunConfig) -> WorldConfig {
    WorldConfig { seed: derive_seed(cfg.seed, "train-world", cfg.world.seed), ..cfg.world.clone() }
}

/// Evaluation world; `shifted` applies the cross-domain degradation.
pub fn eval_world(cfg: &RunConfig, eval_seed: u64, shifted: bool) -> WorldConfig {
    let w = WorldConfig { seed: derive_seed(eval_seed, "eval-world", cfg.world.seed), ..cfg.world.clone() };
    if shifted {
        w.shifted()
    } else {
        w
    }
}

fn faces_and_landmarks(samples: &[Sample], face_size: usize) -> Result<(Matrix, Matrix)> {
    let tgt = TargetBatch::from_samples(samples)?;
    let lms: Vec<_> = samples
        .iter()
        .map(|s| s.landmarks.ok_or_else(|| HarnessError::Core(Error::InvalidInput("target sample without landmarks".into()))))
        .collect::<Result<_>>()?;
    Ok((tgt.face, landmark_targets(&lms, face_size)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseReport {
    /// Only the `pose.*` blocks, marked frozen.
    pub params: HarlParams,
    pub initial_px: f64,
    pub heldout_px: f64,
    pub steps: usize,
}

impl PoseReport {
    pub fn converged(&self, cfg: &RunConfig) -> bool {
        self.heldout_px < cfg.pose.target_px
    }

    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        Checkpoint { config_echo: cfg.echo(), seed: cfg.seed, params: self.params.clone() }
    }
}

/// Trains the pose encoder and its landmark head on target faces.
///
/// Returns the report whether or not the held-out target was reached; see
/// [`PoseReport::converged`].
pub fn pretrain_pose(cfg: &RunConfig) -> Result<PoseReport> {
    cfg.validate()?;
    let model = harl::model::ModelConfig { enable_pose: true, ..cfg.model.clone() };
    let full = HarlParams::init(&model, derive_seed(cfg.seed, "pose-init", 0))?;
    let mut params = HarlParams { blocks: full.blocks.into_iter().filter(|b| b.name.starts_with("pose.")).collect() };
    params.set_pose_frozen(false);

    let face_size = cfg.world.face_size;
    let world = WorldConfig { seed: derive_seed(cfg.seed, "pose-world", cfg.world.seed), ..cfg.world.clone() };
    let heldout_world = WorldConfig { seed: derive_seed(cfg.seed, "pose-heldout", cfg.world.seed), ..cfg.world.clone() };
    let heldout = sample_batch(Domain::Target, cfg.pose.heldout.max(1), &heldout_world, 0);
    let (h_faces, _) = faces_and_landmarks(&heldout, face_size)?;
    let h_truth: Vec<_> = heldout.iter().map(|s| s.landmarks.unwrap()).collect();
    let initial_px = landmark_error_px(&params, &h_faces, &h_truth, face_size, &model);

    for step in 0..cfg.pose.steps {
        let batch = sample_batch(Domain::Target, cfg.pose.batch_size, &world, step as u64);
        let (faces, targets) = faces_and_landmarks(&batch, face_size)?;
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &params);
        let loss = landmark_loss_on_tape(&mut tape, &bound, &faces, &targets, &model)?;
        if !tape.scalar(loss).is_finite() {
            return Err(Error::Numerical(format!("pose pretraining loss is not finite at step {step}")).into());
        }
        let grads = tape.backward(loss)?;
        sgd_step(&mut params, &ParamGrads::collect(&grads, &bound), cfg.pose.lr)?;
    }
    let heldout_px = landmark_error_px(&params, &h_faces, &h_truth, face_size, &model);
    params.set_pose_frozen(true);
    Ok(PoseReport { params, initial_px, heldout_px, steps: cfg.pose.steps })
}

/// Fresh model parameters for `cfg`, with the pretrained pose blocks loaded
/// when the pose module is enabled.
pub fn init_model(cfg: &RunConfig, pose: Option<&HarlParams>) -> Result<HarlParams> {
    let mut params = HarlParams::init(&cfg.model, derive_seed(cfg.seed, "init", 0))?;
    if cfg.model.enable_pose {
        let Some(pose) = pose else {
            return usage("enable_pose is set but no pose checkpoint was given");
        };
        params.load_pose_from(pose)?;
        params.set_pose_frozen(true);
    }
    Ok(params)
}

/// Rescales the trainable gradients so their joint L2 norm is at most `max`.
/// Non-finite norms are left alone for `sgd_step` to reject.
pub fn clip_global_norm(grads: &mut ParamGrads, params: &HarlParams, max: f64) -> f64 {
    let trainable = |i: usize| params.blocks[i].trainable;
    let norm = grads
        .0
        .iter()
        .enumerate()
        .filter(|(i, _)| trainable(*i))
        .filter_map(|(_, g)| g.as_ref())
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max > 0.0 && norm.is_finite() && norm > max {
        let s = max / norm;
        for g in grads.0.iter_mut().flatten() {
            *g = g.scale(s);
        }
    }
    norm
}

fn batch_mae(pred: &Matrix, truth: &Matrix) -> f64 {
    let n = pred.rows();
    (0..n)
        .map(|i| angular_error(GazeAngles::new(pred.get(i, 0), pred.get(i, 1)), GazeAngles::new(truth.get(i, 0), truth.get(i, 1))))
        .sum::<f64>()
        / n as f64
}

pub struct TrainOutcome {
    pub params: HarlParams,
    pub records: Vec<MetricsRecord>,
}

/// Where `train` writes its outputs.
pub struct TrainOutputs<'a> {
    pub dir: &'a Path,
}

impl TrainOutputs<'_> {
    pub fn metrics(&self) -> std::path::PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn checkpoint(&self) -> std::path::PathBuf {
        self.dir.join("model.ckpt")
    }
}

/// The joint loop. One source and one target batch per step, SGD on the
/// weighted objective. When `out` is given the metrics log, the config echo
/// and the final checkpoint are written there; on a non-finite loss the last
/// good parameters are saved before the error is returned.
pub fn train(cfg: &RunConfig, pose: Option<&HarlParams>, out: Option<TrainOutputs>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = init_model(cfg, pose)?;
    let world = train_world(cfg);
    let mut writer = match &out {
        Some(o) => {
            fs::create_dir_all(o.dir)?;
            fs::write(o.dir.join("config.txt"), cfg.echo())?;
            Some(MetricsWriter::create(&o.metrics())?)
        }
        None => None,
    };
    let save = |params: &HarlParams| -> Result<()> {
        if let Some(o) = &out {
            Checkpoint { config_echo: cfg.echo(), seed: cfg.seed, params: params.clone() }.save(&o.checkpoint())?;
        }
        Ok(())
    };

    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.total_steps());
    let b = cfg.train.batch_size;
    for epoch in 0..cfg.train.epochs {
        for s in 0..cfg.train.steps_per_epoch {
            let step = epoch * cfg.train.steps_per_epoch + s;
            let src = SourceBatch::from_samples(&sample_batch(Domain::Source, b, &world, step as u64))?;
            let tgt = TargetBatch::from_samples(&sample_batch(Domain::Target, b, &world, step as u64))?;
            let mut tape = Tape::new();
            let bound = Bound::bind(&mut tape, &params);
            let outcome = total_loss_on_tape(&mut tape, &bound, &src, &tgt, &cfg.model).and_then(|(nodes, report)| {
                if !report.total.is_finite() {
                    return Err(Error::Numerical(format!("non-finite loss {} at step {step}", report.total)));
                }
                let grads = tape.backward(nodes.total)?;
                let mut grads = ParamGrads::collect(&grads, &bound);
                clip_global_norm(&mut grads, &params, cfg.train.clip_norm);
                Ok((nodes, report, grads))
            });
            let (nodes, report, grads) = match outcome {
                Ok(v) => v,
                Err(e) => {
                    if let Some(w) = writer.as_mut() {
                        w.flush()?;
                    }
                    save(&params)?;
                    return Err(e.into());
                }
            };
            let train_mae = batch_mae(tape.value(nodes.face.pred), &tgt.gaze);
            if let Err(e) = sgd_step(&mut params, &grads, cfg.train.lr) {
                save(&params)?;
                return Err(e.into());
            }

            let last_in_epoch = s + 1 == cfg.train.steps_per_epoch;
            let (eval_t, eval_x) = if last_in_epoch && cfg.train.eval_samples > 0 {
                let n = cfg.train.eval_samples;
                (Some(evaluate(&params, cfg, EvalDomain::Target, n, cfg.seed)?.mae), Some(evaluate(&params, cfg, EvalDomain::Shifted, n, cfg.seed)?.mae))
            } else {
                (None, None)
            };
            let record = MetricsRecord {
                step: step as u64,
                epoch: epoch as u64,
                l_face_mse: report.face_mse,
                l_eye_mse: report.eye_mse,
                l_angle: report.angle,
                l_scale: report.scale,
                l_uda: report.uda,
                l_total: report.total,
                train_mae_deg: train_mae,
                eval_mae_target_deg: eval_t,
                eval_mae_shifted_deg: eval_x,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            if let Some(w) = writer.as_mut() {
                w.append(&record)?;
            }
            records.push(record);
        }
    }
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    save(&params)?;
    Ok(TrainOutcome { params, records })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalDomain {
    /// Target faces from the training world's distribution.
    Target,
    /// Target faces from the shifted (cross-domain) world.
    Shifted,
    /// Source eyes through the monocular regressor.
    Source,
}

impl EvalDomain {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "target" => Some(Self::Target),
            "shifted" => Some(Self::Shifted),
            "source" => Some(Self::Source),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Self::Target => "target",
            Self::Shifted => "shifted",
            Self::Source => "source",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: usize,
    pub truth: GazeAngles,
    pub pred: GazeAngles,
    pub error_deg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub mae: f64,
    pub rows: Vec<EvalRow>,
}

/// Samples of the evaluation world for `domain`.
pub fn eval_samples(cfg: &RunConfig, domain: EvalDomain, n: usize, eval_seed: u64) -> Vec<Sample> {
    match domain {
        EvalDomain::Target => sample_batch(Domain::Target, n, &eval_world(cfg, eval_seed, false), 0),
        EvalDomain::Shifted => sample_batch(Domain::Target, n, &eval_world(cfg, eval_seed, true), 0),
        EvalDomain::Source => sample_batch(Domain::Source, n, &eval_world(cfg, eval_seed, false), 0),
    }
}

/// Predictions of the model for `samples` (face gaze for target samples,
/// monocular eye gaze for source samples).
pub fn predict(params: &HarlParams, cfg: &RunConfig, samples: &[Sample]) -> Result<Vec<GazeAngles>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        if chunk[0].domain == Domain::Source {
            let src = SourceBatch::from_samples(chunk)?;
            let z = harl::model::encode_eye(&src.eyes, params, &cfg.model)?;
            for i in 0..z.rows() {
                out.push(harl::model::monocular_regress(z.row(i), params)?);
            }
        } else {
            let f = predict_face(params, &TargetBatch::from_samples(chunk)?, &cfg.model)?;
            out.extend((0..chunk.len()).map(|i| f.gaze(i)));
        }
    }
    Ok(out)
}

/// Scores predictions against the samples' labels.
pub fn score(samples: &[Sample], preds: &[GazeAngles]) -> EvalResult {
    let rows: Vec<EvalRow> = samples
        .iter()
        .zip(preds)
        .enumerate()
        .map(|(id, (s, &pred))| {
            let truth = s.label();
            EvalRow { id, truth, pred, error_deg: angular_error(truth, pred) }
        })
        .collect();
    let mae = if rows.is_empty() { 0.0 } else { rows.iter().map(|r| r.error_deg).sum::<f64>() / rows.len() as f64 };
    EvalResult { mae, rows }
}

/// Mean angular error over `n` fresh evaluation samples.
pub fn evaluate(params: &HarlParams, cfg: &RunConfig, domain: EvalDomain, n: usize, eval_seed: u64) -> Result<EvalResult> {
    params.check_layout(&cfg.model)?;
    let samples = eval_samples(cfg, domain, n, eval_seed);
    let preds = predict(params, cfg, &samples)?;
    Ok(score(&samples, &preds))
}

pub fn write_eval_csv(result: &EvalResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "true_pitch", "true_yaw", "pred_pitch", "pred_yaw", "error_deg"])?;
    for r in &result.rows {
        w.write_record([
            r.id.to_string(),
            r.truth.pitch.to_string(),
            r.truth.yaw.to_string(),
            r.pred.pitch.to_string(),
            r.pred.yaw.to_string(),
            r.error_deg.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    EyeSource,
    EyeTarget,
    Fused,
}

impl FeatureKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "eye_source" => Ok(Self::EyeSource),
            "eye_target" => Ok(Self::EyeTarget),
            "fused" => Ok(Self::Fused),
            _ => usage(format!("unknown feature set {s:?} (expected eye_source, eye_target or fused)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub domain: Domain,
    pub gaze: GazeAngles,
    pub features: Vec<f64>,
}

/// Target eye crop `i` fed to the eye encoder: left for even `i`, right for odd.
fn target_eye(s: &Sample, i: usize) -> &Matrix {
    if i.is_multiple_of(2) {
        &s.left_eye
    } else {
        s.right_eye.as_ref().expect("target sample has both crops")
    }
}

fn rows_of(images: &[&Matrix]) -> Matrix {
    Matrix::from_fn(images.len(), images[0].len(), |i, j| images[i].data()[j])
}

/// Feature vectors of `n` evaluation samples. Eye dumps have `d_e` columns
/// and carry per-eye gaze labels; fused dumps have `d_g` columns and face
/// gaze labels.
pub fn dump_features(params: &HarlParams, cfg: &RunConfig, n: usize, which: FeatureKind, eval_seed: u64) -> Result<Vec<FeatureRow>> {
    params.check_layout(&cfg.model)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(n);
    match which {
        FeatureKind::EyeSource => {
            let samples = eval_samples(cfg, EvalDomain::Source, n, eval_seed);
            for chunk in samples.chunks(EVAL_CHUNK) {
                let z = harl::model::encode_eye(&rows_of(&chunk.iter().map(|s| &s.left_eye).collect::<Vec<_>>()), params, &cfg.model)?;
                for (i, s) in chunk.iter().enumerate() {
                    out.push(FeatureRow { domain: Domain::Source, gaze: s.label(), features: z.row(i).to_vec() });
                }
            }
        }
        FeatureKind::EyeTarget => {
            let samples = eval_samples(cfg, EvalDomain::Target, n, eval_seed);
            for (c, chunk) in samples.chunks(EVAL_CHUNK).enumerate() {
                let images: Vec<&Matrix> = chunk.iter().enumerate().map(|(i, s)| target_eye(s, c * EVAL_CHUNK + i)).collect();
                let z = harl::model::encode_eye(&rows_of(&images), params, &cfg.model)?;
                for (i, s) in chunk.iter().enumerate() {
                    let gaze = eye_gaze_for(s.face_gaze, s.head_pose);
                    out.push(FeatureRow { domain: Domain::Target, gaze, features: z.row(i).to_vec() });
                }
            }
        }
        FeatureKind::Fused => {
            let samples = eval_samples(cfg, EvalDomain::Target, n, eval_seed);
            for chunk in samples.chunks(EVAL_CHUNK) {
                let f = predict_face(params, &TargetBatch::from_samples(chunk)?, &cfg.model)?;
                for (i, s) in chunk.iter().enumerate() {
                    out.push(FeatureRow { domain: Domain::Target, gaze: s.face_gaze, features: f.z_g.row(i).to_vec() });
                }
            }
        }
    }
    Ok(out)
}

/// CSV with header `domain,pitch,yaw,f0..f{width-1}`.
pub fn write_features_csv(rows: &[FeatureRow], width: usize, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["domain".to_string(), "pitch".to_string(), "yaw".to_string()];
    header.extend((0..width).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.domain.tag().to_string(), r.gaze.pitch.to_string(), r.gaze.yaw.to_string()];
        rec.extend(r.features.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Width of a feature dump.
pub fn feature_width(cfg: &RunConfig, which: FeatureKind) -> usize {
    match which {
        FeatureKind::EyeSource | FeatureKind::EyeTarget => cfg.model.d_e,
        FeatureKind::Fused => cfg.model.sgf.d_g,
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Mean cosine similarity between the eye features of target eye crops and
/// of source renders at the same per-eye gaze, over `n` evaluation pairs.
pub fn matched_gaze_cosine(params: &HarlParams, cfg: &RunConfig, n: usize, eval_seed: u64) -> Result<f64> {
    if n == 0 {
        return usage("matched-gaze cosine needs at least one pair");
    }
    let world = eval_world(cfg, eval_seed, false);
    let targets = sample_batch(Domain::Target, n, &world, 0);
    let mut total = 0.0;
    for (c, chunk) in targets.chunks(EVAL_CHUNK).enumerate() {
        let t_imgs: Vec<&Matrix> = chunk.iter().enumerate().map(|(i, s)| target_eye(s, c * EVAL_CHUNK + i)).collect();
        let s_imgs: Vec<Matrix> = chunk
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = stream(world.seed, "matched-source", (c * EVAL_CHUNK + i) as u64);
                render_eye(eye_gaze_for(s.face_gaze, s.head_pose), Domain::Source, &world, &mut rng)
            })
            .collect();
        let z_t = harl::model::encode_eye(&rows_of(&t_imgs), params, &cfg.model)?;
        let z_s = harl::model::encode_eye(&rows_of(&s_imgs.iter().collect::<Vec<_>>()), params, &cfg.model)?;
        total += (0..chunk.len()).map(|i| cosine(z_s.row(i), z_t.row(i))).sum::<f64>();
    }
    Ok(total / n as f64)
}
