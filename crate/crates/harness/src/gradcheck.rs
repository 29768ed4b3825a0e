//! Finite-difference checks of the three differentiable pipelines.

use std::fmt;
use std::rc::Rc;

use harl::model::{alignment_features, total_loss_on_tape, Bound, HarlParams, ModelConfig, SourceBatch, TargetBatch};
use harl::numerics::grad_check_many;
use harl::numerics::random::{gaussian_matrix, random_orthogonal};
use harl::numerics::NodeId;
use harl::rng::stream;
use harl::sgf::{batch_adjacency, sgf_forward_on_tape, SgfConfig, SgfNodes, SgfParams};
use harl::uda::{min_spectral_gap, uda_loss_on_tape, UdaConfig};
use harl::Matrix;

use crate::error::{usage, Result};

/// A check above this relative error fails the command.
pub const FAIL_THRESHOLD: f64 = 1e-3;
/// Inputs whose Gram spectra have a smaller relative gap are skipped.
pub const MIN_GAP: f64 = 1e-3;
pub const STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sizes {
    pub b: usize,
    pub n: usize,
    pub d_e: usize,
    pub d_p: usize,
    pub k: usize,
    pub layers: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Self { b: 8, n: 16, d_e: 8, d_p: 6, k: 2, layers: 2 }
    }
}

impl Sizes {
    /// Parses `b=8,n=16,...`; unspecified sizes keep their defaults.
    pub fn parse(s: &str) -> Result<Self> {
        let mut out = Self::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let Some((k, v)) = part.split_once('=') else {
                return usage(format!("size must be name=value, got {part:?}"));
            };
            let v: usize = v.trim().parse().or_else(|_| usage(format!("bad size {part:?}")))?;
            match k.trim() {
                "b" => out.b = v,
                "n" => out.n = v,
                "d_e" => out.d_e = v,
                "d_p" => out.d_p = v,
                "k" => out.k = v,
                "L" | "layers" => out.layers = v,
                other => return usage(format!("unknown size {other:?}")),
            }
        }
        if out.b < 2 || out.n == 0 || out.d_e == 0 || out.d_p == 0 || out.k == 0 || out.k > out.d_p || out.layers == 0 {
            return usage(format!("invalid sizes {out:?}"));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Checked { max_rel_err: f64, inputs: usize },
    Skipped { reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub op: &'static str,
    pub outcome: Outcome,
}

impl CheckLine {
    pub fn failed(&self, threshold: f64) -> bool {
        matches!(self.outcome, Outcome::Checked { max_rel_err, .. } if !(max_rel_err < threshold))
    }
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.outcome {
            Outcome::Checked { max_rel_err, inputs } => {
                let verdict = if *max_rel_err < FAIL_THRESHOLD { "ok" } else { "FAIL" };
                write!(f, "{:<11} max_rel_err {max_rel_err:.3e} over {inputs} inputs  {verdict}", self.op)
            }
            Outcome::Skipped { reason } => write!(f, "{:<11} skipped: {reason}", self.op),
        }
    }
}

fn gap_skip(z_s: &Matrix, z_t: &Matrix) -> Result<Option<String>> {
    let gap = min_spectral_gap(z_s, z_t)?;
    Ok((gap < MIN_GAP).then(|| format!("near-degenerate spectrum (relative gap {gap:.2e} < {MIN_GAP:.0e})")))
}

/// `b x n` batch whose Gram matrix has a repeated leading eigenvalue.
fn degenerate_batch(b: usize, n: usize, seed: u64) -> Matrix {
    let r = b.min(n);
    let u = random_orthogonal(b, &mut stream(seed, "gc-degenerate-u", 0));
    let v = random_orthogonal(n, &mut stream(seed, "gc-degenerate-v", 0));
    let sigma: Vec<f64> = (0..r).map(|i| if i < 2 { 3.0 } else { 2.0 / (i as f64) }).collect();
    Matrix::from_fn(b, n, |i, j| (0..r).map(|t| u.get(i, t) * sigma[t] * v.get(j, t)).sum())
}

pub fn check_uda(seed: u64, s: Sizes, degenerate: bool) -> Result<CheckLine> {
    let z_s = if degenerate { degenerate_batch(s.b, s.n, seed) } else { gaussian_matrix(s.b, s.n, &mut stream(seed, "gc-uda-s", 0)) };
    let z_t = gaussian_matrix(s.b, s.n, &mut stream(seed, "gc-uda-t", 0));
    if let Some(reason) = gap_skip(&z_s, &z_t)? {
        return Ok(CheckLine { op: "uda_loss", outcome: Outcome::Skipped { reason } });
    }
    let cfg = UdaConfig::default();
    let errs = grad_check_many(|t, ids| Ok(uda_loss_on_tape(t, ids[0], ids[1], &cfg)?.0.total), &[z_s, z_t], STEP, None)?;
    Ok(CheckLine { op: "uda_loss", outcome: Outcome::Checked { max_rel_err: errs.iter().cloned().fold(0.0, f64::max), inputs: 2 } })
}

/// SGF forward at a fixed adjacency, with respect to the gaze and pose nodes,
/// the layer parameters and the readout.
pub fn check_sgf(seed: u64, s: Sizes) -> Result<CheckLine> {
    let q = 2 * s.d_e;
    let cfg = SgfConfig { k: s.k, layers: s.layers, d_g: s.d_e, ..SgfConfig::default() };
    let mut p = SgfParams::init(q, &cfg, &mut stream(seed, "gc-sgf-params", 0));
    p.layers = p.layers.add(&gaussian_matrix(s.layers, p.layers.cols(), &mut stream(seed, "gc-sgf-layers", 0)).scale(0.3));
    let gaze = gaussian_matrix(s.b, q, &mut stream(seed, "gc-sgf-gaze", 0));
    let pose = gaussian_matrix(s.b, s.d_p, &mut stream(seed, "gc-sgf-pose", 0));
    let target = gaussian_matrix(s.b, cfg.d_g, &mut stream(seed, "gc-sgf-target", 0));
    let adj = Rc::new(batch_adjacency(&gaze, &pose, &p, s.k)?);
    let xs = [gaze, pose, p.layers.clone(), p.readout_w.clone(), p.readout_b.clone()];
    let errs = grad_check_many(
        |t, ids| {
            let nodes = SgfNodes { layers: ids[2], readout_w: ids[3], readout_b: ids[4] };
            let out = sgf_forward_on_tape(t, ids[0], ids[1], &nodes, &p, Rc::clone(&adj), &cfg)?;
            Ok(t.mse(out, &target))
        },
        &xs,
        STEP,
        None,
    )?;
    Ok(CheckLine { op: "sgf_forward", outcome: Outcome::Checked { max_rel_err: errs.iter().cloned().fold(0.0, f64::max), inputs: xs.len() } })
}

/// Small model for the joint-objective check.
pub fn small_model(s: Sizes) -> ModelConfig {
    ModelConfig {
        eye_hidden: 16,
        d_e: s.d_e,
        pose_hidden: 12,
        d_p: s.d_p,
        sgf: SgfConfig { k: s.k, layers: s.layers, d_g: 8, ..SgfConfig::default() },
        ..ModelConfig::default()
    }
}

/// Batches of uniform-noise images with random labels.
pub fn noise_batches(b: usize, cfg: &ModelConfig, seed: u64) -> (SourceBatch, TargetBatch) {
    let img = |cols: usize, what: &str| gaussian_matrix(b, cols, &mut stream(seed, what, 0)).map(|v| 0.5 + 0.5 * v.tanh());
    let label = |what: &str| gaussian_matrix(b, 2, &mut stream(seed, what, 0)).scale(0.3);
    let src = SourceBatch { eyes: img(cfg.eye_pixels, "gc-src-eyes"), gaze: label("gc-src-gaze") };
    let tgt = TargetBatch {
        left: img(cfg.eye_pixels, "gc-left"),
        right: img(cfg.eye_pixels, "gc-right"),
        face: img(cfg.face_pixels, "gc-face"),
        gaze: label("gc-tgt-gaze"),
    };
    (src, tgt)
}

/// Joint objective with respect to every trainable block, `limit` entries each.
pub fn check_total(seed: u64, s: Sizes, limit: Option<usize>) -> Result<CheckLine> {
    let cfg = small_model(s);
    let p = HarlParams::init(&cfg, seed)?;
    let (src, tgt) = noise_batches(s.b, &cfg, seed);
    let (z_s, z_t) = alignment_features(&p, &src, &tgt, &cfg)?;
    if let Some(reason) = gap_skip(&z_s, &z_t)? {
        return Ok(CheckLine { op: "total_loss", outcome: Outcome::Skipped { reason } });
    }
    let trainable: Vec<usize> = (0..p.blocks.len()).filter(|&i| p.blocks[i].trainable).collect();
    let xs: Vec<Matrix> = trainable.iter().map(|&i| p.blocks[i].value.clone()).collect();
    let errs = grad_check_many(
        |tape, ids| {
            let overrides: Vec<(usize, NodeId)> = trainable.iter().copied().zip(ids.iter().copied()).collect();
            let bound = Bound::bind_with(tape, &p, &overrides);
            Ok(total_loss_on_tape(tape, &bound, &src, &tgt, &cfg)?.0.total)
        },
        &xs,
        STEP,
        limit,
    )?;
    Ok(CheckLine { op: "total_loss", outcome: Outcome::Checked { max_rel_err: errs.iter().cloned().fold(0.0, f64::max), inputs: xs.len() } })
}

/// All three checks. `degenerate` injects a repeated eigenvalue into the
/// alignment-loss input, which must be skipped rather than failed.
pub fn run_gradchecks(seed: u64, sizes: Sizes, degenerate: bool) -> Result<Vec<CheckLine>> {
    Ok(vec![check_uda(seed, sizes, degenerate)?, check_sgf(seed, sizes)?, check_total(seed, sizes, Some(64))?])
}
