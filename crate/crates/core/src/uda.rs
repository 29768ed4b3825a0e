//! Subspace alignment loss between a source and a target feature batch.
//!
//! For each domain the batch Gram matrix `ZᵀZ` is eigendecomposed and its
//! pseudo-inverse formed. The angle term compares matching columns of the two
//! pseudo-inverses by cosine similarity; the scale term compares the leading
//! `r` Gram eigenvalues. Both are recorded on a [`Tape`] so the loss
//! back-propagates into both batches.
//!
//! Column `i` of the pseudo-inverse is used as the `i`-th basis direction
//! (rows would do equally, the matrix is symmetric). The angle sum runs over
//! the first `r` columns unless [`UdaConfig::angle_over_all_n`] is set.

use crate::error::{invalid, Result};
use crate::numerics::eigen::{gram, sym_eig, DEFAULT_GAP_FLOOR, DEFAULT_REL_TOL};
use crate::numerics::{Matrix, NodeId, Tape};

/// Floor on each column norm in the cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct UdaConfig {
    /// Cumulative spectral energy kept when choosing the rank `r`.
    pub energy_ratio: f64,
    /// Pseudo-inverse cutoff relative to the largest eigenvalue.
    pub rel_tol: f64,
    /// Eigenvalue gap clamp for the eigendecomposition backward rule.
    pub gap_floor: f64,
    /// Weight of the alignment loss in the joint objective.
    pub lambda_weight: f64,
    /// Sum cosines over all `n` columns instead of the leading `r`.
    pub angle_over_all_n: bool,
}

impl Default for UdaConfig {
    fn default() -> Self {
        Self {
            energy_ratio: 0.999,
            rel_tol: DEFAULT_REL_TOL,
            gap_floor: DEFAULT_GAP_FLOOR,
            lambda_weight: 0.5,
            angle_over_all_n: false,
        }
    }
}

impl UdaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.energy_ratio > 0.0 && self.energy_ratio <= 1.0) {
            return invalid(format!("energy_ratio must lie in (0, 1], got {}", self.energy_ratio));
        }
        if !(self.rel_tol > 0.0) || !(self.gap_floor > 0.0) {
            return invalid("rel_tol and gap_floor must be positive");
        }
        if !(self.lambda_weight >= 0.0) {
            return invalid(format!("lambda_weight must be non-negative, got {}", self.lambda_weight));
        }
        Ok(())
    }
}

/// Values of one alignment-loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentReport {
    /// Column cosines between the two pseudo-inverse Gram matrices.
    pub cosines: Vec<f64>,
    pub angle: f64,
    pub scale: f64,
    /// `angle + scale`.
    pub total: f64,
    pub rank: usize,
}

/// Tape handles of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct UdaNodes {
    pub cosines: NodeId,
    pub angle: NodeId,
    pub scale: NodeId,
    pub total: NodeId,
}

fn energy_rank(lambda: &[f64], rho: f64) -> usize {
    let total: f64 = lambda.iter().map(|l| l.max(0.0)).sum();
    if total <= 0.0 {
        return 1;
    }
    let mut acc = 0.0;
    for (k, l) in lambda.iter().enumerate() {
        acc += l.max(0.0);
        if acc >= rho * total {
            return k + 1;
        }
    }
    lambda.len()
}

/// Smallest `k` whose leading eigenvalues carry a `rho` share of the spectral
/// energy, taken per domain and then minimized across the two domains.
/// An all-zero spectrum counts as rank 1.
pub fn effective_rank(lambda_s: &[f64], lambda_t: &[f64], rho: f64) -> Result<usize> {
    if lambda_s.is_empty() || lambda_s.len() != lambda_t.len() {
        return invalid(format!("spectra must be non-empty and equal length ({} vs {})", lambda_s.len(), lambda_t.len()));
    }
    for l in [lambda_s, lambda_t] {
        if l.windows(2).any(|w| w[0] < w[1]) {
            return invalid("eigenvalues must be sorted non-increasing");
        }
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return invalid(format!("energy ratio must lie in (0, 1], got {rho}"));
    }
    Ok(energy_rank(lambda_s, rho).min(energy_rank(lambda_t, rho)))
}

/// Cosine of each pair of matching columns and `Σ |1 − cosᵢ|`, over all columns.
pub fn angle_alignment(gp_s: &Matrix, gp_t: &Matrix) -> Result<(Vec<f64>, f64)> {
    if gp_s.shape() != gp_t.shape() {
        return invalid(format!("shape mismatch {:?} vs {:?}", gp_s.shape(), gp_t.shape()));
    }
    let mut tape = Tape::new();
    let a = tape.constant(gp_s.clone());
    let b = tape.constant(gp_t.clone());
    let m = tape.column_cosine(a, b, gp_s.cols(), COSINE_EPS);
    let l = tape.l1_from_one(m);
    Ok((tape.value(m).data().to_vec(), tape.scalar(l)))
}

/// Euclidean distance between the leading `r` eigenvalues of the two spectra.
pub fn scale_alignment(lambda_s: &[f64], lambda_t: &[f64], r: usize) -> Result<f64> {
    if r == 0 {
        return invalid("rank must be at least 1");
    }
    if r > lambda_s.len() || r > lambda_t.len() {
        return invalid(format!("rank {r} exceeds spectrum length"));
    }
    Ok(lambda_s[..r].iter().zip(&lambda_t[..r]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// Records the alignment loss between two `b x n` batches on `tape`.
pub fn uda_loss_on_tape(tape: &mut Tape, z_s: NodeId, z_t: NodeId, cfg: &UdaConfig) -> Result<(UdaNodes, AlignmentReport)> {
    cfg.validate()?;
    let (shape_s, shape_t) = (tape.value(z_s).shape(), tape.value(z_t).shape());
    if shape_s != shape_t {
        return invalid(format!("source and target batches must share a shape ({shape_s:?} vs {shape_t:?})"));
    }
    if !tape.value(z_s).is_finite() || !tape.value(z_t).is_finite() {
        return invalid("feature batches contain non-finite entries");
    }
    let n = shape_s.1;

    let g_s = tape.gram(z_s);
    let (lam_s, vec_s, spec_s) = tape.sym_eig(g_s, cfg.gap_floor)?;
    let p_s = tape.pinv_spectrum(lam_s, vec_s, cfg.rel_tol);

    let g_t = tape.gram(z_t);
    let (lam_t, vec_t, spec_t) = tape.sym_eig(g_t, cfg.gap_floor)?;
    let p_t = tape.pinv_spectrum(lam_t, vec_t, cfg.rel_tol);

    let rank = effective_rank(&spec_s.eigenvalues, &spec_t.eigenvalues, cfg.energy_ratio)?;
    let cols = if cfg.angle_over_all_n { n } else { rank };

    let cosines = tape.column_cosine(p_s, p_t, cols, COSINE_EPS);
    let angle = tape.l1_from_one(cosines);
    let scale = tape.head_l2(lam_s, lam_t, rank);
    let total = tape.add(angle, scale);

    let report = AlignmentReport {
        cosines: tape.value(cosines).data().to_vec(),
        angle: tape.scalar(angle),
        scale: tape.scalar(scale),
        total: tape.scalar(total),
        rank,
    };
    Ok((UdaNodes { cosines, angle, scale, total }, report))
}

/// Value-only evaluation of the alignment loss.
pub fn uda_loss(z_s: &Matrix, z_t: &Matrix, cfg: &UdaConfig) -> Result<AlignmentReport> {
    let mut tape = Tape::new();
    let s = tape.constant(z_s.clone());
    let t = tape.constant(z_t.clone());
    Ok(uda_loss_on_tape(&mut tape, s, t, cfg)?.1)
}

/// Smallest relative eigenvalue gap across the Gram spectra of both batches,
/// over the numerically nonzero eigenvalues and the step down to the null
/// space (the null-space cluster itself is cut by the pseudo-inverse).
/// The eigenvector derivatives behind the angle term blow up as this
/// approaches zero, so finite-difference checks skip such inputs.
pub fn min_spectral_gap(z_s: &Matrix, z_t: &Matrix) -> Result<f64> {
    let mut gap = f64::INFINITY;
    for z in [z_s, z_t] {
        let s = sym_eig(&gram(z))?;
        gap = gap.min(s.min_relative_gap(s.rank_at(DEFAULT_REL_TOL) + 1));
    }
    Ok(gap)
}

/// Alignment loss with gradients with respect to both batches.
pub fn uda_loss_with_grad(z_s: &Matrix, z_t: &Matrix, cfg: &UdaConfig) -> Result<(AlignmentReport, Matrix, Matrix)> {
    let mut tape = Tape::new();
    let s = tape.param(z_s.clone());
    let t = tape.param(z_t.clone());
    let (nodes, report) = uda_loss_on_tape(&mut tape, s, t, cfg)?;
    let grads = tape.backward(nodes.total)?;
    Ok((report, grads.wrt(s), grads.wrt(t)))
}
