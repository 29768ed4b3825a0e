use super::*;
use crate::numerics::gradcheck::grad_check_many;
use crate::numerics::testutil::random_matrix;
use crate::numerics::{NodeId, Tape};
use crate::sgf::W_NBR;
use crate::synth::{sample_batch, Domain, GazeAngles, WorldConfig};
use crate::uda::min_spectral_gap;

fn small_cfg() -> ModelConfig {
    ModelConfig {
        eye_hidden: 16,
        d_e: 8,
        pose_hidden: 12,
        d_p: 6,
        sgf: SgfConfig { k: 2, layers: 2, d_g: 8, ..SgfConfig::default() },
        ..ModelConfig::default()
    }
}

fn batches(b: usize, seed: u64) -> (SourceBatch, TargetBatch) {
    let w = WorldConfig { seed, ..WorldConfig::default() };
    let src = SourceBatch::from_samples(&sample_batch(Domain::Source, b, &w, 0)).unwrap();
    let tgt = TargetBatch::from_samples(&sample_batch(Domain::Target, b, &w, 0)).unwrap();
    (src, tgt)
}

/// Uniform-noise images and labels.
fn random_batches(b: usize, cfg: &ModelConfig, seed: u64) -> (SourceBatch, TargetBatch) {
    let img = |cols: usize, s: u64| random_matrix(b, cols, s).map(|v| 0.5 + 0.5 * v.tanh());
    let label = |s: u64| random_matrix(b, 2, s).scale(0.3);
    let src = SourceBatch { eyes: img(cfg.eye_pixels, seed), gaze: label(seed + 1) };
    let tgt = TargetBatch {
        left: img(cfg.eye_pixels, seed + 2),
        right: img(cfg.eye_pixels, seed + 3),
        face: img(cfg.face_pixels, seed + 4),
        gaze: label(seed + 5),
    };
    (src, tgt)
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Loop evaluation of `x W + b` for one row.
fn dense(x: &[f64], w: &Matrix, b: &Matrix) -> Vec<f64> {
    (0..w.cols()).map(|j| b.get(0, j) + (0..w.rows()).map(|i| x[i] * w.get(i, j)).sum::<f64>()).collect()
}

#[test]
fn zero_image_with_zero_biases_encodes_to_zero() {
    let cfg = ModelConfig { input_offset: 0.0, ..small_cfg() };
    let p = HarlParams::init(&cfg, 1).unwrap();
    let z = encode_eye(&Matrix::zeros(16, 16), &p, &cfg).unwrap();
    assert_eq!(z.shape(), (1, cfg.d_e));
    assert!(z.data().iter().all(|&v| v == 0.0));
    // With the default offset the same holds for an image at the offset level.
    let cfg = small_cfg();
    let z = encode_eye(&Matrix::filled(16, 16, cfg.input_offset), &p, &cfg).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn eye_encoder_matches_loop_evaluation() {
    let cfg = small_cfg();
    let mut p = HarlParams::init(&cfg, 2).unwrap();
    *p.get_mut("eye.b1") = random_matrix(1, cfg.eye_hidden, 3);
    *p.get_mut("eye.b2") = random_matrix(1, cfg.d_e, 4);
    let img = random_matrix(16, 16, 5).map(|v| v.abs().min(1.0));
    let z = encode_eye(&img, &p, &cfg).unwrap();
    assert_eq!(z, encode_eye(&img, &p, &cfg).unwrap());
    let x: Vec<f64> = img.data().iter().map(|v| v - cfg.input_offset).collect();
    let h: Vec<f64> = dense(&x, p.get("eye.w1"), p.get("eye.b1")).into_iter().map(relu).collect();
    let expect = dense(&h, p.get("eye.w2"), p.get("eye.b2"));
    for (a, b) in z.data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn wrong_image_size_is_rejected() {
    let cfg = small_cfg();
    let p = HarlParams::init(&cfg, 1).unwrap();
    assert!(matches!(encode_eye(&Matrix::zeros(8, 8), &p, &cfg), Err(Error::InvalidInput(_))));
}

#[test]
fn monocular_regressor_examples() {
    let cfg = small_cfg();
    let mut p = HarlParams::init(&cfg, 1).unwrap();
    let zero = vec![0.0; cfg.d_e];
    *p.get_mut("reg.w") = Matrix::zeros(cfg.d_e, 2);
    assert_eq!(monocular_regress(&zero, &p).unwrap(), GazeAngles::new(0.0, 0.0));

    *p.get_mut("reg.w") = Matrix::from_fn(cfg.d_e, 2, |i, j| if i == j { 1.0 } else { 0.0 });
    let z: Vec<f64> = (0..cfg.d_e).map(|i| i as f64 + 0.5).collect();
    assert_eq!(monocular_regress(&z, &p).unwrap(), GazeAngles::new(0.5, 1.5));

    *p.get_mut("reg.w") = random_matrix(cfg.d_e, 2, 8);
    *p.get_mut("reg.b") = random_matrix(1, 2, 9);
    let out = monocular_regress(&z, &p).unwrap();
    let expect = dense(&z, p.get("reg.w"), p.get("reg.b"));
    assert!((out.pitch - expect[0]).abs() < 1e-12 && (out.yaw - expect[1]).abs() < 1e-12);
}

#[test]
fn constant_head_predicts_its_bias() {
    for enable_sgf in [true, false] {
        let cfg = ModelConfig { enable_sgf, ..small_cfg() };
        let mut p = HarlParams::init(&cfg, 1).unwrap();
        for b in &mut p.blocks {
            b.value = Matrix::zeros(b.value.rows(), b.value.cols());
        }
        *p.get_mut("head.b2") = Matrix::row_vector(&[0.1, -0.2]);
        let (_, tgt) = batches(4, 1);
        let out = predict_face(&p, &tgt, &cfg).unwrap();
        for i in 0..4 {
            assert_eq!(out.gaze(i), GazeAngles::new(0.1, -0.2));
        }
    }
}

#[test]
fn zero_neighbor_weights_make_the_face_irrelevant() {
    let cfg = small_cfg();
    let mut p = HarlParams::init(&cfg, 4).unwrap();
    for l in 0..cfg.sgf.layers {
        p.get_mut("sgf.layers").set(l, W_NBR, 0.0);
    }
    let (_, tgt) = batches(4, 2);
    let mut other = tgt.clone();
    other.face = random_matrix(4, cfg.face_pixels, 10).map(|v| v.abs().min(1.0));
    assert_eq!(predict_face(&p, &tgt, &cfg).unwrap().pred, predict_face(&p, &other, &cfg).unwrap().pred);
}

#[test]
fn missing_eye_crop_is_rejected() {
    let w = WorldConfig::default();
    let mut samples = sample_batch(Domain::Target, 2, &w, 0);
    samples[1].right_eye = None;
    assert!(matches!(TargetBatch::from_samples(&samples), Err(Error::InvalidInput(_))));
    let src = sample_batch(Domain::Source, 1, &w, 0);
    let cfg = small_cfg();
    let p = HarlParams::init(&cfg, 0).unwrap();
    assert!(forward_face(&src[0], &p, &cfg).is_err());
}

#[test]
fn perfect_predictions_with_zero_weight_give_zero_loss() {
    let cfg = ModelConfig { uda: UdaConfig { lambda_weight: 0.0, ..UdaConfig::default() }, ..small_cfg() };
    let mut p = HarlParams::init(&cfg, 3).unwrap();
    let beta = [0.2, -0.1];
    *p.get_mut("reg.w") = Matrix::zeros(cfg.d_e, 2);
    *p.get_mut("reg.b") = Matrix::row_vector(&beta);
    *p.get_mut("head.w2") = Matrix::zeros(cfg.sgf.d_g, 2);
    *p.get_mut("head.b2") = Matrix::row_vector(&beta);
    let (mut src, mut tgt) = batches(8, 3);
    src.gaze = Matrix::from_fn(8, 2, |_, j| beta[j]);
    tgt.gaze = src.gaze.clone();
    let r = total_loss(&p, &src, &tgt, &cfg).unwrap();
    assert_eq!(r.total, 0.0);
    assert!(r.uda > 0.0);
}

#[test]
fn report_arithmetic_and_decomposition() {
    let r = JointLossReport { face_mse: 1.0, eye_mse: 1.0, angle: 1.5, scale: 0.5, uda: 2.0, lambda: 0.5, total: 3.0, alignment: None };
    assert_eq!(r.recombined(), 3.0);

    let cfg = small_cfg();
    let p = HarlParams::init(&cfg, 5).unwrap();
    let (src, tgt) = batches(8, 5);
    let r = total_loss(&p, &src, &tgt, &cfg).unwrap();
    assert!((r.total - r.recombined()).abs() < 1e-12);
    assert!(r.face_mse >= 0.0 && r.eye_mse >= 0.0 && r.uda >= 0.0);
    assert!((r.uda - (r.angle + r.scale)).abs() < 1e-12);
}

#[test]
fn batch_size_mismatch_is_rejected() {
    let cfg = small_cfg();
    let p = HarlParams::init(&cfg, 5).unwrap();
    let (src, _) = batches(4, 5);
    let (_, tgt) = batches(6, 5);
    assert!(matches!(total_loss(&p, &src, &tgt, &cfg), Err(Error::InvalidInput(_))));
}

#[test]
fn sgd_arithmetic() {
    let mut p = HarlParams { blocks: vec![ParamBlock { name: "t".into(), value: Matrix::filled(1, 1, 1.0), trainable: true }] };
    let g = ParamGrads(vec![Some(Matrix::filled(1, 1, 2.0))]);
    sgd_step(&mut p, &g, 0.0).unwrap();
    assert_eq!(p.get("t").get(0, 0), 1.0);
    sgd_step(&mut p, &g, 0.1).unwrap();
    assert!((p.get("t").get(0, 0) - 0.8).abs() < 1e-15);

    let bad = ParamGrads(vec![Some(Matrix::filled(1, 1, f64::NAN))]);
    assert!(matches!(sgd_step(&mut p, &bad, 0.1), Err(Error::Numerical(_))));
    assert!((p.get("t").get(0, 0) - 0.8).abs() < 1e-15);
    assert!(sgd_step(&mut p, &g, -1.0).is_err());
}

#[test]
fn shared_encoder_produces_both_domains() {
    let cfg = small_cfg();
    let p = HarlParams::init(&cfg, 6).unwrap();
    assert_eq!(p.blocks.iter().filter(|b| b.name.starts_with("eye.")).count(), 4);
    let (src, tgt) = batches(8, 6);
    let mut tape = Tape::new();
    let bound = Bound::bind(&mut tape, &p);
    let (nodes, _) = total_loss_on_tape(&mut tape, &bound, &src, &tgt, &cfg).unwrap();
    assert_eq!(tape.value(nodes.z_s.unwrap()), &encode_eye(&src.eyes, &p, &cfg).unwrap());
    // Both domains reach the single eye encoder through the alignment loss.
    let grads = tape.backward(nodes.uda.unwrap()).unwrap();
    assert!(grads.wrt(bound.id("eye.w2")).max_abs() > 0.0);
}

#[test]
fn frozen_pose_is_untouched_by_training() {
    let cfg = small_cfg();
    let mut p = HarlParams::init(&cfg, 7).unwrap();
    assert!(p.pose_frozen());
    let before: Vec<Matrix> = p.blocks.iter().filter(|b| b.name.starts_with("pose.")).map(|b| b.value.clone()).collect();
    let (src, tgt) = batches(8, 7);
    for _ in 0..5 {
        train_step(&mut p, &src, &tgt, &cfg, 1e-2).unwrap();
    }
    let after: Vec<Matrix> = p.blocks.iter().filter(|b| b.name.starts_with("pose.")).map(|b| b.value.clone()).collect();
    assert_eq!(before, after);

    let mut tape = Tape::new();
    let bound = Bound::bind(&mut tape, &p);
    let (nodes, _) = total_loss_on_tape(&mut tape, &bound, &src, &tgt, &cfg).unwrap();
    let grads = ParamGrads::collect(&tape.backward(nodes.total).unwrap(), &bound);
    for (b, g) in p.blocks.iter().zip(&grads.0) {
        if b.name.starts_with("pose.") {
            assert!(g.is_none(), "{} received a gradient", b.name);
        }
    }
}

#[test]
fn without_alignment_the_source_batch_is_ignored() {
    let cfg = ModelConfig { enable_uda: false, ..small_cfg() };
    let (src_a, tgt) = batches(8, 8);
    let (src_b, _) = batches(8, 9);
    let mut pa = HarlParams::init(&cfg, 8).unwrap();
    let mut pb = pa.clone();
    for _ in 0..3 {
        let ra = train_step(&mut pa, &src_a, &tgt, &cfg, 1e-2).unwrap();
        let rb = train_step(&mut pb, &src_b, &tgt, &cfg, 1e-2).unwrap();
        assert_eq!(ra, rb);
    }
    assert_eq!(pa, pb);
}

#[test]
fn total_loss_gradients_match_finite_differences() {
    let cfg = small_cfg();
    let p = HarlParams::init(&cfg, 11).unwrap();
    let (src, tgt) = random_batches(8, &cfg, 11);
    let (z_s, z_t) = alignment_features(&p, &src, &tgt, &cfg).unwrap();
    assert!(min_spectral_gap(&z_s, &z_t).unwrap() >= 1e-3);
    let trainable: Vec<usize> = (0..p.blocks.len()).filter(|&i| p.blocks[i].trainable).collect();
    let xs: Vec<Matrix> = trainable.iter().map(|&i| p.blocks[i].value.clone()).collect();
    let errs = grad_check_many(
        |tape, ids| {
            let overrides: Vec<(usize, NodeId)> = trainable.iter().copied().zip(ids.iter().copied()).collect();
            let bound = Bound::bind_with(tape, &p, &overrides);
            Ok(total_loss_on_tape(tape, &bound, &src, &tgt, &cfg)?.0.total)
        },
        &xs,
        1e-5,
        Some(64),
    )
    .unwrap();
    for (&i, e) in trainable.iter().zip(&errs) {
        assert!(*e < 1e-4, "{}: {e}", p.blocks[i].name);
    }
}

#[test]
fn overfits_one_batch() {
    // Full architecture; the alignment term is recorded but unweighted so the
    // single batch can be fit exactly.
    let cfg = ModelConfig { uda: UdaConfig { lambda_weight: 0.0, ..UdaConfig::default() }, ..ModelConfig::default() };
    let mut p = HarlParams::init(&cfg, 12).unwrap();
    let (src, tgt) = batches(8, 12);
    let first = train_step(&mut p, &src, &tgt, &cfg, 1e-2).unwrap();
    let mut at_50 = None;
    for step in 1..500 {
        let r = train_step(&mut p, &src, &tgt, &cfg, 1e-2).unwrap();
        if step == 50 {
            at_50 = Some(r.total);
        }
    }
    assert!(at_50.unwrap() < first.total);
    let last = total_loss(&p, &src, &tgt, &cfg).unwrap();
    assert!(last.face_mse < 1e-3, "face mse {}", last.face_mse);
}
