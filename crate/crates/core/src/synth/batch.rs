use rand::Rng;

use crate::numerics::Matrix;
use crate::rng::{derive_seed, stream};
use crate::synth::geometry::{GazeAngles, HeadPose};
use crate::synth::render::{crop_eye, render_eye, render_face};
use crate::synth::{Domain, Sample, WorldConfig};

fn uniform<R: Rng + ?Sized>(max: f64, rng: &mut R) -> f64 {
    rng.random_range(-max..=max)
}

/// One sample, a pure function of `(world.seed, domain, batch_index, i)`.
fn sample_one(domain: Domain, world: &WorldConfig, batch_index: u64, i: u64) -> Sample {
    let mut rng = stream(derive_seed(world.seed, domain.tag(), batch_index), "sample", i);
    let face_gaze = GazeAngles::new(uniform(world.gaze_pitch_max, &mut rng), uniform(world.gaze_yaw_max, &mut rng));
    match domain {
        Domain::Source => {
            let eye = render_eye(face_gaze, Domain::Source, world, &mut rng);
            Sample {
                domain,
                left_eye: eye,
                right_eye: None,
                face: None,
                face_gaze,
                eye_gaze: vec![face_gaze],
                landmarks: None,
                head_pose: HeadPose::default(),
            }
        }
        Domain::Target => {
            let pose = HeadPose {
                pitch: uniform(world.head_max, &mut rng),
                yaw: uniform(world.head_max, &mut rng),
                roll: uniform(world.head_max, &mut rng),
            };
            let (face, lm, _) = render_face(face_gaze, pose, world, &mut rng);
            Sample {
                domain,
                left_eye: crop_eye(&face, lm.left_eye, world.eye_size),
                right_eye: Some(crop_eye(&face, lm.right_eye, world.eye_size)),
                face: Some(face),
                face_gaze,
                eye_gaze: Vec::new(),
                landmarks: Some(lm),
                head_pose: pose,
            }
        }
    }
}

/// `b` samples of one domain; deterministic in `(world.seed, domain, batch_index)`.
pub fn sample_batch(domain: Domain, b: usize, world: &WorldConfig, batch_index: u64) -> Vec<Sample> {
    (0..b as u64).map(|i| sample_one(domain, world, batch_index, i)).collect()
}

/// Mean gradient magnitude over an annulus around the iris edge.
///
/// `center` is the iris center in pixels and `radius` its radius; pixels
/// within one pixel of the edge are averaged. Central differences inside.
pub fn iris_edge_contrast(img: &Matrix, center: (f64, f64), radius: f64) -> f64 {
    let (h, w) = img.shape();
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let (dx, dy) = (x as f64 + 0.5 - center.0, y as f64 + 0.5 - center.1);
            if ((dx * dx + dy * dy).sqrt() - radius).abs() > 1.0 {
                continue;
            }
            let gx = 0.5 * (img.get(y, x + 1) - img.get(y, x - 1));
            let gy = 0.5 * (img.get(y + 1, x) - img.get(y - 1, x));
            sum += (gx * gx + gy * gy).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
