//! Procedural eye and face renderer.
//!
//! Shapes are painted as layered classes (skin, sclera, iris, pupil, ...)
//! evaluated on a supersampled grid; each pixel's value is the coverage-
//! weighted mean of the class intensities. Counting classes instead of summing
//! intensities keeps renders exactly mirror-symmetric when the scene is.
//!
//! Source ("near-eye") images are rendered directly at full eye resolution.
//! Target images come from a face rendered at twice the eye patch density: the
//! eye region covers `eye_size/2` face pixels and is resampled up to
//! `eye_size`, after the face has been blurred, brightness-shifted and noised.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::numerics::Matrix;
use crate::synth::geometry::{GazeAngles, HeadPose};
use crate::synth::{Domain, WorldConfig};

/// Iris displacement per unit `sin(angle)`, as a fraction of the eye patch width.
/// At 16 px this is the 4 px documented displacement scale.
pub const IRIS_SHIFT: f64 = 0.25;
const SCLERA_AXES: (f64, f64) = (0.45, 0.40);
pub const IRIS_RADIUS: f64 = 0.15;
const PUPIL_RADIUS: f64 = 0.06;

/// Eye-center offset from the face center, as a fraction of the face width.
const EYE_OFFSET: (f64, f64) = (0.1875, -0.09375);
const CORNER_OFFSET_X: f64 = 0.28125;
const NOSE_OFFSET_Y: f64 = 0.09375;
const NOSE_RADIUS: f64 = 0.035;
const FACE_AXES: (f64, f64) = (0.40, 0.47);
/// Eye-center translation per radian of head yaw (x) or pitch (−y), as a
/// fraction of the face width. At 32 px this is 12 px/rad.
pub const EYE_SHIFT_PER_RAD: f64 = 0.375;
const NOSE_SHIFT_PER_RAD: f64 = 0.5625;
const FACE_SHIFT_PER_RAD: f64 = 0.25;
/// Per-eye gaze = face gaze + this times head (pitch, yaw).
pub const POSE_GAZE_COUPLING: f64 = 0.1;

const BACKGROUND: f64 = 0.15;
const SKIN: f64 = 0.5;
const SCLERA: f64 = 0.92;
const IRIS: f64 = 0.3;
const PUPIL: f64 = 0.05;
const NOSE: f64 = 0.35;
const CENTROID_SHRINK: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Class {
    Background,
    Skin,
    Sclera,
    Iris,
    Pupil,
    Nose,
}

const CLASSES: [Class; 6] = [Class::Background, Class::Skin, Class::Sclera, Class::Iris, Class::Pupil, Class::Nose];

impl Class {
    fn intensity(self) -> f64 {
        match self {
            Class::Background => BACKGROUND,
            Class::Skin => SKIN,
            Class::Sclera => SCLERA,
            Class::Iris => IRIS,
            Class::Pupil => PUPIL,
            Class::Nose => NOSE,
        }
    }
}

/// One eye drawn at `center` with patch width `width` (pixels).
#[derive(Clone, Copy, Debug)]
struct EyeShape {
    center: (f64, f64),
    width: f64,
    iris_offset: (f64, f64),
}

impl EyeShape {
    fn new(center: (f64, f64), width: f64, gaze: GazeAngles) -> Self {
        let s = IRIS_SHIFT * width;
        Self { center, width, iris_offset: (s * odd_sin(gaze.yaw), -s * odd_sin(gaze.pitch)) }
    }

    fn classify(&self, x: f64, y: f64) -> Option<Class> {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (ax, ay) = (SCLERA_AXES.0 * self.width, SCLERA_AXES.1 * self.width);
        if (dx / ax) * (dx / ax) + (dy / ay) * (dy / ay) > 1.0 {
            return None;
        }
        let (ix, iy) = (dx - self.iris_offset.0, dy - self.iris_offset.1);
        let r2 = ix * ix + iy * iy;
        let pr = PUPIL_RADIUS * self.width;
        let ir = IRIS_RADIUS * self.width;
        Some(if r2 <= pr * pr {
            Class::Pupil
        } else if r2 <= ir * ir {
            Class::Iris
        } else {
            Class::Sclera
        })
    }
}

/// `sin` with exact odd symmetry, so mirrored gazes give mirrored renders.
fn odd_sin(x: f64) -> f64 {
    if x < 0.0 {
        -(-x).sin()
    } else {
        x.sin()
    }
}

/// Renders `size x size` pixels by class counting on an `ss x ss` subgrid.
fn rasterize(size: usize, ss: usize, classify: impl Fn(f64, f64) -> Class) -> Matrix {
    let mut img = Matrix::zeros(size, size);
    let mut counts = [0u32; CLASSES.len()];
    let inv = 1.0 / ss as f64;
    for py in 0..size {
        for px in 0..size {
            counts.fill(0);
            for sy in 0..ss {
                for sx in 0..ss {
                    let x = px as f64 + (sx as f64 + 0.5) * inv;
                    let y = py as f64 + (sy as f64 + 0.5) * inv;
                    let c = classify(x, y);
                    counts[CLASSES.iter().position(|&k| k == c).unwrap()] += 1;
                }
            }
            let v: f64 = CLASSES.iter().zip(&counts).map(|(c, &n)| c.intensity() * n as f64).sum();
            img.set(py, px, v / (ss * ss) as f64);
        }
    }
    img
}

/// Binomial kernel of odd width `w` (`[1 2 1]/4` for 3); width 1 is identity.
fn binomial_kernel(width: usize) -> Vec<f64> {
    let mut k = vec![1.0];
    for _ in 1..width {
        let mut next = vec![0.0; k.len() + 1];
        for (i, &v) in k.iter().enumerate() {
            next[i] += v;
            next[i + 1] += v;
        }
        k = next;
    }
    let s: f64 = k.iter().sum();
    k.iter().map(|v| v / s).collect()
}

/// Separable binomial blur with clamped borders.
pub fn blur(img: &Matrix, width: usize) -> Matrix {
    if width <= 1 {
        return img.clone();
    }
    let k = binomial_kernel(width);
    let half = (k.len() / 2) as isize;
    let (h, w) = img.shape();
    let pass = |src: &Matrix, horizontal: bool| {
        Matrix::from_fn(h, w, |y, x| {
            k.iter()
                .enumerate()
                .map(|(t, &kv)| {
                    let off = t as isize - half;
                    let (yy, xx) = if horizontal {
                        (y as isize, (x as isize + off).clamp(0, w as isize - 1))
                    } else {
                        ((y as isize + off).clamp(0, h as isize - 1), x as isize)
                    };
                    kv * src.get(yy as usize, xx as usize)
                })
                .sum()
        })
    };
    pass(&pass(img, true), false)
}

/// Bilinear sample at continuous coordinates (pixel centers at `i + 0.5`).
fn bilinear(img: &Matrix, x: f64, y: f64) -> f64 {
    let (h, w) = img.shape();
    let fx = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let fy = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
    let top = img.get(y0, x0) * (1.0 - tx) + img.get(y0, x1) * tx;
    let bottom = img.get(y1, x0) * (1.0 - tx) + img.get(y1, x1) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// `out_size x out_size` crop centered at `center`, covering `out_size/zoom`
/// source pixels, resampled bilinearly.
pub fn crop(img: &Matrix, center: (f64, f64), out_size: usize, zoom: f64) -> Matrix {
    let half = out_size as f64 / 2.0;
    Matrix::from_fn(out_size, out_size, |v, u| {
        let x = center.0 + (u as f64 + 0.5 - half) / zoom;
        let y = center.1 + (v as f64 + 0.5 - half) / zoom;
        bilinear(img, x, y)
    })
}

/// Blur, brightness offset, Gaussian noise, clamp to `[0, 1]`.
fn degrade<R: Rng + ?Sized>(img: &Matrix, blur_width: usize, brightness: f64, sigma: f64, rng: &mut R) -> Matrix {
    let mut out = blur(img, blur_width);
    for v in out.data_mut() {
        let noise = if sigma > 0.0 { sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
        *v = (*v + brightness + noise).clamp(0.0, 1.0);
    }
    out
}

fn add_noise<R: Rng + ?Sized>(img: &mut Matrix, sigma: f64, rng: &mut R) {
    for v in img.data_mut() {
        let noise = if sigma > 0.0 { sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
        *v = (*v + noise).clamp(0.0, 1.0);
    }
}

fn brightness_offset<R: Rng + ?Sized>(range: f64, rng: &mut R) -> f64 {
    if range > 0.0 {
        rng.random_range(-range..=range)
    } else {
        0.0
    }
}

/// A single eye on skin.
///
/// Source quality renders at full resolution with noise `sigma_source`.
/// Target quality renders the eye at half resolution, blurs, shifts
/// brightness, adds noise `sigma_target`, then resamples to full size.
pub fn render_eye<R: Rng + ?Sized>(gaze: GazeAngles, quality: Domain, world: &WorldConfig, rng: &mut R) -> Matrix {
    let e = world.eye_size;
    match quality {
        Domain::Source => {
            let c = e as f64 / 2.0;
            let eye = EyeShape::new((c, c), e as f64, gaze);
            let mut img = rasterize(e, world.supersample, |x, y| eye.classify(x, y).unwrap_or(Class::Skin));
            add_noise(&mut img, world.sigma_source, rng);
            img
        }
        Domain::Target => {
            let low = e / 2;
            let c = low as f64 / 2.0;
            let eye = EyeShape::new((c, c), low as f64, gaze);
            let img = rasterize(low, world.supersample, |x, y| eye.classify(x, y).unwrap_or(Class::Skin));
            let b = brightness_offset(world.brightness_jitter, rng);
            let img = degrade(&img, world.blur_width, b, world.sigma_target, rng);
            crop(&img, (c, c), e, 2.0)
        }
    }
}

/// Five 2D landmarks in face-pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Landmarks {
    pub left_eye: (f64, f64),
    pub right_eye: (f64, f64),
    pub left_corner: (f64, f64),
    pub right_corner: (f64, f64),
    pub nose: (f64, f64),
}

pub const LANDMARK_COUNT: usize = 5;

impl Landmarks {
    pub fn points(&self) -> [(f64, f64); LANDMARK_COUNT] {
        [self.left_eye, self.right_eye, self.left_corner, self.right_corner, self.nose]
    }

    /// `x0, y0, x1, y1, ...`
    pub fn flatten(&self) -> Vec<f64> {
        self.points().iter().flat_map(|&(x, y)| [x, y]).collect()
    }

    pub fn from_flat(v: &[f64]) -> Self {
        assert_eq!(v.len(), 2 * LANDMARK_COUNT);
        let p = |i: usize| (v[2 * i], v[2 * i + 1]);
        Self { left_eye: p(0), right_eye: p(1), left_corner: p(2), right_corner: p(3), nose: p(4) }
    }

    /// Landmark placement for a head pose in a `face_size` image.
    ///
    /// With `F` the face width and center `(F/2, F/2)`: offsets are rotated by
    /// roll, then eyes and corners translate by `0.375·F` px per radian of
    /// yaw (x) and pitch (−y); the nose by `0.5625·F`.
    pub fn for_pose(pose: HeadPose, face_size: usize) -> Self {
        let f = face_size as f64;
        let c = f / 2.0;
        let (sr, cr) = pose.roll.sin_cos();
        let rot = |x: f64, y: f64| (x * cr - y * sr, x * sr + y * cr);
        let shift = |k: f64| (k * f * pose.yaw, -k * f * pose.pitch);
        let place = |off: (f64, f64), k: f64| {
            let (rx, ry) = rot(off.0 * f, off.1 * f);
            let (sx, sy) = shift(k);
            (c + rx + sx, c + ry + sy)
        };
        Self {
            left_eye: place((-EYE_OFFSET.0, EYE_OFFSET.1), EYE_SHIFT_PER_RAD),
            right_eye: place((EYE_OFFSET.0, EYE_OFFSET.1), EYE_SHIFT_PER_RAD),
            left_corner: place((-CORNER_OFFSET_X, EYE_OFFSET.1), EYE_SHIFT_PER_RAD),
            right_corner: place((CORNER_OFFSET_X, EYE_OFFSET.1), EYE_SHIFT_PER_RAD),
            nose: place((0.0, NOSE_OFFSET_Y), NOSE_SHIFT_PER_RAD),
        }
    }
}

/// Gaze of each eye: face gaze plus the fixed pose coupling.
pub fn eye_gaze_for(face_gaze: GazeAngles, pose: HeadPose) -> GazeAngles {
    GazeAngles::new(
        face_gaze.pitch + POSE_GAZE_COUPLING * pose.pitch,
        face_gaze.yaw + POSE_GAZE_COUPLING * pose.yaw,
    )
}

/// Clean (undegraded) face render.
pub fn render_face_clean(gaze: GazeAngles, pose: HeadPose, face_size: usize, supersample: usize) -> (Matrix, Landmarks, [GazeAngles; 2]) {
    let f = face_size as f64;
    let lm = Landmarks::for_pose(pose, face_size);
    let eye_gaze = eye_gaze_for(gaze, pose);
    let eye_width = f / 4.0;
    let left = EyeShape::new(lm.left_eye, eye_width, eye_gaze);
    let right = EyeShape::new(lm.right_eye, eye_width, eye_gaze);
    let face_center = (f / 2.0 + FACE_SHIFT_PER_RAD * f * pose.yaw, f / 2.0 - FACE_SHIFT_PER_RAD * f * pose.pitch);
    let (fa, fb) = (FACE_AXES.0 * f, FACE_AXES.1 * f);
    let nose_r = NOSE_RADIUS * f;
    let img = rasterize(face_size, supersample, |x, y| {
        if let Some(c) = left.classify(x, y).or_else(|| right.classify(x, y)) {
            return c;
        }
        let (nx, ny) = (x - lm.nose.0, y - lm.nose.1);
        if nx * nx + ny * ny <= nose_r * nose_r {
            return Class::Nose;
        }
        let (dx, dy) = ((x - face_center.0) / fa, (y - face_center.1) / fb);
        if dx * dx + dy * dy <= 1.0 {
            Class::Skin
        } else {
            Class::Background
        }
    });
    (img, lm, [eye_gaze, eye_gaze])
}

/// Degraded face render with its landmarks and per-eye gaze.
pub fn render_face<R: Rng + ?Sized>(
    gaze: GazeAngles,
    pose: HeadPose,
    world: &WorldConfig,
    rng: &mut R,
) -> (Matrix, Landmarks, [GazeAngles; 2]) {
    let (clean, lm, eyes) = render_face_clean(gaze, pose, world.face_size, world.supersample);
    let b = brightness_offset(world.brightness_jitter, rng);
    let img = degrade(&clean, world.blur_width, b, world.sigma_target, rng);
    (img, lm, eyes)
}

/// Eye patch cut from a face at an eye-center landmark, resampled to `eye_size`.
pub fn crop_eye(face: &Matrix, center: (f64, f64), eye_size: usize) -> Matrix {
    let zoom = eye_size as f64 / (face.cols() as f64 / 4.0);
    crop(face, center, eye_size, zoom)
}

/// Darkness-weighted centroid of the iris and pupil, relative to the patch
/// center, in pixels. Used to decode gaze from renders.
pub fn iris_centroid(img: &Matrix) -> (f64, f64) {
    let (h, w) = img.shape();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    // Only look inside a shrunken sclera opening, where the darkest mass is
    // the iris; darkness is measured from the brightest pixel there.
    let (ax, ay) = (CENTROID_SHRINK * SCLERA_AXES.0 * w as f64, CENTROID_SHRINK * SCLERA_AXES.1 * w as f64);
    let inside = |x: usize, y: usize| {
        let (dx, dy) = ((x as f64 + 0.5 - cx) / ax, (y as f64 + 0.5 - cy) / ay);
        dx * dx + dy * dy <= 1.0
    };
    let mut reference = f64::NEG_INFINITY;
    for y in 0..h {
        for x in 0..w {
            if inside(x, y) {
                reference = reference.max(img.get(y, x));
            }
        }
    }
    let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if !inside(x, y) {
                continue;
            }
            let weight = (reference - img.get(y, x)).max(0.0);
            sx += weight * (x as f64 + 0.5);
            sy += weight * (y as f64 + 0.5);
            sw += weight;
        }
    }
    if sw == 0.0 {
        return (0.0, 0.0);
    }
    (sx / sw - cx, sy / sw - cy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noiseless() -> WorldConfig {
        WorldConfig { sigma_source: 0.0, sigma_target: 0.0, brightness_jitter: 0.0, ..WorldConfig::default() }
    }

    fn mirror(img: &Matrix) -> Matrix {
        let w = img.cols();
        Matrix::from_fn(img.rows(), w, |y, x| img.get(y, w - 1 - x))
    }

    #[test]
    fn centered_gaze_is_left_right_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = render_eye(GazeAngles::default(), Domain::Source, &noiseless(), &mut rng);
        assert_eq!(img, mirror(&img));
        let (cx, cy) = iris_centroid(&img);
        assert!(cx.abs() < 1e-12 && cy.abs() < 1e-12, "{cx} {cy}");
    }

    #[test]
    fn opposite_yaws_are_mirror_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = noiseless();
        let a = render_eye(GazeAngles::from_degrees(5.0, 20.0), Domain::Source, &w, &mut rng);
        let b = render_eye(GazeAngles::from_degrees(5.0, -20.0), Domain::Source, &w, &mut rng);
        assert_eq!(a, mirror(&b));
        assert_ne!(a, b);
    }

    #[test]
    fn iris_centroid_tracks_sin_yaw() {
        let w = noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for i in 0..100 {
            let yaw = (-30.0 + 60.0 * i as f64 / 99.0).to_radians();
            let img = render_eye(GazeAngles::new(0.0, yaw), Domain::Source, &w, &mut rng);
            xs.push(yaw.sin());
            ys.push(iris_centroid(&img).0);
        }
        assert!(pearson(&xs, &ys) > 0.99);
    }

    pub(crate) fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn canonical_landmarks() {
        let lm = Landmarks::for_pose(HeadPose::default(), 32);
        assert_eq!(lm.left_eye, (10.0, 13.0));
        assert_eq!(lm.right_eye, (22.0, 13.0));
        assert_eq!(lm.left_corner, (7.0, 13.0));
        assert_eq!(lm.right_corner, (25.0, 13.0));
        assert_eq!(lm.nose, (16.0, 19.0));
    }

    #[test]
    fn head_yaw_shifts_eye_centers_linearly() {
        let yaw = 10f64.to_radians();
        let lm0 = Landmarks::for_pose(HeadPose::default(), 32);
        let lm = Landmarks::for_pose(HeadPose { yaw, ..HeadPose::default() }, 32);
        let expected = EYE_SHIFT_PER_RAD * 32.0 * yaw;
        assert!((lm.left_eye.0 - lm0.left_eye.0 - expected).abs() < 1e-12);
        assert!((lm.right_eye.0 - lm0.right_eye.0 - expected).abs() < 1e-12);
        assert_eq!(lm.left_eye.1, lm0.left_eye.1);
    }

    #[test]
    fn eye_crops_decode_per_eye_gaze() {
        let w = noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..50 {
            let gaze = GazeAngles::from_degrees(-25.0 + i as f64, 28.0 - 1.1 * i as f64);
            let pose = HeadPose { pitch: (i as f64 * 0.01) - 0.2, yaw: 0.2 - 0.008 * i as f64, roll: 0.05 };
            let (face, lm, eyes) = render_face(gaze, pose, &w, &mut rng);
            for (center, eg) in [(lm.left_eye, eyes[0]), (lm.right_eye, eyes[1])] {
                let patch = crop_eye(&face, center, w.eye_size);
                let (cx, cy) = iris_centroid(&patch);
                let s = IRIS_SHIFT * w.eye_size as f64;
                assert!((cx - s * eg.yaw.sin()).abs() < 1.0, "x {cx} vs {}", s * eg.yaw.sin());
                assert!((cy + s * eg.pitch.sin()).abs() < 1.0, "y {cy} vs {}", -s * eg.pitch.sin());
            }
        }
    }

    #[test]
    fn renders_stay_in_unit_range() {
        let w = WorldConfig { sigma_target: 0.5, brightness_jitter: 0.5, ..WorldConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (face, _, _) = render_face(GazeAngles::default(), HeadPose::default(), &w, &mut rng);
        assert!(face.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let eye = render_eye(GazeAngles::default(), Domain::Target, &w, &mut rng);
        assert_eq!(eye.shape(), (16, 16));
        assert!(eye.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn binomial_kernels() {
        assert_eq!(binomial_kernel(1), vec![1.0]);
        assert_eq!(binomial_kernel(3), vec![0.25, 0.5, 0.25]);
        assert_eq!(binomial_kernel(5).len(), 5);
        let flat = Matrix::filled(6, 6, 0.4);
        assert!(blur(&flat, 5).sub(&flat).max_abs() < 1e-15);
    }
}
