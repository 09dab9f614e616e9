#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use emopose::dataset::Label;
use emopose::emotion::{EmotionClass, VaThresholds};
use emopose::keypoint_io::{FACE_POINTS, POSE_POINTS};
use emopose::metrics::{cross_entropy, mse_loss};
use emopose::nn::{backward, forward, init_network, DenseMatrix, Head, NetworkParams, NetworkSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Samples = Vec<(Vec<f64>, Label)>;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/openpose").join(name)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// An OpenPose frame whose arm and face layout depends on `class`.
pub fn class_frame_json(class: usize, rng: &mut ChaCha8Rng) -> String {
    let mut base = ChaCha8Rng::seed_from_u64(1234);
    let mut pose = Vec::with_capacity(3 * POSE_POINTS);
    for j in 0..POSE_POINTS {
        let (mut x, mut y): (f64, f64) = (base.gen_range(700.0..1200.0), base.gen_range(200.0..900.0));
        if (2..8).contains(&j) {
            x += 40.0 * class as f64 * if j % 2 == 0 { 1.0 } else { -1.0 };
            y -= 25.0 * ((class * j) % 5) as f64;
        }
        x += rng.gen_range(-2.0..2.0);
        y += rng.gen_range(-2.0..2.0);
        pose.extend([x, y, 0.9]);
    }
    let mut face = Vec::with_capacity(3 * FACE_POINTS);
    for j in 0..FACE_POINTS {
        let (mut x, mut y): (f64, f64) = (base.gen_range(900.0..1000.0), base.gen_range(250.0..350.0));
        if j % 7 == class {
            y += 15.0;
        }
        x += rng.gen_range(-1.0..1.0);
        y += rng.gen_range(-1.0..1.0);
        face.extend([x, y, 0.8]);
    }
    let nums = |v: &[f64]| v.iter().map(|n| format!("{n:.3}")).collect::<Vec<_>>().join(",");
    format!(
        r#"{{"version":1.3,"people":[{{"person_id":[-1],"pose_keypoints_2d":[{}],"face_keypoints_2d":[{}],"hand_left_keypoints_2d":[],"hand_right_keypoints_2d":[]}}]}}"#,
        nums(&pose),
        nums(&face)
    )
}

pub fn frame_file_name(video: &str, idx: usize) -> String {
    format!("{video}_{idx:012}_keypoints.json")
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum TreeLabels {
    Expr,
    Va,
    AllSentinel,
}

/// Write `root/<video>/...` frames plus `labels/<video>.txt`. Frame `i` of
/// every video has class `i % 7`.
pub fn write_tree(dir: &Path, videos: usize, frames: usize, labels: TreeLabels, seed: u64) -> (PathBuf, PathBuf) {
    let root = dir.join("openpose");
    let label_dir = dir.join("labels");
    fs::create_dir_all(&label_dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos = VaThresholds::default().prototypes;
    for v in 0..videos {
        let video = format!("video{v:02}");
        let vdir = root.join(&video);
        fs::create_dir_all(&vdir).unwrap();
        let mut text = String::from(match labels {
            TreeLabels::Va => "VA\n",
            _ => "EXPR\n",
        });
        for i in 0..frames {
            let class = i % 7;
            fs::write(vdir.join(frame_file_name(&video, i)), class_frame_json(class, &mut rng)).unwrap();
            match labels {
                TreeLabels::Expr => text.push_str(&format!("{class}\n")),
                TreeLabels::AllSentinel => text.push_str("-1\n"),
                TreeLabels::Va => {
                    let (pv, pa) = protos[class];
                    text.push_str(&format!("{},{}\n", pv * 0.9, pa * 0.9));
                }
            }
        }
        fs::write(label_dir.join(format!("{video}.txt")), text).unwrap();
    }
    (root, label_dir)
}

/// Seven Gaussian clusters. `spread` is the std of the cluster means per
/// dimension, noise has unit std scaled by `noise`.
pub fn gaussian_blobs(
    dim: usize,
    per_class_train: usize,
    per_class_val: usize,
    spread: f64,
    noise: f64,
    seed: u64,
) -> (Samples, Samples) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..7).map(|_| (0..dim).map(|_| spread * normal(&mut rng)).collect()).collect();
    let mut draw = |n: usize| {
        let mut out = Vec::new();
        for _ in 0..n {
            for (c, m) in means.iter().enumerate() {
                let x = m.iter().map(|&mu| mu + noise * normal(&mut rng)).collect();
                out.push((x, Label::Expr(c)));
            }
        }
        out
    };
    let train = draw(per_class_train);
    let val = draw(per_class_val);
    (train, val)
}

/// Inputs are a random linear embedding of 4 latent factors plus noise;
/// valence and arousal are fixed linear functions of the latents plus noise.
pub fn va_regression(dim: usize, n_train: usize, n_val: usize, sigma: f64, seed: u64) -> (Samples, Samples) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embed: Vec<[f64; 4]> = (0..dim)
        .map(|_| [normal(&mut rng), normal(&mut rng), normal(&mut rng), normal(&mut rng)])
        .collect();
    let wv = [0.4, 0.3, -0.2, 0.0];
    let wa = [0.0, -0.3, 0.2, 0.4];
    let mut draw = |n: usize| {
        (0..n)
            .map(|_| {
                let z: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                let x = embed
                    .iter()
                    .map(|e| e.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / 2.0 + sigma * normal(&mut rng))
                    .collect();
                let dot = |w: &[f64; 4]| w.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
                let v = (dot(&wv) + sigma * normal(&mut rng)).clamp(-1.0, 1.0);
                let a = (dot(&wa) + sigma * normal(&mut rng)).clamp(-1.0, 1.0);
                (x, Label::Va(v, a))
            })
            .collect::<Vec<_>>()
    };
    let train = draw(n_train);
    let val = draw(n_val);
    (train, val)
}

pub enum Target {
    Classes(Vec<usize>),
    Va(DenseMatrix),
}

pub fn random_target(head: Head, rows: usize, rng: &mut ChaCha8Rng) -> Target {
    match head {
        Head::Classifier7 => Target::Classes((0..rows).map(|_| rng.gen_range(0..7)).collect()),
        Head::Va2 => Target::Va(
            DenseMatrix::from_vec(rows, 2, (0..2 * rows).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        ),
    }
}

/// Mean loss and its gradient with respect to the network output.
pub fn loss(out: &DenseMatrix, target: &Target) -> (f64, DenseMatrix) {
    match target {
        Target::Classes(c) => cross_entropy(out, c).unwrap(),
        Target::Va(t) => mse_loss(out, t).unwrap(),
    }
}

/// Random network with non-zero biases, so no pre-activation sits exactly
/// on the ReLU kink.
pub fn random_network(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> NetworkParams {
    let mut params = init_network(spec, rng.gen()).unwrap();
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v += 0.1 * normal(rng);
        }
    }
    params
}

pub fn analytic_grads(params: &NetworkParams, spec: &NetworkSpec, x: &DenseMatrix, target: &Target) -> NetworkParams {
    let (out, cache) = forward(params, spec, x).unwrap();
    let (_, mut g) = loss(&out, target);
    g.scale(x.rows() as f64);
    backward(params, spec, &cache, &g).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Largest `|a - n| / max(|a|, |n|, floor)` over the checked parameters.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters whose `+h` or `-h` evaluation flipped a ReLU, where the
    /// finite difference straddles a kink.
    pub skipped: usize,
}

/// Compare analytic gradients against central differences, parameter by
/// parameter.
pub fn gradient_check(
    params: &NetworkParams,
    spec: &NetworkSpec,
    x: &DenseMatrix,
    target: &Target,
    h: f64,
    floor: f64,
) -> GradCheck {
    let analytic = analytic_grads(params, spec, x, target);
    let a_flat: Vec<f64> = analytic.tensors().into_iter().flatten().copied().collect();
    let base_pattern = forward(params, spec, x).unwrap().1.relu_pattern();
    let mut p = params.clone();
    let mut result = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut k = 0;
    let n_tensors = p.tensors().len();
    for t in 0..n_tensors {
        let len = p.tensors()[t].len();
        for i in 0..len {
            let orig = p.tensors()[t][i];
            let mut eval = |v: f64| {
                p.tensors_mut()[t][i] = v;
                let (out, cache) = forward(&p, spec, x).unwrap();
                (loss(&out, target).0, cache.relu_pattern() == base_pattern)
            };
            let (up, same_up) = eval(orig + h);
            let (down, same_down) = eval(orig - h);
            p.tensors_mut()[t][i] = orig;
            let a = a_flat[k];
            k += 1;
            if !(same_up && same_down) {
                result.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            result.max_rel_error = result.max_rel_error.max(rel);
            result.checked += 1;
        }
    }
    result
}

pub fn class_names() -> Vec<&'static str> {
    EmotionClass::ALL.iter().map(|c| c.name()).collect()
}
