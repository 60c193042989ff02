//! Finite-difference gradient checks shared by the integration tests and
//! the acceptance runner. Everything runs at f64.

#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skysearch_core::anchors::{
    generate_default_boxes, match_anchors, multibox_loss, AnchorLayer, DefaultBoxSpec, ImageTargets, MultiboxConfig,
};
use skysearch_core::detector::{DetectorConfig, DetectorNet};
use skysearch_core::nn::{
    gradient_check, softmax_cross_entropy, Conv2d, Flatten, GradCheckReport, Layer, Linear, MaxPool2d, Parameterized,
    Relu, Sequential, Tensor,
};
use skysearch_core::qa::{QaConfig, QaNet};
use skysearch_core::{BBox, Result};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn signature<M: Parameterized<f64> + ?Sized>(m: &M) -> u64 {
    let mut h = DefaultHasher::new();
    m.kink_signature(&mut h);
    h.finish()
}

/// A layer whose input is exposed as an extra parameter named `input`, so
/// the checker probes the input gradient as well.
struct WithInput {
    x: Tensor<f64>,
    layer: Layer<f64>,
}

impl Parameterized<f64> for WithInput {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<f64>)) {
        f(format!("{prefix}input"), &self.x);
        self.layer.visit_params(prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<f64>)) {
        f(format!("{prefix}input"), &mut self.x);
        self.layer.visit_params_mut(prefix, f);
    }

    fn kink_signature(&self, h: &mut dyn Hasher) {
        self.layer.kink_signature(h);
    }
}

/// Loss `sum(w * layer(x))` with random `w`.
fn check_layer(layer: Layer<f64>, in_shape: &[usize], seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, in_shape, 1.0);
    let mut m = WithInput { x, layer };
    let out_shape = m.layer.infer(&m.x)?.shape().to_vec();
    let w = rand_tensor(&mut rng, &out_shape, 1.0);
    gradient_check(&mut m, EPS, None, |m, backward| {
        let y = m.layer.forward(&m.x)?;
        let loss: f64 = y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        if backward {
            let dx = m.layer.backward(&w)?;
            for (g, d) in m.x.grad_mut().unwrap().iter_mut().zip(dx.data()) {
                *g += d;
            }
        }
        Ok((loss, signature(m)))
    })
}

pub fn linear(seed: u64) -> Result<GradCheckReport> {
    check_layer(Layer::Linear(Linear::new(7, 5, seed)?), &[7], seed)
}

pub fn conv_same(seed: u64) -> Result<GradCheckReport> {
    check_layer(Layer::Conv2d(Conv2d::new(3, 4, 3, 1, 1, seed)?), &[3, 6, 5], seed)
}

pub fn conv_strided(seed: u64) -> Result<GradCheckReport> {
    check_layer(Layer::Conv2d(Conv2d::new(2, 3, 3, 2, 0, seed)?), &[2, 7, 8], seed)
}

pub fn relu(seed: u64) -> Result<GradCheckReport> {
    check_layer(Layer::Relu(Relu::default()), &[3, 4, 4], seed)
}

pub fn maxpool(seed: u64) -> Result<GradCheckReport> {
    check_layer(Layer::MaxPool2d(MaxPool2d::new(2)), &[2, 6, 6], seed)
}

pub fn flatten(seed: u64) -> Result<GradCheckReport> {
    check_layer(Layer::Flatten(Flatten::default()), &[2, 3, 4], seed)
}

/// conv -> relu -> pool -> flatten -> linear under softmax cross-entropy.
pub fn sequential(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Sequential::new(vec![
        Layer::Conv2d(Conv2d::new(2, 3, 3, 1, 1, seed)?),
        Layer::Relu(Relu::default()),
        Layer::MaxPool2d(MaxPool2d::new(2)),
        Layer::Flatten(Flatten::default()),
        Layer::Linear(Linear::new(12, 3, seed + 1)?),
    ]);
    let x = rand_tensor(&mut rng, &[2, 4, 4], 1.0);
    let target = [0.2, 0.0, 0.8];
    gradient_check(&mut net, EPS, None, |net, backward| {
        let y = net.forward(&x)?;
        let (loss, g) = softmax_cross_entropy(y.data(), &target);
        if backward {
            net.backward(&Tensor::from_slice(&g))?;
        }
        Ok((loss, signature(net)))
    })
}

struct Predictions {
    logits: Tensor<f64>,
    offsets: Tensor<f64>,
}

impl Parameterized<f64> for Predictions {
    fn visit_params(&self, _: &str, f: &mut dyn FnMut(String, &Tensor<f64>)) {
        f("logits".into(), &self.logits);
        f("offsets".into(), &self.offsets);
    }

    fn visit_params_mut(&mut self, _: &str, f: &mut dyn FnMut(String, &mut Tensor<f64>)) {
        f("logits".into(), &mut self.logits);
        f("offsets".into(), &mut self.offsets);
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.gen_range(0.1..0.4);
    let h = rng.gen_range(0.1..0.4);
    let x = rng.gen_range(0.0..1.0 - w);
    let y = rng.gen_range(0.0..1.0 - h);
    BBox::new(x, y, x + w, y + h)
}

fn random_targets(rng: &mut ChaCha8Rng, num_classes: usize) -> ImageTargets {
    let n = rng.gen_range(1..=3);
    let boxes = (0..n).map(|_| random_box(rng)).collect();
    let labels = (0..n)
        .map(|_| {
            let mut l = vec![rng.gen_range(1..num_classes)];
            if rng.gen_bool(0.5) {
                let extra = rng.gen_range(1..num_classes);
                if !l.contains(&extra) {
                    l.push(extra);
                }
            }
            l
        })
        .collect();
    ImageTargets { boxes, labels }
}

/// Mined negatives plus, per offset, which side of the smooth-L1 knee it is on.
fn multibox_signature(negatives: &[bool], grad_offsets: &[f64], knee: f64) -> u64 {
    let mut h = DefaultHasher::new();
    for &n in negatives {
        h.write_u8(n as u8);
    }
    for g in grad_offsets {
        h.write_u8((g.abs() >= knee * (1.0 - 1e-12)) as u8);
    }
    h.finish()
}

/// Multibox loss with respect to the raw predictions.
pub fn multibox(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = DefaultBoxSpec {
        layers: vec![AnchorLayer { grid_h: 4, grid_w: 4, scale: 0.2, aspect_ratios: vec![1.0, 2.0, 0.5], extra_scale: true }],
        final_scale: 0.4,
    };
    let anchors = generate_default_boxes(&spec)?;
    let c = 4;
    let targets = random_targets(&mut rng, c);
    let config = MultiboxConfig { loc_weight: rng.gen_range(0.5..2.0), ..MultiboxConfig::default() };
    let assignment = match_anchors(&targets.boxes, &anchors, config.match_threshold);
    let mut preds = Predictions {
        logits: rand_tensor(&mut rng, &[anchors.len(), c], 2.0),
        offsets: rand_tensor(&mut rng, &[anchors.len(), 4], 2.0),
    };
    let knee = config.loc_weight / assignment.num_positive as f64;
    gradient_check(&mut preds, EPS, None, |p, backward| {
        let (loss, terms) = multibox_loss(&anchors, &assignment, p.logits.data(), p.offsets.data(), c, &targets, &config)?;
        if backward {
            p.logits.grad_mut().unwrap().copy_from_slice(&terms.grad_logits);
            p.offsets.grad_mut().unwrap().copy_from_slice(&terms.grad_offsets);
        }
        Ok((loss, multibox_signature(&terms.negatives, &terms.grad_offsets, knee)))
    })
}

/// Two backbone convs and two heads on a 16x16 input.
pub fn small_detector_config() -> DetectorConfig {
    let layer = |g, scale| AnchorLayer { grid_h: g, grid_w: g, scale, aspect_ratios: vec![1.0, 2.0], extra_scale: true };
    DetectorConfig {
        input_size: 16,
        channels: vec![3, 4],
        anchors: DefaultBoxSpec { layers: vec![layer(8, 0.2), layer(4, 0.4)], final_scale: 0.6 },
        ..DetectorConfig::default()
    }
}

/// Full detector under the multibox loss.
pub fn detector_with(cfg: &DetectorConfig, num_classes: usize, max_coords: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = DetectorNet::<f64>::new(cfg, num_classes, seed)?;
    let anchors = generate_default_boxes(&cfg.anchors)?;
    let s = cfg.input_size;
    let x = rand_tensor(&mut rng, &[3, s, s], 0.5);
    let targets = random_targets(&mut rng, num_classes);
    let assignment = match_anchors(&targets.boxes, &anchors, cfg.multibox.match_threshold);
    let knee = cfg.multibox.loc_weight / assignment.num_positive as f64;
    gradient_check(&mut net, EPS, Some(max_coords), |net, backward| {
        let out = net.forward(&x)?;
        let (loss, terms) =
            multibox_loss(&anchors, &assignment, &out.logits, &out.offsets, num_classes, &targets, &cfg.multibox)?;
        if backward {
            net.backward(&terms.grad_logits, &terms.grad_offsets)?;
        }
        let mut h = DefaultHasher::new();
        net.kink_signature(&mut h);
        h.write_u64(multibox_signature(&terms.negatives, &terms.grad_offsets, knee));
        Ok((loss, h.finish()))
    })
}

pub fn detector(seed: u64) -> Result<GradCheckReport> {
    detector_with(&small_detector_config(), 3, 12, seed)
}

pub fn small_qa_config() -> QaConfig {
    QaConfig { crop_size: 8, img_channels: vec![3, 4], h_img: 6, h_q: 5, h_common: 7, ..QaConfig::default() }
}

/// Full QA network under the yes/no cross-entropy.
pub fn qa_with(cfg: &QaConfig, vocab_len: usize, max_coords: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = QaNet::<f64>::new(cfg, vocab_len, seed)?;
    let s = cfg.crop_size;
    let img = rand_tensor(&mut rng, &[3, s, s], 0.5);
    let q = Tensor::new(vec![vocab_len], (0..vocab_len).map(|_| f64::from(rng.gen_bool(0.4) as u8)).collect()).unwrap();
    let target = if rng.gen_bool(0.5) { [1.0, 0.0] } else { [0.0, 1.0] };
    gradient_check(&mut net, EPS, Some(max_coords), |net, backward| {
        let logits = net.forward(&img, &q)?;
        let (loss, g) = softmax_cross_entropy(&logits, &target);
        if backward {
            net.backward(&g)?;
        }
        Ok((loss, signature(net)))
    })
}

pub fn qa(seed: u64) -> Result<GradCheckReport> {
    qa_with(&small_qa_config(), 5, 12, seed)
}

pub type Check = fn(u64) -> Result<GradCheckReport>;

pub const CHECKS: &[(&str, Check)] = &[
    ("linear", linear),
    ("conv2d", conv_same),
    ("conv2d_strided", conv_strided),
    ("relu", relu),
    ("maxpool2d", maxpool),
    ("flatten", flatten),
    ("sequential", sequential),
    ("multibox", multibox),
    ("detector", detector),
    ("qa", qa),
];

/// Worst report per check over `seeds`.
pub fn run_all(seeds: std::ops::Range<u64>) -> Vec<(&'static str, GradCheckReport)> {
    CHECKS
        .iter()
        .map(|(name, check)| {
            let mut worst: Option<GradCheckReport> = None;
            let mut total = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, skipped_kinks: 0 };
            for seed in seeds.clone() {
                let r = check(seed).unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
                total.checked += r.checked;
                total.skipped_kinks += r.skipped_kinks;
                if worst.as_ref().is_none_or(|w| r.max_rel_error > w.max_rel_error) {
                    worst = Some(r);
                }
            }
            let w = worst.expect("non-empty seed range");
            total.max_rel_error = w.max_rel_error;
            total.worst = w.worst;
            (*name, total)
        })
        .collect()
}
