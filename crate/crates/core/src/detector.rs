//! Single-shot detector over the low-resolution frame and proposal
//! extraction from the high-resolution original.

use std::hash::Hasher;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{
    generate_default_boxes, match_anchors, multibox_terms, DefaultBoxSpec, EmptyBatch, ImageTargets,
    MultiboxConfig,
};
use crate::error::{Error, Result};
use crate::geometry::{decode_offsets, drop_degenerate, nms, BBox, Detection};
use crate::nn::layers::join;
use crate::nn::{
    mix, param_seed, softmax, Checkpoint, Conv2d, Layer, MaxPool2d, Parameterized, Relu, Scalar, Sequential, Sgd,
    SgdConfig, Tensor,
};
use crate::scene::{augment, AugmentOps, Annotation, Dataset, FramePair, Raster, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Side of the square detector input.
    pub input_size: usize,
    /// Backbone conv widths; a 2x max-pool separates consecutive convs.
    pub channels: Vec<usize>,
    pub anchors: DefaultBoxSpec,
    pub multibox: MultiboxConfig,
    pub augment: AugmentOps,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub top_k: usize,
    /// Context added to each side of a proposal crop, as a fraction of the
    /// box size.
    pub crop_margin: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            input_size: 128,
            channels: vec![16, 32, 64, 64],
            anchors: DefaultBoxSpec::desk(),
            multibox: MultiboxConfig::default(),
            augment: AugmentOps::all(),
            conf_threshold: 0.01,
            nms_iou: 0.45,
            top_k: 50,
            crop_margin: 0.0,
        }
    }
}

impl DetectorConfig {
    /// Side of the first head's feature map.
    pub fn feature_size(&self) -> usize {
        self.input_size >> self.channels.len().saturating_sub(1)
    }

    pub fn violations(&self, section: &str) -> Vec<String> {
        let mut v = Vec::new();
        let mut bad = |m: String| v.push(format!("{section}.{m}"));
        if self.channels.is_empty() || self.channels.contains(&0) {
            bad(format!("channels must be non-empty and positive, got {:?}", self.channels));
        }
        let pools = self.channels.len().saturating_sub(1) + self.anchors.layers.len().saturating_sub(1);
        if self.input_size == 0 || self.input_size % (1usize << pools.min(31)) != 0 {
            bad(format!(
                "input_size ({}) must be divisible by 2^{pools} for the configured pooling",
                self.input_size
            ));
        } else {
            let mut g = self.feature_size();
            for (i, layer) in self.anchors.layers.iter().enumerate() {
                if layer.grid_h != g || layer.grid_w != g {
                    bad(format!(
                        "anchors.layers[{i}] grid {}x{} does not match the {g}x{g} feature map",
                        layer.grid_h, layer.grid_w
                    ));
                }
                g /= 2;
            }
        }
        v.extend(self.anchors.violations().into_iter().map(|m| format!("{section}.anchors: {m}")));
        let mut bad = |m: String| v.push(format!("{section}.{m}"));
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            bad(format!("conf_threshold must be in [0, 1], got {}", self.conf_threshold));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            bad(format!("nms_iou must be in (0, 1], got {}", self.nms_iou));
        }
        if self.top_k == 0 {
            bad("top_k must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.crop_margin) {
            bad(format!("crop_margin must be in [0, 1], got {}", self.crop_margin));
        }
        let mb = &self.multibox;
        if !(mb.match_threshold > 0.0 && mb.match_threshold <= 1.0) {
            bad(format!("multibox.match_threshold must be in (0, 1], got {}", mb.match_threshold));
        }
        if mb.negative_ratio <= 0.0 || !mb.negative_ratio.is_finite() {
            bad(format!("multibox.negative_ratio must be > 0, got {}", mb.negative_ratio));
        }
        if mb.loc_weight < 0.0 || !mb.loc_weight.is_finite() {
            bad(format!("multibox.loc_weight must be >= 0, got {}", mb.loc_weight));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations("detector");
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// What the class channels predict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorTask {
    /// Background plus one pedestrian class.
    Pedestrian,
    /// Background plus one class per vocabulary word (single-step baseline).
    Actions,
}

impl DetectorTask {
    pub fn num_classes(self, vocab_len: usize) -> usize {
        match self {
            DetectorTask::Pedestrian => 2,
            DetectorTask::Actions => 1 + vocab_len,
        }
    }

    pub fn targets(self, boxes: Vec<BBox>, annotations: &[&Annotation], vocab: &[String]) -> Result<ImageTargets> {
        let labels = match self {
            DetectorTask::Pedestrian => vec![vec![1]; boxes.len()],
            DetectorTask::Actions => annotations
                .iter()
                .map(|a| {
                    a.actions
                        .iter()
                        .map(|w| {
                            vocab.iter().position(|v| v == w).map(|i| i + 1).ok_or_else(|| Error::UnknownWord {
                                word: w.clone(),
                                vocabulary: vocab.to_vec(),
                            })
                        })
                        .collect()
                })
                .collect::<Result<_>>()?,
        };
        Ok(ImageTargets { boxes, labels })
    }
}

/// Per-anchor predictions: logits `(A, C)` and offsets `(A, 4)`, anchors
/// ordered (layer, row, col, box).
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorOutput<T> {
    pub logits: Vec<T>,
    pub offsets: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct DetectorNet<T: Scalar = f32> {
    input_size: usize,
    num_classes: usize,
    backbone: Sequential<T>,
    pools: Vec<Layer<T>>,
    heads: Vec<Conv2d<T>>,
    boxes_per_cell: Vec<usize>,
    grids: Vec<usize>,
}

impl<T: Scalar> DetectorNet<T> {
    pub fn new(config: &DetectorConfig, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_classes < 2 {
            return Err(Error::Config(vec![format!("detector needs >= 2 classes, got {num_classes}")]));
        }
        let mut layers = Vec::new();
        let mut in_ch = 3;
        for (i, &out) in config.channels.iter().enumerate() {
            if i > 0 {
                layers.push(Layer::MaxPool2d(MaxPool2d::new(2)));
            }
            let name = format!("backbone.{}", layers.len());
            let conv = Conv2d::new(in_ch, out, 3, 1, 1, param_seed(seed, &name))?;
            layers.push(Layer::Conv2d(if i == 0 { conv.without_input_grad() } else { conv }));
            layers.push(Layer::Relu(Relu::default()));
            in_ch = out;
        }
        let mut heads = Vec::new();
        let mut pools = Vec::new();
        let mut grids = Vec::new();
        let mut g = config.feature_size();
        for (i, layer) in config.anchors.layers.iter().enumerate() {
            if i > 0 {
                pools.push(Layer::MaxPool2d(MaxPool2d::new(2)));
                g /= 2;
            }
            let out = layer.boxes_per_cell() * (num_classes + 4);
            heads.push(Conv2d::new(in_ch, out, 3, 1, 1, param_seed(seed, &format!("head.{i}")))?);
            grids.push(g);
        }
        Ok(DetectorNet {
            input_size: config.input_size,
            num_classes,
            backbone: Sequential::new(layers),
            pools,
            heads,
            boxes_per_cell: config.anchors.layers.iter().map(|l| l.boxes_per_cell()).collect(),
            grids,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn num_anchors(&self) -> usize {
        self.grids.iter().zip(&self.boxes_per_cell).map(|(g, b)| g * g * b).sum()
    }

    /// Sets every weight and bias to zero.
    pub fn zero_params(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.data_mut().iter_mut().for_each(|v| *v = T::zero()));
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.input_size;
        if x.shape() != [3, s, s] {
            return Err(Error::shape("detector input", format!("[3, {s}, {s}]"), x.shape()));
        }
        Ok(())
    }

    fn gather(&self, head_outputs: &[Tensor<T>]) -> DetectorOutput<T> {
        let c = self.num_classes;
        let a = self.num_anchors();
        let mut logits = vec![T::zero(); a * c];
        let mut offsets = vec![T::zero(); a * 4];
        let mut base = 0;
        for (i, out) in head_outputs.iter().enumerate() {
            let (g, b) = (self.grids[i], self.boxes_per_cell[i]);
            let plane = g * g;
            let d = out.data();
            for cell in 0..plane {
                for k in 0..b {
                    let anchor = base + cell * b + k;
                    for j in 0..c {
                        logits[anchor * c + j] = d[(k * c + j) * plane + cell];
                    }
                    for j in 0..4 {
                        offsets[anchor * 4 + j] = d[(b * c + k * 4 + j) * plane + cell];
                    }
                }
            }
            base += plane * b;
        }
        DetectorOutput { logits, offsets }
    }

    fn scatter(&self, dlogits: &[T], doffsets: &[T]) -> Vec<Tensor<T>> {
        let c = self.num_classes;
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut base = 0;
        for i in 0..self.heads.len() {
            let (g, b) = (self.grids[i], self.boxes_per_cell[i]);
            let plane = g * g;
            let mut d = vec![T::zero(); b * (c + 4) * plane];
            for cell in 0..plane {
                for k in 0..b {
                    let anchor = base + cell * b + k;
                    for j in 0..c {
                        d[(k * c + j) * plane + cell] = dlogits[anchor * c + j];
                    }
                    for j in 0..4 {
                        d[(b * c + k * 4 + j) * plane + cell] = doffsets[anchor * 4 + j];
                    }
                }
            }
            outs.push(Tensor::new(vec![b * (c + 4), g, g], d).expect("sized above"));
            base += plane * b;
        }
        outs
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<DetectorOutput<T>> {
        self.check_input(x)?;
        let mut feat = self.backbone.infer(x)?;
        let mut outs = Vec::with_capacity(self.heads.len());
        for (i, head) in self.heads.iter().enumerate() {
            if i > 0 {
                feat = self.pools[i - 1].infer(&feat)?;
            }
            outs.push(head.infer(&feat)?);
        }
        Ok(self.gather(&outs))
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<DetectorOutput<T>> {
        self.check_input(x)?;
        let mut feat = self.backbone.forward(x)?;
        let mut outs = Vec::with_capacity(self.heads.len());
        for i in 0..self.heads.len() {
            if i > 0 {
                feat = self.pools[i - 1].forward(&feat)?;
            }
            outs.push(self.heads[i].forward(&feat)?);
        }
        Ok(self.gather(&outs))
    }

    /// Backpropagates gradients of the last `forward`'s outputs.
    pub fn backward(&mut self, dlogits: &[T], doffsets: &[T]) -> Result<()> {
        let a = self.num_anchors();
        if dlogits.len() != a * self.num_classes || doffsets.len() != a * 4 {
            return Err(Error::shape(
                "detector backward",
                format!("{a} x {} logits and {a} x 4 offsets", self.num_classes),
                &[dlogits.len(), doffsets.len()],
            ));
        }
        let douts = self.scatter(dlogits, doffsets);
        let mut carry: Option<Tensor<T>> = None;
        for i in (0..self.heads.len()).rev() {
            let mut dfeat = self.heads[i].backward(&douts[i])?;
            if let Some(c) = carry.take() {
                for (d, g) in dfeat.data_mut().iter_mut().zip(c.data()) {
                    *d = *d + *g;
                }
            }
            carry = Some(if i > 0 { self.pools[i - 1].backward(&dfeat)? } else { dfeat });
        }
        self.backbone.backward(&carry.expect("at least one head"))?;
        Ok(())
    }
}

impl<T: Scalar> Parameterized<T> for DetectorNet<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.backbone.visit_params(&join(prefix, "backbone"), f);
        for (i, h) in self.heads.iter().enumerate() {
            h.visit_params(&join(prefix, &format!("head.{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.backbone.visit_params_mut(&join(prefix, "backbone"), f);
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_params_mut(&join(prefix, &format!("head.{i}")), f);
        }
    }

    fn kink_signature(&self, h: &mut dyn Hasher) {
        self.backbone.kink_signature(h);
        for p in &self.pools {
            p.kink_signature(h);
        }
    }
}

impl DetectorNet<f32> {
    pub fn to_checkpoint(&self, task: DetectorTask) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.visit_params("detector", &mut |name, p| ck.push(name, p.clone()));
        ck.push_scalar("meta.detector.num_classes", self.num_classes as f32);
        ck.push_scalar("meta.detector.input_size", self.input_size as f32);
        ck.push_scalar(
            "meta.detector.task",
            match task {
                DetectorTask::Pedestrian => 0.0,
                DetectorTask::Actions => 1.0,
            },
        );
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, config: &DetectorConfig) -> Result<(Self, DetectorTask)> {
        let num_classes = ck.scalar("meta.detector.num_classes")? as usize;
        let input = ck.scalar("meta.detector.input_size")? as usize;
        if input != config.input_size {
            return Err(Error::Checkpoint(format!(
                "checkpoint input size {input} differs from configured {}",
                config.input_size
            )));
        }
        let task = if ck.scalar("meta.detector.task")? == 0.0 { DetectorTask::Pedestrian } else { DetectorTask::Actions };
        let mut net = DetectorNet::new(config, num_classes, 0)?;
        let mut missing = None;
        net.visit_params_mut("detector", &mut |name, p| match ck.get(&name) {
            Some(t) if t.shape() == p.shape() => p.data_mut().copy_from_slice(t.data()),
            Some(t) => {
                missing.get_or_insert(format!("{name}: shape {:?} vs {:?}", t.shape(), p.shape()));
            }
            None => {
                missing.get_or_insert(format!("{name}: missing"));
            }
        });
        match missing {
            Some(m) => Err(Error::Checkpoint(m)),
            None => Ok((net, task)),
        }
    }
}

/// Net plus its anchors, ready for inference.
#[derive(Clone, Debug)]
pub struct Detector {
    pub net: DetectorNet<f32>,
    pub anchors: Vec<BBox>,
    pub config: DetectorConfig,
}

#[derive(Clone, Debug)]
pub struct Proposal {
    pub source_box: BBox,
    pub score: f64,
    pub crop: Raster,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProposalParams {
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub top_k: usize,
    pub crop_margin: f64,
}

impl From<&DetectorConfig> for ProposalParams {
    fn from(c: &DetectorConfig) -> Self {
        ProposalParams {
            conf_threshold: c.conf_threshold,
            nms_iou: c.nms_iou,
            top_k: c.top_k,
            crop_margin: c.crop_margin,
        }
    }
}

impl Detector {
    pub fn new(net: DetectorNet<f32>, config: DetectorConfig) -> Result<Self> {
        let anchors = generate_default_boxes(&config.anchors)?;
        if anchors.len() != net.num_anchors() {
            return Err(Error::Config(vec![format!(
                "anchor spec yields {} boxes but the network predicts {}",
                anchors.len(),
                net.num_anchors()
            )]));
        }
        Ok(Detector { net, anchors, config })
    }

    pub fn run(&self, lowres: &Raster) -> Result<DetectorOutput<f32>> {
        let s = self.net.input_size();
        if lowres.width() != s || lowres.height() != s {
            return Err(Error::shape(
                "detector input",
                format!("{s}x{s} raster"),
                &[lowres.width(), lowres.height()],
            ));
        }
        self.net.infer(&lowres.to_tensor(s, s))
    }

    /// Thresholded, decoded, NMS-filtered detections for each non-background
    /// class, best first; class `c` uses softmax column `c`.
    pub fn detect(&self, lowres: &Raster, params: &ProposalParams) -> Result<Vec<Detection>> {
        let out = self.run(lowres)?;
        let c = self.net.num_classes();
        let mut all = Vec::new();
        for class in 1..c {
            let mut cands = Vec::new();
            for (a, anchor) in self.anchors.iter().enumerate() {
                let p = softmax(&out.logits[a * c..(a + 1) * c]);
                let score = f64::from(p[class]);
                if score < params.conf_threshold {
                    continue;
                }
                let o = &out.offsets[a * 4..a * 4 + 4];
                let off = [f64::from(o[0]), f64::from(o[1]), f64::from(o[2]), f64::from(o[3])];
                cands.push(Detection { bbox: decode_offsets(&off, anchor), score, class_id: class });
            }
            let (cands, _) = drop_degenerate(cands);
            all.extend(nms(&cands, params.nms_iou, params.top_k));
        }
        all.sort_by(crate::geometry::rank_order);
        Ok(all)
    }

    /// Step one: pedestrian boxes from the lowres frame, cropped from the
    /// highres original. At most `top_k`, sorted by descending score.
    pub fn generate_proposals(&self, frame: &FramePair, params: &ProposalParams) -> Result<Vec<Proposal>> {
        let mut dets = self.detect(&frame.lowres, params)?;
        dets.retain(|d| d.class_id == 1);
        dets.truncate(params.top_k);
        Ok(dets
            .into_iter()
            .map(|d| Proposal {
                source_box: d.bbox,
                score: d.score,
                crop: crop_original(frame, &d.bbox, params.crop_margin),
            })
            .collect())
    }
}

/// Crop of the highres raster under `b` expanded by `margin` of its size on
/// each side; at least 2x2 pixels.
pub fn crop_original(frame: &FramePair, b: &BBox, margin: f64) -> Raster {
    let (mx, my) = (b.width() * margin, b.height() * margin);
    let grown = BBox::new(b.x_min - mx, b.y_min - my, b.x_max + mx, b.y_max + my);
    frame.highres.crop(frame.highres.pixel_rect(&grown, 2))
}

/// Gradient-free check used by training: the batch normalizer follows from
/// matching alone, so per-image backward passes can be scaled up front.
fn batch_norm(positives: &[usize], anchors: usize, cfg: &MultiboxConfig) -> Option<f64> {
    let n: usize = positives.iter().sum();
    if n > 0 {
        return Some(n as f64);
    }
    match cfg.empty_batch {
        EmptyBatch::Zero => None,
        EmptyBatch::MeanOverNegatives => {
            let neg = positives.len() * cfg.empty_negatives.min(anchors);
            (neg > 0).then_some(neg as f64)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    /// Batch loss before each optimizer step.
    pub losses: Vec<f64>,
}

/// Lowres raster plus targets for one training frame.
pub struct TrainSample {
    pub lowres: Raster,
    pub targets: ImageTargets,
}

pub fn training_samples(dataset: &Dataset, split: Split, task: DetectorTask) -> Result<Vec<TrainSample>> {
    dataset
        .split(split)
        .into_iter()
        .map(|f| {
            let anns: Vec<&Annotation> = f.annotations.iter().collect();
            let boxes = anns.iter().map(|a| a.bbox).collect();
            Ok(TrainSample { lowres: dataset.lowres(f), targets: task.targets(boxes, &anns, &dataset.vocab)? })
        })
        .collect()
}

/// Minibatch SGD on the multibox objective, normalized by the batch's
/// positive count. `progress(iteration, loss)` is called after every step.
pub fn train_detector(
    samples: &[TrainSample],
    config: &DetectorConfig,
    sgd: &SgdConfig,
    num_classes: usize,
    mut progress: impl FnMut(usize, f64),
) -> Result<(DetectorNet<f32>, TrainLog)> {
    if samples.is_empty() {
        return Err(Error::Empty("detector training set".into()));
    }
    sgd.validate()?;
    let anchors = generate_default_boxes(&config.anchors)?;
    let mut net = DetectorNet::<f32>::new(config, num_classes, sgd.seed)?;
    let mut opt = Sgd::new(sgd.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(sgd.seed ^ 0xde7ec7));
    let mut order: Vec<usize> = Vec::new();
    let mut log = TrainLog::default();
    let s = config.input_size;

    for it in 0..sgd.iterations {
        let mut batch = Vec::with_capacity(sgd.batch_size);
        for slot in 0..sgd.batch_size {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().expect("refilled above");
            let sample = &samples[idx];
            let aug_seed = mix(sgd.seed ^ mix((it as u64) << 16 | slot as u64));
            let aug = augment(&sample.lowres, &sample.targets.boxes, config.augment, aug_seed);
            let targets = ImageTargets {
                boxes: aug.boxes.clone(),
                labels: aug.kept.iter().map(|&k| sample.targets.labels[k].clone()).collect(),
            };
            let assignment = match_anchors(&targets.boxes, &anchors, config.multibox.match_threshold);
            batch.push((aug.raster, targets, assignment));
        }
        let positives: Vec<usize> = batch.iter().map(|b| b.2.num_positive).collect();
        net.zero_grad();
        let mut loss = 0.0;
        if let Some(norm) = batch_norm(&positives, anchors.len(), &config.multibox) {
            for (raster, targets, assignment) in &batch {
                let out = net.forward(&raster.to_tensor(s, s))?;
                let mut terms = multibox_terms(
                    &anchors,
                    assignment,
                    &out.logits,
                    &out.offsets,
                    num_classes,
                    targets,
                    &config.multibox,
                )?;
                terms.scale_grads(1.0 / norm);
                loss += terms.total(config.multibox.loc_weight) / norm;
                net.backward(&terms.grad_logits, &terms.grad_offsets)?;
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: "detector loss".into(), iteration: Some(it) });
        }
        let mut bad = false;
        net.visit_params("", &mut |_, p| bad |= p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())));
        if bad {
            return Err(Error::NonFinite { what: "detector gradient".into(), iteration: Some(it) });
        }
        opt.step(&mut net, it)?;
        log.losses.push(loss);
        progress(it, loss);
    }
    Ok((net, log))
}
