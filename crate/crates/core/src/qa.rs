//! Step two: yes/no answers for (crop, action query) pairs.

use std::hash::Hasher;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::nn::layers::join;
use crate::nn::{
    concat, cross_entropy_index, mix, param_seed, softmax, split, Checkpoint, Conv2d, Flatten, Layer, Linear, MaxPool2d,
    Parameterized, Relu, Scalar, Sequential, Sgd, SgdConfig, Tensor,
};
use crate::scene::{Annotation, Raster};

pub const YES: usize = 0;
pub const NO: usize = 1;

/// Ordered, duplicate-free action words.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionVocabulary {
    words: Vec<String>,
}

impl ActionVocabulary {
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::Empty("action vocabulary".into()));
        }
        for (i, w) in words.iter().enumerate() {
            if words[..i].contains(w) {
                return Err(Error::Config(vec![format!("vocabulary lists {w:?} twice")]));
            }
        }
        Ok(ActionVocabulary { words })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn index(&self, word: &str) -> Result<usize> {
        self.words.iter().position(|w| w == word).ok_or_else(|| Error::UnknownWord {
            word: word.to_string(),
            vocabulary: self.words.clone(),
        })
    }

    pub fn indices<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.index(w.as_ref())).collect()
    }

    /// Bag-of-words over the vocabulary; order and repeats are irrelevant.
    pub fn encode_query<S: AsRef<str>>(&self, actions: &[S]) -> Result<QueryVector> {
        if actions.is_empty() {
            return Err(Error::Empty("action query".into()));
        }
        Ok(QueryVector::from_indices(&self.indices(actions)?, self.len()))
    }

    pub fn push_to(&self, ck: &mut Checkpoint) {
        for (i, w) in self.words.iter().enumerate() {
            ck.push_scalar(format!("vocab.{w}"), i as f32);
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut entries: Vec<(usize, String)> = ck
            .with_prefix("vocab")
            .map(|(w, t)| (t.data().first().copied().unwrap_or(-1.0) as usize, w.to_string()))
            .collect();
        entries.sort();
        if entries.iter().enumerate().any(|(i, (j, _))| i != *j) {
            return Err(Error::Checkpoint("vocabulary indices are not 0..n".into()));
        }
        ActionVocabulary::new(entries.into_iter().map(|(_, w)| w).collect())
    }
}

/// Binary vector over the vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueryVector(pub Vec<f32>);

impl QueryVector {
    pub fn from_indices(indices: &[usize], len: usize) -> Self {
        let mut v = vec![0.0; len];
        for &i in indices {
            v[i] = 1.0;
        }
        QueryVector(v)
    }

    pub fn active(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&i| self.0[i] != 0.0).collect()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_slice(&self.0.iter().map(|&v| T::of(f64::from(v))).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QaConfig {
    /// Side of the square the crop is resampled to.
    pub crop_size: usize,
    /// Conv widths of the image branch, each followed by relu and 2x pooling.
    pub img_channels: Vec<usize>,
    pub h_img: usize,
    pub h_q: usize,
    pub h_common: usize,
    pub iou_match: f64,
    pub negative_ratio: f64,
    /// Also train on crops of the ground-truth boxes themselves.
    pub include_ground_truth: bool,
}

impl Default for QaConfig {
    fn default() -> Self {
        QaConfig {
            crop_size: 48,
            img_channels: vec![16, 32, 32],
            h_img: 64,
            h_q: 100,
            h_common: 100,
            iou_match: 0.5,
            negative_ratio: 1.0,
            include_ground_truth: true,
        }
    }
}

impl QaConfig {
    pub fn violations(&self, section: &str) -> Vec<String> {
        let mut v = Vec::new();
        let mut bad = |m: String| v.push(format!("{section}.{m}"));
        let pools = self.img_channels.len();
        if self.img_channels.is_empty() || self.img_channels.contains(&0) {
            bad(format!("img_channels must be non-empty and positive, got {:?}", self.img_channels));
        }
        if self.crop_size == 0 || pools >= usize::BITS as usize || (self.crop_size >> pools) == 0 {
            bad(format!("crop_size ({}) too small for {pools} pooling stages", self.crop_size));
        }
        for (name, d) in [("h_img", self.h_img), ("h_q", self.h_q), ("h_common", self.h_common)] {
            if d == 0 {
                bad(format!("{name} must be >= 1"));
            }
        }
        if !(self.iou_match > 0.0 && self.iou_match <= 1.0) {
            bad(format!("iou_match must be in (0, 1], got {}", self.iou_match));
        }
        if !(self.negative_ratio > 0.0 && self.negative_ratio.is_finite()) {
            bad(format!("negative_ratio must be > 0, got {}", self.negative_ratio));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations("qa");
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// `g_img`, `g_q`, `g_shared` and the two-way answer layer.
#[derive(Clone, Debug)]
pub struct QaNet<T: Scalar = f32> {
    crop_size: usize,
    vocab_len: usize,
    pub g_img: Sequential<T>,
    pub g_q: Sequential<T>,
    pub g_shared: Sequential<T>,
    pub answer: Linear<T>,
    h_img: usize,
    h_q: usize,
}

impl<T: Scalar> QaNet<T> {
    pub fn new(config: &QaConfig, vocab_len: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_len == 0 {
            return Err(Error::Empty("action vocabulary".into()));
        }
        let mut img = Vec::new();
        let mut ch = 3;
        let mut side = config.crop_size;
        for &out in &config.img_channels {
            let name = format!("g_img.{}", img.len());
            let conv = Conv2d::new(ch, out, 3, 1, 1, param_seed(seed, &name))?;
            img.push(Layer::Conv2d(if img.is_empty() { conv.without_input_grad() } else { conv }));
            img.push(Layer::Relu(Relu::default()));
            img.push(Layer::MaxPool2d(MaxPool2d::new(2)));
            ch = out;
            side /= 2;
        }
        img.push(Layer::Flatten(Flatten::default()));
        let name = format!("g_img.{}", img.len());
        img.push(Layer::Linear(Linear::new(ch * side * side, config.h_img, param_seed(seed, &name))?));
        img.push(Layer::Relu(Relu::default()));
        let g_q = Sequential::new(vec![
            Layer::Linear(Linear::new(vocab_len, config.h_q, param_seed(seed, "g_q.0"))?),
            Layer::Relu(Relu::default()),
        ]);
        let g_shared = Sequential::new(vec![
            Layer::Linear(Linear::new(config.h_img + config.h_q, config.h_common, param_seed(seed, "g_shared.0"))?),
            Layer::Relu(Relu::default()),
        ]);
        let answer = Linear::new(config.h_common, 2, param_seed(seed, "answer"))?;
        Ok(QaNet {
            crop_size: config.crop_size,
            vocab_len,
            g_img: Sequential::new(img),
            g_q,
            g_shared,
            answer,
            h_img: config.h_img,
            h_q: config.h_q,
        })
    }

    pub fn crop_size(&self) -> usize {
        self.crop_size
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab_len
    }

    fn check(&self, img: &Tensor<T>, q: &Tensor<T>) -> Result<()> {
        let s = self.crop_size;
        if img.shape() != [3, s, s] {
            return Err(Error::shape("g_img input", format!("[3, {s}, {s}]"), img.shape()));
        }
        if q.shape() != [self.vocab_len] {
            return Err(Error::shape("g_q input", format!("[{}]", self.vocab_len), q.shape()));
        }
        Ok(())
    }

    /// Answer logits `[yes, no]`.
    pub fn infer(&self, img: &Tensor<T>, q: &Tensor<T>) -> Result<Vec<T>> {
        self.check(img, q)?;
        let h_img = self.g_img.infer(img)?;
        let h_q = self.g_q.infer(q)?;
        let common = self.g_shared.infer(&concat(&[&h_img, &h_q])?)?;
        Ok(self.answer.infer(&common)?.into_data())
    }

    pub fn forward(&mut self, img: &Tensor<T>, q: &Tensor<T>) -> Result<Vec<T>> {
        self.check(img, q)?;
        let h_img = self.g_img.forward(img)?;
        let h_q = self.g_q.forward(q)?;
        let common = self.g_shared.forward(&concat(&[&h_img, &h_q])?)?;
        Ok(self.answer.forward(&common)?.into_data())
    }

    pub fn backward(&mut self, dlogits: &[T]) -> Result<()> {
        let dcommon = self.answer.backward(&Tensor::from_slice(dlogits))?;
        let dcat = self.g_shared.backward(&dcommon)?;
        let parts = split(&dcat, &[self.h_img, self.h_q])?;
        self.g_img.backward(&parts[0])?;
        self.g_q.backward(&parts[1])?;
        Ok(())
    }

    /// `h_img` for a prepared crop tensor.
    pub fn image_features(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.crop_size;
        if img.shape() != [3, s, s] {
            return Err(Error::shape("g_img input", format!("[3, {s}, {s}]"), img.shape()));
        }
        self.g_img.infer(img)
    }

    /// `(P(yes), P(no))` from precomputed image features.
    pub fn probabilities_from_features(&self, h_img: &Tensor<T>, q: &Tensor<T>) -> Result<(f64, f64)> {
        if q.shape() != [self.vocab_len] {
            return Err(Error::shape("g_q input", format!("[{}]", self.vocab_len), q.shape()));
        }
        let h_q = self.g_q.infer(q)?;
        let common = self.g_shared.infer(&concat(&[h_img, &h_q])?)?;
        let p = softmax(self.answer.infer(&common)?.data());
        Ok((p[YES].f64(), p[NO].f64()))
    }

    /// `(P(yes), P(no))`.
    pub fn probabilities(&self, img: &Tensor<T>, q: &Tensor<T>) -> Result<(f64, f64)> {
        let p = softmax(&self.infer(img, q)?);
        Ok((p[YES].f64(), p[NO].f64()))
    }
}

impl<T: Scalar> Parameterized<T> for QaNet<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.g_img.visit_params(&join(prefix, "g_img"), f);
        self.g_q.visit_params(&join(prefix, "g_q"), f);
        self.g_shared.visit_params(&join(prefix, "g_shared"), f);
        self.answer.visit_params(&join(prefix, "answer"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.g_img.visit_params_mut(&join(prefix, "g_img"), f);
        self.g_q.visit_params_mut(&join(prefix, "g_q"), f);
        self.g_shared.visit_params_mut(&join(prefix, "g_shared"), f);
        self.answer.visit_params_mut(&join(prefix, "answer"), f);
    }

    fn kink_signature(&self, h: &mut dyn Hasher) {
        self.g_img.kink_signature(h);
        self.g_q.kink_signature(h);
        self.g_shared.kink_signature(h);
    }
}

impl QaNet<f32> {
    pub fn yes_probability(&self, crop: &Raster, query: &QueryVector) -> Result<f64> {
        if crop.width() == 0 || crop.height() == 0 {
            return Err(Error::Empty("crop".into()));
        }
        let s = self.crop_size;
        Ok(self.probabilities(&crop.to_tensor(s, s), &query.to_tensor())?.0)
    }

    pub fn to_checkpoint(&self, vocab: &ActionVocabulary) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.visit_params("qa", &mut |name, p| ck.push(name, p.clone()));
        ck.push_scalar("meta.qa.crop_size", self.crop_size as f32);
        vocab.push_to(&mut ck);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, config: &QaConfig) -> Result<(Self, ActionVocabulary)> {
        let vocab = ActionVocabulary::from_checkpoint(ck)?;
        let crop = ck.scalar("meta.qa.crop_size")? as usize;
        if crop != config.crop_size {
            return Err(Error::Checkpoint(format!(
                "checkpoint crop size {crop} differs from configured {}",
                config.crop_size
            )));
        }
        let mut net = QaNet::new(config, vocab.len(), 0)?;
        let mut problem = None;
        net.visit_params_mut("qa", &mut |name, p| match ck.get(&name) {
            Some(t) if t.shape() == p.shape() => p.data_mut().copy_from_slice(t.data()),
            Some(t) => {
                problem.get_or_insert(format!("{name}: shape {:?} vs {:?}", t.shape(), p.shape()));
            }
            None => {
                problem.get_or_insert(format!("{name}: missing"));
            }
        });
        match problem {
            Some(m) => Err(Error::Checkpoint(m)),
            None => Ok((net, vocab)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    GroundTruth { frame_id: u32, pedestrian_id: u32 },
    Background { frame_id: u32 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaPair {
    pub crop: Raster,
    /// Sorted vocabulary indices.
    pub query: Vec<usize>,
    pub label: bool,
    pub provenance: Provenance,
}

/// Proposals of one frame together with its ground truth.
pub struct FrameProposals<'a> {
    pub frame_id: u32,
    pub boxes: Vec<BBox>,
    pub crops: Vec<Raster>,
    pub annotations: &'a [Annotation],
}

/// Builds yes/no pairs. A proposal whose best ground truth has IoU >=
/// `iou_match` gets one positive per singleton of that truth's action set
/// plus the full set, and negatives that add an action the truth lacks;
/// other proposals get random-query negatives. Negatives are subsampled to
/// `negative_ratio` times the positives.
pub fn make_qa_pairs(
    frames: &[FrameProposals<'_>],
    vocab: &ActionVocabulary,
    iou_match: f64,
    negative_ratio: f64,
    seed: u64,
) -> Result<Vec<QaPair>> {
    if vocab.is_empty() {
        return Err(Error::Empty("action vocabulary".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0x9a9a));
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    let v = vocab.len();
    for fr in frames {
        let truth: Vec<Vec<usize>> = fr
            .annotations
            .iter()
            .map(|a| {
                let mut ix = vocab.indices(&a.actions)?;
                ix.sort_unstable();
                Ok(ix)
            })
            .collect::<Result<_>>()?;
        for (b, crop) in fr.boxes.iter().zip(&fr.crops) {
            let best = fr
                .annotations
                .iter()
                .enumerate()
                .map(|(i, a)| (i, iou(b, &a.bbox)))
                .fold(None, |acc: Option<(usize, f64)>, (i, o)| match acc {
                    Some((_, bo)) if bo >= o => acc,
                    _ => Some((i, o)),
                });
            match best {
                Some((g, o)) if o >= iou_match => {
                    let acts = &truth[g];
                    let provenance = Provenance::GroundTruth { frame_id: fr.frame_id, pedestrian_id: fr.annotations[g].pedestrian_id };
                    let mut queries: Vec<Vec<usize>> = acts.iter().map(|&a| vec![a]).collect();
                    if acts.len() > 1 {
                        queries.push(acts.clone());
                    }
                    for q in queries {
                        positives.push(QaPair { crop: crop.clone(), query: q, label: true, provenance });
                    }
                    let absent: Vec<usize> = (0..v).filter(|a| !acts.contains(a)).collect();
                    for &a in &absent {
                        negatives.push(QaPair { crop: crop.clone(), query: vec![a], label: false, provenance });
                        let mut q = vec![acts[rng.gen_range(0..acts.len())], a];
                        q.sort_unstable();
                        negatives.push(QaPair { crop: crop.clone(), query: q, label: false, provenance });
                    }
                }
                _ => {
                    let provenance = Provenance::Background { frame_id: fr.frame_id };
                    let mut q = vec![rng.gen_range(0..v)];
                    if v > 1 && rng.gen_bool(0.5) {
                        let extra = (q[0] + rng.gen_range(1..v)) % v;
                        q.push(extra);
                        q.sort_unstable();
                    }
                    negatives.push(QaPair { crop: crop.clone(), query: q, label: false, provenance });
                }
            }
        }
    }
    let budget = (negative_ratio * positives.len() as f64).round() as usize;
    if negatives.len() > budget {
        let mut idx: Vec<usize> = (0..negatives.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(budget);
        idx.sort_unstable();
        let mut keep = vec![false; negatives.len()];
        idx.into_iter().for_each(|i| keep[i] = true);
        let mut k = keep.into_iter();
        negatives.retain(|_| k.next().unwrap_or(false));
    }
    positives.extend(negatives);
    Ok(positives)
}

/// Pair rasterized for the network.
pub struct PreparedPair {
    pub image: Tensor<f32>,
    pub query: Tensor<f32>,
    pub label: usize,
}

pub fn prepare_pairs(pairs: &[QaPair], crop_size: usize, vocab_len: usize) -> Vec<PreparedPair> {
    pairs
        .iter()
        .map(|p| PreparedPair {
            image: p.crop.to_tensor(crop_size, crop_size),
            query: QueryVector::from_indices(&p.query, vocab_len).to_tensor(),
            label: if p.label { YES } else { NO },
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QaTrainLog {
    pub losses: Vec<f64>,
}

/// Minibatch SGD on the mean two-class cross-entropy.
pub fn train_qa(
    pairs: &[PreparedPair],
    config: &QaConfig,
    sgd: &SgdConfig,
    vocab_len: usize,
    mut progress: impl FnMut(usize, f64),
) -> Result<(QaNet<f32>, QaTrainLog)> {
    if pairs.is_empty() {
        return Err(Error::Empty("QA training pairs".into()));
    }
    sgd.validate()?;
    let yes = pairs.iter().filter(|p| p.label == YES).count();
    if yes == 0 || yes == pairs.len() {
        log::warn!("QA training pairs carry a single label ({} of {} are yes)", yes, pairs.len());
    }
    let mut net = QaNet::<f32>::new(config, vocab_len, sgd.seed)?;
    let mut opt = Sgd::new(sgd.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(sgd.seed ^ 0x0a0a));
    let mut order: Vec<usize> = Vec::new();
    let mut log = QaTrainLog::default();
    let scale = 1.0 / sgd.batch_size as f64;
    for it in 0..sgd.iterations {
        net.zero_grad();
        let mut loss = 0.0;
        for _ in 0..sgd.batch_size {
            if order.is_empty() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut rng);
            }
            let p = &pairs[order.pop().expect("refilled above")];
            let logits = net.forward(&p.image, &p.query)?;
            let (l, g) = cross_entropy_index(&logits, p.label);
            loss += l * scale;
            let g: Vec<f32> = g.iter().map(|v| (f64::from(*v) * scale) as f32).collect();
            net.backward(&g)?;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: "QA loss".into(), iteration: Some(it) });
        }
        opt.step(&mut net, it)?;
        log.losses.push(loss);
        progress(it, loss);
    }
    Ok((net, log))
}

/// Fraction of pairs whose argmax answer matches the label, and whether
/// every evaluated distribution summed to 1 within `1e-6`.
pub fn qa_accuracy(net: &QaNet<f32>, pairs: &[PreparedPair]) -> Result<(f64, bool)> {
    if pairs.is_empty() {
        return Ok((0.0, true));
    }
    let mut right = 0;
    let mut normalized = true;
    for p in pairs {
        let (y, n) = net.probabilities(&p.image, &p.query)?;
        normalized &= (y + n - 1.0).abs() <= 1e-6 && y >= 0.0 && n >= 0.0;
        let predicted = if y >= n { YES } else { NO };
        right += usize::from(predicted == p.label);
    }
    Ok((right as f64 / pairs.len() as f64, normalized))
}
