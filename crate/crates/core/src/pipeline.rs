//! End-to-end orchestration: configuration, stage runners with on-disk
//! artifacts, and the query path shared by the CLI and the HTTP service.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{
    training_samples, train_detector, Detector, DetectorConfig, DetectorNet, DetectorTask, ProposalParams, TrainLog,
};
use crate::error::{Error, Result};
use crate::eval::{action_map, map_sweep, ActionGroundTruth, ActionReport, EvalDetection, EvalReport, GroundTruth, TABLE_THRESHOLDS};
use crate::geometry::BBox;
use crate::io::write_atomic;
use crate::nn::{Checkpoint, SgdConfig, Tensor};
use crate::qa::{
    make_qa_pairs, prepare_pairs, qa_accuracy, train_qa, ActionVocabulary, FrameProposals, QaConfig, QaNet, QaPair,
    QaTrainLog, QueryVector,
};
use crate::scene::{Dataset, FramePair, SceneConfig, Split};

pub const DETECTOR_CHECKPOINT: &str = "detector.sksr";
pub const BASELINE_CHECKPOINT: &str = "baseline.sksr";
pub const QA_CHECKPOINT: &str = "qa.sksr";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { dataset: "data".into(), checkpoints: "checkpoints".into(), reports: "reports".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_frames: usize,
    pub train_fraction: f64,
    /// Consecutive frame ids sharing a split.
    pub scene_group_size: usize,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { num_frames: 600, train_fraction: 0.73, scene_group_size: 1, scene: SceneConfig::default() }
    }
}

/// How a proposal's step-two ranking score is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// detector score times P(yes).
    #[default]
    Product,
    /// P(yes) alone.
    YesOnly,
}

impl ScoreMode {
    pub fn combine(self, detector_score: f64, yes: f64) -> f64 {
        match self {
            ScoreMode::Product => detector_score * yes,
            ScoreMode::YesOnly => yes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub action_iou: f64,
    pub score: ScoreMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { thresholds: TABLE_THRESHOLDS.to_vec(), action_iou: 0.5, score: ScoreMode::Product }
    }
}

fn sgd(learning_rate: f64, iterations: usize, lr_steps: Vec<usize>) -> SgdConfig {
    SgdConfig { learning_rate, iterations, lr_steps, ..SgdConfig::default() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub data: DataConfig,
    pub detector: DetectorConfig,
    pub qa: QaConfig,
    pub train_detector: SgdConfig,
    pub train_qa: SgdConfig,
    /// Single-step low-resolution action detector used for comparison.
    pub train_baseline: SgdConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            paths: Paths::default(),
            data: DataConfig::default(),
            detector: DetectorConfig::default(),
            qa: QaConfig::default(),
            train_detector: sgd(0.01, 1200, vec![800]),
            train_qa: sgd(0.01, 6000, vec![4000]),
            train_baseline: sgd(0.01, 1200, vec![800]),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    /// Reads a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.paths.dataset, &mut self.paths.checkpoints, &mut self.paths.reports] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Applies one seed to data generation and every training run.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.scene.seed = seed;
        self.train_detector.seed = seed;
        self.train_qa.seed = seed;
        self.train_baseline.seed = seed;
        self
    }

    /// Every violation across all sections.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        v.extend(self.data.scene.violations("data.scene"));
        if self.data.num_frames == 0 {
            v.push("data.num_frames must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.data.train_fraction) {
            v.push(format!("data.train_fraction must be in [0, 1], got {}", self.data.train_fraction));
        }
        if self.data.scene_group_size == 0 {
            v.push("data.scene_group_size must be >= 1".into());
        }
        v.extend(self.detector.violations("detector"));
        if self.detector.input_size != self.data.scene.lowres {
            v.push(format!(
                "detector.input_size ({}) must equal data.scene.lowres ({})",
                self.detector.input_size, self.data.scene.lowres
            ));
        }
        v.extend(self.qa.violations("qa"));
        v.extend(self.train_detector.violations("train_detector"));
        v.extend(self.train_qa.violations("train_qa"));
        v.extend(self.train_baseline.violations("train_baseline"));
        if self.eval.thresholds.is_empty() || self.eval.thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            v.push(format!("eval.thresholds must be non-empty and within (0, 1], got {:?}", self.eval.thresholds));
        }
        if !(self.eval.action_iou > 0.0 && self.eval.action_iou <= 1.0) {
            v.push(format!("eval.action_iou must be in (0, 1], got {}", self.eval.action_iou));
        }
        for (name, p) in [
            ("paths.dataset", &self.paths.dataset),
            ("paths.checkpoints", &self.paths.checkpoints),
            ("paths.reports", &self.paths.reports),
        ] {
            if let Some(m) = unresolvable(p) {
                v.push(format!("{name}: {m}"));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn proposal_params(&self) -> ProposalParams {
        ProposalParams::from(&self.detector)
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.paths.checkpoints.join(name)
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.paths.reports.join(name)
    }
}

/// A path resolves when it is a directory or can be created as one.
fn unresolvable(p: &Path) -> Option<String> {
    if p.as_os_str().is_empty() {
        return Some("empty path".into());
    }
    let mut cur = Some(p);
    while let Some(c) = cur {
        if c.exists() {
            return (!c.is_dir()).then(|| format!("{} is not a directory", c.display()));
        }
        cur = c.parent().filter(|q| !q.as_os_str().is_empty());
    }
    None
}

pub fn gen_data(cfg: &PipelineConfig) -> Result<Dataset> {
    let ds = Dataset::generate(&cfg.data.scene, cfg.data.num_frames, cfg.data.train_fraction, cfg.data.scene_group_size)?;
    ds.save(&cfg.paths.dataset)?;
    Ok(ds)
}

pub fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    Dataset::load(&cfg.paths.dataset)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(value)?)
}

#[derive(Serialize)]
struct LossCurve<'a> {
    iterations: usize,
    losses: &'a [f64],
}

fn task_files(task: DetectorTask) -> (&'static str, &'static str) {
    match task {
        DetectorTask::Pedestrian => (DETECTOR_CHECKPOINT, "detector_loss.json"),
        DetectorTask::Actions => (BASELINE_CHECKPOINT, "baseline_loss.json"),
    }
}

/// Trains the pedestrian detector (or the single-step action baseline) and
/// writes its checkpoint and loss curve.
pub fn train_detector_stage(
    cfg: &PipelineConfig,
    ds: &Dataset,
    task: DetectorTask,
    progress: impl FnMut(usize, f64),
) -> Result<(DetectorNet<f32>, TrainLog)> {
    let sgd = match task {
        DetectorTask::Pedestrian => &cfg.train_detector,
        DetectorTask::Actions => &cfg.train_baseline,
    };
    let samples = training_samples(ds, Split::Train, task)?;
    let (net, log) = train_detector(&samples, &cfg.detector, sgd, task.num_classes(ds.vocab.len()), progress)?;
    let (ck_name, loss_name) = task_files(task);
    let mut ck = net.to_checkpoint(task);
    if task == DetectorTask::Actions {
        ActionVocabulary::new(ds.vocab.clone())?.push_to(&mut ck);
    }
    ck.save(&cfg.checkpoint_path(ck_name))?;
    write_json(&cfg.report_path(loss_name), &LossCurve { iterations: log.losses.len(), losses: &log.losses })?;
    Ok((net, log))
}

pub fn load_detector(cfg: &PipelineConfig, task: DetectorTask) -> Result<Detector> {
    let path = cfg.checkpoint_path(task_files(task).0);
    let ck = Checkpoint::load(&path)?;
    let (net, stored) = DetectorNet::from_checkpoint(&ck, &cfg.detector)?;
    if stored != task {
        return Err(Error::Checkpoint(format!("{} holds a {stored:?} detector", path.display())));
    }
    Detector::new(net, cfg.detector.clone())
}

/// Detector proposals for the frames of a split, optionally joined by the
/// ground-truth boxes, paired into yes/no questions.
pub fn qa_pairs_for(cfg: &PipelineConfig, ds: &Dataset, detector: &Detector, split: Split, seed: u64) -> Result<Vec<QaPair>> {
    let vocab = ActionVocabulary::new(ds.vocab.clone())?;
    let params = cfg.proposal_params();
    let mut inputs = Vec::new();
    for f in ds.split(split) {
        let pair = ds.frame_pair(f);
        let mut boxes = Vec::new();
        let mut crops = Vec::new();
        for p in detector.generate_proposals(&pair, &params)? {
            boxes.push(p.source_box);
            crops.push(p.crop);
        }
        if cfg.qa.include_ground_truth {
            for a in &f.annotations {
                boxes.push(a.bbox);
                crops.push(crate::detector::crop_original(&pair, &a.bbox, params.crop_margin));
            }
        }
        inputs.push(FrameProposals { frame_id: f.frame_id, boxes, crops, annotations: &f.annotations });
    }
    make_qa_pairs(&inputs, &vocab, cfg.qa.iou_match, cfg.qa.negative_ratio, seed)
}

pub fn train_qa_stage(
    cfg: &PipelineConfig,
    ds: &Dataset,
    detector: &Detector,
    progress: impl FnMut(usize, f64),
) -> Result<(QaNet<f32>, QaTrainLog)> {
    let vocab = ActionVocabulary::new(ds.vocab.clone())?;
    let pairs = qa_pairs_for(cfg, ds, detector, Split::Train, cfg.train_qa.seed)?;
    let prepared = prepare_pairs(&pairs, cfg.qa.crop_size, vocab.len());
    let (net, log) = train_qa(&prepared, &cfg.qa, &cfg.train_qa, vocab.len(), progress)?;
    net.to_checkpoint(&vocab).save(&cfg.checkpoint_path(QA_CHECKPOINT))?;
    write_json(&cfg.report_path("qa_loss.json"), &LossCurve { iterations: log.losses.len(), losses: &log.losses })?;
    Ok((net, log))
}

pub fn load_qa(cfg: &PipelineConfig) -> Result<(QaNet<f32>, ActionVocabulary)> {
    QaNet::from_checkpoint(&Checkpoint::load(&cfg.checkpoint_path(QA_CHECKPOINT))?, &cfg.qa)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub frame_id: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

/// Runs step one over every frame and writes `proposals.jsonl`.
pub fn detect_stage(cfg: &PipelineConfig, ds: &Dataset, detector: &Detector) -> Result<Vec<ProposalRecord>> {
    let params = cfg.proposal_params();
    let mut records = Vec::new();
    for f in &ds.frames {
        for p in detector.generate_proposals(&ds.frame_pair(f), &params)? {
            records.push(ProposalRecord { frame_id: f.frame_id, bbox: p.source_box, score: p.score });
        }
    }
    let mut out = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    write_atomic(&cfg.report_path("proposals.jsonl"), &out)?;
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryHit {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub detector_score: f64,
    pub yes_probability: f64,
    pub combined_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub frame_id: u32,
    pub query: Vec<String>,
    pub results: Vec<QueryHit>,
}

/// Loaded detector and QA network; immutable and shareable.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub detector: Detector,
    pub qa: QaNet<f32>,
    pub vocab: ActionVocabulary,
}

impl Pipeline {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let detector = load_detector(cfg, DetectorTask::Pedestrian)?;
        let (qa, vocab) = load_qa(cfg)?;
        Ok(Pipeline { config: cfg.clone(), detector, qa, vocab })
    }

    /// Proposal boxes, detector scores and `h_img` features for a frame.
    fn proposal_features(&self, frame: &FramePair) -> Result<Vec<(BBox, f64, Tensor<f32>)>> {
        let s = self.qa.crop_size();
        self.detector
            .generate_proposals(frame, &self.config.proposal_params())?
            .into_iter()
            .map(|p| Ok((p.source_box, p.score, self.qa.image_features(&p.crop.to_tensor(s, s))?)))
            .collect()
    }

    /// Ranks this frame's proposals for a conjunctive action query.
    pub fn answer<S: AsRef<str>>(&self, frame: &FramePair, frame_id: u32, actions: &[S]) -> Result<QueryResult> {
        let q = self.vocab.encode_query(actions)?;
        let qt = q.to_tensor();
        let mut results = Vec::new();
        for (bbox, score, h) in self.proposal_features(frame)? {
            let (yes, _) = self.qa.probabilities_from_features(&h, &qt)?;
            results.push(QueryHit {
                bbox,
                detector_score: score,
                yes_probability: yes,
                combined_score: self.config.eval.score.combine(score, yes),
            });
        }
        results.sort_by(|a, b| b.combined_score.total_cmp(&a.combined_score));
        let mut query: Vec<String> = q.active().into_iter().map(|i| self.vocab.words()[i].clone()).collect();
        query.dedup();
        Ok(QueryResult { frame_id, query, results })
    }

    /// Two-step action detections: each proposal scored for every action.
    pub fn action_detections(&self, frame: &FramePair, frame_id: u32) -> Result<Vec<EvalDetection>> {
        let queries: Vec<Tensor<f32>> = (0..self.vocab.len())
            .map(|a| QueryVector::from_indices(&[a], self.vocab.len()).to_tensor())
            .collect();
        let mut out = Vec::new();
        for (bbox, score, h) in self.proposal_features(frame)? {
            for (a, q) in queries.iter().enumerate() {
                let (yes, _) = self.qa.probabilities_from_features(&h, q)?;
                out.push(EvalDetection {
                    frame_id,
                    class_id: a,
                    bbox,
                    score: self.config.eval.score.combine(score, yes),
                });
            }
        }
        Ok(out)
    }
}

/// Single-step detections with classes mapped to vocabulary indices.
pub fn baseline_action_detections(baseline: &Detector, params: &ProposalParams, frame: &FramePair, frame_id: u32) -> Result<Vec<EvalDetection>> {
    Ok(baseline
        .detect(&frame.lowres, params)?
        .into_iter()
        .map(|d| EvalDetection { frame_id, class_id: d.class_id - 1, bbox: d.bbox, score: d.score })
        .collect())
}

pub fn action_ground_truth(ds: &Dataset, split: Split) -> Result<Vec<ActionGroundTruth>> {
    let vocab = ActionVocabulary::new(ds.vocab.clone())?;
    let mut gts = Vec::new();
    for f in ds.split(split) {
        for a in &f.annotations {
            gts.push(ActionGroundTruth { frame_id: f.frame_id, bbox: a.bbox, actions: vocab.indices(&a.actions)? });
        }
    }
    Ok(gts)
}

/// Pedestrian detection sweep over a split.
pub fn detection_report(cfg: &PipelineConfig, ds: &Dataset, detector: &Detector, split: Split) -> Result<EvalReport> {
    let params = cfg.proposal_params();
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for f in ds.split(split) {
        for p in detector.generate_proposals(&ds.frame_pair(f), &params)? {
            dets.push(EvalDetection { frame_id: f.frame_id, class_id: 1, bbox: p.source_box, score: p.score });
        }
        gts.extend(f.annotations.iter().map(|a| GroundTruth { frame_id: f.frame_id, class_id: 1, bbox: a.bbox }));
    }
    Ok(map_sweep(&dets, &gts, &cfg.eval.thresholds, |_| "pedestrian".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaSummary {
    pub pairs: usize,
    pub accuracy: f64,
    pub distributions_normalized: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullReport {
    pub detection: EvalReport,
    pub qa: QaSummary,
    pub two_step: ActionReport,
    pub single_step: Option<ActionReport>,
}

impl FullReport {
    pub fn to_text(&self) -> String {
        let mut s = String::from("Pedestrian detection\n");
        s.push_str(&self.detection.to_table());
        s.push_str(&format!(
            "\nQA pairs: {}  accuracy: {:.2}%\n\nAction detection (mAP@{:.2})\n",
            self.qa.pairs,
            100.0 * self.qa.accuracy,
            self.two_step.iou_threshold
        ));
        s.push_str(&format!("{:<14} {:>10} {:>12}\n", "action", "two-step", "single-step"));
        for (i, a) in self.two_step.actions.iter().enumerate() {
            let single = self
                .single_step
                .as_ref()
                .and_then(|r| r.actions.get(i))
                .map(|b| format!("{:>11.2}%", 100.0 * b.ap))
                .unwrap_or_else(|| format!("{:>12}", "-"));
            s.push_str(&format!("{:<14} {:>9.2}% {single}\n", a.action, 100.0 * a.ap));
        }
        let single = self
            .single_step
            .as_ref()
            .map(|r| format!("{:>11.2}%", 100.0 * r.map))
            .unwrap_or_else(|| format!("{:>12}", "-"));
        s.push_str(&format!("{:<14} {:>9.2}% {single}\n", "mean", 100.0 * self.two_step.map));
        s
    }
}

/// Evaluates the test split: detection sweep, QA accuracy, two-step action
/// mAP and, when given, the single-step baseline.
pub fn evaluate(cfg: &PipelineConfig, ds: &Dataset, pipeline: &Pipeline, baseline: Option<&Detector>) -> Result<FullReport> {
    let detection = detection_report(cfg, ds, &pipeline.detector, Split::Test)?;

    let pairs = qa_pairs_for(cfg, ds, &pipeline.detector, Split::Test, cfg.seed ^ 0x7e57)?;
    let prepared = prepare_pairs(&pairs, cfg.qa.crop_size, pipeline.vocab.len());
    let (accuracy, normalized) = qa_accuracy(&pipeline.qa, &prepared)?;

    let gts = action_ground_truth(ds, Split::Test)?;
    let params = cfg.proposal_params();
    let mut two = Vec::new();
    let mut one = Vec::new();
    for f in ds.split(Split::Test) {
        let pair = ds.frame_pair(f);
        two.extend(pipeline.action_detections(&pair, f.frame_id)?);
        if let Some(b) = baseline {
            one.extend(baseline_action_detections(b, &params, &pair, f.frame_id)?);
        }
    }
    let words = pipeline.vocab.words();
    let two_step = action_map(&two, &gts, words, cfg.eval.action_iou);
    let single_step = baseline.map(|_| action_map(&one, &gts, words, cfg.eval.action_iou));
    Ok(FullReport {
        detection,
        qa: QaSummary { pairs: prepared.len(), accuracy, distributions_normalized: normalized },
        two_step,
        single_step,
    })
}

/// Writes `eval.json`, `eval.txt` and `eval_pr.csv` into the reports dir.
pub fn write_report(cfg: &PipelineConfig, report: &FullReport) -> Result<()> {
    write_json(&cfg.report_path("eval.json"), report)?;
    write_atomic(&cfg.report_path("eval.txt"), report.to_text().as_bytes())?;
    write_atomic(&cfg.report_path("eval_pr.csv"), report.detection.to_csv().as_bytes())?;
    Ok(())
}
