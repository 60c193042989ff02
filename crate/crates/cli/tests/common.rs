#![allow(dead_code)]

use std::path::Path;

use skysearch_core::detector::{DetectorNet, DetectorTask};
use skysearch_core::pipeline::{self, PipelineConfig};
use skysearch_core::qa::{ActionVocabulary, QaNet};

pub const CONFIG: &str = r#"
seed = 3

[paths]
dataset = "data"
checkpoints = "checkpoints"
reports = "reports"

[data]
num_frames = 6
train_fraction = 0.5

[train_detector]
learning_rate = 0.01
batch_size = 2
iterations = 2

[train_baseline]
learning_rate = 0.01
batch_size = 2
iterations = 2

[train_qa]
learning_rate = 0.01
batch_size = 4
iterations = 3
"#;

/// Writes the test config into `dir` and returns its path.
pub fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("skysearch.toml");
    std::fs::write(&path, CONFIG).unwrap();
    path
}

/// Dataset plus untrained detector and QA checkpoints.
pub fn untrained_setup(dir: &Path) -> PipelineConfig {
    let cfg = PipelineConfig::load(&write_config(dir)).unwrap();
    let ds = pipeline::gen_data(&cfg).unwrap();
    let det = DetectorNet::<f32>::new(&cfg.detector, 2, 1).unwrap();
    det.to_checkpoint(DetectorTask::Pedestrian).save(&cfg.checkpoint_path(pipeline::DETECTOR_CHECKPOINT)).unwrap();
    let vocab = ActionVocabulary::new(ds.vocab.clone()).unwrap();
    let qa = QaNet::<f32>::new(&cfg.qa, vocab.len(), 2).unwrap();
    qa.to_checkpoint(&vocab).save(&cfg.checkpoint_path(pipeline::QA_CHECKPOINT)).unwrap();
    cfg
}
