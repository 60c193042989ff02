use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skysearch_core::anchors::{generate_default_boxes, match_anchors, DefaultBoxSpec};
use skysearch_core::detector::{Detector, DetectorConfig, DetectorNet, ProposalParams};
use skysearch_core::eval::{map_sweep, EvalDetection, GroundTruth, TABLE_THRESHOLDS};
use skysearch_core::geometry::nms;
use skysearch_core::qa::{QaConfig, QaNet};
use skysearch_core::scene::{generate_scene, SceneConfig};
use skysearch_core::{BBox, Detection};

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let (w, h) = (rng.gen_range(0.02..0.1), rng.gen_range(0.02..0.1));
    let (x, y) = (rng.gen_range(0.0..1.0 - w), rng.gen_range(0.0..1.0 - h));
    BBox::new(x, y, x + w, y + h)
}

fn geometry(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dets: Vec<Detection> =
        (0..1280).map(|_| Detection { bbox: random_box(&mut rng), score: rng.gen(), class_id: 1 }).collect();
    c.bench_function("nms_1280", |b| b.iter(|| nms(black_box(&dets), 0.45, 50)));

    let anchors = generate_default_boxes(&DefaultBoxSpec::desk()).unwrap();
    let gts: Vec<BBox> = (0..6).map(|_| random_box(&mut rng)).collect();
    c.bench_function("match_desk_anchors", |b| b.iter(|| match_anchors(black_box(&gts), &anchors, 0.5)));

    let gts: Vec<GroundTruth> = (0..600)
        .map(|i| GroundTruth { frame_id: i / 6, class_id: 1, bbox: random_box(&mut rng) })
        .collect();
    let evals: Vec<EvalDetection> = (0..5000)
        .map(|i| EvalDetection { frame_id: i / 50, class_id: 1, bbox: random_box(&mut rng), score: rng.gen() })
        .collect();
    c.bench_function("map_sweep_100_frames", |b| {
        b.iter(|| map_sweep(black_box(&evals), &gts, &TABLE_THRESHOLDS, |_| String::new()))
    });
}

fn models(c: &mut Criterion) {
    let cfg = SceneConfig::default();
    c.bench_function("generate_scene", |b| b.iter(|| generate_scene(black_box(&cfg), 3).unwrap()));

    let (frame, _) = generate_scene(&cfg, 0).unwrap();
    let dcfg = DetectorConfig::default();
    let det = Detector::new(DetectorNet::new(&dcfg, 2, 0).unwrap(), dcfg.clone()).unwrap();
    let params = ProposalParams::from(&dcfg);
    c.bench_function("generate_proposals", |b| b.iter(|| det.generate_proposals(black_box(&frame), &params).unwrap()));

    let qa = QaNet::<f32>::new(&QaConfig::default(), 13, 0).unwrap();
    let crop = frame.highres.crop(frame.highres.pixel_rect(&BBox::new(0.1, 0.1, 0.17, 0.17), 2));
    let img = crop.to_tensor(48, 48);
    let feats = qa.image_features(&img).unwrap();
    let q = skysearch_core::qa::QueryVector::from_indices(&[9], 13).to_tensor();
    c.bench_function("qa_image_features", |b| b.iter(|| qa.image_features(black_box(&img)).unwrap()));
    c.bench_function("qa_answer_from_features", |b| {
        b.iter(|| qa.probabilities_from_features(black_box(&feats), &q).unwrap())
    });
}

criterion_group!(benches, geometry, models);
criterion_main!(benches);
