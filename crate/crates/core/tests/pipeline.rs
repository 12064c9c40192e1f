use std::collections::HashSet;

use mogen_core::cost::{LatencyModel, LatencyProtocol};
use mogen_core::meta::{self, BuildConfig, MetaDataset};
use mogen_core::numeric::Tensor;
use mogen_core::pareto::{self, batch_metrics, score_batch, select, Metric, Pick};
use mogen_core::predictors::{train_predictors, Head, PredictorConfig, PredictorTrainConfig};
use mogen_core::sampler::{Generator, GuidanceScales, Phase, PredictorGuide, StretchPresets};
use mogen_core::score::{train_score, ScoreConfig, SdeSchedule, TrainConfig};
use mogen_core::space::SearchSpace;
use mogen_core::{Error, PredictorSetF32, PredictorSetF64, ScoreNetF32, ScoreNetF64};
use proptest::prelude::*;

fn tiny_sde() -> SdeSchedule {
    SdeSchedule {
        steps: 12,
        ..SdeSchedule::default()
    }
}

fn tiny_score() -> ScoreConfig {
    ScoreConfig {
        d_model: 8,
        heads: 2,
        blocks: 1,
        time_dim: 8,
    }
}

fn tiny_pred() -> PredictorConfig {
    PredictorConfig {
        d_model: 8,
        heads: 2,
        blocks: 1,
        time_dim: 8,
        d_embed: 8,
    }
}

fn short<T: Default>(f: impl FnOnce(&mut T)) -> T {
    let mut t = T::default();
    f(&mut t);
    t
}

fn small_meta(space: SearchSpace, n: usize) -> MetaDataset {
    meta::build(&BuildConfig::new(space, n, 11)).unwrap()
}

#[test]
fn meta_dataset_round_trips_through_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    for space in [SearchSpace::Nb201, SearchSpace::Mbv3] {
        let m = small_meta(space, 40);
        let path = dir.path().join(format!("{space}.jsonl"));
        m.write(&path).unwrap();
        assert_eq!(MetaDataset::read(&path).unwrap(), m);
        assert_eq!(small_meta(space, 40), m);
    }
}

#[test]
fn corrupt_meta_line_is_reported_with_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    small_meta(SearchSpace::Nb201, 5).write(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[3] = "{\"task_id\": 2, \"arch\": 7}";
    std::fs::write(&path, lines.join("\n")).unwrap();
    match MetaDataset::read(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn checkpoints_reproduce_outputs_in_both_precisions() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_meta(SearchSpace::Nb201, 60);
    let archs: Vec<_> = m.records.iter().map(|r| r.arch.clone()).collect();
    let train: TrainConfig = short(|c: &mut TrainConfig| {
        c.steps = 3;
        c.batch = 4;
    });

    let mut net = ScoreNetF64::new(SearchSpace::Nb201, tiny_score(), tiny_sde(), 1).unwrap();
    train_score(&archs, &mut net, &train).unwrap();
    let path = dir.path().join("s64.mgn");
    net.save(&path).unwrap();
    let back = ScoreNetF64::load(&path).unwrap();
    let (r, c) = SearchSpace::Nb201.shape();
    let x = Tensor::from_f64(r, c, &archs[0].to_continuous().values).unwrap();
    assert_eq!(net.score(&x, &[0.3]).unwrap(), back.score(&x, &[0.3]).unwrap());

    let mut net32 = ScoreNetF32::new(SearchSpace::Nb201, tiny_score(), tiny_sde(), 1).unwrap();
    let trace = train_score(&archs, &mut net32, &train).unwrap();
    assert!(trace.losses.iter().all(|l| l.is_finite()));
    let path = dir.path().join("s32.mgn");
    net32.save(&path).unwrap();
    let x32 = Tensor::<f32>::from_f64(r, c, &archs[0].to_continuous().values).unwrap();
    assert_eq!(net32.score(&x32, &[0.3]).unwrap(), ScoreNetF32::load(&path).unwrap().score(&x32, &[0.3]).unwrap());

    let ptrain: PredictorTrainConfig = short(|c: &mut PredictorTrainConfig| {
        c.steps = 3;
        c.batch = 4;
    });
    let preds = train_predictors::<f64>(&m, &tiny_sde(), tiny_pred(), &ptrain).unwrap();
    assert_eq!(preds.report.len(), Head::ALL.len());
    preds.save(&dir.path().join("p")).unwrap();
    let loaded = PredictorSetF64::load(&dir.path().join("p")).unwrap();
    let dt = preds.encode(&m.held_out_task(0));
    assert_eq!(preds.predict_accuracy(&archs[..5], &dt).unwrap(), loaded.predict_accuracy(&archs[..5], &dt).unwrap());

    let p32 = train_predictors::<f32>(&m, &tiny_sde(), tiny_pred(), &ptrain).unwrap();
    p32.save(&dir.path().join("p32")).unwrap();
    let l32 = PredictorSetF32::load(&dir.path().join("p32")).unwrap();
    assert_eq!(p32.predict_accuracy(&archs[..5], &dt).unwrap(), l32.predict_accuracy(&archs[..5], &dt).unwrap());
}

#[test]
fn stretched_generation_feeds_selection() {
    for space in [SearchSpace::Nb201, SearchSpace::Mbv3] {
        let m = small_meta(space, 50);
        let net = ScoreNetF64::new(space, tiny_score(), tiny_sde(), 2).unwrap();
        let ptrain: PredictorTrainConfig = short(|c: &mut PredictorTrainConfig| {
            c.steps = 2;
            c.batch = 4;
        });
        let preds = train_predictors::<f64>(&m, &tiny_sde(), tiny_pred(), &ptrain).unwrap();
        let task = m.held_out_task(1);
        let guide = PredictorGuide::new(&preds, &task);
        let mut gen = Generator::new(&net, Some(&guide));
        gen.chunk = 3;
        let batch = gen.generate_stretched_sized(&StretchPresets::published(space), 5, 4).unwrap();
        assert_eq!(batch.len(), 10);
        assert_eq!(batch.items.iter().filter(|g| g.phase == Phase::Efficient).count(), 5);
        assert!(batch.archs().iter().all(|a| a.space() == space && a.encode().is_valid().unwrap()));
        assert_eq!(batch, gen.generate_stretched_sized(&StretchPresets::published(space), 5, 4).unwrap());

        let scored = score_batch(&batch, &preds, &task, (&LatencyModel::default(), &LatencyProtocol::default()), 4, Some(&m.oracle())).unwrap();
        for metric in Metric::ALL {
            let sel = select(&scored, metric).unwrap();
            let hashes: HashSet<&str> = sel.front.iter().map(|s| s.hash.as_str()).collect();
            assert_eq!(hashes.len(), sel.front.len());
            for p in Pick::ALL {
                assert!(hashes.contains(sel.pick(p).hash.as_str()));
            }
            let mut csv = Vec::new();
            pareto::write_csv(&mut csv, &scored, &sel).unwrap();
            assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + pareto::dedup(&scored).len());
        }
        let g = batch_metrics(&batch, &m.arch_hashes()).unwrap();
        assert!((0.0..=100.0).contains(&g.validity));
    }
}

#[test]
fn guidance_without_scales_ignores_the_guide() {
    let net = ScoreNetF64::new(SearchSpace::Mbv3, tiny_score(), tiny_sde(), 5).unwrap();
    let a = Generator::new(&net, None).generate_batch(&GuidanceScales::ZERO, 4, 1).unwrap();
    let b = Generator::new(&net, None).generate_batch(&GuidanceScales::ZERO, 4, 2).unwrap();
    assert_ne!(a, b);
    assert!(Generator::new(&net, None).generate_batch(&GuidanceScales::diffusionnag(), 4, 1).is_err());
}

proptest! {
    #[test]
    fn front_is_exactly_the_non_dominated_set(pts in prop::collection::vec((0u8..10, 1u8..10), 1..60)) {
        let pts: Vec<(f64, f64)> = pts.into_iter().map(|(a, m)| (a as f64 / 10.0, m as f64)).collect();
        let front: HashSet<usize> = pareto::pareto_front(&pts).unwrap().into_iter().collect();
        for i in 0..pts.len() {
            let dominated = pts.iter().any(|&q| pareto::dominates(q, pts[i]));
            prop_assert_eq!(front.contains(&i), !dominated);
        }
    }
}
