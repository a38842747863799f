use std::collections::BTreeMap;
use std::io::{self, Write};
use gdc::ebm::ContextDistribution;
use gdc::error::Error;
use gdc::model::AutoregressiveModel;
use gdc::scorers::Feature;
use gdc::metrics::*;
use gdc::model::Vocab;
use gdc::oracle::{exact_kl, SequenceSpace};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy(row: &[f64]) -> AutoregressiveModel {
    AutoregressiveModel::tabular_iid(Vocab::with_eos(&["A", "B"]).unwrap(), 1, row).unwrap()
}

fn sample_metrics(step: usize) -> StepMetrics {
    let mut moments = BTreeMap::new();
    moments.insert("amazing".to_string(), 0.1 + step as f64 / 3.0);
    StepMetrics {
        step,
        kl_target_model: 1.0 / (step as f64 + 3.0),
        kl_model_base: if step == 1 { f64::INFINITY } else { 0.2 },
        z_estimate: 0.123456789012345678,
        feature_moments: moments,
        proposal_refreshed: step % 2 == 0,
        acceptance_diag: None,
        extra: BTreeMap::new(),
    }
}

#[test]
fn kl_estimate_matches_oracle() {
    let p = toy(&[0.5, 0.5, 0.0]);
    let m = toy(&[0.75, 0.25, 0.0]);
    let taus = ContextDistribution::unconditional();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let est = estimate_kl_target_model(&p, &m, &m, &taus, 100_000, &mut rng).unwrap();
    let exact = exact_kl(&p, &m, &SequenceSpace::of(&p), &taus).unwrap();
    assert!((exact - 0.1438).abs() < 1e-4);
    assert!((est.value - exact).abs() < 0.01, "{est:?}");
    assert!((est.value - exact).abs() < 5.0 * est.std_error);
}

#[test]
fn kl_estimate_is_zero_for_the_target_itself() {
    let p = toy(&[0.6, 0.4, 0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let est = estimate_kl_target_model(&p, &p, &p, &ContextDistribution::unconditional(), 1000, &mut rng).unwrap();
    assert!(est.value.abs() <= 2.0 * est.std_error + 1e-12, "{est:?}");
}

#[test]
fn missing_mass_is_flagged_infinite() {
    let p = toy(&[0.5, 0.5, 0.0]);
    let m = toy(&[1.0, 0.0, 0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let est = estimate_kl_target_model(&p, &m, &p, &ContextDistribution::unconditional(), 100, &mut rng).unwrap();
    assert_eq!(est.value, f64::INFINITY);
}

#[test]
fn zero_weight_targets_are_an_error() {
    let base = toy(&[0.5, 0.5, 0.0]);
    let never = std::sync::Arc::new(base.clone());
    let target = gdc::ebm::EbmTarget::pointwise(never, vec![Feature::boolean("never", |_, _| false)]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    assert!(matches!(
        estimate_kl_target_model(&target, &base, &base, &ContextDistribution::unconditional(), 10, &mut rng),
        Err(Error::Starvation(_))
    ));
    assert!(estimate_kl_target_model(&base, &base, &base, &ContextDistribution::unconditional(), 1, &mut rng).is_err());
}

#[test]
fn moments_under_base_and_constant_feature() {
    let base = toy(&[0.75, 0.25, 0.0]);
    let is_a = Feature::boolean("A", |s, _| s.text() == "A");
    let one = Feature::new("one", gdc::scorers::FeatureKind::Positive, |_, _| 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let est = estimate_feature_moments(&base, &[is_a, one], &base, &ContextDistribution::unconditional(), 50_000, &mut rng)
        .unwrap();
    assert!((est[0].value - 0.75).abs() < 0.01);
    assert!((est[1].value - 1.0).abs() < 1e-9);
}

#[test]
fn zero_weight_with_infinite_log_ratio_contributes_nothing() {
    let est = kl_target_model_from_batch(
        ScoredBatch {
            log_target: &[0.0, f64::NEG_INFINITY],
            log_proposal: &[0.0, 0.0],
        },
        &[0.0, f64::NEG_INFINITY],
    )
    .unwrap();
    assert!(est.value.is_finite());
}

#[test]
fn jsonl_replay_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let history: Vec<StepMetrics> = (0..5).map(sample_metrics).collect();
    {
        let mut logger = JsonlLogger::create(&path).unwrap();
        for m in &history {
            logger.log(m).unwrap();
        }
    }
    let back = read_jsonl(&path).unwrap();
    assert_eq!(back.len(), history.len());
    for (a, b) in back.iter().zip(&history) {
        assert_eq!(a.kl_target_model.to_bits(), b.kl_target_model.to_bits());
        assert_eq!(a.kl_model_base.to_bits(), b.kl_model_base.to_bits());
        assert_eq!(a.z_estimate.to_bits(), b.z_estimate.to_bits());
        assert_eq!(a.feature_moments, b.feature_moments);
    }
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().nth(1).unwrap().contains("\"kl_model_base\":\"inf\""));
}

#[test]
fn empty_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    drop(JsonlLogger::create(&path).unwrap());
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 0);
}

#[test]
fn unknown_keys_survive_replay() {
    let line = r#"{"step":3,"kl_target_model":0.5,"kl_model_base":"inf","z_estimate":1.0,"feature_moments":{"a":0.25},"proposal_refreshed":false,"future_field":{"x":[1,2]}}"#;
    let m: StepMetrics = serde_json::from_str(line).unwrap();
    assert_eq!(m.extra["future_field"]["x"][1], 2);
    let again = serde_json::to_string(&m).unwrap();
    assert!(again.contains("\"future_field\":{\"x\":[1,2]}"));
}

#[test]
fn attached_loggers_see_identical_payloads() {
    let mut a = MemoryLogger::default();
    let mut b = MemoryLogger::default();
    {
        let mut set = LoggerSet::new();
        set.push(Box::new(JsonlLogger::new(Vec::new())));
        for step in 0..4 {
            let m = sample_metrics(step);
            a.log(&m).unwrap();
            b.log(&m).unwrap();
            set.log(&m).unwrap();
        }
    }
    assert_eq!(a.history, b.history);
    let mut console = ConsoleLogger::new(Vec::new());
    console.log(&sample_metrics(0)).unwrap();
    let text = String::from_utf8(console.into_inner()).unwrap();
    assert!(text.starts_with("step     0"));
    assert_eq!(text.lines().count(), 1);
}

struct Broken;
impl Write for Broken {
    fn write(&mut self, _: &[u8]) -> io::Result<usize> {
        Err(io::Error::other("disk full"))
    }
    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

#[test]
fn io_failure_names_the_step() {
    let mut logger = JsonlLogger::new(Broken);
    match logger.log(&sample_metrics(7)) {
        Err(Error::Logging { step, .. }) => assert_eq!(step, 7),
        other => panic!("unexpected {other:?}"),
    }
}
