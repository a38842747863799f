use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use gdc::ebm::EbmTarget;
use gdc::model::{AutoregressiveModel, Context, Sequence};
use gdc::qrs::*;
use gdc::oracle::{exact_qrs_law, tvd_tables, SequenceSpace};
use gdc::scorers::Feature;
use gdc::model::Vocab;
use std::sync::Arc;

/// p = (0.5, 0.5) on {A, B} as P = (0.25, 0.25); q = (0.75, 0.25).
fn toy() -> (EbmTarget, AutoregressiveModel) {
    let v = Vocab::with_eos(&["A", "B"]).unwrap();
    let base = AutoregressiveModel::tabular_iid(v.clone(), 1, &[0.25, 0.25, 0.5]).unwrap();
    let nonempty = Feature::boolean("nonempty", |s, _| !s.is_empty());
    let target = EbmTarget::pointwise(Arc::new(base), vec![nonempty]).unwrap();
    let q = AutoregressiveModel::tabular_iid(v, 1, &[0.75, 0.25, 0.0]).unwrap();
    (target, q)
}

fn freq_a(out: &QrsOutput) -> f64 {
    out.accepted.iter().filter(|(s, _)| s.text() == "A").count() as f64 / out.accepted.len() as f64
}

#[test]
fn target_equal_to_proposal_accepts_everything() {
    let (_, q) = toy();
    let target = EbmTarget::exponential(Arc::new(q.clone()), vec![], vec![]).unwrap();
    let out = qrs_sample(&target, &q, &QrsConfig::new(1.0), &Context::empty(), 5000).unwrap();
    assert_eq!(out.attempts, 5000);
    assert_eq!(out.accepted.len(), 5000);
}

#[test]
fn toy_acceptance_and_output_law() {
    let (target, q) = toy();
    let space = SequenceSpace::of(&q);
    for (beta, ar) in [(1.0, 0.5), (10.0, 0.05)] {
        let law = exact_qrs_law(&target, &q, beta, &space, &Context::empty()).unwrap();
        assert!((law.acceptance_rate - ar).abs() < 1e-15);
        let out = qrs_sample(&target, &q, &QrsConfig { beta, batch_size: 512, seed: 3 }, &Context::empty(), 100_000).unwrap();
        assert!((out.acceptance_rate() - ar).abs() < 5.0 * (ar * (1.0 - ar) / out.attempts as f64).sqrt());
        let tvd = (freq_a(&out) - 0.5).abs();
        assert!(tvd < 0.01, "beta {beta}: tvd {tvd}");
    }
}

#[test]
fn same_seed_same_samples() {
    let (target, q) = toy();
    let cfg = QrsConfig { beta: 1.0, batch_size: 17, seed: 9 };
    let a = qrs_sample(&target, &q, &cfg, &Context::empty(), 300).unwrap();
    let b = qrs_sample(&target, &q, &cfg, &Context::empty(), 300).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.accepted.len(), 300);
}

#[test]
fn starvation_is_reported() {
    let (target, q) = toy();
    let err = qrs_sample(&target, &q, &QrsConfig::new(1e300), &Context::empty(), 1).unwrap_err();
    assert!(err.to_string().contains("β too large or proposal mismatched"), "{err}");
    assert!(QrsConfig::new(0.0).validate().is_err());
    assert!(QrsConfig::new(-1.0).validate().is_err());
}

#[test]
fn estimates_track_the_oracle() {
    let (target, q) = toy();
    let space = SequenceSpace::of(&q);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let grid = [0.25, 0.5, 1.0, 2.0];
    let est = qrs_estimate(&target, &q, &grid, &Context::empty(), 100_000, &mut rng).unwrap();
    let p = gdc::oracle::probability_table(&target, &space, &Context::empty()).unwrap();
    for e in &est {
        let law = exact_qrs_law(&target, &q, e.beta, &space, &Context::empty()).unwrap();
        assert!((e.tvd_to_target - tvd_tables(&p, &law.probs)).abs() < 0.02);
        assert!((e.acceptance_rate - law.acceptance_rate).abs() < 0.01);
    }
    assert!(est.windows(2).all(|w| w[1].acceptance_rate <= w[0].acceptance_rate));
    // max P/q = 1 here.
    let above = qrs_estimate(&target, &q, &[1.5], &Context::empty(), 100_000, &mut rng).unwrap();
    assert!(above[0].tvd_to_target < 0.01 && above[0].kl_to_target < 0.01);
}

#[test]
fn divergence_of_a_pool_without_clipping_is_zero() {
    let pool = ScoredPool {
        log_ratio: vec![-1.0, -2.0, f64::NEG_INFINITY, -0.5],
    };
    assert!(pool.divergence(10.0, kl_generator).unwrap().abs() < 1e-15);
    assert!(pool.divergence(10.0, tvd_generator).unwrap().abs() < 1e-15);
    assert!(pool.divergence(1e-3, tvd_generator).unwrap() > 0.0);
    let empty = ScoredPool {
        log_ratio: vec![f64::NEG_INFINITY],
    };
    assert!(empty.divergence(1.0, kl_generator).is_none());
}

#[test]
fn csv_outputs() {
    let rows = vec![BetaEstimate {
        beta: 0.5,
        acceptance_rate: 0.75,
        kl_to_target: 0.1,
        tvd_to_target: 0.2,
    }];
    let mut buf = Vec::new();
    write_estimates_csv(&mut buf, &rows).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "beta,acceptance_rate,kl_to_target,tvd_to_target\n0.5,0.75,0.1,0.2\n"
    );
    let v = Vocab::with_eos(&["a,", "b"]).unwrap();
    let mut buf = Vec::new();
    write_samples_csv(&mut buf, &[(Sequence::parse(&v, "a,b").unwrap(), -1.5)]).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "text,log_target\n\"a,b\",-1.5\n");
}
