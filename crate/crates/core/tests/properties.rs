//! Properties that hold on every enumerable instance, checked against the oracle.

use std::collections::HashMap;
use std::sync::Arc;

use gdc::ebm::{fit_lambda, ContextDistribution, EbmTarget, LambdaFitConfig};
use gdc::oracle::{exact_kl, exact_lambda, exact_moments, log_table, probability_table, tvd_tables, SequenceSpace};
use gdc::scorers::{ConstraintSpec, Feature, FeatureSpec};
use gdc::tuner::{Tuner, TunerConfig};
use gdc::{AutoregressiveModel, Conditioning, Context, ModelKind, ModelSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde_json::json;

fn spec(n_tokens: usize, t_max: usize, kind: ModelKind, conditioning: Conditioning, seed: u64) -> ModelSpec {
    ModelSpec {
        tokens: ["A", "B", "C", "D"][..n_tokens].iter().map(|s| s.to_string()).collect(),
        t_max,
        kind,
        conditioning,
        init_seed: seed,
        init_scale: 1.0,
        eos_bias: 0.0,
        context_scale: 0.5,
        contexts: if kind == ModelKind::Tabular { vec!["AB".into(), "C".into()] } else { vec![] },
    }
}

fn feature(model: &AutoregressiveModel, name: &str, builtin: &str, args: serde_json::Value) -> Feature {
    FeatureSpec::new(name, builtin, args).build(model.vocab(), model.t_max()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_context_is_normalized(
        n_tokens in 1usize..=4,
        t_max in 1usize..=4,
        tabular in any::<bool>(),
        full_prefix in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let kind = if tabular { ModelKind::Tabular } else { ModelKind::SoftmaxParametric };
        let cond = if full_prefix { Conditioning::FullPrefix } else { Conditioning::LastToken };
        let model = spec(n_tokens, t_max, kind, cond, seed).build().unwrap();
        let space = SequenceSpace::of(&model);
        let contexts: &[&str] = if tabular { &["AB", "C"] } else { &["", "AB", "CA"] };
        for c in contexts {
            let total: f64 = log_table(&model, &space, &Context::new(*c)).unwrap().iter().map(|l| l.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-9, "context {c:?} sums to {total}");
        }
    }

    #[test]
    fn fitted_lambda_meets_the_moment_tolerance(seed in 0u64..1000, mu in 0.2f64..0.8) {
        let base = Arc::new(spec(2, 3, ModelKind::SoftmaxParametric, Conditioning::FullPrefix, seed).build().unwrap());
        let f = feature(&base, "has_A", "contains_token", json!({"token": "A"}));
        let taus = ContextDistribution::unconditional();
        let cs = ConstraintSpec::new(vec![f.clone()], vec![mu]).unwrap();
        let cfg = LambdaFitConfig { seed, ..Default::default() };
        let (lambda, _) = fit_lambda(&base, &cs, &taus, &cfg).unwrap();
        let target = EbmTarget::exponential(base.clone(), vec![f.clone()], lambda).unwrap();
        let m = exact_moments(&target, &[f], &SequenceSpace::of(&*base), &taus).unwrap()[0];
        prop_assert!((m - mu).abs() < cfg.tolerance, "moment {m} vs {mu}");
    }
}

#[test]
fn sampler_agrees_with_scorer_and_respects_the_horizon() {
    let n = 100_000;
    for (i, cond) in [Conditioning::LastToken, Conditioning::FullPrefix].into_iter().enumerate() {
        for kind in [ModelKind::Tabular, ModelKind::SoftmaxParametric] {
            let model = spec(3, 3, kind, cond, 40 + i as u64).build().unwrap();
            let space = SequenceSpace::of(&model);
            let ctx = if kind == ModelKind::Tabular { Context::new("AB") } else { Context::new("CA") };
            let seqs = space.sequences().unwrap();
            let index: HashMap<_, _> = seqs.iter().enumerate().map(|(i, s)| (s.token_ids().to_vec(), i)).collect();
            let mut counts = vec![0.0; seqs.len()];
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            for (s, _) in model.sample(&ctx, n, &mut rng).unwrap() {
                assert!(s.body().len() <= model.t_max());
                counts[index[s.token_ids()]] += 1.0 / n as f64;
            }
            let exact = probability_table(&model, &space, &ctx).unwrap();
            let tvd = tvd_tables(&counts, &exact);
            let bound = 3.0 * (seqs.len() as f64 / n as f64).sqrt();
            assert!(tvd < bound, "{kind:?}/{cond:?}: TVD {tvd} ≥ {bound}");
        }
    }
}

/// A random distribution with exactly `mu` mass on the feature's support.
fn random_satisfier(support: &[bool], mu: f64, concentration: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).unwrap();
    let mut r: Vec<f64> = support.iter().map(|_| gamma.sample(rng)).collect();
    for side in [true, false] {
        let mass = if side { mu } else { 1.0 - mu };
        let sum: f64 = r.iter().zip(support).filter(|(_, s)| **s == side).map(|(x, _)| x).sum();
        r.iter_mut().zip(support).filter(|(_, s)| **s == side).for_each(|(x, _)| *x *= mass / sum);
    }
    r
}

#[test]
fn exponential_target_minimizes_divergence_among_satisfiers() {
    let base = Arc::new(spec(2, 3, ModelKind::SoftmaxParametric, Conditioning::FullPrefix, 8).build().unwrap());
    let f = feature(&base, "has_A", "contains_token", json!({"token": "A"}));
    let taus = ContextDistribution::unconditional();
    let space = SequenceSpace::of(&*base);
    let ctx = Context::empty();
    let mu = 0.7;
    let sol = exact_lambda(&base, &ConstraintSpec::new(vec![f.clone()], vec![mu]).unwrap(), &space, &taus).unwrap();
    let target = EbmTarget::exponential(base.clone(), vec![f.clone()], sol.lambda).unwrap();
    let p = probability_table(&target, &space, &ctx).unwrap();
    let a = probability_table(&*base, &space, &ctx).unwrap();
    let kl_p = exact_kl(&target, &*base, &space, &taus).unwrap();
    let kl = |r: &[f64]| -> f64 {
        r.iter().zip(&a).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).ln()).sum()
    };
    let support: Vec<bool> = space.sequences().unwrap().iter().map(|s| f.evaluate(s, &ctx).unwrap() == 1.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut lowest = f64::INFINITY;
    for i in 0..1000 {
        let r = if i % 2 == 0 {
            random_satisfier(&support, mu, [0.3, 1.0, 5.0][i % 3], &mut rng)
        } else {
            // Near p: mixed with a little of another satisfier.
            let noise = random_satisfier(&support, mu, 50.0, &mut rng);
            p.iter().zip(&noise).map(|(x, y)| 0.9 * x + 0.1 * y).collect()
        };
        let moment: f64 = r.iter().zip(&support).filter(|(_, s)| **s).map(|(x, _)| x).sum();
        assert!((moment - mu).abs() < 0.01);
        lowest = lowest.min(kl(&r));
    }
    assert!(lowest >= kl_p - 1e-3, "a satisfier reached KL {lowest} below the target's {kl_p}");
}

#[test]
fn large_lambda_approaches_the_pointwise_target() {
    let base = Arc::new(spec(3, 3, ModelKind::SoftmaxParametric, Conditioning::LastToken, 5).build().unwrap());
    let f = feature(&base, "has_B", "contains_token", json!({"token": "B"}));
    let space = SequenceSpace::of(&*base);
    let ctx = Context::empty();
    let tilted = EbmTarget::exponential(base.clone(), vec![f.clone()], vec![30.0]).unwrap();
    let pointwise = EbmTarget::pointwise(base.clone(), vec![f]).unwrap();
    let tvd = tvd_tables(
        &probability_table(&tilted, &space, &ctx).unwrap(),
        &probability_table(&pointwise, &space, &ctx).unwrap(),
    );
    assert!(tvd < 1e-6, "TVD {tvd}");
}

#[test]
fn exact_lambda_reproduces_the_moments() {
    let base = Arc::new(spec(3, 4, ModelKind::Tabular, Conditioning::FullPrefix, 2).build().unwrap());
    let features = vec![
        feature(&base, "has_A", "contains_token", json!({"token": "A"})),
        feature(&base, "length", "length_fraction", json!({})),
        feature(&base, "distinct", "min_distinct_tokens", json!({"min": 2})),
    ];
    let taus = ContextDistribution::uniform(["AB", "C"]).unwrap();
    let space = SequenceSpace::of(&*base);
    let mu = vec![0.6, 0.5, 0.4];
    let sol = exact_lambda(&base, &ConstraintSpec::new(features.clone(), mu.clone()).unwrap(), &space, &taus).unwrap();
    let target = EbmTarget::exponential(base.clone(), features.clone(), sol.lambda).unwrap();
    let m = exact_moments(&target, &features, &space, &taus).unwrap();
    for (got, want) in m.iter().zip(&mu) {
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn conditional_tuning_descends_window_by_window() {
    let base = Arc::new(
        ModelSpec {
            context_scale: 0.5,
            ..spec(4, 4, ModelKind::SoftmaxParametric, Conditioning::FullPrefix, 0)
        }
        .build()
        .unwrap(),
    );
    let f = feature(&base, "in_context", "subset_of_context", json!({}));
    let taus = ContextDistribution::uniform(["AB", "BC", "ACD"]).unwrap();
    let target = EbmTarget::exponential(base.clone(), vec![f], vec![3.0]).unwrap().with_conditional_features(true);
    let space = SequenceSpace::of(&*base);
    let cfg = TunerConfig {
        n_gradient_steps: 300,
        n_samples_per_step: 1024,
        sampling_size: 128,
        scoring_size: 128,
        context_sampling_size: 3,
        learning_rate: 1.0,
        ..Default::default()
    };
    let mut tuner = Tuner::new(base.clone_model(false), target.clone(), taus.clone(), cfg).unwrap();
    let mut kls = vec![exact_kl(&target, tuner.model(), &space, &taus).unwrap()];
    for _ in 0..3 {
        for _ in 0..100 {
            tuner.step().unwrap();
        }
        kls.push(exact_kl(&target, tuner.model(), &space, &taus).unwrap());
    }
    assert!(kls.windows(2).all(|w| w[1] < w[0]), "{kls:?}");
    assert!(kls[0] - kls[3] >= 0.5 * kls[0], "{kls:?}");
}

#[test]
fn small_batches_drift_farther_from_the_base() {
    let base = Arc::new(
        ModelSpec {
            init_scale: 2.0,
            ..spec(4, 8, ModelKind::SoftmaxParametric, Conditioning::FullPrefix, 0)
        }
        .build()
        .unwrap(),
    );
    let f = feature(&base, "contains_D", "contains_token", json!({"token": "D"}));
    let target = EbmTarget::pointwise(base.clone(), vec![f]).unwrap();
    let taus = ContextDistribution::unconditional();
    let space = SequenceSpace::of(&*base);
    let budget = 1024 * 40;
    let mut finals = Vec::new();
    for batch in [32usize, 1024] {
        let cfg = TunerConfig {
            n_gradient_steps: budget / batch,
            n_samples_per_step: batch,
            sampling_size: 32,
            scoring_size: 32,
            learning_rate: 3.0,
            ..Default::default()
        };
        let mut tuner = Tuner::new(base.clone_model(false), target.clone(), taus.clone(), cfg).unwrap();
        tuner.tune(&mut gdc::metrics::NullLogger).unwrap();
        finals.push(exact_kl(tuner.model(), &*base, &space, &taus).unwrap());
    }
    assert!(finals[1] < finals[0], "batch 32 {} vs batch 1024 {}", finals[0], finals[1]);
}
