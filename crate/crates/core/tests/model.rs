use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use gdc::error::Error;
use gdc::model::*;

fn ab() -> Vocab {
    Vocab::with_eos(&["A", "B"]).unwrap()
}

fn l1_toy() -> AutoregressiveModel {
    AutoregressiveModel::tabular_iid(ab(), 1, &[0.75, 0.25, 0.0]).unwrap()
}

fn random_softmax(conditioning: Conditioning, seed: u64) -> AutoregressiveModel {
    ModelSpec {
        tokens: vec!["A".into(), "B".into(), "C".into()],
        t_max: 3,
        kind: ModelKind::SoftmaxParametric,
        conditioning,
        init_seed: seed,
        init_scale: 1.0,
        eos_bias: 0.0,
        context_scale: 0.5,
        contexts: vec![],
    }
    .build()
    .unwrap()
    .clone_model(false)
}

#[test]
fn vocab_rejects_duplicates_and_bad_eos() {
    assert!(Vocab::new(vec!["A".into(), "A".into()], 1).is_err());
    assert!(Vocab::new(vec!["A".into(), "B".into()], 2).is_err());
    assert!(Vocab::new(vec!["<eos>".into()], 0).is_err());
}

#[test]
fn tokenize_prefers_longest_symbol() {
    let v = Vocab::with_eos(&["a", "ab", "b"]).unwrap();
    assert_eq!(v.tokenize("abab"), vec![1, 1]);
    assert_eq!(v.tokenize("a?b"), vec![0, 2]);
    assert!(v.tokenize_strict("a?b").is_err());
}

#[test]
fn sequence_requires_single_trailing_eos() {
    let v = ab();
    assert!(Sequence::new(&v, vec![0, 1]).is_err());
    assert!(Sequence::new(&v, vec![2, 0, 2]).is_err());
    let s = Sequence::new(&v, vec![0, 1, 2]).unwrap();
    assert_eq!(s.text(), "AB");
    assert_eq!(s.len(), 2);
}

#[test]
fn uniform_one_step_model_samples_with_log_half() {
    let m = AutoregressiveModel::tabular_iid(ab(), 1, &[0.5, 0.5, 0.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples = m.sample(&Context::empty(), 4, &mut rng).unwrap();
    assert_eq!(samples.len(), 4);
    for (s, lp) in samples {
        assert_eq!(s.len(), 1);
        assert!((lp - 0.5f64.ln()).abs() < 1e-15);
    }
}

#[test]
fn point_mass_samples_are_certain() {
    let m = AutoregressiveModel::tabular_iid(ab(), 1, &[1.0, 0.0, 0.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (s, lp) in m.sample(&Context::empty(), 20, &mut rng).unwrap() {
        assert_eq!(s.text(), "A");
        assert_eq!(lp, 0.0);
    }
    let b = Sequence::parse(m.vocab(), "B").unwrap();
    assert_eq!(m.log_score_one(&b, &Context::empty()).unwrap(), f64::NEG_INFINITY);
}

#[test]
fn empirical_frequency_matches_table() {
    let m = l1_toy();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 100_000;
    let hits = m
        .sample(&Context::empty(), n, &mut rng)
        .unwrap()
        .iter()
        .filter(|(s, _)| s.text() == "A")
        .count();
    let freq = hits as f64 / n as f64;
    assert!((freq - 0.75).abs() < 0.01, "freq {freq}");
}

#[test]
fn log_score_closed_form() {
    let m = l1_toy();
    let a = Sequence::parse(m.vocab(), "A").unwrap();
    let lp = m.log_score_one(&a, &Context::empty()).unwrap();
    assert!((lp - 0.75f64.ln()).abs() < 1e-15);
    assert!((lp + 0.28768).abs() < 1e-5);
}

#[test]
fn log_score_rejects_foreign_ids_and_long_sequences() {
    let m = l1_toy();
    let big = Vocab::with_eos(&["A", "B", "C", "D"]).unwrap();
    let foreign = Sequence::from_body(&big, &[3]).unwrap();
    assert!(matches!(
        m.log_score_one(&foreign, &Context::empty()),
        Err(Error::OutOfVocab { .. }) | Err(Error::InvalidSequence(_))
    ));
    let long = Sequence::parse(m.vocab(), "AA").unwrap();
    assert!(m.log_score_one(&long, &Context::empty()).is_err());
}

#[test]
fn sampled_log_probs_match_log_score() {
    for cond in [Conditioning::LastToken, Conditioning::FullPrefix] {
        let m = random_softmax(cond, 11);
        let ctx = Context::new("AC");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples = m.sample(&ctx, 500, &mut rng).unwrap();
        let seqs: Vec<Sequence> = samples.iter().map(|(s, _)| s.clone()).collect();
        let scores = m.log_score(&seqs, &ctx).unwrap();
        for ((s, lp), sc) in samples.iter().zip(scores) {
            assert!(s.len() <= m.t_max());
            assert!((lp - sc).abs() < 1e-9);
        }
    }
}

#[test]
fn gradient_matches_central_differences() {
    let h = 1e-5;
    for (i, cond) in [Conditioning::LastToken, Conditioning::FullPrefix].into_iter().enumerate() {
        let mut m = random_softmax(cond, 20 + i as u64);
        let ctx = Context::new("BC");
        let mut rng = ChaCha8Rng::seed_from_u64(5 + i as u64);
        for (seq, _) in m.clone().sample(&ctx, 5, &mut rng).unwrap() {
            let analytic = m.grad_log_score(&seq, &ctx).unwrap();
            let theta = m.params().unwrap();
            let mut max_err: f64 = 0.0;
            for j in 0..theta.len() {
                let mut plus = theta.clone();
                plus[j] += h;
                m.set_params(&plus).unwrap();
                let fp = m.log_score_one(&seq, &ctx).unwrap();
                let mut minus = theta.clone();
                minus[j] -= h;
                m.set_params(&minus).unwrap();
                let fm = m.log_score_one(&seq, &ctx).unwrap();
                m.set_params(&theta).unwrap();
                max_err = max_err.max(((fp - fm) / (2.0 * h) - analytic[j]).abs());
            }
            assert!(max_err < 1e-6, "max abs error {max_err}");
        }
    }
}

#[test]
fn saturated_state_has_vanishing_gradient() {
    let v = ab();
    // One state per last token; the root strongly prefers A.
    let state_logits = vec![
        60.0, 0.0, 0.0, // root
        0.0, 0.0, 0.0, // after A
        0.0, 0.0, 0.0, // after B
    ];
    let m = AutoregressiveModel::softmax(v.clone(), 1, Conditioning::LastToken, state_logits, vec![0.0; 9])
        .unwrap()
        .clone_model(false);
    let g = m
        .grad_log_score(&Sequence::parse(&v, "A").unwrap(), &Context::empty())
        .unwrap();
    assert!(g.iter().all(|x| x.abs() < 1e-20));
}

#[test]
fn tabular_models_reject_gradients() {
    let m = l1_toy().clone_model(false);
    let a = Sequence::parse(m.vocab(), "A").unwrap();
    assert!(matches!(
        m.grad_log_score(&a, &Context::empty()),
        Err(Error::Unsupported(_))
    ));
}

#[test]
fn clones_are_independent() {
    let base = random_softmax(Conditioning::FullPrefix, 7).clone_model(true);
    let mut copy = base.clone_model(false);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let seqs: Vec<Sequence> = base
        .sample(&Context::empty(), 100, &mut rng)
        .unwrap()
        .into_iter()
        .map(|(s, _)| s)
        .collect();
    let before = base.log_score(&seqs, &Context::empty()).unwrap();
    assert_eq!(before, copy.log_score(&seqs, &Context::empty()).unwrap());
    let dir = vec![0.3; copy.n_params()];
    copy.apply_update(&dir, 1.0).unwrap();
    assert_eq!(before, base.log_score(&seqs, &Context::empty()).unwrap());
    let mut frozen = copy.clone_model(true);
    assert!(matches!(frozen.apply_update(&dir, 1.0), Err(Error::FrozenModel)));
}

#[test]
fn tabular_contexts_are_looked_up_by_key() {
    let m = AutoregressiveModel::tabular_from_fn(ab(), 1, vec!["x".into(), "y".into()], |c, _| {
        if c == 0 {
            vec![1.0, 0.0, 0.0]
        } else {
            vec![0.0, 1.0, 0.0]
        }
    })
    .unwrap();
    let a = Sequence::parse(m.vocab(), "A").unwrap();
    assert_eq!(m.log_score_one(&a, &Context::new("x")).unwrap(), 0.0);
    assert_eq!(m.log_score_one(&a, &Context::new("y")).unwrap(), f64::NEG_INFINITY);
    assert!(matches!(
        m.log_score_one(&a, &Context::new("z")),
        Err(Error::UnknownContext(_))
    ));
}

#[test]
fn tabular_rows_must_be_normalized() {
    assert!(AutoregressiveModel::tabular_iid(ab(), 2, &[0.5, 0.4, 0.0]).is_err());
    assert!(AutoregressiveModel::tabular_iid(ab(), 2, &[1.5, -0.5, 0.0]).is_err());
}

#[test]
fn json_round_trip_is_exact() {
    let soft = random_softmax(Conditioning::FullPrefix, 9);
    let back = AutoregressiveModel::from_json(&soft.to_json().unwrap()).unwrap();
    assert_eq!(soft, back);
    let tab = ModelSpec {
        tokens: vec!["A".into(), "B".into()],
        t_max: 3,
        kind: ModelKind::Tabular,
        conditioning: Conditioning::FullPrefix,
        init_seed: 4,
        init_scale: 1.0,
        eos_bias: 0.0,
        context_scale: 0.0,
        contexts: vec!["c1".into(), "c2".into()],
    }
    .build()
    .unwrap();
    let text = tab.to_json().unwrap();
    let back = AutoregressiveModel::from_json(&text).unwrap();
    assert_eq!(tab, back);
    assert_eq!(text, back.to_json().unwrap());
}

#[test]
fn json_rejects_unknown_version() {
    let text = l1_toy().to_json().unwrap().replace("\"version\": 1", "\"version\": 9");
    assert!(AutoregressiveModel::from_json(&text).is_err());
}
