use super::*;
use proptest::prelude::*;

/// Exhaustive positive/negative pair count, ties worth one half.
fn pair_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

#[test]
fn auroc_examples() {
    assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
    assert_eq!(auroc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
    let (s, l) = ([0.1, 0.9, 0.5, 0.7], [0, 1, 0, 1]);
    assert_eq!(auroc(&s, &l).unwrap(), 1.0);
    assert_eq!(pair_oracle(&s, &l), 1.0);
    assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(Error::DegenerateLabels)));
    assert!(matches!(auroc(&[0.1], &[1, 0]), Err(Error::InvalidDimension(_))));
    assert!(matches!(auroc(&[f64::NAN, 0.0], &[1, 0]), Err(Error::NumericalDomain(_))));
}

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..120).prop_flat_map(|n| {
        (
            prop::collection::vec(prop_oneof![(0i32..6).prop_map(f64::from), -5.0f64..5.0], n),
            prop::collection::vec(0u8..2, n),
        )
            .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
    })
}

proptest! {
    #[test]
    fn auroc_matches_pair_enumeration((s, l) in instance()) {
        prop_assert!((auroc(&s, &l).unwrap() - pair_oracle(&s, &l)).abs() < 1e-12);
    }

    #[test]
    fn auroc_ignores_increasing_transforms((s, l) in instance()) {
        let t: Vec<f64> = s.iter().map(|x| (0.7 * x).exp() + 3.0).collect();
        prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&t, &l).unwrap());
    }

    #[test]
    fn negated_scores_complement((s, l) in instance()) {
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        prop_assert!((auroc(&s, &l).unwrap() + auroc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn config_round_trips_through_text() {
    let mut c = ExperimentConfig::default();
    c.space = Space::Euclidean;
    c.loss = LossKind::Mse;
    c.encoder_hidden = vec![4];
    c.lr = 3.5e-4;
    c.checkpoint = Some("run/model.hpck".into());
    let text = c.to_text();
    assert_eq!(ExperimentConfig::parse(&text).unwrap(), c);
    assert!(text.contains("[geometry]\nspace = euclidean\nloss = mse\n"));
}

#[test]
fn config_rejects_bad_input() {
    let bad = [
        "[model]\nheads = 5\n",
        "[model]\nlayers = 0\n",
        "[nonsense]\n",
        "space = euclidean\n",
        "[geometry]\ncolour = red\n",
        "[geometry]\nspace\n",
        "[train]\nlr = fast\n",
        "[model]\ndim = 12\n",
    ];
    for text in bad {
        assert!(matches!(ExperimentConfig::parse(text), Err(Error::InvalidConfig(_))), "{text:?}");
    }
    let ok = ExperimentConfig::parse("# comment\n[model]\ndim = 15\nheads = 2\ndecoder_hidden = 8\n").unwrap();
    assert_eq!((ok.dim, ok.heads, ok.decoder_hidden.as_slice()), (15, 2, &[8][..]));
}

fn series(id: &str, cat: Option<&str>, raw: Vec<f64>, labels: Vec<u8>) -> ScoreSeries {
    let mut s = ScoreSeries::new(id, raw, labels).unwrap();
    s.category = cat.map(str::to_string);
    anomaly::moving_average(&s, SMOOTHING_WINDOW).unwrap()
}

#[test]
fn eval_examples() {
    let perfect = series("a", None, vec![0.1, 0.2, 0.9, 0.8], vec![0, 0, 1, 1]);
    let r = run_eval(&[perfect]).unwrap();
    assert_eq!((r.auroc_raw, r.auroc_smoothed), (1.0, 1.0));

    let good = series("g", Some("teleport"), vec![0.1, 0.2, 0.9, 0.8], vec![0, 0, 1, 1]);
    let flat = series("n", Some("normal"), vec![0.3, 0.1, 0.2], vec![0, 0, 0]);
    let r = run_eval(&[good, flat]).unwrap();
    assert_eq!(r.categories.len(), 1);
    assert_eq!(r.categories[0].category, "teleport");
    assert_eq!(r.warnings.len(), 1);
    assert!(r.warnings[0].contains("normal"));
    assert!(r.to_table().contains("warning: category normal skipped"));
    assert_eq!(r.frames, 7);
    assert!(matches!(
        run_eval(&[series("z", None, vec![0.0, 1.0], vec![0, 0])]),
        Err(Error::DegenerateLabels)
    ));
}

#[test]
fn smoothing_helps_on_a_noisy_step() {
    let mut rng = crate::engine::rng::RandomSource::new(9);
    let labels: Vec<u8> = (0..200).map(|t| u8::from(t >= 100)).collect();
    let raw: Vec<f64> = labels.iter().map(|&l| f64::from(l) + 1.5 * rng.normal()).collect();
    let r = run_eval(&[series("s", None, raw, labels)]).unwrap();
    assert!(r.auroc_smoothed >= r.auroc_raw, "{} vs {}", r.auroc_smoothed, r.auroc_raw);
}

#[test]
fn report_forms_agree() {
    let r = run_eval(&[series("a", Some("x"), vec![0.1, 0.9, 0.1, 0.9], vec![0, 1, 0, 1])]).unwrap();
    let csv = r.to_delimited();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("scope,frames,anomalous,auroc_raw,auroc_smoothed"));
    assert_eq!(lines.next(), Some("all,4,2,1.0,1.0"));
    assert_eq!(lines.next(), Some("x,4,2,1.0,1.0"));
}

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        layers: 1,
        heads: 2,
        dim: 7,
        frames: 2,
        points: 12,
        encoder_hidden: vec![8],
        decoder_hidden: vec![7],
        epochs: 2,
        batch_size: 4,
        train_sequences: 4,
        test_normal: 1,
        test_anomalous: 2,
        train_frames: 5,
        test_frames: 12,
        onset: (4, 6),
        ..ExperimentConfig::default()
    }
}

#[test]
fn scores_are_aligned_and_forward_filled() {
    let c = tiny_config();
    let mut store = ParamStore::new();
    let model = Model::register(&mut store, &c.model_config().unwrap(), 0).unwrap();
    let (_, test) = c.dataset_spec().generate().unwrap();
    let frames = prepare_frames(&test[0], c.points, 0).unwrap();
    let raw = score_frames(&model, &store, &frames).unwrap();
    assert_eq!(raw.len(), frames.len());
    let refs: Vec<&PointCloudFrame> = frames.iter().collect();
    let direct = model.window_scores(&store, &refs, &[0, 5]).unwrap();
    assert_eq!(raw[0], direct[0]);
    assert_eq!(raw[1], direct[0]);
    assert_eq!(raw[2], direct[0]);
    assert!((raw[7] - direct[1]).abs() < 1e-12);

    // A video of exactly T+1 frames has one score, broadcast everywhere.
    let short = prepare_frames(&test[0], c.points, 0).unwrap()[..3].to_vec();
    let raw = score_frames(&model, &store, &short).unwrap();
    assert_eq!(raw, vec![raw[0]; 3]);
    assert!(score_frames(&model, &store, &short[..2]).is_err());
}

#[test]
fn zero_epochs_checkpoint_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config();
    c.epochs = 0;
    run_gen_data(&c, dir.path()).unwrap();
    let ck = dir.path().join("m.hpck");
    run_training(&c, dir.path(), &ck, |_| {}).unwrap();
    let mut init = ParamStore::new();
    Model::register(&mut init, &c.model_config().unwrap(), c.seed).unwrap();
    let stored = Checkpoint::read(&ck).unwrap();
    assert_eq!(stored.params, init);
    assert_eq!(stored.config_text, c.to_text());
}

#[test]
fn end_to_end_is_deterministic_and_checks_compatibility() {
    let run = |root: &Path| {
        let c = tiny_config();
        run_gen_data(&c, root).unwrap();
        let ck = root.join("m.hpck");
        let mut log = Vec::new();
        run_training(&c, root, &ck, |l| log.push(l.to_string())).unwrap();
        let series = run_scoring(&c, &ck, root, &root.join("scores")).unwrap();
        assert_eq!(series.len(), 3);
        let mut report = run_eval(&load_score_dir(&root.join("scores")).unwrap()).unwrap();
        report.config_echo = Some(c.to_text());
        report.write(&root.join("report")).unwrap();
        assert_eq!(log.len(), 3);
        (
            std::fs::read(&ck).unwrap(),
            std::fs::read(root.join("report/report.csv")).unwrap(),
            std::fs::read(root.join("report/report.txt")).unwrap(),
        )
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(run(a.path()), run(b.path()));

    let ck = a.path().join("m.hpck");
    let mut other = tiny_config();
    other.heads = 4;
    assert!(matches!(load_model(&other, &ck), Err(Error::IncompatibleCheckpoint(_))));
    let mut more = tiny_config();
    more.dropout = 0.2;
    more.epochs = 9;
    assert!(load_model(&more, &ck).is_ok());
}

#[test]
fn missing_data_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_training(&tiny_config(), dir.path(), &dir.path().join("m"), |_| {}).unwrap_err();
    assert!(matches!(err, Error::DataNotFound(_)));
    assert!(matches!(load_score_dir(&dir.path().join("x")), Err(Error::DataNotFound(_))));
}

#[test]
fn prediction_training_skips_anomalous_frames() {
    let c = tiny_config();
    let (_, test) = c.dataset_spec().generate().unwrap();
    let mut logs = Vec::new();
    train_model(&c, &test[1..2], |l| logs.push(l.to_string())).unwrap();
    let onset: usize = test[1].metadata["onset"].parse().unwrap();
    assert!(logs[0].starts_with(&format!("training on {} windows", onset - 2)), "{logs:?}");
}

#[test]
fn gradient_check_passes_for_the_default_variants() {
    for space in [Space::Hyperbolic, Space::Euclidean] {
        let mut c = tiny_config();
        c.space = space;
        let report = run_check_grad(&c, 1e-6, |n| n.contains("theta") || n.contains("layer0.head0") || n.starts_with("decoder.1")).unwrap();
        assert!(!report.params.is_empty());
        for p in &report.params {
            assert!(p.max_rel_error < 1e-4 || p.max_abs_error < 1e-8, "{space} {}: {}", p.name, p.max_rel_error);
        }
    }
}
