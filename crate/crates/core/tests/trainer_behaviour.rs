use seqmix::data::{gen_reversal, Vocabulary};
use seqmix::model::{greedy_decode, ModelParams};
use seqmix::trainer::{
    evaluate_exact_match, init_params, run_experiment, train, ExperimentData, TrainConfig, Validation, REPORT_HEADER,
};
use seqmix::{Error, Method, MethodConfig, SequencePair};

fn reversal(pairs: usize, seed: u64) -> (Vec<SequencePair>, usize) {
    let data = gen_reversal(pairs, 8, 2, 4, seed);
    let vocab = Vocabulary::from_tokens(
        data.examples
            .iter()
            .flat_map(|e| e.source.iter().chain(&e.target).map(String::as_str)),
    );
    (data.encode(&vocab, &vocab), vocab.len())
}

fn small(method: Method, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(MethodConfig::new(method), seed);
    cfg.hidden = 12;
    cfg.embed = 6;
    cfg.epochs = 3;
    cfg.batch_size = 8;
    cfg
}

#[test]
fn identical_configs_train_identically() {
    let (data, vocab) = reversal(40, 1);
    for method in Method::ALL {
        let cfg = small(method, 5);
        let run = || {
            let mut p = init_params(&cfg, vocab);
            let recs = train(&mut p, &data, vocab, &cfg, Some(Validation { data: &data[..10] }), |_| {}).unwrap();
            (p, recs)
        };
        let (p1, r1) = run();
        let (p2, r2) = run();
        assert_eq!(r1, r2, "{method}");
        assert_eq!(p1.to_checkpoint_bytes(), p2.to_checkpoint_bytes(), "{method}");
        let lines1: Vec<String> = r1.iter().map(|r| r.to_json_line()).collect();
        let lines2: Vec<String> = r2.iter().map(|r| r.to_json_line()).collect();
        assert_eq!(lines1, lines2);
    }
}

#[test]
fn seeds_change_the_run() {
    let (data, vocab) = reversal(40, 1);
    let mut a = init_params(&small(Method::Seqmix, 1), vocab);
    let mut b = init_params(&small(Method::Seqmix, 2), vocab);
    assert_ne!(a.to_checkpoint_bytes(), b.to_checkpoint_bytes());
    let ra = train(&mut a, &data, vocab, &small(Method::Seqmix, 1), None, |_| {}).unwrap();
    let rb = train(&mut b, &data, vocab, &small(Method::Seqmix, 2), None, |_| {}).unwrap();
    assert_ne!(ra[0].loss, rb[0].loss);
}

#[test]
fn parent_only_mixing_reproduces_the_baseline() {
    // With λ pinned to 1 every mixed example is its parent, padded to the
    // partner's length with zero-weight positions.
    let (data, vocab) = reversal(30, 2);
    for attention in [false, true] {
        let mut base_cfg = small(Method::Baseline, 3);
        base_cfg.attention = attention;
        let mut mix_cfg = small(Method::Seqmix, 3);
        mix_cfg.attention = attention;
        mix_cfg.force_lambda = Some(1.0);
        let mut base = init_params(&base_cfg, vocab);
        let mut mixed = init_params(&mix_cfg, vocab);
        let rb = train(&mut base, &data, vocab, &base_cfg, None, |_| {}).unwrap();
        let rm = train(&mut mixed, &data, vocab, &mix_cfg, None, |_| {}).unwrap();
        for (x, y) in rb.iter().zip(&rm) {
            assert!((x.loss - y.loss).abs() < 1e-12, "{} vs {}", x.loss, y.loss);
        }
        for (x, y) in base.tensors().iter().zip(mixed.tensors()) {
            for (a, b) in x.data().iter().zip(y.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn a_single_example_is_memorized() {
    let (data, vocab) = reversal(1, 3);
    // Recurrence alone; with attention a lone pair can settle on its token
    // marginal with saturated states, a trap of the one-example setting.
    let mut cfg = small(Method::Baseline, 0);
    cfg.attention = false;
    cfg.epochs = 500;
    cfg.learning_rate = 1e-2;
    let mut params = init_params(&cfg, vocab);
    let recs = train(&mut params, &data, vocab, &cfg, None, |_| {}).unwrap();
    assert!(recs.last().unwrap().loss < 1e-2, "loss {}", recs.last().unwrap().loss);
    assert_eq!(evaluate_exact_match(&params, &data, 20).unwrap(), 1.0);
}

#[test]
fn untrained_zero_model_scores_nothing() {
    let (data, vocab) = reversal(20, 4);
    let params = ModelParams::zeros(small(Method::Baseline, 0).dims(vocab));
    assert!(greedy_decode(&data[0].source, &params, 5).unwrap().iter().all(|&t| t == 0));
    assert_eq!(evaluate_exact_match(&params, &data, 10).unwrap(), 0.0);
}

#[test]
fn non_finite_loss_aborts_with_location() {
    let (data, vocab) = reversal(20, 5);
    let cfg = small(Method::Seqmix, 0);
    let mut params = init_params(&cfg, vocab);
    params.out_b.data_mut()[0] = f64::NAN;
    match train(&mut params, &data, vocab, &cfg, None, |_| {}) {
        Err(Error::NonFinite { epoch, step, batch, .. }) => assert_eq!((epoch, step, batch), (1, 1, 0)),
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn records_stream_out_as_produced() {
    let (data, vocab) = reversal(20, 6);
    let mut cfg = small(Method::WordDrop, 0);
    cfg.eval_every = 2;
    cfg.report_bleu = true;
    let mut params = init_params(&cfg, vocab);
    let mut seen = Vec::new();
    let recs = train(&mut params, &data, vocab, &cfg, Some(Validation { data: &data }), |r| seen.push(r.clone())).unwrap();
    assert_eq!(seen, recs);
    assert_eq!(recs.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
    // Evaluated on every second epoch and the last.
    assert!(recs[0].exact_match.is_none() && recs[1].exact_match.is_some() && recs[2].exact_match.is_some());
    assert!(recs[2].bleu.is_some());
    assert!(recs.iter().all(|r| r.seconds.is_none() && r.method == "word-drop"));
}

#[test]
fn experiments_aggregate_per_method() {
    let (data, vocab) = reversal(30, 7);
    let exp = ExperimentData {
        train: data[..20].to_vec(),
        valid: data[20..25].to_vec(),
        test: data[25..].to_vec(),
        vocab,
    };
    let cells: Vec<TrainConfig> = [Method::Seqmix, Method::Baseline]
        .iter()
        .flat_map(|&m| (0..3).map(move |s| small(m, s)))
        .collect();
    let report = run_experiment(&cells, &exp).unwrap();
    assert_eq!(report.cells.len(), 6);
    // Canonical order, not cell order.
    assert_eq!(report.summary.iter().map(|s| s.method).collect::<Vec<_>>(), vec![Method::Baseline, Method::Seqmix]);
    for s in &report.summary {
        assert_eq!((s.cells, s.failed), (3, 0));
        let mut ems: Vec<f64> = report
            .cells
            .iter()
            .filter(|c| c.method == s.method)
            .map(|c| c.test_exact_match.unwrap())
            .collect();
        ems.sort_by(f64::total_cmp);
        assert_eq!(s.median, Some(ems[1]));
        assert_eq!((s.min, s.max), (Some(ems[0]), Some(ems[2])));
    }
    let tsv = report.to_tsv();
    assert_eq!(tsv.lines().next(), Some(REPORT_HEADER));
    assert_eq!(tsv.lines().count(), 3);
    assert_eq!(report, run_experiment(&cells, &exp).unwrap());
}

#[test]
fn failed_cells_are_reported_not_raised() {
    let (data, vocab) = reversal(10, 8);
    let exp = ExperimentData {
        train: data.clone(),
        valid: Vec::new(),
        test: data,
        vocab: vocab - 1,
    };
    let report = run_experiment(&[small(Method::Baseline, 0)], &exp).unwrap();
    assert!(report.cells[0].failure.is_some());
    let s = &report.summary[0];
    assert_eq!((s.cells, s.failed, s.median), (1, 1, None));
    assert!(report.to_tsv().contains("NA"));
}

#[test]
fn checkpoints_survive_the_file_system() {
    let (data, vocab) = reversal(20, 9);
    let cfg = small(Method::SwitchOut, 0);
    let mut params = init_params(&cfg, vocab);
    train(&mut params, &data, vocab, &cfg, None, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    params.save(&path).unwrap();
    let back = ModelParams::load(&path).unwrap();
    assert_eq!(back.to_checkpoint_bytes(), params.to_checkpoint_bytes());
    assert_eq!(
        evaluate_exact_match(&back, &data, 10).unwrap(),
        evaluate_exact_match(&params, &data, 10).unwrap()
    );
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 8);
    std::fs::write(&path, bytes).unwrap();
    assert!(ModelParams::load(&path).is_err());
}
