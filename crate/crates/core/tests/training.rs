use glonet::autodiff::Graph;
use glonet::data::{synthetic_regression, Dataset, SyntheticSpec, Targets};
use glonet::model::{build_model, Family, Model, ModelConfig};
use glonet::nn::HeadKind;
use glonet::train::*;
use glonet::{Error, Tensor, TrainConfig};

fn linear_task(n: usize, d: usize) -> Dataset {
    synthetic_regression(&SyntheticSpec {
        n,
        d,
        noise_std: 0.0,
        amplitude: 0.0,
        test_fraction: 0.2,
        seed: 4,
    })
    .unwrap()
}

fn small_task() -> Dataset {
    synthetic_regression(&SyntheticSpec { n: 600, d: 5, ..Default::default() }).unwrap()
}

fn glonet(depth: usize, d: usize, seed: u64) -> Model {
    build_model(&ModelConfig::new(Family::Glonet, depth, d, HeadKind::Regression).with_width(8).with_seed(seed)).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 64,
        ..Default::default()
    }
}

fn zero_blocks_from(model: &mut Model, from: usize) {
    for i in 0..model.params.len() {
        let name = model.params.name(i).to_string();
        if let Some(rest) = name.strip_prefix("block") {
            if rest.split('.').next().unwrap().parse::<usize>().unwrap() >= from {
                model.params.get_mut(i).data_mut().fill(0.0);
            }
        }
    }
}

#[test]
fn zero_epochs_leave_model_untouched() {
    let ds = small_task();
    let mut model = build_model(&ModelConfig::new(Family::Vanilla, 4, 5, HeadKind::Regression)).unwrap();
    let before = model.clone();
    let h = train_run(&mut model, &ds, &quick(0)).unwrap();
    assert!(h.records.is_empty());
    assert_eq!(h.best_test_error, None);
    assert_eq!(model.params.flatten(), before.params.flatten());
    assert_eq!(model.buffers, before.buffers);
}

#[test]
fn one_block_linear_task_converges() {
    let ds = linear_task(2048, 6);
    let mut model = glonet(1, 6, 0);
    let h = train_run(&mut model, &ds, &quick(50)).unwrap();
    let loss = h.loss_curve();
    assert!(loss[..5].windows(2).all(|w| w[1] < w[0]), "{:?}", &loss[..5]);
    let final_mse = h.records.last().unwrap().test_metric;
    assert!(final_mse < 1e-3, "{final_mse}");
}

#[test]
fn identical_config_gives_identical_history() {
    let ds = small_task();
    for fam in Family::ALL {
        let run = || {
            let mut m = build_model(&ModelConfig::new(fam, 4, 5, HeadKind::Regression).with_seed(3)).unwrap();
            let h = train_run(&mut m, &ds, &TrainConfig { seed: 9, ..quick(3) }).unwrap();
            (h, m.params.flatten())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        let bits = |h: &RunHistory| {
            h.records
                .iter()
                .map(|r| (r.epoch, r.train_loss.to_bits(), r.test_metric.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b), "{fam}");
        assert_eq!(pa, pb);
    }
}

#[test]
fn history_invariants() {
    let ds = small_task();
    let mut m = glonet(3, 5, 1);
    let h = train_run(&mut m, &ds, &quick(6)).unwrap();
    let epochs: Vec<usize> = h.records.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, (1..=6).collect::<Vec<_>>());
    let min = h.records.iter().map(|r| r.test_metric).fold(f64::INFINITY, f64::min);
    assert_eq!(h.best_test_error, Some(min));
    assert!(h.records.iter().all(|r| r.epoch_seconds >= 0.0));
    assert_eq!(h.meta.threads, 1);
    assert_eq!(h.meta.model, m.config);
    // test metric equals an independent evaluation of the final model
    assert_eq!(h.records.last().unwrap().test_metric, evaluate(&m, &ds, &ds.split.test).unwrap());
}

#[test]
fn classification_history_tracks_best_accuracy() {
    let mut ds = small_task();
    let Targets::Regression { values } = &ds.targets else { unreachable!() };
    let labels = values.data().iter().map(|v| if *v < -0.5 { 0 } else if *v < 0.5 { 1 } else { 2 }).collect();
    ds.targets = Targets::Labels { labels, classes: 3 };
    let mut m = build_model(&ModelConfig::new(Family::Glonet, 3, 5, HeadKind::Classification { classes: 3 })).unwrap();
    let h = train_run(&mut m, &ds, &quick(5)).unwrap();
    let best = h.records.iter().map(|r| r.test_metric).fold(0.0, f64::max);
    assert!(h.records.iter().all(|r| (0.0..=1.0).contains(&r.test_metric)));
    assert_eq!(h.best_test_metric(), Some(best));
    assert!((h.best_test_error.unwrap() - (1.0 - best)).abs() < 1e-15);
    assert!(best > 0.5, "{best}");
    assert_eq!(h.meta.loss, "cross_entropy");
}

#[test]
fn numeric_fault_carries_epoch_and_batch() {
    let mut ds = small_task();
    let row = ds.split.train[0];
    ds.features.data_mut()[row * 5] = 1e306;
    let mut m = glonet(3, 5, 0);
    let err = train_run(&mut m, &ds, &quick(2)).unwrap_err();
    assert!(matches!(err, Error::NumericFault(_)), "{err}");
    let msg = err.to_string();
    assert!(msg.contains("epoch 1") && msg.contains("batch"), "{msg}");
}

#[test]
fn incompatible_dimensions_are_a_config_error() {
    let ds = small_task();
    let mut m = glonet(2, 7, 0);
    assert!(matches!(train_run(&mut m, &ds, &quick(1)), Err(Error::Config(_))));
}

#[test]
fn batchnorm_models_skip_single_row_batches() {
    let ds = synthetic_regression(&SyntheticSpec { n: 81, d: 3, ..Default::default() }).unwrap();
    assert_eq!(ds.split.train.len() % 16, 1);
    let mut m = build_model(&ModelConfig::new(Family::Resnetv2, 4, 3, HeadKind::Regression)).unwrap();
    let h = train_run(&mut m, &ds, &TrainConfig { batch_size: 16, ..quick(2) }).unwrap();
    assert_eq!(h.records.len(), 2);
}

#[test]
fn profile_of_zeroed_blocks_is_exactly_zero() {
    let ds = small_task();
    let mut m = glonet(6, 5, 2);
    zero_blocks_from(&mut m, 3);
    let p = profile_blocks(&m, &ds, 100).unwrap();
    assert_eq!(p.blocks.len(), 6);
    for b in &p.blocks[3..] {
        assert_eq!((b.l1_mean, b.l1_std), (0.0, 0.0));
    }
    assert!(p.blocks[..3].iter().all(|b| b.l1_mean > 0.0));
}

#[test]
fn untrained_profiles_are_finite_and_positive() {
    let ds = small_task();
    for fam in Family::ALL {
        let m = build_model(&ModelConfig::new(fam, 6, 5, HeadKind::Regression).with_seed(5)).unwrap();
        let p = profile_blocks(&m, &ds, ds.split.test.len()).unwrap();
        assert_eq!(p.blocks.len(), m.num_block_outputs());
        for b in &p.blocks {
            assert!(b.l1_mean.is_finite() && b.l1_mean > 0.0, "{fam}: {b:?}");
            assert!(b.l1_std.is_finite() && b.l1_std >= 0.0);
        }
    }
}

#[test]
fn two_block_profile_matches_hand_computation() {
    let ds = small_task();
    let m = glonet(2, 5, 6);
    let n = 40;
    let p = profile_blocks(&m, &ds, n).unwrap();

    let val = |id| m.params.tensor(id).data().to_vec();
    let glonet::nn::Block::Simple(b1) = &m.blocks[0] else { unreachable!() };
    let (w0, c0, w1, c1) = (val(m.input_layer.weight), val(m.input_layer.bias), val(b1.dense.weight), val(b1.dense.bias));
    let affine = |x: &[f64], w: &[f64], b: &[f64], k: usize| -> Vec<f64> {
        (0..8).map(|j| b[j] + (0..k).map(|i| x[i] * w[i * 8 + j]).sum::<f64>()).collect()
    };
    let mut l1 = [Vec::new(), Vec::new()];
    for &r in &ds.split.test[..n] {
        let x1 = affine(ds.features.row(r), &w0, &c0, 5);
        let relu: Vec<f64> = x1.iter().map(|v| v.max(0.0)).collect();
        let x2 = affine(&relu, &w1, &c1, 8);
        l1[0].push(x1.iter().map(|v| v.abs()).sum::<f64>());
        l1[1].push(x2.iter().map(|v| v.abs()).sum::<f64>());
    }
    for (k, norms) in l1.iter().enumerate() {
        let mean = norms.iter().sum::<f64>() / n as f64;
        let std = (norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((p.blocks[k].l1_mean - mean).abs() < 1e-10);
        assert!((p.blocks[k].l1_std - std).abs() < 1e-10);
        assert_eq!(p.blocks[k].block_index, k + 1);
    }
}

#[test]
fn profile_rejects_bad_sample_sizes() {
    let ds = small_task();
    let m = glonet(2, 5, 0);
    assert!(matches!(profile_blocks(&m, &ds, 0), Err(Error::Usage(_))));
    assert!(matches!(profile_blocks(&m, &ds, ds.split.test.len() + 1), Err(Error::Config(_))));
}

#[test]
fn prune_identity_is_bitwise() {
    let ds = small_task();
    let mut m = glonet(5, 5, 3);
    train_run(&mut m, &ds, &quick(3)).unwrap();
    let before = m.params.flatten();
    let full = evaluate(&m, &ds, &ds.split.test).unwrap();
    assert_eq!(prune_and_eval(&m, 5, &ds).unwrap().to_bits(), full.to_bits());
    assert_eq!(m.params.flatten(), before);
    let sweep = prune_sweep(&m, &ds).unwrap();
    assert_eq!(sweep.len(), 5);
    assert_eq!(sweep.last().unwrap().test_metric.to_bits(), full.to_bits());
}

#[test]
fn pruning_zero_blocks_changes_nothing() {
    let ds = small_task();
    let mut m = glonet(7, 5, 4);
    zero_blocks_from(&mut m, 3);
    let full = evaluate(&m, &ds, &ds.split.test).unwrap();
    for k in 3..=7 {
        assert_eq!(prune_and_eval(&m, k, &ds).unwrap(), full, "keep_k = {k}");
    }
    assert_ne!(prune_and_eval(&m, 2, &ds).unwrap(), full);
}

#[test]
fn prune_argument_errors() {
    let ds = small_task();
    let m = glonet(4, 5, 0);
    assert!(matches!(prune_and_eval(&m, 0, &ds), Err(Error::Config(_))));
    assert!(matches!(prune_and_eval(&m, 5, &ds), Err(Error::Config(_))));
    let v = build_model(&ModelConfig::new(Family::VanillaNoBn, 4, 5, HeadKind::Regression)).unwrap();
    assert!(matches!(prune_and_eval(&v, 2, &ds), Err(Error::Usage(_))));
}

/// Sweep oracle: each truncated MSE recomputed from partial sums of the
/// per-block contributions.
#[test]
fn prune_sweep_matches_contribution_oracle() {
    let ds = synthetic_regression(&SyntheticSpec { n: 2000, d: 6, ..Default::default() }).unwrap();
    let (m, _) = run_cell(&ds, Family::Glonet, 10, 0, 16, &TrainConfig { epochs: 20, batch_size: 128, ..Default::default() }).unwrap();
    let x = ds.batch_features(&ds.split.test).unwrap();
    let y = ds.batch_targets(&ds.split.test).unwrap();
    let contributions = m.block_contributions(&x).unwrap();
    let bias = m.head_bias()[0];
    let sweep = prune_sweep(&m, &ds).unwrap();
    let mut partial = vec![bias; y.len()];
    for (k, point) in sweep.iter().enumerate() {
        partial.iter_mut().zip(contributions[k].data()).for_each(|(p, c)| *p += c);
        let mse = partial.iter().zip(y.data()).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64;
        assert!((point.test_metric - mse).abs() <= 1e-9 * mse.max(1.0), "k = {}", k + 1);
    }
}

/// Literal monotone-refinement claim on a 10-block synthetic run. It does not
/// hold for the synthetic task; kept runnable for comparison on other data.
#[test]
#[ignore = "monotone refinement does not hold on the synthetic 10-block task"]
fn prune_sweep_refines_monotonically_past_profile_knee() {
    let ds = synthetic_regression(&SyntheticSpec { n: 20000, ..Default::default() }).unwrap();
    let (m, _) = run_cell(&ds, Family::Glonet, 10, 0, 16, &TrainConfig { epochs: 30, ..Default::default() }).unwrap();
    let profile = profile_blocks(&m, &ds, 800).unwrap();
    let knee = (1..=10).find(|&k| profile.head_fraction(k) >= 0.9).unwrap();
    let sweep = prune_sweep(&m, &ds).unwrap();
    let tail: Vec<f64> = sweep[knee - 1..].iter().map(|p| p.test_metric).collect();
    assert!(tail.windows(2).all(|w| w[1] <= w[0]), "knee {knee}: {tail:?}");
}

#[test]
fn suite_has_one_row_per_cell_and_records_failures() {
    let ds = small_task();
    let spec = SuiteSpec {
        families: vec![Family::Glonet, Family::Resnetv2],
        depths: vec![3, 4],
        seeds: vec![0, 1],
        width: 8,
        train: quick(2),
    };
    let res = compare_suite(&spec, &ds, 3);
    assert_eq!(res.summary.len(), 4);
    assert_eq!(res.runs.len(), 8);
    let bad = res.cell(Family::Resnetv2, 3).unwrap();
    assert_eq!((bad.seeds_ok, bad.seeds_failed), (0, 2));
    assert!(bad.status.contains("depth_blocks"));
    assert_eq!(bad.best_test_error_mean, None);
    for (f, d) in [(Family::Glonet, 3), (Family::Glonet, 4), (Family::Resnetv2, 4)] {
        let row = res.cell(f, d).unwrap();
        assert_eq!((row.seeds_ok, row.status.as_str()), (2, "ok"));
        assert!(row.best_test_error_mean.unwrap().is_finite());
    }

    // parallel workers reproduce the serial run, and a single cell matches run_cell
    let serial = compare_suite(&spec, &ds, 1);
    for (a, b) in res.runs.iter().zip(&serial.runs) {
        match (&a.outcome, &b.outcome) {
            (Ok(x), Ok(y)) => assert_eq!(x.loss_curve(), y.loss_curve()),
            (Err(x), Err(y)) => assert_eq!(x, y),
            _ => panic!("outcome mismatch"),
        }
    }
    let (_, h) = run_cell(&ds, Family::Glonet, 4, 1, 8, &quick(2)).unwrap();
    let cell = res.runs.iter().find(|r| r.family == Family::Glonet && r.depth_blocks == 4 && r.seed == 1).unwrap();
    assert_eq!(cell.outcome.as_ref().unwrap().loss_curve(), h.loss_curve());
}

#[test]
fn csv_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_task();
    let mut m = glonet(3, 5, 0);
    let h = train_run(&mut m, &ds, &quick(3)).unwrap();
    let path = dir.path().join("history.csv");
    write_history_csv(&path, &[&h]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "family,depth_blocks,seed,epoch,train_loss,test_metric,epoch_seconds"
    );
    let rows: Vec<HistoryRow> = read_csv(&path).unwrap();
    assert_eq!(rows, history_rows(&h));

    let p = profile_blocks(&m, &ds, 50).unwrap();
    let ppath = dir.path().join("profile.csv");
    write_profile_csv(&ppath, &p).unwrap();
    let text = std::fs::read_to_string(&ppath).unwrap();
    assert_eq!(text.lines().next().unwrap(), "block_index,l1_mean,l1_std");
    assert_eq!(text.lines().count(), 1 + 3);

    let empty = dir.path().join("empty.csv");
    write_history_csv(&empty, &[]).unwrap();
    assert_eq!(std::fs::read_to_string(&empty).unwrap().lines().count(), 1);
}

#[test]
fn contributions_are_usable_from_a_fresh_graph() {
    // block_contributions builds its own graph and does not disturb callers
    let m = glonet(3, 5, 1);
    let x = Tensor::zeros(&[2, 5]);
    let mut g = Graph::new();
    let _ = g.input(x.clone());
    let c = m.block_contributions(&x).unwrap();
    assert_eq!(c.len(), 3);
    assert_eq!(g.len(), 1);
}
