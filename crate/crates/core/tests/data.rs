mod common;

use std::io::Write;
use std::path::Path;

use common::*;
use glonet::data::*;
use glonet::model::{build_model, Family, ModelConfig};
use glonet::nn::HeadKind;
use glonet::train::{evaluate, train_run};
use glonet::{Error, TrainConfig};
use proptest::prelude::*;
use rand::Rng;

const SGEMM_HEADER: &str = "MWG,NWG,KWG,MDIMC,NDIMC,MDIMA,NDIMB,KWI,VWM,VWN,STRM,STRN,SA,SB,Run1 (ms),Run2 (ms),Run3 (ms),Run4 (ms)";

/// Writes an SGEMM-shaped CSV with `n` random rows and returns the raw
/// (features, runs) values for oracle use.
fn write_sgemm(path: &Path, n: usize, seed: u64) -> Vec<[f64; 18]> {
    let mut r = rng(seed);
    let pow2 = [16.0, 32.0, 64.0, 128.0];
    let mut rows = Vec::new();
    let mut f = std::fs::File::create(path).unwrap();
    writeln!(f, "{SGEMM_HEADER}").unwrap();
    for _ in 0..n {
        let mut row = [0.0; 18];
        for v in row.iter_mut().take(14) {
            *v = pow2[r.random_range(0..4)];
        }
        for v in row.iter_mut().skip(14) {
            *v = (r.random_range(13.0..3000.0f64) * 100.0).round() / 100.0;
        }
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{}", line.join(",")).unwrap();
        rows.push(row);
    }
    rows
}

#[test]
fn sgemm_loader_standardizes_on_train_split() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sgemm_product.csv");
    let raw = write_sgemm(&path, 500, 1);
    let ds = load_sgemm(&path).unwrap();

    assert_eq!(ds.input_dim(), 14);
    // independent line count of the file, minus the header
    let lines = std::fs::read_to_string(&path).unwrap().lines().count() - 1;
    assert_eq!(ds.len(), lines);
    assert_eq!(ds.meta.rows, lines);
    assert_eq!((ds.split.train.len(), ds.split.test.len()), (400, 100));

    for c in 0..14 {
        let col: Vec<f64> = ds.split.train.iter().map(|&r| ds.features.get(r, c)).collect();
        let n = col.len() as f64;
        let mu = col.iter().sum::<f64>() / n;
        let sd = (col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mu.abs() <= 1e-9, "column {c} mean {mu}");
        assert!((sd - 1.0).abs() <= 1e-6, "column {c} std {sd}");
    }

    // target: log10 of the mean run, standardized with train statistics
    let logs: Vec<f64> = raw.iter().map(|r| (r[14..].iter().sum::<f64>() / 4.0).log10()).collect();
    let tr: Vec<f64> = ds.split.train.iter().map(|&i| logs[i]).collect();
    let mu = tr.iter().sum::<f64>() / tr.len() as f64;
    let sd = (tr.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / tr.len() as f64).sqrt();
    let y = ds.batch_targets(&(0..ds.len()).collect::<Vec<_>>()).unwrap();
    for (i, l) in logs.iter().enumerate() {
        assert!((y.data()[i] - (l - mu) / sd).abs() < 1e-12);
    }

    // no leakage: test columns are transformed but not re-centred
    let test_means: Vec<f64> = (0..14)
        .map(|c| ds.split.test.iter().map(|&r| ds.features.get(r, c)).sum::<f64>() / 100.0)
        .collect();
    assert!(test_means.iter().any(|m| m.abs() > 1e-6));

    assert_eq!(ds.meta.checksum.as_deref(), Some(file_sha256(&path).unwrap().as_str()));
    assert!(ds.meta.preprocessing.iter().any(|p| p.contains("log10")));
}

#[test]
fn sgemm_wrong_column_count_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("short.csv");
    std::fs::write(&path, "a,b,c\n1,2,3\n").unwrap();
    let err = load_sgemm(&path).unwrap_err();
    assert!(matches!(err, Error::Format(_)));
    let msg = err.to_string();
    assert!(msg.contains("18") && msg.contains('3'), "{msg}");
}

#[test]
fn sgemm_bad_row_reports_row_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    write_sgemm(&path, 5, 2);
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("16,16,16,16,16,16,16,16,16,16,16,16,16,oops,1,1,1,1\n");
    std::fs::write(&path, text).unwrap();
    let err = load_sgemm(&path).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains("row 7"), "{err}");
}

#[test]
fn checksum_verification() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.bin");
    std::fs::write(&path, b"abc").unwrap();
    let sha = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad";
    assert_eq!(file_sha256(&path).unwrap(), sha);
    verify_checksum(&path, sha).unwrap();
    assert!(verify_checksum(&path, &"0".repeat(64)).is_err());
}

fn write_idx_images(path: &Path, images: &[Vec<u8>], side: u32) {
    let mut buf = Vec::new();
    buf.extend_from_slice(&0x0803u32.to_be_bytes());
    buf.extend_from_slice(&(images.len() as u32).to_be_bytes());
    buf.extend_from_slice(&side.to_be_bytes());
    buf.extend_from_slice(&side.to_be_bytes());
    images.iter().for_each(|im| buf.extend_from_slice(im));
    std::fs::write(path, buf).unwrap();
}

fn write_idx_labels(path: &Path, labels: &[u8]) {
    let mut buf = Vec::new();
    buf.extend_from_slice(&0x0801u32.to_be_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    buf.extend_from_slice(labels);
    std::fs::write(path, buf).unwrap();
}

fn fake_mnist(dir: &Path, n_train: usize, n_test: usize) -> MnistFiles {
    let mut r = rng(3);
    let files = MnistFiles::in_dir(dir);
    let mut img = |n: usize| -> Vec<Vec<u8>> {
        (0..n).map(|_| (0..784).map(|_| r.random::<u8>()).collect()).collect()
    };
    let (tr, te) = (img(n_train), img(n_test));
    write_idx_images(&files.train_images, &tr, 28);
    write_idx_images(&files.test_images, &te, 28);
    write_idx_labels(&files.train_labels, &(0..n_train).map(|i| (i % 10) as u8).collect::<Vec<_>>());
    write_idx_labels(&files.test_labels, &(0..n_test).map(|i| (i % 10) as u8).collect::<Vec<_>>());
    files
}

#[test]
fn mnist_loader_shapes_and_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let files = fake_mnist(dir.path(), 30, 12);
    let ds = load_mnist(&files).unwrap();
    assert_eq!(ds.input_dim(), 784);
    // sizes from the IDX headers, read independently
    let header_count = |p: &Path| {
        let b = std::fs::read(p).unwrap();
        u32::from_be_bytes(b[4..8].try_into().unwrap()) as usize
    };
    assert_eq!(ds.split.train.len(), header_count(&files.train_images));
    assert_eq!(ds.split.test.len(), header_count(&files.test_images));
    assert!(ds.features.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(ds.is_classification());
    let raw = std::fs::read(&files.test_images).unwrap();
    assert_eq!(ds.features.get(30, 5), raw[16 + 5] as f64 / 255.0);
    assert_eq!(ds.batch_labels(&[31]).unwrap(), vec![1]);
}

#[test]
fn mnist_bad_magic_and_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let files = fake_mnist(dir.path(), 4, 2);
    write_idx_labels(&files.test_labels, &[1, 2, 3]);
    assert!(matches!(load_mnist(&files), Err(Error::Data(_))));

    let files = fake_mnist(dir.path(), 4, 2);
    let mut b = std::fs::read(&files.train_images).unwrap();
    b[3] = 0x01;
    std::fs::write(&files.train_images, b).unwrap();
    let err = load_mnist(&files).unwrap_err();
    assert!(matches!(err, Error::Format(_)));
    assert!(err.to_string().contains("magic"));
}

#[test]
fn synthetic_is_seed_determined() {
    let spec = SyntheticSpec { n: 300, ..Default::default() };
    let a = synthetic_regression(&spec).unwrap();
    let b = synthetic_regression(&spec).unwrap();
    assert_eq!(a.features, b.features);
    assert_eq!(a.targets, b.targets);
    assert_eq!(a.split, b.split);
    let c = synthetic_regression(&SyntheticSpec { seed: 1, ..spec }).unwrap();
    assert_ne!(a.features, c.features);
}

/// Recomputes the documented generator formula independently.
#[test]
fn synthetic_regeneration_oracle() {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let spec = SyntheticSpec {
        n: 200,
        d: 5,
        noise_std: 0.05,
        amplitude: 1.0,
        test_fraction: 0.25,
        seed: 11,
    };
    let ds = synthetic_regression(&spec).unwrap();
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| StandardNormal.sample(&mut r)).collect() };
    let (w, u, x, eps) = (draw(5), draw(5), draw(1000), draw(200));
    assert_eq!(ds.features.data(), &x[..]);
    let y = ds.batch_targets(&(0..200).collect::<Vec<_>>()).unwrap();
    for i in 0..200 {
        let row = &x[i * 5..i * 5 + 5];
        let dot = |v: &[f64]| row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / 5f64.sqrt();
        let want = dot(&w) + dot(&u).sin() + 0.05 * eps[i];
        assert!((y.data()[i] - want).abs() < 1e-12);
    }
    assert_eq!(ds.split.test.len(), 50);
}

#[test]
fn linear_target_is_realizable_by_one_block() {
    let ds = synthetic_regression(&SyntheticSpec {
        n: 2048,
        d: 6,
        noise_std: 0.0,
        amplitude: 0.0,
        test_fraction: 0.2,
        seed: 5,
    })
    .unwrap();
    let mut model = build_model(&ModelConfig::new(Family::Glonet, 1, 6, HeadKind::Regression).with_seed(2)).unwrap();
    let cfg = TrainConfig {
        epochs: 150,
        batch_size: 256,
        lr: 0.01,
        l2_coeff: 0.0,
        ..Default::default()
    };
    train_run(&mut model, &ds, &cfg).unwrap();
    let mse = evaluate(&model, &ds, &ds.split.test).unwrap();
    assert!(mse < 1e-6, "test MSE {mse}");
}

#[test]
fn cache_rejects_corruption_and_other_files() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synthetic_regression(&SyntheticSpec { n: 50, ..Default::default() }).unwrap();
    let path = dir.path().join("ds.gnds");
    ds.save_cache(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Dataset::load_cache(&path), Err(Error::Format(_))));
    std::fs::write(&path, b"not a cache at all, just text").unwrap();
    assert!(matches!(Dataset::load_cache(&path), Err(Error::Format(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cache_round_trip_is_bitwise(n in 4usize..80, d in 1usize..6, seed in any::<u64>(), labels in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = synthetic_regression(&SyntheticSpec { n, d, seed, ..Default::default() }).unwrap();
        if labels {
            ds.targets = Targets::Labels { labels: (0..n).map(|i| (i * 7 + seed as usize) % 3).collect(), classes: 3 };
        }
        let path = dir.path().join("c.gnds");
        ds.save_cache(&path).unwrap();
        let back = Dataset::load_cache(&path).unwrap();
        let bits = |t: &glonet::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.features), bits(&ds.features));
        prop_assert_eq!(&back.targets, &ds.targets);
        prop_assert_eq!(&back.split, &ds.split);
        prop_assert_eq!(&back.meta, &ds.meta);
    }

    #[test]
    fn split_is_an_exact_partition(n in 2usize..500, frac in 0.05f64..0.95, seed in any::<u64>()) {
        match split_indices(n, frac, seed) {
            Ok(s) => {
                prop_assert_eq!(s.test.len(), (n as f64 * frac).round() as usize);
                let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                prop_assert_eq!(s, split_indices(n, frac, seed).unwrap());
            }
            Err(e) => {
                let k = (n as f64 * frac).round() as usize;
                prop_assert!(k == 0 || k >= n);
                prop_assert!(matches!(e, Error::Config(_)));
            }
        }
    }
}
