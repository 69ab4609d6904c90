//! Training loop and instrumentation: per-epoch metrics and timing, block
//! output L1 profiles, prune-and-evaluate sweeps and multi-run comparisons.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode};
use crate::data::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::model::{build_model, Family, Model, ModelConfig};
use crate::nn::HeadKind;
use crate::optim::{adam_step, cross_entropy_loss, mse_loss, AdamState, TrainConfig};

/// Rows per forward pass during evaluation and profiling.
const EVAL_CHUNK: usize = 2048;

/// What `test_metric` means for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Test MSE in the preprocessed target space; lower is better.
    Mse,
    /// Test accuracy in [0, 1]; higher is better.
    Accuracy,
}

impl Metric {
    pub fn for_head(head: HeadKind) -> Self {
        match head {
            HeadKind::Regression => Metric::Mse,
            HeadKind::Classification { .. } => Metric::Accuracy,
        }
    }

    /// Error view of a metric value (MSE as is, `1 - accuracy`).
    pub fn as_error(&self, value: f64) -> f64 {
        match self {
            Metric::Mse => value,
            Metric::Accuracy => 1.0 - value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_metric: f64,
    pub epoch_seconds: f64,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset_source: String,
    pub dataset_preprocessing: Vec<String>,
    pub dataset_checksum: Option<String>,
    pub metric: Metric,
    pub loss: String,
    pub threads: usize,
    pub commit: String,
    pub crate_version: String,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
    /// Minimum test MSE, or `1 - max accuracy`; `None` before the first epoch.
    pub best_test_error: Option<f64>,
    pub meta: RunMeta,
}

impl RunHistory {
    pub fn best_test_metric(&self) -> Option<f64> {
        let vals = self.records.iter().map(|r| r.test_metric);
        match self.meta.metric {
            Metric::Mse => vals.reduce(f64::min),
            Metric::Accuracy => vals.reduce(f64::max),
        }
    }

    /// Mean epoch time over epochs 2..N (epoch 1 is warm-up); epoch 1 alone if N = 1.
    pub fn mean_epoch_seconds(&self) -> Option<f64> {
        let tail = if self.records.len() > 1 {
            &self.records[1..]
        } else {
            &self.records[..]
        };
        (!tail.is_empty()).then(|| tail.iter().map(|r| r.epoch_seconds).sum::<f64>() / tail.len() as f64)
    }

    pub fn loss_curve(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }
}

/// Short id of the checked-out commit, or "unknown".
pub fn commit_id() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn check_compat(model: &Model, dataset: &Dataset) -> Result<()> {
    if model.config.input_dim != dataset.input_dim() {
        return Err(Error::Config(format!(
            "model input_dim {} does not match dataset feature width {}",
            model.config.input_dim,
            dataset.input_dim()
        )));
    }
    match (&model.config.head, &dataset.targets) {
        (HeadKind::Regression, Targets::Regression { .. }) => Ok(()),
        (HeadKind::Classification { classes }, Targets::Labels { classes: dc, .. }) if classes == dc => Ok(()),
        (head, _) => Err(Error::Config(format!(
            "head {head:?} is incompatible with dataset targets"
        ))),
    }
}

fn run_meta(model: &Model, dataset: &Dataset, cfg: &TrainConfig) -> RunMeta {
    let metric = Metric::for_head(model.config.head);
    let mut notes = vec![
        "optimizer: Adam, constant lr, coupled L2 (2*l2_coeff*w added to weight gradients only)".to_string(),
        "init: He normal (variance 2/fan_in) weights, zero biases".to_string(),
        "epoch_seconds: optimization loop only, evaluation excluded".to_string(),
    ];
    if model.has_batchnorm() {
        notes.push(format!(
            "batch norm: eps={}, running-stat momentum={}",
            model.config.bn.eps, model.config.bn.momentum
        ));
    }
    RunMeta {
        model: model.config.clone(),
        train: cfg.clone(),
        dataset_source: dataset.meta.source.clone(),
        dataset_preprocessing: dataset.meta.preprocessing.clone(),
        dataset_checksum: dataset.meta.checksum.clone(),
        metric,
        loss: match metric {
            Metric::Mse => "mse".into(),
            Metric::Accuracy => "cross_entropy".into(),
        },
        threads: 1,
        commit: commit_id(),
        crate_version: env!("CARGO_PKG_VERSION").into(),
        notes,
    }
}

/// One optimization step on a mini-batch; returns the batch loss.
pub fn train_step(model: &mut Model, dataset: &Dataset, batch: &[usize], cfg: &TrainConfig, adam: &mut AdamState) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.input(dataset.batch_features(batch)?);
    let out = model.forward(&mut g, x, Mode::Train)?;
    let loss = match &dataset.targets {
        Targets::Regression { .. } => mse_loss(&mut g, out.output, &dataset.batch_targets(batch)?)?,
        Targets::Labels { .. } => cross_entropy_loss(&mut g, out.logits, &dataset.batch_labels(batch)?)?,
    };
    g.backward(loss)?;
    model.params.zero_grads();
    model.params.absorb_grads(&g)?;
    adam_step(&mut model.params, adam, cfg)?;
    model.commit_bn_updates(out.bn_updates);
    Ok(g.value(loss).item())
}

/// Trains `model` in place and evaluates on the test split after every epoch.
pub fn train_run(model: &mut Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<RunHistory> {
    train_run_with(model, dataset, cfg, |_| {})
}

/// [`train_run`] with a per-epoch callback (progress reporting).
pub fn train_run_with(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunHistory> {
    cfg.validate()?;
    check_compat(model, dataset)?;
    let meta = run_meta(model, dataset, cfg);
    if dataset.split.train.is_empty() || dataset.split.test.is_empty() {
        return Err(Error::Config("dataset split has an empty partition".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.params);
    let mut order = dataset.split.train.clone();
    let min_batch = if model.has_batchnorm() { 2 } else { 1 };
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let start = Instant::now();
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            if batch.len() < min_batch {
                continue;
            }
            let loss = train_step(model, dataset, batch, cfg, &mut adam)
                .map_err(|e| e.with_context(format!("epoch {epoch}, batch {}", b + 1)))?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let epoch_seconds = start.elapsed().as_secs_f64();
        let test_metric = evaluate(model, dataset, &dataset.split.test)
            .map_err(|e| e.with_context(format!("evaluation after epoch {epoch}")))?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            test_metric,
            epoch_seconds,
        };
        on_epoch(&rec);
        records.push(rec);
    }

    let mut history = RunHistory {
        records,
        best_test_error: None,
        meta,
    };
    history.best_test_error = history.best_test_metric().map(|m| history.meta.metric.as_error(m));
    Ok(history)
}

/// Test metric (MSE or accuracy) of the full model on `indices`.
pub fn evaluate(model: &Model, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    evaluate_impl(model, dataset, indices, None)
}

fn evaluate_impl(model: &Model, dataset: &Dataset, indices: &[usize], keep: Option<usize>) -> Result<f64> {
    check_compat(model, dataset)?;
    if indices.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty index set".into()));
    }
    let mut total = 0.0;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let x = g.input(dataset.batch_features(chunk)?);
        let out = match keep {
            Some(k) => model.forward_truncated(&mut g, x, Mode::Eval, k)?,
            None => model.forward(&mut g, x, Mode::Eval)?,
        };
        match &dataset.targets {
            Targets::Regression { values } => {
                let pred = g.value(out.output).data();
                total += chunk
                    .iter()
                    .zip(pred)
                    .map(|(&i, p)| (p - values.data()[i]).powi(2))
                    .sum::<f64>();
            }
            Targets::Labels { labels, .. } => {
                let probs = g.value(out.output);
                let cols = probs.cols();
                total += chunk
                    .iter()
                    .enumerate()
                    .filter(|&(r, &i)| argmax(&probs.data()[r * cols..(r + 1) * cols]) == labels[i])
                    .count() as f64;
            }
        }
    }
    Ok(total / indices.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockStat {
    /// 1-based block index (`x_1` is the input layer output).
    pub block_index: usize,
    pub l1_mean: f64,
    pub l1_std: f64,
}

/// Per-block output L1-norm statistics over an evaluation sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockProfile {
    pub blocks: Vec<BlockStat>,
    pub sample_size: usize,
}

impl BlockProfile {
    pub fn total_mass(&self) -> f64 {
        self.blocks.iter().map(|b| b.l1_mean).sum()
    }

    /// Share of total mean-L1 mass carried by the first `k` blocks.
    pub fn head_fraction(&self, k: usize) -> f64 {
        let head: f64 = self.blocks.iter().take(k).map(|b| b.l1_mean).sum();
        head / self.total_mass()
    }

    /// Mean-L1 mass of the last `k` blocks.
    pub fn tail_mass(&self, k: usize) -> f64 {
        self.blocks.iter().rev().take(k).map(|b| b.l1_mean).sum()
    }

    pub fn head_mass(&self, k: usize) -> f64 {
        self.blocks.iter().take(k).map(|b| b.l1_mean).sum()
    }
}

/// L1 profile of every block output over the first `sample_size` test rows.
///
/// For GloNet the profiled tensors are the adapted summands of the aggregation
/// layer; for the baselines they are the raw block outputs.
pub fn profile_blocks(model: &Model, dataset: &Dataset, sample_size: usize) -> Result<BlockProfile> {
    if sample_size == 0 {
        return Err(Error::Usage("profile sample_size must be positive".into()));
    }
    check_compat(model, dataset)?;
    let test = &dataset.split.test;
    if sample_size > test.len() {
        return Err(Error::Config(format!(
            "profile sample_size {sample_size} exceeds the {} test rows",
            test.len()
        )));
    }
    let sample = &test[..sample_size];
    let n_blocks = model.num_block_outputs();
    let mut norms: Vec<Vec<f64>> = vec![Vec::with_capacity(sample_size); n_blocks];
    for chunk in sample.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let x = g.input(dataset.batch_features(chunk)?);
        let out = model.forward(&mut g, x, Mode::Eval)?;
        let ctx = crate::nn::ForwardCtx::new(&model.params, &model.buffers, Mode::Eval);
        for (l, &node) in out.block_outputs.iter().enumerate() {
            let summand = match &model.glonet_layer {
                Some(layer) => layer.adapted(&mut g, &ctx, l, node)?,
                None => node,
            };
            let v = g.value(summand);
            let cols = v.cols();
            norms[l].extend(v.data().chunks(cols).map(|r| r.iter().map(|x| x.abs()).sum::<f64>()));
        }
    }
    let blocks = norms
        .iter()
        .enumerate()
        .map(|(l, ns)| {
            let n = ns.len() as f64;
            let mean = ns.iter().sum::<f64>() / n;
            let var = ns.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            BlockStat {
                block_index: l + 1,
                l1_mean: mean,
                l1_std: var.sqrt(),
            }
        })
        .collect();
    Ok(BlockProfile { blocks, sample_size })
}

/// Test metric of a GloNet truncated to its first `keep_k` blocks, without
/// retraining. The model is not modified.
pub fn prune_and_eval(model: &Model, keep_k: usize, dataset: &Dataset) -> Result<f64> {
    if model.family() != Family::Glonet {
        return Err(Error::Usage(format!("pruning needs a glonet model, got {}", model.family())));
    }
    evaluate_impl(model, dataset, &dataset.split.test, Some(keep_k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePoint {
    pub keep_k: usize,
    pub test_metric: f64,
}

/// `prune_and_eval` for every `keep_k` in `1..=depth`.
pub fn prune_sweep(model: &Model, dataset: &Dataset) -> Result<Vec<PrunePoint>> {
    (1..=model.num_block_outputs())
        .map(|k| {
            Ok(PrunePoint {
                keep_k: k,
                test_metric: prune_and_eval(model, k, dataset)?,
            })
        })
        .collect()
}

/// Grid of (family, depth, seed) runs sharing one dataset and train config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub families: Vec<Family>,
    pub depths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub width: usize,
    pub train: TrainConfig,
}

/// Outcome of one cell run: its history or the error message.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub family: Family,
    pub depth_blocks: usize,
    pub seed: u64,
    pub outcome: std::result::Result<RunHistory, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub family: Family,
    pub depth_blocks: usize,
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    pub best_test_error_mean: Option<f64>,
    pub best_test_error_std: Option<f64>,
    pub best_test_metric_mean: Option<f64>,
    pub mean_epoch_seconds: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub runs: Vec<CellRun>,
    pub summary: Vec<SummaryRow>,
}

impl SuiteResult {
    pub fn cell(&self, family: Family, depth: usize) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.family == family && r.depth_blocks == depth)
    }
}

/// Model config for one sweep cell on `dataset`.
pub fn cell_config(dataset: &Dataset, family: Family, depth: usize, width: usize, seed: u64) -> ModelConfig {
    let head = match &dataset.targets {
        Targets::Regression { .. } => HeadKind::Regression,
        Targets::Labels { classes, .. } => HeadKind::Classification { classes: *classes },
    };
    ModelConfig::new(family, depth, dataset.input_dim(), head)
        .with_width(width)
        .with_seed(seed)
}

/// Trains one cell exactly as [`compare_suite`] does.
pub fn run_cell(dataset: &Dataset, family: Family, depth: usize, seed: u64, width: usize, train: &TrainConfig) -> Result<(Model, RunHistory)> {
    let mut model = build_model(&cell_config(dataset, family, depth, width, seed))?;
    let cfg = TrainConfig { seed, ..train.clone() };
    let history = train_run(&mut model, dataset, &cfg)?;
    Ok((model, history))
}

/// Trains every (family, depth, seed) combination with up to `jobs` parallel
/// workers. A failing cell is recorded and the sweep continues.
pub fn compare_suite(spec: &SuiteSpec, dataset: &Dataset, jobs: usize) -> SuiteResult {
    let mut cells = Vec::new();
    for &family in &spec.families {
        for &depth in &spec.depths {
            for &seed in &spec.seeds {
                cells.push((family, depth, seed));
            }
        }
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<CellRun>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(family, depth, seed)) = cells.get(i) else { break };
                let outcome = run_cell(dataset, family, depth, seed, spec.width, &spec.train)
                    .map(|(_, h)| h)
                    .map_err(|e| e.to_string());
                slots.lock().unwrap()[i] = Some(CellRun {
                    family,
                    depth_blocks: depth,
                    seed,
                    outcome,
                });
            });
        }
    });
    let runs: Vec<CellRun> = slots.into_inner().unwrap().into_iter().map(|r| r.expect("every cell ran")).collect();

    let mut summary = Vec::new();
    for &family in &spec.families {
        for &depth in &spec.depths {
            let cell: Vec<&CellRun> = runs.iter().filter(|r| r.family == family && r.depth_blocks == depth).collect();
            let ok: Vec<&RunHistory> = cell.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
            let errors: Vec<String> = cell.iter().filter_map(|r| r.outcome.as_ref().err().cloned()).collect();
            let best: Vec<f64> = ok.iter().filter_map(|h| h.best_test_error).collect();
            let metric: Vec<f64> = ok.iter().filter_map(|h| h.best_test_metric()).collect();
            let times: Vec<f64> = ok.iter().filter_map(|h| h.mean_epoch_seconds()).collect();
            summary.push(SummaryRow {
                family,
                depth_blocks: depth,
                seeds_ok: ok.len(),
                seeds_failed: errors.len(),
                best_test_error_mean: mean(&best),
                best_test_error_std: std_dev(&best),
                best_test_metric_mean: mean(&metric),
                mean_epoch_seconds: mean(&times),
                status: if errors.is_empty() { "ok".into() } else { errors.join(" | ") },
            });
        }
    }
    SuiteResult { runs, summary }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn std_dev(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    Some((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt())
}

/// Row of the long-format results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub family: Family,
    pub depth_blocks: usize,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub test_metric: f64,
    pub epoch_seconds: f64,
}

pub fn history_rows(history: &RunHistory) -> Vec<HistoryRow> {
    let m = &history.meta.model;
    history
        .records
        .iter()
        .map(|r| HistoryRow {
            family: m.family,
            depth_blocks: m.depth_blocks,
            seed: history.meta.train.seed,
            epoch: r.epoch,
            train_loss: r.train_loss,
            test_metric: r.test_metric,
            epoch_seconds: r.epoch_seconds,
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_history_csv(path: &Path, histories: &[&RunHistory]) -> Result<()> {
    let rows: Vec<HistoryRow> = histories.iter().flat_map(|h| history_rows(h)).collect();
    if rows.is_empty() {
        // header only
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["family", "depth_blocks", "seed", "epoch", "train_loss", "test_metric", "epoch_seconds"])?;
        w.flush()?;
        return Ok(());
    }
    write_csv(path, &rows)
}

pub fn write_profile_csv(path: &Path, profile: &BlockProfile) -> Result<()> {
    write_csv(path, &profile.blocks)
}

pub fn write_prune_csv(path: &Path, sweep: &[PrunePoint]) -> Result<()> {
    write_csv(path, sweep)
}
