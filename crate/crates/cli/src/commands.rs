use std::path::{Path, PathBuf};

use glonet::data::Dataset;
use glonet::plot;
use glonet::train::{self, commit_id, Metric, RunHistory, RunMeta, SuiteSpec};
use glonet::{build_model, Family, Model};
use serde::Serialize;

use crate::spec::{ExperimentSpec, Overrides};
use crate::CliError;

const DEFAULT_PROFILE_SAMPLE: usize = 5000;

/// Contents of `metadata.json` (train, sweep) or `<command>_metadata.json`
/// (profile, prune) in every artifact directory.
#[derive(Debug, Serialize)]
struct Metadata<'a> {
    command: &'a str,
    spec: &'a ExperimentSpec,
    seeds: &'a [u64],
    crate_version: &'static str,
    commit: String,
    threads: usize,
    dataset: DatasetInfo<'a>,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint: Option<&'a Path>,
    runs: Vec<&'a RunMeta>,
}

#[derive(Debug, Serialize)]
struct DatasetInfo<'a> {
    source: &'a str,
    rows: usize,
    train_rows: usize,
    test_rows: usize,
    checksum: Option<&'a str>,
    preprocessing: &'a [String],
}

impl<'a> Metadata<'a> {
    fn new(command: &'a str, spec: &'a ExperimentSpec, dataset: &'a Dataset, threads: usize) -> Self {
        Self {
            command,
            spec,
            seeds: &spec.seeds,
            crate_version: env!("CARGO_PKG_VERSION"),
            commit: commit_id(),
            threads,
            dataset: DatasetInfo {
                source: &dataset.meta.source,
                rows: dataset.len(),
                train_rows: dataset.split.train.len(),
                test_rows: dataset.split.test.len(),
                checksum: dataset.meta.checksum.as_deref(),
                preprocessing: &dataset.meta.preprocessing,
            },
            checkpoint: None,
            runs: Vec::new(),
        }
    }

    fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(glonet::Error::from)?;
        let name = match self.command {
            "train" | "sweep" => "metadata.json".to_string(),
            other => format!("{other}_metadata.json"),
        };
        std::fs::write(dir.join(name), text).map_err(glonet::Error::from)?;
        Ok(())
    }
}

fn prepare(spec_path: &Path, overrides: &Overrides) -> Result<(ExperimentSpec, Dataset), CliError> {
    let spec = ExperimentSpec::load(spec_path, overrides)?;
    spec.validate()?;
    let dataset = spec.dataset.load()?;
    Ok((spec, dataset))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Lib(e.into()))
}

fn metric_label(metric: Metric) -> &'static str {
    match metric {
        Metric::Mse => "test MSE",
        Metric::Accuracy => "test accuracy",
    }
}

pub fn train(spec_path: &Path, overrides: &Overrides, quiet: bool) -> Result<(), CliError> {
    let (spec, dataset) = prepare(spec_path, overrides)?;
    let out = &spec.output_dir;
    create_dir(out)?;
    let mut histories = Vec::new();
    for &seed in &spec.seeds {
        let mut model = build_model(&spec.model_config(&dataset, seed))?;
        let cfg = glonet::TrainConfig { seed, ..spec.train.clone() };
        let history = train::train_run_with(&mut model, &dataset, &cfg, |r| {
            if !quiet {
                eprintln!(
                    "seed {seed} epoch {:>4}  loss {:.6}  test {:.6}  {:.2}s",
                    r.epoch, r.train_loss, r.test_metric, r.epoch_seconds
                );
            }
        })
        .map_err(|e| e.with_context(format!("seed {seed}")))?;
        model.save(&out.join(format!("checkpoint_seed{seed}.json")))?;
        histories.push(history);
    }
    let refs: Vec<&RunHistory> = histories.iter().collect();
    train::write_history_csv(&out.join("history.csv"), &refs)?;
    let title = format!("{} depth {}", spec.model.family, spec.model.depth_blocks);
    plot::learning_curves(&title, &refs).save(&out.join("learning_curve.svg"))?;
    let mut meta = Metadata::new("train", &spec, &dataset, 1);
    meta.runs = histories.iter().map(|h| &h.meta).collect();
    meta.write(out)?;
    for h in &histories {
        println!(
            "seed {}: best {} {}",
            h.meta.train.seed,
            metric_label(h.meta.metric),
            h.best_test_metric().map_or("n/a".into(), |v| format!("{v:.6}"))
        );
    }
    Ok(())
}

pub fn sweep(spec_path: &Path, overrides: &Overrides, jobs: usize, quiet: bool) -> Result<(), CliError> {
    let (spec, dataset) = prepare(spec_path, overrides)?;
    let Some(grid) = &spec.sweep else {
        return Err(CliError::Validation("sweep: missing; list families and depths to sweep".into()));
    };
    if jobs == 0 {
        return Err(CliError::Validation("--jobs must be positive".into()));
    }
    let out = &spec.output_dir;
    create_dir(out)?;
    let suite = SuiteSpec {
        families: grid.families.clone(),
        depths: grid.depths.clone(),
        seeds: spec.seeds.clone(),
        width: spec.model.width,
        train: spec.train.clone(),
    };
    if !quiet {
        eprintln!(
            "sweeping {} cells × {} seeds with {jobs} worker(s)",
            grid.families.len() * grid.depths.len(),
            spec.seeds.len()
        );
    }
    let result = train::compare_suite(&suite, &dataset, jobs);
    train::write_csv(&out.join("summary.csv"), &result.summary)?;
    let ok: Vec<&RunHistory> = result.runs.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
    train::write_history_csv(&out.join("history.csv"), &ok)?;
    for &depth in &grid.depths {
        let at_depth: Vec<&RunHistory> = ok.iter().copied().filter(|h| h.meta.model.depth_blocks == depth).collect();
        if !at_depth.is_empty() {
            plot::learning_curves(&format!("depth {depth}"), &at_depth)
                .save(&out.join(format!("learning_curves_depth{depth}.svg")))?;
        }
    }
    let mut meta = Metadata::new("sweep", &spec, &dataset, jobs);
    meta.runs = ok.iter().map(|h| &h.meta).collect();
    meta.write(out)?;

    for row in &result.summary {
        println!(
            "{:<15} depth {:>4}  best error {}  ({} ok, {} failed)",
            row.family.as_str(),
            row.depth_blocks,
            row.best_test_error_mean.map_or("n/a".into(), |v| format!("{v:.6}")),
            row.seeds_ok,
            row.seeds_failed
        );
    }
    let failures: Vec<String> = result
        .runs
        .iter()
        .filter_map(|r| {
            r.outcome
                .as_ref()
                .err()
                .map(|e| format!("{} depth {} seed {}: {e}", r.family, r.depth_blocks, r.seed))
        })
        .collect();
    if failures.is_empty() {
        Ok(())
    } else {
        // Cells are pre-validated, so a failing cell faulted at run time.
        Err(glonet::Error::NumericFault(failures.join("; ")).into())
    }
}

/// Loads a checkpoint and checks it against the spec's dataset.
fn checkpoint_for(path: &Path, dataset: &Dataset) -> Result<Model, CliError> {
    let model = Model::load(path)?;
    let cfg = &model.config;
    if cfg.input_dim != dataset.input_dim() {
        return Err(CliError::Validation(format!(
            "checkpoint {} expects {} input features, dataset has {}",
            path.display(),
            cfg.input_dim,
            dataset.input_dim()
        )));
    }
    let head_ok = match cfg.head {
        glonet::HeadKind::Regression => !dataset.is_classification(),
        glonet::HeadKind::Classification { classes } => {
            matches!(dataset.targets, glonet::data::Targets::Labels { classes: c, .. } if c == classes)
        }
    };
    if !head_ok {
        return Err(CliError::Validation(format!(
            "checkpoint {} head {:?} does not match the dataset targets",
            path.display(),
            cfg.head
        )));
    }
    Ok(model)
}

fn analysis_dir(spec: &ExperimentSpec, out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let dir = out.unwrap_or_else(|| spec.output_dir.clone());
    create_dir(&dir)?;
    Ok(dir)
}

pub fn profile(spec_path: &Path, checkpoint: &Path, sample_size: Option<usize>, out: Option<PathBuf>) -> Result<(), CliError> {
    let (spec, dataset) = prepare(spec_path, &Overrides::default())?;
    let model = checkpoint_for(checkpoint, &dataset)?;
    let n = sample_size.unwrap_or_else(|| DEFAULT_PROFILE_SAMPLE.min(dataset.split.test.len()));
    let profile = train::profile_blocks(&model, &dataset, n)?;
    let dir = analysis_dir(&spec, out)?;
    train::write_profile_csv(&dir.join("profile.csv"), &profile)?;
    let title = format!("{} depth {} block outputs", model.family(), model.config.depth_blocks);
    plot::profile_chart(&title, &profile).save(&dir.join("profile.svg"))?;
    let mut meta = Metadata::new("profile", &spec, &dataset, 1);
    meta.checkpoint = Some(checkpoint);
    meta.write(&dir)?;
    let k = profile.blocks.len().div_ceil(5);
    println!(
        "{} blocks, {} samples; first {k} blocks hold {:.1}% of the L1 mass",
        profile.blocks.len(),
        profile.sample_size,
        100.0 * profile.head_fraction(k)
    );
    Ok(())
}

pub fn prune(spec_path: &Path, checkpoint: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let (spec, dataset) = prepare(spec_path, &Overrides::default())?;
    let model = checkpoint_for(checkpoint, &dataset)?;
    if model.family() != Family::Glonet {
        return Err(CliError::Validation(format!(
            "prune needs a glonet checkpoint, {} is {}",
            checkpoint.display(),
            model.family()
        )));
    }
    let sweep = train::prune_sweep(&model, &dataset)?;
    let dir = analysis_dir(&spec, out)?;
    train::write_prune_csv(&dir.join("prune.csv"), &sweep)?;
    let metric = Metric::for_head(model.config.head);
    let title = format!("glonet depth {} truncated", model.config.depth_blocks);
    plot::prune_chart(&title, &sweep, metric_label(metric)).save(&dir.join("prune.svg"))?;
    let mut meta = Metadata::new("prune", &spec, &dataset, 1);
    meta.checkpoint = Some(checkpoint);
    meta.write(&dir)?;
    for p in &sweep {
        println!("keep {:>4}: {:.6}", p.keep_k, p.test_metric);
    }
    Ok(())
}
