//! SVG rendering of the CSV artifacts, dispatched on the header row.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use glonet::plot::{self, Chart, Series};
use glonet::train::{read_csv, BlockProfile, BlockStat, HistoryRow, PrunePoint, SummaryRow};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    History,
    Summary,
    Profile,
    Prune,
}

fn detect(header: &csv::StringRecord) -> Option<Kind> {
    let has = |c: &str| header.iter().any(|h| h == c);
    if has("epoch") && has("test_metric") {
        Some(Kind::History)
    } else if has("best_test_error_mean") {
        Some(Kind::Summary)
    } else if has("l1_mean") {
        Some(Kind::Profile)
    } else if has("keep_k") {
        Some(Kind::Prune)
    } else {
        None
    }
}

pub fn plot(csv_path: &Path, out: Option<PathBuf>, title: Option<String>) -> Result<(), CliError> {
    let header = csv::Reader::from_path(csv_path)
        .and_then(|mut r| r.headers().cloned())
        .map_err(glonet::Error::from)?;
    let kind = detect(&header).ok_or_else(|| {
        CliError::Validation(format!(
            "{}: unrecognized CSV columns {:?}",
            csv_path.display(),
            header.iter().collect::<Vec<_>>()
        ))
    })?;
    let title = title.unwrap_or_else(|| {
        csv_path
            .file_stem()
            .map_or("plot".into(), |s| s.to_string_lossy().into_owned())
    });
    let chart = match kind {
        Kind::History => history_chart(&title, &read_csv(csv_path)?),
        Kind::Summary => summary_chart(&title, &read_csv(csv_path)?),
        Kind::Profile => {
            let blocks: Vec<BlockStat> = read_csv(csv_path)?;
            plot::profile_chart(&title, &BlockProfile { blocks, sample_size: 0 })
        }
        Kind::Prune => {
            let sweep: Vec<PrunePoint> = read_csv(csv_path)?;
            plot::prune_chart(&title, &sweep, "test metric")
        }
    };
    let out = out.unwrap_or_else(|| csv_path.with_extension("svg"));
    chart.save(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn history_chart(title: &str, rows: &[HistoryRow]) -> Chart {
    let mut runs: BTreeMap<(String, usize, u64), Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        runs.entry((r.family.to_string(), r.depth_blocks, r.seed))
            .or_default()
            .push((r.epoch as f64, r.test_metric));
    }
    let mut chart = Chart::new(title, "epoch", "test metric");
    for ((family, depth, seed), pts) in runs {
        chart.series.push(Series::new(format!("{family} d={depth} s={seed}"), pts));
    }
    chart
}

/// Mean best test error against depth, one series per family.
fn summary_chart(title: &str, rows: &[SummaryRow]) -> Chart {
    let mut families: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        if let Some(e) = r.best_test_error_mean {
            families
                .entry(r.family.to_string())
                .or_default()
                .push((r.depth_blocks as f64, e));
        }
    }
    let mut chart = Chart::new(title, "depth (blocks)", "best test error").log_y(true);
    for (family, mut pts) in families {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        chart.series.push(Series::new(family, pts));
    }
    chart
}
