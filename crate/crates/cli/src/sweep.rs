//! Batch sweeps: run a homogeneous list of experiment configs, tabulate one
//! CSV row per config, and keep the table order-stable regardless of how
//! the sub-runs are scheduled.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::run::{run, RunOutcome};

const CSV_HEADER: [&str; 8] = [
    "command",
    "kind",
    "delta",
    "seed",
    "constant",
    "exponent",
    "status",
    "wall_seconds",
];

struct Row {
    outcome: RunOutcome,
    command: String,
    seed: u64,
    wall_seconds: f64,
}

/// Run every config and write the aggregated CSV. Returns the sweep's exit
/// code: 0 on completion (failed checks are recorded as rows, not fatal);
/// unusable configs or inputs surface as `Err`, which the caller maps to 2.
pub fn sweep(configs_path: &Path, out_csv: &Path) -> Result<i32> {
    let f = File::open(configs_path)
        .with_context(|| format!("cannot open sweep file {}", configs_path.display()))?;
    let configs: Vec<ExperimentConfig> =
        serde_json::from_reader(BufReader::new(f)).context("parsing sweep configs")?;

    let mut writer = csv::Writer::from_path(out_csv)
        .with_context(|| format!("cannot create sweep table {}", out_csv.display()))?;
    writer.write_record(CSV_HEADER).context("writing CSV header")?;

    if configs.is_empty() {
        writer.flush().context("flushing CSV")?;
        return Ok(0);
    }

    let command = configs[0].command;
    if configs.iter().any(|c| c.command != command) {
        return Err(anyhow!("sweep configs must share one command"));
    }
    for (i, cfg) in configs.iter().enumerate() {
        cfg.validate()
            .map_err(|e| anyhow!("sweep config #{i}: {e}"))?;
    }

    // Sub-runs are independent; any unusable input aborts the whole sweep.
    let mut rows: Vec<Row> = configs
        .par_iter()
        .map(|cfg| {
            let t0 = Instant::now();
            let outcome = run(cfg)?;
            Ok(Row {
                outcome,
                command: cfg.command.to_string(),
                seed: cfg.seed,
                wall_seconds: t0.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    rows.sort_by(|a, b| {
        (a.outcome.kind.as_str(), a.outcome.delta)
            .partial_cmp(&(b.outcome.kind.as_str(), b.outcome.delta))
            .expect("finite sort keys")
    });

    for row in &rows {
        let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        writer
            .write_record([
                row.command.as_str(),
                row.outcome.kind.as_str(),
                &format!("{}", row.outcome.delta),
                &format!("{}", row.seed),
                &fmt_opt(row.outcome.constant),
                &fmt_opt(row.outcome.exponent),
                row.outcome.status.as_str(),
                &format!("{:.3}", row.wall_seconds),
            ])
            .context("writing CSV row")?;
    }
    writer.flush().context("flushing CSV")?;
    Ok(0)
}
