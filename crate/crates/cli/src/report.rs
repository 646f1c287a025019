//! Report documents. A report embeds the full config and the grid
//! conventions, so its numbers are interpretable standalone, and its bytes
//! are a pure function of the config: anything time-dependent goes into the
//! metadata sidecar written next to the report.

use std::fs;
use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use kakeya_core::geom::{ConvexWitness, WitnessShape};

use crate::config::ExperimentConfig;
use crate::formats::{PrismRecord, TubeRecord};

/// Grid and measurement conventions, spelled out in every report.
#[derive(Clone, Debug, Serialize)]
pub struct Conventions {
    pub domain: &'static str,
    pub dilation: &'static str,
    pub covering: &'static str,
    pub distinctness: &'static str,
}

pub const CONVENTIONS: Conventions = Conventions {
    domain: "cube [-1,1]^3, 2^{k+1} cells per axis of side delta = 2^-k; \
             a cell is occupied when its centre passes the membership test",
    dilation: "Chebyshev: the rho-dilation grows ceil(rho/delta) cells per \
               axis and clips at the domain boundary",
    covering: "covering numbers count occupied grid-aligned boxes of dyadic \
               side, from delta up to the full domain",
    distinctness: "tubes are essentially distinct when neither lies in the \
                   2-fold dilate of the other",
};

/// A finished report: config echo, conventions, command-specific results,
/// optional witness, and the overall verdict where the command has one.
#[derive(Debug, Serialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub conventions: Conventions,
    pub results: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub passed: Option<bool>,
}

impl Report {
    pub fn new(config: &ExperimentConfig, results: Value) -> Self {
        Report {
            config: config.clone(),
            conventions: CONVENTIONS,
            results,
            witness: None,
            passed: None,
        }
    }

    pub fn with_witness(mut self, witness: Value) -> Self {
        self.witness = Some(witness);
        self
    }

    pub fn with_verdict(mut self, passed: bool) -> Self {
        self.passed = Some(passed);
        self
    }

    /// Serialize to the output path. Bytes depend only on the contents;
    /// `serde_json` maps are ordered, and no clock is consulted here.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self).context("serializing report")?;
        bytes.push(b'\n');
        fs::write(path, bytes)
            .with_context(|| format!("cannot write report {}", path.display()))?;
        Ok(())
    }
}

/// Serialize a convex witness as plain coordinates.
pub fn witness_value(w: &ConvexWitness) -> Value {
    let shape = match w.shape() {
        WitnessShape::Tube(t) => json!({ "tube": TubeRecord::from_tube(t) }),
        WitnessShape::Prism(p) => json!({ "prism": PrismRecord::from_prism(p) }),
        WitnessShape::Ball { center, radius } => json!({
            "ball": { "center": [center.x, center.y, center.z], "radius": radius }
        }),
    };
    json!({ "shape": shape, "volume": w.volume() })
}

/// Write the `<out>.meta.json` sidecar holding everything time-dependent.
pub fn write_metadata(out: &Path, wall: Duration) -> Result<()> {
    let meta_path = sidecar_path(out);
    let created = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let doc = json!({
        "created_unix": created,
        "wall_seconds": wall.as_secs_f64(),
        "report": out.display().to_string(),
    });
    let mut bytes = serde_json::to_vec_pretty(&doc).context("serializing metadata")?;
    bytes.push(b'\n');
    fs::write(&meta_path, bytes)
        .with_context(|| format!("cannot write metadata {}", meta_path.display()))?;
    Ok(())
}

pub fn sidecar_path(out: &Path) -> std::path::PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    out.with_file_name(name)
}
