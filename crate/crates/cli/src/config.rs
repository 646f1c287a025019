//! Experiment configuration: the single description of a run that is parsed
//! from flags or a sweep file, validated once, embedded verbatim in every
//! report, and sufficient to reproduce the run byte-for-byte.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

/// Which experiment to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    Generate,
    Check,
    Assouad,
    TwoScale,
    PrismDichotomy,
    Project,
}

impl fmt::Display for CommandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CommandKind::Generate => "generate",
            CommandKind::Check => "check",
            CommandKind::Assouad => "assouad",
            CommandKind::TwoScale => "two-scale",
            CommandKind::PrismDichotomy => "prism-dichotomy",
            CommandKind::Project => "project",
        };
        f.write_str(s)
    }
}

/// Family constructions the `generate` command offers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    DirectionSeparated,
    Coplanar,
    Sticky,
    PrismClustered,
    RandomLines,
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FamilyKind::DirectionSeparated => "direction-separated",
            FamilyKind::Coplanar => "coplanar",
            FamilyKind::Sticky => "sticky",
            FamilyKind::PrismClustered => "prism-clustered",
            FamilyKind::RandomLines => "random-lines",
        };
        f.write_str(s)
    }
}

/// Non-concentration measurements the `check` command offers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AxiomKind {
    ConvexWolff,
    EveryScale,
    SelfSimilar,
}

impl fmt::Display for AxiomKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AxiomKind::ConvexWolff => "convex-wolff",
            AxiomKind::EveryScale => "every-scale",
            AxiomKind::SelfSimilar => "self-similar",
        };
        f.write_str(s)
    }
}

/// A fully described experiment. Optional fields apply only to some
/// commands; [`ExperimentConfig::validate`] enforces the per-command rules.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: CommandKind,
    /// Construction to generate (required by `generate`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<FamilyKind>,
    /// Input family file (JSON).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<PathBuf>,
    /// Input voxel file (KVOX), accepted by `assouad` instead of a family.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voxels: Option<PathBuf>,
    /// Primary output path (family JSON for `generate`, report JSON
    /// otherwise). A metadata sidecar is written next to it.
    pub out: PathBuf,
    /// Grid exponent `k`, for `δ = 2^-k`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<u32>,
    #[serde(default)]
    pub seed: u64,
    /// Density/dichotomy exponent ε.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    /// Minimal scale separation `A` for density scans.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_sep: Option<f64>,
    /// Pass/fail budget for the measured constant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// Measurement run by `check`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axiom: Option<AxiomKind>,
    /// Tree branching factor (`generate --kind sticky`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branching: Option<u32>,
    /// Member count (`generate --kind random-lines` and `prism-clustered`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<u32>,
    /// Prism cross-section `s × t` (`generate --kind prism-clustered`),
    /// in units of δ for `s` and absolute for `t`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tside: Option<f64>,
    /// Slope-function coefficients `f(z) = a + b·z + c·z²` (`project`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope: Option<[f64; 3]>,
    /// Optional binary artifact: rasterized union for `generate`, projected
    /// plane set for `project`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub save_voxels: Option<PathBuf>,
    /// Optional JSON-lines trace (`prism-dichotomy`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Enforce the config invariants: thresholds positive, required paths
    /// present and non-empty, command-specific fields supplied.
    pub fn validate(&self) -> Result<(), String> {
        if self.out.as_os_str().is_empty() {
            return Err("output path must be non-empty".into());
        }
        for (name, value) in [
            ("eps", self.eps),
            ("min-sep", self.min_sep),
            ("threshold", self.threshold),
        ] {
            if let Some(v) = value {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(format!("{name} must be positive and finite (got {v})"));
                }
            }
        }
        if let Some(p) = &self.family {
            if p.as_os_str().is_empty() {
                return Err("family path must be non-empty".into());
            }
        }
        match self.command {
            CommandKind::Generate => {
                if self.kind.is_none() {
                    return Err("generate needs --kind".into());
                }
                if self.scale.is_none() {
                    return Err("generate needs --scale".into());
                }
            }
            CommandKind::Check => {
                if self.family.is_none() {
                    return Err("check needs --family".into());
                }
                if self.axiom.is_none() {
                    return Err("check needs --axiom".into());
                }
            }
            CommandKind::Assouad => {
                if self.family.is_none() == self.voxels.is_none() {
                    return Err("assouad needs exactly one of --family or --voxels".into());
                }
            }
            CommandKind::TwoScale => {
                if self.family.is_none() {
                    return Err("two-scale needs --family".into());
                }
            }
            CommandKind::PrismDichotomy => {
                if self.family.is_none() {
                    return Err("prism-dichotomy needs --family".into());
                }
                if self.eps.is_none() {
                    return Err("prism-dichotomy needs --eps".into());
                }
            }
            CommandKind::Project => {
                if self.family.is_none() {
                    return Err("project needs --family".into());
                }
            }
        }
        Ok(())
    }
}
