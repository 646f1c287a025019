//! On-disk formats: the family JSON file and helpers for voxel containers.
//!
//! The family file stores plain coordinate arrays; loading reconstructs the
//! solids through the validating constructors, so a hand-edited file that
//! breaks an invariant (non-unit direction, out-of-range radius, skewed
//! frame) is rejected as malformed input rather than silently accepted.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};

use kakeya_core::geom::{Prism, Solid, Tube, Vec3};
use kakeya_core::voxel::{VoxelSet, VoxelSet2};

use crate::config::ExperimentConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TubeRecord {
    pub anchor: [f64; 3],
    pub dir: [f64; 3],
    pub radius: f64,
    pub length: f64,
}

impl TubeRecord {
    pub fn from_tube(t: &Tube) -> Self {
        TubeRecord {
            anchor: t.anchor().into(),
            dir: t.dir().into(),
            radius: t.radius(),
            length: t.length(),
        }
    }

    pub fn to_tube(&self) -> Result<Tube> {
        Tube::with_length(
            Vec3::from(self.anchor),
            Vec3::from(self.dir),
            self.radius,
            self.length,
        )
        .map_err(|e| anyhow!("invalid tube record: {e}"))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrismRecord {
    pub center: [f64; 3],
    pub frame: [[f64; 3]; 3],
    pub half_dims: [f64; 3],
}

impl PrismRecord {
    pub fn from_prism(p: &Prism) -> Self {
        let f = p.frame();
        PrismRecord {
            center: p.center().into(),
            frame: [f[0].into(), f[1].into(), f[2].into()],
            half_dims: p.half_dims(),
        }
    }

    pub fn to_prism(&self) -> Result<Prism> {
        Prism::from_half_dims(
            Vec3::from(self.center),
            [
                Vec3::from(self.frame[0]),
                Vec3::from(self.frame[1]),
                Vec3::from(self.frame[2]),
            ],
            self.half_dims,
        )
        .map_err(|e| anyhow!("invalid prism record: {e}"))
    }
}

/// A family of solids on disk, together with the config that produced it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FamilyFile {
    /// Format tag, bumped on incompatible changes.
    pub format: String,
    /// Construction name, carried into sweep rows.
    pub kind: String,
    pub delta: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tubes: Vec<TubeRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prisms: Vec<PrismRecord>,
    /// The generating config, embedded so the file is reproducible
    /// standalone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ExperimentConfig>,
}

pub const FAMILY_FORMAT: &str = "kakeya-family/1";

/// A family reconstructed through the validating constructors.
pub struct LoadedFamily {
    pub kind: String,
    pub delta: f64,
    pub tubes: Vec<Tube>,
    pub prisms: Vec<Prism>,
}

impl LoadedFamily {
    pub fn solids(&self) -> Vec<Solid> {
        self.tubes
            .iter()
            .cloned()
            .map(Solid::Tube)
            .chain(self.prisms.iter().cloned().map(Solid::Prism))
            .collect()
    }
}

pub fn save_family(path: &Path, file: &FamilyFile) -> Result<()> {
    let out = File::create(path)
        .with_context(|| format!("cannot create family file {}", path.display()))?;
    let mut w = BufWriter::new(out);
    serde_json::to_writer_pretty(&mut w, file).context("writing family JSON")?;
    Ok(())
}

pub fn load_family(path: &Path) -> Result<LoadedFamily> {
    let f = File::open(path)
        .with_context(|| format!("cannot open family file {}", path.display()))?;
    let file: FamilyFile =
        serde_json::from_reader(BufReader::new(f)).context("parsing family JSON")?;
    if file.format != FAMILY_FORMAT {
        return Err(anyhow!(
            "unsupported family format {:?} (expected {FAMILY_FORMAT:?})",
            file.format
        ));
    }
    if !(file.delta.is_finite() && file.delta > 0.0) {
        return Err(anyhow!("family scale must be positive (got {})", file.delta));
    }
    if file.tubes.is_empty() && file.prisms.is_empty() {
        return Err(anyhow!("family file holds no solids"));
    }
    let tubes = file
        .tubes
        .iter()
        .map(TubeRecord::to_tube)
        .collect::<Result<Vec<_>>>()?;
    let prisms = file
        .prisms
        .iter()
        .map(PrismRecord::to_prism)
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedFamily {
        kind: file.kind,
        delta: file.delta,
        tubes,
        prisms,
    })
}

pub fn save_voxels(path: &Path, set: &VoxelSet) -> Result<()> {
    let out = File::create(path)
        .with_context(|| format!("cannot create voxel file {}", path.display()))?;
    let mut w = BufWriter::new(out);
    set.write_to(&mut w).context("writing voxel container")?;
    Ok(())
}

pub fn load_voxels(path: &Path) -> Result<VoxelSet> {
    let f = File::open(path)
        .with_context(|| format!("cannot open voxel file {}", path.display()))?;
    VoxelSet::read_from(&mut BufReader::new(f)).context("parsing voxel container")
}

pub fn save_voxels_2d(path: &Path, set: &VoxelSet2) -> Result<()> {
    let out = File::create(path)
        .with_context(|| format!("cannot create voxel file {}", path.display()))?;
    let mut w = BufWriter::new(out);
    set.write_to(&mut w).context("writing voxel container")?;
    Ok(())
}
