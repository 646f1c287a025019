//! The prism laboratory: overlap energy, angular spread fields, heavy
//! rectangles, tube-to-prism clustering, and the coarsening dichotomy.
//!
//! Everything here operates on shaded families. [`l2_overlap`] is the
//! square-function energy `‖Σ χ_R‖₂²` that powers Cauchy–Schwarz lower
//! bounds on union volumes; [`spread_field`] measures how much the members
//! through each cell disagree in orientation; [`detect_heavy`] finds
//! oriented boxes holding more tubes than non-concentration permits, and
//! [`cluster_into_prisms`] converts one such crowded host into a bounded
//! catalog of width-`ω` prisms. [`coarsen_step`] is the engine of the
//! dichotomy: a family of `s×t×1` prisms either exhibits a ball with a small
//! density exponent (branch A) or coarsens to an `s′×t′×1` family on
//! strictly larger scales (branch B), with every pigeonhole loss recorded.
//! [`prism_dichotomy`] iterates the step and [`four_way_classify`] composes
//! the pieces into the one-shot experiment: dense ball, spread family,
//! tube-concentrated, or rich at a coarse scale.

use rayon::prelude::*;
use serde::Serialize;

use crate::assouad::{assouad_scan, best_ball_zeta, zeta, ScanResult};
use crate::axioms::{
    check_essentially_distinct, convex_wolff_error, convex_wolff_error_mixed,
    scan_anchor_indices, CatalogConfig,
};
use crate::error::{LabError, Result};
use crate::geom::{
    essentially_distinct_prisms, orthonormal_complement, prism_in_prism, tube_in_witness, Prism,
    Solid, Tube, TubeFamily, Vec3, WitnessShape,
};
use crate::shading::{pigeonhole_uniform, LabSolid, MultiplicityField, Shaded, ShadedFamily};
use crate::voxel::{CellSet, GridScale, VoxelSet};

// ---------------------------------------------------------------------------
// L² overlap energy
// ---------------------------------------------------------------------------

/// Pairwise overlap energy `Σ_{R,R′} |R ∩ R′|` over all ordered member pairs
/// (each member also paired with itself), in physical volume.
///
/// Equals `Σ_x m(x)²·δ³` for the rasterisation multiplicity `m`, so a
/// pairwise-disjoint family contributes exactly its total volume and a
/// duplicated member quadruples its own share. Together with
/// `(Σ|Y(R)|)² ≤ |⋃Y(R)| · Σ_{R,R′}|R ∩ R′|` (Cauchy–Schwarz, exact in cell
/// counts) this lower-bounds the union volume of any shading.
pub fn l2_overlap<S: LabSolid>(family: &ShadedFamily<S>) -> f64 {
    let scale = family.scale();
    let mult =
        MultiplicityField::from_shadings(scale, family.items().iter().map(|item| item.cells()));
    let sum_sq: u64 = mult
        .entries()
        .iter()
        .map(|&(_, m)| u64::from(m) * u64::from(m))
        .sum();
    sum_sq as f64 * scale.delta().powi(3)
}

// ---------------------------------------------------------------------------
// Spread fields
// ---------------------------------------------------------------------------

/// Which orientation a spread field compares across members.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SpreadKind {
    /// Angles between prism plane normals (the thin-axis directions).
    PlaneSpread,
    /// Angles between long-axis directions.
    LineSpread,
}

/// Per-cell maximal pairwise angle, in `[0, π/2]`, among the members whose
/// shading meets the cell. Cells met by at most one member spread nothing
/// and are not stored.
#[derive(Clone, Debug)]
pub struct SpreadField {
    kind: SpreadKind,
    scale: GridScale,
    values: Vec<(u32, f64)>,
    threshold_meaningful: f64,
}

impl SpreadField {
    pub fn kind(&self) -> SpreadKind {
        self.kind
    }

    pub fn scale(&self) -> GridScale {
        self.scale
    }

    /// `(cell, angle)` entries for every multiply-covered cell, cell-sorted.
    pub fn entries(&self) -> &[(u32, f64)] {
        &self.values
    }

    /// Spread at one cell (zero off the stored support).
    pub fn get(&self, cell: u32) -> f64 {
        match self.values.binary_search_by_key(&cell, |e| e.0) {
            Ok(i) => self.values[i].1,
            Err(_) => 0.0,
        }
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().map(|e| e.1).fold(0.0, f64::max)
    }

    /// Angles below this are within the members' own geometric slack —
    /// aspect ratio `s/t` for plane spread, width `t` for line spread — and
    /// carry no directional information.
    pub fn threshold_meaningful(&self) -> f64 {
        self.threshold_meaningful
    }
}

/// Unsigned angle between two lines (orientation-blind), in `[0, π/2]`.
fn line_angle(a: &Vec3, b: &Vec3) -> f64 {
    a.dot(b).abs().clamp(0.0, 1.0).acos()
}

/// Sorted `(cell, member)` incidence pairs plus the run bounds of each cell.
fn incidence_runs(sets: &[&CellSet]) -> (Vec<(u32, u32)>, Vec<(usize, usize)>) {
    let mut pairs: Vec<(u32, u32)> = Vec::new();
    for (m, set) in sets.iter().enumerate() {
        pairs.extend(set.indices().iter().map(|&c| (c, m as u32)));
    }
    pairs.par_sort_unstable();
    let mut bounds: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        bounds.push((i, j));
        i = j;
    }
    (pairs, bounds)
}

/// Per-cell max pairwise angle over cells covered by ≥ 2 members.
fn pairwise_max_angles(sets: &[&CellSet], dirs: &[Vec3]) -> Vec<(u32, f64)> {
    let (pairs, bounds) = incidence_runs(sets);
    bounds
        .par_iter()
        .filter_map(|&(lo, hi)| {
            if hi - lo < 2 {
                return None;
            }
            let mut worst = 0.0f64;
            for i in lo..hi {
                let di = &dirs[pairs[i].1 as usize];
                for p in &pairs[(i + 1)..hi] {
                    let a = line_angle(di, &dirs[p.1 as usize]);
                    if a > worst {
                        worst = a;
                    }
                }
            }
            Some((pairs[lo].0, worst))
        })
        .collect()
}

/// Per-member max angle against any other member sharing a cell with it.
fn member_max_angles(n: usize, sets: &[&CellSet], dirs: &[Vec3]) -> Vec<f64> {
    let (pairs, bounds) = incidence_runs(sets);
    let per_run: Vec<Vec<(u32, f64)>> = bounds
        .par_iter()
        .filter_map(|&(lo, hi)| {
            if hi - lo < 2 {
                return None;
            }
            let run = &pairs[lo..hi];
            let local: Vec<(u32, f64)> = run
                .iter()
                .map(|&(_, mi)| {
                    let worst = run
                        .iter()
                        .filter(|&&(_, mj)| mj != mi)
                        .map(|&(_, mj)| line_angle(&dirs[mi as usize], &dirs[mj as usize]))
                        .fold(0.0, f64::max);
                    (mi, worst)
                })
                .collect();
            Some(local)
        })
        .collect();
    let mut spread = vec![0.0f64; n];
    for run in per_run {
        for (m, a) in run {
            let slot = &mut spread[m as usize];
            if a > *slot {
                *slot = a;
            }
        }
    }
    spread
}

/// Spread field of a prism family over its shading: at each cell, the
/// largest pairwise angle between the chosen orientation vectors of the
/// members whose shading covers the cell.
pub fn spread_field(family: &ShadedFamily<Prism>, kind: SpreadKind) -> SpreadField {
    let dirs: Vec<Vec3> = family
        .items()
        .iter()
        .map(|it| match kind {
            SpreadKind::PlaneSpread => it.solid().plane_normal(),
            SpreadKind::LineSpread => it.solid().line_dir(),
        })
        .collect();
    let sets: Vec<&CellSet> = family.items().iter().map(|it| it.shading()).collect();
    let values = pairwise_max_angles(&sets, &dirs);
    let threshold_meaningful = family
        .items()
        .iter()
        .map(|it| {
            let d = it.solid().dims();
            match kind {
                SpreadKind::PlaneSpread => d[0] / d[1],
                SpreadKind::LineSpread => d[1],
            }
        })
        .fold(0.0, f64::max);
    SpreadField {
        kind,
        scale: family.scale(),
        values,
        threshold_meaningful,
    }
}

// ---------------------------------------------------------------------------
// Heavy rectangles
// ---------------------------------------------------------------------------

/// A `2δ × 2ρ × 2` oriented box holding more member tubes than the
/// non-concentration threshold `δ^{-ε}·(ρ/δ)` allows.
#[derive(Clone, Debug)]
pub struct HeavyRectangle {
    pub prism: Prism,
    /// Members fully inside the box.
    pub count: usize,
    /// The bound `count` strictly exceeds.
    pub threshold: f64,
    /// Width scale: the middle dimension of the box is `2ρ`.
    pub rho: f64,
    /// Indices of the contained members.
    pub members: Vec<usize>,
}

/// Outcome of [`detect_heavy`].
#[derive(Clone, Debug)]
pub struct HeavyReport {
    /// Greedily selected rectangles, heaviest first; each one covers at
    /// least one member no earlier rectangle covers.
    pub rectangles: Vec<HeavyRectangle>,
    /// Fraction of the family inside at least one reported rectangle.
    pub heavy_fraction: f64,
    /// At least half the family sits on the reported rectangles.
    pub concentrated: bool,
}

struct HeavyCandidate {
    count: usize,
    rho: f64,
    anchor: usize,
    orient: usize,
    threshold: f64,
    members: Vec<usize>,
    prism: Prism,
}

/// Scan a catalog of `2δ×2ρ×2` boxes (anchored at member midpoints, long
/// axis along the anchor member, wide axis swept over a half-turn) for boxes
/// whose tube count strictly exceeds `δ^{-ε}·(ρ/δ)`, then greedily keep the
/// heaviest rectangles that still cover new members.
///
/// The report answers the concentration dichotomy: either at least half the
/// family lives on heavy rectangles (`concentrated`), or the majority avoids
/// every box the catalog can see.
pub fn detect_heavy(family: &TubeFamily, eps: f64) -> Result<HeavyReport> {
    if !(eps >= 0.0) {
        return Err(LabError::HypothesisViolated(format!(
            "heavy-rectangle exponent must be nonnegative (got {eps})"
        )));
    }
    check_essentially_distinct(family)?;
    let delta = family.delta();
    let tubes = family.tubes();
    let n = tubes.len();
    let cfg = CatalogConfig::default().with_max_anchors(256);
    let anchors = scan_anchor_indices(family, &cfg);
    let mut rhos: Vec<f64> = Vec::new();
    let mut rho = 1.0;
    while rho >= 2.0 * delta * (1.0 - 1e-12) {
        rhos.push(rho);
        rho *= 0.5;
    }

    let mut candidates: Vec<HeavyCandidate> = anchors
        .par_iter()
        .flat_map_iter(|&ai| {
            let t0 = &tubes[ai];
            let d = t0.dir();
            let (u, v) = orthonormal_complement(&d);
            let center = t0.anchor();
            let mut out: Vec<HeavyCandidate> = Vec::new();
            for &rho in &rhos {
                let threshold = delta.powf(-eps) * (rho / delta);
                if n as f64 <= threshold {
                    continue; // even the whole family could not be heavy
                }
                let orients = ((std::f64::consts::FRAC_PI_2 * rho / delta).ceil() as usize)
                    .clamp(1, 32);
                let half_diag_sq = 1.0 + rho * rho + delta * delta + 1e-9;
                let sin_cut = 4.0 * (rho + delta);
                let mut best: Option<HeavyCandidate> = None;
                for oi in 0..orients {
                    let phi = oi as f64 * std::f64::consts::PI / orients as f64;
                    let wide = (u * phi.cos() + v * phi.sin()).normalize();
                    let thin = (u * phi.sin() - v * phi.cos()).normalize();
                    let Ok(bx) = Prism::from_half_dims(center, [thin, wide, d], [delta, rho, 1.0])
                    else {
                        continue;
                    };
                    let shape = WitnessShape::Prism(bx.clone());
                    let mut members: Vec<usize> = Vec::new();
                    for (ti, t) in tubes.iter().enumerate() {
                        // A contained tube's midpoint lies inside the box.
                        if (t.anchor() - center).norm_squared() > half_diag_sq {
                            continue;
                        }
                        if t.length() >= 0.9 && t.dir().cross(&d).norm() > sin_cut {
                            continue;
                        }
                        if tube_in_witness(t, &shape) {
                            members.push(ti);
                        }
                    }
                    if members.len() as f64 > threshold
                        && best.as_ref().map_or(true, |b| members.len() > b.count)
                    {
                        best = Some(HeavyCandidate {
                            count: members.len(),
                            rho,
                            anchor: ai,
                            orient: oi,
                            threshold,
                            members,
                            prism: bx,
                        });
                    }
                }
                if let Some(c) = best {
                    out.push(c);
                }
            }
            out
        })
        .collect();

    candidates.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then(a.rho.total_cmp(&b.rho))
            .then(a.anchor.cmp(&b.anchor))
            .then(a.orient.cmp(&b.orient))
    });

    let mut covered = vec![false; n];
    let mut rectangles: Vec<HeavyRectangle> = Vec::new();
    for c in candidates {
        if c.members.iter().any(|&i| !covered[i]) {
            for &i in &c.members {
                covered[i] = true;
            }
            rectangles.push(HeavyRectangle {
                prism: c.prism,
                count: c.count,
                threshold: c.threshold,
                rho: c.rho,
                members: c.members,
            });
        }
    }
    let heavy_fraction = covered.iter().filter(|&&b| b).count() as f64 / n.max(1) as f64;
    Ok(HeavyReport {
        rectangles,
        heavy_fraction,
        concentrated: heavy_fraction >= 0.5,
    })
}

// ---------------------------------------------------------------------------
// Tube clustering
// ---------------------------------------------------------------------------

/// Outcome of [`cluster_into_prisms`].
#[derive(Clone, Debug)]
pub struct ClusterOutcome {
    /// Common width of the output prisms (their dims are `10δ × ω × 1`).
    pub omega: f64,
    /// Pairwise essentially-distinct prisms anchored on band members.
    pub prisms: Vec<Prism>,
    /// Fraction of the whole family inside the 2-dilate of some output.
    pub coverage: f64,
    /// The pigeonholed spread level `ω` was derived from (`ω ≈ 4θ`).
    pub theta: f64,
    /// Winning dyadic spread band (0 = below angular resolution).
    pub band: usize,
    /// Members whose spread landed in the winning band.
    pub retained: usize,
}

/// Cluster a crowded host of tubes into width-`ω` prisms.
///
/// Every tube gets a spread value — the largest angle to another member
/// sharing a rasterisation cell — and the values are pigeonholed into dyadic
/// bands over the angular floor `K·δ/4`. The winning band fixes `θ` and
/// `ω = 4θ` (clamped to `[10δ, ρ]`); each band member proposes the prism
/// `10δ × ω × 1` around its own axis, and a greedy pass keeps an essentially
/// distinct subset. Since the bands number at most `2·log₂(1/δ) + 2`, the
/// winning band always holds an inverse-log fraction of the family.
///
/// Requires a host of dims `~10δ × ρ × 1` with `ρ ∈ [20δ, 1]`, every tube
/// inside it, and at least `K·ρ/δ` tubes.
pub fn cluster_into_prisms(
    family: &ShadedFamily<Tube>,
    host: &Prism,
    k_param: f64,
) -> Result<ClusterOutcome> {
    if !(k_param >= 1.0) {
        return Err(LabError::HypothesisViolated(format!(
            "richness parameter must be at least 1 (got {k_param})"
        )));
    }
    let scale = family.scale();
    let delta = scale.delta();
    let dims = host.dims();
    let rho = dims[1];
    if dims[0] > 20.0 * delta + 1e-12 {
        return Err(LabError::HypothesisViolated(format!(
            "host must be ~10 cells thin (thin dim {} at delta {delta})",
            dims[0]
        )));
    }
    if (dims[2] - 1.0).abs() > 1e-9 {
        return Err(LabError::HypothesisViolated(format!(
            "host must have unit length (got {})",
            dims[2]
        )));
    }
    if !(rho >= 20.0 * delta - 1e-12 && rho <= 1.0 + 1e-12) {
        return Err(LabError::HypothesisViolated(format!(
            "host width {rho} outside [20·delta, 1]"
        )));
    }
    let n = family.len();
    if n == 0 {
        return Err(LabError::HypothesisViolated(
            "cannot cluster an empty family".into(),
        ));
    }
    let host_shape = WitnessShape::Prism(host.clone());
    for (i, item) in family.items().iter().enumerate() {
        if !tube_in_witness(item.solid(), &host_shape) {
            return Err(LabError::HypothesisViolated(format!(
                "tube {i} is not inside the host"
            )));
        }
    }
    let needed = k_param * rho / delta;
    if (n as f64) < needed {
        return Err(LabError::HypothesisViolated(format!(
            "clustering needs at least {needed:.0} tubes in the host (got {n})"
        )));
    }

    let sets: Vec<&CellSet> = family.items().iter().map(|it| it.cells()).collect();
    let dirs: Vec<Vec3> = family.items().iter().map(|it| it.solid().dir()).collect();
    let spreads = member_max_angles(n, &sets, &dirs);

    // Dyadic bands over the angular floor; band 0 is everything below it.
    let theta_min = k_param * delta / 4.0;
    let band_of = |x: f64| -> usize {
        if x < theta_min {
            0
        } else {
            1 + (x / theta_min).log2().floor() as usize
        }
    };
    let n_bands = band_of(std::f64::consts::FRAC_PI_2) + 1;
    let mut counts = vec![0usize; n_bands];
    for &sp in &spreads {
        counts[band_of(sp).min(n_bands - 1)] += 1;
    }
    let band = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let retained = counts[band];
    let theta = (theta_min * 2f64.powi(band as i32)).min(rho);
    let omega = (4.0 * theta).clamp(10.0 * delta, rho);

    let host_normal = host.plane_normal();
    let mut prisms: Vec<Prism> = Vec::new();
    for (i, item) in family.items().iter().enumerate() {
        if band_of(spreads[i]).min(n_bands - 1) != band {
            continue;
        }
        let t = item.solid();
        let e3 = t.dir();
        let raw = host_normal - host_normal.dot(&e3) * e3;
        let e1 = if raw.norm() < 1e-6 {
            orthonormal_complement(&e3).0
        } else {
            raw.normalize()
        };
        let e2 = e3.cross(&e1);
        let r = Prism::from_half_dims(t.anchor(), [e1, e2, e3], [5.0 * delta, omega / 2.0, 0.5])?;
        if prisms.iter().all(|p| essentially_distinct_prisms(&r, p)) {
            prisms.push(r);
        }
    }

    let covered = family
        .items()
        .iter()
        .filter(|item| {
            prisms
                .iter()
                .any(|p| tube_in_witness(item.solid(), &WitnessShape::Prism(p.dilate(2.0))))
        })
        .count();
    Ok(ClusterOutcome {
        omega,
        prisms,
        coverage: covered as f64 / n as f64,
        theta,
        band,
        retained,
    })
}

// ---------------------------------------------------------------------------
// Coarsening dichotomy
// ---------------------------------------------------------------------------

/// Tuning knobs of [`coarsen_step`]. The defaults are calibrated on the
/// generator ensembles: they keep the honest pigeonhole guarantees while the
/// asymptotic constants they stand in for are out of reach at desk scale.
#[derive(Clone, Debug)]
pub struct CoarsenConfig {
    /// Density-exponent acceptance: branch A fires when a witnessed ball has
    /// `ζ ≤ eps`.
    pub eps: f64,
    /// Plane normals within `plane_tolerance·s/t` count as "the same plane".
    pub plane_tolerance: f64,
    /// Long axes within `line_tolerance·t` count as "the same line".
    pub line_tolerance: f64,
    /// A plane-spread band is significant when it holds this fraction of a
    /// prism's cells per squared log.
    pub spread_mass_fraction: f64,
    /// Uniform multiplicity counts as "low" below `mu_guard·s·t·#R·δ^{-ε²}`.
    pub mu_guard: f64,
    /// Optional convex non-concentration precondition on the input family.
    pub cwa_budget: Option<f64>,
    /// Witness catalog used when `cwa_budget` is set.
    pub catalog: CatalogConfig,
}

impl CoarsenConfig {
    pub fn new(eps: f64) -> Self {
        CoarsenConfig {
            eps,
            plane_tolerance: 4.0,
            line_tolerance: 2.0,
            spread_mass_fraction: 0.01,
            mu_guard: 2.0,
            cwa_budget: None,
            catalog: CatalogConfig::default(),
        }
    }
}

/// One line of the dichotomy trace: which branch a step took and every
/// quantity the decision consumed.
#[derive(Clone, Debug, Serialize)]
pub struct CoarsenRecord {
    /// `"A-density"`, `"A-spread"`, `"B"`, or `"inconclusive"`.
    pub branch: String,
    /// Uniform multiplicity after the pigeonhole.
    pub mu: u32,
    /// Input `[s, t]`.
    pub dims_in: [f64; 2],
    /// Output `[s′, t′]` on branch B.
    pub dims_out: Option<[f64; 2]>,
    /// Plane-spread level the deciding step used.
    pub theta_plane: Option<f64>,
    /// Line-spread level behind the output scales.
    pub theta_line: Option<f64>,
    /// Shading density of the input family.
    pub density_in: f64,
    /// Shading density of the branch-B output.
    pub density_out: Option<f64>,
    /// Exponent of the witnessed ball on branch A.
    pub zeta: Option<f64>,
    /// Pigeonhole losses, skipped checks, fallbacks.
    pub notes: Vec<String>,
}

/// What a coarsening step concluded.
#[derive(Clone, Debug)]
pub enum CoarsenBranch {
    /// Branch A: a ball whose density exponent is at most the configured
    /// `eps` over the widest available scale gap.
    DensityWitness(ScanResult),
    /// Branch B: the family re-expressed on strictly larger scales
    /// `s′ × t′ × 1`, every output prism anchored on an input prism.
    Coarsened(ShadedFamily<Prism>),
}

/// Branch plus the full decision record.
#[derive(Clone, Debug)]
pub struct CoarsenOutcome {
    pub branch: CoarsenBranch,
    pub record: CoarsenRecord,
}

/// Keep members whose filtered shading retains at least half of the parent
/// shading; when none qualifies, fall back to the better half by survival
/// ratio. Returns indices, or `None` when every filtered shading is empty.
fn keep_half(parent: &[usize], filtered: &[usize], notes: &mut Vec<String>, stage: &str) -> Option<Vec<usize>> {
    let kept: Vec<usize> = (0..parent.len())
        .filter(|&i| filtered[i] > 0 && 2 * filtered[i] >= parent[i])
        .collect();
    if !kept.is_empty() {
        return Some(kept);
    }
    let mut nonzero: Vec<(usize, f64)> = (0..parent.len())
        .filter(|&i| filtered[i] > 0)
        .map(|i| (i, filtered[i] as f64 / parent[i].max(1) as f64))
        .collect();
    if nonzero.is_empty() {
        return None;
    }
    nonzero.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let take = nonzero.len().div_ceil(2);
    notes.push(format!(
        "{stage}: no member kept half its shading; retaining the better {take} of {}",
        nonzero.len()
    ));
    Some(nonzero.into_iter().take(take).map(|(i, _)| i).collect())
}

/// One step of the coarsening dichotomy on a uniform `s × t × 1` family.
///
/// The decision procedure: (1) pigeonhole the shading to uniform
/// multiplicity `μ`; if `μ` is low the union must be voluminous, so test the
/// unit ball for a density witness. (2) Build the plane-spread field of the
/// refined shading. (3) If some prism carries a significant dyadic band of
/// plane spread `θ`, test the ball of radius `t·θ` for a witness. (4)
/// Restrict to low-plane-spread cells and keep the members that survive.
/// (5) Pigeonhole the line spread of what remains to a level `θ_line`.
/// (6) Re-express every surviving prism at `s′ = plane_tolerance·s·θ_line/t`,
/// `t′ = min(1, plane_tolerance·θ_line)` (both clamped to 1), shading each
/// output with the cells of its rasterisation near surviving shading, and
/// thin the outputs to an essentially distinct set.
///
/// A family too tangled to classify raises `DichotomyInconclusive` carrying
/// the serialized record — that is data about the family, not a failure of
/// the procedure.
pub fn coarsen_step(family: &ShadedFamily<Prism>, cfg: &CoarsenConfig) -> Result<CoarsenOutcome> {
    if family.is_empty() {
        return Err(LabError::HypothesisViolated(
            "cannot coarsen an empty family".into(),
        ));
    }
    if !(cfg.eps > 0.0 && cfg.eps < 1.0) {
        return Err(LabError::HypothesisViolated(format!(
            "coarsening exponent must lie in (0, 1) (got {})",
            cfg.eps
        )));
    }
    let scale = family.scale();
    let delta = scale.delta();
    let dims0 = family.items()[0].solid().dims();
    for (i, item) in family.items().iter().enumerate() {
        let d = item.solid().dims();
        for a in 0..3 {
            if (d[a] - dims0[a]).abs() > 1e-9 * dims0[a].max(1.0) {
                return Err(LabError::HypothesisViolated(format!(
                    "member {i} has dims {d:?}, expected uniform {dims0:?}"
                )));
            }
        }
    }
    let (s, t) = (dims0[0], dims0[1]);
    if (dims0[2] - 1.0).abs() > 1e-9 {
        return Err(LabError::HypothesisViolated(format!(
            "coarsening expects unit-length prisms (got {})",
            dims0[2]
        )));
    }
    if s > t / 4.0 + 1e-12 {
        return Err(LabError::HypothesisViolated(format!(
            "aspect too mild to coarsen: s = {s} must be at most t/4 = {}",
            t / 4.0
        )));
    }

    let mut notes: Vec<String> = Vec::new();
    if let Some(budget) = cfg.cwa_budget {
        let solids: Vec<Solid> = family.items().iter().map(|it| it.solid().as_solid()).collect();
        let rep = convex_wolff_error_mixed(&solids, delta, budget, &cfg.catalog)?;
        notes.push(format!(
            "convex non-concentration error {:.3} against budget {budget}",
            rep.error_constant
        ));
        if !rep.passed {
            return Err(LabError::HypothesisViolated(format!(
                "input family concentrates: error {:.3} > budget {budget}",
                rep.error_constant
            )));
        }
    }
    let density_in = family.density().0;
    let n = family.len();
    let union = family.union_shading()?;
    let rho_floor = s.max(delta);

    // Step 1: uniform multiplicity; low multiplicity forces a big union.
    let (mu, refined) = pigeonhole_uniform(family)?;
    let mu_bound = cfg.mu_guard * s * t * n as f64 * delta.powf(-cfg.eps * cfg.eps);
    if (mu as f64) <= mu_bound {
        match zeta(&union, Vec3::zeros(), 1.0, rho_floor) {
            Ok(z) if z <= cfg.eps => {
                let witness = ScanResult {
                    zeta: z,
                    rho: rho_floor,
                    r: 1.0,
                    ball_center: [0.0, 0.0, 0.0],
                    separation: 1.0 / rho_floor,
                    dimension_witnessed: 3.0 - z,
                };
                let record = CoarsenRecord {
                    branch: "A-density".into(),
                    mu,
                    dims_in: [s, t],
                    dims_out: None,
                    theta_plane: None,
                    theta_line: None,
                    density_in,
                    density_out: None,
                    zeta: Some(z),
                    notes,
                };
                return Ok(CoarsenOutcome {
                    branch: CoarsenBranch::DensityWitness(witness),
                    record,
                });
            }
            Ok(z) => notes.push(format!(
                "multiplicity {mu} is low (guard {mu_bound:.3}) but the unit-ball exponent {z:.3} exceeds {}",
                cfg.eps
            )),
            Err(_) => notes.push(format!(
                "multiplicity {mu} is low (guard {mu_bound:.3}) but the unit ball misses the shading"
            )),
        }
    } else {
        notes.push(format!(
            "multiplicity {mu} above the low-multiplicity guard {mu_bound:.3}"
        ));
    }

    // Step 2: plane spread of the uniform-multiplicity shading.
    let p_field = spread_field(&refined, SpreadKind::PlaneSpread);
    let theta_base = cfg.plane_tolerance * s / t;
    let kf = scale.k() as f64;

    // Step 3: a significant band of plane spread opens a ball witness at
    // radius t·θ.
    let mut n_bands = 1usize;
    while theta_base * 2f64.powi(n_bands as i32) < std::f64::consts::FRAC_PI_2 {
        n_bands += 1;
    }
    let band_counts: Vec<Vec<u64>> = refined
        .items()
        .par_iter()
        .map(|item| {
            let mut c = vec![0u64; n_bands];
            for &cell in item.cells().indices() {
                let v = p_field.get(cell);
                if v >= theta_base {
                    let j = ((v / theta_base).log2().floor() as usize).min(n_bands - 1);
                    c[j] += 1;
                }
            }
            c
        })
        .collect();
    let mut best_band: Option<(f64, usize, usize)> = None; // (fraction, prism, band)
    for (ri, item) in refined.items().iter().enumerate() {
        let total = item.cells().len() as f64;
        if total == 0.0 {
            continue;
        }
        let cutoff = (cfg.spread_mass_fraction * total / (kf * kf)).max(1.0);
        for (j, &c) in band_counts[ri].iter().enumerate() {
            if (c as f64) >= cutoff {
                let frac = c as f64 / total;
                let better = match best_band {
                    None => true,
                    Some((bf, bri, bj)) => {
                        frac > bf || (frac == bf && (ri, j) < (bri, bj))
                    }
                };
                if better {
                    best_band = Some((frac, ri, j));
                }
            }
        }
    }
    let mut theta_plane: Option<f64> = None;
    if let Some((frac, ri, j)) = best_band {
        let theta_p = theta_base * 2f64.powi(j as i32);
        theta_plane = Some(theta_p);
        let r_ball = (t * theta_p).min(1.0);
        if r_ball > rho_floor * (1.0 + 1e-9) {
            match best_ball_zeta(&union, rho_floor, r_ball) {
                Ok(sc) if sc.zeta <= cfg.eps => {
                    let record = CoarsenRecord {
                        branch: "A-spread".into(),
                        mu,
                        dims_in: [s, t],
                        dims_out: None,
                        theta_plane,
                        theta_line: None,
                        density_in,
                        density_out: None,
                        zeta: Some(sc.zeta),
                        notes,
                    };
                    return Ok(CoarsenOutcome {
                        branch: CoarsenBranch::DensityWitness(sc),
                        record,
                    });
                }
                Ok(sc) => notes.push(format!(
                    "plane spread {theta_p:.4} on member {ri} ({frac:.4} of its cells) but the best ball at radius {r_ball:.4} has exponent {:.3}",
                    sc.zeta
                )),
                Err(e) => notes.push(format!(
                    "plane spread {theta_p:.4} on member {ri} but the ball scan failed: {e}"
                )),
            }
        } else {
            notes.push(format!(
                "plane spread {theta_p:.4} on member {ri} gives ball radius {r_ball:.4} below the floor {rho_floor:.4}"
            ));
        }
    } else {
        notes.push("no significant plane-spread band".into());
    }

    let inconclusive = |mut notes: Vec<String>, stage: &str, mu: u32| -> LabError {
        notes.push(format!("{stage}: every filtered shading is empty"));
        let record = CoarsenRecord {
            branch: "inconclusive".into(),
            mu,
            dims_in: [s, t],
            dims_out: None,
            theta_plane,
            theta_line: None,
            density_in,
            density_out: None,
            zeta: None,
            notes,
        };
        LabError::DichotomyInconclusive(
            serde_json::to_string(&record).unwrap_or_else(|_| record.branch.clone()),
        )
    };

    // Step 4: restrict to low-plane-spread cells, then keep the members
    // that retain at least half their shading.
    let y2_sizes: Vec<usize> = refined.items().iter().map(|it| it.shading().len()).collect();
    let y3: Vec<CellSet> = refined
        .items()
        .par_iter()
        .map(|item| {
            let cells: Vec<u32> = item
                .shading()
                .indices()
                .iter()
                .copied()
                .filter(|&c| p_field.get(c) <= theta_base)
                .collect();
            CellSet::from_sorted(cells)
        })
        .collect();
    let y3_sizes: Vec<usize> = y3.iter().map(|c| c.len()).collect();
    let Some(kept3) = keep_half(&y2_sizes, &y3_sizes, &mut notes, "low-plane-spread cut") else {
        return Err(inconclusive(notes, "low-plane-spread cut", mu));
    };

    // Step 5: pigeonhole the line spread of the survivors.
    let y3_items: Vec<Shaded<Prism>> = kept3
        .iter()
        .map(|&i| {
            Shaded::with_shading(
                scale,
                refined.items()[i].solid().clone(),
                y3[i].clone(),
            )
        })
        .collect::<Result<_>>()?;
    let y3_family = ShadedFamily::from_items(scale, y3_items)?;
    let l_field = spread_field(&y3_family, SpreadKind::LineSpread);
    let theta_l_base = cfg.line_tolerance * t;
    let l_band = |v: f64| -> usize {
        if v < theta_l_base {
            0
        } else {
            1 + (v / theta_l_base).log2().floor() as usize
        }
    };
    let max_l_band = l_band(std::f64::consts::FRAC_PI_2) + 1;
    let mut l_mass = vec![0u64; max_l_band];
    for item in y3_family.items() {
        for &c in item.shading().indices() {
            l_mass[l_band(l_field.get(c)).min(max_l_band - 1)] += 1;
        }
    }
    let chosen_band = l_mass
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let theta_line = theta_l_base * 2f64.powi(chosen_band as i32);
    notes.push(format!(
        "line-spread band {chosen_band} (level {theta_line:.4}) holds {} of {} surviving cells",
        l_mass[chosen_band],
        l_mass.iter().sum::<u64>()
    ));

    let y4: Vec<CellSet> = y3_family
        .items()
        .par_iter()
        .map(|item| {
            let cells: Vec<u32> = item
                .shading()
                .indices()
                .iter()
                .copied()
                .filter(|&c| l_band(l_field.get(c)).min(max_l_band - 1) == chosen_band)
                .collect();
            CellSet::from_sorted(cells)
        })
        .collect();
    let y3k_sizes: Vec<usize> = y3_family.items().iter().map(|it| it.shading().len()).collect();
    let y4_sizes: Vec<usize> = y4.iter().map(|c| c.len()).collect();
    let Some(kept4) = keep_half(&y3k_sizes, &y4_sizes, &mut notes, "line-spread band cut") else {
        return Err(inconclusive(notes, "line-spread band cut", mu));
    };

    // Step 6: re-express the survivors on the coarser scales.
    let s_out = (cfg.plane_tolerance * s * theta_line / t).min(1.0);
    let t_out = (cfg.plane_tolerance * theta_line).min(1.0);
    let survivors: Vec<(&Prism, &CellSet)> = kept4
        .iter()
        .map(|&i| (y3_family.items()[i].solid(), &y4[i]))
        .collect();
    let mut outputs: Vec<(Prism, usize)> = Vec::new();
    for (si, (p, _)) in survivors.iter().enumerate() {
        let candidate = Prism::new(p.center(), *p.frame(), s_out, t_out)?;
        if outputs
            .iter()
            .all(|(q, _)| essentially_distinct_prisms(&candidate, q))
        {
            outputs.push((candidate, si));
        }
    }
    let grow = s_out.max(delta);
    let items: Vec<Shaded<Prism>> = outputs
        .iter()
        .map(|(rp, _)| {
            let wide = rp.dilate(2.0);
            let mut source = VoxelSet::empty(scale)?;
            for (p, y) in &survivors {
                if prism_in_prism(p, &wide) {
                    for &c in y.indices() {
                        let (x, yj, z) = CellSet::unpack(scale, c);
                        source.set(x, yj, z);
                    }
                }
            }
            let grown = source.dilate(grow)?;
            let raster = CellSet::rasterize(scale, &Solid::Prism(rp.clone()))?;
            let cells: Vec<u32> = raster
                .indices()
                .iter()
                .copied()
                .filter(|&c| {
                    let (x, yj, z) = CellSet::unpack(scale, c);
                    grown.get(x, yj, z)
                })
                .collect();
            Shaded::with_shading(scale, rp.clone(), CellSet::from_sorted(cells))
        })
        .collect::<Result<_>>()?;
    let coarse = ShadedFamily::from_items(scale, items)?;
    let record = CoarsenRecord {
        branch: "B".into(),
        mu,
        dims_in: [s, t],
        dims_out: Some([s_out, t_out]),
        theta_plane,
        theta_line: Some(theta_line),
        density_in,
        density_out: Some(coarse.density().0),
        zeta: None,
        notes,
    };
    Ok(CoarsenOutcome {
        branch: CoarsenBranch::Coarsened(coarse),
        record,
    })
}

/// Outcome of the iterated dichotomy.
#[derive(Clone, Debug)]
pub struct DichotomyOutcome {
    /// Every round's record, in order.
    pub rounds: Vec<CoarsenRecord>,
    /// Density witness, from a branch-A round or the final slab stage.
    pub witness: Option<ScanResult>,
    /// The family the iteration stopped on (`None` when a mid-iteration
    /// witness ended the run).
    pub final_family: Option<ShadedFamily<Prism>>,
}

/// Iterate [`coarsen_step`] until branch A fires, the width saturates at 1
/// (the family became slabs — measure the unit ball and stop), or the round
/// budget runs out. Scales at least double each round, so `log₂(1/δ)` rounds
/// always suffice.
pub fn prism_dichotomy(
    family: &ShadedFamily<Prism>,
    cfg: &CoarsenConfig,
    max_rounds: usize,
) -> Result<DichotomyOutcome> {
    if max_rounds == 0 {
        return Err(LabError::HypothesisViolated(
            "the dichotomy needs at least one round".into(),
        ));
    }
    let scale = family.scale();
    let delta = scale.delta();
    let mut current = family.clone();
    let mut rounds: Vec<CoarsenRecord> = Vec::new();
    for _ in 0..max_rounds {
        let out = coarsen_step(&current, cfg)?;
        rounds.push(out.record);
        match out.branch {
            CoarsenBranch::DensityWitness(w) => {
                return Ok(DichotomyOutcome {
                    rounds,
                    witness: Some(w),
                    final_family: None,
                });
            }
            CoarsenBranch::Coarsened(next) => {
                let dims = next.items()[0].solid().dims();
                if dims[1] >= 1.0 - 1e-9 {
                    // Slab stage: width saturated; measure what survived.
                    let rho = dims[0].max(delta);
                    let witness = if rho < 1.0 {
                        let union = next.union_shading()?;
                        zeta(&union, Vec3::zeros(), 1.0, rho).ok().map(|z| ScanResult {
                            zeta: z,
                            rho,
                            r: 1.0,
                            ball_center: [0.0, 0.0, 0.0],
                            separation: 1.0 / rho,
                            dimension_witnessed: 3.0 - z,
                        })
                    } else {
                        None
                    };
                    return Ok(DichotomyOutcome {
                        rounds,
                        witness,
                        final_family: Some(next),
                    });
                }
                current = next;
            }
        }
    }
    Ok(DichotomyOutcome {
        rounds,
        witness: None,
        final_family: Some(current),
    })
}

// ---------------------------------------------------------------------------
// Four-way classification
// ---------------------------------------------------------------------------

/// Where a tube family landed in the composed experiment.
#[derive(Clone, Debug)]
pub enum FamilyClass {
    /// A ball whose density exponent is below the requested `eps`.
    DenseBall { witness: ScanResult },
    /// No heavy rectangle captures half the family; the measured convex
    /// non-concentration error is attached.
    SelfSimilarWolff { error: f64 },
    /// The family concentrates into prisms of the recorded width.
    TubeConcentrated { rho: f64, fraction: f64 },
    /// Clustered prisms stay rich at the coarse scale.
    CoarseScaleRich { rho: f64, prisms: usize },
}

/// Run the full experiment on a tube family: density scan, heavy-rectangle
/// dichotomy, clustering of the dominant host, and the coarsening dichotomy
/// on the clustered prisms. Composes measurements — the returned class is
/// the experiment's verdict about this family at this scale, and the trace
/// records every decision.
pub fn four_way_classify(
    family: &ShadedFamily<Tube>,
    eps: f64,
) -> Result<(FamilyClass, Vec<String>)> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(LabError::HypothesisViolated(format!(
            "classification exponent must lie in (0, 1) (got {eps})"
        )));
    }
    let scale = family.scale();
    let delta = scale.delta();
    let mut trace: Vec<String> = Vec::new();

    let union = family.union_shading()?;
    let scan = assouad_scan(&union, 4.0)?;
    trace.push(format!(
        "density scan: exponent {:.3} at rho {:.4}, r {:.4}",
        scan.zeta, scan.rho, scan.r
    ));
    if scan.zeta <= eps {
        return Ok((FamilyClass::DenseBall { witness: scan }, trace));
    }

    let tubes: Vec<Tube> = family.items().iter().map(|it| it.solid().clone()).collect();
    let fam = TubeFamily::new(tubes, delta)?;
    let heavy = detect_heavy(&fam, eps)?;
    trace.push(format!(
        "heavy rectangles: {} found, covering {:.2} of the family",
        heavy.rectangles.len(),
        heavy.heavy_fraction
    ));
    if !heavy.concentrated {
        let report = convex_wolff_error(&fam, 100.0, &CatalogConfig::default());
        trace.push(format!(
            "spread family: convex non-concentration error {:.3}",
            report.error_constant
        ));
        return Ok((
            FamilyClass::SelfSimilarWolff {
                error: report.error_constant,
            },
            trace,
        ));
    }

    let rect = &heavy.rectangles[0];
    let rho_host = (2.0 * rect.rho).max(20.0 * delta).min(1.0);
    let host = Prism::from_half_dims(
        rect.prism.center(),
        *rect.prism.frame(),
        [5.0 * delta, rho_host / 2.0, 0.5],
    )?;
    let host_shape = WitnessShape::Prism(host.clone());
    let members: Vec<Shaded<Tube>> = family
        .items()
        .iter()
        .filter(|it| tube_in_witness(it.solid(), &host_shape))
        .cloned()
        .collect();
    trace.push(format!(
        "dominant host of width {rho_host:.4} holds {} tubes",
        members.len()
    ));
    if (members.len() as f64) < rho_host / delta {
        trace.push(format!(
            "too few to cluster (need {:.0}); the rectangle itself is the concentration",
            rho_host / delta
        ));
        return Ok((
            FamilyClass::TubeConcentrated {
                rho: rect.rho,
                fraction: heavy.heavy_fraction,
            },
            trace,
        ));
    }
    let sub = ShadedFamily::from_items(scale, members)?;
    let cluster = cluster_into_prisms(&sub, &host, 1.0)?;
    trace.push(format!(
        "clustered at width {:.4}: {} prisms, coverage {:.2}",
        cluster.omega,
        cluster.prisms.len(),
        cluster.coverage
    ));
    if cluster.omega <= 0.25 * rho_host {
        return Ok((
            FamilyClass::TubeConcentrated {
                rho: cluster.omega,
                fraction: heavy.heavy_fraction,
            },
            trace,
        ));
    }

    let prism_family = ShadedFamily::full(scale, cluster.prisms.clone())?;
    let cfg = CoarsenConfig::new(eps);
    match prism_dichotomy(&prism_family, &cfg, scale.k() as usize) {
        Ok(out) => {
            for r in &out.rounds {
                trace.push(format!(
                    "coarsen: branch {}, dims {:?} -> {:?}",
                    r.branch, r.dims_in, r.dims_out
                ));
            }
            if let Some(w) = out.witness {
                if w.zeta <= eps {
                    return Ok((FamilyClass::DenseBall { witness: w }, trace));
                }
            }
            let prisms = out.final_family.map(|f| f.len()).unwrap_or(0);
            Ok((
                FamilyClass::CoarseScaleRich {
                    rho: cluster.omega,
                    prisms,
                },
                trace,
            ))
        }
        Err(e) => {
            trace.push(format!("coarsening stopped: {e}"));
            Ok((
                FamilyClass::CoarseScaleRich {
                    rho: cluster.omega,
                    prisms: cluster.prisms.len(),
                },
                trace,
            ))
        }
    }
}
