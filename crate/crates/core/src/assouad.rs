//! Local density exponents and the two-scale amplification loop.
//!
//! The central quantity is the exponent ζ of a ball/scale pair: the ball
//! `B(c, r)` meets the ρ-dilation of a set `E` in a fraction `(ρ/r)^ζ` of its
//! volume, so small ζ means the set looks high-dimensional inside `B` across
//! the scale gap `r/ρ`. [`assouad_scan`] searches all dyadic scale pairs with
//! a prescribed minimum separation and every ball on an `r/2`-net for the
//! smallest ζ, and [`two_scale_amplify`] iterates the scanner to refine a
//! shaded family onto a single scale pair carrying a guaranteed fraction of
//! the original mass.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{LabError, Result};
use crate::geom::Vec3;
use crate::shading::{LabSolid, ShadedFamily};
use crate::voxel::{CellSet, VoxelSet};

/// Density exponent of one ball/scale pair: the unique ζ with
/// `|B(center, r) ∩ N_ρ(E)| = (ρ/r)^ζ · |B(center, r)|` in voxel measure
/// (balls clipped to the domain).
///
/// Requires `δ ≤ ρ < r ≤ 1`. A ball that misses the dilated set entirely has
/// no finite exponent and is reported as an error.
pub fn zeta(e: &VoxelSet, center: Vec3, r: f64, rho: f64) -> Result<f64> {
    if !(rho < r && r <= 1.0 + 1e-12) {
        return Err(LabError::HypothesisViolated(format!(
            "zeta needs rho < r <= 1 (got rho = {rho}, r = {r})"
        )));
    }
    let density = e.ball_density(center, r, rho)?;
    if density <= 0.0 {
        return Err(LabError::UndefinedZeta {
            center: [center.x, center.y, center.z],
            r,
            rho,
        });
    }
    if density >= 1.0 {
        return Ok(0.0);
    }
    Ok(density.ln() / (rho / r).ln())
}

/// The best (smallest) density exponent found by [`assouad_scan`], with the
/// scales and ball that witness it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub zeta: f64,
    pub rho: f64,
    pub r: f64,
    pub ball_center: [f64; 3],
    /// `r / rho`, always at least the requested minimum separation.
    pub separation: f64,
    /// `3 − zeta`: the local dimension this witness certifies.
    pub dimension_witnessed: f64,
}

/// Exhaustive density scan: all dyadic `ρ ∈ [δ, 1]`, all dyadic `r ≤ 1` with
/// `r ≥ A·ρ`, and all ball centers on the grid-aligned `r/2`-net, keeping the
/// ball of smallest ζ whose interior actually meets the raw set (balls that
/// only graze the ρ-dilation witness nothing).
///
/// Deterministic: scale pairs are visited with ρ ascending and r descending,
/// a new witness must be strictly better, and ties inside one pair resolve to
/// the lexicographically smallest center — so equal-quality witnesses go to
/// the widest scale gap, the most meaningful separation.
pub fn assouad_scan(e: &VoxelSet, min_separation: f64) -> Result<ScanResult> {
    if !(min_separation >= 2.0) {
        return Err(LabError::HypothesisViolated(format!(
            "minimum scale separation must be at least 2 (got {min_separation})"
        )));
    }
    if e.is_empty_set() {
        return Err(LabError::HypothesisViolated(
            "cannot scan an empty set for density witnesses".into(),
        ));
    }
    let scale = e.scale();
    let k = scale.k();
    let mut best: Option<(f64, f64, f64, [f64; 3])> = None;
    for j in (0..=k).rev() {
        let rho = 2f64.powi(-(j as i32));
        let radii: Vec<f64> = (0..=k)
            .map(|i| 2f64.powi(-(i as i32)))
            .filter(|&r| r + 1e-12 >= min_separation * rho && r > rho)
            .collect();
        if radii.is_empty() {
            break; // coarser rho only shrinks the admissible range
        }
        let dilated = e.dilate(rho)?;
        for r in radii {
            if let Some((z, c)) = scan_pair(&dilated, e, rho, r) {
                if best.as_ref().map_or(true, |(bz, ..)| z < *bz) {
                    best = Some((z, rho, r, c));
                }
            }
        }
        if matches!(best, Some((z, ..)) if z == 0.0) {
            break; // nothing can strictly improve on a saturated ball
        }
    }
    let (zeta, rho, r, ball_center) = best.ok_or_else(|| {
        LabError::HypothesisViolated(format!(
            "no dyadic scale pair with separation {min_separation} fits above delta"
        ))
    })?;
    Ok(ScanResult {
        zeta,
        rho,
        r,
        ball_center,
        separation: r / rho,
        dimension_witnessed: 3.0 - zeta,
    })
}

/// Best density exponent over all balls of a *fixed* scale pair: the same
/// `r/2`-net sweep as [`assouad_scan`] restricted to one `(ρ, r)`, for callers
/// that already know which scales matter (e.g. a spread angle dictates the
/// ball radius).
pub fn best_ball_zeta(e: &VoxelSet, rho: f64, r: f64) -> Result<ScanResult> {
    if !(rho < r && r <= 1.0 + 1e-12) {
        return Err(LabError::HypothesisViolated(format!(
            "ball scan needs rho < r <= 1 (got rho = {rho}, r = {r})"
        )));
    }
    if e.is_empty_set() {
        return Err(LabError::HypothesisViolated(
            "cannot scan an empty set for density witnesses".into(),
        ));
    }
    let dilated = e.dilate(rho)?;
    let (zeta, ball_center) = scan_pair(&dilated, e, rho, r).ok_or_else(|| {
        LabError::HypothesisViolated(format!(
            "no ball of radius {r} on the net meets the set"
        ))
    })?;
    Ok(ScanResult {
        zeta,
        rho,
        r,
        ball_center,
        separation: r / rho,
        dimension_witnessed: 3.0 - zeta,
    })
}

/// Sweep the grid-aligned `r/2`-net of ball centers against a precomputed
/// ρ-dilation, returning the best `(ζ, center)` whose ball meets the raw set.
fn scan_pair(dilated: &VoxelSet, raw: &VoxelSet, rho: f64, r: f64) -> Option<(f64, [f64; 3])> {
    let pitch = r / 2.0;
    let per_axis = (2.0 / pitch).round() as usize;
    let center_at = |i: usize| -1.0 + (i as f64 + 0.5) * pitch;
    let log_gap = (rho / r).ln();
    (0..per_axis)
        .into_par_iter()
        .map(|iz| {
            let cz = center_at(iz);
            let mut local: Option<(f64, [f64; 3])> = None;
            for iy in 0..per_axis {
                let cy = center_at(iy);
                for ix in 0..per_axis {
                    let cx = center_at(ix);
                    let c = Vec3::new(cx, cy, cz);
                    let (hit, total) = dilated.ball_counts(c, r);
                    if hit == 0 || total == 0 {
                        continue;
                    }
                    let density = hit as f64 / total as f64;
                    let z = if density >= 1.0 {
                        0.0
                    } else {
                        density.ln() / log_gap
                    };
                    if better_witness(z, [cx, cy, cz], &local) && raw.ball_counts(c, r).0 > 0 {
                        local = Some((z, [cx, cy, cz]));
                    }
                }
            }
            local
        })
        .reduce(
            || None,
            |a, b| match (a, b) {
                (x, None) => x,
                (None, y) => y,
                (Some(x), Some(y)) => {
                    if better_witness(y.0, y.1, &Some(x)) {
                        Some(y)
                    } else {
                        Some(x)
                    }
                }
            },
        )
}

/// Is `(z, c)` strictly better than the incumbent: smaller ζ, or equal ζ with
/// a lexicographically smaller center?
fn better_witness(z: f64, c: [f64; 3], incumbent: &Option<(f64, [f64; 3])>) -> bool {
    match incumbent {
        None => true,
        Some((bz, bc)) => z < *bz || (z == *bz && c < *bc),
    }
}

/// One round of the amplification loop: the scan witness, the radius of the
/// ball actually removed, and how much shaded mass that removal consumed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AmplifyRound {
    pub scan: ScanResult,
    /// `r + √3(ρ + δ)`: wide enough that some shading cell feeding the
    /// witnessed density always lies inside, so every round makes progress.
    pub capture_radius: f64,
    pub removed: u64,
}

/// Result of [`two_scale_amplify`].
#[derive(Clone, Debug)]
pub struct TwoScaleOutcome<S> {
    /// The input family with each shading restricted to the selected balls.
    pub refined: ShadedFamily<S>,
    /// The scale pair every selected ball was witnessed at.
    pub rho: f64,
    pub r: f64,
    /// Measured exponent ε̂ with `|N_ρ(⋃Y′)| = (ρ/r)^ε̂ |N_r(⋃Y′)|`.
    pub ratio_exponent: f64,
    /// Every round in execution order (the full trace).
    pub rounds: Vec<AmplifyRound>,
    /// The pairwise-disjoint balls `(center, radius)` the output lives in.
    pub selected: Vec<([f64; 3], f64)>,
    pub initial_mass: u64,
    pub retained_mass: u64,
}

/// Repeatedly scan the union shading for its best density ball, delete the
/// ball, and stop once half the shaded mass is consumed; then pigeonhole the
/// recorded rounds onto the dyadic scale pair that consumed the most mass,
/// greedily thin that band's balls to a pairwise-disjoint subset, and restrict
/// the *original* shadings to those balls.
///
/// The loop is capped at `10·log₂²(1/δ)` rounds; families whose density
/// witnesses consume mass too slowly are reported as non-convergent rather
/// than looping on.
pub fn two_scale_amplify<S: LabSolid>(
    family: &ShadedFamily<S>,
    min_separation: f64,
) -> Result<TwoScaleOutcome<S>> {
    let initial_mass = family.total_shading();
    if initial_mass == 0 {
        return Err(LabError::HypothesisViolated(
            "amplification needs a shading with positive mass".into(),
        ));
    }
    let scale = family.scale();
    let delta = scale.delta();
    let k = scale.k() as usize;
    let round_cap = 10 * k * k;

    let mut work = family.clone();
    let mut rounds: Vec<AmplifyRound> = Vec::new();
    let mut removed_total = 0u64;
    while removed_total * 2 < initial_mass {
        if rounds.len() >= round_cap {
            return Err(LabError::AmplificationDiverged(rounds.len()));
        }
        let union = work.union_shading()?;
        let scan = assouad_scan(&union, min_separation)?;
        let capture_radius = scan.r + 3f64.sqrt() * (scan.rho + delta);
        let center = Vec3::new(scan.ball_center[0], scan.ball_center[1], scan.ball_center[2]);
        let removed = work.delete_ball(center, capture_radius);
        if removed == 0 {
            return Err(LabError::AmplificationDiverged(rounds.len()));
        }
        removed_total += removed;
        rounds.push(AmplifyRound {
            scan,
            capture_radius,
            removed,
        });
    }

    // Pigeonhole the rounds by their exact dyadic scale pair and keep the
    // band that consumed the most mass (ties to the first band in key order).
    let mut bands: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for round in &rounds {
        *bands
            .entry((dyadic_level(round.scan.rho), dyadic_level(round.scan.r)))
            .or_default() += round.removed;
    }
    let mut band_key = (0u32, 0u32);
    let mut band_mass = 0u64;
    for (&key, &mass) in &bands {
        if mass > band_mass {
            band_key = key;
            band_mass = mass;
        }
    }
    let rho = 2f64.powi(-(band_key.0 as i32));
    let r = 2f64.powi(-(band_key.1 as i32));

    // Greedy disjoint thinning, heaviest rounds first.
    let mut order: Vec<usize> = (0..rounds.len())
        .filter(|&i| {
            dyadic_level(rounds[i].scan.rho) == band_key.0
                && dyadic_level(rounds[i].scan.r) == band_key.1
        })
        .collect();
    order.sort_by(|&a, &b| rounds[b].removed.cmp(&rounds[a].removed).then(a.cmp(&b)));
    let mut selected: Vec<([f64; 3], f64)> = Vec::new();
    for i in order {
        let c = rounds[i].scan.ball_center;
        let rad = rounds[i].capture_radius;
        let disjoint = selected.iter().all(|(sc, sr)| {
            let d2 = (c[0] - sc[0]).powi(2) + (c[1] - sc[1]).powi(2) + (c[2] - sc[2]).powi(2);
            d2.sqrt() > rad + sr
        });
        if disjoint {
            selected.push((c, rad));
        }
    }

    // Restrict the original shadings to the selected balls.
    let mut refined = family.clone();
    for item in refined.items_mut() {
        let mut shading = item.shading().clone();
        shading.retain(|cell| {
            let p = CellSet::cell_center(scale, cell);
            selected.iter().any(|(c, rad)| {
                let d2 = (p.x - c[0]).powi(2) + (p.y - c[1]).powi(2) + (p.z - c[2]).powi(2);
                d2 <= rad * rad
            })
        });
        item.replace_shading(shading)?;
    }
    let retained_mass = refined.total_shading();

    let union = refined.union_shading()?;
    let n_rho = union.dilate(rho)?.count();
    let n_r = union.dilate(r)?.count();
    let ratio_exponent = (n_rho as f64 / n_r as f64).ln() / (rho / r).ln();

    Ok(TwoScaleOutcome {
        refined,
        rho,
        r,
        ratio_exponent,
        rounds,
        selected,
        initial_mass,
        retained_mass,
    })
}

fn dyadic_level(x: f64) -> u32 {
    (-x.log2()).round() as u32
}
