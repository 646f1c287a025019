//! Twisted projections, cinematic curves, counting norms, and parameter
//! point-set machinery.
//!
//! A slope function `f` on `[-1, 1]` twists the projection
//! `π_f(x, y, z) = (x + f(z)·y, z)`, collapsing a 3D tube union onto the
//! δ-neighborhood of a planar curve: the tube of the line
//! `{(a + ct, b + dt, t)}` projects into the graph neighborhood of
//! `g(t) = a + c·t + f(t)(b + d·t)`. Admissibility (`1 ≤ |f′| ≤ 2`,
//! `|f″| ≤ 1/100`) is certified from finite differences on the sample grid.
//!
//! Parameter point sets live in `[0,1]^n` (n ≤ 4) and carry covering-number
//! based non-concentration measurements (Katz–Tao and Frostman forms) plus a
//! uniformizing refinement that trims every occupied dyadic block to an
//! exact power-of-two branching.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;

use crate::error::{LabError, Result};
use crate::geom::{Tube, Vec3};
use crate::voxel::{GridScale, VoxelSet, VoxelSet2};

/// Sampled slope function on a uniform δ-grid of [-1, 1].
#[derive(Clone, Debug)]
pub struct SlopeFunction {
    scale: GridScale,
    /// Values at the `n+1` nodes `-1 + i·δ`.
    samples: Vec<f64>,
}

/// Finite-difference derivative bounds certified from the samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlopeBounds {
    pub min_abs_slope: f64,
    pub max_abs_slope: f64,
    pub max_curvature: f64,
}

impl SlopeFunction {
    /// Sample `f` at the δ-grid nodes of scale `k`.
    pub fn from_fn(k: u32, f: impl Fn(f64) -> f64) -> Result<Self> {
        let scale = GridScale::new(k)?;
        let n = scale.n();
        let delta = scale.delta();
        let samples = (0..=n).map(|i| f(-1.0 + i as f64 * delta)).collect();
        Ok(SlopeFunction { scale, samples })
    }

    /// Wrap explicit node values (must be `n+1` of them).
    pub fn from_samples(k: u32, samples: Vec<f64>) -> Result<Self> {
        let scale = GridScale::new(k)?;
        if samples.len() != scale.n() + 1 {
            return Err(LabError::Format(format!(
                "slope function needs {} samples at scale {k}, got {}",
                scale.n() + 1,
                samples.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Format("non-finite slope sample".into()));
        }
        Ok(SlopeFunction { scale, samples })
    }

    /// The constant-zero slope (inadmissible; for untwisted test projections).
    pub fn zero(k: u32) -> Result<Self> {
        Self::from_fn(k, |_| 0.0)
    }

    pub fn scale(&self) -> GridScale {
        self.scale
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Piecewise-linear interpolation, clamped to [-1, 1].
    pub fn eval(&self, z: f64) -> f64 {
        let delta = self.scale.delta();
        let t = ((z.clamp(-1.0, 1.0) + 1.0) / delta).clamp(0.0, self.scale.n() as f64);
        let i = (t.floor() as usize).min(self.samples.len() - 2);
        let frac = t - i as f64;
        self.samples[i] * (1.0 - frac) + self.samples[i + 1] * frac
    }

    /// Finite-difference derivative bounds over the sample grid.
    pub fn bounds(&self) -> SlopeBounds {
        let delta = self.scale.delta();
        let mut min_s = f64::INFINITY;
        let mut max_s = 0.0f64;
        for w in self.samples.windows(2) {
            let d = ((w[1] - w[0]) / delta).abs();
            min_s = min_s.min(d);
            max_s = max_s.max(d);
        }
        let mut max_c = 0.0f64;
        for w in self.samples.windows(3) {
            let c = ((w[2] - 2.0 * w[1] + w[0]) / (delta * delta)).abs();
            max_c = max_c.max(c);
        }
        SlopeBounds {
            min_abs_slope: min_s,
            max_abs_slope: max_s,
            max_curvature: max_c,
        }
    }

    /// Certify `1 ≤ |f′| ≤ 2` and `|f″| ≤ 1/100` on the grid.
    pub fn certify(&self) -> Result<SlopeBounds> {
        let b = self.bounds();
        let tol = 1e-9;
        if b.min_abs_slope < 1.0 - tol || b.max_abs_slope > 2.0 + tol {
            return Err(LabError::HypothesisViolated(format!(
                "slope magnitude [{:.6}, {:.6}] escapes [1, 2]",
                b.min_abs_slope, b.max_abs_slope
            )));
        }
        if b.max_curvature > 0.01 + tol {
            return Err(LabError::HypothesisViolated(format!(
                "curvature {:.6} exceeds 1/100",
                b.max_curvature
            )));
        }
        Ok(b)
    }

    pub fn is_admissible(&self) -> bool {
        self.certify().is_ok()
    }
}

/// The δ-tube of the line `{(a + ct, b + dt, t) : |t| ≤ 1/2}`.
pub fn line_tube(a: f64, b: f64, c: f64, d: f64, radius: f64) -> Result<Tube> {
    let stretch = (1.0 + c * c + d * d).sqrt();
    Tube::with_length(
        Vec3::new(a, b, 0.0),
        Vec3::new(c, d, 1.0) / stretch,
        radius,
        stretch,
    )
}

/// Twisted projection of an occupied 3D grid: a 2D cell is set iff the
/// center of some occupied 3D cell maps into it under `(x,y,z) ↦
/// (x + f(z)y, z)`. Requires an admissible slope function.
pub fn twisted_project(e: &VoxelSet, f: &SlopeFunction) -> Result<VoxelSet2> {
    f.certify()?;
    Ok(twisted_project_unchecked(e, f))
}

/// As [`twisted_project`] but skipping admissibility (test-mode, e.g. f ≡ 0).
pub fn twisted_project_unchecked(e: &VoxelSet, f: &SlopeFunction) -> VoxelSet2 {
    let scale = e.scale();
    let mut out = VoxelSet2::empty(scale);
    // f varies only with z, so evaluate once per grid row.
    let f_of_row: Vec<f64> = (0..scale.n())
        .map(|iz| f.eval(scale.cell_center(iz)))
        .collect();
    for (ix, iy, iz) in e.iter_cells() {
        let x = scale.cell_center(ix) + f_of_row[iz] * scale.cell_center(iy);
        if let Some(col) = out.col_of(x) {
            out.set(col, iz);
        }
    }
    out
}

/// Rasterize the width-`width` vertical neighborhood of the cinematic curve
/// `g(t) = a + c·t + f(t)(b + d·t)` over the 2D grid (the `π_f` image of the
/// line with parameters `(a, b, c, d)`).
///
/// Each δ-row is filled on the x-interval spanned by the curve across the
/// row — minimum and maximum of 9 samples at step δ/8 — padded by `width`.
pub fn rasterize_cinematic(
    k: u32,
    a: f64,
    b: f64,
    c: f64,
    d: f64,
    f: &SlopeFunction,
    width: f64,
) -> Result<VoxelSet2> {
    if a.abs() > 1.0 || b.abs() > 1.0 || c.abs() > 1.0 || d.abs() > 1.0 {
        return Err(LabError::Geometry(
            "cinematic parameters must lie in [-1, 1]".into(),
        ));
    }
    if !(width > 0.0) {
        return Err(LabError::Geometry(format!("bad curve width {width}")));
    }
    let scale = GridScale::new(k)?;
    let delta = scale.delta();
    let mut out = VoxelSet2::empty(scale);
    let nx = out.nx();
    let g = |t: f64| a + c * t + f.eval(t) * (b + d * t);
    for iz in 0..out.nz() {
        let z0 = -1.0 + iz as f64 * delta;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in 0..=8 {
            let v = g(z0 + s as f64 * delta / 8.0);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        // Columns meeting [lo - width, hi + width] in the [-4, 4) frame.
        let t0 = (lo - width + 4.0) / delta;
        let t1 = (hi + width + 4.0) / delta;
        if t1 < 0.0 || t0 >= nx as f64 {
            continue;
        }
        let lo_col = t0.max(0.0).floor() as usize;
        let hi_col = (t1.floor() as usize).min(nx - 1);
        if lo_col <= hi_col {
            out.set_row_range(iz, lo_col, hi_col);
        }
    }
    Ok(out)
}

/// `(Σ_cells count^p · δ²)^{1/p}` where `count` is how many of the sets
/// cover the cell.
pub fn lp_counting_norm(curves: &[VoxelSet2], p: f64) -> Result<f64> {
    if !(p > 0.0) {
        return Err(LabError::Geometry(format!(
            "Lp exponent must be positive, got {p}"
        )));
    }
    let Some(first) = curves.first() else {
        return Ok(0.0);
    };
    let nx = first.nx();
    let ncells = nx * first.nz();
    if ncells > 1 << 26 {
        return Err(LabError::Infeasible(format!(
            "counting grid of {ncells} cells exceeds the in-memory budget"
        )));
    }
    let mut counts = vec![0u32; ncells];
    for c in curves {
        if c.scale() != first.scale() {
            return Err(LabError::ScaleMismatch(
                "counting norm needs a common grid".into(),
            ));
        }
        for (ix, iz) in c.iter_cells() {
            counts[iz * nx + ix] += 1;
        }
    }
    let delta = first.scale().delta();
    let area = delta * delta;
    let total: f64 = counts
        .par_iter()
        .filter(|&&c| c > 0)
        .map(|&c| (c as f64).powf(p) * area)
        .sum();
    Ok(total.powf(1.0 / p))
}

// ---------------------------------------------------------------------------
// Parameter point sets
// ---------------------------------------------------------------------------

/// Finite point set in `[0,1]^n`, n ≤ 4, carrying its ambient scale δ.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamPointSet {
    dim: usize,
    scale: GridScale,
    /// Row-major flat coordinates, `dim` per point.
    coords: Vec<f64>,
}

impl ParamPointSet {
    pub fn new(dim: usize, k: u32, coords: Vec<f64>) -> Result<Self> {
        if !(1..=4).contains(&dim) {
            return Err(LabError::Geometry(format!(
                "parameter dimension {dim} outside 1..=4"
            )));
        }
        let scale = GridScale::new(k)?;
        if coords.len() % dim != 0 {
            return Err(LabError::Format(format!(
                "{} coordinates do not tile dimension {dim}",
                coords.len()
            )));
        }
        if coords.iter().any(|c| !(-1e-9..=1.0 + 1e-9).contains(c)) {
            return Err(LabError::Geometry(
                "parameter points must lie in the unit cube".into(),
            ));
        }
        Ok(ParamPointSet { dim, scale, coords })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale(&self) -> GridScale {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_points(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    fn cell_key(&self, p: &[f64], cell: f64) -> [i64; 4] {
        let mut key = [0i64; 4];
        for (d, &x) in p.iter().enumerate() {
            key[d] = (x / cell).floor() as i64;
        }
        key
    }

    /// Covering number at scale δ: the number of distinct δ-cells touched.
    pub fn covering_number(&self) -> usize {
        let delta = self.scale.delta();
        let mut cells: Vec<[i64; 4]> =
            self.iter_points().map(|p| self.cell_key(p, delta)).collect();
        cells.sort_unstable();
        cells.dedup();
        cells.len()
    }
}

/// Non-concentration convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Concentration {
    /// `count(B(x,r)) ≤ C·(r/δ)^s`
    KatzTao,
    /// `count(B(x,r)) ≤ C·r^s·count(all)`
    Frostman,
}

/// Smallest constant C making the chosen non-concentration inequality hold
/// over all dyadic `r ∈ [δ, 1]` and Euclidean balls centered on an
/// `r/2`-lattice, counting occupied δ-cells inside each ball.
pub fn nonconcentration_error(p: &ParamPointSet, s: f64, mode: Concentration) -> Result<f64> {
    if p.is_empty() {
        return Err(LabError::Geometry("empty parameter point set".into()));
    }
    if !(s > 0.0 && s <= p.dim() as f64) {
        return Err(LabError::Geometry(format!(
            "exponent {s} outside (0, {}]",
            p.dim()
        )));
    }
    let delta = p.scale().delta();
    let total = p.covering_number() as f64;
    let dim = p.dim();

    let mut worst = 0.0f64;
    let mut r = delta;
    while r <= 1.0 + 1e-12 {
        let half = r / 2.0;
        // Bucket points by half-r cell; candidate centers are the lattice
        // points within two buckets of any occupied bucket (|x - p| ≤ r
        // moves the key by at most 2 per coordinate).
        let mut buckets: HashMap<[i64; 4], Vec<usize>> = HashMap::new();
        for (i, pt) in p.iter_points().enumerate() {
            buckets.entry(p.cell_key(pt, half)).or_default().push(i);
        }
        let mut centers: Vec<[i64; 4]> = Vec::new();
        for key in buckets.keys() {
            let mut stack = vec![[0i64; 4]];
            for d in 0..dim {
                let mut next = Vec::with_capacity(stack.len() * 5);
                for base in &stack {
                    for off in -2..=2i64 {
                        let mut nk = *base;
                        nk[d] = key[d] + off;
                        next.push(nk);
                    }
                }
                stack = next;
            }
            centers.extend(stack);
        }
        centers.sort_unstable();
        centers.dedup();

        let best_count = centers
            .par_iter()
            .map(|ck| {
                let mut center = [0.0f64; 4];
                for d in 0..dim {
                    center[d] = ck[d] as f64 * half;
                }
                // Points within Euclidean r of the lattice center, pulled
                // from the neighboring buckets, deduplicated by δ-cell.
                let mut cells: Vec<[i64; 4]> = Vec::new();
                let mut stack = vec![[0i64; 4]];
                for d in 0..dim {
                    let mut next = Vec::with_capacity(stack.len() * 5);
                    for base in &stack {
                        for off in -2..=2i64 {
                            let mut nk = *base;
                            nk[d] = ck[d] + off;
                            next.push(nk);
                        }
                    }
                    stack = next;
                }
                for bk in &stack {
                    if let Some(idxs) = buckets.get(bk) {
                        for &i in idxs {
                            let pt = p.point(i);
                            let dist2: f64 = pt
                                .iter()
                                .zip(&center[..dim])
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum();
                            if dist2 <= r * r * (1.0 + 1e-12) {
                                cells.push(p.cell_key(pt, delta));
                            }
                        }
                    }
                }
                cells.sort_unstable();
                cells.dedup();
                cells.len()
            })
            .max()
            .unwrap_or(0);

        if best_count > 0 {
            let ratio = match mode {
                Concentration::KatzTao => best_count as f64 / (r / delta).powf(s),
                Concentration::Frostman => best_count as f64 / (r.powf(s) * total),
            };
            worst = worst.max(ratio);
        }
        r *= 2.0;
    }
    Ok(worst)
}

/// Outcome bookkeeping for [`uniform_refine`].
#[derive(Clone, Debug)]
pub struct RefineReport {
    /// Scale actually used: δ snapped down to a whole number of ladder steps.
    pub snapped_k: u32,
    /// Exact kept branching per ladder level, coarse to fine.
    pub branching: Vec<u32>,
    /// Kept fraction of the δ covering number.
    pub retention: f64,
}

/// Refine to a uniform subset over the dyadic ladder of step `2^{-q}`,
/// `q = ⌈1/η⌉`: afterwards every occupied ladder cell at a given level
/// holds exactly the same number of occupied δ-cells (so any two agree
/// within the factor-100 uniformity requirement with room to spare).
///
/// Working from the finest ladder level upward, parents are pigeonholed
/// into dyadic bands by child count; the band retaining the most δ-cells
/// is kept and each surviving parent is trimmed to exactly `2^b` children
/// (key order breaks ties — by the time a level is processed all its
/// subtrees already hold equal mass). Coarser-level deletions then only
/// remove whole uniform subtrees, preserving exactness below.
pub fn uniform_refine(p: &ParamPointSet, eta: f64) -> Result<(ParamPointSet, RefineReport)> {
    if p.is_empty() {
        return Err(LabError::Geometry("empty parameter point set".into()));
    }
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(LabError::Geometry(format!("eta {eta} outside (0, 1]")));
    }
    let q = (1.0 / eta).ceil() as u32;
    let k = p.scale().k();
    if k < q {
        return Err(LabError::Infeasible(format!(
            "scale k = {k} is coarser than one ladder step 2^-{q}"
        )));
    }
    let levels = k / q;
    let snapped_k = q * levels;
    let delta = 2f64.powi(-(snapped_k as i32));
    let dim = p.dim();
    let max_idx = (1i64 << snapped_k) - 1;

    // Occupied δ-cells with a representative point index each; clamping the
    // key keeps boundary points (coordinate exactly 1) inside the ladder.
    let mut by_cell: HashMap<[i64; 4], u32> = HashMap::new();
    for (i, pt) in p.iter_points().enumerate() {
        let mut key = [0i64; 4];
        for (d, &x) in pt.iter().enumerate() {
            key[d] = ((x / delta).floor() as i64).clamp(0, max_idx);
        }
        let rep = by_cell.entry(key).or_insert(i as u32);
        *rep = (*rep).min(i as u32);
    }
    let total = by_cell.len();

    let ancestor = |cell: &[i64; 4], levels_up: u32| -> [i64; 4] {
        let mut out = *cell;
        for v in out.iter_mut().take(dim) {
            *v >>= q * levels_up;
        }
        out
    };

    let mut kept: Vec<[i64; 4]> = by_cell.keys().copied().collect();
    kept.sort_unstable();
    let mut branching_rev: Vec<u32> = Vec::new();

    // Finest parents first: at each stage the children (one ladder level
    // below the parents) already have identical δ-cell counts.
    for parent_level in (0..levels).rev() {
        let child_up = levels - (parent_level + 1);
        let mut children: Vec<[i64; 4]> = kept.iter().map(|c| ancestor(c, child_up)).collect();
        children.sort_unstable();
        children.dedup();

        let mut kids_of: HashMap<[i64; 4], Vec<[i64; 4]>> = HashMap::new();
        for ch in children {
            kids_of.entry(ancestor(&ch, 1)).or_default().push(ch);
        }

        // Dyadic band pigeonhole over child counts; score = children kept.
        let max_band = (q as usize * dim).min(62);
        let mut band_score = vec![0u64; max_band + 1];
        for kids in kids_of.values() {
            let b = (kids.len().ilog2() as usize).min(max_band);
            band_score[b] += 1u64 << b;
        }
        let best_band = band_score
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(b, _)| b)
            .expect("at least one band");
        let keep_n = 1usize << best_band;

        let mut kept_children: HashSet<[i64; 4]> = HashSet::new();
        for (_, mut kids) in kids_of {
            if (kids.len().ilog2() as usize).min(max_band) != best_band {
                continue;
            }
            kids.sort_unstable();
            kept_children.extend(kids.into_iter().take(keep_n));
        }
        branching_rev.push(keep_n as u32);
        kept.retain(|c| kept_children.contains(&ancestor(c, child_up)));
        debug_assert!(!kept.is_empty(), "the best band keeps at least one parent");
    }

    let branching: Vec<u32> = branching_rev.into_iter().rev().collect();
    let mut coords = Vec::with_capacity(kept.len() * dim);
    for cell in &kept {
        coords.extend_from_slice(p.point(by_cell[cell] as usize));
    }
    let refined = ParamPointSet::new(dim, snapped_k, coords)?;
    Ok((
        refined,
        RefineReport {
            snapped_k,
            branching,
            retention: kept.len() as f64 / total as f64,
        },
    ))
}
