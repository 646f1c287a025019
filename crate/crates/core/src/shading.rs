//! Shaded families: solids paired with a voxel subset ("shading") of their
//! rasterisation.
//!
//! A shading `Y(S) ⊆ S` models the portion of a solid that carries mass.
//! The module measures densities and multiplicities, prunes shadings to a
//! *regular* state (every ball of the grid-aligned dyadic ball catalog holds
//! at least a `(100·log₂(1/δ))⁻¹`-proportional share of the shading), and
//! extracts uniform-multiplicity refinements by dyadic pigeonholing. Both
//! pruning passes provably retain at least half (regularise) or an inverse-log
//! fraction (pigeonhole) of the shading mass.

use rayon::prelude::*;
use std::collections::HashMap;

use crate::error::{LabError, Result};
use crate::geom::{Prism, Solid, Tube, Vec3};
use crate::voxel::{CellSet, GridScale, VoxelSet};

/// Family member kinds that can be rasterised and shaded.
pub trait LabSolid: Clone + Send + Sync {
    fn as_solid(&self) -> Solid;
}

impl LabSolid for Tube {
    fn as_solid(&self) -> Solid {
        Solid::Tube(self.clone())
    }
}

impl LabSolid for Prism {
    fn as_solid(&self) -> Solid {
        Solid::Prism(self.clone())
    }
}

impl LabSolid for Solid {
    fn as_solid(&self) -> Solid {
        self.clone()
    }
}

/// One solid with its full rasterisation and current shading.
#[derive(Clone, Debug)]
pub struct Shaded<S> {
    solid: S,
    cells: CellSet,
    shading: CellSet,
}

impl<S: LabSolid> Shaded<S> {
    /// Fully shaded solid: `Y(S) = S`.
    pub fn full(scale: GridScale, solid: S) -> Result<Self> {
        let cells = CellSet::rasterize(scale, &solid.as_solid())?;
        if cells.is_empty() {
            return Err(LabError::Shading(format!(
                "solid rasterises to no cells at k = {}",
                scale.k()
            )));
        }
        Ok(Shaded {
            solid,
            shading: cells.clone(),
            cells,
        })
    }

    pub fn with_shading(scale: GridScale, solid: S, shading: CellSet) -> Result<Self> {
        let mut item = Self::full(scale, solid)?;
        item.replace_shading(shading)?;
        Ok(item)
    }

    pub fn solid(&self) -> &S {
        &self.solid
    }

    pub fn cells(&self) -> &CellSet {
        &self.cells
    }

    pub fn shading(&self) -> &CellSet {
        &self.shading
    }

    /// `|Y(S)| / |S|` in voxel counts.
    pub fn density(&self) -> f64 {
        self.shading.len() as f64 / self.cells.len() as f64
    }

    /// Swap in a new shading; it must stay inside the rasterisation.
    pub fn replace_shading(&mut self, shading: CellSet) -> Result<()> {
        if !shading.is_subset_of(&self.cells) {
            return Err(LabError::Shading(
                "shading is not contained in the solid's rasterisation".into(),
            ));
        }
        self.shading = shading;
        Ok(())
    }
}

/// A finite family of shaded solids on a common grid.
#[derive(Clone, Debug)]
pub struct ShadedFamily<S> {
    scale: GridScale,
    items: Vec<Shaded<S>>,
}

impl<S: LabSolid> ShadedFamily<S> {
    /// Rasterise every solid fully shaded (parallel).
    pub fn full(scale: GridScale, solids: Vec<S>) -> Result<Self> {
        let items = solids
            .into_par_iter()
            .map(|s| Shaded::full(scale, s))
            .collect::<Result<Vec<_>>>()?;
        Self::from_items(scale, items)
    }

    pub fn from_items(scale: GridScale, items: Vec<Shaded<S>>) -> Result<Self> {
        if items.is_empty() {
            return Err(LabError::Shading("empty shaded family".into()));
        }
        CellSet::check_scale(scale)?;
        Ok(ShadedFamily { scale, items })
    }

    pub fn scale(&self) -> GridScale {
        self.scale
    }

    pub fn items(&self) -> &[Shaded<S>] {
        &self.items
    }

    pub fn items_mut(&mut self) -> &mut [Shaded<S>] {
        &mut self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Σ |S| over the family, in voxels.
    pub fn total_cells(&self) -> u64 {
        self.items.iter().map(|i| i.cells.len() as u64).sum()
    }

    /// Σ |Y(S)| over the family, in voxels.
    pub fn total_shading(&self) -> u64 {
        self.items.iter().map(|i| i.shading.len() as u64).sum()
    }

    /// Family shading density `Σ|Y| / Σ|S|` plus the per-item densities.
    pub fn density(&self) -> (f64, Vec<f64>) {
        let per: Vec<f64> = self.items.iter().map(|i| i.density()).collect();
        let total = self.total_shading() as f64 / self.total_cells() as f64;
        (total, per)
    }

    /// Union of the shadings as a dense grid.
    pub fn union_shading(&self) -> Result<VoxelSet> {
        let mut out = VoxelSet::empty(self.scale)?;
        for item in &self.items {
            for &c in item.shading.indices() {
                let (ix, iy, iz) = CellSet::unpack(self.scale, c);
                out.set(ix, iy, iz);
            }
        }
        Ok(out)
    }

    /// Union of the full rasterisations as a dense grid.
    pub fn union_cells(&self) -> Result<VoxelSet> {
        let mut out = VoxelSet::empty(self.scale)?;
        for item in &self.items {
            for &c in item.cells.indices() {
                let (ix, iy, iz) = CellSet::unpack(self.scale, c);
                out.set(ix, iy, iz);
            }
        }
        Ok(out)
    }

    /// Multiplicity of the shadings: how many members shade each cell.
    pub fn multiplicity(&self) -> MultiplicityField {
        MultiplicityField::from_shadings(self.scale, self.items.iter().map(|i| &i.shading))
    }

    /// Remove the Euclidean ball `B(center, r)` from every shading; returns
    /// the number of voxels removed (counted with multiplicity).
    pub fn delete_ball(&mut self, center: Vec3, r: f64) -> u64 {
        let scale = self.scale;
        let r2 = r * r;
        self.items
            .par_iter_mut()
            .map(|item| {
                let before = item.shading.len();
                item.shading.retain(|c| {
                    (CellSet::cell_center(scale, c) - center).norm_squared() > r2
                });
                (before - item.shading.len()) as u64
            })
            .sum()
    }
}

/// Sparse per-cell multiplicity (sorted by cell index).
#[derive(Clone, Debug)]
pub struct MultiplicityField {
    scale: GridScale,
    entries: Vec<(u32, u32)>,
}

impl MultiplicityField {
    pub fn from_shadings<'a, I: Iterator<Item = &'a CellSet>>(
        scale: GridScale,
        shadings: I,
    ) -> Self {
        let mut all: Vec<u32> = Vec::new();
        for s in shadings {
            all.extend_from_slice(s.indices());
        }
        all.sort_unstable();
        let mut entries = Vec::new();
        let mut i = 0;
        while i < all.len() {
            let c = all[i];
            let mut j = i;
            while j < all.len() && all[j] == c {
                j += 1;
            }
            entries.push((c, (j - i) as u32));
            i = j;
        }
        MultiplicityField { scale, entries }
    }

    pub fn scale(&self) -> GridScale {
        self.scale
    }

    pub fn entries(&self) -> &[(u32, u32)] {
        &self.entries
    }

    pub fn get(&self, cell: u32) -> u32 {
        match self.entries.binary_search_by_key(&cell, |e| e.0) {
            Ok(i) => self.entries[i].1,
            Err(_) => 0,
        }
    }

    pub fn max_count(&self) -> u32 {
        self.entries.iter().map(|e| e.1).max().unwrap_or(0)
    }

    /// Occupied cells (multiplicity ≥ 1).
    pub fn support_len(&self) -> usize {
        self.entries.len()
    }

    /// Dyadic histogram: for each band `b` with counts in `[2^b, 2^{b+1})`,
    /// the number of cells and the total mass (Σ counts) in the band.
    pub fn dyadic_histogram(&self) -> Vec<(u32, u64, u64)> {
        let mut bands: HashMap<u32, (u64, u64)> = HashMap::new();
        for &(_, m) in &self.entries {
            let b = 31 - m.leading_zeros();
            let e = bands.entry(b).or_insert((0, 0));
            e.0 += 1;
            e.1 += m as u64;
        }
        let mut out: Vec<(u32, u64, u64)> =
            bands.into_iter().map(|(b, (c, m))| (b, c, m)).collect();
        out.sort_unstable();
        out
    }
}

/// Dyadic pigeonhole to uniform multiplicity.
///
/// Picks the dyadic band `[μ, 2μ)` of shading multiplicity that retains the
/// most mass and restricts every shading to cells in that band. The refined
/// family has multiplicity within a factor 2 everywhere and retains at least
/// a `1/(2·log₂(#family) + 2)` fraction of the shading mass.
pub fn pigeonhole_uniform<S: LabSolid>(
    family: &ShadedFamily<S>,
) -> Result<(u32, ShadedFamily<S>)> {
    let mult = family.multiplicity();
    if mult.entries().is_empty() {
        return Err(LabError::Shading(
            "cannot pigeonhole an empty shading".into(),
        ));
    }
    let hist = mult.dyadic_histogram();
    // Winner: maximal retained mass, ties to the smaller band.
    let &(band, _, _) = hist
        .iter()
        .max_by(|a, b| a.2.cmp(&b.2).then(b.0.cmp(&a.0)))
        .expect("non-empty histogram");
    let mu = 1u32 << band;
    let keep: Vec<u32> = mult
        .entries()
        .iter()
        .filter(|&&(_, m)| m >= mu && m < 2 * mu)
        .map(|&(c, _)| c)
        .collect();
    let keep = CellSet::from_sorted(keep);
    let mut refined = family.clone();
    for item in refined.items_mut() {
        let inter = item.shading().intersect(&keep);
        item.replace_shading(inter)?;
    }
    Ok((mu, refined))
}

// ---------------------------------------------------------------------------
// Regularisation
// ---------------------------------------------------------------------------

/// Catalog of grid-aligned dyadic balls: for each dyadic radius `r = 2^j·δ`
/// up to 1, the Euclidean balls of radius `r` centred at the centres of the
/// `r`-box partition of the domain.
///
/// A shading is *regular* when every catalog ball meeting it holds its
/// proportional share: `|Y ∩ B| ≥ c·|Y|·|S ∩ B|/|S|` with
/// `c = (100·log₂(1/δ))⁻¹`.
fn regularity_constant(scale: GridScale) -> f64 {
    1.0 / (100.0 * scale.k() as f64)
}

/// Pack a box index at level `j` (boxes of side `2^j` cells).
fn box_of(scale: GridScale, cell: u32, j: u32) -> u32 {
    let (ix, iy, iz) = CellSet::unpack(scale, cell);
    let nb = (scale.n() >> j) as u32;
    ((iz >> j) as u32 * nb + (iy >> j) as u32) * nb + (ix >> j) as u32
}

fn box_center(scale: GridScale, bidx: u32, j: u32) -> Vec3 {
    let nb = (scale.n() >> j) as u32;
    let bx = bidx % nb;
    let by = (bidx / nb) % nb;
    let bz = bidx / (nb * nb);
    let side = scale.delta() * (1u32 << j) as f64;
    Vec3::new(
        -1.0 + (bx as f64 + 0.5) * side,
        -1.0 + (by as f64 + 0.5) * side,
        -1.0 + (bz as f64 + 0.5) * side,
    )
}

/// Neighbouring box indices (Chebyshev distance ≤ 1) at level `j`.
fn neighbor_boxes(scale: GridScale, bidx: u32, j: u32) -> Vec<u32> {
    let nb = (scale.n() >> j) as i64;
    let bx = (bidx as i64) % nb;
    let by = ((bidx as i64) / nb) % nb;
    let bz = (bidx as i64) / (nb * nb);
    let mut out = Vec::with_capacity(27);
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (x, y, z) = (bx + dx, by + dy, bz + dz);
                if x >= 0 && x < nb && y >= 0 && y < nb && z >= 0 && z < nb {
                    out.push(((z * nb + y) * nb + x) as u32);
                }
            }
        }
    }
    out
}

fn bucket_by_box(scale: GridScale, cells: &CellSet, j: u32) -> HashMap<u32, Vec<u32>> {
    let mut map: HashMap<u32, Vec<u32>> = HashMap::new();
    for &c in cells.indices() {
        map.entry(box_of(scale, c, j)).or_default().push(c);
    }
    map
}

/// Cells of `bucketed` within Euclidean distance `r` of `center`, searched in
/// the 3³ box neighbourhood of the ball's own box.
fn cells_in_ball(
    scale: GridScale,
    buckets: &HashMap<u32, Vec<u32>>,
    bidx: u32,
    j: u32,
    center: Vec3,
    r: f64,
) -> Vec<u32> {
    let r2 = r * r;
    let mut out = Vec::new();
    for nb in neighbor_boxes(scale, bidx, j) {
        if let Some(cells) = buckets.get(&nb) {
            for &c in cells {
                if (CellSet::cell_center(scale, c) - center).norm_squared() <= r2 {
                    out.push(c);
                }
            }
        }
    }
    out
}

/// One regularisation pass over a single item; returns the violating cells
/// to delete (empty when the item is already regular).
fn regularity_violations(
    scale: GridScale,
    cells: &CellSet,
    shading: &CellSet,
) -> Vec<u32> {
    if shading.is_empty() {
        return Vec::new();
    }
    let c_reg = regularity_constant(scale);
    let y_tot = shading.len() as f64;
    let s_tot = cells.len() as f64;
    let mut doomed: Vec<u32> = Vec::new();
    for j in 0..=scale.k() {
        let r = scale.delta() * (1u32 << j) as f64;
        let y_buckets = bucket_by_box(scale, shading, j);
        let s_buckets = bucket_by_box(scale, cells, j);
        // Candidate balls: every box whose ball could meet the shading.
        let mut candidates: Vec<u32> = y_buckets
            .keys()
            .flat_map(|&b| neighbor_boxes(scale, b, j))
            .collect();
        candidates.sort_unstable();
        candidates.dedup();
        for b in candidates {
            let center = box_center(scale, b, j);
            let y_in = cells_in_ball(scale, &y_buckets, b, j, center, r);
            if y_in.is_empty() {
                continue;
            }
            let s_in = cells_in_ball(scale, &s_buckets, b, j, center, r).len() as f64;
            let need = c_reg * y_tot * s_in / s_tot;
            if (y_in.len() as f64) < need - 1e-12 {
                doomed.extend(y_in);
            }
        }
    }
    doomed.sort_unstable();
    doomed.dedup();
    doomed
}

/// Prune every shading to a regular one (fixed point of violation deletion).
///
/// Retains more than half of each item's shading mass: every deleted ball
/// removes less than `c·|Y|·|S∩B|/|S|`, each cell lies in at most 27 balls
/// per scale, and there are `log₂(1/δ) + 1` scales, so the total loss is at
/// most `27·(k+1)/(100k) ≤ 0.405` of the mass.
pub fn regularize<S: LabSolid>(family: &ShadedFamily<S>) -> Result<ShadedFamily<S>> {
    let scale = family.scale();
    let mut out = family.clone();
    out.items_mut()
        .par_iter_mut()
        .try_for_each(|item| -> Result<()> {
            loop {
                let doomed = regularity_violations(scale, item.cells(), item.shading());
                if doomed.is_empty() {
                    return Ok(());
                }
                let keep = item.shading().subtract(&CellSet::from_sorted(doomed));
                item.replace_shading(keep)?;
            }
        })?;
    Ok(out)
}

/// Check regularity of every shading without modifying anything.
pub fn is_regular<S: LabSolid>(family: &ShadedFamily<S>) -> bool {
    let scale = family.scale();
    family
        .items()
        .par_iter()
        .all(|item| regularity_violations(scale, item.cells(), item.shading()).is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Tube;
    use crate::voxel::GridScale;

    fn scale(k: u32) -> GridScale {
        GridScale::new(k).unwrap()
    }

    fn z_tube(x: f64, y: f64, r: f64) -> Tube {
        Tube::new(Vec3::new(x, y, 0.0), Vec3::z(), r).unwrap()
    }

    #[test]
    fn full_family_has_density_one() {
        let fam = ShadedFamily::full(
            scale(4),
            vec![z_tube(0.0, 0.0, 0.1), z_tube(0.3, 0.0, 0.1)],
        )
        .unwrap();
        let (total, per) = fam.density();
        assert_eq!(total, 1.0);
        assert!(per.iter().all(|&d| d == 1.0));
        assert_eq!(fam.total_cells(), fam.total_shading());
    }

    #[test]
    fn shading_must_be_inside_rasterisation() {
        let s = scale(4);
        let bogus = CellSet::from_unsorted(vec![0]);
        // Cell 0 is the domain corner; the central tube misses it.
        assert!(Shaded::with_shading(s, z_tube(0.0, 0.0, 0.1), bogus).is_err());
    }

    #[test]
    fn multiplicity_counts_overlaps_exactly() {
        let s = scale(4);
        let fam = ShadedFamily::full(
            s,
            vec![
                z_tube(0.0, 0.0, 0.1),
                z_tube(0.05, 0.0, 0.1),
                z_tube(0.9, 0.0, 0.05),
            ],
        )
        .unwrap();
        let mult = fam.multiplicity();
        // Brute-force recount.
        let mut expected: HashMap<u32, u32> = HashMap::new();
        for item in fam.items() {
            for &c in item.shading().indices() {
                *expected.entry(c).or_insert(0) += 1;
            }
        }
        assert_eq!(mult.entries().len(), expected.len());
        for &(c, m) in mult.entries() {
            assert_eq!(expected[&c], m);
        }
        assert!(mult.max_count() >= 2, "overlapping tubes must overlap");
        let mass: u64 = mult.entries().iter().map(|e| e.1 as u64).sum();
        assert_eq!(mass, fam.total_shading());
    }

    #[test]
    fn pigeonhole_gives_two_uniform_multiplicity() {
        let s = scale(4);
        // A bundle of nine overlapping tubes plus one isolated tube: bands
        // {1} and higher both occur.
        let mut tubes = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                tubes.push(z_tube(0.02 * i as f64, 0.02 * j as f64, 0.1));
            }
        }
        tubes.push(z_tube(0.85, 0.0, 0.05));
        let fam = ShadedFamily::full(s, tubes).unwrap();
        let before = fam.total_shading();
        let (mu, refined) = pigeonhole_uniform(&fam).unwrap();
        let mult = refined.multiplicity();
        for &(_, m) in mult.entries() {
            assert!(m >= mu && m < 2 * mu, "count {m} outside [{mu}, {})", 2 * mu);
        }
        // Retention bound: at least 1/(2·log₂(#f) + 2) of the mass.
        let retained = refined.total_shading();
        let bound = before as f64 / (2.0 * (fam.len() as f64).log2() + 2.0);
        assert!(retained as f64 >= bound, "retained {retained} < bound {bound}");
    }

    #[test]
    fn fully_shaded_tube_is_regular() {
        let fam = ShadedFamily::full(scale(4), vec![z_tube(0.0, 0.0, 0.08)]).unwrap();
        assert!(is_regular(&fam));
    }

    #[test]
    fn regularize_prunes_isolated_speck_and_keeps_half() {
        // Regularity only bites when the proportional share of a ball
        // exceeds a whole voxel, so the solid must be large: a cube of side
        // 1.5 (48³ cells at k = 5) shaded on its top slab plus one isolated
        // speck near the bottom. The r = 1/2 catalog ball around the speck
        // then demands ≈ 5 shading cells but holds 1.
        let s = scale(5);
        let cube = Prism::from_half_dims(
            Vec3::zeros(),
            [Vec3::x(), Vec3::y(), Vec3::z()],
            [0.75, 0.75, 0.75],
        )
        .unwrap();
        let full = Shaded::full(s, cube.clone()).unwrap();
        assert_eq!(full.cells().len(), 48 * 48 * 48);
        let top: Vec<u32> = full
            .cells()
            .indices()
            .iter()
            .copied()
            .filter(|&c| CellSet::cell_center(s, c).z > 0.3)
            .collect();
        let speck = *full
            .cells()
            .indices()
            .iter()
            .find(|&&c| {
                let p = CellSet::cell_center(s, c);
                (p - Vec3::new(-0.1, -0.1, -0.7)).norm() < 0.03
            })
            .unwrap();
        let mut shading = top.clone();
        shading.push(speck);
        let item = Shaded::with_shading(s, cube, CellSet::from_unsorted(shading)).unwrap();
        let fam = ShadedFamily::from_items(s, vec![item]).unwrap();
        assert!(!is_regular(&fam));
        let reg = regularize(&fam).unwrap();
        assert!(is_regular(&reg));
        let kept = &reg.items()[0];
        // The speck dies, the bulk survives, at least half the mass remains.
        assert!(!kept.shading().contains(speck));
        assert!(kept.shading().len() * 2 > fam.total_shading() as usize);
    }

    #[test]
    fn delete_ball_removes_exactly_the_ball() {
        let s = scale(4);
        let mut fam = ShadedFamily::full(s, vec![z_tube(0.0, 0.0, 0.1)]).unwrap();
        let before = fam.total_shading();
        let removed = fam.delete_ball(Vec3::new(0.0, 0.0, 0.0), 0.2);
        assert!(removed > 0);
        assert_eq!(fam.total_shading() + removed, before);
        for item in fam.items() {
            for &c in item.shading().indices() {
                assert!((CellSet::cell_center(s, c)).norm() > 0.2);
            }
        }
    }
}
