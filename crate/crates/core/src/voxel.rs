//! Voxelisation over the cube `[-1,1]^3` at dyadic resolution.
//!
//! A grid of scale `δ = 2^{-k}` has `n = 2^{k+1}` cells per axis; a cell is
//! occupied when a membership test accepts its centre. Dilation is the
//! Chebyshev (L∞) dilation by `m = ⌈ρ/δ⌉` cells, computed separably per axis
//! with a doubling trick; it clips silently at the domain boundary and is
//! comparable to the Euclidean ρ-neighbourhood within a factor √3.
//! Covering numbers count occupied grid-aligned dyadic boxes, evaluated by
//! OR-downsampling. Ball densities are exact: Euclidean balls are enumerated
//! row-by-row from the circle equation.

use std::io::{Read, Write};

use crate::error::{LabError, Result};
use crate::geom::{dyadic_exponent, Solid, Vec3};

/// Dyadic grid scale `δ = 2^{-k}` with `k` in `[2, 12]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridScale {
    k: u32,
}

impl GridScale {
    pub fn new(k: u32) -> Result<Self> {
        if !(2..=12).contains(&k) {
            return Err(LabError::ScaleRange(k));
        }
        Ok(GridScale { k })
    }

    /// Parse a scale from its float value; the value must be an exact power
    /// of two in range.
    pub fn from_delta(delta: f64) -> Result<Self> {
        let e = dyadic_exponent(delta).ok_or(LabError::ScaleNotDyadic(delta))?;
        if e > -2 || e < -12 {
            return Err(LabError::ScaleRange((-e).max(0) as u32));
        }
        Self::new((-e) as u32)
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn delta(&self) -> f64 {
        2f64.powi(-(self.k as i32))
    }

    /// Cells per axis over `[-1, 1]`.
    pub fn n(&self) -> usize {
        1usize << (self.k + 1)
    }

    /// Centre coordinate of cell `i` along one axis.
    pub fn cell_center(&self, i: usize) -> f64 {
        -1.0 + (i as f64 + 0.5) * self.delta()
    }

    /// Cell index containing coordinate `x`, if inside `[-1, 1)`.
    pub fn cell_of(&self, x: f64) -> Option<usize> {
        let t = (x + 1.0) / self.delta();
        if t < 0.0 {
            return None;
        }
        let i = t.floor() as usize;
        (i < self.n()).then_some(i)
    }

    /// Clamped cell range `[lo, hi]` whose centres lie in `[a, b]`.
    /// Returns `None` when no centre falls in the interval.
    pub fn cell_range(&self, a: f64, b: f64) -> Option<(usize, usize)> {
        let d = self.delta();
        let lo = ((a + 1.0) / d - 0.5).ceil().max(0.0);
        let hi = ((b + 1.0) / d - 0.5).floor().min((self.n() - 1) as f64);
        if lo > hi || hi < 0.0 {
            return None;
        }
        Some((lo as usize, hi as usize))
    }
}

fn words_per_row(n: usize) -> usize {
    n.div_ceil(64)
}

fn tail_mask(n: usize) -> u64 {
    if n % 64 == 0 {
        u64::MAX
    } else {
        (1u64 << (n % 64)) - 1
    }
}

/// Dense bit grid over `[-1,1]^3`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelSet {
    scale: GridScale,
    wpr: usize,
    words: Vec<u64>,
}

impl VoxelSet {
    pub fn empty(scale: GridScale) -> Result<Self> {
        let n = scale.n();
        let wpr = words_per_row(n);
        let total = n
            .checked_mul(n)
            .and_then(|nn| nn.checked_mul(wpr))
            .ok_or_else(|| LabError::Geometry("grid too large".into()))?;
        if total > (1usize << 28) {
            // 2^28 words = 2 GiB of bits; dense grids beyond k = 9 are out.
            return Err(LabError::Geometry(format!(
                "dense grid at k = {} exceeds the storage budget",
                scale.k()
            )));
        }
        Ok(VoxelSet {
            scale,
            wpr,
            words: vec![0u64; total],
        })
    }

    pub fn scale(&self) -> GridScale {
        self.scale
    }

    fn row_index(&self, iy: usize, iz: usize) -> usize {
        (iz * self.scale.n() + iy) * self.wpr
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> bool {
        let row = self.row_index(iy, iz);
        (self.words[row + ix / 64] >> (ix % 64)) & 1 == 1
    }

    pub fn set(&mut self, ix: usize, iy: usize, iz: usize) {
        let row = self.row_index(iy, iz);
        self.words[row + ix / 64] |= 1u64 << (ix % 64);
    }

    pub fn clear_cell(&mut self, ix: usize, iy: usize, iz: usize) {
        let row = self.row_index(iy, iz);
        self.words[row + ix / 64] &= !(1u64 << (ix % 64));
    }

    /// Set the contiguous cell range `[lo, hi]` in row `(iy, iz)`.
    pub fn set_row_range(&mut self, iy: usize, iz: usize, lo: usize, hi: usize) {
        let row = self.row_index(iy, iz);
        set_range_in_row(&mut self.words[row..row + self.wpr], lo, hi);
    }

    pub fn count(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn is_empty_set(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    /// Occupied volume in `δ³` units times `δ³` (i.e. Lebesgue measure of the
    /// occupied cells).
    pub fn volume(&self) -> f64 {
        self.count() as f64 * self.scale.delta().powi(3)
    }

    pub fn union_with(&mut self, other: &VoxelSet) -> Result<()> {
        self.check_same_scale(other)?;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
        Ok(())
    }

    pub fn intersect_with(&mut self, other: &VoxelSet) -> Result<()> {
        self.check_same_scale(other)?;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a &= b;
        }
        Ok(())
    }

    pub fn subtract(&mut self, other: &VoxelSet) -> Result<()> {
        self.check_same_scale(other)?;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a &= !b;
        }
        Ok(())
    }

    pub fn is_subset_of(&self, other: &VoxelSet) -> Result<bool> {
        self.check_same_scale(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .all(|(a, b)| a & !b == 0))
    }

    fn check_same_scale(&self, other: &VoxelSet) -> Result<()> {
        if self.scale != other.scale {
            return Err(LabError::ScaleMismatch(format!(
                "voxel grids at k = {} and k = {}",
                self.scale.k(),
                other.scale.k()
            )));
        }
        Ok(())
    }

    /// Iterate occupied cells as `(ix, iy, iz)`.
    pub fn iter_cells(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let n = self.scale.n();
        let wpr = self.wpr;
        (0..n * n).flat_map(move |row| {
            let iz = row / n;
            let iy = row % n;
            let base = row * wpr;
            (0..wpr).flat_map(move |wi| {
                let mut w = self.words[base + wi];
                std::iter::from_fn(move || {
                    if w == 0 {
                        return None;
                    }
                    let b = w.trailing_zeros() as usize;
                    w &= w - 1;
                    Some((wi * 64 + b, iy, iz))
                })
            })
        })
    }

    /// Chebyshev dilation by `⌈ρ/δ⌉` cells per axis. `ρ` must be at least the
    /// grid scale.
    pub fn dilate(&self, rho: f64) -> Result<VoxelSet> {
        let delta = self.scale.delta();
        if rho < delta {
            return Err(LabError::SubGridDilation { rho, delta });
        }
        let m = (rho / delta).ceil() as usize;
        let mut out = self.clone();
        out.dilate_cells_in_place(m);
        Ok(out)
    }

    /// Dilation by an explicit cell count (internal building block).
    pub fn dilate_cells(&self, m: usize) -> VoxelSet {
        let mut out = self.clone();
        out.dilate_cells_in_place(m);
        out
    }

    fn dilate_cells_in_place(&mut self, m: usize) {
        if m == 0 {
            return;
        }
        self.dilate_axis_x(m);
        self.dilate_axis_rows(m, Axis::Y);
        self.dilate_axis_rows(m, Axis::Z);
    }

    /// 1D dilation along x inside each row: doubling trick
    /// `y ← y | (y << s) | (y >> s)` with `s = min(done + 1, m − done)`;
    /// after each step the accumulated window `[-done, done]` is contiguous.
    fn dilate_axis_x(&mut self, m: usize) {
        let n = self.scale.n();
        let wpr = self.wpr;
        let mask = tail_mask(n);
        let mut scratch = vec![0u64; wpr];
        let rows = n * n;
        for row in 0..rows {
            let base = row * wpr;
            let cur = &mut self.words[base..base + wpr];
            let mut done = 0usize;
            while done < m {
                let s = (done + 1).min(m - done);
                scratch.copy_from_slice(cur);
                or_shifted_row(cur, &scratch, s as i64);
                or_shifted_row(cur, &scratch, -(s as i64));
                done += s;
            }
            if wpr > 0 {
                cur[wpr - 1] &= mask;
            }
        }
    }

    /// Dilation along y or z: shifting by whole rows/planes, so the doubling
    /// steps are word-aligned ORs of block-offset copies.
    fn dilate_axis_rows(&mut self, m: usize, axis: Axis) {
        let n = self.scale.n();
        let wpr = self.wpr;
        // Stride (in rows) between consecutive indices along the axis, and
        // the block layout: y-neighbours are adjacent rows within a plane,
        // z-neighbours are whole planes apart.
        let mut done = 0usize;
        while done < m {
            let s = (done + 1).min(m - done);
            let src = self.words.clone();
            match axis {
                Axis::Y => {
                    for iz in 0..n {
                        for iy in 0..n {
                            let dst = (iz * n + iy) * wpr;
                            if iy >= s {
                                let from = (iz * n + iy - s) * wpr;
                                or_rows(&mut self.words[dst..dst + wpr], &src[from..from + wpr]);
                            }
                            if iy + s < n {
                                let from = (iz * n + iy + s) * wpr;
                                or_rows(&mut self.words[dst..dst + wpr], &src[from..from + wpr]);
                            }
                        }
                    }
                }
                Axis::Z => {
                    let plane = n * wpr;
                    for iz in 0..n {
                        let dst = iz * plane;
                        if iz >= s {
                            let from = (iz - s) * plane;
                            or_rows(&mut self.words[dst..dst + plane], &src[from..from + plane]);
                        }
                        if iz + s < n {
                            let from = (iz + s) * plane;
                            or_rows(&mut self.words[dst..dst + plane], &src[from..from + plane]);
                        }
                    }
                }
            }
            done += s;
        }
    }

    /// Number of grid-aligned dyadic boxes of side `r` meeting the set.
    /// `r` must be dyadic in `[δ, 2]`.
    pub fn covering_number(&self, r: f64) -> Result<u64> {
        let e = dyadic_exponent(r).ok_or(LabError::ScaleNotDyadic(r))?;
        let k = self.scale.k() as i32;
        if !(-k..=1).contains(&e) {
            return Err(LabError::ScaleMismatch(format!(
                "covering side {r} outside [delta, 2]"
            )));
        }
        let levels = self.covering_profile();
        Ok(levels[(e + k) as usize].1)
    }

    /// `(r, N(E, r))` for every dyadic box side from `δ` up to `2`,
    /// via an OR-downsample pyramid.
    pub fn covering_profile(&self) -> Vec<(f64, u64)> {
        let mut out = Vec::new();
        let mut cur = self.to_bool_grid();
        let mut n = self.scale.n();
        let mut r = self.scale.delta();
        loop {
            let count = cur.iter().filter(|&&b| b).count() as u64;
            out.push((r, count));
            if n == 1 {
                break;
            }
            let half = n / 2;
            let mut next = vec![false; half * half * half];
            for iz in 0..n {
                for iy in 0..n {
                    for ix in 0..n {
                        if cur[(iz * n + iy) * n + ix] {
                            next[((iz / 2) * half + iy / 2) * half + ix / 2] = true;
                        }
                    }
                }
            }
            cur = next;
            n = half;
            r *= 2.0;
        }
        out
    }

    fn to_bool_grid(&self) -> Vec<bool> {
        let n = self.scale.n();
        let mut out = vec![false; n * n * n];
        for (ix, iy, iz) in self.iter_cells() {
            out[(iz * n + iy) * n + ix] = true;
        }
        out
    }

    /// Fraction of the Euclidean ball `B(center, r)` (clipped to the domain)
    /// covered by the Chebyshev `ρ`-dilation of the set, in voxel measure.
    pub fn ball_density(&self, center: Vec3, r: f64, rho: f64) -> Result<f64> {
        let delta = self.scale.delta();
        if r < delta {
            return Err(LabError::SubGridRadius { r, delta });
        }
        let dilated = self.dilate(rho)?;
        let (hit, ball) = dilated.ball_counts(center, r);
        if ball == 0 {
            return Err(LabError::Geometry(format!(
                "ball at {center:?} with radius {r} contains no grid cell"
            )));
        }
        Ok(hit as f64 / ball as f64)
    }

    /// Exact `(occupied, total)` voxel counts of the Euclidean ball
    /// `B(center, r)` clipped to the domain, enumerated row by row.
    pub fn ball_counts(&self, center: Vec3, r: f64) -> (u64, u64) {
        let scale = self.scale;
        let mut hit = 0u64;
        let mut total = 0u64;
        let Some((zlo, zhi)) = scale.cell_range(center.z - r, center.z + r) else {
            return (0, 0);
        };
        for iz in zlo..=zhi {
            let dz = scale.cell_center(iz) - center.z;
            let ry2 = r * r - dz * dz;
            if ry2 < 0.0 {
                continue;
            }
            let ry = ry2.sqrt();
            let Some((ylo, yhi)) = scale.cell_range(center.y - ry, center.y + ry) else {
                continue;
            };
            for iy in ylo..=yhi {
                let dy = scale.cell_center(iy) - center.y;
                let rx2 = ry2 - dy * dy;
                if rx2 < 0.0 {
                    continue;
                }
                let rx = rx2.sqrt();
                let Some((xlo, xhi)) = scale.cell_range(center.x - rx, center.x + rx) else {
                    continue;
                };
                total += (xhi - xlo + 1) as u64;
                hit += self.count_row_range(iy, iz, xlo, xhi);
            }
        }
        (hit, total)
    }

    /// Popcount of the cell range `[lo, hi]` in row `(iy, iz)`.
    pub fn count_row_range(&self, iy: usize, iz: usize, lo: usize, hi: usize) -> u64 {
        let base = self.row_index(iy, iz);
        let row = &self.words[base..base + self.wpr];
        let (wl, bl) = (lo / 64, lo % 64);
        let (wh, bh) = (hi / 64, hi % 64);
        if wl == wh {
            let mask = (u64::MAX << bl) & (u64::MAX >> (63 - bh));
            return (row[wl] & mask).count_ones() as u64;
        }
        let mut acc = (row[wl] & (u64::MAX << bl)).count_ones() as u64;
        for w in &row[wl + 1..wh] {
            acc += w.count_ones() as u64;
        }
        acc + (row[wh] & (u64::MAX >> (63 - bh))).count_ones() as u64
    }

    // -- binary container ---------------------------------------------------

    /// Serialise: 16-byte header (`KVOX`, version, dims, k, reserved, word
    /// count LE) followed by the raw words, little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_container(w, 3, self.scale.k(), &self.words)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (dims, k, words) = read_container(r)?;
        if dims != 3 {
            return Err(LabError::Format(format!(
                "expected a 3D voxel container, found dims = {dims}"
            )));
        }
        let scale = GridScale::new(k)?;
        let expect = {
            let n = scale.n();
            n * n * words_per_row(n)
        };
        if words.len() != expect {
            return Err(LabError::Format(format!(
                "voxel container holds {} words, expected {expect}",
                words.len()
            )));
        }
        Ok(VoxelSet {
            scale,
            wpr: words_per_row(scale.n()),
            words,
        })
    }
}

enum Axis {
    Y,
    Z,
}

fn or_rows(dst: &mut [u64], src: &[u64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a |= b;
    }
}

/// OR `src` shifted by `s` cells (positive = towards higher indices) into
/// `dst`; both are single rows of equal word length.
fn or_shifted_row(dst: &mut [u64], src: &[u64], s: i64) {
    let w = dst.len();
    let (wordoff, bitoff) = (s.unsigned_abs() as usize / 64, s.unsigned_abs() as usize % 64);
    if s >= 0 {
        for i in (0..w).rev() {
            if i < wordoff {
                break;
            }
            let lo = src[i - wordoff] << bitoff;
            let hi = if bitoff > 0 && i > wordoff {
                src[i - wordoff - 1] >> (64 - bitoff)
            } else {
                0
            };
            dst[i] |= lo | hi;
        }
    } else {
        for i in 0..w {
            if i + wordoff >= w {
                break;
            }
            let lo = src[i + wordoff] >> bitoff;
            let hi = if bitoff > 0 && i + wordoff + 1 < w {
                src[i + wordoff + 1] << (64 - bitoff)
            } else {
                0
            };
            dst[i] |= lo | hi;
        }
    }
}

fn set_range_in_row(row: &mut [u64], lo: usize, hi: usize) {
    let (wl, bl) = (lo / 64, lo % 64);
    let (wh, bh) = (hi / 64, hi % 64);
    if wl == wh {
        row[wl] |= (u64::MAX << bl) & (u64::MAX >> (63 - bh));
        return;
    }
    row[wl] |= u64::MAX << bl;
    for w in &mut row[wl + 1..wh] {
        *w = u64::MAX;
    }
    row[wh] |= u64::MAX >> (63 - bh);
}

fn write_container<W: Write>(w: &mut W, dims: u8, k: u32, words: &[u64]) -> Result<()> {
    let mut header = [0u8; 16];
    header[0..4].copy_from_slice(b"KVOX");
    header[4] = 1;
    header[5] = dims;
    header[6] = k as u8;
    header[7] = 0;
    header[8..16].copy_from_slice(&(words.len() as u64).to_le_bytes());
    w.write_all(&header)?;
    for word in words {
        w.write_all(&word.to_le_bytes())?;
    }
    Ok(())
}

fn read_container<R: Read>(r: &mut R) -> Result<(u8, u32, Vec<u64>)> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[0..4] != b"KVOX" {
        return Err(LabError::Format("bad voxel container magic".into()));
    }
    if header[4] != 1 {
        return Err(LabError::Format(format!(
            "unsupported voxel container version {}",
            header[4]
        )));
    }
    let dims = header[5];
    if dims != 2 && dims != 3 {
        return Err(LabError::Format(format!(
            "voxel container dims must be 2 or 3, found {dims}"
        )));
    }
    let k = header[6] as u32;
    let count = u64::from_le_bytes(header[8..16].try_into().unwrap());
    if count > (1 << 28) {
        return Err(LabError::Format(format!(
            "voxel container of {count} words exceeds the storage budget"
        )));
    }
    let mut words = vec![0u64; count as usize];
    let mut buf = [0u8; 8];
    for word in &mut words {
        r.read_exact(&mut buf)?;
        *word = u64::from_le_bytes(buf);
    }
    Ok((dims, k, words))
}

// ---------------------------------------------------------------------------
// Rasterisation
// ---------------------------------------------------------------------------

/// Row-interval rasteriser: visits `(iy, iz, xlo, xhi)` for every maximal
/// run of cells whose centres lie in the solid. Exact for tubes (per-row
/// quadratic) and prisms (per-row slab intersection).
pub fn rasterize_rows<F: FnMut(usize, usize, usize, usize)>(
    scale: GridScale,
    solid: &Solid,
    mut emit: F,
) {
    let delta = scale.delta();
    let radius_like = match solid {
        Solid::Tube(t) => t.radius(),
        Solid::Prism(p) => p.half_dims()[0],
    };
    if radius_like < 0.5 * delta {
        log::warn!(
            "sub-resolution solid: transverse size {radius_like} below half the grid scale {delta}"
        );
    }
    match solid {
        Solid::Tube(t) => {
            let (lo, hi) = solid.bounding_box();
            let a = t.anchor();
            let d = t.dir();
            let r = t.radius();
            let half_len = 0.5 * t.length();
            let Some((zlo, zhi)) = scale.cell_range(lo.z, hi.z) else {
                return;
            };
            for iz in zlo..=zhi {
                let zc = scale.cell_center(iz);
                // Per-slice y-window from the infinite cylinder: the slice is
                // an ellipse with y-half-extent r·√(1−dx²)/|dz| about the
                // axis point at z = zc (the slice form is I − d̂d̂ᵀ restricted
                // to the plane, whose determinant is dz²). Falls back to the
                // global bounding box when the tube is nearly parallel to the
                // slice.
                let (ylo_f, yhi_f) = if d.z.abs() > 1e-9 {
                    let tz = (zc - a.z) / d.z;
                    let cy = a.y + tz * d.y;
                    let hy = r * (1.0 - d.x * d.x).max(0.0).sqrt() / d.z.abs() + delta;
                    ((cy - hy).max(lo.y), (cy + hy).min(hi.y))
                } else {
                    (lo.y, hi.y)
                };
                let Some((ylo, yhi)) = scale.cell_range(ylo_f, yhi_f) else {
                    continue;
                };
                for iy in ylo..=yhi {
                    let yc = scale.cell_center(iy);
                    // q(x) = (x, yc, zc) − a; axial = q·d is linear in x and
                    // radial² = ‖q‖² − (q·d)² is quadratic in x.
                    let q0 = Vec3::new(-a.x, yc - a.y, zc - a.z);
                    let q0d = q0.dot(&d);
                    // Axial constraint |q0·d + x·dx| ≤ L/2.
                    let (ax_lo, ax_hi) = if d.x.abs() > 1e-15 {
                        let t1 = (-half_len - q0d) / d.x;
                        let t2 = (half_len - q0d) / d.x;
                        (t1.min(t2), t1.max(t2))
                    } else if q0d.abs() <= half_len {
                        (f64::NEG_INFINITY, f64::INFINITY)
                    } else {
                        continue;
                    };
                    // Radial constraint: A·x² + B·x + C ≤ r².
                    let qa = 1.0 - d.x * d.x;
                    let qb = 2.0 * (q0.x - q0d * d.x);
                    let qc = q0.norm_squared() - q0d * q0d;
                    let (rd_lo, rd_hi) = if qa > 1e-15 {
                        let disc = qb * qb - 4.0 * qa * (qc - r * r);
                        if disc < 0.0 {
                            continue;
                        }
                        let sq = disc.sqrt();
                        ((-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa))
                    } else if qc <= r * r {
                        (f64::NEG_INFINITY, f64::INFINITY)
                    } else {
                        continue;
                    };
                    let xlo_f = ax_lo.max(rd_lo);
                    let xhi_f = ax_hi.min(rd_hi);
                    if let Some((xlo, xhi)) = scale.cell_range(xlo_f, xhi_f) {
                        emit(iy, iz, xlo, xhi);
                    }
                }
            }
        }
        Solid::Prism(p) => {
            let (lo, hi) = solid.bounding_box();
            let c = p.center();
            let f = p.frame();
            let h = p.half_dims();
            let Some((zlo, zhi)) = scale.cell_range(lo.z, hi.z) else {
                return;
            };
            let Some((ylo, yhi)) = scale.cell_range(lo.y, hi.y) else {
                return;
            };
            for iz in zlo..=zhi {
                let zc = scale.cell_center(iz);
                for iy in ylo..=yhi {
                    let yc = scale.cell_center(iy);
                    // For each axis: |(p0 + x·ex − c)·f_i| ≤ h_i is linear in x.
                    let mut xlo_f = f64::NEG_INFINITY;
                    let mut xhi_f = f64::INFINITY;
                    let mut feasible = true;
                    for i in 0..3 {
                        let base = Vec3::new(-c.x, yc - c.y, zc - c.z).dot(&f[i]);
                        let slope = f[i].x;
                        if slope.abs() > 1e-15 {
                            let t1 = (-h[i] - base) / slope;
                            let t2 = (h[i] - base) / slope;
                            xlo_f = xlo_f.max(t1.min(t2));
                            xhi_f = xhi_f.min(t1.max(t2));
                        } else if base.abs() > h[i] {
                            feasible = false;
                            break;
                        }
                    }
                    if !feasible || xlo_f > xhi_f {
                        continue;
                    }
                    if let Some((xlo, xhi)) = scale.cell_range(xlo_f, xhi_f) {
                        emit(iy, iz, xlo, xhi);
                    }
                }
            }
        }
    }
}

/// Rasterise one solid into a fresh dense grid.
pub fn rasterize_solid(scale: GridScale, solid: &Solid) -> Result<VoxelSet> {
    let mut out = VoxelSet::empty(scale)?;
    rasterize_rows(scale, solid, |iy, iz, xlo, xhi| {
        out.set_row_range(iy, iz, xlo, xhi);
    });
    Ok(out)
}

/// Union of the rasterisations of many solids (parallel over solids).
pub fn rasterize_union(scale: GridScale, solids: &[Solid]) -> Result<VoxelSet> {
    use rayon::prelude::*;
    let chunks: Vec<VoxelSet> = solids
        .par_chunks(64.max(solids.len() / 128 + 1))
        .map(|chunk| {
            let mut acc = VoxelSet::empty(scale)?;
            for s in chunk {
                rasterize_rows(scale, s, |iy, iz, xlo, xhi| {
                    acc.set_row_range(iy, iz, xlo, xhi);
                });
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = VoxelSet::empty(scale)?;
    for c in &chunks {
        out.union_with(c)?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Sparse cell sets
// ---------------------------------------------------------------------------

/// Sparse sorted set of linear cell indices `(iz·n + iy)·n + ix`.
///
/// Indices fit `u32` for `k ≤ 9`; construction rejects finer grids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CellSet {
    cells: Vec<u32>,
}

impl CellSet {
    pub fn check_scale(scale: GridScale) -> Result<()> {
        if scale.k() > 9 {
            return Err(LabError::Geometry(format!(
                "sparse cell sets support k <= 9, got k = {}",
                scale.k()
            )));
        }
        Ok(())
    }

    pub fn from_sorted(cells: Vec<u32>) -> Self {
        debug_assert!(cells.windows(2).all(|w| w[0] < w[1]));
        CellSet { cells }
    }

    pub fn from_unsorted(mut cells: Vec<u32>) -> Self {
        cells.sort_unstable();
        cells.dedup();
        CellSet { cells }
    }

    /// Exact sparse rasterisation of a solid (no dense allocation).
    pub fn rasterize(scale: GridScale, solid: &Solid) -> Result<Self> {
        Self::check_scale(scale)?;
        let n = scale.n() as u32;
        let mut cells = Vec::new();
        rasterize_rows(scale, solid, |iy, iz, xlo, xhi| {
            let base = (iz as u32 * n + iy as u32) * n;
            for ix in xlo..=xhi {
                cells.push(base + ix as u32);
            }
        });
        // Row emission order is (iz, iy, ix)-sorted already.
        Ok(CellSet::from_sorted(cells))
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn indices(&self) -> &[u32] {
        &self.cells
    }

    pub fn contains(&self, idx: u32) -> bool {
        self.cells.binary_search(&idx).is_ok()
    }

    pub fn is_subset_of(&self, other: &CellSet) -> bool {
        // Merge walk over two sorted lists.
        let mut j = 0;
        for &c in &self.cells {
            while j < other.cells.len() && other.cells[j] < c {
                j += 1;
            }
            if j >= other.cells.len() || other.cells[j] != c {
                return false;
            }
        }
        true
    }

    pub fn intersect(&self, other: &CellSet) -> CellSet {
        let mut out = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.cells.len() && j < other.cells.len() {
            match self.cells[i].cmp(&other.cells[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    out.push(self.cells[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        CellSet::from_sorted(out)
    }

    pub fn subtract(&self, other: &CellSet) -> CellSet {
        let mut out = Vec::new();
        let mut j = 0;
        for &c in &self.cells {
            while j < other.cells.len() && other.cells[j] < c {
                j += 1;
            }
            if j >= other.cells.len() || other.cells[j] != c {
                out.push(c);
            }
        }
        CellSet::from_sorted(out)
    }

    pub fn retain<F: FnMut(u32) -> bool>(&mut self, mut keep: F) {
        self.cells.retain(|&c| keep(c));
    }

    /// Decompose a linear index into `(ix, iy, iz)`.
    pub fn unpack(scale: GridScale, idx: u32) -> (usize, usize, usize) {
        let n = scale.n() as u32;
        let ix = idx % n;
        let iy = (idx / n) % n;
        let iz = idx / (n * n);
        (ix as usize, iy as usize, iz as usize)
    }

    pub fn pack(scale: GridScale, ix: usize, iy: usize, iz: usize) -> u32 {
        let n = scale.n() as u32;
        (iz as u32 * n + iy as u32) * n + ix as u32
    }

    /// Centre coordinates of a cell index.
    pub fn cell_center(scale: GridScale, idx: u32) -> Vec3 {
        let (ix, iy, iz) = Self::unpack(scale, idx);
        Vec3::new(
            scale.cell_center(ix),
            scale.cell_center(iy),
            scale.cell_center(iz),
        )
    }

    pub fn to_voxelset(&self, scale: GridScale) -> Result<VoxelSet> {
        let mut out = VoxelSet::empty(scale)?;
        for &c in &self.cells {
            let (ix, iy, iz) = Self::unpack(scale, c);
            out.set(ix, iy, iz);
        }
        Ok(out)
    }

    pub fn from_voxelset(v: &VoxelSet) -> Result<Self> {
        Self::check_scale(v.scale())?;
        let mut cells = Vec::with_capacity(v.count() as usize);
        for (ix, iy, iz) in v.iter_cells() {
            cells.push(Self::pack(v.scale(), ix, iy, iz));
        }
        Ok(CellSet::from_unsorted(cells))
    }
}

// ---------------------------------------------------------------------------
// 2D grids (projection targets)
// ---------------------------------------------------------------------------

/// Dense bit grid over `[-4,4] × [-1,1]`: `nx = 2^{k+3}` columns (x′),
/// `nz = 2^{k+1}` rows (z).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelSet2 {
    scale: GridScale,
    wpr: usize,
    words: Vec<u64>,
}

impl VoxelSet2 {
    pub fn empty(scale: GridScale) -> Self {
        let nx = scale.n() * 4;
        let nz = scale.n();
        let wpr = words_per_row(nx);
        VoxelSet2 {
            scale,
            wpr,
            words: vec![0u64; nz * wpr],
        }
    }

    pub fn scale(&self) -> GridScale {
        self.scale
    }

    pub fn nx(&self) -> usize {
        self.scale.n() * 4
    }

    pub fn nz(&self) -> usize {
        self.scale.n()
    }

    /// Column index of coordinate x′ in `[-4, 4)`.
    pub fn col_of(&self, x: f64) -> Option<usize> {
        let t = (x + 4.0) / self.scale.delta();
        if t < 0.0 {
            return None;
        }
        let i = t.floor() as usize;
        (i < self.nx()).then_some(i)
    }

    pub fn col_center(&self, ix: usize) -> f64 {
        -4.0 + (ix as f64 + 0.5) * self.scale.delta()
    }

    pub fn get(&self, ix: usize, iz: usize) -> bool {
        (self.words[iz * self.wpr + ix / 64] >> (ix % 64)) & 1 == 1
    }

    pub fn set(&mut self, ix: usize, iz: usize) {
        self.words[iz * self.wpr + ix / 64] |= 1u64 << (ix % 64);
    }

    pub fn set_row_range(&mut self, iz: usize, lo: usize, hi: usize) {
        let base = iz * self.wpr;
        set_range_in_row(&mut self.words[base..base + self.wpr], lo, hi);
    }

    pub fn count(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    /// Occupied area: count × δ².
    pub fn area(&self) -> f64 {
        self.count() as f64 * self.scale.delta().powi(2)
    }

    pub fn union_with(&mut self, other: &VoxelSet2) -> Result<()> {
        if self.scale != other.scale {
            return Err(LabError::ScaleMismatch(format!(
                "2D grids at k = {} and k = {}",
                self.scale.k(),
                other.scale.k()
            )));
        }
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
        Ok(())
    }

    pub fn iter_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let wpr = self.wpr;
        (0..self.nz()).flat_map(move |iz| {
            let base = iz * wpr;
            (0..wpr).flat_map(move |wi| {
                let mut w = self.words[base + wi];
                std::iter::from_fn(move || {
                    if w == 0 {
                        return None;
                    }
                    let b = w.trailing_zeros() as usize;
                    w &= w - 1;
                    Some((wi * 64 + b, iz))
                })
            })
        })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_container(w, 2, self.scale.k(), &self.words)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (dims, k, words) = read_container(r)?;
        if dims != 2 {
            return Err(LabError::Format(format!(
                "expected a 2D voxel container, found dims = {dims}"
            )));
        }
        let scale = GridScale::new(k)?;
        let fresh = VoxelSet2::empty(scale);
        if words.len() != fresh.words.len() {
            return Err(LabError::Format(format!(
                "2D container holds {} words, expected {}",
                words.len(),
                fresh.words.len()
            )));
        }
        Ok(VoxelSet2 {
            scale,
            wpr: fresh.wpr,
            words,
        })
    }
}
