//! Solid geometry for tube/prism arrangements in the unit ball.
//!
//! Conventions used throughout the workspace:
//! - A *tube* is a solid right circular cylinder: the set of points within
//!   `radius` of a segment of the given `length` centred at `anchor` along
//!   `dir`. Flat caps make containment decisions exact: a cylinder is the
//!   convex hull of its two end disks, so `tube ⊂ W` for convex `W` reduces
//!   to two disk tests.
//! - A *prism* is a rectangular box: centre, right-handed orthonormal frame
//!   `(u, v, w)` and half-dimensions sorted ascending. The distinguished
//!   plane of a prism is normal to `u` (its thinnest axis); its distinguished
//!   line runs along `w` (its longest axis).
//! - Dilation is always central: lengths and radii scale about the centre,
//!   the axis/frame is fixed.
//! - Two same-scale tubes are *essentially distinct* when neither is
//!   contained in the 2-dilate of the other.

use nalgebra::{Matrix3, Vector3};

use crate::error::{LabError, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Budget for unit-vector and orthonormal-frame validation.
pub const UNIT_TOL: f64 = 1e-12;
/// Relative budget for cached-volume agreement on witnesses.
pub const VOL_TOL: f64 = 1e-9;

/// Exponent `k` when `x == 2^k` exactly (binary-exact dyadic check).
pub fn dyadic_exponent(x: f64) -> Option<i32> {
    if !(x.is_finite() && x > 0.0) {
        return None;
    }
    let k = x.log2().round() as i32;
    if (-1074..=1023).contains(&k) && 2f64.powi(k) == x {
        Some(k)
    } else {
        None
    }
}

/// Deterministic orthonormal completion of a unit vector `w` to a
/// right-handed frame `(u, v, w)`.
pub fn orthonormal_complement(w: &Vec3) -> (Vec3, Vec3) {
    // Seed with the coordinate axis least aligned with w for stability.
    let ax = w.x.abs();
    let ay = w.y.abs();
    let az = w.z.abs();
    let seed = if ax <= ay && ax <= az {
        Vec3::x()
    } else if ay <= az {
        Vec3::y()
    } else {
        Vec3::z()
    };
    let u = w.cross(&seed).normalize();
    let v = w.cross(&u);
    // (u, v, w) with v = w × u is right-handed: u · (v × w) = 1.
    (u, v)
}

fn check_unit(v: &Vec3, what: &str) -> Result<Vec3> {
    let n = v.norm();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(LabError::Geometry(format!(
            "{what} is not a unit vector (norm {n})"
        )));
    }
    Ok(v / n)
}

// ---------------------------------------------------------------------------
// Tube
// ---------------------------------------------------------------------------

/// Solid right circular cylinder of the given radius about a centred segment.
#[derive(Clone, Debug, PartialEq)]
pub struct Tube {
    anchor: Vec3,
    dir: Vec3,
    radius: f64,
    length: f64,
}

impl Tube {
    /// Standard tube: length 1, radius in (0, 1], anchor in the unit ball.
    pub fn new(anchor: Vec3, dir: Vec3, radius: f64) -> Result<Self> {
        let dir = check_unit(&dir, "tube direction")?;
        if !(radius > 0.0 && radius <= 1.0) {
            return Err(LabError::Geometry(format!(
                "tube radius {radius} outside (0, 1]"
            )));
        }
        if anchor.norm() > 1.0 + UNIT_TOL {
            return Err(LabError::Geometry(format!(
                "tube anchor {anchor:?} outside the unit ball"
            )));
        }
        Ok(Tube {
            anchor,
            dir,
            radius,
            length: 1.0,
        })
    }

    /// General cylinder (dilates, cover tubes, witnesses): any positive
    /// radius/length, anchor within the working domain.
    pub fn with_length(anchor: Vec3, dir: Vec3, radius: f64, length: f64) -> Result<Self> {
        let dir = check_unit(&dir, "tube direction")?;
        if !(radius > 0.0 && radius.is_finite()) || !(length > 0.0 && length.is_finite()) {
            return Err(LabError::Geometry(format!(
                "tube radius {radius} / length {length} must be positive and finite"
            )));
        }
        if anchor.norm() > 8.0 {
            return Err(LabError::Geometry(format!(
                "tube anchor {anchor:?} far outside the working domain"
            )));
        }
        Ok(Tube {
            anchor,
            dir,
            radius,
            length,
        })
    }

    pub fn anchor(&self) -> Vec3 {
        self.anchor
    }

    pub fn dir(&self) -> Vec3 {
        self.dir
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn endpoints(&self) -> (Vec3, Vec3) {
        let h = 0.5 * self.length * self.dir;
        (self.anchor - h, self.anchor + h)
    }

    /// Central dilate: radius and length scale, axis fixed.
    pub fn dilate(&self, factor: f64) -> Tube {
        Tube {
            anchor: self.anchor,
            dir: self.dir,
            radius: self.radius * factor,
            length: self.length * factor,
        }
    }

    /// Distance from `p` to the (infinite) axis line.
    pub fn axis_distance(&self, p: &Vec3) -> f64 {
        let d = p - self.anchor;
        let t = d.dot(&self.dir);
        (d - t * self.dir).norm()
    }

    pub fn contains_point(&self, p: &Vec3) -> bool {
        let d = p - self.anchor;
        let t = d.dot(&self.dir);
        if t.abs() > 0.5 * self.length {
            return false;
        }
        (d - t * self.dir).norm_squared() <= self.radius * self.radius
    }

    /// Right-handed orthonormal frame `(u, v, dir)`.
    pub fn frame(&self) -> (Vec3, Vec3, Vec3) {
        let (u, v) = orthonormal_complement(&self.dir);
        (u, v, self.dir)
    }

    pub fn volume(&self) -> f64 {
        std::f64::consts::PI * self.radius * self.radius * self.length
    }
}

// ---------------------------------------------------------------------------
// Prism
// ---------------------------------------------------------------------------

/// Rectangular box with a right-handed orthonormal frame and half-dimensions
/// sorted ascending. `frame[0]` (thin axis) is the plane normal; `frame[2]`
/// (long axis) is the line direction.
#[derive(Clone, Debug, PartialEq)]
pub struct Prism {
    center: Vec3,
    frame: [Vec3; 3],
    half: [f64; 3],
}

fn check_frame(frame: &[Vec3; 3]) -> Result<[Vec3; 3]> {
    let u = check_unit(&frame[0], "prism frame u")?;
    let v = check_unit(&frame[1], "prism frame v")?;
    let w = check_unit(&frame[2], "prism frame w")?;
    let tol = 32.0 * UNIT_TOL;
    if u.dot(&v).abs() > tol || u.dot(&w).abs() > tol || v.dot(&w).abs() > tol {
        return Err(LabError::Geometry(
            "prism frame is not orthogonal".to_string(),
        ));
    }
    if u.cross(&v).dot(&w) < 0.0 {
        return Err(LabError::Geometry(
            "prism frame is not right-handed".to_string(),
        ));
    }
    Ok([u, v, w])
}

impl Prism {
    /// Standard prism with full dimensions `s × t × 1`, `0 < s ≤ t ≤ 1`.
    pub fn new(center: Vec3, frame: [Vec3; 3], s: f64, t: f64) -> Result<Self> {
        if !(s > 0.0 && s <= t && t <= 1.0) {
            return Err(LabError::Geometry(format!(
                "prism dims s = {s}, t = {t} must satisfy 0 < s <= t <= 1"
            )));
        }
        Self::from_half_dims(center, frame, [0.5 * s, 0.5 * t, 0.5])
    }

    /// General box (dilates, witnesses, coarsened prisms). Half-dims must be
    /// positive, sorted ascending and bounded by the working domain.
    pub fn from_half_dims(center: Vec3, frame: [Vec3; 3], half: [f64; 3]) -> Result<Self> {
        let frame = check_frame(&frame)?;
        if !(half[0] > 0.0 && half[0] <= half[1] && half[1] <= half[2] && half[2] <= 4.0) {
            return Err(LabError::Geometry(format!(
                "prism half-dims {half:?} must be positive, ascending and at most 4"
            )));
        }
        if center.norm() > 8.0 {
            return Err(LabError::Geometry(format!(
                "prism centre {center:?} far outside the working domain"
            )));
        }
        Ok(Prism {
            center,
            frame,
            half,
        })
    }

    /// Build from unordered (axis, half-dim) pairs: sorts the axes by extent
    /// and flips one axis if needed to restore right-handedness.
    pub fn from_axes(center: Vec3, axes: [(Vec3, f64); 3]) -> Result<Self> {
        let mut axes = axes;
        axes.sort_by(|a, b| a.1.total_cmp(&b.1));
        let mut frame = [axes[0].0, axes[1].0, axes[2].0];
        let half = [axes[0].1, axes[1].1, axes[2].1];
        if frame[0].cross(&frame[1]).dot(&frame[2]) < 0.0 {
            frame[2] = -frame[2];
        }
        Self::from_half_dims(center, frame, half)
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn frame(&self) -> &[Vec3; 3] {
        &self.frame
    }

    pub fn half_dims(&self) -> [f64; 3] {
        self.half
    }

    /// Full dimensions (twice the half-dims).
    pub fn dims(&self) -> [f64; 3] {
        [2.0 * self.half[0], 2.0 * self.half[1], 2.0 * self.half[2]]
    }

    /// Normal of the distinguished plane (thin axis).
    pub fn plane_normal(&self) -> Vec3 {
        self.frame[0]
    }

    /// Direction of the distinguished line (long axis).
    pub fn line_dir(&self) -> Vec3 {
        self.frame[2]
    }

    pub fn dilate(&self, factor: f64) -> Prism {
        Prism {
            center: self.center,
            frame: self.frame,
            half: [
                self.half[0] * factor,
                self.half[1] * factor,
                self.half[2] * factor,
            ],
        }
    }

    pub fn contains_point(&self, p: &Vec3) -> bool {
        let d = p - self.center;
        (0..3).all(|i| d.dot(&self.frame[i]).abs() <= self.half[i])
    }

    pub fn vertices(&self) -> [Vec3; 8] {
        let mut out = [Vec3::zeros(); 8];
        for (i, o) in out.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            *o = self.center
                + sx * self.half[0] * self.frame[0]
                + sy * self.half[1] * self.frame[1]
                + sz * self.half[2] * self.frame[2];
        }
        out
    }

    pub fn volume(&self) -> f64 {
        8.0 * self.half[0] * self.half[1] * self.half[2]
    }
}

// ---------------------------------------------------------------------------
// Solids and witnesses
// ---------------------------------------------------------------------------

/// A member solid of a family: tube or prism.
#[derive(Clone, Debug, PartialEq)]
pub enum Solid {
    Tube(Tube),
    Prism(Prism),
}

impl Solid {
    pub fn dilate(&self, factor: f64) -> Solid {
        match self {
            Solid::Tube(t) => Solid::Tube(t.dilate(factor)),
            Solid::Prism(p) => Solid::Prism(p.dilate(factor)),
        }
    }

    pub fn contains_point(&self, p: &Vec3) -> bool {
        match self {
            Solid::Tube(t) => t.contains_point(p),
            Solid::Prism(pr) => pr.contains_point(p),
        }
    }

    pub fn volume(&self) -> f64 {
        match self {
            Solid::Tube(t) => t.volume(),
            Solid::Prism(p) => p.volume(),
        }
    }

    pub fn center(&self) -> Vec3 {
        match self {
            Solid::Tube(t) => t.anchor(),
            Solid::Prism(p) => p.center(),
        }
    }

    /// Axis-aligned bounding box `(lo, hi)`.
    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        match self {
            Solid::Tube(t) => {
                let (a, b) = t.endpoints();
                let r = t.radius();
                // Tight per-coordinate extent of a cylinder: segment extent
                // plus r·‖d − (d·e)e‖ along each coordinate axis e.
                let mut lo = Vec3::zeros();
                let mut hi = Vec3::zeros();
                for i in 0..3 {
                    let da = t.dir()[i];
                    let cross = (1.0 - da * da).max(0.0).sqrt() * r;
                    lo[i] = a[i].min(b[i]) - cross;
                    hi[i] = a[i].max(b[i]) + cross;
                }
                (lo, hi)
            }
            Solid::Prism(p) => {
                let c = p.center();
                let h = p.half_dims();
                let f = p.frame();
                let mut ext = Vec3::zeros();
                for i in 0..3 {
                    ext[i] = (0..3).map(|j| h[j] * f[j][i].abs()).sum();
                }
                (c - ext, c + ext)
            }
        }
    }
}

/// Shape of a convex witness set.
#[derive(Clone, Debug, PartialEq)]
pub enum WitnessShape {
    Tube(Tube),
    Prism(Prism),
    Ball { center: Vec3, radius: f64 },
}

/// Convex witness with its exact volume cached at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvexWitness {
    shape: WitnessShape,
    volume: f64,
}

impl ConvexWitness {
    pub fn new(shape: WitnessShape) -> Self {
        let volume = match &shape {
            WitnessShape::Tube(t) => t.volume(),
            WitnessShape::Prism(p) => p.volume(),
            WitnessShape::Ball { radius, .. } => {
                4.0 / 3.0 * std::f64::consts::PI * radius.powi(3)
            }
        };
        ConvexWitness { shape, volume }
    }

    pub fn ball(center: Vec3, radius: f64) -> Self {
        Self::new(WitnessShape::Ball { center, radius })
    }

    pub fn shape(&self) -> &WitnessShape {
        &self.shape
    }

    pub fn volume(&self) -> f64 {
        self.volume
    }

    /// Cached volume agrees with the analytic volume of the shape.
    pub fn volume_consistent(&self) -> bool {
        let fresh = ConvexWitness::new(self.shape.clone());
        (fresh.volume - self.volume).abs() <= VOL_TOL * fresh.volume.max(1e-300)
    }

    pub fn contains_point(&self, p: &Vec3) -> bool {
        match &self.shape {
            WitnessShape::Tube(t) => t.contains_point(p),
            WitnessShape::Prism(pr) => pr.contains_point(p),
            WitnessShape::Ball { center, radius } => {
                (p - center).norm_squared() <= radius * radius
            }
        }
    }

    pub fn contains_tube(&self, t: &Tube) -> bool {
        tube_in_witness(t, &self.shape)
    }

    pub fn contains_prism(&self, p: &Prism) -> bool {
        prism_in_witness(p, &self.shape)
    }

    pub fn contains_solid(&self, s: &Solid) -> bool {
        match s {
            Solid::Tube(t) => self.contains_tube(t),
            Solid::Prism(p) => self.contains_prism(p),
        }
    }
}

// ---------------------------------------------------------------------------
// Exact containment predicates
// ---------------------------------------------------------------------------

/// Max of `c1·cosθ + c2·sinθ + c3·cos2θ + c4·sin2θ` over the circle.
///
/// The function has at most four critical points, so a 64-point sweep
/// brackets the global max; the two best brackets are refined by ternary
/// search (the function is smooth, hence unimodal near a strict max).
fn trig2_max(c1: f64, c2: f64, c3: f64, c4: f64) -> f64 {
    let eval = |th: f64| {
        let (s, c) = th.sin_cos();
        let (s2, c2t) = (2.0 * th).sin_cos();
        c1 * c + c2 * s + c3 * c2t + c4 * s2
    };
    const N: usize = 64;
    let step = std::f64::consts::TAU / N as f64;
    let mut vals = [0.0f64; N];
    for (i, v) in vals.iter_mut().enumerate() {
        *v = eval(i as f64 * step);
    }
    let mut best = 0usize;
    let mut second = 0usize;
    for i in 1..N {
        if vals[i] > vals[best] {
            second = best;
            best = i;
        } else if vals[i] > vals[second] || second == best {
            second = i;
        }
    }
    let refine = |center: usize| {
        let mut lo = center as f64 * step - step;
        let mut hi = center as f64 * step + step;
        for _ in 0..80 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if eval(m1) < eval(m2) {
                lo = m1;
            } else {
                hi = m2;
            }
        }
        eval(0.5 * (lo + hi))
    };
    refine(best).max(refine(second))
}

/// Disk (centre `q`, radius `r`, unit normal `n`) inside a prism.
///
/// Per axis `a` with half-extent `h`: the support of the disk along `a` is
/// `|(q−c)·a| + r·‖a − (a·n)n‖ ≤ h`.
fn disk_in_prism(q: &Vec3, r: f64, n: &Vec3, p: &Prism) -> bool {
    let d = q - p.center();
    let f = p.frame();
    let h = p.half_dims();
    (0..3).all(|i| {
        let a = f[i];
        let an = a.dot(n);
        let tang = (a - an * n).norm();
        d.dot(&a).abs() + r * tang <= h[i]
    })
}

/// Disk inside a ball: max over the rim of `‖v + r·(unit tangent)‖ ≤ R`,
/// which closes to `‖v‖² + 2r‖v − (v·n)n‖ + r² ≤ R²`.
fn disk_in_ball(q: &Vec3, r: f64, n: &Vec3, center: &Vec3, radius: f64) -> bool {
    let v = q - center;
    let vt = (v - v.dot(n) * n).norm();
    v.norm_squared() + 2.0 * r * vt + r * r <= radius * radius
}

/// Disk inside a cylinder. The axial test is closed-form; the radial test
/// maximises distance-to-axis over the rim (a degree-2 trig polynomial).
fn disk_in_cylinder(q: &Vec3, r: f64, n: &Vec3, cyl: &Tube) -> bool {
    let d = cyl.dir();
    let axial_span = r * (d - d.dot(n) * n).norm();
    let dq = q - cyl.anchor();
    if dq.dot(&d).abs() + axial_span > 0.5 * cyl.length() {
        return false;
    }
    // Transverse: project everything to the plane through cyl.anchor ⊥ d.
    let proj = |x: &Vec3| x - x.dot(&d) * d;
    let w = proj(&dq);
    let (e1, e2) = orthonormal_complement(n);
    let a = proj(&e1) * r;
    let b = proj(&e2) * r;
    let rr = cyl.radius();
    // Quick accept: rim within ‖w‖ + r of the axis.
    if w.norm() + r <= rr {
        return true;
    }
    // Quick reject: some rim point further than R from the axis for sure.
    if w.norm() - r > rr {
        return false;
    }
    // max_θ ‖w + cosθ·a + sinθ·b‖²  (degree-2 trig polynomial in θ).
    let c0 = w.norm_squared() + 0.5 * (a.norm_squared() + b.norm_squared());
    let c1 = 2.0 * w.dot(&a);
    let c2 = 2.0 * w.dot(&b);
    let c3 = 0.5 * (a.norm_squared() - b.norm_squared());
    let c4 = a.dot(&b);
    c0 + trig2_max(c1, c2, c3, c4) <= rr * rr
}

fn disk_in_witness(q: &Vec3, r: f64, n: &Vec3, w: &WitnessShape) -> bool {
    match w {
        WitnessShape::Tube(t) => disk_in_cylinder(q, r, n, t),
        WitnessShape::Prism(p) => disk_in_prism(q, r, n, p),
        WitnessShape::Ball { center, radius } => disk_in_ball(q, r, n, center, *radius),
    }
}

/// Tube inside a convex witness: a cylinder is the convex hull of its two
/// end disks, so both disk tests suffice.
pub fn tube_in_witness(t: &Tube, w: &WitnessShape) -> bool {
    let (a, b) = t.endpoints();
    let n = t.dir();
    disk_in_witness(&a, t.radius(), &n, w) && disk_in_witness(&b, t.radius(), &n, w)
}

/// Prism inside a convex witness: a box is the convex hull of its vertices.
pub fn prism_in_witness(p: &Prism, w: &WitnessShape) -> bool {
    let witness_contains = |x: &Vec3| match w {
        WitnessShape::Tube(t) => t.contains_point(x),
        WitnessShape::Prism(pr) => pr.contains_point(x),
        WitnessShape::Ball { center, radius } => (x - center).norm_squared() <= radius * radius,
    };
    p.vertices().iter().all(witness_contains)
}

pub fn solid_in_witness(s: &Solid, w: &WitnessShape) -> bool {
    match s {
        Solid::Tube(t) => tube_in_witness(t, w),
        Solid::Prism(p) => prism_in_witness(p, w),
    }
}

/// Tube-in-tube containment (exact via end disks).
pub fn tube_in_tube(inner: &Tube, outer: &Tube) -> bool {
    tube_in_witness(inner, &WitnessShape::Tube(outer.clone()))
}

/// Prism-in-prism containment (exact via vertices).
pub fn prism_in_prism(inner: &Prism, outer: &Prism) -> bool {
    prism_in_witness(inner, &WitnessShape::Prism(outer.clone()))
}

/// Neither same-scale tube is inside the 2-dilate of the other.
///
/// Errors with a scale mismatch when the radii differ (the notion is only
/// defined for a common scale).
pub fn essentially_distinct(a: &Tube, b: &Tube) -> Result<bool> {
    let scale = a.radius().max(b.radius());
    if (a.radius() - b.radius()).abs() > 1e-12 * scale {
        return Err(LabError::ScaleMismatch(format!(
            "tube radii {} and {} differ",
            a.radius(),
            b.radius()
        )));
    }
    Ok(!tube_in_tube(a, &b.dilate(2.0)) && !tube_in_tube(b, &a.dilate(2.0)))
}

/// Prism variant: neither box is inside the 2-dilate of the other.
pub fn essentially_distinct_prisms(a: &Prism, b: &Prism) -> bool {
    !prism_in_prism(a, &b.dilate(2.0)) && !prism_in_prism(b, &a.dilate(2.0))
}

// ---------------------------------------------------------------------------
// Affine maps and unit rescaling
// ---------------------------------------------------------------------------

/// Invertible affine map `x ↦ L·x + o`.
#[derive(Clone, Debug)]
pub struct AffineMap {
    linear: Mat3,
    offset: Vec3,
}

impl AffineMap {
    pub fn new(linear: Mat3, offset: Vec3) -> Result<Self> {
        if linear.determinant().abs() < 1e-12 {
            return Err(LabError::Geometry(
                "affine map is numerically singular".to_string(),
            ));
        }
        Ok(AffineMap { linear, offset })
    }

    pub fn identity() -> Self {
        AffineMap {
            linear: Mat3::identity(),
            offset: Vec3::zeros(),
        }
    }

    pub fn linear(&self) -> &Mat3 {
        &self.linear
    }

    pub fn offset(&self) -> Vec3 {
        self.offset
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.linear * p + self.offset
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.linear * v
    }

    pub fn det(&self) -> f64 {
        self.linear.determinant()
    }

    pub fn inverse(&self) -> AffineMap {
        let inv = self.linear.try_inverse().expect("checked at construction");
        AffineMap {
            linear: inv,
            offset: -(inv * self.offset),
        }
    }

    pub fn compose(&self, first: &AffineMap) -> AffineMap {
        AffineMap {
            linear: self.linear * first.linear,
            offset: self.linear * first.offset + self.offset,
        }
    }
}

fn image_tube(map: &AffineMap, t: &Tube) -> Result<Tube> {
    let ld = map.apply_vector(&t.dir());
    let stretch = ld.norm();
    let dir = ld / stretch;
    let anchor = map.apply(&t.anchor());
    let length = t.length() * stretch;
    // The image of a cross-section disk is an ellipse of area π·‖La × Lb‖·r²;
    // record the radius of the equal-area disk (geometric mean of semi-axes).
    let (e1, e2) = orthonormal_complement(&t.dir());
    let a = map.apply_vector(&e1);
    let b = map.apply_vector(&e2);
    let radius = t.radius() * a.cross(&b).norm().sqrt();
    Tube::with_length(anchor, dir, radius, length)
}

fn image_prism(map: &AffineMap, p: &Prism) -> Result<Prism> {
    // Map the edge half-vectors, re-orthogonalise (Gram–Schmidt in order of
    // mapped extent) and take the exact bounding extents in that frame.
    let f = p.frame();
    let h = p.half_dims();
    let mut edges: Vec<Vec3> = (0..3).map(|i| map.apply_vector(&f[i]) * h[i]).collect();
    edges.sort_by(|a, b| b.norm().total_cmp(&a.norm()));
    let g0 = edges[0].normalize();
    let mut g1 = edges[1] - edges[1].dot(&g0) * g0;
    g1 = g1.normalize();
    let g2v = g0.cross(&g1);
    let frame_axes = [g0, g1, g2v];
    let center = map.apply(&p.center());
    // Support of the image parallelepiped along each frame axis, padded by
    // an ulp-scale factor so the box bounds the image under floating point.
    let extent =
        |ax: &Vec3| -> f64 { edges.iter().map(|e| e.dot(ax).abs()).sum::<f64>() * (1.0 + 1e-12) };
    Prism::from_axes(
        center,
        [
            (frame_axes[0], extent(&frame_axes[0])),
            (frame_axes[1], extent(&frame_axes[1])),
            (frame_axes[2], extent(&frame_axes[2])),
        ],
    )
}

pub fn map_solid(map: &AffineMap, s: &Solid) -> Result<Solid> {
    Ok(match s {
        Solid::Tube(t) => Solid::Tube(image_tube(map, t)?),
        Solid::Prism(p) => Solid::Prism(image_prism(map, p)?),
    })
}

/// Circumscribed ellipsoid of a witness, as (centre, axes, semi-axis lengths).
///
/// Closed forms for the minimum-volume circumscribed ellipsoid:
/// cylinder (radius ρ, half-length h) → semi-axes (ρ√(3/2), ρ√(3/2), h√3);
/// box → √3 · half-dims; ball → itself.
fn circumscribed_ellipsoid(w: &ConvexWitness) -> (Vec3, [Vec3; 3], [f64; 3]) {
    match w.shape() {
        WitnessShape::Tube(t) => {
            let (u, v, d) = t.frame();
            let tr = t.radius() * (1.5f64).sqrt();
            let ax = 0.5 * t.length() * 3f64.sqrt();
            (t.anchor(), [u, v, d], [tr, tr, ax])
        }
        WitnessShape::Prism(p) => {
            let f = p.frame();
            let h = p.half_dims();
            let s = 3f64.sqrt();
            (
                p.center(),
                [f[0], f[1], f[2]],
                [s * h[0], s * h[1], s * h[2]],
            )
        }
        WitnessShape::Ball { center, radius } => (
            *center,
            [Vec3::x(), Vec3::y(), Vec3::z()],
            [*radius, *radius, *radius],
        ),
    }
}

/// Affine renormalisation of a bucket relative to a reference witness.
///
/// Every solid must lie inside the reference. The map sends the circumscribed
/// ellipsoid of the reference onto the unit ball, so `|det| · vol(ellipsoid)`
/// equals the unit-ball volume; images of the solids are returned alongside
/// the map. Image tubes keep an equal-area cross-section radius; image prisms
/// are exact bounding boxes in the Gram–Schmidt frame of their mapped edges.
pub fn unit_rescale(solids: &[Solid], reference: &ConvexWitness) -> Result<(Vec<Solid>, AffineMap)> {
    for (i, s) in solids.iter().enumerate() {
        if !reference.contains_solid(s) {
            return Err(LabError::Geometry(format!(
                "solid #{i} is not contained in the rescaling reference"
            )));
        }
    }
    let (center, axes, semi) = circumscribed_ellipsoid(reference);
    // φ(x) = S · Rᵀ · (x − center) with R the axis frame, S = diag(1/aᵢ).
    let rt = Mat3::from_rows(&[axes[0].transpose(), axes[1].transpose(), axes[2].transpose()]);
    let s = Mat3::from_diagonal(&Vec3::new(1.0 / semi[0], 1.0 / semi[1], 1.0 / semi[2]));
    let linear = s * rt;
    let map = AffineMap::new(linear, -(linear * center))?;
    let ball = 4.0 / 3.0 * std::f64::consts::PI;
    let vol_image = map.det().abs() * ball * semi[0] * semi[1] * semi[2];
    debug_assert!((vol_image - ball).abs() <= 1e-6 * ball);
    let images = solids
        .iter()
        .map(|s| map_solid(&map, s))
        .collect::<Result<Vec<_>>>()?;
    Ok((images, map))
}

// ---------------------------------------------------------------------------
// Tube families
// ---------------------------------------------------------------------------

/// Finite multiset of same-scale tubes with its nominal scale `δ = 2^{-k}`.
///
/// Tube radii may deviate from the nominal scale by at most a factor of 2
/// (rescaled buckets land within that window).
#[derive(Clone, Debug)]
pub struct TubeFamily {
    tubes: Vec<Tube>,
    delta: f64,
}

impl TubeFamily {
    pub fn new(tubes: Vec<Tube>, delta: f64) -> Result<Self> {
        if dyadic_exponent(delta).is_none() {
            return Err(LabError::ScaleNotDyadic(delta));
        }
        if tubes.is_empty() {
            return Err(LabError::Geometry("empty tube family".to_string()));
        }
        for (i, t) in tubes.iter().enumerate() {
            if t.radius() < 0.5 * delta - 1e-15 || t.radius() > 2.0 * delta + 1e-15 {
                return Err(LabError::ScaleMismatch(format!(
                    "tube #{i} radius {} is not within a factor 2 of scale {delta}",
                    t.radius()
                )));
            }
        }
        Ok(TubeFamily { tubes, delta })
    }

    pub fn tubes(&self) -> &[Tube] {
        &self.tubes
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn len(&self) -> usize {
        self.tubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tubes.is_empty()
    }

    /// Growth exponent σ with `#family = δ^{-σ}`; errors on singletons.
    pub fn sigma(&self) -> Result<f64> {
        if self.tubes.len() < 2 {
            return Err(LabError::DegenerateSigma);
        }
        Ok((self.tubes.len() as f64).ln() / (1.0 / self.delta).ln())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    #[test]
    fn tube_constructor_validates() {
        assert!(Tube::new(v(0.0, 0.0, 0.0), v(0.0, 0.0, 1.0), 0.01).is_ok());
        assert!(Tube::new(v(0.0, 0.0, 0.0), v(0.0, 0.0, 2.0), 0.01).is_err());
        assert!(Tube::new(v(0.0, 0.0, 0.0), v(0.0, 0.0, 1.0), 0.0).is_err());
        assert!(Tube::new(v(0.0, 0.0, 0.0), v(0.0, 0.0, 1.0), 1.5).is_err());
        assert!(Tube::new(v(2.0, 0.0, 0.0), v(0.0, 0.0, 1.0), 0.1).is_err());
    }

    #[test]
    fn tube_point_membership_matches_geometry() {
        let t = Tube::new(v(0.0, 0.0, 0.0), v(0.0, 0.0, 1.0), 0.1).unwrap();
        assert!(t.contains_point(&v(0.05, 0.0, 0.3)));
        assert!(t.contains_point(&v(0.1, 0.0, 0.5)));
        assert!(!t.contains_point(&v(0.11, 0.0, 0.0)));
        assert!(!t.contains_point(&v(0.0, 0.0, 0.51)));
    }

    #[test]
    fn dilate_scales_radius_and_length_about_center() {
        let t = Tube::new(v(0.1, 0.0, 0.0), v(0.0, 0.0, 1.0), 0.05).unwrap();
        let d = t.dilate(2.0);
        assert_relative_eq!(d.radius(), 0.1);
        assert_relative_eq!(d.length(), 2.0);
        assert_eq!(d.anchor(), t.anchor());
        assert_eq!(d.dir(), t.dir());
    }

    #[test]
    fn prism_frame_validation() {
        let id = [Vec3::x(), Vec3::y(), Vec3::z()];
        assert!(Prism::new(Vec3::zeros(), id, 0.1, 0.5).is_ok());
        // Left-handed frame rejected.
        let lh = [Vec3::x(), Vec3::y(), -Vec3::z()];
        assert!(Prism::new(Vec3::zeros(), lh, 0.1, 0.5).is_err());
        // Unsorted dims rejected.
        assert!(Prism::new(Vec3::zeros(), id, 0.5, 0.1).is_err());
        // Non-orthogonal frame rejected.
        let skew = [Vec3::x(), (Vec3::x() + Vec3::y()).normalize(), Vec3::z()];
        assert!(Prism::new(Vec3::zeros(), skew, 0.1, 0.5).is_err());
    }

    #[test]
    fn prism_vertices_span_the_box() {
        let p = Prism::new(Vec3::zeros(), [Vec3::x(), Vec3::y(), Vec3::z()], 0.2, 0.4).unwrap();
        let vs = p.vertices();
        assert_eq!(vs.len(), 8);
        for vert in &vs {
            assert!(p.contains_point(vert));
            assert!(!p.contains_point(&(vert * 1.01)));
        }
        assert_relative_eq!(p.volume(), 0.2 * 0.4 * 1.0, epsilon = 1e-12);
    }

    #[test]
    fn tube_in_prism_exact_boundary() {
        // Tube along z of radius 0.1 fits a 0.2 × 0.2 × 1 box exactly.
        let t = Tube::new(Vec3::zeros(), Vec3::z(), 0.1).unwrap();
        let fit = Prism::new(Vec3::zeros(), [Vec3::x(), Vec3::y(), Vec3::z()], 0.2, 0.2).unwrap();
        assert!(tube_in_witness(&t, &WitnessShape::Prism(fit)));
        let tight = Prism::from_half_dims(
            Vec3::zeros(),
            [Vec3::x(), Vec3::y(), Vec3::z()],
            [0.0999, 0.2, 0.5],
        )
        .unwrap();
        assert!(!tube_in_witness(&t, &WitnessShape::Prism(tight)));
    }

    #[test]
    fn tilted_tube_needs_extra_axial_room() {
        // A tube tilted by angle φ with r > φ/4 sticks out axially:
        // cos(φ)/2 + r·sin(φ) exceeds 1/2, so a height-1 box must reject it
        // and a height-2 box accepts it.
        let phi = 0.1f64;
        let dir = v(phi.sin(), 0.0, phi.cos());
        let t = Tube::new(Vec3::zeros(), dir, 0.05).unwrap();
        let snug = Prism::new(Vec3::zeros(), [Vec3::x(), Vec3::y(), Vec3::z()], 0.5, 0.5).unwrap();
        assert!(!tube_in_witness(&t, &WitnessShape::Prism(snug)));
        let tall = Prism::from_half_dims(
            Vec3::zeros(),
            [Vec3::x(), Vec3::y(), Vec3::z()],
            [0.25, 0.25, 1.0],
        )
        .unwrap();
        assert!(tube_in_witness(&t, &WitnessShape::Prism(tall)));
    }

    #[test]
    fn tube_in_ball_boundary() {
        // Tube of radius r and length L centred at origin fits in the ball of
        // radius sqrt(r² + L²/4) and no smaller ball.
        let t = Tube::new(Vec3::zeros(), Vec3::z(), 0.3).unwrap();
        let rad = (0.3f64 * 0.3 + 0.25).sqrt();
        assert!(tube_in_witness(
            &t,
            &WitnessShape::Ball {
                center: Vec3::zeros(),
                radius: rad + 1e-12
            }
        ));
        assert!(!tube_in_witness(
            &t,
            &WitnessShape::Ball {
                center: Vec3::zeros(),
                radius: rad - 1e-6
            }
        ));
    }

    #[test]
    fn coaxial_tube_in_tube_boundary() {
        let inner = Tube::new(v(0.0, 0.05, 0.0), Vec3::z(), 0.05).unwrap();
        let outer = Tube::with_length(Vec3::zeros(), Vec3::z(), 0.1, 1.0).unwrap();
        assert!(tube_in_tube(&inner, &outer));
        let shifted = Tube::new(v(0.0, 0.0501, 0.0), Vec3::z(), 0.05).unwrap();
        assert!(!tube_in_tube(&shifted, &outer));
    }

    #[test]
    fn tilted_tube_in_tube_uses_rim_maximum() {
        // Tilt angle φ: end disk centre is offset sin(φ)·L/2 from the outer
        // axis and the rim adds nearly r in the worst direction.
        let phi = 0.1f64;
        let inner = Tube::new(Vec3::zeros(), v(phi.sin(), 0.0, phi.cos()), 0.02).unwrap();
        let need = (phi.sin() * 0.5 + 0.02) * 1.0001 + 1e-9;
        let outer_ok = Tube::with_length(Vec3::zeros(), Vec3::z(), need, 2.0).unwrap();
        assert!(tube_in_tube(&inner, &outer_ok));
        let outer_tight =
            Tube::with_length(Vec3::zeros(), Vec3::z(), phi.sin() * 0.5 + 0.01, 2.0).unwrap();
        assert!(!tube_in_tube(&inner, &outer_tight));
    }

    #[test]
    fn essential_distinctness_requires_common_scale() {
        let a = Tube::new(Vec3::zeros(), Vec3::z(), 0.05).unwrap();
        let b = Tube::new(v(0.3, 0.0, 0.0), Vec3::z(), 0.1).unwrap();
        assert!(matches!(
            essentially_distinct(&a, &b),
            Err(LabError::ScaleMismatch(_))
        ));
    }

    #[test]
    fn parallel_close_tubes_are_not_distinct() {
        let a = Tube::new(Vec3::zeros(), Vec3::z(), 0.05).unwrap();
        let b = Tube::new(v(0.04, 0.0, 0.0), Vec3::z(), 0.05).unwrap();
        // b is inside the 2-dilate of a (radius 0.1, length 2).
        assert!(!essentially_distinct(&a, &b).unwrap());
        let far = Tube::new(v(0.2, 0.0, 0.0), Vec3::z(), 0.05).unwrap();
        assert!(essentially_distinct(&a, &far).unwrap());
    }

    #[test]
    fn distinctness_is_symmetric_on_random_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let rv = |rng: &mut rand_chacha::ChaCha8Rng| {
                v(
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                )
            };
            let d1 = (rv(&mut rng) + v(0.0, 0.0, 1.0)).normalize();
            let d2 = (rv(&mut rng) + v(0.0, 0.0, 1.0)).normalize();
            let a = Tube::new(rv(&mut rng), d1, 0.05).unwrap();
            let b = Tube::new(rv(&mut rng), d2, 0.05).unwrap();
            assert_eq!(
                essentially_distinct(&a, &b).unwrap(),
                essentially_distinct(&b, &a).unwrap()
            );
        }
    }

    #[test]
    fn ball_witness_volume_cached() {
        let w = ConvexWitness::ball(Vec3::zeros(), 0.5);
        assert_relative_eq!(
            w.volume(),
            4.0 / 3.0 * std::f64::consts::PI * 0.125,
            epsilon = 1e-12
        );
        assert!(w.volume_consistent());
    }

    #[test]
    fn affine_map_roundtrip() {
        let m = AffineMap::new(
            Mat3::new(2.0, 0.1, 0.0, 0.0, 1.5, 0.0, 0.3, 0.0, 0.5),
            v(0.2, -0.1, 0.4),
        )
        .unwrap();
        let p = v(0.3, -0.2, 0.7);
        let q = m.inverse().apply(&m.apply(&p));
        assert_relative_eq!((q - p).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn unit_rescale_requires_containment() {
        let t = Tube::new(v(0.5, 0.0, 0.0), Vec3::z(), 0.05).unwrap();
        let reference = ConvexWitness::ball(Vec3::zeros(), 0.1);
        assert!(unit_rescale(&[Solid::Tube(t)], &reference).is_err());
    }

    #[test]
    fn unit_rescale_of_coaxial_bucket_lands_at_quotient_scale() {
        // Members: thin tubes inside a fat reference tube. After rescaling the
        // image radius must be δ/ρ up to a factor 2 and the image length
        // within a factor 2 of 1.
        let rho = 0.25;
        let delta = 1.0 / 64.0;
        let reference = ConvexWitness::new(WitnessShape::Tube(
            Tube::with_length(Vec3::zeros(), Vec3::z(), rho, 1.5).unwrap(),
        ));
        let members: Vec<Solid> = (0..4)
            .map(|i| {
                let off = -0.1 + 0.05 * i as f64;
                Solid::Tube(Tube::new(v(off, 0.0, 0.0), Vec3::z(), delta).unwrap())
            })
            .collect();
        let (images, map) = unit_rescale(&members, &reference).unwrap();
        let target = delta / rho;
        for img in &images {
            let Solid::Tube(t) = img else { panic!("tube expected") };
            assert!(t.radius() >= 0.5 * target && t.radius() <= 2.0 * target);
            assert!(t.length() >= 0.5 && t.length() <= 2.0);
        }
        // Ellipsoid image volume preserved to 1e-6: |det|·vol(E) = vol(B).
        let ball = 4.0 / 3.0 * std::f64::consts::PI;
        let semi = [rho * 1.5f64.sqrt(), rho * 1.5f64.sqrt(), 0.75 * 3f64.sqrt()];
        let vol = map.det().abs() * ball * semi[0] * semi[1] * semi[2];
        assert_relative_eq!(vol, ball, epsilon = 1e-6 * ball);
    }

    #[test]
    fn family_rejects_mismatched_radii_and_non_dyadic_scale() {
        let t = Tube::new(Vec3::zeros(), Vec3::z(), 0.05).unwrap();
        assert!(matches!(
            TubeFamily::new(vec![t.clone()], 0.05),
            Err(LabError::ScaleNotDyadic(_))
        ));
        let t2 = Tube::new(Vec3::zeros(), Vec3::z(), 1.0 / 128.0).unwrap();
        assert!(matches!(
            TubeFamily::new(vec![t2], 1.0 / 32.0),
            Err(LabError::ScaleMismatch(_))
        ));
        let t3 = Tube::new(Vec3::zeros(), Vec3::z(), 1.0 / 32.0).unwrap();
        let fam = TubeFamily::new(vec![t3], 1.0 / 32.0).unwrap();
        assert!(fam.sigma().is_err());
    }

    #[test]
    fn sigma_measures_cardinality_exponent() {
        let delta = 1.0 / 16.0;
        let tubes: Vec<Tube> = (0..256)
            .map(|i| {
                let x = -0.5 + (i % 16) as f64 / 16.0;
                let y = -0.5 + (i / 16) as f64 / 16.0;
                Tube::new(v(x, y, 0.0), Vec3::z(), delta).unwrap()
            })
            .collect();
        let fam = TubeFamily::new(tubes, delta).unwrap();
        assert_relative_eq!(fam.sigma().unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn disk_in_cylinder_radial_maximum_is_tight() {
        // Disk perpendicular to the cylinder axis, offset by c: fits iff
        // c + r ≤ R (the trig maximum must reproduce the closed form).
        let cyl = Tube::with_length(Vec3::zeros(), Vec3::z(), 0.1, 2.0).unwrap();
        let n = Vec3::z();
        assert!(disk_in_cylinder(&v(0.04, 0.0, 0.0), 0.06, &n, &cyl));
        assert!(!disk_in_cylinder(&v(0.04, 0.0, 0.0), 0.0601, &n, &cyl));
        // Disk parallel to the axis (normal ⊥ axis): rim reaches
        // sqrt(c² + r²) at worst when centred on the axis plane.
        let c = 0.05f64;
        let r = 0.08f64;
        let need = (c * c + r * r).sqrt();
        let tight = Tube::with_length(Vec3::zeros(), Vec3::z(), need + 1e-9, 2.0).unwrap();
        assert!(disk_in_cylinder(&v(c, 0.0, 0.0), r, &Vec3::x(), &tight));
        let fail = Tube::with_length(Vec3::zeros(), Vec3::z(), need - 1e-6, 2.0).unwrap();
        assert!(!disk_in_cylinder(&v(c, 0.0, 0.0), r, &Vec3::x(), &fail));
    }

    #[test]
    fn mapped_prism_contains_original_vertices_image() {
        let m = AffineMap::new(
            Mat3::new(1.2, 0.3, 0.0, 0.0, 0.9, 0.1, 0.0, 0.0, 1.4),
            v(0.05, 0.0, -0.02),
        )
        .unwrap();
        let p = Prism::new(
            v(0.1, 0.0, 0.0),
            [Vec3::x(), Vec3::y(), Vec3::z()],
            0.1,
            0.3,
        )
        .unwrap();
        let img = image_prism(&m, &p).unwrap();
        for vert in p.vertices() {
            let q = m.apply(&vert);
            assert!(
                img.contains_point(&q),
                "image box must bound the mapped vertices"
            );
        }
    }
}
