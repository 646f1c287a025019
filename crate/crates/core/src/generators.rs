//! Seeded generators for the tube, prism and point-set families the
//! measurement modules are exercised on.
//!
//! Every construction is deterministic in its parameters: generation is
//! single-threaded and all randomness comes from `ChaCha8Rng` seeded with the
//! request's 64-bit seed, so an identical [`GeneratorSpec`] reproduces a
//! bit-identical family on any machine. The generators only *build*
//! arrangements — none of them asserts its own advertised properties. The
//! test suite re-measures each family with the independent checkers from
//! [`crate::axioms`] and [`crate::projection`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{FRAC_PI_2, PI, TAU};

use crate::axioms::{
    check_essentially_distinct, convex_wolff_error_mixed, CatalogConfig, CoverLevel, CoverTree,
};
use crate::error::{LabError, Result};
use crate::geom::{
    dyadic_exponent, essentially_distinct, Prism, Solid, Tube, TubeFamily, Vec3,
};
use crate::projection::{line_tube, ParamPointSet};

/// Serializable generator request; the `kind` tag selects the construction.
///
/// Round-trips through JSON, and equal specs produce bit-identical output
/// (see [`generate`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum GeneratorSpec {
    /// δ-net of a hemisphere of directions with jittered anchors.
    DirectionSeparated { k: u32, seed: u64 },
    /// Hierarchical family: each scale-`b^{-i}` clan spawns `b²` children.
    Sticky { k: u32, branching: u32, seed: u64 },
    /// Tubes with axes in the plane `{y = 0}` — the degenerate flat family.
    Coplanar { k: u32 },
    /// Randomly posed `s × t × 1` boxes, optionally filled with tubes.
    PrismClustered {
        k: u32,
        s: f64,
        t: f64,
        count_per_prism: usize,
        seed: u64,
    },
    /// Uniform line parameters `(a, b, c, d)` with their δ-tubes.
    RandomLines { k: u32, count: usize, seed: u64 },
    /// Lattice of translated copies of a single cell-centred point.
    TiledPointSet { k: u32, dim: usize, rho: f64, s: f64 },
}

/// What a [`GeneratorSpec`] evaluates to.
#[derive(Clone, Debug)]
pub enum Generated {
    Tubes(TubeFamily),
    Sticky(StickyFamily),
    Clustered(ClusteredFamily),
    Lines(LineSample),
    Points(ParamPointSet),
}

impl Generated {
    /// The plain tube family carried by this output, when there is one.
    pub fn tube_family(&self) -> Option<&TubeFamily> {
        match self {
            Generated::Tubes(f) => Some(f),
            Generated::Sticky(s) => Some(&s.family),
            Generated::Clustered(c) => c.tubes.as_ref(),
            Generated::Lines(l) => Some(&l.family),
            Generated::Points(_) => None,
        }
    }
}

/// Run the construction a spec describes.
pub fn generate(spec: &GeneratorSpec) -> Result<Generated> {
    match spec {
        GeneratorSpec::DirectionSeparated { k, seed } => {
            Ok(Generated::Tubes(gen_direction_separated(*k, *seed)?))
        }
        GeneratorSpec::Sticky { k, branching, seed } => {
            Ok(Generated::Sticky(gen_sticky(*k, *branching, *seed)?))
        }
        GeneratorSpec::Coplanar { k } => Ok(Generated::Tubes(gen_coplanar(*k)?)),
        GeneratorSpec::PrismClustered {
            k,
            s,
            t,
            count_per_prism,
            seed,
        } => {
            let delta = checked_delta(*k)?;
            Ok(Generated::Clustered(gen_prism_clustered(
                delta,
                *s,
                *t,
                *count_per_prism,
                *seed,
            )?))
        }
        GeneratorSpec::RandomLines { k, count, seed } => {
            Ok(Generated::Lines(gen_random_lines(*k, *count, *seed)?))
        }
        GeneratorSpec::TiledPointSet { k, dim, rho, s } => {
            let base = ParamPointSet::new(*dim, *k, vec![*rho / 2.0; *dim])?;
            Ok(Generated::Points(gen_tiled_pointset(&base, *rho, *s)?))
        }
    }
}

fn checked_delta(k: u32) -> Result<f64> {
    if !(2..=12).contains(&k) {
        return Err(LabError::ScaleRange(k));
    }
    Ok(2f64.powi(-(k as i32)))
}

/// Uniform point of the closed ball `radius·B(0,1)` by cube rejection.
fn ball_sample(rng: &mut ChaCha8Rng, radius: f64) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.gen_range(-radius..=radius),
            rng.gen_range(-radius..=radius),
            rng.gen_range(-radius..=radius),
        );
        if v.norm() <= radius {
            return v;
        }
    }
}

// ---------------------------------------------------------------------------
// Direction-separated families
// ---------------------------------------------------------------------------

/// Anchors are jittered inside this ball so every tube stays well inside the
/// sampling domain and the rasterization grid.
const ANCHOR_SPREAD: f64 = 0.25;

/// δ-tubes pointing along a δ-net of the upper hemisphere, anchors jittered
/// uniformly in `B(0, 1/4)`.
///
/// Latitude rows are spaced exactly δ apart and each row carries azimuths
/// `1.1δ/sin θ` apart, so distinct directions subtend an angle of at least δ.
/// A repair sweep re-jitters the (rare) anchor coincidences that would make
/// one tube swallow a near-parallel neighbour, so the output is always
/// pairwise essentially distinct.
pub fn gen_direction_separated(k: u32, seed: u64) -> Result<TubeFamily> {
    let delta = checked_delta(k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tubes = Vec::new();
    let mut row = 0u32;
    loop {
        let theta = (f64::from(row) + 0.5) * delta;
        if theta > FRAC_PI_2 - 0.55 * delta {
            break;
        }
        let ring = ((TAU * theta.sin() / (1.1 * delta)).floor() as usize).max(1);
        for j in 0..ring {
            let phi = TAU * (j as f64 + 0.5 * f64::from(row % 2)) / ring as f64;
            let dir = Vec3::new(
                theta.sin() * phi.cos(),
                theta.sin() * phi.sin(),
                theta.cos(),
            );
            tubes.push(Tube::new(ball_sample(&mut rng, ANCHOR_SPREAD), dir, delta)?);
        }
        row += 1;
    }
    separate_anchors(&mut tubes, delta, &mut rng)?;
    TubeFamily::new(tubes, delta)
}

/// Indices of tubes that fail pairwise essential distinctness (the higher
/// index of each offending pair). Candidate pairs are pruned by hashing
/// directions on a grid of pitch `4.5δ`: containment in a 2δ-dilate keeps
/// the axes within `sin⁻¹(4δ)` of each other *as lines*, so a candidate
/// partner lies in a cell neighbouring either `d` or `-d` (containment does
/// not care about orientation, and two near-equatorial directions with
/// opposite azimuths are almost the same line).
fn distinctness_violations(tubes: &[Tube], delta: f64) -> BTreeSet<usize> {
    let pitch = 4.5 * delta;
    let mut cells: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    let key = |d: Vec3| ((d.x / pitch).floor() as i64, (d.y / pitch).floor() as i64);
    for (i, t) in tubes.iter().enumerate() {
        cells.entry(key(t.dir())).or_default().push(i);
    }
    let mut bad = BTreeSet::new();
    for (i, a) in tubes.iter().enumerate() {
        for base in [key(a.dir()), key(-a.dir())] {
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let Some(neigh) = cells.get(&(base.0 + dx, base.1 + dy)) else {
                        continue;
                    };
                    for &j in neigh {
                        if j <= i {
                            continue;
                        }
                        let b = &tubes[j];
                        if a.dir().cross(&b.dir()).norm() > 4.2 * delta {
                            continue;
                        }
                        let ok = essentially_distinct(a, b)
                            .expect("generated tubes share one radius");
                        if !ok {
                            bad.insert(j);
                        }
                    }
                }
            }
        }
    }
    bad
}

/// Re-jitter anchors until the family is pairwise essentially distinct.
fn separate_anchors(tubes: &mut [Tube], delta: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    for _ in 0..64 {
        let bad = distinctness_violations(tubes, delta);
        if bad.is_empty() {
            return Ok(());
        }
        for i in bad {
            tubes[i] = Tube::new(
                ball_sample(rng, ANCHOR_SPREAD),
                tubes[i].dir(),
                tubes[i].radius(),
            )?;
        }
    }
    Err(LabError::Infeasible(
        "anchor jitter failed to separate near-parallel tubes after 64 sweeps".into(),
    ))
}

// ---------------------------------------------------------------------------
// Sticky (hierarchical) families
// ---------------------------------------------------------------------------

/// Offset gained per unit of the digit parameter (anchor spread).
const STICKY_OFFSET_GAIN: f64 = 1.14;
/// Direction tilt gained per unit of the digit parameter, in radians.
const STICKY_TILT_GAIN: f64 = 0.35;
/// Leaf jitter amplitude in units of δ, applied to all four parameters.
const STICKY_JITTER: f64 = 0.02;
/// Clan cover tubes are this many times fatter than their nominal scale.
const STICKY_COVER_FATNESS: f64 = 1.5;

/// A hierarchical family together with the cover tree that certifies it.
///
/// Level `i` of the tree covers the family at scale `b^{-i}` with one tube
/// per clan; every bucket at level `i` holds exactly `b^{2(m-i)}` leaves.
#[derive(Clone, Debug)]
pub struct StickyFamily {
    pub family: TubeFamily,
    pub tree: CoverTree,
    /// Exponent actually realised: δ = 2^{-snapped_k} = b^{-levels}.
    pub snapped_k: u32,
    pub branching: u32,
    /// Number of branching levels `m`.
    pub levels: u32,
}

/// Direction obtained by following the tangent parameter `s` along a great
/// circle from the north pole (unit-speed exponential map).
fn tilted_dir(s: (f64, f64)) -> Vec3 {
    let n = (s.0 * s.0 + s.1 * s.1).sqrt();
    if n < 1e-12 {
        return Vec3::z();
    }
    let f = n.sin() / n;
    Vec3::new(s.0 * f, s.1 * f, n.cos())
}

/// Digit expansion of a leaf (or clan prefix) into its 2-D parameter.
///
/// Index bits hold `levels` digit pairs base `b`, most significant first;
/// digit pair `(α, β)` at depth `i` moves the parameter by
/// `b^{-i}·(α - (b-1)/2, β - (b-1)/2)`. The result is a square grid of pitch
/// `b^{-levels}` centred at the origin.
fn digit_param(index: usize, levels: u32, log_b: u32, b: u32) -> (f64, f64) {
    let half = f64::from(b - 1) / 2.0;
    let mask = (1usize << log_b) - 1;
    let mut v = (0.0, 0.0);
    for i in 1..=levels {
        let shift = 2 * log_b * (levels - i);
        let alpha = (index >> (shift + log_b)) & mask;
        let beta = (index >> shift) & mask;
        let rho = f64::from(b).powi(-(i as i32));
        v.0 += rho * (alpha as f64 - half);
        v.1 += rho * (beta as f64 - half);
    }
    v
}

/// Hierarchical "sticky" family: every clan at scale `ρᵢ = b^{-i}` spawns
/// `b²` children, one per (offset, tilt) digit pair, down to `m` levels with
/// `δ = b^{-m}` (the requested `2^{-k}` snapped to the nearest coarser power
/// of `b`). Anchor and direction share each level's digit vector, so any two
/// leaves separate in proportion to their deepest differing digit; a ±0.02δ
/// leaf jitter breaks the remaining lattice symmetries.
///
/// The returned tree certifies the construction: level `i` covers each clan
/// by a tube of radius `1.5·b^{-i}`, buckets are exactly equal in size, and
/// members are emitted centre-out so that coarse greedy covers anchored at
/// the first member swallow the whole family.
pub fn gen_sticky(k: u32, branching: u32, seed: u64) -> Result<StickyFamily> {
    let log_b = match branching {
        2 => 1,
        4 => 2,
        8 => 3,
        _ => {
            return Err(LabError::Infeasible(format!(
                "branching {branching} not supported (use 2, 4 or 8)"
            )))
        }
    };
    checked_delta(k)?;
    if k < log_b {
        return Err(LabError::Infeasible(format!(
            "scale 2^-{k} is coarser than a single branching-{branching} level"
        )));
    }
    let levels = k / log_b;
    let snapped_k = levels * log_b;
    if 2 * snapped_k > 20 {
        return Err(LabError::Infeasible(format!(
            "branching {branching} over {levels} levels would emit 2^{} tubes",
            2 * snapped_k
        )));
    }
    let delta = 2f64.powi(-(snapped_k as i32));
    let n = 1usize << (2 * snapped_k);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter: Vec<[f64; 4]> = (0..n)
        .map(|_| {
            [
                rng.gen_range(-STICKY_JITTER..=STICKY_JITTER),
                rng.gen_range(-STICKY_JITTER..=STICKY_JITTER),
                rng.gen_range(-STICKY_JITTER..=STICKY_JITTER),
                rng.gen_range(-STICKY_JITTER..=STICKY_JITTER),
            ]
        })
        .collect();

    let params: Vec<(f64, f64)> = (0..n)
        .map(|leaf| digit_param(leaf, levels, log_b, branching))
        .collect();

    // Centre-out emission: the first member sits at the middle of the
    // parameter square, so a fat tube grown around it contains everything.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (ax, ay) = params[a];
        let (bx, by) = params[b];
        (ax * ax + ay * ay)
            .total_cmp(&(bx * bx + by * by))
            .then(ax.total_cmp(&bx))
            .then(ay.total_cmp(&by))
    });

    let mut tubes = Vec::with_capacity(n);
    for &leaf in &order {
        let (vx, vy) = params[leaf];
        let jit = jitter[leaf];
        let sigma = (
            STICKY_TILT_GAIN * vx + jit[0] * delta,
            STICKY_TILT_GAIN * vy + jit[1] * delta,
        );
        let anchor = Vec3::new(
            STICKY_OFFSET_GAIN * vx + jit[2] * delta,
            STICKY_OFFSET_GAIN * vy + jit[3] * delta,
            0.0,
        );
        tubes.push(Tube::new(anchor, tilted_dir(sigma), delta)?);
    }

    let mut tree = CoverTree::default();
    for i in 0..=levels {
        let rho = f64::from(branching).powi(-(i as i32));
        let clans = 1usize << (2 * log_b * i);
        let mut cover = Vec::with_capacity(clans);
        for clan in 0..clans {
            let vc = digit_param(clan, i, log_b, branching);
            let anchor = Vec3::new(
                STICKY_OFFSET_GAIN * vc.0,
                STICKY_OFFSET_GAIN * vc.1,
                0.0,
            );
            cover.push(Tube::with_length(
                anchor,
                tilted_dir((STICKY_TILT_GAIN * vc.0, STICKY_TILT_GAIN * vc.1)),
                STICKY_COVER_FATNESS * rho,
                1.1 + 0.5 * rho,
            )?);
        }
        let drop_bits = 2 * log_b * (levels - i);
        let assignment: Vec<u32> = order.iter().map(|&leaf| (leaf >> drop_bits) as u32).collect();
        tree.levels.push(CoverLevel {
            rho,
            cover,
            assignment,
        });
    }

    Ok(StickyFamily {
        family: TubeFamily::new(tubes, delta)?,
        tree,
        snapped_k,
        branching,
        levels,
    })
}

// ---------------------------------------------------------------------------
// Coplanar (degenerate) families
// ---------------------------------------------------------------------------

/// δ-tubes whose axes all lie in the plane `{y = 0}`: a full net of in-plane
/// directions (pitch `1.05δ` over a half-turn), each carrying a ladder of
/// in-plane offsets (pitch `1.57δ`, staggered by half a step on alternating
/// rows so neighbouring rows never align). The whole family fits inside the
/// slab of thickness `2δ` around the plane.
///
/// The construction is parameter-free and deterministic: no seed.
pub fn gen_coplanar(k: u32) -> Result<TubeFamily> {
    let delta = checked_delta(k)?;
    // Shaving the radius by one part in 10⁹ keeps boundary containments
    // (tube inside the width-2δ slab) decidable in floating point.
    let radius = delta * (1.0 - 1e-9);
    let angle_step = 1.05 * delta;
    let offset_step = 1.57 * delta;
    // The ladder of directions wraps around the half-turn, so the last row
    // must stay 2.2δ short of the first *as a line*: wrap-around pairs share
    // no offset stagger and separate by bearing alone.
    let rows = ((PI - 2.2 * delta) / angle_step).floor() as usize + 1;
    let mut tubes = Vec::new();
    for i in 0..rows {
        let theta = (i as f64 + 0.5) * angle_step;
        let dir = Vec3::new(theta.sin(), 0.0, theta.cos());
        let normal = Vec3::new(theta.cos(), 0.0, -theta.sin());
        let stagger = 0.5 * offset_step * (i % 2) as f64;
        let lo = ((-0.5 - stagger) / offset_step).ceil() as i64;
        let hi = ((0.5 - stagger) / offset_step).floor() as i64;
        for m in lo..=hi {
            let o = stagger + m as f64 * offset_step;
            tubes.push(Tube::new(o * normal, dir, radius)?);
        }
    }
    TubeFamily::new(tubes, delta)
}

// ---------------------------------------------------------------------------
// Prism-clustered families
// ---------------------------------------------------------------------------

/// Randomly posed boxes plus the tubes they host.
#[derive(Clone, Debug)]
pub struct ClusteredFamily {
    /// `None` when the request asked for bare prisms (zero tubes per host).
    pub tubes: Option<TubeFamily>,
    pub prisms: Vec<Prism>,
    pub delta: f64,
}

/// How many tubes a host of cross-section `t` can take at scale δ with the
/// tilt/offset grid used by [`gen_prism_clustered`].
fn host_grid(count: usize, t: f64, delta: f64, radius: f64) -> Result<(usize, usize)> {
    let tilts = (count as f64).sqrt().ceil() as usize;
    let offsets = count.div_ceil(tilts);
    // End excursion across the host: half the tilt fan plus half the offset
    // ladder plus the tube's own radius must stay inside the half-width.
    let reach = 1.2 * delta * (tilts - 1) as f64 / 2.0
        + 1.15 * delta * (offsets - 1) as f64 / 2.0
        + radius;
    if reach > 0.5 * t {
        return Err(LabError::Infeasible(format!(
            "{count} tubes per prism exceed the t = {t} cross-section at delta = {delta}"
        )));
    }
    Ok((tilts, offsets))
}

/// Tubes filling one host: directions fan in the host's `(v, w)` plane with
/// pitch `2.4δ` and anchors step along `v` with pitch `1.15δ`, so any two
/// tubes separate either in angle or in offset (and the two never cancel:
/// the grid pitches differ).
fn fill_host(
    prism: &Prism,
    delta: f64,
    radius: f64,
    grid: (usize, usize),
    count: usize,
    out: &mut Vec<Tube>,
) -> Result<()> {
    let (tilts, offsets) = grid;
    let [_, v, w] = *prism.frame();
    let length = 1.0 - 4.0 * delta;
    for c in 0..count {
        let ti = (c % tilts) as f64 - (tilts - 1) as f64 / 2.0;
        let oi = (c / tilts) as f64 - (offsets - 1) as f64 / 2.0;
        let phi = 2.4 * delta * ti;
        let dir = w * phi.cos() + v * phi.sin();
        let anchor = prism.center() + v * (1.15 * delta * oi);
        out.push(Tube::with_length(anchor, dir, radius, length)?);
    }
    Ok(())
}

/// One uniformly posed `s × t × 1` box with centre in `B(0, 1/4)` (so the
/// box stays inside the unit ball).
fn sample_host(rng: &mut ChaCha8Rng, s: f64, t: f64) -> Result<Prism> {
    let center = ball_sample(rng, 0.25);
    let z = rng.gen_range(-1.0..=1.0f64);
    let az = rng.gen_range(0.0..TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    let w = Vec3::new(r * az.cos(), r * az.sin(), z);
    let (u0, v0) = crate::geom::orthonormal_complement(&w);
    let roll = rng.gen_range(0.0..TAU);
    let u = u0 * roll.cos() + v0 * roll.sin();
    let v = w.cross(&u);
    Prism::from_half_dims(center, [u, v, w], [0.5 * s, 0.5 * t, 0.5])
}

/// Plants `⌈1/(2st)⌉` randomly posed `s × t × 1` prisms, re-sampling the
/// whole batch until the prism multiset measures a convex Wolff error of at
/// most 4, then fills each host with `count_per_prism` tubes contained in it.
/// Tube radius is `δ` (shaved to fit) or `s/2` when the host is thinner than
/// `2δ`.
pub fn gen_prism_clustered(
    delta: f64,
    s: f64,
    t: f64,
    count_per_prism: usize,
    seed: u64,
) -> Result<ClusteredFamily> {
    let Some(e) = dyadic_exponent(delta) else {
        return Err(LabError::ScaleNotDyadic(delta));
    };
    if !(-12..=-2).contains(&e) {
        return Err(LabError::ScaleRange(e.unsigned_abs()));
    }
    if !(delta <= s && s <= t && t <= 1.0) {
        return Err(LabError::HypothesisViolated(format!(
            "prism dims must satisfy delta <= s <= t <= 1 (got s = {s}, t = {t})"
        )));
    }
    let radius = (delta * (1.0 - 1e-6)).min(0.5 * s);
    let grid = if count_per_prism > 0 {
        Some(host_grid(count_per_prism, t, delta, radius)?)
    } else {
        None
    };
    let hosts = (1.0 / (2.0 * s * t)).ceil() as usize;
    if hosts > 4096 {
        return Err(LabError::Infeasible(format!(
            "{hosts} hosts of {s} x {t} x 1 would be needed to carry unit mass"
        )));
    }

    let budget = 4.0;
    let catalog = CatalogConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tries = 0usize;
    let mut best = f64::INFINITY;
    loop {
        if tries >= 10_000 {
            return Err(LabError::CwaBudget {
                budget,
                tries,
                best,
            });
        }
        let mut prisms = Vec::with_capacity(hosts);
        for _ in 0..hosts {
            tries += 1;
            prisms.push(sample_host(&mut rng, s, t)?);
        }
        let solids: Vec<Solid> = prisms.iter().cloned().map(Solid::Prism).collect();
        let report = convex_wolff_error_mixed(&solids, delta, budget, &catalog)?;
        best = best.min(report.error_constant);
        if report.error_constant > budget {
            continue;
        }
        let Some(grid) = grid else {
            return Ok(ClusteredFamily {
                tubes: None,
                prisms,
                delta,
            });
        };
        let mut tubes = Vec::with_capacity(hosts * count_per_prism);
        for p in &prisms {
            fill_host(p, delta, radius, grid, count_per_prism, &mut tubes)?;
        }
        let family = TubeFamily::new(tubes, delta)?;
        // Hosts are posed independently, so distinct hosts can in principle
        // overlap enough to swallow each other's tubes; such batches are
        // simply re-drawn.
        if check_essentially_distinct(&family).is_err() {
            continue;
        }
        return Ok(ClusteredFamily {
            tubes: Some(family),
            prisms,
            delta,
        });
    }
}

// ---------------------------------------------------------------------------
// Random lines and tiled point sets
// ---------------------------------------------------------------------------

/// Sampled line parameters with their δ-tubes.
#[derive(Clone, Debug)]
pub struct LineSample {
    pub family: TubeFamily,
    /// The raw `(a, b, c, d)` draws shifted into `[0,1]⁴`, one 4-D point per
    /// tube, on the same dyadic scale.
    pub params: ParamPointSet,
}

/// `count` lines `(z=0 point (a,b), slope (c,d))` drawn uniformly from
/// `[-1/2, 1/2]⁴`, realised as δ-tubes; a draw that lands inside the
/// 2-dilate of an earlier one (astronomically unlikely) is redrawn.
pub fn gen_random_lines(k: u32, count: usize, seed: u64) -> Result<LineSample> {
    let delta = checked_delta(k)?;
    if count == 0 || count > (1 << 20) {
        return Err(LabError::Infeasible(format!(
            "line count {count} outside [1, 2^20]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tubes: Vec<Tube> = Vec::with_capacity(count);
    let mut coords = Vec::with_capacity(4 * count);
    while tubes.len() < count {
        let (a, b, c, d) = (
            rng.gen_range(-0.5..=0.5),
            rng.gen_range(-0.5..=0.5),
            rng.gen_range(-0.5..=0.5),
            rng.gen_range(-0.5..=0.5),
        );
        let tube = line_tube(a, b, c, d, delta)?;
        let clear = tubes.iter().all(|t| {
            t.dir().cross(&tube.dir()).norm() > 4.5 * delta
                || essentially_distinct(t, &tube).expect("common radius")
        });
        if !clear {
            continue;
        }
        tubes.push(tube);
        coords.extend_from_slice(&[a + 0.5, b + 0.5, c + 0.5, d + 0.5]);
    }
    Ok(LineSample {
        family: TubeFamily::new(tubes, delta)?,
        params: ParamPointSet::new(4, k, coords)?,
    })
}

/// Largest power of two that is at most `x` (for `x > 0`).
fn snap_down_dyadic(x: f64) -> f64 {
    let mut e = x.log2().floor() as i32;
    if 2f64.powi(e) > x {
        e -= 1;
    }
    if 2f64.powi(e + 1) <= x {
        e += 1;
    }
    2f64.powi(e)
}

/// Tiles the unit cube `[0,1]^n` with translates of a base point set.
///
/// The base must live in the corner cube `[0, ρ]^n` and already carry
/// `≥ (ρ/δ)^s / 8` occupied δ-cells; it is copied into every cell of an
/// axis-aligned grid of pitch `λ`, the largest dyadic value `≤ ρ^{s/n}`
/// (clamped up to ρ so copies cannot overlap). Mass multiplies by `λ^{-n}`,
/// which is what makes the output reach `≥ δ^{-s}/8` occupied δ-cells while
/// ball counts grow no faster than the base's by more than the tiling
/// geometry's factor.
pub fn gen_tiled_pointset(base: &ParamPointSet, rho: f64, s: f64) -> Result<ParamPointSet> {
    let n = base.dim();
    let delta = base.scale().delta();
    if dyadic_exponent(rho).is_none() || !(delta..=1.0).contains(&rho) {
        return Err(LabError::HypothesisViolated(format!(
            "tile source size {rho} must be dyadic in [delta, 1]"
        )));
    }
    if !(s > 0.0 && s <= n as f64) {
        return Err(LabError::HypothesisViolated(format!(
            "exponent {s} outside (0, {n}]"
        )));
    }
    if base.is_empty() {
        return Err(LabError::HypothesisViolated("empty base set".into()));
    }
    for p in base.iter_points() {
        if p.iter().any(|&x| x > rho * (1.0 + 1e-9)) {
            return Err(LabError::HypothesisViolated(format!(
                "base point {p:?} leaves the corner cube of side {rho}"
            )));
        }
    }
    let covered = base.covering_number() as f64;
    let need = 0.125 * (rho / delta).powf(s);
    if covered < need {
        return Err(LabError::HypothesisViolated(format!(
            "base covers {covered} cells, below the required {need:.1}"
        )));
    }

    let lambda = snap_down_dyadic(rho.powf(s / n as f64)).max(rho);
    let per_axis = (1.0 / lambda).round() as usize;
    let copies = per_axis.pow(n as u32);
    if copies.saturating_mul(base.len()) > (1 << 22) {
        return Err(LabError::Infeasible(format!(
            "tiling would emit {} points",
            copies.saturating_mul(base.len())
        )));
    }

    let mut coords = Vec::with_capacity(copies * base.len() * n);
    let mut cell = vec![0usize; n];
    for _ in 0..copies {
        for p in base.iter_points() {
            for (axis, &x) in p.iter().enumerate() {
                coords.push(x + cell[axis] as f64 * lambda);
            }
        }
        // Odometer increment over the per-axis grid.
        for slot in cell.iter_mut() {
            *slot += 1;
            if *slot < per_axis {
                break;
            }
            *slot = 0;
        }
    }
    ParamPointSet::new(n, base.scale().k(), coords)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
