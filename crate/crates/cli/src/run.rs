//! One experiment, end to end: load inputs, measure, write the report and
//! its metadata sidecar, and hand back the exit status plus the row a sweep
//! would tabulate.
//!
//! Exit-code contract: `Ok(outcome)` with `outcome.exit` 0 (pass or plain
//! completion) or 1 (a check ran and failed; the witness is in the report);
//! `Err(_)` means unusable input or config, which the callers map to 2.

use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::{json, Value};

use kakeya_core::assouad::{assouad_scan, two_scale_amplify};
use kakeya_core::axioms::{
    check_every_scale, check_self_similar, convex_wolff_error, convex_wolff_error_mixed,
    AxiomReport, CatalogConfig, EveryScaleConfig,
};
use kakeya_core::generators::{
    gen_coplanar, gen_direction_separated, gen_prism_clustered, gen_random_lines, gen_sticky,
};
use kakeya_core::geom::{Solid, TubeFamily};
use kakeya_core::prism::{four_way_classify, prism_dichotomy, CoarsenConfig, FamilyClass};
use kakeya_core::projection::{lp_counting_norm, twisted_project, SlopeFunction};
use kakeya_core::shading::ShadedFamily;
use kakeya_core::voxel::{rasterize_solid, rasterize_union, GridScale, VoxelSet, VoxelSet2};

use crate::config::{AxiomKind, CommandKind, ExperimentConfig, FamilyKind};
use crate::formats::{
    load_family, load_voxels, save_family, save_voxels, save_voxels_2d, FamilyFile, LoadedFamily,
    PrismRecord, TubeRecord, FAMILY_FORMAT,
};
use crate::report::{witness_value, write_metadata, Report};

/// What a finished run tells the caller (and a sweep's CSV row).
#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// 0 = pass/completion, 1 = failed check.
    pub exit: i32,
    /// Family construction the run touched.
    pub kind: String,
    pub delta: f64,
    /// Primary measured constant (count, error, ζ, fraction, area).
    pub constant: Option<f64>,
    /// Measured exponent where the command has one (σ, dimension, ratio).
    pub exponent: Option<f64>,
    pub status: String,
    /// One-line human summary, printed by the CLI.
    pub summary: String,
}

/// Run a validated config. Writes the primary artifact to `config.out` and
/// timing metadata to the `.meta.json` sidecar next to it.
pub fn run(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate().map_err(|e| anyhow!(e))?;
    log::info!("running {} -> {}", config.command, config.out.display());
    let t0 = Instant::now();
    let outcome = match config.command {
        CommandKind::Generate => run_generate(config)?,
        CommandKind::Check => run_check(config)?,
        CommandKind::Assouad => run_assouad(config)?,
        CommandKind::TwoScale => run_two_scale(config)?,
        CommandKind::PrismDichotomy => run_dichotomy(config)?,
        CommandKind::Project => run_project(config)?,
    };
    log::info!(
        "{} finished in {:.2} s ({})",
        config.command,
        t0.elapsed().as_secs_f64(),
        outcome.status
    );
    write_metadata(&config.out, t0.elapsed())?;
    Ok(outcome)
}

fn scale_for(delta: f64) -> Result<GridScale> {
    GridScale::from_delta(delta)
        .map_err(|e| anyhow!("family scale {delta} does not fit the grid: {e}"))
}

fn tube_family(fam: &LoadedFamily) -> Result<TubeFamily> {
    if !fam.prisms.is_empty() {
        bail!("this measurement needs a tube-only family; the input holds prisms");
    }
    TubeFamily::new(fam.tubes.clone(), fam.delta)
        .map_err(|e| anyhow!("input is not a valid tube family: {e}"))
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

fn run_generate(config: &ExperimentConfig) -> Result<RunOutcome> {
    let kind = config.kind.expect("validated");
    let k = config.scale.expect("validated");
    let seed = config.seed;

    let mut tubes = Vec::new();
    let mut prisms = Vec::new();
    let delta;
    match kind {
        FamilyKind::DirectionSeparated => {
            let fam = gen_direction_separated(k, seed)?;
            delta = fam.delta();
            tubes = fam.tubes().to_vec();
        }
        FamilyKind::Coplanar => {
            let fam = gen_coplanar(k)?;
            delta = fam.delta();
            tubes = fam.tubes().to_vec();
        }
        FamilyKind::Sticky => {
            let sticky = gen_sticky(k, config.branching.unwrap_or(2), seed)?;
            delta = sticky.family.delta();
            tubes = sticky.family.tubes().to_vec();
        }
        FamilyKind::PrismClustered => {
            let d = 2f64.powi(-(k as i32));
            let s = config.side.unwrap_or(4.0) * d;
            let t = config.tside.unwrap_or(0.25);
            let per = config.count.unwrap_or(0) as usize;
            let fam = gen_prism_clustered(d, s, t, per, seed)?;
            delta = fam.delta;
            prisms = fam.prisms.clone();
            if let Some(tf) = &fam.tubes {
                tubes = tf.tubes().to_vec();
            }
        }
        FamilyKind::RandomLines => {
            let sample = gen_random_lines(k, config.count.unwrap_or(64) as usize, seed)?;
            delta = sample.family.delta();
            tubes = sample.family.tubes().to_vec();
        }
    }

    let file = FamilyFile {
        format: FAMILY_FORMAT.to_string(),
        kind: kind.to_string(),
        delta,
        tubes: tubes.iter().map(TubeRecord::from_tube).collect(),
        prisms: prisms.iter().map(PrismRecord::from_prism).collect(),
        config: Some(config.clone()),
    };
    save_family(&config.out, &file)?;

    if let Some(vox_path) = &config.save_voxels {
        let scale = scale_for(delta)?;
        let solids: Vec<Solid> = tubes
            .iter()
            .cloned()
            .map(Solid::Tube)
            .chain(prisms.iter().cloned().map(Solid::Prism))
            .collect();
        let set = rasterize_union(scale, &solids)?;
        save_voxels(vox_path, &set)?;
    }

    let count = tubes.len() + prisms.len();
    let sigma = (count >= 2).then(|| (count as f64).ln() / (1.0 / delta).ln());
    Ok(RunOutcome {
        exit: 0,
        kind: kind.to_string(),
        delta,
        constant: Some(count as f64),
        exponent: sigma,
        status: "ok".into(),
        summary: format!(
            "generated {kind} family: {count} members at delta = {delta} -> {}",
            config.out.display()
        ),
    })
}

// ---------------------------------------------------------------------------
// check
// ---------------------------------------------------------------------------

fn axiom_results(rep: &AxiomReport) -> Value {
    json!({
        "axiom": rep.axiom,
        "error_constant": rep.error_constant,
        "witness_count": rep.witness_count,
        "pass_threshold": rep.pass_threshold,
        "notes": rep.notes,
    })
}

fn run_check(config: &ExperimentConfig) -> Result<RunOutcome> {
    let fam = load_family(config.family.as_ref().expect("validated"))?;
    let axiom = config.axiom.expect("validated");
    let threshold = config.threshold.unwrap_or(100.0);
    let catalog = CatalogConfig::default();

    let rep = match axiom {
        AxiomKind::ConvexWolff => {
            if fam.prisms.is_empty() {
                convex_wolff_error(&tube_family(&fam)?, threshold, &catalog)
            } else {
                convex_wolff_error_mixed(&fam.solids(), fam.delta, threshold, &catalog)?
            }
        }
        AxiomKind::EveryScale => {
            let tf = tube_family(&fam)?;
            check_every_scale(&tf, &EveryScaleConfig::uniform(threshold))?.0
        }
        AxiomKind::SelfSimilar => {
            let tf = tube_family(&fam)?;
            check_self_similar(&tf, threshold)?.0
        }
    };

    let mut report = Report::new(config, axiom_results(&rep)).with_verdict(rep.passed);
    if let Some(w) = &rep.witness {
        report = report.with_witness(witness_value(w));
    }
    report.write(&config.out)?;

    let status = if rep.passed { "pass" } else { "fail" };
    Ok(RunOutcome {
        exit: if rep.passed { 0 } else { 1 },
        kind: fam.kind,
        delta: fam.delta,
        constant: Some(rep.error_constant),
        exponent: None,
        status: status.into(),
        summary: format!(
            "{axiom}: error {:.4} vs budget {threshold} — {status} (report {})",
            rep.error_constant,
            config.out.display()
        ),
    })
}

// ---------------------------------------------------------------------------
// assouad
// ---------------------------------------------------------------------------

fn run_assouad(config: &ExperimentConfig) -> Result<RunOutcome> {
    let min_sep = config.min_sep.unwrap_or(4.0);
    let (set, kind, delta): (VoxelSet, String, f64) = if let Some(path) = &config.voxels {
        let set = load_voxels(path)?;
        let delta = set.scale().delta();
        (set, "voxels".into(), delta)
    } else {
        let fam = load_family(config.family.as_ref().expect("validated"))?;
        let scale = scale_for(fam.delta)?;
        let set = rasterize_union(scale, &fam.solids())?;
        (set, fam.kind.clone(), fam.delta)
    };

    let scan = assouad_scan(&set, min_sep)?;
    let results = json!({
        "scan": scan,
        "occupied_cells": set.count(),
        "union_volume": set.volume(),
    });
    Report::new(config, results).write(&config.out)?;

    Ok(RunOutcome {
        exit: 0,
        kind,
        delta,
        constant: Some(scan.zeta),
        exponent: Some(scan.dimension_witnessed),
        status: "ok".into(),
        summary: format!(
            "density scan: zeta = {:.4} at (rho, r) = ({}, {}), dimension {:.3} (report {})",
            scan.zeta,
            scan.rho,
            scan.r,
            scan.dimension_witnessed,
            config.out.display()
        ),
    })
}

// ---------------------------------------------------------------------------
// two-scale
// ---------------------------------------------------------------------------

fn run_two_scale(config: &ExperimentConfig) -> Result<RunOutcome> {
    let fam = load_family(config.family.as_ref().expect("validated"))?;
    let min_sep = config.min_sep.unwrap_or(4.0);
    let scale = scale_for(fam.delta)?;

    // Amplification is generic over the member shape; pick by file contents.
    let (results, retained_fraction, ratio_exponent) = if fam.prisms.is_empty() {
        let shaded = ShadedFamily::full(scale, fam.tubes.clone())?;
        let out = two_scale_amplify(&shaded, min_sep)?;
        summarize_two_scale(&out)
    } else {
        let shaded = ShadedFamily::full(scale, fam.prisms.clone())?;
        let out = two_scale_amplify(&shaded, min_sep)?;
        summarize_two_scale(&out)
    };
    Report::new(config, results).write(&config.out)?;

    Ok(RunOutcome {
        exit: 0,
        kind: fam.kind,
        delta: fam.delta,
        constant: Some(retained_fraction),
        exponent: Some(ratio_exponent),
        status: "ok".into(),
        summary: format!(
            "two-scale amplification kept {:.2}% of the mass, ratio exponent {:.3} (report {})",
            100.0 * retained_fraction,
            ratio_exponent,
            config.out.display()
        ),
    })
}

fn summarize_two_scale<S: kakeya_core::shading::LabSolid>(
    out: &kakeya_core::assouad::TwoScaleOutcome<S>,
) -> (Value, f64, f64) {
    let retained = out.retained_mass as f64 / out.initial_mass.max(1) as f64;
    let rounds: Vec<Value> = out
        .rounds
        .iter()
        .map(|r| {
            json!({
                "scan": r.scan,
                "capture_radius": r.capture_radius,
                "removed": r.removed,
            })
        })
        .collect();
    let selected: Vec<Value> = out
        .selected
        .iter()
        .map(|(c, r)| json!({ "center": c, "radius": r }))
        .collect();
    let results = json!({
        "rho": out.rho,
        "r": out.r,
        "ratio_exponent": out.ratio_exponent,
        "initial_mass": out.initial_mass,
        "retained_mass": out.retained_mass,
        "rounds": rounds,
        "selected_balls": selected,
    });
    (results, retained, out.ratio_exponent)
}

// ---------------------------------------------------------------------------
// prism-dichotomy
// ---------------------------------------------------------------------------

fn run_dichotomy(config: &ExperimentConfig) -> Result<RunOutcome> {
    let fam = load_family(config.family.as_ref().expect("validated"))?;
    let eps = config.eps.expect("validated");
    let scale = scale_for(fam.delta)?;

    let (results, constant, trace_lines): (Value, f64, Vec<String>) = if !fam.prisms.is_empty() {
        let shaded = ShadedFamily::full(scale, fam.prisms.clone())?;
        let rounds_budget = scale.k() as usize + 2;
        let out = prism_dichotomy(&shaded, &CoarsenConfig::new(eps), rounds_budget)?;
        let trace: Vec<String> = out
            .rounds
            .iter()
            .map(|r| serde_json::to_string(r).expect("trace record serializes"))
            .collect();
        let last_branch = out
            .rounds
            .last()
            .map(|r| r.branch.clone())
            .unwrap_or_else(|| "none".into());
        let witness = out.witness.as_ref().map(|w| json!(w));
        let results = json!({
            "route": "prism-coarsening",
            "rounds": out.rounds.len(),
            "final_branch": last_branch,
            "witness": witness,
            "final_prisms": out.final_family.as_ref().map(|f| f.len()),
        });
        let constant = out.witness.as_ref().map(|w| w.zeta).unwrap_or(f64::NAN);
        (results, constant, trace)
    } else {
        let shaded = ShadedFamily::full(scale, fam.tubes.clone())?;
        let (class, trace) = four_way_classify(&shaded, eps)?;
        let (label, detail, constant) = match &class {
            FamilyClass::DenseBall { witness } => {
                ("dense-ball", json!({ "witness": witness }), witness.zeta)
            }
            FamilyClass::SelfSimilarWolff { error } => {
                ("self-similar-wolff", json!({ "error": error }), *error)
            }
            FamilyClass::TubeConcentrated { rho, fraction } => (
                "tube-concentrated",
                json!({ "rho": rho, "fraction": fraction }),
                *fraction,
            ),
            FamilyClass::CoarseScaleRich { rho, prisms } => (
                "coarse-scale-rich",
                json!({ "rho": rho, "prisms": prisms }),
                *prisms as f64,
            ),
        };
        let lines = trace
            .iter()
            .map(|n| serde_json::to_string(&json!({ "note": n })).expect("note serializes"))
            .collect();
        let results = json!({
            "route": "four-way-classification",
            "class": label,
            "detail": detail,
            "trace_len": trace.len(),
        });
        (results, constant, lines)
    };

    if let Some(trace_path) = &config.trace {
        let mut body = trace_lines.join("\n");
        body.push('\n');
        std::fs::write(trace_path, body)
            .with_context(|| format!("cannot write trace {}", trace_path.display()))?;
    }
    Report::new(config, results.clone()).write(&config.out)?;

    let label = results
        .get("class")
        .or_else(|| results.get("final_branch"))
        .and_then(Value::as_str)
        .unwrap_or("done")
        .to_string();
    Ok(RunOutcome {
        exit: 0,
        kind: fam.kind,
        delta: fam.delta,
        constant: Some(constant),
        exponent: None,
        status: "ok".into(),
        summary: format!(
            "dichotomy outcome: {label} (report {})",
            config.out.display()
        ),
    })
}

// ---------------------------------------------------------------------------
// project
// ---------------------------------------------------------------------------

fn run_project(config: &ExperimentConfig) -> Result<RunOutcome> {
    let fam = load_family(config.family.as_ref().expect("validated"))?;
    if fam.tubes.is_empty() {
        bail!("projection needs a tube family; the input holds only prisms");
    }
    let scale = scale_for(fam.delta)?;
    let [a, b, c] = config.slope.unwrap_or([0.0, 1.5, 1.0 / 300.0]);
    let f = SlopeFunction::from_fn(scale.k(), move |z| a + b * z + c * z * z)
        .map_err(|e| anyhow!("slope function rejected: {e}"))?;

    let mut curves = Vec::with_capacity(fam.tubes.len());
    for tube in &fam.tubes {
        let vox = rasterize_solid(scale, &Solid::Tube(tube.clone()))?;
        curves.push(twisted_project(&vox, &f)?);
    }
    let mut union = curves[0].clone();
    for curve in &curves[1..] {
        union.union_with(curve)?;
    }
    let l4 = lp_counting_norm(&curves, 4.0)?;
    let areas: Vec<f64> = curves.iter().map(VoxelSet2::area).collect();

    let results = json!({
        "slope": [a, b, c],
        "curves": curves.len(),
        "union_cells": union.count(),
        "union_area": union.area(),
        "l4_counting_norm": l4,
        "mean_curve_area": areas.iter().sum::<f64>() / areas.len() as f64,
    });
    Report::new(config, results).write(&config.out)?;

    if let Some(path) = &config.save_voxels {
        save_voxels_2d(path, &union)?;
    }

    Ok(RunOutcome {
        exit: 0,
        kind: fam.kind,
        delta: fam.delta,
        constant: Some(union.area()),
        exponent: None,
        status: "ok".into(),
        summary: format!(
            "projected {} tubes: union area {:.5}, L4 counting norm {:.4} (report {})",
            curves.len(),
            union.area(),
            l4,
            config.out.display()
        ),
    })
}
