//! Cross-checker invariants: the implication chain from self-similarity down
//! to the plain convex bound, monotonicity of the bound under coarsening,
//! the K·C law for uniform covers, and the cardinality floor the convex
//! bound forces on any family. All count comparisons are integer-exact.

use kakeya_core::axioms::{
    build_partitioning_cover, check_every_scale, check_self_similar, convex_wolff_error,
    convex_wolff_error_mixed, count_tubes_in, CatalogConfig, EveryScaleConfig,
};
use kakeya_core::generators::{
    gen_coplanar, gen_direction_separated, gen_prism_clustered, gen_random_lines, gen_sticky,
};
use kakeya_core::geom::{Solid, TubeFamily};
use kakeya_core::voxel::{GridScale, VoxelSet};

#[test]
fn self_similar_implies_every_scale_implies_convex_bound() {
    let sticky = gen_sticky(4, 2, 9).unwrap();
    let fam = &sticky.family;
    let c = 64.0;

    let (ss, ss_tree) = check_self_similar(fam, c).unwrap();
    assert!(
        ss.passed,
        "sticky family failed self-similarity with constant {}: {:?}",
        ss.error_constant, ss.notes
    );
    assert!(ss_tree.refinement_violation().is_none());

    let (es, _) = check_every_scale(fam, &EveryScaleConfig::uniform(c)).unwrap();
    assert!(
        es.passed,
        "self-similar family must pass the every-scale check (error {})",
        es.error_constant
    );

    let cw = convex_wolff_error(fam, c, &CatalogConfig::default());
    assert!(
        cw.passed && cw.error_constant <= c,
        "every-scale family must satisfy the one-scale convex bound (error {})",
        cw.error_constant
    );
}

#[test]
fn coarsening_only_loses_witness_members() {
    let fam = gen_direction_separated(5, 1).unwrap();
    let n = fam.len();
    let rho = 0.125;
    let cover = build_partitioning_cover(&fam, rho).unwrap();

    // Replace every member by its assigned cover tube (a superset), keeping
    // the multiset size.
    let coarse: Vec<_> = cover
        .assignment
        .iter()
        .map(|&a| cover.cover[a as usize].clone())
        .collect();
    let coarse_fam = TubeFamily::new(coarse, rho).unwrap();
    let rep = convex_wolff_error(&coarse_fam, f64::INFINITY, &CatalogConfig::default());
    let w = rep.witness.expect("a non-empty scan reports its worst witness");

    // Any witness holding a coarse member holds the original inside it, so
    // coarsening can only shrink per-witness counts.
    let coarse_count = count_tubes_in(&w, coarse_fam.tubes());
    let orig_count = count_tubes_in(&w, fam.tubes());
    assert!(
        orig_count >= coarse_count,
        "witness holds {coarse_count} coarse members but only {orig_count} originals"
    );
    let orig_at_witness = orig_count as f64 / (w.volume() * n as f64);
    assert!(rep.error_constant <= orig_at_witness * (1.0 + 1e-9));
}

#[test]
fn uniform_cover_of_a_cwa_family_is_cwa_with_k_times_the_error() {
    let fam = gen_direction_separated(5, 1).unwrap();
    let n = fam.len();
    let rho = 0.125;
    let cover = build_partitioning_cover(&fam, rho).unwrap();
    let sizes = cover.bucket_sizes();
    let min_b = *sizes.iter().min().unwrap();
    let max_b = *sizes.iter().max().unwrap();
    assert_eq!(sizes.iter().sum::<usize>(), n, "buckets partition the family");

    let cover_fam = TubeFamily::new(cover.cover.clone(), rho).unwrap();
    let rep = convex_wolff_error(&cover_fam, f64::INFINITY, &CatalogConfig::default());
    let w = rep.witness.expect("worst witness present");

    // Each cover tube inside the witness carries its whole (disjoint) bucket.
    let cover_count = count_tubes_in(&w, cover_fam.tubes());
    let orig_count = count_tubes_in(&w, fam.tubes());
    assert!(
        cover_count * min_b <= orig_count,
        "{cover_count} cover tubes x bucket floor {min_b} exceed the {orig_count} contained members"
    );
    assert!(cover_fam.len() * max_b >= n);

    // The two integer inequalities give the K-times-error law at the worst
    // witness: cover error <= K x (family error evaluated there).
    let orig_at_witness = orig_count as f64 / (w.volume() * n as f64);
    assert!(
        rep.error_constant <= cover.k_uniformity * orig_at_witness * (1.0 + 1e-9),
        "cover error {} exceeds K = {} times the family error {}",
        rep.error_constant,
        cover.k_uniformity,
        orig_at_witness
    );
}

#[test]
fn families_passing_the_convex_bound_are_large() {
    let catalog = CatalogConfig::default();
    let mut cases: Vec<(&str, Vec<Solid>, f64, f64)> = Vec::new();

    let dirsep = gen_direction_separated(5, 3).unwrap();
    let c = convex_wolff_error(&dirsep, f64::INFINITY, &catalog).error_constant;
    cases.push((
        "direction-separated",
        dirsep.tubes().iter().cloned().map(Solid::Tube).collect(),
        c,
        dirsep.delta(),
    ));

    let coplanar = gen_coplanar(5).unwrap();
    let c = convex_wolff_error(&coplanar, f64::INFINITY, &catalog).error_constant;
    cases.push((
        "coplanar",
        coplanar.tubes().iter().cloned().map(Solid::Tube).collect(),
        c,
        coplanar.delta(),
    ));

    let sticky = gen_sticky(4, 2, 5).unwrap();
    let c = convex_wolff_error(&sticky.family, f64::INFINITY, &catalog).error_constant;
    cases.push((
        "sticky",
        sticky.family.tubes().iter().cloned().map(Solid::Tube).collect(),
        c,
        sticky.family.delta(),
    ));

    let lines = gen_random_lines(5, 30, 7).unwrap();
    let c = convex_wolff_error(&lines.family, f64::INFINITY, &catalog).error_constant;
    cases.push((
        "random-lines",
        lines.family.tubes().iter().cloned().map(Solid::Tube).collect(),
        c,
        lines.family.delta(),
    ));

    let delta = 2f64.powi(-5);
    let clustered = gen_prism_clustered(delta, 4.0 * delta, 0.25, 0, 11).unwrap();
    let solids: Vec<Solid> = clustered.prisms.iter().cloned().map(Solid::Prism).collect();
    let c = convex_wolff_error_mixed(&solids, delta, f64::INFINITY, &catalog)
        .unwrap()
        .error_constant;
    cases.push(("clustered-prisms", solids, c, delta));

    for (name, solids, error, _) in cases {
        let max_vol = solids.iter().map(Solid::volume).fold(0.0, f64::max);
        let floor = 1.0 / (error * max_vol);
        assert!(
            solids.len() as f64 >= floor * (1.0 - 1e-8),
            "{name}: {} members below the cardinality floor {floor:.1} (error {error:.3}, max member volume {max_vol:.5})",
            solids.len()
        );
    }
}

#[test]
fn voxel_container_roundtrips_through_a_file() {
    let scale = GridScale::new(4).unwrap();
    let mut v = VoxelSet::empty(scale).unwrap();
    for i in 0..scale.n() {
        v.set(i, (i * 5) % scale.n(), (i * 11) % scale.n());
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sample.kvox");
    {
        let mut f = std::fs::File::create(&path).unwrap();
        v.write_to(&mut f).unwrap();
    }
    let mut f = std::fs::File::open(&path).unwrap();
    let back = VoxelSet::read_from(&mut f).unwrap();
    assert_eq!(back, v);
}
