use membrelax::cell::{qstar, qstar_recession, CellGrid, SolverBudget};
use membrelax::membrane::*;
use membrelax::planar::{total_variations, BendingMeasure, QuadratureConfig, SceneFile};
use membrelax::{CosseratVector, EnergyDensity, Error, PlanarMatrix};

fn convex() -> EnergyDensity {
    EnergyDensity::convex_norm(1.0).unwrap()
}

fn laminate() -> EnergyDensity {
    EnergyDensity::separable_laminate(1.0, 1.0, 0.5).unwrap()
}

fn fixture(name: &str) -> SceneFile {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../cli/tests/fixtures").join(name);
    SceneFile::from_path(&path).unwrap()
}

fn energy(model: &EnergyDensity, s: &SceneFile) -> EnergyBreakdown {
    membrane_energy(model, &s.scene, &s.measure, CellGrid::default(), &SolverBudget::default(), &DensityCache::new()).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn assert_total_is_sum(e: &EnergyBreakdown) {
    assert_eq!(e.total, e.bulk + e.jump + e.cantor + e.singular);
    assert!(e.bulk >= 0.0 && e.jump >= 0.0 && e.cantor >= 0.0 && e.singular >= 0.0);
}

#[test]
fn atom_scene_closed_form() {
    let e = energy(&convex(), &fixture("atom.json"));
    assert_total_is_sum(&e);
    assert!(rel(e.bulk, 1.0) < 0.03 && rel(e.singular, 1.0) < 0.03 && rel(e.total, 2.0) < 0.03, "{e:?}");
    assert_eq!((e.jump, e.cantor), (0.0, 0.0));
}

#[test]
fn jump_scene_closed_form() {
    let e = energy(&convex(), &fixture("jump.json"));
    assert_total_is_sum(&e);
    assert!(rel(e.bulk, 1.0) < 0.03 && rel(e.jump, 1.0) < 0.03 && rel(e.total, 2.0) < 0.03, "{e:?}");
    assert_eq!(e.singular, 0.0);
}

#[test]
fn laminate_zero_state_is_one_half() {
    let mut s = fixture("atom.json");
    s.measure = BendingMeasure::zero();
    let e = energy(&laminate(), &s);
    assert!(rel(e.total, 0.5) < 0.03, "{e:?}");
}

#[test]
fn staircase_cantor_term_matches_the_recession_value() {
    let s = fixture("staircase.json");
    let e = energy(&convex(), &s);
    let stair = s.scene.staircase.as_ref().unwrap();
    let kappa = s.measure.cantor.as_ref().unwrap().density;
    let direct = qstar_recession(
        &convex(),
        &stair.amplitude.outer([0.0, 1.0]),
        &kappa,
        CellGrid::default(),
        &SolverBudget::default(),
        &membrelax::cell::default_cell_ladder(),
    )
    .unwrap();
    assert!(rel(e.cantor, direct * s.scene.width()) < 0.03);
    assert!(rel(e.cantor, 1.25f64.sqrt()) < 0.03);
}

#[test]
fn moment_free_examples() {
    let (g, b, cache) = (CellGrid::default(), SolverBudget::default(), DensityCache::new());
    let flat = fixture("atom.json");
    let e = membrane_energy_no_moment(&convex(), &flat.scene, g, &b, &cache).unwrap();
    assert!(rel(e.total, 1.0) < 0.02 && e.singular == 0.0, "{e:?}");
    let jump = fixture("jump.json");
    let e = membrane_energy_no_moment(&convex(), &jump.scene, g, &b, &cache).unwrap();
    assert!(rel(e.total, 2.0) < 0.03, "{e:?}");
}

#[test]
fn moment_free_energy_is_below_sampled_bending() {
    let (g, b) = (CellGrid::default(), SolverBudget::default());
    let mut s = fixture("affine.json");
    for model in [convex(), laminate()] {
        let cache = DensityCache::new();
        let free = membrane_energy_no_moment(&model, &s.scene, g, &b, &cache).unwrap();
        let (mut best, mut allowance) = (f64::INFINITY, 0.0);
        for b3 in [-1.0, -0.5, 0.0, 0.5, 1.0] {
            s.measure = BendingMeasure {
                ac: vec![CosseratVector::new(0.0, 0.0, b3)],
                ..BendingMeasure::zero()
            };
            let e = membrane_energy(&model, &s.scene, &s.measure, g, &b, &cache).unwrap();
            if e.total < best {
                (best, allowance) = (e.total, e.tolerance());
            }
        }
        assert!(free.total <= best + allowance + free.tolerance(), "{} vs {best}", free.total);
    }
}

#[test]
fn absolutely_continuous_data_populates_only_the_bulk_term() {
    let s = fixture("affine.json");
    let e = energy(&convex(), &s);
    assert_eq!((e.jump, e.cantor, e.singular), (0.0, 0.0, 0.0));
    let r = &s.scene.regions[0];
    let direct = qstar(&convex(), &r.gradient, &s.measure.ac_density(0), CellGrid::default(), &SolverBudget::default()).unwrap();
    assert!((e.bulk - direct.value * r.area()).abs() < 1e-12);
}

#[test]
fn energy_is_bounded_below_by_the_growth_constant() {
    for name in ["atom.json", "jump.json", "staircase.json", "affine.json"] {
        let s = fixture(name);
        for model in [convex(), laminate()] {
            let e = energy(&model, &s);
            let tv = total_variations(&s.scene, &s.measure);
            let lower = model.constants().split_lower() * (tv.du + tv.measure);
            assert!(e.total >= lower - e.tolerance(), "{name}: {} < {lower}", e.total);
        }
    }
}

#[test]
fn singular_terms_scale_linearly() {
    let s = fixture("jump.json");
    let mut m = s.clone();
    m.measure.atoms.push(membrelax::planar::Atom {
        at: [0.5, 0.25],
        weight: CosseratVector::new(0.0, 0.3, 0.4),
    });
    m.measure.lines.push(membrelax::planar::LinePart {
        from: [0.0, 0.5],
        to: [1.0, 0.5],
        density: CosseratVector::new(0.0, 0.0, 0.5),
    });
    let base = energy(&convex(), &m);
    let mut scaled = m.clone();
    scaled.measure = m.measure.scale_singular(2.0);
    for jmp in scaled.scene.jumps.iter_mut() {
        jmp.jump = jmp.jump.scale(2.0);
    }
    scaled.scene.regions[1].offset = scaled.scene.regions[1].offset.scale(2.0);
    let twice = energy(&convex(), &scaled);
    assert!((twice.singular - 2.0 * base.singular).abs() < 1e-9 * (1.0 + base.singular));
    assert!((twice.jump - 2.0 * base.jump).abs() < 1e-9 * (1.0 + base.jump));
    assert!((twice.bulk - base.bulk).abs() < 1e-12);
}

#[test]
fn energy_is_additive_over_a_clean_cut() {
    let whole = fixture("affine.json");
    let e = energy(&laminate(), &whole);
    let mut parts = 0.0;
    for (lo, hi) in [(0.0, 0.5), (0.5, 1.0)] {
        let mut half = whole.clone();
        half.scene.domain = [lo, 0.0, hi, 1.0];
        half.scene.regions[0].polygon = vec![[lo, 0.0], [hi, 0.0], [hi, 1.0], [lo, 1.0]];
        parts += energy(&laminate(), &half).total;
    }
    assert!((parts - e.total).abs() <= e.tolerance(), "{parts} vs {}", e.total);
}

#[test]
fn density_cache_reuses_solves() {
    let s = fixture("jump.json");
    let cache = DensityCache::new();
    let (g, b) = (CellGrid::default(), SolverBudget::default());
    let first = membrane_energy(&convex(), &s.scene, &s.measure, g, &b, &cache).unwrap();
    let stored = cache.len();
    assert!(stored > 0);
    let second = membrane_energy(&convex(), &s.scene, &s.measure, g, &b, &cache).unwrap();
    assert_eq!(first, second);
    assert_eq!(cache.len(), stored);
}

#[test]
fn invalid_scene_is_rejected() {
    let s = fixture("trace_mismatch.json");
    let r = membrane_energy(&convex(), &s.scene, &s.measure, CellGrid::default(), &SolverBudget::default(), &DensityCache::new());
    assert!(matches!(r, Err(Error::Scene { .. })));
}

#[test]
fn load_work_examples() {
    let cfg = QuadratureConfig::default();
    let s = fixture("atom.json");
    assert_eq!(load_work(&LoadSet::default(), &s.scene, &s.measure, &cfg).unwrap(), 0.0);

    let bump = LoadSet {
        g0_plus: BoundaryFreeField::Bump {
            center: [0.5, 0.5],
            radius: 0.25,
            amplitude: CosseratVector::new(0.0, 0.0, 1.0),
        },
        ..LoadSet::default()
    };
    let mut weighted = s.clone();
    weighted.measure = s.measure.scale_singular(0.7);
    assert!((load_work(&bump, &weighted.scene, &weighted.measure, &cfg).unwrap() - 0.7).abs() < 1e-12);

    let mut shifted = s.clone();
    shifted.scene.regions[0].offset = CosseratVector::new(2.0, 5.0, -1.0);
    let constant = LoadSet {
        f_bar: vec![CosseratVector::new(0.25, 0.0, 0.0)],
        g1_plus: vec![CosseratVector::new(0.5, 0.0, 0.0)],
        g1_minus: vec![CosseratVector::new(0.25, 0.0, 0.0)],
        ..LoadSet::default()
    };
    assert!((load_work(&constant, &shifted.scene, &BendingMeasure::zero(), &cfg).unwrap() - 2.0).abs() < 1e-12);

    let mut affine = shifted.clone();
    affine.scene.regions[0].gradient = PlanarMatrix::from_row_major([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    assert!((load_work(&constant, &affine.scene, &BendingMeasure::zero(), &cfg).unwrap() - 2.5).abs() < 1e-12);
}

#[test]
fn loads_not_vanishing_on_the_boundary_are_rejected() {
    let s = fixture("atom.json");
    let bad = LoadSet {
        g0_plus: BoundaryFreeField::Bump {
            center: [0.9, 0.5],
            radius: 0.25,
            amplitude: CosseratVector::new(0.0, 0.0, 1.0),
        },
        ..LoadSet::default()
    };
    assert!(matches!(load_work(&bad, &s.scene, &s.measure, &QuadratureConfig::default()), Err(Error::Invalid(_))));
    let sine = LoadSet {
        g0_plus: BoundaryFreeField::Sine {
            modes: [1, 2],
            amplitude: CosseratVector::new(1.0, 0.0, 0.0),
        },
        ..LoadSet::default()
    };
    assert!(sine.validate(&s.scene).is_ok());
}
