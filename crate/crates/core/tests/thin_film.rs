use membrelax::cell::{qstar, CellGrid, SolverBudget};
use membrelax::membrane::DensityCache;
use membrelax::planar::{BendingMeasure, PlanarScene, SceneFile};
use membrelax::thin_film::*;
use membrelax::{CosseratVector, EnergyDensity, Error, PlanarMatrix};

const UNIT: [f64; 4] = [0.0, 0.0, 1.0, 1.0];

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

fn tilt(b: [f64; 3], eps: f64, shape: [usize; 3]) -> SlabField {
    SlabField::from_fn(UNIT, shape, |x| b.map(|c| eps * x[2] * c)).unwrap()
}

fn config(builder: Builder, eps_list: Vec<f64>, slab: [usize; 3]) -> StudyConfig {
    StudyConfig {
        builder,
        eps_list,
        cell_grid: CellGrid::default(),
        slab,
        budget: SolverBudget::default(),
        tolerances: StudyTolerances::default(),
    }
}

#[test]
fn constant_gradient_energy_is_exact() {
    let eps = 0.1;
    let u = tilt([0.0, 0.0, 1.0], eps, [4, 4, 4]);
    assert!((scaled_energy(&convex(), &u, eps).unwrap() - 2f64.sqrt()).abs() < 1e-12);
    let c = SlabField::from_fn(UNIT, [5, 4, 6], |_| [1.0, -2.0, 3.0]).unwrap();
    assert!((scaled_energy(&convex(), &c, eps).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn energy_ignores_constant_shifts() {
    // Dyadic data keep node differences exact, so the shift is invisible bit for bit.
    let dyadic = SlabField::from_fn(UNIT, [8, 4, 4], |x| [x[0] * x[1], x[2] * x[2], x[0] - 2.0 * x[2]]).unwrap();
    let general = SlabField::from_fn(UNIT, [6, 5, 4], |x| [x[0] * x[1], (3.0 * x[2]).sin(), x[0] + x[2] * x[2]]).unwrap();
    for model in [convex(), laminate()] {
        let a = scaled_energy(&model, &dyadic, 0.25).unwrap();
        assert_eq!(a, scaled_energy(&model, &dyadic.add_constant([8.0, -4.0, 0.5]), 0.25).unwrap());
        let g = scaled_energy(&model, &general, 0.2).unwrap();
        let shifted = scaled_energy(&model, &general.add_constant([10.0, -4.0, 0.5]), 0.2).unwrap();
        assert!((g - shifted).abs() <= 1e-12 * g);
    }
}

#[test]
fn nonpositive_eps_is_a_domain_error() {
    let u = tilt([0.0; 3], 1.0, [4, 4, 4]);
    assert!(matches!(scaled_energy(&convex(), &u, 0.0), Err(Error::Domain(_))));
    assert!(matches!(moment_average(&u, -1.0), Err(Error::Domain(_))));
}

#[test]
fn coarse_slabs_are_rejected() {
    assert!(SlabField::from_fn(UNIT, [3, 4, 4], |_| [0.0; 3]).is_err());
}

#[test]
fn moment_average_examples() {
    let eps = 0.05;
    let b = [0.3, -0.2, 1.1];
    let m = moment_average(&tilt(b, eps, [4, 6, 4]), eps).unwrap();
    assert!(m.values.iter().all(|v| (0..3).all(|k| (v[k] - b[k]).abs() < 1e-12)));
    let p = m.pair(|_| 1.0);
    assert!((0..3).all(|k| (p.0[k] - b[k]).abs() < 1e-12));

    let flat = SlabField::from_fn(UNIT, [4, 4, 4], |x| [x[0], x[1] * x[1], 2.0]).unwrap();
    let m = moment_average(&flat, eps).unwrap();
    assert!(m.values.iter().all(|v| v.iter().all(|c| c.abs() < 1e-12)));
}

#[test]
fn affine_recovery_reproduces_the_density() {
    let xi = PlanarMatrix::from_row_major([0.2, 0.0, 0.0, 0.1, 0.0, 0.3]);
    let b = CosseratVector::new(0.1, 0.0, 0.2);
    let corrector = qstar(&convex(), &xi, &b, CellGrid::default(), &SolverBudget::default()).unwrap();
    let w = convex().eval_density(&membrelax::FullMatrix::join(&xi, &b)).unwrap();
    for eps in [0.25, 0.0625] {
        let u = recovery_bulk(&xi, &b, eps, &corrector, UNIT, [16, 16, 8]).unwrap();
        let j = scaled_energy(&convex(), &u, eps).unwrap();
        assert!((j - w).abs() < 0.02 * w, "{j} vs {w}");
        let mean = moment_average(&u, eps).unwrap().mean();
        assert!(mean.sub(&b).norm() < 1e-9);
    }
}

#[test]
fn laminate_recovery_reaches_the_relaxed_value() {
    let zero = PlanarMatrix::from_row_major([0.0; 6]);
    let corrector = qstar(&laminate(), &zero, &CosseratVector::ZERO, CellGrid::default(), &SolverBudget::default()).unwrap();
    let eps = 1.0 / 32.0;
    let shape = match recovery_bulk(&zero, &CosseratVector::ZERO, eps, &corrector, UNIT, [4, 4, 4]) {
        Err(Error::Resolution { min_grid, .. }) => min_grid,
        Ok(_) => [4, 4, 4],
        Err(e) => panic!("{e}"),
    };
    let u = recovery_bulk(&zero, &CosseratVector::ZERO, eps, &corrector, UNIT, shape).unwrap();
    let j = scaled_energy(&laminate(), &u, eps).unwrap();
    assert!((j - 0.5).abs() < 0.05 * 0.5, "{j}");
    assert!(moment_average(&u, eps).unwrap().mean().norm() < 1e-9);
}

#[test]
fn recovery_needs_a_matching_corrector() {
    let zero = PlanarMatrix::from_row_major([0.0; 6]);
    let corrector = qstar(&convex(), &zero, &CosseratVector::ZERO, CellGrid::default(), &SolverBudget::default()).unwrap();
    let r = recovery_bulk(&zero, &CosseratVector::new(0.0, 0.0, 1.0), 0.1, &corrector, UNIT, [8, 8, 8]);
    assert!(matches!(r, Err(Error::Invalid(_))));
}

#[test]
fn smooth_step_profile() {
    let s = SmoothStep::default();
    assert_eq!(s.value(-0.5), 0.0);
    assert_eq!(s.value(0.5), 1.0);
    assert!((s.value(0.0) - 0.5).abs() < 1e-12);
    assert!((s.value(0.2) + s.value(-0.2) - 1.0).abs() < 1e-12);
    assert!((s.profile_integral(|_| 1.0) - 1.0).abs() < 1e-9);
    let h = 1e-6;
    assert!(((s.value(0.1 + h) - s.value(0.1 - h)) / (2.0 * h) - s.derivative(0.1)).abs() < 1e-6);
}

#[test]
fn mollifier_has_unit_mass() {
    let m = Mollifier::default();
    assert_eq!(m.primitive([0.0, 0.0], -0.5), 0.0);
    assert!((m.primitive([0.1, 0.0], 0.5) - m.marginal([0.1, 0.0])).abs() < 1e-12);
    assert_eq!(m.density([0.6, 0.0, 0.0]), 0.0);
    let n = 200;
    let h = 1.0 / n as f64;
    let mut mass = 0.0;
    for i in 0..n {
        for j in 0..n {
            mass += m.marginal([-0.5 + (i as f64 + 0.5) * h, -0.5 + (j as f64 + 0.5) * h]) * h * h;
        }
    }
    assert!((mass - 1.0).abs() < 1e-3, "{mass}");
}

fn dirac_base() -> PlanarScene {
    fixture("dirac.json").scene
}

#[test]
fn concentration_example_converges_to_a_point_mass() {
    let base = dirac_base();
    let plain = extend_planar(&base, [256, 256, 16]).unwrap();
    let battery = test_battery(base.domain);
    let plateau = &battery.iter().find(|(n, _)| n == "plateau").unwrap().1;
    let off = &battery.iter().find(|(n, _)| n == "bump_2").unwrap().1;
    assert!(off.eval([0.0, 0.0]) == 0.0 && plateau.eval([0.0, 0.0]) == 1.0);
    let mut off_pairings = Vec::new();
    for eps in [1.0 / 16.0, 1.0 / 64.0] {
        let u = example_dirac(&Mollifier::default(), eps, [256, 256, 16], &base).unwrap();
        assert!(u.l1_distance(&plain).unwrap() <= eps);
        let m = moment_average(&u, eps).unwrap();
        let p = m.pair(|x| plateau.eval(x));
        assert!((p.0[2] - 1.0).abs() < 0.01, "{p:?}");
        assert!(p.0[0].abs() < 1e-12 && p.0[1].abs() < 1e-12);
        off_pairings.push(m.pair(|x| off.eval(x)).0[2]);
    }
    assert!(off_pairings[1] * 4.0 <= off_pairings[0], "{off_pairings:?}");
}

#[test]
fn concentration_example_checks_resolution() {
    match example_dirac(&Mollifier::default(), 1.0 / 64.0, [64, 64, 8], &dirac_base()) {
        Err(Error::Resolution { min_grid, .. }) => assert!(min_grid[0] >= 256 && min_grid[1] >= 256),
        other => panic!("{other:?}"),
    }
}

#[test]
fn slab_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let u = SlabField::from_fn([-1.0, 0.0, 1.0, 2.0], [4, 5, 6], |x| [x[0], x[1] * x[2], (x[0] + x[1]).cos()]).unwrap();
    let sidecar = u.write(&dir.path().join("u.bin")).unwrap();
    let back = SlabField::read(&sidecar).unwrap();
    assert_eq!(back, u);
    assert_eq!(u.l1_distance(&back).unwrap(), 0.0);
}

#[test]
fn affine_study_passes() {
    let s = fixture("affine.json");
    let cfg = config(Builder::Recovery, vec![0.25, 0.125, 0.0625], [16, 16, 8]);
    let study = gamma_study(&convex(), &s.scene, &s.measure, &cfg, &DensityCache::new()).unwrap();
    assert!(study.verdict.passed, "{:?}", study.verdict);
    assert!(study.rows.iter().all(|r| r.rel_gap.unwrap() <= 0.02));
    let mut csv = Vec::new();
    study.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("eps,J_eps,E_target,rel_gap,pairing_1"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn smoothed_jump_study_approaches_the_limit() {
    let s = fixture("jump.json");
    let cfg = config(Builder::Recovery, vec![0.25, 0.125, 0.0625], [64, 64, 4]);
    let study = gamma_study(&convex(), &s.scene, &s.measure, &cfg, &DensityCache::new()).unwrap();
    let last = study.rows.last().unwrap();
    assert!(last.rel_gap.unwrap() <= 0.05, "{:?}", study.rows);
    assert!(study.verdict.liminf, "{:?}", study.rows);
}

#[test]
fn studies_reject_bad_input() {
    let s = fixture("affine.json");
    let cache = DensityCache::new();
    let up = config(Builder::Recovery, vec![0.125, 0.25], [16, 16, 8]);
    assert!(matches!(gamma_study(&convex(), &s.scene, &s.measure, &up, &cache), Err(Error::Invalid(_))));
    let stair = fixture("staircase.json");
    let cfg = config(Builder::Recovery, vec![0.25], [16, 16, 8]);
    assert!(gamma_study(&convex(), &stair.scene, &stair.measure, &cfg, &cache).is_err());
    let dirac = config(Builder::Dirac, vec![0.25], [16, 16, 8]);
    assert!(matches!(gamma_study(&convex(), &s.scene, &BendingMeasure::zero(), &dirac, &cache), Err(Error::Invalid(_))));
}

#[test]
fn under_resolved_rows_carry_the_minimum_grid() {
    let s = fixture("dirac.json");
    let cfg = config(Builder::Dirac, vec![1.0 / 16.0, 1.0 / 64.0], [64, 64, 8]);
    let study = gamma_study(&convex(), &s.scene, &s.measure, &cfg, &DensityCache::new()).unwrap();
    assert!(!study.verdict.passed && !study.verdict.rows_complete);
    let err = study.rows[1].error.as_ref().unwrap();
    assert!(err.min_grid.unwrap()[0] >= 256);
}

#[test]
fn slab_file_study_reads_precomputed_fields() {
    let s = fixture("affine.json");
    let dir = tempfile::tempdir().unwrap();
    let xi = s.scene.regions[0].gradient;
    let b = s.measure.ac_density(0);
    let eps_list = vec![0.25, 0.125];
    let files = eps_list
        .iter()
        .enumerate()
        .map(|(k, &eps)| {
            let u = SlabField::from_fn(s.scene.domain, [8, 8, 4], |x| {
                let mut v = xi.apply([x[0], x[1]]);
                (0..3).for_each(|c| v[c] += eps * x[2] * b.0[c]);
                v
            })
            .unwrap();
            u.write(&dir.path().join(format!("u{k}.bin"))).unwrap()
        })
        .collect();
    let cfg = config(Builder::SlabFiles { files }, eps_list, [8, 8, 4]);
    let study = gamma_study(&convex(), &s.scene, &s.measure, &cfg, &DensityCache::new()).unwrap();
    assert!(study.verdict.passed, "{:?}", study.rows);
}
