use membrelax::energy::default_ladder;
use membrelax::{CosseratVector, EnergyDensity, Error, FullMatrix, PlanarMatrix};

fn convex() -> EnergyDensity {
    EnergyDensity::convex_norm(1.0).unwrap()
}

fn laminate() -> EnergyDensity {
    EnergyDensity::separable_laminate(1.0, 1.0, 0.5).unwrap()
}

fn e3_column() -> FullMatrix {
    FullMatrix::join(&PlanarMatrix::from_row_major([0.0; 6]), &CosseratVector::new(0.0, 0.0, 1.0))
}

#[test]
fn convex_norm_closed_forms() {
    let m = convex();
    assert_eq!(m.eval_density(&FullMatrix::from_row_major([0.0; 9])).unwrap(), 1.0);
    let unit = FullMatrix::from_row_major([0.6, 0.0, 0.0, 0.0, 0.8, 0.0, 0.0, 0.0, 0.0]);
    assert!((m.eval_density(&unit).unwrap() - 2f64.sqrt()).abs() < 1e-14);
}

#[test]
fn laminate_at_the_well() {
    assert!((laminate().eval_density(&e3_column()).unwrap() - 0.5).abs() < 1e-14);
}

#[test]
fn non_finite_input_is_a_domain_error() {
    let bad = FullMatrix::from_row_major([f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    assert!(matches!(convex().eval_density(&bad), Err(Error::Domain(_))));
}

#[test]
fn recession_examples() {
    let ladder = default_ladder();
    let unit = FullMatrix::from_row_major([0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    assert!((convex().recession_density(&unit, &ladder).unwrap() - 1.0).abs() < 1e-3);
    assert_eq!(convex().recession_density(&FullMatrix::from_row_major([0.0; 9]), &ladder).unwrap(), 0.0);
    assert!((laminate().recession_density(&e3_column(), &ladder).unwrap() - 1.5).abs() < 1e-9);
}

#[test]
fn extrapolated_recession_matches_closed_form() {
    let ladder = default_ladder();
    let xi = FullMatrix::from_row_major([0.3, -0.2, 0.1, 0.5, 0.0, 0.4, -0.3, 0.2, 0.7]);
    for m in [convex(), laminate()] {
        let closed = m.recession_density(&xi, &ladder).unwrap();
        let fitted = m.extrapolated_recession(&xi, &ladder).unwrap();
        assert!((closed - fitted).abs() < 1e-3 * closed, "{closed} vs {fitted}");
    }
}

#[test]
fn w_zero_examples() {
    let (v, b) = convex().w_zero(&PlanarMatrix::from_row_major([0.0; 6])).unwrap();
    assert!((v - 1.0).abs() < 1e-9 && b.norm() < 1e-6);
    let (v, b) = convex().w_zero(&PlanarMatrix::from_row_major([0.0, 1.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
    assert!((v - 2f64.sqrt()).abs() < 1e-9 && b.norm() < 1e-6);

    // Oracle: dense line search of g along the e₃ axis.
    let g = |t: f64| f64::min((t - 1.0).abs(), (t + 1.0).abs()) + 0.5 * t.abs();
    let (best, arg) = (-3000..=3000).map(|k| k as f64 * 1e-3).map(|t| (g(t), t)).fold((f64::INFINITY, 0.0), |a, b| if b.0 < a.0 { b } else { a });
    let (v, b) = laminate().w_zero(&PlanarMatrix::from_row_major([0.0; 6])).unwrap();
    assert!((v - best).abs() < 1e-6, "{v} vs {best}");
    assert!((b.norm() - arg.abs()).abs() < 1e-3 && b.0[0].abs() < 1e-6 && b.0[1].abs() < 1e-6);
}

#[test]
fn w_zero_is_below_probed_values() {
    let xi = PlanarMatrix::from_row_major([0.4, 0.1, 0.0, -0.2, 0.3, 0.0]);
    for m in [convex(), laminate()] {
        let (v, _) = m.w_zero(&xi).unwrap();
        for b in [[0.0, 0.0, 1.0], [0.0, 0.0, -1.0], [0.3, 0.2, 0.9], [1.0, 1.0, 1.0], [0.0; 3]] {
            let w = m.eval_density(&FullMatrix::join(&xi, &CosseratVector(b))).unwrap();
            assert!(v <= w + 1e-12);
        }
    }
}

#[test]
fn built_in_models_certify() {
    for m in [convex(), laminate()] {
        let report = m.certify(2000, 11);
        assert!(report.passed(), "{report:?}");
    }
}

#[test]
fn model_documents_parse_and_reject() {
    let m = EnergyDensity::from_json_str(r#"{"kind": "separable-laminate", "params": {"p": 1.0, "s": 1.0, "c": 0.5}}"#).unwrap();
    assert!(!m.is_convex() && m.has_closed_form_recession());
    assert!(matches!(EnergyDensity::from_json_str(r#"{"kind": "convex-norm", "params": {"a": -1.0}}"#), Err(Error::Model(_))));
    assert!(EnergyDensity::from_json_str(r#"{"kind": "convex-norm", "params": {"bogus": 1.0}}"#).is_err());
    assert!(EnergyDensity::from_json_str(r#"{"kind": "no-such-model"}"#).is_err());
}

#[test]
fn envelope_table_certifies_and_tracks_the_envelope() {
    let table = membrelax::envelope::laminate_envelope_model(1.0, 1.0, 0.5, 4.0, 0.05).unwrap();
    assert!(table.certify(1000, 5).passed());
    for t in [-1.5, -0.6, 0.0, 0.4, 1.2] {
        let xi = FullMatrix::join(&PlanarMatrix::from_row_major([0.0; 6]), &CosseratVector::new(0.0, 0.0, t));
        let expect = f64::max(0.5, 1.5 * f64::abs(t) - 1.0);
        assert!((table.eval_density(&xi).unwrap() - expect).abs() < 1e-6);
    }
}
