use serde_json::Value;
use tailnas_demo::{etf_geometry, long_tail_profile, power_iteration};

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn etf_geometry_reports_equal_angles() {
    let v = parse(etf_geometry(4, 6, 1.0, 0));
    assert_eq!(v["passed"], true);
    for c in v["cosines"].as_array().unwrap() {
        assert!((c.as_f64().unwrap() + 1.0 / 3.0).abs() < 1e-10);
    }
    assert_eq!(v["plane"].as_array().unwrap().len(), 4);
}

#[test]
fn etf_geometry_rejects_narrow_features() {
    let v = parse(etf_geometry(10, 4, 1.0, 0));
    assert!(v["error"].as_str().unwrap().contains("below class count"));
}

#[test]
fn profile_matches_ratio() {
    let v = parse(long_tail_profile(10, 500, 100.0));
    assert_eq!(v["counts"][0], 500);
    assert_eq!(v["counts"][9], 5);
    assert!(parse(long_tail_profile(10, 500, 0.5))["error"].is_string());
}

#[test]
fn power_iteration_finds_dominant_eigenvalue() {
    let v = parse(power_iteration(
        vec![2.0, 0.0, 0.0, 0.0, -5.0, 0.0, 0.0, 0.0, 1.0],
        3,
        200,
    ));
    assert!(
        (v["eigenvalue"].as_f64().unwrap() + 5.0).abs() < 1e-6,
        "{v}"
    );
    assert!(parse(power_iteration(vec![1.0, 2.0], 2, 10))["error"].is_string());
}
