use bbm_demo::{clusters, frontier, walk, MAX_T};

#[test]
fn frontier_is_sorted_and_seeded() {
    let a = frontier(5.0, 3).unwrap();
    assert!(a.heights.windows(2).all(|w| w[0] >= w[1]));
    assert!(!a.heights.is_empty());
    assert_eq!(a.heights, frontier(5.0, 3).unwrap().heights);
    assert!(frontier(MAX_T + 1.0, 0).is_err());
    assert!(frontier(0.0, 0).is_err());
}

#[test]
fn clusters_are_nonpositive_with_a_zero() {
    let c = clusters(6.0, 3.0, 9).unwrap();
    assert!(!c.pairs.is_empty());
    assert!(c.pairs.windows(2).all(|w| w[0].u >= w[1].u));
    for p in &c.pairs {
        assert_eq!(p.cluster[0], 0.0);
        assert!(p.cluster.iter().all(|&x| x <= 0.0));
    }
    assert!(clusters(6.0, 7.0, 9).is_err());
}

#[test]
fn walk_pins_endpoints_and_flags_marks() {
    let w = walk(64.0, -1.0, 2).unwrap();
    assert_eq!(w.what[0], 0.0);
    assert!(w.what.last().unwrap().abs() < 1e-12);
    assert_eq!(w.sigmas.len(), w.marks.len());
    assert_eq!(w.stay_negative, w.marks.iter().all(|&m| m <= 0.0));
    assert!(walk(64.0, f64::NEG_INFINITY, 2).unwrap().stay_negative);
}

#[test]
fn json_bindings_round_trip() {
    let s = bbm_demo::frontier_js(3.0, 1).unwrap();
    let v: serde_json::Value = serde_json::from_str(&s).unwrap();
    assert!(v["heights"].is_array());
}
