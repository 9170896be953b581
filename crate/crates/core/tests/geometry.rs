use std::f64::consts::PI;
use std::fs::File;
use std::path::PathBuf;

use ejection_core::data::read_all_tracings;
use ejection_core::geometry::*;
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn set(coords: &[[f64; 4]]) -> ChordSet {
    ChordSet::new(
        Phase::Ed,
        coords.iter().map(|&c| Chord::from_coords(c)).collect(),
    )
}

fn cylinder() -> ChordSet {
    set(&[[0.0, 0.0, 2.0, 0.0], [0.0, 1.0, 2.0, 1.0]])
}

fn cone() -> ChordSet {
    set(&[
        [0.0, 0.0, 4.0, 0.0],
        [0.5, 1.0, 3.5, 1.0],
        [1.0, 2.0, 3.0, 2.0],
    ])
}

#[test]
fn hand_volumes() {
    let g = simpson_geometry(&cylinder()).unwrap();
    assert_eq!(g.diameters, vec![2.0]);
    assert_eq!(g.heights, vec![1.0]);
    assert!((g.total_volume - PI).abs() < 1e-12);

    let g = simpson_geometry(&cone()).unwrap();
    assert!((g.disk_volumes[0] - PI * 1.5 * 1.5).abs() < 1e-12);
    assert!((g.disk_volumes[1] - PI).abs() < 1e-12);
    assert!((g.total_volume - 3.25 * PI).abs() < 1e-12);
}

#[test]
fn coincident_chords_have_no_volume() {
    let c = [1.0, 1.0, 3.0, 2.0];
    let g = simpson_geometry(&set(&[c, c])).unwrap();
    assert_eq!(g.heights, vec![0.0]);
    assert_eq!(g.total_volume, 0.0);
}

#[test]
fn too_few_chords() {
    let err = simpson_geometry(&set(&[[0.0, 0.0, 1.0, 0.0]])).unwrap_err();
    assert!(matches!(
        err,
        ejection_core::Error::InsufficientChords { got: 1, .. }
    ));
}

#[test]
fn surrogate_cone_over_cylinder() {
    let ed = simpson_geometry(&cone()).unwrap();
    let es = simpson_geometry(&cylinder()).unwrap();
    let ef = ef_surrogate(&ed, &es).unwrap();
    assert!((ef - 69.2308).abs() < 0.01, "{ef}");
    assert_eq!(ef_surrogate(&ed, &ed).unwrap(), 0.0);
    assert!(ef_surrogate(&es, &ed).unwrap() < 0.0);
    let zero = simpson_geometry(&set(&[[0.0; 4], [0.0; 4]])).unwrap();
    assert!(matches!(
        ef_surrogate(&zero, &es),
        Err(ejection_core::Error::DegenerateVolume(_))
    ));
}

#[test]
fn fixture_files() {
    let t = read_all_tracings(File::open(fixture("unit_cylinder.csv")).unwrap(), None).unwrap();
    assert_eq!(t.len(), 1);
    let v = simpson_geometry(&t[0].1.ed).unwrap().total_volume;
    assert!((v - PI).abs() < 1e-6);

    let t = read_all_tracings(File::open(fixture("cone.csv")).unwrap(), Some(3)).unwrap();
    let v = simpson_geometry(&t[0].1.es).unwrap().total_volume;
    assert!((v - 3.25 * PI).abs() < 1e-6);
}

#[test]
fn translation_along_chord_moves_only_points() {
    let gt = cylinder();
    let mut shifted = gt.clone();
    shifted.chords[1] = Chord::new(1.0, 1.0, 3.0, 1.0);
    // Three chords are needed for the diameter-derivative term.
    let mut gt3 = gt.clone();
    gt3.chords.push(Chord::new(0.0, 2.0, 2.0, 2.0));
    let mut pred3 = shifted.clone();
    pred3.chords.push(Chord::new(0.0, 2.0, 2.0, 2.0));
    let gt_es = ChordSet {
        phase: Phase::Es,
        ..gt3.clone()
    };
    let l = geometric_losses(&[ChordSample::new(&pred3, &gt_es, &gt3, &gt_es)]).unwrap();
    assert!(l.l_pts > 0.0);
    assert_eq!(l.l_b, 0.0);
    assert_eq!(l.l_db, 0.0);
    assert_eq!(l.l_h, 0.0);
    assert_eq!(l.l_geo, l.l_pts);
}

#[test]
fn perturbation_shrinks_quadratically() {
    let gt = cone();
    let gt_es = ChordSet {
        phase: Phase::Es,
        ..gt.clone()
    };
    let loss = |eps: f64| {
        let mut p = gt.clone();
        p.chords[1].p2.y += eps;
        geometric_losses(&[ChordSample::new(&p, &gt_es, &gt, &gt_es)])
            .unwrap()
            .l_geo
    };
    let exact = geometric_losses(&[ChordSample::new(&gt, &gt_es, &gt, &gt_es)]).unwrap();
    assert_eq!(exact.l_geo, 0.0);
    let (a, b, c) = (loss(0.1), loss(0.01), loss(0.001));
    assert!(a > b && b > c && c > 0.0);
    let slope = (a.ln() - c.ln()) / (0.1f64.ln() - 0.001f64.ln());
    assert!((slope - 2.0).abs() < 0.1, "slope {slope}");
}

#[test]
fn mismatched_lengths() {
    let a = cone();
    let b = cylinder();
    let err = geometric_losses(&[ChordSample::new(&a, &a, &b, &b)]).unwrap_err();
    assert!(matches!(err, ejection_core::Error::ShapeMismatch(_)));
}

fn chord_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-20.0..20.0f64, 4 * n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn volume_is_nonnegative_and_rigid(flat in chord_strategy(5), angle in -3.0..3.0f64, dx in -5.0..5.0f64) {
        let s = ChordSet::from_flat(Phase::Ed, &flat).unwrap();
        let v = simpson_geometry(&s).unwrap().total_volume;
        prop_assert!(v >= 0.0);
        let (sin, cos) = angle.sin_cos();
        let moved: Vec<f64> = flat
            .chunks(2)
            .flat_map(|p| [cos * p[0] - sin * p[1] + dx, sin * p[0] + cos * p[1]])
            .collect();
        let w = simpson_geometry(&ChordSet::from_flat(Phase::Ed, &moved).unwrap()).unwrap().total_volume;
        prop_assert!((v - w).abs() <= 1e-8 * v.max(1.0));
    }

    #[test]
    fn gradient_matches_differences(pred in chord_strategy(4), gt in chord_strategy(4), k in 0usize..16) {
        let p = ChordSet::from_flat(Phase::Ed, &pred).unwrap();
        let g = ChordSet::from_flat(Phase::Ed, &gt).unwrap();
        let ges = ChordSet { phase: Phase::Es, ..g.clone() };
        let pes = ChordSet { phase: Phase::Es, ..g.clone() };
        // Stay clear of the |distance| kink.
        let geo = simpson_geometry(&p).unwrap();
        prop_assume!(geo.heights.iter().chain(&geo.diameters).all(|v| *v > 0.5));
        let grad = geometric_losses_gradient(&[ChordSample::new(&p, &pes, &g, &ges)]).unwrap();
        let analytic = grad.1[0].ed.flat()[k];
        let h = 1e-5;
        let f = |d: f64| {
            let mut q = pred.clone();
            q[k] += d;
            let q = ChordSet::from_flat(Phase::Ed, &q).unwrap();
            geometric_losses(&[ChordSample::new(&q, &pes, &g, &ges)]).unwrap().l_geo
        };
        let numeric = (f(h) - f(-h)) / (2.0 * h);
        prop_assert!((analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()).max(1.0));
    }
}
