mod common;

use bitvec::prelude::*;
use percolab::lattice::{LatticeBox, Point};
use percolab::perforate::{build, from_text, to_text, verify_structure, RemovalCase, TieBreak};
use percolab::renorm::{BadnessField, ScaleLadder};
use percolab::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn p(c: &[i64]) -> Point {
    Point::new(c).unwrap()
}

/// Ladder with `L0 = 1`, `l0 = 9`, `r0 = 1`; one `L1`-box is `[0, 9)^2`.
fn field(d_bad: &[Point], i_bad: &[Point]) -> BadnessField {
    let lad = ScaleLadder::new(9, 1, 1, 1, 1).unwrap();
    let grid = LatticeBox::cube(Point::origin(2), 9).unwrap();
    let mut d = bitvec![u64, Lsb0; 0; grid.volume()];
    let mut i = bitvec![u64, Lsb0; 0; grid.volume()];
    for q in d_bad {
        d.set(grid.index_of(q).unwrap(), true);
    }
    for q in i_bad {
        i.set(grid.index_of(q).unwrap(), true);
    }
    BadnessField::from_level0(lad, grid, d, i, 1).unwrap()
}

#[test]
fn all_good_field_removes_nothing() {
    let f = field(&[], &[]);
    let perf = build(&f, 1, 1, &Point::origin(2), &mut TieBreak::Lexicographic).unwrap();
    assert!(perf.records.iter().all(|r| r.case == RemovalCase::Empty));
    assert_eq!(perf.flatten(0).unwrap().count(), 81);
    assert_eq!(perf.flatten(1).unwrap().count(), 81);
    assert!(verify_structure(&perf, &f).unwrap().passed());
}

#[test]
fn far_blobs_remove_two_boxes() {
    let f = field(&[p(&[0, 0])], &[p(&[6, 6])]);
    let perf = build(&f, 1, 1, &Point::origin(2), &mut TieBreak::Lexicographic).unwrap();
    assert_eq!(perf.records[0].case, RemovalCase::TwoBoxes { a: p(&[0, 0]), b: p(&[5, 5]) });
    let flat = perf.flatten(0).unwrap();
    assert_eq!(flat.count(), 81 - 8);
    assert!(!flat.contains(&p(&[6, 6])) && !flat.contains(&p(&[0, 0])));
    assert!(verify_structure(&perf, &f).unwrap().passed());
}

#[test]
fn close_blobs_remove_one_big_box() {
    let f = field(&[p(&[3, 3])], &[p(&[4, 4])]);
    let perf = build(&f, 1, 1, &Point::origin(2), &mut TieBreak::Lexicographic).unwrap();
    assert_eq!(perf.records[0].case, RemovalCase::OneBox { c: p(&[1, 1]) });
    assert_eq!(perf.flatten(0).unwrap().count(), 81 - 16);
    assert!(verify_structure(&perf, &f).unwrap().passed());
}

#[test]
fn bad_top_level_is_a_seed_violation() {
    let f = field(&[p(&[0, 0]), p(&[5, 5])], &[]);
    let err = build(&f, 1, 1, &Point::origin(2), &mut TieBreak::Lexicographic).unwrap_err();
    assert!(matches!(err, Error::SeedViolation(_)));
}

#[test]
fn inconsistent_field_is_detected() {
    let mut f = field(&[p(&[0, 0]), p(&[5, 5])], &[]);
    f.levels[1].d_bad.set(0, false);
    let err = build(&f, 1, 1, &Point::origin(2), &mut TieBreak::Lexicographic).unwrap_err();
    assert!(matches!(err, Error::InternalConsistency(_)));
}

#[test]
fn corrupted_perforation_fails_connectivity() {
    let f = field(&[], &[]);
    let mut perf = build(&f, 1, 1, &Point::origin(2), &mut TieBreak::Lexicographic).unwrap();
    for y in 0..9 {
        perf.levels[0].remove(&p(&[4, y]));
    }
    let rep = verify_structure(&perf, &f).unwrap();
    assert!(!rep.connected);
    assert!(!rep.passed());
}

#[test]
fn text_format_rejects_garbage() {
    assert!(from_text("perforation 2\n").is_err());
    assert!(from_text("").is_err());
    let f = field(&[p(&[0, 0])], &[]);
    let perf = build(&f, 1, 1, &Point::origin(2), &mut TieBreak::Lexicographic).unwrap();
    let text = to_text(&perf);
    assert!(from_text(&text.replace("end\n", "")).is_err());
    assert!(from_text(&format!("{text}extra\n")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn planted_perforations_satisfy_the_structure_lemma(
        seed in any::<u64>(),
        d in 2usize..4,
        k in 1u64..3,
        q in 0.0f64..0.6,
    ) {
        let lad = ScaleLadder::new(9, 1, 1, 1, 2).unwrap();
        let s = if d == 2 { 2 } else { 1 };
        let k = if d == 2 { 1 } else { k };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = common::planted_field(&lad, k, s, d, q, &mut rng);
        let origin = Point::origin(d);
        let lex = build(&f, k, s, &origin, &mut TieBreak::Lexicographic).unwrap();
        prop_assert!(verify_structure(&lex, &f).unwrap().passed());
        prop_assert_eq!(&lex, &build(&f, k, s, &origin, &mut TieBreak::Lexicographic).unwrap());
        let rnd = build(&f, k, s, &origin, &mut TieBreak::Random(&mut rng)).unwrap();
        let rep = verify_structure(&rnd, &f).unwrap();
        prop_assert!(rep.passed(), "{:?}", rep);
        for i in 1..=s {
            prop_assert_eq!(rnd.replay(i).unwrap(), rnd.flatten(i - 1).unwrap());
        }
        prop_assert_eq!(from_text(&to_text(&rnd)).unwrap(), rnd);
    }
}
