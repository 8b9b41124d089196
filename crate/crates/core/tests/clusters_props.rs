use std::collections::{HashSet, VecDeque};

use bitvec::prelude::*;
use percolab::clusters::{
    chemical_distance, chemical_distance_check, event_h, extend_cluster, extended_isop_audit, largest_cluster,
    local_connectivity_violation, volume_growth_check, HWitness, VolumeSpec,
};
use percolab::isoperimetry::Family;
use percolab::lattice::{diameter_filter, LatticeBox, Point, Radius, SiteSet, Subgraph};
use percolab::renorm::{classify, BadnessField, DensityPair, ScaleLadder};
use percolab::rng::derive_seed;
use percolab::samplers::bernoulli;
use proptest::prelude::*;

fn p(c: &[i64]) -> Point {
    Point::new(c).unwrap()
}

fn cube(corner: &[i64], side: u64) -> LatticeBox {
    LatticeBox::cube(p(corner), side).unwrap()
}

fn ladder(big_l0: u64) -> ScaleLadder {
    ScaleLadder::new(9, 1, big_l0, 1, 1).unwrap()
}

/// Field of level-0 vertices over `grid0` (coarse coordinates), bad at `bad`.
fn field(lad: &ScaleLadder, grid0: LatticeBox, bad: &[Point], nmax: usize) -> BadnessField {
    let mut d = bitvec![u64, Lsb0; 0; grid0.volume()];
    for q in bad {
        d.set(grid0.index_of(q).unwrap(), true);
    }
    let i = bitvec![u64, Lsb0; 0; grid0.volume()];
    BadnessField::from_level0(lad.clone(), grid0, d, i, nmax).unwrap()
}

/// Sites joined to `from` through `set`-sites within sup-distance `r` of `centre`.
fn flood(s: &Subgraph, from: Point, centre: Point, r: u64) -> HashSet<Point> {
    let mut seen = HashSet::from([from]);
    let mut queue = VecDeque::from([from]);
    while let Some(v) = queue.pop_front() {
        for k in 0..v.dim() {
            for delta in [-1, 1] {
                let w = v.offset(k, delta);
                if s.occupied_point(&w) && w.linf(&centre) <= r && seen.insert(w) {
                    queue.push_back(w);
                }
            }
        }
    }
    seen
}

#[test]
fn full_lattice_is_one_cluster() {
    let s = Subgraph::full(cube(&[-10, -10], 60));
    let cd = largest_cluster(&s, &ladder(1), 2, 1, &p(&[9, 9]), 1).unwrap();
    assert_eq!(cd.sizes, vec![324]);
    assert!(!cd.tie);
    assert_eq!(cd.core.count(), 324);
    let ec = extend_cluster(&cd, &s).unwrap();
    // Every site within sup-distance 2 L_1 = 18 of Q.
    assert_eq!(ec.union.count(), 54 * 54);
    assert_eq!(ec.union.count(), ec.core.count() + ec.extension.count());
}

#[test]
fn ties_go_to_the_lexicographic_winner() {
    let bx = cube(&[0, 0], 12);
    let pts = [p(&[1, 8]), p(&[1, 9]), p(&[6, 2]), p(&[7, 2])];
    let s = Subgraph::new(SiteSet::from_points(bx, pts.iter()).unwrap());
    let cd = largest_cluster(&s, &ladder(1), 10, 0, &p(&[1, 1]), 1).unwrap();
    assert!(cd.tie);
    assert_eq!(cd.sizes, vec![2, 2]);
    assert!(cd.core.contains(&p(&[1, 8])) && !cd.core.contains(&p(&[6, 2])));
}

#[test]
fn empty_and_out_of_domain_inputs() {
    let s = Subgraph::new(SiteSet::empty(cube(&[0, 0], 10)));
    let cd = largest_cluster(&s, &ladder(1), 4, 0, &p(&[2, 2]), 1).unwrap();
    assert!(cd.is_empty());
    assert_eq!(cd.core_size(), 0);
    assert!(largest_cluster(&s, &ladder(1), 20, 0, &p(&[2, 2]), 1).is_err());
    assert!(largest_cluster(&s, &ladder(1), 0, 0, &p(&[2, 2]), 1).is_err());
    // Q fits but the collar of width 2 L_s does not.
    let cd = largest_cluster(&s, &ladder(1), 8, 0, &p(&[1, 1]), 1).unwrap();
    assert!(extend_cluster(&cd, &s).is_err());
}

#[test]
fn pendant_path_and_isolated_site() {
    // L0 = 2 at level 0: reach 2 L_s = 4 from the core.
    let lad = ladder(2);
    let bx = cube(&[0, 0], 30);
    let q = cube(&[10, 10], 6);
    let mut s = SiteSet::from_fn(bx, |i| q.contains(&bx.point_of(i)));
    for t in 1..=6 {
        s.insert(&p(&[15 + t, 12])).unwrap();
    }
    s.insert(&p(&[12, 21])).unwrap();
    let s = Subgraph::new(s);
    let cd = largest_cluster(&s, &lad, 3, 0, &p(&[10, 10]), 1).unwrap();
    assert_eq!(cd.core.count(), 36);
    let ec = extend_cluster(&cd, &s).unwrap();
    let ext: Vec<Point> = ec.extension.points().collect();
    assert_eq!(ext, (16..=19).map(|x| p(&[x, 12])).collect::<Vec<_>>());
    assert!(!ec.union.contains(&p(&[12, 21])));
    assert_eq!(extend_cluster(&cd, &s).unwrap(), ec);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn extension_matches_flood_oracle(seed in any::<u64>(), open in 0.45f64..0.8) {
        let lad = ladder(2);
        let bx = cube(&[0, 0], 24);
        let s = bernoulli(&bx, open, seed).subgraph();
        let cd = largest_cluster(&s, &lad, 4, 0, &p(&[8, 8]), 2).unwrap();
        let ec = extend_cluster(&cd, &s).unwrap();
        let mut want: HashSet<Point> = HashSet::new();
        for y in cd.core.points() {
            want.extend(flood(&s, y, y, 4).into_iter().filter(|z| !cd.core.contains(z)));
        }
        let got: HashSet<Point> = ec.extension.points().collect();
        prop_assert_eq!(got, want);
        prop_assert!(ec.core.is_subset(&ec.union));
        let enlarged = ec.enlarged().unwrap();
        prop_assert!(ec.union.points().all(|z| enlarged.contains(&z)));
    }

    #[test]
    fn event_h_connectivity_matches_flood_oracle(seed in any::<u64>(), open in 0.55f64..0.9) {
        let lad = ladder(2);
        let bx = cube(&[0, 0], 24);
        let s = bernoulli(&bx, open, seed).subgraph();
        let f = field(&lad, cube(&[0, 0], 12), &[], 0);
        let (k, xs, ls) = (3u64, p(&[8, 8]), 2u64);
        let got = event_h(&s, &f, k, 0, &xs).unwrap();
        let q = cube(&[8, 8], 6);
        let s_ls = diameter_filter(&s, Radius::Finite(ls));
        let mut oracle = None;
        'outer: for x in q.points().filter(|x| s_ls.contains(x)) {
            let reach = flood(&s, x, x, 2 * ls);
            for y in q.points().filter(|y| s_ls.contains(y) && x.linf(y) <= ls) {
                if !reach.contains(&y) {
                    oracle = Some(HWitness::Disconnected(x, y));
                    break 'outer;
                }
            }
        }
        prop_assert_eq!(got, oracle);
    }
}

#[test]
fn event_h_on_fixtures() {
    let lad = ladder(1);
    let s = Subgraph::full(cube(&[0, 0], 45));
    let f = field(&lad, cube(&[0, 0], 45), &[], 1);
    assert_eq!(event_h(&s, &f, 1, 1, &p(&[18, 18])).unwrap(), None);
    assert_eq!(event_h(&s, &f, 4, 0, &p(&[10, 10])).unwrap(), None);
    assert!(event_h(&s, &f, 1, 1, &p(&[17, 18])).is_err());
    assert!(event_h(&s, &f, 3, 1, &p(&[18, 18])).is_err());

    let bad = field(&lad, cube(&[0, 0], 45), &[p(&[8, 8])], 1);
    assert_eq!(event_h(&s, &bad, 4, 0, &p(&[10, 10])).unwrap(), Some(HWitness::BadVertex(p(&[8, 8]))));
    assert_eq!(event_h(&s, &bad, 4, 0, &p(&[11, 11])).unwrap(), None);

    // Moat of width 2 splitting Q = [6, 18)^2 at L_s = 3.
    let lad3 = ladder(3);
    let bx = cube(&[0, 0], 30);
    let cut = SiteSet::from_fn(bx, |i| !(11..13).contains(&bx.point_of(i)[0]));
    let s = Subgraph::new(cut);
    let f = field(&lad3, cube(&[0, 0], 10), &[], 0);
    let w = event_h(&s, &f, 4, 0, &p(&[6, 6])).unwrap();
    let Some(HWitness::Disconnected(x, y)) = w else { panic!("expected a pair witness, got {w:?}") };
    assert!(x.linf(&y) <= 3);
    assert_eq!(chemical_distance(&s, &x, &y).unwrap(), None);
}

#[test]
fn chemical_distance_on_full_lattice() {
    let s = Subgraph::full(cube(&[0, 0], 40));
    assert_eq!(chemical_distance(&s, &p(&[3, 4]), &p(&[3, 4])).unwrap(), Some(0));
    assert_eq!(chemical_distance(&s, &p(&[3, 4]), &p(&[10, 1])).unwrap(), Some(10));
    let big = Subgraph::full(cube(&[-20, -20], 110));
    let cd = largest_cluster(&big, &ladder(1), 8, 0, &p(&[2, 2]), 1).unwrap();
    let ec = extend_cluster(&cd, &big).unwrap();
    let rep = chemical_distance_check(&ec, &big, 400, 5).unwrap();
    assert_eq!(rep.pairs, 400);
    assert_eq!(rep.disconnected, 0);
    assert!(rep.max_ratio <= 2.0);
    assert!(rep.shells.iter().any(|sh| sh.shell == 0 && sh.max_ratio == 0.0));
}

fn bernoulli_cluster(seed: u64) -> (Subgraph, percolab::clusters::ExtendedCluster) {
    let lad = ladder(4);
    let bx = cube(&[0, 0], 256);
    let s = bernoulli(&bx, 0.85, derive_seed(404, seed)).subgraph();
    let cd = largest_cluster(&s, &lad, 56, 0, &p(&[16, 16]), 4).unwrap();
    let ec = extend_cluster(&cd, &s).unwrap();
    (s, ec)
}

#[test]
fn chemical_and_volume_constants_are_stable_across_seeds() {
    let mut chem = Vec::new();
    let mut vol = Vec::new();
    for seed in 0..10 {
        let (s, ec) = bernoulli_cluster(seed);
        let rep = chemical_distance_check(&ec, &s, 1000, seed).unwrap();
        assert_eq!(rep.disconnected, 0);
        chem.push(rep.max_ratio);
        let spec = VolumeSpec { radii: vec![2, 24, 32, 48, 64, 96], centres: 100, c_chem: rep.max_ratio, seed };
        let v = volume_growth_check(&ec, &s, &spec).unwrap();
        assert!(v.samples.iter().any(|x| x.radius == 2 && !x.in_range));
        vol.push(v.min_ratio.unwrap());
    }
    for series in [&chem, &vol] {
        let mut sorted = series.clone();
        sorted.sort_by(f64::total_cmp);
        let median = 0.5 * (sorted[4] + sorted[5]);
        for v in series.iter() {
            assert!((v / median - 1.0).abs() <= 0.2, "{chem:?} {vol:?}");
        }
    }
}

#[test]
fn volume_growth_on_full_lattice() {
    let s = Subgraph::full(cube(&[0, 0], 64));
    let cd = largest_cluster(&s, &ladder(1), 24, 0, &p(&[20, 20]), 1).unwrap();
    let ec = extend_cluster(&cd, &s).unwrap();
    let spec = VolumeSpec { radii: vec![1, 4, 8, 16], centres: 30, c_chem: 2.0, seed: 1 };
    let rep = volume_growth_check(&ec, &s, &spec).unwrap();
    for v in &rep.samples {
        let r = v.radius;
        if !v.truncated {
            assert_eq!(v.measure, 4 * (2 * r * r + 2 * r + 1));
        }
        assert_eq!(v.in_range, r >= 2);
    }
    assert!(rep.min_ratio.unwrap() >= 4.0);
}

#[test]
fn extended_audit_bounds() {
    let s = Subgraph::full(cube(&[0, 0], 32));
    let cd = largest_cluster(&s, &ladder(1), 12, 0, &p(&[10, 10]), 1).unwrap();
    let ec = extend_cluster(&cd, &s).unwrap();
    let holes = [cube(&[14, 14], 2)];
    let rep = extended_isop_audit(&ec, 0.5, None, &[Family::Halves, Family::Random, Family::Holes], &holes, 3).unwrap();
    assert!(rep.general.all_pass && rep.linear.all_pass);
    let half = rep.general.worst_in(Family::Halves).unwrap();
    assert!(half.ratio > 1e3 * rep.gamma);
    for r in rep.general.reports.iter().filter(|r| r.size == 1) {
        assert!(r.ratio >= 1.0);
    }
    assert!(rep.general.worst_in(Family::Holes).is_some());
    assert!(extended_isop_audit(&ec, 0.6, None, &[Family::Halves], &[], 0).is_err());
}

/// Configurations where `H_{K,0}` holds: nested clusters, locality, size.
#[test]
fn nesting_locality_and_size_under_h() {
    let lad = ladder(4);
    let eta = DensityPair::new(0.6, 1.0).unwrap();
    let bx = cube(&[0, 0], 64);
    let mut checked = 0;
    for seed in 0..20 {
        let s = bernoulli(&bx, 0.97, derive_seed(88, seed)).subgraph();
        let f = classify(&s, &lad, &eta, &cube(&[4, 4], 56), 0).unwrap();
        let x = p(&[16, 16]);
        if event_h(&s, &f, 8, 0, &x).unwrap().is_some() {
            continue;
        }
        checked += 1;
        let big = largest_cluster(&s, &lad, 8, 0, &x, 4).unwrap();
        assert!(!big.tie);
        assert!(big.core_size() as f64 >= 0.5 * eta.eta2() * 1024.0);
        let mid = largest_cluster(&s, &lad, 4, 0, &p(&[20, 24]), 4).unwrap();
        let small = largest_cluster(&s, &lad, 2, 0, &p(&[24, 28]), 4).unwrap();
        assert!(small.core.is_subset(&mid.core));
        assert!(mid.core.is_subset(&big.core));
        let ec = extend_cluster(&big, &s).unwrap();
        assert_eq!(local_connectivity_violation(&ec, 15).unwrap(), None);
    }
    assert!(checked >= 10, "only {checked} configurations satisfied H");
}
