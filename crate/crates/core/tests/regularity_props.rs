use percolab::lattice::{LatticeBox, Point, SiteSet, Subgraph};
use percolab::regularity::{
    certify_ball, covering_box, estimate_rvgb_tail, scan_radii, very_good_scan, BallParams, CertifyOptions,
    ScanOptions, Verdict,
};
use percolab::renorm::ScaleLadder;
use percolab::rng::derive_seed;
use percolab::samplers::{bernoulli, Model};

fn p(c: &[i64]) -> Point {
    Point::new(c).unwrap()
}

fn centred(half: i64) -> LatticeBox {
    LatticeBox::cube(p(&[-half, -half]), 2 * half as u64 + 1).unwrap()
}

fn opts() -> CertifyOptions {
    CertifyOptions::new(ScaleLadder::new(9, 1, 1, 1, 0).unwrap(), 0)
}

fn params(cv: f64) -> BallParams {
    BallParams::new(cv, 4.0, 3.0, 2).unwrap()
}

#[test]
fn covering_box_contains_the_sup_ball() {
    let lad = ScaleLadder::new(9, 1, 4, 1, 1).unwrap();
    for (x, r) in [(p(&[5, -3]), 3u64), (p(&[0, 0]), 1), (p(&[-17, 22]), 10)] {
        for level in 0..2 {
            let (k, ys) = covering_box(&lad, level, &x, r);
            let ls = lad.L(level);
            let q = LatticeBox::cube(ys, k * ls).unwrap();
            assert!(q.contains_box(&LatticeBox::centered(&x, r).unwrap()));
            assert!(k * ls <= 4 * r + 2 * ls, "K' L_s = {}", k * ls);
            assert!(ys.coords().iter().all(|c| c % ls as i64 == 0));
        }
    }
}

#[test]
fn full_lattice_volume_and_verdict() {
    let g = Subgraph::full(centred(80));
    let c = certify_ball(&g, &Point::origin(2), 16, &params(1.0), &opts()).unwrap();
    assert_eq!(c.volume, 4 * (2 * 256 + 32 + 1));
    assert!(c.volume_ok());
    assert_eq!(c.verdict, Verdict::Regular);
    assert_eq!(c.recompute(), c.verdict);
    assert_eq!(c.claim_consistent(), Some(true));
    let e = c.extension.as_ref().unwrap();
    assert!(e.contains_ball);
    assert!(c.cw_achieved.unwrap() <= 3.0);
    assert!(!c.families.contains(&"connected"));
}

#[test]
fn isolated_site_fails_volume() {
    let bx = centred(40);
    let mut s = SiteSet::full(bx);
    for q in [p(&[1, 0]), p(&[-1, 0]), p(&[0, 1]), p(&[0, -1])] {
        s.remove(&q);
    }
    let g = Subgraph::new(s);
    let c = certify_ball(&g, &Point::origin(2), 3, &params(1.0), &opts()).unwrap();
    assert_eq!(c.volume, 0);
    assert!(!c.volume_ok());
    assert_eq!(c.verdict, Verdict::Fail);
}

#[test]
fn truncated_or_invalid_requests_error() {
    let g = Subgraph::full(centred(10));
    assert!(certify_ball(&g, &Point::origin(2), 4, &params(1.0), &opts()).is_err());
    assert!(certify_ball(&g, &Point::origin(2), 0, &params(1.0), &opts()).is_err());
    let bad = BallParams { cv: 1.0, cp: 4.0, cw: 3.0, epsilon: 0.9 };
    assert!(certify_ball(&g, &Point::origin(2), 1, &bad, &opts()).is_err());
}

#[test]
fn regular_certificates_are_good() {
    let bx = centred(90);
    let mut seen_regular = 0;
    for seed in 0..4 {
        let g = bernoulli(&bx, 0.8, derive_seed(5, seed)).subgraph();
        for (k, r) in [2u64, 4, 8, 16].into_iter().enumerate() {
            let target = p(&[7 * k as i64 - 10, 3 * seed as i64]);
            let x = bx.points().filter(|q| g.occupied_point(q)).min_by_key(|q| q.l1(&target)).unwrap();
            let c = certify_ball(&g, &x, r, &params(1.0), &opts()).unwrap();
            assert_eq!(c.recompute(), c.verdict);
            assert_eq!(c.claim_consistent(), Some(true), "{c:?}");
            seen_regular += usize::from(c.verdict == Verdict::Regular);
        }
    }
    assert!(seen_regular > 0);
}

#[test]
fn certificates_are_deterministic() {
    let bx = centred(60);
    let g = bernoulli(&bx, 0.75, 17).subgraph();
    let x = bx.points().filter(|q| g.occupied_point(q)).min_by_key(|q| q.l1(&Point::origin(2))).unwrap();
    let a = certify_ball(&g, &x, 6, &params(1.0), &opts()).unwrap();
    let b = certify_ball(&g, &x, 6, &params(1.0), &opts()).unwrap();
    assert_eq!(a, b);
}

fn scan_opts(max_centres: usize) -> ScanOptions {
    ScanOptions { certify: opts(), max_centres, seed: 2 }
}

#[test]
fn full_lattice_scan_is_very_good() {
    let g = Subgraph::full(centred(80));
    let scan = very_good_scan(&g, &Point::origin(2), 16, &params(1.0), &scan_opts(8)).unwrap();
    assert_eq!(scan.radii, scan_radii(16, 2));
    assert_eq!(scan.n, Some(1));
    assert!(scan.very_good);
    assert!(scan.failures.is_empty());
    assert!(scan.within(0.2));
    for n in 1..=2 {
        assert!(scan.very_good_with(n));
    }
    assert!(!scan.very_good_with(3));
}

#[test]
fn planted_defect_is_localised() {
    // A 13 x 13 block centred at c = (12, 0) emptied except its middle row.
    let rho = 6i64;
    let c = p(&[12, 0]);
    let bx = centred(200);
    let s = SiteSet::from_fn(bx, |i| {
        let q = bx.point_of(i);
        q.linf(&c) as i64 > rho || q[1] == 0
    });
    let g = Subgraph::new(s);
    let scan = very_good_scan(&g, &Point::origin(2), 32, &params(2.0), &scan_opts(400)).unwrap();
    let n = scan.n.expect("largest radius passes");
    assert!(n as i64 > rho, "N = {n}");
    assert!(!scan.very_good);
    assert!(!scan.failures.is_empty());
    for f in &scan.failures {
        assert!((f.centre.linf(&c) as i64) <= rho + f.radius as i64, "{f:?}");
    }
    assert!(scan.failures.iter().any(|f| f.centre.linf(&c) as i64 <= rho));
}

#[test]
fn tail_vanishes_for_the_full_lattice() {
    let p = BallParams::new(1.0, 4.0, 3.0, 2).unwrap();
    let tail = estimate_rvgb_tail(Model::Bernoulli(1.0), 2, &[4, 8], 2, &p, &scan_opts(4), 9).unwrap();
    assert_eq!(tail.failures, vec![0, 0]);
    assert!(tail.monotone_decreasing());
    assert_eq!(tail.exponent, None);
}
