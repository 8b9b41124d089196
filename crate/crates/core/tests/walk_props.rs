use std::collections::HashMap;

use percolab::lattice::{LatticeBox, Point, SiteSet, Subgraph};
use percolab::rng::{derive_seed, trajectory_stream};
use percolab::samplers::{bernoulli, Model};
use percolab::walk::*;
use percolab::Error;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Poisson};

fn p(c: &[i64]) -> Point {
    Point::new(c).unwrap()
}

fn centred(d: usize, half: i64) -> LatticeBox {
    LatticeBox::cube(Point::new(&vec![-half; d]).unwrap(), 2 * half as u64 + 1).unwrap()
}

/// `P_x[X_k = y] / mu_y` by enumerating every k-step path.
fn path_oracle(g: &Subgraph, x: &Point, k: usize) -> HashMap<Point, f64> {
    let bx = g.bx();
    let mut dist: HashMap<usize, f64> = HashMap::from([(bx.index_of(x).unwrap(), 1.0)]);
    fn expand(g: &Subgraph, at: usize, prob: f64, left: usize, out: &mut HashMap<usize, f64>) {
        if left == 0 {
            *out.entry(at).or_default() += prob;
            return;
        }
        let mut nb = Vec::new();
        g.for_each_neighbor(at, |j| nb.push(j));
        for j in &nb {
            expand(g, *j, prob / nb.len() as f64, left - 1, out);
        }
    }
    let mut out = HashMap::new();
    for (i, pr) in dist.drain() {
        expand(g, i, pr, k, &mut out);
    }
    out.into_iter().map(|(i, pr)| (bx.point_of(i), pr / g.degree(i) as f64)).collect()
}

#[test]
fn initial_and_two_step_values() {
    let g = Subgraph::full(centred(2, 10));
    let k = exact_kernel::<f64>(&g, &Point::origin(2), 2).unwrap();
    assert_eq!(k.value(0, &Point::origin(2)), Some(0.25));
    assert_eq!(k.value(2, &Point::origin(2)), Some(1.0 / 16.0));
    let oracle = path_oracle(&g, &Point::origin(2), 2);
    assert_eq!(oracle[&Point::origin(2)], 1.0 / 16.0);
    assert!(k.safe);
    assert!(k.mass_error() < 1e-15);
}

#[test]
fn degenerate_sources_error() {
    let bx = centred(2, 5);
    let mut s = SiteSet::full(bx);
    for q in [p(&[1, 0]), p(&[-1, 0]), p(&[0, 1]), p(&[0, -1])] {
        s.remove(&q);
    }
    let g = Subgraph::new(s);
    assert!(matches!(exact_kernel::<f64>(&g, &Point::origin(2), 3), Err(Error::NotApplicable(_))));
    assert!(matches!(exact_kernel::<f64>(&g, &p(&[9, 9]), 3), Err(Error::OutOfBounds(_))));
    assert!(matches!(exact_kernel::<f64>(&g, &p(&[1, 0]), 3), Err(Error::NotApplicable(_))));
}

#[test]
fn safe_flag_tracks_faces() {
    let g = Subgraph::full(centred(2, 10));
    assert!(exact_kernel::<f64>(&g, &Point::origin(2), 9).unwrap().safe);
    let near = exact_kernel::<f64>(&g, &Point::origin(2), 10).unwrap();
    assert!(!near.safe);
    assert!(near.mass_error() < 1e-12);
    let narrow = kernel_steps::<f64>(&g, &Point::origin(2), 6, &[6], Some(3)).unwrap();
    assert!(!narrow.safe);
    assert!(narrow.mass[6] < 1.0 - 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kernel_matches_path_enumeration(seed in any::<u64>(), dens in 0.55f64..1.0, k in 0usize..7) {
        let bx = centred(2, 8);
        let g = bernoulli(&bx, dens, seed).subgraph();
        let Some(x) = bx.points().filter(|q| q.linf(&Point::origin(2)) <= 2).find(|q| {
            bx.index_of(q).is_some_and(|i| g.occupied(i) && g.degree(i) > 0)
        }) else { return Ok(()) };
        let ker = exact_kernel::<f64>(&g, &x, k).unwrap();
        let oracle = path_oracle(&g, &x, k);
        for q in ker.window.points() {
            let want = oracle.get(&q).copied().unwrap_or(0.0);
            prop_assert!((ker.value(k, &q).unwrap() - want).abs() < 1e-14);
        }
        prop_assert!(ker.mass_error() < 1e-12);
    }

    #[test]
    fn kernels_are_reversible(seed in any::<u64>(), dens in 0.6f64..1.0) {
        let bx = centred(2, 30);
        let g = bernoulli(&bx, dens, seed).subgraph();
        let pts: Vec<Point> = bx
            .points()
            .filter(|q| q.linf(&Point::origin(2)) <= 3)
            .filter(|q| bx.index_of(q).is_some_and(|i| g.occupied(i) && g.degree(i) > 0))
            .collect();
        prop_assume!(pts.len() >= 2);
        let n = 20;
        let kernels: Vec<_> = pts.iter().map(|x| exact_kernel::<f64>(&g, x, n).unwrap()).collect();
        for (a, ka) in pts.iter().zip(&kernels) {
            for (b, kb) in pts.iter().zip(&kernels) {
                for step in [1usize, 7, 20] {
                    let (u, v) = (ka.value(step, b).unwrap(), kb.value(step, a).unwrap());
                    prop_assert!((u - v).abs() <= 1e-14 * u.abs().max(1e-300) + 1e-18);
                }
            }
        }
    }

    #[test]
    fn three_dimensional_kernels_conserve_mass(seed in any::<u64>(), dens in 0.4f64..1.0) {
        let bx = centred(3, 10);
        let g = bernoulli(&bx, dens, seed).subgraph();
        let Some(x) = bx.points().filter(|q| q.linf(&Point::origin(3)) <= 1).find(|q| {
            bx.index_of(q).is_some_and(|i| g.occupied(i) && g.degree(i) > 0)
        }) else { return Ok(()) };
        let ker = exact_kernel::<f64>(&g, &x, 8).unwrap();
        prop_assert!(ker.safe);
        prop_assert!(ker.mass_error() < 1e-12);
        let oracle = path_oracle(&g, &x, 4);
        for (q, v) in ker.support(4) {
            prop_assert!((v - oracle[&q]).abs() < 1e-15);
        }
    }
}

#[test]
fn f32_kernel_tracks_f64() {
    let bx = centred(2, 40);
    let g = bernoulli(&bx, 0.8, 4).subgraph();
    let x = bx.points().find(|q| q.l1(&Point::origin(2)) <= 2 && g.occupied_point(q) && g.degree(bx.index_of(q).unwrap()) > 0).unwrap();
    let a = exact_kernel::<f64>(&g, &x, 30).unwrap();
    let b = exact_kernel::<f32>(&g, &x, 30).unwrap();
    assert!(b.mass_error() < 1e-5);
    for q in a.window.points() {
        assert!((a.value(30, &q).unwrap() - b.value(30, &q).unwrap() as f64).abs() < 1e-6);
    }
}

#[test]
fn continuous_time_basics() {
    let g = Subgraph::full(centred(2, 40));
    let o = Point::origin(2);
    let q0 = ct_kernel::<f64>(&g, &o, 0.0, 1e-12).unwrap();
    assert_eq!(q0.value(&o), Some(0.25));
    assert!(ct_kernel::<f64>(&g, &o, 1.0, 0.0).is_err());
    let q = ct_kernel::<f64>(&g, &o, 8.0, 1e-10).unwrap();
    assert!(q.tail < 1e-10);
    assert!((q.mass + q.tail - 1.0).abs() < 1e-12);
    assert!(q.safe);
}

#[test]
fn continuous_time_matches_monte_carlo() {
    let bx = centred(2, 40);
    let g = bernoulli(&bx, 0.8, 21).subgraph();
    let x = bx.points().filter(|q| g.occupied_point(q) && g.degree(bx.index_of(q).unwrap()) >= 3).min_by_key(|q| q.l1(&Point::origin(2))).unwrap();
    let t = 8.0;
    let q = ct_kernel::<f64>(&g, &x, t, 1e-12).unwrap();
    let trials = 200_000usize;
    let poisson = Poisson::new(t).unwrap();
    let mut hits: HashMap<Point, usize> = HashMap::new();
    let start = bx.index_of(&x).unwrap();
    for j in 0..trials {
        let mut rng = trajectory_stream(99, j as u64);
        let jumps = poisson.sample(&mut rng) as usize;
        let end = walk_path(&g, start, jumps, &mut rng);
        *hits.entry(bx.point_of(end)).or_default() += 1;
    }
    let near: Vec<Point> = bx.points().filter(|y| g.occupied_point(y) && y.l1(&x) <= 2).collect();
    assert!(near.len() >= 5);
    for y in near {
        let mu = g.degree(bx.index_of(&y).unwrap()) as f64;
        let exact = q.value(&y).unwrap() * mu;
        let freq = hits.get(&y).copied().unwrap_or(0) as f64 / trials as f64;
        let se = (exact * (1.0 - exact) / trials as f64).sqrt();
        assert!((freq - exact).abs() < 3.0 * se, "{y}: mc {freq} exact {exact} se {se}");
    }
}

#[test]
fn envelope_on_the_full_lattice_is_stable() {
    let g = Subgraph::full(centred(2, 300));
    let steps = [64usize, 65, 128, 129, 256, 257];
    let ker = kernel_steps::<f64>(&g, &Point::origin(2), 257, &steps, None).unwrap();
    let fits: Vec<EnvelopeFit> =
        [64usize, 128, 256].iter().map(|&t| envelope_check(&g, &[&ker], &[t], Distance::Chemical, 0.5).unwrap()).collect();
    let c1: Vec<f64> = fits.iter().map(|f| f.upper.as_ref().unwrap().amplitude).collect();
    let c4: Vec<f64> = fits.iter().map(|f| f.lower.as_ref().unwrap().rate).collect();
    for v in [&c1, &c4] {
        let mid = v[1];
        assert!(v.iter().all(|a| (a / mid - 1.0).abs() <= 0.10), "{v:?}");
    }
    for f in &fits {
        assert!(f.violations.is_empty());
        assert!((0.0..=1.0).contains(&f.coverage));
    }
}

#[test]
fn envelope_admissibility_counts() {
    let bx = centred(2, 60);
    let g = bernoulli(&bx, 0.8, 8).subgraph();
    let x = bx.points().filter(|q| g.occupied_point(q) && g.degree(bx.index_of(q).unwrap()) > 0).min_by_key(|q| q.l1(&Point::origin(2))).unwrap();
    let t = 20usize;
    let ker = exact_kernel::<f64>(&g, &x, t + 1).unwrap();
    let eps = 0.5;
    let fit = envelope_check(&g, &[&ker], &[t], Distance::Lattice, eps).unwrap();
    let (mut up, mut low, mut pos) = (0, 0, 0);
    for y in ker.window.points() {
        let f = ker.pair(t, &y).unwrap();
        if f > 0.0 {
            pos += 1;
            let dd = y.l1(&x) as f64;
            up += usize::from(dd <= t as f64);
            low += usize::from(t as f64 >= dd.powf(1.0 + eps));
            let ub = fit.upper.as_ref().unwrap();
            if dd <= t as f64 {
                let env = ub.amplitude * (t as f64).powf(-1.0) * (-ub.rate * dd * dd / t as f64).exp();
                assert!(f <= env * (1.0 + 1e-9));
            }
        }
    }
    assert_eq!((fit.upper_pairs, fit.lower_pairs), (up, low));
    assert!(up < pos, "pairs with D = t + 1 carry mass and are excluded");
    assert!((fit.coverage - up as f64 / pos as f64).abs() < 1e-15);
    assert!(envelope_check(&g, &[&ker], &[t], Distance::Lattice, 0.0).is_err());
}

#[test]
fn harnack_constant_data_and_superposition() {
    let g = Subgraph::full(centred(2, 30));
    let o = Point::origin(2);
    let ball = HarnackBall::new(&g, &o, 16).unwrap();
    let ext = ball.extend::<f64>(&g, |_| 2.5).unwrap();
    assert_eq!(ext.ratio(), Some(1.0));
    let reports: Vec<HarnackReport> = (0..3).map(|s| harnack_ratio::<f64>(&g, &o, 16, 100, s).unwrap()).collect();
    for r in &reports {
        let worst = r.worst.unwrap();
        assert!(worst.is_finite() && worst > 1.0);
        assert!(r.max_ratio.unwrap() <= worst * (1.0 + 1e-9));
        assert_eq!(r.worst, reports[0].worst);
        assert_eq!(r.families.iter().map(|f| f.trials).sum::<usize>(), 100);
    }
}

#[test]
fn harnack_matches_dense_solve() {
    let bx = centred(2, 20);
    let g = bernoulli(&bx, 0.85, 3).subgraph();
    let y = bx.points().filter(|q| g.occupied_point(q) && g.degree(bx.index_of(q).unwrap()) > 0).min_by_key(|q| q.l1(&Point::origin(2))).unwrap();
    let r = 6;
    let ball = HarnackBall::new(&g, &y, r).unwrap();
    let data = |i: usize| ((i * 7919) % 13) as f64 / 13.0 + 0.1;
    let ext = ball.extend::<f64>(&g, data).unwrap();
    // Dense oracle on the graph ball.
    let mut dist = HashMap::new();
    let mut frontier = vec![bx.index_of(&y).unwrap()];
    dist.insert(frontier[0], 0u64);
    for d in 1..=r + 1 {
        let mut next = Vec::new();
        for &i in &frontier {
            g.for_each_neighbor(i, |j| {
                if let std::collections::hash_map::Entry::Vacant(e) = dist.entry(j) {
                    e.insert(d);
                    next.push(j);
                }
            });
        }
        frontier = next;
    }
    let interior: Vec<usize> = dist.iter().filter(|(_, &d)| d <= r).map(|(&i, _)| i).collect();
    let slot: HashMap<usize, usize> = interior.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let n = interior.len();
    let mut a = nalgebra::DMatrix::<f64>::zeros(n, n);
    let mut b = nalgebra::DVector::<f64>::zeros(n);
    for (k, &i) in interior.iter().enumerate() {
        a[(k, k)] = g.degree(i) as f64;
        g.for_each_neighbor(i, |j| match slot.get(&j) {
            Some(&l) => a[(k, l)] -= 1.0,
            None => b[k] += data(j),
        });
    }
    let u = a.lu().solve(&b).unwrap();
    let half: Vec<f64> = interior.iter().enumerate().filter(|(_, i)| dist[i] <= r / 2).map(|(k, _)| u[k]).collect();
    let sup = half.iter().cloned().fold(f64::MIN, f64::max);
    let inf = half.iter().cloned().fold(f64::MAX, f64::min);
    assert!((ext.sup - sup).abs() < 1e-10 && (ext.inf - inf).abs() < 1e-10);
}

#[test]
fn harnack_rejects_bad_balls() {
    let g = Subgraph::full(centred(2, 10));
    assert!(matches!(HarnackBall::new(&g, &Point::origin(2), 10), Err(Error::OutOfBounds(_))));
    let bx = centred(2, 20);
    let island = SiteSet::from_fn(bx, |i| bx.point_of(i).linf(&Point::origin(2)) <= 2);
    let g = Subgraph::new(island);
    assert!(matches!(HarnackBall::new(&g, &Point::origin(2), 6), Err(Error::NotApplicable(_))));
}

#[test]
fn green_function_basics() {
    assert!(matches!(green::<f64>(&Subgraph::full(centred(2, 10)), &Point::origin(2), &Point::origin(2), 4), Err(Error::NotApplicable(_))));
    let bx = centred(3, 14);
    let g = bernoulli(&bx, 0.7, 6).subgraph();
    let pts: Vec<Point> = bx
        .points()
        .filter(|q| q.linf(&Point::origin(3)) <= 3 && g.occupied_point(q) && g.degree(bx.index_of(q).unwrap()) > 0)
        .take(6)
        .collect();
    let region = centred(3, 12);
    let fields: Vec<_> = pts.iter().map(|y| green_field_in::<f64>(&g, y, &region).unwrap()).collect();
    for (a, fa) in pts.iter().zip(&fields) {
        let mu = g.degree(bx.index_of(a).unwrap()) as f64;
        assert!(fa.value(a).unwrap() >= 1.0 / mu);
        for (b, fb) in pts.iter().zip(&fields) {
            let (u, v) = (fa.value(b).unwrap(), fb.value(a).unwrap());
            assert!((u - v).abs() <= 1e-9 * u.abs().max(v.abs()) + 1e-15, "{a} {b}: {u} {v}");
        }
    }
    let est = green::<f64>(&g, &pts[1], &pts[0], 5).unwrap();
    assert!(est.doubled.is_some() && est.sensitivity().unwrap() >= 0.0);
    assert!(green::<f64>(&g, &pts[1], &pts[0], 8).unwrap().doubled.is_none());
}

#[test]
fn full_lattice_green_asymptotics() {
    // Lattice Green function of Z^3 at the origin: 1.516386... expected visits,
    // divided by mu = 6.
    let g00 = 1.516_386_059_151_978 / 6.0;
    let g = Subgraph::full(centred(3, 66));
    let o = Point::origin(3);
    let est = green::<f64>(&g, &o, &o, 32).unwrap();
    assert!(est.value < g00 && est.doubled.unwrap() < g00);
    assert!((est.extrapolated().unwrap() / g00 - 1.0).abs() < 2e-3);
    let near = green_field::<f64>(&g, &o, 32).unwrap();
    let far = green_field::<f64>(&g, &o, 64).unwrap();
    let scaled: Vec<f64> = [8i64, 16, 24, 32]
        .iter()
        .map(|&r| {
            let x = p(&[r, 0, 0]);
            (2.0 * far.value(&x).unwrap() - near.value(&x).unwrap()) * r as f64
        })
        .collect();
    let (lo, hi) = (scaled.iter().cloned().fold(f64::MAX, f64::min), scaled.iter().cloned().fold(0.0, f64::max));
    assert!(hi / lo < 1.15, "{scaled:?}");
}

#[test]
fn qip_on_the_full_lattice() {
    let n = 400;
    let g = Subgraph::full(centred(2, n as i64 + 2));
    let q = qip_stats(&g, &Point::origin(2), n, 4000, 3).unwrap();
    for i in 0..2 {
        assert!((q.entry(i, i) - 0.5).abs() < 4.0 * q.se_entry(i, i));
    }
    assert!(q.max_offdiag_z() < 4.0);
    assert_eq!(q.endpoints.len(), 4000);
    assert!(q.endpoints.iter().all(|e| (e.l1(&Point::origin(2)) as usize + n) % 2 == 0));
    assert_eq!(q, qip_stats(&g, &Point::origin(2), n, 4000, 3).unwrap());
    assert!(matches!(qip_stats(&g, &Point::origin(2), n + 2, 10, 3), Err(Error::OutOfBounds(_))));
}

#[test]
fn qip_on_bernoulli_is_isotropic_on_average() {
    let n = 400;
    let bx = centred(2, n as i64 + 2);
    let mut sum = [0.0; 4];
    let envs = 6;
    for s in 0..envs {
        let g = bernoulli(&bx, 0.7, derive_seed(31, s)).subgraph();
        let cc = percolab::lattice::connected_components(&g);
        let (big, _) = cc.largest().unwrap();
        let x = bx
            .points()
            .filter(|q| cc.label(bx.index_of(q).unwrap()) == Some(big))
            .min_by_key(|q| q.l1(&Point::origin(2)))
            .unwrap();
        let q = qip_stats(&g, &x, n, 1500, s).unwrap();
        assert!(q.sigma2() < 0.5);
        for (a, b) in sum.iter_mut().zip(&q.sigma) {
            *a += b / envs as f64;
        }
    }
    let diag = 0.5 * (sum[0] + sum[3]);
    assert!(sum[1].abs() < 0.15 * diag, "{sum:?}");
    assert!((sum[0] - sum[3]).abs() < 0.2 * diag, "{sum:?}");
}

#[test]
fn local_clt_on_the_full_lattice() {
    let sigma = [0.5, 0.0, 0.0, 0.5];
    let m = 4.0;
    let g = Subgraph::full(centred(2, 402));
    let rows = local_clt_check::<f64>(&g, &Point::origin(2), &[100, 400], &[1.0], &sigma, m, &CltOptions::default()).unwrap();
    assert!(rows[1].sup_error < rows[0].sup_error);
    assert!(rows.iter().all(|r| r.leaked < 1e-12));
    // Without parity pairing the rescaled kernel misses the limit by a factor two.
    let k = kernel_steps::<f64>(&g, &Point::origin(2), 400, &[400], None).unwrap();
    let single = 400.0 * k.value(400, &Point::origin(2)).unwrap();
    let limit = 2.0 / m * gaussian_kernel(&sigma, 1.0, &[0.0, 0.0]).unwrap();
    assert!((single - limit).abs() < 0.02 * limit);
    let odd = kernel_steps::<f64>(&g, &Point::origin(2), 401, &[401], None).unwrap();
    assert_eq!(odd.value(401, &Point::origin(2)), Some(0.0));
    let ct = CltOptions { kind: KernelKind::Continuous, ..CltOptions::default() };
    let rows = local_clt_check::<f64>(&g, &Point::origin(2), &[100, 200], &[1.0], &sigma, m, &ct).unwrap();
    assert!(rows[1].sup_error < rows[0].sup_error);
}

#[test]
fn gaussian_kernel_normalisation() {
    let sigma = [0.3, 0.1, 0.1, 0.6];
    let h = 0.02;
    let mut total = 0.0;
    for i in -400..=400 {
        for j in -400..=400 {
            total += gaussian_kernel(&sigma, 1.7, &[i as f64 * h, j as f64 * h]).unwrap() * h * h;
        }
    }
    assert!((total - 1.0).abs() < 1e-6);
    assert!(gaussian_kernel(&[1.0, 2.0, 2.0, 1.0], 1.0, &[0.0, 0.0]).is_err());
}

#[test]
fn annealed_gradient_full_lattice_power() {
    let r = annealed_gradient(
        Model::Bernoulli(1.0),
        &Point::origin(2),
        &p(&[1, 0]),
        &GradientTarget::Diffusive(vec![0.7, 0.7]),
        &[32, 64, 128],
        1,
        1,
    )
    .unwrap();
    assert!((r.exponent.unwrap() + 3.0).abs() < 0.25, "{:?}", r.exponent);
    assert!(r.points.iter().all(|q| q.se == 0.0 && q.included == 1));
    let fixed = annealed_gradient(
        Model::Bernoulli(1.0),
        &Point::origin(2),
        &p(&[1, 0]),
        &GradientTarget::Fixed(p(&[10, 0])),
        &[8, 10, 12, 32],
        1,
        1,
    )
    .unwrap();
    assert_eq!(fixed.excluded, vec![8, 10]);
    assert_eq!(fixed.points.iter().map(|q| q.n).collect::<Vec<_>>(), vec![12, 32]);
    assert!(annealed_gradient(Model::Bernoulli(1.0), &Point::origin(2), &p(&[2, 0]), &GradientTarget::Fixed(p(&[4, 0])), &[8], 1, 1).is_err());
}

#[test]
fn annealed_gradient_bernoulli_decreases() {
    let r = annealed_gradient(
        Model::Bernoulli(0.75),
        &Point::origin(2),
        &p(&[1, 0]),
        &GradientTarget::Diffusive(vec![1.0, 0.0]),
        &[16, 32, 64],
        40,
        derive_seed(4, 4),
    )
    .unwrap();
    let est: Vec<f64> = r.points.iter().map(|q| q.estimate).collect();
    assert!(est.iter().all(|e| e.is_finite() && *e > 0.0));
    assert!(est.windows(2).all(|w| w[1] < w[0]), "{est:?}");
}

#[test]
fn walk_paths_stay_on_the_cluster() {
    let bx = centred(2, 30);
    let g = bernoulli(&bx, 0.7, 2).subgraph();
    let start = bx.points().position(|q| g.occupied_point(&q) && g.degree(bx.index_of(&q).unwrap()) > 0).unwrap();
    let mut rng = trajectory_stream(5, 0);
    for _ in 0..50 {
        let n = rng.gen_range(0..20);
        let end = walk_path(&g, start, n, &mut rng);
        assert!(g.occupied(end));
        assert!(bx.point_of(end).l1(&bx.point_of(start)) as usize <= n);
    }
}
