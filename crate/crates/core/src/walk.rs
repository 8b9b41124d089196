//! Simple random walk on occupied clusters.
//!
//! The walk at `x` jumps to a uniformly chosen occupied neighbour, so
//! `P(x -> y) = 1/mu_x` for `y ~ x`, where `mu_x` is the occupied degree.
//! Kernels are normalised by the measure: `p_k(x, y) = P_x[X_k = y] / mu_y`,
//! which makes them symmetric in `(x, y)`.
//!
//! Exact kernels are obtained by iterating `p_{k+1}(y) = (1/mu_y) sum_{z ~ y} p_k(z)`
//! on a window around the source. The walk moves one site per step, so a
//! window of radius `n` reproduces the kernel on the infinite graph exactly
//! up to step `n` as long as the window stays off the faces of the box.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::lattice::{connected_components, Bfs, LatticeBox, Point, Subgraph, MAX_DIM};
use crate::linalg::{DirichletSystem, SolveStats};
use crate::rng::{derive_seed, trajectory_stream};
use crate::samplers::{sample, Model, DEFAULT_GUARD_FACTOR};
use crate::scalar::Real;

fn solver_tol<T: Real>() -> f64 {
    if std::mem::size_of::<T>() <= 4 {
        1e-6
    } else {
        1e-13
    }
}

fn source_index(g: &Subgraph, x: &Point) -> Result<usize> {
    if x.dim() != g.dim() {
        return Err(Error::DimensionMismatch { expected: g.dim(), got: x.dim() });
    }
    let i = g.bx().index_of(x).ok_or_else(|| Error::OutOfBounds(format!("{x} outside {:?}", g.bx())))?;
    if !g.occupied(i) || g.degree(i) == 0 {
        return Err(Error::NotApplicable(format!("walk from {x} is degenerate (mu = 0)")));
    }
    Ok(i)
}

/// True if no site within l-inf distance `n` of `x` lies on a face of the box.
fn clear_of_faces(bx: &LatticeBox, x: &Point, n: u64) -> bool {
    LatticeBox::centered(x, n + 1).map(|b| bx.contains_box(&b)).unwrap_or(false)
}

/// Contiguous runs `(start, len)` along the last axis covering `sub`, as
/// indices of `host`.
fn runs(host: &LatticeBox, sub: &LatticeBox) -> Vec<(usize, usize)> {
    let d = sub.dim();
    let len = sub.side(d - 1) as usize;
    let base = host.index_of(&sub.corner()).expect("sub-box inside host");
    let mut out = Vec::with_capacity(sub.volume() / len);
    let mut ctr = [0u64; MAX_DIM];
    loop {
        let mut idx = base;
        for k in 0..d - 1 {
            idx += ctr[k] as usize * host.stride(k);
        }
        out.push((idx, len));
        let mut k = d - 1;
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            ctr[k] += 1;
            if ctr[k] < sub.side(k) {
                break;
            }
            ctr[k] = 0;
        }
    }
}

fn update_rows<T: Real, const D: usize>(
    cur: &[T],
    next: &mut [T],
    inv_mu: &[T],
    mu: &[u32],
    offs: &[usize],
    rows: &[(usize, usize)],
) -> f64 {
    let mut o = [0usize; D];
    o.copy_from_slice(&offs[..D]);
    let mut mass = 0.0;
    for &(start, len) in rows {
        for i in start..start + len {
            let w = inv_mu[i];
            if w == T::zero() {
                next[i] = T::zero();
                continue;
            }
            let mut s = T::zero();
            for &ok in &o {
                s += cur[i - ok] + cur[i + ok];
            }
            let v = s * w;
            next[i] = v;
            mass += v.as_f64() * mu[i] as f64;
        }
    }
    mass
}

/// Transition-operator iteration on a window with a one-site zero halo.
struct Propagator<T> {
    source: Point,
    inner: LatticeBox,
    halo: LatticeBox,
    inv_mu: Vec<T>,
    mu: Vec<u32>,
    src: usize,
}

impl<T: Real> Propagator<T> {
    fn new(g: &Subgraph, x: &Point, radius: u64) -> Result<Self> {
        source_index(g, x)?;
        let inner = LatticeBox::centered(x, radius)?.intersect(g.bx()).expect("window contains the source");
        let halo = inner.grow(1)?;
        let mut inv_mu = vec![T::zero(); halo.volume()];
        let mut mu = vec![0u32; halo.volume()];
        for p in inner.points() {
            let gi = g.bx().index_of(&p).expect("window inside box");
            if g.occupied(gi) {
                let deg = g.degree(gi);
                let hi = halo.index_of(&p).expect("inner inside halo");
                mu[hi] = deg;
                if deg > 0 {
                    inv_mu[hi] = T::one() / T::of(deg as f64);
                }
            }
        }
        let src = halo.index_of(x).expect("source inside window");
        Ok(Self { source: *x, inner, halo, inv_mu, mu, src })
    }

    /// Calls `visit(k, p_k, mass_k)` for `k = 0..=horizon`.
    fn run(&self, horizon: usize, mut visit: impl FnMut(usize, &[T], f64)) {
        let n = self.halo.volume();
        let d = self.halo.dim();
        let offs: Vec<usize> = (0..d).map(|k| self.halo.stride(k)).collect();
        let mut cur = vec![T::zero(); n];
        let mut next = vec![T::zero(); n];
        cur[self.src] = self.inv_mu[self.src];
        visit(0, &cur, cur[self.src].as_f64() * self.mu[self.src] as f64);
        for k in 1..=horizon {
            let sub = LatticeBox::centered(&self.source, k as u64)
                .expect("valid radius")
                .intersect(&self.inner)
                .expect("source inside window");
            let rows = runs(&self.halo, &sub);
            let (c, nx, im, mu) = (&cur[..], &mut next[..], &self.inv_mu[..], &self.mu[..]);
            let mass = match d {
                1 => update_rows::<T, 1>(c, nx, im, mu, &offs, &rows),
                2 => update_rows::<T, 2>(c, nx, im, mu, &offs, &rows),
                3 => update_rows::<T, 3>(c, nx, im, mu, &offs, &rows),
                4 => update_rows::<T, 4>(c, nx, im, mu, &offs, &rows),
                5 => update_rows::<T, 5>(c, nx, im, mu, &offs, &rows),
                6 => update_rows::<T, 6>(c, nx, im, mu, &offs, &rows),
                7 => update_rows::<T, 7>(c, nx, im, mu, &offs, &rows),
                _ => update_rows::<T, 8>(c, nx, im, mu, &offs, &rows),
            };
            std::mem::swap(&mut cur, &mut next);
            visit(k, &cur, mass);
        }
    }
}

/// Discrete-time kernel `p_k(x, .)` for selected steps `k <= horizon`.
#[derive(Clone, Debug)]
pub struct WalkKernel<T> {
    pub source: Point,
    pub horizon: usize,
    /// Sites where values are stored (the walk window).
    pub window: LatticeBox,
    /// True if the kernel equals the infinite-graph kernel: the window has
    /// radius at least `horizon` and stays off the faces of the box.
    pub safe: bool,
    /// `sum_y p_k(x, y) mu_y` for every `k = 0..=horizon`.
    pub mass: Vec<f64>,
    grid: LatticeBox,
    steps: Vec<usize>,
    values: Vec<Vec<T>>,
}

impl<T: Real> WalkKernel<T> {
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    fn slot(&self, k: usize) -> Option<usize> {
        self.steps.binary_search(&k).ok()
    }

    pub fn has_step(&self, k: usize) -> bool {
        self.slot(k).is_some()
    }

    /// `p_k(x, y)`; `None` if step `k` is not stored or `y` is outside the
    /// window.
    pub fn value(&self, k: usize, y: &Point) -> Option<T> {
        let s = self.slot(k)?;
        if !self.window.contains(y) {
            return None;
        }
        Some(self.values[s][self.grid.index_of(y)?])
    }

    /// `p_t(x, y) + p_{t+1}(x, y)`.
    pub fn pair(&self, t: usize, y: &Point) -> Option<T> {
        Some(self.value(t, y)? + self.value(t + 1, y)?)
    }

    /// Nonzero values of step `k` as `(site, p_k(x, site))`.
    pub fn support(&self, k: usize) -> Vec<(Point, T)> {
        let Some(s) = self.slot(k) else { return Vec::new() };
        self.window
            .points()
            .filter_map(|p| {
                let v = self.values[s][self.grid.index_of(&p).expect("window inside grid")];
                (v != T::zero()).then_some((p, v))
            })
            .collect()
    }

    /// Largest `|sum_y p_k mu_y - 1|` over all steps.
    pub fn mass_error(&self) -> f64 {
        self.mass.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Exact kernel with every step `0..=n` stored.
pub fn exact_kernel<T: Real>(g: &Subgraph, x: &Point, n: usize) -> Result<WalkKernel<T>> {
    let steps: Vec<usize> = (0..=n).collect();
    kernel_steps(g, x, n, &steps, None)
}

/// Kernel up to `horizon`, storing only `steps`. `radius` limits the window
/// (default `horizon`); mass leaving a smaller window is lost.
pub fn kernel_steps<T: Real>(
    g: &Subgraph,
    x: &Point,
    horizon: usize,
    steps: &[usize],
    radius: Option<u64>,
) -> Result<WalkKernel<T>> {
    let mut steps = steps.to_vec();
    steps.sort_unstable();
    steps.dedup();
    if steps.last().is_some_and(|&k| k > horizon) {
        return invalid(format!("requested step beyond horizon {horizon}"));
    }
    let radius = radius.unwrap_or(horizon as u64).max(1);
    let prop = Propagator::<T>::new(g, x, radius)?;
    let mut values = Vec::with_capacity(steps.len());
    let mut mass = Vec::with_capacity(horizon + 1);
    let mut next = 0;
    prop.run(horizon, |k, p, m| {
        mass.push(m);
        if next < steps.len() && steps[next] == k {
            values.push(p.to_vec());
            next += 1;
        }
    });
    let safe = radius >= horizon as u64 && clear_of_faces(g.bx(), x, horizon as u64);
    Ok(WalkKernel { source: *x, horizon, window: prop.inner, safe, mass, grid: prop.halo, steps, values })
}

/// Poisson(t) weights `w_0..=w_K` with `K` minimal such that the neglected
/// tail is below `tol`; returns the weights and that tail.
pub fn poisson_weights(t: f64, tol: f64) -> Result<(Vec<f64>, f64)> {
    if !(tol > 0.0 && tol < 1.0) {
        return invalid(format!("tolerance {tol} must lie in (0, 1)"));
    }
    if !(t >= 0.0 && t.is_finite()) {
        return invalid(format!("time {t} must be finite and nonnegative"));
    }
    if t == 0.0 {
        return Ok((vec![1.0], 0.0));
    }
    let kmax = (t + 40.0 * t.sqrt() + 60.0).ceil() as usize;
    let lt = t.ln();
    let mut w = Vec::with_capacity(kmax + 1);
    let mut lf = 0.0;
    for k in 0..=kmax {
        if k > 0 {
            lf += (k as f64).ln();
        }
        w.push((-t + k as f64 * lt - lf).exp());
    }
    let mut tail = 0.0;
    let mut cut = kmax;
    for k in (0..=kmax).rev() {
        if tail + w[k] >= tol {
            cut = k;
            break;
        }
        tail += w[k];
    }
    w.truncate(cut + 1);
    Ok((w, tail))
}

/// Continuous-time kernel `q_t(x, .)` of the constant-speed walk.
#[derive(Clone, Debug)]
pub struct CtKernel<T> {
    pub source: Point,
    pub t: f64,
    /// Number of jumps kept in the Poisson mixture.
    pub horizon: usize,
    /// Poisson mass beyond `horizon`.
    pub tail: f64,
    pub safe: bool,
    pub window: LatticeBox,
    /// `sum_y q_t(x, y) mu_y`.
    pub mass: f64,
    grid: LatticeBox,
    values: Vec<T>,
}

impl<T: Real> CtKernel<T> {
    pub fn value(&self, y: &Point) -> Option<T> {
        if !self.window.contains(y) {
            return None;
        }
        Some(self.values[self.grid.index_of(y)?])
    }
}

/// `q_t = sum_k e^{-t} t^k / k! p_k`, truncated once the Poisson tail is
/// below `tol`.
pub fn ct_kernel<T: Real>(g: &Subgraph, x: &Point, t: f64, tol: f64) -> Result<CtKernel<T>> {
    let (w, tail) = poisson_weights(t, tol)?;
    let horizon = w.len() - 1;
    let prop = Propagator::<T>::new(g, x, horizon as u64)?;
    let mut q = vec![T::zero(); prop.halo.volume()];
    let mut mass = 0.0;
    prop.run(horizon, |k, p, m| {
        let wk = T::of(w[k]);
        q.iter_mut().zip(p).for_each(|(a, &b)| *a += wk * b);
        mass += w[k] * m;
    });
    Ok(CtKernel {
        source: *x,
        t,
        horizon,
        tail,
        safe: clear_of_faces(g.bx(), x, horizon as u64),
        window: prop.inner,
        mass,
        grid: prop.halo,
        values: q,
    })
}

/// Distance used in Gaussian envelopes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distance {
    /// Graph distance in the occupied subgraph.
    Chemical,
    /// l1 distance in the full lattice.
    Lattice,
}

/// One side of a fitted envelope `A t^{-d/2} exp(-c D^2 / t)` and the pair
/// where it is tight.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBound {
    pub amplitude: f64,
    pub rate: f64,
    pub source: Point,
    pub site: Point,
    pub time: usize,
}

/// Diagonal value that increased from an earlier to a later time.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeViolation {
    pub source: Point,
    pub earlier: usize,
    pub later: usize,
    pub earlier_value: f64,
    pub later_value: f64,
}

/// Upper and lower Gaussian envelopes of `F_t = p_t + p_{t+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvelopeFit {
    pub distance: Distance,
    pub eps: f64,
    /// `(C1, C2)` over pairs with `t >= D`.
    pub upper: Option<GaussianBound>,
    /// `(C3, C4)` over pairs with `t >= D^{1+eps}`.
    pub lower: Option<GaussianBound>,
    pub upper_pairs: usize,
    pub lower_pairs: usize,
    /// Fraction of pairs with `F_t > 0` admissible for the upper bound.
    pub coverage: f64,
    pub violations: Vec<ShapeViolation>,
}

/// Geometric grid for the exponential rates.
pub fn rate_grid() -> Vec<f64> {
    const POINTS: usize = 81;
    (0..POINTS).map(|j| 1e-3 * 10f64.powf(4.0 * j as f64 / (POINTS - 1) as f64)).collect()
}

struct EnvPoint {
    s: f64,
    a: f64,
    source: usize,
    site: Point,
    time: usize,
}

/// Amplitude allowance over the best achievable amplitude when choosing
/// the envelope rate.
pub const AMPLITUDE_SLACK: f64 = 1.1;

/// Envelope `ln A + c s` over points `a_i` (with `s = D^2/t` and
/// `a = ln F + (d/2) ln t`). The upper side takes the largest grid rate whose
/// amplitude stays within `AMPLITUDE_SLACK` of the minimal one; the lower
/// side takes the smallest grid rate whose amplitude is within that factor
/// of the maximal one. Returns `(A, c, index of the tight point)`.
fn fit_side(pts: &[&EnvPoint], upper: bool) -> Option<(f64, f64, usize)> {
    if pts.is_empty() {
        return None;
    }
    let envelope = |c: f64| {
        let mut ext = if upper { f64::NEG_INFINITY } else { f64::INFINITY };
        let mut arg = 0;
        for (i, p) in pts.iter().enumerate() {
            let v = p.a + c * p.s;
            if (upper && v > ext) || (!upper && v < ext) {
                ext = v;
                arg = i;
            }
        }
        (ext, arg)
    };
    let grid = rate_grid();
    let slack = AMPLITUDE_SLACK.ln();
    let pick = if upper {
        let best = envelope(grid[0]).0;
        grid.iter().rev().find(|&&c| envelope(c).0 <= best + slack)
    } else {
        let best = envelope(*grid.last().expect("nonempty grid")).0;
        grid.iter().find(|&&c| envelope(c).0 >= best - slack)
    };
    let c = *pick.expect("the extreme grid rate qualifies");
    let (ext, arg) = envelope(c);
    Some((ext.exp(), c, arg))
}

/// Fits Gaussian envelopes to the discrete kernels of `kernels` at `times`.
pub fn envelope_check<T: Real>(
    g: &Subgraph,
    kernels: &[&WalkKernel<T>],
    times: &[usize],
    distance: Distance,
    eps: f64,
) -> Result<EnvelopeFit> {
    if !(eps > 0.0 && eps <= 0.5) {
        return invalid(format!("eps = {eps} must lie in (0, 1/2]"));
    }
    let d = g.dim() as f64;
    let mut pts = Vec::new();
    let mut positive = 0usize;
    let mut violations = Vec::new();
    let tmax = times.iter().copied().max().unwrap_or(0);
    let mut bfs = Bfs::new(g.bx());
    for (ki, ker) in kernels.iter().enumerate() {
        for &t in times {
            if !ker.has_step(t) || !ker.has_step(t + 1) {
                return invalid(format!("kernel from {} lacks steps {t}, {}", ker.source, t + 1));
            }
        }
        let src = source_index(g, &ker.source)?;
        if distance == Distance::Chemical {
            bfs.run(g, src, (tmax + 1) as u32, |_| true);
        }
        let mut sorted = times.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for w in sorted.windows(2) {
            let a = ker.pair(w[0], &ker.source).expect("stored").as_f64();
            let b = ker.pair(w[1], &ker.source).expect("stored").as_f64();
            if b > a * (1.0 + 1e-12) {
                violations.push(ShapeViolation {
                    source: ker.source,
                    earlier: w[0],
                    later: w[1],
                    earlier_value: a,
                    later_value: b,
                });
            }
        }
        for p in ker.window.points() {
            let dist = match distance {
                Distance::Lattice => Some(p.l1(&ker.source)),
                Distance::Chemical => g.bx().index_of(&p).and_then(|i| bfs.distance(i)).map(u64::from),
            };
            let Some(dist) = dist else { continue };
            for &t in times {
                let f = ker.pair(t, &p).expect("stored").as_f64();
                if f <= 0.0 {
                    continue;
                }
                positive += 1;
                let tf = t as f64;
                let df = dist as f64;
                pts.push((
                    df <= tf,
                    tf >= df.powf(1.0 + eps),
                    EnvPoint { s: df * df / tf.max(1.0), a: f.ln() + 0.5 * d * tf.max(1.0).ln(), source: ki, site: p, time: t },
                ));
            }
        }
    }
    let upper_pts: Vec<&EnvPoint> = pts.iter().filter(|p| p.0).map(|p| &p.2).collect();
    let lower_pts: Vec<&EnvPoint> = pts.iter().filter(|p| p.1).map(|p| &p.2).collect();
    let bound = |sel: &[&EnvPoint], upper: bool| {
        fit_side(sel, upper).map(|(amp, c, i)| GaussianBound {
            amplitude: amp,
            rate: c,
            source: kernels[sel[i].source].source,
            site: sel[i].site,
            time: sel[i].time,
        })
    };
    Ok(EnvelopeFit {
        distance,
        eps,
        upper: bound(&upper_pts, true),
        lower: bound(&lower_pts, false),
        upper_pairs: upper_pts.len(),
        lower_pairs: lower_pts.len(),
        coverage: if positive == 0 { 0.0 } else { upper_pts.len() as f64 / positive as f64 },
        violations,
    })
}

/// Dirichlet problem on a graph ball: harmonic in `B(y, R)`, prescribed on
/// the sphere at distance `R + 1`.
pub struct HarnackBall {
    pub centre: Point,
    pub radius: u64,
    system: DirichletSystem,
    /// Sorted box indices of the boundary sphere.
    pub boundary: Vec<usize>,
    /// Unknown slots inside `B(y, R/2)`.
    half: Vec<usize>,
}

/// Extremes of one harmonic extension on the half ball.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HarmonicExtremes {
    pub sup: f64,
    pub inf: f64,
    pub stats: SolveStats,
}

impl HarmonicExtremes {
    /// `sup / inf`, or `None` when `inf < 1e-12 sup`.
    pub fn ratio(&self) -> Option<f64> {
        (self.sup > 0.0 && self.inf >= 1e-12 * self.sup).then(|| self.sup / self.inf)
    }
}

impl HarnackBall {
    pub fn new(g: &Subgraph, y: &Point, r: u64) -> Result<Self> {
        if r == 0 {
            return invalid("Harnack radius must be positive");
        }
        let src = source_index(g, y)?;
        let mut bfs = Bfs::new(g.bx());
        let reach = u32::try_from(r + 1).map_err(|_| Error::TooLarge("radius".into()))?;
        let visited = bfs.run(g, src, reach, |_| true).to_vec();
        if visited.iter().any(|&i| g.bx().on_face(i)) {
            return Err(Error::OutOfBounds(format!("B({y}, {}) reaches a face of the box", r + 1)));
        }
        let mut interior = Vec::new();
        let mut boundary = Vec::new();
        for &i in &visited {
            if bfs.distance(i).expect("visited") as u64 <= r {
                interior.push(i);
            } else {
                boundary.push(i);
            }
        }
        boundary.sort_unstable();
        if boundary.is_empty() {
            return Err(Error::NotApplicable(format!(
                "B({y}, {r}) exhausts its component; the Dirichlet system is singular"
            )));
        }
        let half_r = (r / 2) as u32;
        let system = DirichletSystem::new(g, interior)?;
        let half = system
            .unknowns
            .iter()
            .enumerate()
            .filter(|(_, &i)| bfs.distance(i).expect("visited") <= half_r)
            .map(|(k, _)| k)
            .collect();
        Ok(Self { centre: *y, radius: r, system, boundary, half })
    }

    pub fn interior_len(&self) -> usize {
        self.system.len()
    }

    /// Solves with boundary values `data(box_index)` and returns sup and inf
    /// of the solution on `B(y, R/2)`.
    pub fn extend<T: Real>(&self, g: &Subgraph, data: impl Fn(usize) -> f64) -> Result<HarmonicExtremes> {
        let floor = self.boundary.iter().map(|&i| data(i)).fold(f64::INFINITY, f64::min);
        if floor < 0.0 {
            return invalid("boundary data must be nonnegative");
        }
        let b: Vec<T> = self.system.rhs(g, |j| T::of(data(j) - floor));
        let max_iter = 50 * self.system.len() + 100;
        let (v, stats) = self.system.solve(&b, solver_tol::<T>(), max_iter)?;
        let mut sup = f64::NEG_INFINITY;
        let mut inf = f64::INFINITY;
        for &k in &self.half {
            let u = floor + v[k].as_f64();
            sup = sup.max(u);
            inf = inf.min(u);
        }
        Ok(HarmonicExtremes { sup, inf, stats })
    }
}

/// Boundary-data family used in a Harnack trial.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryFamily {
    /// Independent uniforms on `[0, 1]`.
    Uniform,
    /// Indicator of a random half-space through the centre.
    HalfSpace,
    /// Indicator of one random boundary site.
    Point,
}

impl BoundaryFamily {
    pub const ALL: [BoundaryFamily; 3] = [BoundaryFamily::Uniform, BoundaryFamily::HalfSpace, BoundaryFamily::Point];

    pub fn name(self) -> &'static str {
        match self {
            BoundaryFamily::Uniform => "uniform",
            BoundaryFamily::HalfSpace => "halfspace",
            BoundaryFamily::Point => "point",
        }
    }
}

/// Worst observed `sup / inf` over one family.
#[derive(Clone, Debug, PartialEq)]
pub struct FamilyRatio {
    pub family: BoundaryFamily,
    pub trials: usize,
    pub max_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HarnackReport {
    pub centre: Point,
    pub radius: u64,
    pub interior: usize,
    pub boundary: usize,
    pub trials: usize,
    /// Maximum over all retained trials.
    pub max_ratio: Option<f64>,
    pub families: Vec<FamilyRatio>,
    /// Trials dropped because `inf < 1e-12 sup`.
    pub excluded: usize,
    /// Exact supremum of `sup / inf` over all nonnegative boundary data:
    /// every such solution is a nonnegative combination of the single-site
    /// solutions, so the worst case is a single-site indicator.
    pub worst: Option<f64>,
    pub worst_site: Option<Point>,
    /// Boundary sites whose indicator was dropped by the `1e-12` rule.
    pub worst_excluded: usize,
}

impl HarnackReport {
    /// Worst ratio under single-site indicator data.
    pub fn point_ratio(&self) -> Option<f64> {
        self.families.iter().find(|f| f.family == BoundaryFamily::Point).and_then(|f| f.max_ratio)
    }
}

/// Harmonic extensions of random nonnegative boundary data; trial `j` uses
/// family `j mod 3` in the order uniform, half-space, point.
pub fn harnack_ratio<T: Real>(g: &Subgraph, y: &Point, r: u64, trials: usize, seed: u64) -> Result<HarnackReport> {
    let ball = HarnackBall::new(g, y, r)?;
    let bx = *g.bx();
    let dim = g.dim();
    let outcomes: Vec<(BoundaryFamily, Option<f64>)> = (0..trials)
        .into_par_iter()
        .map(|j| {
            let family = BoundaryFamily::ALL[j % 3];
            let mut rng = trajectory_stream(seed, j as u64);
            let ext = match family {
                BoundaryFamily::Uniform => {
                    let vals: Vec<f64> = ball.boundary.iter().map(|_| rng.gen::<f64>()).collect();
                    let lookup = |i: usize| ball.boundary.binary_search(&i).map(|k| vals[k]).unwrap_or(0.0);
                    ball.extend::<T>(g, lookup)?
                }
                BoundaryFamily::HalfSpace => {
                    let theta: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                    ball.extend::<T>(g, |i| {
                        let p = bx.point_of(i);
                        let dot: f64 = (0..dim).map(|k| (p[k] - y[k]) as f64 * theta[k]).sum();
                        if dot >= 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    })?
                }
                BoundaryFamily::Point => {
                    let b = ball.boundary[rng.gen_range(0..ball.boundary.len())];
                    ball.extend::<T>(g, |i| if i == b { 1.0 } else { 0.0 })?
                }
            };
            Ok((family, ext.ratio()))
        })
        .collect::<Result<_>>()?;
    let mut families: Vec<FamilyRatio> =
        BoundaryFamily::ALL.iter().map(|&f| FamilyRatio { family: f, trials: 0, max_ratio: None }).collect();
    let mut excluded = 0;
    for (f, ratio) in &outcomes {
        let slot = &mut families[*f as usize];
        slot.trials += 1;
        match ratio {
            Some(q) => slot.max_ratio = Some(slot.max_ratio.map_or(*q, |m: f64| m.max(*q))),
            None => excluded += 1,
        }
    }
    let max_ratio = families.iter().filter_map(|f| f.max_ratio).reduce(f64::max);
    let scan: Vec<(usize, Option<f64>)> = ball
        .boundary
        .par_iter()
        .map(|&b| Ok((b, ball.extend::<T>(g, |i| if i == b { 1.0 } else { 0.0 })?.ratio())))
        .collect::<Result<_>>()?;
    let worst_excluded = scan.iter().filter(|s| s.1.is_none()).count();
    let top = scan.iter().filter_map(|&(b, q)| q.map(|q| (q, b))).reduce(|a, b| if b.0 > a.0 { b } else { a });
    Ok(HarnackReport {
        worst: top.map(|t| t.0),
        worst_site: top.map(|t| bx.point_of(t.1)),
        worst_excluded,
        centre: *y,
        radius: r,
        interior: ball.interior_len(),
        boundary: ball.boundary.len(),
        trials,
        max_ratio,
        families,
        excluded,
    })
}

/// Green function `g(., y)` of the walk killed on leaving `B_inf(y, guard)`.
#[derive(Clone, Debug)]
pub struct GreenField<T> {
    pub source: Point,
    pub guard: LatticeBox,
    pub stats: SolveStats,
    values: Vec<T>,
}

impl<T: Real> GreenField<T> {
    /// `g(x, y)`; zero for sites of the guard box not connected to `y`
    /// inside it, `None` outside the guard box.
    pub fn value(&self, x: &Point) -> Option<f64> {
        Some(self.values[self.guard.index_of(x)?].as_f64())
    }
}

/// Solves `L g(., y) = e_y` on the component of `y` inside the guard box,
/// with zero values outside it.
pub fn green_field<T: Real>(g: &Subgraph, y: &Point, guard: u64) -> Result<GreenField<T>> {
    green_field_in(g, y, &LatticeBox::centered(y, guard)?)
}

/// Green function of the walk killed on leaving `region`.
pub fn green_field_in<T: Real>(g: &Subgraph, y: &Point, region: &LatticeBox) -> Result<GreenField<T>> {
    if g.dim() < 3 {
        return Err(Error::NotApplicable(format!("the walk is recurrent in d = {}", g.dim())));
    }
    let src = source_index(g, y)?;
    let gbox = *region;
    if !gbox.contains(y) {
        return Err(Error::OutOfBounds(format!("{y} outside the killing region")));
    }
    if !g.bx().contains_box(&gbox.grow(1)?) {
        return Err(Error::OutOfBounds(format!("guard box {gbox:?} (plus one layer) leaves {:?}", g.bx())));
    }
    let bx = *g.bx();
    let mut bfs = Bfs::new(g.bx());
    let mut unknowns = bfs.run(g, src, u32::MAX, |j| gbox.contains(&bx.point_of(j))).to_vec();
    unknowns.sort_unstable();
    let sys = DirichletSystem::new(g, unknowns)?;
    let mut b = vec![T::zero(); sys.len()];
    b[sys.slot(src).expect("source is an unknown")] = T::one();
    let max_iter = 50 * sys.len() + 100;
    let (v, stats) = sys.solve(&b, solver_tol::<T>(), max_iter)?;
    let mut values = vec![T::zero(); gbox.volume()];
    for (k, &i) in sys.unknowns.iter().enumerate() {
        values[gbox.index_of(&bx.point_of(i)).expect("inside guard")] = v[k];
    }
    Ok(GreenField { source: *y, guard: gbox, stats, values })
}

/// Green function value with a guard-sensitivity estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct GreenEstimate {
    pub value: f64,
    /// Value recomputed with twice the guard, when the box allows it.
    pub doubled: Option<f64>,
}

impl GreenEstimate {
    /// Relative change when doubling the guard.
    pub fn sensitivity(&self) -> Option<f64> {
        self.doubled.map(|v2| (v2 - self.value).abs() / v2.abs().max(f64::MIN_POSITIVE))
    }

    /// First-order extrapolation `2 g_{2R} - g_R` for a killing bias of
    /// order `1/R`.
    pub fn extrapolated(&self) -> Option<f64> {
        self.doubled.map(|v2| 2.0 * v2 - self.value)
    }
}

/// `g(x, y)` for the walk killed outside `B_inf(y, guard)`.
pub fn green<T: Real>(g: &Subgraph, x: &Point, y: &Point, guard: u64) -> Result<GreenEstimate> {
    let field = green_field::<T>(g, y, guard)?;
    let value = field
        .value(x)
        .ok_or_else(|| Error::OutOfBounds(format!("{x} outside the guard box around {y}")))?;
    let doubled = match green_field::<T>(g, y, 2 * guard) {
        Ok(f) => f.value(x),
        Err(Error::OutOfBounds(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(GreenEstimate { value, doubled })
}

/// Empirical covariance of `(X_n - x0) / sqrt(n)` over independent walks.
#[derive(Clone, Debug, PartialEq)]
pub struct QipStats {
    pub source: Point,
    pub n: usize,
    pub trials: usize,
    pub dim: usize,
    /// Row-major `d x d` covariance.
    pub sigma: Vec<f64>,
    /// Standard errors of the covariance entries.
    pub se: Vec<f64>,
    pub endpoints: Vec<Point>,
}

impl QipStats {
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.sigma[i * self.dim + j]
    }

    pub fn se_entry(&self, i: usize, j: usize) -> f64 {
        self.se[i * self.dim + j]
    }

    /// Largest `|sigma_ij| / se_ij` over off-diagonal entries.
    pub fn max_offdiag_z(&self) -> f64 {
        let mut z: f64 = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                if i != j {
                    z = z.max(self.entry(i, j).abs() / self.se_entry(i, j));
                }
            }
        }
        z
    }

    /// `(max - min) / mean` of the diagonal.
    pub fn diag_spread(&self) -> f64 {
        let diag: Vec<f64> = (0..self.dim).map(|i| self.entry(i, i)).collect();
        let mx = diag.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mn = diag.iter().copied().fold(f64::INFINITY, f64::min);
        (mx - mn) / (diag.iter().sum::<f64>() / self.dim as f64)
    }

    /// Mean of the diagonal entries.
    pub fn sigma2(&self) -> f64 {
        (0..self.dim).map(|i| self.entry(i, i)).sum::<f64>() / self.dim as f64
    }

    /// Largest entrywise deviation from `s * I`.
    pub fn max_deviation(&self, s: f64) -> f64 {
        let mut dev: f64 = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                let target = if i == j { s } else { 0.0 };
                dev = dev.max((self.entry(i, j) - target).abs());
            }
        }
        dev
    }
}

/// Runs one walk of `n` steps from box index `start`.
pub fn walk_path(g: &Subgraph, start: usize, n: usize, rng: &mut impl Rng) -> usize {
    let mut cur = start;
    let mut nb = [0usize; 2 * MAX_DIM];
    for _ in 0..n {
        let mut k = 0;
        g.for_each_neighbor(cur, |j| {
            nb[k] = j;
            k += 1;
        });
        if k == 0 {
            break;
        }
        cur = nb[rng.gen_range(0..k)];
    }
    cur
}

pub fn qip_stats(g: &Subgraph, x0: &Point, n: usize, trials: usize, seed: u64) -> Result<QipStats> {
    if n == 0 || trials < 2 {
        return invalid("qip_stats needs n >= 1 and at least two trials");
    }
    let src = source_index(g, x0)?;
    if !clear_of_faces(g.bx(), x0, n as u64) {
        return Err(Error::OutOfBounds(format!("horizon {n} reaches a face from {x0}")));
    }
    let bx = *g.bx();
    let endpoints: Vec<Point> = (0..trials)
        .into_par_iter()
        .map(|j| {
            let mut rng = trajectory_stream(seed, j as u64);
            bx.point_of(walk_path(g, src, n, &mut rng))
        })
        .collect();
    let d = g.dim();
    let scale = (n as f64).sqrt();
    let z: Vec<Vec<f64>> = endpoints.iter().map(|p| (0..d).map(|k| (p[k] - x0[k]) as f64 / scale).collect()).collect();
    let m = trials as f64;
    let mean: Vec<f64> = (0..d).map(|k| z.iter().map(|v| v[k]).sum::<f64>() / m).collect();
    let mut sigma = vec![0.0; d * d];
    let mut se = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let prods: Vec<f64> = z.iter().map(|v| (v[i] - mean[i]) * (v[j] - mean[j])).collect();
            let c = prods.iter().sum::<f64>() / (m - 1.0);
            let var = prods.iter().map(|p| (p - c) * (p - c)).sum::<f64>() / (m - 1.0);
            sigma[i * d + j] = c;
            se[i * d + j] = (var / m).sqrt();
        }
    }
    Ok(QipStats { source: *x0, n, trials, dim: d, sigma, se, endpoints })
}

/// Which rescaled kernel a local-CLT comparison uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelKind {
    /// `p_{floor(s)} + p_{floor(s)+1}`, constant 2.
    Discrete,
    /// `q_s`, constant 1.
    Continuous,
}

impl KernelKind {
    pub fn constant(self) -> f64 {
        match self {
            KernelKind::Discrete => 2.0,
            KernelKind::Continuous => 1.0,
        }
    }
}

/// Where the rescaled error is evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CltGrid {
    /// Every cluster site `y` with `|y - x0| <= radius sqrt(n)`, compared
    /// against the extremes of the Gaussian over the unit cell around `y`.
    /// On the full lattice this is the exact supremum over real `x`.
    Cells,
    /// Fixed grid of real points with the given spacing, each mapped to its
    /// closest cluster site.
    Fixed(f64),
}

/// Grid and window settings of a local-CLT check.
#[derive(Clone, Debug, PartialEq)]
pub struct CltOptions {
    /// Rescaled points `x` range over `|x| <= radius`.
    pub radius: f64,
    pub grid: CltGrid,
    /// Window radius in units of `sqrt(horizon)`.
    pub window_sds: f64,
    pub kind: KernelKind,
}

impl Default for CltOptions {
    fn default() -> Self {
        Self { radius: 2.0, grid: CltGrid::Cells, window_sds: 8.0, kind: KernelKind::Discrete }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CltRow {
    pub n: usize,
    pub t: f64,
    /// `sup_x |n^{d/2} F_{nt}(x0, g_n(x)) - (C/m) k_{Sigma,t}(x)|`.
    pub sup_error: f64,
    /// Grid point attaining the supremum.
    pub at: Vec<f64>,
    /// Mass lost through the window edge by the last step used.
    pub leaked: f64,
}

/// Gaussian density with covariance `t Sigma`.
pub fn gaussian_kernel(sigma: &[f64], t: f64, x: &[f64]) -> Result<f64> {
    let d = x.len();
    if sigma.len() != d * d {
        return Err(Error::DimensionMismatch { expected: d * d, got: sigma.len() });
    }
    let s = DMatrix::from_row_slice(d, d, sigma);
    let det = s.determinant();
    let inv = s.try_inverse().filter(|_| det > 0.0).ok_or_else(|| Error::InvalidArgument("covariance is not positive definite".into()))?;
    let mut q = 0.0;
    for i in 0..d {
        for j in 0..d {
            q += x[i] * inv[(i, j)] * x[j];
        }
    }
    Ok((2.0 * std::f64::consts::PI * t).powf(-(d as f64) / 2.0) / det.sqrt() * (-q / (2.0 * t)).exp())
}

fn grid_points(dim: usize, radius: f64, step: f64) -> Vec<Vec<f64>> {
    let m = (radius / step).floor() as i64;
    let mut out = Vec::new();
    let total = (2 * m + 1).pow(dim as u32);
    for code in 0..total {
        let mut c = code;
        let mut v = Vec::with_capacity(dim);
        for _ in 0..dim {
            v.push(((c % (2 * m + 1)) - m) as f64 * step);
            c /= 2 * m + 1;
        }
        if v.iter().map(|a| a * a).sum::<f64>() <= radius * radius + 1e-12 {
            out.push(v);
        }
    }
    out
}

/// Rescaled corners of the unit cell around `y` together with the cell
/// point nearest to `x0`.
fn cell_probes(x0: &Point, y: &Point, sn: f64) -> Vec<Vec<f64>> {
    let d = y.dim();
    let rel: Vec<f64> = (0..d).map(|k| (y[k] - x0[k]) as f64).collect();
    let mut out = Vec::with_capacity((1 << d) + 1);
    out.push(rel.iter().map(|&r| (r - r.clamp(-0.5, 0.5)) / sn).collect());
    for mask in 0..1u32 << d {
        out.push((0..d).map(|k| (rel[k] + if mask >> k & 1 == 1 { 0.5 } else { -0.5 }) / sn).collect());
    }
    out
}

/// Closest member of `member` to the real point `z`; ties go to the
/// lexicographically smallest site.
fn closest_member(bx: &LatticeBox, member: &[bool], z: &[f64]) -> Option<Point> {
    let d = z.len();
    let centre = Point::new(&z.iter().map(|v| v.round() as i64).collect::<Vec<_>>()).ok()?;
    let dist2 = |p: &Point| (0..d).map(|k| (p[k] as f64 - z[k]).powi(2)).sum::<f64>();
    let mut best: Option<(f64, Point)> = None;
    let mut limit = u64::MAX;
    let max_shell = bx.sides().iter().copied().max().unwrap_or(0);
    for s in 0..=max_shell {
        if s > limit {
            break;
        }
        let shell = LatticeBox::centered(&centre, s).ok()?;
        for p in shell.points().filter(|p| p.linf(&centre) == s) {
            if bx.index_of(&p).is_some_and(|i| member[i]) {
                let d2 = dist2(&p);
                if best.is_none_or(|(b, q)| d2 < b || (d2 == b && p < q)) {
                    best = Some((d2, p));
                }
            }
        }
        if best.is_some() && limit == u64::MAX {
            limit = ((s as f64 + 1.0) * (d as f64).sqrt()).ceil() as u64;
        }
    }
    best.map(|(_, p)| p)
}

/// Compares rescaled kernels from `x0` with `(C/m) k_{Sigma,t}` on a grid of
/// rescaled points, for each `n` and `t`.
pub fn local_clt_check<T: Real>(
    g: &Subgraph,
    x0: &Point,
    ns: &[usize],
    times: &[f64],
    sigma: &[f64],
    m: f64,
    opts: &CltOptions,
) -> Result<Vec<CltRow>> {
    if times.iter().any(|&t| !(t > 0.0)) || m <= 0.0 {
        return invalid("times and m must be positive");
    }
    let src = source_index(g, x0)?;
    let d = g.dim();
    let bx = *g.bx();
    let mut member = vec![false; bx.volume()];
    let mut bfs = Bfs::new(&bx);
    for &i in bfs.run(g, src, u32::MAX, |_| true) {
        member[i] = true;
    }
    let mut rows = Vec::new();
    for &n in ns {
        let sn = (n as f64).sqrt();
        // (site, rescaled points whose Gaussian extremes bound the cell)
        let probes: Vec<(Point, Vec<Vec<f64>>)> = match opts.grid {
            CltGrid::Fixed(step) => grid_points(d, opts.radius, step)
                .into_iter()
                .map(|x| {
                    let z: Vec<f64> = (0..d).map(|k| x0[k] as f64 + sn * x[k]).collect();
                    closest_member(&bx, &member, &z)
                        .map(|y| (y, vec![x]))
                        .ok_or_else(|| Error::OutOfBounds("no cluster site near a grid point".into()))
                })
                .collect::<Result<_>>()?,
            CltGrid::Cells => {
                let reach = (opts.radius * sn).floor() as u64;
                let around = LatticeBox::centered(x0, reach)?;
                around
                    .points()
                    .filter(|y| y.l2(x0) <= opts.radius * sn && bx.index_of(y).is_some_and(|i| member[i]))
                    .map(|y| (y, cell_probes(x0, &y, sn)))
                    .collect()
            }
        };
        let sample_at = |vals: &dyn Fn(&Point) -> Option<f64>, t: f64| -> Result<CltRow> {
            let mut sup = 0.0;
            let mut at = vec![0.0; d];
            for (y, xs) in &probes {
                let f = vals(y).ok_or_else(|| Error::OutOfBounds(format!("{y} outside the kernel window")))?;
                let v = sn.powi(d as i32) * f;
                for x in xs {
                    let gauss = opts.kind.constant() / m * gaussian_kernel(sigma, t, x)?;
                    let err = (v - gauss).abs();
                    if err > sup {
                        sup = err;
                        at = x.clone();
                    }
                }
            }
            Ok(CltRow { n, t, sup_error: sup, at, leaked: 0.0 })
        };
        match opts.kind {
            KernelKind::Discrete => {
                let steps: Vec<usize> =
                    times.iter().flat_map(|&t| { let s = (n as f64 * t).floor() as usize; [s, s + 1] }).collect();
                let horizon = *steps.iter().max().expect("nonempty");
                let radius = window_radius(horizon, opts, sn);
                let ker = kernel_steps::<T>(g, x0, horizon, &steps, Some(radius))?;
                for &t in times {
                    let s = (n as f64 * t).floor() as usize;
                    let mut row = sample_at(&|y: &Point| ker.pair(s, y).map(|v| v.as_f64()), t)?;
                    row.leaked = 1.0 - ker.mass[s + 1];
                    rows.push(row);
                }
            }
            KernelKind::Continuous => {
                for &t in times {
                    let ct = ct_window::<T>(g, x0, n as f64 * t, 1e-14, opts, sn)?;
                    let mut row = sample_at(&|y: &Point| ct.value(y).map(|v| v.as_f64()), t)?;
                    row.leaked = 1.0 - ct.tail - ct.mass;
                    rows.push(row);
                }
            }
        }
    }
    Ok(rows)
}

fn window_radius(horizon: usize, opts: &CltOptions, sn: f64) -> u64 {
    let spread = (opts.window_sds * (horizon as f64).sqrt()).ceil();
    let reach = (opts.radius * sn).ceil() + 2.0;
    (spread.max(reach) as u64).min(horizon as u64).max(1)
}

fn ct_window<T: Real>(g: &Subgraph, x: &Point, t: f64, tol: f64, opts: &CltOptions, sn: f64) -> Result<CtKernel<T>> {
    let (w, tail) = poisson_weights(t, tol)?;
    let horizon = w.len() - 1;
    let prop = Propagator::<T>::new(g, x, window_radius(horizon, opts, sn))?;
    let mut q = vec![T::zero(); prop.halo.volume()];
    let mut mass = 0.0;
    prop.run(horizon, |k, p, m| {
        let wk = T::of(w[k]);
        q.iter_mut().zip(p).for_each(|(a, &b)| *a += wk * b);
        mass += w[k] * m;
    });
    Ok(CtKernel { source: *x, t, horizon, tail, safe: false, window: prop.inner, mass, grid: prop.halo, values: q })
}

/// Target site `y` of the gradient estimate.
#[derive(Clone, Debug, PartialEq)]
pub enum GradientTarget {
    Fixed(Point),
    /// `y = x + round(sqrt(n) v)`, shifted by one along the first axis when
    /// needed to match the parity of `n`.
    Diffusive(Vec<f64>),
}

impl GradientTarget {
    pub fn site(&self, x: &Point, n: usize) -> Result<Point> {
        match self {
            GradientTarget::Fixed(y) => Ok(*y),
            GradientTarget::Diffusive(v) => {
                if v.len() != x.dim() {
                    return Err(Error::DimensionMismatch { expected: x.dim(), got: v.len() });
                }
                let sn = (n as f64).sqrt();
                let mut y = Point::new(&(0..v.len()).map(|k| x[k] + (sn * v[k]).round() as i64).collect::<Vec<_>>())?;
                if (y.l1(x) + n as u64) % 2 == 1 {
                    y = y.offset(0, 1);
                }
                Ok(y)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientPoint {
    pub n: usize,
    pub target: Point,
    pub estimate: f64,
    pub se: f64,
    /// Configurations where the indicator was one.
    pub included: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub points: Vec<GradientPoint>,
    /// Values of `n` skipped because `n <= max(|x - y|_1, |x' - y|_1)`.
    pub excluded: Vec<usize>,
    /// Least-squares slope of `ln estimate` against `ln n`.
    pub exponent: Option<f64>,
}

/// Least-squares slope of `ys` against `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 || xs.len() != ys.len() {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Monte-Carlo estimate of
/// `E[(p_n(x, y) - p_{n-1}(x', y))^2 ; y, x, x' in the largest cluster]`.
pub fn annealed_gradient(
    model: Model,
    x: &Point,
    x_prime: &Point,
    target: &GradientTarget,
    ns: &[usize],
    trials: usize,
    seed: u64,
) -> Result<GradientReport> {
    if trials == 0 {
        return invalid("trials must be positive");
    }
    if x.l1(x_prime) != 1 {
        return invalid(format!("{x} and {x_prime} are not lattice neighbours"));
    }
    let dim = x.dim();
    model.validate(dim)?;
    let mut used = Vec::new();
    let mut excluded = Vec::new();
    for &n in ns {
        let y = target.site(x, n)?;
        if n <= x.l1(&y).max(x_prime.l1(&y)) as usize || n == 0 {
            excluded.push(n);
        } else {
            used.push((n, y));
        }
    }
    let Some(n_max) = used.iter().map(|u| u.0).max() else {
        return Ok(GradientReport { points: Vec::new(), excluded, exponent: None });
    };
    let half = 2 * n_max as u64 + 4;
    let bx = LatticeBox::centered(x, half)?;
    let steps_x: Vec<usize> = used.iter().map(|u| u.0).collect();
    let steps_xp: Vec<usize> = used.iter().map(|u| u.0 - 1).collect();
    let per_trial: Vec<Vec<Option<f64>>> = (0..trials)
        .map(|t| {
            let (snap, _) = sample(model, &bx, derive_seed(seed, t as u64), DEFAULT_GUARD_FACTOR)?;
            let g = snap.subgraph();
            let cc = connected_components(&g);
            let big = cc.largest().map(|b| b.0);
            let inside = |p: &Point| bx.index_of(p).and_then(|i| cc.label(i)).is_some() && bx.index_of(p).and_then(|i| cc.label(i)) == big;
            if !(inside(x) && inside(x_prime)) {
                return Ok(used.iter().map(|_| None).collect());
            }
            let kx = kernel_steps::<f64>(&g, x, n_max, &steps_x, None)?;
            let kxp = kernel_steps::<f64>(&g, x_prime, n_max, &steps_xp, None)?;
            Ok(used
                .iter()
                .map(|(n, y)| {
                    inside(y).then(|| {
                        let a = kx.value(*n, y).expect("stored");
                        let b = kxp.value(n - 1, y).expect("stored");
                        (a - b) * (a - b)
                    })
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let m = trials as f64;
    let points: Vec<GradientPoint> = used
        .iter()
        .enumerate()
        .map(|(j, (n, y))| {
            let vals: Vec<f64> = per_trial.iter().map(|r| r[j].unwrap_or(0.0)).collect();
            let mean = vals.iter().sum::<f64>() / m;
            let var = if trials > 1 { vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0) } else { 0.0 };
            GradientPoint {
                n: *n,
                target: *y,
                estimate: mean,
                se: (var / m).sqrt(),
                included: per_trial.iter().filter(|r| r[j].is_some()).count(),
            }
        })
        .collect();
    let (lx, ly): (Vec<f64>, Vec<f64>) =
        points.iter().filter(|p| p.estimate > 0.0).map(|p| ((p.n as f64).ln(), p.estimate.ln())).unzip();
    Ok(GradientReport { exponent: ols_slope(&lx, &ly), points, excluded })
}
