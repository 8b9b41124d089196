//! Configuration samplers: Bernoulli site percolation, random interlacements
//! and their vacant set, and excursion sets of the Gaussian free field.
//!
//! Snapshots serialise to the `PERC1` binary layout:
//!
//! ```text
//! "PERC1" | d: u8 | corner: d x i64 LE | sides: d x u64 LE | model tag: u8
//!         | parameter: f64 LE | seed: u64 LE | occupancy bits
//! ```
//!
//! Occupancy is packed in row-major site order, eight sites per byte,
//! least significant bit first.

use std::io::{Read, Write};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, RngCore};
use rand_distr::{Poisson, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lattice::{connected_components, LatticeBox, Point, SiteSet, Subgraph};
use crate::linalg::DirichletSystem;
use crate::rng;

/// Default truncation factor for interlacement trajectories.
pub const DEFAULT_GUARD_FACTOR: f64 = 4.0;
/// Torus side is this multiple of the longest box side.
pub const GFF_PADDING: u64 = 4;
/// Minimum guard padding per unit of guard factor.
const MIN_PAD_PER_FACTOR: f64 = 12.0;

const MAGIC: &[u8; 5] = b"PERC1";

/// Percolation model and its parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "param", rename_all = "snake_case")]
pub enum Model {
    Bernoulli(f64),
    /// Trace of random interlacements at intensity `u`.
    Interlacements(f64),
    /// Vacant set of random interlacements at intensity `u`.
    Vacant(f64),
    /// Excursion set `{phi >= h}` of the Gaussian free field.
    GffExcursion(f64),
}

impl Model {
    pub fn tag(&self) -> u8 {
        match self {
            Model::Bernoulli(_) => 0,
            Model::Interlacements(_) => 1,
            Model::Vacant(_) => 2,
            Model::GffExcursion(_) => 3,
        }
    }

    pub fn parameter(&self) -> f64 {
        match *self {
            Model::Bernoulli(p) | Model::Interlacements(p) | Model::Vacant(p) | Model::GffExcursion(p) => p,
        }
    }

    pub fn from_tag(tag: u8, parameter: f64) -> Result<Self> {
        Ok(match tag {
            0 => Model::Bernoulli(parameter),
            1 => Model::Interlacements(parameter),
            2 => Model::Vacant(parameter),
            3 => Model::GffExcursion(parameter),
            t => return Err(Error::Format(format!("unknown model tag {t}"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Model::Bernoulli(_) => "bernoulli",
            Model::Interlacements(_) => "interlacements",
            Model::Vacant(_) => "vacant",
            Model::GffExcursion(_) => "gff_excursion",
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let v = self.parameter();
        if !v.is_finite() {
            return invalid("model parameter must be finite");
        }
        match self {
            Model::Bernoulli(p) if !(0.0..=1.0).contains(p) => invalid(format!("p = {p} not in [0, 1]")),
            Model::Interlacements(u) | Model::Vacant(u) if *u <= 0.0 => invalid(format!("u = {u} must be positive")),
            Model::Interlacements(_) | Model::Vacant(_) | Model::GffExcursion(_) if dim < 3 => {
                Err(Error::NotApplicable(format!("{} requires d >= 3", self.name())))
            }
            _ => Ok(()),
        }
    }
}

/// A sampled configuration with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub model: Model,
    pub seed: u64,
    pub sites: SiteSet,
}

impl Snapshot {
    pub fn subgraph(&self) -> Subgraph {
        Subgraph::new(self.sites.clone())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let bx = self.sites.bx();
        w.write_all(MAGIC)?;
        w.write_all(&[bx.dim() as u8])?;
        for &c in bx.corner().coords() {
            w.write_all(&c.to_le_bytes())?;
        }
        for &s in bx.sides() {
            w.write_all(&s.to_le_bytes())?;
        }
        w.write_all(&[self.model.tag()])?;
        w.write_all(&self.model.parameter().to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        let mut bytes = vec![0u8; bx.volume().div_ceil(8)];
        for i in self.sites.indices() {
            bytes[i / 8] |= 1 << (i % 8);
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to memory");
        v
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf, at: 0 };
        if cur.take(5)? != MAGIC {
            return Err(Error::Format("bad snapshot magic".into()));
        }
        let d = cur.take(1)?[0] as usize;
        if d == 0 || d > crate::lattice::MAX_DIM {
            return Err(Error::Format(format!("bad dimension {d}")));
        }
        let mut corner = Vec::with_capacity(d);
        for _ in 0..d {
            corner.push(i64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes")));
        }
        let mut sides = Vec::with_capacity(d);
        for _ in 0..d {
            sides.push(u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes")));
        }
        let tag = cur.take(1)?[0];
        let param = f64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
        let seed = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
        let bx = LatticeBox::new(Point::new(&corner)?, &sides).map_err(|e| Error::Format(e.to_string()))?;
        let model = Model::from_tag(tag, param)?;
        let bytes = cur.take(bx.volume().div_ceil(8))?;
        if cur.at != buf.len() {
            return Err(Error::Format("trailing bytes after occupancy".into()));
        }
        let sites = SiteSet::from_fn(bx, |i| bytes[i / 8] >> (i % 8) & 1 == 1);
        if bx.volume() % 8 != 0 && bytes[bytes.len() - 1] >> (bx.volume() % 8) != 0 {
            return Err(Error::Format("padding bits are set".into()));
        }
        Ok(Snapshot { model, seed, sites })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Format("snapshot truncated".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
}

/// Side information returned with a sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleReport {
    /// Interlacements: number of trajectories hitting the box.
    pub trajectories: Option<usize>,
    /// Interlacements: capacity of the box under the guard truncation.
    pub capacity: Option<f64>,
    /// Interlacements: estimate of the return probability neglected by
    /// truncating trajectories at the guard box.
    pub neglected_return: Option<f64>,
}

/// Draws a configuration of `model` on `bx`.
pub fn sample(model: Model, bx: &LatticeBox, seed: u64, guard_factor: f64) -> Result<(Snapshot, SampleReport)> {
    model.validate(bx.dim())?;
    match model {
        Model::Bernoulli(p) => Ok((bernoulli(bx, p, seed), SampleReport::default())),
        Model::Interlacements(u) | Model::Vacant(u) => {
            let sampler = InterlacementSampler::new(bx, u, guard_factor)?;
            let (trace, n) = sampler.trace(seed);
            let sites = match model {
                Model::Vacant(_) => SiteSet::full(*bx).difference(&trace)?,
                _ => trace,
            };
            let report = SampleReport {
                trajectories: Some(n),
                capacity: Some(sampler.capacity.value),
                neglected_return: Some(sampler.capacity.return_bound),
            };
            Ok((Snapshot { model, seed, sites }, report))
        }
        Model::GffExcursion(h) => {
            let phi = gff_field(bx, seed, GFF_PADDING)?;
            let sites = SiteSet::from_fn(*bx, |i| phi[i] >= h);
            Ok((Snapshot { model, seed, sites }, SampleReport::default()))
        }
    }
}

/// Bernoulli site percolation; site `i` is open iff its uniform is `< p`,
/// so configurations at different `p` with one seed are monotonically coupled.
pub fn bernoulli(bx: &LatticeBox, p: f64, seed: u64) -> Snapshot {
    const CHUNK: usize = 1 << 14;
    let n = bx.volume();
    let flags: Vec<bool> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .flat_map_iter(|c| {
            let start = c * CHUNK;
            let end = (start + CHUNK).min(n);
            let mut r = rng::site_stream(seed, start as u64);
            (start..end).map(move |_| rng::unit_from_bits(r.next_u64()) < p).collect::<Vec<_>>()
        })
        .collect();
    let sites = SiteSet::from_fn(*bx, |i| flags[i]);
    Snapshot { model: Model::Bernoulli(p), seed, sites }
}

/// Spectral density of the free field on the torus `(Z/nZ)^d` at a wave
/// vector given by its integer frequencies; zero at the zero mode.
fn gff_spectrum(freq: &[usize], n: usize) -> f64 {
    if freq.iter().all(|&k| k == 0) {
        return 0.0;
    }
    let d = freq.len() as f64;
    let phi: f64 = freq
        .iter()
        .map(|&k| (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos())
        .sum::<f64>()
        / d;
    1.0 / (1.0 - phi)
}

/// Pointwise variance of the torus field (zero mode removed).
pub fn gff_torus_variance(n: usize, d: usize) -> f64 {
    let total = n.pow(d as u32);
    let mut acc = 0.0;
    let mut freq = vec![0usize; d];
    for idx in 0..total {
        let mut rem = idx;
        for f in freq.iter_mut().rev() {
            *f = rem % n;
            rem /= n;
        }
        acc += gff_spectrum(&freq, n);
    }
    acc / total as f64
}

fn fft_along_axes(data: &mut [Complex<f64>], n: usize, d: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
    let total = data.len();
    for axis in 0..d {
        let stride = n.pow((d - 1 - axis) as u32);
        let mut line = vec![Complex::new(0.0, 0.0); n];
        for base in 0..total {
            if (base / stride) % n != 0 {
                continue;
            }
            for (k, v) in line.iter_mut().enumerate() {
                *v = data[base + k * stride];
            }
            fft.process(&mut line);
            for (k, v) in line.iter().enumerate() {
                data[base + k * stride] = *v;
            }
        }
    }
}

/// Free-field values on `bx`, obtained from a field on a torus of side
/// `padding * max side` by spectral synthesis with the zero mode removed.
/// Covariance is the torus Green function of the simple random walk.
pub fn gff_field(bx: &LatticeBox, seed: u64, padding: u64) -> Result<Vec<f64>> {
    let d = bx.dim();
    let n = (padding.max(1) * bx.sides().iter().copied().max().unwrap_or(1)) as usize;
    let total = n
        .checked_pow(d as u32)
        .filter(|&t| t <= 1 << 28)
        .ok_or_else(|| Error::TooLarge(format!("torus {n}^{d}")))?;
    let mut r = rng::stream(seed, 0);
    let mut data: Vec<Complex<f64>> =
        (0..total).map(|_| Complex::new(r.sample::<f64, _>(StandardNormal), 0.0)).collect();
    fft_along_axes(&mut data, n, d, false);
    let mut freq = vec![0usize; d];
    for (idx, v) in data.iter_mut().enumerate() {
        let mut rem = idx;
        for f in freq.iter_mut().rev() {
            *f = rem % n;
            rem /= n;
        }
        *v *= gff_spectrum(&freq, n).sqrt();
    }
    fft_along_axes(&mut data, n, d, true);
    let norm = total as f64;
    let mut out = Vec::with_capacity(bx.volume());
    for i in 0..bx.volume() {
        let mut t = 0usize;
        for k in 0..d {
            t = t * n + bx.offset_along(i, k) as usize;
        }
        out.push(data[t].re / norm);
    }
    Ok(out)
}

/// Capacity of a finite set under killing outside a guard box.
#[derive(Clone, Debug)]
pub struct Capacity {
    pub value: f64,
    /// Escape probabilities of the sites of the set (box indices of `guard`).
    pub equilibrium: Vec<(usize, f64)>,
    pub guard: LatticeBox,
    /// Estimate of the return probability from outside the guard box.
    pub return_bound: f64,
    pub solver_residual: f64,
}

fn green_asymptotic_constant(d: usize) -> f64 {
    let half = d as f64 / 2.0;
    half * gamma_fn(half - 1.0) * std::f64::consts::PI.powf(-half)
}

/// Gamma function for positive half-integers and integers.
fn gamma_fn(x: f64) -> f64 {
    if (x - 0.5).abs() < 1e-12 {
        return std::f64::consts::PI.sqrt();
    }
    if (x - 1.0).abs() < 1e-12 {
        return 1.0;
    }
    (x - 1.0) * gamma_fn(x - 1.0)
}

/// Guard box of a set: its bounding box padded by
/// `max(ceil((rho - 1) * side / 2), 12 rho)` on every side.
pub fn guard_box(bounding: &LatticeBox, guard_factor: f64) -> Result<LatticeBox> {
    if !(guard_factor >= 2.0) {
        return invalid(format!("guard factor {guard_factor} must be at least 2"));
    }
    let side = bounding.sides().iter().copied().max().unwrap_or(1) as f64;
    let pad = ((guard_factor - 1.0) * side / 2.0).ceil().max(MIN_PAD_PER_FACTOR * guard_factor) as u64;
    bounding.grow(pad)
}

/// Capacity of `k` (a site set in its own box) for the walk killed on
/// leaving the guard box. Escape probabilities come from the harmonic
/// measure `h(y) = P_y[hit K before leaving the guard]`.
pub fn capacity(k: &SiteSet, guard_factor: f64) -> Result<Capacity> {
    let d = k.bx().dim();
    if d < 3 {
        return Err(Error::NotApplicable("capacity requires a transient lattice (d >= 3)".into()));
    }
    if k.is_empty() {
        return invalid("capacity of the empty set");
    }
    let pts: Vec<Point> = k.points().collect();
    let mut lo = pts[0];
    let mut hi = pts[0];
    for p in &pts {
        for a in 0..d {
            lo = lo.with(a, lo[a].min(p[a]));
            hi = hi.with(a, hi[a].max(p[a]));
        }
    }
    let sides: Vec<u64> = (0..d).map(|a| (hi[a] - lo[a] + 1) as u64).collect();
    let bounding = LatticeBox::new(lo, &sides)?;
    let guard = guard_box(&bounding, guard_factor)?;
    let outer = guard.grow(1)?;
    let g = Subgraph::full(outer);
    let in_k = SiteSet::from_points(outer, pts.iter())?;
    let unknowns: Vec<usize> = (0..outer.volume())
        .filter(|&i| !in_k.get(i) && guard.contains(&outer.point_of(i)))
        .collect();
    let sys = DirichletSystem::new(&g, unknowns)?;
    let b: Vec<f64> = sys.rhs(&g, |j| if in_k.get(j) { 1.0 } else { 0.0 });
    let (h, stats) = sys.solve(&b, 1e-10, 20_000)?;
    let two_d = 2.0 * d as f64;
    let mut equilibrium = Vec::with_capacity(pts.len());
    let mut value = 0.0;
    for p in &pts {
        let i = outer.index_of(p).expect("inside");
        let mut hit = 0.0;
        g.for_each_neighbor(i, |j| {
            hit += if in_k.get(j) { 1.0 } else { sys.slot(j).map_or(0.0, |s| h[s]) };
        });
        let e = 1.0 - hit / two_d;
        value += e;
        equilibrium.push((guard.index_of(p).expect("inside guard"), e));
    }
    let dist = (0..d)
        .map(|a| (lo[a] - guard.corner()[a]).min(guard.upper()[a] - 1 - hi[a]) + 1)
        .min()
        .unwrap_or(1) as f64;
    let return_bound = (value * green_asymptotic_constant(d) * dist.powf(2.0 - d as f64)).min(1.0);
    Ok(Capacity { value, equilibrium, guard, return_bound, solver_residual: stats.residual })
}

/// Interlacement sampler on a fixed box: the number of trajectories hitting
/// the box is Poisson(u cap), entry points follow the normalised equilibrium
/// measure, and each forward walk is followed until it leaves the guard box.
pub struct InterlacementSampler {
    bx: LatticeBox,
    u: f64,
    pub capacity: Capacity,
    entry: Option<WeightedIndex<f64>>,
}

impl InterlacementSampler {
    pub fn new(bx: &LatticeBox, u: f64, guard_factor: f64) -> Result<Self> {
        Model::Interlacements(u).validate(bx.dim())?;
        let cap = capacity(&SiteSet::full(*bx), guard_factor)?;
        let weights: Vec<f64> = cap.equilibrium.iter().map(|&(_, e)| e.max(0.0)).collect();
        let entry = WeightedIndex::new(&weights).ok();
        Ok(Self { bx: *bx, u, capacity: cap, entry })
    }

    /// Trace of the trajectories on the box and their number.
    pub fn trace(&self, seed: u64) -> (SiteSet, usize) {
        let mut sites = SiteSet::empty(self.bx);
        let mean = self.u * self.capacity.value;
        let count = if mean > 0.0 {
            let mut r = rng::stream(seed, u64::MAX);
            Poisson::new(mean).map(|p| p.sample(&mut r) as usize).unwrap_or(0)
        } else {
            0
        };
        let Some(entry) = &self.entry else {
            return (sites, 0);
        };
        let guard = self.capacity.guard;
        let d = guard.dim();
        for j in 0..count {
            let mut r = rng::trajectory_stream(seed, j as u64);
            let start = self.capacity.equilibrium[entry.sample(&mut r)].0;
            let mut pos = guard.point_of(start);
            loop {
                if let Some(i) = self.bx.index_of(&pos) {
                    sites.set(i, true);
                }
                let step = r.gen_range(0..2 * d);
                pos = pos.offset(step / 2, if step % 2 == 0 { 1 } else { -1 });
                if !guard.contains(&pos) {
                    break;
                }
            }
        }
        (sites, count)
    }
}

/// Monte-Carlo estimate of a density parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EtaEstimate {
    pub eta: f64,
    /// Half-width of a 95% normal interval.
    pub half_width: f64,
    pub trials: usize,
}

/// Frequency with which the centre of `bx` lies in a component of
/// l1-diameter at least half the shortest side.
pub fn estimate_eta(model: Model, bx: &LatticeBox, trials: usize, seed: u64, guard_factor: f64) -> Result<EtaEstimate> {
    if trials == 0 {
        return invalid("trials must be positive");
    }
    model.validate(bx.dim())?;
    let bx = *bx;
    let side = bx.sides().iter().copied().min().unwrap_or(1);
    let mut mid = bx.corner();
    for a in 0..bx.dim() {
        mid = mid.offset(a, (bx.side(a) / 2) as i64);
    }
    let centre = bx.index_of(&mid).expect("centre inside");
    let interlacements = match model {
        Model::Interlacements(u) | Model::Vacant(u) => Some(InterlacementSampler::new(&bx, u, guard_factor)?),
        _ => None,
    };
    let hits: Vec<bool> = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<bool> {
            let s = rng::derive_seed(seed, t as u64);
            let sites = match (&interlacements, model) {
                (Some(sm), Model::Vacant(_)) => SiteSet::full(bx).difference(&sm.trace(s).0)?,
                (Some(sm), _) => sm.trace(s).0,
                _ => sample(model, &bx, s, guard_factor)?.0.sites,
            };
            let cc = connected_components(&Subgraph::new(sites));
            Ok(cc.label(centre).is_some_and(|l| 2 * cc.diameter(l) >= side))
        })
        .collect::<Result<_>>()?;
    let eta = hits.iter().filter(|&&h| h).count() as f64 / trials as f64;
    let half_width = 1.96 * (eta * (1.0 - eta) / trials as f64).sqrt();
    Ok(EtaEstimate { eta, half_width, trials })
}
