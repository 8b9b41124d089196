//! Scale ladders, the level-0 density events and the cascading good/bad
//! classification of the renormalised lattices `G_n = L_n Z^d`.
//!
//! Level-`n` vertices are stored in coarse coordinates `x / L_n`.

use bitvec::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lattice::{diameter_filter, Bfs, LatticeBox, Point, Radius, SiteSet, Subgraph};
use crate::rng;
use crate::samplers::{self, Model};

/// Density thresholds `(eta1, eta2)` with `0 < eta1 < 1` and `eta1 <= eta2 < 2 eta1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityPair {
    eta1: f64,
    eta2: f64,
}

impl DensityPair {
    pub fn new(eta1: f64, eta2: f64) -> Result<Self> {
        if !(eta1 > 0.0 && eta1 < 1.0) {
            return invalid(format!("eta1 = {eta1} not in (0, 1)"));
        }
        if !(eta2 >= eta1 && eta2 < 2.0 * eta1) {
            return invalid(format!("eta2 = {eta2} not in [eta1, 2 eta1) = [{eta1}, {})", 2.0 * eta1));
        }
        Ok(Self { eta1, eta2 })
    }

    /// The pair `(3/4 eta, 5/4 eta)` attached to a density `eta`.
    pub fn from_density(eta: f64) -> Result<Self> {
        Self::new(0.75 * eta, 1.25 * eta)
    }

    pub fn eta1(&self) -> f64 {
        self.eta1
    }

    pub fn eta2(&self) -> f64 {
        self.eta2
    }
}

/// Scales `l_n = l0 4^{n^theta}`, `r_n = r0 2^{n^theta}`, `L_n = l_{n-1} L_{n-1}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LadderSpec", into = "LadderSpec")]
pub struct ScaleLadder {
    spec: LadderSpec,
    l: Vec<u64>,
    r: Vec<u64>,
    big_l: Vec<u64>,
}

/// Parameters of a [`ScaleLadder`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LadderSpec {
    pub l0: u64,
    pub r0: u64,
    #[serde(rename = "L0")]
    pub big_l0: u64,
    pub theta: u32,
    pub depth: usize,
}

impl TryFrom<LadderSpec> for ScaleLadder {
    type Error = Error;
    fn try_from(s: LadderSpec) -> Result<Self> {
        ScaleLadder::new(s.l0, s.r0, s.big_l0, s.theta, s.depth)
    }
}

impl From<ScaleLadder> for LadderSpec {
    fn from(l: ScaleLadder) -> Self {
        l.spec
    }
}

const COORD_LIMIT: u64 = (i64::MAX / 16) as u64;

fn pow_checked(base: u64, exp: u64) -> Option<u64> {
    let e = u32::try_from(exp).ok()?;
    base.checked_pow(e)
}

impl ScaleLadder {
    /// Materialises levels `0..=depth`. Arithmetic overflow is an error;
    /// the inequality constraints are reported by [`ScaleLadder::basic_ok`].
    pub fn new(l0: u64, r0: u64, big_l0: u64, theta: u32, depth: usize) -> Result<Self> {
        if l0 == 0 || r0 == 0 || big_l0 == 0 || theta == 0 {
            return invalid("l0, r0, L0 and theta must be positive");
        }
        let mut l = Vec::with_capacity(depth + 1);
        let mut r = Vec::with_capacity(depth + 1);
        let mut big_l: Vec<u64> = Vec::with_capacity(depth + 1);
        for n in 0..=depth {
            let e = pow_checked(n as u64, theta as u64).ok_or_else(|| Error::Overflow("n^theta".into()))?;
            let four = e.checked_mul(2).and_then(|e2| pow_checked(2, e2));
            let ln = four.and_then(|f| f.checked_mul(l0)).filter(|&v| v <= COORD_LIMIT);
            let rn = pow_checked(2, e).and_then(|f| f.checked_mul(r0)).filter(|&v| v <= COORD_LIMIT);
            let bl = if n == 0 { Some(big_l0) } else { big_l[n - 1].checked_mul(l[n - 1]) };
            match (ln, rn, bl.filter(|&v: &u64| v <= COORD_LIMIT)) {
                (Some(a), Some(b), Some(c)) => {
                    l.push(a);
                    r.push(b);
                    big_l.push(c);
                }
                _ => return Err(Error::Overflow(format!("ladder level {n} exceeds coordinate range"))),
            }
        }
        Ok(Self { spec: LadderSpec { l0, r0, big_l0, theta, depth }, l, r, big_l })
    }

    pub fn spec(&self) -> LadderSpec {
        self.spec
    }

    pub fn depth(&self) -> usize {
        self.spec.depth
    }

    pub fn l(&self, n: usize) -> u64 {
        self.l[n]
    }

    pub fn r(&self, n: usize) -> u64 {
        self.r[n]
    }

    #[allow(non_snake_case)]
    pub fn L(&self, n: usize) -> u64 {
        self.big_l[n]
    }

    /// `l_n > 8 r_n` and `r_n | l_n` on every materialised level.
    pub fn basic_ok(&self) -> bool {
        (0..=self.depth()).all(|n| self.l[n] > 8 * self.r[n] && self.l[n] % self.r[n] == 0)
    }

    pub fn check_basic(&self) -> Result<()> {
        if self.basic_ok() {
            Ok(())
        } else {
            invalid(format!("ladder {:?} violates l_n > 8 r_n or r_n | l_n", self.spec))
        }
    }

    /// `r_j / l_j = (r0 / l0) 2^{-j^theta}` for any `j`, without materialising.
    pub fn ratio(&self, j: u64) -> f64 {
        let e = (j as f64).powi(self.spec.theta as i32);
        self.spec.r0 as f64 / self.spec.l0 as f64 * (-e).exp2()
    }

    fn series_terms(&self) -> impl Iterator<Item = f64> + '_ {
        (0u64..).map(|j| self.ratio(j)).take_while(|&t| t > 1e-300).take(4096)
    }

    /// `sum_{j >= 0} r_j / l_j`.
    pub fn ratio_sum(&self) -> f64 {
        self.series_terms().sum()
    }

    /// `prod_{j >= 0} (1 - (4 r_j / l_j)^p)`.
    pub fn hole_product(&self, p: u32) -> f64 {
        self.series_terms().map(|t| 1.0 - (4.0 * t).powi(p as i32)).product()
    }

    /// `prod_{j < s} (1 - (4 r_j / l_j)^p)`.
    pub fn hole_product_to(&self, s: usize, p: u32) -> f64 {
        (0..s as u64).map(|j| 1.0 - (4.0 * self.ratio(j)).powi(p as i32)).product()
    }

    /// `prod_{j >= 0} (1 + 32 r_j / l_j)`.
    pub fn chemical_product(&self) -> f64 {
        self.series_terms().map(|t| 1.0 + 32.0 * t).product()
    }

    /// Condition-by-condition compliance of the ladder.
    pub fn compliance(&self, d: usize, eta: Option<&DensityPair>) -> Compliance {
        let df = d as f64;
        let prod2 = self.hole_product(2);
        let prod_d = self.hole_product(d as u32);
        let sum = self.ratio_sum();
        let sum_ok = 3456.0 * sum <= 1e-6;
        let iso_threshold = if d >= 2 {
            let a: f64 = 15.0 / 16.0;
            let b = if d > 1 { (-1.0 / (16.0 * (df - 1.0))).exp() } else { 0.0 };
            let c = (1.0 - (-(df + 2.0)).exp2()) / (1.0 - (-(df + 3.0)).exp2());
            a.max(b).max(c)
        } else {
            1.0
        };
        Compliance {
            basic: self.basic_ok(),
            isoperimetric: prod2 >= iso_threshold && sum_ok,
            isoperimetric_2d: prod2 >= 15.0 / 16.0 && sum_ok,
            ratio_sum: sum,
            uniqueness: eta.map(|e| prod_d > (1.0 + e.eta2) / (1.0 + 2.0 * e.eta1)),
            extended_isoperimetric: eta.map(|e| prod_d >= (1.0 + e.eta2) / (1.0 + (e.eta2 + 2.0 * e.eta1) / 2.0)),
            chemical: self.l[0] > 16 * self.r[0] && self.chemical_product() <= 2.0,
        }
    }
}

/// Per-condition flags of a ladder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Compliance {
    pub basic: bool,
    /// Product and series conditions of the perforated-lattice inequality.
    pub isoperimetric: bool,
    pub isoperimetric_2d: bool,
    pub ratio_sum: f64,
    pub uniqueness: Option<bool>,
    pub extended_isoperimetric: Option<bool>,
    pub chemical: bool,
}

impl Compliance {
    pub fn table(&self) -> Vec<(&'static str, String)> {
        let f = |b: Option<bool>| b.map_or("n/a".to_string(), |v| v.to_string());
        vec![
            ("basic (l_n > 8 r_n, r_n | l_n)", self.basic.to_string()),
            ("perforated isoperimetry", self.isoperimetric.to_string()),
            ("perforated isoperimetry, d = 2", self.isoperimetric_2d.to_string()),
            ("3456 sum r_j/l_j", format!("{:.3e}", 3456.0 * self.ratio_sum)),
            ("cluster uniqueness ratio", f(self.uniqueness)),
            ("extended-cluster isoperimetry ratio", f(self.extended_isoperimetric)),
            ("chemical distance", self.chemical.to_string()),
        ]
    }
}

/// Good/bad bits of one renormalised level.
#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    /// `L_n`.
    pub scale: u64,
    /// Coarse coordinates `x / L_n` of the classified vertices.
    pub grid: LatticeBox,
    pub d_bad: BitVec<u64, Lsb0>,
    pub i_bad: BitVec<u64, Lsb0>,
}

impl Level {
    pub fn bad(&self, idx: usize) -> bool {
        self.d_bad[idx] || self.i_bad[idx]
    }

    pub fn bad_count(&self) -> usize {
        (0..self.d_bad.len()).filter(|&i| self.bad(i)).count()
    }

    /// Lattice point of a coarse index.
    pub fn vertex(&self, idx: usize) -> Point {
        self.grid.point_of(idx).scale(self.scale as i64)
    }

    /// Coarse index of a lattice point, if it is a classified vertex.
    pub fn index(&self, x: &Point) -> Option<usize> {
        let s = self.scale as i64;
        if x.coords().iter().any(|c| c.rem_euclid(s) != 0) {
            return None;
        }
        self.grid.index_of(&x.div_floor(s))
    }
}

/// Classification of levels `0..=nmax`.
#[derive(Clone, Debug, PartialEq)]
pub struct BadnessField {
    pub ladder: ScaleLadder,
    pub levels: Vec<Level>,
}

impl BadnessField {
    pub fn nmax(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level(&self, n: usize) -> &Level {
        &self.levels[n]
    }

    /// `Some(bad)` for a classified vertex `x` of `G_n`.
    pub fn is_bad(&self, n: usize, x: &Point) -> Option<bool> {
        let lv = self.levels.get(n)?;
        lv.index(x).map(|i| lv.bad(i))
    }

    pub fn is_d_bad(&self, n: usize, x: &Point) -> Option<bool> {
        let lv = self.levels.get(n)?;
        lv.index(x).map(|i| lv.d_bad[i])
    }

    pub fn is_i_bad(&self, n: usize, x: &Point) -> Option<bool> {
        let lv = self.levels.get(n)?;
        lv.index(x).map(|i| lv.i_bad[i])
    }

    /// Cascades prescribed level-0 bits up to `nmax`. `grid0` holds coarse
    /// coordinates `x / L0`.
    pub fn from_level0(
        ladder: ScaleLadder,
        grid0: LatticeBox,
        d_bad: BitVec<u64, Lsb0>,
        i_bad: BitVec<u64, Lsb0>,
        nmax: usize,
    ) -> Result<Self> {
        ladder.check_basic()?;
        if nmax > ladder.depth() {
            return invalid(format!("nmax {nmax} exceeds ladder depth {}", ladder.depth()));
        }
        if d_bad.len() != grid0.volume() || i_bad.len() != grid0.volume() {
            return invalid("level-0 bit vectors do not match the grid");
        }
        let mut levels = vec![Level { scale: ladder.L(0), grid: grid0, d_bad, i_bad }];
        for n in 1..=nmax {
            let next = cascade(&levels[n - 1], &ladder, n)?;
            levels.push(next);
        }
        Ok(Self { ladder, levels })
    }
}

/// Coarse grid of level-`n` vertices whose `L_n`-box lies in `region`.
fn level_grid(region: &LatticeBox, scale: u64) -> Option<LatticeBox> {
    let d = region.dim();
    let s = scale as i64;
    let mut lo = Point::origin(d);
    let mut sides = Vec::with_capacity(d);
    for k in 0..d {
        let a = region.corner()[k];
        let b = region.upper()[k];
        let first = a.div_euclid(s) + i64::from(a.rem_euclid(s) != 0);
        let last = b.div_euclid(s) - 1;
        if last < first {
            return None;
        }
        lo = lo.with(k, first);
        sides.push((last - first + 1) as u64);
    }
    LatticeBox::new(lo, &sides).ok()
}

fn cascade(prev: &Level, ladder: &ScaleLadder, n: usize) -> Result<Level> {
    const M: usize = crate::lattice::MAX_DIM;
    let scale = ladder.L(n);
    let l_prev = ladder.l(n - 1) as i64;
    let r_prev = ladder.r(n - 1) as i64;
    let d = prev.grid.dim();
    let sides: Vec<u64> = prev.grid.sides().iter().map(|&v| v * prev.scale).collect();
    let region = LatticeBox::new(prev.grid.corner().scale(prev.scale as i64), &sides)?;
    let grid = level_grid(&region, scale)
        .ok_or_else(|| Error::InvalidArgument(format!("region holds no level-{n} vertex")))?;
    let child_box = LatticeBox::cube(Point::origin(d), l_prev as u64)?;
    let flags: Vec<(bool, bool)> = (0..grid.volume())
        .into_par_iter()
        .map(|idx| {
            let base = grid.point_of(idx).scale(l_prev);
            let mut lo = [[i64::MAX; M]; 2];
            let mut hi = [[i64::MIN; M]; 2];
            let mut any = [false; 2];
            for off in child_box.points() {
                let c = base.add(&off);
                let ci = prev.grid.index_of(&c).expect("children lie in the previous grid");
                for (f, bits) in [&prev.d_bad, &prev.i_bad].into_iter().enumerate() {
                    if bits[ci] {
                        any[f] = true;
                        for k in 0..d {
                            lo[f][k] = lo[f][k].min(c[k]);
                            hi[f][k] = hi[f][k].max(c[k]);
                        }
                    }
                }
            }
            let far = |f: usize| any[f] && (0..d).any(|k| hi[f][k] - lo[f][k] >= r_prev);
            (far(0), far(1))
        })
        .collect();
    let (d_bad, i_bad) = unzip_bits(flags);
    Ok(Level { scale, grid, d_bad, i_bad })
}

fn unzip_bits(flags: Vec<(bool, bool)>) -> (BitVec<u64, Lsb0>, BitVec<u64, Lsb0>) {
    let mut a = bitvec![u64, Lsb0; 0; flags.len()];
    let mut b = bitvec![u64, Lsb0; 0; flags.len()];
    for (i, (x, y)) in flags.into_iter().enumerate() {
        a.set(i, x);
        b.set(i, y);
    }
    (a, b)
}

/// Dense components of `S_{L0}` in one `L0`-box, by representative site.
struct BoxSummary {
    dense: Vec<usize>,
    count: usize,
}

/// Level-0 data over a coarse grid of `L0`-boxes.
struct Level0Context<'a> {
    s: &'a Subgraph,
    l0: u64,
    eta: DensityPair,
    /// Coarse coordinates of the summarised boxes.
    ext: LatticeBox,
    boxes: Vec<BoxSummary>,
}

impl<'a> Level0Context<'a> {
    fn new(s: &'a Subgraph, l0: u64, eta: DensityPair, ext: LatticeBox) -> Result<Self> {
        let covered = LatticeBox::new(
            ext.corner().scale(l0 as i64),
            &ext.sides().iter().map(|&v| v * l0).collect::<Vec<_>>(),
        )?;
        if !s.bx().contains_box(&covered) {
            return Err(Error::OutOfBounds(format!("L0-boxes {covered:?} leave the domain {:?}", s.bx())));
        }
        let s_l0 = diameter_filter(s, Radius::Finite(l0));
        let threshold = eta.eta1 * (l0 as f64).powi(s.dim() as i32);
        let boxes = (0..ext.volume())
            .into_par_iter()
            .map_init(
                || Bfs::new(s.bx()),
                |bfs, c| -> Result<BoxSummary> {
                    let b = LatticeBox::cube(ext.point_of(c).scale(l0 as i64), l0)?;
                    Ok(summarise(s, &s_l0, &b, threshold, bfs))
                },
            )
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { s, l0, eta, ext, boxes })
    }

    fn summary(&self, coarse: &Point) -> &BoxSummary {
        &self.boxes[self.ext.index_of(coarse).expect("coarse box summarised")]
    }

    fn i_bad(&self, coarse: &Point) -> bool {
        self.summary(coarse).count as f64 > self.eta.eta2 * (self.l0 as f64).powi(self.s.dim() as i32)
    }

    fn d_bad(&self, coarse: &Point, bfs: &mut Bfs) -> bool {
        let sx = self.summary(coarse);
        let d = coarse.dim();
        let mut neighbours = Vec::with_capacity(2 * d);
        for k in 0..d {
            for sign in [-1i64, 1] {
                let y = coarse.offset(k, sign);
                if self.summary(&y).dense.is_empty() {
                    return true;
                }
                neighbours.push(y);
            }
        }
        let dom = *self.s.bx();
        let l0 = self.l0 as i64;
        'candidate: for &cx in &sx.dense {
            for y in &neighbours {
                bfs.run(self.s, cx, u32::MAX, |j| {
                    let p = dom.point_of(j).div_floor(l0);
                    p == *coarse || p == *y
                });
                if !self.summary(y).dense.iter().any(|&cy| bfs.distance(cy).is_some()) {
                    continue 'candidate;
                }
            }
            return false;
        }
        true
    }
}

fn summarise(s: &Subgraph, s_l0: &SiteSet, b: &LatticeBox, threshold: f64, bfs: &mut Bfs) -> BoxSummary {
    let dom = *s.bx();
    let idx = dom.sub_indices(b).expect("box inside domain");
    let mut seen = bitvec![u64, Lsb0; 0; b.volume()];
    let mut dense = Vec::new();
    let mut count = 0;
    for (local, &i) in idx.iter().enumerate() {
        if !s_l0.get(i) {
            continue;
        }
        count += 1;
        if seen[local] {
            continue;
        }
        let comp = bfs.run(s, i, u32::MAX, |j| s_l0.get(j) && b.contains(&dom.point_of(j)));
        for &j in comp {
            seen.set(b.index_of(&dom.point_of(j)).expect("in box"), true);
        }
        if comp.len() as f64 >= threshold {
            dense.push(i);
        }
    }
    BoxSummary { dense, count }
}

fn coarse_vertex(x: &Point, l0: u64) -> Result<Point> {
    if l0 == 0 || x.coords().iter().any(|c| c.rem_euclid(l0 as i64) != 0) {
        return invalid(format!("{x} is not a vertex of L0 Z^d"));
    }
    Ok(x.div_floor(l0 as i64))
}

/// True iff the density event `D` occurs at `x` (the vertex is D-bad): some
/// box among `x` and its `2d` neighbours at scale `L0` lacks an
/// `eta1 L0^d`-dense component of `S_{L0}`, or no dense component of `x`
/// connects to a dense component of every neighbour inside the union of the two boxes.
pub fn event_d(x: &Point, l0: u64, s: &Subgraph, eta: &DensityPair) -> Result<bool> {
    let c = coarse_vertex(x, l0)?;
    let ext = LatticeBox::centered(&c, 1)?;
    let ctx = Level0Context::new(s, l0, *eta, ext)?;
    Ok(ctx.d_bad(&c, &mut Bfs::new(s.bx())))
}

/// True iff `|S_{L0} ∩ (x + [0, L0)^d)| > eta2 L0^d`.
pub fn event_i(x: &Point, l0: u64, s: &Subgraph, eta: &DensityPair) -> Result<bool> {
    let c = coarse_vertex(x, l0)?;
    let ext = LatticeBox::cube(c, 1)?;
    let ctx = Level0Context::new(s, l0, *eta, ext)?;
    Ok(ctx.i_bad(&c))
}

/// Classifies all vertices of `G_0, ..., G_nmax` whose boxes lie in `region`.
pub fn classify(
    s: &Subgraph,
    ladder: &ScaleLadder,
    eta: &DensityPair,
    region: &LatticeBox,
    nmax: usize,
) -> Result<BadnessField> {
    ladder.check_basic()?;
    if nmax > ladder.depth() {
        return invalid(format!("nmax {nmax} exceeds ladder depth {}", ladder.depth()));
    }
    let l0 = ladder.L(0);
    if !s.bx().contains_box(&region.grow(l0)?) {
        return Err(Error::OutOfBounds("region plus one L0 collar must lie in the domain".into()));
    }
    let grid0 = level_grid(region, l0).ok_or_else(|| Error::InvalidArgument("region holds no G0 vertex".into()))?;
    let ctx = Level0Context::new(s, l0, *eta, grid0.grow(1)?)?;
    let flags: Vec<(bool, bool)> = (0..grid0.volume())
        .into_par_iter()
        .map_init(
            || Bfs::new(s.bx()),
            |bfs, i| {
                let c = grid0.point_of(i);
                (ctx.d_bad(&c, bfs), ctx.i_bad(&c))
            },
        )
        .collect();
    let (d_bad, i_bad) = unzip_bits(flags);
    BadnessField::from_level0(ladder.clone(), grid0, d_bad, i_bad, nmax)
}

/// Monte-Carlo estimate of `P[0 is n-bad]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BadEstimate {
    pub n: usize,
    pub estimate: f64,
    /// 95% Wilson interval.
    pub lower: f64,
    pub upper: f64,
    pub samples: usize,
    pub bad: usize,
    /// `2 * 2^{-2^n}`.
    pub bound: f64,
    /// True if the interval reaches below the bound.
    pub consistent_with_bound: bool,
}

fn wilson(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959964;
    let nf = n as f64;
    let p = k as f64 / nf;
    let den = 1.0 + z * z / nf;
    let centre = (p + z * z / (2.0 * nf)) / den;
    let half = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / den;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Estimates the probability that a vertex of `G_n` is n-bad.
///
/// Each trial samples a domain covering `tiles^d` level-`n` boxes plus an
/// `L0` collar and counts the bad ones; by translation invariance each of
/// them is a sample of the origin event. With `tiles = 1` only the origin
/// vertex is used.
#[allow(clippy::too_many_arguments)]
pub fn estimate_bad_probability(
    model: Model,
    dim: usize,
    ladder: &ScaleLadder,
    eta: &DensityPair,
    n: usize,
    trials: usize,
    tiles: u64,
    seed: u64,
) -> Result<BadEstimate> {
    let mut all = estimate_bad_profile(model, dim, ladder, eta, n, trials, tiles, seed)?;
    Ok(all.pop().expect("levels 0..=n"))
}

/// Estimates for every level `0..=nmax` from one sampled ensemble: each
/// trial covers `tiles^d` boxes of side `L_nmax`, and all classified
/// vertices of each level count as samples.
#[allow(clippy::too_many_arguments)]
pub fn estimate_bad_profile(
    model: Model,
    dim: usize,
    ladder: &ScaleLadder,
    eta: &DensityPair,
    nmax: usize,
    trials: usize,
    tiles: u64,
    seed: u64,
) -> Result<Vec<BadEstimate>> {
    if trials == 0 || tiles == 0 {
        return invalid("trials and tiles must be positive");
    }
    if nmax > ladder.depth() {
        return invalid("level exceeds ladder depth");
    }
    model.validate(dim)?;
    let region = LatticeBox::cube(Point::origin(dim), ladder.L(nmax) * tiles)?;
    let domain = region.grow(ladder.L(0))?;
    let mut bad = vec![0usize; nmax + 1];
    let mut samples = vec![0usize; nmax + 1];
    for t in 0..trials {
        let (snap, _) = samplers::sample(model, &domain, rng::derive_seed(seed, t as u64), samplers::DEFAULT_GUARD_FACTOR)?;
        let field = classify(&snap.subgraph(), ladder, eta, &region, nmax)?;
        for (n, lv) in field.levels.iter().enumerate() {
            bad[n] += lv.bad_count();
            samples[n] += lv.grid.volume();
        }
    }
    Ok((0..=nmax)
        .map(|n| {
            let (lower, upper) = wilson(bad[n], samples[n]);
            let bound = 2.0 * (-(2f64.powi(n as i32))).exp2();
            BadEstimate {
                n,
                estimate: bad[n] as f64 / samples[n] as f64,
                lower,
                upper,
                samples: samples[n],
                bad: bad[n],
                bound,
                consistent_with_bound: lower <= bound,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_pair_bounds() {
        assert!(DensityPair::new(0.5, 0.9).is_ok());
        assert!(DensityPair::new(0.3, 0.7).is_err());
        assert!(DensityPair::new(0.0, 0.0).is_err());
        assert!(DensityPair::new(0.5, 0.4).is_err());
        assert!(DensityPair::new(0.5, 1.0).is_err());
    }

    #[test]
    fn ladder_sequences() {
        let lad = ScaleLadder::new(9, 1, 2, 1, 3).unwrap();
        assert_eq!((lad.l(0), lad.l(1), lad.l(2)), (9, 36, 144));
        assert_eq!((lad.r(0), lad.r(1), lad.r(2)), (1, 2, 4));
        assert_eq!((lad.L(0), lad.L(1), lad.L(2), lad.L(3)), (2, 18, 648, 93312));
        assert!(lad.basic_ok());
        let bad = ScaleLadder::new(8, 1, 1, 1, 1).unwrap();
        assert!(!bad.basic_ok());
        assert!(ScaleLadder::new(1 << 40, 1, 1 << 20, 2, 6).is_err());
    }

    #[test]
    fn desk_ladder_fails_series_condition() {
        let lad = ScaleLadder::new(18, 2, 1, 1, 2).unwrap();
        let c = lad.compliance(2, None);
        assert!(c.basic);
        assert!(!c.isoperimetric);
        assert!(!c.isoperimetric_2d);
    }

    #[test]
    fn wilson_interval_contains_estimate() {
        let (lo, hi) = wilson(3, 100);
        assert!(lo < 0.03 && 0.03 < hi);
        assert_eq!(wilson(0, 10).0, 0.0);
    }
}
