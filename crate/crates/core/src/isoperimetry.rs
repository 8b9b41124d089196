//! Boundary and volume analytics: the projection bound on box graphs, the
//! two-dimensional slice selection, exact small-graph profiles, subset
//! audits of perforations and weak Poincaré constants.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::lattice::{boundary_size, graph_ball, LatticeBox, Point, SiteSet, Subgraph};
use crate::linalg::pcg;
use crate::perforate::Perforation;
use crate::scalar::Real;

/// `C_d = C_2^{d-1} / prod_{j=1}^{d-2} (1 + 3 / 9^j)`.
pub fn selection_capacity(d: usize, c2: f64) -> f64 {
    let den: f64 = (1..d.saturating_sub(1)).map(|j| 1.0 + 3.0 / 9f64.powi(j as i32)).product();
    c2.powi(d as i32 - 1) / den
}

/// `delta_d = 9^{-(d-2)}`.
pub fn selection_coverage(d: usize) -> f64 {
    9f64.powi(-(d as i32 - 2))
}

/// Disjoint two-dimensional rectangles with their intersection counts.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSelection {
    pub slices: Vec<LatticeBox>,
    pub counts: Vec<usize>,
}

impl SliceSelection {
    pub fn covered(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Selects disjoint 2D rectangles of `q` carrying a `delta_d` share of `a`,
/// each at most a `c2` fraction full, following the induction on `d`.
pub fn select_slices(a: &SiteSet, q: &LatticeBox, c2: f64) -> Result<SliceSelection> {
    let d = q.dim();
    if d < 2 {
        return invalid("slices need d >= 2");
    }
    if !(6.0 / 7.0..1.0).contains(&c2) {
        return invalid(format!("C2 = {c2} not in [6/7, 1)"));
    }
    let n = q.points().filter(|p| a.contains(p)).count();
    if a.count() != n {
        return invalid("A must lie inside q");
    }
    let cap = selection_capacity(d, c2);
    if n == 0 || n as f64 > cap * q.volume() as f64 {
        return invalid(format!("|A| = {n} outside [1, C_d |q|] with C_d = {cap}"));
    }
    let axes: Vec<usize> = (0..d).collect();
    let mut slices = Vec::new();
    select_rec(a, *q, &axes, c2, &mut slices)?;
    let counts = slices.iter().map(|s| s.points().filter(|p| a.contains(p)).count()).collect();
    Ok(SliceSelection { slices, counts })
}

fn fix_axis(region: &LatticeBox, axis: usize, at: i64) -> LatticeBox {
    let mut sides = region.sides().to_vec();
    sides[axis] = 1;
    LatticeBox::new(region.corner().with(axis, at), &sides).expect("sub-box")
}

fn select_rec(a: &SiteSet, region: LatticeBox, axes: &[usize], c2: f64, out: &mut Vec<LatticeBox>) -> Result<()> {
    let m = axes.len();
    if m == 2 {
        out.push(region);
        return Ok(());
    }
    let pts: Vec<Point> = region.points().filter(|p| a.contains(p)).collect();
    let total = pts.len() as f64;
    let slice_key = |p: &Point| axes[2..].iter().map(|&k| p[k]).collect::<Vec<i64>>();
    let mut per_slice: HashMap<Vec<i64>, usize> = HashMap::new();
    for p in &pts {
        *per_slice.entry(slice_key(p)).or_default() += 1;
    }
    let area = (region.side(axes[0]) * region.side(axes[1])) as f64;
    let delta = selection_coverage(m);
    let good: usize = per_slice.values().filter(|&&c| c as f64 <= c2 * area).sum();
    if good as f64 >= delta * total {
        let mut keys: Vec<&Vec<i64>> =
            per_slice.iter().filter(|(_, &c)| c as f64 <= c2 * area).map(|(k, _)| k).collect();
        keys.sort();
        for key in keys {
            let mut s = region;
            for (j, &k) in axes[2..].iter().enumerate() {
                s = fix_axis(&s, k, key[j]);
            }
            out.push(s);
        }
        return Ok(());
    }
    let a0 = axes[0];
    let r1 = region.side(a0) as f64;
    let lo = region.corner()[a0];
    let width = region.side(a0) as usize;
    let mut in_m = vec![0usize; width];
    let mut in_full = vec![0usize; width];
    for p in &pts {
        let x = (p[a0] - lo) as usize;
        in_m[x] += 1;
        if per_slice[&slice_key(p)] as f64 > c2 * area {
            in_full[x] += 1;
        }
    }
    let chosen: Vec<usize> = (0..width)
        .filter(|&x| {
            let all = in_m[x] as f64;
            let full = in_full[x] as f64;
            all >= total / (3.0 * r1) && full <= total / (c2 * r1) && all - full <= 3.0 * delta * total / r1
        })
        .collect();
    if 3 * chosen.len() < width {
        return Err(Error::InternalConsistency(format!(
            "only {} of {width} hyperplanes qualify, fewer than a third",
            chosen.len()
        )));
    }
    for x in chosen {
        select_rec(a, fix_axis(&region, a0, lo + x as i64), &axes[1..], c2, out)?;
    }
    Ok(())
}

/// Both sides of the projection bound on a full box graph.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LwReport {
    pub boundary_box: usize,
    pub boundary_lattice: usize,
    /// `(1 - N C^{1/d}) |A|^{(d-1)/d}`.
    pub volume_bound: f64,
    /// `(1 + 2d (1 - N C^{1/d})^{-1})^{-1} |∂_{Z^d} A|`.
    pub lattice_bound: f64,
    pub volume_margin: f64,
    pub lattice_margin: f64,
    pub holds: bool,
}

/// Checks `|∂_G A| >= (1 - N C^{1/d}) |A|^{(d-1)/d}` and the comparison with
/// the lattice boundary, where `G` is the full graph on `a.bx()`.
pub fn lw_bound_check(a: &SiteSet, n: f64, c: f64) -> Result<LwReport> {
    let g = a.bx();
    let d = g.dim() as f64;
    let min = *g.sides().iter().min().expect("d >= 1") as f64;
    let max = *g.sides().iter().max().expect("d >= 1") as f64;
    if max > n * min {
        return invalid(format!("aspect ratio {max}/{min} exceeds N = {n}"));
    }
    if a.count() as f64 > c * g.volume() as f64 {
        return invalid("|A| exceeds C |G|");
    }
    let theta = 1.0 - n * c.powf(1.0 / d);
    if theta <= 0.0 {
        return invalid("N C^{1/d} must be < 1");
    }
    let full = Subgraph::full(*g);
    let boundary_box = boundary_size(a, &full)?;
    let mut internal = 0usize;
    for i in a.indices() {
        for k in 0..g.dim() {
            if let Some(j) = g.neighbor(i, k, true) {
                internal += a.get(j) as usize;
            }
        }
    }
    let boundary_lattice = 2 * g.dim() * a.count() - 2 * internal;
    let volume_bound = theta * (a.count() as f64).powf((d - 1.0) / d);
    let lattice_bound = boundary_lattice as f64 / (1.0 + 2.0 * d / theta);
    let volume_margin = boundary_box as f64 - volume_bound;
    let lattice_margin = boundary_box as f64 - lattice_bound;
    Ok(LwReport {
        boundary_box,
        boundary_lattice,
        volume_bound,
        lattice_bound,
        volume_margin,
        lattice_margin,
        holds: volume_margin >= -1e-9 && lattice_margin >= -1e-9,
    })
}

/// Largest graph handled by exhaustive enumeration.
pub const BRUTE_FORCE_LIMIT: usize = 22;

/// An extremal subset found by enumeration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Extremum {
    pub ratio: f64,
    pub size: usize,
    pub boundary: usize,
    /// Box indices of the subset.
    pub sites: Vec<usize>,
}

/// Exact minima over `1 <= |A| <= |V|/2`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExactProfile {
    /// Minimum of `|∂A| / |A|^{(d-1)/d}`.
    pub isoperimetric: Option<Extremum>,
    /// Minimum of `|∂A| / |A|`.
    pub cheeger: Option<Extremum>,
}

/// Isoperimetric ratio `b / a^{(d-1)/d}`.
pub fn iso_ratio(boundary: usize, size: usize, d: usize) -> f64 {
    boundary as f64 / (size as f64).powf((d as f64 - 1.0) / d as f64)
}

struct SmallGraph {
    sites: Vec<usize>,
    adj: Vec<u32>,
}

fn small_graph(g: &Subgraph) -> Result<SmallGraph> {
    let sites: Vec<usize> = g.sites().indices().collect();
    if sites.len() > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(format!("{} sites exceed the enumeration limit {BRUTE_FORCE_LIMIT}", sites.len())));
    }
    let pos: HashMap<usize, usize> = sites.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let adj = sites
        .iter()
        .map(|&i| {
            let mut m = 0u32;
            g.for_each_neighbor(i, |j| m |= 1 << pos[&j]);
            m
        })
        .collect();
    Ok(SmallGraph { sites, adj })
}

fn mask_sites(sg: &SmallGraph, mask: u32) -> Vec<usize> {
    (0..sg.sites.len()).filter(|&k| mask >> k & 1 == 1).map(|k| sg.sites[k]).collect()
}

/// Exhaustive minima over all subsets of a graph with at most 22 sites.
pub fn min_boundary_bruteforce(g: &Subgraph) -> Result<ExactProfile> {
    let sg = small_graph(g)?;
    let n = sg.sites.len();
    let d = g.dim();
    let mut best_iso: Option<(f64, u32, usize, usize)> = None;
    let mut best_ch: Option<(f64, u32, usize, usize)> = None;
    // Gray-code walk: toggling one site changes the boundary by
    // deg(v) - 2 |N(v) ∩ A| (added) or its negative (removed).
    let mut mask = 0u32;
    let mut boundary: i64 = 0;
    for step in 1u64..(1u64 << n) {
        let v = step.trailing_zeros() as usize;
        let deg = sg.adj[v].count_ones() as i64;
        let inside = (sg.adj[v] & mask).count_ones() as i64;
        if mask >> v & 1 == 0 {
            boundary += deg - 2 * inside;
        } else {
            boundary -= deg - 2 * inside;
        }
        mask ^= 1 << v;
        let size = mask.count_ones() as usize;
        if 2 * size > n {
            continue;
        }
        let b = boundary as usize;
        let iso = iso_ratio(b, size, d);
        let ch = b as f64 / size as f64;
        let better = |cur: &Option<(f64, u32, usize, usize)>, r: f64| cur.map_or(true, |c| r < c.0 || (r == c.0 && mask < c.1));
        if better(&best_iso, iso) {
            best_iso = Some((iso, mask, size, b));
        }
        if better(&best_ch, ch) {
            best_ch = Some((ch, mask, size, b));
        }
    }
    let ext = |x: Option<(f64, u32, usize, usize)>| {
        x.map(|(ratio, m, size, boundary)| Extremum { ratio, size, boundary, sites: mask_sites(&sg, m) })
    };
    Ok(ExactProfile { isoperimetric: ext(best_iso), cheeger: ext(best_ch) })
}

/// Subset generators for audits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Graph balls of dyadic radii around random centres.
    Balls,
    /// Half-space cuts along every axis.
    Halves,
    /// Neighbourhoods of removed boxes.
    Holes,
    /// Randomly grown connected blobs.
    Random,
    /// Every connected subset (graphs of at most 22 sites).
    Connected,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Balls, Family::Halves, Family::Holes, Family::Random, Family::Connected];

    pub fn name(&self) -> &'static str {
        match self {
            Family::Balls => "balls",
            Family::Halves => "halves",
            Family::Holes => "holes",
            Family::Random => "random",
            Family::Connected => "connected",
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Family>> {
        s.split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| {
                Family::ALL
                    .iter()
                    .find(|f| f.name() == t.trim())
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown subset family {t:?}")))
            })
            .collect()
    }
}

/// One audited subset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IsoReport {
    pub family: &'static str,
    pub descriptor: String,
    pub size: usize,
    pub boundary: usize,
    pub ratio: f64,
    pub gamma_ref: f64,
    pub pass: bool,
}

/// Audit parameters.
#[derive(Clone, Debug)]
pub struct AuditSpec {
    pub families: Vec<Family>,
    /// Random ball centres.
    pub ball_centres: usize,
    /// Random blobs per target size.
    pub random_blobs: usize,
    pub seed: u64,
    /// Inclusive subset-size window.
    pub min_size: usize,
    pub max_size: usize,
    pub gamma_ref: f64,
}

impl AuditSpec {
    pub fn new(families: Vec<Family>, seed: u64) -> Self {
        Self {
            families,
            ball_centres: 16,
            random_blobs: 8,
            seed,
            min_size: 1,
            max_size: usize::MAX,
            gamma_ref: 0.0,
        }
    }
}

/// Results of an audit with the worst (smallest) ratio.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditSummary {
    pub reports: Vec<IsoReport>,
    pub gamma_emp: Option<f64>,
    pub all_pass: bool,
}

impl AuditSummary {
    fn from_reports(reports: Vec<IsoReport>) -> Self {
        let gamma_emp = reports.iter().map(|r| r.ratio).min_by(f64::total_cmp);
        let all_pass = reports.iter().all(|r| r.pass);
        Self { reports, gamma_emp, all_pass }
    }

    /// Re-normalises every report to `boundary / norm(size)` against `gamma`.
    pub fn rescaled(&self, gamma: f64, norm: impl Fn(usize) -> f64) -> AuditSummary {
        let reports = self
            .reports
            .iter()
            .map(|r| {
                let ratio = r.boundary as f64 / norm(r.size);
                IsoReport { ratio, gamma_ref: gamma, pass: ratio >= gamma, ..r.clone() }
            })
            .collect();
        Self::from_reports(reports)
    }

    pub fn worst(&self) -> Option<&IsoReport> {
        self.reports.iter().min_by(|a, b| a.ratio.total_cmp(&b.ratio))
    }

    pub fn worst_in(&self, family: Family) -> Option<&IsoReport> {
        self.reports
            .iter()
            .filter(|r| r.family == family.name())
            .min_by(|a, b| a.ratio.total_cmp(&b.ratio))
    }

    /// CSV with columns `family,size,boundary,ratio,gamma_ref,pass`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["family", "size", "boundary", "ratio", "gamma_ref", "pass"])
            .map_err(|e| Error::Format(e.to_string()))?;
        for r in &self.reports {
            out.write_record([
                r.family.to_string(),
                r.size.to_string(),
                r.boundary.to_string(),
                format!("{:.12e}", r.ratio),
                format!("{:.6e}", r.gamma_ref),
                r.pass.to_string(),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Audits subsets of `g` drawn from the requested families. `holes` are
/// removed boxes (in the coordinates of `g`) used by [`Family::Holes`].
pub fn audit_graph(g: &Subgraph, holes: &[LatticeBox], spec: &AuditSpec) -> Result<AuditSummary> {
    let d = g.dim();
    let total = g.sites().count();
    let max_size = spec.max_size.min(total / 2);
    let mut candidates: Vec<(Family, String, SiteSet)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sites: Vec<usize> = g.sites().indices().collect();
    if sites.is_empty() {
        return Ok(AuditSummary::from_reports(vec![]));
    }
    let bx = *g.bx();
    for fam in &spec.families {
        match fam {
            Family::Balls => {
                let max_r = bx.sides().iter().sum::<u64>();
                for _ in 0..spec.ball_centres {
                    let c = bx.point_of(*sites.choose(&mut rng).expect("nonempty"));
                    let mut r = 1u64;
                    while r <= max_r {
                        let ball = graph_ball(g, &c, r)?;
                        let n = ball.sites.count();
                        if n > max_size {
                            break;
                        }
                        candidates.push((*fam, format!("ball {c} r={r}"), ball.sites));
                        r *= 2;
                    }
                }
            }
            Family::Halves => {
                for k in 0..d {
                    let side = bx.side(k) as i64;
                    for num in 1..8 {
                        let t = bx.corner()[k] + side * num / 8;
                        let set = SiteSet::from_fn(bx, |i| g.occupied(i) && bx.point_of(i)[k] < t);
                        candidates.push((*fam, format!("axis {k} < {t}"), set));
                    }
                }
            }
            Family::Holes => {
                for (h, hole) in holes.iter().enumerate() {
                    let mut m = 1u64;
                    let limit = bx.sides().iter().copied().max().unwrap_or(1);
                    while m <= limit {
                        let Ok(grown) = hole.grow(m) else { break };
                        let set = SiteSet::from_fn(bx, |i| g.occupied(i) && grown.contains(&bx.point_of(i)));
                        if set.count() > max_size {
                            break;
                        }
                        candidates.push((*fam, format!("hole {h} +{m}"), set));
                        m *= 2;
                    }
                    // The half-space through the hole, on the hole's side.
                    for k in 0..d {
                        let t = hole.upper()[k];
                        let set = SiteSet::from_fn(bx, |i| g.occupied(i) && bx.point_of(i)[k] < t);
                        candidates.push((*fam, format!("hole {h} axis {k} < {t}"), set));
                    }
                }
            }
            Family::Random => {
                let mut target = 1usize;
                while target <= max_size {
                    for _ in 0..spec.random_blobs {
                        let start = *sites.choose(&mut rng).expect("nonempty");
                        let set = random_blob(g, start, target, &mut rng);
                        candidates.push((*fam, format!("blob from {} size {target}", bx.point_of(start)), set));
                    }
                    target *= 2;
                }
            }
            Family::Connected => {
                let sg = small_graph(g)?;
                let n = sg.sites.len();
                for mask in 1u32..(1u32 << n) {
                    let size = mask.count_ones() as usize;
                    if 2 * size > n || !mask_connected(&sg, mask) {
                        continue;
                    }
                    let mut set = SiteSet::empty(bx);
                    for i in mask_sites(&sg, mask) {
                        set.set(i, true);
                    }
                    candidates.push((*fam, format!("mask {mask:#x}"), set));
                }
            }
        }
    }
    let reports = candidates
        .into_par_iter()
        .filter_map(|(fam, descriptor, set)| {
            let size = set.count();
            if size < spec.min_size.max(1) || size > max_size {
                return None;
            }
            let boundary = boundary_size(&set, g).expect("subset of the graph");
            let ratio = iso_ratio(boundary, size, d);
            Some(IsoReport {
                family: fam.name(),
                descriptor,
                size,
                boundary,
                ratio,
                gamma_ref: spec.gamma_ref,
                pass: ratio >= spec.gamma_ref,
            })
        })
        .collect();
    Ok(AuditSummary::from_reports(reports))
}

fn mask_connected(sg: &SmallGraph, mask: u32) -> bool {
    let first = mask.trailing_zeros();
    let mut seen = 1u32 << first;
    let mut frontier = seen;
    while frontier != 0 {
        let v = frontier.trailing_zeros() as usize;
        frontier &= frontier - 1;
        let new = sg.adj[v] & mask & !seen;
        seen |= new;
        frontier |= new;
    }
    seen == mask
}

/// Connected set grown from `start` by adding uniformly chosen frontier sites.
fn random_blob(g: &Subgraph, start: usize, target: usize, rng: &mut ChaCha8Rng) -> SiteSet {
    let mut set = SiteSet::empty(*g.bx());
    let mut frontier = vec![start];
    let mut queued = std::collections::HashSet::from([start]);
    let mut size = 0;
    while size < target && !frontier.is_empty() {
        let k = rng.gen_range(0..frontier.len());
        let v = frontier.swap_remove(k);
        set.set(v, true);
        size += 1;
        g.for_each_neighbor(v, |j| {
            if queued.insert(j) {
                frontier.push(j);
            }
        });
    }
    set
}

/// Reference constant for perforated-lattice isoperimetry: `1e-6` for
/// `d = 2`, otherwise
/// `(1 / (2d 32^d 27^d 1e6)) (1 - (2/3)^{1/d}) (1 - e^{-1/(16(d-1))})`.
pub fn gamma_reference(d: usize) -> f64 {
    if d <= 2 {
        return 1e-6;
    }
    let df = d as f64;
    1.0 / (2.0 * df * 32f64.powf(df) * 27f64.powf(df) * 1e6)
        * (1.0 - (2.0f64 / 3.0).powf(1.0 / df))
        * (1.0 - (-1.0 / (16.0 * (df - 1.0))).exp())
}

/// Audits subsets of the perforation `Q_{K,s,0}` viewed as a subgraph of
/// `G_0`, over the size window of the isoperimetric statement.
pub fn isop_audit(pf: &Perforation, families: &[Family], seed: u64) -> Result<AuditSummary> {
    let flat = pf.flatten(0)?;
    let d = flat.bx().dim();
    let g = Subgraph::new(flat);
    let full = g.bx().volume();
    let l0 = pf.ladder.L(0);
    let holes: Vec<LatticeBox> = pf
        .records
        .iter()
        .flat_map(|r| r.boxes(pf.ladder.r(r.level - 1) * pf.ladder.L(r.level - 1)))
        .filter_map(|b| {
            let side = b.side(0) / l0;
            LatticeBox::cube(b.corner().div_floor(l0 as i64), side).ok()
        })
        .collect();
    let mut spec = AuditSpec::new(families.to_vec(), seed);
    spec.max_size = full / 2;
    spec.min_size = if d == 2 {
        1
    } else {
        let ratio = (pf.ladder.L(pf.s) / l0) as f64;
        ratio.powi((d * d) as i32).min(usize::MAX as f64) as usize
    };
    spec.gamma_ref = gamma_reference(d);
    if families.contains(&Family::Connected) && g.sites().count() > BRUTE_FORCE_LIMIT {
        spec.families.retain(|f| *f != Family::Connected);
    }
    audit_graph(&g, &holes, &spec)
}

/// How a weak Poincaré constant was computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum PoincareMethod {
    Trivial,
    Dense,
    Iterative,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PoincareConstant<T> {
    /// Smallest `C_P` with `Var_{mu,B}(f) <= C_P r^2 sum_{E(W)} |∇f|^2`.
    pub value: T,
    /// Maximal generalised Rayleigh quotient, `C_P r^2`.
    pub quotient: T,
    pub ball_size: usize,
    pub energy_size: usize,
    pub method: PoincareMethod,
}

/// Largest energy-ball size solved densely.
pub const DENSE_POINCARE_LIMIT: usize = 2000;

/// Weak Poincaré constant of `B = B_g(x, r)` with energy on `W = B_g(x, ceil(C_W r))`,
/// where `mu` is the degree in `g` and the variance is centred at the `mu`-mean.
pub fn weak_poincare_constant<T: Real>(g: &Subgraph, x: &Point, r: u64, cw: f64) -> Result<PoincareConstant<T>> {
    weak_poincare_constant_using(g, x, r, cw, None)
}

/// As [`weak_poincare_constant`] with the solver forced when `method` is given.
pub fn weak_poincare_constant_using<T: Real>(
    g: &Subgraph,
    x: &Point,
    r: u64,
    cw: f64,
    method: Option<PoincareMethod>,
) -> Result<PoincareConstant<T>> {
    if r == 0 {
        return invalid("radius must be positive");
    }
    if !(cw >= 1.0) {
        return invalid(format!("C_W = {cw} must be >= 1"));
    }
    let outer = (cw * r as f64).ceil() as u64;
    let ball = graph_ball(g, x, r)?;
    let energy = graph_ball(g, x, outer)?;
    if energy.touches_face {
        return Err(Error::OutOfBounds(format!("B({x}, {outer}) reaches the box face")));
    }
    let w: Vec<usize> = energy.sites.indices().collect();
    let b: Vec<usize> = ball.sites.indices().collect();
    let trivial = |v: T| PoincareConstant {
        value: v,
        quotient: v,
        ball_size: b.len(),
        energy_size: w.len(),
        method: PoincareMethod::Trivial,
    };
    if b.len() <= 1 {
        return Ok(trivial(T::zero()));
    }
    let problem = PencilProblem::new(g, &w, &b);
    let method = match method {
        Some(PoincareMethod::Trivial) | None if w.len() <= DENSE_POINCARE_LIMIT => PoincareMethod::Dense,
        Some(PoincareMethod::Trivial) | None => PoincareMethod::Iterative,
        Some(m) => m,
    };
    let quotient = match method {
        PoincareMethod::Iterative => problem.iterative_max::<T>()?,
        _ => problem.dense_max::<T>()?,
    };
    let r2 = T::of((r * r) as f64);
    Ok(PoincareConstant {
        value: quotient / r2,
        quotient,
        ball_size: b.len(),
        energy_size: w.len(),
        method,
    })
}

/// `max f^T M f / f^T L f` with `M = D_B - mu mu^T / mu(B)` on `B` and `L`
/// the Laplacian of the graph induced on `W`.
struct PencilProblem {
    /// Slot in `W` of each site of `B`.
    b_slots: Vec<usize>,
    mu: Vec<f64>,
    /// Neighbour slots within `W`.
    adj: Vec<Vec<usize>>,
}

impl PencilProblem {
    fn new(g: &Subgraph, w: &[usize], b: &[usize]) -> Self {
        let slot: HashMap<usize, usize> = w.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let adj = w
            .iter()
            .map(|&i| {
                let mut v = Vec::new();
                g.for_each_neighbor(i, |j| {
                    if let Some(&s) = slot.get(&j) {
                        v.push(s);
                    }
                });
                v
            })
            .collect();
        Self {
            b_slots: b.iter().map(|i| slot[i]).collect(),
            mu: b.iter().map(|&i| g.degree(i) as f64).collect(),
            adj,
        }
    }

    fn n(&self) -> usize {
        self.adj.len()
    }

    /// Regularisation weight of `11^T`; it is annihilated by `M`.
    fn alpha(&self) -> f64 {
        1.0 / self.n() as f64
    }

    fn m_matrix<T: Real>(&self) -> DMatrix<T> {
        let k = self.b_slots.len();
        let total: f64 = self.mu.iter().sum();
        DMatrix::from_fn(k, k, |i, j| {
            let diag = if i == j { self.mu[i] } else { 0.0 };
            T::of(diag - self.mu[i] * self.mu[j] / total)
        })
    }

    fn dense_max<T: Real>(&self) -> Result<T> {
        let n = self.n();
        let alpha = self.alpha();
        let mut a = DMatrix::<T>::from_element(n, n, T::of(alpha));
        for (i, nb) in self.adj.iter().enumerate() {
            a[(i, i)] += T::of(nb.len() as f64);
            for &j in nb {
                a[(i, j)] -= T::one();
            }
        }
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::InternalConsistency("energy ball is not connected".into()))?;
        let k = self.b_slots.len();
        let mut rhs = DMatrix::<T>::zeros(n, k);
        for (c, &s) in self.b_slots.iter().enumerate() {
            rhs[(s, c)] = T::one();
        }
        let sol = chol.solve(&rhs);
        let kbb = DMatrix::from_fn(k, k, |i, j| (sol[(self.b_slots[i], j)] + sol[(self.b_slots[j], i)]) * T::of(0.5));
        let c = kbb
            .cholesky()
            .ok_or_else(|| Error::InternalConsistency("restricted Green matrix not positive definite".into()))?
            .unpack();
        let s = c.transpose() * self.m_matrix::<T>() * &c;
        let s = (&s + s.transpose()) * T::of(0.5);
        let eig = s.symmetric_eigenvalues();
        Ok(eig.iter().copied().fold(T::zero(), |m, v| if v > m { v } else { m }))
    }

    fn iterative_max<T: Real>(&self) -> Result<T> {
        let n = self.n();
        let alpha = T::of(self.alpha());
        let apply = |x: &[T], y: &mut [T]| {
            let sum = x.iter().fold(T::zero(), |a, &v| a + v);
            for (i, nb) in self.adj.iter().enumerate() {
                let mut acc = T::of(nb.len() as f64) * x[i];
                for &j in nb {
                    acc -= x[j];
                }
                y[i] = acc + alpha * sum;
            }
        };
        let inv_diag: Vec<T> = self.adj.iter().map(|nb| T::one() / (T::of(nb.len() as f64) + alpha)).collect();
        let total: f64 = self.mu.iter().sum();
        let m_apply = |v: &[T]| -> Vec<T> {
            // (M v) on W, supported on B.
            let mean = self
                .b_slots
                .iter()
                .zip(&self.mu)
                .fold(T::zero(), |a, (&s, &m)| a + T::of(m) * v[s])
                / T::of(total);
            let mut out = vec![T::zero(); n];
            for (&s, &m) in self.b_slots.iter().zip(&self.mu) {
                out[s] = T::of(m) * (v[s] - mean);
            }
            out
        };
        let dot = |a: &[T], b: &[T]| a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y);
        let tol = if std::mem::size_of::<T>() <= 4 { 1e-5 } else { 1e-10 };
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut v: Vec<T> = (0..n).map(|_| T::of(rng.gen::<f64>() - 0.5)).collect();
        let mut lambda = T::zero();
        for it in 0..5000 {
            let mv = m_apply(&v);
            let (next, _) = pcg(apply, &inv_diag, &mv, tol, 20 * n)?;
            // Rayleigh quotient v^T M v / v^T L v with L v from the solve.
            let num = dot(&v, &mv);
            let mut lv = vec![T::zero(); n];
            apply(&v, &mut lv);
            let den = dot(&v, &lv);
            let q = if den > T::zero() { num / den } else { T::zero() };
            let norm = dot(&next, &next).sqrt();
            if norm == T::zero() {
                return Ok(T::zero());
            }
            v = next.iter().map(|&x| x / norm).collect();
            if it > 3 && (q - lambda).abs() <= T::of(tol * 10.0) * q.abs().max(T::one()) {
                return Ok(q);
            }
            lambda = q;
        }
        Err(Error::NonConvergence { iterations: 5000, residual: f64::NAN })
    }
}
