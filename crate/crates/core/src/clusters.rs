//! Largest clusters of `S_r` in boxes `Q_{K,s}(x)`, their local extensions,
//! the good-box event `H`, and empirical distance and growth constants.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::isoperimetry::{audit_graph, gamma_reference, AuditSpec, AuditSummary, Family, BRUTE_FORCE_LIMIT};
use crate::lattice::{
    connected_components, diameter_filter, graph_ball, Bfs, LatticeBox, Point, Radius, SiteSet, Subgraph,
};
use crate::perforate::q_box;
use crate::renorm::{BadnessField, ScaleLadder};

/// Components of `S_r ∩ Q_{K,s}(x)` with the selected largest one.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterDecomposition {
    pub ambient: LatticeBox,
    pub origin: Point,
    pub k: u64,
    pub level: usize,
    /// `L_s` of the ladder.
    pub ls: u64,
    /// Diameter threshold `r` of `S_r`.
    pub filter: u64,
    /// Component sizes, ordered by smallest member.
    pub sizes: Vec<usize>,
    pub largest: Option<usize>,
    pub tie: bool,
    /// Sites of the largest component, in the coordinates of the domain.
    pub core: SiteSet,
}

impl ClusterDecomposition {
    pub fn is_empty(&self) -> bool {
        self.largest.is_none()
    }

    pub fn core_size(&self) -> usize {
        self.largest.map_or(0, |l| self.sizes[l])
    }
}

/// `x + [-2 L_s, (K + 2) L_s)^d`.
pub fn enlarged_box(ladder: &ScaleLadder, k: u64, level: usize, x: &Point) -> Result<LatticeBox> {
    q_box(ladder, k, level, x)?.grow(2 * ladder.L(level))
}

fn require_inside(inner: &LatticeBox, domain: &LatticeBox, what: &str) -> Result<()> {
    if !domain.contains_box(inner) {
        return Err(Error::OutOfBounds(format!("{what} {inner:?} not inside the domain {domain:?}")));
    }
    Ok(())
}

/// Largest component of `S_r ∩ Q_{K,s}(x)`; ties go to the component with
/// the lexicographically smallest member. `S_r` is computed from the
/// components of `s` in its own box.
pub fn largest_cluster(
    s: &Subgraph,
    ladder: &ScaleLadder,
    k: u64,
    level: usize,
    x: &Point,
    r: u64,
) -> Result<ClusterDecomposition> {
    if k == 0 {
        return invalid("K must be positive");
    }
    let q = q_box(ladder, k, level, x)?;
    require_inside(&q, s.bx(), "box")?;
    let s_r = diameter_filter(s, Radius::Finite(r));
    let bx = *s.bx();
    let inside = SiteSet::from_fn(bx, |i| s_r.get(i) && q.contains(&bx.point_of(i)));
    let cc = connected_components(&Subgraph::new(inside));
    let sizes: Vec<usize> = (0..cc.count() as u32).map(|l| cc.size(l)).collect();
    let (largest, tie, core) = match cc.largest() {
        Some((l, tie)) => (Some(l as usize), tie, cc.sites(l)),
        None => (None, false, SiteSet::empty(bx)),
    };
    Ok(ClusterDecomposition {
        ambient: q,
        origin: *x,
        k,
        level,
        ls: ladder.L(level),
        filter: r,
        sizes,
        largest,
        tie,
        core,
    })
}

/// `C̃ = C ∪ E`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedCluster {
    pub origin: Point,
    pub k: u64,
    pub ls: u64,
    pub core: SiteSet,
    /// Occupied sites outside the core reached from a core site `y` inside
    /// `S ∩ B(y, 2 L_s)`.
    pub extension: SiteSet,
    pub union: SiteSet,
}

impl ExtendedCluster {
    pub fn enlarged(&self) -> Result<LatticeBox> {
        LatticeBox::cube(self.origin, self.k * self.ls)?.grow(2 * self.ls)
    }
}

/// Prefix sums of an indicator over a box.
struct BoxCounts {
    bx: LatticeBox,
    dims: Vec<usize>,
    sums: Vec<u32>,
}

impl BoxCounts {
    fn new(set: &SiteSet) -> Self {
        let bx = *set.bx();
        let d = bx.dim();
        let dims: Vec<usize> = bx.sides().iter().map(|&s| s as usize + 1).collect();
        let total: usize = dims.iter().product();
        let mut sums = vec![0u32; total];
        let mut strides = vec![1usize; d];
        for k in (0..d.saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * dims[k + 1];
        }
        for i in set.indices() {
            let p = bx.point_of(i);
            let at: usize = (0..d).map(|k| (p[k] - bx.corner()[k] + 1) as usize * strides[k]).sum();
            sums[at] = 1;
        }
        // Cumulative sums along each axis in turn.
        for k in 0..d {
            for at in 0..total {
                if (at / strides[k]) % dims[k] != 0 {
                    sums[at] += sums[at - strides[k]];
                }
            }
        }
        Self { bx, dims, sums }
    }

    /// Number of marked sites in `window ∩ box`.
    fn count(&self, window: &LatticeBox) -> u32 {
        let Some(w) = window.intersect(&self.bx) else { return 0 };
        let d = self.bx.dim();
        let mut total: i64 = 0;
        for corner in 0..1usize << d {
            let mut at = 0usize;
            let mut stride = 1usize;
            let mut sign = 1i64;
            for k in (0..d).rev() {
                let lo = (w.corner()[k] - self.bx.corner()[k]) as usize;
                let off = if corner >> k & 1 == 1 {
                    lo + w.side(k) as usize
                } else {
                    sign = -sign;
                    lo
                };
                at += off * stride;
                stride *= self.dims[k];
            }
            total += sign * self.sums[at] as i64;
        }
        total as u32
    }
}

/// Extends the largest cluster by all sites it is locally connected to.
pub fn extend_cluster(cd: &ClusterDecomposition, s: &Subgraph) -> Result<ExtendedCluster> {
    let bx = *s.bx();
    if cd.core.bx() != &bx {
        return invalid("decomposition and subgraph live in different boxes");
    }
    let enlarged = cd.ambient.grow(2 * cd.ls)?;
    require_inside(&enlarged, &bx, "enlarged box")?;
    let reach = 2 * cd.ls;
    let others = s.sites().difference(&cd.core)?;
    let counts = BoxCounts::new(&others);
    let core: Vec<usize> = cd.core.indices().collect();
    let found: Vec<Vec<usize>> = core
        .par_iter()
        .map_init(
            || Bfs::new(&bx),
            |bfs, &y| {
                let py = bx.point_of(y);
                let ball = LatticeBox::centered(&py, reach).expect("ball fits the domain");
                if counts.count(&ball) == 0 {
                    return Vec::new();
                }
                bfs.run(s, y, u32::MAX, |j| ball.contains(&bx.point_of(j)))
                    .iter()
                    .copied()
                    .filter(|&j| others.get(j))
                    .collect()
            },
        )
        .collect();
    let mut extension = SiteSet::empty(bx);
    for j in found.into_iter().flatten() {
        extension.set(j, true);
    }
    let union = cd.core.union(&extension)?;
    Ok(ExtendedCluster { origin: cd.origin, k: cd.k, ls: cd.ls, core: cd.core.clone(), extension, union })
}

/// Why the event `H` fails.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum HWitness {
    /// A bad level-`s` vertex, in lattice coordinates.
    BadVertex(Point),
    /// Sites of `S_{L_s} ∩ Q` within sup-distance `L_s` that are not
    /// connected in `S ∩ B(x, 2 L_s)`.
    Disconnected(Point, Point),
}

/// Checks `H_{K,s}(x_s)`. `None` means the event occurs.
pub fn event_h(
    s: &Subgraph,
    badness: &BadnessField,
    k: u64,
    level: usize,
    xs: &Point,
) -> Result<Option<HWitness>> {
    let ladder = &badness.ladder;
    if level > badness.nmax() {
        return invalid(format!("level {level} is not classified"));
    }
    if k == 0 {
        return invalid("K must be positive");
    }
    let ls = ladder.L(level);
    if xs.coords().iter().any(|c| c.rem_euclid(ls as i64) != 0) {
        return invalid(format!("{xs} is not a vertex of the level-{level} grid"));
    }
    let coarse = LatticeBox::cube(xs.div_floor(ls as i64), k)?.grow(2)?;
    for v in coarse.points().map(|c| c.scale(ls as i64)) {
        match badness.is_bad(level, &v) {
            None => return Err(Error::OutOfBounds(format!("level-{level} vertex {v} is not classified"))),
            Some(true) => return Ok(Some(HWitness::BadVertex(v))),
            Some(false) => {}
        }
    }
    let q = q_box(ladder, k, level, xs)?;
    require_inside(&q.grow(2 * ls)?, s.bx(), "enlarged box")?;
    let bx = *s.bx();
    let s_ls = diameter_filter(s, Radius::Finite(ls));
    let sources: Vec<usize> = s_ls.indices().filter(|&i| q.contains(&bx.point_of(i))).collect();
    let witness = sources
        .par_iter()
        .map_init(
            || Bfs::new(&bx),
            |bfs, &x| {
                let px = bx.point_of(x);
                let ball = LatticeBox::centered(&px, 2 * ls).expect("ball fits the domain");
                bfs.run(s, x, u32::MAX, |j| ball.contains(&bx.point_of(j)));
                let near = LatticeBox::centered(&px, ls).ok()?.intersect(&q)?;
                let hit = near.points().find(|py| {
                    let j = bx.index_of(py).expect("inside the domain");
                    s_ls.get(j) && bfs.distance(j).is_none()
                });
                hit.map(|py| HWitness::Disconnected(px, py))
            },
        )
        .find_first(|w| w.is_some())
        .flatten();
    Ok(witness)
}

/// Graph distance in `s`, or `None` if disconnected.
pub fn chemical_distance(s: &Subgraph, y: &Point, z: &Point) -> Result<Option<u64>> {
    let bx = s.bx();
    let (Some(a), Some(b)) = (bx.index_of(y), bx.index_of(z)) else {
        return Err(Error::OutOfBounds(format!("{y} or {z} outside {bx:?}")));
    };
    if !s.occupied(a) || !s.occupied(b) {
        return invalid("endpoints must be occupied");
    }
    let mut bfs = Bfs::new(bx);
    bfs.run(s, a, u32::MAX, |_| true);
    Ok(bfs.distance(b).map(u64::from))
}

/// Maximum ratio over pairs in one sup-distance shell. Shell 0 holds
/// `y = y'`, shell `k >= 1` holds distances in `[2^{k-1}, 2^k)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShellStat {
    pub shell: u32,
    pub pairs: usize,
    pub max_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChemicalReport {
    pub pairs: usize,
    /// Pairs not connected in the domain.
    pub disconnected: usize,
    /// Largest `d_S(y, y') / max{|y - y'|_inf, L_s^d}`; infinite if any pair
    /// is disconnected.
    pub max_ratio: f64,
    pub shells: Vec<ShellStat>,
}

fn shell_of(dist: u64) -> u32 {
    if dist == 0 {
        0
    } else {
        64 - dist.leading_zeros()
    }
}

/// Samples core pairs stratified by dyadic sup-distance shells and compares
/// `d_S` with `max{|y - y'|_inf, L_s^d}`.
pub fn chemical_distance_check(ec: &ExtendedCluster, s: &Subgraph, pairs: usize, seed: u64) -> Result<ChemicalReport> {
    let bx = *s.bx();
    let d = bx.dim() as i32;
    let core: Vec<usize> = ec.core.indices().collect();
    if core.is_empty() || pairs == 0 {
        return Ok(ChemicalReport { pairs: 0, disconnected: 0, max_ratio: 0.0, shells: vec![] });
    }
    let scale = (ec.ls as f64).powi(d);
    let n_sources = ((pairs as f64).sqrt().ceil() as usize).max(1);
    let per_source = pairs.div_ceil(n_sources);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources: Vec<(usize, u64)> = (0..n_sources)
        .map(|_| (*core.choose(&mut rng).expect("nonempty"), rand::Rng::gen(&mut rng)))
        .collect();
    let samples: Vec<(u32, Option<f64>)> = sources
        .par_iter()
        .map_init(
            || Bfs::new(&bx),
            |bfs, &(y, sub_seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
                let py = bx.point_of(y);
                bfs.run(s, y, u32::MAX, |_| true);
                let mut shells: Vec<Vec<usize>> = Vec::new();
                for &z in &core {
                    let sh = shell_of(py.linf(&bx.point_of(z))) as usize;
                    if shells.len() <= sh {
                        shells.resize_with(sh + 1, Vec::new);
                    }
                    shells[sh].push(z);
                }
                let live: Vec<usize> = (0..shells.len()).filter(|&k| !shells[k].is_empty()).collect();
                (0..per_source)
                    .map(|_| {
                        let sh = *live.choose(&mut rng).expect("own shell is nonempty");
                        let z = *shells[sh].choose(&mut rng).expect("nonempty shell");
                        let sup = py.linf(&bx.point_of(z)) as f64;
                        let ratio = bfs.distance(z).map(|dist| dist as f64 / sup.max(scale));
                        (sh as u32, ratio)
                    })
                    .collect::<Vec<_>>()
            },
        )
        .flatten()
        .collect();
    let mut shells: Vec<ShellStat> = Vec::new();
    let mut disconnected = 0;
    let mut max_ratio: f64 = 0.0;
    for (sh, ratio) in &samples {
        let ratio = match ratio {
            Some(r) => *r,
            None => {
                disconnected += 1;
                f64::INFINITY
            }
        };
        max_ratio = max_ratio.max(ratio);
        match shells.iter_mut().find(|st| st.shell == *sh) {
            Some(st) => {
                st.pairs += 1;
                st.max_ratio = st.max_ratio.max(ratio);
            }
            None => shells.push(ShellStat { shell: *sh, pairs: 1, max_ratio: ratio }),
        }
    }
    shells.sort_by_key(|st| st.shell);
    Ok(ChemicalReport { pairs: samples.len(), disconnected, max_ratio, shells })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VolumeSample {
    pub centre: Point,
    pub radius: u64,
    pub measure: u64,
    /// `mu(B_S(y, r)) / r^d`.
    pub ratio: f64,
    /// `r` lies in `[C L_s^d, K L_s]`.
    pub in_range: bool,
    /// The ball reached a face of the domain.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VolumeReport {
    pub samples: Vec<VolumeSample>,
    /// Minimum ratio over in-range, untruncated samples.
    pub min_ratio: Option<f64>,
}

/// Volume-growth parameters: radii to probe, number of random core centres
/// and the chemical-distance constant `C` fixing the lower radius bound.
#[derive(Clone, Debug)]
pub struct VolumeSpec {
    pub radii: Vec<u64>,
    pub centres: usize,
    pub c_chem: f64,
    pub seed: u64,
}

/// Measures `mu(B_S(y, r)) / r^d` for sampled core vertices.
pub fn volume_growth_check(ec: &ExtendedCluster, s: &Subgraph, spec: &VolumeSpec) -> Result<VolumeReport> {
    let bx = *s.bx();
    let d = bx.dim() as i32;
    let core: Vec<usize> = ec.core.indices().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centres: Vec<usize> = core.choose_multiple(&mut rng, spec.centres.min(core.len())).copied().collect();
    let lo = spec.c_chem * (ec.ls as f64).powi(d);
    let hi = (ec.k * ec.ls) as f64;
    let mut samples = Vec::new();
    for &c in &centres {
        let pc = bx.point_of(c);
        for &r in &spec.radii {
            if r == 0 {
                return invalid("radii must be positive");
            }
            let ball = graph_ball(s, &pc, r)?;
            samples.push(VolumeSample {
                centre: pc,
                radius: r,
                measure: ball.measure,
                ratio: ball.measure as f64 / (r as f64).powi(d),
                in_range: (r as f64) >= lo && (r as f64) <= hi,
                truncated: ball.touches_face,
            });
        }
    }
    let min_ratio = samples
        .iter()
        .filter(|v| v.in_range && !v.truncated)
        .map(|v| v.ratio)
        .min_by(f64::total_cmp);
    Ok(VolumeReport { samples, min_ratio })
}

/// Audits of subsets of `C̃` against `gamma |A|^{(d-1)/d + eps} ((K+4) L_s)^{-eps d}`
/// and against the `eps = 1/d` form `gamma |A| / ((K+4) L_s)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExtendedIsopReport {
    pub epsilon: f64,
    pub gamma: f64,
    pub general: AuditSummary,
    pub linear: AuditSummary,
}

/// Audits subsets of `C̃` (boundary taken inside `C̃`). `gamma = None`
/// uses [`gamma_reference`].
pub fn extended_isop_audit(
    ec: &ExtendedCluster,
    epsilon: f64,
    gamma: Option<f64>,
    families: &[Family],
    holes: &[LatticeBox],
    seed: u64,
) -> Result<ExtendedIsopReport> {
    let d = ec.union.bx().dim();
    if !(epsilon > 0.0 && epsilon <= 1.0 / d as f64) {
        return invalid(format!("epsilon {epsilon} outside (0, 1/d]"));
    }
    let g = Subgraph::new(ec.union.clone());
    let mut spec = AuditSpec::new(families.to_vec(), seed);
    if g.sites().count() > BRUTE_FORCE_LIMIT {
        spec.families.retain(|f| *f != Family::Connected);
    }
    let raw = audit_graph(&g, holes, &spec)?;
    let gamma = gamma.unwrap_or_else(|| gamma_reference(d));
    let span = ((ec.k + 4) * ec.ls) as f64;
    let df = d as f64;
    let general = raw.rescaled(gamma, |a| {
        (a as f64).powf((df - 1.0) / df + epsilon) * span.powf(-epsilon * df)
    });
    let linear = raw.rescaled(gamma, |a| a as f64 / span);
    Ok(ExtendedIsopReport { epsilon, gamma, general, linear })
}

/// First pair `x, y` of `C̃` with `|x - y|_inf <= L_s` that is not connected
/// inside `C̃ ∩ B(x, factor L_s)`.
pub fn local_connectivity_violation(ec: &ExtendedCluster, factor: u64) -> Result<Option<(Point, Point)>> {
    let g = Subgraph::new(ec.union.clone());
    let bx = *g.bx();
    let sites: Vec<usize> = ec.union.indices().collect();
    let found = sites
        .par_iter()
        .map_init(
            || Bfs::new(&bx),
            |bfs, &x| {
                let px = bx.point_of(x);
                let ball = LatticeBox::centered(&px, factor * ec.ls).ok()?;
                bfs.run(&g, x, u32::MAX, |j| ball.contains(&bx.point_of(j)));
                let near = LatticeBox::centered(&px, ec.ls).ok()?.intersect(&bx)?;
                let hit = near.points().find(|py| {
                    let j = bx.index_of(py).expect("inside the box");
                    ec.union.get(j) && bfs.distance(j).is_none()
                });
                hit.map(|py| (px, py))
            },
        )
        .find_first(|w| w.is_some())
        .flatten();
    Ok(found)
}
