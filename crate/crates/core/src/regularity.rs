//! Good, regular and very good balls of a subgraph.
//!
//! A certificate combines an exact volume check, a candidate extension set
//! built from the extended largest cluster of a covering box, a subset audit
//! of that set and, optionally, the measured weak Poincaré constant. The
//! isoperimetric part is audit-based: passing it means no audited subset
//! violated the inequality.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::clusters::{extend_cluster, largest_cluster};
use crate::error::{invalid, Error, Result};
use crate::isoperimetry::{audit_graph, weak_poincare_constant, AuditSpec, Family, BRUTE_FORCE_LIMIT};
use crate::lattice::{connected_components, graph_ball, Bfs, LatticeBox, Point, Subgraph};
use crate::renorm::ScaleLadder;
use crate::rng::derive_seed;
use crate::samplers::{sample, Model, DEFAULT_GUARD_FACTOR};

/// `(C_V, C_P, C_W, epsilon)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BallParams {
    pub cv: f64,
    pub cp: f64,
    pub cw: f64,
    pub epsilon: f64,
}

impl BallParams {
    /// Parameters with `epsilon = 1/d`.
    pub fn new(cv: f64, cp: f64, cw: f64, d: usize) -> Result<Self> {
        let p = Self { cv, cp, cw, epsilon: 1.0 / d as f64 };
        p.validate(d)?;
        Ok(p)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if !(self.cv > 0.0 && self.cp > 0.0 && self.cw >= 1.0) {
            return invalid("need C_V > 0, C_P > 0 and C_W >= 1");
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0 / d as f64) {
            return invalid(format!("epsilon {} outside (0, 1/d]", self.epsilon));
        }
        Ok(())
    }
}

/// How certificates are produced.
#[derive(Clone, Debug)]
pub struct CertifyOptions {
    /// Ladder and level whose extended clusters serve as extension sets.
    pub ladder: ScaleLadder,
    pub level: usize,
    pub families: Vec<Family>,
    pub seed: u64,
    /// Also measure the weak Poincaré constant.
    pub poincare: bool,
}

impl CertifyOptions {
    pub fn new(ladder: ScaleLadder, level: usize) -> Self {
        Self {
            ladder,
            level,
            families: vec![Family::Balls, Family::Halves, Family::Random, Family::Connected],
            seed: 0,
            poincare: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Regular,
    GoodOnly,
    Fail,
}

/// Candidate extension set `C_{B(x,r)}`: the extended largest cluster of
/// `Q_{K',s}(y_s)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExtensionInfo {
    pub origin: Point,
    pub k: u64,
    pub size: usize,
    pub contains_ball: bool,
    /// Largest graph distance from the centre to the set, `None` if some
    /// site is unreachable.
    pub reach: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BallCertificate {
    pub centre: Point,
    pub radius: u64,
    pub params: BallParams,
    /// `mu(B(x, r))`.
    pub volume: u64,
    /// `mu(B(x, r)) / (C_V r^d)`.
    pub cv_margin: f64,
    pub extension: Option<ExtensionInfo>,
    /// Smallest audited `|∂A| / (|A|^{(d-1)/d + eps} r^{-eps d})`.
    pub iso_constant: Option<f64>,
    /// `iso_constant^{-2}`.
    pub cp_implied: Option<f64>,
    /// `reach / r`.
    pub cw_achieved: Option<f64>,
    /// Measured weak Poincaré constant with the given `C_W`.
    pub poincare: Option<f64>,
    pub families: Vec<&'static str>,
    pub verdict: Verdict,
}

impl BallCertificate {
    pub fn volume_ok(&self) -> bool {
        self.cv_margin >= 1.0
    }

    pub fn regular(&self) -> bool {
        self.volume_ok()
            && self.extension.as_ref().is_some_and(|e| e.contains_ball)
            && self.cw_achieved.is_some_and(|c| c <= self.params.cw)
            && self.iso_constant.is_some_and(|g| g >= self.params.cp.powf(-0.5))
    }

    pub fn good(&self) -> bool {
        self.volume_ok() && self.poincare.is_some_and(|c| c <= self.params.cp)
    }

    /// Verdict from the stored quantities.
    pub fn recompute(&self) -> Verdict {
        if self.regular() {
            Verdict::Regular
        } else if self.good() {
            Verdict::GoodOnly
        } else {
            Verdict::Fail
        }
    }

    /// Regular implies good, when the Poincaré constant was measured.
    pub fn claim_consistent(&self) -> Option<bool> {
        self.poincare.map(|c| !self.regular() || c <= self.params.cp)
    }
}

/// `(K', y_s)` with `B_inf(x, r) ⊆ Q_{K',s}(y_s)` and `K' = min{k : k L_s >= 2r + 1} + 1`.
pub fn covering_box(ladder: &ScaleLadder, level: usize, x: &Point, r: u64) -> (u64, Point) {
    let ls = ladder.L(level);
    let k = (2 * r + 1).div_ceil(ls) + 1;
    let mut ys = *x;
    for a in 0..x.dim() {
        ys = ys.with(a, (x[a] - r as i64).div_euclid(ls as i64) * ls as i64);
    }
    (k, ys)
}

pub fn certify_ball(
    g: &Subgraph,
    x: &Point,
    r: u64,
    params: &BallParams,
    opts: &CertifyOptions,
) -> Result<BallCertificate> {
    let d = g.dim();
    params.validate(d)?;
    if r == 0 {
        return invalid("radius must be positive");
    }
    let outer = (params.cw * r as f64).ceil() as u64;
    let wide = graph_ball(g, x, outer)?;
    if wide.touches_face {
        return Err(Error::OutOfBounds(format!("B({x}, {outer}) reaches the domain boundary")));
    }
    let ball = graph_ball(g, x, r)?;
    let volume = ball.measure;
    let cv_margin = volume as f64 / (params.cv * (r as f64).powi(d as i32));

    let (k, ys) = covering_box(&opts.ladder, opts.level, x, r);
    let cd = largest_cluster(g, &opts.ladder, k, opts.level, &ys, opts.ladder.L(0))?;
    let ec = extend_cluster(&cd, g)?;
    let set = ec.union;
    let mut bfs = Bfs::new(g.bx());
    let src = g.bx().index_of(x).expect("centre inside");
    bfs.run(g, src, u32::MAX, |_| true);
    let reach = set
        .indices()
        .map(|i| bfs.distance(i).map(u64::from))
        .try_fold(0u64, |m, dist| dist.map(|v| m.max(v)));
    let contains_ball = ball.sites.is_subset(&set);
    let extension = ExtensionInfo { origin: ys, k, size: set.count(), contains_ball, reach };

    let sub = Subgraph::new(set);
    let mut spec = AuditSpec::new(opts.families.clone(), opts.seed);
    if sub.sites().count() > BRUTE_FORCE_LIMIT {
        spec.families.retain(|f| *f != Family::Connected);
    }
    let families: Vec<&'static str> = spec.families.iter().map(|f| f.name()).collect();
    let df = d as f64;
    let scale = (r as f64).powf(-params.epsilon * df);
    let audit = audit_graph(&sub, &[], &spec)?.rescaled(params.cp.powf(-0.5), |a| {
        (a as f64).powf((df - 1.0) / df + params.epsilon) * scale
    });
    // No admissible subset: the inequality holds vacuously.
    let iso_constant = Some(audit.gamma_emp.unwrap_or(f64::INFINITY));
    let cp_implied = iso_constant.map(|g| g.powi(-2));
    let cw_achieved = reach.map(|m| m as f64 / r as f64);
    let poincare = if opts.poincare {
        Some(weak_poincare_constant::<f64>(g, x, r, params.cw)?.value)
    } else {
        None
    };
    let mut cert = BallCertificate {
        centre: *x,
        radius: r,
        params: *params,
        volume,
        cv_margin,
        extension: Some(extension),
        iso_constant,
        cp_implied,
        cw_achieved,
        poincare,
        families,
        verdict: Verdict::Fail,
    };
    cert.verdict = cert.recompute();
    Ok(cert)
}

/// Scan discretisation.
#[derive(Clone, Debug)]
pub struct ScanOptions {
    pub certify: CertifyOptions,
    /// Sub-ball centres per radius.
    pub max_centres: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScanFailure {
    pub centre: Point,
    pub radius: u64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VeryGoodScan {
    pub centre: Point,
    pub big_r: u64,
    /// Probed radii, increasing.
    pub radii: Vec<u64>,
    /// Smallest probed radius from which every probed sub-ball is good.
    pub n: Option<u64>,
    /// `R^{1/(d+2)}`.
    pub threshold: f64,
    pub very_good: bool,
    pub tested: usize,
    pub failures: Vec<ScanFailure>,
}

impl VeryGoodScan {
    /// `N <= R^theta`.
    pub fn within(&self, theta: f64) -> bool {
        self.n.is_some_and(|n| n as f64 <= (self.big_r as f64).powf(theta))
    }

    /// Very good with a larger admissible `N' >= N`.
    pub fn very_good_with(&self, n_prime: u64) -> bool {
        self.n.is_some_and(|n| n <= n_prime) && (n_prime as f64) <= self.threshold
    }
}

/// Radii `floor(R^{1/(d+2)})`, powers of two and `R`.
pub fn scan_radii(big_r: u64, d: usize) -> Vec<u64> {
    let t = (big_r as f64).powf(1.0 / (d as f64 + 2.0)).floor().max(1.0) as u64;
    let mut set: BTreeSet<u64> = BTreeSet::from([t.min(big_r), big_r]);
    let mut p = 1u64;
    while p < big_r {
        set.insert(p);
        p *= 2;
    }
    set.into_iter().collect()
}

/// Certifies sub-balls `B(y, r) ⊆ B(x, R)` for each probed radius, from
/// the largest down, and reports the smallest radius `N` above which every
/// probed sub-ball is good (regular or good-only).
pub fn very_good_scan(g: &Subgraph, x: &Point, big_r: u64, params: &BallParams, opts: &ScanOptions) -> Result<VeryGoodScan> {
    let d = g.dim();
    params.validate(d)?;
    if big_r == 0 {
        return invalid("R must be positive");
    }
    let bx = *g.bx();
    let src = bx
        .index_of(x)
        .filter(|&i| g.occupied(i))
        .ok_or_else(|| Error::InvalidArgument(format!("centre {x} is not occupied")))?;
    let mut from_x = Bfs::new(&bx);
    let inside: Vec<usize> = from_x.run(g, src, big_r as u32, |_| true).to_vec();
    let radii = scan_radii(big_r, d);
    let threshold = (big_r as f64).powf(1.0 / (d as f64 + 2.0));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut failures = Vec::new();
    let mut tested = 0;
    let mut n = None;
    let mut ball_bfs = Bfs::new(&bx);
    for &r in radii.iter().rev() {
        let spacing = (r / 2).max(1) as i64;
        let mut centres: Vec<usize> = inside
            .iter()
            .copied()
            .filter(|&i| {
                let p = bx.point_of(i);
                (0..d).all(|a| (p[a] - x[a]).rem_euclid(spacing) == 0)
            })
            .collect();
        centres.shuffle(&mut rng);
        let mut taken = 0;
        let mut ok = true;
        for y in centres {
            if taken >= opts.max_centres {
                break;
            }
            let contained = ball_bfs
                .run(g, y, r as u32, |_| true)
                .iter()
                .all(|&z| from_x.distance(z).is_some_and(|v| v as u64 <= big_r));
            if !contained {
                continue;
            }
            taken += 1;
            tested += 1;
            let py = bx.point_of(y);
            let cert = certify_ball(g, &py, r, params, &opts.certify)?;
            if cert.verdict == Verdict::Fail {
                ok = false;
                failures.push(ScanFailure { centre: py, radius: r, verdict: cert.verdict });
            }
        }
        if !ok {
            break;
        }
        n = Some(r);
    }
    let very_good = n.is_some_and(|v| v as f64 <= threshold);
    Ok(VeryGoodScan { centre: *x, big_r, radii, n, threshold, very_good, tested, failures })
}

/// Monte-Carlo tail `P[B(x, R) is not very good]` by radius.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TailCurve {
    pub radii: Vec<u64>,
    pub trials: usize,
    pub failures: Vec<usize>,
    pub frequency: Vec<f64>,
    /// Exponent `beta` of `-log P ~ c (log r)^beta`, fitted on radii with
    /// `0 < P < 1`.
    pub exponent: Option<f64>,
}

impl TailCurve {
    pub fn monotone_decreasing(&self) -> bool {
        self.frequency.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Side of the sampling box used by [`estimate_rvgb_tail`].
pub fn tail_box_side(big_r: u64, params: &BallParams, ladder: &ScaleLadder, level: usize) -> u64 {
    let ls = ladder.L(level);
    let outer = ((1.0 + params.cw) * big_r as f64).ceil() as u64;
    2 * (outer + 2 * big_r + 4 * ls) + 1
}

/// For each trial and radius, samples a configuration around the origin,
/// picks the site of the largest component closest to the centre and
/// scans it.
pub fn estimate_rvgb_tail(
    model: Model,
    dim: usize,
    radii: &[u64],
    trials: usize,
    params: &BallParams,
    opts: &ScanOptions,
    seed: u64,
) -> Result<TailCurve> {
    if trials == 0 {
        return invalid("trials must be positive");
    }
    model.validate(dim)?;
    let mut failures = vec![0usize; radii.len()];
    for t in 0..trials {
        for (j, &big_r) in radii.iter().enumerate() {
            let side = tail_box_side(big_r, params, &opts.certify.ladder, opts.certify.level);
            let half = (side / 2) as i64;
            let bx = LatticeBox::cube(Point::origin(dim).add(&Point::new(&vec![-half; dim])?), side)?;
            let (snap, _) = sample(model, &bx, derive_seed(seed, t as u64), DEFAULT_GUARD_FACTOR)?;
            let g = snap.subgraph();
            let cc = connected_components(&g);
            let Some((big, _)) = cc.largest() else {
                failures[j] += 1;
                continue;
            };
            let origin = Point::origin(dim);
            let x = g
                .sites()
                .indices()
                .filter(|&i| cc.label(i) == Some(big))
                .map(|i| bx.point_of(i))
                .min_by_key(|p| (p.l1(&origin), *p))
                .expect("nonempty component");
            let scan_opts = ScanOptions { seed: derive_seed(opts.seed, t as u64), ..opts.clone() };
            let fails = match very_good_scan(&g, &x, big_r, params, &scan_opts) {
                Ok(scan) => !scan.very_good,
                Err(Error::OutOfBounds(_)) => true,
                Err(e) => return Err(e),
            };
            if fails {
                failures[j] += 1;
            }
        }
    }
    let frequency: Vec<f64> = failures.iter().map(|&f| f as f64 / trials as f64).collect();
    let pts: Vec<(f64, f64)> = radii
        .iter()
        .zip(&frequency)
        .filter(|(&r, &p)| r > 1 && p > 0.0 && p < 1.0)
        .map(|(&r, &p)| ((r as f64).ln().ln(), (-p.ln()).ln()))
        .collect();
    let exponent = (pts.len() >= 2).then(|| {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    });
    Ok(TailCurve { radii: radii.to_vec(), trials, failures, frequency, exponent })
}
