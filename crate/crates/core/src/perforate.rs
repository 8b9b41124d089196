//! Multiscale perforation of `G_0 ∩ Q_{K,s}(x_s)`: at each scale `L_i`
//! the boxes covering the `(i-1)`-bad blobs of every `i`-good vertex are
//! removed, and the recursion continues in what remains.
//!
//! Vertex sets are stored in coarse coordinates `x / L_i`.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::lattice::{is_connected, LatticeBox, Point, SiteSet, Subgraph};
use crate::renorm::{BadnessField, ScaleLadder};

/// Outcome of the removal rule at one owner vertex.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RemovalCase {
    /// No `(i-1)`-bad vertex in the owner box.
    Empty,
    /// Two disjoint `2 r L` boxes at corners `a`, `b`.
    TwoBoxes { a: Point, b: Point },
    /// One `4 r L` box at corner `c`.
    OneBox { c: Point },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RemovalRecord {
    pub level: usize,
    pub owner: Point,
    pub case: RemovalCase,
}

impl RemovalRecord {
    /// Removed boxes in lattice coordinates, given `r_{i-1} L_{i-1}`.
    pub fn boxes(&self, rl: u64) -> Vec<LatticeBox> {
        match self.case {
            RemovalCase::Empty => vec![],
            RemovalCase::TwoBoxes { a, b } => vec![
                LatticeBox::cube(a, 2 * rl).expect("valid side"),
                LatticeBox::cube(b, 2 * rl).expect("valid side"),
            ],
            RemovalCase::OneBox { c } => vec![LatticeBox::cube(c, 4 * rl).expect("valid side")],
        }
    }
}

/// Choice among admissible removal corners.
pub enum TieBreak<'a> {
    /// Coordinatewise smallest admissible corner.
    Lexicographic,
    /// Uniform over admissible corners.
    Random(&'a mut ChaCha8Rng),
}

impl TieBreak<'_> {
    fn pick(&mut self, lo: i64, hi: i64, step: i64) -> i64 {
        match self {
            TieBreak::Lexicographic => lo,
            TieBreak::Random(rng) => lo + step * rng.gen_range(0..=(hi - lo) / step),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perforation {
    pub ladder: ScaleLadder,
    pub k: u64,
    pub s: usize,
    pub origin: Point,
    /// `G_{K,s,i}` for `i = 0..=s`, over the coarse box `Q / L_i`.
    pub levels: Vec<SiteSet>,
    pub records: Vec<RemovalRecord>,
}

/// `Q_{K,s}(x)` in lattice coordinates.
pub fn q_box(ladder: &ScaleLadder, k: u64, s: usize, origin: &Point) -> Result<LatticeBox> {
    let side = ladder
        .L(s)
        .checked_mul(k)
        .ok_or_else(|| Error::Overflow("K L_s".into()))?;
    LatticeBox::cube(*origin, side)
}

fn coarse_box(q: &LatticeBox, scale: u64) -> Result<LatticeBox> {
    let side = q.side(0) / scale;
    LatticeBox::cube(q.corner().div_floor(scale as i64), side)
}

/// Builds the perforation of `Q_{K,s}(x_s)` from a classification covering it.
pub fn build(
    badness: &BadnessField,
    k: u64,
    s: usize,
    origin: &Point,
    tie: &mut TieBreak<'_>,
) -> Result<Perforation> {
    let ladder = &badness.ladder;
    if k == 0 {
        return invalid("K must be positive");
    }
    if s > badness.nmax() {
        return invalid(format!("s = {s} exceeds classified levels {}", badness.nmax()));
    }
    let ls = ladder.L(s) as i64;
    if origin.coords().iter().any(|c| c.rem_euclid(ls) != 0) {
        return invalid(format!("{origin} is not a vertex of G_{s}"));
    }
    let q = q_box(ladder, k, s, origin)?;
    for n in 0..=s {
        let want = coarse_box(&q, ladder.L(n))?;
        if !badness.level(n).grid.contains_box(&want) {
            return Err(Error::OutOfBounds(format!("level {n} classification does not cover Q_(K,s)")));
        }
    }
    let top_grid = coarse_box(&q, ladder.L(s))?;
    let top_level = badness.level(s);
    for c in top_grid.points() {
        let idx = top_level.grid.index_of(&c).expect("covered");
        if top_level.bad(idx) {
            return Err(Error::SeedViolation(format!(
                "{} is {s}-bad inside Q_(K,s)",
                c.scale(ls)
            )));
        }
    }
    let mut levels = vec![SiteSet::full(top_grid)];
    let mut records = Vec::new();
    for i in (1..=s).rev() {
        let cur = levels.last().expect("nonempty");
        let child_scale = ladder.L(i - 1);
        let child_grid = coarse_box(&q, child_scale)?;
        let mut next = SiteSet::empty(child_grid);
        let rl = ladder.r(i - 1) * child_scale;
        for z in cur.points().map(|c| c.scale(ladder.L(i) as i64)).collect::<Vec<_>>() {
            let rec = removal(badness, i, &z, tie)?;
            let removed = rec.boxes(rl);
            let owner = LatticeBox::cube(z, ladder.L(i))?;
            let kids = coarse_box(&owner, child_scale)?;
            for c in kids.points() {
                let x = c.scale(child_scale as i64);
                if !removed.iter().any(|b| b.contains(&x)) {
                    next.insert(&c)?;
                }
            }
            records.push(rec);
        }
        levels.push(next);
    }
    levels.reverse();
    Ok(Perforation { ladder: ladder.clone(), k, s, origin: *origin, levels, records })
}

/// Coordinatewise extent of a family's `(i-1)`-bad vertices in the owner box.
fn blob(badness: &BadnessField, i: usize, z: &Point, family: usize) -> Option<(Point, Point)> {
    let lv = badness.level(i - 1);
    let scale = lv.scale as i64;
    let owner = LatticeBox::cube(*z, badness.ladder.L(i)).ok()?;
    let kids = coarse_box(&owner, lv.scale).ok()?;
    let mut ext: Option<(Point, Point)> = None;
    for c in kids.points() {
        let idx = lv.grid.index_of(&c)?;
        let bad = if family == 0 { lv.d_bad[idx] } else { lv.i_bad[idx] };
        if !bad {
            continue;
        }
        let x = c.scale(scale);
        ext = Some(match ext {
            None => (x, x),
            Some((lo, hi)) => {
                let mut lo2 = lo;
                let mut hi2 = hi;
                for k in 0..x.dim() {
                    lo2 = lo2.with(k, lo[k].min(x[k]));
                    hi2 = hi2.with(k, hi[k].max(x[k]));
                }
                (lo2, hi2)
            }
        });
    }
    ext
}

/// Admissible `2 r L` corner interval per axis for a blob, on the `rL` grid.
fn corner_range(z: &Point, li: i64, rl: i64, blob: Option<(Point, Point)>) -> Vec<(i64, i64)> {
    (0..z.dim())
        .map(|k| {
            let box_lo = z[k];
            let box_hi = z[k] + li - 2 * rl;
            match blob {
                None => (box_lo, box_hi),
                Some((lo, hi)) => {
                    // a <= lo and a + 2 rL > hi, a on the rL grid.
                    let upper = lo[k].div_euclid(rl) * rl;
                    let lower = (hi[k] - 2 * rl).div_euclid(rl) * rl + rl;
                    (lower.max(box_lo), upper.min(box_hi))
                }
            }
        })
        .collect()
}

fn removal(badness: &BadnessField, i: usize, z: &Point, tie: &mut TieBreak<'_>) -> Result<RemovalRecord> {
    let ladder = &badness.ladder;
    let li = ladder.L(i) as i64;
    let rl = (ladder.r(i - 1) * ladder.L(i - 1)) as i64;
    let d_blob = blob(badness, i, z, 0);
    let i_blob = blob(badness, i, z, 1);
    if d_blob.is_none() && i_blob.is_none() {
        return Ok(RemovalRecord { level: i, owner: *z, case: RemovalCase::Empty });
    }
    for (lo, hi) in [d_blob, i_blob].into_iter().flatten() {
        if lo.linf(&hi) >= rl as u64 {
            return Err(Error::InternalConsistency(format!(
                "bad blob in the L_{i}-box at {z} spans {} >= r L = {rl}",
                lo.linf(&hi)
            )));
        }
    }
    let choose = |blob: Option<(Point, Point)>, tie: &mut TieBreak<'_>| -> Result<Point> {
        let mut p = *z;
        for (k, (lo, hi)) in corner_range(z, li, rl, blob).into_iter().enumerate() {
            if lo > hi {
                return Err(Error::InternalConsistency(format!("no admissible corner at {z}")));
            }
            p = p.with(k, tie.pick(lo, hi, rl));
        }
        Ok(p)
    };
    let a = choose(d_blob.or(i_blob), tie)?;
    let b = match (d_blob, i_blob, &tie) {
        (Some(_), Some(_), _) => choose(i_blob, tie)?,
        (_, _, TieBreak::Lexicographic) => a,
        _ => choose(None, tie)?,
    };
    if a.linf(&b) > 2 * rl as u64 {
        return Ok(RemovalRecord { level: i, owner: *z, case: RemovalCase::TwoBoxes { a, b } });
    }
    let mut c = *z;
    for k in 0..z.dim() {
        let lo = (a[k].max(b[k]) - 2 * rl).max(z[k]);
        let hi = a[k].min(b[k]).min(z[k] + li - 4 * rl);
        if lo > hi {
            return Err(Error::InternalConsistency(format!("no admissible 4rL box at {z}")));
        }
        c = c.with(k, tie.pick(lo, hi, rl));
    }
    Ok(RemovalRecord { level: i, owner: *z, case: RemovalCase::OneBox { c } })
}

/// Outcome of [`verify_structure`].
#[derive(Clone, Debug, PartialEq)]
pub struct StructureReport {
    pub connected: bool,
    /// `|Q_{K,s,0}|` in `G_0` vertices.
    pub volume: usize,
    /// `|Q_{K,s} ∩ G_0|`.
    pub full_volume: usize,
    /// `prod_{j<s} (1 - (4 r_j / l_j)^d)`.
    pub product_bound: f64,
    pub volume_ok: bool,
    pub all_good: bool,
    pub nested: bool,
}

impl StructureReport {
    pub fn passed(&self) -> bool {
        self.connected && self.volume_ok && self.all_good && self.nested
    }
}

impl Perforation {
    pub fn q(&self) -> LatticeBox {
        q_box(&self.ladder, self.k, self.s, &self.origin).expect("validated at build")
    }

    /// `Q_{K,s,j}` as a set over the coarse box `Q / L_0`.
    pub fn flatten(&self, j: usize) -> Result<SiteSet> {
        if j > self.s {
            return invalid(format!("j = {j} exceeds s = {}", self.s));
        }
        let l0 = self.ladder.L(0);
        let grid0 = coarse_box(&self.q(), l0)?;
        let ratio = (self.ladder.L(j) / l0) as i64;
        let mut out = SiteSet::empty(grid0);
        let sub = LatticeBox::cube(Point::origin(grid0.dim()), ratio as u64)?;
        for c in self.levels[j].points() {
            let base = c.scale(ratio);
            for off in sub.points() {
                out.insert(&base.add(&off))?;
            }
        }
        Ok(out)
    }

    /// Rebuilds `Q_{K,s,i-1}` from `Q_{K,s,i}` and the level-`i` records.
    pub fn replay(&self, i: usize) -> Result<SiteSet> {
        if i == 0 || i > self.s {
            return invalid("replay needs 1 <= i <= s");
        }
        let l0 = self.ladder.L(0);
        let grid0 = coarse_box(&self.q(), l0)?;
        let rl = self.ladder.r(i - 1) * self.ladder.L(i - 1);
        let mut out = SiteSet::empty(grid0);
        for rec in self.records.iter().filter(|r| r.level == i) {
            let owner = LatticeBox::cube(rec.owner, self.ladder.L(i))?;
            let removed = rec.boxes(rl);
            for c in coarse_box(&owner, l0)?.points() {
                if !removed.iter().any(|b| b.contains(&c.scale(l0 as i64))) {
                    out.insert(&c)?;
                }
            }
        }
        Ok(out)
    }
}

/// Checks connectivity, the volume bound, goodness and nesting.
pub fn verify_structure(p: &Perforation, badness: &BadnessField) -> Result<StructureReport> {
    let flat0 = p.flatten(0)?;
    let g = Subgraph::new(flat0.clone());
    let connected = !flat0.is_empty() && is_connected(&flat0, &g)?;
    let d = flat0.bx().dim();
    let product_bound = p.ladder.hole_product_to(p.s, d as u32);
    let full_volume = flat0.bx().volume();
    let volume = flat0.count();
    let volume_ok = volume as f64 >= product_bound * full_volume as f64 - 1e-9;
    let lv0 = badness.level(0);
    let all_good = flat0.points().all(|c| lv0.grid.index_of(&c).is_some_and(|i| !lv0.bad(i)));
    let mut nested = true;
    let mut prev = flat0;
    for j in 1..=p.s {
        let cur = p.flatten(j)?;
        nested &= prev.is_subset(&cur);
        prev = cur;
    }
    Ok(StructureReport { connected, volume, full_volume, product_bound, volume_ok, all_good, nested })
}

fn fmt_point(p: &Point) -> String {
    p.coords().iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_point(s: &str, d: usize) -> Result<Point> {
    let c: Vec<i64> = s
        .split(',')
        .map(|t| t.trim().parse::<i64>().map_err(|e| Error::Format(format!("coordinate {t:?}: {e}"))))
        .collect::<Result<_>>()?;
    if c.len() != d {
        return Err(Error::Format(format!("point {s:?} has {} coordinates, expected {d}", c.len())));
    }
    Point::new(&c)
}

/// Text serialisation:
///
/// ```text
/// perforation 1
/// ladder <l0> <r0> <L0> <theta> <depth>
/// K <K>
/// s <s>
/// origin <x1,..,xd>
/// level <i> <count>
/// <vertex>            (count lines, lattice coordinates)
/// record <i> <owner> empty | two <a> <b> | one <c>
/// end
/// ```
pub fn to_text(p: &Perforation) -> String {
    let sp = p.ladder.spec();
    let mut out = String::new();
    let _ = writeln!(out, "perforation 1");
    let _ = writeln!(out, "ladder {} {} {} {} {}", sp.l0, sp.r0, sp.big_l0, sp.theta, sp.depth);
    let _ = writeln!(out, "K {}", p.k);
    let _ = writeln!(out, "s {}", p.s);
    let _ = writeln!(out, "origin {}", fmt_point(&p.origin));
    for (i, set) in p.levels.iter().enumerate() {
        let scale = p.ladder.L(i) as i64;
        let _ = writeln!(out, "level {i} {}", set.count());
        for c in set.points() {
            let _ = writeln!(out, "{}", fmt_point(&c.scale(scale)));
        }
    }
    for r in &p.records {
        let tail = match r.case {
            RemovalCase::Empty => "empty".to_string(),
            RemovalCase::TwoBoxes { a, b } => format!("two {} {}", fmt_point(&a), fmt_point(&b)),
            RemovalCase::OneBox { c } => format!("one {}", fmt_point(&c)),
        };
        let _ = writeln!(out, "record {} {} {tail}", r.level, fmt_point(&r.owner));
    }
    out.push_str("end\n");
    out
}

pub fn from_text(text: &str) -> Result<Perforation> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let mut next = |what: &str| lines.next().ok_or_else(|| Error::Format(format!("missing {what}")));
    let expect = |line: &str, key: &str| -> Result<Vec<String>> {
        let mut it = line.split_whitespace();
        if it.next() != Some(key) {
            return Err(Error::Format(format!("expected `{key}`, found {line:?}")));
        }
        Ok(it.map(String::from).collect())
    };
    let num = |s: &str| s.parse::<u64>().map_err(|e| Error::Format(format!("{s:?}: {e}")));
    let head = expect(next("header")?, "perforation")?;
    if head != ["1"] {
        return Err(Error::Format("unsupported perforation version".into()));
    }
    let lad = expect(next("ladder")?, "ladder")?;
    if lad.len() != 5 {
        return Err(Error::Format("ladder needs five fields".into()));
    }
    let ladder = ScaleLadder::new(
        num(&lad[0])?,
        num(&lad[1])?,
        num(&lad[2])?,
        num(&lad[3])? as u32,
        num(&lad[4])? as usize,
    )?;
    let k = num(expect(next("K")?, "K")?.first().ok_or_else(|| Error::Format("K".into()))?)?;
    let s = num(expect(next("s")?, "s")?.first().ok_or_else(|| Error::Format("s".into()))?)? as usize;
    let o = expect(next("origin")?, "origin")?;
    let first = o.first().ok_or_else(|| Error::Format("origin".into()))?;
    let d = first.split(',').count();
    let origin = parse_point(first, d)?;
    if s > ladder.depth() {
        return Err(Error::Format("s exceeds ladder depth".into()));
    }
    let q = q_box(&ladder, k, s, &origin)?;
    let mut levels = Vec::with_capacity(s + 1);
    for i in 0..=s {
        let h = expect(next("level")?, "level")?;
        if h.len() != 2 || num(&h[0])? as usize != i {
            return Err(Error::Format(format!("bad level header for level {i}")));
        }
        let scale = ladder.L(i);
        let mut set = SiteSet::empty(coarse_box(&q, scale)?);
        for _ in 0..num(&h[1])? {
            let x = parse_point(next("vertex")?, d)?;
            if x.coords().iter().any(|c| c.rem_euclid(scale as i64) != 0) {
                return Err(Error::Format(format!("{x} is not on G_{i}")));
            }
            set.insert(&x.div_floor(scale as i64)).map_err(|_| Error::Format(format!("{x} outside Q")))?;
        }
        levels.push(set);
    }
    let mut records = Vec::new();
    loop {
        let line = next("record or end")?;
        if line == "end" {
            break;
        }
        let f = expect(line, "record")?;
        let level = f.first().map(|v| num(v)).transpose()?.ok_or_else(|| Error::Format("record".into()))? as usize;
        let owner = parse_point(f.get(1).ok_or_else(|| Error::Format("record owner".into()))?, d)?;
        let case = match (f.get(2).map(String::as_str), f.len()) {
            (Some("empty"), 3) => RemovalCase::Empty,
            (Some("two"), 5) => RemovalCase::TwoBoxes { a: parse_point(&f[3], d)?, b: parse_point(&f[4], d)? },
            (Some("one"), 4) => RemovalCase::OneBox { c: parse_point(&f[3], d)? },
            _ => return Err(Error::Format(format!("bad record {line:?}"))),
        };
        records.push(RemovalRecord { level, owner, case });
    }
    if lines.next().is_some() {
        return Err(Error::Format("trailing content after `end`".into()));
    }
    Ok(Perforation { ladder, k, s, origin, levels, records })
}
