//! Boxes in Z^d, occupied site sets, induced nearest-neighbour subgraphs and
//! the graph primitives built on them.
//!
//! Sites of a box are indexed in row-major order (last axis fastest), so
//! index order coincides with lexicographic order of coordinates. Edges of a
//! [`Subgraph`] join occupied sites at l1-distance one inside the box; nothing
//! crosses the box faces.

use std::collections::VecDeque;
use std::fmt;
use std::ops::Index;

use bitvec::prelude::*;
use petgraph::unionfind::UnionFind;

use crate::error::{invalid, Error, Result};

/// Largest supported lattice dimension.
pub const MAX_DIM: usize = 8;

/// A point of Z^d.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Point {
    dim: u8,
    c: [i64; MAX_DIM],
}

impl Point {
    pub fn new(coords: &[i64]) -> Result<Self> {
        if coords.is_empty() || coords.len() > MAX_DIM {
            return invalid(format!("dimension {} not in 1..={MAX_DIM}", coords.len()));
        }
        let mut c = [0; MAX_DIM];
        c[..coords.len()].copy_from_slice(coords);
        Ok(Self { dim: coords.len() as u8, c })
    }

    pub fn origin(dim: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&dim), "dimension out of range");
        Self { dim: dim as u8, c: [0; MAX_DIM] }
    }

    pub fn unit(dim: usize, axis: usize) -> Self {
        let mut p = Self::origin(dim);
        p.c[axis] = 1;
        p
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn coords(&self) -> &[i64] {
        &self.c[..self.dim()]
    }

    pub fn with(mut self, axis: usize, value: i64) -> Self {
        self.c[axis] = value;
        self
    }

    pub fn add(&self, other: &Point) -> Point {
        debug_assert_eq!(self.dim, other.dim);
        let mut p = *self;
        for k in 0..self.dim() {
            p.c[k] += other.c[k];
        }
        p
    }

    pub fn sub(&self, other: &Point) -> Point {
        debug_assert_eq!(self.dim, other.dim);
        let mut p = *self;
        for k in 0..self.dim() {
            p.c[k] -= other.c[k];
        }
        p
    }

    pub fn scale(&self, f: i64) -> Point {
        let mut p = *self;
        for k in 0..self.dim() {
            p.c[k] *= f;
        }
        p
    }

    /// Floor division of each coordinate.
    pub fn div_floor(&self, f: i64) -> Point {
        let mut p = *self;
        for k in 0..self.dim() {
            p.c[k] = self.c[k].div_euclid(f);
        }
        p
    }

    pub fn offset(&self, axis: usize, delta: i64) -> Point {
        let mut p = *self;
        p.c[axis] += delta;
        p
    }

    pub fn l1(&self, other: &Point) -> u64 {
        (0..self.dim()).map(|k| self.c[k].abs_diff(other.c[k])).sum()
    }

    pub fn linf(&self, other: &Point) -> u64 {
        (0..self.dim()).map(|k| self.c[k].abs_diff(other.c[k])).max().unwrap_or(0)
    }

    pub fn l2(&self, other: &Point) -> f64 {
        (0..self.dim())
            .map(|k| {
                let t = (self.c[k] - other.c[k]) as f64;
                t * t
            })
            .sum::<f64>()
            .sqrt()
    }
}

impl serde::Serialize for Point {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        self.coords().serialize(ser)
    }
}

impl Index<usize> for Point {
    type Output = i64;
    fn index(&self, k: usize) -> &i64 {
        assert!(k < self.dim(), "axis {k} out of range");
        &self.c[k]
    }
}

impl fmt::Debug for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.coords())
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.coords().iter().map(|c| c.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

/// Axis-aligned box `corner + [0, sides)` in Z^d.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct LatticeBox {
    corner: Point,
    sides: [u64; MAX_DIM],
    strides: [usize; MAX_DIM],
    volume: usize,
}

impl LatticeBox {
    pub fn new(corner: Point, sides: &[u64]) -> Result<Self> {
        if sides.len() != corner.dim() {
            return Err(Error::DimensionMismatch { expected: corner.dim(), got: sides.len() });
        }
        if sides.iter().any(|&s| s == 0) {
            return invalid("box sides must be positive");
        }
        let d = corner.dim();
        let mut s = [0u64; MAX_DIM];
        s[..d].copy_from_slice(sides);
        let mut strides = [0usize; MAX_DIM];
        let mut vol: usize = 1;
        for k in (0..d).rev() {
            strides[k] = vol;
            let side = usize::try_from(s[k]).map_err(|_| Error::TooLarge("box side".into()))?;
            vol = vol.checked_mul(side).ok_or_else(|| Error::TooLarge("box volume".into()))?;
        }
        if vol > (u32::MAX as usize) {
            return Err(Error::TooLarge(format!("box volume {vol} exceeds 2^32 sites")));
        }
        Ok(Self { corner, sides: s, strides, volume: vol })
    }

    pub fn cube(corner: Point, side: u64) -> Result<Self> {
        Self::new(corner, &vec![side; corner.dim()])
    }

    /// Cube of side `2r+1` centred at `center`.
    pub fn centered(center: &Point, r: u64) -> Result<Self> {
        let mut corner = *center;
        for k in 0..center.dim() {
            corner.c[k] -= r as i64;
        }
        Self::cube(corner, 2 * r + 1)
    }

    pub fn dim(&self) -> usize {
        self.corner.dim()
    }

    pub fn corner(&self) -> Point {
        self.corner
    }

    pub fn sides(&self) -> &[u64] {
        &self.sides[..self.dim()]
    }

    pub fn side(&self, axis: usize) -> u64 {
        self.sides[axis]
    }

    pub fn volume(&self) -> usize {
        self.volume
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    /// Exclusive upper corner.
    pub fn upper(&self) -> Point {
        let mut p = self.corner;
        for k in 0..self.dim() {
            p.c[k] += self.sides[k] as i64;
        }
        p
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.dim() == self.dim()
            && (0..self.dim()).all(|k| {
                let off = p.c[k] - self.corner.c[k];
                off >= 0 && (off as u64) < self.sides[k]
            })
    }

    pub fn contains_box(&self, other: &LatticeBox) -> bool {
        other.dim() == self.dim()
            && (0..self.dim()).all(|k| {
                other.corner.c[k] >= self.corner.c[k]
                    && other.corner.c[k] + other.sides[k] as i64
                        <= self.corner.c[k] + self.sides[k] as i64
            })
    }

    pub fn index_of(&self, p: &Point) -> Option<usize> {
        if !self.contains(p) {
            return None;
        }
        let mut idx = 0;
        for k in 0..self.dim() {
            idx += (p.c[k] - self.corner.c[k]) as usize * self.strides[k];
        }
        Some(idx)
    }

    pub fn point_of(&self, idx: usize) -> Point {
        debug_assert!(idx < self.volume);
        let mut p = self.corner;
        let mut rem = idx;
        for k in 0..self.dim() {
            let q = rem / self.strides[k];
            rem -= q * self.strides[k];
            p.c[k] += q as i64;
        }
        p
    }

    /// Offset of `idx` along `axis`, in `0..side(axis)`.
    #[inline]
    pub fn offset_along(&self, idx: usize, axis: usize) -> u64 {
        ((idx / self.strides[axis]) % self.sides[axis] as usize) as u64
    }

    /// Index of the nearest neighbour in direction `±e_axis`, if inside.
    #[inline]
    pub fn neighbor(&self, idx: usize, axis: usize, up: bool) -> Option<usize> {
        let off = self.offset_along(idx, axis);
        if up {
            (off + 1 < self.sides[axis]).then(|| idx + self.strides[axis])
        } else {
            (off > 0).then(|| idx - self.strides[axis])
        }
    }

    /// True if the site lies on a face of the box.
    pub fn on_face(&self, idx: usize) -> bool {
        (0..self.dim()).any(|k| {
            let o = self.offset_along(idx, k);
            o == 0 || o + 1 == self.sides[k]
        })
    }

    pub fn intersect(&self, other: &LatticeBox) -> Option<LatticeBox> {
        if other.dim() != self.dim() {
            return None;
        }
        let d = self.dim();
        let mut lo = self.corner;
        let mut sides = vec![0u64; d];
        for k in 0..d {
            let a = self.corner.c[k].max(other.corner.c[k]);
            let b = (self.corner.c[k] + self.sides[k] as i64)
                .min(other.corner.c[k] + other.sides[k] as i64);
            if b <= a {
                return None;
            }
            lo.c[k] = a;
            sides[k] = (b - a) as u64;
        }
        LatticeBox::new(lo, &sides).ok()
    }

    pub fn translate(&self, by: &Point) -> LatticeBox {
        let mut b = *self;
        b.corner = self.corner.add(by);
        b
    }

    /// Box grown by `pad` on every side.
    pub fn grow(&self, pad: u64) -> Result<LatticeBox> {
        let mut corner = self.corner;
        let mut sides = self.sides().to_vec();
        for k in 0..self.dim() {
            corner.c[k] -= pad as i64;
            sides[k] += 2 * pad;
        }
        LatticeBox::new(corner, &sides)
    }

    pub fn points(&self) -> impl Iterator<Item = Point> + '_ {
        (0..self.volume).map(move |i| self.point_of(i))
    }

    /// Indices (in `self`) of the sites of a sub-box, in increasing order.
    pub fn sub_indices(&self, sub: &LatticeBox) -> Result<Vec<usize>> {
        if !self.contains_box(sub) {
            return Err(Error::OutOfBounds("sub-box not contained in box".into()));
        }
        let base = self.index_of(&sub.corner).expect("contained");
        let d = self.dim();
        let mut out = Vec::with_capacity(sub.volume);
        for j in 0..sub.volume {
            let mut idx = base;
            let mut rem = j;
            for k in 0..d {
                let q = rem / sub.strides[k];
                rem -= q * sub.strides[k];
                idx += q * self.strides[k];
            }
            out.push(idx);
        }
        Ok(out)
    }
}

impl fmt::Debug for LatticeBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Box{{corner: {:?}, sides: {:?}}}", self.corner, self.sides())
    }
}

/// A subset of the sites of a box.
#[derive(Clone, PartialEq, Eq)]
pub struct SiteSet {
    bx: LatticeBox,
    bits: BitVec<u64, Lsb0>,
}

impl SiteSet {
    pub fn empty(bx: LatticeBox) -> Self {
        Self { bx, bits: bitvec![u64, Lsb0; 0; bx.volume()] }
    }

    pub fn full(bx: LatticeBox) -> Self {
        Self { bx, bits: bitvec![u64, Lsb0; 1; bx.volume()] }
    }

    pub fn from_fn(bx: LatticeBox, mut f: impl FnMut(usize) -> bool) -> Self {
        let mut s = Self::empty(bx);
        for i in 0..bx.volume() {
            if f(i) {
                s.bits.set(i, true);
            }
        }
        s
    }

    pub fn from_bits(bx: LatticeBox, bits: BitVec<u64, Lsb0>) -> Result<Self> {
        if bits.len() != bx.volume() {
            return invalid("bit vector length differs from box volume");
        }
        Ok(Self { bx, bits })
    }

    pub fn from_points<'a>(bx: LatticeBox, pts: impl IntoIterator<Item = &'a Point>) -> Result<Self> {
        let mut s = Self::empty(bx);
        for p in pts {
            s.insert(p)?;
        }
        Ok(s)
    }

    pub fn bx(&self) -> &LatticeBox {
        &self.bx
    }

    pub fn bits(&self) -> &BitSlice<u64, Lsb0> {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.count_ones()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.not_any()
    }

    #[inline]
    pub fn get(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    #[inline]
    pub fn set(&mut self, idx: usize, v: bool) {
        self.bits.set(idx, v);
    }

    pub fn contains(&self, p: &Point) -> bool {
        self.bx.index_of(p).is_some_and(|i| self.bits[i])
    }

    pub fn insert(&mut self, p: &Point) -> Result<()> {
        let i = self
            .bx
            .index_of(p)
            .ok_or_else(|| Error::OutOfBounds(format!("{p} not in {:?}", self.bx)))?;
        self.bits.set(i, true);
        Ok(())
    }

    pub fn remove(&mut self, p: &Point) {
        if let Some(i) = self.bx.index_of(p) {
            self.bits.set(i, false);
        }
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter_ones()
    }

    pub fn points(&self) -> impl Iterator<Item = Point> + '_ {
        self.bits.iter_ones().map(|i| self.bx.point_of(i))
    }

    fn same_box(&self, other: &SiteSet) -> Result<()> {
        if self.bx != other.bx {
            return invalid("site sets live in different boxes");
        }
        Ok(())
    }

    pub fn union(&self, other: &SiteSet) -> Result<SiteSet> {
        self.same_box(other)?;
        Ok(Self { bx: self.bx, bits: self.bits.clone() | other.bits.as_bitslice() })
    }

    pub fn intersection(&self, other: &SiteSet) -> Result<SiteSet> {
        self.same_box(other)?;
        Ok(Self { bx: self.bx, bits: self.bits.clone() & other.bits.as_bitslice() })
    }

    pub fn difference(&self, other: &SiteSet) -> Result<SiteSet> {
        self.same_box(other)?;
        let mut bits = self.bits.clone();
        for i in other.bits.iter_ones() {
            bits.set(i, false);
        }
        Ok(Self { bx: self.bx, bits })
    }

    pub fn is_subset(&self, other: &SiteSet) -> bool {
        self.bx == other.bx && self.bits.iter_ones().all(|i| other.bits[i])
    }

    /// Keeps only sites inside `window` (same box).
    pub fn clip(&self, window: &LatticeBox) -> SiteSet {
        SiteSet::from_fn(self.bx, |i| self.bits[i] && window.contains(&self.bx.point_of(i)))
    }

    /// The same sites expressed in another box; errors if some site falls outside.
    pub fn rebox(&self, bx: LatticeBox) -> Result<SiteSet> {
        let mut out = SiteSet::empty(bx);
        for p in self.points() {
            out.insert(&p)?;
        }
        Ok(out)
    }

    /// Restriction to a sub-box, re-indexed in that sub-box.
    pub fn restrict(&self, sub: &LatticeBox) -> Result<SiteSet> {
        let idx = self.bx.sub_indices(sub)?;
        let mut out = SiteSet::empty(*sub);
        for (j, i) in idx.into_iter().enumerate() {
            if self.bits[i] {
                out.bits.set(j, true);
            }
        }
        Ok(out)
    }
}

impl fmt::Debug for SiteSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SiteSet{{{:?}, {} sites}}", self.bx, self.count())
    }
}

/// Radius argument of [`diameter_filter`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Radius {
    Finite(u64),
    /// Infinite-cluster proxy: the largest component.
    Infinite,
}

/// Induced nearest-neighbour subgraph on the occupied sites of a box.
#[derive(Clone, Debug)]
pub struct Subgraph {
    sites: SiteSet,
}

impl Subgraph {
    pub fn new(sites: SiteSet) -> Self {
        Self { sites }
    }

    pub fn full(bx: LatticeBox) -> Self {
        Self { sites: SiteSet::full(bx) }
    }

    pub fn sites(&self) -> &SiteSet {
        &self.sites
    }

    pub fn bx(&self) -> &LatticeBox {
        self.sites.bx()
    }

    pub fn dim(&self) -> usize {
        self.bx().dim()
    }

    #[inline]
    pub fn occupied(&self, idx: usize) -> bool {
        self.sites.get(idx)
    }

    pub fn occupied_point(&self, p: &Point) -> bool {
        self.sites.contains(p)
    }

    /// Calls `f` on each occupied neighbour of `idx`.
    #[inline]
    pub fn for_each_neighbor(&self, idx: usize, mut f: impl FnMut(usize)) {
        let bx = self.bx();
        for k in 0..bx.dim() {
            if let Some(j) = bx.neighbor(idx, k, false) {
                if self.sites.get(j) {
                    f(j);
                }
            }
            if let Some(j) = bx.neighbor(idx, k, true) {
                if self.sites.get(j) {
                    f(j);
                }
            }
        }
    }

    /// Occupied degree, the conductance measure of the site.
    #[inline]
    pub fn degree(&self, idx: usize) -> u32 {
        let mut n = 0;
        self.for_each_neighbor(idx, |_| n += 1);
        n
    }

    pub fn measure(&self, set: &SiteSet) -> u64 {
        set.indices().map(|i| self.degree(i) as u64).sum()
    }

    pub fn edge_count(&self) -> usize {
        let bx = self.bx();
        let mut n = 0;
        for i in self.sites.indices() {
            for k in 0..bx.dim() {
                if let Some(j) = bx.neighbor(i, k, true) {
                    if self.sites.get(j) {
                        n += 1;
                    }
                }
            }
        }
        n
    }

    /// Subgraph induced on `sites ∩ set`.
    pub fn restrict(&self, set: &SiteSet) -> Result<Subgraph> {
        Ok(Subgraph::new(self.sites.intersection(set)?))
    }
}

/// Connected components of a [`Subgraph`].
#[derive(Clone, Debug)]
pub struct Components {
    bx: LatticeBox,
    labels: Vec<u32>,
    sizes: Vec<usize>,
    diameters: Vec<u64>,
    min_index: Vec<usize>,
}

/// Label of unoccupied sites.
pub const NO_LABEL: u32 = u32::MAX;

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn label(&self, idx: usize) -> Option<u32> {
        let l = self.labels[idx];
        (l != NO_LABEL).then_some(l)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn size(&self, label: u32) -> usize {
        self.sizes[label as usize]
    }

    /// Exact l1-diameter of the component.
    pub fn diameter(&self, label: u32) -> u64 {
        self.diameters[label as usize]
    }

    /// Lexicographically smallest member.
    pub fn min_member(&self, label: u32) -> Point {
        self.bx.point_of(self.min_index[label as usize])
    }

    pub fn sites(&self, label: u32) -> SiteSet {
        SiteSet::from_fn(self.bx, |i| self.labels[i] == label)
    }

    /// Largest component; ties go to the one with the lexicographically
    /// smallest member. The flag reports whether a tie occurred.
    pub fn largest(&self) -> Option<(u32, bool)> {
        let mut best: Option<u32> = None;
        let mut tie = false;
        for l in 0..self.count() as u32 {
            match best {
                None => best = Some(l),
                Some(b) => {
                    let (sb, sl) = (self.sizes[b as usize], self.sizes[l as usize]);
                    if sl > sb {
                        best = Some(l);
                        tie = false;
                    } else if sl == sb {
                        tie = true;
                        if self.min_index[l as usize] < self.min_index[b as usize] {
                            best = Some(l);
                        }
                    }
                }
            }
        }
        best.map(|b| (b, tie))
    }
}

/// Labels connected components with union-find.
///
/// Labels are assigned in order of each component's smallest site index, so
/// they are deterministic.
pub fn connected_components(g: &Subgraph) -> Components {
    let bx = *g.bx();
    let n = bx.volume();
    let mut uf: UnionFind<u32> = UnionFind::new(n);
    for i in g.sites().indices() {
        for k in 0..bx.dim() {
            if let Some(j) = bx.neighbor(i, k, true) {
                if g.occupied(j) {
                    uf.union(i as u32, j as u32);
                }
            }
        }
    }
    let mut labels = vec![NO_LABEL; n];
    let mut root_label: Vec<u32> = vec![NO_LABEL; n];
    let mut sizes = Vec::new();
    let mut min_index = Vec::new();
    for i in g.sites().indices() {
        let r = uf.find_mut(i as u32) as usize;
        if root_label[r] == NO_LABEL {
            root_label[r] = sizes.len() as u32;
            sizes.push(0);
            min_index.push(i);
        }
        let l = root_label[r];
        labels[i] = l;
        sizes[l as usize] += 1;
    }
    let diameters = l1_diameters(&bx, &labels, sizes.len());
    Components { bx, labels, sizes, diameters, min_index }
}

/// Exact l1-diameters per label: max over sign vectors s of the spread of s·x.
fn l1_diameters(bx: &LatticeBox, labels: &[u32], count: usize) -> Vec<u64> {
    let d = bx.dim();
    let signs = 1usize << (d - 1);
    let mut hi = vec![i64::MIN; count * signs];
    let mut lo = vec![i64::MAX; count * signs];
    for (i, &l) in labels.iter().enumerate() {
        if l == NO_LABEL {
            continue;
        }
        let p = bx.point_of(i);
        for s in 0..signs {
            let mut v = p.c[0];
            for k in 1..d {
                if (s >> (k - 1)) & 1 == 1 {
                    v -= p.c[k];
                } else {
                    v += p.c[k];
                }
            }
            let at = l as usize * signs + s;
            hi[at] = hi[at].max(v);
            lo[at] = lo[at].min(v);
        }
    }
    (0..count)
        .map(|l| (0..signs).map(|s| (hi[l * signs + s] - lo[l * signs + s]) as u64).max().unwrap_or(0))
        .collect()
}

/// Sites of components with l1-diameter at least `r`; `Radius::Infinite`
/// returns the largest component (empty set if nothing is occupied).
pub fn diameter_filter(g: &Subgraph, r: Radius) -> SiteSet {
    let cc = connected_components(g);
    diameter_filter_with(&cc, r)
}

pub fn diameter_filter_with(cc: &Components, r: Radius) -> SiteSet {
    match r {
        Radius::Finite(r) => {
            let keep: Vec<bool> = (0..cc.count()).map(|l| cc.diameters[l] >= r).collect();
            SiteSet::from_fn(cc.bx, |i| {
                let l = cc.labels[i];
                l != NO_LABEL && keep[l as usize]
            })
        }
        Radius::Infinite => match cc.largest() {
            Some((l, _)) => cc.sites(l),
            None => SiteSet::empty(cc.bx),
        },
    }
}

fn check_vertex_subset(a: &SiteSet, g: &Subgraph) -> Result<()> {
    if a.bx() != g.bx() {
        return invalid("set and graph live in different boxes");
    }
    if !a.is_subset(g.sites()) {
        return invalid("set is not contained in the vertex set");
    }
    Ok(())
}

/// Edges of `g` with exactly one endpoint in `a`, as `(inside, outside)`.
pub fn boundary_edges(a: &SiteSet, g: &Subgraph) -> Result<Vec<(usize, usize)>> {
    check_vertex_subset(a, g)?;
    let mut out = Vec::new();
    for i in a.indices() {
        g.for_each_neighbor(i, |j| {
            if !a.get(j) {
                out.push((i, j));
            }
        });
    }
    Ok(out)
}

/// Number of edges of `g` leaving `a`.
pub fn boundary_size(a: &SiteSet, g: &Subgraph) -> Result<usize> {
    check_vertex_subset(a, g)?;
    let mut n = 0;
    for i in a.indices() {
        g.for_each_neighbor(i, |j| {
            if !a.get(j) {
                n += 1;
            }
        });
    }
    Ok(n)
}

/// Reusable breadth-first search state over the sites of a box.
pub struct Bfs {
    stamp: Vec<u32>,
    dist: Vec<u32>,
    generation: u32,
    order: Vec<usize>,
    queue: VecDeque<usize>,
}

impl Bfs {
    pub fn new(bx: &LatticeBox) -> Self {
        Self {
            stamp: vec![0; bx.volume()],
            dist: vec![0; bx.volume()],
            generation: 0,
            order: Vec::new(),
            queue: VecDeque::new(),
        }
    }

    /// Explores from `src` up to graph distance `max_dist` through sites
    /// accepted by `allow`. Returns visited sites in BFS order.
    pub fn run(
        &mut self,
        g: &Subgraph,
        src: usize,
        max_dist: u32,
        mut allow: impl FnMut(usize) -> bool,
    ) -> &[usize] {
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.generation = 1;
        }
        self.order.clear();
        self.queue.clear();
        if !g.occupied(src) || !allow(src) {
            return &self.order;
        }
        let gen = self.generation;
        self.stamp[src] = gen;
        self.dist[src] = 0;
        self.queue.push_back(src);
        while let Some(i) = self.queue.pop_front() {
            self.order.push(i);
            let di = self.dist[i];
            if di >= max_dist {
                continue;
            }
            let stamp = &mut self.stamp;
            let dist = &mut self.dist;
            let queue = &mut self.queue;
            g.for_each_neighbor(i, |j| {
                if stamp[j] != gen && allow(j) {
                    stamp[j] = gen;
                    dist[j] = di + 1;
                    queue.push_back(j);
                }
            });
        }
        &self.order
    }

    /// Distance from the last source, if the site was reached.
    #[inline]
    pub fn distance(&self, idx: usize) -> Option<u32> {
        (self.stamp[idx] == self.generation).then(|| self.dist[idx])
    }

    pub fn visited(&self) -> &[usize] {
        &self.order
    }
}

/// Graph ball `B(x, r)` in a subgraph.
#[derive(Clone, Debug)]
pub struct Ball {
    pub center: Point,
    pub radius: u64,
    pub sites: SiteSet,
    /// Sum of occupied degrees over the ball.
    pub measure: u64,
    /// True if the ball reaches a face of the box, so it may be truncated.
    pub touches_face: bool,
}

pub fn graph_ball(g: &Subgraph, x: &Point, r: u64) -> Result<Ball> {
    let src = g
        .bx()
        .index_of(x)
        .ok_or_else(|| Error::OutOfBounds(format!("{x} outside {:?}", g.bx())))?;
    if !g.occupied(src) {
        return invalid(format!("centre {x} is not occupied"));
    }
    let mut bfs = Bfs::new(g.bx());
    let radius = u32::try_from(r).unwrap_or(u32::MAX);
    let visited = bfs.run(g, src, radius, |_| true);
    let mut sites = SiteSet::empty(*g.bx());
    let mut measure = 0;
    let mut touches_face = false;
    for &i in visited {
        sites.set(i, true);
        measure += g.degree(i) as u64;
        touches_face |= g.bx().on_face(i);
    }
    Ok(Ball { center: *x, radius: r, sites, measure, touches_face })
}

/// True if the sites of `set` induce a connected subgraph of `g`.
pub fn is_connected(set: &SiteSet, g: &Subgraph) -> Result<bool> {
    check_vertex_subset(set, g)?;
    let Some(first) = set.indices().next() else {
        return Ok(true);
    };
    let mut bfs = Bfs::new(g.bx());
    let reached = bfs.run(g, first, u32::MAX, |j| set.get(j)).len();
    Ok(reached == set.count())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(c: &[i64]) -> Point {
        Point::new(c).unwrap()
    }

    #[test]
    fn index_order_is_lexicographic() {
        let bx = LatticeBox::new(p(&[-1, 2, 0]), &[3, 2, 4]).unwrap();
        let pts: Vec<Point> = bx.points().collect();
        let mut sorted = pts.clone();
        sorted.sort();
        assert_eq!(pts, sorted);
        for (i, q) in pts.iter().enumerate() {
            assert_eq!(bx.index_of(q), Some(i));
        }
    }

    #[test]
    fn neighbors_stop_at_faces() {
        let bx = LatticeBox::cube(p(&[0, 0]), 3).unwrap();
        let corner = bx.index_of(&p(&[0, 0])).unwrap();
        assert_eq!(bx.neighbor(corner, 0, false), None);
        assert_eq!(bx.neighbor(corner, 1, true), bx.index_of(&p(&[0, 1])));
        let g = Subgraph::full(bx);
        assert_eq!(g.degree(corner), 2);
        assert_eq!(g.degree(bx.index_of(&p(&[1, 1])).unwrap()), 4);
        assert_eq!(g.edge_count(), 12);
    }

    #[test]
    fn full_box_is_one_component_with_l1_diameter() {
        let bx = LatticeBox::new(p(&[0, 0, 0]), &[4, 3, 2]).unwrap();
        let cc = connected_components(&Subgraph::full(bx));
        assert_eq!(cc.count(), 1);
        assert_eq!(cc.diameter(0), 3 + 2 + 1);
        assert_eq!(cc.size(0), 24);
    }

    #[test]
    fn l_shape_diameter_is_exact() {
        let bx = LatticeBox::cube(p(&[0, 0]), 5).unwrap();
        let pts = [p(&[0, 0]), p(&[1, 0]), p(&[2, 0]), p(&[2, 1]), p(&[2, 2])];
        let s = SiteSet::from_points(bx, pts.iter()).unwrap();
        let cc = connected_components(&Subgraph::new(s));
        assert_eq!(cc.count(), 1);
        assert_eq!(cc.diameter(0), 4);
        let anti = [p(&[0, 2]), p(&[1, 2]), p(&[1, 1]), p(&[1, 0]), p(&[2, 0])];
        let s = SiteSet::from_points(bx, anti.iter()).unwrap();
        let cc = connected_components(&Subgraph::new(s));
        assert_eq!(cc.diameter(0), 4);
    }

    #[test]
    fn largest_breaks_ties_lexicographically() {
        let bx = LatticeBox::cube(p(&[0, 0]), 5).unwrap();
        let pts = [p(&[4, 4]), p(&[4, 3]), p(&[0, 1]), p(&[0, 2])];
        let s = SiteSet::from_points(bx, pts.iter()).unwrap();
        let cc = connected_components(&Subgraph::new(s));
        let (l, tie) = cc.largest().unwrap();
        assert!(tie);
        assert_eq!(cc.min_member(l), p(&[0, 1]));
    }

    #[test]
    fn infinite_filter_is_largest_component() {
        let bx = LatticeBox::cube(p(&[0, 0]), 6).unwrap();
        let pts = [p(&[0, 0]), p(&[0, 1]), p(&[0, 2]), p(&[5, 5])];
        let s = SiteSet::from_points(bx, pts.iter()).unwrap();
        let g = Subgraph::new(s);
        let big = diameter_filter(&g, Radius::Infinite);
        assert_eq!(big.count(), 3);
        assert_eq!(diameter_filter(&g, Radius::Finite(0)).count(), 4);
        assert_eq!(diameter_filter(&g, Radius::Finite(2)).count(), 3);
        assert_eq!(diameter_filter(&g, Radius::Finite(3)).count(), 0);
    }

    #[test]
    fn boundary_of_single_interior_site() {
        let bx = LatticeBox::cube(p(&[0, 0, 0]), 3).unwrap();
        let g = Subgraph::full(bx);
        let a = SiteSet::from_points(bx, [p(&[1, 1, 1])].iter()).unwrap();
        assert_eq!(boundary_edges(&a, &g).unwrap().len(), 6);
        let outside = SiteSet::full(bx);
        assert_eq!(boundary_size(&outside, &g).unwrap(), 0);
    }

    #[test]
    fn boundary_rejects_foreign_sets() {
        let bx = LatticeBox::cube(p(&[0, 0]), 3).unwrap();
        let g = Subgraph::new(SiteSet::from_points(bx, [p(&[0, 0])].iter()).unwrap());
        let a = SiteSet::from_points(bx, [p(&[1, 1])].iter()).unwrap();
        assert!(boundary_edges(&a, &g).is_err());
    }

    #[test]
    fn graph_ball_on_full_lattice_is_l1_ball() {
        let bx = LatticeBox::cube(p(&[-5, -5]), 11).unwrap();
        let g = Subgraph::full(bx);
        let ball = graph_ball(&g, &p(&[0, 0]), 3).unwrap();
        assert_eq!(ball.sites.count(), 25);
        assert!(!ball.touches_face);
        assert!(ball.sites.points().all(|q| q.l1(&p(&[0, 0])) <= 3));
        assert!(graph_ball(&g, &p(&[9, 9]), 1).is_err());
    }

    #[test]
    fn restrict_and_rebox_round_trip() {
        let bx = LatticeBox::cube(p(&[0, 0]), 6).unwrap();
        let s = SiteSet::from_fn(bx, |i| i % 3 == 0);
        let sub = LatticeBox::cube(p(&[1, 1]), 3).unwrap();
        let r = s.restrict(&sub).unwrap();
        for q in sub.points() {
            assert_eq!(r.contains(&q), s.contains(&q));
        }
        let back = r.rebox(bx).unwrap();
        assert_eq!(back, s.clip(&sub));
    }
}
