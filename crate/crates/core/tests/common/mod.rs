#![allow(dead_code)]

use bitvec::prelude::*;
use percolab::lattice::{LatticeBox, Point};
use percolab::renorm::{BadnessField, ScaleLadder};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Planted classification on `Q_{K,s}(0)` whose level-`s` vertices are all
/// good. Each good vertex confines the bad children of a family to one
/// random window of side `r`; each bad vertex gets two far bad children.
/// `q` is the chance that a child inside a window is bad.
pub fn planted_field(ladder: &ScaleLadder, k: u64, s: usize, d: usize, q: f64, rng: &mut ChaCha8Rng) -> BadnessField {
    let side0 = k * ladder.L(s) / ladder.L(0);
    let grid0 = LatticeBox::cube(Point::origin(d), side0).unwrap();
    // flags[family][coarse index at the current level]
    let top = LatticeBox::cube(Point::origin(d), k).unwrap();
    let mut grid = top;
    let mut flags = [vec![false; top.volume()], vec![false; top.volume()]];
    for i in (1..=s).rev() {
        let l = ladder.l(i - 1) as i64;
        let r = ladder.r(i - 1) as i64;
        let child = LatticeBox::cube(Point::origin(d), grid.side(0) * l as u64).unwrap();
        let mut next = [vec![false; child.volume()], vec![false; child.volume()]];
        for z in 0..grid.volume() {
            let base = grid.point_of(z).scale(l);
            for f in 0..2 {
                if flags[f][z] {
                    let a = base.add(&Point::origin(d).with(0, rng.gen_range(0..l - r)));
                    let far = rng.gen_range(a[0] + r..l + base[0]);
                    let b = a.with(0, far);
                    next[f][child.index_of(&a).unwrap()] = true;
                    next[f][child.index_of(&b).unwrap()] = true;
                } else {
                    let mut w = base;
                    for k in 0..d {
                        w = w.with(k, base[k] + rng.gen_range(0..=l - r));
                    }
                    let win = LatticeBox::cube(w, r as u64).unwrap();
                    for c in win.points() {
                        if rng.gen_bool(q) {
                            next[f][child.index_of(&c).unwrap()] = true;
                        }
                    }
                }
            }
        }
        grid = child;
        flags = next;
    }
    assert_eq!(grid, grid0);
    let to_bits = |v: &[bool]| v.iter().copied().collect::<BitVec<u64, Lsb0>>();
    BadnessField::from_level0(ladder.clone(), grid0, to_bits(&flags[0]), to_bits(&flags[1]), s).unwrap()
}
