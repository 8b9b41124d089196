//! Sparse Dirichlet problems for the graph Laplacian and a preconditioned
//! conjugate-gradient solver.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::Subgraph;
use crate::scalar::Real;

/// Convergence report of an iterative solve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// Final relative residual `|b - Ax| / |b|`.
    pub residual: f64,
}

/// The operator `(Lu)_z = mu_z u_z - sum_{w ~ z, w in U} u_w` on an unknown
/// set `U` of a subgraph, with `mu_z` the occupied degree in the whole graph.
/// Neighbours outside `U` carry fixed Dirichlet values.
pub struct DirichletSystem {
    /// Box index of each unknown.
    pub unknowns: Vec<usize>,
    /// Box index -> unknown slot (`u32::MAX` if fixed).
    slot: Vec<u32>,
    row_start: Vec<usize>,
    cols: Vec<u32>,
    diag: Vec<u32>,
}

const FIXED: u32 = u32::MAX;

impl DirichletSystem {
    pub fn new(g: &Subgraph, unknowns: Vec<usize>) -> Result<Self> {
        let vol = g.bx().volume();
        let mut slot = vec![FIXED; vol];
        for (k, &i) in unknowns.iter().enumerate() {
            if i >= vol || !g.occupied(i) {
                return Err(Error::InvalidArgument(format!("unknown {i} is not an occupied site")));
            }
            if slot[i] != FIXED {
                return Err(Error::InvalidArgument(format!("unknown {i} listed twice")));
            }
            slot[i] = k as u32;
        }
        let mut row_start = Vec::with_capacity(unknowns.len() + 1);
        let mut cols = Vec::with_capacity(unknowns.len() * 2 * g.dim());
        let mut diag = Vec::with_capacity(unknowns.len());
        row_start.push(0);
        for &i in &unknowns {
            let mut deg = 0;
            g.for_each_neighbor(i, |j| {
                deg += 1;
                if slot[j] != FIXED {
                    cols.push(slot[j]);
                }
            });
            diag.push(deg);
            row_start.push(cols.len());
        }
        Ok(Self { unknowns, slot, row_start, cols, diag })
    }

    pub fn len(&self) -> usize {
        self.unknowns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unknowns.is_empty()
    }

    /// Slot of a box index, if it is an unknown.
    pub fn slot(&self, idx: usize) -> Option<usize> {
        let s = self.slot[idx];
        (s != FIXED).then_some(s as usize)
    }

    pub fn diagonal(&self, k: usize) -> u32 {
        self.diag[k]
    }

    pub fn apply<T: Real>(&self, x: &[T], y: &mut [T]) {
        y.par_iter_mut().enumerate().with_min_len(4096).for_each(|(k, yk)| {
            let mut acc = T::of(self.diag[k] as f64) * x[k];
            for &c in &self.cols[self.row_start[k]..self.row_start[k + 1]] {
                acc -= x[c as usize];
            }
            *yk = acc;
        });
    }

    /// Right-hand side from fixed neighbour values `fixed(box_index)`.
    pub fn rhs<T: Real>(&self, g: &Subgraph, fixed: impl Fn(usize) -> T) -> Vec<T> {
        self.unknowns
            .iter()
            .map(|&i| {
                let mut acc = T::zero();
                g.for_each_neighbor(i, |j| {
                    if self.slot[j] == FIXED {
                        acc += fixed(j);
                    }
                });
                acc
            })
            .collect()
    }

    /// Solves `L u = b` by Jacobi-preconditioned conjugate gradients.
    pub fn solve<T: Real>(&self, b: &[T], tol: f64, max_iter: usize) -> Result<(Vec<T>, SolveStats)> {
        let inv_diag: Vec<T> = self.diag.iter().map(|&d| T::one() / T::of(d.max(1) as f64)).collect();
        pcg(|x, y| self.apply(x, y), &inv_diag, b, tol, max_iter)
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.par_iter()
        .zip(b.par_iter())
        .with_min_len(8192)
        .map(|(&x, &y)| x * y)
        .reduce(T::zero, |p, q| p + q)
}

/// Preconditioned conjugate gradients for a symmetric positive definite
/// operator with diagonal preconditioner `inv_diag`.
pub fn pcg<T: Real>(
    apply: impl Fn(&[T], &mut [T]),
    inv_diag: &[T],
    b: &[T],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<T>, SolveStats)> {
    let n = b.len();
    let mut x = vec![T::zero(); n];
    let bnorm = dot(b, b).as_f64().sqrt();
    if bnorm == 0.0 {
        return Ok((x, SolveStats { iterations: 0, residual: 0.0 }));
    }
    let mut r = b.to_vec();
    let mut z: Vec<T> = r.iter().zip(inv_diag).map(|(&a, &m)| a * m).collect();
    let mut p = z.clone();
    let mut ap = vec![T::zero(); n];
    let mut rz = dot(&r, &z);
    for it in 1..=max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= T::zero() {
            return Err(Error::NonConvergence {
                iterations: it,
                residual: dot(&r, &r).as_f64().sqrt() / bnorm,
            });
        }
        let alpha = rz / pap;
        x.par_iter_mut().zip(p.par_iter()).with_min_len(8192).for_each(|(xi, &pi)| *xi += alpha * pi);
        r.par_iter_mut().zip(ap.par_iter()).with_min_len(8192).for_each(|(ri, &a)| *ri -= alpha * a);
        let res = dot(&r, &r).as_f64().sqrt() / bnorm;
        if res <= tol {
            return Ok((x, SolveStats { iterations: it, residual: res }));
        }
        z.par_iter_mut()
            .zip(r.par_iter().zip(inv_diag.par_iter()))
            .with_min_len(8192)
            .for_each(|(zi, (&ri, &m))| *zi = ri * m);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut().zip(z.par_iter()).with_min_len(8192).for_each(|(pi, &zi)| *pi = zi + beta * *pi);
    }
    Err(Error::NonConvergence { iterations: max_iter, residual: dot(&r, &r).as_f64().sqrt() / bnorm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{LatticeBox, Point};

    #[test]
    fn one_dimensional_gamblers_ruin() {
        let bx = LatticeBox::cube(Point::new(&[0]).unwrap(), 11).unwrap();
        let g = Subgraph::full(bx);
        let unknowns: Vec<usize> = (1..10).collect();
        let sys = DirichletSystem::new(&g, unknowns).unwrap();
        let b: Vec<f64> = sys.rhs(&g, |j| if j == 10 { 1.0 } else { 0.0 });
        let (u, stats) = sys.solve(&b, 1e-13, 100).unwrap();
        assert!(stats.residual <= 1e-13);
        for (k, v) in u.iter().enumerate() {
            assert!((v - (k + 1) as f64 / 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn f32_solve_agrees_with_f64() {
        let bx = LatticeBox::cube(Point::new(&[0, 0]).unwrap(), 8).unwrap();
        let g = Subgraph::full(bx);
        let unknowns: Vec<usize> = (0..bx.volume()).filter(|&i| !bx.on_face(i)).collect();
        let sys = DirichletSystem::new(&g, unknowns).unwrap();
        let b64: Vec<f64> = sys.rhs(&g, |j| (j % 5) as f64);
        let b32: Vec<f32> = b64.iter().map(|&v| v as f32).collect();
        let (u64s, _) = sys.solve(&b64, 1e-12, 1000).unwrap();
        let (u32s, _) = sys.solve(&b32, 1e-6, 1000).unwrap();
        for (a, b) in u64s.iter().zip(&u32s) {
            assert!((a - *b as f64).abs() < 1e-4);
        }
    }
}
