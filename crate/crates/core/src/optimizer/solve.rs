use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::DepthMap;
use crate::optimizer::params::ObjectiveParams;
use crate::optimizer::penalty::robust_norm;
use crate::optimizer::problem::{AssembledProblem, Operator};

const CHUNK: usize = 4096;

/// Sum of `f(0..n)` over fixed-size chunks, so the result does not depend on
/// the thread count.
pub(crate) fn chunked_sum(n: usize, f: impl Fn(usize) -> f64 + Sync) -> f64 {
    let partial: Vec<f64> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| (c * CHUNK..((c + 1) * CHUNK).min(n)).map(&f).sum())
        .collect();
    partial.iter().sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    chunked_sum(a.len(), |i| a[i] * b[i])
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    /// Stacked per-frame depths, clamped to the depth floor.
    pub depth: Vec<f64>,
    /// Objective before the first and after every accepted outer iteration.
    pub trace: Vec<f64>,
    pub outer_iterations: usize,
    pub converged: bool,
}

impl SolveResult {
    /// Splits the stacked solution into per-frame depth maps.
    pub fn frames(&self, width: usize, height: usize) -> Vec<DepthMap> {
        self.depth
            .chunks(width * height)
            .map(|c| DepthMap::new(width, height, c.to_vec()).expect("solution is clamped positive"))
            .collect()
    }
}

/// Weighted least-squares system `H x = b` of one reweighting step, with the
/// stencil blocks folded into per-unknown coefficient arrays.
struct Normal<'a> {
    prob: &'a AssembledProblem,
    diag_id: Vec<f64>,
    wx: Vec<f64>,
    wy: Vec<f64>,
    /// IRLS weights of the sparse blocks, indexed like `prob.blocks`.
    sparse: Vec<Option<Vec<f64>>>,
    rhs: Vec<f64>,
    jacobi: Vec<f64>,
}

impl<'a> Normal<'a> {
    fn build(prob: &'a AssembledProblem, x: &[f64], epsilon: f64) -> Result<Self> {
        let n_unk = prob.unknowns();
        let mut diag_id = vec![0.0; n_unk];
        let mut wx = vec![0.0; n_unk];
        let mut wy = vec![0.0; n_unk];
        let mut bid = vec![0.0; n_unk];
        let mut bx = vec![0.0; n_unk];
        let mut by = vec![0.0; n_unk];
        let mut sparse = Vec::with_capacity(prob.blocks.len());
        let mut rhs_sparse = vec![0.0; n_unk];
        let mut diag_sparse = vec![0.0; n_unk];

        for b in &prob.blocks {
            let omega: Vec<f64> = (0..b.rows())
                .into_par_iter()
                .map(|r| b.weight[r] / (2.0 * robust_norm(b.residual(r, x), epsilon)))
                .collect();
            if omega.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { block: b.to_string() });
            }
            let (w_acc, b_acc, offset) = match &b.op {
                Operator::Identity { offset } => (&mut diag_id, &mut bid, *offset),
                Operator::ForwardX { offset, .. } => (&mut wx, &mut bx, *offset),
                Operator::ForwardY { offset, .. } => (&mut wy, &mut by, *offset),
                Operator::Sparse { row_ptr, cols, coefs } => {
                    for (r, om) in omega.iter().enumerate() {
                        for k in row_ptr[r]..row_ptr[r + 1] {
                            let c = cols[k] as usize;
                            rhs_sparse[c] += coefs[k] * om * b.target[r];
                            diag_sparse[c] += coefs[k] * coefs[k] * om;
                        }
                    }
                    sparse.push(Some(omega));
                    continue;
                }
            };
            let rows = b.rows();
            w_acc[offset..offset + rows]
                .par_iter_mut()
                .zip(b_acc[offset..offset + rows].par_iter_mut())
                .enumerate()
                .for_each(|(r, (wa, ba))| {
                    *wa += omega[r];
                    *ba += omega[r] * b.target[r];
                });
            sparse.push(None);
        }

        let mut normal = Normal { prob, diag_id, wx, wy, sparse, rhs: Vec::new(), jacobi: Vec::new() };
        // rhs = Aᵀ Ω t, assembled with the same stencil transpose as the matvec
        let mut rhs = bid;
        normal.add_diff_transpose(&bx, &by, &mut rhs);
        rhs.iter_mut().zip(&rhs_sparse).for_each(|(r, s)| *r += s);
        normal.rhs = rhs;
        normal.jacobi = (0..n_unk)
            .map(|u| {
                let (x, y) = normal.coords(u);
                let (w, h) = (prob.width, prob.height);
                let mut d = normal.diag_id[u] + diag_sparse[u];
                if x > 0 {
                    d += normal.wx[u - 1];
                }
                if x + 1 < w {
                    d += normal.wx[u];
                }
                if y > 0 {
                    d += normal.wy[u - w];
                }
                if y + 1 < h {
                    d += normal.wy[u];
                }
                if d > 0.0 {
                    1.0 / d
                } else {
                    1.0
                }
            })
            .collect();
        Ok(normal)
    }

    #[inline]
    fn coords(&self, u: usize) -> (usize, usize) {
        let i = u % (self.prob.width * self.prob.height);
        (i % self.prob.width, i / self.prob.width)
    }

    /// `out += Dxᵀ zx + Dyᵀ zy` for per-row values `zx`, `zy`.
    fn add_diff_transpose(&self, zx: &[f64], zy: &[f64], out: &mut [f64]) {
        let (w, h) = (self.prob.width, self.prob.height);
        out.par_iter_mut().enumerate().for_each(|(u, o)| {
            let (x, y) = self.coords(u);
            if x > 0 {
                *o += zx[u - 1];
            }
            if x + 1 < w {
                *o -= zx[u];
            }
            if y > 0 {
                *o += zy[u - w];
            }
            if y + 1 < h {
                *o -= zy[u];
            }
        });
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let (w, h) = (self.prob.width, self.prob.height);
        out.par_iter_mut().enumerate().for_each(|(u, o)| {
            let (x, y) = self.coords(u);
            let mut acc = self.diag_id[u] * v[u];
            if x > 0 {
                acc += self.wx[u - 1] * (v[u] - v[u - 1]);
            }
            if x + 1 < w {
                acc -= self.wx[u] * (v[u + 1] - v[u]);
            }
            if y > 0 {
                acc += self.wy[u - w] * (v[u] - v[u - w]);
            }
            if y + 1 < h {
                acc -= self.wy[u] * (v[u + w] - v[u]);
            }
            *o = acc;
        });
        for (b, omega) in self.prob.blocks.iter().zip(&self.sparse) {
            let (Some(omega), Operator::Sparse { row_ptr, cols, coefs }) = (omega, &b.op) else {
                continue;
            };
            for (r, om) in omega.iter().enumerate() {
                let (a, e) = (row_ptr[r], row_ptr[r + 1]);
                let z = om * (a..e).map(|k| coefs[k] * v[cols[k] as usize]).sum::<f64>();
                for k in a..e {
                    out[cols[k] as usize] += coefs[k] * z;
                }
            }
        }
    }

    /// Jacobi-preconditioned conjugate gradient, warm-started at `x`.
    fn pcg(&self, x: &mut [f64], tolerance: f64, max_iterations: usize) {
        let n = x.len();
        let b_norm = dot(&self.rhs, &self.rhs).sqrt();
        if b_norm == 0.0 {
            return;
        }
        let mut hx = vec![0.0; n];
        self.apply(x, &mut hx);
        let mut r: Vec<f64> = self.rhs.iter().zip(&hx).map(|(b, a)| b - a).collect();
        let mut z: Vec<f64> = r.iter().zip(&self.jacobi).map(|(r, m)| r * m).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut hp = hx;
        for _ in 0..max_iterations {
            if dot(&r, &r).sqrt() <= tolerance * b_norm {
                break;
            }
            self.apply(&p, &mut hp);
            let php = dot(&p, &hp);
            if !(php > 0.0) {
                break;
            }
            let step = rz / php;
            x.par_iter_mut().zip(&p).for_each(|(x, p)| *x += step * p);
            r.par_iter_mut().zip(&hp).for_each(|(r, hp)| *r -= step * hp);
            z.par_iter_mut().zip(&r).zip(&self.jacobi).for_each(|((z, r), m)| *z = r * m);
            let rz_next = dot(&r, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            p.par_iter_mut().zip(&z).for_each(|(p, z)| *p = z + beta * *p);
        }
    }
}

/// Cap on the extrapolation factor of accepted over-relaxed steps.
const MAX_RELAXATION: f64 = 64.0;

/// Minimizes the robust objective by iteratively reweighted least squares.
///
/// Each outer step replaces every `φ(r)` by its quadratic majorizer at the
/// current residual and solves the weighted normal equations with PCG, so the
/// objective never increases. A step that would increase it (solver round-off)
/// is rejected and ends the loop. After each step an over-relaxed point
/// further along the same direction is tried and kept when it is lower, which
/// shortens the slow tail of reweighting on near-L1 objectives.
pub fn irls_solve(prob: &AssembledProblem, init: &[f64], p: &ObjectiveParams) -> Result<SolveResult> {
    if init.len() != prob.unknowns() {
        return Err(Error::SizeMismatch(format!("init has {} values for {} unknowns", init.len(), prob.unknowns())));
    }
    if init.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue("initialization must be finite".into()));
    }
    let objective = |x: &[f64]| -> Result<f64> {
        let mut total = 0.0;
        for b in &prob.blocks {
            let v = b.objective(x, p.epsilon);
            if !v.is_finite() {
                return Err(Error::NonFinite { block: b.to_string() });
            }
            total += v;
        }
        Ok(total)
    };

    let mut x = init.to_vec();
    let mut current = objective(&x)?;
    let mut trace = vec![current];
    let mut converged = false;
    let mut outer = 0;
    let mut relax = 1.0;
    while outer < p.max_outer_iterations {
        outer += 1;
        let normal = Normal::build(prob, &x, p.epsilon)?;
        let mut next = x.clone();
        normal.pcg(&mut next, p.inner_tolerance, p.max_inner_iterations);
        let mut value = objective(&next)?;
        if value > current {
            converged = true;
            break;
        }
        // over-relaxed step along the majorizer's direction, kept only if it does better
        let stretched: Vec<f64> = next.iter().zip(&x).map(|(n, o)| n + relax * (n - o)).collect();
        let stretched_value = objective(&stretched)?;
        if stretched_value < value {
            next = stretched;
            value = stretched_value;
            relax = (relax * 2.0).min(MAX_RELAXATION);
        } else {
            relax = 1.0;
        }
        let decrease = current - value;
        x = next;
        trace.push(value);
        let done = decrease <= p.outer_tolerance * current.abs();
        current = value;
        if done {
            converged = true;
            break;
        }
    }
    debug_assert!(trace.windows(2).all(|t| t[1] <= t[0]));
    x.iter_mut().for_each(|v| *v = v.max(p.depth_floor));
    Ok(SolveResult { depth: x, trace, outer_iterations: outer, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::problem::{assemble_single, CandidateSet, WarpedCandidate};
    use crate::raster::{DepthMap, ImageRGB, ScalarField};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(seed: u64, w: usize, h: usize, k: usize, p: &ObjectiveParams) -> AssembledProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = ImageRGB::from_fn(w, h, |_, _| [rng.random::<f64>(); 3]);
        let cands = (0..k)
            .map(|_| WarpedCandidate {
                depth: DepthMap::new(w, h, (0..w * h).map(|_| rng.random_range(1.0..10.0)).collect()).unwrap(),
                confidence: Some(ScalarField::from_fn(w, h, |_, _| rng.random::<f64>())),
            })
            .collect();
        let prior = DepthMap::new(w, h, (0..w * h).map(|_| rng.random_range(2.0..8.0)).collect()).unwrap();
        assemble_single(&img, &CandidateSet::new(cands), &prior, p).unwrap()
    }

    #[test]
    fn normal_matvec_matches_dense_assembly() {
        let p = ObjectiveParams::default();
        let prob = random_problem(1, 4, 3, 2, &p);
        let x: Vec<f64> = (0..12).map(|i| 1.0 + (i as f64 * 0.37).sin()).collect();
        let normal = Normal::build(&prob, &x, p.epsilon).unwrap();
        let n = prob.unknowns();
        let mut dense = vec![vec![0.0; n]; n];
        let mut rhs = vec![0.0; n];
        for b in &prob.blocks {
            for r in 0..b.rows() {
                let om = b.weight[r] / (2.0 * robust_norm(b.residual(r, &x), p.epsilon));
                let e = b.row_entries(r);
                for (c1, v1) in &e {
                    rhs[*c1] += om * v1 * b.target[r];
                    for (c2, v2) in &e {
                        dense[*c1][*c2] += om * v1 * v2;
                    }
                }
            }
        }
        let v: Vec<f64> = (0..n).map(|i| (i as f64).cos()).collect();
        let mut out = vec![0.0; n];
        normal.apply(&v, &mut out);
        for u in 0..n {
            let direct: f64 = (0..n).map(|c| dense[u][c] * v[c]).sum();
            assert!((direct - out[u]).abs() < 1e-9 * (1.0 + direct.abs()));
            assert!((rhs[u] - normal.rhs[u]).abs() < 1e-9 * (1.0 + rhs[u].abs()));
            assert!((1.0 / dense[u][u] - normal.jacobi[u]).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_minimizer_recovered() {
        let (w, h) = (6, 5);
        let p = ObjectiveParams { alpha: 0.0, beta: 0.0, gamma: 0.0, ..ObjectiveParams::default() };
        let cands = CandidateSet::new(vec![WarpedCandidate {
            depth: DepthMap::constant(w, h, 3.5),
            confidence: Some(ScalarField::filled(w, h, 1.0)),
        }]);
        let img = ImageRGB::filled(w, h, [0.3; 3]);
        let prob = assemble_single(&img, &cands, &DepthMap::constant(w, h, 1.0), &p).unwrap();
        let res = irls_solve(&prob, &vec![1.0; w * h], &p).unwrap();
        assert!(res.depth.iter().all(|d| (d - 3.5).abs() < 1e-6));
    }

    #[test]
    fn trace_is_non_increasing() {
        let p = ObjectiveParams::default();
        for seed in 0..5 {
            let prob = random_problem(seed, 8, 8, 2, &p);
            let res = irls_solve(&prob, &vec![5.0; 64], &p).unwrap();
            for t in res.trace.windows(2) {
                assert!(t[1] <= t[0] * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn different_inits_agree() {
        let p = ObjectiveParams { max_outer_iterations: 200, outer_tolerance: 1e-12, ..ObjectiveParams::default() };
        let prob = random_problem(7, 8, 8, 2, &p);
        let a = irls_solve(&prob, &vec![1.0; 64], &p).unwrap();
        let b = irls_solve(&prob, &vec![9.0; 64], &p).unwrap();
        let (fa, fb) = (a.trace.last().unwrap(), b.trace.last().unwrap());
        assert!((fa - fb).abs() <= 1e-4 * fa.abs());
    }

    #[test]
    fn rejects_non_finite_init() {
        let p = ObjectiveParams::default();
        let prob = random_problem(3, 4, 4, 1, &p);
        let mut init = vec![1.0; 16];
        init[3] = f64::NAN;
        assert!(irls_solve(&prob, &init, &p).is_err());
    }

    #[test]
    fn chunked_sum_is_order_stable() {
        let f = |i: usize| 1.0 / (1.0 + i as f64);
        assert_eq!(chunked_sum(10_000, f), chunked_sum(10_000, f));
        let direct: f64 = (0..10).map(f).sum();
        assert_eq!(chunked_sum(10, f), direct);
    }
}
