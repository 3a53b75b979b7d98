//! Dense scene alignment of per-pixel SIFT descriptors.
//!
//! The energy is the usual truncated-L1 data term, an L1 penalty on the
//! displacement and truncated-L1 smoothness on u and v separately. It is
//! minimized coarse to fine: at each level every pixel searches a square
//! window centred on the upsampled coarser flow, and labels are refined by
//! exact dynamic programming along rows and then columns with the other
//! chains held fixed. Every refinement step is a block-coordinate minimum, so
//! the energy never increases within a level.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{DescriptorGrid, SIFT_DIM};
use crate::raster::{sample_bilinear_masked, DepthMap, Raster, ScalarField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignParams {
    /// Truncation of the L1 data cost, on descriptors scaled to [0, 255].
    pub truncation: f64,
    /// Weight of `|u| + |v|`.
    pub displacement_weight: f64,
    pub smoothness: f64,
    pub smoothness_truncation: f64,
    pub levels: usize,
    pub radius: usize,
    /// Maximum refinement sweeps per level.
    pub sweeps: usize,
}

impl Default for AlignParams {
    fn default() -> Self {
        AlignParams {
            truncation: 30.0 * 255.0,
            displacement_weight: 0.005 * 255.0,
            smoothness: 2.0 * 255.0,
            smoothness_truncation: 40.0 * 255.0,
            levels: 4,
            radius: 5,
            sweeps: 30,
        }
    }
}

impl AlignParams {
    pub fn validate(&self) -> Result<()> {
        let w = [self.truncation, self.displacement_weight, self.smoothness, self.smoothness_truncation];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("alignment weights must be finite and >= 0".into()));
        }
        if self.radius == 0 || self.levels == 0 {
            return Err(Error::Config("alignment radius and levels must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-query-pixel displacement into the candidate domain.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpField {
    width: usize,
    height: usize,
    u: Vec<f64>,
    v: Vec<f64>,
    residual: Vec<f64>,
    valid: Vec<bool>,
}

impl WarpField {
    /// A warp from displacements; residuals start at zero and validity is
    /// whether the displaced pixel lands inside a `cand_w x cand_h` domain.
    pub fn new(width: usize, height: usize, u: Vec<f64>, v: Vec<f64>, cand_w: usize, cand_h: usize) -> Result<Self> {
        let n = width * height;
        if n == 0 || u.len() != n || v.len() != n {
            return Err(Error::Dimensions(format!("warp field {width}x{height}")));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::InvalidValue("warp displacements must be finite".into()));
        }
        let valid = (0..n)
            .map(|i| {
                let x = ((i % width) as f64 + u[i]).round();
                let y = ((i / width) as f64 + v[i]).round();
                x >= 0.0 && y >= 0.0 && x < cand_w as f64 && y < cand_h as f64
            })
            .collect();
        Ok(WarpField { width, height, u, v, residual: vec![0.0; n], valid })
    }

    pub fn zero(width: usize, height: usize) -> Self {
        let n = width * height;
        WarpField { width, height, u: vec![0.0; n], v: vec![0.0; n], residual: vec![0.0; n], valid: vec![true; n] }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn residual(&self) -> &[f64] {
        &self.residual
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn nonzero_fraction(&self) -> f64 {
        self.u.iter().zip(&self.v).filter(|(u, v)| **u != 0.0 || **v != 0.0).count() as f64 / self.u.len() as f64
    }

    /// Residuals recomputed as the L2 distance of matched descriptors.
    fn with_residuals(mut self, q: &DescriptorGrid, c: &DescriptorGrid) -> Self {
        let w = self.width;
        self.residual = (0..w * self.height)
            .map(|i| {
                if !self.valid[i] {
                    return 0.0;
                }
                let tx = ((i % w) as f64 + self.u[i]).round() as usize;
                let ty = ((i / w) as f64 + self.v[i]).round() as usize;
                q.descriptor(i % w, i / w)
                    .iter()
                    .zip(c.descriptor(tx, ty))
                    .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        self
    }
}

/// Descriptors quantized to bytes, the domain of the energy.
struct Quantized {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Quantized {
    fn new(g: &DescriptorGrid) -> Self {
        Quantized {
            width: g.width(),
            height: g.height(),
            data: g.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        }
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * SIFT_DIM;
        &self.data[i..i + SIFT_DIM]
    }
}

#[inline]
fn l1(a: &[u8], b: &[u8]) -> u32 {
    a.iter().zip(b).map(|(x, y)| x.abs_diff(*y) as u32).sum()
}

#[inline]
fn pair_cost(du: i32, dv: i32, p: &AlignParams) -> f64 {
    (p.smoothness * du.abs() as f64).min(p.smoothness_truncation)
        + (p.smoothness * dv.abs() as f64).min(p.smoothness_truncation)
}

/// Energy of an integer flow; every target must lie inside the candidate.
fn energy(q: &Quantized, c: &Quantized, u: &[i32], v: &[i32], p: &AlignParams) -> f64 {
    let (w, h) = (q.width, q.height);
    let rows: Vec<f64> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut e = 0.0;
            for x in 0..w {
                let i = y * w + x;
                let tx = (x as i32 + u[i]) as usize;
                let ty = (y as i32 + v[i]) as usize;
                e += (l1(q.at(x, y), c.at(tx, ty)) as f64).min(p.truncation);
                e += p.displacement_weight * (u[i].abs() + v[i].abs()) as f64;
                if x + 1 < w {
                    e += pair_cost(u[i] - u[i + 1], v[i] - v[i + 1], p);
                }
                if y + 1 < h {
                    e += pair_cost(u[i] - u[i + w], v[i] - v[i + w], p);
                }
            }
            e
        })
        .collect();
    rows.iter().sum()
}

/// Energy of an integer flow field on descriptor grids.
pub fn alignment_energy(q: &DescriptorGrid, c: &DescriptorGrid, u: &[i32], v: &[i32], p: &AlignParams) -> Result<f64> {
    if q.dims() != c.dims() || u.len() != q.width() * q.height() || v.len() != u.len() {
        return Err(Error::SizeMismatch("alignment energy inputs".into()));
    }
    let (w, h) = q.dims();
    for i in 0..u.len() {
        let tx = (i % w) as i64 + u[i] as i64;
        let ty = (i / w) as i64 + v[i] as i64;
        if tx < 0 || ty < 0 || tx >= w as i64 || ty >= h as i64 {
            return Err(Error::InvalidValue(format!("flow at pixel {i} leaves the candidate")));
        }
    }
    Ok(energy(&Quantized::new(q), &Quantized::new(c), u, v, p))
}

const OUTSIDE: f32 = 1e20;

/// One pyramid level of the search: per-pixel window centres and the data
/// cost of every label in the window.
struct Level<'a> {
    q: &'a Quantized,
    p: &'a AlignParams,
    n: usize,
    cu: Vec<i32>,
    cv: Vec<i32>,
    data: Vec<f32>,
}

impl<'a> Level<'a> {
    fn new(q: &'a Quantized, c: &'a Quantized, p: &'a AlignParams, cu: Vec<i32>, cv: Vec<i32>) -> Self {
        let r = p.radius as i32;
        let n = 2 * p.radius + 1;
        let (w, h) = (q.width, q.height);
        let mut data = vec![0f32; w * h * n * n];
        data.par_chunks_mut(w * n * n).enumerate().for_each(|(y, row)| {
            for x in 0..w {
                let i = y * w + x;
                let cell = &mut row[x * n * n..(x + 1) * n * n];
                for lv in -r..=r {
                    for lu in -r..=r {
                        let tx = x as i32 + cu[i] + lu;
                        let ty = y as i32 + cv[i] + lv;
                        let k = ((lv + r) as usize) * n + (lu + r) as usize;
                        cell[k] = if tx < 0 || ty < 0 || tx >= c.width as i32 || ty >= c.height as i32 {
                            OUTSIDE
                        } else {
                            (l1(q.at(x, y), c.at(tx as usize, ty as usize)) as f64).min(p.truncation) as f32
                        };
                    }
                }
            }
        });
        Level { q, p, n, cu, cv, data }
    }

    #[inline]
    fn label_uv(&self, i: usize, l: usize) -> (i32, i32) {
        let r = self.p.radius as i32;
        (self.cu[i] + (l % self.n) as i32 - r, self.cv[i] + (l / self.n) as i32 - r)
    }

    /// Unary cost of every label at pixel `i` given fixed neighbour flows.
    fn unary(&self, i: usize, fixed: &[(i32, i32)], out: &mut [f32]) {
        let nn = self.n * self.n;
        let data = &self.data[i * nn..(i + 1) * nn];
        for (l, o) in out.iter_mut().enumerate() {
            let (u, v) = self.label_uv(i, l);
            let mut e = data[l] as f64 + self.p.displacement_weight * (u.abs() + v.abs()) as f64;
            for (fu, fv) in fixed {
                e += pair_cost(u - fu, v - fv, self.p);
            }
            *o = e as f32;
        }
    }

    /// `out(z) = min_l h(l) + V(l - z)` for z on the label grid shifted by `shift`.
    fn transform(&self, h: &[f32], shift: (i32, i32), out: &mut [f32], scratch: &mut [f32]) {
        let n = self.n;
        let mu = self.p.smoothness as f32;
        let d = self.p.smoothness_truncation as f32;
        let mut line = vec![0f32; n];
        // along v for every u column
        for lu in 0..n {
            for k in 0..n {
                line[k] = h[k * n + lu];
            }
            dt_line(&mut line, mu, d, shift.1);
            for k in 0..n {
                scratch[k * n + lu] = line[k];
            }
        }
        // along u for every shifted v row
        for lv in 0..n {
            line.copy_from_slice(&scratch[lv * n..(lv + 1) * n]);
            dt_line(&mut line, mu, d, shift.0);
            out[lv * n..(lv + 1) * n].copy_from_slice(&line);
        }
    }

    /// Exact minimization of one chain of pixels with all other labels fixed.
    /// Returns whether any label changed.
    fn solve_chain(&self, chain: &[usize], side: &[[Option<usize>; 2]], labels: &[usize], out: &mut [usize]) -> bool {
        let nn = self.n * self.n;
        let len = chain.len();
        let mut m = vec![0f32; len * nn];
        let mut unary = vec![0f32; nn];
        let mut msg = vec![0f32; nn];
        let mut scratch = vec![0f32; nn];
        for (k, &i) in chain.iter().enumerate() {
            let fixed: Vec<(i32, i32)> = side[k].iter().flatten().map(|&j| self.label_uv(j, labels[j])).collect();
            self.unary(i, &fixed, &mut unary);
            if k == 0 {
                m[..nn].copy_from_slice(&unary);
                continue;
            }
            let prev = chain[k - 1];
            let shift = (self.cu[i] - self.cu[prev], self.cv[i] - self.cv[prev]);
            let (done, rest) = m.split_at_mut(k * nn);
            self.transform(&done[(k - 1) * nn..], shift, &mut msg, &mut scratch);
            for l in 0..nn {
                rest[l] = unary[l] + msg[l];
            }
        }
        let argmin = |s: &[f32]| (0..s.len()).fold(0, |b, l| if s[l] < s[b] { l } else { b });
        let mut best = argmin(&m[(len - 1) * nn..]);
        out[len - 1] = best;
        for k in (0..len - 1).rev() {
            let (u1, v1) = self.label_uv(chain[k + 1], best);
            let row = &m[k * nn..(k + 1) * nn];
            best = (0..nn)
                .map(|l| {
                    let (u, v) = self.label_uv(chain[k], l);
                    (l, row[l] as f64 + pair_cost(u - u1, v - v1, self.p))
                })
                .fold((0, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b })
                .0;
            out[k] = best;
        }
        chain.iter().zip(out.iter()).any(|(i, l)| labels[*i] != *l)
    }

    fn chain_energy(&self, chain: &[usize], side: &[[Option<usize>; 2]], labels: &[usize], proposal: &[usize]) -> f64 {
        let nn = self.n * self.n;
        let mut e = 0.0;
        for (k, &i) in chain.iter().enumerate() {
            let (u, v) = self.label_uv(i, proposal[k]);
            e += self.data[i * nn + proposal[k]] as f64 + self.p.displacement_weight * (u.abs() + v.abs()) as f64;
            for j in side[k].iter().flatten() {
                let (fu, fv) = self.label_uv(*j, labels[*j]);
                e += pair_cost(u - fu, v - fv, self.p);
            }
            if k > 0 {
                let (pu, pv) = self.label_uv(chain[k - 1], proposal[k - 1]);
                e += pair_cost(u - pu, v - pv, self.p);
            }
        }
        e
    }

    /// Alternating row and column sweeps; chains of the same parity are
    /// independent and run in parallel.
    fn refine(&self, labels: &mut [usize]) {
        let (w, h) = (self.q.width, self.q.height);
        let rows: Vec<(Vec<usize>, Vec<[Option<usize>; 2]>)> = (0..h)
            .map(|y| {
                let chain: Vec<usize> = (0..w).map(|x| y * w + x).collect();
                let side = chain.iter().map(|&i| [(y > 0).then(|| i - w), (y + 1 < h).then(|| i + w)]).collect();
                (chain, side)
            })
            .collect();
        let cols: Vec<(Vec<usize>, Vec<[Option<usize>; 2]>)> = (0..w)
            .map(|x| {
                let chain: Vec<usize> = (0..h).map(|y| y * w + x).collect();
                let side = chain.iter().map(|&i| [(x > 0).then(|| i - 1), (x + 1 < w).then(|| i + 1)]).collect();
                (chain, side)
            })
            .collect();
        for _ in 0..self.p.sweeps {
            let mut changed = false;
            for chains in [&rows, &cols] {
                for parity in 0..2 {
                    let updates: Vec<Option<(usize, Vec<usize>)>> = chains
                        .par_iter()
                        .enumerate()
                        .filter(|(k, _)| k % 2 == parity)
                        .map(|(k, (chain, side))| {
                            let mut out = vec![0; chain.len()];
                            if !self.solve_chain(chain, side, labels, &mut out) {
                                return None;
                            }
                            // keep the incumbent on float ties
                            let current: Vec<usize> = chain.iter().map(|i| labels[*i]).collect();
                            (self.chain_energy(chain, side, labels, &out)
                                < self.chain_energy(chain, side, labels, &current))
                            .then_some((k, out))
                        })
                        .collect();
                    for (k, out) in updates.into_iter().flatten() {
                        changed = true;
                        for (i, l) in chains[k].0.iter().zip(out) {
                            labels[*i] = l;
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
    }
}

/// Min-convolution of a label line with `min(mu |.|, d)`, evaluated at the
/// label positions `k + shift`.
fn dt_line(line: &mut [f32], mu: f32, d: f32, shift: i32) {
    let n = line.len();
    let mut g = line.to_vec();
    for k in 1..n {
        g[k] = g[k].min(g[k - 1] + mu);
    }
    for k in (0..n - 1).rev() {
        g[k] = g[k].min(g[k + 1] + mu);
    }
    let floor = line.iter().cloned().fold(f32::INFINITY, f32::min) + d;
    for (k, out) in line.iter_mut().enumerate() {
        let z = k as i32 + shift;
        let v = if z < 0 {
            g[0] + mu * (-z) as f32
        } else if z >= n as i32 {
            g[n - 1] + mu * (z - n as i32 + 1) as f32
        } else {
            g[z as usize]
        };
        *out = v.min(floor);
    }
}

/// Aligns a candidate to the query. `u, v` displace query pixels into the
/// candidate. The returned field never has higher energy than the zero warp.
pub fn align(query: &DescriptorGrid, cand: &DescriptorGrid, p: &AlignParams) -> Result<WarpField> {
    Ok(align_with_energy(query, cand, p)?.0)
}

/// [`align`] together with the energies of the result and of the zero warp.
pub fn align_with_energy(query: &DescriptorGrid, cand: &DescriptorGrid, p: &AlignParams) -> Result<(WarpField, f64, f64)> {
    if query.dims() != cand.dims() {
        return Err(Error::SizeMismatch(format!("query {:?} vs candidate {:?}", query.dims(), cand.dims())));
    }
    p.validate()?;
    let mut qs = vec![query.clone()];
    let mut cs = vec![cand.clone()];
    while qs.len() < p.levels {
        let last = qs.last().expect("non-empty");
        if last.width() < 16 || last.height() < 16 {
            break;
        }
        let (nq, nc) = (last.downsample(), cs.last().expect("non-empty").downsample());
        qs.push(nq);
        cs.push(nc);
    }

    let mut flow: Option<(usize, Vec<i32>, Vec<i32>)> = None;
    let mut final_u = Vec::new();
    let mut final_v = Vec::new();
    let mut finest = None;
    for level in (0..qs.len()).rev() {
        let (q, c) = (Quantized::new(&qs[level]), Quantized::new(&cs[level]));
        let (w, h) = (q.width, q.height);
        let (mut cu, mut cv) = (vec![0i32; w * h], vec![0i32; w * h]);
        if let Some((cw, u, v)) = &flow {
            for y in 0..h {
                for x in 0..w {
                    let j = (y / 2) * cw + x / 2;
                    let i = y * w + x;
                    cu[i] = (2 * u[j]).clamp(-(x as i32), (w - 1 - x) as i32);
                    cv[i] = (2 * v[j]).clamp(-(y as i32), (h - 1 - y) as i32);
                }
            }
        }
        let lvl = Level::new(&q, &c, p, cu, cv);
        let centre = (lvl.n * lvl.n) / 2;
        let mut labels = vec![centre; w * h];
        lvl.refine(&mut labels);
        let (u, v): (Vec<i32>, Vec<i32>) = (0..w * h).map(|i| lvl.label_uv(i, labels[i])).unzip();
        if level == 0 {
            final_u = u;
            final_v = v;
            finest = Some((q, c));
        } else {
            flow = Some((w, u, v));
        }
    }
    let (q, c) = finest.expect("at least one level");
    let (w, h) = (q.width, q.height);
    let zeros = vec![0i32; w * h];
    let e = energy(&q, &c, &final_u, &final_v, p);
    let e0 = energy(&q, &c, &zeros, &zeros, p);
    let (u, v, e) = if e <= e0 { (final_u, final_v, e) } else { (zeros.clone(), zeros, e0) };
    debug_assert!(e <= e0);
    let field = WarpField::new(w, h, u.iter().map(|x| *x as f64).collect(), v.iter().map(|x| *x as f64).collect(), w, h)?
        .with_residuals(query, cand);
    Ok((field, e, e0))
}

/// Pulls a candidate-domain raster into the query domain by bilinear sampling
/// at `i + (u, v)`. Pixels landing outside or on invalid samples are invalid.
pub fn warp_scalar(field: &ScalarField, valid: Option<&[bool]>, w: &WarpField) -> (ScalarField, Vec<bool>) {
    let all = vec![true; field.len()];
    let valid = valid.unwrap_or(&all);
    let (qw, qh) = w.dims();
    let (data, ok): (Vec<f64>, Vec<bool>) = (0..qw * qh)
        .map(|i| {
            let x = (i % qw) as f64 + w.u[i];
            let y = (i / qw) as f64 + w.v[i];
            match sample_bilinear_masked(field, valid, x, y) {
                Some(s) => (s, true),
                None => (0.0, false),
            }
        })
        .unzip();
    (Raster::new(qw, qh, data).expect("warp dims"), ok)
}

pub fn warp_depth(depth: &DepthMap, w: &WarpField) -> DepthMap {
    let (values, valid) = warp_scalar(depth.raster(), Some(depth.valid()), w);
    let (qw, qh) = w.dims();
    DepthMap::with_mask(qw, qh, values.into_data(), valid).expect("bilinear sample of positive depths is positive")
}

/// `exp(-r²/σ²)` with `σ` the median residual (at least 1e-3); zero where invalid.
pub fn confidence_from_residuals(residual: &[f64], valid: &[bool]) -> Vec<f64> {
    let mut r: Vec<f64> = residual.iter().zip(valid).filter(|(_, v)| **v).map(|(r, _)| *r).collect();
    let sigma = if r.is_empty() {
        1e-3
    } else {
        r.sort_by(f64::total_cmp);
        let n = r.len();
        let med = if n % 2 == 1 { r[n / 2] } else { 0.5 * (r[n / 2 - 1] + r[n / 2]) };
        med.max(1e-3)
    };
    residual.iter().zip(valid).map(|(r, v)| if *v { (-(r * r) / (sigma * sigma)).exp() } else { 0.0 }).collect()
}

/// Per-pixel confidence of a warp from its matched-descriptor residuals.
pub fn warp_confidence(query: &DescriptorGrid, cand: &DescriptorGrid, w: &WarpField) -> Result<ScalarField> {
    if query.dims() != w.dims() {
        return Err(Error::SizeMismatch("warp and query descriptors".into()));
    }
    let (qw, qh) = w.dims();
    let valid: Vec<bool> = (0..qw * qh)
        .map(|i| {
            let x = ((i % qw) as f64 + w.u[i]).round();
            let y = ((i / qw) as f64 + w.v[i]).round();
            w.valid[i] && x >= 0.0 && y >= 0.0 && (x as usize) < cand.width() && (y as usize) < cand.height()
        })
        .collect();
    let field = WarpField { valid: valid.clone(), ..w.clone() }.with_residuals(query, cand);
    ScalarField::new(qw, qh, confidence_from_residuals(&field.residual, &valid))
}
