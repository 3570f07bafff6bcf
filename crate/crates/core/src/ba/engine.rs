//! Sparse Levenberg-Marquardt over `global + cameras + points` parameter
//! blocks.
//!
//! Point blocks are eliminated through the Schur complement; the reduced
//! system over global parameters, camera poses and any points that take part
//! in pair terms is solved densely after symmetric Jacobi scaling. Damping
//! adds `lambda * diag(JᵀWJ)`, so in the Jacobi-scaled system every diagonal
//! entry is 1 and the initial `lambda` is relative to that.

use nalgebra::{Cholesky, DMatrix, DVector, Matrix3, RowVector3, SMatrix, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Pose;
use crate::par;

/// Residual and Jacobian blocks of one 2D observation.
#[derive(Debug, Clone, Copy)]
pub struct Term<const G: usize> {
    pub cam: usize,
    pub r: Vector2<f64>,
    pub jg: SMatrix<f64, 2, G>,
    pub jc: SMatrix<f64, 2, 6>,
    pub jp: SMatrix<f64, 2, 3>,
    /// False when the current iterate could not be projected; the residual
    /// is then a constant and the Jacobians are zero.
    pub valid: bool,
}

/// Scalar residual coupling two points (already weighted, not robustified).
#[derive(Debug, Clone, Copy)]
pub struct PairTerm {
    pub a: usize,
    pub b: usize,
    pub r: f64,
    pub ja: RowVector3<f64>,
    pub jb: RowVector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<const G: usize> {
    pub global: SVector<f64, G>,
    pub cams: Vec<Pose>,
    pub points: Vec<Vector3<f64>>,
}

impl<const G: usize> Params<G> {
    pub fn num_params(&self) -> usize {
        G + 6 * self.cams.len() + 3 * self.points.len()
    }

    /// Applies a step laid out as `[global | cams (omega, dt) | points]`.
    pub fn apply(&self, step: &DVector<f64>) -> Self {
        let nc = self.cams.len();
        let mut global = self.global;
        for i in 0..G {
            global[i] += step[i];
        }
        let cams = self
            .cams
            .iter()
            .enumerate()
            .map(|(c, pose)| {
                let o = G + 6 * c;
                pose.retract(
                    &Vector3::new(step[o], step[o + 1], step[o + 2]),
                    &Vector3::new(step[o + 3], step[o + 4], step[o + 5]),
                )
            })
            .collect();
        let points = self
            .points
            .iter()
            .enumerate()
            .map(|(p, x)| {
                let o = G + 6 * nc + 3 * p;
                x + Vector3::new(step[o], step[o + 1], step[o + 2])
            })
            .collect();
        Self { global, cams, points }
    }
}

/// Problem definition consumed by the engine.
pub trait BundleModel<const G: usize>: Sync {
    fn num_points(&self) -> usize;
    /// Appends the terms of all observations of `point`.
    fn point_terms(&self, params: &Params<G>, point: usize, with_jacobian: bool, out: &mut Vec<Term<G>>);
    fn pair_terms(&self, _params: &Params<G>) -> Vec<PairTerm> {
        Vec::new()
    }
}

/// Parameters held constant during a solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask<const G: usize> {
    pub global: [bool; G],
    pub cams: Vec<bool>,
    /// `(point, axis)` coordinates held constant.
    pub point_coords: Vec<(usize, usize)>,
}

impl<const G: usize> Mask<G> {
    pub fn none(num_cams: usize) -> Self {
        Self {
            global: [false; G],
            cams: vec![false; num_cams],
            point_coords: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub gradient_tol: f64,
    pub param_tol: f64,
    /// Relative cost decrease below which an accepted step ends the solve.
    pub cost_tol: f64,
    /// Huber scale in pixels; `f64::INFINITY` gives plain least squares.
    pub robust_scale: f64,
    pub initial_lambda: f64,
    pub max_consecutive_rejections: usize,
    pub compute_covariance: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            gradient_tol: 1e-10,
            param_tol: 1e-12,
            cost_tol: 1e-12,
            robust_scale: 1.0,
            initial_lambda: 1e-4,
            max_consecutive_rejections: 25,
            compute_covariance: false,
        }
    }
}

pub const MAX_LAMBDA: f64 = 1e16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    ParameterTolerance,
    CostTolerance,
    MaxIterations,
    NoIterations,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub cost: f64,
    pub damping: f64,
    pub step_norm: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub history: Vec<IterationRecord>,
    pub mean_abs_residual: f64,
    pub median_abs_residual: f64,
    pub num_residuals: usize,
    pub invalid_residuals: usize,
    pub termination: Termination,
    /// Variance estimates of the global parameters from the inverse reduced
    /// system, scaled by the residual variance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance_diag: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("reduced system is not positive definite even at maximal damping")]
    SingularSystem,
    #[error("no step accepted in {0} consecutive attempts")]
    Diverged(usize),
    #[error("problem is under-determined: {residuals} residuals for {parameters} free parameters")]
    Underdetermined { residuals: usize, parameters: usize },
}

/// Huber loss of a squared residual norm, and its derivative (the IRLS weight).
pub fn huber(s: f64, k: f64) -> (f64, f64) {
    if !k.is_finite() || s <= k * k {
        (s, 1.0)
    } else {
        let n = s.sqrt();
        (2.0 * k * n - k * k, k / n)
    }
}

struct PointBlock<const G: usize> {
    point: usize,
    hpp: Matrix3<f64>,
    gp: Vector3<f64>,
    wg: SMatrix<f64, 3, G>,
    wc: Vec<(usize, SMatrix<f64, 3, 6>)>,
}

/// Normal equations at one iterate, with point blocks kept separately.
pub struct Linearization<const G: usize> {
    hkk: DMatrix<f64>,
    gk: DVector<f64>,
    blocks: Vec<PointBlock<G>>,
    /// Kept-system offset of every point that is not eliminated.
    kept_point: Vec<Option<usize>>,
    num_cams: usize,
    pub cost: f64,
}

struct Layout {
    num_cams: usize,
    kept_point: Vec<Option<usize>>,
    kept_dim: usize,
}

fn layout<const G: usize>(params: &Params<G>, pairs: &[PairTerm]) -> Layout {
    let mut kept_point = vec![None; params.points.len()];
    let mut next = G + 6 * params.cams.len();
    for pt in pairs {
        for p in [pt.a, pt.b] {
            if kept_point[p].is_none() {
                kept_point[p] = Some(next);
                next += 3;
            }
        }
    }
    Layout {
        num_cams: params.cams.len(),
        kept_point,
        kept_dim: next,
    }
}

fn mask_term<const G: usize>(t: &mut Term<G>, mask: &Mask<G>, point: usize) {
    for (i, fixed) in mask.global.iter().enumerate() {
        if *fixed {
            t.jg.column_mut(i).fill(0.0);
        }
    }
    if mask.cams[t.cam] {
        t.jc.fill(0.0);
    }
    for &(p, axis) in &mask.point_coords {
        if p == point {
            t.jp.column_mut(axis).fill(0.0);
        }
    }
}

fn mask_pair<const G: usize>(t: &mut PairTerm, mask: &Mask<G>) {
    for &(p, axis) in &mask.point_coords {
        if p == t.a {
            t.ja[axis] = 0.0;
        }
        if p == t.b {
            t.jb[axis] = 0.0;
        }
    }
}

fn add_block<R: nalgebra::Dim, C: nalgebra::Dim, S: nalgebra::storage::Storage<f64, R, C>>(
    m: &mut DMatrix<f64>,
    row: usize,
    col: usize,
    b: &nalgebra::Matrix<f64, R, C, S>,
) {
    for j in 0..b.ncols() {
        for i in 0..b.nrows() {
            m[(row + i, col + j)] += b[(i, j)];
        }
    }
}

/// Cost of the model at `params`.
pub fn evaluate_cost<const G: usize, M: BundleModel<G>>(model: &M, params: &Params<G>, robust_scale: f64) -> f64 {
    cost_and_residuals(model, params, robust_scale, false).0
}

/// Cost plus, optionally, the norm of every observation residual.
pub fn cost_and_residuals<const G: usize, M: BundleModel<G>>(
    model: &M,
    params: &Params<G>,
    robust_scale: f64,
    collect: bool,
) -> (f64, Vec<f64>, usize) {
    let n = model.num_points();
    let points: Vec<usize> = (0..n).collect();
    let chunk = par::chunk_size(n, 16, 64);
    let parts = par::map_chunks(&points, chunk, |_, ps| {
        let mut buf = Vec::new();
        let mut cost = 0.0;
        let mut norms = Vec::new();
        let mut invalid = 0;
        for &p in ps {
            buf.clear();
            model.point_terms(params, p, false, &mut buf);
            for t in &buf {
                let s = t.r.norm_squared();
                cost += huber(s, robust_scale).0;
                if !t.valid {
                    invalid += 1;
                }
                if collect {
                    norms.push(s.sqrt());
                }
            }
        }
        (cost, norms, invalid)
    });
    let mut cost = 0.0;
    let mut norms = Vec::new();
    let mut invalid = 0;
    for (c, nrm, inv) in parts {
        cost += c;
        norms.extend(nrm);
        invalid += inv;
    }
    for pt in model.pair_terms(params) {
        cost += pt.r * pt.r;
    }
    (cost, norms, invalid)
}

/// Builds the normal equations `JᵀWJ`, `JᵀWr` at `params`.
pub fn linearize<const G: usize, M: BundleModel<G>>(
    model: &M,
    params: &Params<G>,
    mask: &Mask<G>,
    robust_scale: f64,
) -> Linearization<G> {
    let mut pairs = model.pair_terms(params);
    for p in &mut pairs {
        mask_pair(p, mask);
    }
    let lay = layout(params, &pairs);
    let k = lay.kept_dim;
    let n = model.num_points();
    let points: Vec<usize> = (0..n).collect();
    let chunk = par::chunk_size(n, 16, 16);
    let parts = par::map_chunks(&points, chunk, |_, ps| {
        let mut hkk = DMatrix::<f64>::zeros(k, k);
        let mut gk = DVector::<f64>::zeros(k);
        let mut blocks = Vec::new();
        let mut cost = 0.0;
        let mut buf = Vec::new();
        for &p in ps {
            buf.clear();
            model.point_terms(params, p, true, &mut buf);
            if buf.is_empty() {
                continue;
            }
            let kept = lay.kept_point[p];
            let mut blk = PointBlock {
                point: p,
                hpp: Matrix3::zeros(),
                gp: Vector3::zeros(),
                wg: SMatrix::<f64, 3, G>::zeros(),
                wc: Vec::new(),
            };
            for t in buf.iter_mut() {
                mask_term(t, mask, p);
                let s = t.r.norm_squared();
                let (rho, w) = huber(s, robust_scale);
                cost += rho;
                let c0 = G + 6 * t.cam;
                let jgw = t.jg.transpose() * w;
                let jcw = t.jc.transpose() * w;
                add_block(&mut hkk, 0, 0, &(jgw * t.jg));
                let gc = jgw * t.jc;
                add_block(&mut hkk, 0, c0, &gc);
                add_block(&mut hkk, c0, 0, &gc.transpose());
                add_block(&mut hkk, c0, c0, &(jcw * t.jc));
                {
                    let mut g = gk.rows_mut(0, G);
                    g += jgw * t.r;
                }
                {
                    let mut g = gk.rows_mut(c0, 6);
                    g += jcw * t.r;
                }
                let jpw = t.jp.transpose() * w;
                match kept {
                    Some(o) => {
                        add_block(&mut hkk, o, o, &(jpw * t.jp));
                        let pg = jpw * t.jg;
                        add_block(&mut hkk, o, 0, &pg);
                        add_block(&mut hkk, 0, o, &pg.transpose());
                        let pc = jpw * t.jc;
                        add_block(&mut hkk, o, c0, &pc);
                        add_block(&mut hkk, c0, o, &pc.transpose());
                        let mut g = gk.rows_mut(o, 3);
                        g += jpw * t.r;
                    }
                    None => {
                        blk.hpp += jpw * t.jp;
                        blk.gp += jpw * t.r;
                        blk.wg += jpw * t.jg;
                        let wc = jpw * t.jc;
                        match blk.wc.last_mut() {
                            Some((c, m)) if *c == t.cam => *m += wc,
                            _ => blk.wc.push((t.cam, wc)),
                        }
                    }
                }
            }
            if kept.is_none() {
                blocks.push(blk);
            }
        }
        (hkk, gk, blocks, cost)
    });
    let mut hkk = DMatrix::<f64>::zeros(k, k);
    let mut gk = DVector::<f64>::zeros(k);
    let mut blocks = Vec::with_capacity(n);
    let mut cost = 0.0;
    for (h, g, b, c) in parts {
        hkk += h;
        gk += g;
        blocks.extend(b);
        cost += c;
    }
    for pt in &pairs {
        cost += pt.r * pt.r;
        let oa = lay.kept_point[pt.a].expect("pair points are kept");
        let ob = lay.kept_point[pt.b].expect("pair points are kept");
        for (oi, ji) in [(oa, pt.ja), (ob, pt.jb)] {
            for (oj, jj) in [(oa, pt.ja), (ob, pt.jb)] {
                add_block(&mut hkk, oi, oj, &(ji.transpose() * jj));
            }
            let mut g = gk.rows_mut(oi, 3);
            g += ji.transpose() * pt.r;
        }
    }
    Linearization {
        hkk,
        gk,
        blocks,
        kept_point: lay.kept_point,
        num_cams: lay.num_cams,
        cost,
    }
}

fn damped_inverse(h: &Matrix3<f64>, lambda: f64) -> Option<Matrix3<f64>> {
    let mut v = *h;
    for i in 0..3 {
        let d = h[(i, i)];
        v[(i, i)] = if d > 0.0 { d * (1.0 + lambda) } else { 1.0 };
    }
    v.try_inverse()
}

/// `S`, `rhs` and the damped inverse point blocks.
type ReducedSystem = (DMatrix<f64>, DVector<f64>, Vec<Matrix3<f64>>);

/// Reduced system `S δk = rhs` for damping `lambda`. Zero-diagonal rows
/// (fully masked parameters) are replaced by identity rows.
fn reduced_system<const G: usize>(lin: &Linearization<G>, lambda: f64) -> Option<ReducedSystem> {
    let k = lin.hkk.nrows();
    let mut s = lin.hkk.clone();
    for i in 0..k {
        let d = s[(i, i)];
        s[(i, i)] = if d > 0.0 { d * (1.0 + lambda) } else { 1.0 };
    }
    let mut rhs = -lin.gk.clone();
    let chunk = par::chunk_size(lin.blocks.len(), 16, 16);
    let parts = par::map_chunks(&lin.blocks, chunk, |_, blocks| {
        let mut ds = DMatrix::<f64>::zeros(k, k);
        let mut dr = DVector::<f64>::zeros(k);
        let mut invs = Vec::with_capacity(blocks.len());
        for b in blocks {
            let vinv = damped_inverse(&b.hpp, lambda)?;
            invs.push(vinv);
            // Y = V^-1 W  with W = [wg | wc...]
            let yg = vinv * b.wg;
            let yc: Vec<SMatrix<f64, 3, 6>> = b.wc.iter().map(|(_, w)| vinv * w).collect();
            let vg = vinv * b.gp;
            add_block(&mut ds, 0, 0, &(b.wg.transpose() * yg));
            {
                let mut r = dr.rows_mut(0, G);
                r += b.wg.transpose() * vg;
            }
            for (i, (ci, wi)) in b.wc.iter().enumerate() {
                let oi = G + 6 * ci;
                let gc = b.wg.transpose() * yc[i];
                add_block(&mut ds, 0, oi, &gc);
                add_block(&mut ds, oi, 0, &gc.transpose());
                {
                    let mut r = dr.rows_mut(oi, 6);
                    r += wi.transpose() * vg;
                }
                for (j, (cj, _)) in b.wc.iter().enumerate().skip(i) {
                    let oj = G + 6 * cj;
                    let m = wi.transpose() * yc[j];
                    add_block(&mut ds, oi, oj, &m);
                    if j != i {
                        add_block(&mut ds, oj, oi, &m.transpose());
                    }
                }
            }
        }
        Some((ds, dr, invs))
    });
    let mut invs = Vec::with_capacity(lin.blocks.len());
    for part in parts {
        let (ds, dr, iv) = part?;
        s -= ds;
        rhs += dr;
        invs.extend(iv);
    }
    Some((s, rhs, invs))
}

/// Solves a symmetric positive definite system after symmetric Jacobi scaling.
fn scaled_cholesky_solve(s: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let k = s.nrows();
    let d: DVector<f64> = DVector::from_iterator(
        k,
        (0..k).map(|i| {
            let v = s[(i, i)];
            if v > 0.0 {
                1.0 / v.sqrt()
            } else {
                1.0
            }
        }),
    );
    let mut scaled = s;
    for j in 0..k {
        for i in 0..k {
            scaled[(i, j)] *= d[i] * d[j];
        }
    }
    let chol = Cholesky::new(scaled)?;
    let y = chol.solve(&rhs.component_mul(&d));
    let x = y.component_mul(&d);
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}

/// Full LM step `[global | cams | points]` by Schur elimination of points.
pub fn schur_step<const G: usize>(lin: &Linearization<G>, num_points: usize, lambda: f64) -> Option<DVector<f64>> {
    let (s, rhs, invs) = reduced_system(lin, lambda)?;
    let dk = scaled_cholesky_solve(s, &rhs)?;
    let nc = lin.num_cams;
    let mut step = DVector::<f64>::zeros(G + 6 * nc + 3 * num_points);
    step.rows_mut(0, G + 6 * nc).copy_from(&dk.rows(0, G + 6 * nc));
    for (p, kept) in lin.kept_point.iter().enumerate() {
        if let Some(o) = kept {
            step.rows_mut(G + 6 * nc + 3 * p, 3).copy_from(&dk.rows(*o, 3));
        }
    }
    let dps = par::map_range(lin.blocks.len(), |i| {
        let b = &lin.blocks[i];
        let mut acc = -b.gp - b.wg * dk.rows(0, G);
        for (c, w) in &b.wc {
            acc -= w * dk.rows(G + 6 * c, 6);
        }
        invs[i] * acc
    });
    for (b, dp) in lin.blocks.iter().zip(dps) {
        step.rows_mut(G + 6 * nc + 3 * b.point, 3).copy_from(&dp);
    }
    Some(step)
}

/// Dense normal-equation step over all parameters, same damping and
/// weighting as [`schur_step`]. Intended for small problems and checks.
pub fn dense_step<const G: usize, M: BundleModel<G>>(
    model: &M,
    params: &Params<G>,
    mask: &Mask<G>,
    robust_scale: f64,
    lambda: f64,
) -> Option<DVector<f64>> {
    let nc = params.cams.len();
    let n = params.num_params();
    let mut h = DMatrix::<f64>::zeros(n, n);
    let mut g = DVector::<f64>::zeros(n);
    let mut buf = Vec::new();
    for p in 0..model.num_points() {
        buf.clear();
        model.point_terms(params, p, true, &mut buf);
        for t in buf.iter_mut() {
            mask_term(t, mask, p);
            let (_, w) = huber(t.r.norm_squared(), robust_scale);
            let mut j = nalgebra::Matrix2xX::<f64>::zeros(n);
            j.columns_mut(0, G).copy_from(&t.jg);
            j.columns_mut(G + 6 * t.cam, 6).copy_from(&t.jc);
            j.columns_mut(G + 6 * nc + 3 * p, 3).copy_from(&t.jp);
            h += j.transpose() * &j * w;
            g += j.transpose() * t.r * w;
        }
    }
    for mut pt in model.pair_terms(params) {
        mask_pair(&mut pt, mask);
        let mut j = DVector::<f64>::zeros(n);
        j.rows_mut(G + 6 * nc + 3 * pt.a, 3).copy_from(&pt.ja.transpose());
        {
            let mut r = j.rows_mut(G + 6 * nc + 3 * pt.b, 3);
            r += pt.jb.transpose();
        }
        h += &j * j.transpose();
        g += j * pt.r;
    }
    for i in 0..n {
        let d = h[(i, i)];
        h[(i, i)] = if d > 0.0 { d * (1.0 + lambda) } else { 1.0 };
    }
    scaled_cholesky_solve(h, &(-g))
}

fn gradient_norm<const G: usize>(lin: &Linearization<G>) -> f64 {
    // Jacobi-scaled gradient, i.e. in units of the residuals.
    let mut m: f64 = 0.0;
    for i in 0..lin.gk.len() {
        let d = lin.hkk[(i, i)];
        if d > 0.0 {
            m = m.max(lin.gk[i].abs() / d.sqrt());
        }
    }
    for b in &lin.blocks {
        for i in 0..3 {
            let d = b.hpp[(i, i)];
            if d > 0.0 {
                m = m.max(b.gp[i].abs() / d.sqrt());
            }
        }
    }
    m
}

/// Norms of a step and of the parameters, both in Jacobi-scaled units.
fn scaled_norms<const G: usize>(lin: &Linearization<G>, params: &Params<G>, step: &DVector<f64>) -> (f64, f64) {
    let nc = params.cams.len();
    let mut ds = 0.0;
    let mut xs = 0.0;
    let mut add = |d: f64, x: f64, h: f64| {
        let sc = if h > 0.0 { h.sqrt() } else { 0.0 };
        ds += (d * sc).powi(2);
        xs += (x * sc).powi(2);
    };
    for i in 0..G {
        add(step[i], params.global[i], lin.hkk[(i, i)]);
    }
    for c in 0..nc {
        let o = G + 6 * c;
        let t = params.cams[c].translation;
        for k in 0..6 {
            let x = if k < 3 { 0.0 } else { t[k - 3] };
            add(step[o + k], x, lin.hkk[(o + k, o + k)]);
        }
    }
    for (p, kept) in lin.kept_point.iter().enumerate() {
        if let Some(o) = kept {
            for k in 0..3 {
                add(
                    step[G + 6 * nc + 3 * p + k],
                    params.points[p][k],
                    lin.hkk[(o + k, o + k)],
                );
            }
        }
    }
    for b in &lin.blocks {
        for k in 0..3 {
            add(
                step[G + 6 * nc + 3 * b.point + k],
                params.points[b.point][k],
                b.hpp[(k, k)],
            );
        }
    }
    (ds.sqrt(), xs.sqrt())
}

fn count_free<const G: usize>(params: &Params<G>, mask: &Mask<G>) -> usize {
    let g = mask.global.iter().filter(|f| !**f).count();
    let c = mask.cams.iter().filter(|f| !**f).count() * 6;
    g + c + 3 * params.points.len() - mask.point_coords.len()
}

/// Minimizes the robust cost of `model` starting at `params`.
pub fn solve<const G: usize, M: BundleModel<G>>(
    model: &M,
    params: Params<G>,
    mask: &Mask<G>,
    options: &SolverOptions,
) -> Result<(Params<G>, SolveReport), SolveError> {
    let robust = options.robust_scale;
    let mut params = params;
    let mut lin = linearize(model, &params, mask, robust);
    let initial_cost = lin.cost;
    let mut cost = lin.cost;
    let mut history = Vec::new();
    let mut lambda = options.initial_lambda;
    let mut rejections = 0;
    let mut iterations = 0;

    let num_residual_terms = {
        let (_, norms, _) = cost_and_residuals(model, &params, robust, true);
        2 * norms.len() + model.pair_terms(&params).len()
    };
    let free = count_free(&params, mask);
    if num_residual_terms < free && options.max_iter > 0 {
        return Err(SolveError::Underdetermined {
            residuals: num_residual_terms,
            parameters: free,
        });
    }

    let termination = loop {
        if options.max_iter == 0 {
            break Termination::NoIterations;
        }
        if gradient_norm(&lin) <= options.gradient_tol {
            break Termination::GradientTolerance;
        }
        if iterations >= options.max_iter {
            break Termination::MaxIterations;
        }
        iterations += 1;
        let step = schur_step(&lin, params.points.len(), lambda);
        let Some(step) = step else {
            lambda *= 2.0;
            rejections += 1;
            history.push(IterationRecord {
                cost,
                damping: lambda,
                step_norm: f64::NAN,
                accepted: false,
            });
            if lambda > MAX_LAMBDA {
                return Err(SolveError::SingularSystem);
            }
            if rejections >= options.max_consecutive_rejections {
                return Err(SolveError::Diverged(rejections));
            }
            continue;
        };
        let (dn, xn) = scaled_norms(&lin, &params, &step);
        if dn <= options.param_tol * (xn + options.param_tol) {
            history.push(IterationRecord {
                cost,
                damping: lambda,
                step_norm: dn,
                accepted: false,
            });
            break Termination::ParameterTolerance;
        }
        let candidate = params.apply(&step);
        let new_cost = evaluate_cost(model, &candidate, robust);
        if new_cost.is_finite() && new_cost < cost {
            let decrease = cost - new_cost;
            history.push(IterationRecord {
                cost: new_cost,
                damping: lambda,
                step_norm: dn,
                accepted: true,
            });
            params = candidate;
            cost = new_cost;
            lambda = (lambda / 3.0).max(1e-16);
            rejections = 0;
            lin = linearize(model, &params, mask, robust);
            if decrease <= options.cost_tol * (cost + decrease) {
                break Termination::CostTolerance;
            }
        } else {
            history.push(IterationRecord {
                cost: new_cost,
                damping: lambda,
                step_norm: dn,
                accepted: false,
            });
            lambda *= 2.0;
            rejections += 1;
            if rejections >= options.max_consecutive_rejections {
                return Err(SolveError::Diverged(rejections));
            }
            if lambda > MAX_LAMBDA {
                return Err(SolveError::SingularSystem);
            }
        }
    };

    let (final_cost, mut norms, invalid) = cost_and_residuals(model, &params, robust, true);
    let mean = if norms.is_empty() {
        0.0
    } else {
        norms.iter().sum::<f64>() / norms.len() as f64
    };
    let median = median_in_place(&mut norms);
    let covariance_diag = if options.compute_covariance {
        global_covariance(&lin, final_cost, num_residual_terms, free)
    } else {
        None
    };
    Ok((
        params,
        SolveReport {
            iterations,
            initial_cost,
            final_cost,
            history,
            mean_abs_residual: mean,
            median_abs_residual: median,
            num_residuals: norms.len(),
            invalid_residuals: invalid,
            termination,
            covariance_diag,
        },
    ))
}

fn global_covariance<const G: usize>(lin: &Linearization<G>, cost: f64, m: usize, n: usize) -> Option<Vec<f64>> {
    let (s, _, _) = reduced_system(lin, 0.0)?;
    let k = s.nrows();
    let d: Vec<f64> = (0..k)
        .map(|i| {
            let v = s[(i, i)];
            if v > 0.0 {
                1.0 / v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut scaled = s;
    for j in 0..k {
        for i in 0..k {
            scaled[(i, j)] *= d[i] * d[j];
        }
    }
    let chol = Cholesky::new(scaled)?;
    let inv = chol.inverse();
    let sigma2 = if m > n { cost / (m - n) as f64 } else { f64::NAN };
    Some((0..G).map(|i| inv[(i, i)] * d[i] * d[i] * sigma2).collect())
}

pub(crate) fn median_in_place(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
