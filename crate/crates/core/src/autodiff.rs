//! Scalar-tape reverse-mode differentiation.
//!
//! Numerical code in this crate is written once, generic over [`Real`], and
//! instantiated either with plain `f64` (evaluation) or with [`Var`]
//! (gradient recording). Every node on a [`Tape`] stores the local partial
//! derivatives with respect to its parents, so the backward sweep is a single
//! reverse pass of multiply-adds.
//!
//! Besides the elementary operations the tape knows a handful of fused
//! primitives (dot products, log-sum-exp and the Gaussian kernel expectations
//! used for moment propagation). Each of them is recorded as one node with
//! hand-derived partials, which keeps per-sample tapes small.

use std::cell::RefCell;
use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Determinants of the 2x2 moment matrix below this value are clamped.
pub const DET_FLOOR: f64 = 1e-12;

/// A real scalar that the numerical routines can be written against.
pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
{
    fn cst(x: f64) -> Self;
    fn val(&self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    /// `log(1 + exp(x))`.
    fn softplus(self) -> Self;
    /// `1 / (1 + exp(-x))`.
    fn logistic(self) -> Self;
    fn abs(self) -> Self;

    fn square(self) -> Self {
        self * self
    }

    fn sum(xs: &[Self]) -> Self;
    fn dot(a: &[Self], b: &[Self]) -> Self;
    fn logsumexp(xs: &[Self]) -> Self;

    /// `sum_r w_r * psi_r(mu, var)` with `psi` the SE kernel expectation
    /// under `A ~ N(mu, var)`.
    fn psi_dot(mu: Self, var: Self, lam: Self, v: &[Self], w: &[Self]) -> Self;

    /// `sum_{r,t} m_{rt} * Omega_{rt}(mu, var)` for a row-major `R x R` matrix
    /// `m`, with `Omega_{rt} = E[k(A, v_r) k(A, v_t)]`.
    fn omega_quad(mu: Self, var: Self, lam: Self, v: &[Self], m: &[Self]) -> Self;

    /// `sum_{r,t} bn_r * bm_t * E[k_n(A_n, vn_r) k_m(A_m, vm_t)]` under the
    /// bivariate normal with the given moments.
    #[allow(clippy::too_many_arguments)]
    fn lambda_bilin(
        mu_n: Self,
        mu_m: Self,
        var_n: Self,
        var_m: Self,
        cov: Self,
        lam_n: Self,
        lam_m: Self,
        vn: &[Self],
        vm: &[Self],
        bn: &[Self],
        bm: &[Self],
    ) -> Self;
}

pub(crate) fn softplus_f64(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn logistic_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`Real::softplus`] for strictly positive `y`.
pub fn inverse_softplus(y: f64) -> f64 {
    assert!(y > 0.0, "inverse_softplus requires a positive argument");
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

fn logsumexp_f64(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Real for f64 {
    #[inline]
    fn cst(x: f64) -> Self {
        x
    }
    #[inline]
    fn val(&self) -> f64 {
        *self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn softplus(self) -> Self {
        softplus_f64(self)
    }
    fn logistic(self) -> Self {
        logistic_f64(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn sum(xs: &[Self]) -> Self {
        xs.iter().sum()
    }
    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
    fn logsumexp(xs: &[Self]) -> Self {
        logsumexp_f64(xs)
    }
    fn psi_dot(mu: f64, var: f64, lam: f64, v: &[f64], w: &[f64]) -> f64 {
        let l2 = lam * lam;
        let d = l2 + var;
        let scale = (l2 / d).sqrt();
        v.iter()
            .zip(w)
            .map(|(vr, wr)| wr * scale * (-(mu - vr).powi(2) / (2.0 * d)).exp())
            .sum()
    }
    fn omega_quad(mu: f64, var: f64, lam: f64, v: &[f64], m: &[f64]) -> f64 {
        let r = v.len();
        let l2 = lam * lam;
        let e = l2 + 2.0 * var;
        let scale = (l2 / e).sqrt();
        let mut acc = 0.0;
        for i in 0..r {
            for j in 0..r {
                let c = 0.5 * (v[i] + v[j]);
                let dv = v[i] - v[j];
                let om = scale * (-(mu - c).powi(2) / e - dv * dv / (4.0 * l2)).exp();
                acc += m[i * r + j] * om;
            }
        }
        acc
    }
    fn lambda_bilin(
        mu_n: f64,
        mu_m: f64,
        var_n: f64,
        var_m: f64,
        cov: f64,
        lam_n: f64,
        lam_m: f64,
        vn: &[f64],
        vm: &[f64],
        bn: &[f64],
        bm: &[f64],
    ) -> f64 {
        let p = lam_n * lam_n + var_n;
        let q = lam_m * lam_m + var_m;
        let det = (p * q - cov * cov).max(DET_FLOOR);
        let pref = lam_n * lam_m / det.sqrt();
        let mut acc = 0.0;
        for (r, &vr) in vn.iter().enumerate() {
            let a = mu_n - vr;
            for (t, &vt) in vm.iter().enumerate() {
                let b = mu_m - vt;
                let quad = a * a * q + b * b * p - 2.0 * cov * a * b;
                acc += bn[r] * bm[t] * pref * (-quad / (2.0 * det)).exp();
            }
        }
        acc
    }
}

const CONST: u32 = u32::MAX;

#[derive(Default)]
struct TapeInner {
    /// Edge range of node `i` is `offsets[i]..offsets[i + 1]`.
    offsets: Vec<u32>,
    parents: Vec<u32>,
    partials: Vec<f64>,
}

/// Records operations performed on [`Var`]s.
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        let inner = TapeInner {
            offsets: vec![0],
            ..Default::default()
        };
        Tape {
            inner: RefCell::new(inner),
        }
    }

    /// Drops all recorded nodes while keeping the allocations.
    pub fn clear(&self) {
        let mut t = self.inner.borrow_mut();
        t.offsets.clear();
        t.offsets.push(0);
        t.parents.clear();
        t.partials.clear();
    }

    /// Drops every node recorded after the first `len` ones. Variables
    /// created before the cut stay valid.
    pub fn truncate(&self, len: usize) {
        let mut t = self.inner.borrow_mut();
        if len + 1 >= t.offsets.len() {
            return;
        }
        let edges = t.offsets[len] as usize;
        t.offsets.truncate(len + 1);
        t.parents.truncate(edges);
        t.partials.truncate(edges);
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A new independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(value, std::iter::empty())
    }

    fn push<I>(&self, value: f64, edges: I) -> Var<'_>
    where
        I: IntoIterator<Item = (u32, f64)>,
    {
        let mut t = self.inner.borrow_mut();
        for (p, d) in edges {
            if p != CONST {
                t.parents.push(p);
                t.partials.push(d);
            }
        }
        let end = t.parents.len() as u32;
        t.offsets.push(end);
        let idx = (t.offsets.len() - 2) as u32;
        Var {
            tape: Some(self),
            idx,
            val: value,
        }
    }

    /// Reverse sweep seeded with `d out / d out = 1`.
    pub fn gradient(&self, out: Var<'_>) -> Vec<f64> {
        self.backward(&[(out, 1.0)])
    }

    /// Reverse sweep seeded with arbitrary output adjoints (a
    /// vector-Jacobian product). Returns the adjoint of every node.
    pub fn backward(&self, seeds: &[(Var<'_>, f64)]) -> Vec<f64> {
        let t = self.inner.borrow();
        let n = t.offsets.len() - 1;
        let mut adj = vec![0.0; n];
        for (v, s) in seeds {
            if v.idx != CONST {
                adj[v.idx as usize] += s;
            }
        }
        for i in (0..n).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let (lo, hi) = (t.offsets[i] as usize, t.offsets[i + 1] as usize);
            for e in lo..hi {
                adj[t.parents[e] as usize] += a * t.partials[e];
            }
        }
        adj
    }
}

/// A scalar that is either a constant or a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    val: f64,
}

impl Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.idx == CONST {
            write!(f, "Var(const {})", self.val)
        } else {
            write!(f, "Var(#{} = {})", self.idx, self.val)
        }
    }
}

impl<'t> Var<'t> {
    pub fn index(&self) -> Option<usize> {
        (self.idx != CONST).then_some(self.idx as usize)
    }

    pub fn is_const(&self) -> bool {
        self.idx == CONST
    }

    fn constant(val: f64) -> Self {
        Var {
            tape: None,
            idx: CONST,
            val,
        }
    }

    fn unary(self, val: f64, d: f64) -> Self {
        match self.tape {
            Some(t) => t.push(val, [(self.idx, d)]),
            None => Var::constant(val),
        }
    }

    fn binary(self, rhs: Self, val: f64, da: f64, db: f64) -> Self {
        match self.tape.or(rhs.tape) {
            Some(t) => t.push(val, [(self.idx, da), (rhs.idx, db)]),
            None => Var::constant(val),
        }
    }
}

fn tape_of<'t>(xs: &[Var<'t>]) -> Option<&'t Tape> {
    xs.iter().find_map(|x| x.tape)
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, self.val + rhs.val, 1.0, 1.0)
    }
}
impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, self.val - rhs.val, 1.0, -1.0)
    }
}
impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, self.val * rhs.val, rhs.val, self.val)
    }
}
impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.val / rhs.val;
        self.binary(rhs, q, 1.0 / rhs.val, -q / rhs.val)
    }
}
impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}
impl<'t> AddAssign for Var<'t> {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}
impl<'t> Add<f64> for Var<'t> {
    type Output = Self;
    fn add(self, rhs: f64) -> Self {
        self.unary(self.val + rhs, 1.0)
    }
}
impl<'t> Sub<f64> for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: f64) -> Self {
        self.unary(self.val - rhs, 1.0)
    }
}
impl<'t> Mul<f64> for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.unary(self.val * rhs, rhs)
    }
}
impl<'t> Div<f64> for Var<'t> {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        self.unary(self.val / rhs, 1.0 / rhs)
    }
}

impl<'t> Real for Var<'t> {
    fn cst(x: f64) -> Self {
        Var::constant(x)
    }
    fn val(&self) -> f64 {
        self.val
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        // The derivative at zero is infinite; callers only take square
        // roots of quantities that are either positive or constant zero.
        let d = if s > 0.0 { 0.5 / s } else { 0.0 };
        self.unary(s, d)
    }
    fn softplus(self) -> Self {
        self.unary(softplus_f64(self.val), logistic_f64(self.val))
    }
    fn logistic(self) -> Self {
        let s = logistic_f64(self.val);
        self.unary(s, s * (1.0 - s))
    }
    fn abs(self) -> Self {
        let d = if self.val >= 0.0 { 1.0 } else { -1.0 };
        self.unary(self.val.abs(), d)
    }

    fn sum(xs: &[Self]) -> Self {
        let val = xs.iter().map(|x| x.val).sum();
        match tape_of(xs) {
            Some(t) => t.push(val, xs.iter().map(|x| (x.idx, 1.0))),
            None => Var::constant(val),
        }
    }

    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let val = a.iter().zip(b).map(|(x, y)| x.val * y.val).sum();
        match tape_of(a).or_else(|| tape_of(b)) {
            Some(t) => t.push(
                val,
                a.iter()
                    .zip(b)
                    .flat_map(|(x, y)| [(x.idx, y.val), (y.idx, x.val)]),
            ),
            None => Var::constant(val),
        }
    }

    fn logsumexp(xs: &[Self]) -> Self {
        let vals: Vec<f64> = xs.iter().map(|x| x.val).collect();
        let lse = logsumexp_f64(&vals);
        match tape_of(xs) {
            Some(t) => t.push(
                lse,
                xs.iter().map(|x| (x.idx, (x.val - lse).exp())),
            ),
            None => Var::constant(lse),
        }
    }

    fn psi_dot(mu: Self, var: Self, lam: Self, v: &[Self], w: &[Self]) -> Self {
        let r = v.len();
        let (m, s2, l) = (mu.val, var.val, lam.val);
        let d = l * l + s2;
        let scale = l / d.sqrt();
        let mut total = 0.0;
        let (mut g_mu, mut g_d) = (0.0, 0.0);
        let mut g_v = Vec::with_capacity(r);
        let mut g_w = Vec::with_capacity(r);
        for i in 0..r {
            let diff = m - v[i].val;
            let psi = scale * (-diff * diff / (2.0 * d)).exp();
            let wp = w[i].val * psi;
            total += wp;
            g_mu -= wp * diff / d;
            g_d += wp * (diff * diff / (2.0 * d * d) - 0.5 / d);
            g_v.push(wp * diff / d);
            g_w.push(psi);
        }
        let g_lam = total / l + g_d * 2.0 * l;
        let tape = mu
            .tape
            .or(var.tape)
            .or(lam.tape)
            .or_else(|| tape_of(v))
            .or_else(|| tape_of(w));
        match tape {
            Some(t) => t.push(
                total,
                [(mu.idx, g_mu), (var.idx, g_d), (lam.idx, g_lam)]
                    .into_iter()
                    .chain(v.iter().zip(&g_v).map(|(x, g)| (x.idx, *g)))
                    .chain(w.iter().zip(&g_w).map(|(x, g)| (x.idx, *g))),
            ),
            None => Var::constant(total),
        }
    }

    fn omega_quad(mu: Self, var: Self, lam: Self, v: &[Self], m: &[Self]) -> Self {
        let r = v.len();
        let (mv, s2, l) = (mu.val, var.val, lam.val);
        let l2 = l * l;
        let e = l2 + 2.0 * s2;
        let scale = l / e.sqrt();
        let mut total = 0.0;
        let (mut g_mu, mut g_e, mut g_lam_direct) = (0.0, 0.0, 0.0);
        let mut g_v = vec![0.0; r];
        let mut g_m = Vec::with_capacity(r * r);
        for i in 0..r {
            for j in 0..r {
                let c = 0.5 * (v[i].val + v[j].val);
                let dv = v[i].val - v[j].val;
                let dm = mv - c;
                let om = scale * (-dm * dm / e - dv * dv / (4.0 * l2)).exp();
                let mo = m[i * r + j].val * om;
                total += mo;
                g_m.push(om);
                g_mu -= mo * 2.0 * dm / e;
                g_e += mo * (dm * dm / (e * e) - 0.5 / e);
                g_lam_direct += mo * (1.0 / l + dv * dv / (2.0 * l2 * l));
                g_v[i] += mo * (dm / e - dv / (2.0 * l2));
                g_v[j] += mo * (dm / e + dv / (2.0 * l2));
            }
        }
        let g_var = 2.0 * g_e;
        let g_lam = g_lam_direct + g_e * 2.0 * l;
        let tape = mu
            .tape
            .or(var.tape)
            .or(lam.tape)
            .or_else(|| tape_of(v))
            .or_else(|| tape_of(m));
        match tape {
            Some(t) => t.push(
                total,
                [(mu.idx, g_mu), (var.idx, g_var), (lam.idx, g_lam)]
                    .into_iter()
                    .chain(v.iter().zip(&g_v).map(|(x, g)| (x.idx, *g)))
                    .chain(m.iter().zip(&g_m).map(|(x, g)| (x.idx, *g))),
            ),
            None => Var::constant(total),
        }
    }

    fn lambda_bilin(
        mu_n: Self,
        mu_m: Self,
        var_n: Self,
        var_m: Self,
        cov: Self,
        lam_n: Self,
        lam_m: Self,
        vn: &[Self],
        vm: &[Self],
        bn: &[Self],
        bm: &[Self],
    ) -> Self {
        let (rn, rm) = (vn.len(), vm.len());
        let (ln, lm, c) = (lam_n.val, lam_m.val, cov.val);
        let p = ln * ln + var_n.val;
        let q = lm * lm + var_m.val;
        let raw_det = p * q - c * c;
        let clamped = raw_det < DET_FLOOR;
        let det = raw_det.max(DET_FLOOR);
        let pref = ln * lm / det.sqrt();
        let mut total = 0.0;
        let (mut g_mun, mut g_mum, mut g_p, mut g_q, mut g_c) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut g_vn = vec![0.0; rn];
        let mut g_vm = vec![0.0; rm];
        let mut g_bn = vec![0.0; rn];
        let mut g_bm = vec![0.0; rm];
        // d det / d(p, q, c); zero when the determinant is clamped.
        let (dd_p, dd_q, dd_c) = if clamped { (0.0, 0.0, 0.0) } else { (q, p, -2.0 * c) };
        for r in 0..rn {
            let a = mu_n.val - vn[r].val;
            for t in 0..rm {
                let b = mu_m.val - vm[t].val;
                let quad = a * a * q + b * b * p - 2.0 * c * a * b;
                let lam_rt = pref * (-quad / (2.0 * det)).exp();
                let coef = bn[r].val * bm[t].val;
                let w = coef * lam_rt;
                total += w;
                g_bn[r] += bm[t].val * lam_rt;
                g_bm[t] += bn[r].val * lam_rt;
                // d log Lambda / d x = -0.5 det_x / det - (quad_x det - quad det_x) / (2 det^2)
                let dq_a = 2.0 * a * q - 2.0 * c * b;
                let dq_b = 2.0 * b * p - 2.0 * c * a;
                let dl_a = -dq_a / (2.0 * det);
                let dl_b = -dq_b / (2.0 * det);
                let dl_p = -0.5 * dd_p / det - (b * b * det - quad * dd_p) / (2.0 * det * det);
                let dl_q = -0.5 * dd_q / det - (a * a * det - quad * dd_q) / (2.0 * det * det);
                let dl_c =
                    -0.5 * dd_c / det - (-2.0 * a * b * det - quad * dd_c) / (2.0 * det * det);
                g_mun += w * dl_a;
                g_vn[r] -= w * dl_a;
                g_mum += w * dl_b;
                g_vm[t] -= w * dl_b;
                g_p += w * dl_p;
                g_q += w * dl_q;
                g_c += w * dl_c;
            }
        }
        let g_lamn = total / ln + g_p * 2.0 * ln;
        let g_lamm = total / lm + g_q * 2.0 * lm;
        let tape = [mu_n, mu_m, var_n, var_m, cov, lam_n, lam_m]
            .iter()
            .find_map(|x| x.tape)
            .or_else(|| tape_of(vn))
            .or_else(|| tape_of(vm))
            .or_else(|| tape_of(bn))
            .or_else(|| tape_of(bm));
        match tape {
            Some(t) => t.push(
                total,
                [
                    (mu_n.idx, g_mun),
                    (mu_m.idx, g_mum),
                    (var_n.idx, g_p),
                    (var_m.idx, g_q),
                    (cov.idx, g_c),
                    (lam_n.idx, g_lamn),
                    (lam_m.idx, g_lamm),
                ]
                .into_iter()
                .chain(vn.iter().zip(&g_vn).map(|(x, g)| (x.idx, *g)))
                .chain(vm.iter().zip(&g_vm).map(|(x, g)| (x.idx, *g)))
                .chain(bn.iter().zip(&g_bn).map(|(x, g)| (x.idx, *g)))
                .chain(bm.iter().zip(&g_bm).map(|(x, g)| (x.idx, *g))),
            ),
            None => Var::constant(total),
        }
    }
}
