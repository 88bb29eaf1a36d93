//! Convergence-bound bookkeeping and its numerical verification.
//!
//! Covers the smoothness constants of a two-block objective, the admissible
//! step-scale interval, the bound's coefficients and right-hand side, the
//! two local-drift inequalities behind the step-size caps, and an empirical
//! check of the bound on synthetic smooth nonconvex problems whose constants
//! are measured rather than assumed.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::federation::{
    Federation, FlSchedule, Losses, Objective, StepContext, StepOutput, TrainingState,
};
use crate::math::{self, E2_MINUS_1};
use crate::rng::{Purpose, RngStream, StreamId};
use crate::tensor::{ParamMap, Tensor};

/// Smoothness, stochastic-error and heterogeneity constants.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SmoothnessConstants {
    /// Lipschitz constant of `grad_u F_n` in `u`.
    pub l_u: f64,
    /// Lipschitz constant of `grad_v F_n` in `v`.
    pub l_v: f64,
    /// Lipschitz constant of `grad_u F_n` in `v`.
    pub l_uv: f64,
    /// Lipschitz constant of `grad_v F_n` in `u`.
    pub l_vu: f64,
    pub sigma_u: f64,
    pub sigma_v: f64,
    pub delta: f64,
    pub rho: f64,
}

impl SmoothnessConstants {
    /// Smoothness only; error and heterogeneity terms zero.
    pub fn smooth(l_u: f64, l_v: f64, l_uv: f64, l_vu: f64) -> Self {
        Self {
            l_u,
            l_v,
            l_uv,
            l_vu,
            sigma_u: 0.0,
            sigma_v: 0.0,
            delta: 0.0,
            rho: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, x) in [
            ("l_u", self.l_u),
            ("l_v", self.l_v),
            ("l_uv", self.l_uv),
            ("l_vu", self.l_vu),
        ] {
            if !(x > 0.0 && x.is_finite()) {
                return Err(Error::config(field, "must be positive and finite"));
            }
        }
        for (field, x) in [
            ("sigma_u", self.sigma_u),
            ("sigma_v", self.sigma_v),
            ("delta", self.delta),
            ("rho", self.rho),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::config(field, "must be nonnegative and finite"));
            }
        }
        Ok(())
    }

    /// `max{1, L_vu L_uv / (L_u L_v)}`.
    pub fn cross_ratio(&self) -> f64 {
        (self.l_vu * self.l_uv / (self.l_u * self.l_v)).max(1.0)
    }
}

/// Upper end of the admissible step scale `c`, the interval being `(0, upper]`.
pub fn admissible_c(k: &SmoothnessConstants) -> f64 {
    let first = 1.0 / (math::sqrt(6.0) * k.cross_ratio());
    let second = k.l_u.min(k.l_v) / (6.0 * k.l_u.max(k.l_v) + k.l_uv);
    first.min(second)
}

/// How the coefficients are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CoefficientOptions {
    /// Use 15 instead of 5 in the last term of `lambda_2`, mirroring
    /// `lambda_1`.
    pub symmetrize: bool,
}

/// Coefficients of the bound for one `(c, tau)`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TheoremConstants {
    pub c: f64,
    pub tau: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta_u: f64,
    pub beta_v: f64,
    pub eta_u: f64,
    pub eta_v: f64,
}

impl TheoremConstants {
    pub fn lambda_min(&self) -> f64 {
        self.lambda1.min(self.lambda2)
    }
}

/// `lambda_i = c / (4 L) * (1 - a c^2 - b c)`; returns `(a, b)` per lambda.
fn lambda_quadratics(
    tau: usize,
    k: &SmoothnessConstants,
    opts: CoefficientOptions,
) -> [(f64, f64); 2] {
    let t2 = (tau * tau) as f64;
    let a = 15.0 * E2_MINUS_1 / t2;
    let b1 = 15.0 * E2_MINUS_1 * k.l_vu * k.l_vu / (t2 * k.l_u * k.l_v);
    let last2 = if opts.symmetrize { 15.0 } else { 5.0 };
    let b2 = last2 * E2_MINUS_1 * k.l_uv * k.l_uv / (t2 * k.l_v * k.l_u);
    [(a, b1), (a, b2)]
}

/// Largest `c` keeping both lambdas positive: the positive root of
/// `1 - a c^2 - b c` for each, whichever is smaller.
pub fn max_positive_c(tau: usize, k: &SmoothnessConstants, opts: CoefficientOptions) -> f64 {
    lambda_quadratics(tau, k, opts)
        .iter()
        .map(|&(a, b)| 2.0 / (b + math::sqrt(b * b + 4.0 * a)))
        .fold(f64::INFINITY, f64::min)
}

/// Bound coefficients. Errors when either lambda is not positive, reporting
/// the largest `c` that would make both positive.
pub fn theorem_coefficients(
    c: f64,
    tau: usize,
    k: &SmoothnessConstants,
    opts: CoefficientOptions,
) -> Result<TheoremConstants> {
    k.validate()?;
    if tau == 0 {
        return Err(Error::config("tau", "must be at least 1"));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::config("c", "must be positive and finite"));
    }
    let t2 = (tau * tau) as f64;
    let (c2, c3) = (c * c, c * c * c);
    let lambda1 = c / (4.0 * k.l_u)
        - 15.0 * E2_MINUS_1 * c3 / (4.0 * t2 * k.l_u)
        - 15.0 * E2_MINUS_1 * k.l_vu * k.l_vu * c2 / (4.0 * t2 * k.l_u * k.l_u * k.l_v);
    let last2 = if opts.symmetrize { 15.0 } else { 5.0 };
    let lambda2 = c / (4.0 * k.l_v)
        - 15.0 * E2_MINUS_1 * c3 / (4.0 * t2 * k.l_v)
        - last2 * E2_MINUS_1 * k.l_uv * k.l_uv * c2 / (4.0 * t2 * k.l_v * k.l_v * k.l_u);
    if !(lambda1 > 0.0 && lambda2 > 0.0) {
        return Err(Error::VacuousBound {
            c,
            lambda1,
            lambda2,
            max_c: max_positive_c(tau, k, opts),
        });
    }
    let beta_u = (k.l_u + k.l_uv) * c2 / (2.0 * k.l_u * k.l_u)
        + 5.0 * E2_MINUS_1 * c3 / (4.0 * t2 * k.l_u)
        + 5.0 * E2_MINUS_1 * k.l_vu * k.l_vu * c2 / (4.0 * t2 * k.l_u * k.l_u * k.l_v);
    let beta_v = (k.l_v + k.l_uv) * c2 / (2.0 * k.l_v * k.l_v)
        + 5.0 * E2_MINUS_1 * c3 / (4.0 * t2 * k.l_v)
        + 5.0 * E2_MINUS_1 * k.l_uv * k.l_uv * c2 / (4.0 * t2 * k.l_v * k.l_v * k.l_u);
    Ok(TheoremConstants {
        c,
        tau,
        lambda1,
        lambda2,
        beta_u,
        beta_v,
        eta_u: c / (tau as f64 * k.l_u * (1.0 + k.rho * k.rho)),
        eta_v: c / (tau as f64 * k.l_v),
    })
}

/// Right-hand side of the bound after `rounds` rounds, with the optimality
/// gap taken as `|f0 - f_star|`.
pub fn theorem_rhs(
    f0: f64,
    f_star: f64,
    rounds: usize,
    tc: &TheoremConstants,
    k: &SmoothnessConstants,
) -> f64 {
    let lm = tc.lambda_min();
    let c2 = tc.c * tc.c;
    (f0 - f_star).abs() / (rounds as f64 * lm)
        + 3.0 * (k.l_u + k.l_uv) * c2 * k.delta * k.delta / (2.0 * k.l_u * k.l_u * lm)
        + tc.beta_u * k.sigma_u * k.sigma_u / lm
        + tc.beta_v * k.sigma_v * k.sigma_v / lm
}

/// Outcome of the two local-drift inequalities.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Lemma7Check {
    pub holds: bool,
    /// Right side minus left side of each inequality.
    pub margins: [f64; 2],
}

/// Relative slack granted to the drift inequalities for rounding; at the
/// caps one side can equal the other exactly in real arithmetic.
pub const LEMMA7_ROUNDING: f64 = 1e-12;

/// Evaluates, with `A = L_u^2 eta_u + L_vu^2 eta_v` and
/// `B = L_v^2 eta_v + L_uv^2 eta_u`,
/// `3 tau^2 (eta_u^2 L_u^2 A + eta_v^2 L_vu^2 B) <= A` and
/// `3 tau^2 (eta_v^2 L_v^2 B + eta_u^2 L_uv^2 A) <= B`.
pub fn check_lemma7(eta_u: f64, eta_v: f64, tau: usize, k: &SmoothnessConstants) -> Lemma7Check {
    let t2 = 3.0 * (tau * tau) as f64;
    let a = k.l_u * k.l_u * eta_u + k.l_vu * k.l_vu * eta_v;
    let b = k.l_v * k.l_v * eta_v + k.l_uv * k.l_uv * eta_u;
    let lhs1 = t2 * (eta_u * eta_u * k.l_u * k.l_u * a + eta_v * eta_v * k.l_vu * k.l_vu * b);
    let lhs2 = t2 * (eta_v * eta_v * k.l_v * k.l_v * b + eta_u * eta_u * k.l_uv * k.l_uv * a);
    let m1 = a - lhs1;
    let m2 = b - lhs2;
    Lemma7Check {
        holds: m1 >= -LEMMA7_ROUNDING * a && m2 >= -LEMMA7_ROUNDING * b,
        margins: [m1, m2],
    }
}

/// Step-size caps `1 / (sqrt(6) tau L max{1, L_vu L_uv / (L_u L_v)})`.
pub fn lemma7_caps(tau: usize, k: &SmoothnessConstants) -> (f64, f64) {
    let d = math::sqrt(6.0) * tau as f64 * k.cross_ratio();
    (1.0 / (d * k.l_u), 1.0 / (d * k.l_v))
}

/// Draws where the drift inequalities failed at the caps.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Lemma7Sweep {
    pub draws: usize,
    pub failures: Vec<(SmoothnessConstants, usize, Lemma7Check)>,
}

/// Checks the drift inequalities at the caps for `draws` random constants
/// uniform in `[0.1, 10]^4` and `tau` uniform in `1..=20`.
pub fn lemma7_sweep(draws: usize, seed: u64) -> Lemma7Sweep {
    let mut rng = RngStream::new(seed, StreamId::new(u32::MAX, 4, 0), Purpose::Theory);
    let mut failures = Vec::new();
    for _ in 0..draws {
        let mut l = || rng.uniform_range(0.1, 10.0);
        let k = SmoothnessConstants::smooth(l(), l(), l(), l());
        let tau = 1 + rng.index(20);
        let (eu, ev) = lemma7_caps(tau, &k);
        let check = check_lemma7(eu, ev, tau, &k);
        if !check.holds {
            failures.push((k, tau, check));
        }
    }
    Lemma7Sweep { draws, failures }
}

/// A two-block objective with cheap exact and stochastic gradients.
pub trait SmoothProblem {
    fn clients(&self) -> usize;
    fn dims(&self) -> (usize, usize);
    fn value(&self, client: usize, u: &DVector<f64>, v: &DVector<f64>) -> f64;
    fn gradient(
        &self,
        client: usize,
        u: &DVector<f64>,
        v: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>);
    /// Mini-batch gradient; equals [`SmoothProblem::gradient`] for
    /// full-batch problems.
    fn stochastic_gradient(
        &self,
        client: usize,
        u: &DVector<f64>,
        v: &DVector<f64>,
        rng: &mut RngStream,
    ) -> (DVector<f64>, DVector<f64>);
}

/// Parameters of the synthetic family
/// `F_n(u, v) = u'Qu/2 + v'Rv/2 + u'Mv + a sin(b'u) + s_u'u + s_v'v`,
/// with per-sample zero-mean linear perturbations for stochastic gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyntheticSpec {
    pub clients: usize,
    pub dim_u: usize,
    pub dim_v: usize,
    /// All clients share one objective.
    pub homogeneous: bool,
    /// Smallest eigenvalue of `Q` and `R`.
    pub min_curvature: f64,
    /// Spread of the remaining eigenvalues above the minimum.
    pub curvature_spread: f64,
    /// `||M||` as a fraction of `min_curvature` (below 1 keeps the joint
    /// quadratic positive definite).
    pub coupling: f64,
    /// Amplitude `a` of the sinusoid.
    pub sine_amplitude: f64,
    /// Norm of the sinusoid frequency `b`.
    pub sine_frequency: f64,
    /// Scale of per-sample gradient perturbations; 0 gives exact gradients.
    pub noise: f64,
    pub samples: usize,
    /// Mini-batch size; 0 or at least `samples` means full batch.
    pub batch: usize,
    /// Scale of client-specific linear shifts when heterogeneous.
    pub heterogeneity: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Deterministic, homogeneous, nonconvex default without cross-block
    /// coupling.
    pub fn deterministic_homogeneous(seed: u64) -> Self {
        Self {
            clients: 4,
            dim_u: 6,
            dim_v: 4,
            homogeneous: true,
            min_curvature: 0.5,
            curvature_spread: 1.5,
            coupling: 0.0,
            sine_amplitude: 1.0,
            sine_frequency: 1.2,
            noise: 0.0,
            samples: 16,
            batch: 0,
            heterogeneity: 0.0,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct SyntheticClient {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    m: DMatrix<f64>,
    a: f64,
    b: DVector<f64>,
    shift_u: DVector<f64>,
    shift_v: DVector<f64>,
    /// Per-sample gradient offsets, centered per client.
    offsets_u: Vec<DVector<f64>>,
    offsets_v: Vec<DVector<f64>>,
}

/// Instance of the synthetic family.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticProblem {
    spec: SyntheticSpec,
    clients: Vec<SyntheticClient>,
}

fn random_orthogonal(n: usize, rng: &mut RngStream) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.normal());
    g.qr().q()
}

fn spd(n: usize, lo: f64, spread: f64, rng: &mut RngStream) -> DMatrix<f64> {
    let q = random_orthogonal(n, rng);
    let eig = DVector::from_fn(n, |i, _| {
        if i == 0 {
            lo
        } else {
            lo + spread * rng.uniform()
        }
    });
    &q * DMatrix::from_diagonal(&eig) * q.transpose()
}

fn random_vector(n: usize, norm: f64, rng: &mut RngStream) -> DVector<f64> {
    let v = DVector::from_fn(n, |_, _| rng.normal());
    let len = v.norm();
    if len == 0.0 {
        v
    } else {
        v * (norm / len)
    }
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}

impl SyntheticProblem {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        if spec.clients == 0 || spec.dim_u == 0 || spec.dim_v == 0 {
            return Err(Error::config(
                "synthetic",
                "clients and dimensions must be positive",
            ));
        }
        if !(spec.min_curvature > 0.0) || spec.curvature_spread < 0.0 {
            return Err(Error::config(
                "synthetic.curvature",
                "need min > 0 and spread >= 0",
            ));
        }
        if !(0.0..1.0).contains(&spec.coupling) {
            return Err(Error::config("synthetic.coupling", "must lie in [0, 1)"));
        }
        if spec.noise > 0.0 && spec.samples < 2 {
            return Err(Error::config(
                "synthetic.samples",
                "stochastic gradients need at least 2 samples",
            ));
        }
        let make = |client: u32| {
            let mut rng = RngStream::new(spec.seed, StreamId::new(client, 0, 0), Purpose::Theory);
            let q = spd(
                spec.dim_u,
                spec.min_curvature,
                spec.curvature_spread,
                &mut rng,
            );
            let r = spd(
                spec.dim_v,
                spec.min_curvature,
                spec.curvature_spread,
                &mut rng,
            );
            let raw = DMatrix::from_fn(spec.dim_u, spec.dim_v, |_, _| rng.normal());
            let norm = spectral_norm(&raw);
            let m = if norm > 0.0 {
                raw * (spec.coupling * spec.min_curvature / norm)
            } else {
                raw
            };
            let b = random_vector(spec.dim_u, spec.sine_frequency, &mut rng);
            (q, r, m, b)
        };
        let shared = make(u32::MAX);
        let mut clients = Vec::with_capacity(spec.clients);
        for n in 0..spec.clients {
            let (q, r, m, b) = if spec.homogeneous {
                shared.clone()
            } else {
                make(n as u32)
            };
            let mut rng = RngStream::new(spec.seed, StreamId::new(n as u32, 1, 0), Purpose::Theory);
            let (shift_u, shift_v) = if spec.homogeneous {
                (DVector::zeros(spec.dim_u), DVector::zeros(spec.dim_v))
            } else {
                (
                    random_vector(spec.dim_u, spec.heterogeneity, &mut rng),
                    random_vector(spec.dim_v, spec.heterogeneity, &mut rng),
                )
            };
            let mut sample_rng = if spec.homogeneous {
                RngStream::new(spec.seed, StreamId::new(u32::MAX, 2, 0), Purpose::Theory)
            } else {
                RngStream::new(spec.seed, StreamId::new(n as u32, 2, 0), Purpose::Theory)
            };
            let mut offsets = |dim: usize| {
                let raw: Vec<DVector<f64>> = (0..spec.samples)
                    .map(|_| DVector::from_fn(dim, |_, _| spec.noise * sample_rng.normal()))
                    .collect();
                let mean = raw.iter().fold(DVector::zeros(dim), |acc, x| acc + x)
                    / spec.samples.max(1) as f64;
                raw.into_iter().map(|x| x - &mean).collect::<Vec<_>>()
            };
            let offsets_u = offsets(spec.dim_u);
            let offsets_v = offsets(spec.dim_v);
            clients.push(SyntheticClient {
                q,
                r,
                m,
                a: spec.sine_amplitude,
                b,
                shift_u,
                shift_v,
                offsets_u,
                offsets_v,
            });
        }
        Ok(Self { spec, clients })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    fn is_full_batch(&self) -> bool {
        self.spec.noise == 0.0 || self.spec.batch == 0 || self.spec.batch >= self.spec.samples
    }

    /// Upper bounds on the smoothness constants read off the construction:
    /// `L_u <= ||Q|| + |a| ||b||^2`, `L_v = ||R||`, `L_uv = L_vu = ||M||`.
    pub fn analytic_bounds(&self) -> SmoothnessConstants {
        let mut k = SmoothnessConstants::smooth(0.0, 0.0, 0.0, 0.0);
        for c in &self.clients {
            k.l_u = k
                .l_u
                .max(spectral_norm(&c.q) + c.a.abs() * c.b.norm_squared());
            k.l_v = k.l_v.max(spectral_norm(&c.r));
            k.l_uv = k.l_uv.max(spectral_norm(&c.m));
        }
        k.l_vu = k.l_uv;
        k
    }

    /// Initial point shared by the verification runs.
    pub fn initial_point(&self, seed: u64) -> (DVector<f64>, Vec<DVector<f64>>) {
        let mut rng = RngStream::new(seed, StreamId::global(), Purpose::Init);
        let u = DVector::from_fn(self.spec.dim_u, |_, _| 2.0 * rng.normal());
        let v = (0..self.spec.clients)
            .map(|_| DVector::from_fn(self.spec.dim_v, |_, _| 2.0 * rng.normal()))
            .collect();
        (u, v)
    }
}

impl SmoothProblem for SyntheticProblem {
    fn clients(&self) -> usize {
        self.clients.len()
    }

    fn dims(&self) -> (usize, usize) {
        (self.spec.dim_u, self.spec.dim_v)
    }

    fn value(&self, client: usize, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        let c = &self.clients[client];
        0.5 * u.dot(&(&c.q * u))
            + 0.5 * v.dot(&(&c.r * v))
            + u.dot(&(&c.m * v))
            + c.a * math::sin(c.b.dot(u))
            + c.shift_u.dot(u)
            + c.shift_v.dot(v)
    }

    fn gradient(
        &self,
        client: usize,
        u: &DVector<f64>,
        v: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let c = &self.clients[client];
        let gu = &c.q * u + &c.m * v + &c.b * (c.a * math::cos(c.b.dot(u))) + &c.shift_u;
        let gv = &c.r * v + c.m.transpose() * u + &c.shift_v;
        (gu, gv)
    }

    fn stochastic_gradient(
        &self,
        client: usize,
        u: &DVector<f64>,
        v: &DVector<f64>,
        rng: &mut RngStream,
    ) -> (DVector<f64>, DVector<f64>) {
        let (mut gu, mut gv) = self.gradient(client, u, v);
        if self.is_full_batch() {
            return (gu, gv);
        }
        let c = &self.clients[client];
        let idx = crate::data::sample_indices(self.spec.samples, self.spec.batch, rng);
        let w = 1.0 / idx.len() as f64;
        for i in idx {
            gu.axpy(w, &c.offsets_u[i], 1.0);
            gv.axpy(w, &c.offsets_v[i], 1.0);
        }
        (gu, gv)
    }
}

fn to_tensor(v: &DVector<f64>) -> Tensor {
    Tensor::from_slice(v.as_slice())
}

fn from_map(map: &ParamMap, name: &str) -> Result<DVector<f64>> {
    map.get(name)
        .map(|t| DVector::from_column_slice(t.data()))
        .ok_or_else(|| Error::UnknownName(String::from(name)))
}

/// Parameter names used when a [`SmoothProblem`] runs through the federation.
pub const U_NAME: &str = "u";
pub const V_NAME: &str = "v";

fn block(name: &str, x: &DVector<f64>) -> ParamMap {
    let mut m = ParamMap::new();
    m.insert(String::from(name), to_tensor(x));
    m
}

/// Adapter running a [`SmoothProblem`] as a federated objective.
#[derive(Debug, Clone, Copy)]
pub struct ProblemObjective<'a, P>(pub &'a P);

impl<P: SmoothProblem + Sync> Objective for ProblemObjective<'_, P> {
    type Workspace = ();

    fn clients(&self) -> usize {
        self.0.clients()
    }

    fn workspace(&self, _: usize, _: &ParamMap, _: &ParamMap) -> Result<()> {
        Ok(())
    }

    fn step(
        &self,
        _: &mut (),
        ctx: &StepContext,
        u: &ParamMap,
        v: &ParamMap,
    ) -> Result<StepOutput> {
        let (uu, vv) = (from_map(u, U_NAME)?, from_map(v, V_NAME)?);
        let (gu, gv) =
            self.0
                .stochastic_gradient(ctx.client, &uu, &vv, &mut ctx.stream(Purpose::Batch));
        let f = self.0.value(ctx.client, &uu, &vv);
        Ok(StepOutput {
            losses: Losses {
                mse: f,
                contrastive: 0.0,
                total: f,
            },
            grad_u: block(U_NAME, &gu),
            grad_v: block(V_NAME, &gv),
        })
    }

    fn full_gradient(
        &self,
        _: &mut (),
        client: usize,
        u: &ParamMap,
        v: &ParamMap,
    ) -> Result<Option<(ParamMap, ParamMap)>> {
        let (gu, gv) = self
            .0
            .gradient(client, &from_map(u, U_NAME)?, &from_map(v, V_NAME)?);
        Ok(Some((block(U_NAME, &gu), block(V_NAME, &gv))))
    }
}

/// Sampling effort of [`estimate_constants`].
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EstimationConfig {
    /// Random point pairs per constant and client.
    pub pairs: usize,
    /// Points at which power iteration refines each constant.
    pub power_points: usize,
    pub power_iterations: usize,
    /// Standard deviation of sampled coordinates.
    pub radius: f64,
    /// Stochastic draws per point for the inner-error bounds.
    pub noise_draws: usize,
    /// Fit `rho` by least squares; otherwise `rho = 0`.
    pub fit_rho: bool,
    /// Multiplier applied to the fitted `sigma`, `delta` and `rho`.
    pub inflation: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            pairs: 200,
            power_points: 8,
            power_iterations: 40,
            radius: 3.0,
            noise_draws: 20,
            fit_rho: false,
            inflation: 1.1,
        }
    }
}

const DIFF_STEP: f64 = 1e-5;
const MIN_SEPARATION: f64 = 1e-9;

/// Which gradient block responds to which perturbed block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pair {
    UU,
    VV,
    UV,
    VU,
}

fn gaussian(dim: usize, scale: f64, rng: &mut RngStream) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| scale * rng.normal())
}

/// Gradient of block `out` after moving block `input` by `d`.
fn shifted_grad<P: SmoothProblem>(
    p: &P,
    n: usize,
    u: &DVector<f64>,
    v: &DVector<f64>,
    pair: Pair,
    d: &DVector<f64>,
) -> DVector<f64> {
    let (gu, gv) = match pair {
        Pair::UU | Pair::VU => p.gradient(n, &(u + d), v),
        Pair::VV | Pair::UV => p.gradient(n, u, &(v + d)),
    };
    match pair {
        Pair::UU | Pair::UV => gu,
        Pair::VV | Pair::VU => gv,
    }
}

/// Directional derivative of block `out` of the gradient along `d` in the
/// input block, by central differences.
fn jvp<P: SmoothProblem>(
    p: &P,
    n: usize,
    u: &DVector<f64>,
    v: &DVector<f64>,
    pair: Pair,
    d: &DVector<f64>,
) -> DVector<f64> {
    let plus = shifted_grad(p, n, u, v, pair, &(d * DIFF_STEP));
    let minus = shifted_grad(p, n, u, v, pair, &(d * -DIFF_STEP));
    (plus - minus) / (2.0 * DIFF_STEP)
}

fn transpose_pair(pair: Pair) -> Pair {
    match pair {
        Pair::UU => Pair::UU,
        Pair::VV => Pair::VV,
        Pair::UV => Pair::VU,
        Pair::VU => Pair::UV,
    }
}

/// Power iteration on `J^T J` for the second-derivative block of `pair`;
/// the transpose uses symmetry of mixed partials.
fn power_norm<P: SmoothProblem>(
    p: &P,
    n: usize,
    u: &DVector<f64>,
    v: &DVector<f64>,
    pair: Pair,
    iters: usize,
    rng: &mut RngStream,
) -> f64 {
    let (du, dv) = p.dims();
    let in_dim = match pair {
        Pair::UU | Pair::VU => du,
        Pair::VV | Pair::UV => dv,
    };
    let mut x = gaussian(in_dim, 1.0, rng);
    let mut est = 0.0;
    for _ in 0..iters {
        let nx = x.norm();
        if nx < MIN_SEPARATION {
            break;
        }
        x /= nx;
        let y = jvp(p, n, u, v, pair, &x);
        est = y.norm();
        if est < MIN_SEPARATION {
            break;
        }
        x = jvp(p, n, u, v, transpose_pair(pair), &(y / est));
    }
    est
}

fn pair_ratio<P: SmoothProblem>(
    p: &P,
    n: usize,
    pair: Pair,
    radius: f64,
    rng: &mut RngStream,
) -> f64 {
    let (du, dv) = p.dims();
    let in_dim = match pair {
        Pair::UU | Pair::VU => du,
        Pair::VV | Pair::UV => dv,
    };
    loop {
        let u = gaussian(du, radius, rng);
        let v = gaussian(dv, radius, rng);
        let d = gaussian(in_dim, radius * rng.uniform_range(0.01, 1.0), rng);
        if d.norm() < MIN_SEPARATION {
            continue;
        }
        let g0 = shifted_grad(p, n, &u, &v, pair, &DVector::zeros(in_dim));
        let g1 = shifted_grad(p, n, &u, &v, pair, &d);
        return (g1 - g0).norm() / d.norm();
    }
}

/// Measures the constants of `problem` by sampling.
///
/// Smoothness constants are maxima of gradient-difference ratios over random
/// pairs, refined by power iteration on finite-difference second
/// derivatives. Inner errors are maxima of `||G - grad F||`. Heterogeneity
/// fits `(1/N) sum_n ||grad_u F_n - grad_u F||^2 <= rho^2 ||grad_u F||^2 +
/// delta^2` over sampled broadcast points. Fitted error terms are inflated
/// by `config.inflation`.
pub fn estimate_constants<P: SmoothProblem>(
    problem: &P,
    config: &EstimationConfig,
    seed: u64,
) -> Result<SmoothnessConstants> {
    if config.pairs == 0 || !(config.radius > 0.0) || config.inflation < 1.0 {
        return Err(Error::Estimation(String::from(
            "need at least one pair, positive radius and inflation >= 1",
        )));
    }
    let (du, dv) = problem.dims();
    let n_clients = problem.clients();
    let mut l = [0.0f64; 4];
    let pairs = [Pair::UU, Pair::VV, Pair::UV, Pair::VU];
    for n in 0..n_clients {
        let mut rng = RngStream::new(seed, StreamId::new(n as u32, 0, 0), Purpose::Theory);
        for (slot, &pair) in l.iter_mut().zip(&pairs) {
            for _ in 0..config.pairs {
                *slot = slot.max(pair_ratio(problem, n, pair, config.radius, &mut rng));
            }
            for _ in 0..config.power_points {
                let u = gaussian(du, config.radius, &mut rng);
                let v = gaussian(dv, config.radius, &mut rng);
                *slot = slot.max(power_norm(
                    problem,
                    n,
                    &u,
                    &v,
                    pair,
                    config.power_iterations,
                    &mut rng,
                ));
            }
        }
    }
    if l.iter().any(|x| !x.is_finite()) {
        return Err(Error::Estimation(String::from(
            "non-finite smoothness estimate",
        )));
    }
    // Constants must be positive; a block with no measurable coupling gets
    // a negligible floor.
    let floor = 1e-9 * l.iter().copied().fold(0.0, f64::max).max(1e-300);
    let [l_u, l_v, l_uv, l_vu] = l.map(|x| x.max(floor));

    let (mut sigma_u, mut sigma_v) = (0.0f64, 0.0f64);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut rng = RngStream::new(seed, StreamId::new(u32::MAX, 1, 0), Purpose::Theory);
    for point in 0..config.pairs {
        let u = gaussian(du, config.radius, &mut rng);
        let vs: Vec<DVector<f64>> = (0..n_clients)
            .map(|_| gaussian(dv, config.radius, &mut rng))
            .collect();
        let grads: Vec<(DVector<f64>, DVector<f64>)> = (0..n_clients)
            .map(|n| problem.gradient(n, &u, &vs[n]))
            .collect();
        for (n, (gu, gv)) in grads.iter().enumerate() {
            for draw in 0..config.noise_draws {
                let mut s = RngStream::new(
                    seed,
                    StreamId::new(n as u32, point as u32, draw as u32),
                    Purpose::Batch,
                );
                let (su, sv) = problem.stochastic_gradient(n, &u, &vs[n], &mut s);
                sigma_u = sigma_u.max((su - gu).norm());
                sigma_v = sigma_v.max((sv - gv).norm());
            }
        }
        let mean = grads
            .iter()
            .fold(DVector::zeros(du), |acc, (gu, _)| acc + gu)
            / n_clients as f64;
        let spread = grads
            .iter()
            .map(|(gu, _)| (gu - &mean).norm_squared())
            .sum::<f64>()
            / n_clients as f64;
        xs.push(mean.norm_squared());
        ys.push(spread);
    }
    let (rho_sq, delta_sq) = if config.fit_rho {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let slope = if sxx > 0.0 { (sxy / sxx).max(0.0) } else { 0.0 };
        // Raise the intercept until every sample lies under the line.
        let intercept = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| y - slope * x)
            .fold(0.0, f64::max);
        (slope, intercept)
    } else {
        (0.0, ys.iter().copied().fold(0.0, f64::max))
    };
    let k = SmoothnessConstants {
        l_u,
        l_v,
        l_uv,
        l_vu,
        sigma_u: sigma_u * config.inflation,
        sigma_v: sigma_v * config.inflation,
        delta: math::sqrt(delta_sq) * config.inflation,
        rho: math::sqrt(rho_sq) * config.inflation,
    };
    k.validate()
        .map_err(|e| Error::Estimation(format!("{e}")))?;
    Ok(k)
}

/// `F(u, V) = (1/N) sum_n F_n(u, v_n)`.
pub fn global_value<P: SmoothProblem>(p: &P, u: &DVector<f64>, v: &[DVector<f64>]) -> f64 {
    (0..p.clients()).map(|n| p.value(n, u, &v[n])).sum::<f64>() / p.clients() as f64
}

/// Smallest value of `F` reached by gradient descent from `starts` random
/// points and from `extra`.
pub fn estimate_min<P: SmoothProblem>(
    p: &P,
    k: &SmoothnessConstants,
    extra: &[(DVector<f64>, Vec<DVector<f64>>)],
    starts: usize,
    seed: u64,
) -> f64 {
    let (du, dv) = p.dims();
    let n = p.clients();
    let step = 0.5 / (k.l_u + k.l_uv).max(k.l_v + k.l_vu);
    let mut rng = RngStream::new(seed, StreamId::new(u32::MAX, 3, 0), Purpose::Theory);
    let mut points: Vec<(DVector<f64>, Vec<DVector<f64>>)> = extra.to_vec();
    for _ in 0..starts {
        points.push((
            gaussian(du, 3.0, &mut rng),
            (0..n).map(|_| gaussian(dv, 3.0, &mut rng)).collect(),
        ));
    }
    let mut best = f64::INFINITY;
    for (mut u, mut v) in points {
        for _ in 0..20_000 {
            let grads: Vec<_> = (0..n).map(|c| p.gradient(c, &u, &v[c])).collect();
            let gu = grads.iter().fold(DVector::zeros(du), |acc, (g, _)| acc + g) / n as f64;
            let mut sq = gu.norm_squared();
            u -= &gu * step;
            for (vc, (_, gv)) in v.iter_mut().zip(&grads) {
                sq += gv.norm_squared();
                *vc -= gv * step;
            }
            if sq < 1e-24 {
                break;
            }
        }
        best = best.min(global_value(p, &u, &v));
    }
    best
}

/// Bound check at one horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HorizonCheck {
    pub rounds: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    pub pass: bool,
}

/// Outcome of [`verify_theorem_empirically`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TheoremReport {
    pub constants: SmoothnessConstants,
    pub admissible_upper: f64,
    pub positive_upper: f64,
    pub coefficients: TheoremConstants,
    pub f0: f64,
    pub f_star: f64,
    pub checks: Vec<HorizonCheck>,
    pub pass: bool,
}

/// Settings of the empirical bound check.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VerifyConfig {
    pub local_steps: usize,
    /// Step scale; `None` picks 90% of the largest admissible value that
    /// keeps both lambdas positive.
    pub c: Option<f64>,
    pub estimation: EstimationConfig,
    pub options: CoefficientOptions,
    /// Random restarts when searching for the minimum of `F`.
    pub min_starts: usize,
    pub seed: u64,
}

impl VerifyConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            local_steps: 5,
            c: None,
            estimation: EstimationConfig::default(),
            options: CoefficientOptions::default(),
            min_starts: 8,
            seed,
        }
    }
}

/// Largest usable step scale for `k` and `tau`.
pub fn step_scale_cap(tau: usize, k: &SmoothnessConstants, opts: CoefficientOptions) -> f64 {
    admissible_c(k).min(max_positive_c(tau, k, opts))
}

/// Time average of `||grad_u F(u^t, V^t)||^2 + (1/N) sum_n ||grad_v F_n(u^t, v_n^t)||^2`
/// over `t = 0..=rounds`, divided by `rounds`, for a run with constant step
/// sizes.
pub fn lhs_average<P: SmoothProblem + Sync>(
    p: &P,
    rounds: usize,
    local_steps: usize,
    eta_u: f64,
    eta_v: f64,
    start: &(DVector<f64>, Vec<DVector<f64>>),
    seed: u64,
) -> Result<f64> {
    let objective = ProblemObjective(p);
    let schedule = FlSchedule {
        rounds,
        local_steps,
        eta_u,
        eta_v,
        lr_rule: crate::federation::LrRule::Constant,
        step_decay: false,
    };
    let mut fed = Federation::new(&objective, schedule, seed);
    fed.instrument = true;
    let mut state = TrainingState::new(
        block(U_NAME, &start.0),
        start.1.iter().map(|v| block(V_NAME, v)).collect(),
    );
    let mut total = 0.0;
    fed.run(&mut state, |r, _| {
        total += r.grad_norm_u_sq.unwrap_or(f64::NAN) + r.grad_norm_v_sq_avg.unwrap_or(f64::NAN);
        Ok(())
    })?;
    let u = from_map(&state.u, U_NAME)?;
    let n = p.clients();
    let grads: Vec<_> = (0..n)
        .map(|c| from_map(&state.v[c], V_NAME).map(|v| p.gradient(c, &u, &v)))
        .collect::<Result<_>>()?;
    let gu = grads
        .iter()
        .fold(DVector::zeros(u.len()), |acc, (g, _)| acc + g)
        / n as f64;
    total +=
        gu.norm_squared() + grads.iter().map(|(_, gv)| gv.norm_squared()).sum::<f64>() / n as f64;
    if !total.is_finite() {
        return Err(Error::numeric(
            "gradient norms diverged during the bound check",
        ));
    }
    Ok(total / rounds as f64)
}

/// Runs the federated algorithm on `problem` for every horizon and compares
/// the left-hand side average against the bound evaluated with measured
/// constants.
pub fn verify_theorem_empirically<P: SmoothProblem + Sync>(
    problem: &P,
    horizons: &[usize],
    config: &VerifyConfig,
) -> Result<TheoremReport> {
    let k = estimate_constants(problem, &config.estimation, config.seed)?;
    let admissible_upper = admissible_c(&k);
    let positive_upper = max_positive_c(config.local_steps, &k, config.options);
    let c = config
        .c
        .unwrap_or(0.9 * admissible_upper.min(positive_upper));
    let tc = theorem_coefficients(c, config.local_steps, &k, config.options)?;
    let start = {
        let mut rng = RngStream::new(config.seed, StreamId::global(), Purpose::Init);
        let (du, dv) = problem.dims();
        (
            gaussian(du, 2.0, &mut rng),
            (0..problem.clients())
                .map(|_| gaussian(dv, 2.0, &mut rng))
                .collect::<Vec<_>>(),
        )
    };
    let f0 = global_value(problem, &start.0, &start.1);
    let f_star = estimate_min(
        problem,
        &k,
        core::slice::from_ref(&start),
        config.min_starts,
        config.seed,
    )
    .min(f0);
    let mut checks = Vec::with_capacity(horizons.len());
    for &t in horizons {
        if t == 0 {
            return Err(Error::config("horizons", "rounds must be positive"));
        }
        let lhs = lhs_average(
            problem,
            t,
            config.local_steps,
            tc.eta_u,
            tc.eta_v,
            &start,
            config.seed,
        )?;
        let rhs = theorem_rhs(f0, f_star, t, &tc, &k);
        checks.push(HorizonCheck {
            rounds: t,
            lhs,
            rhs,
            ratio: lhs / rhs,
            pass: lhs <= rhs,
        });
    }
    Ok(TheoremReport {
        constants: k,
        admissible_upper,
        positive_upper,
        coefficients: tc,
        f0,
        f_star,
        pass: checks.iter().all(|c| c.pass),
        checks,
    })
}

/// Log-log slope of the left-hand side under `c = c0 T^q`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RateReport {
    pub q: f64,
    pub c0: f64,
    /// `(T, c, lhs)` per horizon.
    pub points: Vec<(usize, f64, f64)>,
    pub slope: f64,
    /// Largest slope accepted: `-(1 + q) + 0.2`.
    pub threshold: f64,
    pub pass: bool,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| math::ln(p.0)).collect();
    let ly: Vec<f64> = points.iter().map(|p| math::ln(p.1)).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Rate check with `c = c0 T^q`, where `c0` puts the smallest horizon at
/// 90% of the usable cap so every horizon stays admissible.
pub fn rate_check<P: SmoothProblem + Sync>(
    problem: &P,
    q: f64,
    horizons: &[usize],
    config: &VerifyConfig,
) -> Result<RateReport> {
    if !(q > -1.0 && q < 0.0) {
        return Err(Error::config("q", "must lie in (-1, 0)"));
    }
    let &t_min = horizons
        .iter()
        .min()
        .ok_or_else(|| Error::config("horizons", "need at least two horizons"))?;
    if horizons.len() < 2 || t_min == 0 {
        return Err(Error::config(
            "horizons",
            "need at least two positive horizons",
        ));
    }
    let k = estimate_constants(problem, &config.estimation, config.seed)?;
    let cap = step_scale_cap(config.local_steps, &k, config.options);
    let c0 = 0.9 * cap * math::powf(t_min as f64, -q);
    let start = problem_start(problem, config.seed);
    let mut points = Vec::with_capacity(horizons.len());
    for &t in horizons {
        let c = c0 * math::powf(t as f64, q);
        let tc = theorem_coefficients(c, config.local_steps, &k, config.options)?;
        let lhs = lhs_average(
            problem,
            t,
            config.local_steps,
            tc.eta_u,
            tc.eta_v,
            &start,
            config.seed,
        )?;
        points.push((t, c, lhs));
    }
    let slope = log_log_slope(
        &points
            .iter()
            .map(|&(t, _, l)| (t as f64, l))
            .collect::<Vec<_>>(),
    );
    let threshold = -(1.0 + q) + 0.2;
    Ok(RateReport {
        q,
        c0,
        points,
        slope,
        threshold,
        pass: slope <= threshold,
    })
}

fn problem_start<P: SmoothProblem>(problem: &P, seed: u64) -> (DVector<f64>, Vec<DVector<f64>>) {
    let mut rng = RngStream::new(seed, StreamId::global(), Purpose::Init);
    let (du, dv) = problem.dims();
    (
        gaussian(du, 2.0, &mut rng),
        (0..problem.clients())
            .map(|_| gaussian(dv, 2.0, &mut rng))
            .collect(),
    )
}

/// A constant draw for which an admissible `c` left a lambda nonpositive.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PositivityCounterexample {
    pub constants: SmoothnessConstants,
    pub tau: usize,
    pub c: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Outcome of [`lambda_positivity_probe`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PositivityProbe {
    pub draws: usize,
    pub counterexamples: Vec<PositivityCounterexample>,
}

/// Draws `L`'s log-uniformly from `[0.1, 10]`, `tau` from `2..=20` and `c`
/// uniformly from the admissible interval, and records every draw with a
/// nonpositive lambda.
pub fn lambda_positivity_probe(
    draws: usize,
    seed: u64,
    opts: CoefficientOptions,
) -> PositivityProbe {
    let mut rng = RngStream::new(seed, StreamId::global(), Purpose::Theory);
    let mut counterexamples = Vec::new();
    for _ in 0..draws {
        let mut l = || math::powf(10.0, rng.uniform_range(-1.0, 1.0));
        let k = SmoothnessConstants::smooth(l(), l(), l(), l());
        let tau = 2 + rng.index(19);
        let c = admissible_c(&k) * (1.0 - rng.uniform());
        if let Err(Error::VacuousBound {
            lambda1, lambda2, ..
        }) = theorem_coefficients(c, tau, &k, opts)
        {
            counterexamples.push(PositivityCounterexample {
                constants: k,
                tau,
                c,
                lambda1,
                lambda2,
            });
        }
    }
    PositivityProbe {
        draws,
        counterexamples,
    }
}
