//! Personalized federated training: broadcast the shared block, run local
//! steps on every client, aggregate the uploaded shared-block gradients.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::codec;
use crate::error::{Error, Result};
use crate::math;
use crate::rng::{Purpose, RngStream, StreamId};
use crate::tensor::{ParamMap, Tensor};

/// Shared block `u` and personalized block `v`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    pub u: ParamMap,
    pub v: ParamMap,
}

impl ParamSet {
    /// Splits codec parameters; `personalized = false` leaves `v` empty.
    pub fn partition(params: &ParamMap, personalized: bool) -> Result<Self> {
        let (u, v) = codec::partition_params(params, personalized)?;
        Ok(Self { u, v })
    }

    pub fn merged(&self) -> ParamMap {
        let mut all = self.u.clone();
        all.extend(self.v.iter().map(|(k, t)| (k.clone(), t.clone())));
        all
    }
}

/// Per-round learning-rate factor.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum LrRule {
    Constant,
    /// `1 / sqrt(t + 1)` in round `t`.
    InverseSqrtRound,
    /// `(t + 1)^q` with `q` in `(-1, 0)`.
    Power(f64),
}

/// Round and step counts with learning rates.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlSchedule {
    pub rounds: usize,
    pub local_steps: usize,
    pub eta_u: f64,
    pub eta_v: f64,
    pub lr_rule: LrRule,
    /// Extra `1 / (k + 1)` factor on local step `k`.
    pub step_decay: bool,
}

impl FlSchedule {
    /// 300 rounds of 5 local steps at `1e-4`, decayed per round and per step.
    pub fn paper_defaults() -> Self {
        Self {
            rounds: 300,
            local_steps: 5,
            eta_u: 1e-4,
            eta_v: 1e-4,
            lr_rule: LrRule::InverseSqrtRound,
            step_decay: true,
        }
    }

    pub fn constant(rounds: usize, local_steps: usize, eta: f64) -> Self {
        Self {
            rounds,
            local_steps,
            eta_u: eta,
            eta_v: eta,
            lr_rule: LrRule::Constant,
            step_decay: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("schedule.rounds", "must be at least 1"));
        }
        if self.local_steps == 0 {
            return Err(Error::config("schedule.local_steps", "must be at least 1"));
        }
        for (field, eta) in [
            ("schedule.eta_u", self.eta_u),
            ("schedule.eta_v", self.eta_v),
        ] {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::config(field, "must be positive and finite"));
            }
        }
        if let LrRule::Power(q) = self.lr_rule {
            if !(q > -1.0 && q < 0.0) {
                return Err(Error::config(
                    "schedule.lr_rule",
                    "power q must lie in (-1, 0)",
                ));
            }
        }
        Ok(())
    }

    pub fn round_factor(&self, round: usize) -> f64 {
        let t = (round + 1) as f64;
        match self.lr_rule {
            LrRule::Constant => 1.0,
            LrRule::InverseSqrtRound => 1.0 / math::sqrt(t),
            LrRule::Power(q) => math::powf(t, q),
        }
    }

    pub fn step_factor(&self, step: usize) -> f64 {
        if self.step_decay {
            1.0 / (step + 1) as f64
        } else {
            1.0
        }
    }
}

/// How the server weights client uploads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Aggregation {
    /// Equal `1 / N` weights.
    #[default]
    Uniform,
    /// Weights `gamma_n = |D_n| / |D|`.
    DataWeighted,
}

/// Coordinates of one local step; every random draw of the step derives
/// from these.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepContext {
    pub seed: u64,
    pub client: usize,
    pub round: usize,
    pub step: usize,
}

impl StepContext {
    pub fn stream(&self, purpose: Purpose) -> RngStream {
        RngStream::new(
            self.seed,
            StreamId::new(self.client as u32, self.round as u32, self.step as u32),
            purpose,
        )
    }
}

/// Loss components of one step or averaged over steps and clients.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Losses {
    pub mse: f64,
    pub contrastive: f64,
    pub total: f64,
}

impl Losses {
    fn accumulate(&mut self, other: &Losses, weight: f64) {
        self.mse += weight * other.mse;
        self.contrastive += weight * other.contrastive;
        self.total += weight * other.total;
    }
}

/// Losses and block gradients of one stochastic step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub losses: Losses,
    pub grad_u: ParamMap,
    pub grad_v: ParamMap,
}

/// A client objective `F_n(u, v_n)` with stochastic gradients.
pub trait Objective: Sync {
    /// Per-client scratch state (cached graphs, buffers).
    type Workspace: Send;

    fn clients(&self) -> usize;

    /// `gamma_n`; defaults to uniform.
    fn client_weight(&self, client: usize) -> f64 {
        let _ = client;
        1.0 / self.clients() as f64
    }

    fn workspace(&self, client: usize, u: &ParamMap, v: &ParamMap) -> Result<Self::Workspace>;

    /// Stochastic gradient at `(u, v)` for the draws selected by `ctx`.
    fn step(
        &self,
        ws: &mut Self::Workspace,
        ctx: &StepContext,
        u: &ParamMap,
        v: &ParamMap,
    ) -> Result<StepOutput>;

    /// Full-batch gradients of `F_n`, when the objective can afford them.
    fn full_gradient(
        &self,
        ws: &mut Self::Workspace,
        client: usize,
        u: &ParamMap,
        v: &ParamMap,
    ) -> Result<Option<(ParamMap, ParamMap)>> {
        let _ = (ws, client, u, v);
        Ok(None)
    }
}

/// Upload of one client in one round: shared-block gradients summed over
/// local steps, each weighted by its step factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientMessage {
    pub client: usize,
    pub round: usize,
    pub grad_sum: ParamMap,
}

impl ClientMessage {
    /// Parameter names carried by the message.
    pub fn manifest(&self) -> impl Iterator<Item = &str> {
        self.grad_sum.keys().map(String::as_str)
    }
}

/// Result of a client's local phase.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub message: ClientMessage,
    /// Local copy of `u` after the last step.
    pub u_local: ParamMap,
    pub v: ParamMap,
    /// Losses averaged over the local steps.
    pub losses: Losses,
}

fn check_finite(map: &ParamMap, ctx: &StepContext) -> Result<()> {
    match map.iter().find(|(_, t)| !t.all_finite()) {
        None => Ok(()),
        Some((name, _)) => Err(Error::numeric(format!(
            "non-finite gradient for {name} at round {} client {} step {}",
            ctx.round, ctx.client, ctx.step
        ))),
    }
}

fn axpy_map(target: &mut ParamMap, alpha: f64, delta: &ParamMap) -> Result<()> {
    for (name, t) in target.iter_mut() {
        let d = delta
            .get(name)
            .ok_or_else(|| Error::UnknownName(format!("gradient missing for {name}")))?;
        t.axpy(alpha, d)?;
    }
    Ok(())
}

fn zeros_like(map: &ParamMap) -> ParamMap {
    map.iter()
        .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
        .collect()
}

/// Runs `tau` local steps on client `client` starting from the broadcast `u_t`.
#[allow(clippy::too_many_arguments)]
pub fn local_update<O: Objective>(
    objective: &O,
    ws: &mut O::Workspace,
    client: usize,
    round: usize,
    seed: u64,
    schedule: &FlSchedule,
    u_t: &ParamMap,
    v: &ParamMap,
) -> Result<LocalOutcome> {
    let mut u = u_t.clone();
    let mut v = v.clone();
    let mut grad_sum = zeros_like(u_t);
    let mut losses = Losses::default();
    let rf = schedule.round_factor(round);
    for step in 0..schedule.local_steps {
        let ctx = StepContext {
            seed,
            client,
            round,
            step,
        };
        let out = objective.step(ws, &ctx, &u, &v)?;
        check_finite(&out.grad_u, &ctx)?;
        check_finite(&out.grad_v, &ctx)?;
        if !out.losses.total.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite loss at round {round} client {client} step {step}"
            )));
        }
        let sf = schedule.step_factor(step);
        axpy_map(&mut v, -schedule.eta_v * rf * sf, &out.grad_v)?;
        axpy_map(&mut u, -schedule.eta_u * rf * sf, &out.grad_u)?;
        axpy_map(&mut grad_sum, sf, &out.grad_u)?;
        losses.accumulate(&out.losses, 1.0 / schedule.local_steps as f64);
    }
    Ok(LocalOutcome {
        message: ClientMessage {
            client,
            round,
            grad_sum,
        },
        u_local: u,
        v,
        losses,
    })
}

/// `u - eta * sum_n w_n * grad_sum_n`, with `w_n = 1 / N` unless `weights`
/// are given. Messages are combined in client order regardless of arrival.
pub fn aggregate(
    u_t: &ParamMap,
    messages: &[ClientMessage],
    eta: f64,
    clients: usize,
    weights: Option<&[f64]>,
) -> Result<ParamMap> {
    let mut ordered: Vec<&ClientMessage> = messages.iter().collect();
    ordered.sort_by_key(|m| m.client);
    let ids: Vec<usize> = ordered.iter().map(|m| m.client).collect();
    if ids != (0..clients).collect::<Vec<_>>() {
        return Err(Error::MissingClient {
            expected: clients,
            got: messages.len(),
        });
    }
    if let Some(w) = weights {
        if w.len() != clients {
            return Err(Error::Dimension(format!(
                "{} weights for {clients} clients",
                w.len()
            )));
        }
    }
    let mut total = zeros_like(u_t);
    for m in &ordered {
        if let Some(extra) = m.grad_sum.keys().find(|k| !u_t.contains_key(*k)) {
            return Err(Error::UnknownName(format!(
                "client {} uploaded {extra}, which is not a shared parameter",
                m.client
            )));
        }
        let w = weights.map_or(1.0, |w| w[m.client]);
        axpy_map(&mut total, w, &m.grad_sum)?;
    }
    let scale = if weights.is_some() {
        eta
    } else {
        eta / clients as f64
    };
    let mut u = u_t.clone();
    axpy_map(&mut u, -scale, &total)?;
    Ok(u)
}

/// Global model and personalized blocks between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    /// Next round to run.
    pub round: usize,
    pub u: ParamMap,
    pub v: Vec<ParamMap>,
}

impl TrainingState {
    pub fn new(u: ParamMap, v: Vec<ParamMap>) -> Self {
        Self { round: 0, u, v }
    }
}

/// Per-round summary handed to the observer.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    /// Client-averaged mean of the local-step losses.
    pub losses: Losses,
    /// `||grad_u F||^2` at the broadcast point, when instrumented.
    pub grad_norm_u_sq: Option<f64>,
    /// `(1/N) sum_n ||grad_v F_n||^2` at the broadcast point.
    pub grad_norm_v_sq_avg: Option<f64>,
    /// Union of the parameter names the server received.
    pub uploaded_names: BTreeSet<String>,
}

/// Training driver.
#[derive(Debug, Clone, Copy)]
pub struct Federation<'a, O> {
    pub objective: &'a O,
    pub schedule: FlSchedule,
    pub seed: u64,
    pub aggregation: Aggregation,
    /// Run clients on separate threads.
    pub parallel: bool,
    /// Compute full-batch gradient norms every round.
    pub instrument: bool,
}

impl<'a, O: Objective> Federation<'a, O> {
    pub fn new(objective: &'a O, schedule: FlSchedule, seed: u64) -> Self {
        Self {
            objective,
            schedule,
            seed,
            aggregation: Aggregation::Uniform,
            parallel: false,
            instrument: false,
        }
    }

    fn local_phase(
        &self,
        workspaces: &mut [O::Workspace],
        state: &TrainingState,
    ) -> Result<Vec<LocalOutcome>> {
        let round = state.round;
        let run = |client: usize, ws: &mut O::Workspace| {
            local_update(
                self.objective,
                ws,
                client,
                round,
                self.seed,
                &self.schedule,
                &state.u,
                &state.v[client],
            )
        };
        #[cfg(feature = "std")]
        if self.parallel && workspaces.len() > 1 {
            return std::thread::scope(|scope| {
                let handles: Vec<_> = workspaces
                    .iter_mut()
                    .enumerate()
                    .map(|(client, ws)| scope.spawn(move || run(client, ws)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
                    .collect()
            });
        }
        workspaces
            .iter_mut()
            .enumerate()
            .map(|(client, ws)| run(client, ws))
            .collect()
    }

    fn gradient_norms(
        &self,
        workspaces: &mut [O::Workspace],
        state: &TrainingState,
    ) -> Result<Option<(f64, f64)>> {
        let n = workspaces.len();
        let mut grad_u: Option<ParamMap> = None;
        let mut v_sq = 0.0;
        for (client, ws) in workspaces.iter_mut().enumerate() {
            let Some((gu, gv)) =
                self.objective
                    .full_gradient(ws, client, &state.u, &state.v[client])?
            else {
                return Ok(None);
            };
            let w = match self.aggregation {
                Aggregation::Uniform => 1.0 / n as f64,
                Aggregation::DataWeighted => self.objective.client_weight(client),
            };
            let acc = grad_u.get_or_insert_with(|| zeros_like(&gu));
            axpy_map(acc, w, &gu)?;
            v_sq += gv.values().map(Tensor::norm_sq).sum::<f64>() / n as f64;
        }
        let u_sq = grad_u.map_or(0.0, |g| g.values().map(Tensor::norm_sq).sum());
        Ok(Some((u_sq, v_sq)))
    }

    /// Runs the remaining rounds of `state`, calling `observe` after each
    /// aggregation.
    pub fn run(
        &self,
        state: &mut TrainingState,
        mut observe: impl FnMut(&RoundReport, &TrainingState) -> Result<()>,
    ) -> Result<()> {
        self.schedule.validate()?;
        let n = self.objective.clients();
        if state.v.len() != n {
            return Err(Error::MissingClient {
                expected: n,
                got: state.v.len(),
            });
        }
        let mut workspaces = (0..n)
            .map(|c| self.objective.workspace(c, &state.u, &state.v[c]))
            .collect::<Result<Vec<_>>>()?;
        let weights: Option<Vec<f64>> = match self.aggregation {
            Aggregation::Uniform => None,
            Aggregation::DataWeighted => {
                Some((0..n).map(|c| self.objective.client_weight(c)).collect())
            }
        };
        while state.round < self.schedule.rounds {
            let norms = if self.instrument {
                self.gradient_norms(&mut workspaces, state)?
            } else {
                None
            };
            let outcomes = self.local_phase(&mut workspaces, state)?;
            let mut losses = Losses::default();
            let mut uploaded = BTreeSet::new();
            for o in &outcomes {
                losses.accumulate(&o.losses, 1.0 / n as f64);
                uploaded.extend(o.message.manifest().map(String::from));
            }
            let messages: Vec<ClientMessage> = outcomes.iter().map(|o| o.message.clone()).collect();
            let eta = self.schedule.eta_u * self.schedule.round_factor(state.round);
            state.u = aggregate(&state.u, &messages, eta, n, weights.as_deref())?;
            for (slot, o) in state.v.iter_mut().zip(outcomes) {
                *slot = o.v;
            }
            let report = RoundReport {
                round: state.round,
                losses,
                grad_norm_u_sq: norms.map(|x| x.0),
                grad_norm_v_sq_avg: norms.map(|x| x.1),
                uploaded_names: uploaded,
            };
            state.round += 1;
            observe(&report, state)?;
        }
        Ok(())
    }
}
