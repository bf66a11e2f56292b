//! The posterior-server protocol.
//!
//! A server owns the natural parameters `θ_posterior = θ₀ + Σ λ_j` and
//! absorbs delta messages `Δ_i = λ_i − λ_i^old` from workers strictly one at
//! a time, replying with the posterior current at absorption time. Workers
//! run the SNEP loop (kernel steps → inner update → periodic outer update)
//! and exchange with the server asynchronously: a send never waits for the
//! reply, and at most one exchange is outstanding per worker — if the sync
//! interval elapses while one is pending, the exchange is deferred.
//!
//! Two executors are provided. The deterministic scheduler advances workers
//! one iteration each in id order and delivers messages after a configurable
//! delay measured in iterations, so identical seeds and configs produce
//! bitwise identical traces. The threaded executor runs one thread per worker
//! plus one for the server, connected by queues.

use std::collections::VecDeque;
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::expfam::{suff_stats, ExpFamError, Family, NaturalParams, SuffStats};
use crate::models::{Dataset, LinearShardFactor, ModelKind, ModelSpec};
use crate::samplers::{
    exact_gaussian_step, mala_step, sgld_step, shift_state, SamplerError, SamplerState, SgldConfig,
};
use crate::snep::{
    cavity, damped_ep_update, inner_update, outer_update, DampedOutcome, InnerOutcome,
    LikelihoodSite, OuterOutcome, SnepConfig, SnepError, TiltedTarget,
};

const WIRE_MAGIC: &[u8; 4] = b"PSRV";
const WIRE_VERSION: u8 = 0x01;
const TYPE_DELTA: u8 = 0x01;
const TYPE_POSTERIOR: u8 = 0x02;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("message dimension mismatch from worker {worker}")]
    MessageDimMismatch { worker: u32 },
    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),
    #[error("worker thread panicked")]
    WorkerPanicked,
    #[error(transparent)]
    Snep(#[from] SnepError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    ExpFam(#[from] ExpFamError),
}

/// Distinct decoding failures of the wire codec.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("truncated payload: declared {declared}, available {available}")]
    TruncatedPayload { declared: u64, available: u64 },
    #[error("unknown message type {0}")]
    BadMessageType(u8),
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
}

/// Upstream message: a worker's likelihood-approximation delta.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaMessage {
    pub worker_id: u32,
    pub delta: NaturalParams,
    /// Worker-local iteration at send time.
    pub send_iteration: u64,
}

/// Downstream message: the server's posterior at absorption time.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMessage {
    pub theta_posterior: NaturalParams,
    pub server_sequence: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Delta(DeltaMessage),
    Posterior(PosteriorMessage),
}

fn family_code(f: Family) -> u8 {
    match f {
        Family::Diag => 0,
        Family::Full => 1,
    }
}

fn family_from_code(c: u8) -> Option<Family> {
    match c {
        0 => Some(Family::Diag),
        1 => Some(Family::Full),
        _ => None,
    }
}

fn encode_params(out: &mut Vec<u8>, theta: &NaturalParams) {
    out.push(family_code(theta.family()));
    out.extend_from_slice(&(theta.dim() as u32).to_le_bytes());
    for v in theta.to_flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn decode_params(bytes: &[u8]) -> Result<(NaturalParams, usize), CodecError> {
    if bytes.len() < 5 {
        return Err(CodecError::MalformedPayload("parameter header".into()));
    }
    let family = family_from_code(bytes[0])
        .ok_or_else(|| CodecError::MalformedPayload(format!("family code {}", bytes[0])))?;
    let dim = u32::from_le_bytes(bytes[1..5].try_into().unwrap()) as usize;
    let want = NaturalParams::flat_len(family, dim);
    let need = 5 + 8 * want;
    if bytes.len() < need {
        return Err(CodecError::MalformedPayload("parameter block".into()));
    }
    let flat: Vec<f64> = bytes[5..need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let theta = NaturalParams::from_flat(family, dim, &flat)
        .map_err(|e| CodecError::MalformedPayload(e.to_string()))?;
    Ok((theta, need))
}

/// Encode a message: `"PSRV"`, version 0x01, type (0x01 delta / 0x02
/// posterior), worker id or server sequence as 4-byte little-endian, payload
/// length as 8-byte little-endian, then the payload (parameter family, dim,
/// the canonical flat encoding as 64-bit little-endian floats, and for deltas
/// the send iteration).
pub fn encode_message(msg: &Message) -> Vec<u8> {
    let mut payload = Vec::new();
    let (ty, id) = match msg {
        Message::Delta(d) => {
            encode_params(&mut payload, &d.delta);
            payload.extend_from_slice(&d.send_iteration.to_le_bytes());
            (TYPE_DELTA, d.worker_id)
        }
        Message::Posterior(p) => {
            encode_params(&mut payload, &p.theta_posterior);
            (TYPE_POSTERIOR, p.server_sequence)
        }
    };
    let mut out = Vec::with_capacity(18 + payload.len());
    out.extend_from_slice(WIRE_MAGIC);
    out.push(WIRE_VERSION);
    out.push(ty);
    out.extend_from_slice(&id.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Decode exactly one frame; inverse of [`encode_message`] bit for bit.
pub fn decode_message(bytes: &[u8]) -> Result<Message, CodecError> {
    if bytes.len() < 4 || &bytes[..4] != WIRE_MAGIC {
        return Err(CodecError::BadMagic);
    }
    if bytes.len() < 6 {
        return Err(CodecError::TruncatedPayload {
            declared: 0,
            available: bytes.len() as u64,
        });
    }
    if bytes[4] != WIRE_VERSION {
        return Err(CodecError::BadVersion(bytes[4]));
    }
    let ty = bytes[5];
    if bytes.len() < 18 {
        return Err(CodecError::TruncatedPayload {
            declared: 0,
            available: bytes.len() as u64,
        });
    }
    let id = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    let declared = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
    let body = &bytes[18..];
    if (body.len() as u64) < declared {
        return Err(CodecError::TruncatedPayload {
            declared,
            available: body.len() as u64,
        });
    }
    if body.len() as u64 > declared {
        return Err(CodecError::TrailingBytes(body.len() - declared as usize));
    }
    match ty {
        TYPE_DELTA => {
            let (delta, used) = decode_params(body)?;
            if body.len() != used + 8 {
                return Err(CodecError::MalformedPayload("delta payload length".into()));
            }
            let send_iteration = u64::from_le_bytes(body[used..used + 8].try_into().unwrap());
            Ok(Message::Delta(DeltaMessage {
                worker_id: id,
                delta,
                send_iteration,
            }))
        }
        TYPE_POSTERIOR => {
            let (theta_posterior, used) = decode_params(body)?;
            if body.len() != used {
                return Err(CodecError::MalformedPayload(
                    "posterior payload length".into(),
                ));
            }
            Ok(Message::Posterior(PosteriorMessage {
                theta_posterior,
                server_sequence: id,
            }))
        }
        other => Err(CodecError::BadMessageType(other)),
    }
}

/// The master's state: the current posterior, per-worker absorbed factor
/// totals, an absorption log for replay checks, and the reply sequence.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub theta_posterior: NaturalParams,
    pub theta0: NaturalParams,
    /// Per-worker λ_i as known to the server: λ_i^(1) plus absorbed deltas.
    pub ledger: Vec<NaturalParams>,
    /// Absorption log in exact order, for bitwise replay.
    pub absorbed: Vec<DeltaMessage>,
    pub sequence: u32,
}

impl ServerState {
    /// `θ_posterior := θ₀ + Σ_i λ_i^(1)`, summed in worker order.
    pub fn new(
        theta0: NaturalParams,
        initial_lambdas: &[NaturalParams],
    ) -> Result<Self, RuntimeError> {
        let mut theta_posterior = theta0.clone();
        for lam in initial_lambdas {
            theta_posterior = theta_posterior.add(lam)?;
        }
        Ok(ServerState {
            theta_posterior,
            theta0,
            ledger: initial_lambdas.to_vec(),
            absorbed: Vec::new(),
            sequence: 0,
        })
    }

    /// Absorb one delta and reply with the posterior current at absorption.
    pub fn handle_delta(&mut self, msg: DeltaMessage) -> Result<PosteriorMessage, RuntimeError> {
        let w = msg.worker_id as usize;
        if w >= self.ledger.len() || msg.delta.dim() != self.theta_posterior.dim() {
            return Err(RuntimeError::MessageDimMismatch {
                worker: msg.worker_id,
            });
        }
        self.theta_posterior = self.theta_posterior.add(&msg.delta)?;
        self.ledger[w] = self.ledger[w].add(&msg.delta)?;
        self.absorbed.push(msg);
        self.sequence += 1;
        Ok(PosteriorMessage {
            theta_posterior: self.theta_posterior.clone(),
            server_sequence: self.sequence,
        })
    }

    /// Replay the absorption log from scratch: `θ₀ + Σλ_i^(1) + Σ deltas` in
    /// absorption order. Bitwise equal to `theta_posterior` by construction.
    pub fn replay(&self, initial_lambdas: &[NaturalParams]) -> Result<NaturalParams, RuntimeError> {
        let mut theta = self.theta0.clone();
        for lam in initial_lambdas {
            theta = theta.add(lam)?;
        }
        for msg in &self.absorbed {
            theta = theta.add(&msg.delta)?;
        }
        Ok(theta)
    }
}

/// Which MCMC kernel (or exact source) provides tilted moments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelKind {
    Sgld,
    Mala { step: f64 },
    /// i.i.d. draws from the closed-form tilted Gaussian (linear model).
    ExactGaussian,
    /// No sampling: exact tilted moments every iteration (linear model).
    ExactMoments,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Algorithm {
    Snep,
    /// Synchronous damped-EP baseline with the given damping α.
    Sms { damping: f64 },
}

/// A fully assembled experiment, ready to execute.
pub struct Experiment {
    pub model: Arc<ModelSpec>,
    pub data: Arc<Dataset>,
    pub n_workers: usize,
    pub algorithm: Algorithm,
    pub snep: SnepConfig,
    pub sgld: SgldConfig,
    pub kernel: KernelKind,
    pub max_worker_iters: u64,
    /// Metric hook cadence in master (absorption) events.
    pub eval_every: u64,
    pub seed: u64,
}

impl Experiment {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        self.snep
            .validate()
            .map_err(|e| RuntimeError::InvalidExperiment(e.to_string()))?;
        self.sgld
            .validate()
            .map_err(|e| RuntimeError::InvalidExperiment(e.to_string()))?;
        if self.n_workers == 0 {
            return Err(RuntimeError::InvalidExperiment(
                "n_workers must be >= 1".into(),
            ));
        }
        if self.data.n_workers() != self.n_workers {
            return Err(RuntimeError::InvalidExperiment(
                "dataset shards do not match n_workers".into(),
            ));
        }
        if matches!(
            self.kernel,
            KernelKind::ExactGaussian | KernelKind::ExactMoments
        ) && self.model.kind != ModelKind::LinearGaussian
        {
            return Err(RuntimeError::InvalidExperiment(
                "exact kernels require the linear-gaussian model".into(),
            ));
        }
        if let KernelKind::Mala { step } = self.kernel {
            if !(step > 0.0) {
                return Err(RuntimeError::InvalidExperiment(
                    "mala step must be > 0".into(),
                ));
            }
        }
        if let Algorithm::Sms { damping } = self.algorithm {
            if !(0.0..=1.0).contains(&damping) {
                return Err(RuntimeError::InvalidExperiment(
                    "sms damping must lie in [0,1]".into(),
                ));
            }
            if (self.snep.resolve_beta(self.n_workers) - 1.0).abs() > 1e-12 {
                return Err(RuntimeError::InvalidExperiment(
                    "sms requires beta = 1".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Scheduler choice for [`run_simulation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulerMode {
    /// Single logical thread, workers round-robin in id order, messages
    /// delivered `delay` iterations after being sent (each way).
    Deterministic { delay: u64 },
    /// One OS thread per worker plus one for the server.
    Threaded,
}

/// Trace event kinds mirrored into the harness trace file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Metric,
    Exchange,
    Skip,
    Outer,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Metric => "metric",
            EventKind::Exchange => "exchange",
            EventKind::Skip => "skip",
            EventKind::Outer => "outer",
        }
    }
}

/// One trace event. `worker` is −1 for the server. In deterministic mode
/// `time` is the virtual scheduler time (global iterations); in threaded mode
/// it is wall-clock seconds since the run started.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub time: f64,
    pub kind: EventKind,
    pub worker: i64,
    pub iter: u64,
    pub name: String,
    pub value: f64,
}

/// Skip counters per worker; every increment is mirrored as a trace event.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WorkerCounters {
    pub tilted_invalid: u64,
    pub posterior_invalid: u64,
    pub rejected: u64,
    pub clamped: u64,
    pub aux_skipped: u64,
    pub deferred: u64,
    pub shift_skipped: u64,
    pub discarded: u64,
}

/// Worker-owned state: the site, the sampler, the cavity, and the exchange
/// bookkeeping. `cavity` is always `last_received − λ_old` as stored values.
pub struct WorkerRuntime {
    pub site: LikelihoodSite,
    pub sampler: SamplerState,
    pub cavity: NaturalParams,
    pub last_received: NaturalParams,
    pub pending_exchange: bool,
    pub t: u64,
    pub counters: WorkerCounters,
    /// Precomputed shard factor for the exact kernels.
    shard_factor: Option<LinearShardFactor>,
}

/// What happened during one worker iteration, for tracing.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepReport {
    pub skipped: Option<SkipReason>,
    pub clamped: bool,
    pub outer_applied: bool,
    pub outer_skipped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    TiltedInvalid,
    PosteriorInvalid,
    Rejected,
    Discarded,
}

impl SkipReason {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipReason::TiltedInvalid => "tilted_invalid",
            SkipReason::PosteriorInvalid => "posterior_invalid",
            SkipReason::Rejected => "rejected",
            SkipReason::Discarded => "discarded",
        }
    }
}

/// Derive the reproducible per-entity random stream of an experiment.
pub fn derive_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Initialise server and workers per the protocol: near-flat sites, posterior
/// `θ₀ + Σλ_j^(1)`, cavities `θ_posterior − λ_i^(1)`, auxiliaries
/// `cavity + λ_i^(1)`, and sampler positions drawn from the auxiliaries.
pub fn init_experiment(
    exp: &Experiment,
) -> Result<(ServerState, Vec<WorkerRuntime>), RuntimeError> {
    exp.validate()?;
    let family = exp.model.family();
    let dim = exp.model.dim;
    let beta = exp.snep.resolve_beta(exp.n_workers);
    let lambda_init =
        LikelihoodSite::initial_lambda_with(family, dim, exp.snep.site_init_variance);
    let initial: Vec<NaturalParams> = (0..exp.n_workers).map(|_| lambda_init.clone()).collect();
    let server = ServerState::new(exp.model.prior.clone(), &initial)?;
    let mut workers = Vec::with_capacity(exp.n_workers);
    for w in 0..exp.n_workers {
        let (cav, ok) = cavity(&server.theta_posterior, &lambda_init)?;
        if !ok {
            return Err(RuntimeError::InvalidExperiment(
                "initial cavity outside the natural domain".into(),
            ));
        }
        let aux = cav.add(&lambda_init)?;
        let site = LikelihoodSite::new(w, lambda_init.clone(), aux.clone(), beta)?;
        let mut rng = derive_stream(exp.seed, 1 + w as u64);
        let x0 = aux.sample_exact(&mut rng)?;
        let shard_factor = if exp.model.kind == ModelKind::LinearGaussian {
            Some(
                LinearShardFactor::compute(&exp.model, &exp.data, exp.data.shard_indices(w))
                    .map_err(SnepError::Model)?,
            )
        } else {
            None
        };
        workers.push(WorkerRuntime {
            site,
            sampler: SamplerState::new(x0, rng),
            cavity: cav,
            last_received: server.theta_posterior.clone(),
            pending_exchange: false,
            t: 0,
            counters: WorkerCounters::default(),
            shard_factor,
        });
    }
    Ok((server, workers))
}

/// Average sufficient statistics over `m` kernel steps against `target`.
fn estimate_stats(
    rt: &mut WorkerRuntime,
    target: &TiltedTarget,
    kernel: KernelKind,
    sgld: &SgldConfig,
    m: usize,
) -> Result<crate::expfam::MeanParams, RuntimeError> {
    let family = target.base.family();
    let mut stats: Vec<SuffStats> = Vec::with_capacity(m);
    for _ in 0..m {
        match kernel {
            KernelKind::Sgld => {
                let _ = sgld_step(&mut rt.sampler, target, sgld)?;
            }
            KernelKind::Mala { step } => {
                let _ = mala_step(&mut rt.sampler, target, step)?;
            }
            KernelKind::ExactGaussian => exact_gaussian_step(&mut rt.sampler, target)?,
            KernelKind::ExactMoments => unreachable!("handled by caller"),
        }
        stats.push(suff_stats(&rt.sampler.x, family));
    }
    Ok(SuffStats::average(&stats))
}

/// One SNEP worker iteration: M kernel steps, the inner update against
/// `cavity + λ`, and every `n_outer` iterations the outer update.
pub fn worker_step(rt: &mut WorkerRuntime, exp: &Experiment) -> Result<StepReport, RuntimeError> {
    let mut report = StepReport::default();
    rt.t += 1;
    let t = rt.t;

    let stat = match rt.site.tilted_base() {
        Ok(base) if base.in_natural_domain() => {
            if exp.kernel == KernelKind::ExactMoments {
                let factor = rt.shard_factor.as_ref().expect("validated linear model");
                factor.tilted_moments(&base, 1.0 / rt.site.beta()).ok()
            } else {
                let target = TiltedTarget::from_parts(
                    base,
                    1.0 / rt.site.beta(),
                    exp.model.clone(),
                    exp.data.clone(),
                    rt.site.worker_id,
                )?;
                Some(estimate_stats(
                    rt,
                    &target,
                    exp.kernel,
                    &exp.sgld,
                    exp.snep.samples_per_iter,
                )?)
            }
        }
        _ => None,
    };
    let Some(stat) = stat else {
        rt.counters.tilted_invalid += 1;
        report.skipped = Some(SkipReason::TiltedInvalid);
        return Ok(report);
    };

    // Line 9 reconstructs the posterior as θ_{-i} + λ_i.
    let theta_post_local = rt.cavity.add(rt.site.lambda())?;
    if !theta_post_local.in_natural_domain() {
        rt.counters.posterior_invalid += 1;
        report.skipped = Some(SkipReason::PosteriorInvalid);
        return Ok(report);
    }
    let eps = exp.snep.step_size(t);
    let (site, outcome) = inner_update(
        &rt.site,
        &stat,
        &theta_post_local,
        eps,
        exp.snep.min_variance,
    )?;
    rt.site = site;
    match outcome {
        InnerOutcome::Applied { clamped } => {
            if clamped {
                rt.counters.clamped += 1;
                report.clamped = true;
            }
        }
        InnerOutcome::Rejected => {
            rt.counters.rejected += 1;
            report.skipped = Some(SkipReason::Rejected);
        }
    }

    if t % exp.snep.n_outer == 0 {
        let (site, out) = outer_update(&rt.site, &rt.cavity)?;
        rt.site = site;
        match out {
            OuterOutcome::Applied => report.outer_applied = true,
            OuterOutcome::SkippedInvalid => {
                rt.counters.aux_skipped += 1;
                report.outer_skipped = true;
            }
        }
    }
    Ok(report)
}

/// Build the delta message for a sync point, or defer if one is pending.
/// On `Some`, `λ_old ← λ` has been recorded and the exchange is pending.
pub fn maybe_send(rt: &mut WorkerRuntime) -> Result<Option<DeltaMessage>, RuntimeError> {
    if rt.pending_exchange {
        rt.counters.deferred += 1;
        return Ok(None);
    }
    let delta = rt.site.lambda().sub(rt.site.lambda_old())?;
    rt.site.record_exchange();
    rt.pending_exchange = true;
    Ok(Some(DeltaMessage {
        worker_id: rt.site.worker_id as u32,
        delta,
        send_iteration: rt.t,
    }))
}

/// Apply a received posterior: update the cavity to `θ_posterior − λ_old` and
/// shift the sampler position from the old to the new combined Gaussian.
pub fn receive_posterior(
    rt: &mut WorkerRuntime,
    msg: PosteriorMessage,
) -> Result<(), RuntimeError> {
    let old_combined = rt.cavity.add(rt.site.lambda())?;
    rt.last_received = msg.theta_posterior;
    let (cav, _ok) = cavity(&rt.last_received, rt.site.lambda_old())?;
    rt.cavity = cav;
    let new_combined = rt.cavity.add(rt.site.lambda())?;
    // A combined parameter can be too ill-conditioned to factor even when
    // the precisions pass the domain check; any failed shift is skipped.
    let shifted = if old_combined.in_natural_domain() && new_combined.in_natural_domain() {
        shift_state(&rt.sampler.x, &old_combined, &new_combined).ok()
    } else {
        None
    };
    match shifted {
        Some(x) => rt.sampler.x = x,
        None => rt.counters.shift_skipped += 1,
    }
    rt.pending_exchange = false;
    Ok(())
}

/// One synchronous SMS round: `n_samples` kernel steps against the plain EP
/// tilted distribution (cavity + full likelihood), a damped EP update from
/// the sample moments, then a blocking exchange through `absorb`.
pub fn sms_worker_round(
    rt: &mut WorkerRuntime,
    exp: &Experiment,
    n_samples: usize,
    damping: f64,
    mut absorb: impl FnMut(DeltaMessage) -> Result<PosteriorMessage, RuntimeError>,
) -> Result<StepReport, RuntimeError> {
    let mut report = StepReport::default();
    rt.t += 1;

    if rt.cavity.in_natural_domain() {
        let estimate = if exp.kernel == KernelKind::ExactMoments {
            let factor = rt.shard_factor.as_ref().expect("validated linear model");
            factor.tilted_moments(&rt.cavity, 1.0).ok()
        } else {
            let target = TiltedTarget::from_parts(
                rt.cavity.clone(),
                1.0,
                exp.model.clone(),
                exp.data.clone(),
                rt.site.worker_id,
            )?;
            Some(estimate_stats(rt, &target, exp.kernel, &exp.sgld, n_samples)?)
        };
        match estimate {
            Some(tilted_mean) => {
                match damped_ep_update(&rt.site, &tilted_mean, &rt.cavity, damping) {
                    Ok((site, DampedOutcome::Applied)) => rt.site = site,
                    Ok((_, DampedOutcome::Discarded))
                    | Err(SnepError::ExpFam(ExpFamError::InvalidMeanDomain)) => {
                        rt.counters.discarded += 1;
                        report.skipped = Some(SkipReason::Discarded);
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            None => {
                rt.counters.tilted_invalid += 1;
                report.skipped = Some(SkipReason::TiltedInvalid);
            }
        }
    } else {
        rt.counters.tilted_invalid += 1;
        report.skipped = Some(SkipReason::TiltedInvalid);
    }

    // Blocking exchange: send Δ and wait for the reply.
    let delta = rt.site.lambda().sub(rt.site.lambda_old())?;
    rt.site.record_exchange();
    let reply = absorb(DeltaMessage {
        worker_id: rt.site.worker_id as u32,
        delta,
        send_iteration: rt.t,
    })?;
    rt.last_received = reply.theta_posterior;
    let (cav, _) = cavity(&rt.last_received, rt.site.lambda_old())?;
    rt.cavity = cav;
    Ok(report)
}

/// Completed simulation: final server and worker states plus the trace.
pub struct SimOutcome {
    pub server: ServerState,
    pub workers: Vec<WorkerRuntime>,
    pub events: Vec<TraceEvent>,
}

/// Named metric values computed from the current posterior.
pub type MetricHook<'a> = dyn Fn(&NaturalParams) -> Vec<(String, f64)> + Sync + 'a;

struct EventLog<'a> {
    events: Vec<TraceEvent>,
    full: bool,
    eval_every: u64,
    hook: Option<&'a MetricHook<'a>>,
}

impl<'a> EventLog<'a> {
    fn push(&mut self, ev: TraceEvent) {
        if self.full || ev.kind == EventKind::Metric {
            self.events.push(ev);
        }
    }

    fn step_events(
        &mut self,
        time: f64,
        worker: i64,
        iter: u64,
        report: &StepReport,
        c: &WorkerCounters,
    ) {
        if let Some(reason) = report.skipped {
            let count = match reason {
                SkipReason::TiltedInvalid => c.tilted_invalid,
                SkipReason::PosteriorInvalid => c.posterior_invalid,
                SkipReason::Rejected => c.rejected,
                SkipReason::Discarded => c.discarded,
            };
            self.push(TraceEvent {
                time,
                kind: EventKind::Skip,
                worker,
                iter,
                name: reason.as_str().into(),
                value: count as f64,
            });
        }
        if report.clamped {
            self.push(TraceEvent {
                time,
                kind: EventKind::Skip,
                worker,
                iter,
                name: "clamped".into(),
                value: c.clamped as f64,
            });
        }
        if report.outer_applied || report.outer_skipped {
            self.push(TraceEvent {
                time,
                kind: EventKind::Outer,
                worker,
                iter,
                name: if report.outer_applied {
                    "applied"
                } else {
                    "aux_invalid"
                }
                .into(),
                value: c.aux_skipped as f64,
            });
        }
    }

    fn absorb_event(&mut self, time: f64, seq: u32, worker: u32, post: &NaturalParams) {
        self.push(TraceEvent {
            time,
            kind: EventKind::Exchange,
            worker: -1,
            iter: seq as u64,
            name: format!("absorb_w{worker}"),
            value: seq as f64,
        });
        if let Some(hook) = self.hook {
            if self.eval_every > 0 && seq as u64 % self.eval_every == 0 {
                for (name, value) in hook(post) {
                    self.events.push(TraceEvent {
                        time,
                        kind: EventKind::Metric,
                        worker: -1,
                        iter: seq as u64,
                        name,
                        value,
                    });
                }
            }
        }
    }
}

/// Execute an experiment under the chosen scheduler.
///
/// `hook`, when present, is evaluated on the server's posterior every
/// `eval_every` absorption events and its values become metric trace events.
/// `full_trace` controls whether exchange/skip/outer events are recorded.
pub fn run_simulation(
    exp: &Experiment,
    mode: SchedulerMode,
    hook: Option<&MetricHook<'_>>,
    full_trace: bool,
) -> Result<SimOutcome, RuntimeError> {
    match mode {
        SchedulerMode::Deterministic { delay } => run_deterministic(exp, delay, hook, full_trace),
        SchedulerMode::Threaded => run_threaded(exp, hook, full_trace),
    }
}

fn run_deterministic(
    exp: &Experiment,
    delay: u64,
    hook: Option<&MetricHook<'_>>,
    full_trace: bool,
) -> Result<SimOutcome, RuntimeError> {
    let (mut server, mut workers) = init_experiment(exp)?;
    let mut log = EventLog {
        events: Vec::new(),
        full: full_trace,
        eval_every: exp.eval_every,
        hook,
    };
    let mut to_server: VecDeque<(u64, DeltaMessage)> = VecDeque::new();
    let mut to_worker: Vec<VecDeque<(u64, PosteriorMessage)>> =
        (0..exp.n_workers).map(|_| VecDeque::new()).collect();
    let sms = match exp.algorithm {
        Algorithm::Sms { damping } => Some(damping),
        Algorithm::Snep => None,
    };

    for step in 1..=exp.max_worker_iters {
        let time = step as f64;
        // Deliveries to workers.
        for (w, queue) in to_worker.iter_mut().enumerate() {
            while queue.front().is_some_and(|(at, _)| *at <= step) {
                let (_, msg) = queue.pop_front().unwrap();
                let seq = msg.server_sequence;
                receive_posterior(&mut workers[w], msg)?;
                log.push(TraceEvent {
                    time,
                    kind: EventKind::Exchange,
                    worker: w as i64,
                    iter: workers[w].t,
                    name: "receive".into(),
                    value: seq as f64,
                });
            }
        }
        // Worker iterations in id order.
        for w in 0..exp.n_workers {
            if let Some(damping) = sms {
                // SMS rounds are blocking: absorb and reply inline.
                let n_samples = exp.snep.samples_per_iter;
                let report = {
                    let server = &mut server;
                    let log = &mut log;
                    sms_worker_round(&mut workers[w], exp, n_samples, damping, |msg| {
                        let worker = msg.worker_id;
                        let reply = server.handle_delta(msg)?;
                        log.absorb_event(
                            time,
                            reply.server_sequence,
                            worker,
                            &server.theta_posterior,
                        );
                        Ok(reply)
                    })?
                };
                let (t, counters) = (workers[w].t, workers[w].counters.clone());
                log.step_events(time, w as i64, t, &report, &counters);
            } else {
                let report = worker_step(&mut workers[w], exp)?;
                let (t, counters) = (workers[w].t, workers[w].counters.clone());
                log.step_events(time, w as i64, t, &report, &counters);
                if workers[w].t % exp.snep.n_sync == 0 {
                    match maybe_send(&mut workers[w])? {
                        Some(msg) => {
                            log.push(TraceEvent {
                                time,
                                kind: EventKind::Exchange,
                                worker: w as i64,
                                iter: workers[w].t,
                                name: "send".into(),
                                value: msg.send_iteration as f64,
                            });
                            to_server.push_back((step + delay, msg));
                        }
                        None => log.push(TraceEvent {
                            time,
                            kind: EventKind::Skip,
                            worker: w as i64,
                            iter: workers[w].t,
                            name: "deferred".into(),
                            value: workers[w].counters.deferred as f64,
                        }),
                    }
                }
            }
        }
        // Server absorbs everything due by now, in arrival order.
        while to_server.front().is_some_and(|(at, _)| *at <= step) {
            let (_, msg) = to_server.pop_front().unwrap();
            let worker = msg.worker_id;
            let reply = server.handle_delta(msg)?;
            log.absorb_event(time, reply.server_sequence, worker, &server.theta_posterior);
            to_worker[worker as usize].push_back((step + delay, reply));
        }
    }

    // Drain in-flight messages so the run ends at quiescence.
    let mut step = exp.max_worker_iters;
    while !to_server.is_empty() || to_worker.iter().any(|q| !q.is_empty()) {
        step += 1;
        let time = step as f64;
        for (w, queue) in to_worker.iter_mut().enumerate() {
            while queue.front().is_some_and(|(at, _)| *at <= step) {
                let (_, msg) = queue.pop_front().unwrap();
                let seq = msg.server_sequence;
                receive_posterior(&mut workers[w], msg)?;
                log.push(TraceEvent {
                    time,
                    kind: EventKind::Exchange,
                    worker: w as i64,
                    iter: workers[w].t,
                    name: "receive".into(),
                    value: seq as f64,
                });
            }
        }
        while to_server.front().is_some_and(|(at, _)| *at <= step) {
            let (_, msg) = to_server.pop_front().unwrap();
            let worker = msg.worker_id;
            let reply = server.handle_delta(msg)?;
            log.absorb_event(time, reply.server_sequence, worker, &server.theta_posterior);
            to_worker[worker as usize].push_back((step + delay, reply));
        }
    }

    Ok(SimOutcome {
        server,
        workers,
        events: log.events,
    })
}

enum ToServer {
    Delta(DeltaMessage),
    Done,
}

fn run_threaded(
    exp: &Experiment,
    hook: Option<&MetricHook<'_>>,
    full_trace: bool,
) -> Result<SimOutcome, RuntimeError> {
    let (server0, workers0) = init_experiment(exp)?;
    let start = Instant::now();
    let (to_server_tx, to_server_rx) = mpsc::channel::<ToServer>();
    let mut reply_txs = Vec::new();
    let mut reply_rxs = Vec::new();
    for _ in 0..exp.n_workers {
        let (tx, rx) = mpsc::channel::<PosteriorMessage>();
        reply_txs.push(tx);
        reply_rxs.push(rx);
    }
    let (event_tx, event_rx) = mpsc::channel::<TraceEvent>();
    let sms = match exp.algorithm {
        Algorithm::Sms { damping } => Some(damping),
        Algorithm::Snep => None,
    };

    std::thread::scope(|scope| -> Result<SimOutcome, RuntimeError> {
        // Server: absorb deltas serially until every worker is done.
        let server_handle = {
            let mut server = server0;
            let reply_txs = reply_txs;
            let event_tx = event_tx.clone();
            scope.spawn(move || -> Result<ServerState, RuntimeError> {
                let mut remaining = exp.n_workers;
                while remaining > 0 {
                    match to_server_rx.recv() {
                        Ok(ToServer::Delta(msg)) => {
                            let worker = msg.worker_id;
                            let reply = server.handle_delta(msg)?;
                            let seq = reply.server_sequence;
                            // The worker may already have exited; ignore.
                            let _ = reply_txs[worker as usize].send(reply);
                            if full_trace {
                                let _ = event_tx.send(TraceEvent {
                                    time: start.elapsed().as_secs_f64(),
                                    kind: EventKind::Exchange,
                                    worker: -1,
                                    iter: seq as u64,
                                    name: format!("absorb_w{worker}"),
                                    value: seq as f64,
                                });
                            }
                            if let Some(hook) = hook {
                                if exp.eval_every > 0 && seq as u64 % exp.eval_every == 0 {
                                    for (name, value) in hook(&server.theta_posterior) {
                                        let _ = event_tx.send(TraceEvent {
                                            time: start.elapsed().as_secs_f64(),
                                            kind: EventKind::Metric,
                                            worker: -1,
                                            iter: seq as u64,
                                            name,
                                            value,
                                        });
                                    }
                                }
                            }
                        }
                        Ok(ToServer::Done) => remaining -= 1,
                        Err(_) => break,
                    }
                }
                Ok(server)
            })
        };

        let mut worker_handles = Vec::new();
        for (w, (mut rt, reply_rx)) in workers0.into_iter().zip(reply_rxs).enumerate() {
            let to_server = to_server_tx.clone();
            let event_tx = event_tx.clone();
            worker_handles.push(scope.spawn(
                move || -> Result<WorkerRuntime, RuntimeError> {
                    for _ in 0..exp.max_worker_iters {
                        // Non-blocking receive at iteration start; a worker
                        // never waits here.
                        while let Ok(msg) = reply_rx.try_recv() {
                            receive_posterior(&mut rt, msg)?;
                        }
                        if let Some(damping) = sms {
                            let n_samples = exp.snep.samples_per_iter;
                            let to_server = &to_server;
                            let reply_rx = &reply_rx;
                            sms_worker_round(&mut rt, exp, n_samples, damping, |msg| {
                                to_server
                                    .send(ToServer::Delta(msg))
                                    .map_err(|_| RuntimeError::WorkerPanicked)?;
                                reply_rx.recv().map_err(|_| RuntimeError::WorkerPanicked)
                            })?;
                        } else {
                            let report = worker_step(&mut rt, exp)?;
                            if full_trace {
                                if let Some(reason) = report.skipped {
                                    let _ = event_tx.send(TraceEvent {
                                        time: start.elapsed().as_secs_f64(),
                                        kind: EventKind::Skip,
                                        worker: w as i64,
                                        iter: rt.t,
                                        name: reason.as_str().into(),
                                        value: 1.0,
                                    });
                                }
                            }
                            if rt.t % exp.snep.n_sync == 0 {
                                if let Some(msg) = maybe_send(&mut rt)? {
                                    to_server
                                        .send(ToServer::Delta(msg))
                                        .map_err(|_| RuntimeError::WorkerPanicked)?;
                                }
                            }
                        }
                    }
                    // Collect a late reply if one is still in flight so the
                    // cavity identity holds at quiescence.
                    if rt.pending_exchange {
                        if let Ok(msg) = reply_rx.recv() {
                            receive_posterior(&mut rt, msg)?;
                        }
                    }
                    to_server
                        .send(ToServer::Done)
                        .map_err(|_| RuntimeError::WorkerPanicked)?;
                    Ok(rt)
                },
            ));
        }
        drop(to_server_tx);
        drop(event_tx);

        let mut workers = Vec::with_capacity(exp.n_workers);
        for h in worker_handles {
            workers.push(h.join().map_err(|_| RuntimeError::WorkerPanicked)??);
        }
        let server = server_handle
            .join()
            .map_err(|_| RuntimeError::WorkerPanicked)??;
        let events: Vec<TraceEvent> = event_rx.into_iter().collect();
        Ok(SimOutcome {
            server,
            workers,
            events,
        })
    })
}

/// The serial reference loop: the same algorithm on one site without any
/// message machinery. With one worker and zero delay the deterministic
/// scheduler must reproduce this bitwise.
pub fn run_serial(exp: &Experiment) -> Result<SimOutcome, RuntimeError> {
    if exp.n_workers != 1 {
        return Err(RuntimeError::InvalidExperiment(
            "the serial loop is defined for one worker".into(),
        ));
    }
    let (mut server, mut workers) = init_experiment(exp)?;
    let mut log = EventLog {
        events: Vec::new(),
        full: true,
        eval_every: exp.eval_every,
        hook: None,
    };
    let rt = &mut workers[0];
    for step in 1..=exp.max_worker_iters {
        let time = step as f64;
        let report = worker_step(rt, exp)?;
        let (t, counters) = (rt.t, rt.counters.clone());
        log.step_events(time, 0, t, &report, &counters);
        if rt.t % exp.snep.n_sync == 0 {
            if let Some(msg) = maybe_send(rt)? {
                let worker = msg.worker_id;
                let reply = server.handle_delta(msg)?;
                log.absorb_event(time, reply.server_sequence, worker, &server.theta_posterior);
                receive_posterior(rt, reply)?;
            }
        }
    }
    Ok(SimOutcome {
        server,
        workers,
        events: log.events,
    })
}
