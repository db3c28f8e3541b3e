//! End-to-end driver: handshake, PSI over the worker pairs, alignment,
//! sharding and bulk-synchronous training of the split model.
//!
//! Each party runs one parameter server and `n` workers. Worker `i` of the
//! active party talks only to worker `i` of the passive party. Per training
//! step the pair exchanges, in order:
//!
//! | HE on                         | HE off              |
//! |-------------------------------|---------------------|
//! | passive → `ENC_ACT`           | passive → `MASKED_PT` (bottom output) |
//! | active → `MASKED_CT` (forward)| |
//! | passive → `MASKED_PT`         | |
//! | active → `MASKED_CT` (weight gradient) | |
//! | passive → `MASKED_PT`         | |
//! | active → `GRAD_PASSIVE`       | active → `GRAD_PASSIVE` |

use std::io::Write;
use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::config::{Aggregation, ConfigError, Handshake, HandshakeAck, HeMode, RunConfig};
use crate::data::{align_to_intersection, feature_dim, ids_of, sequential_partition, DataError, Record};
use crate::filters::{BloomFilter, GarbledBloomFilter};
use crate::nn::{
    bce_loss, centralized_reference_step, sgd_step, ActiveGrads, ActiveModel, JointBatch, LayerGrad, ModelConfig,
    NnError, PassiveModel, SplitModel, Tensor2,
};
use crate::paillier::{keygen, FixedPointCodec, PaillierError, PrivateKey, PublicKey};
use crate::ps::{self, LocalPsClient, ParameterServer, PsClient, PsError, Pulled, TcpPsClient};
use crate::psi::{hash_partition, IdSet, PsiClient, PsiConfig, PsiError, PsiParamsMsg, PsiServer};
use crate::secure::{
    self, encrypt_activation, homomorphic_linear, masked_decrypt, EncActMsg, MaskState, MaskedCtMsg, PlainGridMsg,
    Producer, SecureError,
};
use crate::transport::{self, in_proc_pair, msg, Channel, Frame, TransportError};
use crate::wire::{self, Reader};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("active records need labels; row {0} has none")]
    MissingLabel(usize),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Psi(#[from] PsiError),
    #[error(transparent)]
    Secure(#[from] SecureError),
    #[error(transparent)]
    Ps(#[from] PsError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Paillier(#[from] PaillierError),
}

impl RunError {
    /// 2 for configuration problems, 4 for data problems, 3 for everything
    /// that goes wrong between parties.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Data(_) | RunError::MissingLabel(_) | RunError::Nn(_) => 4,
            _ => 3,
        }
    }
}

fn protocol(msg: impl Into<String>) -> RunError {
    RunError::Protocol(msg.into())
}

// ---------------------------------------------------------------------------
// PSI over a channel

/// Client half of one bucket's PSI. Sends the intersection to the server
/// afterwards so both parties can align their rows.
pub fn psi_client_session<C: Channel + ?Sized>(ch: &mut C, set: &IdSet, cfg: PsiConfig) -> Result<IdSet, RunError> {
    let mut client = PsiClient::new(set, cfg);
    ch.send(Frame::new(msg::PSI_PARAMS, client.propose().to_bytes()))?;
    let agreed = PsiParamsMsg::from_bytes(&ch.expect(msg::PSI_PARAMS)?).map_err(PsiError::from)?;
    let bf = client.build_filter(&agreed)?.to_bytes();
    ch.send(Frame::new(msg::PSI_CLIENT_BF, bf))?;
    let gbf = GarbledBloomFilter::from_bytes(&ch.expect(msg::PSI_INTERSECTION_GBF)?).map_err(PsiError::from)?;
    client.receive(gbf)?;
    let result = client.finish()?;
    let mut count = Vec::new();
    wire::put_u64(&mut count, result.len() as u64);
    ch.send(Frame::new(msg::PSI_DONE, count))?;
    ch.send(Frame::new(msg::PSI_RESULT, result.to_bytes()))?;
    Ok(result)
}

pub fn psi_server_session<C: Channel + ?Sized>(ch: &mut C, set: &IdSet, cfg: PsiConfig) -> Result<IdSet, RunError> {
    let mut server = PsiServer::new(set, cfg);
    let proposal = PsiParamsMsg::from_bytes(&ch.expect(msg::PSI_PARAMS)?).map_err(PsiError::from)?;
    let agreed = server.accept(&proposal)?;
    ch.send(Frame::new(msg::PSI_PARAMS, agreed.to_bytes()))?;
    let bf = BloomFilter::from_bytes(&ch.expect(msg::PSI_CLIENT_BF)?).map_err(PsiError::from)?;
    let gbf = server.respond(&bf)?;
    ch.send(Frame::new(msg::PSI_INTERSECTION_GBF, gbf.to_bytes()))?;
    let payload = ch.expect(msg::PSI_DONE)?;
    let mut r = Reader::new(&payload);
    let count = r.u64().map_err(PsiError::from)?;
    server.done(count)?;
    let result = IdSet::from_bytes(&ch.expect(msg::PSI_RESULT)?).map_err(PsiError::from)?;
    if result.len() as u64 != count || !result.is_subset(set) {
        return Err(protocol("PSI result does not match the announced count or the local set"));
    }
    Ok(result)
}

fn psi_config(cfg: &RunConfig) -> PsiConfig {
    PsiConfig {
        partition_seed: cfg.seeds.psi,
        ..PsiConfig::default()
    }
}

/// Runs every bucket's PSI on its own thread over the matching channel and
/// returns the union.
fn distributed_psi_over<C: Channel>(
    channels: &mut [C],
    ids: &IdSet,
    cfg: &RunConfig,
    client: bool,
) -> Result<IdSet, RunError> {
    let base = psi_config(cfg);
    let buckets = hash_partition(ids, channels.len(), base.partition_seed);
    let results: Vec<Result<IdSet, RunError>> = std::thread::scope(|s| {
        let handles: Vec<_> = channels
            .iter_mut()
            .zip(&buckets)
            .enumerate()
            .map(|(i, (ch, bucket))| {
                let bcfg = base.for_bucket(i);
                s.spawn(move || {
                    if client {
                        psi_client_session(ch, bucket, bcfg)
                    } else {
                        psi_server_session(ch, bucket, bcfg)
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("PSI thread panicked")).collect()
    });
    let mut out = IdSet::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Handshake

fn active_handshake<C: Channel + ?Sized>(
    ch: &mut C,
    cfg: &RunConfig,
    active_in: usize,
) -> Result<(usize, Option<PublicKey>), RunError> {
    let hs = Handshake {
        active_in,
        params: cfg.negotiated(),
    };
    ch.send(Frame::new(msg::HANDSHAKE, hs.to_bytes()))?;
    match HandshakeAck::from_bytes(&ch.expect(msg::HANDSHAKE_ACK)?).map_err(TransportError::from)? {
        HandshakeAck::Accepted {
            passive_in,
            public_key,
        } => {
            if (cfg.he == HeMode::On) != public_key.is_some() {
                return Err(protocol("passive party's key does not match the HE setting"));
            }
            if let Some(pk) = &public_key {
                if pk.bits() != cfg.key_bits {
                    return Err(protocol(format!("passive key has {} bits, expected {}", pk.bits(), cfg.key_bits)));
                }
            }
            Ok((passive_in, public_key))
        }
        HandshakeAck::Rejected(reason) => Err(protocol(format!("passive party rejected the handshake: {reason}"))),
    }
}

fn passive_handshake<C: Channel + ?Sized>(
    ch: &mut C,
    cfg: &RunConfig,
    passive_in: usize,
    pk: Option<&PublicKey>,
) -> Result<usize, RunError> {
    let hs = Handshake::from_bytes(&ch.expect(msg::HANDSHAKE)?).map_err(TransportError::from)?;
    if let Some(reason) = hs.mismatch(&cfg.negotiated()) {
        ch.send(Frame::new(msg::HANDSHAKE_ACK, HandshakeAck::Rejected(reason.clone()).to_bytes()))?;
        return Err(protocol(format!("handshake rejected: {reason}")));
    }
    let ack = HandshakeAck::Accepted {
        passive_in,
        public_key: pk.cloned(),
    };
    ch.send(Frame::new(msg::HANDSHAKE_ACK, ack.to_bytes()))?;
    Ok(hs.active_in)
}

// ---------------------------------------------------------------------------
// Metrics

/// Timings and loss of one worker step. Times are wall-clock milliseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub epoch: usize,
    pub step: u64,
    pub worker: usize,
    /// NaN when the worker's shard had no rows left for this step.
    pub loss: f64,
    pub forward_bottom_ms: f64,
    pub he_exchange_ms: f64,
    pub top_ms: f64,
    pub backward_ms: f64,
    pub ps_sync_ms: f64,
    pub rows_processed: usize,
}

pub const METRICS_HEADER: &str =
    "epoch,step,worker,loss,forward_bottom_ms,he_exchange_ms,top_ms,backward_ms,ps_sync_ms,rows_processed";

pub fn write_metrics_csv<W: Write>(mut w: W, metrics: &[StepMetrics]) -> std::io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for m in metrics {
        writeln!(
            w,
            "{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{}",
            m.epoch,
            m.step,
            m.worker,
            m.loss,
            m.forward_bottom_ms,
            m.he_exchange_ms,
            m.top_ms,
            m.backward_ms,
            m.ps_sync_ms,
            m.rows_processed
        )?;
    }
    Ok(())
}

/// Mean loss per step across workers, skipping idle workers.
pub fn round_losses(metrics: &[StepMetrics]) -> Vec<f64> {
    let mut by_step: std::collections::BTreeMap<u64, Vec<(usize, f64)>> = Default::default();
    for m in metrics {
        if m.loss.is_finite() {
            by_step.entry(m.step).or_default().push((m.worker, m.loss));
        }
    }
    by_step
        .into_values()
        .map(|mut v| {
            v.sort_by_key(|(w, _)| *w);
            let singles: Vec<[f64; 1]> = v.iter().map(|(_, l)| [*l]).collect();
            let refs: Vec<&[f64]> = singles.iter().map(|s| s.as_slice()).collect();
            ps::aggregate(&refs).expect("equal lengths")[0]
        })
        .collect()
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

// ---------------------------------------------------------------------------
// Worker schedule

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub epochs: usize,
    pub rounds_per_epoch: usize,
    pub batch: usize,
    pub aggregation: Aggregation,
}

impl Schedule {
    /// Every worker runs `⌈largest shard / batch⌉` steps per epoch; a worker
    /// whose shard is exhausted idles through the remaining steps.
    pub fn new(cfg: &RunConfig, largest_shard: usize) -> Self {
        Self {
            epochs: cfg.model.epochs,
            rounds_per_epoch: largest_shard.div_ceil(cfg.model.batch),
            batch: cfg.model.batch,
            aggregation: cfg.aggregation,
        }
    }

    pub fn rows<'a>(&self, shard: &'a [Record], t: usize) -> &'a [Record] {
        let lo = (t * self.batch).min(shard.len());
        let hi = ((t + 1) * self.batch).min(shard.len());
        &shard[lo..hi]
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.rounds_per_epoch) as u64
    }
}

fn features(rows: &[Record]) -> Result<Tensor2, NnError> {
    let dim = rows.first().map_or(0, |r| r.features.len());
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        if r.features.len() != dim {
            return Err(NnError::Shape(format!("row {:?} has {} features, expected {dim}", String::from_utf8_lossy(&r.id), r.features.len())));
        }
        data.extend_from_slice(&r.features);
    }
    Tensor2::from_vec(rows.len(), dim, data)
}

fn labels(rows: &[Record]) -> Result<Vec<f64>, RunError> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| r.label.map(f64::from).ok_or(RunError::MissingLabel(i)))
        .collect()
}

fn worker_seed(base: u64, party: u64, worker: usize) -> u64 {
    base ^ party.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (worker as u64 + 1).wrapping_mul(0xd6e8_feb8_6659_fd93)
}

// ---------------------------------------------------------------------------
// Active worker

struct HeContext {
    pk: PublicKey,
    codec: FixedPointCodec,
}

struct ActiveCtx<'a> {
    template: &'a ActiveModel,
    schedule: Schedule,
    lr: f64,
    he: Option<HeContext>,
    stop_loss_below: Option<f64>,
    mask_seed: u64,
}

/// One SGD step of the active half of the split model.
fn active_step<C: Channel + ?Sized>(
    model: &mut ActiveModel,
    rows: &[Record],
    ch: &mut C,
    step: u64,
    ctx: &ActiveCtx<'_>,
    rng: &mut ChaCha20Rng,
    m: &mut StepMetrics,
) -> Result<f64, RunError> {
    let t = Instant::now();
    let x_a = features(rows)?;
    let y = labels(rows)?;
    let (ha, cache_a) = model.bottom.forward(&x_a)?;
    m.forward_bottom_ms = ms_since(t);

    let t = Instant::now();
    let (w_a, w_p) = model.interactive_slices();
    let b = rows.len();
    let out = w_p.rows();
    enum PassiveSide {
        Encrypted(secure::EncryptedActivation<secure::Single>),
        Plain(Tensor2),
    }
    let (zp, passive_side) = match &ctx.he {
        Some(he) => {
            let enc = EncActMsg::from_bytes(&ch.expect(msg::ENC_ACT)?, &he.pk)?;
            if enc.step_id != step {
                return Err(SecureError::Desync {
                    expected: step,
                    found: enc.step_id,
                }
                .into());
            }
            if enc.act.rows() != b || enc.act.cols() != w_p.cols() {
                return Err(protocol(format!(
                    "step {step}: passive activation is {}x{}, expected {b}x{}",
                    enc.act.rows(),
                    enc.act.cols(),
                    w_p.cols()
                )));
            }
            let mask = MaskState::random(b, out, he.codec.frac_bits(), rng);
            let grid = homomorphic_linear(&enc.act, &w_p, &mask, &he.pk, &he.codec, rng)?;
            ch.send(Frame::new(msg::MASKED_CT, MaskedCtMsg { step_id: step, grid }.to_bytes()))?;
            let masked = PlainGridMsg::from_bytes(&ch.expect(msg::MASKED_PT)?)
                .map_err(TransportError::from)?
                .expect_step(step)?;
            (mask.unmask(&masked)?, PassiveSide::Encrypted(enc.act))
        }
        None => {
            let hp = PlainGridMsg::from_bytes(&ch.expect(msg::MASKED_PT)?)
                .map_err(TransportError::from)?
                .expect_step(step)?;
            if hp.shape() != (b, w_p.cols()) {
                return Err(protocol(format!(
                    "step {step}: passive activation is {:?}, expected {b}x{}",
                    hp.shape(),
                    w_p.cols()
                )));
            }
            (hp.matmul_bt(&w_p)?, PassiveSide::Plain(hp))
        }
    };
    let mut z = ha.matmul_bt(&w_a)?.add(&zp)?;
    z.add_row_vector(&model.interactive.bias);
    m.he_exchange_ms = ms_since(t);

    let t = Instant::now();
    let (pred, cache_top) = model.top.forward(&z)?;
    let (loss, dpred) = bce_loss(&pred, &y)?;
    m.top_ms = ms_since(t);

    let t = Instant::now();
    let (top_grads, dz) = model.top.backward(&cache_top, &dpred)?;
    let dw_a = dz.t_matmul(&ha)?;
    let dh_p = dz.matmul(&w_p)?;
    let dh_a = dz.matmul(&w_a)?;
    let backward_local = ms_since(t);

    let t = Instant::now();
    let dw_p = match (&passive_side, &ctx.he) {
        (PassiveSide::Encrypted(enc), Some(he)) => {
            let (grid, mask, gain) = secure::weight_grad_request(enc, &dz, &he.pk, &he.codec, rng)?;
            ch.send(Frame::new(msg::MASKED_CT, MaskedCtMsg { step_id: step, grid }.to_bytes()))?;
            let masked = PlainGridMsg::from_bytes(&ch.expect(msg::MASKED_PT)?)
                .map_err(TransportError::from)?
                .expect_step(step)?;
            secure::weight_grad_finish(&mask.unmask(&masked)?, gain)
        }
        (PassiveSide::Plain(hp), _) => dz.t_matmul(hp)?,
        _ => unreachable!("passive side matches the HE setting"),
    };
    let grad_msg = PlainGridMsg {
        step_id: step,
        grid: dh_p,
    };
    ch.send(Frame::new(msg::GRAD_PASSIVE, grad_msg.to_bytes()))?;
    m.he_exchange_ms += ms_since(t);

    let t = Instant::now();
    let (bottom_grads, _) = model.bottom.backward(&cache_a, &dh_a)?;
    let grads = ActiveGrads {
        bottom: bottom_grads,
        interactive: LayerGrad {
            weights: dw_a.hconcat(&dw_p)?,
            bias: dz.col_sums(),
        },
        top: top_grads,
    };
    let updated = sgd_step(&model.weights(), &model.grads_vector(&grads), ctx.lr)?;
    model.set_weights(&updated)?;
    m.backward_ms = backward_local + ms_since(t);
    Ok(loss)
}

fn should_stop(pulled: &Pulled, threshold: Option<f64>) -> bool {
    matches!((threshold, pulled.last_metric), (Some(th), Some(l)) if l < th)
}

fn active_worker<C: Channel + ?Sized>(
    ctx: &ActiveCtx<'_>,
    worker: usize,
    shard: &[Record],
    ch: &mut C,
    ps: &mut dyn PsClient,
) -> Result<Vec<StepMetrics>, RunError> {
    let mut model = ctx.template.clone();
    let mut rng = ChaCha20Rng::seed_from_u64(worker_seed(ctx.mask_seed, 1, worker));
    let sched = ctx.schedule;
    let mut metrics = Vec::new();
    for epoch in 0..sched.epochs {
        let mut epoch_losses = Vec::new();
        if sched.aggregation == Aggregation::Epoch {
            let pulled = ps.pull(epoch as u64)?;
            if should_stop(&pulled, ctx.stop_loss_below) {
                let _ = ch.send(Frame::empty(msg::SHUTDOWN));
                return Ok(metrics);
            }
            model.set_weights(&pulled.weights)?;
        }
        for t in 0..sched.rounds_per_epoch {
            let step = (epoch * sched.rounds_per_epoch + t) as u64;
            let mut m = StepMetrics {
                epoch,
                step,
                worker,
                loss: f64::NAN,
                forward_bottom_ms: 0.0,
                he_exchange_ms: 0.0,
                top_ms: 0.0,
                backward_ms: 0.0,
                ps_sync_ms: 0.0,
                rows_processed: 0,
            };
            if sched.aggregation == Aggregation::Batch {
                let t0 = Instant::now();
                let pulled = ps.pull(step)?;
                m.ps_sync_ms += ms_since(t0);
                if should_stop(&pulled, ctx.stop_loss_below) {
                    let _ = ch.send(Frame::empty(msg::SHUTDOWN));
                    return Ok(metrics);
                }
                model.set_weights(&pulled.weights)?;
            }
            let rows = sched.rows(shard, t);
            if !rows.is_empty() {
                m.loss = active_step(&mut model, rows, ch, step, ctx, &mut rng, &mut m)?;
                m.rows_processed = rows.len();
                epoch_losses.push(m.loss);
            }
            if sched.aggregation == Aggregation::Batch {
                let t0 = Instant::now();
                ps.push(&model.weights(), step, m.loss)?;
                m.ps_sync_ms += ms_since(t0);
            }
            metrics.push(m);
        }
        if sched.aggregation == Aggregation::Epoch {
            let mean = if epoch_losses.is_empty() {
                f64::NAN
            } else {
                epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64
            };
            ps.push(&model.weights(), epoch as u64, mean)?;
        }
    }
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// Passive worker

struct PassiveCtx<'a> {
    template: &'a PassiveModel,
    schedule: Schedule,
    lr: f64,
    keys: Option<(&'a PublicKey, &'a PrivateKey, FixedPointCodec)>,
    enc_seed: u64,
    stopped: &'a AtomicBool,
    server: &'a ParameterServer,
}

enum StepOutcome {
    Done,
    Stopped,
}

/// A send can fail because the peer already stopped; its SHUTDOWN is then
/// still queued on our side.
fn shutdown_or<C: Channel + ?Sized>(ch: &mut C, err: TransportError) -> Result<StepOutcome, RunError> {
    while let Ok(frame) = ch.recv() {
        if frame.msg_type == msg::SHUTDOWN {
            return Ok(StepOutcome::Stopped);
        }
    }
    Err(err.into())
}

fn passive_step<C: Channel + ?Sized>(
    model: &mut PassiveModel,
    rows: &[Record],
    ch: &mut C,
    step: u64,
    ctx: &PassiveCtx<'_>,
    rng: &mut ChaCha20Rng,
) -> Result<StepOutcome, RunError> {
    let x = features(rows)?;
    let (hp, cache) = model.bottom.forward(&x)?;
    match &ctx.keys {
        Some((pk, _, codec)) => {
            let act = encrypt_activation(&hp, pk, codec, Producer::Passive, rng)?;
            let frame = Frame::new(msg::ENC_ACT, EncActMsg { step_id: step, act }.to_bytes());
            if let Err(e) = ch.send(frame) {
                return shutdown_or(ch, e);
            }
        }
        None => {
            let plain = PlainGridMsg {
                step_id: step,
                grid: hp.clone(),
            };
            if let Err(e) = ch.send(Frame::new(msg::MASKED_PT, plain.to_bytes())) {
                return shutdown_or(ch, e);
            }
        }
    }
    let grad = loop {
        let frame = ch.recv()?;
        match frame.msg_type {
            msg::MASKED_CT => {
                let (pk, sk, _) = ctx
                    .keys
                    .as_ref()
                    .ok_or_else(|| protocol("MASKED_CT received with HE off"))?;
                let ct = MaskedCtMsg::from_bytes(&frame.payload, pk)?;
                if ct.step_id != step {
                    return Err(SecureError::Desync {
                        expected: step,
                        found: ct.step_id,
                    }
                    .into());
                }
                let reply = PlainGridMsg {
                    step_id: step,
                    grid: masked_decrypt(&ct.grid, sk)?,
                };
                ch.send(Frame::new(msg::MASKED_PT, reply.to_bytes()))?;
            }
            msg::GRAD_PASSIVE => {
                break PlainGridMsg::from_bytes(&frame.payload)
                    .map_err(TransportError::from)?
                    .expect_step(step)?;
            }
            msg::SHUTDOWN => return Ok(StepOutcome::Stopped),
            _ => {
                transport::check_type(frame, msg::GRAD_PASSIVE)?;
            }
        }
    };
    if grad.shape() != hp.shape() {
        return Err(protocol(format!("gradient {:?} for activation {:?}", grad.shape(), hp.shape())));
    }
    let (grads, _) = model.bottom.backward(&cache, &grad)?;
    let updated = sgd_step(&model.weights(), &model.grads_vector(&grads), ctx.lr)?;
    model.set_weights(&updated)?;
    Ok(StepOutcome::Done)
}

fn passive_worker<C: Channel + ?Sized>(
    ctx: &PassiveCtx<'_>,
    worker: usize,
    shard: &[Record],
    ch: &mut C,
    ps: &mut dyn PsClient,
) -> Result<(), RunError> {
    let mut model = ctx.template.clone();
    let mut rng = ChaCha20Rng::seed_from_u64(worker_seed(ctx.enc_seed, 2, worker));
    let sched = ctx.schedule;
    let stop = || {
        ctx.stopped.store(true, Ordering::SeqCst);
        ctx.server.shutdown();
    };
    let result = (|| -> Result<(), RunError> {
        for epoch in 0..sched.epochs {
            if sched.aggregation == Aggregation::Epoch {
                model.set_weights(&ps.pull(epoch as u64)?.weights)?;
            }
            for t in 0..sched.rounds_per_epoch {
                let step = (epoch * sched.rounds_per_epoch + t) as u64;
                if sched.aggregation == Aggregation::Batch {
                    model.set_weights(&ps.pull(step)?.weights)?;
                }
                let rows = sched.rows(shard, t);
                if !rows.is_empty() {
                    if let StepOutcome::Stopped = passive_step(&mut model, rows, ch, step, ctx, &mut rng)? {
                        stop();
                        return Ok(());
                    }
                }
                if sched.aggregation == Aggregation::Batch {
                    ps.push(&model.weights(), step, f64::NAN)?;
                }
            }
            if sched.aggregation == Aggregation::Epoch {
                ps.push(&model.weights(), epoch as u64, f64::NAN)?;
            }
        }
        Ok(())
    })();
    match result {
        Err(_) if ctx.stopped.load(Ordering::SeqCst) => Ok(()),
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Parties

/// Outcome of the active party's run.
#[derive(Debug)]
pub struct ActiveOutcome {
    pub model: ActiveModel,
    pub metrics: Vec<StepMetrics>,
    pub intersection: usize,
    pub psi_seconds: f64,
    pub train_seconds: f64,
}

#[derive(Debug)]
pub struct PassiveOutcome {
    pub model: PassiveModel,
    pub intersection: usize,
}

fn check_channels<C: Channel>(channels: &[C], n: usize) -> Result<(), RunError> {
    if channels.len() != n {
        return Err(protocol(format!("{} channels for {n} worker pairs", channels.len())));
    }
    for (i, ch) in channels.iter().enumerate() {
        if ch.pair_index() != i {
            return Err(TransportError::PairMismatch {
                expected: i,
                found: ch.pair_index(),
            }
            .into());
        }
    }
    Ok(())
}

fn ps_clients(
    server: &Arc<ParameterServer>,
    addr: Option<&str>,
    n: usize,
) -> Result<(Vec<Box<dyn PsClient>>, Option<std::thread::JoinHandle<Result<(), PsError>>>), RunError> {
    match addr {
        None => Ok((
            (0..n)
                .map(|i| Box::new(LocalPsClient::new(server.clone(), i)) as Box<dyn PsClient>)
                .collect(),
            None,
        )),
        Some(addr) => {
            let listener = TcpListener::bind(addr).map_err(TransportError::from)?;
            let bound = listener.local_addr().map_err(TransportError::from)?.to_string();
            let handle = ps::serve_tcp(listener, server.clone());
            let clients = (0..n)
                .map(|i| Ok(Box::new(TcpPsClient::connect(&bound, i, server.layout().clone())?) as Box<dyn PsClient>))
                .collect::<Result<Vec<_>, PsError>>()?;
            Ok((clients, Some(handle)))
        }
    }
}

/// Joins worker threads; on the first failure the party's server is shut
/// down and the peer is told, so no other thread stays blocked.
fn join_workers<T>(
    results: Vec<std::thread::ScopedJoinHandle<'_, Result<T, RunError>>>,
) -> Result<Vec<T>, RunError> {
    let mut out = Vec::new();
    let mut first_err = None;
    for h in results {
        match h.join().expect("worker thread panicked") {
            Ok(v) => out.push(v),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    first_err.map_or(Ok(out), Err)
}

fn report_failure<C: Channel + ?Sized>(ch: &mut C, server: &ParameterServer, err: &RunError) {
    server.shutdown();
    let _ = ch.send(Frame::error(&err.to_string()));
}

/// Runs the labelled party: handshake, PSI as client, training of the
/// bottom, interactive and top layers.
pub fn run_active_party<C: Channel>(
    cfg: &RunConfig,
    records: &[Record],
    mut channels: Vec<C>,
) -> Result<ActiveOutcome, RunError> {
    cfg.validate()?;
    let n = cfg.n_workers;
    check_channels(&channels, n)?;
    if let Some(i) = records.iter().position(|r| r.label.is_none()) {
        return Err(RunError::MissingLabel(i));
    }
    let active_in = feature_dim(records);
    let mut passive_in = None;
    let mut pk = None;
    for ch in &mut channels {
        let (p_in, key) = active_handshake(ch, cfg, active_in)?;
        if passive_in.is_some_and(|v| v != p_in) || (pk.is_some() && pk != key) {
            return Err(protocol("worker pairs disagree on the passive party's parameters"));
        }
        passive_in = Some(p_in);
        pk = key;
    }
    let passive_in = passive_in.expect("at least one channel");

    let t_psi = Instant::now();
    let intersection = distributed_psi_over(&mut channels, &ids_of(records), cfg, true)?;
    let psi_seconds = t_psi.elapsed().as_secs_f64();
    let shards = sequential_partition(align_to_intersection(records, &intersection), n).shards;
    let schedule = Schedule::new(cfg, shards.iter().map(Vec::len).max().unwrap_or(0));

    let mc = ModelConfig {
        active_in,
        passive_in,
        ..cfg.model.clone()
    };
    let (template, _) = SplitModel::init(&mc).into_parties();
    let server = ParameterServer::new(template.weights(), n);
    let (mut clients, ps_thread) = ps_clients(&server, cfg.endpoints.active_ps.as_deref(), n)?;
    let ctx = ActiveCtx {
        template: &template,
        schedule,
        lr: cfg.model.lr,
        he: pk.map(|pk| HeContext {
            codec: FixedPointCodec::new(&pk, cfg.frac_bits),
            pk,
        }),
        stop_loss_below: cfg.stop_loss_below,
        mask_seed: cfg.seeds.mask,
    };

    let t_train = Instant::now();
    let per_worker = std::thread::scope(|s| {
        let handles = channels
            .iter_mut()
            .zip(clients.iter_mut())
            .zip(&shards)
            .enumerate()
            .map(|(i, ((ch, ps), shard))| {
                let ctx = &ctx;
                let server = &server;
                s.spawn(move || {
                    let r = active_worker(ctx, i, shard, ch, ps.as_mut());
                    if let Err(e) = &r {
                        report_failure(ch, server, e);
                    }
                    r
                })
            })
            .collect();
        join_workers(handles)
    });
    let train_seconds = t_train.elapsed().as_secs_f64();
    drop(clients);
    if let Some(h) = ps_thread {
        h.join().expect("PS server thread panicked")?;
    }
    let per_worker = per_worker?;

    let mut model = template.clone();
    model.set_weights(&server.global())?;
    let mut metrics: Vec<StepMetrics> = per_worker.into_iter().flatten().collect();
    metrics.sort_by_key(|m| (m.step, m.worker));
    Ok(ActiveOutcome {
        model,
        metrics,
        intersection: intersection.len(),
        psi_seconds,
        train_seconds,
    })
}

/// Runs the feature-only party: key generation, handshake, PSI as server and
/// training of its bottom model.
pub fn run_passive_party<C: Channel>(
    cfg: &RunConfig,
    records: &[Record],
    mut channels: Vec<C>,
) -> Result<PassiveOutcome, RunError> {
    cfg.validate()?;
    let n = cfg.n_workers;
    check_channels(&channels, n)?;
    let passive_in = feature_dim(records);
    let keys = match cfg.he {
        HeMode::On => Some(keygen(cfg.key_bits, cfg.seeds.he)?),
        HeMode::Off => None,
    };
    let mut active_in = None;
    for ch in &mut channels {
        let a_in = passive_handshake(ch, cfg, passive_in, keys.as_ref().map(|(pk, _)| pk))?;
        if active_in.is_some_and(|v| v != a_in) {
            return Err(protocol("worker pairs disagree on the active input width"));
        }
        active_in = Some(a_in);
    }
    let active_in = active_in.expect("at least one channel");

    let intersection = distributed_psi_over(&mut channels, &ids_of(records), cfg, false)?;
    let shards = sequential_partition(align_to_intersection(records, &intersection), n).shards;
    let schedule = Schedule::new(cfg, shards.iter().map(Vec::len).max().unwrap_or(0));

    let mc = ModelConfig {
        active_in,
        passive_in,
        ..cfg.model.clone()
    };
    let (_, template) = SplitModel::init(&mc).into_parties();
    let server = ParameterServer::new(template.weights(), n);
    let (mut clients, ps_thread) = ps_clients(&server, cfg.endpoints.passive_ps.as_deref(), n)?;
    let stopped = AtomicBool::new(false);
    let ctx = PassiveCtx {
        template: &template,
        schedule,
        lr: cfg.model.lr,
        keys: keys
            .as_ref()
            .map(|(pk, sk)| (pk, sk, FixedPointCodec::new(pk, cfg.frac_bits))),
        enc_seed: cfg.seeds.he,
        stopped: &stopped,
        server: &server,
    };

    let result = std::thread::scope(|s| {
        let handles = channels
            .iter_mut()
            .zip(clients.iter_mut())
            .zip(&shards)
            .enumerate()
            .map(|(i, ((ch, ps), shard))| {
                let ctx = &ctx;
                let server = &server;
                s.spawn(move || {
                    let r = passive_worker(ctx, i, shard, ch, ps.as_mut());
                    if let Err(e) = &r {
                        report_failure(ch, server, e);
                    }
                    r
                })
            })
            .collect();
        join_workers(handles)
    });
    drop(clients);
    if let Some(h) = ps_thread {
        let r = h.join().expect("PS server thread panicked");
        if !stopped.load(Ordering::SeqCst) {
            r?;
        }
    }
    result?;

    let mut model = template.clone();
    model.set_weights(&server.global())?;
    Ok(PassiveOutcome {
        model,
        intersection: intersection.len(),
    })
}

/// Both parties of a run, assembled.
#[derive(Debug)]
pub struct LocalRun {
    pub model: SplitModel,
    pub metrics: Vec<StepMetrics>,
    pub intersection: usize,
    pub psi_seconds: f64,
    pub train_seconds: f64,
}

impl LocalRun {
    pub fn round_losses(&self) -> Vec<f64> {
        round_losses(&self.metrics)
    }

    pub fn rows_processed(&self) -> usize {
        self.metrics.iter().map(|m| m.rows_processed).sum()
    }
}

/// Runs both parties in this process over the given channel pairs; the
/// passive party runs on a helper thread.
pub fn run_pair<CA: Channel, CP: Channel>(
    cfg: &RunConfig,
    active: &[Record],
    passive: &[Record],
    active_channels: Vec<CA>,
    passive_channels: Vec<CP>,
) -> Result<LocalRun, RunError> {
    let (a, p) = std::thread::scope(|s| {
        let ph = s.spawn(|| run_passive_party(cfg, passive, passive_channels));
        let a = run_active_party(cfg, active, active_channels);
        (a, ph.join().expect("passive party panicked"))
    });
    let (a, p) = match (a, p) {
        (Ok(a), Ok(p)) => (a, p),
        (Err(e), _) | (Ok(_), Err(e)) => return Err(e),
    };
    Ok(LocalRun {
        model: SplitModel::from_parties(a.model, p.model),
        metrics: a.metrics,
        intersection: a.intersection,
        psi_seconds: a.psi_seconds,
        train_seconds: a.train_seconds,
    })
}

/// Single-process run over in-process channels.
pub fn run_local(cfg: &RunConfig, active: &[Record], passive: &[Record]) -> Result<LocalRun, RunError> {
    let (a, p): (Vec<_>, Vec<_>) = (0..cfg.n_workers).map(in_proc_pair).unzip();
    run_pair(cfg, active, passive, a, p)
}

// ---------------------------------------------------------------------------
// Centralized reference

/// Trains the whole split model in one process on id-aligned rows with the
/// same batch order a one-worker run uses. Returns the model and the loss of
/// every step.
pub fn train_centralized(
    mc: &ModelConfig,
    active: &[Record],
    passive: &[Record],
) -> Result<(SplitModel, Vec<f64>), RunError> {
    if active.len() != passive.len() || active.iter().zip(passive).any(|(a, p)| a.id != p.id) {
        return Err(protocol("centralized training needs id-aligned rows"));
    }
    let mc = ModelConfig {
        active_in: feature_dim(active),
        passive_in: feature_dim(passive),
        ..mc.clone()
    };
    let mut model = SplitModel::init(&mc);
    let mut losses = Vec::new();
    for _ in 0..mc.epochs {
        for lo in (0..active.len()).step_by(mc.batch) {
            let hi = (lo + mc.batch).min(active.len());
            let batch = JointBatch {
                active: features(&active[lo..hi])?,
                passive: features(&passive[lo..hi])?,
                labels: labels(&active[lo..hi])?,
            };
            let (loss, next) = centralized_reference_step(&model, &batch, mc.lr)?;
            losses.push(loss);
            model = next;
        }
    }
    Ok((model, losses))
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: usize,
    pub accuracy: f64,
    pub auc: f64,
    pub ms_per_row: f64,
}

/// Rank-based area under the ROC curve; tied scores share their mean rank.
pub fn auc(scores: &[f64], labels: &[f64]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = mean_rank;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&y| y == 1.0).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return f64::NAN;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == 1.0).map(|(r, _)| r).sum();
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}

/// Aligns the two test sides by id.
pub fn align_test(active: &[Record], passive: &[Record]) -> (Vec<Record>, Vec<Record>) {
    let common = ids_of(active).intersection(&ids_of(passive));
    (align_to_intersection(active, &common), align_to_intersection(passive, &common))
}

/// Plaintext accuracy, AUC and inference time over id-aligned test rows.
pub fn evaluate(model: &SplitModel, active: &[Record], passive: &[Record]) -> Result<EvalReport, RunError> {
    let (a, p) = align_test(active, passive);
    let y = labels(&a)?;
    let t = Instant::now();
    let mut scores = Vec::with_capacity(a.len());
    for lo in (0..a.len()).step_by(4096) {
        let hi = (lo + 4096).min(a.len());
        let pred = model.predict(&features(&a[lo..hi])?, &features(&p[lo..hi])?)?;
        scores.extend_from_slice(pred.data());
    }
    let elapsed = ms_since(t);
    let correct = scores
        .iter()
        .zip(&y)
        .filter(|(s, y)| (**s >= 0.5) == (**y == 1.0))
        .count();
    let rows = a.len();
    Ok(EvalReport {
        rows,
        accuracy: if rows == 0 { f64::NAN } else { correct as f64 / rows as f64 },
        auc: auc(&scores, &y),
        ms_per_row: if rows == 0 { 0.0 } else { elapsed / rows as f64 },
    })
}

/// Forward pass of the split model with the interactive layer evaluated
/// through the masked homomorphic exchange, all in this process.
pub fn secure_predict(
    model: &SplitModel,
    x_a: &Tensor2,
    x_p: &Tensor2,
    pk: &PublicKey,
    sk: &PrivateKey,
    frac_bits: u32,
    seed: u64,
) -> Result<(Tensor2, Tensor2), RunError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let codec = FixedPointCodec::new(pk, frac_bits);
    let (ha, _) = model.active_bottom.forward(x_a)?;
    let (hp, _) = model.passive_bottom.forward(x_p)?;
    let (w_a, w_p) = model.interactive.weights.split_cols(ha.cols());
    let enc = encrypt_activation(&hp, pk, &codec, Producer::Passive, &mut rng)?;
    let mask = MaskState::random(hp.rows(), w_p.rows(), frac_bits, &mut rng);
    let grid = homomorphic_linear(&enc, &w_p, &mask, pk, &codec, &mut rng)?;
    let zp = secure::masked_decrypt_exchange(&grid, sk, &mask)?;
    let mut z = ha.matmul_bt(&w_a)?.add(&zp)?;
    z.add_row_vector(&model.interactive.bias);
    let (pred, _) = model.top.forward(&z)?;
    Ok((z, pred))
}

/// Milliseconds per row of [`secure_predict`] over the first `max_rows`
/// aligned test rows.
pub fn secure_inference_ms_per_row(
    model: &SplitModel,
    active: &[Record],
    passive: &[Record],
    key_bits: u32,
    frac_bits: u32,
    max_rows: usize,
) -> Result<f64, RunError> {
    let (a, p) = align_test(active, passive);
    let k = a.len().min(max_rows);
    if k == 0 {
        return Ok(0.0);
    }
    let (pk, sk) = keygen(key_bits, 17)?;
    let t = Instant::now();
    secure_predict(model, &features(&a[..k])?, &features(&p[..k])?, &pk, &sk, frac_bits, 1)?;
    Ok(ms_since(t) / k as f64)
}

// ---------------------------------------------------------------------------
// Benchmarks

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSweep {
    pub workers: Vec<usize>,
    pub he: Vec<HeMode>,
    pub key_bits: Vec<u32>,
    /// Leading rows of the dataset used per cell; `None` means all rows.
    pub rows: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub workers: usize,
    pub he: HeMode,
    pub key_bits: u32,
    pub rows: usize,
    pub psi_s: f64,
    pub train_s: f64,
    pub rows_per_s: f64,
    pub forward_bottom_ms: f64,
    pub he_exchange_ms: f64,
    pub top_ms: f64,
    pub backward_ms: f64,
    pub ps_sync_ms: f64,
    pub infer_ms_per_row: f64,
    pub status: String,
}

pub const BENCH_HEADER: &str = "workers,he,key_bits,rows,psi_s,train_s,rows_per_s,forward_bottom_ms,he_exchange_ms,top_ms,backward_ms,ps_sync_ms,infer_ms_per_row,status";

/// Reference points the sweep shapes are compared against.
pub const BENCH_REFERENCE: &[&str] = &[
    "training 1 -> 32 workers: 25865 s -> 2252 s; throughput 7732 -> 88810 rows/s",
    "PSI: 2680 s -> 593 s; 186567 -> 843170 items/s",
    "HE overhead: vanilla 89 s, HE(128) 878 s, HE(1024) 19021 s; inference 72 / 73 / 74 s",
];

/// Runs one training per sweep cell in this process. Failed cells are
/// reported in the `status` column.
pub fn bench(base: &RunConfig, sweep: &BenchSweep, active: &[Record], passive: &[Record]) -> Vec<BenchRow> {
    let mut out = Vec::new();
    for &rows in &sweep.rows {
        let k = rows.unwrap_or(active.len()).min(active.len());
        let (a, p) = (&active[..k], &passive[..k.min(passive.len())]);
        for &he in &sweep.he {
            let bits: &[u32] = if he == HeMode::On { &sweep.key_bits } else { &[0] };
            for &key_bits in bits {
                for &workers in &sweep.workers {
                    let cfg = RunConfig {
                        n_workers: workers,
                        he,
                        key_bits: if he == HeMode::On { key_bits } else { base.key_bits },
                        ..base.clone()
                    };
                    out.push(bench_cell(&cfg, a, p));
                }
            }
        }
    }
    out
}

pub fn bench_cell(cfg: &RunConfig, active: &[Record], passive: &[Record]) -> BenchRow {
    let mut row = BenchRow {
        workers: cfg.n_workers,
        he: cfg.he,
        key_bits: if cfg.he == HeMode::On { cfg.key_bits } else { 0 },
        rows: active.len(),
        psi_s: 0.0,
        train_s: 0.0,
        rows_per_s: 0.0,
        forward_bottom_ms: 0.0,
        he_exchange_ms: 0.0,
        top_ms: 0.0,
        backward_ms: 0.0,
        ps_sync_ms: 0.0,
        infer_ms_per_row: 0.0,
        status: "ok".into(),
    };
    match run_local(cfg, active, passive) {
        Ok(run) => {
            row.psi_s = run.psi_seconds;
            row.train_s = run.train_seconds;
            row.rows_per_s = run.rows_processed() as f64 / run.train_seconds.max(1e-9);
            for m in &run.metrics {
                row.forward_bottom_ms += m.forward_bottom_ms;
                row.he_exchange_ms += m.he_exchange_ms;
                row.top_ms += m.top_ms;
                row.backward_ms += m.backward_ms;
                row.ps_sync_ms += m.ps_sync_ms;
            }
            match evaluate(&run.model, active, passive) {
                Ok(r) => row.infer_ms_per_row = r.ms_per_row,
                Err(e) => row.status = format!("eval failed: {e}"),
            }
        }
        Err(e) => row.status = format!("failed: {e}"),
    }
    row
}

pub fn write_bench_csv<W: Write>(mut w: W, rows: &[BenchRow]) -> std::io::Result<()> {
    for line in BENCH_REFERENCE {
        writeln!(w, "# reference: {line}")?;
    }
    writeln!(w, "{BENCH_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{:.4},{:.4},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.6},{}",
            r.workers,
            if r.he == HeMode::On { "on" } else { "off" },
            r.key_bits,
            r.rows,
            r.psi_s,
            r.train_s,
            r.rows_per_s,
            r.forward_bottom_ms,
            r.he_exchange_ms,
            r.top_ms,
            r.backward_ms,
            r.ps_sync_ms,
            r.infer_ms_per_row,
            r.status.replace(',', ";")
        )?;
    }
    Ok(())
}
