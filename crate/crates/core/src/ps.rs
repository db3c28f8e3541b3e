//! Per-party parameter server with a bulk-synchronous barrier.
//!
//! Round `r` holds the global weights `global_r`. Every worker pulls round
//! `r`, trains, and pushes its updated weights tagged `r`. When all workers
//! have pushed, the server replaces the global vector with their mean and
//! moves to round `r + 1`.

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::sync::{Arc, Condvar, Mutex};

use thiserror::Error;

use crate::nn::{Layout, WeightVector};
use crate::transport::{msg, Channel, Frame, TcpChannel, TransportError};
use crate::wire::{self, DecodeError, Reader};

/// Vectors longer than this travel as several [`WeightChunk`]s.
pub const CHUNK_LEN: usize = 4096;

#[derive(Debug, Error)]
pub enum PsError {
    #[error("worker {worker} pushed twice in round {round}")]
    DuplicatePush { worker: usize, round: u64 },
    #[error("worker {worker} used round {found}, server is at {current}")]
    StaleRound { worker: usize, found: u64, current: u64 },
    #[error("worker {0} is not registered")]
    UnknownWorker(usize),
    #[error("pushed vector has {found} entries, expected {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("parameter server shut down")]
    Shutdown,
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// One slice of a flat vector as stored by the server.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightChunk {
    pub key: u32,
    pub round: u64,
    pub values: Vec<f64>,
}

pub fn split_chunks(values: &[f64], round: u64) -> Vec<WeightChunk> {
    if values.is_empty() {
        return vec![WeightChunk {
            key: 0,
            round,
            values: Vec::new(),
        }];
    }
    values
        .chunks(CHUNK_LEN)
        .enumerate()
        .map(|(key, c)| WeightChunk {
            key: key as u32,
            round,
            values: c.to_vec(),
        })
        .collect()
}

pub fn join_chunks(chunks: &[WeightChunk]) -> Result<Vec<f64>, DecodeError> {
    let mut out = Vec::new();
    for (i, c) in chunks.iter().enumerate() {
        if c.key as usize != i {
            return Err(DecodeError::Invalid(format!("chunk {} at position {i}", c.key)));
        }
        out.extend_from_slice(&c.values);
    }
    Ok(out)
}

fn write_chunks(buf: &mut Vec<u8>, values: &[f64], round: u64) {
    let chunks = split_chunks(values, round);
    wire::put_u32(buf, chunks.len() as u32);
    for c in &chunks {
        wire::put_u32(buf, c.key);
        wire::put_u64(buf, c.round);
        wire::put_u32(buf, c.values.len() as u32);
        for &v in &c.values {
            wire::put_f64(buf, v);
        }
    }
}

fn read_chunks(r: &mut Reader<'_>) -> Result<Vec<f64>, DecodeError> {
    let n = r.u32()? as usize;
    let mut chunks = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let key = r.u32()?;
        let round = r.u64()?;
        let len = r.u32()? as usize;
        if len.saturating_mul(8) > r.remaining() {
            return Err(DecodeError::Invalid("chunk longer than payload".into()));
        }
        let values = (0..len).map(|_| r.f64()).collect::<Result<_, _>>()?;
        chunks.push(WeightChunk { key, round, values });
    }
    join_chunks(&chunks)
}

/// Elementwise mean by pairwise summation over the inputs in order. A
/// coordinate on which every input agrees is returned as is, so the mean of
/// identical vectors is exact.
pub fn aggregate(vectors: &[&[f64]]) -> Result<Vec<f64>, PsError> {
    let Some(first) = vectors.first() else {
        return Ok(Vec::new());
    };
    let len = first.len();
    if let Some(bad) = vectors.iter().find(|v| v.len() != len) {
        return Err(PsError::LengthMismatch {
            expected: len,
            found: bad.len(),
        });
    }
    let sum = pairwise_sum(vectors);
    let k = vectors.len() as f64;
    Ok(sum
        .into_iter()
        .enumerate()
        .map(|(j, s)| {
            let x = first[j];
            if vectors.iter().all(|v| v[j] == x) {
                x
            } else {
                s / k
            }
        })
        .collect())
}

fn pairwise_sum(vectors: &[&[f64]]) -> Vec<f64> {
    match vectors.len() {
        1 => vectors[0].to_vec(),
        n => {
            let (l, r) = vectors.split_at(n / 2);
            let mut a = pairwise_sum(l);
            for (x, y) in a.iter_mut().zip(pairwise_sum(r)) {
                *x += y;
            }
            a
        }
    }
}

#[derive(Debug)]
struct PsState {
    round: u64,
    pending: BTreeMap<usize, (Vec<f64>, f64)>,
    global: Vec<f64>,
    /// Mean of the metric pushed alongside the weights of the last
    /// completed round.
    last_metric: Option<f64>,
    aggregations: u64,
    shutdown: bool,
}

/// Serialized BSP endpoint shared by the workers of one party.
#[derive(Debug)]
pub struct ParameterServer {
    layout: Layout,
    n_workers: usize,
    state: Mutex<PsState>,
    cv: Condvar,
}

/// What a pull returns.
#[derive(Clone, Debug, PartialEq)]
pub struct Pulled {
    pub round: u64,
    pub weights: WeightVector,
    pub last_metric: Option<f64>,
}

impl ParameterServer {
    pub fn new(initial: WeightVector, n_workers: usize) -> Arc<Self> {
        assert!(n_workers >= 1, "a parameter server needs workers");
        Arc::new(Self {
            layout: initial.layout,
            n_workers,
            state: Mutex::new(PsState {
                round: 0,
                pending: BTreeMap::new(),
                global: initial.values,
                last_metric: None,
                aggregations: 0,
                shutdown: false,
            }),
            cv: Condvar::new(),
        })
    }

    pub fn n_workers(&self) -> usize {
        self.n_workers
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn round(&self) -> u64 {
        self.lock().round
    }

    pub fn aggregations(&self) -> u64 {
        self.lock().aggregations
    }

    pub fn global(&self) -> WeightVector {
        WeightVector {
            layout: self.layout.clone(),
            values: self.lock().global.clone(),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, PsState> {
        self.state.lock().expect("parameter server lock poisoned")
    }

    /// Records `values` for `worker` in `round`, with a scalar metric
    /// (the worker's loss) averaged alongside. Non-finite metrics are left
    /// out of that average.
    pub fn push(&self, worker: usize, values: &[f64], round: u64, metric: f64) -> Result<(), PsError> {
        if worker >= self.n_workers {
            return Err(PsError::UnknownWorker(worker));
        }
        let mut st = self.lock();
        if st.shutdown {
            return Err(PsError::Shutdown);
        }
        if round != st.round {
            return Err(PsError::StaleRound {
                worker,
                found: round,
                current: st.round,
            });
        }
        if values.len() != st.global.len() {
            return Err(PsError::LengthMismatch {
                expected: st.global.len(),
                found: values.len(),
            });
        }
        if st.pending.contains_key(&worker) {
            return Err(PsError::DuplicatePush { worker, round });
        }
        st.pending.insert(worker, (values.to_vec(), metric));
        if st.pending.len() == self.n_workers {
            let pending = std::mem::take(&mut st.pending);
            let vecs: Vec<&[f64]> = pending.values().map(|(v, _)| v.as_slice()).collect();
            st.global = aggregate(&vecs)?;
            let metrics: Vec<f64> = pending.values().map(|(_, m)| *m).collect();
            let singletons: Vec<[f64; 1]> = metrics.iter().filter(|m| m.is_finite()).map(|&m| [m]).collect();
            let refs: Vec<&[f64]> = singletons.iter().map(|m| m.as_slice()).collect();
            st.last_metric = aggregate(&refs)?.first().copied();
            st.round += 1;
            st.aggregations += 1;
            self.cv.notify_all();
        }
        Ok(())
    }

    /// Blocks until the server reaches `round`, then returns its global
    /// weights.
    pub fn pull(&self, worker: usize, round: u64) -> Result<Pulled, PsError> {
        if worker >= self.n_workers {
            return Err(PsError::UnknownWorker(worker));
        }
        let mut st = self.lock();
        while st.round < round && !st.shutdown {
            st = self.cv.wait(st).expect("parameter server lock poisoned");
        }
        if st.shutdown {
            return Err(PsError::Shutdown);
        }
        if st.round > round {
            return Err(PsError::StaleRound {
                worker,
                found: round,
                current: st.round,
            });
        }
        Ok(Pulled {
            round: st.round,
            weights: WeightVector {
                layout: self.layout.clone(),
                values: st.global.clone(),
            },
            last_metric: st.last_metric,
        })
    }

    /// Wakes blocked pullers with [`PsError::Shutdown`].
    pub fn shutdown(&self) {
        self.lock().shutdown = true;
        self.cv.notify_all();
    }
}

/// A worker's handle on its party's server.
pub trait PsClient: Send {
    fn push(&mut self, weights: &WeightVector, round: u64, metric: f64) -> Result<(), PsError>;

    fn pull(&mut self, round: u64) -> Result<Pulled, PsError>;
}

pub struct LocalPsClient {
    server: Arc<ParameterServer>,
    worker: usize,
}

impl LocalPsClient {
    pub fn new(server: Arc<ParameterServer>, worker: usize) -> Self {
        Self { server, worker }
    }
}

impl PsClient for LocalPsClient {
    fn push(&mut self, weights: &WeightVector, round: u64, metric: f64) -> Result<(), PsError> {
        if weights.layout != *self.server.layout() {
            return Err(PsError::LengthMismatch {
                expected: self.server.layout().total_len(),
                found: weights.len(),
            });
        }
        self.server.push(self.worker, &weights.values, round, metric)
    }

    fn pull(&mut self, round: u64) -> Result<Pulled, PsError> {
        self.server.pull(self.worker, round)
    }
}

/// Talks to [`serve_tcp`] with PUSH / PULL_REQ / PULL_RESP frames.
pub struct TcpPsClient {
    channel: TcpChannel,
    layout: Layout,
}

impl TcpPsClient {
    pub fn connect(addr: &str, worker: usize, layout: Layout) -> Result<Self, PsError> {
        Ok(Self {
            channel: TcpChannel::connect_retry(addr, worker, 100)?,
            layout,
        })
    }
}

impl PsClient for TcpPsClient {
    fn push(&mut self, weights: &WeightVector, round: u64, metric: f64) -> Result<(), PsError> {
        let mut buf = Vec::with_capacity(32 + weights.len() * 8);
        wire::put_u64(&mut buf, round);
        wire::put_f64(&mut buf, metric);
        write_chunks(&mut buf, &weights.values, round);
        self.channel.send(Frame::new(msg::PUSH, buf))?;
        Ok(())
    }

    fn pull(&mut self, round: u64) -> Result<Pulled, PsError> {
        let mut buf = Vec::new();
        wire::put_u64(&mut buf, round);
        self.channel.send(Frame::new(msg::PULL_REQ, buf))?;
        let payload = self.channel.expect(msg::PULL_RESP)?;
        let mut r = Reader::new(&payload);
        let round = r.u64()?;
        let has_metric = r.u8()? == 1;
        let metric = r.f64()?;
        let values = read_chunks(&mut r)?;
        r.finish()?;
        if values.len() != self.layout.total_len() {
            return Err(PsError::LengthMismatch {
                expected: self.layout.total_len(),
                found: values.len(),
            });
        }
        Ok(Pulled {
            round,
            weights: WeightVector {
                layout: self.layout.clone(),
                values,
            },
            last_metric: has_metric.then_some(metric),
        })
    }
}

impl Drop for TcpPsClient {
    fn drop(&mut self) {
        let _ = self.channel.send(Frame::empty(msg::SHUTDOWN));
    }
}

/// Serves `n_workers` TCP clients on `listener` until each sends SHUTDOWN or
/// disconnects. Each connection is handled on its own thread; the pair index
/// announced at connect time is the worker id.
pub fn serve_tcp(listener: TcpListener, server: Arc<ParameterServer>) -> std::thread::JoinHandle<Result<(), PsError>> {
    std::thread::spawn(move || {
        let channels = TcpChannel::accept_pairs(&listener, server.n_workers())?;
        let handles: Vec<_> = channels
            .into_iter()
            .map(|ch| {
                let server = server.clone();
                std::thread::spawn(move || serve_connection(ch, &server))
            })
            .collect();
        let mut first_err = None;
        for h in handles {
            if let Err(e) = h.join().expect("PS connection thread panicked") {
                server.shutdown();
                first_err.get_or_insert(e);
            }
        }
        first_err.map_or(Ok(()), Err)
    })
}

fn serve_connection(mut ch: TcpChannel, server: &ParameterServer) -> Result<(), PsError> {
    let worker = ch.pair_index();
    loop {
        let frame = match ch.recv() {
            Ok(f) => f,
            Err(TransportError::Closed) => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        match frame.msg_type {
            msg::PUSH => {
                let mut r = Reader::new(&frame.payload);
                let round = r.u64()?;
                let metric = r.f64()?;
                let values = read_chunks(&mut r)?;
                r.finish()?;
                server.push(worker, &values, round, metric)?;
            }
            msg::PULL_REQ => {
                let mut r = Reader::new(&frame.payload);
                let round = r.u64()?;
                r.finish()?;
                let pulled = match server.pull(worker, round) {
                    Ok(p) => p,
                    Err(e) => {
                        let _ = ch.send(Frame::error(&e.to_string()));
                        return Err(e);
                    }
                };
                let mut buf = Vec::with_capacity(32 + pulled.weights.len() * 8);
                wire::put_u64(&mut buf, pulled.round);
                wire::put_u8(&mut buf, u8::from(pulled.last_metric.is_some()));
                wire::put_f64(&mut buf, pulled.last_metric.unwrap_or(0.0));
                write_chunks(&mut buf, &pulled.weights.values, pulled.round);
                ch.send(Frame::new(msg::PULL_RESP, buf))?;
            }
            msg::SHUTDOWN => return Ok(()),
            other => {
                return Err(TransportError::Unexpected {
                    expected: msg::PUSH,
                    found: other,
                }
                .into())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayoutEntry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn layout(len: usize) -> Layout {
        Layout {
            entries: vec![LayoutEntry {
                name: "x.w".into(),
                offset: 0,
                rows: 1,
                cols: len,
                activation: None,
            }],
        }
    }

    fn wv(values: Vec<f64>) -> WeightVector {
        WeightVector {
            layout: layout(values.len()),
            values,
        }
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate(&[&[0.0], &[10.0]]).unwrap(), vec![5.0]);
        let v = [0.1, -3.7, 1e10];
        assert_eq!(aggregate(&[&v, &v, &v]).unwrap(), v.to_vec());
        assert!(matches!(aggregate(&[&[1.0], &[1.0, 2.0]]), Err(PsError::LengthMismatch { .. })));

        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let vs: Vec<Vec<f64>> = (0..8).map(|_| (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let refs: Vec<&[f64]> = vs.iter().map(Vec::as_slice).collect();
        let got = aggregate(&refs).unwrap();
        for j in 0..50 {
            let mut s = 0.0;
            for v in &vs {
                s += v[j];
            }
            assert!((got[j] - s / 8.0).abs() < 1e-15);
        }
    }

    #[test]
    fn push_pull_semantics() {
        let ps = ParameterServer::new(wv(vec![7.0, 7.0]), 2);
        assert_eq!(ps.pull(0, 0).unwrap().weights.values, vec![7.0, 7.0]);
        ps.push(0, &[1.0, 2.0], 0, 0.5).unwrap();
        assert!(matches!(ps.push(0, &[1.0, 2.0], 0, 0.5), Err(PsError::DuplicatePush { .. })));
        assert!(matches!(ps.push(1, &[1.0, 2.0], 1, 0.5), Err(PsError::StaleRound { .. })));
        assert!(matches!(ps.push(1, &[1.0], 0, 0.5), Err(PsError::LengthMismatch { .. })));
        assert!(matches!(ps.push(2, &[1.0, 2.0], 0, 0.5), Err(PsError::UnknownWorker(2))));
        ps.push(1, &[3.0, 4.0], 0, 1.5).unwrap();
        let a = ps.pull(0, 1).unwrap();
        let b = ps.pull(1, 1).unwrap();
        assert_eq!(a.weights.values, vec![2.0, 3.0]);
        assert_eq!(a, b);
        assert_eq!(a.last_metric, Some(1.0));
        assert!(matches!(ps.pull(0, 0), Err(PsError::StaleRound { .. })));

        let one = ParameterServer::new(wv(vec![0.0]), 1);
        one.push(0, &[0.3], 0, 0.0).unwrap();
        assert_eq!(one.pull(0, 1).unwrap().weights.values, vec![0.3]);
    }

    #[test]
    fn shutdown_wakes_pullers() {
        let ps = ParameterServer::new(wv(vec![0.0]), 2);
        let p2 = ps.clone();
        let h = std::thread::spawn(move || p2.pull(0, 1));
        std::thread::sleep(std::time::Duration::from_millis(20));
        ps.shutdown();
        assert!(matches!(h.join().unwrap(), Err(PsError::Shutdown)));
    }

    #[test]
    fn scripted_schedule_no_deadlock() {
        let ps = ParameterServer::new(wv(vec![0.0; 3]), 4);
        std::thread::scope(|s| {
            for w in 0..4 {
                let ps = ps.clone();
                s.spawn(move || {
                    let mut rng = ChaCha20Rng::seed_from_u64(w as u64);
                    for round in 0..5 {
                        let pulled = ps.pull(w, round).unwrap();
                        std::thread::sleep(std::time::Duration::from_micros(rng.gen_range(0..500)));
                        let next: Vec<f64> = pulled.weights.values.iter().map(|v| v + w as f64).collect();
                        ps.push(w, &next, round, 0.0).unwrap();
                    }
                });
            }
        });
        assert_eq!(ps.aggregations(), 5);
        assert_eq!(ps.round(), 5);
        assert_eq!(ps.global().values, vec![7.5; 3]);
    }

    #[test]
    fn chunks_split_above_threshold() {
        let v: Vec<f64> = (0..10_000).map(f64::from).collect();
        let chunks = split_chunks(&v, 3);
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[2].values.len(), 10_000 - 2 * CHUNK_LEN);
        assert_eq!(join_chunks(&chunks).unwrap(), v);
        assert_eq!(split_chunks(&v[..CHUNK_LEN], 0).len(), 1);
    }

    #[test]
    fn tcp_clients_match_local() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let n = 9000;
        let ps = ParameterServer::new(wv(vec![1.0; n]), 2);
        let handle = serve_tcp(listener, ps.clone());
        std::thread::scope(|s| {
            for w in 0..2 {
                let addr = addr.clone();
                s.spawn(move || {
                    let mut c = TcpPsClient::connect(&addr, w, layout(n)).unwrap();
                    let p = c.pull(0).unwrap();
                    assert_eq!(p.weights.values, vec![1.0; n]);
                    c.push(&wv(vec![w as f64; n]), 0, w as f64).unwrap();
                    let p = c.pull(1).unwrap();
                    assert_eq!(p.weights.values, vec![0.5; n]);
                    assert_eq!(p.last_metric, Some(0.5));
                });
            }
        });
        handle.join().unwrap().unwrap();
    }
}
