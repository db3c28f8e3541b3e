//! Garbled-Bloom-filter PSI between a client and a server, and its
//! hash-partitioned distributed form.
//!
//! One pairwise session runs:
//!
//! 1. client → server `PSI_PARAMS`: client cardinality, fp target, seeds
//! 2. server builds its GBF sized for `max(|C|, |S|)` and answers `PSI_PARAMS`
//!    with the final `m`, `k` and hash seed
//! 3. client builds its Bloom filter with those parameters
//! 4. the transfer step turns the client BF into the intersection GBF
//! 5. client queries every own id against the intersection GBF
//!
//! The transfer step stands where oblivious transfer sits in the full
//! protocol. The only provided implementation, [`DirectTransfer`], hands the
//! client BF to the server in the clear: outputs match the oblivious protocol
//! but the server learns the client's filter.

use std::collections::BTreeSet;
use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use siphasher::sip::SipHasher13;
use std::hash::Hasher;
use thiserror::Error;

use crate::filters::{
    BloomFilter, FilterError, FilterParams, GarbledBloomFilter, DEFAULT_FP_TARGET, DEFAULT_SIGMA,
};
use crate::wire::{self, DecodeError, Reader};

pub type Id = Vec<u8>;

#[derive(Debug, Error)]
pub enum PsiError {
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("{role} session is in phase {found:?}, operation needs {expected:?}")]
    Phase {
        role: Role,
        expected: Phase,
        found: Phase,
    },
    #[error("filter parameters differ between client and server")]
    ParamMismatch,
    #[error("transfer failed: {0}")]
    Transfer(String),
    #[error("bucket {index} failed: {source}")]
    Bucket {
        index: usize,
        #[source]
        source: Box<PsiError>,
    },
    #[error("malformed PSI message: {0}")]
    Decode(#[from] DecodeError),
}

/// A set of sample ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdSet(BTreeSet<Id>);

impl IdSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a set from raw ids, dropping duplicates with a warning.
    pub fn from_raw<I: IntoIterator<Item = Id>>(ids: I) -> Self {
        let mut seen = 0usize;
        let set: BTreeSet<Id> = ids.into_iter().inspect(|_| seen += 1).collect();
        if set.len() < seen {
            log::warn!("dropped {} duplicate ids", seen - set.len());
        }
        Self(set)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, id: &[u8]) -> bool {
        self.0.contains(id)
    }

    pub fn insert(&mut self, id: Id) -> bool {
        self.0.insert(id)
    }

    /// Ids in ascending byte order.
    pub fn iter(&self) -> impl Iterator<Item = &Id> {
        self.0.iter()
    }

    pub fn extend(&mut self, other: IdSet) {
        self.0.extend(other.0);
    }

    pub fn into_sorted_vec(self) -> Vec<Id> {
        self.0.into_iter().collect()
    }

    pub fn intersection(&self, other: &IdSet) -> IdSet {
        IdSet(self.0.intersection(&other.0).cloned().collect())
    }

    pub fn is_subset(&self, other: &IdSet) -> bool {
        self.0.is_subset(&other.0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        wire::put_u64(&mut buf, self.0.len() as u64);
        for id in &self.0 {
            wire::put_bytes(&mut buf, id);
        }
        buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let n = r.u64()?;
        let mut set = BTreeSet::new();
        for _ in 0..n {
            set.insert(r.bytes()?.to_vec());
        }
        r.finish()?;
        Ok(Self(set))
    }
}

impl FromIterator<Id> for IdSet {
    fn from_iter<T: IntoIterator<Item = Id>>(iter: T) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Maps ids to buckets with a seeded hash both parties evaluate identically.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bucketing {
    pub n_buckets: usize,
    pub seed: u64,
}

impl Bucketing {
    pub fn new(n_buckets: usize, seed: u64) -> Self {
        assert!(n_buckets >= 1, "at least one bucket");
        Self { n_buckets, seed }
    }

    pub fn bucket_of(&self, id: &[u8]) -> usize {
        let mut h = SipHasher13::new_with_keys(self.seed, 0x4255_434b_4554_0000);
        h.write(id);
        (h.finish() % self.n_buckets as u64) as usize
    }
}

/// Splits `ids` into `n_buckets` disjoint sets by `hash(id, seed) mod n`.
pub fn hash_partition(ids: &IdSet, n_buckets: usize, shared_seed: u64) -> Vec<IdSet> {
    let bucketing = Bucketing::new(n_buckets, shared_seed);
    let mut out = vec![IdSet::new(); n_buckets];
    for id in ids.iter() {
        out[bucketing.bucket_of(id)].insert(id.clone());
    }
    out
}

/// Seeds and targets shared by both sides of a PSI run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsiConfig {
    pub fp_target: f64,
    pub sigma: u16,
    pub partition_seed: u64,
    pub hash_seed: u64,
    pub rng_seed: u64,
}

impl Default for PsiConfig {
    fn default() -> Self {
        Self {
            fp_target: DEFAULT_FP_TARGET,
            sigma: DEFAULT_SIGMA,
            partition_seed: 0x5053_495f_5041_5254,
            hash_seed: 0x5053_495f_4841_5348,
            rng_seed: 0x5053_495f_524e_4753,
        }
    }
}

impl PsiConfig {
    /// Per-bucket seeds, so every bucket uses independent hash functions.
    pub fn for_bucket(&self, index: usize) -> Self {
        let mix = (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        Self {
            hash_seed: self.hash_seed ^ mix,
            rng_seed: self.rng_seed ^ mix.rotate_left(17),
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Client,
    Server,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Client => "client",
            Role::Server => "server",
        })
    }
}

/// Session phases; they only move forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Init,
    FiltersBuilt,
    Transferred,
    Done,
}

/// `PSI_PARAMS` body. The client's proposal leaves `m`/`k` at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsiParamsMsg {
    pub expected_items: u64,
    pub fp_target: f64,
    pub m: u64,
    pub k: u16,
    pub sigma: u16,
    pub hash_seed: u64,
}

impl PsiParamsMsg {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(38);
        wire::put_u64(&mut buf, self.expected_items);
        wire::put_f64(&mut buf, self.fp_target);
        wire::put_u64(&mut buf, self.m);
        wire::put_u16(&mut buf, self.k);
        wire::put_u16(&mut buf, self.sigma);
        wire::put_u64(&mut buf, self.hash_seed);
        buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let msg = Self {
            expected_items: r.u64()?,
            fp_target: r.f64()?,
            m: r.u64()?,
            k: r.u16()?,
            sigma: r.u16()?,
            hash_seed: r.u64()?,
        };
        r.finish()?;
        Ok(msg)
    }

    fn filter_params(&self) -> FilterParams {
        FilterParams {
            expected_items: self.expected_items as usize,
            fp_target: self.fp_target,
            m: self.m,
            k: self.k,
        }
    }
}

fn advance(role: Role, phase: &mut Phase, from: Phase, to: Phase) -> Result<(), PsiError> {
    if *phase != from {
        return Err(PsiError::Phase {
            role,
            expected: from,
            found: *phase,
        });
    }
    *phase = to;
    Ok(())
}

/// Receiving side: learns the intersection.
#[derive(Debug)]
pub struct PsiClient {
    ids: Vec<Id>,
    config: PsiConfig,
    phase: Phase,
    bf: Option<BloomFilter>,
    gbf: Option<GarbledBloomFilter>,
}

impl PsiClient {
    pub fn new(set: &IdSet, config: PsiConfig) -> Self {
        Self {
            ids: set.iter().cloned().collect(),
            config,
            phase: Phase::Init,
            bf: None,
            gbf: None,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn propose(&self) -> PsiParamsMsg {
        PsiParamsMsg {
            expected_items: self.ids.len() as u64,
            fp_target: self.config.fp_target,
            m: 0,
            k: 0,
            sigma: self.config.sigma,
            hash_seed: self.config.hash_seed,
        }
    }

    /// Builds the client Bloom filter under the server's final parameters.
    pub fn build_filter(&mut self, agreed: &PsiParamsMsg) -> Result<&BloomFilter, PsiError> {
        if agreed.sigma != self.config.sigma || agreed.m == 0 || agreed.k == 0 {
            return Err(PsiError::ParamMismatch);
        }
        advance(Role::Client, &mut self.phase, Phase::Init, Phase::FiltersBuilt)?;
        let mut bf = BloomFilter::with_params(&agreed.filter_params(), agreed.hash_seed);
        for id in &self.ids {
            bf.insert(id);
        }
        Ok(self.bf.insert(bf))
    }

    pub fn filter(&self) -> Option<&BloomFilter> {
        self.bf.as_ref()
    }

    pub fn receive(&mut self, gbf: GarbledBloomFilter) -> Result<(), PsiError> {
        let bf = self.bf.as_ref().ok_or(PsiError::Phase {
            role: Role::Client,
            expected: Phase::FiltersBuilt,
            found: self.phase,
        })?;
        if gbf.m() != bf.m() || gbf.k() != bf.k() || gbf.hash_seed() != bf.hash_seed() {
            return Err(PsiError::ParamMismatch);
        }
        advance(Role::Client, &mut self.phase, Phase::FiltersBuilt, Phase::Transferred)?;
        self.gbf = Some(gbf);
        Ok(())
    }

    /// Queries every own id against the intersection filter.
    pub fn finish(&mut self) -> Result<IdSet, PsiError> {
        advance(Role::Client, &mut self.phase, Phase::Transferred, Phase::Done)?;
        let gbf = self.gbf.take().expect("set in receive");
        Ok(self
            .ids
            .iter()
            .filter(|id| gbf.query(id))
            .cloned()
            .collect())
    }
}

/// Sending side: holds the garbled filter, learns only the result size.
#[derive(Debug)]
pub struct PsiServer {
    ids: Vec<Id>,
    config: PsiConfig,
    phase: Phase,
    gbf: Option<GarbledBloomFilter>,
    result_len: Option<u64>,
}

impl PsiServer {
    pub fn new(set: &IdSet, config: PsiConfig) -> Self {
        Self {
            ids: set.iter().cloned().collect(),
            config,
            phase: Phase::Init,
            gbf: None,
            result_len: None,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Sizes and builds the garbled filter from both cardinalities and
    /// returns the agreed parameters.
    pub fn accept(&mut self, proposal: &PsiParamsMsg) -> Result<PsiParamsMsg, PsiError> {
        if proposal.sigma != self.config.sigma {
            return Err(PsiError::ParamMismatch);
        }
        advance(Role::Server, &mut self.phase, Phase::Init, Phase::FiltersBuilt)?;
        let expected = (proposal.expected_items as usize).max(self.ids.len());
        let params = FilterParams::new(expected, proposal.fp_target)?;
        let gbf = GarbledBloomFilter::build(
            &self.ids,
            &params,
            self.config.sigma,
            proposal.hash_seed,
            self.config.rng_seed,
        )?;
        let agreed = PsiParamsMsg {
            expected_items: expected as u64,
            fp_target: proposal.fp_target,
            m: gbf.m(),
            k: gbf.k(),
            sigma: gbf.sigma(),
            hash_seed: gbf.hash_seed(),
        };
        self.gbf = Some(gbf);
        Ok(agreed)
    }

    /// Combines the client filter with the own garbled filter.
    pub fn respond(&mut self, client_bf: &BloomFilter) -> Result<GarbledBloomFilter, PsiError> {
        let gbf = self.gbf.take().ok_or(PsiError::Phase {
            role: Role::Server,
            expected: Phase::FiltersBuilt,
            found: self.phase,
        })?;
        advance(Role::Server, &mut self.phase, Phase::FiltersBuilt, Phase::Transferred)?;
        build_intersection_gbf(gbf, client_bf, self.config.rng_seed ^ 0x494e_5453)
    }

    /// Records the `PSI_DONE` count.
    pub fn done(&mut self, count: u64) -> Result<(), PsiError> {
        advance(Role::Server, &mut self.phase, Phase::Transferred, Phase::Done)?;
        self.result_len = Some(count);
        Ok(())
    }

    pub fn result_len(&self) -> Option<u64> {
        self.result_len
    }
}

/// Keeps server slot `i` where client bit `i` is set and replaces every other
/// slot with fresh random bytes.
pub fn build_intersection_gbf(
    mut server_gbf: GarbledBloomFilter,
    client_bf: &BloomFilter,
    rng_seed: u64,
) -> Result<GarbledBloomFilter, PsiError> {
    if server_gbf.m() != client_bf.m()
        || server_gbf.k() != client_bf.k()
        || server_gbf.hash_seed() != client_bf.hash_seed()
    {
        return Err(PsiError::ParamMismatch);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    for i in 0..server_gbf.m() {
        if !client_bf.bit(i) {
            rng.fill_bytes(server_gbf.slot_mut(i));
        }
    }
    Ok(server_gbf)
}

/// The step that moves the client filter to the server and the intersection
/// filter back.
pub trait TransferOracle {
    fn transfer(&mut self, client_bf: &BloomFilter) -> Result<GarbledBloomFilter, PsiError>;

    /// Whether the server learns nothing about the client filter.
    fn is_oblivious(&self) -> bool;
}

/// In-memory, non-oblivious transfer against a local [`PsiServer`].
pub struct DirectTransfer<'a> {
    server: &'a mut PsiServer,
}

impl<'a> DirectTransfer<'a> {
    pub fn new(server: &'a mut PsiServer) -> Self {
        Self { server }
    }
}

impl TransferOracle for DirectTransfer<'_> {
    fn transfer(&mut self, client_bf: &BloomFilter) -> Result<GarbledBloomFilter, PsiError> {
        self.server.respond(client_bf)
    }

    fn is_oblivious(&self) -> bool {
        false
    }
}

/// Runs the client half of a session once parameters are agreed.
pub fn run_client(
    client: &mut PsiClient,
    agreed: &PsiParamsMsg,
    transfer: &mut dyn TransferOracle,
) -> Result<IdSet, PsiError> {
    if !transfer.is_oblivious() {
        log::debug!("PSI transfer is non-oblivious: the server sees the client filter");
    }
    client.build_filter(agreed)?;
    let bf = client.filter().expect("just built").clone();
    let gbf = transfer.transfer(&bf)?;
    client.receive(gbf)?;
    client.finish()
}

/// One in-memory pairwise session; returns what the client learns.
pub fn psi_pair(
    client_set: &IdSet,
    server_set: &IdSet,
    config: &PsiConfig,
) -> Result<IdSet, PsiError> {
    let mut client = PsiClient::new(client_set, *config);
    let mut server = PsiServer::new(server_set, *config);
    let agreed = server.accept(&client.propose())?;
    let result = run_client(&mut client, &agreed, &mut DirectTransfer::new(&mut server))?;
    server.done(result.len() as u64)?;
    Ok(result)
}

/// Partitions both sets with the shared seed, runs one session per bucket
/// concurrently (active side as client) and unions the results.
pub fn distributed_psi(
    active: &IdSet,
    passive: &IdSet,
    n_workers: usize,
    config: &PsiConfig,
) -> Result<IdSet, PsiError> {
    assert!(n_workers >= 1, "at least one worker");
    let active_buckets = hash_partition(active, n_workers, config.partition_seed);
    let passive_buckets = hash_partition(passive, n_workers, config.partition_seed);

    let results: Vec<Result<IdSet, PsiError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = active_buckets
            .iter()
            .zip(&passive_buckets)
            .enumerate()
            .map(|(i, (a, p))| {
                let cfg = config.for_bucket(i);
                scope.spawn(move || psi_pair(a, p, &cfg))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("PSI bucket thread panicked"))
            .collect()
    });

    let mut out = IdSet::new();
    for (index, result) in results.into_iter().enumerate() {
        match result {
            Ok(set) => out.extend(set),
            Err(e) => {
                return Err(PsiError::Bucket {
                    index,
                    source: Box::new(e),
                })
            }
        }
    }
    Ok(out)
}
