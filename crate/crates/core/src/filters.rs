//! Bloom filters and garbled Bloom filters over byte-string ids.
//!
//! Both filter kinds share one position function: a keyed 128-bit SipHash of
//! the id split into `h1`, `h2`, and `h_i = h1 + i·h2 mod m` for `i < k`, with
//! repeated positions dropped. A garbled filter stores `sigma`-bit shares
//! whose XOR over an item's positions equals a keyed digest of the item.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use siphasher::sip128::{Hasher128, SipHasher13};
use std::hash::Hasher;
use thiserror::Error;

use crate::wire::{self, DecodeError, Reader};

pub const DEFAULT_SIGMA: u16 = 128;
pub const DEFAULT_FP_TARGET: f64 = 1e-6;
pub const MAX_BUILD_ATTEMPTS: u32 = 8;

const POSITION_DOMAIN: u64 = 0x4446_564c_2d50_4f53;
const ENCODING_DOMAIN: u64 = 0x4446_564c_2d45_4e43;

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("false-positive target {0} must lie in (0, 1)")]
    BadFpTarget(f64),
    #[error("sigma must be a multiple of 8 in [8, 128], got {0}")]
    BadSigma(u16),
    #[error("{items} items exceed the {expected} the filter was sized for")]
    TooManyItems { items: usize, expected: usize },
    #[error("garbled filter construction failed after {0} attempts")]
    ConstructionFailed(u32),
    #[error("malformed filter: {0}")]
    Decode(#[from] DecodeError),
}

/// Bloom sizing for `expected_items` at a target false-positive rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterParams {
    pub expected_items: usize,
    pub fp_target: f64,
    pub m: u64,
    pub k: u16,
}

impl FilterParams {
    /// `m = ⌈−n·ln p / (ln 2)²⌉`, `k = ⌈(m/n)·ln 2⌉`. An empty set is sized as one item.
    pub fn new(expected_items: usize, fp_target: f64) -> Result<Self, FilterError> {
        if !(fp_target > 0.0 && fp_target < 1.0) {
            return Err(FilterError::BadFpTarget(fp_target));
        }
        let n = expected_items.max(1) as f64;
        let ln2 = std::f64::consts::LN_2;
        let m = (-n * fp_target.ln() / (ln2 * ln2)).ceil().max(1.0);
        let k = ((m / n) * ln2).ceil().max(1.0);
        Ok(Self {
            expected_items,
            fp_target,
            m: m as u64,
            k: k as u16,
        })
    }

    /// `(1 − e^(−k·n/m))^k` for `n` inserted items.
    pub fn analytic_fp_rate(&self, inserted: usize) -> f64 {
        analytic_fp_rate(self.m, self.k, inserted)
    }
}

pub fn analytic_fp_rate(m: u64, k: u16, inserted: usize) -> f64 {
    let k = f64::from(k);
    (1.0 - (-k * inserted as f64 / m as f64).exp()).powf(k)
}

/// Distinct filter positions of `id`, in hash order.
pub fn positions(id: &[u8], m: u64, k: u16, hash_seed: u64) -> Vec<u64> {
    let mut h = SipHasher13::new_with_keys(hash_seed, POSITION_DOMAIN);
    h.write(id);
    let digest = h.finish128();
    let h1 = u128::from(digest.h1);
    let h2 = u128::from(digest.h2 | 1);
    let m = u128::from(m);
    let mut out: Vec<u64> = Vec::with_capacity(usize::from(k));
    for i in 0..u128::from(k) {
        let p = ((h1 + i * h2) % m) as u64;
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

/// The `sigma`-bit string an id's garbled shares reconstruct.
pub fn encode_sigma(id: &[u8], sigma: u16, hash_seed: u64) -> Vec<u8> {
    let mut h = SipHasher13::new_with_keys(hash_seed ^ ENCODING_DOMAIN, !ENCODING_DOMAIN);
    h.write(id);
    let bytes = h.finish128().as_bytes();
    bytes[..usize::from(sigma / 8)].to_vec()
}

fn check_sigma(sigma: u16) -> Result<(), FilterError> {
    if sigma == 0 || sigma > 128 || sigma % 8 != 0 {
        return Err(FilterError::BadSigma(sigma));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BloomFilter {
    bits: Vec<u8>,
    m: u64,
    k: u16,
    hash_seed: u64,
}

impl BloomFilter {
    pub fn new(m: u64, k: u16, hash_seed: u64) -> Self {
        Self {
            bits: vec![0; m.div_ceil(8) as usize],
            m,
            k,
            hash_seed,
        }
    }

    pub fn with_params(params: &FilterParams, hash_seed: u64) -> Self {
        Self::new(params.m, params.k, hash_seed)
    }

    /// Every bit set; accepts anything.
    pub fn all_ones(m: u64, k: u16, hash_seed: u64) -> Self {
        let mut bf = Self::new(m, k, hash_seed);
        for i in 0..m {
            bf.set(i);
        }
        bf
    }

    pub fn m(&self) -> u64 {
        self.m
    }

    pub fn k(&self) -> u16 {
        self.k
    }

    pub fn hash_seed(&self) -> u64 {
        self.hash_seed
    }

    pub fn bit(&self, i: u64) -> bool {
        self.bits[(i >> 3) as usize] & (1 << (i & 7)) != 0
    }

    fn set(&mut self, i: u64) {
        self.bits[(i >> 3) as usize] |= 1 << (i & 7);
    }

    pub fn insert(&mut self, id: &[u8]) {
        for p in positions(id, self.m, self.k, self.hash_seed) {
            self.set(p);
        }
    }

    pub fn query(&self, id: &[u8]) -> bool {
        positions(id, self.m, self.k, self.hash_seed)
            .into_iter()
            .all(|p| self.bit(p))
    }

    pub fn popcount(&self) -> u64 {
        self.bits.iter().map(|b| u64::from(b.count_ones())).sum()
    }

    /// Header (m u64, k u16, sigma u16 = 0, hash_seed u64) then `⌈m/8⌉` bytes,
    /// bit `i` at byte `i/8`, mask `1 << (i mod 8)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(20 + self.bits.len());
        wire::put_u64(&mut buf, self.m);
        wire::put_u16(&mut buf, self.k);
        wire::put_u16(&mut buf, 0);
        wire::put_u64(&mut buf, self.hash_seed);
        buf.extend_from_slice(&self.bits);
        buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, FilterError> {
        let mut r = Reader::new(buf);
        let m = r.u64()?;
        let k = r.u16()?;
        let sigma = r.u16()?;
        let hash_seed = r.u64()?;
        if sigma != 0 {
            return Err(DecodeError::Invalid(format!("bloom filter with sigma {sigma}")).into());
        }
        let bits = r.take(m.div_ceil(8) as usize)?.to_vec();
        r.finish()?;
        Ok(Self {
            bits,
            m,
            k,
            hash_seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GarbledBloomFilter {
    slots: Vec<u8>,
    m: u64,
    k: u16,
    sigma: u16,
    hash_seed: u64,
}

impl GarbledBloomFilter {
    /// Encodes `items` so each one's shares XOR to [`encode_sigma`]. Slots
    /// left unassigned are filled with uniform bytes. If an item lands only on
    /// slots already fixed by earlier items with the wrong residue, the build
    /// restarts with `hash_seed + attempt`, up to [`MAX_BUILD_ATTEMPTS`] times.
    pub fn build<I: AsRef<[u8]>>(
        items: &[I],
        params: &FilterParams,
        sigma: u16,
        hash_seed: u64,
        rng_seed: u64,
    ) -> Result<Self, FilterError> {
        check_sigma(sigma)?;
        if items.len() > params.expected_items.max(1) {
            return Err(FilterError::TooManyItems {
                items: items.len(),
                expected: params.expected_items,
            });
        }
        for attempt in 0..MAX_BUILD_ATTEMPTS {
            let seed = hash_seed.wrapping_add(u64::from(attempt));
            let mut rng = ChaCha20Rng::seed_from_u64(rng_seed.wrapping_add(u64::from(attempt)));
            if let Some(gbf) = Self::try_build(items, params, sigma, seed, &mut rng) {
                return Ok(gbf);
            }
            log::warn!("garbled filter build attempt {attempt} collided, reseeding");
        }
        Err(FilterError::ConstructionFailed(MAX_BUILD_ATTEMPTS))
    }

    fn try_build<I: AsRef<[u8]>>(
        items: &[I],
        params: &FilterParams,
        sigma: u16,
        hash_seed: u64,
        rng: &mut ChaCha20Rng,
    ) -> Option<Self> {
        let width = usize::from(sigma / 8);
        let mut gbf = Self {
            slots: vec![0; params.m as usize * width],
            m: params.m,
            k: params.k,
            sigma,
            hash_seed,
        };
        let mut assigned = vec![false; params.m as usize];
        let mut share = vec![0u8; width];

        for item in items {
            let id = item.as_ref();
            let mut residue = encode_sigma(id, sigma, hash_seed);
            let pos = positions(id, gbf.m, gbf.k, hash_seed);
            let mut last_free = None;
            for &p in &pos {
                let p = p as usize;
                if assigned[p] {
                    xor_into(&mut residue, gbf.slot(p as u64));
                } else {
                    if let Some(prev) = last_free.replace(p) {
                        // Every free slot but the last gets a random share.
                        rng.fill_bytes(&mut share);
                        gbf.slot_mut(prev as u64).copy_from_slice(&share);
                        assigned[prev] = true;
                        xor_into(&mut residue, &share);
                    }
                }
            }
            match last_free {
                Some(p) => {
                    gbf.slot_mut(p as u64).copy_from_slice(&residue);
                    assigned[p] = true;
                }
                // All positions were already fixed: fine only if they happen to
                // reconstruct the encoding (duplicates do).
                None if residue.iter().all(|&b| b == 0) => {}
                None => return None,
            }
        }

        for (i, taken) in assigned.iter().enumerate() {
            if !taken {
                rng.fill_bytes(gbf.slot_mut(i as u64));
            }
        }
        Some(gbf)
    }

    /// A filter holding only random slots.
    pub fn random(params: &FilterParams, sigma: u16, hash_seed: u64, rng_seed: u64) -> Self {
        let width = usize::from(sigma / 8);
        let mut slots = vec![0; params.m as usize * width];
        ChaCha20Rng::seed_from_u64(rng_seed).fill_bytes(&mut slots);
        Self {
            slots,
            m: params.m,
            k: params.k,
            sigma,
            hash_seed,
        }
    }

    pub fn m(&self) -> u64 {
        self.m
    }

    pub fn k(&self) -> u16 {
        self.k
    }

    pub fn sigma(&self) -> u16 {
        self.sigma
    }

    pub fn hash_seed(&self) -> u64 {
        self.hash_seed
    }

    pub fn slot_width(&self) -> usize {
        usize::from(self.sigma / 8)
    }

    pub fn slot(&self, i: u64) -> &[u8] {
        let w = self.slot_width();
        let i = i as usize;
        &self.slots[i * w..(i + 1) * w]
    }

    pub fn slot_mut(&mut self, i: u64) -> &mut [u8] {
        let w = self.slot_width();
        let i = i as usize;
        &mut self.slots[i * w..(i + 1) * w]
    }

    /// True iff the XOR of `id`'s slots equals its encoding.
    pub fn query(&self, id: &[u8]) -> bool {
        let mut acc = encode_sigma(id, self.sigma, self.hash_seed);
        for p in positions(id, self.m, self.k, self.hash_seed) {
            xor_into(&mut acc, self.slot(p));
        }
        acc.iter().all(|&b| b == 0)
    }

    /// Same header as [`BloomFilter::to_bytes`] (with the real sigma), then
    /// `m · sigma/8` slot bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(20 + self.slots.len());
        wire::put_u64(&mut buf, self.m);
        wire::put_u16(&mut buf, self.k);
        wire::put_u16(&mut buf, self.sigma);
        wire::put_u64(&mut buf, self.hash_seed);
        buf.extend_from_slice(&self.slots);
        buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, FilterError> {
        let mut r = Reader::new(buf);
        let m = r.u64()?;
        let k = r.u16()?;
        let sigma = r.u16()?;
        let hash_seed = r.u64()?;
        check_sigma(sigma)?;
        let slots = r.take(m as usize * usize::from(sigma / 8))?.to_vec();
        r.finish()?;
        Ok(Self {
            slots,
            m,
            k,
            sigma,
            hash_seed,
        })
    }
}

fn xor_into(acc: &mut [u8], other: &[u8]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a ^= b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, RngCore};

    fn ids(range: std::ops::Range<u32>) -> Vec<Vec<u8>> {
        range.map(|i| format!("id-{i}").into_bytes()).collect()
    }

    #[test]
    fn sizing_formula() {
        let p = FilterParams::new(1000, 0.01).unwrap();
        // 1000 · ln(100) / ln(2)² = 9585.06
        assert_eq!(p.m, 9586);
        // 9.586 · ln 2 = 6.64
        assert_eq!(p.k, 7);
        assert!(FilterParams::new(10, 0.0).is_err());
        assert!(FilterParams::new(10, 1.0).is_err());
        let empty = FilterParams::new(0, 1e-6).unwrap();
        assert!(empty.m >= 1 && empty.k >= 1);
    }

    #[test]
    fn positions_are_distinct_and_in_range() {
        for id in ids(0..200) {
            let pos = positions(&id, 17, 20, 3);
            assert!(pos.iter().all(|&p| p < 17));
            let mut sorted = pos.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), pos.len());
        }
    }

    #[test]
    fn bloom_basics() {
        let mut bf = BloomFilter::new(1024, 5, 1);
        assert!(!bf.query(b"x"));
        bf.insert(b"x");
        assert!(bf.query(b"x"));
        assert!(bf.popcount() <= 5);
        let full = BloomFilter::all_ones(100, 4, 9);
        assert!(full.query(b"anything"));
        assert!(full.query(b""));
    }

    #[test]
    fn bloom_fp_rate_within_bounds() {
        let params = FilterParams::new(1000, 0.01).unwrap();
        let mut bf = BloomFilter::with_params(&params, 77);
        let members = ids(0..1000);
        for id in &members {
            bf.insert(id);
        }
        assert!(members.iter().all(|id| bf.query(id)));
        assert!(bf.popcount() <= u64::from(params.k) * 1000);
        let trials = 100_000u32;
        let fps = ids(1_000_000..1_000_000 + trials)
            .iter()
            .filter(|id| bf.query(id))
            .count();
        let rate = fps as f64 / f64::from(trials);
        assert!((0.001..=0.03).contains(&rate), "fp rate {rate}");
        let analytic = params.analytic_fp_rate(1000);
        assert!(rate <= 3.0 * analytic && rate >= analytic / 3.0, "{rate} vs {analytic}");
    }

    #[test]
    fn gbf_singleton_reconstructs() {
        let params = FilterParams::new(1, 1e-6).unwrap();
        let gbf = GarbledBloomFilter::build(&[b"solo"], &params, 128, 5, 6).unwrap();
        let mut acc = vec![0u8; 16];
        for p in positions(b"solo", gbf.m(), gbf.k(), gbf.hash_seed()) {
            xor_into(&mut acc, gbf.slot(p));
        }
        assert_eq!(acc, encode_sigma(b"solo", 128, gbf.hash_seed()));
        assert!(gbf.query(b"solo"));
    }

    #[test]
    fn gbf_members_and_non_members() {
        let members = ids(0..2000);
        let params = FilterParams::new(members.len(), 1e-6).unwrap();
        let gbf = GarbledBloomFilter::build(&members, &params, 128, 11, 12).unwrap();
        assert!(members.iter().all(|id| gbf.query(id)));
        let false_accepts = ids(10_000..20_000).iter().filter(|id| gbf.query(id)).count();
        assert_eq!(false_accepts, 0);
    }

    #[test]
    fn gbf_empty_set_rejects() {
        let params = FilterParams::new(0, 1e-6).unwrap();
        let empty: Vec<Vec<u8>> = Vec::new();
        let gbf = GarbledBloomFilter::build(&empty, &params, 128, 1, 2).unwrap();
        assert!(ids(0..1000).iter().all(|id| !gbf.query(id)));
    }

    #[test]
    fn gbf_wrong_seed_rejects() {
        let members = ids(0..100);
        let params = FilterParams::new(100, 1e-6).unwrap();
        let gbf = GarbledBloomFilter::build(&members, &params, 128, 1, 2).unwrap();
        let other = GarbledBloomFilter::build(&members, &params, 128, 99, 2).unwrap();
        let mut swapped = other.clone();
        swapped.slots = gbf.slots.clone();
        assert!(members.iter().all(|id| !swapped.query(id)));
    }

    #[test]
    fn gbf_masking_one_share_breaks_membership() {
        let members = ids(0..300);
        let params = FilterParams::new(300, 1e-6).unwrap();
        let gbf = GarbledBloomFilter::build(&members, &params, 128, 4, 4).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for id in &members {
            let pos = positions(id, gbf.m(), gbf.k(), gbf.hash_seed());
            let victim = pos[rng.gen_range(0..pos.len())];
            let mut damaged = gbf.clone();
            rng.fill_bytes(damaged.slot_mut(victim));
            assert!(!damaged.query(id));
        }
    }

    #[test]
    fn duplicates_are_harmless() {
        let items = vec![b"a".to_vec(), b"b".to_vec(), b"a".to_vec()];
        let params = FilterParams::new(3, 1e-6).unwrap();
        let gbf = GarbledBloomFilter::build(&items, &params, 64, 1, 1).unwrap();
        assert!(gbf.query(b"a") && gbf.query(b"b"));
    }

    #[test]
    fn rejects_bad_sigma_and_oversize() {
        let params = FilterParams::new(1, 0.1).unwrap();
        assert_eq!(
            GarbledBloomFilter::build(&[b"a"], &params, 12, 0, 0).unwrap_err(),
            FilterError::BadSigma(12)
        );
        assert!(matches!(
            GarbledBloomFilter::build(&[b"a", b"b"], &params, 128, 0, 0),
            Err(FilterError::TooManyItems { .. })
        ));
    }

    #[test]
    fn tiny_filter_exhausts_retries() {
        // One slot, one hash: the second distinct item always collides.
        let params = FilterParams {
            expected_items: 2,
            fp_target: 0.5,
            m: 1,
            k: 1,
        };
        assert_eq!(
            GarbledBloomFilter::build(&[b"a", b"b"], &params, 128, 0, 0).unwrap_err(),
            FilterError::ConstructionFailed(MAX_BUILD_ATTEMPTS)
        );
    }

    #[test]
    fn serialization_layout() {
        let mut bf = BloomFilter::new(10, 3, 0x0102);
        bf.insert(b"q");
        let bytes = bf.to_bytes();
        assert_eq!(&bytes[..8], &10u64.to_be_bytes());
        assert_eq!(&bytes[8..10], &3u16.to_be_bytes());
        assert_eq!(&bytes[10..12], &0u16.to_be_bytes());
        assert_eq!(&bytes[12..20], &0x0102u64.to_be_bytes());
        assert_eq!(bytes.len(), 22);
        assert_eq!(BloomFilter::from_bytes(&bytes).unwrap(), bf);

        let params = FilterParams::new(4, 0.01).unwrap();
        let gbf = GarbledBloomFilter::build(&ids(0..4), &params, 64, 2, 3).unwrap();
        let bytes = gbf.to_bytes();
        assert_eq!(bytes.len(), 20 + params.m as usize * 8);
        assert_eq!(GarbledBloomFilter::from_bytes(&bytes).unwrap(), gbf);
        assert!(GarbledBloomFilter::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn no_false_negatives(set in proptest::collection::btree_set(proptest::collection::vec(any::<u8>(), 0..12), 0..64),
                              seed in any::<u64>()) {
            let items: Vec<Vec<u8>> = set.into_iter().collect();
            let params = FilterParams::new(items.len(), 1e-4).unwrap();
            let gbf = GarbledBloomFilter::build(&items, &params, 128, seed, seed ^ 1).unwrap();
            let mut bf = BloomFilter::with_params(&params, gbf.hash_seed());
            for id in &items {
                bf.insert(id);
            }
            for id in &items {
                prop_assert!(gbf.query(id));
                prop_assert!(bf.query(id));
            }
            let again = GarbledBloomFilter::build(&items, &params, 128, seed, seed ^ 1).unwrap();
            prop_assert_eq!(again, gbf);
        }
    }
}
