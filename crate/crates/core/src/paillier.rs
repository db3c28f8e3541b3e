//! Paillier cryptosystem with a signed fixed-point codec.
//!
//! Ciphertexts multiply to add their plaintexts and exponentiate by a
//! plaintext scalar to scale them, both modulo `n`. The generator is fixed to
//! `g = n + 1`, so `g^m mod n² = 1 + m·n` and encryption costs one modular
//! exponentiation (the `r^n` blinding factor).
//!
//! Short keys (128 bits is the default operating point of the benchmarks) are
//! weak; they exist to measure overhead, not to protect anything.

use std::fmt;
use std::hash::Hasher;

use num_bigint::{BigInt, BigUint, RandBigInt, Sign};
use num_integer::Integer;
use num_traits::{FromPrimitive, One, Signed, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use siphasher::sip::SipHasher13;
use thiserror::Error;

use crate::wire::{self, DecodeError, Reader};

/// Key lengths accepted by [`keygen`].
pub const SUPPORTED_KEY_BITS: [u32; 6] = [64, 128, 256, 512, 1024, 2048];
pub const DEFAULT_KEY_BITS: u32 = 128;
pub const DEFAULT_FRAC_BITS: u32 = 16;

/// 40 rounds bound the error of a composite slipping through at 2^-80.
const MILLER_RABIN_ROUNDS: usize = 40;

const SMALL_PRIMES: [u32; 24] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PaillierError {
    #[error("unsupported key length {0} bits (supported: 64, 128, 256, 512, 1024, 2048)")]
    UnsupportedKeyBits(u32),
    #[error("plaintext must be below the modulus")]
    PlaintextOutOfRange,
    #[error("ciphertext value must be below n²")]
    CiphertextOutOfRange,
    #[error("ciphertext was produced under key {found}, expected {expected}")]
    KeyMismatch { expected: KeyId, found: KeyId },
    #[error("{0} is not prime")]
    NotPrime(BigUint),
    #[error("p and q must differ")]
    EqualPrimes,
    #[error("value {value} does not fit the signed fixed-point range of the key")]
    Overflow { value: f64 },
    #[error("cannot encode non-finite value {0}")]
    NonFinite(f64),
    #[error("value has no modular inverse")]
    NotInvertible,
}

/// Fingerprint of a public modulus. Ciphertexts carry it so that operations
/// mixing keys fail loudly instead of producing garbage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyId(pub u64);

impl KeyId {
    fn of_modulus(n: &BigUint) -> Self {
        let mut h = SipHasher13::new_with_keys(0x5041_494c_4c49_4552, 0x4b45_595f_4944_0001);
        h.write(&n.to_bytes_be());
        KeyId(h.finish())
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
    g: BigUint,
    bits: u32,
    id: KeyId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrivateKey {
    lambda: BigUint,
    mu: BigUint,
    p: BigUint,
    q: BigUint,
    crt: Crt,
    public: PublicKey,
}

/// Per-prime decryption constants.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Crt {
    p_sq: BigUint,
    q_sq: BigUint,
    hp: BigUint,
    hq: BigUint,
    q_inv_p: BigUint,
}

impl Crt {
    fn new(p: &BigUint, q: &BigUint, g: &BigUint) -> Self {
        let p_sq = p * p;
        let q_sq = q * q;
        let h = |x: &BigUint, x_sq: &BigUint| {
            let l = (g.modpow(&(x - 1u32), x_sq) - 1u32) / x;
            l.modinv(x).expect("L_x(g^(x-1)) is invertible for g = n + 1")
        };
        Self {
            hp: h(p, &p_sq),
            hq: h(q, &q_sq),
            q_inv_p: q.modinv(p).expect("distinct primes"),
            p_sq,
            q_sq,
        }
    }
}

/// Fixed-base powers of one ciphertext value, from [`PublicKey::pow_table`].
#[derive(Clone, Debug)]
pub struct PowTable {
    windows: Vec<Vec<BigUint>>,
}

impl PowTable {
    pub fn max_bits(&self) -> u64 {
        self.windows.len() as u64 * 4
    }

    /// Raw value of `c^k mod n²`. `k` must fit the table.
    pub fn pow(&self, pk: &PublicKey, k: &BigUint) -> Result<BigUint, PaillierError> {
        if k.bits() > self.max_bits() {
            return Err(PaillierError::PlaintextOutOfRange);
        }
        let mut acc: Option<BigUint> = None;
        for (i, byte) in k.to_bytes_le().into_iter().enumerate() {
            for (w, digit) in [(2 * i, byte & 15), (2 * i + 1, byte >> 4)] {
                if digit == 0 {
                    continue;
                }
                let f = &self.windows[w][digit as usize];
                acc = Some(match acc {
                    None => f.clone(),
                    Some(a) => a * f % &pk.n_squared,
                });
            }
        }
        Ok(acc.unwrap_or_else(BigUint::one))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ciphertext {
    value: BigUint,
    key_id: KeyId,
}

impl Ciphertext {
    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    /// Rebuilds a ciphertext received off the wire, checking it against `pk`.
    pub fn from_value(pk: &PublicKey, value: BigUint) -> Result<Self, PaillierError> {
        if value >= pk.n_squared {
            return Err(PaillierError::CiphertextOutOfRange);
        }
        Ok(Self {
            value,
            key_id: pk.id,
        })
    }
}

/// Generates a keypair whose modulus has `bits` bits. Deterministic in `seed`.
pub fn keygen(bits: u32, seed: u64) -> Result<(PublicKey, PrivateKey), PaillierError> {
    if !SUPPORTED_KEY_BITS.contains(&bits) {
        return Err(PaillierError::UnsupportedKeyBits(bits));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let half = u64::from(bits / 2);
    loop {
        let p = random_prime(half, &mut rng);
        let q = random_prime(half, &mut rng);
        if p == q {
            continue;
        }
        let phi = (&p - 1u32) * (&q - 1u32);
        if !(&p * &q).gcd(&phi).is_one() {
            continue;
        }
        let sk = PrivateKey::from_primes_unchecked(p, q, bits);
        return Ok((sk.public.clone(), sk));
    }
}

/// Random prime with exactly `bits` bits and its top two bits set, so the
/// product of two of them has exactly `2·bits` bits.
fn random_prime<R: Rng + ?Sized>(bits: u64, rng: &mut R) -> BigUint {
    loop {
        let mut candidate = rng.gen_biguint(bits);
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(bits - 2, true);
        candidate.set_bit(0, true);
        if is_probable_prime(&candidate, MILLER_RABIN_ROUNDS, rng) {
            return candidate;
        }
    }
}

/// Miller–Rabin with `rounds` random bases, preceded by trial division.
pub fn is_probable_prime<R: Rng + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    for &sp in SMALL_PRIMES.iter() {
        let sp = BigUint::from(sp);
        if *n == sp {
            return true;
        }
        if (n % &sp).is_zero() {
            return false;
        }
    }
    if n.is_even() {
        return *n == two;
    }

    let n_minus_one = n - 1u32;
    let s = n_minus_one.trailing_zeros().unwrap_or(0);
    let d = &n_minus_one >> s;
    let upper = n - 1u32;

    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &upper);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_one {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_one {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

impl PrivateKey {
    /// Builds a keypair from caller-chosen primes. Used for toy keys such as
    /// `p = 11, q = 13` that fall below the [`keygen`] minimum.
    pub fn from_primes(p: BigUint, q: BigUint) -> Result<Self, PaillierError> {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        for x in [&p, &q] {
            if !is_probable_prime(x, MILLER_RABIN_ROUNDS, &mut rng) {
                return Err(PaillierError::NotPrime(x.clone()));
            }
        }
        if p == q {
            return Err(PaillierError::EqualPrimes);
        }
        if !(&p * &q).gcd(&((&p - 1u32) * (&q - 1u32))).is_one() {
            return Err(PaillierError::NotInvertible);
        }
        let bits = (&p * &q).bits() as u32;
        Ok(Self::from_primes_unchecked(p, q, bits))
    }

    fn from_primes_unchecked(p: BigUint, q: BigUint, bits: u32) -> Self {
        let n = &p * &q;
        let lambda = (&p - 1u32).lcm(&(&q - 1u32));
        // With g = n + 1, L(g^λ mod n²) = λ mod n, so μ = λ⁻¹ mod n.
        let mu = (&lambda % &n)
            .modinv(&n)
            .expect("gcd(λ, n) = 1 for distinct primes of equal size");
        let public = PublicKey::from_modulus(n, bits);
        Self {
            lambda,
            mu,
            crt: Crt::new(&p, &q, &public.g),
            p,
            q,
            public,
        }
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public
    }

    pub fn p(&self) -> &BigUint {
        &self.p
    }

    pub fn q(&self) -> &BigUint {
        &self.q
    }

    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    pub fn mu(&self) -> &BigUint {
        &self.mu
    }

    /// `L(c^λ mod n²) · μ mod n`, with `L(x) = (x − 1) / n`. Evaluated
    /// modulo `p²` and `q²` separately and recombined.
    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint, PaillierError> {
        self.public.check(c)?;
        let Crt {
            p_sq,
            q_sq,
            hp,
            hq,
            q_inv_p,
        } = &self.crt;
        let (p, q) = (&self.p, &self.q);
        let mp = ((c.value.modpow(&(p - 1u32), p_sq) - 1u32) / p) * hp % p;
        let mq = ((c.value.modpow(&(q - 1u32), q_sq) - 1u32) / q) * hq % q;
        let diff = (mp + p - &mq % p) % p;
        Ok(mq + q * (diff * q_inv_p % p))
    }

    /// Textbook decryption through `λ` and `μ` over `n²`.
    pub fn decrypt_textbook(&self, c: &Ciphertext) -> Result<BigUint, PaillierError> {
        let pk = &self.public;
        pk.check(c)?;
        let u = c.value.modpow(&self.lambda, &pk.n_squared);
        let l = (u - 1u32) / &pk.n;
        Ok((l * &self.mu) % &pk.n)
    }

    /// Key file body: the two primes, in the big-natural wire encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        wire::put_u32(&mut buf, self.public.bits);
        wire::put_biguint(&mut buf, &self.p);
        wire::put_biguint(&mut buf, &self.q);
        buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let bits = r.u32()?;
        let p = r.biguint()?;
        let q = r.biguint()?;
        r.finish()?;
        let sk = Self::from_primes(p, q).map_err(|e| DecodeError::Invalid(e.to_string()))?;
        Ok(Self::from_primes_unchecked(sk.p, sk.q, bits))
    }
}

impl PublicKey {
    fn from_modulus(n: BigUint, bits: u32) -> Self {
        let n_squared = &n * &n;
        let g = &n + 1u32;
        let id = KeyId::of_modulus(&n);
        Self {
            n,
            n_squared,
            g,
            bits,
            id,
        }
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    pub fn g(&self) -> &BigUint {
        &self.g
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn id(&self) -> KeyId {
        self.id
    }

    fn check(&self, c: &Ciphertext) -> Result<(), PaillierError> {
        if c.key_id != self.id {
            return Err(PaillierError::KeyMismatch {
                expected: self.id,
                found: c.key_id,
            });
        }
        if c.value >= self.n_squared {
            return Err(PaillierError::CiphertextOutOfRange);
        }
        Ok(())
    }

    /// `c = g^m · r^n mod n²` with `r` drawn uniformly from the units of `Z_n`.
    pub fn encrypt<R: Rng + ?Sized>(
        &self,
        m: &BigUint,
        rng: &mut R,
    ) -> Result<Ciphertext, PaillierError> {
        if *m >= self.n {
            return Err(PaillierError::PlaintextOutOfRange);
        }
        let one = BigUint::one();
        let r = loop {
            let r = rng.gen_biguint_range(&one, &self.n);
            if r.gcd(&self.n).is_one() {
                break r;
            }
        };
        Ok(self.encrypt_with_nonce(m, &r))
    }

    fn encrypt_with_nonce(&self, m: &BigUint, r: &BigUint) -> Ciphertext {
        let gm = (m * &self.n + 1u32) % &self.n_squared;
        let rn = r.modpow(&self.n, &self.n_squared);
        Ciphertext {
            value: (gm * rn) % &self.n_squared,
            key_id: self.id,
        }
    }

    /// Decrypts to `m1 + m2 mod n`.
    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, PaillierError> {
        self.check(a)?;
        self.check(b)?;
        Ok(Ciphertext {
            value: (&a.value * &b.value) % &self.n_squared,
            key_id: self.id,
        })
    }

    /// Decrypts to `m · k mod n`.
    pub fn scalar_mul(&self, c: &Ciphertext, k: &BigUint) -> Result<Ciphertext, PaillierError> {
        self.check(c)?;
        if *k >= self.n {
            return Err(PaillierError::PlaintextOutOfRange);
        }
        Ok(Ciphertext {
            value: c.value.modpow(k, &self.n_squared),
            key_id: self.id,
        })
    }

    /// Scalar multiplication by a signed integer. A negative `k` exponentiates
    /// by `|k|` and inverts, which decrypts like `n − |k|` but keeps the
    /// exponent short.
    pub fn scalar_mul_signed(
        &self,
        c: &Ciphertext,
        k: &BigInt,
    ) -> Result<Ciphertext, PaillierError> {
        self.check(c)?;
        let magnitude = k.magnitude();
        if *magnitude >= self.n {
            return Err(PaillierError::PlaintextOutOfRange);
        }
        let value = c.value.modpow(magnitude, &self.n_squared);
        let value = if k.sign() == Sign::Minus {
            value
                .modinv(&self.n_squared)
                .ok_or(PaillierError::NotInvertible)?
        } else {
            value
        };
        Ok(Ciphertext {
            value,
            key_id: self.id,
        })
    }

    /// Decrypts to `−m mod n`.
    pub fn negate(&self, c: &Ciphertext) -> Result<Ciphertext, PaillierError> {
        self.check(c)?;
        let value = c
            .value
            .modinv(&self.n_squared)
            .ok_or(PaillierError::NotInvertible)?;
        Ok(Ciphertext {
            value,
            key_id: self.id,
        })
    }

    /// Precomputes powers of `c` so it can be raised to many exponents of
    /// at most `max_bits` bits with one multiplication per 4-bit digit.
    pub fn pow_table(&self, c: &Ciphertext, max_bits: u64) -> Result<PowTable, PaillierError> {
        self.check(c)?;
        let n_sq = &self.n_squared;
        let n_windows = max_bits.div_ceil(4).max(1) as usize;
        let mut windows = Vec::with_capacity(n_windows);
        let mut base = c.value.clone();
        for k in 0..n_windows {
            let mut row = Vec::with_capacity(16);
            row.push(BigUint::one());
            row.push(base.clone());
            for d in 2..16 {
                let next = &row[d - 1] * &base % n_sq;
                row.push(next);
            }
            if k + 1 < n_windows {
                base = &row[15] * &base % n_sq;
            }
            windows.push(row);
        }
        Ok(PowTable { windows })
    }

    /// Encryption of zero with no randomness. Neutral element of [`Self::add`].
    pub fn zero_ciphertext(&self) -> Ciphertext {
        Ciphertext {
            value: BigUint::one(),
            key_id: self.id,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        wire::put_u32(&mut buf, self.bits);
        wire::put_biguint(&mut buf, &self.n);
        buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let pk = Self::read(&mut r)?;
        r.finish()?;
        Ok(pk)
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let bits = r.u32()?;
        let n = r.biguint()?;
        if n.bits() < 2 {
            return Err(DecodeError::Invalid("modulus too small".into()));
        }
        Ok(Self::from_modulus(n, bits))
    }
}

/// Maps reals onto `Z_n`: `v ↦ round(v·2^f) mod n`, negatives in the upper
/// half of the ring.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedPointCodec {
    frac_bits: u32,
    n: BigUint,
    half_n: BigUint,
}

impl FixedPointCodec {
    pub fn new(pk: &PublicKey, frac_bits: u32) -> Self {
        Self {
            frac_bits,
            n: pk.n.clone(),
            half_n: &pk.n >> 1u32,
        }
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn half_n(&self) -> &BigUint {
        &self.half_n
    }

    /// Scale factor `2^f` as a real.
    pub fn scale(&self) -> f64 {
        (self.frac_bits as f64).exp2()
    }

    /// Rounds `v·2^f` to the nearest integer without reducing it.
    pub fn quantize(&self, v: f64) -> Result<BigInt, PaillierError> {
        self.quantize_with(v, self.frac_bits)
    }

    fn quantize_with(&self, v: f64, frac_bits: u32) -> Result<BigInt, PaillierError> {
        if !v.is_finite() {
            return Err(PaillierError::NonFinite(v));
        }
        let scaled = (v * (frac_bits as f64).exp2()).round();
        let x = BigInt::from_f64(scaled).ok_or(PaillierError::NonFinite(v))?;
        if *x.magnitude() >= self.half_n {
            return Err(PaillierError::Overflow { value: v });
        }
        Ok(x)
    }

    pub fn encode(&self, v: f64) -> Result<BigUint, PaillierError> {
        let x = self.quantize(v)?;
        self.encode_int(&x)
    }

    /// Embeds a signed integer into `Z_n`.
    pub fn encode_int(&self, x: &BigInt) -> Result<BigUint, PaillierError> {
        let magnitude = x.magnitude();
        if *magnitude >= self.half_n {
            return Err(PaillierError::Overflow {
                value: x.to_f64().unwrap_or(f64::INFINITY),
            });
        }
        Ok(match x.sign() {
            Sign::Minus => &self.n - magnitude,
            _ => magnitude.clone(),
        })
    }

    /// Inverse of [`Self::encode_int`]: residues at or above `⌊n/2⌋` are negative.
    pub fn decode_int(&self, m: &BigUint) -> BigInt {
        let m = m % &self.n;
        if m >= self.half_n {
            -BigInt::from_biguint(Sign::Plus, &self.n - m)
        } else {
            BigInt::from_biguint(Sign::Plus, m)
        }
    }

    pub fn decode(&self, m: &BigUint) -> f64 {
        self.decode_scaled(m, self.frac_bits)
    }

    /// Decodes a residue carrying `frac_bits` fractional bits, e.g. `2f` after
    /// one homomorphic multiplication.
    pub fn decode_scaled(&self, m: &BigUint, frac_bits: u32) -> f64 {
        let x = self.decode_int(m);
        int_to_f64(&x) / (frac_bits as f64).exp2()
    }
}

/// Correctly rounded for magnitudes above 2^53, unlike a plain digit fold.
fn int_to_f64(x: &BigInt) -> f64 {
    let bits = x.magnitude().bits();
    if bits <= 53 {
        return x.to_f64().unwrap_or(0.0);
    }
    // Keep 64 significant bits; the final f64 conversion rounds once.
    let shift = bits - 64;
    let top = (x.magnitude() >> shift).to_u64().unwrap_or(u64::MAX);
    let v = (top as f64) * (shift as f64).exp2();
    if x.is_negative() {
        -v
    } else {
        v
    }
}
