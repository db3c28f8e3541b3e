//! Masked homomorphic exchange for the interactive layer.
//!
//! The passive worker encrypts its bottom output under its own key. The
//! active worker multiplies the ciphertexts by its plaintext weight slice,
//! adds a fresh random mask under encryption and sends the result back. The
//! passive worker decrypts and returns `value + mask`; only the active worker
//! can remove the mask.
//!
//! Ciphertexts carry their fixed-point scale in the type: [`Single`] cells
//! hold `x·2^f`, [`Double`] cells hold products at `2^(2f)`.

use std::marker::PhantomData;

use num_bigint::{BigInt, BigUint};
use num_traits::{Signed, Zero};
use rand::Rng;
use thiserror::Error;

use crate::nn::{NnError, Tensor2};
use crate::paillier::{Ciphertext, FixedPointCodec, KeyId, PaillierError, PrivateKey, PublicKey};
use crate::wire::{self, DecodeError, Reader};

#[derive(Debug, Error)]
pub enum SecureError {
    #[error(transparent)]
    Paillier(#[from] PaillierError),
    #[error(transparent)]
    Shape(#[from] NnError),
    #[error("ciphertexts are under key {found}, expected {expected}")]
    KeyMismatch { expected: KeyId, found: KeyId },
    #[error("scale tag {found}, expected {expected}")]
    ScaleMismatch { expected: u8, found: u8 },
    #[error("step {found} received while step {expected} is in flight")]
    Desync { expected: u64, found: u64 },
    #[error("{0}")]
    Overflow(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// Largest activation magnitude the overflow check assumes for encrypted
/// inputs of [`homomorphic_linear`].
pub const ACTIVATION_BOUND: f64 = 4096.0;

/// Masks are drawn from `[−2^20, 2^20]` on the `2^(−2f)` grid, shrunk when
/// `2f + 20` would exceed the 52 bits an f64 holds exactly.
pub const MASK_BITS: u32 = 20;

pub trait ScaleTag: Clone + std::fmt::Debug + PartialEq {
    const TAG: u8;
    /// Multiple of the codec's `f`.
    const FACTOR: u32;
}

/// Cells hold `x·2^f`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Single;

/// Cells hold `x·2^(2f)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Double;

impl ScaleTag for Single {
    const TAG: u8 = 1;
    const FACTOR: u32 = 1;
}

impl ScaleTag for Double {
    const TAG: u8 = 2;
    const FACTOR: u32 = 2;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Producer {
    Active,
    Passive,
}

impl Producer {
    fn tag(self) -> u8 {
        match self {
            Producer::Active => 0,
            Producer::Passive => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self, DecodeError> {
        match t {
            0 => Ok(Producer::Active),
            1 => Ok(Producer::Passive),
            t => Err(DecodeError::Invalid(format!("producer tag {t}"))),
        }
    }
}

/// A `rows × cols` grid of ciphertexts under one key.
#[derive(Clone, Debug, PartialEq)]
pub struct EncryptedActivation<S> {
    rows: usize,
    cols: usize,
    cells: Vec<Ciphertext>,
    key_id: KeyId,
    frac_bits: u32,
    producer: Producer,
    _scale: PhantomData<S>,
}

impl<S: ScaleTag> EncryptedActivation<S> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    pub fn producer(&self) -> Producer {
        self.producer
    }

    /// Base fractional bits `f`; the cells carry `f · S::FACTOR`.
    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn cell(&self, r: usize, c: usize) -> &Ciphertext {
        &self.cells[r * self.cols + c]
    }

    pub fn transpose(&self) -> Self {
        let mut cells = Vec::with_capacity(self.cells.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                cells.push(self.cell(r, c).clone());
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            cells,
            ..self.clone()
        }
    }

    fn check_key(&self, pk: &PublicKey) -> Result<(), SecureError> {
        if self.key_id != pk.id() {
            return Err(SecureError::KeyMismatch {
                expected: pk.id(),
                found: self.key_id,
            });
        }
        Ok(())
    }

    pub fn write(&self, buf: &mut Vec<u8>) {
        wire::put_u32(buf, self.rows as u32);
        wire::put_u32(buf, self.cols as u32);
        wire::put_u8(buf, S::TAG);
        wire::put_u8(buf, self.frac_bits as u8);
        wire::put_u8(buf, self.producer.tag());
        wire::put_u64(buf, self.key_id.0);
        for c in &self.cells {
            wire::put_biguint(buf, c.value());
        }
    }

    /// Reads a grid written by [`Self::write`], validating every cell
    /// against `pk`.
    pub fn read(r: &mut Reader<'_>, pk: &PublicKey) -> Result<Self, SecureError> {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let tag = r.u8()?;
        if tag != S::TAG {
            return Err(SecureError::ScaleMismatch {
                expected: S::TAG,
                found: tag,
            });
        }
        let frac_bits = u32::from(r.u8()?);
        let producer = Producer::from_tag(r.u8()?)?;
        let key_id = KeyId(r.u64()?);
        if key_id != pk.id() {
            return Err(SecureError::KeyMismatch {
                expected: pk.id(),
                found: key_id,
            });
        }
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| DecodeError::Invalid("grid too large".into()))?;
        let mut cells = Vec::with_capacity(count.min(r.remaining() / 4 + 1));
        for _ in 0..count {
            cells.push(Ciphertext::from_value(pk, r.biguint()?)?);
        }
        Ok(Self {
            rows,
            cols,
            cells,
            key_id,
            frac_bits,
            producer,
            _scale: PhantomData,
        })
    }
}

/// Cellwise `encrypt(encode(x))`.
pub fn encrypt_activation<R: Rng + ?Sized>(
    act: &Tensor2,
    pk: &PublicKey,
    codec: &FixedPointCodec,
    producer: Producer,
    rng: &mut R,
) -> Result<EncryptedActivation<Single>, SecureError> {
    let cells = act
        .data()
        .iter()
        .map(|&v| {
            let m = codec.encode(v)?;
            pk.encrypt(&m, rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EncryptedActivation {
        rows: act.rows(),
        cols: act.cols(),
        cells,
        key_id: pk.id(),
        frac_bits: codec.frac_bits(),
        producer,
        _scale: PhantomData,
    })
}

/// Owner-side decryption of a single-scale grid.
pub fn decrypt_activation(
    enc: &EncryptedActivation<Single>,
    sk: &PrivateKey,
    codec: &FixedPointCodec,
) -> Result<Tensor2, SecureError> {
    enc.check_key(sk.public_key())?;
    let data = enc
        .cells
        .iter()
        .map(|c| Ok(codec.decode_scaled(&sk.decrypt(c)?, enc.frac_bits)))
        .collect::<Result<Vec<_>, SecureError>>()?;
    Ok(Tensor2::from_vec(enc.rows, enc.cols, data)?)
}

/// Additive masks on the `2^(−2f)` grid, kept by the requesting party.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskState {
    /// Mask values as reals; exactly `ints / 2^(2f)`.
    pub noise: Tensor2,
    ints: Vec<BigInt>,
    frac_bits: u32,
}

impl MaskState {
    pub fn zeros(rows: usize, cols: usize, frac_bits: u32) -> Self {
        Self {
            noise: Tensor2::zeros(rows, cols),
            ints: vec![BigInt::zero(); rows * cols],
            frac_bits,
        }
    }

    /// Uniform masks over `[−2^b, 2^b]` with `b = min(20, 52 − 2f)`.
    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, frac_bits: u32, rng: &mut R) -> Self {
        let total = 2 * frac_bits;
        let bits = MASK_BITS.min(52u32.saturating_sub(total));
        let bound: i64 = 1i64 << (bits + total).min(62);
        let scale = f64::from(total).exp2();
        let mut ints = Vec::with_capacity(rows * cols);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let v = rng.gen_range(-bound..=bound);
            ints.push(BigInt::from(v));
            data.push(v as f64 / scale);
        }
        Self {
            noise: Tensor2::from_vec(rows, cols, data).expect("sized above"),
            ints,
            frac_bits,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.noise.shape()
    }

    /// Removes the mask from values returned by the decrypting party.
    pub fn unmask(&self, masked: &Tensor2) -> Result<Tensor2, SecureError> {
        Ok(masked.sub(&self.noise)?)
    }
}

/// `cell(b, o) = Σ_i W[o,i] ⊗ enc[b,i] ⊕ Enc(mask[b,o])`, at scale `2^(2f)`.
///
/// Terms with negative weights are multiplied together first and inverted
/// once per cell.
pub fn homomorphic_linear<R: Rng + ?Sized>(
    enc: &EncryptedActivation<Single>,
    weights: &Tensor2,
    mask: &MaskState,
    pk: &PublicKey,
    codec: &FixedPointCodec,
    rng: &mut R,
) -> Result<EncryptedActivation<Double>, SecureError> {
    enc.check_key(pk)?;
    if weights.cols() != enc.cols {
        return Err(NnError::Shape(format!(
            "weights {:?} against {} encrypted columns",
            weights.shape(),
            enc.cols
        ))
        .into());
    }
    if mask.shape() != (enc.rows, weights.rows()) || mask.frac_bits != codec.frac_bits() {
        return Err(NnError::Shape(format!(
            "mask {:?} for a {}x{} result",
            mask.shape(),
            enc.rows,
            weights.rows()
        ))
        .into());
    }
    let q: Vec<BigInt> = weights
        .data()
        .iter()
        .map(|&w| codec.quantize(w))
        .collect::<Result<_, _>>()?;

    let half_n = codec.half_n().bits() as f64;
    let scale = codec.scale();
    let mask_max = mask.noise.max_abs();
    for o in 0..weights.rows() {
        let row_l1: f64 = weights.row(o).iter().map(|w| w.abs() + 1.0 / scale).sum();
        let worst = (row_l1 * ACTIVATION_BOUND + mask_max) * scale * scale;
        if worst.log2() >= half_n - 1.0 {
            return Err(SecureError::Overflow(format!(
                "row {o} may exceed the 2^(2f) range of a {}-bit key",
                pk.bits()
            )));
        }
    }

    let n_sq = pk.n_squared();
    let col_bits: Vec<u64> = (0..enc.cols)
        .map(|i| (0..weights.rows()).map(|o| q[o * enc.cols + i].bits()).max().unwrap_or(0))
        .collect();
    let mut pending = Vec::with_capacity(enc.rows * weights.rows());
    for b in 0..enc.rows {
        let tables = if weights.rows() >= 4 {
            (0..enc.cols)
                .map(|i| pk.pow_table(enc.cell(b, i), col_bits[i]).map(Some))
                .collect::<Result<Vec<_>, _>>()?
        } else {
            vec![None; enc.cols]
        };
        for o in 0..weights.rows() {
            let mut pos = BigUint::from(1u32);
            let mut neg = BigUint::from(1u32);
            for i in 0..enc.cols {
                let k = &q[o * enc.cols + i];
                if k.is_zero() {
                    continue;
                }
                let term = match &tables[i] {
                    Some(t) => t.pow(pk, k.magnitude())?,
                    None => enc.cell(b, i).value().modpow(k.magnitude(), n_sq),
                };
                if k.is_negative() {
                    neg = neg * term % n_sq;
                } else {
                    pos = pos * term % n_sq;
                }
            }
            let m = &mask.ints[b * weights.rows() + o];
            if !m.is_zero() {
                let em = pk.encrypt(&codec.encode_int(m)?, rng)?;
                pos = pos * em.value() % n_sq;
            }
            pending.push((pos, neg));
        }
    }
    let inverses = batch_inverse(pending.iter().map(|(_, neg)| neg), n_sq)?;
    let mut cells = Vec::with_capacity(pending.len());
    for ((pos, _), inv) in pending.into_iter().zip(inverses) {
        cells.push(Ciphertext::from_value(pk, pos * inv % n_sq)?);
    }
    Ok(EncryptedActivation {
        rows: enc.rows,
        cols: weights.rows(),
        cells,
        key_id: enc.key_id,
        frac_bits: enc.frac_bits,
        producer: Producer::Active,
        _scale: PhantomData,
    })
}

/// Inverses of every value modulo `m` with a single modular inversion.
fn batch_inverse<'a>(values: impl Iterator<Item = &'a BigUint>, m: &BigUint) -> Result<Vec<BigUint>, PaillierError> {
    let values: Vec<&BigUint> = values.collect();
    let mut prefix = Vec::with_capacity(values.len());
    let mut acc = BigUint::from(1u32);
    for v in &values {
        prefix.push(acc.clone());
        acc = acc * *v % m;
    }
    let mut inv = acc.modinv(m).ok_or(PaillierError::NotInvertible)?;
    let mut out = vec![BigUint::from(0u32); values.len()];
    for i in (0..values.len()).rev() {
        out[i] = &inv * &prefix[i] % m;
        inv = inv * values[i] % m;
    }
    Ok(out)
}

/// Owner side of the exchange: decrypts a double-scale grid and decodes it to
/// reals. The result still contains the requester's mask.
pub fn masked_decrypt(enc: &EncryptedActivation<Double>, sk: &PrivateKey) -> Result<Tensor2, SecureError> {
    enc.check_key(sk.public_key())?;
    let codec = FixedPointCodec::new(sk.public_key(), enc.frac_bits);
    let bits = enc.frac_bits * Double::FACTOR;
    let data = enc
        .cells
        .iter()
        .map(|c| Ok(codec.decode_scaled(&sk.decrypt(c)?, bits)))
        .collect::<Result<Vec<_>, SecureError>>()?;
    Ok(Tensor2::from_vec(enc.rows, enc.cols, data)?)
}

/// Both halves of the exchange in one call.
pub fn masked_decrypt_exchange(
    enc_masked: &EncryptedActivation<Double>,
    owner_sk: &PrivateKey,
    requester_mask: &MaskState,
) -> Result<Tensor2, SecureError> {
    let masked = masked_decrypt(enc_masked, owner_sk)?;
    requester_mask.unmask(&masked)
}

pub fn write_tensor(buf: &mut Vec<u8>, t: &Tensor2) {
    wire::put_u32(buf, t.rows() as u32);
    wire::put_u32(buf, t.cols() as u32);
    for &v in t.data() {
        wire::put_f64(buf, v);
    }
}

pub fn read_tensor(r: &mut Reader<'_>) -> Result<Tensor2, DecodeError> {
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let count = rows
        .checked_mul(cols)
        .filter(|c| c.saturating_mul(8) <= r.remaining())
        .ok_or_else(|| DecodeError::Invalid("grid larger than payload".into()))?;
    let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    Tensor2::from_vec(rows, cols, data).map_err(|e| DecodeError::Invalid(e.to_string()))
}

/// ENC_ACT payload.
#[derive(Clone, Debug, PartialEq)]
pub struct EncActMsg {
    pub step_id: u64,
    pub act: EncryptedActivation<Single>,
}

impl EncActMsg {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        wire::put_u64(&mut buf, self.step_id);
        self.act.write(&mut buf);
        buf
    }

    pub fn from_bytes(buf: &[u8], pk: &PublicKey) -> Result<Self, SecureError> {
        let mut r = Reader::new(buf);
        let step_id = r.u64()?;
        let act = EncryptedActivation::read(&mut r, pk)?;
        r.finish()?;
        Ok(Self { step_id, act })
    }
}

/// MASKED_CT payload.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedCtMsg {
    pub step_id: u64,
    pub grid: EncryptedActivation<Double>,
}

impl MaskedCtMsg {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        wire::put_u64(&mut buf, self.step_id);
        self.grid.write(&mut buf);
        buf
    }

    pub fn from_bytes(buf: &[u8], pk: &PublicKey) -> Result<Self, SecureError> {
        let mut r = Reader::new(buf);
        let step_id = r.u64()?;
        let grid = EncryptedActivation::read(&mut r, pk)?;
        r.finish()?;
        Ok(Self { step_id, grid })
    }
}

/// A step-tagged plaintext grid: MASKED_PT and GRAD_PASSIVE payloads.
#[derive(Clone, Debug, PartialEq)]
pub struct PlainGridMsg {
    pub step_id: u64,
    pub grid: Tensor2,
}

impl PlainGridMsg {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.grid.data().len() * 8);
        wire::put_u64(&mut buf, self.step_id);
        write_tensor(&mut buf, &self.grid);
        buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let step_id = r.u64()?;
        let grid = read_tensor(&mut r)?;
        r.finish()?;
        Ok(Self { step_id, grid })
    }

    /// Rejects a message from a step other than `expected`.
    pub fn expect_step(self, expected: u64) -> Result<Tensor2, SecureError> {
        if self.step_id != expected {
            return Err(SecureError::Desync {
                expected,
                found: self.step_id,
            });
        }
        Ok(self.grid)
    }
}

/// Gradient of the loss with respect to the passive bottom output.
pub type InteractiveGradMsg = PlainGridMsg;

/// Fixed extra gain applied to the backward grid before it is quantized in
/// the weight-gradient exchange, so small gradients keep their precision.
pub const GRAD_GAIN: f64 = 256.0;

/// Active-side computation of `dW_p = δzᵀ · h_p` from the encrypted passive
/// output. `δz` is scaled by `batch · GRAD_GAIN` before quantization; the
/// caller divides the unmasked result by the same factor. Returns the masked
/// ciphertext grid, shaped `p_dim × out`, and the mask.
pub fn weight_grad_request<R: Rng + ?Sized>(
    enc_hp: &EncryptedActivation<Single>,
    dz: &Tensor2,
    pk: &PublicKey,
    codec: &FixedPointCodec,
    rng: &mut R,
) -> Result<(EncryptedActivation<Double>, MaskState, f64), SecureError> {
    let gain = dz.rows().max(1) as f64 * GRAD_GAIN;
    let mut weights = Tensor2::zeros(dz.cols(), dz.rows());
    for b in 0..dz.rows() {
        for o in 0..dz.cols() {
            weights.set(o, b, dz.get(b, o) * gain);
        }
    }
    let mask = MaskState::random(enc_hp.cols, dz.cols(), codec.frac_bits(), rng);
    let grid = homomorphic_linear(&enc_hp.transpose(), &weights, &mask, pk, codec, rng)?;
    Ok((grid, mask, gain))
}

/// Turns the unmasked `p_dim × out` result of [`weight_grad_request`] into
/// `dW_p` (`out × p_dim`).
pub fn weight_grad_finish(unmasked: &Tensor2, gain: f64) -> Tensor2 {
    let mut out = Tensor2::zeros(unmasked.cols(), unmasked.rows());
    for i in 0..unmasked.rows() {
        for o in 0..unmasked.cols() {
            out.set(o, i, unmasked.get(i, o) / gain);
        }
    }
    out
}
