//! Paillier cryptosystem with a signed plaintext encoding.
//!
//! Plaintexts are signed integers of magnitude below 2^128 embedded into
//! `Z_n` with the half-range convention: residues above `n/2` decode as
//! negative. Every ciphertext carries a public upper bound on the magnitude
//! of its plaintext, so an operation that could wrap the plaintext ring is
//! rejected up front instead of decoding to a wrong signed value.
//!
//! Encryption computes `(1 + m*n) * hs^a mod n^2`, where `hs` is an `n`-th
//! residue fixed at key generation and `a` is a fresh random exponent of
//! `bitlen(n)/2` bits. Powers of `hs` come from a precomputed fixed-base
//! table, which keeps 2048-bit encryption well under a millisecond.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use rand::RngCore;
use rug::integer::Order;
use rug::ops::RemRounding;
use rug::Integer;
use sha3::{Digest, Sha3_256};
use thiserror::Error;

/// Smallest accepted modulus size.
pub const MIN_KEY_BITS: u32 = 1024;
/// Modulus size used by production runs.
pub const DEFAULT_KEY_BITS: u32 = 2048;
/// Plaintext magnitudes must stay strictly below `2^PLAINTEXT_BITS`.
pub const PLAINTEXT_BITS: u32 = 128;
/// Public magnitude bound assigned to fresh encryptions of small values.
pub const FRESH_BOUND: u128 = 1 << 64;

const WINDOW_BITS: usize = 8;
const WINDOW_SIZE: usize = (1 << WINDOW_BITS) - 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HeError {
    #[error("key size of {0} bits is below the minimum of {MIN_KEY_BITS}")]
    KeySize(u32),
    #[error("ciphertext belongs to key {found}, expected key {expected}")]
    KeyMismatch {
        expected: KeyFingerprint,
        found: KeyFingerprint,
    },
    #[error("plaintext magnitude would reach 2^{PLAINTEXT_BITS}")]
    Range,
    #[error("malformed ciphertext: {0}")]
    Malformed(&'static str),
}

/// Short digest identifying a public key.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyFingerprint(pub [u8; 8]);

impl fmt::Display for KeyFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for KeyFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyFingerprint({self})")
    }
}

/// A signed plaintext with `|value| < 2^128`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SignedFixed(Integer);

impl SignedFixed {
    pub fn new(value: Integer) -> Result<Self, HeError> {
        if value.as_abs().significant_bits() > PLAINTEXT_BITS {
            return Err(HeError::Range);
        }
        Ok(Self(value))
    }

    pub fn zero() -> Self {
        Self(Integer::new())
    }

    pub fn value(&self) -> &Integer {
        &self.0
    }

    pub fn to_i128(&self) -> Option<i128> {
        self.0.to_i128()
    }

    pub fn is_zero(&self) -> bool {
        self.0.cmp0() == Ordering::Equal
    }

    fn magnitude(&self) -> u128 {
        // significant_bits <= 128 is guaranteed by construction
        self.0.as_abs().to_u128().expect("magnitude below 2^128")
    }
}

impl From<i64> for SignedFixed {
    fn from(v: i64) -> Self {
        Self(Integer::from(v))
    }
}

impl From<i128> for SignedFixed {
    fn from(v: i128) -> Self {
        Self(Integer::from(v))
    }
}

impl fmt::Display for SignedFixed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

struct PublicInner {
    n: Integer,
    n_squared: Integer,
    half_n: Integer,
    hs: Integer,
    bits: u32,
    alpha_bits: u32,
    width: u32,
    fingerprint: KeyFingerprint,
    /// `table[i][d - 1] = hs^(d * 2^(8i)) mod n^2` for `d` in `1..=255`.
    table: Vec<Vec<Integer>>,
}

/// Paillier public key (modulus plus the fixed randomizer base).
///
/// Cheap to clone; the fixed-base table is shared.
#[derive(Clone)]
pub struct PublicKey(Arc<PublicInner>);

impl PublicKey {
    /// Builds a public key from its modulus and randomizer base.
    pub fn new(n: Integer, hs: Integer) -> Self {
        let n_squared = Integer::from(&n * &n);
        let half_n = Integer::from(&n >> 1);
        let bits = n.significant_bits();
        let alpha_bits = bits.div_ceil(2);
        let width = n_squared.significant_bits().div_ceil(8);
        let fingerprint = fingerprint_of(&n, &hs);
        let table = build_table(&hs, &n_squared, alpha_bits as usize);
        Self(Arc::new(PublicInner {
            n,
            n_squared,
            half_n,
            hs,
            bits,
            alpha_bits,
            width,
            fingerprint,
            table,
        }))
    }

    pub fn n(&self) -> &Integer {
        &self.0.n
    }

    pub fn randomizer_base(&self) -> &Integer {
        &self.0.hs
    }

    /// Bit length of the modulus `n`.
    pub fn bits(&self) -> u32 {
        self.0.bits
    }

    pub fn fingerprint(&self) -> KeyFingerprint {
        self.0.fingerprint
    }

    /// Serialized ciphertext length in bytes.
    pub fn ciphertext_len(&self) -> usize {
        self.0.width as usize
    }

    fn check(&self, ct: &Ciphertext) -> Result<(), HeError> {
        if ct.key != self.0.fingerprint {
            return Err(HeError::KeyMismatch {
                expected: self.0.fingerprint,
                found: ct.key,
            });
        }
        Ok(())
    }

    fn encode(&self, m: &Integer) -> Integer {
        if m.cmp0() == Ordering::Less {
            Integer::from(&self.0.n + m)
        } else {
            m.clone()
        }
    }

    fn fixed_base_pow(&self, exponent: &Integer) -> Integer {
        let n2 = &self.0.n_squared;
        let mut acc = Integer::from(1);
        for (window, digit) in exponent.to_digits::<u8>(Order::Lsf).into_iter().enumerate() {
            if digit != 0 {
                acc *= &self.0.table[window][digit as usize - 1];
                acc %= n2;
            }
        }
        acc
    }

    fn mul_mod(&self, a: &Integer, b: &Integer) -> Integer {
        Integer::from(a * b) % &self.0.n_squared
    }

    fn wrap(&self, value: Integer, bound: u128) -> Ciphertext {
        Ciphertext {
            value,
            key: self.0.fingerprint,
            width: self.0.width,
            bound,
        }
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PublicKey")
            .field("bits", &self.0.bits)
            .field("fingerprint", &self.0.fingerprint)
            .finish()
    }
}

impl PartialEq for PublicKey {
    fn eq(&self, other: &Self) -> bool {
        self.0.n == other.0.n && self.0.hs == other.0.hs
    }
}

impl Eq for PublicKey {}

/// Factorization-derived decryption material.
pub struct SecretKey {
    p: Integer,
    q: Integer,
    p_squared: Integer,
    q_squared: Integer,
    p_minus_one: Integer,
    q_minus_one: Integer,
    half_p: Integer,
    hp: Integer,
    hq: Integer,
    q_inv_p: Integer,
    n: Integer,
    half_n: Integer,
    fingerprint: KeyFingerprint,
}

impl SecretKey {
    fn new(p: Integer, q: Integer, public: &PublicKey) -> Self {
        let p_squared = Integer::from(&p * &p);
        let q_squared = Integer::from(&q * &q);
        let p_minus_one = Integer::from(&p - 1);
        let q_minus_one = Integer::from(&q - 1);
        let g = Integer::from(public.n() + 1);
        let hp = h_factor(&g, &p, &p_squared, &p_minus_one);
        let hq = h_factor(&g, &q, &q_squared, &q_minus_one);
        let q_inv_p = q.clone().invert(&p).expect("distinct primes are coprime");
        let half_p = Integer::from(&p >> 1);
        Self {
            n: public.n().clone(),
            half_n: public.0.half_n.clone(),
            fingerprint: public.fingerprint(),
            p,
            q,
            p_squared,
            q_squared,
            p_minus_one,
            q_minus_one,
            half_p,
            hp,
            hq,
            q_inv_p,
        }
    }

    pub fn fingerprint(&self) -> KeyFingerprint {
        self.fingerprint
    }

    fn check(&self, ct: &Ciphertext) -> Result<(), HeError> {
        if ct.key != self.fingerprint {
            return Err(HeError::KeyMismatch {
                expected: self.fingerprint,
                found: ct.key,
            });
        }
        Ok(())
    }

    fn residue_mod_p(&self, c: &Integer) -> Integer {
        crt_half(c, &self.p, &self.p_squared, &self.p_minus_one, &self.hp)
    }

    fn residue_mod_q(&self, c: &Integer) -> Integer {
        crt_half(c, &self.q, &self.q_squared, &self.q_minus_one, &self.hq)
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecretKey")
            .field("fingerprint", &self.fingerprint)
            .finish_non_exhaustive()
    }
}

/// Key material for one billing period.
#[derive(Debug)]
pub struct KeyPair {
    pub public: PublicKey,
    pub secret: SecretKey,
    pub period_id: u64,
}

/// An encrypted signed value.
#[derive(Clone, PartialEq, Eq)]
pub struct Ciphertext {
    value: Integer,
    key: KeyFingerprint,
    width: u32,
    bound: u128,
}

impl Ciphertext {
    pub fn key_fingerprint(&self) -> KeyFingerprint {
        self.key
    }

    /// Public upper bound on the magnitude of the plaintext.
    pub fn bound(&self) -> u128 {
        self.bound
    }

    pub fn value(&self) -> &Integer {
        &self.value
    }

    /// Canonical fixed-length big-endian encoding of `ceil(bitlen(n^2)/8)` bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let digits = self.value.to_digits::<u8>(Order::Msf);
        let mut out = vec![0u8; self.width as usize];
        let offset = out.len() - digits.len();
        out[offset..].copy_from_slice(&digits);
        out
    }

    /// Parses a canonical encoding produced under `pk`, attaching the
    /// magnitude bound the sender declared for it.
    pub fn from_bytes(pk: &PublicKey, bytes: &[u8], bound: u128) -> Result<Self, HeError> {
        if bytes.len() != pk.ciphertext_len() {
            return Err(HeError::Malformed("wrong length"));
        }
        let value = Integer::from_digits(bytes, Order::Msf);
        if value.cmp0() != Ordering::Greater || value >= pk.0.n_squared {
            return Err(HeError::Malformed("value outside [1, n^2 - 1]"));
        }
        if Integer::from(value.gcd_ref(pk.n())) != 1 {
            return Err(HeError::Malformed("value not coprime to n"));
        }
        Ok(pk.wrap(value, bound))
    }
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bytes = self.to_bytes();
        let tail = &bytes[bytes.len().saturating_sub(6)..];
        write!(f, "Ciphertext({}:..{})", self.key, hex::encode(tail))
    }
}

/// Generates a fresh key pair with a `bits`-bit modulus for `period_id`.
pub fn keygen<R: RngCore + ?Sized>(
    bits: u32,
    period_id: u64,
    rng: &mut R,
) -> Result<KeyPair, HeError> {
    if bits < MIN_KEY_BITS {
        return Err(HeError::KeySize(bits));
    }
    let p_bits = bits.div_ceil(2);
    let q_bits = bits - p_bits;
    let (p, q, n) = loop {
        let p = random_prime(rng, p_bits);
        let q = random_prime(rng, q_bits);
        if p == q {
            continue;
        }
        let n = Integer::from(&p * &q);
        if n.significant_bits() == bits {
            break (p, q, n);
        }
    };
    let n_squared = Integer::from(&n * &n);
    // hs = (-x^2)^n mod n^2 for a random unit x
    let hs = loop {
        let x = random_bits(rng, bits) % &n;
        if x <= 1 || Integer::from(x.gcd_ref(&n)) != 1 {
            continue;
        }
        let h = Integer::from(&n - Integer::from(x.square_ref()) % &n);
        break Integer::from(h.pow_mod_ref(&n, &n_squared).expect("non-negative exponent"));
    };
    let public = PublicKey::new(n, hs);
    let secret = SecretKey::new(p, q, &public);
    Ok(KeyPair {
        public,
        secret,
        period_id,
    })
}

pub fn encrypt<R: RngCore + ?Sized>(
    pk: &PublicKey,
    m: &SignedFixed,
    rng: &mut R,
) -> Result<Ciphertext, HeError> {
    let residue = pk.encode(m.value());
    let alpha = random_bits(rng, pk.0.alpha_bits);
    let noise = pk.fixed_base_pow(&alpha);
    let gm = Integer::from(&residue * pk.n()) + 1;
    let value = pk.mul_mod(&gm, &noise);
    Ok(pk.wrap(value, m.magnitude().max(FRESH_BOUND)))
}

pub fn add(pk: &PublicKey, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, HeError> {
    pk.check(a)?;
    pk.check(b)?;
    let bound = a.bound.checked_add(b.bound).ok_or(HeError::Range)?;
    Ok(pk.wrap(pk.mul_mod(&a.value, &b.value), bound))
}

pub fn sub(pk: &PublicKey, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, HeError> {
    pk.check(a)?;
    pk.check(b)?;
    let bound = a.bound.checked_add(b.bound).ok_or(HeError::Range)?;
    let inverse = b
        .value
        .clone()
        .invert(&pk.0.n_squared)
        .map_err(|_| HeError::Malformed("ciphertext not invertible"))?;
    Ok(pk.wrap(pk.mul_mod(&a.value, &inverse), bound))
}

pub fn scalar_mul(pk: &PublicKey, a: &Ciphertext, k: i128) -> Result<Ciphertext, HeError> {
    pk.check(a)?;
    let bound = a.bound.checked_mul(k.unsigned_abs()).ok_or(HeError::Range)?;
    let base = if k < 0 {
        a.value
            .clone()
            .invert(&pk.0.n_squared)
            .map_err(|_| HeError::Malformed("ciphertext not invertible"))?
    } else {
        a.value.clone()
    };
    let exponent = Integer::from(k.unsigned_abs());
    let value = Integer::from(
        base.pow_mod_ref(&exponent, &pk.0.n_squared)
            .expect("non-negative exponent"),
    );
    Ok(pk.wrap(value, bound))
}

/// Adds a public constant to the plaintext without re-randomizing.
pub fn add_plain(pk: &PublicKey, a: &Ciphertext, k: i128) -> Result<Ciphertext, HeError> {
    pk.check(a)?;
    let bound = a.bound.checked_add(k.unsigned_abs()).ok_or(HeError::Range)?;
    let shift = Integer::from(&pk.encode(&Integer::from(k)) * pk.n()) + 1;
    Ok(pk.wrap(pk.mul_mod(&a.value, &shift), bound))
}

/// Full CRT decryption with signed half-range decoding.
pub fn decrypt(sk: &SecretKey, c: &Ciphertext) -> Result<SignedFixed, HeError> {
    sk.check(c)?;
    let mp = sk.residue_mod_p(&c.value);
    let mq = sk.residue_mod_q(&c.value);
    // m = mq + q * ((mp - mq) * q^-1 mod p)
    let mut t = Integer::from(&mp - &mq) * &sk.q_inv_p;
    t = t.rem_euc(&sk.p);
    let m = mq + t * &sk.q;
    let signed = if m > sk.half_n { m - &sk.n } else { m };
    SignedFixed::new(signed)
}

/// Decrypts a ciphertext known to hold a small plaintext using only the
/// mod-`p` half of the CRT. Exact whenever `|m| < 2^128`, which is far
/// below `p/2`; this is the cheap path used for zero-checks.
pub fn decrypt_bounded(sk: &SecretKey, c: &Ciphertext) -> Result<SignedFixed, HeError> {
    sk.check(c)?;
    let mp = sk.residue_mod_p(&c.value);
    let signed = if mp > sk.half_p { mp - &sk.p } else { mp };
    SignedFixed::new(signed)
}

fn crt_half(c: &Integer, prime: &Integer, prime_sq: &Integer, order: &Integer, h: &Integer) -> Integer {
    let reduced = Integer::from(c % prime_sq);
    let x = Integer::from(reduced.pow_mod_ref(order, prime_sq).expect("non-negative exponent"));
    let l = (x - 1u32) / prime;
    (l * h).rem_euc(prime)
}

fn h_factor(g: &Integer, prime: &Integer, prime_sq: &Integer, order: &Integer) -> Integer {
    let reduced = Integer::from(g % prime_sq);
    let x = Integer::from(reduced.pow_mod_ref(order, prime_sq).expect("non-negative exponent"));
    let l = (x - 1u32) / prime;
    l.invert(prime).expect("L(g^(p-1)) is invertible mod p")
}

fn fingerprint_of(n: &Integer, hs: &Integer) -> KeyFingerprint {
    let mut hasher = Sha3_256::new();
    hasher.update(b"pabill-public-key");
    for part in [n, hs] {
        let digits = part.to_digits::<u8>(Order::Msf);
        hasher.update((digits.len() as u64).to_be_bytes());
        hasher.update(&digits);
    }
    let digest = hasher.finalize();
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    KeyFingerprint(out)
}

fn build_table(hs: &Integer, n_squared: &Integer, exponent_bits: usize) -> Vec<Vec<Integer>> {
    let windows = exponent_bits.div_ceil(WINDOW_BITS);
    let mut table = Vec::with_capacity(windows);
    let mut base = hs.clone();
    for _ in 0..windows {
        let mut row = Vec::with_capacity(WINDOW_SIZE);
        row.push(base.clone());
        for d in 1..WINDOW_SIZE {
            let next = Integer::from(&row[d - 1] * &base) % n_squared;
            row.push(next);
        }
        base = Integer::from(&row[WINDOW_SIZE - 1] * &base) % n_squared;
        table.push(row);
    }
    table
}

pub(crate) fn random_bits<R: RngCore + ?Sized>(rng: &mut R, bits: u32) -> Integer {
    let mut bytes = vec![0u8; bits.div_ceil(8) as usize];
    rng.fill_bytes(&mut bytes);
    let mut value = Integer::from_digits(&bytes, Order::Msf);
    value.keep_bits_mut(bits);
    value
}

fn random_prime<R: RngCore + ?Sized>(rng: &mut R, bits: u32) -> Integer {
    loop {
        let mut candidate = random_bits(rng, bits);
        // top two bits set so the product has exactly p_bits + q_bits bits
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(bits - 2, true);
        candidate.set_bit(0, true);
        candidate.next_prime_mut();
        if candidate.significant_bits() == bits {
            return candidate;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::sync::OnceLock;

    fn keys() -> &'static KeyPair {
        static KEYS: OnceLock<KeyPair> = OnceLock::new();
        KEYS.get_or_init(|| keygen(1024, 0, &mut ChaCha20Rng::seed_from_u64(11)).unwrap())
    }

    fn enc(v: i128, rng: &mut ChaCha20Rng) -> Ciphertext {
        encrypt(&keys().public, &SignedFixed::from(v), rng).unwrap()
    }

    fn dec(c: &Ciphertext) -> i128 {
        decrypt(&keys().secret, c).unwrap().to_i128().unwrap()
    }

    #[test]
    fn keygen_rejects_small_moduli() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert_eq!(keygen(512, 0, &mut rng).unwrap_err(), HeError::KeySize(512));
    }

    #[test]
    fn keygen_produces_exact_bit_length() {
        let k = keys();
        assert_eq!(k.public.bits(), 1024);
        assert_eq!(k.public.n().significant_bits(), 1024);
        assert_eq!(k.public.ciphertext_len(), 256);
    }

    #[test]
    fn keygen_is_deterministic_in_rng_and_distinct_across_seeds() {
        let a = keygen(1024, 0, &mut ChaCha20Rng::seed_from_u64(5)).unwrap();
        let b = keygen(1024, 0, &mut ChaCha20Rng::seed_from_u64(5)).unwrap();
        let c = keygen(1024, 0, &mut ChaCha20Rng::seed_from_u64(6)).unwrap();
        assert_eq!(a.public, b.public);
        assert_ne!(a.public.n(), c.public.n());
        assert_ne!(a.public.fingerprint(), c.public.fingerprint());
    }

    #[test]
    fn encrypt_examples() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        assert_eq!(dec(&enc(0, &mut rng)), 0);
        assert_eq!(dec(&enc(-200, &mut rng)), -200);
        let a = enc(5, &mut rng);
        let b = enc(5, &mut rng);
        assert_ne!(a, b);
        assert_eq!((dec(&a), dec(&b)), (5, 5));
    }

    #[test]
    fn arithmetic_examples() {
        let pk = &keys().public;
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        assert_eq!(dec(&add(pk, &enc(3, &mut rng), &enc(4, &mut rng)).unwrap()), 7);
        assert_eq!(dec(&add(pk, &enc(5, &mut rng), &enc(-5, &mut rng)).unwrap()), 0);
        assert_eq!(dec(&sub(pk, &enc(3200, &mut rng), &enc(3000, &mut rng)).unwrap()), 200);
        assert_eq!(dec(&sub(pk, &enc(100, &mut rng), &enc(300, &mut rng)).unwrap()), -200);
        let x = enc(987, &mut rng);
        assert_eq!(dec(&sub(pk, &x, &x).unwrap()), 0);
        assert_eq!(dec(&scalar_mul(pk, &enc(200, &mut rng), 10).unwrap()), 2000);
        assert_eq!(dec(&scalar_mul(pk, &enc(7, &mut rng), -1).unwrap()), -7);
        assert_eq!(dec(&scalar_mul(pk, &x, 1).unwrap()), 987);
        assert_eq!(dec(&scalar_mul(pk, &x, 0).unwrap()), 0);
        assert_eq!(dec(&add_plain(pk, &x, -1000).unwrap()), -13);
    }

    #[test]
    fn bounded_decryption_matches_full_decryption() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for v in [0i128, 1, -1, 42, -123_456_789, i128::MAX, i128::MIN + 1] {
            let c = enc(v, &mut rng);
            let full = decrypt(&keys().secret, &c).unwrap();
            let fast = decrypt_bounded(&keys().secret, &c).unwrap();
            assert_eq!(full, fast);
            assert_eq!(full.to_i128(), Some(v));
        }
    }

    #[test]
    fn plaintext_range_is_enforced() {
        let big = Integer::from(Integer::from(1) << 128u32);
        assert_eq!(SignedFixed::new(big.clone()).unwrap_err(), HeError::Range);
        assert_eq!(SignedFixed::new(-big).unwrap_err(), HeError::Range);
        let edge = Integer::from(Integer::from(1) << 128u32) - 1u32;
        assert!(SignedFixed::new(edge.clone()).is_ok());
        assert!(SignedFixed::new(-edge).is_ok());
    }

    #[test]
    fn extreme_plaintexts_round_trip() {
        let pk = &keys().public;
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let edge = SignedFixed::new(Integer::from(Integer::from(1) << 128u32) - 1u32).unwrap();
        let c = encrypt(pk, &edge, &mut rng).unwrap();
        assert_eq!(decrypt(&keys().secret, &c).unwrap(), edge);
        assert_eq!(c.bound(), u128::MAX);
        // any growth of the bound is rejected rather than wrapped
        assert_eq!(add(pk, &c, &c).unwrap_err(), HeError::Range);
        assert_eq!(scalar_mul(pk, &c, 2).unwrap_err(), HeError::Range);
        assert_eq!(scalar_mul(pk, &enc(3, &mut rng), i128::MAX).unwrap_err(), HeError::Range);
    }

    #[test]
    fn out_of_range_plaintext_fails_to_decode() {
        // a ciphertext forged without bound tracking, holding n/2 - 1
        let k = keys();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let huge = Integer::from(k.public.n() >> 1) - 1;
        let forged = k.public.wrap(Integer::from(&huge * k.public.n()) + 1, 0);
        assert_eq!(decrypt(&k.secret, &forged).unwrap_err(), HeError::Range);
        let honest = enc(9, &mut rng);
        assert_eq!(dec(&honest), 9);
    }

    #[test]
    fn key_mismatch_is_detected() {
        let other = keygen(1024, 1, &mut ChaCha20Rng::seed_from_u64(99)).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mine = enc(1, &mut rng);
        let theirs = encrypt(&other.public, &SignedFixed::from(1i64), &mut rng).unwrap();
        assert!(matches!(add(&keys().public, &mine, &theirs), Err(HeError::KeyMismatch { .. })));
        assert!(matches!(sub(&keys().public, &mine, &theirs), Err(HeError::KeyMismatch { .. })));
        assert!(matches!(decrypt(&other.secret, &mine), Err(HeError::KeyMismatch { .. })));
        assert!(matches!(decrypt_bounded(&other.secret, &mine), Err(HeError::KeyMismatch { .. })));
    }

    #[test]
    fn serialization_is_fixed_length_and_parses_back() {
        let pk = &keys().public;
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let c = enc(-77, &mut rng);
        let bytes = c.to_bytes();
        assert_eq!(bytes.len(), pk.ciphertext_len());
        let back = Ciphertext::from_bytes(pk, &bytes, c.bound()).unwrap();
        assert_eq!(back, c);
        assert!(Ciphertext::from_bytes(pk, &bytes[1..], 0).is_err());
        assert!(Ciphertext::from_bytes(pk, &vec![0u8; bytes.len()], 0).is_err());
        assert!(Ciphertext::from_bytes(pk, &vec![0xffu8; bytes.len()], 0).is_err());
    }
}
