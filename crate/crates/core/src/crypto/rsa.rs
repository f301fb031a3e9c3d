//! Textbook RSA: probable-prime generation, key generation and modular
//! exponentiation. Big-integer storage and arithmetic come from `num-bigint`;
//! exponentiation, inversion and primality testing are implemented here.

use num_bigint::{BigInt, BigUint, Sign};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{Rng, RngCore};
use zeroize::Zeroizing;

use crate::error::{Error, Result};

pub const DEFAULT_EXPONENT: u64 = 65_537;
pub const MILLER_RABIN_ROUNDS: usize = 40;
/// Smallest modulus size accepted by [`keygen`].
pub const MIN_KEY_BITS: u64 = 64;

/// `base^exp mod m` by left-to-right square-and-multiply.
pub fn mod_pow(base: &BigUint, exp: &BigUint, m: &BigUint) -> BigUint {
    if m.is_one() {
        return BigUint::zero();
    }
    let base = base % m;
    let mut acc = BigUint::one();
    for i in (0..exp.bits()).rev() {
        acc = &acc * &acc % m;
        if exp.bit(i) {
            acc = acc * &base % m;
        }
    }
    acc
}

/// Extended Euclid: returns `(g, x, y)` with `a·x + b·y = g = gcd(a, b)`.
pub fn extended_gcd(a: &BigInt, b: &BigInt) -> (BigInt, BigInt, BigInt) {
    let (mut old_r, mut r) = (a.clone(), b.clone());
    let (mut old_s, mut s) = (BigInt::one(), BigInt::zero());
    let (mut old_t, mut t) = (BigInt::zero(), BigInt::one());
    while !r.is_zero() {
        let q = &old_r / &r;
        let next_r = &old_r - &q * &r;
        old_r = std::mem::replace(&mut r, next_r);
        let next_s = &old_s - &q * &s;
        old_s = std::mem::replace(&mut s, next_s);
        let next_t = &old_t - &q * &t;
        old_t = std::mem::replace(&mut t, next_t);
    }
    (old_r, old_s, old_t)
}

/// Multiplicative inverse of `a` modulo `m`, if it exists.
pub fn mod_inverse(a: &BigUint, m: &BigUint) -> Option<BigUint> {
    let m_i = BigInt::from_biguint(Sign::Plus, m.clone());
    let (g, x, _) = extended_gcd(&BigInt::from_biguint(Sign::Plus, a.clone()), &m_i);
    if !g.is_one() {
        return None;
    }
    x.mod_floor(&m_i).to_biguint()
}

const SMALL_PRIMES: [u32; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

fn random_below<R: RngCore + ?Sized>(bound: &BigUint, rng: &mut R) -> BigUint {
    let bytes = bound.bits().div_ceil(8) as usize;
    loop {
        let mut buf = vec![0u8; bytes];
        rng.fill_bytes(&mut buf);
        let excess = bytes as u64 * 8 - bound.bits();
        if excess > 0 {
            buf[0] &= 0xff >> excess;
        }
        let x = BigUint::from_bytes_be(&buf);
        if &x < bound {
            return x;
        }
    }
}

/// Miller–Rabin with `rounds` random bases, after trial division by small
/// primes.
pub fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    for p in SMALL_PRIMES {
        let p = BigUint::from(p);
        if n == &p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    let n_minus_1 = n - 1u32;
    let s = n_minus_1.trailing_zeros().expect("n - 1 > 0");
    let d = &n_minus_1 >> s;
    // Bases drawn from [2, n - 2].
    let span = n - 3u32;
    'witness: for _ in 0..rounds {
        let a = random_below(&span, rng) + 2u32;
        let mut x = mod_pow(&a, &d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = &x * &x % n;
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Random probable prime with exactly `bits` bits and the top two bits set,
/// so the product of two such primes has exactly their summed width.
pub fn generate_prime<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> BigUint {
    assert!(bits >= 4, "prime width too small");
    let bytes = bits.div_ceil(8) as usize;
    loop {
        let mut buf = vec![0u8; bytes];
        rng.fill_bytes(&mut buf);
        let mut c = BigUint::from_bytes_be(&buf);
        c &= (BigUint::one() << bits) - 1u32;
        c.set_bit(bits - 1, true);
        c.set_bit(bits - 2, true);
        c.set_bit(0, true);
        if is_probable_prime(&c, MILLER_RABIN_ROUNDS, rng) {
            return c;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RsaPublicKey {
    pub n: BigUint,
    pub e: BigUint,
}

/// Private exponent and factors, held as big-endian bytes that are wiped on
/// drop.
#[derive(Clone)]
pub struct RsaPrivateKey {
    pub n: BigUint,
    d: Zeroizing<Vec<u8>>,
    p: Zeroizing<Vec<u8>>,
    q: Zeroizing<Vec<u8>>,
}

impl std::fmt::Debug for RsaPrivateKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RsaPrivateKey").field("n", &self.n).finish_non_exhaustive()
    }
}

impl RsaPrivateKey {
    pub fn d(&self) -> BigUint {
        BigUint::from_bytes_be(&self.d)
    }

    /// `(p − 1)(q − 1)`.
    pub fn phi(&self) -> BigUint {
        (BigUint::from_bytes_be(&self.p) - 1u32) * (BigUint::from_bytes_be(&self.q) - 1u32)
    }
}

/// Builds a key pair from given primes and a starting exponent. The exponent
/// is advanced over odd values until it is coprime with `φ`.
pub fn keypair_from_primes(p: &BigUint, q: &BigUint, e: &BigUint) -> Result<(RsaPublicKey, RsaPrivateKey)> {
    if p == q {
        return Err(Error::Crypto("p and q must differ".into()));
    }
    let n = p * q;
    let phi = (p - 1u32) * (q - 1u32);
    let mut e = e.clone();
    if e < BigUint::from(3u32) {
        e = BigUint::from(3u32);
    }
    let d = loop {
        if e >= phi {
            return Err(Error::Crypto("no public exponent below φ(n) is coprime with it".into()));
        }
        if let Some(d) = mod_inverse(&e, &phi) {
            break d;
        }
        e += if e.is_even() { 1u32 } else { 2u32 };
    };
    let private = RsaPrivateKey {
        n: n.clone(),
        d: Zeroizing::new(d.to_bytes_be()),
        p: Zeroizing::new(p.to_bytes_be()),
        q: Zeroizing::new(q.to_bytes_be()),
    };
    Ok((RsaPublicKey { n, e }, private))
}

/// Generates a key pair whose modulus has exactly `bits` bits.
pub fn keygen<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> Result<(RsaPublicKey, RsaPrivateKey)> {
    if bits < MIN_KEY_BITS {
        return Err(Error::Config(format!("RSA modulus must be at least {MIN_KEY_BITS} bits, got {bits}")));
    }
    let pbits = bits / 2;
    let qbits = bits - pbits;
    loop {
        let p = generate_prime(pbits, rng);
        let q = generate_prime(qbits, rng);
        if p == q {
            continue;
        }
        if let Ok(pair) = keypair_from_primes(&p, &q, &BigUint::from(DEFAULT_EXPONENT)) {
            return Ok(pair);
        }
    }
}

/// `m^e mod n` for `0 < m < n`.
pub fn encrypt(key: &RsaPublicKey, m: &BigUint) -> Result<BigUint> {
    if m.is_zero() || m >= &key.n {
        return Err(Error::Crypto("plaintext integer outside (0, n)".into()));
    }
    Ok(mod_pow(m, &key.e, &key.n))
}

/// `c^d mod n` for `0 < c < n`.
pub fn decrypt(key: &RsaPrivateKey, c: &BigUint) -> Result<BigUint> {
    if c.is_zero() || c >= &key.n {
        return Err(Error::Crypto("ciphertext integer outside (0, n)".into()));
    }
    Ok(mod_pow(c, &key.d(), &key.n))
}

/// Chunk width of the fixed textbook mode, in bytes.
pub const TEXTBOOK_CHUNK: usize = 8;

/// Largest chunk width usable under `n`: each chunk is mapped to
/// `chunk + 1`, which must stay below `n`.
pub fn max_chunk_len(n: &BigUint) -> usize {
    (n.bits().saturating_sub(2) / 8) as usize
}

/// Deterministic chunked RSA. Not semantically secure: equal chunks give
/// equal ciphertexts. Layout: u64 LE plaintext length, then one
/// `ceil(bits(n)/8)`-byte big-endian ciphertext per chunk.
pub fn encrypt_chunked(key: &RsaPublicKey, data: &[u8], chunk_len: usize) -> Result<Vec<u8>> {
    if chunk_len == 0 || chunk_len > max_chunk_len(&key.n) {
        return Err(Error::Crypto(format!(
            "chunk of {chunk_len} bytes does not fit a {}-bit modulus",
            key.n.bits()
        )));
    }
    let width = key.n.bits().div_ceil(8) as usize;
    let mut out = Vec::with_capacity(8 + data.len().div_ceil(chunk_len) * width);
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for chunk in data.chunks(chunk_len) {
        let m = BigUint::from_bytes_be(chunk) + 1u32;
        let c = encrypt(key, &m)?.to_bytes_be();
        out.extend(std::iter::repeat_n(0u8, width - c.len()));
        out.extend_from_slice(&c);
    }
    Ok(out)
}

pub fn decrypt_chunked(key: &RsaPrivateKey, data: &[u8], chunk_len: usize) -> Result<Vec<u8>> {
    let width = key.n.bits().div_ceil(8) as usize;
    if data.len() < 8 || !(data.len() - 8).is_multiple_of(width) {
        return Err(Error::Crypto("malformed chunked ciphertext".into()));
    }
    let total = u64::from_le_bytes(data[..8].try_into().expect("8 bytes")) as usize;
    let chunks = (data.len() - 8) / width;
    if chunk_len == 0 || total.div_ceil(chunk_len) != chunks {
        return Err(Error::Crypto("chunk count does not match plaintext length".into()));
    }
    let mut out = Vec::with_capacity(total);
    for (i, c) in data[8..].chunks(width).enumerate() {
        let m = decrypt(key, &BigUint::from_bytes_be(c))?;
        if m.is_zero() {
            return Err(Error::Crypto("chunk decrypted out of range".into()));
        }
        let v = m - 1u32;
        let this_len = chunk_len.min(total - i * chunk_len);
        if v.bits() > 8 * this_len as u64 {
            return Err(Error::Crypto("chunk decrypted out of range".into()));
        }
        let m = if v.is_zero() { Vec::new() } else { v.to_bytes_be() };
        out.extend(std::iter::repeat_n(0u8, this_len - m.len()));
        out.extend_from_slice(&m);
    }
    Ok(out)
}

impl RsaPublicKey {
    /// u16 LE length + big-endian `n`, then u16 LE length + big-endian `e`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for x in [&self.n, &self.e] {
            let b = x.to_bytes_be();
            out.extend_from_slice(&(b.len() as u16).to_le_bytes());
            out.extend_from_slice(&b);
        }
        out
    }

    pub fn from_bytes(mut b: &[u8]) -> Result<Self> {
        let mut take = || -> Result<BigUint> {
            if b.len() < 2 {
                return Err(Error::Crypto("truncated public key".into()));
            }
            let len = u16::from_le_bytes([b[0], b[1]]) as usize;
            if b.len() < 2 + len {
                return Err(Error::Crypto("truncated public key".into()));
            }
            let x = BigUint::from_bytes_be(&b[2..2 + len]);
            b = &b[2 + len..];
            Ok(x)
        };
        let n = take()?;
        let e = take()?;
        if !b.is_empty() || n.bits() < MIN_KEY_BITS || e < BigUint::from(3u32) || e >= n {
            return Err(Error::Crypto("invalid public key".into()));
        }
        Ok(Self { n, e })
    }

    pub fn to_hex(&self) -> String {
        format!("n={:x}\ne={:x}\n", self.n, self.e)
    }
}

/// Random `m` in `[1, n)`.
pub fn random_message<R: Rng + ?Sized>(n: &BigUint, rng: &mut R) -> BigUint {
    random_below(&(n - 1u32), rng) + 1u32
}
