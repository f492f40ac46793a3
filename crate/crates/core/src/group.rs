//! Prime-order groups.
//!
//! All signature and swap arithmetic is written against the [`Group`] trait.
//! Two instantiations exist: [`Ristretto`] (the ristretto255 group, order
//! `2^252 + 27742317777372353535851937790883648493`) for realistic runs, and
//! [`ToyGroup`], the order-`Q` subgroup of `Z_P^*` for a safe prime
//! `P = 2Q + 1`, small enough that tests can brute-force discrete logs.
//!
//! Toy group elements are written additively to match the curve notation:
//! `a + b` is modular multiplication and `k * P` is modular exponentiation.

use std::fmt::Debug;
use std::ops::{Add, Mul, Neg, Sub};

use curve25519_dalek::constants::RISTRETTO_BASEPOINT_TABLE;
use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::traits::Identity;
use sha2::{Digest, Sha512};

/// Which concrete group backs a [`Group`] implementation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instantiation {
    ProductionCurve,
    Toy,
}

/// Public description of a group: order, generator and tag.
#[derive(Debug, Clone)]
pub struct GroupParams<G: Group> {
    /// Big-endian encoding of the prime order `q`.
    pub order: Vec<u8>,
    pub generator: G::Point,
    pub instantiation: Instantiation,
}

pub trait Group: Copy + Debug + Default + PartialEq + Send + Sync + 'static {
    type Scalar: Copy
        + Eq
        + Debug
        + Send
        + Sync
        + Add<Output = Self::Scalar>
        + Sub<Output = Self::Scalar>
        + Mul<Output = Self::Scalar>
        + Neg<Output = Self::Scalar>;
    type Point: Copy
        + Eq
        + Debug
        + Send
        + Sync
        + Add<Output = Self::Point>
        + Sub<Output = Self::Point>;

    const INSTANTIATION: Instantiation;
    /// Width of the canonical scalar encoding in bytes.
    const SCALAR_LEN: usize;
    /// Width of the canonical point encoding in bytes.
    const POINT_LEN: usize;

    fn order_be_bytes() -> Vec<u8>;
    fn generator() -> Self::Point;
    fn identity() -> Self::Point;

    fn scalar_from_u64(v: u64) -> Self::Scalar;
    /// Reduces a 64-byte big-endian integer modulo the group order.
    fn scalar_reduce_wide(bytes: &[u8; 64]) -> Self::Scalar;

    fn mul(k: &Self::Scalar, p: &Self::Point) -> Self::Point;
    fn mul_base(k: &Self::Scalar) -> Self::Point {
        Self::mul(k, &Self::generator())
    }

    /// Fixed-width big-endian encoding.
    fn scalar_to_bytes(s: &Self::Scalar) -> Vec<u8>;
    /// Accepts only canonical (fully reduced, correct width) encodings.
    fn scalar_from_bytes(bytes: &[u8]) -> Option<Self::Scalar>;
    fn point_to_bytes(p: &Self::Point) -> Vec<u8>;
    fn point_from_bytes(bytes: &[u8]) -> Option<Self::Point>;

    fn scalar_zero() -> Self::Scalar {
        Self::scalar_from_u64(0)
    }
    fn scalar_one() -> Self::Scalar {
        Self::scalar_from_u64(1)
    }

    fn params() -> GroupParams<Self> {
        GroupParams {
            order: Self::order_be_bytes(),
            generator: Self::generator(),
            instantiation: Self::INSTANTIATION,
        }
    }
}

/// Domain tags for every hash-to-scalar context in the crate.
pub mod tags {
    pub const KEYGEN: &[u8] = b"pegsim/keygen";
    pub const NONCE: &[u8] = b"pegsim/nonce";
    pub const CHALLENGE: &[u8] = b"pegsim/schnorr-challenge";
    pub const SWAP_CHALLENGE: &[u8] = b"pegsim/swap-challenge";
    pub const SWAP_NONCE: &[u8] = b"pegsim/swap-nonce";
    pub const COMMITMENT: &[u8] = b"pegsim/commitment";
}

/// Length-prefixed concatenation: each part is preceded by its length as a
/// big-endian `u64`. This is the transcript and hashing wire format.
pub fn length_prefixed(parts: &[&[u8]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(parts.iter().map(|p| p.len() + 8).sum());
    for part in parts {
        out.extend_from_slice(&(part.len() as u64).to_be_bytes());
        out.extend_from_slice(part);
    }
    out
}

/// Domain-separated hash to a scalar: `SHA-512(lp(tag) || lp(part_1) || ...)`
/// read as a big-endian integer and reduced modulo the group order.
pub fn scalar_from_hash<G: Group>(domain_tag: &[u8], parts: &[&[u8]]) -> G::Scalar {
    debug_assert!(!parts.is_empty(), "hash input must contain at least one part");
    let mut hasher = Sha512::new();
    hasher.update((domain_tag.len() as u64).to_be_bytes());
    hasher.update(domain_tag);
    for part in parts {
        hasher.update((part.len() as u64).to_be_bytes());
        hasher.update(part);
    }
    let digest: [u8; 64] = hasher.finalize().into();
    G::scalar_reduce_wide(&digest)
}

/// `k * P`.
pub fn point_mul<G: Group>(k: &G::Scalar, p: &G::Point) -> G::Point {
    G::mul(k, p)
}

/// The ristretto255 prime-order group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ristretto;

const RISTRETTO_ORDER_HEX: &str =
    "1000000000000000000000000000000014def9dea2f79cd65812631a5cf5d3ed";

impl Group for Ristretto {
    type Scalar = curve25519_dalek::Scalar;
    type Point = RistrettoPoint;

    const INSTANTIATION: Instantiation = Instantiation::ProductionCurve;
    const SCALAR_LEN: usize = 32;
    const POINT_LEN: usize = 32;

    fn order_be_bytes() -> Vec<u8> {
        hex::decode(RISTRETTO_ORDER_HEX).expect("static hex")
    }

    fn generator() -> RistrettoPoint {
        curve25519_dalek::constants::RISTRETTO_BASEPOINT_POINT
    }

    fn identity() -> RistrettoPoint {
        RistrettoPoint::identity()
    }

    fn scalar_from_u64(v: u64) -> Self::Scalar {
        curve25519_dalek::Scalar::from(v)
    }

    fn scalar_reduce_wide(bytes: &[u8; 64]) -> Self::Scalar {
        let mut le = *bytes;
        le.reverse();
        curve25519_dalek::Scalar::from_bytes_mod_order_wide(&le)
    }

    fn mul(k: &Self::Scalar, p: &RistrettoPoint) -> RistrettoPoint {
        p * k
    }

    fn mul_base(k: &Self::Scalar) -> RistrettoPoint {
        RISTRETTO_BASEPOINT_TABLE * k
    }

    fn scalar_to_bytes(s: &Self::Scalar) -> Vec<u8> {
        let mut out = s.to_bytes().to_vec();
        out.reverse();
        out
    }

    fn scalar_from_bytes(bytes: &[u8]) -> Option<Self::Scalar> {
        let mut le: [u8; 32] = bytes.try_into().ok()?;
        le.reverse();
        Option::from(curve25519_dalek::Scalar::from_canonical_bytes(le))
    }

    fn point_to_bytes(p: &RistrettoPoint) -> Vec<u8> {
        p.compress().to_bytes().to_vec()
    }

    fn point_from_bytes(bytes: &[u8]) -> Option<RistrettoPoint> {
        CompressedRistretto::from_slice(bytes).ok()?.decompress()
    }
}

/// Order-`Q` subgroup of `Z_P^*` generated by `GEN`, with `P = 2Q + 1`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ToyGroup<const P: u32, const Q: u32, const GEN: u32>;

/// Default toy group: `q = 1019`, `p = 2039`.
pub type Toy = ToyGroup<2039, 1019, 4>;
/// Smaller toy group for quadratic-size enumerations: `q = 83`, `p = 167`.
pub type TinyToy = ToyGroup<167, 83, 4>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ToyScalar<const Q: u32>(u32);

impl<const Q: u32> ToyScalar<Q> {
    pub fn new(v: u64) -> Self {
        ToyScalar((v % Q as u64) as u32)
    }

    pub fn value(self) -> u32 {
        self.0
    }
}

impl<const Q: u32> Add for ToyScalar<Q> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        ToyScalar(((self.0 as u64 + rhs.0 as u64) % Q as u64) as u32)
    }
}

impl<const Q: u32> Sub for ToyScalar<Q> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        ToyScalar(((self.0 as u64 + Q as u64 - rhs.0 as u64) % Q as u64) as u32)
    }
}

impl<const Q: u32> Mul for ToyScalar<Q> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        ToyScalar(((self.0 as u64 * rhs.0 as u64) % Q as u64) as u32)
    }
}

impl<const Q: u32> Neg for ToyScalar<Q> {
    type Output = Self;
    fn neg(self) -> Self {
        ToyScalar(((Q - self.0) % Q) as u32)
    }
}

/// Element of the toy subgroup, stored as its residue mod `P`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ToyElement<const P: u32>(u32);

impl<const P: u32> ToyElement<P> {
    pub fn residue(self) -> u32 {
        self.0
    }
}

fn mod_pow(base: u64, mut exp: u64, modulus: u64) -> u64 {
    let mut acc = 1u64;
    let mut b = base % modulus;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = acc * b % modulus;
        }
        b = b * b % modulus;
        exp >>= 1;
    }
    acc
}

impl<const P: u32> Add for ToyElement<P> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        ToyElement((self.0 as u64 * rhs.0 as u64 % P as u64) as u32)
    }
}

impl<const P: u32> Sub for ToyElement<P> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        // rhs^(P-2) is the inverse in Z_P^*.
        let inv = mod_pow(rhs.0 as u64, P as u64 - 2, P as u64);
        ToyElement((self.0 as u64 * inv % P as u64) as u32)
    }
}

impl<const P: u32, const Q: u32, const GEN: u32> Group for ToyGroup<P, Q, GEN> {
    type Scalar = ToyScalar<Q>;
    type Point = ToyElement<P>;

    const INSTANTIATION: Instantiation = Instantiation::Toy;
    const SCALAR_LEN: usize = 4;
    const POINT_LEN: usize = 4;

    fn order_be_bytes() -> Vec<u8> {
        Q.to_be_bytes().to_vec()
    }

    fn generator() -> ToyElement<P> {
        ToyElement(GEN)
    }

    fn identity() -> ToyElement<P> {
        ToyElement(1)
    }

    fn scalar_from_u64(v: u64) -> ToyScalar<Q> {
        ToyScalar::new(v)
    }

    fn scalar_reduce_wide(bytes: &[u8; 64]) -> ToyScalar<Q> {
        let q = Q as u64;
        let r = bytes.iter().fold(0u64, |acc, &b| (acc * 256 + b as u64) % q);
        ToyScalar(r as u32)
    }

    fn mul(k: &ToyScalar<Q>, p: &ToyElement<P>) -> ToyElement<P> {
        ToyElement(mod_pow(p.0 as u64, k.0 as u64, P as u64) as u32)
    }

    fn scalar_to_bytes(s: &ToyScalar<Q>) -> Vec<u8> {
        s.0.to_be_bytes().to_vec()
    }

    fn scalar_from_bytes(bytes: &[u8]) -> Option<ToyScalar<Q>> {
        let v = u32::from_be_bytes(bytes.try_into().ok()?);
        (v < Q).then_some(ToyScalar(v))
    }

    fn point_to_bytes(p: &ToyElement<P>) -> Vec<u8> {
        p.0.to_be_bytes().to_vec()
    }

    fn point_from_bytes(bytes: &[u8]) -> Option<ToyElement<P>> {
        let v = u32::from_be_bytes(bytes.try_into().ok()?);
        if v == 0 || v >= P || mod_pow(v as u64, Q as u64, P as u64) != 1 {
            return None;
        }
        Some(ToyElement(v))
    }
}
