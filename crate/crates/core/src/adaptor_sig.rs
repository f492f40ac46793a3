//! Schnorr signatures, adaptor pre-signatures and the two-party swap
//! partial-signature scheme.
//!
//! A full signature is a standard Schnorr pair `(s, R')` with
//! `s·G = R' + H(R' ∥ Y ∥ m)·Y`. A pre-signature `(s', R)` under adaptor
//! point `T` uses the challenge `e = H(R + T ∥ Y ∥ m)`; completing it with
//! `t` (where `T = t·G`) gives `(s' + t, R + T)`, and anyone holding both
//! halves recovers `t = s − s'`.
//!
//! Swap partials share one session challenge `e = H(R_A + R_B ∥ X ∥ Y)` so
//! that the aggregate check `(s_A + s_B)·G = (R_A + R_B) + e·(pk_A + pk_B)`
//! and the per-party settlement check `s'_p·G = e·pk_p` hold together.

use std::collections::HashSet;

use thiserror::Error;

use crate::group::{length_prefixed, scalar_from_hash, tags, Group};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SigError {
    #[error("key seed must be non-empty")]
    EmptySeed,
    #[error("adaptor point must not be the identity")]
    DegenerateAdaptor,
    #[error("secret does not open the adaptor point")]
    WrongSecret,
    #[error("signature and pre-signature use different nonces")]
    NonceMismatch,
    #[error("nonce already used in this session")]
    NonceReuse,
    #[error("revealed nonce does not match the committed nonce point")]
    InconsistentNonce,
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct KeyPair<G: Group> {
    sk: G::Scalar,
    pk: G::Point,
}

impl<G: Group> std::fmt::Debug for KeyPair<G> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyPair").field("pk", &self.pk).finish_non_exhaustive()
    }
}

impl<G: Group> KeyPair<G> {
    /// Builds a keypair from a known secret. Used by tests and by
    /// deterministic derivation.
    pub fn from_secret(sk: G::Scalar) -> Self {
        KeyPair { sk, pk: G::mul_base(&sk) }
    }

    pub fn sk(&self) -> G::Scalar {
        self.sk
    }

    pub fn pk(&self) -> G::Point {
        self.pk
    }
}

/// Deterministic key generation. Re-hashes with a counter until the secret is
/// non-zero, which only matters on toy groups.
pub fn keygen<G: Group>(seed: &[u8]) -> Result<KeyPair<G>, SigError> {
    if seed.is_empty() {
        return Err(SigError::EmptySeed);
    }
    let mut counter = 0u32;
    loop {
        let sk = scalar_from_hash::<G>(tags::KEYGEN, &[seed, &counter.to_be_bytes()]);
        if sk != G::scalar_zero() {
            return Ok(KeyPair::from_secret(sk));
        }
        counter += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Signature<G: Group> {
    pub s: G::Scalar,
    /// Nonce point of the completed signature (`R + T` for adapted ones).
    pub r_point: G::Point,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreSignature<G: Group> {
    pub s_prime: G::Scalar,
    pub r_point: G::Point,
    pub adaptor: G::Point,
}

/// `H(R ∥ Y ∥ m)` with the Schnorr challenge tag.
pub fn challenge<G: Group>(nonce_point: &G::Point, pk: &G::Point, msg: &[u8]) -> G::Scalar {
    scalar_from_hash::<G>(
        tags::CHALLENGE,
        &[&G::point_to_bytes(nonce_point), &G::point_to_bytes(pk), msg],
    )
}

fn derive_nonce<G: Group>(kp: &KeyPair<G>, parts: &[&[u8]]) -> G::Scalar {
    let sk = G::scalar_to_bytes(&kp.sk);
    let mut all: Vec<&[u8]> = vec![&sk];
    all.extend_from_slice(parts);
    scalar_from_hash::<G>(tags::NONCE, &all)
}

pub fn sign<G: Group>(kp: &KeyPair<G>, msg: &[u8], nonce_seed: &[u8]) -> Signature<G> {
    let r = derive_nonce(kp, &[b"sign", msg, nonce_seed]);
    let r_point = G::mul_base(&r);
    let e = challenge::<G>(&r_point, &kp.pk, msg);
    Signature { s: r + e * kp.sk, r_point }
}

pub fn verify<G: Group>(pk: &G::Point, msg: &[u8], sig: &Signature<G>) -> bool {
    let e = challenge::<G>(&sig.r_point, pk, msg);
    G::mul_base(&sig.s) == sig.r_point + G::mul(&e, pk)
}

/// `s' = r + e·x` with `e = H(R + T ∥ Y ∥ m)`.
pub fn pre_sign<G: Group>(
    kp: &KeyPair<G>,
    msg: &[u8],
    adaptor: &G::Point,
    nonce_seed: &[u8],
) -> Result<PreSignature<G>, SigError> {
    if *adaptor == G::identity() {
        return Err(SigError::DegenerateAdaptor);
    }
    let r = derive_nonce(kp, &[b"pre-sign", msg, &G::point_to_bytes(adaptor), nonce_seed]);
    Ok(pre_sign_with_nonce(kp, msg, adaptor, r))
}

/// Pre-signature with an explicit nonce. Callers must never reuse `r`.
pub fn pre_sign_with_nonce<G: Group>(
    kp: &KeyPair<G>,
    msg: &[u8],
    adaptor: &G::Point,
    r: G::Scalar,
) -> PreSignature<G> {
    let r_point = G::mul_base(&r);
    let e = challenge::<G>(&(r_point + *adaptor), &kp.pk, msg);
    PreSignature { s_prime: r + e * kp.sk, r_point, adaptor: *adaptor }
}

pub fn pre_verify<G: Group>(
    pk: &G::Point,
    msg: &[u8],
    adaptor: &G::Point,
    pre: &PreSignature<G>,
) -> bool {
    if pre.adaptor != *adaptor || *adaptor == G::identity() {
        return false;
    }
    let e = challenge::<G>(&(pre.r_point + *adaptor), pk, msg);
    G::mul_base(&pre.s_prime) == pre.r_point + G::mul(&e, pk)
}

/// Completes a pre-signature with the adaptor secret.
pub fn adapt<G: Group>(pre: &PreSignature<G>, t: &G::Scalar) -> Result<Signature<G>, SigError> {
    if G::mul_base(t) != pre.adaptor {
        return Err(SigError::WrongSecret);
    }
    Ok(Signature { s: pre.s_prime + *t, r_point: pre.r_point + pre.adaptor })
}

/// Recovers `t = s − s'` from a completed signature and its pre-signature.
pub fn extract_secret<G: Group>(
    sig: &Signature<G>,
    pre: &PreSignature<G>,
) -> Result<G::Scalar, SigError> {
    if sig.r_point != pre.r_point + pre.adaptor {
        return Err(SigError::NonceMismatch);
    }
    let t = sig.s - pre.s_prime;
    if G::mul_base(&t) != pre.adaptor {
        return Err(SigError::WrongSecret);
    }
    Ok(t)
}

/// Asset binding and joint nonce of one swap session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionBinding<G: Group> {
    /// Canonical encoding of asset `X` (chain, asset id, amount, session label).
    pub asset_x: Vec<u8>,
    pub asset_y: Vec<u8>,
    pub joint_nonce: G::Point,
}

impl<G: Group> SessionBinding<G> {
    /// Identifier binding `X` and `Y`; carried by every partial.
    pub fn session_id(&self) -> Vec<u8> {
        length_prefixed(&[&self.asset_x, &self.asset_y])
    }

    /// Shared challenge `e = H(R_A + R_B ∥ X ∥ Y)`.
    pub fn challenge(&self) -> G::Scalar {
        scalar_from_hash::<G>(
            tags::SWAP_CHALLENGE,
            &[&G::point_to_bytes(&self.joint_nonce), &self.asset_x, &self.asset_y],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwapPartial<G: Group> {
    pub s: G::Scalar,
    pub nonce_point: G::Point,
    pub session_id: Vec<u8>,
}

/// Tracks nonces already spent by one signer.
#[derive(Debug, Default, Clone)]
pub struct NonceRegistry {
    used: HashSet<Vec<u8>>,
}

impl NonceRegistry {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Deterministic per-session nonce derived from `(sk, session, counter)`.
pub fn derive_swap_nonce<G: Group>(kp: &KeyPair<G>, session_label: &[u8], counter: u32) -> G::Scalar {
    scalar_from_hash::<G>(
        tags::SWAP_NONCE,
        &[&G::scalar_to_bytes(&kp.sk), session_label, &counter.to_be_bytes()],
    )
}

/// `s_p = r_p + e·sk_p` under the shared session challenge.
pub fn swap_partial_sign<G: Group>(
    kp: &KeyPair<G>,
    binding: &SessionBinding<G>,
    own_nonce: &G::Scalar,
    registry: &mut NonceRegistry,
) -> Result<SwapPartial<G>, SigError> {
    if !registry.used.insert(G::scalar_to_bytes(own_nonce)) {
        return Err(SigError::NonceReuse);
    }
    let e = binding.challenge();
    Ok(SwapPartial {
        s: *own_nonce + e * kp.sk,
        nonce_point: G::mul_base(own_nonce),
        session_id: binding.session_id(),
    })
}

/// Aggregate verification of both partials against the session.
pub fn joint_verify<G: Group>(
    partials: (&SwapPartial<G>, &SwapPartial<G>),
    pks: (&G::Point, &G::Point),
    binding: &SessionBinding<G>,
) -> bool {
    let sid = binding.session_id();
    let (a, b) = partials;
    if a.session_id != sid || b.session_id != sid {
        return false;
    }
    if a.nonce_point + b.nonce_point != binding.joint_nonce {
        return false;
    }
    let e = binding.challenge();
    G::mul_base(&(a.s + b.s)) == binding.joint_nonce + G::mul(&e, &(*pks.0 + *pks.1))
}

/// Individual check `s_p·G = R_p + e·pk_p`, used by a party on its
/// counterparty's partial before trusting the aggregate.
pub fn partial_verify<G: Group>(
    partial: &SwapPartial<G>,
    pk: &G::Point,
    binding: &SessionBinding<G>,
) -> bool {
    partial.session_id == binding.session_id()
        && G::mul_base(&partial.s) == partial.nonce_point + G::mul(&binding.challenge(), pk)
}

/// Settlement value `s'_p = s_p − r_p` together with the revealed nonce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SettlementProof<G: Group> {
    pub nonce_point: G::Point,
    pub revealed_nonce: G::Scalar,
    pub s_prime: G::Scalar,
}

pub fn settle_reveal<G: Group>(
    partial: &SwapPartial<G>,
    r_p: &G::Scalar,
) -> Result<SettlementProof<G>, SigError> {
    if G::mul_base(r_p) != partial.nonce_point {
        return Err(SigError::InconsistentNonce);
    }
    Ok(SettlementProof {
        nonce_point: partial.nonce_point,
        revealed_nonce: *r_p,
        s_prime: partial.s - *r_p,
    })
}

/// Recomputes a party's own nonce from its public partial and secret key:
/// `r_p = s_p − e·sk_p`.
pub fn recover_own_nonce<G: Group>(
    partial: &SwapPartial<G>,
    kp: &KeyPair<G>,
    challenge: &G::Scalar,
) -> G::Scalar {
    partial.s - *challenge * kp.sk
}

/// Chain-side check: the nonce opens `R_p` and `s'_p·G = e·pk_p`.
pub fn verify_settlement<G: Group>(
    proof: &SettlementProof<G>,
    pk: &G::Point,
    challenge: &G::Scalar,
) -> bool {
    G::mul_base(&proof.revealed_nonce) == proof.nonce_point
        && G::mul_base(&proof.s_prime) == G::mul(challenge, pk)
}

/// Length-prefixed transcript encoding of a partial.
pub fn encode_partial<G: Group>(p: &SwapPartial<G>) -> Vec<u8> {
    length_prefixed(&[
        &G::scalar_to_bytes(&p.s),
        &G::point_to_bytes(&p.nonce_point),
        &p.session_id,
    ])
}

pub fn decode_partial<G: Group>(bytes: &[u8]) -> Option<SwapPartial<G>> {
    let parts = split_length_prefixed(bytes)?;
    if parts.len() != 3 {
        return None;
    }
    Some(SwapPartial {
        s: G::scalar_from_bytes(parts[0])?,
        nonce_point: G::point_from_bytes(parts[1])?,
        session_id: parts[2].to_vec(),
    })
}

pub fn encode_settlement<G: Group>(p: &SettlementProof<G>) -> Vec<u8> {
    length_prefixed(&[
        &G::point_to_bytes(&p.nonce_point),
        &G::scalar_to_bytes(&p.revealed_nonce),
        &G::scalar_to_bytes(&p.s_prime),
    ])
}

pub fn decode_settlement<G: Group>(bytes: &[u8]) -> Option<SettlementProof<G>> {
    match split_length_prefixed(bytes)?.as_slice() {
        [r, n, s] => Some(SettlementProof {
            nonce_point: G::point_from_bytes(r)?,
            revealed_nonce: G::scalar_from_bytes(n)?,
            s_prime: G::scalar_from_bytes(s)?,
        }),
        _ => None,
    }
}

pub fn encode_signature<G: Group>(sig: &Signature<G>) -> Vec<u8> {
    length_prefixed(&[&G::scalar_to_bytes(&sig.s), &G::point_to_bytes(&sig.r_point)])
}

pub fn decode_signature<G: Group>(bytes: &[u8]) -> Option<Signature<G>> {
    match split_length_prefixed(bytes)?.as_slice() {
        [s, r] => Some(Signature { s: G::scalar_from_bytes(s)?, r_point: G::point_from_bytes(r)? }),
        _ => None,
    }
}

/// Inverse of [`length_prefixed`]; `None` on truncated input.
pub fn split_length_prefixed(mut bytes: &[u8]) -> Option<Vec<&[u8]>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let len = u64::from_be_bytes(bytes.get(..8)?.try_into().ok()?) as usize;
        let body = bytes.get(8..8usize.checked_add(len)?)?;
        out.push(body);
        bytes = &bytes[8 + len..];
    }
    Some(out)
}
