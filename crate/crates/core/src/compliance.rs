//! Commitment-based compliance checks.
//!
//! Identity commitments are blinded SHA-256 digests and permissible assets
//! live in a sorted Merkle tree. This gives binding and membership soundness
//! only: nothing here is zero-knowledge. The [`ComplianceOracle`] trait is the
//! seam where a real proof system would plug in.

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::group::length_prefixed;

pub type Digest32 = [u8; 32];

const IDENTITY_TAG: &[u8] = b"pegsim/identity";
const LEAF_TAG: &[u8] = &[0x00];
const NODE_TAG: &[u8] = &[0x01];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ComplianceError {
    #[error("asset set is empty")]
    EmptyTree,
    #[error("asset {0:?} is not in the permissible set")]
    NotAMember(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IdentityCommitment(pub Digest32);

/// `SHA-256(lp(tag) || lp(w) || lp(r))`.
pub fn commit_identity(identity: &[u8], blinding: &[u8]) -> IdentityCommitment {
    let mut h = Sha256::new();
    h.update(length_prefixed(&[IDENTITY_TAG, identity, blinding]));
    IdentityCommitment(h.finalize().into())
}

pub fn leaf_hash(asset_id: &str) -> Digest32 {
    let mut h = Sha256::new();
    h.update(LEAF_TAG);
    h.update(asset_id.as_bytes());
    h.finalize().into()
}

pub fn node_hash(left: &Digest32, right: &Digest32) -> Digest32 {
    let mut h = Sha256::new();
    h.update(NODE_TAG);
    h.update(left);
    h.update(right);
    h.finalize().into()
}

/// Sibling path from a leaf to the root. `true` marks a sibling on the right.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MembershipProof {
    pub siblings: Vec<(Digest32, bool)>,
}

/// Merkle tree over the sorted, de-duplicated asset ids. Odd nodes are paired
/// with themselves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssetMerkleTree {
    leaves: Vec<String>,
    levels: Vec<Vec<Digest32>>,
}

impl AssetMerkleTree {
    pub fn new<I, S>(assets: I) -> Result<Self, ComplianceError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let leaves: Vec<String> =
            assets.into_iter().map(Into::into).collect::<BTreeSet<_>>().into_iter().collect();
        if leaves.is_empty() {
            return Err(ComplianceError::EmptyTree);
        }
        let mut levels = vec![leaves.iter().map(|a| leaf_hash(a)).collect::<Vec<_>>()];
        while levels.last().unwrap().len() > 1 {
            let prev = levels.last().unwrap();
            let next = prev
                .chunks(2)
                .map(|pair| node_hash(&pair[0], pair.get(1).unwrap_or(&pair[0])))
                .collect();
            levels.push(next);
        }
        Ok(AssetMerkleTree { leaves, levels })
    }

    pub fn root(&self) -> Digest32 {
        self.levels.last().unwrap()[0]
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn leaves(&self) -> &[String] {
        &self.leaves
    }

    pub fn prove(&self, asset_id: &str) -> Result<MembershipProof, ComplianceError> {
        let mut idx = self
            .leaves
            .binary_search_by(|l| l.as_str().cmp(asset_id))
            .map_err(|_| ComplianceError::NotAMember(asset_id.to_string()))?;
        let mut siblings = Vec::with_capacity(self.depth());
        for level in &self.levels[..self.levels.len() - 1] {
            let sibling_idx = idx ^ 1;
            let sibling = *level.get(sibling_idx).unwrap_or(&level[idx]);
            siblings.push((sibling, sibling_idx > idx || sibling_idx >= level.len()));
            idx /= 2;
        }
        Ok(MembershipProof { siblings })
    }
}

pub fn merkle_root<I, S>(assets: I) -> Result<Digest32, ComplianceError>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    AssetMerkleTree::new(assets).map(|t| t.root())
}

pub fn prove_membership<I, S>(assets: I, asset_id: &str) -> Result<MembershipProof, ComplianceError>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    AssetMerkleTree::new(assets)?.prove(asset_id)
}

pub fn verify_membership(root: &Digest32, asset_id: &str, proof: &MembershipProof) -> bool {
    let acc = proof.siblings.iter().fold(leaf_hash(asset_id), |acc, (sib, right)| {
        if *right {
            node_hash(&acc, sib)
        } else {
            node_hash(sib, &acc)
        }
    });
    acc == *root
}

/// What a transaction asserts for compliance purposes.
#[derive(Debug, Clone)]
pub struct ComplianceClaim {
    pub assets: Vec<(String, MembershipProof)>,
    pub sender: IdentityCommitment,
    pub receiver: IdentityCommitment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComplianceReason {
    Ok,
    AssetNotPermitted,
    UnregisteredSender,
    UnregisteredReceiver,
}

pub trait ComplianceOracle {
    fn check(&self, claim: &ComplianceClaim, root: &Digest32) -> ComplianceReason;
}

/// Registry of approved identity commitments.
#[derive(Debug, Clone, Default)]
pub struct IdentityRegistry {
    registered: BTreeSet<IdentityCommitment>,
}

impl IdentityRegistry {
    pub fn register(&mut self, c: IdentityCommitment) {
        self.registered.insert(c);
    }

    pub fn contains(&self, c: &IdentityCommitment) -> bool {
        self.registered.contains(c)
    }
}

impl ComplianceOracle for IdentityRegistry {
    fn check(&self, claim: &ComplianceClaim, root: &Digest32) -> ComplianceReason {
        if !claim.assets.iter().all(|(id, proof)| verify_membership(root, id, proof)) {
            return ComplianceReason::AssetNotPermitted;
        }
        if !self.contains(&claim.sender) {
            return ComplianceReason::UnregisteredSender;
        }
        if !self.contains(&claim.receiver) {
            return ComplianceReason::UnregisteredReceiver;
        }
        ComplianceReason::Ok
    }
}

/// Valid iff every referenced asset is in the tree and both parties are
/// registered.
pub fn check_tx_compliance(
    claim: &ComplianceClaim,
    root: &Digest32,
    registry: &IdentityRegistry,
) -> (bool, ComplianceReason) {
    let reason = registry.check(claim, root);
    (reason == ComplianceReason::Ok, reason)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assets8() -> Vec<String> {
        (0..8).map(|i| format!("asset-{i}")).collect()
    }

    #[test]
    fn commitments_bind_and_blind() {
        let c = commit_identity(b"alice", b"r1");
        assert_eq!(c, commit_identity(b"alice", b"r1"));
        assert_ne!(c, commit_identity(b"alice", b"r2"));
        assert_ne!(c, commit_identity(b"alic", b"er1"));
    }

    #[test]
    fn commitment_matches_independent_encoding() {
        // Second implementation: build the preimage byte by byte.
        let mut pre = Vec::new();
        for part in [&b"pegsim/identity"[..], b"w", b"r"] {
            pre.extend_from_slice(&(part.len() as u64).to_be_bytes());
            pre.extend_from_slice(part);
        }
        let expected: [u8; 32] = Sha256::digest(&pre).into();
        assert_eq!(commit_identity(b"w", b"r").0, expected);
    }

    #[test]
    fn single_leaf_tree() {
        let tree = AssetMerkleTree::new(["only"]).unwrap();
        assert_eq!(tree.root(), leaf_hash("only"));
        let proof = tree.prove("only").unwrap();
        assert!(proof.siblings.is_empty());
        assert!(verify_membership(&tree.root(), "only", &proof));
        assert_eq!(AssetMerkleTree::new(Vec::<String>::new()), Err(ComplianceError::EmptyTree));
    }

    #[test]
    fn eight_leaf_tree_proofs_and_bit_flips() {
        let tree = AssetMerkleTree::new(assets8()).unwrap();
        assert_eq!(tree.depth(), 3);
        for asset in assets8() {
            let proof = tree.prove(&asset).unwrap();
            assert!(verify_membership(&tree.root(), &asset, &proof));
            for level in 0..proof.siblings.len() {
                for bit in 0..256 {
                    let mut forged = proof.clone();
                    forged.siblings[level].0[bit / 8] ^= 1 << (bit % 8);
                    assert!(!verify_membership(&tree.root(), &asset, &forged));
                }
                let mut flipped = proof.clone();
                flipped.siblings[level].1 ^= true;
                assert!(!verify_membership(&tree.root(), &asset, &flipped));
            }
        }
    }

    #[test]
    fn odd_sized_tree_proofs_verify() {
        for n in 1..12 {
            let assets: Vec<String> = (0..n).map(|i| format!("a{i}")).collect();
            let tree = AssetMerkleTree::new(assets.clone()).unwrap();
            for a in &assets {
                assert!(verify_membership(&tree.root(), a, &tree.prove(a).unwrap()));
            }
        }
    }

    #[test]
    fn root_is_order_independent() {
        let mut shuffled = assets8();
        shuffled.reverse();
        shuffled.push("asset-3".into());
        assert_eq!(merkle_root(assets8()).unwrap(), merkle_root(shuffled).unwrap());
    }

    #[test]
    fn non_members_cannot_be_proven_or_forged() {
        let tree = AssetMerkleTree::new(assets8()).unwrap();
        assert_eq!(
            prove_membership(assets8(), "nope"),
            Err(ComplianceError::NotAMember("nope".into()))
        );
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let depth = rng.gen_range(0..5);
            let forged = MembershipProof {
                siblings: (0..depth).map(|_| (rng.gen(), rng.gen())).collect(),
            };
            assert!(!verify_membership(&tree.root(), "nope", &forged));
        }
    }

    #[test]
    fn tx_compliance_matches_set_lookup() {
        let tree = AssetMerkleTree::new(assets8()).unwrap();
        let mut registry = IdentityRegistry::default();
        let alice = commit_identity(b"alice", b"ra");
        let bob = commit_identity(b"bob", b"rb");
        let mallory = commit_identity(b"mallory", b"rm");
        registry.register(alice);
        registry.register(bob);

        let permitted: BTreeSet<String> = assets8().into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let n = rng.gen_range(1..4);
            let ids: Vec<String> = (0..n)
                .map(|_| format!("asset-{}", rng.gen_range(0..12)))
                .collect();
            let assets = ids
                .iter()
                .map(|id| {
                    let proof = tree.prove(id).unwrap_or(MembershipProof { siblings: vec![] });
                    (id.clone(), proof)
                })
                .collect();
            let receiver = if rng.gen_bool(0.2) { mallory } else { bob };
            let claim = ComplianceClaim { assets, sender: alice, receiver };
            let expected = ids.iter().all(|id| permitted.contains(id)) && receiver == bob;
            let (ok, reason) = check_tx_compliance(&claim, &tree.root(), &registry);
            assert_eq!(ok, expected);
            if ids.iter().any(|id| !permitted.contains(id)) {
                assert_eq!(reason, ComplianceReason::AssetNotPermitted);
            } else if receiver == mallory {
                assert_eq!(reason, ComplianceReason::UnregisteredReceiver);
            }
        }
    }
}
