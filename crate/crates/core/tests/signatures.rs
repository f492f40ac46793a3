use num_bigint::BigUint;
use pegsim_core::adaptor_sig::*;
use pegsim_core::group::{length_prefixed, scalar_from_hash, Group, Ristretto, TinyToy, Toy};
use proptest::prelude::*;
use sha2::{Digest, Sha512};

/// Hash-to-scalar recomputed with arbitrary-precision arithmetic.
fn reference_scalar(order: &[u8], tag: &[u8], parts: &[&[u8]]) -> BigUint {
    let mut all = vec![tag];
    all.extend_from_slice(parts);
    let digest = Sha512::digest(length_prefixed(&all));
    BigUint::from_bytes_be(&digest) % BigUint::from_bytes_be(order)
}

fn check_hash<G: Group>(tag: &[u8], parts: &[&[u8]]) {
    let got = scalar_from_hash::<G>(tag, parts);
    let expected = reference_scalar(&G::order_be_bytes(), tag, parts);
    assert_eq!(BigUint::from_bytes_be(&G::scalar_to_bytes(&got)), expected);
}

#[test]
fn hash_to_scalar_matches_bigint_reduction() {
    let inputs: [&[&[u8]]; 4] = [&[b""], &[b"abc"], &[b"a", b"bc"], &[&[0xff; 200], b"x"]];
    for parts in inputs {
        check_hash::<Ristretto>(b"tag", parts);
        check_hash::<Toy>(b"tag", parts);
        check_hash::<TinyToy>(b"other", parts);
    }
}

#[test]
fn length_prefix_separates_splits() {
    let a = scalar_from_hash::<Ristretto>(b"t", &[b"ab", b"c"]);
    let b = scalar_from_hash::<Ristretto>(b"t", &[b"a", b"bc"]);
    assert_ne!(a, b);
}

fn swap_session<G: Group>(seed: u64) -> (KeyPair<G>, KeyPair<G>, G::Scalar, G::Scalar, SessionBinding<G>) {
    let ka = keygen::<G>(&[b"a".as_slice(), &seed.to_be_bytes()].concat()).unwrap();
    let kb = keygen::<G>(&[b"b".as_slice(), &seed.to_be_bytes()].concat()).unwrap();
    let ra = derive_swap_nonce(&ka, b"s", 0);
    let rb = derive_swap_nonce(&kb, b"s", 0);
    let binding = SessionBinding {
        asset_x: b"x-terms".to_vec(),
        asset_y: seed.to_be_bytes().to_vec(),
        joint_nonce: G::mul_base(&ra) + G::mul_base(&rb),
    };
    (ka, kb, ra, rb, binding)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn signatures_verify_and_bind_the_message(seed in any::<u64>(), msg in prop::collection::vec(any::<u8>(), 0..64)) {
        let kp = keygen::<Ristretto>(&seed.to_be_bytes()).unwrap();
        let sig = sign(&kp, &msg, b"n");
        prop_assert!(verify(&kp.pk(), &msg, &sig));
        let mut other = msg.clone();
        other.push(1);
        prop_assert!(!verify(&kp.pk(), &other, &sig));
        let decoded = decode_signature::<Ristretto>(&encode_signature(&sig)).unwrap();
        prop_assert!(verify(&kp.pk(), &msg, &decoded));
    }

    #[test]
    fn adapt_then_extract_recovers_the_secret(seed in any::<u64>(), t in 1u64..u64::MAX) {
        let kp = keygen::<Ristretto>(&seed.to_be_bytes()).unwrap();
        let t = Ristretto::scalar_from_u64(t);
        let adaptor = Ristretto::mul_base(&t);
        let pre = pre_sign(&kp, b"m", &adaptor, b"n").unwrap();
        prop_assert!(pre_verify(&kp.pk(), b"m", &adaptor, &pre));
        let sig = adapt(&pre, &t).unwrap();
        prop_assert!(verify(&kp.pk(), b"m", &sig));
        prop_assert_eq!(extract_secret(&sig, &pre).unwrap(), t);
        let wrong = t + Ristretto::scalar_one();
        prop_assert!(adapt(&pre, &wrong).is_err());
    }

    #[test]
    fn swap_partials_settle_only_in_their_session(seed in any::<u64>()) {
        let (ka, kb, ra, rb, binding) = swap_session::<Ristretto>(seed);
        let mut reg_a = NonceRegistry::new();
        let mut reg_b = NonceRegistry::new();
        let pa = swap_partial_sign(&ka, &binding, &ra, &mut reg_a).unwrap();
        let pb = swap_partial_sign(&kb, &binding, &rb, &mut reg_b).unwrap();
        prop_assert!(joint_verify((&pa, &pb), (&ka.pk(), &kb.pk()), &binding));
        prop_assert!(partial_verify(&pa, &ka.pk(), &binding));
        // Reuse of a nonce is refused.
        prop_assert!(swap_partial_sign(&ka, &binding, &ra, &mut reg_a).is_err());

        let e = binding.challenge();
        let proof_a = settle_reveal(&pa, &ra).unwrap();
        prop_assert!(verify_settlement(&proof_a, &ka.pk(), &e));
        // The counterparty recovers its own nonce from its partial.
        prop_assert_eq!(recover_own_nonce(&pb, &kb, &e), rb);
        let decoded = decode_settlement::<Ristretto>(&encode_settlement(&proof_a)).unwrap();
        prop_assert_eq!(decoded, proof_a);

        let (_, _, _, _, foreign) = swap_session::<Ristretto>(seed.wrapping_add(1));
        prop_assert!(!joint_verify((&pa, &pb), (&ka.pk(), &kb.pk()), &foreign));
        prop_assert!(!verify_settlement(&proof_a, &ka.pk(), &foreign.challenge()));
        prop_assert!(!verify_settlement(&proof_a, &kb.pk(), &e));
    }

    #[test]
    fn toy_swap_round_trip(seed in any::<u64>()) {
        let (ka, kb, ra, rb, binding) = swap_session::<Toy>(seed);
        let pa = swap_partial_sign(&ka, &binding, &ra, &mut NonceRegistry::new()).unwrap();
        let pb = swap_partial_sign(&kb, &binding, &rb, &mut NonceRegistry::new()).unwrap();
        prop_assert!(joint_verify((&pa, &pb), (&ka.pk(), &kb.pk()), &binding));
        let proof = settle_reveal(&pb, &rb).unwrap();
        prop_assert!(verify_settlement(&proof, &kb.pk(), &binding.challenge()));
    }
}
