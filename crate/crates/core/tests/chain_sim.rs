use std::collections::BTreeMap;

use pegsim_core::adaptor_sig::{keygen, KeyPair};
use pegsim_core::chain_sim::*;
use pegsim_core::group::{Group, Toy};
use proptest::prelude::*;

type L = Ledger<Toy>;

fn open_condition() -> LockCondition {
    LockCondition { challenge: Toy::scalar_to_bytes(&Toy::scalar_one()), required: vec![] }
}

fn keys() -> BTreeMap<&'static str, KeyPair<Toy>> {
    ["u0", "u1", "u2"].into_iter().map(|n| (n, keygen::<Toy>(n.as_bytes()).unwrap())).collect()
}

#[derive(Debug, Clone)]
enum Op {
    Transfer(usize, usize, u64),
    Lock(usize, usize, u64, u64),
    Claim(usize, u64),
    Refund(usize, u64),
    Mint(usize, u64),
    Burn(usize, u64),
    Mine,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0..3usize, 0..3usize, 0..300u64).prop_map(|(a, b, v)| Op::Transfer(a, b, v)),
        (0..3usize, 0..3usize, 1..300u64, 0..6u64).prop_map(|(a, b, v, t)| Op::Lock(a, b, v, t)),
        (0..3usize, 0..20u64).prop_map(|(a, id)| Op::Claim(a, id)),
        (0..3usize, 0..20u64).prop_map(|(a, id)| Op::Refund(a, id)),
        (0..3usize, 1..100u64).prop_map(|(a, v)| Op::Mint(a, v)),
        (0..3usize, 1..100u64).prop_map(|(a, v)| Op::Burn(a, v)),
        Just(Op::Mine),
        Just(Op::Mine),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Supply of every asset equals genesis plus mints minus burns, tracked
    /// independently from the applied txs.
    #[test]
    fn supply_is_conserved(ops in prop::collection::vec(op(), 1..80)) {
        let names = ["u0", "u1", "u2"];
        let keys = keys();
        let mut ledger = L::new(0, "GAS", FeeSchedule::flat(1));
        let mut expected: BTreeMap<&str, i128> = BTreeMap::new();
        for n in names {
            ledger.register_key(n, keys[n].pk());
            ledger.fund(n, "GAS", 1_000);
            ledger.fund(n, "T", 500);
        }
        ledger.authorize_minter("u0");
        expected.insert("GAS", 3_000);
        expected.insert("T", 1_500);
        let mut nonce = 0;
        for o in ops {
            nonce += 1;
            let (sender, kind) = match o {
                Op::Mine => {
                    let summary = ledger.mine_block();
                    for id in &summary.applied {
                        let (_, tx) = ledger.applied_tx(*id).unwrap();
                        match &tx.kind {
                            TxKind::Mint { amount, .. } => *expected.get_mut("T").unwrap() += *amount as i128,
                            TxKind::Burn { amount, .. } => *expected.get_mut("T").unwrap() -= *amount as i128,
                            _ => {}
                        }
                    }
                    for (asset, total) in &expected {
                        prop_assert_eq!(ledger.total_supply(asset) as i128, *total);
                    }
                    continue;
                }
                Op::Transfer(a, b, v) => (a, TxKind::Transfer { to: names[b].into(), asset: "T".into(), amount: v }),
                Op::Lock(a, b, v, t) => (a, TxKind::Lock {
                    asset: "T".into(),
                    amount: v,
                    beneficiary: names[b].into(),
                    timeout_height: ledger.height + t,
                    condition: open_condition(),
                }),
                Op::Claim(a, id) => (a, TxKind::Claim { lock_id: id, proofs: vec![] }),
                Op::Refund(a, id) => (a, TxKind::Refund { lock_id: id }),
                Op::Mint(a, v) => (a, TxKind::Mint { to: names[a].into(), asset: "T".into(), amount: v }),
                Op::Burn(a, v) => (a, TxKind::Burn { asset: "T".into(), amount: v }),
            };
            let tx = Tx::new(names[sender], kind, 1, nonce).signed(0, &keys[names[sender]]);
            let _ = ledger.submit_tx(tx);
        }
        ledger.mine_block();
        prop_assert_eq!(ledger.minted("T") as i128 - ledger.burned("T") as i128 + 1_500, ledger.total_supply("T") as i128);
        prop_assert_eq!(ledger.total_supply("GAS"), 3_000);
    }
}

#[test]
fn refund_opens_exactly_at_the_timeout_height() {
    let keys = keys();
    let mut ledger = L::new(0, "GAS", FeeSchedule::flat(1));
    for n in ["u0", "u1"] {
        ledger.register_key(n, keys[n].pk());
        ledger.fund(n, "GAS", 100);
    }
    ledger.fund("u0", "T", 10);
    let lock = Tx::new("u0", TxKind::Lock {
        asset: "T".into(),
        amount: 10,
        beneficiary: "u1".into(),
        timeout_height: 3,
        condition: open_condition(),
    }, 1, 0);
    let lock_id = ledger.submit_tx(lock.signed(0, &keys["u0"])).unwrap();
    ledger.mine_block();
    // Height 2 is below the timeout.
    ledger.submit_tx(Tx::new("u0", TxKind::Refund { lock_id }, 1, 1).signed(0, &keys["u0"])).unwrap();
    let s = ledger.mine_block();
    assert!(matches!(s.dropped[0].1, TxError::RefundTooEarly { height: 2, timeout: 3 }));
    // At height 3 the beneficiary is too late and the owner may refund.
    ledger.submit_tx(Tx::new("u1", TxKind::Claim { lock_id, proofs: vec![] }, 1, 2).signed(0, &keys["u1"])).unwrap();
    ledger.submit_tx(Tx::new("u0", TxKind::Refund { lock_id }, 1, 3).signed(0, &keys["u0"])).unwrap();
    let s = ledger.mine_block();
    assert!(matches!(s.dropped[0].1, TxError::ClaimTooLate { height: 3, timeout: 3 }));
    assert_eq!(s.applied.len(), 1);
    assert_eq!(ledger.balance("u0", "T"), 10);
    assert_eq!(ledger.lock(lock_id).unwrap().status, LockStatus::Refunded { height: 3 });
}

#[test]
fn claims_and_refunds_need_a_signature_from_the_right_party() {
    let keys = keys();
    let mut ledger = L::new(0, "GAS", FeeSchedule::flat(1));
    for n in ["u0", "u1", "u2"] {
        ledger.register_key(n, keys[n].pk());
        ledger.fund(n, "GAS", 100);
    }
    ledger.fund("u0", "T", 10);
    let lock_id = ledger
        .submit_tx(Tx::new("u0", TxKind::Lock {
            asset: "T".into(),
            amount: 10,
            beneficiary: "u1".into(),
            timeout_height: 10,
            condition: open_condition(),
        }, 1, 0).signed(0, &keys["u0"]))
        .unwrap();
    ledger.mine_block();
    let unsigned = Tx::new("u1", TxKind::Claim { lock_id, proofs: vec![] }, 1, 1);
    let wrong_key = unsigned.clone().signed(0, &keys["u2"]);
    let third_party = Tx::new("u2", TxKind::Claim { lock_id, proofs: vec![] }, 1, 1).signed(0, &keys["u2"]);
    for tx in [unsigned, wrong_key, third_party] {
        ledger.submit_tx(tx).unwrap();
    }
    let s = ledger.mine_block();
    let reasons: Vec<_> = s.dropped.iter().map(|d| d.1.clone()).collect();
    assert_eq!(reasons, vec![TxError::BadAuth, TxError::BadAuth, TxError::WrongParty]);
    let good = Tx::new("u1", TxKind::Claim { lock_id, proofs: vec![] }, 1, 1).signed(0, &keys["u1"]);
    ledger.submit_tx(good.clone()).unwrap();
    assert_eq!(ledger.mine_block().applied.len(), 1);
    assert_eq!(ledger.balance("u1", "T"), 10);
    // The same signed tx cannot be applied twice.
    ledger.submit_tx(good).unwrap();
    assert_eq!(ledger.mine_block().dropped[0].1, TxError::Duplicate);
}

/// Two chains with block intervals 2 and 3; latency 0→1 is one tick and
/// 1→0 is two. Messages sent at tick 0:
///   tick 1: message to chain 1 arrives
///   tick 2: message to chain 0 arrives, then chain 0 mines height 1
///   tick 3: chain 1 mines height 1
#[test]
fn hand_traced_delivery_schedule() {
    let mut cfg = WorldConfig::uniform(2, 2, 1, 1);
    cfg.chains[1].block_interval = 3;
    cfg.latency[1][0] = 2;
    let mut world = World::<Toy>::new(&cfg);
    let msg = |from, to, topic: &str| Message { from, to, topic: topic.into(), payload: vec![] };
    assert_eq!(world.send(msg(0, 1, "first"), 0), 1);
    assert_eq!(world.send(msg(1, 0, "second"), 0), 2);
    let log = world.run(3);
    let trace: Vec<String> = log
        .events
        .iter()
        .map(|e| match e {
            Event::Delivered { tick, chain, message, .. } => format!("{tick}:deliver:{chain}:{}", message.topic),
            Event::Block { tick, chain, summary, .. } => format!("{tick}:block:{chain}:{}", summary.height),
            Event::Tx { tick, chain, .. } => format!("{tick}:tx:{chain}"),
        })
        .collect();
    assert_eq!(trace, ["1:deliver:1:first", "2:deliver:0:second", "2:block:0:1", "3:block:1:1"]);
    let keys: Vec<_> = log.events.iter().map(Event::key).collect();
    assert!(keys.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(world.in_flight(), 0);
    assert_eq!(world.ticks_to_next_block(0), 1);
    assert_eq!(world.ticks_to_next_block(1), 3);
}

#[test]
fn extra_delay_and_jsonl_round_trip() {
    let mut world = World::<Toy>::new(&WorldConfig::uniform(2, 2, 1, 1));
    let at = world.send(Message { from: 0, to: 1, topic: "late".into(), payload: vec![1, 2] }, 4);
    assert_eq!(at, 5);
    world.run(4);
    assert_eq!(world.in_flight(), 1);
    world.run(1);
    assert_eq!(world.in_flight(), 0);
    let text = world.log.to_jsonl();
    assert_eq!(EventLog::from_jsonl(&text).unwrap(), world.log);
    let mut buf = Vec::new();
    world.log.write_jsonl(&mut buf).unwrap();
    assert_eq!(buf, text.as_bytes());
}
