//! Deterministic discrete-event simulation of independent ledgers.
//!
//! Time is counted in abstract ticks. Each chain mines a block every
//! `block_interval` ticks; messages between chains arrive after the link
//! latency. Within a tick, events are ordered by `(tick, chain_id, seq)`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptor_sig::{decode_settlement, decode_signature, encode_signature, sign, verify, verify_settlement, KeyPair};
use crate::group::Group;

pub type AccountId = String;
pub type AssetId = String;

/// What a claim must present: one settlement proof per requirement, checked
/// against the lock's session challenge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofRequirement {
    #[serde(with = "hex::serde")]
    pub pk: Vec<u8>,
    #[serde(with = "hex::serde")]
    pub nonce_point: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LockCondition {
    #[serde(with = "hex::serde")]
    pub challenge: Vec<u8>,
    pub required: Vec<ProofRequirement>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TxKind {
    Transfer { to: AccountId, asset: AssetId, amount: u64 },
    Lock {
        asset: AssetId,
        amount: u64,
        beneficiary: AccountId,
        timeout_height: u64,
        condition: LockCondition,
    },
    Claim { lock_id: u64, proofs: Vec<HexBytes> },
    Refund { lock_id: u64 },
    Mint { to: AccountId, asset: AssetId, amount: u64 },
    Burn { asset: AssetId, amount: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HexBytes(#[serde(with = "hex::serde")] pub Vec<u8>);

impl TxKind {
    pub fn label(&self) -> &'static str {
        match self {
            TxKind::Transfer { .. } => "transfer",
            TxKind::Lock { .. } => "lock",
            TxKind::Claim { .. } => "claim",
            TxKind::Refund { .. } => "refund",
            TxKind::Mint { .. } => "mint",
            TxKind::Burn { .. } => "burn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tx {
    pub sender: AccountId,
    pub kind: TxKind,
    pub fee: u64,
    /// Sender-chosen value that makes otherwise identical txs distinct.
    pub nonce: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth: Option<HexBytes>,
}

impl Tx {
    pub fn new(sender: impl Into<AccountId>, kind: TxKind, fee: u64, nonce: u64) -> Self {
        Tx { sender: sender.into(), kind, fee, nonce, auth: None }
    }

    /// Bytes covered by the sender's signature.
    pub fn digest(&self, chain_id: u32) -> Vec<u8> {
        serde_json::to_vec(&(chain_id, &self.sender, &self.kind, self.fee, self.nonce))
            .expect("tx serializes")
    }

    pub fn signed<G: Group>(mut self, chain_id: u32, kp: &KeyPair<G>) -> Self {
        let msg = self.digest(chain_id);
        self.auth = Some(HexBytes(encode_signature(&sign(kp, &msg, b"tx"))));
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeeSchedule {
    pub transfer: u64,
    pub lock: u64,
    pub claim: u64,
    pub refund: u64,
    pub mint: u64,
    pub burn: u64,
}

impl FeeSchedule {
    pub fn flat(fee: u64) -> Self {
        FeeSchedule { transfer: fee, lock: fee, claim: fee, refund: fee, mint: fee, burn: fee }
    }

    pub fn for_kind(&self, kind: &TxKind) -> u64 {
        match kind {
            TxKind::Transfer { .. } => self.transfer,
            TxKind::Lock { .. } => self.lock,
            TxKind::Claim { .. } => self.claim,
            TxKind::Refund { .. } => self.refund,
            TxKind::Mint { .. } => self.mint,
            TxKind::Burn { .. } => self.burn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxError {
    #[error("fee {offered} below the required {required}")]
    FeeTooLow { offered: u64, required: u64 },
    #[error("insufficient balance of {asset}")]
    InsufficientBalance { asset: AssetId },
    #[error("unknown lock {0}")]
    UnknownLock(u64),
    #[error("lock {0} is no longer open")]
    LockClosed(u64),
    #[error("claim at height {height} is not before timeout {timeout}")]
    ClaimTooLate { height: u64, timeout: u64 },
    #[error("refund at height {height} is before timeout {timeout}")]
    RefundTooEarly { height: u64, timeout: u64 },
    #[error("sender is not entitled to this lock")]
    WrongParty,
    #[error("missing or invalid authorization")]
    BadAuth,
    #[error("settlement proof rejected")]
    BadProof,
    #[error("sender may not mint or burn")]
    NotMinter,
    #[error("zero amount")]
    ZeroAmount,
    #[error("duplicate transaction")]
    Duplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LockStatus {
    Open,
    Claimed { height: u64 },
    Refunded { height: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LockEntry {
    pub owner: AccountId,
    pub asset: AssetId,
    pub amount: u64,
    pub beneficiary: AccountId,
    pub timeout_height: u64,
    pub condition: LockCondition,
    pub status: LockStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub chain_id: u32,
    pub height: u64,
    pub applied: Vec<u64>,
    pub dropped: Vec<(u64, TxError)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub block_interval: u64,
    pub fees: FeeSchedule,
}

/// One chain's state.
#[derive(Debug, Clone)]
pub struct Ledger<G: Group> {
    pub chain_id: u32,
    pub height: u64,
    pub fee_asset: AssetId,
    pub fees: FeeSchedule,
    accounts: BTreeMap<AccountId, BTreeMap<AssetId, u64>>,
    mempool: Vec<(u64, Tx)>,
    locks: BTreeMap<u64, LockEntry>,
    fees_collected: u64,
    pubkeys: BTreeMap<AccountId, G::Point>,
    minters: BTreeSet<AccountId>,
    minted: BTreeMap<AssetId, u64>,
    burned: BTreeMap<AssetId, u64>,
    seen: BTreeSet<Vec<u8>>,
    next_tx_id: u64,
    /// Applied txs by id, kept so observers can read proofs off the chain.
    applied: BTreeMap<u64, (u64, Tx)>,
}

impl<G: Group> Ledger<G> {
    pub fn new(chain_id: u32, fee_asset: impl Into<AssetId>, fees: FeeSchedule) -> Self {
        Ledger {
            chain_id,
            height: 0,
            fee_asset: fee_asset.into(),
            fees,
            accounts: BTreeMap::new(),
            mempool: Vec::new(),
            locks: BTreeMap::new(),
            fees_collected: 0,
            pubkeys: BTreeMap::new(),
            minters: BTreeSet::new(),
            minted: BTreeMap::new(),
            burned: BTreeMap::new(),
            seen: BTreeSet::new(),
            next_tx_id: 0,
            applied: BTreeMap::new(),
        }
    }

    /// Genesis allocation; not a transaction and not counted as minting.
    pub fn fund(&mut self, account: &str, asset: &str, amount: u64) {
        *self.entry(account, asset) += amount;
    }

    /// Registers a signing key. Txs from registered accounts must carry a
    /// valid signature; claims and refunds always require one.
    pub fn register_key(&mut self, account: &str, pk: G::Point) {
        self.pubkeys.insert(account.to_string(), pk);
    }

    pub fn authorize_minter(&mut self, account: &str) {
        self.minters.insert(account.to_string());
    }

    pub fn balance(&self, account: &str, asset: &str) -> u64 {
        self.accounts.get(account).and_then(|m| m.get(asset)).copied().unwrap_or(0)
    }

    pub fn fees_collected(&self) -> u64 {
        self.fees_collected
    }

    pub fn lock(&self, id: u64) -> Option<&LockEntry> {
        self.locks.get(&id)
    }

    pub fn locks(&self) -> &BTreeMap<u64, LockEntry> {
        &self.locks
    }

    pub fn mempool(&self) -> &[(u64, Tx)] {
        &self.mempool
    }

    pub fn applied_tx(&self, id: u64) -> Option<&(u64, Tx)> {
        self.applied.get(&id)
    }

    pub fn applied_txs(&self) -> impl Iterator<Item = (&u64, &(u64, Tx))> {
        self.applied.iter()
    }

    pub fn minted(&self, asset: &str) -> u64 {
        self.minted.get(asset).copied().unwrap_or(0)
    }

    pub fn burned(&self, asset: &str) -> u64 {
        self.burned.get(asset).copied().unwrap_or(0)
    }

    /// Everything of `asset` held anywhere on this chain: balances, open
    /// locks and collected fees.
    pub fn total_supply(&self, asset: &str) -> u64 {
        let balances: u64 = self.accounts.values().filter_map(|m| m.get(asset)).sum();
        let locked: u64 = self
            .locks
            .values()
            .filter(|l| l.status == LockStatus::Open && l.asset == asset)
            .map(|l| l.amount)
            .sum();
        let fees = if asset == self.fee_asset { self.fees_collected } else { 0 };
        balances + locked + fees
    }

    pub fn assets(&self) -> BTreeSet<AssetId> {
        let mut out: BTreeSet<AssetId> =
            self.accounts.values().flat_map(|m| m.keys().cloned()).collect();
        out.extend(self.locks.values().map(|l| l.asset.clone()));
        out.insert(self.fee_asset.clone());
        out
    }

    fn entry(&mut self, account: &str, asset: &str) -> &mut u64 {
        self.accounts
            .entry(account.to_string())
            .or_default()
            .entry(asset.to_string())
            .or_insert(0)
    }

    /// Amount of each asset the tx debits from the sender, fee included.
    fn debits(&self, tx: &Tx) -> Vec<(AssetId, u64)> {
        let mut out = vec![(self.fee_asset.clone(), tx.fee)];
        match &tx.kind {
            TxKind::Transfer { asset, amount, .. }
            | TxKind::Lock { asset, amount, .. }
            | TxKind::Burn { asset, amount } => out.push((asset.clone(), *amount)),
            _ => {}
        }
        let mut merged: BTreeMap<AssetId, u64> = BTreeMap::new();
        for (a, v) in out {
            *merged.entry(a).or_insert(0) += v;
        }
        merged.into_iter().collect()
    }

    fn check_funds(&self, tx: &Tx) -> Result<(), TxError> {
        for (asset, need) in self.debits(tx) {
            if self.balance(&tx.sender, &asset) < need {
                return Err(TxError::InsufficientBalance { asset });
            }
        }
        Ok(())
    }

    /// Queues a tx. Rejects it up front when the fee is below schedule or
    /// the sender cannot currently cover it.
    pub fn submit_tx(&mut self, tx: Tx) -> Result<u64, TxError> {
        let required = self.fees.for_kind(&tx.kind);
        if tx.fee < required {
            return Err(TxError::FeeTooLow { offered: tx.fee, required });
        }
        self.check_funds(&tx)?;
        let id = self.next_tx_id;
        self.next_tx_id += 1;
        self.mempool.push((id, tx));
        Ok(id)
    }

    fn check_auth(&self, tx: &Tx, required: bool) -> Result<(), TxError> {
        let Some(pk) = self.pubkeys.get(&tx.sender) else {
            return if required { Err(TxError::BadAuth) } else { Ok(()) };
        };
        let sig = tx
            .auth
            .as_ref()
            .and_then(|a| decode_signature::<G>(&a.0))
            .ok_or(TxError::BadAuth)?;
        if verify(pk, &tx.digest(self.chain_id), &sig) {
            Ok(())
        } else {
            Err(TxError::BadAuth)
        }
    }

    fn check_proofs(&self, cond: &LockCondition, proofs: &[HexBytes]) -> Result<(), TxError> {
        if proofs.len() != cond.required.len() {
            return Err(TxError::BadProof);
        }
        let challenge = G::scalar_from_bytes(&cond.challenge).ok_or(TxError::BadProof)?;
        for (req, raw) in cond.required.iter().zip(proofs) {
            let proof = decode_settlement::<G>(&raw.0).ok_or(TxError::BadProof)?;
            let pk = G::point_from_bytes(&req.pk).ok_or(TxError::BadProof)?;
            let nonce_point = G::point_from_bytes(&req.nonce_point).ok_or(TxError::BadProof)?;
            if proof.nonce_point != nonce_point || !verify_settlement(&proof, &pk, &challenge) {
                return Err(TxError::BadProof);
            }
        }
        Ok(())
    }

    fn validate(&self, tx: &Tx, new_height: u64) -> Result<(), TxError> {
        let auth_required = matches!(tx.kind, TxKind::Claim { .. } | TxKind::Refund { .. });
        self.check_auth(tx, auth_required)?;
        if self.seen.contains(&tx.digest(self.chain_id)) {
            return Err(TxError::Duplicate);
        }
        self.check_funds(tx)?;
        match &tx.kind {
            TxKind::Transfer { amount, .. } | TxKind::Lock { amount, .. } if *amount == 0 => {
                Err(TxError::ZeroAmount)
            }
            TxKind::Transfer { .. } | TxKind::Lock { .. } => Ok(()),
            TxKind::Claim { lock_id, proofs } => {
                let lock = self.locks.get(lock_id).ok_or(TxError::UnknownLock(*lock_id))?;
                if lock.status != LockStatus::Open {
                    return Err(TxError::LockClosed(*lock_id));
                }
                if new_height >= lock.timeout_height {
                    return Err(TxError::ClaimTooLate { height: new_height, timeout: lock.timeout_height });
                }
                if tx.sender != lock.beneficiary {
                    return Err(TxError::WrongParty);
                }
                self.check_proofs(&lock.condition, proofs)
            }
            TxKind::Refund { lock_id } => {
                let lock = self.locks.get(lock_id).ok_or(TxError::UnknownLock(*lock_id))?;
                if lock.status != LockStatus::Open {
                    return Err(TxError::LockClosed(*lock_id));
                }
                if new_height < lock.timeout_height {
                    return Err(TxError::RefundTooEarly { height: new_height, timeout: lock.timeout_height });
                }
                if tx.sender != lock.owner {
                    return Err(TxError::WrongParty);
                }
                Ok(())
            }
            TxKind::Mint { amount, .. } | TxKind::Burn { amount, .. } => {
                if !self.minters.contains(&tx.sender) {
                    Err(TxError::NotMinter)
                } else if *amount == 0 {
                    Err(TxError::ZeroAmount)
                } else {
                    Ok(())
                }
            }
        }
    }

    fn apply(&mut self, id: u64, tx: &Tx, new_height: u64) {
        for (asset, amount) in self.debits(tx) {
            *self.entry(&tx.sender, &asset) -= amount;
        }
        self.fees_collected += tx.fee;
        self.seen.insert(tx.digest(self.chain_id));
        match &tx.kind {
            TxKind::Transfer { to, asset, amount } => *self.entry(to, asset) += amount,
            TxKind::Lock { asset, amount, beneficiary, timeout_height, condition } => {
                self.locks.insert(
                    id,
                    LockEntry {
                        owner: tx.sender.clone(),
                        asset: asset.clone(),
                        amount: *amount,
                        beneficiary: beneficiary.clone(),
                        timeout_height: *timeout_height,
                        condition: condition.clone(),
                        status: LockStatus::Open,
                    },
                );
            }
            TxKind::Claim { lock_id, .. } => {
                let lock = self.locks.get_mut(lock_id).expect("validated");
                lock.status = LockStatus::Claimed { height: new_height };
                let (to, asset, amount) = (lock.beneficiary.clone(), lock.asset.clone(), lock.amount);
                *self.entry(&to, &asset) += amount;
            }
            TxKind::Refund { lock_id } => {
                let lock = self.locks.get_mut(lock_id).expect("validated");
                lock.status = LockStatus::Refunded { height: new_height };
                let (to, asset, amount) = (lock.owner.clone(), lock.asset.clone(), lock.amount);
                *self.entry(&to, &asset) += amount;
            }
            TxKind::Mint { to, asset, amount } => {
                *self.entry(to, asset) += amount;
                *self.minted.entry(asset.clone()).or_insert(0) += amount;
            }
            TxKind::Burn { asset, amount } => {
                *self.burned.entry(asset.clone()).or_insert(0) += amount;
            }
        }
        self.applied.insert(id, (new_height, tx.clone()));
    }

    /// Applies the mempool in submission order at the next height. Invalid
    /// txs are dropped with their reason.
    pub fn mine_block(&mut self) -> BlockSummary {
        let new_height = self.height + 1;
        let mut applied = Vec::new();
        let mut dropped = Vec::new();
        for (id, tx) in std::mem::take(&mut self.mempool) {
            match self.validate(&tx, new_height) {
                Ok(()) => {
                    self.apply(id, &tx, new_height);
                    applied.push(id);
                }
                Err(e) => {
                    log::debug!("chain {} dropped tx {id}: {e}", self.chain_id);
                    dropped.push((id, e));
                }
            }
        }
        self.height = new_height;
        BlockSummary { chain_id: self.chain_id, height: new_height, applied, dropped }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub from: u32,
    pub to: u32,
    pub topic: String,
    #[serde(with = "hex::serde")]
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clock {
    pub tick: u64,
    pub block_intervals: Vec<u64>,
    /// `latency[from][to]` in ticks.
    pub latency: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Delivered { tick: u64, chain: u32, seq: u64, message: Message },
    Block { tick: u64, chain: u32, seq: u64, summary: BlockSummary },
    Tx { tick: u64, chain: u32, seq: u64, tx_id: u64, height: u64, tx: Tx },
}

impl Event {
    pub fn key(&self) -> (u64, u32, u64) {
        match self {
            Event::Delivered { tick, chain, seq, .. }
            | Event::Block { tick, chain, seq, .. }
            | Event::Tx { tick, chain, seq, .. } => (*tick, *chain, *seq),
        }
    }
}

/// Line-delimited JSON event records.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(self.to_jsonl().as_bytes())
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(EventLog { events })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub chains: Vec<ChainConfig>,
    pub latency: Vec<Vec<u64>>,
    pub fee_asset: AssetId,
}

impl WorldConfig {
    pub fn uniform(n: usize, block_interval: u64, latency: u64, fee: u64) -> Self {
        WorldConfig {
            chains: vec![ChainConfig { block_interval, fees: FeeSchedule::flat(fee) }; n],
            latency: vec![vec![latency; n]; n],
            fee_asset: "GAS".into(),
        }
    }
}

/// Reacts to events while the world advances. Anything the handler sends
/// with zero latency is delivered within the same tick.
pub trait Handler<G: Group> {
    fn on_event(&mut self, world: &mut World<G>, event: &Event);
}

/// Handler that does nothing.
pub struct Passive;

impl<G: Group> Handler<G> for Passive {
    fn on_event(&mut self, _: &mut World<G>, _: &Event) {}
}

pub struct World<G: Group> {
    pub clock: Clock,
    pub ledgers: Vec<Ledger<G>>,
    inflight: BTreeMap<(u64, u32, u64), Message>,
    msg_seq: u64,
    event_seq: u64,
    pub log: EventLog,
}

impl<G: Group> World<G> {
    pub fn new(cfg: &WorldConfig) -> Self {
        let n = cfg.chains.len();
        assert!(cfg.latency.len() == n && cfg.latency.iter().all(|r| r.len() == n));
        assert!(cfg.chains.iter().all(|c| c.block_interval > 0));
        World {
            clock: Clock {
                tick: 0,
                block_intervals: cfg.chains.iter().map(|c| c.block_interval).collect(),
                latency: cfg.latency.clone(),
            },
            ledgers: cfg
                .chains
                .iter()
                .enumerate()
                .map(|(i, c)| Ledger::new(i as u32, cfg.fee_asset.clone(), c.fees))
                .collect(),
            inflight: BTreeMap::new(),
            msg_seq: 0,
            event_seq: 0,
            log: EventLog::default(),
        }
    }

    pub fn tick(&self) -> u64 {
        self.clock.tick
    }

    /// Schedules `msg` for delivery after the link latency plus `extra`
    /// ticks. Returns the delivery tick.
    pub fn send(&mut self, msg: Message, extra: u64) -> u64 {
        let at = self.clock.tick + self.clock.latency[msg.from as usize][msg.to as usize] + extra;
        self.msg_seq += 1;
        self.inflight.insert((at, msg.to, self.msg_seq), msg);
        at
    }

    pub fn in_flight(&self) -> usize {
        self.inflight.len()
    }

    fn next_seq(&mut self) -> u64 {
        self.event_seq += 1;
        self.event_seq
    }

    fn pop_due(&mut self, tick: u64, chain: Option<u32>) -> Option<Message> {
        let key = *self
            .inflight
            .keys()
            .find(|(at, to, _)| *at <= tick && chain.map_or(true, |c| *to == c))?;
        self.inflight.remove(&key)
    }

    fn emit<H: Handler<G>>(&mut self, event: Event, handler: &mut H, out: &mut EventLog) {
        self.log.events.push(event.clone());
        out.events.push(event.clone());
        handler.on_event(self, &event);
    }

    fn deliver<H: Handler<G>>(&mut self, message: Message, handler: &mut H, out: &mut EventLog) {
        let (tick, chain, seq) = (self.clock.tick, message.to, self.next_seq());
        self.emit(Event::Delivered { tick, chain, seq, message }, handler, out);
    }

    /// Runs `n_ticks` ticks. Per tick and per chain in id order: deliver due
    /// messages, then mine if the chain's interval divides the tick.
    pub fn advance<H: Handler<G>>(&mut self, n_ticks: u64, handler: &mut H) -> EventLog {
        let mut out = EventLog::default();
        for _ in 0..n_ticks {
            self.clock.tick += 1;
            let t = self.clock.tick;
            for c in 0..self.ledgers.len() as u32 {
                while let Some(m) = self.pop_due(t, Some(c)) {
                    self.deliver(m, handler, &mut out);
                }
                if t % self.clock.block_intervals[c as usize] == 0 {
                    let summary = self.ledgers[c as usize].mine_block();
                    let height = summary.height;
                    for id in &summary.applied {
                        let tx = self.ledgers[c as usize].applied[id].1.clone();
                        let seq = self.next_seq();
                        self.emit(Event::Tx { tick: t, chain: c, seq, tx_id: *id, height, tx }, handler, &mut out);
                    }
                    let seq = self.next_seq();
                    self.emit(Event::Block { tick: t, chain: c, seq, summary }, handler, &mut out);
                }
            }
            // Zero-latency replies addressed to chains already passed this tick.
            while let Some(m) = self.pop_due(t, None) {
                self.deliver(m, handler, &mut out);
            }
        }
        out
    }

    /// Advances with no handler.
    pub fn run(&mut self, n_ticks: u64) -> EventLog {
        self.advance(n_ticks, &mut Passive)
    }

    /// Ticks until `chain` next mines a block.
    pub fn ticks_to_next_block(&self, chain: u32) -> u64 {
        let iv = self.clock.block_intervals[chain as usize];
        iv - self.clock.tick % iv
    }
}
