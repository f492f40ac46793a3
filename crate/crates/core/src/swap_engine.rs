//! Two-party cross-chain swap over [`chain_sim`](crate::chain_sim).
//!
//! Party A (first mover) locks `X` on chain `i` for B; party B locks `Y` on
//! chain `j` for A. Both locks are bound to the shared session challenge
//! `e = H(R_A + R_B ∥ X ∥ Y)`:
//!
//! * the `Y` lock opens with A's settlement proof `(R_A, r_A, s_A − r_A)`;
//! * the `X` lock opens with A's proof and B's proof together.
//!
//! A's claim on chain `j` therefore publishes `r_A`, and only then can B
//! build the pair it needs on chain `i`, recomputing its own nonce as
//! `r_B = s_B − e·sk_B`. The `Y` lock times out at half the `X` lock's
//! window, so B always has time to follow A's claim and A can never refund
//! `X` while B's claim window is open.
//!
//! The adversary controls the party-to-party channel and may make either
//! party deviate. Chain submissions are not censored.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adaptor_sig::{
    decode_partial, decode_settlement, derive_swap_nonce, encode_partial, encode_settlement, joint_verify,
    keygen, partial_verify, recover_own_nonce, settle_reveal, swap_partial_sign, KeyPair, NonceRegistry,
    SessionBinding, SettlementProof, SwapPartial,
};
use crate::chain_sim::{
    AccountId, AssetId, Event, HexBytes, LockCondition, LockStatus, Message, ProofRequirement, Tx, TxKind,
    World, WorldConfig,
};
use crate::group::{length_prefixed, tags, Group};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    A,
    B,
}

impl Role {
    fn idx(self) -> usize {
        match self {
            Role::A => 0,
            Role::B => 1,
        }
    }

    fn other(self) -> Role {
        match self {
            Role::A => Role::B,
            Role::B => Role::A,
        }
    }
}

/// What is being exchanged. `window_ticks` is the second mover's refund
/// window; the first mover's is twice as long.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapTerms {
    pub label: String,
    pub chain_i: u32,
    pub asset_x: AssetId,
    pub amount_x: u64,
    pub chain_j: u32,
    pub asset_y: AssetId,
    pub amount_y: u64,
    pub window_ticks: u64,
}

impl SwapTerms {
    pub fn encode_x(&self) -> Vec<u8> {
        length_prefixed(&[
            self.label.as_bytes(),
            &self.chain_i.to_be_bytes(),
            self.asset_x.as_bytes(),
            &self.amount_x.to_be_bytes(),
        ])
    }

    pub fn encode_y(&self) -> Vec<u8> {
        length_prefixed(&[
            self.label.as_bytes(),
            &self.chain_j.to_be_bytes(),
            self.asset_y.as_bytes(),
            &self.amount_y.to_be_bytes(),
        ])
    }
}

/// Everything both parties agree on for one session.
#[derive(Debug, Clone)]
pub struct SwapSessionContext<G: Group> {
    pub terms: SwapTerms,
    pub accounts: [AccountId; 2],
    pub pks: [G::Point; 2],
    pub commitments: [Option<[u8; 32]>; 2],
    pub nonce_points: [Option<G::Point>; 2],
    pub joint_r: Option<G::Point>,
    pub open_tick: u64,
    /// Refund height of the `X` lock on chain `i`.
    pub timeout_i: u64,
    /// Refund height of the `Y` lock on chain `j`.
    pub timeout_j: u64,
    pub lock_x: Option<u64>,
    pub lock_y: Option<u64>,
}

impl<G: Group> SwapSessionContext<G> {
    pub fn binding(&self) -> Option<SessionBinding<G>> {
        Some(SessionBinding {
            asset_x: self.terms.encode_x(),
            asset_y: self.terms.encode_y(),
            joint_nonce: self.joint_r?,
        })
    }

    /// Refund windows end on the second mover's chain strictly before the
    /// first mover's, measured in ticks.
    pub fn timeouts_ordered(&self, intervals: &[u64]) -> bool {
        self.timeout_j * intervals[self.terms.chain_j as usize]
            < self.timeout_i * intervals[self.terms.chain_i as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Phase {
    #[default]
    Init,
    Committed,
    PartialsExchanged,
    Revealed,
    Settled,
    Refunded,
    Aborted,
}

impl Phase {
    fn rank(self) -> u8 {
        match self {
            Phase::Init => 0,
            Phase::Committed => 1,
            Phase::PartialsExchanged => 2,
            Phase::Revealed | Phase::Aborted => 3,
            Phase::Settled | Phase::Refunded => 4,
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Settled | Phase::Refunded)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "entry", rename_all = "snake_case")]
pub enum TranscriptEntry {
    Opened { tick: u64 },
    CommitmentReceived { by: Role, #[serde(with = "hex::serde")] digest: Vec<u8> },
    NonceReceived { by: Role, #[serde(with = "hex::serde")] point: Vec<u8> },
    LockConfirmed { owner: Role, chain: u32, lock_id: u64, height: u64 },
    PartialReceived { by: Role, #[serde(with = "hex::serde")] partial: Vec<u8> },
    PartialRejected { by: Role, reason: String },
    PartialsVerified,
    Revealed { by: Role, chain: u32, tx_id: u64 },
    Claimed { by: Role, chain: u32, height: u64 },
    Refunded { owner: Role, chain: u32, height: u64 },
    Aborted { reason: String },
}

/// Session state as a fold over the transcript, so replaying a transcript
/// reproduces the state exactly.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SwapState {
    phase: Phase,
    pub transcript: Vec<TranscriptEntry>,
    locked: BTreeSet<u32>,
    claimed: BTreeSet<u32>,
    refunded: BTreeSet<u32>,
}

impl SwapState {
    pub fn phase(&self) -> Phase {
        self.phase
    }

    fn advance_to(&mut self, next: Phase) {
        let cur = self.phase;
        if !cur.is_terminal() && next.rank() > cur.rank() {
            self.phase = next;
        }
    }

    pub fn apply(&mut self, entry: TranscriptEntry) {
        match &entry {
            TranscriptEntry::LockConfirmed { chain, .. } => {
                self.locked.insert(*chain);
                if self.locked.len() == 2 {
                    self.advance_to(Phase::Committed);
                }
            }
            TranscriptEntry::PartialsVerified => self.advance_to(Phase::PartialsExchanged),
            TranscriptEntry::Revealed { .. } => self.advance_to(Phase::Revealed),
            TranscriptEntry::Claimed { chain, .. } => {
                self.claimed.insert(*chain);
                if self.claimed.len() == 2 {
                    self.advance_to(Phase::Settled);
                }
            }
            TranscriptEntry::Refunded { chain, .. } => {
                self.refunded.insert(*chain);
                if self.claimed.is_empty() && self.refunded == self.locked {
                    self.advance_to(Phase::Refunded);
                }
            }
            TranscriptEntry::Aborted { .. } => self.advance_to(Phase::Aborted),
            _ => {}
        }
        self.transcript.push(entry);
    }

    pub fn replay<I: IntoIterator<Item = TranscriptEntry>>(entries: I) -> Self {
        let mut s = SwapState::default();
        for e in entries {
            s.apply(e);
        }
        s
    }

    /// One JSON record per entry, tagged with the session id.
    pub fn to_jsonl(&self, session: &str) -> String {
        #[derive(Serialize)]
        struct Rec<'a> {
            session: &'a str,
            #[serde(flatten)]
            entry: &'a TranscriptEntry,
        }
        let mut out = String::new();
        for entry in &self.transcript {
            out.push_str(&serde_json::to_string(&Rec { session, entry }).expect("serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<(String, Self), serde_json::Error> {
        #[derive(Deserialize)]
        struct Rec {
            session: String,
            #[serde(flatten)]
            entry: TranscriptEntry,
        }
        let mut session = String::new();
        let mut entries = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let r: Rec = serde_json::from_str(line)?;
            session = r.session;
            entries.push(r.entry);
        }
        Ok((session, SwapState::replay(entries)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetworkAdversary {
    None,
    /// Drops each message independently.
    Dropper { p: f64 },
    /// Adds independent random delays so messages overtake each other.
    Reorderer { jitter: u64 },
    /// Delays every message by up to `max_delay` ticks.
    Delayer { max_delay: u64 },
    Blackout,
    /// Flips a random byte of each message with probability `p`.
    Tamperer { p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgeMode {
    RandomScalar,
    ForeignSession,
    WrongKey,
    RandomBytes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Deviation {
    None,
    /// B sends a malformed or foreign partial.
    PartialForger { mode: ForgeMode },
    /// B keeps trying to claim `X` and refund `Y` before it may.
    EarlyClaimer,
    /// B watches chain `j`'s mempool and races A's claim.
    MempoolSniper,
    /// B never sends its partial.
    Withholder,
    /// B goes offline after locking.
    CrashBeforePartials,
    /// B cannot fund its side.
    InsolventB,
    /// A goes offline right after submitting its claim.
    CrashAfterReveal,
    /// A waits past chain `j`'s timeout before revealing.
    LateReveal,
    /// A never reveals.
    NoReveal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub network: NetworkAdversary,
    pub deviation: Deviation,
}

impl Strategy {
    pub const HONEST: Strategy = Strategy { network: NetworkAdversary::None, deviation: Deviation::None };

    pub fn is_honest(&self) -> bool {
        self.network == NetworkAdversary::None && self.deviation == Deviation::None
    }

    /// Draws a non-honest strategy.
    pub fn sample<R: Rng>(rng: &mut R, window: u64) -> Strategy {
        loop {
            let network = match rng.gen_range(0..7) {
                0 | 1 => NetworkAdversary::None,
                2 => NetworkAdversary::Dropper { p: rng.gen_range(0.05..0.9) },
                3 => NetworkAdversary::Reorderer { jitter: rng.gen_range(1..6) },
                4 => NetworkAdversary::Delayer { max_delay: rng.gen_range(1..window) },
                5 => NetworkAdversary::Blackout,
                _ => NetworkAdversary::Tamperer { p: rng.gen_range(0.1..0.8) },
            };
            let deviation = match rng.gen_range(0..14) {
                0..=3 => Deviation::None,
                4 => Deviation::PartialForger {
                    mode: [ForgeMode::RandomScalar, ForgeMode::ForeignSession, ForgeMode::WrongKey, ForgeMode::RandomBytes]
                        [rng.gen_range(0..4)],
                },
                5 => Deviation::EarlyClaimer,
                6 => Deviation::MempoolSniper,
                7 => Deviation::Withholder,
                8 => Deviation::CrashBeforePartials,
                9 => Deviation::InsolventB,
                10 => Deviation::CrashAfterReveal,
                11 => Deviation::LateReveal,
                12 => Deviation::NoReveal,
                _ => Deviation::EarlyClaimer,
            };
            let s = Strategy { network, deviation };
            if !s.is_honest() {
                return s;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    BothSettled,
    BothRefunded,
    Violation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameOutcome {
    pub outcome: Outcome,
    pub strategy: Strategy,
    pub final_phase: Phase,
    /// Ticks from opening until both claims were mined.
    pub settle_ticks: Option<u64>,
    pub detail: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SwapError {
    #[error("operation requires phase {expected:?}, session is in {actual:?}")]
    WrongPhase { expected: Phase, actual: Phase },
    #[error("only the first mover reveals")]
    NotFirstMover,
    #[error("reveal window on chain j has closed")]
    RevealTooLate,
    #[error("chains i and j must differ")]
    SameChain,
}

struct PartyState<G: Group> {
    account: AccountId,
    kp: KeyPair<G>,
    nonce: G::Scalar,
    registry: NonceRegistry,
    live: bool,
    home: u32,
    got_commit: Option<[u8; 32]>,
    got_nonce: Option<G::Point>,
    got_partial: Option<SwapPartial<G>>,
    own_partial: Option<SwapPartial<G>>,
    nonce_sent: bool,
    lock_sent: bool,
    claim_sent: bool,
    refund_sent: bool,
    tx_counter: u64,
}

impl<G: Group> PartyState<G> {
    fn next_nonce(&mut self) -> u64 {
        self.tx_counter += 1;
        self.tx_counter
    }
}

fn nonce_commitment<G: Group>(point: &G::Point) -> [u8; 32] {
    Sha256::digest(length_prefixed(&[tags::COMMITMENT, &G::point_to_bytes(point)])).into()
}

/// How much each party is funded with at genesis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapSetup {
    pub world: WorldConfig,
    pub terms: SwapTerms,
    pub funding_a: u64,
    pub funding_b: u64,
    pub gas: u64,
}

impl SwapSetup {
    /// Two chains with block intervals 2 and 3 ticks, one-tick latency and
    /// unit fees.
    pub fn standard(label: &str) -> Self {
        let mut world = WorldConfig::uniform(2, 2, 1, 1);
        world.chains[1].block_interval = 3;
        SwapSetup {
            world,
            terms: SwapTerms {
                label: label.to_string(),
                chain_i: 0,
                asset_x: "X".into(),
                amount_x: 1_000,
                chain_j: 1,
                asset_y: "Y".into(),
                amount_y: 2_000,
                window_ticks: 60,
            },
            funding_a: 1_000,
            funding_b: 2_000,
            gas: 50,
        }
    }
}

/// One session running on its own world.
pub struct SwapRun<G: Group> {
    pub world: World<G>,
    pub ctx: SwapSessionContext<G>,
    pub state: SwapState,
    parties: [PartyState<G>; 2],
    strategy: Strategy,
    rng: ChaCha8Rng,
    settled_tick: Option<u64>,
    sniped_y: bool,
}

impl<G: Group> SwapRun<G> {
    pub fn new(setup: &SwapSetup, strategy: Strategy, seed: u64) -> Result<Self, SwapError> {
        let terms = setup.terms.clone();
        if terms.chain_i == terms.chain_j {
            return Err(SwapError::SameChain);
        }
        let mut world = World::<G>::new(&setup.world);
        let seed_bytes = seed.to_be_bytes();
        let mk = |role: Role, home: u32| {
            let tag: &[u8] = if role == Role::A { b"party-a" } else { b"party-b" };
            let kp = keygen::<G>(&length_prefixed(&[tag, &seed_bytes, terms.label.as_bytes()]))
                .expect("non-empty seed");
            let nonce = derive_swap_nonce(&kp, terms.label.as_bytes(), 0);
            PartyState {
                account: if role == Role::A { "alice".to_string() } else { "bob".to_string() },
                kp,
                nonce,
                registry: NonceRegistry::new(),
                live: true,
                home,
                got_commit: None,
                got_nonce: None,
                got_partial: None,
                own_partial: None,
                nonce_sent: false,
                lock_sent: false,
                claim_sent: false,
                refund_sent: false,
                tx_counter: 0,
            }
        };
        let a = mk(Role::A, terms.chain_i);
        let b = mk(Role::B, terms.chain_j);
        for ledger in world.ledgers.iter_mut() {
            for p in [&a, &b] {
                ledger.register_key(&p.account, p.kp.pk());
                ledger.fund(&p.account, &setup.world.fee_asset, setup.gas);
            }
        }
        world.ledgers[terms.chain_i as usize].fund(&a.account, &terms.asset_x, setup.funding_a);
        let funding_b = if strategy.deviation == Deviation::InsolventB {
            terms.amount_y.saturating_sub(1)
        } else {
            setup.funding_b
        };
        world.ledgers[terms.chain_j as usize].fund(&b.account, &terms.asset_y, funding_b);
        let ctx = SwapSessionContext {
            terms,
            accounts: [a.account.clone(), b.account.clone()],
            pks: [a.kp.pk(), b.kp.pk()],
            commitments: [None, None],
            nonce_points: [None, None],
            joint_r: None,
            open_tick: 0,
            timeout_i: 0,
            timeout_j: 0,
            lock_x: None,
            lock_y: None,
        };
        Ok(SwapRun {
            world,
            ctx,
            state: SwapState::default(),
            parties: [a, b],
            strategy,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5157_4150),
            settled_tick: None,
            sniped_y: false,
        })
    }

    pub fn session_id(&self) -> String {
        hex::encode(Sha256::digest(length_prefixed(&[&self.ctx.terms.encode_x(), &self.ctx.terms.encode_y()])))
    }

    fn record(&mut self, e: TranscriptEntry) {
        self.state.apply(e);
    }

    fn abort(&mut self, reason: &str) {
        if !matches!(self.state.phase(), Phase::Aborted) && !self.state.phase().is_terminal() {
            self.record(TranscriptEntry::Aborted { reason: reason.to_string() });
        }
    }

    fn send(&mut self, from: Role, topic: &str, mut payload: Vec<u8>) {
        let (src, dst) = (self.parties[from.idx()].home, self.parties[from.other().idx()].home);
        let extra = match self.strategy.network {
            NetworkAdversary::None => 0,
            NetworkAdversary::Blackout => return,
            NetworkAdversary::Dropper { p } => {
                if self.rng.gen_bool(p) {
                    return;
                }
                0
            }
            NetworkAdversary::Reorderer { jitter } => self.rng.gen_range(0..=jitter),
            NetworkAdversary::Delayer { max_delay } => self.rng.gen_range(0..=max_delay),
            NetworkAdversary::Tamperer { p } => {
                if !payload.is_empty() && self.rng.gen_bool(p) {
                    let i = self.rng.gen_range(0..payload.len());
                    payload[i] ^= 1 << self.rng.gen_range(0..8);
                }
                0
            }
        };
        self.world.send(Message { from: src, to: dst, topic: topic.to_string(), payload }, extra);
    }

    fn chain_height(&self, chain: u32) -> u64 {
        self.world.ledgers[chain as usize].height
    }

    /// Advances one tick and lets both parties react.
    fn step(&mut self) {
        let events = self.world.run(1);
        for ev in events.events {
            match ev {
                Event::Delivered { message, .. } => self.on_message(message),
                Event::Tx { chain, tx_id, height, tx, .. } => self.on_tx(chain, tx_id, height, &tx),
                _ => {}
            }
        }
        self.react();
    }

    fn role_at(&self, chain: u32) -> Role {
        if self.parties[0].home == chain {
            Role::A
        } else {
            Role::B
        }
    }

    fn on_message(&mut self, m: Message) {
        let me = self.role_at(m.to);
        if !self.parties[me.idx()].live {
            return;
        }
        match m.topic.as_str() {
            "commit" => {
                if self.parties[me.idx()].got_commit.is_none() {
                    if let Ok(d) = <[u8; 32]>::try_from(m.payload.as_slice()) {
                        self.parties[me.idx()].got_commit = Some(d);
                        self.ctx.commitments[me.other().idx()] = Some(d);
                        self.record(TranscriptEntry::CommitmentReceived { by: me, digest: d.to_vec() });
                    }
                }
            }
            "nonce" => {
                let p = &self.parties[me.idx()];
                if p.got_nonce.is_some() {
                    return;
                }
                let Some(commit) = p.got_commit else { return };
                match G::point_from_bytes(&m.payload) {
                    Some(pt) if nonce_commitment::<G>(&pt) == commit => {
                        self.parties[me.idx()].got_nonce = Some(pt);
                        self.record(TranscriptEntry::NonceReceived { by: me, point: m.payload });
                    }
                    _ => {
                        if me == Role::A {
                            self.abort("nonce does not open commitment");
                        }
                    }
                }
            }
            "partial" => {
                if self.parties[me.idx()].got_partial.is_some() {
                    return;
                }
                match decode_partial::<G>(&m.payload) {
                    Some(p) => {
                        self.parties[me.idx()].got_partial = Some(p);
                        self.record(TranscriptEntry::PartialReceived { by: me, partial: m.payload });
                    }
                    None => self.record(TranscriptEntry::PartialRejected { by: me, reason: "undecodable".into() }),
                }
            }
            _ => {}
        }
    }

    fn on_tx(&mut self, chain: u32, tx_id: u64, height: u64, tx: &Tx) {
        let terms = self.ctx.terms.clone();
        let owner_of = |acct: &str| if acct == "alice" { Role::A } else { Role::B };
        match &tx.kind {
            TxKind::Lock { .. } if chain == terms.chain_i && Some(tx_id) == self.ctx.lock_x => {
                self.record(TranscriptEntry::LockConfirmed { owner: Role::A, chain, lock_id: tx_id, height });
            }
            TxKind::Lock { .. } if chain == terms.chain_j && Some(tx_id) == self.ctx.lock_y => {
                self.record(TranscriptEntry::LockConfirmed { owner: Role::B, chain, lock_id: tx_id, height });
            }
            TxKind::Claim { lock_id, .. } => {
                let ours = (chain == terms.chain_i && Some(*lock_id) == self.ctx.lock_x)
                    || (chain == terms.chain_j && Some(*lock_id) == self.ctx.lock_y);
                if ours {
                    let by = owner_of(&tx.sender);
                    self.record(TranscriptEntry::Claimed { by, chain, height });
                    if self.state.phase() == Phase::Settled && self.settled_tick.is_none() {
                        self.settled_tick = Some(self.world.tick() - self.ctx.open_tick);
                    }
                }
            }
            TxKind::Refund { lock_id } => {
                let ours = (chain == terms.chain_i && Some(*lock_id) == self.ctx.lock_x)
                    || (chain == terms.chain_j && Some(*lock_id) == self.ctx.lock_y);
                if ours {
                    let owner = owner_of(&tx.sender);
                    self.record(TranscriptEntry::Refunded { owner, chain, height });
                }
            }
            _ => {}
        }
    }

    fn submit(&mut self, role: Role, chain: u32, kind: TxKind) -> Option<u64> {
        let fee = self.world.ledgers[chain as usize].fees.for_kind(&kind);
        let p = &mut self.parties[role.idx()];
        let nonce = p.next_nonce();
        let tx = Tx::new(p.account.clone(), kind, fee, nonce).signed(chain, &p.kp);
        self.world.ledgers[chain as usize].submit_tx(tx).ok()
    }

    fn lock_condition(&self, required: &[Role]) -> Option<LockCondition> {
        let binding = self.ctx.binding()?;
        Some(LockCondition {
            challenge: G::scalar_to_bytes(&binding.challenge()),
            required: required
                .iter()
                .map(|r| ProofRequirement {
                    pk: G::point_to_bytes(&self.ctx.pks[r.idx()]),
                    nonce_point: G::point_to_bytes(&self.ctx.nonce_points[r.idx()].expect("nonce known")),
                })
                .collect(),
        })
    }

    fn lock_mined(&self, chain: u32, id: Option<u64>) -> bool {
        id.and_then(|id| self.world.ledgers[chain as usize].lock(id)).is_some()
    }

    /// Background behaviour run after every tick: nonce replies, B's
    /// follow-up claim, deviations that act on chain state, refunds.
    fn react(&mut self) {
        for role in [Role::A, Role::B] {
            let p = &self.parties[role.idx()];
            if p.live && p.got_commit.is_some() && !p.nonce_sent {
                let pt = G::mul_base(&p.nonce);
                self.parties[role.idx()].nonce_sent = true;
                self.send(role, "nonce", G::point_to_bytes(&pt));
            }
        }
        if self.ctx.joint_r.is_none() {
            if let (Some(_), Some(_)) = (self.parties[0].got_nonce, self.parties[1].got_nonce) {
                let ra = G::mul_base(&self.parties[0].nonce);
                let rb = G::mul_base(&self.parties[1].nonce);
                self.ctx.nonce_points = [Some(ra), Some(rb)];
                self.ctx.joint_r = Some(ra + rb);
            }
        }
        self.b_follow_claim();
        self.adversarial_actions();
        self.refunds();
    }

    fn b_follow_claim(&mut self) {
        let b = &self.parties[1];
        if !b.live || b.claim_sent {
            return;
        }
        let (ci, cj) = (self.ctx.terms.chain_i, self.ctx.terms.chain_j);
        let Some(lock_y) = self.ctx.lock_y else { return };
        let sniper = self.strategy.deviation == Deviation::MempoolSniper;
        // Honest B reads A's proof from a mined claim; a sniper reads it from
        // the mempool as soon as it appears.
        let ledger_j = &self.world.ledgers[cj as usize];
        let mined = ledger_j.applied_txs().find_map(|(_, (_, tx))| match &tx.kind {
            TxKind::Claim { lock_id, proofs } if *lock_id == lock_y => proofs.first().cloned(),
            _ => None,
        });
        let pending = if sniper {
            ledger_j.mempool().iter().find_map(|(_, tx)| match &tx.kind {
                TxKind::Claim { lock_id, proofs } if *lock_id == lock_y => proofs.first().cloned(),
                _ => None,
            })
        } else {
            None
        };
        let Some(proof_a) = mined.or(pending.clone()) else { return };
        if sniper && !self.sniped_y {
            if let Some(p) = &pending {
                // Try to take Y itself by replaying A's proof.
                self.sniped_y = true;
                self.submit(Role::B, cj, TxKind::Claim { lock_id: lock_y, proofs: vec![p.clone()] });
            }
        }
        let Some(lock_x) = self.ctx.lock_x else { return };
        let Some(binding) = self.ctx.binding() else { return };
        let e = binding.challenge();
        let b = &self.parties[1];
        let own = match &b.own_partial {
            Some(p) => p.clone(),
            None => SwapPartial {
                s: b.nonce + e * b.kp.sk(),
                nonce_point: G::mul_base(&b.nonce),
                session_id: binding.session_id(),
            },
        };
        let r_b = recover_own_nonce(&own, &b.kp, &e);
        let Ok(proof_b) = settle_reveal(&own, &r_b) else { return };
        if decode_settlement::<G>(&proof_a.0).is_none() {
            return;
        }
        self.parties[1].claim_sent = true;
        self.submit(
            Role::B,
            ci,
            TxKind::Claim { lock_id: lock_x, proofs: vec![proof_a, HexBytes(encode_settlement(&proof_b))] },
        );
    }

    fn adversarial_actions(&mut self) {
        if self.strategy.deviation != Deviation::EarlyClaimer || !self.parties[1].live {
            return;
        }
        let (ci, cj) = (self.ctx.terms.chain_i, self.ctx.terms.chain_j);
        if self.world.tick() % 4 != 0 {
            return;
        }
        if let (Some(lock_x), Some(binding)) = (self.ctx.lock_x, self.ctx.binding()) {
            if self.world.ledgers[ci as usize].lock(lock_x).map(|l| l.status) == Some(LockStatus::Open)
                && !self.parties[1].claim_sent
            {
                // Guess A's nonce: the opening check fails unless r_A is known.
                let e = binding.challenge();
                let fake = SettlementProof::<G> {
                    nonce_point: self.ctx.nonce_points[0].expect("known"),
                    revealed_nonce: G::scalar_from_u64(self.rng.gen()),
                    s_prime: G::scalar_from_u64(self.rng.gen()) * e,
                };
                let b = &self.parties[1];
                let own = b.nonce + e * b.kp.sk();
                let partial = SwapPartial::<G> { s: own, nonce_point: G::mul_base(&b.nonce), session_id: binding.session_id() };
                if let Ok(pb) = settle_reveal(&partial, &b.nonce) {
                    self.submit(
                        Role::B,
                        ci,
                        TxKind::Claim {
                            lock_id: lock_x,
                            proofs: vec![HexBytes(encode_settlement(&fake)), HexBytes(encode_settlement(&pb))],
                        },
                    );
                }
            }
        }
        if let Some(lock_y) = self.ctx.lock_y {
            if self.world.ledgers[cj as usize].lock(lock_y).map(|l| l.status) == Some(LockStatus::Open) {
                self.submit(Role::B, cj, TxKind::Refund { lock_id: lock_y });
            }
        }
    }

    fn refunds(&mut self) {
        for (role, chain, lock) in [
            (Role::A, self.ctx.terms.chain_i, self.ctx.lock_x),
            (Role::B, self.ctx.terms.chain_j, self.ctx.lock_y),
        ] {
            let p = &self.parties[role.idx()];
            if !p.live || p.refund_sent {
                continue;
            }
            let Some(id) = lock else { continue };
            let ledger = &self.world.ledgers[chain as usize];
            let Some(entry) = ledger.lock(id) else { continue };
            if entry.status == LockStatus::Open && ledger.height + 1 >= entry.timeout_height {
                self.parties[role.idx()].refund_sent = true;
                self.submit(role, chain, TxKind::Refund { lock_id: id });
            }
        }
    }

    fn run_until(&mut self, deadline_tick: u64, done: impl Fn(&Self) -> bool) -> bool {
        while !done(self) {
            if self.world.tick() >= deadline_tick {
                return false;
            }
            self.step();
        }
        true
    }

    fn party_solvent(&self, role: Role) -> bool {
        let t = &self.ctx.terms;
        let (chain, asset, amount) = match role {
            Role::A => (t.chain_i, &t.asset_x, t.amount_x),
            Role::B => (t.chain_j, &t.asset_y, t.amount_y),
        };
        let ledger = &self.world.ledgers[chain as usize];
        let acct = &self.parties[role.idx()].account;
        let fees = ledger.fees;
        let gas_needed = fees.lock + fees.refund.max(fees.claim);
        if *asset == ledger.fee_asset {
            ledger.balance(acct, asset) >= amount + gas_needed
        } else {
            ledger.balance(acct, asset) >= amount && ledger.balance(acct, &ledger.fee_asset) >= gas_needed
        }
    }

    /// Nonce commitments, then locks: A first on chain `i`, B on chain `j`
    /// once it has seen A's lock. Aborts before any lock if either party is
    /// insolvent or the commitment round stalls.
    pub fn open_swap(&mut self) -> &SwapState {
        let w = self.ctx.terms.window_ticks;
        let (ci, cj) = (self.ctx.terms.chain_i, self.ctx.terms.chain_j);
        let t0 = self.world.tick();
        self.ctx.open_tick = t0;
        let iv = self.world.clock.block_intervals.clone();
        self.ctx.timeout_j = (t0 + w) / iv[cj as usize];
        self.ctx.timeout_i = (t0 + 2 * w) / iv[ci as usize];
        self.record(TranscriptEntry::Opened { tick: t0 });
        if !self.party_solvent(Role::A) || !self.party_solvent(Role::B) {
            self.abort("insolvent party");
            return &self.state;
        }
        for role in [Role::A, Role::B] {
            let c = nonce_commitment::<G>(&G::mul_base(&self.parties[role.idx()].nonce));
            self.send(role, "commit", c.to_vec());
        }
        if !self.run_until(t0 + w / 4, |s| s.ctx.joint_r.is_some() || s.state.phase() == Phase::Aborted) {
            self.abort("commitment round timed out");
            return &self.state;
        }
        if self.state.phase() == Phase::Aborted {
            return &self.state;
        }

        let cond_x = self.lock_condition(&[Role::A, Role::B]).expect("binding known");
        let t = self.ctx.terms.clone();
        self.ctx.lock_x = self.submit(
            Role::A,
            ci,
            TxKind::Lock {
                asset: t.asset_x.clone(),
                amount: t.amount_x,
                beneficiary: self.parties[1].account.clone(),
                timeout_height: self.ctx.timeout_i,
                condition: cond_x.clone(),
            },
        );
        self.parties[0].lock_sent = true;
        let lock_deadline = t0 + w / 2;
        if !self.run_until(lock_deadline, |s| s.lock_mined(ci, s.ctx.lock_x)) {
            self.abort("first lock not mined");
            return &self.state;
        }
        // B checks A's lock against the agreed terms before locking.
        let entry = self.world.ledgers[ci as usize].lock(self.ctx.lock_x.unwrap()).cloned().unwrap();
        let acceptable = entry.amount == t.amount_x
            && entry.asset == t.asset_x
            && entry.beneficiary == self.parties[1].account
            && entry.condition == cond_x
            && entry.timeout_height == self.ctx.timeout_i;
        if !acceptable || !self.parties[1].live {
            self.abort("first lock does not match terms");
            return &self.state;
        }
        let cond_y = self.lock_condition(&[Role::A]).expect("binding known");
        self.ctx.lock_y = self.submit(
            Role::B,
            cj,
            TxKind::Lock {
                asset: t.asset_y.clone(),
                amount: t.amount_y,
                beneficiary: self.parties[0].account.clone(),
                timeout_height: self.ctx.timeout_j,
                condition: cond_y,
            },
        );
        self.parties[1].lock_sent = true;
        if !self.run_until(lock_deadline, |s| s.lock_mined(cj, s.ctx.lock_y)) {
            self.abort("second lock not mined");
        }
        &self.state
    }

    /// Both parties send partials under the shared challenge; A checks the
    /// aggregate and aborts on failure.
    pub fn exchange_partials(&mut self) -> Result<&SwapState, SwapError> {
        if self.state.phase() != Phase::Committed {
            return Err(SwapError::WrongPhase { expected: Phase::Committed, actual: self.state.phase() });
        }
        let binding = self.ctx.binding().expect("committed");
        if self.strategy.deviation == Deviation::CrashBeforePartials {
            self.parties[1].live = false;
        }
        for role in [Role::A, Role::B] {
            if !self.parties[role.idx()].live {
                continue;
            }
            let p = &mut self.parties[role.idx()];
            let nonce = p.nonce;
            let partial = swap_partial_sign(&p.kp, &binding, &nonce, &mut p.registry).expect("fresh nonce");
            p.own_partial = Some(partial.clone());
            let payload = if role == Role::B {
                match self.strategy.deviation {
                    Deviation::Withholder => continue,
                    Deviation::PartialForger { mode } => self.forge(mode, &partial, &binding),
                    _ => encode_partial(&partial),
                }
            } else {
                encode_partial(&partial)
            };
            self.send(role, "partial", payload);
        }
        let cj = self.ctx.terms.chain_j;
        let cutoff = self.reveal_cutoff_tick();
        self.run_until(cutoff, |s| s.parties[0].got_partial.is_some());

        // B's view of A's partial only feeds the transcript.
        if let Some(pa) = self.parties[1].got_partial.clone() {
            if !partial_verify(&pa, &self.ctx.pks[0], &binding) {
                self.record(TranscriptEntry::PartialRejected { by: Role::B, reason: "invalid partial from A".into() });
            }
        }
        let ok = match (&self.parties[0].got_partial, &self.parties[0].own_partial) {
            (Some(pb), Some(pa)) => joint_verify((pa, pb), (&self.ctx.pks[0], &self.ctx.pks[1]), &binding),
            _ => false,
        };
        if ok && self.chain_height(cj) + 1 < self.ctx.timeout_j {
            self.record(TranscriptEntry::PartialsVerified);
        } else if self.parties[0].got_partial.is_none() {
            self.abort("no partial from B");
        } else if !ok {
            self.record(TranscriptEntry::PartialRejected { by: Role::A, reason: "joint verification failed".into() });
            self.abort("joint verification failed");
        } else {
            self.abort("reveal window closed");
        }
        Ok(&self.state)
    }

    /// Latest tick at which A can still submit a claim that lands before
    /// chain `j`'s timeout, with one block of margin.
    fn reveal_cutoff_tick(&self) -> u64 {
        let iv = self.world.clock.block_intervals[self.ctx.terms.chain_j as usize];
        (self.ctx.timeout_j.saturating_sub(2)) * iv
    }

    fn forge(&mut self, mode: ForgeMode, honest: &SwapPartial<G>, binding: &SessionBinding<G>) -> Vec<u8> {
        match mode {
            ForgeMode::RandomScalar => {
                let mut p = honest.clone();
                p.s = p.s + G::scalar_from_u64(self.rng.gen_range(1..u64::MAX));
                encode_partial(&p)
            }
            ForgeMode::ForeignSession => {
                let mut other = binding.clone();
                other.asset_y = length_prefixed(&[b"another session", &binding.asset_y]);
                let b = &self.parties[1];
                let nonce = derive_swap_nonce(&b.kp, b"foreign", 1);
                let mut reg = NonceRegistry::new();
                encode_partial(&swap_partial_sign(&b.kp, &other, &nonce, &mut reg).expect("fresh"))
            }
            ForgeMode::WrongKey => {
                let kp = keygen::<G>(&self.rng.gen::<[u8; 16]>()).expect("seed");
                let nonce = derive_swap_nonce(&kp, b"wrong", 0);
                let mut reg = NonceRegistry::new();
                encode_partial(&swap_partial_sign(&kp, binding, &nonce, &mut reg).expect("fresh"))
            }
            ForgeMode::RandomBytes => {
                let mut bytes = encode_partial(honest);
                let n = self.rng.gen_range(1..4);
                for _ in 0..n {
                    let i = self.rng.gen_range(0..bytes.len());
                    bytes[i] ^= self.rng.gen_range(1..=255u8);
                }
                bytes
            }
        }
    }

    /// The first mover publishes its settlement proof by claiming `Y`; B
    /// follows on chain `i` from the mined proof. Runs until both claims land
    /// or the first mover's window ends.
    pub fn reveal_and_claim(&mut self, revealer: Role) -> Result<&SwapState, SwapError> {
        if revealer != Role::A {
            return Err(SwapError::NotFirstMover);
        }
        if self.state.phase() != Phase::PartialsExchanged {
            return Err(SwapError::WrongPhase { expected: Phase::PartialsExchanged, actual: self.state.phase() });
        }
        let cj = self.ctx.terms.chain_j;
        let late = self.strategy.deviation == Deviation::LateReveal;
        if late {
            let t = self.ctx.timeout_j;
            let end = self.horizon_tick();
            self.run_until(end, |s| s.chain_height(cj) + 1 >= t);
        } else if self.chain_height(cj) + 1 >= self.ctx.timeout_j {
            return Err(SwapError::RevealTooLate);
        }
        let binding = self.ctx.binding().expect("committed");
        let a = &self.parties[0];
        let own = a.own_partial.clone().expect("signed");
        let proof = settle_reveal(&own, &a.nonce).expect("own nonce");
        let lock_y = self.ctx.lock_y.expect("committed");
        debug_assert!(crate::adaptor_sig::verify_settlement(&proof, &self.ctx.pks[0], &binding.challenge()));
        let id = self.submit(Role::A, cj, TxKind::Claim { lock_id: lock_y, proofs: vec![HexBytes(encode_settlement(&proof))] });
        self.parties[0].claim_sent = true;
        if let Some(tx_id) = id {
            self.record(TranscriptEntry::Revealed { by: Role::A, chain: cj, tx_id });
        }
        if self.strategy.deviation == Deviation::CrashAfterReveal {
            self.parties[0].live = false;
        }
        let end = self.horizon_tick();
        self.run_until(end, |s| s.state.phase() == Phase::Settled);
        Ok(&self.state)
    }

    fn horizon_tick(&self) -> u64 {
        let iv = &self.world.clock.block_intervals;
        let ti = self.ctx.timeout_i * iv[self.ctx.terms.chain_i as usize];
        let tj = self.ctx.timeout_j * iv[self.ctx.terms.chain_j as usize];
        ti.max(tj) + 2 * iv.iter().max().copied().unwrap_or(1) + 2
    }

    /// Runs past both timeouts so live parties can refund, then judges the
    /// outcome from chain state.
    pub fn finish(&mut self) -> GameOutcome {
        let end = self.horizon_tick();
        self.run_until(end, |_| false);
        let (ci, cj) = (self.ctx.terms.chain_i, self.ctx.terms.chain_j);
        let status = |chain: u32, id: Option<u64>| {
            id.and_then(|id| self.world.ledgers[chain as usize].lock(id)).map(|l| (l.status, l.timeout_height))
        };
        let sx = status(ci, self.ctx.lock_x);
        let sy = status(cj, self.ctx.lock_y);
        let claimed = |s: Option<(LockStatus, u64)>| matches!(s, Some((LockStatus::Claimed { .. }, _)));
        // An open lock is fine only if its owner can still take it back.
        let stuck = |s: Option<(LockStatus, u64)>, chain: u32| match s {
            Some((LockStatus::Open, timeout)) => self.world.ledgers[chain as usize].height + 1 < timeout,
            _ => false,
        };
        let (outcome, detail) = match (claimed(sx), claimed(sy)) {
            (true, true) => (Outcome::BothSettled, "both locks claimed".to_string()),
            (false, false) if stuck(sx, ci) || stuck(sy, cj) => {
                (Outcome::Violation, "a lock is neither claimable nor refundable".to_string())
            }
            (false, false) => (Outcome::BothRefunded, format!("{:?}", self.state.transcript.last())),
            (x, _) => (
                Outcome::Violation,
                if x { "X claimed while Y was not".into() } else { "Y claimed while X was not".into() },
            ),
        };
        GameOutcome {
            outcome,
            strategy: self.strategy,
            final_phase: self.state.phase(),
            settle_ticks: self.settled_tick,
            detail,
        }
    }

    /// Full protocol: open, exchange, reveal (unless the first mover
    /// deviates), finish.
    pub fn run_to_completion(&mut self) -> GameOutcome {
        self.open_swap();
        if self.state.phase() == Phase::Committed {
            let _ = self.exchange_partials();
        }
        if self.state.phase() == Phase::PartialsExchanged && self.strategy.deviation != Deviation::NoReveal {
            let _ = self.reveal_and_claim(Role::A);
        }
        self.finish()
    }

    pub fn balance(&self, role: Role, chain: u32, asset: &str) -> u64 {
        self.world.ledgers[chain as usize].balance(&self.parties[role.idx()].account, asset)
    }

    pub fn account(&self, role: Role) -> &str {
        &self.parties[role.idx()].account
    }

    /// Takes a party offline for the rest of the run.
    pub fn crash(&mut self, role: Role) {
        self.parties[role.idx()].live = false;
    }
}

/// One seeded game on the standard two-chain setup.
pub fn adversarial_atomicity_game<G: Group>(strategy: Strategy, seed: u64) -> GameOutcome {
    let setup = SwapSetup::standard(&format!("game-{seed}"));
    let mut run = SwapRun::<G>::new(&setup, strategy, seed).expect("valid setup");
    run.run_to_completion()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicityReport {
    pub runs: u64,
    pub adversarial_runs: u64,
    pub both_settled: u64,
    pub both_refunded: u64,
    pub adversarial_refunded: u64,
    pub violations: u64,
}

impl AtomicityReport {
    pub fn refund_fraction(&self) -> f64 {
        if self.adversarial_runs == 0 {
            0.0
        } else {
            self.adversarial_refunded as f64 / self.adversarial_runs as f64
        }
    }
}

/// `runs` games with strategies drawn from the adversary library. Every
/// tenth run is honest.
pub fn atomicity_harness<G: Group>(runs: u64, seed: u64) -> AtomicityReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = AtomicityReport::default();
    for k in 0..runs {
        let strategy = if k % 10 == 0 {
            Strategy::HONEST
        } else {
            Strategy::sample(&mut rng, SwapSetup::standard("").terms.window_ticks)
        };
        let run_seed = rng.gen();
        let g = adversarial_atomicity_game::<G>(strategy, run_seed);
        report.runs += 1;
        let adversarial = !strategy.is_honest();
        report.adversarial_runs += adversarial as u64;
        match g.outcome {
            Outcome::BothSettled => report.both_settled += 1,
            Outcome::BothRefunded => {
                report.both_refunded += 1;
                report.adversarial_refunded += adversarial as u64;
            }
            Outcome::Violation => {
                log::warn!("atomicity violation: {:?} {}", g.strategy, g.detail);
                report.violations += 1;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::Toy;

    fn run(strategy: Strategy, seed: u64) -> (SwapRun<Toy>, GameOutcome) {
        let mut r = SwapRun::<Toy>::new(&SwapSetup::standard("t"), strategy, seed).unwrap();
        let g = r.run_to_completion();
        (r, g)
    }

    #[test]
    fn honest_swap_settles_and_moves_assets() {
        let (r, g) = run(Strategy::HONEST, 1);
        assert_eq!(g.outcome, Outcome::BothSettled);
        assert_eq!(r.state.phase(), Phase::Settled);
        assert_eq!(r.balance(Role::B, 0, "X"), 1_000);
        assert_eq!(r.balance(Role::A, 1, "Y"), 2_000);
        assert!(g.settle_ticks.unwrap() > 0);
        assert!(r.ctx.timeouts_ordered(&r.world.clock.block_intervals));
    }

    #[test]
    fn blackout_refunds_without_locking() {
        let s = Strategy { network: NetworkAdversary::Blackout, deviation: Deviation::None };
        let (r, g) = run(s, 2);
        assert_eq!(g.outcome, Outcome::BothRefunded);
        assert!(r.ctx.lock_x.is_none());
        assert_eq!(r.balance(Role::A, 0, "X"), 1_000);
    }

    #[test]
    fn insolvent_b_aborts_before_any_lock() {
        let s = Strategy { network: NetworkAdversary::None, deviation: Deviation::InsolventB };
        let (r, g) = run(s, 3);
        assert_eq!(g.outcome, Outcome::BothRefunded);
        assert_eq!(r.state.phase(), Phase::Aborted);
        assert!(r.ctx.lock_x.is_none() && r.ctx.lock_y.is_none());
    }

    #[test]
    fn no_reveal_refunds_both_after_timeouts() {
        let s = Strategy { network: NetworkAdversary::None, deviation: Deviation::NoReveal };
        let (r, g) = run(s, 4);
        assert_eq!(g.outcome, Outcome::BothRefunded);
        assert_eq!(r.state.phase(), Phase::Refunded);
        assert_eq!(r.balance(Role::A, 0, "X"), 1_000);
        assert_eq!(r.balance(Role::B, 1, "Y"), 2_000);
    }

    #[test]
    fn transcript_round_trips_through_jsonl() {
        let (r, _) = run(Strategy::HONEST, 5);
        let text = r.state.to_jsonl(&r.session_id());
        let (sid, replayed) = SwapState::from_jsonl(&text).unwrap();
        assert_eq!(sid, r.session_id());
        assert_eq!(replayed, r.state);
    }

    #[test]
    fn b_cannot_reveal() {
        let mut r = SwapRun::<Toy>::new(&SwapSetup::standard("t"), Strategy::HONEST, 6).unwrap();
        r.open_swap();
        r.exchange_partials().unwrap();
        assert_eq!(r.reveal_and_claim(Role::B).unwrap_err(), SwapError::NotFirstMover);
    }

    #[test]
    fn phases_never_regress() {
        let mut s = SwapState::default();
        s.apply(TranscriptEntry::Aborted { reason: "x".into() });
        s.apply(TranscriptEntry::PartialsVerified);
        assert_eq!(s.phase(), Phase::Aborted);
        s.apply(TranscriptEntry::Revealed { by: Role::A, chain: 1, tx_id: 0 });
        assert_eq!(s.phase(), Phase::Aborted);
    }
}
