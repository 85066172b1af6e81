//! XOR-based dining-cryptographers rounds inside a fixed anonymity group.
//!
//! A group of `k + 1` members runs lockstep rounds. In each round every member
//! contributes an `n`-byte input (all zeros when it has nothing to say) and the
//! round ends with every member holding the XOR of all inputs, without anyone
//! learning which member contributed what. One round takes three message
//! exchanges per member pair direction:
//!
//! 1. each member splits its input into `k` random shares that XOR to the
//!    input and sends one share to each other member ([`split_shares`]),
//! 2. each member XORs the `k` shares it received into `S` and sends `S ⊕ s_i`
//!    back to the member that sent `s_i` ([`accumulate`]),
//! 3. each member XORs the `k` accumulations it received into `T` and sends
//!    `T ⊕ t_i` back the same way.
//!
//! After the third exchange, member `c` computes `T ⊕ S = M ⊕ m_c`, where `M`
//! is the XOR of all members' inputs and `m_c` its own. With a single sender
//! every other member recovers the sender's payload and the sender itself sees
//! all zeros, which doubles as its delivery confirmation ([`recover`]).
//!
//! Simultaneous senders garble each other. Payloads embed a CRC-32 so garbled
//! rounds are detected ([`frame`] / [`Payload`]), and colliding senders retry
//! after a truncated binary exponential backoff ([`schedule_backoff`]).
//!
//! To keep idle traffic small, regular rounds carry a fixed 8-byte payload in
//! which a sender announces only the size of its pending message
//! ([`encode_announcement`]). A valid nonzero announcement schedules a one-off
//! follow-up round sized to fit the real message ([`announce_length`]).

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use thiserror::Error;

use crate::NodeId;

/// Bytes of framing around a message: 4-byte big-endian length prefix plus a
/// 4-byte CRC-32 trailer.
pub const FRAME_OVERHEAD: usize = 8;

/// Payload size of a base (announcement) round: a 4-byte length and its CRC.
pub const BASE_ROUND_PAYLOAD: usize = 8;

/// Backoff window stops doubling after this many collisions (window `2^6`).
pub const BACKOFF_CAP_EXPONENT: u32 = 6;

/// Errors surfaced by round framing and bookkeeping.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum DcError {
    /// The message plus framing does not fit the round's payload size.
    #[error("message of {len} bytes does not fit in a {payload}-byte payload")]
    OversizeMessage { len: usize, payload: usize },
    /// A member's contribution was still missing when the round deadline
    /// fired. Only reachable when the transport loses messages.
    #[error("round {round} is missing {missing} member contribution(s)")]
    MissingShare { round: u64, missing: usize },
}

/// What kind of round the group is running.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundKind {
    /// Fixed-size announcement round.
    Base,
    /// One-off round sized by a previous announcement.
    FollowUp { payload: usize },
}

impl RoundKind {
    /// Payload size in bytes that every input of this round must have.
    pub fn payload_size(self) -> usize {
        match self {
            RoundKind::Base => BASE_ROUND_PAYLOAD,
            RoundKind::FollowUp { payload } => payload,
        }
    }
}

/// A fixed-size round payload with an embedded length prefix and CRC-32.
///
/// Layout: `[len: u32 BE][message bytes][crc: u32 BE][zero padding]`, where
/// the CRC covers the length prefix and the message bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Payload {
    bytes: Vec<u8>,
}

impl Payload {
    /// Wraps raw wire bytes without validating them. Use [`Payload::message`]
    /// or [`Payload::is_valid`] to check integrity.
    pub fn from_wire(bytes: Vec<u8>) -> Payload {
        Payload { bytes }
    }

    /// Full framed buffer.
    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Total payload size in bytes.
    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    /// True when the buffer holds no bytes at all.
    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// The embedded CRC-32 field, if the declared length fits the buffer.
    pub fn crc(&self) -> Option<u32> {
        let len = self.declared_len()?;
        let crc_at = 4 + len;
        if crc_at + 4 > self.bytes.len() {
            return None;
        }
        let mut raw = [0u8; 4];
        raw.copy_from_slice(&self.bytes[crc_at..crc_at + 4]);
        Some(u32::from_be_bytes(raw))
    }

    /// True when the embedded CRC matches the checksummed region.
    pub fn is_valid(&self) -> bool {
        self.message().is_some()
    }

    /// Extracts the embedded message, or `None` when the frame is garbled.
    pub fn message(&self) -> Option<Vec<u8>> {
        let len = self.declared_len()?;
        let crc_at = 4 + len;
        if crc_at + 4 > self.bytes.len() {
            return None;
        }
        let stored = self.crc()?;
        if crc32fast::hash(&self.bytes[..crc_at]) != stored {
            return None;
        }
        // Padding past the CRC must be zero, otherwise two XOR-combined
        // frames of different lengths could smuggle a valid-looking prefix.
        if self.bytes[crc_at + 4..].iter().any(|&b| b != 0) {
            return None;
        }
        Some(self.bytes[4..crc_at].to_vec())
    }

    fn declared_len(&self) -> Option<usize> {
        if self.bytes.len() < 4 {
            return None;
        }
        let mut raw = [0u8; 4];
        raw.copy_from_slice(&self.bytes[..4]);
        Some(u32::from_be_bytes(raw) as usize)
    }
}

/// Frames `message` into a `payload_size`-byte buffer.
pub fn frame(message: &[u8], payload_size: usize) -> Result<Payload, DcError> {
    if message.len() + FRAME_OVERHEAD > payload_size {
        return Err(DcError::OversizeMessage {
            len: message.len(),
            payload: payload_size,
        });
    }
    let mut bytes = vec![0u8; payload_size];
    bytes[..4].copy_from_slice(&(message.len() as u32).to_be_bytes());
    bytes[4..4 + message.len()].copy_from_slice(message);
    let crc = crc32fast::hash(&bytes[..4 + message.len()]);
    bytes[4 + message.len()..4 + message.len() + 4].copy_from_slice(&crc.to_be_bytes());
    Ok(Payload { bytes })
}

/// Inverse of [`frame`]: recovers the message, or `None` if the buffer fails
/// its integrity checks.
pub fn unframe(bytes: &[u8]) -> Option<Vec<u8>> {
    Payload::from_wire(bytes.to_vec()).message()
}

/// Payload size a framed copy of a `message_len`-byte message needs.
pub fn framed_size(message_len: usize) -> usize {
    message_len + FRAME_OVERHEAD
}

/// Encodes a base-round input announcing a follow-up of `next_len` bytes:
/// the 4-byte big-endian length followed by its CRC-32.
pub fn encode_announcement(next_len: u32) -> [u8; BASE_ROUND_PAYLOAD] {
    let mut out = [0u8; BASE_ROUND_PAYLOAD];
    out[..4].copy_from_slice(&next_len.to_be_bytes());
    let crc = crc32fast::hash(&out[..4]);
    out[4..].copy_from_slice(&crc.to_be_bytes());
    out
}

/// Decodes a base-round result. `None` when the checksum does not match,
/// which is how colliding announcements surface.
pub fn decode_announcement(bytes: &[u8]) -> Option<u32> {
    if bytes.len() != BASE_ROUND_PAYLOAD {
        return None;
    }
    let mut raw = [0u8; 4];
    raw.copy_from_slice(&bytes[..4]);
    let value = u32::from_be_bytes(raw);
    let mut crc = [0u8; 4];
    crc.copy_from_slice(&bytes[4..]);
    if crc32fast::hash(&bytes[..4]) != u32::from_be_bytes(crc) {
        return None;
    }
    Some(value)
}

/// What a recovered announcement means for round scheduling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnounceAction {
    /// Run one follow-up round with this payload size, then return to base.
    ScheduleFollowUp { payload: usize },
    /// Nothing pending; the next round is a regular base round.
    NextBase,
}

/// Scheduling decision for a recovered announcement value.
pub fn announce_length(length: u32) -> AnnounceAction {
    if length == 0 {
        AnnounceAction::NextBase
    } else {
        AnnounceAction::ScheduleFollowUp {
            payload: length as usize,
        }
    }
}

/// Splits `input` into `k` shares of equal length whose XOR is `input`.
///
/// The first `k - 1` shares are uniformly random, so any proper subset of the
/// shares carries no information about the input.
pub fn split_shares<R: Rng + ?Sized>(input: &[u8], k: usize, rng: &mut R) -> Vec<Vec<u8>> {
    assert!(k >= 1, "a share split needs at least one share");
    let mut shares = Vec::with_capacity(k);
    let mut last = input.to_vec();
    for _ in 0..k - 1 {
        let mut share = vec![0u8; input.len()];
        rng.fill_bytes(&mut share);
        xor_in_place(&mut last, &share);
        shares.push(share);
    }
    shares.push(last);
    shares
}

/// XORs `src` into `acc` byte by byte. Both slices must have equal length.
pub fn xor_in_place(acc: &mut [u8], src: &[u8]) {
    assert_eq!(acc.len(), src.len(), "XOR operands must have equal length");
    for (a, b) in acc.iter_mut().zip(src) {
        *a ^= b;
    }
}

/// Result of XOR-accumulating one exchange stage.
#[derive(Debug, Clone)]
pub struct Accumulated {
    /// XOR of every received value.
    pub total: Vec<u8>,
    /// Per-peer replies: the total with that peer's own contribution removed.
    pub replies: BTreeMap<NodeId, Vec<u8>>,
}

/// XORs one stage's received values into a total and builds the reply for
/// each peer (`total ⊕ value_from_peer`).
///
/// Fails with [`DcError::MissingShare`] when fewer than `expected` values are
/// present, which corresponds to a round deadline firing early.
pub fn accumulate(
    received: &BTreeMap<NodeId, Vec<u8>>,
    expected: usize,
    payload_size: usize,
    round: u64,
) -> Result<Accumulated, DcError> {
    if received.len() < expected {
        return Err(DcError::MissingShare {
            round,
            missing: expected - received.len(),
        });
    }
    let mut total = vec![0u8; payload_size];
    for value in received.values() {
        xor_in_place(&mut total, value);
    }
    let mut replies = BTreeMap::new();
    for (&peer, value) in received {
        let mut reply = total.clone();
        xor_in_place(&mut reply, value);
        replies.insert(peer, reply);
    }
    Ok(Accumulated { total, replies })
}

/// What a member concludes from a finished round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecoveryOutcome {
    /// Nobody sent anything.
    Silence,
    /// This member was the only sender; its payload went through.
    OwnDelivered,
    /// Base round: a single member announced a follow-up of this many bytes.
    Announce(u32),
    /// Follow-up round: a single member sent this message.
    Message(Vec<u8>),
    /// More than one member transmitted; the round is void.
    Collision,
}

/// Interprets `T ⊕ S` for a member that contributed `own_input`.
///
/// `T ⊕ S` equals the XOR of every *other* member's input, so a sender reads
/// all zeros as confirmation of sole delivery and anything else as a
/// collision, while a silent member decodes the bytes according to the round
/// kind and treats checksum failure as a collision.
pub fn recover(t: &[u8], s: &[u8], own_input: &[u8], kind: RoundKind) -> RecoveryOutcome {
    let mut diff = t.to_vec();
    xor_in_place(&mut diff, s);
    let own_sent = own_input.iter().any(|&b| b != 0);
    if diff.iter().all(|&b| b == 0) {
        return if own_sent {
            RecoveryOutcome::OwnDelivered
        } else {
            RecoveryOutcome::Silence
        };
    }
    if own_sent {
        return RecoveryOutcome::Collision;
    }
    match kind {
        RoundKind::Base => match decode_announcement(&diff) {
            Some(0) => RecoveryOutcome::Silence,
            Some(len) => RecoveryOutcome::Announce(len),
            None => RecoveryOutcome::Collision,
        },
        RoundKind::FollowUp { .. } => match unframe(&diff) {
            Some(message) => RecoveryOutcome::Message(message),
            None => RecoveryOutcome::Collision,
        },
    }
}

/// Draws how many rounds a collided sender waits before retrying.
///
/// `attempt` numbers the transmission attempt being scheduled; the initial
/// send is attempt 1, so the first retry passes 2. The wait is uniform over
/// `[1, 2^a]` rounds with `a = min(attempt, 6)`, except that retries never
/// pick the immediately following round, so two freshly collided senders
/// disagree on their retry round more often than not.
pub fn schedule_backoff<R: Rng + ?Sized>(attempt: u32, rng: &mut R) -> u64 {
    let exponent = attempt.clamp(1, BACKOFF_CAP_EXPONENT);
    let window_end = 1u64 << exponent;
    let window_start = if attempt > 1 { 2 } else { 1 };
    rng.gen_range(window_start..=window_end)
}

/// Progress of one member through a round's three exchanges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundStep {
    /// Shares sent; waiting for the other members' shares.
    SharesOut,
    /// First accumulation sent; waiting for the other members' accumulations.
    SCollected,
    /// Second accumulation sent; waiting for the closing exchange.
    TCollected,
    /// Round finished; outcome available.
    Done,
}

/// One member's view of a single round.
#[derive(Debug, Clone)]
pub struct RoundState {
    /// Round counter within the group.
    pub round_id: u64,
    /// Base or follow-up, which fixes the payload size.
    pub kind: RoundKind,
    peers: Vec<NodeId>,
    own_input: Vec<u8>,
    step: RoundStep,
    received_s: BTreeMap<NodeId, Vec<u8>>,
    received_t: BTreeMap<NodeId, Vec<u8>>,
    received_closing: BTreeSet<NodeId>,
    s: Vec<u8>,
    t: Vec<u8>,
}

impl RoundState {
    /// Starts a round and returns the share to send to each peer.
    ///
    /// `own_input` is the member's padded round input, or `None` to stay
    /// silent (an all-zero input). Its length must match the round kind.
    pub fn begin<R: Rng + ?Sized>(
        round_id: u64,
        kind: RoundKind,
        peers: Vec<NodeId>,
        own_input: Option<Vec<u8>>,
        rng: &mut R,
    ) -> (RoundState, Vec<(NodeId, Vec<u8>)>) {
        let payload_size = kind.payload_size();
        let own_input = own_input.unwrap_or_else(|| vec![0u8; payload_size]);
        assert_eq!(own_input.len(), payload_size, "round input length mismatch");
        let shares = split_shares(&own_input, peers.len(), rng);
        let sends: Vec<(NodeId, Vec<u8>)> = peers.iter().copied().zip(shares).collect();
        let state = RoundState {
            round_id,
            kind,
            peers,
            own_input,
            step: RoundStep::SharesOut,
            received_s: BTreeMap::new(),
            received_t: BTreeMap::new(),
            received_closing: BTreeSet::new(),
            s: Vec::new(),
            t: Vec::new(),
        };
        (state, sends)
    }

    /// Current position in the round.
    pub fn step(&self) -> RoundStep {
        self.step
    }

    /// True when the member transmitted a nonzero input this round.
    pub fn own_sent(&self) -> bool {
        self.own_input.iter().any(|&b| b != 0)
    }

    /// Handles a share from a peer. Once every peer's share arrived, returns
    /// the first-stage accumulation to send to each peer.
    pub fn on_share(&mut self, from: NodeId, bytes: Vec<u8>) -> Option<Vec<(NodeId, Vec<u8>)>> {
        if self.step != RoundStep::SharesOut || !self.accept(from, &bytes, Stage::Share) {
            return None;
        }
        self.received_s.insert(from, bytes);
        if self.received_s.len() < self.peers.len() {
            return None;
        }
        let acc = accumulate(
            &self.received_s,
            self.peers.len(),
            self.kind.payload_size(),
            self.round_id,
        )
        .expect("all shares present");
        self.s = acc.total;
        self.step = RoundStep::SCollected;
        Some(acc.replies.into_iter().collect())
    }

    /// Handles a first-stage accumulation. Once complete, returns the
    /// second-stage accumulation to send to each peer.
    pub fn on_accum_s(&mut self, from: NodeId, bytes: Vec<u8>) -> Option<Vec<(NodeId, Vec<u8>)>> {
        if self.step != RoundStep::SCollected || !self.accept(from, &bytes, Stage::AccumS) {
            return None;
        }
        self.received_t.insert(from, bytes);
        if self.received_t.len() < self.peers.len() {
            return None;
        }
        let acc = accumulate(
            &self.received_t,
            self.peers.len(),
            self.kind.payload_size(),
            self.round_id,
        )
        .expect("all accumulations present");
        self.t = acc.total;
        self.step = RoundStep::TCollected;
        Some(acc.replies.into_iter().collect())
    }

    /// Handles a closing accumulation. Once every peer's copy arrived the
    /// round is done and the member's recovery outcome is returned.
    pub fn on_accum_t(&mut self, from: NodeId, bytes: Vec<u8>) -> Option<RecoveryOutcome> {
        if self.step != RoundStep::TCollected || !self.accept(from, &bytes, Stage::AccumT) {
            return None;
        }
        self.received_closing.insert(from);
        if self.received_closing.len() < self.peers.len() {
            return None;
        }
        self.step = RoundStep::Done;
        Some(self.outcome())
    }

    /// The member's recovery result. Only meaningful once the round is done.
    pub fn outcome(&self) -> RecoveryOutcome {
        recover(&self.t, &self.s, &self.own_input, self.kind)
    }

    /// Checks that every expected contribution for the current step arrived.
    /// Called when a round deadline fires.
    pub fn deadline_check(&self) -> Result<(), DcError> {
        let missing = match self.step {
            RoundStep::SharesOut => self.peers.len() - self.received_s.len(),
            RoundStep::SCollected => self.peers.len() - self.received_t.len(),
            RoundStep::TCollected => self.peers.len() - self.received_closing.len(),
            RoundStep::Done => 0,
        };
        if missing > 0 {
            return Err(DcError::MissingShare {
                round: self.round_id,
                missing,
            });
        }
        Ok(())
    }

    fn accept(&self, from: NodeId, bytes: &[u8], stage: Stage) -> bool {
        if !self.peers.contains(&from) || bytes.len() != self.kind.payload_size() {
            return false;
        }
        match stage {
            Stage::Share => !self.received_s.contains_key(&from),
            Stage::AccumS => !self.received_t.contains_key(&from),
            Stage::AccumT => !self.received_closing.contains(&from),
        }
    }
}

#[derive(Clone, Copy)]
enum Stage {
    Share,
    AccumS,
    AccumT,
}
