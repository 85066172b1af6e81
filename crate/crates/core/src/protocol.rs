//! The full broadcast protocol: envelope format, origin election, and the
//! event-driven runner that chains the three phases together.
//!
//! A broadcast starts inside the origin's anonymity group, where a
//! dining-cryptographers round delivers the message to all `k + 1` members
//! without revealing which of them sent it. The members then deterministically
//! elect one of themselves ([`elect_origin`]) to start adaptive diffusion, so
//! even the diffusion starting point carries no information about the true
//! origin beyond its group. Once the diffusion ball has grown to the
//! configured radius, the virtual source switches the frontier over to
//! flood-and-prune, which covers the rest of the network.
//!
//! [`run`] executes one broadcast over a fixed topology and membership and
//! reports per-phase message counts, reach, and the wire trace.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dcnet::{
    self, announce_length, AnnounceAction, RecoveryOutcome, RoundKind, RoundState,
};
use crate::diffusion::{frontier, AlphaSchedule, DiffusionState, SpreadAction, VirtualSourceToken, TOKEN_BYTES};
use crate::flood::{FloodAction, FloodState};
use crate::groups::MembershipIndex;
use crate::simnet::{EventQueue, SimError, Topology, Trace, TraceRecord};
use crate::{GroupId, MessageId, NodeId, Tick};

/// Fixed per-envelope header size: kind, message id, addressing.
pub const HEADER_BYTES: usize = 16;

/// Wire kinds an envelope can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EnvelopeKind {
    DcShare,
    DcAccumS,
    DcAccumT,
    TokenPass,
    DiffusionSpread,
    FinalSwitch,
    Flood,
    /// Anything this implementation does not understand; counted, dropped.
    Unknown(u8),
}

impl EnvelopeKind {
    /// Stable string used in traces.
    pub fn wire_name(self) -> &'static str {
        match self {
            EnvelopeKind::DcShare => "dc_share",
            EnvelopeKind::DcAccumS => "dc_accum_s",
            EnvelopeKind::DcAccumT => "dc_accum_t",
            EnvelopeKind::TokenPass => "token_pass",
            EnvelopeKind::DiffusionSpread => "diffusion_spread",
            EnvelopeKind::FinalSwitch => "final_switch",
            EnvelopeKind::Flood => "flood",
            EnvelopeKind::Unknown(_) => "unknown",
        }
    }

    /// Which protocol phase the kind belongs to (0-based), if any.
    pub fn phase(self) -> Option<usize> {
        match self {
            EnvelopeKind::DcShare | EnvelopeKind::DcAccumS | EnvelopeKind::DcAccumT => Some(0),
            EnvelopeKind::TokenPass | EnvelopeKind::DiffusionSpread | EnvelopeKind::FinalSwitch => {
                Some(1)
            }
            EnvelopeKind::Flood => Some(2),
            EnvelopeKind::Unknown(_) => None,
        }
    }
}

/// Phase of a trace-record kind string, the inverse of
/// [`EnvelopeKind::wire_name`] composed with [`EnvelopeKind::phase`].
pub fn phase_of_wire_name(name: &str) -> Option<usize> {
    let kinds = [
        EnvelopeKind::DcShare,
        EnvelopeKind::DcAccumS,
        EnvelopeKind::DcAccumT,
        EnvelopeKind::TokenPass,
        EnvelopeKind::DiffusionSpread,
        EnvelopeKind::FinalSwitch,
        EnvelopeKind::Flood,
    ];
    kinds
        .into_iter()
        .find(|kind| kind.wire_name() == name)
        .and_then(EnvelopeKind::phase)
}

/// Envelope body, matching its kind.
#[derive(Debug, Clone)]
pub enum Body {
    /// Round payload bytes for the three exchange stages.
    Bytes(Vec<u8>),
    /// Virtual-source handoff.
    Token(VirtualSourceToken),
    /// One hop of a diffusion wave.
    Spread { wave: u32, ttl: u32, data: Arc<Vec<u8>> },
    /// Order to switch from diffusion to flooding.
    Switch,
    /// Flooded message copy.
    Flood(Arc<Vec<u8>>),
    /// Body of an unknown kind.
    Empty,
}

/// One message on the wire.
#[derive(Debug, Clone)]
pub struct Envelope {
    pub kind: EnvelopeKind,
    pub mid: MessageId,
    pub src: NodeId,
    pub dst: NodeId,
    pub body: Body,
}

impl Envelope {
    /// Payload size in bytes, excluding the header.
    pub fn payload_len(&self) -> usize {
        match &self.body {
            Body::Bytes(bytes) => bytes.len(),
            Body::Token(_) => TOKEN_BYTES,
            Body::Spread { data, .. } => data.len(),
            Body::Switch => TOKEN_BYTES,
            Body::Flood(data) => data.len(),
            Body::Empty => 0,
        }
    }

    /// Total wire size: header plus payload.
    pub fn size(&self) -> usize {
        HEADER_BYTES + self.payload_len()
    }

    fn trace_record(&self, t: Tick) -> TraceRecord {
        TraceRecord {
            t,
            kind: self.kind.wire_name(),
            src: self.src,
            dst: self.dst,
            mid: format!("{}", self.mid),
            size: self.size(),
        }
    }
}

/// Message id: the first eight bytes of the message's SHA-256.
pub fn message_id(message: &[u8]) -> MessageId {
    let digest = Sha256::digest(message);
    let mut raw = [0u8; 8];
    raw.copy_from_slice(&digest[..8]);
    MessageId(u64::from_be_bytes(raw))
}

/// Deterministically elects the group member that starts diffusion.
///
/// Every member can compute this locally: XOR its identity digest with the
/// message digest, hash that, and read the result as a 256-bit score; the
/// smallest score wins (ties by lowest id). Hashing the XOR rather than
/// comparing it directly matters: the raw XOR minimum is decided by the
/// highest bit at which the fixed identity digests differ, which hands some
/// members a permanently larger win region. The re-hash makes the scores
/// exchangeable, so over many messages the role lands on each member
/// equally often and reveals nothing about the true origin.
pub fn elect_origin(members: &BTreeSet<NodeId>, message: &[u8]) -> NodeId {
    let message_digest = Sha256::digest(message);
    members
        .iter()
        .copied()
        .min_by_key(|&node| {
            let node_digest = Sha256::digest(node.0.to_be_bytes());
            let mut mixed = [0u8; 32];
            for (i, byte) in mixed.iter_mut().enumerate() {
                *byte = node_digest[i] ^ message_digest[i];
            }
            let score: [u8; 32] = Sha256::digest(mixed).into();
            (score, node)
        })
        .expect("election needs a nonempty group")
}

/// Which slice of the protocol a run exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Group round, election, diffusion, switch, flood.
    Full,
    /// The origin floods directly; no anonymity machinery.
    FloodOnly,
    /// The origin starts diffusion and waves continue to full coverage.
    DiffusionOnly,
    /// Group round only.
    DcOnly,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::FloodOnly => "flood_only",
            Mode::DiffusionOnly => "diffusion_only",
            Mode::DcOnly => "dc_only",
        }
    }
}

/// Everything one broadcast run needs.
#[derive(Debug, Clone)]
pub struct RunParams<'a> {
    pub topology: &'a Topology,
    pub membership: &'a MembershipIndex,
    pub mode: Mode,
    /// Diffusion radius at which the virtual source switches to flooding.
    pub d_max: usize,
    /// Ticks between group round starts. Must leave room for the three
    /// exchanges of a round.
    pub round_interval: u64,
    /// Token pass/keep schedule for the diffusion phase.
    pub schedule: AlphaSchedule,
    /// The broadcast message.
    pub message: Vec<u8>,
    /// True origin of the broadcast.
    pub origin: NodeId,
    /// Master seed; per-concern streams are derived from it.
    pub master_seed: u64,
    /// Event budget before the run is aborted as non-terminating.
    pub event_budget: u64,
    /// Whether to keep per-envelope trace records.
    pub collect_trace: bool,
    /// Extra envelopes injected at given ticks, for exercising tolerance of
    /// foreign traffic.
    pub preload: Vec<(Tick, Envelope)>,
}

/// Outcome of one broadcast run.
#[derive(Debug)]
pub struct RunReport {
    /// True origin.
    pub origin: NodeId,
    /// Group that carried phase one, when one ran.
    pub group: Option<GroupId>,
    /// Member elected to start diffusion (the origin itself in modes
    /// without an election).
    pub elected: NodeId,
    /// Message id of the broadcast.
    pub mid: MessageId,
    /// Messages sent in each phase: group rounds, diffusion, flood.
    pub phase_messages: [u64; 3],
    /// Fraction of nodes holding the message when the run ended.
    pub reach: f64,
    /// Tick of the last delivery.
    pub ticks: Tick,
    /// Envelopes of unknown kind that were dropped.
    pub unknown_dropped: u64,
    /// Wire trace (empty unless collection was enabled).
    pub trace: Trace,
}

impl RunReport {
    /// Total messages across all phases.
    pub fn total_messages(&self) -> u64 {
        self.phase_messages.iter().sum()
    }
}

enum Event {
    Deliver(Envelope),
    DcRoundStart,
    DiffusionRound { q: u32 },
}

struct DcPhase {
    gid: GroupId,
    members: Vec<NodeId>,
    states: BTreeMap<NodeId, RoundState>,
    round_no: u64,
    round_kind: RoundKind,
    round_done: bool,
    complete: bool,
}

struct Runner<'a> {
    params: &'a RunParams<'a>,
    queue: EventQueue<Event>,
    trace: Trace,
    phase_messages: [u64; 3],
    unknown_dropped: u64,
    mid: MessageId,
    payload: Arc<Vec<u8>>,
    dc: Option<DcPhase>,
    elected: NodeId,
    diffusion: Vec<DiffusionState>,
    vs: NodeId,
    token_from: Option<NodeId>,
    token_depth: u32,
    wave: u32,
    flood: Vec<FloodState>,
    rng_shares: ChaCha12Rng,
    rng_token: ChaCha12Rng,
    rng_schedule: ChaCha12Rng,
}

/// Executes one broadcast and reports what happened on the wire.
pub fn run(params: &RunParams) -> Result<RunReport, SimError> {
    Runner::new(params).run_to_completion()
}

impl<'a> Runner<'a> {
    fn new(params: &'a RunParams<'a>) -> Runner<'a> {
        let n = params.topology.n();
        Runner {
            params,
            queue: EventQueue::new(params.event_budget),
            trace: Trace::new(params.collect_trace),
            phase_messages: [0; 3],
            unknown_dropped: 0,
            mid: message_id(&params.message),
            payload: Arc::new(params.message.clone()),
            dc: None,
            elected: params.origin,
            diffusion: vec![DiffusionState::default(); n],
            vs: params.origin,
            token_from: None,
            token_depth: 0,
            wave: 0,
            flood: vec![FloodState::default(); n],
            rng_shares: crate::simnet::seeded(params.master_seed, crate::simnet::RngPurpose::Shares),
            rng_token: crate::simnet::seeded(params.master_seed, crate::simnet::RngPurpose::Token),
            rng_schedule: crate::simnet::seeded(
                params.master_seed,
                crate::simnet::RngPurpose::Schedule,
            ),
        }
    }

    fn run_to_completion(mut self) -> Result<RunReport, SimError> {
        for (at, envelope) in self.params.preload.clone() {
            self.queue.schedule(at, Event::Deliver(envelope));
        }
        match self.params.mode {
            Mode::Full | Mode::DcOnly => {
                let gid = self
                    .params
                    .membership
                    .select_group(self.params.origin, &mut self.rng_schedule)
                    .expect("origin belongs to a group");
                let members: Vec<NodeId> = self.params.membership.group(gid).unwrap()
                    .iter()
                    .copied()
                    .collect();
                self.dc = Some(DcPhase {
                    gid,
                    members,
                    states: BTreeMap::new(),
                    round_no: 0,
                    round_kind: RoundKind::Base,
                    round_done: false,
                    complete: false,
                });
                self.queue.schedule(0, Event::DcRoundStart);
            }
            Mode::DiffusionOnly => {
                self.start_diffusion(self.params.origin, 0);
            }
            Mode::FloodOnly => {
                self.seed_flood(self.params.origin, 0);
            }
        }
        while let Some((t, event)) = self.queue.pop()? {
            match event {
                Event::Deliver(envelope) => self.on_deliver(t, envelope),
                Event::DcRoundStart => self.on_dc_round_start(t),
                Event::DiffusionRound { q } => self.on_diffusion_round(t, q),
            }
        }
        Ok(self.report())
    }

    fn send(&mut self, t: Tick, envelope: Envelope) {
        self.queue.schedule(t + 1, Event::Deliver(envelope));
    }

    fn on_deliver(&mut self, t: Tick, envelope: Envelope) {
        match envelope.kind.phase() {
            Some(phase) => self.phase_messages[phase] += 1,
            None => {
                self.unknown_dropped += 1;
                return;
            }
        }
        if self.trace.enabled() {
            self.trace.record(envelope.trace_record(t));
        }
        let Envelope { kind, src, dst, body, .. } = envelope;
        match (kind, body) {
            (EnvelopeKind::DcShare, Body::Bytes(bytes)) => {
                self.on_dc_stage(t, dst, |state| state.on_share(src, bytes), EnvelopeKind::DcAccumS);
            }
            (EnvelopeKind::DcAccumS, Body::Bytes(bytes)) => {
                self.on_dc_stage(t, dst, |state| state.on_accum_s(src, bytes), EnvelopeKind::DcAccumT);
            }
            (EnvelopeKind::DcAccumT, Body::Bytes(bytes)) => {
                let outcome = match self.dc.as_mut().and_then(|dc| dc.states.get_mut(&dst)) {
                    Some(state) => state.on_accum_t(src, bytes),
                    None => None,
                };
                if let Some(outcome) = outcome {
                    self.on_dc_round_outcome(t, dst, outcome);
                }
            }
            (EnvelopeKind::TokenPass, Body::Token(token)) => self.on_token(t, src, dst, token),
            (EnvelopeKind::DiffusionSpread, Body::Spread { wave, ttl, data }) => {
                let action = self.diffusion[dst.index()].on_spread(src, wave, ttl, &data);
                if let SpreadAction::Forward { ttl } = action {
                    self.send_spread(t, dst, wave, ttl, Some(src));
                }
            }
            (EnvelopeKind::FinalSwitch, Body::Switch) => self.seed_flood(dst, t),
            (EnvelopeKind::Flood, Body::Flood(_)) => {
                let holds = self.diffusion[dst.index()].infected;
                if self.flood[dst.index()].on_flood(holds) == FloodAction::Forward {
                    self.send_flood(t, dst, Some(src));
                }
            }
            _ => {
                // Kind and body disagree; treat like an unknown kind.
                self.unknown_dropped += 1;
            }
        }
    }

    fn on_dc_stage(
        &mut self,
        t: Tick,
        member: NodeId,
        apply: impl FnOnce(&mut RoundState) -> Option<Vec<(NodeId, Vec<u8>)>>,
        next_kind: EnvelopeKind,
    ) {
        let sends = match self.dc.as_mut().and_then(|dc| dc.states.get_mut(&member)) {
            Some(state) => apply(state),
            None => None,
        };
        if let Some(sends) = sends {
            for (dst, bytes) in sends {
                self.send(
                    t,
                    Envelope {
                        kind: next_kind,
                        mid: self.mid,
                        src: member,
                        dst,
                        body: Body::Bytes(bytes),
                    },
                );
            }
        }
    }

    fn on_dc_round_start(&mut self, t: Tick) {
        let dc = self.dc.as_mut().expect("round start outside group phase");
        if dc.complete {
            return;
        }
        dc.round_no += 1;
        dc.round_done = false;
        let kind = dc.round_kind;
        let members = dc.members.clone();
        let round_no = dc.round_no;
        let mut all_sends = Vec::new();
        for &member in &members {
            let input = if member == self.params.origin {
                Some(match kind {
                    RoundKind::Base => {
                        dcnet::encode_announcement(
                            dcnet::framed_size(self.params.message.len()) as u32
                        )
                        .to_vec()
                    }
                    RoundKind::FollowUp { payload } => dcnet::frame(&self.params.message, payload)
                        .expect("announced payload fits the message")
                        .as_bytes()
                        .to_vec(),
                })
            } else {
                None
            };
            let peers: Vec<NodeId> = members.iter().copied().filter(|&m| m != member).collect();
            let (state, sends) =
                RoundState::begin(round_no, kind, peers, input, &mut self.rng_shares);
            self.dc.as_mut().unwrap().states.insert(member, state);
            for (dst, bytes) in sends {
                all_sends.push((member, dst, bytes));
            }
        }
        for (src, dst, bytes) in all_sends {
            self.send(
                t,
                Envelope {
                    kind: EnvelopeKind::DcShare,
                    mid: self.mid,
                    src,
                    dst,
                    body: Body::Bytes(bytes),
                },
            );
        }
    }

    fn on_dc_round_outcome(&mut self, t: Tick, member: NodeId, outcome: RecoveryOutcome) {
        let dc = self.dc.as_mut().expect("round outcome outside group phase");
        if dc.round_done || dc.complete {
            return;
        }
        // All members decode the same round result; the first one to finish
        // settles what the group does next.
        let _ = member;
        match (dc.round_kind, outcome) {
            (
                RoundKind::Base,
                outcome @ (RecoveryOutcome::Announce(_) | RecoveryOutcome::OwnDelivered),
            ) => {
                // The announcer decodes its own round as OwnDelivered and
                // already knows the length it announced.
                let len = match outcome {
                    RecoveryOutcome::Announce(len) => len,
                    _ => dcnet::framed_size(self.params.message.len()) as u32,
                };
                dc.round_done = true;
                match announce_length(len) {
                    AnnounceAction::ScheduleFollowUp { payload } => {
                        dc.round_kind = RoundKind::FollowUp { payload };
                        let at = self.next_round_boundary(t);
                        self.queue.schedule(at, Event::DcRoundStart);
                    }
                    AnnounceAction::NextBase => {
                        dc.round_kind = RoundKind::Base;
                    }
                }
            }
            (RoundKind::FollowUp { .. }, RecoveryOutcome::Message(_))
            | (RoundKind::FollowUp { .. }, RecoveryOutcome::OwnDelivered) => {
                dc.round_done = true;
                dc.complete = true;
                if self.params.mode == Mode::Full {
                    let members: BTreeSet<NodeId> = dc.members.iter().copied().collect();
                    let elected = elect_origin(&members, &self.params.message);
                    self.elected = elected;
                    self.start_diffusion(elected, t);
                }
            }
            (_, RecoveryOutcome::Silence) => {
                dc.round_done = true;
            }
            (_, outcome) => {
                // A collision cannot happen with a single contender; treat
                // it as a voided round and retry from the announcement.
                debug_assert!(
                    matches!(outcome, RecoveryOutcome::Collision),
                    "unexpected round outcome {outcome:?}"
                );
                dc.round_done = true;
                dc.round_kind = RoundKind::Base;
                let at = self.next_round_boundary(t);
                self.queue.schedule(at, Event::DcRoundStart);
            }
        }
    }

    fn next_round_boundary(&self, t: Tick) -> Tick {
        let interval = self.params.round_interval;
        ((t / interval) + 1) * interval
    }

    fn start_diffusion(&mut self, starter: NodeId, t: Tick) {
        self.vs = starter;
        self.diffusion[starter.index()].infected = true;
        self.diffusion[starter.index()].payload = Some(Arc::clone(&self.payload));
        self.queue.schedule(t, Event::DiffusionRound { q: 1 });
    }

    fn on_diffusion_round(&mut self, t: Tick, q: u32) {
        if self.params.mode == Mode::Full && q as usize > self.params.d_max {
            self.final_switch(t);
            return;
        }
        if self.params.mode == Mode::DiffusionOnly {
            let covered = self.diffusion.iter().filter(|s| s.infected).count();
            if covered == self.params.topology.n() {
                return;
            }
        }
        self.wave = q;
        if q == 1 {
            let neighbors = self.params.topology.neighbors(self.vs);
            let u = neighbors[self.rng_token.gen_range(0..neighbors.len())];
            self.diffusion[self.vs.index()].note_emitted(1);
            self.send(
                t,
                Envelope {
                    kind: EnvelopeKind::DiffusionSpread,
                    mid: self.mid,
                    src: self.vs,
                    dst: u,
                    body: Body::Spread { wave: 1, ttl: 1, data: Arc::clone(&self.payload) },
                },
            );
            self.send_token(t, self.vs, u, 1, 1);
            return;
        }
        let t_protocol: Tick = 2 * (u64::from(q) - 1);
        let alpha = self.params.schedule.alpha(t_protocol, self.token_depth);
        let mut passed = false;
        if self.rng_token.gen_bool(alpha) {
            let candidates: Vec<NodeId> = self
                .params
                .topology
                .neighbors(self.vs)
                .iter()
                .copied()
                .filter(|&nb| Some(nb) != self.token_from)
                .collect();
            if !candidates.is_empty() {
                let u = candidates[self.rng_token.gen_range(0..candidates.len())];
                self.send_token(t, self.vs, u, q, self.token_depth + 1);
                passed = true;
            }
        }
        if !passed {
            self.diffusion[self.vs.index()].note_emitted(q);
            self.send_spread(t, self.vs, q, q - 1, None);
            self.queue
                .schedule(t + u64::from(q) + 1, Event::DiffusionRound { q: q + 1 });
        }
    }

    fn on_token(&mut self, t: Tick, src: NodeId, dst: NodeId, token: VirtualSourceToken) {
        self.token_from = Some(src);
        self.vs = dst;
        self.token_depth = token.depth;
        if token.wave > 1 {
            // The new virtual source emits the wave the pass belongs to; the
            // first wave was already sent directly alongside the token.
            self.diffusion[dst.index()].note_emitted(token.wave);
            self.send_spread(t, dst, token.wave, token.wave - 1, Some(src));
        }
        self.queue.schedule(
            t + u64::from(token.wave) + 1,
            Event::DiffusionRound { q: token.wave + 1 },
        );
    }

    fn send_token(&mut self, t: Tick, src: NodeId, dst: NodeId, wave: u32, depth: u32) {
        self.send(
            t,
            Envelope {
                kind: EnvelopeKind::TokenPass,
                mid: self.mid,
                src,
                dst,
                body: Body::Token(VirtualSourceToken { mid: self.mid, wave, depth }),
            },
        );
    }

    fn send_spread(&mut self, t: Tick, from: NodeId, wave: u32, ttl: u32, exclude: Option<NodeId>) {
        let neighbors: Vec<NodeId> = self
            .params
            .topology
            .neighbors(from)
            .iter()
            .copied()
            .filter(|&nb| Some(nb) != exclude)
            .collect();
        for dst in neighbors {
            self.send(
                t,
                Envelope {
                    kind: EnvelopeKind::DiffusionSpread,
                    mid: self.mid,
                    src: from,
                    dst,
                    body: Body::Spread { wave, ttl, data: Arc::clone(&self.payload) },
                },
            );
        }
    }

    fn final_switch(&mut self, t: Tick) {
        if self.params.d_max == 0 {
            self.seed_flood(self.vs, t);
            return;
        }
        let targets = frontier(self.params.topology, &self.diffusion, self.vs, self.params.d_max);
        for dst in targets {
            self.send(
                t,
                Envelope {
                    kind: EnvelopeKind::FinalSwitch,
                    mid: self.mid,
                    src: self.vs,
                    dst,
                    body: Body::Switch,
                },
            );
        }
    }

    fn seed_flood(&mut self, node: NodeId, t: Tick) {
        if self.flood[node.index()].seed() {
            self.send_flood(t, node, None);
        }
    }

    fn send_flood(&mut self, t: Tick, from: NodeId, exclude: Option<NodeId>) {
        let neighbors: Vec<NodeId> = self
            .params
            .topology
            .neighbors(from)
            .iter()
            .copied()
            .filter(|&nb| Some(nb) != exclude)
            .collect();
        for dst in neighbors {
            self.send(
                t,
                Envelope {
                    kind: EnvelopeKind::Flood,
                    mid: self.mid,
                    src: from,
                    dst,
                    body: Body::Flood(Arc::clone(&self.payload)),
                },
            );
        }
    }

    fn report(self) -> RunReport {
        let mut holders: BTreeSet<NodeId> = BTreeSet::new();
        holders.insert(self.params.origin);
        if let Some(dc) = &self.dc {
            if dc.complete {
                holders.extend(dc.members.iter().copied());
            }
        }
        for (i, state) in self.diffusion.iter().enumerate() {
            if state.infected {
                holders.insert(NodeId(i as u32));
            }
        }
        for (i, state) in self.flood.iter().enumerate() {
            if state.seen {
                holders.insert(NodeId(i as u32));
            }
        }
        RunReport {
            origin: self.params.origin,
            group: self.dc.as_ref().map(|dc| dc.gid),
            elected: self.elected,
            mid: self.mid,
            phase_messages: self.phase_messages,
            reach: holders.len() as f64 / self.params.topology.n() as f64,
            ticks: self.queue.now(),
            unknown_dropped: self.unknown_dropped,
            trace: self.trace,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flood::expected_flood_messages;
    use rand::SeedableRng;

    fn small_world(seed: u64) -> (Topology, MembershipIndex) {
        let mut rng = crate::simnet::seeded(seed, crate::simnet::RngPurpose::Topology);
        let topology = Topology::regular(30, 4, &mut rng).unwrap();
        let mut rng = crate::simnet::seeded(seed, crate::simnet::RngPurpose::Churn);
        let membership = MembershipIndex::bootstrap(30, 5, 1, &mut rng);
        (topology, membership)
    }

    fn base_params<'a>(
        topology: &'a Topology,
        membership: &'a MembershipIndex,
        mode: Mode,
    ) -> RunParams<'a> {
        RunParams {
            topology,
            membership,
            mode,
            d_max: 2,
            round_interval: 8,
            schedule: AlphaSchedule::Harmonic,
            message: b"the quick brown fox".to_vec(),
            origin: NodeId(3),
            master_seed: 99,
            event_budget: 1_000_000,
            collect_trace: true,
            preload: Vec::new(),
        }
    }

    #[test]
    fn envelope_sizes_cover_header_plus_payload() {
        let mid = MessageId(1);
        let share = Envelope {
            kind: EnvelopeKind::DcShare,
            mid,
            src: NodeId(0),
            dst: NodeId(1),
            body: Body::Bytes(vec![0u8; 264]),
        };
        assert_eq!(share.size(), 280);
        let token = Envelope {
            kind: EnvelopeKind::TokenPass,
            mid,
            src: NodeId(0),
            dst: NodeId(1),
            body: Body::Token(VirtualSourceToken { mid, wave: 1, depth: 1 }),
        };
        assert_eq!(token.size(), 32);
        let switch = Envelope {
            kind: EnvelopeKind::FinalSwitch,
            mid,
            src: NodeId(0),
            dst: NodeId(1),
            body: Body::Switch,
        };
        assert_eq!(switch.size(), 32);
        let flood = Envelope {
            kind: EnvelopeKind::Flood,
            mid,
            src: NodeId(0),
            dst: NodeId(1),
            body: Body::Flood(Arc::new(vec![0u8; 256])),
        };
        assert_eq!(flood.size(), 272);
    }

    #[test]
    fn wire_names_are_stable() {
        assert_eq!(EnvelopeKind::DcShare.wire_name(), "dc_share");
        assert_eq!(EnvelopeKind::DcAccumS.wire_name(), "dc_accum_s");
        assert_eq!(EnvelopeKind::DcAccumT.wire_name(), "dc_accum_t");
        assert_eq!(EnvelopeKind::TokenPass.wire_name(), "token_pass");
        assert_eq!(EnvelopeKind::DiffusionSpread.wire_name(), "diffusion_spread");
        assert_eq!(EnvelopeKind::FinalSwitch.wire_name(), "final_switch");
        assert_eq!(EnvelopeKind::Flood.wire_name(), "flood");
    }

    #[test]
    fn election_is_deterministic_and_message_dependent() {
        let members: BTreeSet<NodeId> = (0..7).map(NodeId).collect();
        let a = elect_origin(&members, b"message one");
        let b = elect_origin(&members, b"message one");
        assert_eq!(a, b);
        assert!(members.contains(&a));

        let mut seen = BTreeSet::new();
        for i in 0..64u32 {
            seen.insert(elect_origin(&members, &i.to_be_bytes()));
        }
        assert!(seen.len() > 1, "different messages elect different members");
    }

    #[test]
    fn message_ids_are_sha256_prefixes() {
        let a = message_id(b"alpha");
        let b = message_id(b"alpha");
        let c = message_id(b"beta");
        assert_eq!(a, b);
        assert_ne!(a, c);
        let digest = Sha256::digest(b"alpha");
        assert_eq!(
            format!("{a}"),
            digest[..8].iter().map(|b| format!("{b:02x}")).collect::<String>()
        );
    }

    #[test]
    fn flood_only_costs_exactly_the_flood_formula() {
        let (topology, membership) = small_world(1);
        let params = base_params(&topology, &membership, Mode::FloodOnly);
        let report = run(&params).unwrap();
        assert_eq!(report.phase_messages[0], 0);
        assert_eq!(report.phase_messages[1], 0);
        assert_eq!(
            report.phase_messages[2],
            expected_flood_messages(topology.edge_count(), topology.n())
        );
        assert!((report.reach - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dc_only_reaches_just_the_group() {
        let (topology, membership) = small_world(2);
        let params = base_params(&topology, &membership, Mode::DcOnly);
        let report = run(&params).unwrap();
        let group_size = membership.group(report.group.unwrap()).unwrap().len();
        assert_eq!(group_size, 5);
        // Announcement round and follow-up round, three exchanges each.
        let per_round = 3 * (group_size - 1) * group_size;
        assert_eq!(report.phase_messages[0], 2 * per_round as u64);
        assert_eq!(report.phase_messages[1], 0);
        assert_eq!(report.phase_messages[2], 0);
        assert!((report.reach - group_size as f64 / 30.0).abs() < 1e-12);
        // Base round at tick 0 finishes at 3; follow-up starts at the next
        // boundary and finishes three ticks later.
        assert_eq!(report.ticks, 8 + 3);
    }

    #[test]
    fn diffusion_only_covers_everyone_without_flooding() {
        let (topology, membership) = small_world(3);
        let params = base_params(&topology, &membership, Mode::DiffusionOnly);
        let report = run(&params).unwrap();
        assert_eq!(report.phase_messages[0], 0);
        assert_eq!(report.phase_messages[2], 0);
        assert!(report.phase_messages[1] > 0);
        assert!((report.reach - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_mode_chains_all_three_phases_to_full_reach() {
        let (topology, membership) = small_world(4);
        let params = base_params(&topology, &membership, Mode::Full);
        let report = run(&params).unwrap();
        assert_eq!(report.phase_messages[0], 120, "two rounds of a 5-group");
        assert!(report.phase_messages[1] > 0, "diffusion ran");
        assert!(report.phase_messages[2] > 0, "flood ran");
        assert!((report.reach - 1.0).abs() < 1e-12, "reach {}", report.reach);
        let members = membership.group(report.group.unwrap()).unwrap();
        assert!(members.contains(&report.elected));
    }

    #[test]
    fn full_mode_with_zero_radius_floods_from_the_elected_member() {
        let (topology, membership) = small_world(5);
        let mut params = base_params(&topology, &membership, Mode::Full);
        params.d_max = 0;
        let report = run(&params).unwrap();
        assert_eq!(report.phase_messages[1], 0, "no diffusion traffic");
        assert!(report.phase_messages[2] > 0);
        assert!((report.reach - 1.0).abs() < 1e-12);
    }

    #[test]
    fn runs_are_bit_for_bit_deterministic() {
        let (topology, membership) = small_world(6);
        let params = base_params(&topology, &membership, Mode::Full);
        let a = run(&params).unwrap();
        let b = run(&params).unwrap();
        assert_eq!(a.phase_messages, b.phase_messages);
        assert_eq!(a.ticks, b.ticks);
        assert_eq!(a.elected, b.elected);
        let meta = serde_json::json!({ "groups": [] });
        let (mut out_a, mut out_b) = (Vec::new(), Vec::new());
        a.trace.write_ndjson(&meta, &mut out_a).unwrap();
        b.trace.write_ndjson(&meta, &mut out_b).unwrap();
        assert_eq!(out_a, out_b);
    }

    #[test]
    fn unknown_kinds_are_counted_and_dropped() {
        let (topology, membership) = small_world(7);
        let mut params = base_params(&topology, &membership, Mode::FloodOnly);
        params.preload = vec![(0, Envelope {
            kind: EnvelopeKind::Unknown(0xEE),
            mid: MessageId(0),
            src: NodeId(20),
            dst: NodeId(21),
            body: Body::Empty,
        })];
        let report = run(&params).unwrap();
        assert_eq!(report.unknown_dropped, 1);
        assert!((report.reach - 1.0).abs() < 1e-12, "run proceeds normally");
        assert!(!report
            .trace
            .records()
            .iter()
            .any(|r| r.kind == "unknown"));
    }

    #[test]
    fn trace_records_deliveries_with_sizes_and_ids() {
        let (topology, membership) = small_world(8);
        let params = base_params(&topology, &membership, Mode::Full);
        let report = run(&params).unwrap();
        let records = report.trace.records();
        assert_eq!(records.len() as u64, report.total_messages());
        let mid = format!("{}", report.mid);
        for record in records {
            assert_eq!(record.mid, mid);
            assert!(record.size >= HEADER_BYTES);
            assert!(record.t <= report.ticks);
        }
        assert!(records.iter().any(|r| r.kind == "dc_share"));
        assert!(records.iter().any(|r| r.kind == "final_switch"));
        assert!(records.iter().any(|r| r.kind == "flood"));
    }

    #[test]
    fn election_spreads_evenly_over_the_group() {
        let members: BTreeSet<NodeId> = [2u32, 11, 23, 29, 41].map(NodeId).into();
        let mut counts: BTreeMap<NodeId, u64> = BTreeMap::new();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(55);
        let trials = 10_000u64;
        for _ in 0..trials {
            let mut message = [0u8; 16];
            rand::RngCore::fill_bytes(&mut rng, &mut message);
            *counts.entry(elect_origin(&members, &message)).or_default() += 1;
        }
        let expected = trials as f64 / members.len() as f64;
        let chi2: f64 = members
            .iter()
            .map(|m| {
                let got = *counts.get(m).unwrap_or(&0) as f64;
                (got - expected) * (got - expected) / expected
            })
            .sum();
        // 99th percentile of chi-square with 4 degrees of freedom.
        assert!(chi2 < 13.277, "election bias: chi-square {chi2}");
    }
}
