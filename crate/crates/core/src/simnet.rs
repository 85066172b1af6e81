//! Deterministic discrete-event network simulation: topologies, the event
//! queue, seeded RNG streams, and wire traces.
//!
//! Every run is a pure function of its configuration and master seed. All
//! randomness is drawn from [`ChaCha12Rng`] streams keyed by purpose, events
//! fire in `(tick, insertion order)` order, and adjacency lists are kept
//! sorted, so repeated runs produce byte-identical traces.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, VecDeque};
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use thiserror::Error;

use crate::{NodeId, Tick};

/// Events processed before a run is declared non-terminating.
pub const DEFAULT_EVENT_BUDGET: u64 = 10_000_000;

/// Errors surfaced by topology construction and event processing.
#[derive(Debug, Error)]
pub enum SimError {
    /// The requested topology cannot be built (impossible parameters, or
    /// the generator kept producing disconnected graphs).
    #[error("infeasible topology: {0}")]
    Topology(String),
    /// The event budget ran out, which means the run did not terminate.
    #[error("event budget of {budget} exhausted at tick {tick}")]
    EventBudget { budget: u64, tick: Tick },
}

/// Purpose tags for the per-run RNG streams. Keeping each concern on its own
/// stream means, for example, that changing the adversary fraction cannot
/// perturb topology generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RngPurpose {
    Topology = 1,
    Shares = 2,
    Token = 3,
    Churn = 4,
    Adversary = 5,
    Schedule = 6,
}

/// A deterministic RNG for one concern of one run.
pub fn seeded(master: u64, purpose: RngPurpose) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(master);
    rng.set_stream(purpose as u64);
    rng
}

/// An undirected, connected graph with sorted adjacency lists.
#[derive(Debug, Clone)]
pub struct Topology {
    adjacency: Vec<Vec<NodeId>>,
}

impl Topology {
    /// Builds a random `degree`-regular graph on `n` nodes via stub matching:
    /// every node gets `degree` stubs and stubs are paired uniformly among
    /// the partners that neither close a self-loop nor duplicate an edge.
    /// Dead ends and disconnected results restart the pairing, up to 100
    /// attempts.
    pub fn regular<R: Rng + ?Sized>(
        n: usize,
        degree: usize,
        rng: &mut R,
    ) -> Result<Topology, SimError> {
        if n < 2 || degree == 0 || degree >= n || (n * degree) % 2 != 0 {
            return Err(SimError::Topology(format!(
                "no {degree}-regular graph on {n} nodes exists"
            )));
        }
        'attempt: for _ in 0..100 {
            let mut stubs: Vec<NodeId> = (0..n)
                .flat_map(|i| std::iter::repeat(NodeId(i as u32)).take(degree))
                .collect();
            let mut edges: BTreeSet<(NodeId, NodeId)> = BTreeSet::new();
            let legal = |stubs: &[NodeId], edges: &BTreeSet<(NodeId, NodeId)>, a, i: usize| {
                let b = stubs[i];
                b != a && !edges.contains(&ordered(a, b))
            };
            while let Some(a) = stubs.pop() {
                // Rejection sampling stays uniform over the legal partners
                // and almost always hits one immediately; the exhaustive
                // scan only runs when the remaining stubs are mostly
                // neighbors already.
                let mut pick = (0..64)
                    .map(|_| rng.gen_range(0..stubs.len()))
                    .find(|&i| legal(&stubs, &edges, a, i));
                if pick.is_none() {
                    let candidates: Vec<usize> = (0..stubs.len())
                        .filter(|&i| legal(&stubs, &edges, a, i))
                        .collect();
                    if candidates.is_empty() {
                        continue 'attempt;
                    }
                    pick = Some(candidates[rng.gen_range(0..candidates.len())]);
                }
                let b = stubs.swap_remove(pick.expect("picked above"));
                edges.insert(ordered(a, b));
            }
            let topology = Topology::from_edge_set(n, &edges);
            if topology.is_connected() {
                return Ok(topology);
            }
        }
        Err(SimError::Topology(format!(
            "gave up building a connected {degree}-regular graph on {n} nodes"
        )))
    }

    /// Builds an Erdős–Rényi graph: each pair is an edge with probability
    /// `p`. Disconnected samples are redrawn, up to 100 attempts.
    pub fn erdos_renyi<R: Rng + ?Sized>(
        n: usize,
        p: f64,
        rng: &mut R,
    ) -> Result<Topology, SimError> {
        if n == 0 || !(0.0..=1.0).contains(&p) {
            return Err(SimError::Topology(format!(
                "invalid random graph parameters n={n} p={p}"
            )));
        }
        for _ in 0..100 {
            let mut edges = BTreeSet::new();
            for a in 0..n {
                for b in a + 1..n {
                    if rng.gen_bool(p) {
                        edges.insert((NodeId(a as u32), NodeId(b as u32)));
                    }
                }
            }
            let topology = Topology::from_edge_set(n, &edges);
            if topology.is_connected() {
                return Ok(topology);
            }
        }
        Err(SimError::Topology(format!(
            "random graphs with n={n} p={p} keep coming out disconnected"
        )))
    }

    /// Builds the tree in which every internal node has degree `degree` and
    /// all leaves sit at distance `depth` from the root.
    pub fn tree(degree: usize, depth: usize) -> Result<Topology, SimError> {
        if degree < 2 {
            return Err(SimError::Topology(format!(
                "a tree needs internal degree >= 2, got {degree}"
            )));
        }
        let mut edges = BTreeSet::new();
        let mut next = 1u32;
        let mut frontier = vec![NodeId(0)];
        for level in 0..depth {
            let children_each = if level == 0 { degree } else { degree - 1 };
            let mut next_frontier = Vec::new();
            for parent in frontier {
                for _ in 0..children_each {
                    let child = NodeId(next);
                    next += 1;
                    edges.insert(ordered(parent, child));
                    next_frontier.push(child);
                }
            }
            frontier = next_frontier;
        }
        Ok(Topology::from_edge_set(next as usize, &edges))
    }

    /// Builds a path graph `0 - 1 - … - (n-1)`.
    pub fn line(n: usize) -> Result<Topology, SimError> {
        if n == 0 {
            return Err(SimError::Topology("a line needs at least one node".into()));
        }
        let edges: BTreeSet<(NodeId, NodeId)> = (1..n)
            .map(|i| (NodeId(i as u32 - 1), NodeId(i as u32)))
            .collect();
        Ok(Topology::from_edge_set(n, &edges))
    }

    /// Builds a graph from explicit undirected edges. Self-loops are
    /// rejected; duplicate edges collapse.
    pub fn from_edges(n: usize, edges: &[(u32, u32)]) -> Result<Topology, SimError> {
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a == b {
                return Err(SimError::Topology(format!("self-loop on node {a}")));
            }
            if a as usize >= n || b as usize >= n {
                return Err(SimError::Topology(format!("edge ({a}, {b}) out of range")));
            }
            set.insert(ordered(NodeId(a), NodeId(b)));
        }
        Ok(Topology::from_edge_set(n, &set))
    }

    fn from_edge_set(n: usize, edges: &BTreeSet<(NodeId, NodeId)>) -> Topology {
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in edges {
            adjacency[a.index()].push(b);
            adjacency[b.index()].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Topology { adjacency }
    }

    /// Number of nodes.
    pub fn n(&self) -> usize {
        self.adjacency.len()
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// A node's neighbors in ascending order.
    pub fn neighbors(&self, node: NodeId) -> &[NodeId] {
        &self.adjacency[node.index()]
    }

    /// A node's degree.
    pub fn degree(&self, node: NodeId) -> usize {
        self.adjacency[node.index()].len()
    }

    /// True when every node can reach every other.
    pub fn is_connected(&self) -> bool {
        if self.adjacency.is_empty() {
            return false;
        }
        self.distances_from(NodeId(0))
            .iter()
            .all(|d| d.is_some())
    }

    /// BFS distances from `start`; `None` for unreachable nodes.
    pub fn distances_from(&self, start: NodeId) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n()];
        dist[start.index()] = Some(0);
        let mut queue = VecDeque::from([start]);
        while let Some(at) = queue.pop_front() {
            let next = dist[at.index()].expect("visited") + 1;
            for &peer in self.neighbors(at) {
                if dist[peer.index()].is_none() {
                    dist[peer.index()] = Some(next);
                    queue.push_back(peer);
                }
            }
        }
        dist
    }

    /// All nodes within `radius` hops of `center`, including the center.
    pub fn ball(&self, center: NodeId, radius: usize) -> BTreeSet<NodeId> {
        self.distances_from(center)
            .iter()
            .enumerate()
            .filter(|(_, d)| matches!(d, Some(d) if *d <= radius))
            .map(|(i, _)| NodeId(i as u32))
            .collect()
    }

    /// Largest distance from `node` to any other node.
    pub fn eccentricity(&self, node: NodeId) -> usize {
        self.distances_from(node)
            .iter()
            .map(|d| d.expect("graph is connected"))
            .max()
            .unwrap_or(0)
    }

    /// Largest distance between any two nodes, by BFS from every node.
    pub fn diameter(&self) -> usize {
        (0..self.n())
            .map(|i| self.eccentricity(NodeId(i as u32)))
            .max()
            .unwrap_or(0)
    }
}

fn ordered(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug)]
struct Queued<E> {
    at: Tick,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Queued<E> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}

impl<E> Eq for Queued<E> {}

impl<E> PartialOrd for Queued<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Queued<E> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Time-ordered event queue. Events at the same tick fire in the order they
/// were scheduled, which keeps runs deterministic.
#[derive(Debug)]
pub struct EventQueue<E> {
    heap: BinaryHeap<Reverse<Queued<E>>>,
    seq: u64,
    processed: u64,
    budget: u64,
    now: Tick,
}

impl<E> EventQueue<E> {
    /// A queue that refuses to process more than `budget` events.
    pub fn new(budget: u64) -> EventQueue<E> {
        EventQueue {
            heap: BinaryHeap::new(),
            seq: 0,
            processed: 0,
            budget,
            now: 0,
        }
    }

    /// Current simulation time: the tick of the last event popped.
    pub fn now(&self) -> Tick {
        self.now
    }

    /// Events processed so far.
    pub fn processed(&self) -> u64 {
        self.processed
    }

    /// Schedules `event` for tick `at`, which must not lie in the past.
    pub fn schedule(&mut self, at: Tick, event: E) {
        assert!(at >= self.now, "cannot schedule into the past");
        self.heap.push(Reverse(Queued {
            at,
            seq: self.seq,
            event,
        }));
        self.seq += 1;
    }

    /// Pops the next event, advancing the clock. `Ok(None)` once drained;
    /// an error once the event budget is exhausted.
    pub fn pop(&mut self) -> Result<Option<(Tick, E)>, SimError> {
        match self.heap.pop() {
            None => Ok(None),
            Some(Reverse(queued)) => {
                self.processed += 1;
                if self.processed > self.budget {
                    return Err(SimError::EventBudget {
                        budget: self.budget,
                        tick: queued.at,
                    });
                }
                self.now = queued.at;
                Ok(Some((queued.at, queued.event)))
            }
        }
    }
}

/// One delivered envelope, as written to the wire trace.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    /// Delivery tick.
    pub t: Tick,
    /// Envelope kind, e.g. `"dc_share"` or `"flood"`.
    pub kind: &'static str,
    /// Sending node.
    pub src: NodeId,
    /// Receiving node.
    pub dst: NodeId,
    /// Hex message id the envelope carries.
    pub mid: String,
    /// Envelope size in bytes, header included.
    pub size: usize,
}

/// Collects delivered envelopes for NDJSON export. A disabled trace drops
/// records instead of storing them, so large sweeps stay cheap.
#[derive(Debug)]
pub struct Trace {
    enabled: bool,
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new(enabled: bool) -> Trace {
        Trace {
            enabled,
            records: Vec::new(),
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn record(&mut self, record: TraceRecord) {
        if self.enabled {
            self.records.push(record);
        }
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    /// Writes the trace as NDJSON: one metadata object first, then one line
    /// per delivered envelope in delivery order.
    pub fn write_ndjson<W: Write>(&self, meta: &serde_json::Value, out: &mut W) -> io::Result<()> {
        serde_json::to_writer(&mut *out, meta)?;
        out.write_all(b"\n")?;
        for record in &self.records {
            serde_json::to_writer(&mut *out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
