//! Flood-and-prune distribution: the terminal phase that pushes a message
//! from the diffusion frontier to every remaining node.
//!
//! Flooding is receipt-driven: the first copy a node sees is forwarded to
//! every neighbor except the one it came from, and later copies are dropped.
//! Nodes that already hold the message from the diffusion phase prune the
//! flood (they accept the copy silently), which keeps the flood from washing
//! back across the infected ball. Nodes that hold the message only from
//! their anonymity group still forward, so their traffic stays
//! indistinguishable from any other node's.
//!
//! On a connected graph where flooding starts from a single node, every node
//! other than the origin forwards exactly once, which costs
//! `2|E| - n + 1` messages in total ([`expected_flood_messages`]).

/// What a node does with an incoming flood envelope.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FloodAction {
    /// Forward to all neighbors except the sender.
    Forward,
    /// Drop: duplicate, or pruned because diffusion already delivered here.
    Drop,
}

/// One node's flood bookkeeping for a single message.
#[derive(Debug, Clone, Default)]
pub struct FloodState {
    /// True once the node has seen (or seeded) the flood.
    pub seen: bool,
}

impl FloodState {
    /// Marks this node as a flood seed, e.g. on the switch from diffusion.
    /// Returns true the first time, when the seed should spray all
    /// neighbors; repeated seeding is a no-op.
    pub fn seed(&mut self) -> bool {
        let first = !self.seen;
        self.seen = true;
        first
    }

    /// Processes one flood envelope. `holds_from_diffusion` prunes the
    /// forward while still marking the flood as seen.
    pub fn on_flood(&mut self, holds_from_diffusion: bool) -> FloodAction {
        if self.seen {
            return FloodAction::Drop;
        }
        self.seen = true;
        if holds_from_diffusion {
            FloodAction::Drop
        } else {
            FloodAction::Forward
        }
    }
}

/// Messages a single-origin flood costs on a connected graph with `edges`
/// undirected edges and `n` nodes: the origin sends `deg` copies and every
/// other node forwards `deg - 1`.
pub fn expected_flood_messages(edges: usize, n: usize) -> u64 {
    2 * edges as u64 - n as u64 + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simnet::Topology;
    use crate::NodeId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use std::collections::{BTreeSet, VecDeque};

    #[test]
    fn first_receipt_forwards_then_duplicates_drop() {
        let mut state = FloodState::default();
        assert_eq!(state.on_flood(false), FloodAction::Forward);
        assert_eq!(state.on_flood(false), FloodAction::Drop);
    }

    #[test]
    fn diffusion_holders_prune_but_remember() {
        let mut state = FloodState::default();
        assert_eq!(state.on_flood(true), FloodAction::Drop);
        assert_eq!(state.on_flood(false), FloodAction::Drop, "already seen");
    }

    #[test]
    fn seeding_sprays_once() {
        let mut state = FloodState::default();
        assert!(state.seed());
        assert!(!state.seed());
        assert_eq!(state.on_flood(false), FloodAction::Drop);
    }

    /// Runs a full flood from one origin and returns (messages, reached).
    fn flood(topology: &Topology, origin: NodeId, holds: &BTreeSet<NodeId>) -> (u64, usize) {
        let mut states = vec![FloodState::default(); topology.n()];
        let mut messages = 0u64;
        let mut queue: VecDeque<(NodeId, NodeId)> = VecDeque::new();
        states[origin.index()].seed();
        for &nb in topology.neighbors(origin) {
            queue.push_back((origin, nb));
        }
        while let Some((from, to)) = queue.pop_front() {
            messages += 1;
            let action = states[to.index()].on_flood(holds.contains(&to));
            if action == FloodAction::Forward {
                for &nb in topology.neighbors(to) {
                    if nb != from {
                        queue.push_back((to, nb));
                    }
                }
            }
        }
        let reached = states.iter().filter(|s| s.seen).count();
        (messages, reached)
    }

    #[test]
    fn flood_cost_is_twice_edges_minus_nodes_plus_one() {
        let mut r = ChaCha12Rng::seed_from_u64(1);
        let graphs = vec![
            Topology::line(10).unwrap(),
            Topology::tree(3, 4).unwrap(),
            Topology::erdos_renyi(40, 0.2, &mut r).unwrap(),
            Topology::regular(50, 4, &mut r).unwrap(),
        ];
        for topology in graphs {
            let (messages, reached) = flood(&topology, NodeId(0), &BTreeSet::new());
            assert_eq!(reached, topology.n());
            assert_eq!(
                messages,
                expected_flood_messages(topology.edge_count(), topology.n())
            );
        }
    }

    #[test]
    fn disconnected_component_limits_reach() {
        let topology = Topology::from_edges(5, &[(0, 1), (1, 2), (3, 4)]).unwrap();
        let (_, reached) = flood(&topology, NodeId(0), &BTreeSet::new());
        assert_eq!(reached, 3);
        assert!((reached as f64 / 5.0 - 0.6).abs() < 1e-12);
    }

    #[test]
    fn pruning_holders_still_get_covered_without_relaying() {
        let line = Topology::line(6).unwrap();
        let holds: BTreeSet<NodeId> = [NodeId(3)].into();
        let (messages, reached) = flood(&line, NodeId(0), &holds);
        // Node 3 prunes, so the flood never reaches nodes 4 and 5.
        assert_eq!(reached, 4);
        assert_eq!(messages, 3);
    }
}
