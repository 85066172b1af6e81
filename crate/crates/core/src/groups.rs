//! Anonymity-group membership: bootstrap partitioning, churn, and the
//! per-group origin distribution.
//!
//! Every node belongs to one group per overlap layer at bootstrap. Churn is
//! handled so that group sizes stay in `[k, 2k)`: a group that reaches `2k`
//! members splits into two uniform random halves, and a group that drops
//! below `k` is repaired by recruiting from the largest group, merging with
//! another group, or dissolving into the pending pool when it was the last
//! group standing. Nodes that arrive before `k` nodes are known wait in the
//! pending pool until a full group can form.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::{GroupId, NodeId};

/// Errors surfaced by membership operations.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum GroupError {
    /// Fewer nodes are known than a single group requires. The joining node
    /// is parked in the pending pool until enough peers arrive.
    #[error("network knows {known} node(s) but a group needs {needed}")]
    NetworkTooSmall { known: usize, needed: usize },
}

/// Tracks which nodes belong to which groups.
#[derive(Debug, Clone)]
pub struct MembershipIndex {
    k: usize,
    groups: BTreeMap<GroupId, BTreeSet<NodeId>>,
    member_of: BTreeMap<NodeId, BTreeSet<GroupId>>,
    pending: BTreeSet<NodeId>,
    next_gid: u32,
}

impl MembershipIndex {
    /// An empty index for a network that grows one join at a time.
    pub fn new(k: usize) -> MembershipIndex {
        assert!(k >= 2, "groups need at least two members");
        MembershipIndex {
            k,
            groups: BTreeMap::new(),
            member_of: BTreeMap::new(),
            pending: BTreeSet::new(),
            next_gid: 0,
        }
    }

    /// Partitions nodes `0..n` into groups of size `k` (remainders spread as
    /// one extra member), independently once per overlap layer, so each node
    /// starts out in exactly `overlap` groups.
    pub fn bootstrap<R: Rng + ?Sized>(
        n: u32,
        k: usize,
        overlap: usize,
        rng: &mut R,
    ) -> MembershipIndex {
        assert!(n as usize >= k, "bootstrap needs at least k nodes");
        assert!(overlap >= 1, "every node needs at least one group");
        let mut index = MembershipIndex::new(k);
        for _ in 0..overlap {
            let mut order: Vec<NodeId> = (0..n).map(NodeId).collect();
            order.shuffle(rng);
            let q = n as usize / k;
            let extras = n as usize - q * k;
            let mut cursor = 0;
            for g in 0..q {
                let size = k + usize::from(g < extras);
                let gid = index.alloc_gid();
                let members: BTreeSet<NodeId> =
                    order[cursor..cursor + size].iter().copied().collect();
                cursor += size;
                for &m in &members {
                    index.member_of.entry(m).or_default().insert(gid);
                }
                index.groups.insert(gid, members);
            }
        }
        index
    }

    /// Builds an index with explicit group contents. Sizes are taken as
    /// given; useful for setting up specific membership shapes.
    pub fn from_groups(k: usize, groups: Vec<Vec<NodeId>>) -> MembershipIndex {
        let mut index = MembershipIndex::new(k);
        for members in groups {
            let gid = index.alloc_gid();
            let members: BTreeSet<NodeId> = members.into_iter().collect();
            for &m in &members {
                index.member_of.entry(m).or_default().insert(gid);
            }
            index.groups.insert(gid, members);
        }
        index
    }

    /// Group size parameter `k`.
    pub fn k(&self) -> usize {
        self.k
    }

    /// All groups and their members.
    pub fn groups(&self) -> &BTreeMap<GroupId, BTreeSet<NodeId>> {
        &self.groups
    }

    /// Members of one group.
    pub fn group(&self, gid: GroupId) -> Option<&BTreeSet<NodeId>> {
        self.groups.get(&gid)
    }

    /// Groups a node currently belongs to.
    pub fn groups_of(&self, node: NodeId) -> Option<&BTreeSet<GroupId>> {
        self.member_of.get(&node)
    }

    /// Number of groups a node belongs to (zero for pending or unknown).
    pub fn group_count(&self, node: NodeId) -> usize {
        self.member_of.get(&node).map_or(0, BTreeSet::len)
    }

    /// Nodes waiting for enough peers to form a group.
    pub fn pending(&self) -> &BTreeSet<NodeId> {
        &self.pending
    }

    /// Nodes the index knows about, grouped or pending.
    pub fn known_nodes(&self) -> usize {
        self.member_of.len() + self.pending.len()
    }

    /// Adds a new node. It lands in the smallest existing group (ties broken
    /// by lowest group id); if no group exists yet the node is parked in the
    /// pending pool, which forms a group by itself once it holds `k` nodes.
    ///
    /// The node must not already be a member.
    pub fn join<R: Rng + ?Sized>(
        &mut self,
        node: NodeId,
        rng: &mut R,
    ) -> Result<GroupId, GroupError> {
        debug_assert!(
            !self.member_of.contains_key(&node) && !self.pending.contains(&node),
            "join expects a node the index does not know"
        );
        if self.groups.is_empty() {
            self.pending.insert(node);
            if let Some(gid) = self.form_from_pending() {
                return Ok(gid);
            }
            return Err(GroupError::NetworkTooSmall {
                known: self.known_nodes(),
                needed: self.k,
            });
        }
        let gid = self.smallest_group();
        self.insert_member(gid, node);
        if self.groups[&gid].len() >= 2 * self.k {
            self.split(gid, rng);
        }
        Ok(gid)
    }

    /// Removes a node from every group it belongs to (and from the pending
    /// pool), then repairs any group left below `k` members.
    pub fn leave<R: Rng + ?Sized>(&mut self, node: NodeId, rng: &mut R) {
        self.pending.remove(&node);
        let gids = match self.member_of.remove(&node) {
            Some(gids) => gids,
            None => return,
        };
        for gid in gids {
            if let Some(members) = self.groups.get_mut(&gid) {
                members.remove(&node);
            }
        }
        loop {
            let needy = self
                .groups
                .iter()
                .find(|(_, members)| members.len() < self.k)
                .map(|(&gid, _)| gid);
            match needy {
                Some(gid) => self.repair(gid, rng),
                None => break,
            }
        }
    }

    /// Picks one of the node's groups uniformly at random, for choosing
    /// where to originate a broadcast.
    pub fn select_group<R: Rng + ?Sized>(&self, node: NodeId, rng: &mut R) -> Option<GroupId> {
        let gids = self.member_of.get(&node)?;
        if gids.is_empty() {
            return None;
        }
        gids.iter().copied().nth(rng.gen_range(0..gids.len()))
    }

    /// Probability that each member is the origin of a broadcast first seen
    /// in this group, assuming every node originates at the same rate and
    /// spreads its traffic evenly across its own groups.
    ///
    /// Each member is weighted by the reciprocal of its group count, then
    /// the weights are normalized.
    pub fn origin_distribution(&self, gid: GroupId) -> Vec<(NodeId, f64)> {
        let members = match self.groups.get(&gid) {
            Some(m) if !m.is_empty() => m,
            _ => return Vec::new(),
        };
        let weights: Vec<(NodeId, f64)> = members
            .iter()
            .map(|&m| (m, 1.0 / self.group_count(m).max(1) as f64))
            .collect();
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        weights.into_iter().map(|(m, w)| (m, w / total)).collect()
    }

    fn alloc_gid(&mut self) -> GroupId {
        let gid = GroupId(self.next_gid);
        self.next_gid += 1;
        gid
    }

    fn smallest_group(&self) -> GroupId {
        self.groups
            .iter()
            .min_by_key(|(&gid, members)| (members.len(), gid))
            .map(|(&gid, _)| gid)
            .expect("caller checked that groups exist")
    }

    fn insert_member(&mut self, gid: GroupId, node: NodeId) {
        self.groups.get_mut(&gid).expect("group exists").insert(node);
        self.member_of.entry(node).or_default().insert(gid);
    }

    fn remove_member(&mut self, gid: GroupId, node: NodeId) {
        self.groups.get_mut(&gid).expect("group exists").remove(&node);
        let gids = self.member_of.get_mut(&node).expect("member known");
        gids.remove(&gid);
        if gids.is_empty() {
            self.member_of.remove(&node);
        }
    }

    /// Splits a group that reached `2k` members into two uniform random
    /// halves. The first half keeps the group id, the second gets a new one.
    fn split<R: Rng + ?Sized>(&mut self, gid: GroupId, rng: &mut R) {
        let mut members: Vec<NodeId> = self.groups[&gid].iter().copied().collect();
        members.shuffle(rng);
        let second: Vec<NodeId> = members.split_off(members.len() / 2);
        let new_gid = self.alloc_gid();
        for node in &second {
            self.remove_member(gid, *node);
        }
        self.groups.insert(new_gid, BTreeSet::new());
        for node in second {
            self.insert_member(new_gid, node);
        }
    }

    /// Brings a group that fell below `k` members back to a legal size:
    /// recruit one member from the largest group when one has members to
    /// spare, otherwise merge with another group, otherwise dissolve into
    /// the pending pool.
    fn repair<R: Rng + ?Sized>(&mut self, gid: GroupId, rng: &mut R) {
        let donor = self
            .groups
            .iter()
            .filter(|(&other, members)| other != gid && members.len() > self.k)
            .max_by_key(|(&other, members)| (members.len(), std::cmp::Reverse(other)))
            .map(|(&other, _)| other);
        if let Some(donor) = donor {
            let candidates: Vec<NodeId> = self.groups[&donor]
                .difference(&self.groups[&gid])
                .copied()
                .collect();
            if let Some(&pick) = candidates.get(rng.gen_range(0..candidates.len().max(1))) {
                self.remove_member(donor, pick);
                self.insert_member(gid, pick);
                if self.groups[&gid].len() >= self.k {
                    return;
                }
            }
        }
        let partner = self
            .groups
            .keys()
            .copied()
            .find(|&other| other != gid && self.groups[&other].len() >= self.k);
        if let Some(partner) = partner {
            let members: Vec<NodeId> = self.groups.remove(&gid).unwrap().into_iter().collect();
            for node in members {
                self.member_of.get_mut(&node).expect("member known").remove(&gid);
                self.insert_member(partner, node);
            }
            if self.groups[&partner].len() >= 2 * self.k {
                self.split(partner, rng);
            }
            return;
        }
        let members = self.groups.remove(&gid).unwrap();
        for node in members {
            let gids = self.member_of.get_mut(&node).expect("member known");
            gids.remove(&gid);
            if gids.is_empty() {
                self.member_of.remove(&node);
                self.pending.insert(node);
            }
        }
        self.form_from_pending();
    }

    fn form_from_pending(&mut self) -> Option<GroupId> {
        if self.pending.len() < self.k {
            return None;
        }
        let members = std::mem::take(&mut self.pending);
        let gid = self.alloc_gid();
        for &m in &members {
            self.member_of.entry(m).or_default().insert(gid);
        }
        self.groups.insert(gid, members);
        Some(gid)
    }

    #[cfg(test)]
    fn assert_invariants(&self) {
        for (gid, members) in &self.groups {
            assert!(!members.is_empty(), "group {gid} must not be empty");
            assert!(
                members.len() >= self.k && members.len() < 2 * self.k,
                "group {gid} has illegal size {}",
                members.len()
            );
            for m in members {
                assert!(
                    self.member_of[m].contains(gid),
                    "{m} missing reverse link to {gid}"
                );
            }
        }
        for (node, gids) in &self.member_of {
            assert!(!gids.is_empty());
            for gid in gids {
                assert!(self.groups[gid].contains(node), "{gid} missing {node}");
            }
            assert!(!self.pending.contains(node), "{node} both grouped and pending");
        }
        assert!(self.pending.len() < self.k, "pending pool should have formed");
    }
}
