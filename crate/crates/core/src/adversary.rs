//! Passive-adversary harness: node corruption, origin estimators, and
//! precision accounting.
//!
//! The adversary corrupts a fixed fraction of nodes and watches traffic
//! arriving at them. It never injects, drops, or delays anything; its whole
//! game is to name the originator of a broadcast from delivery timestamps.
//! Estimators consume only trace records whose destination is a corrupted
//! node and produce a posterior over the honest population, from which we
//! take a point guess, an anonymity-set size, and an entropy figure.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::protocol::phase_of_wire_name;
use crate::simnet::TraceRecord;
use crate::{NodeId, Tick};

/// Picks `round(fraction * n)` distinct nodes to corrupt.
///
/// The draw shuffles the full node set and takes a prefix, so two calls with
/// identically seeded generators agree, and a larger fraction's set contains
/// a smaller fraction's set. That containment is what makes precision sweeps
/// over growing fractions comparable run by run.
pub fn select_adversaries(n: usize, fraction: f64, rng: &mut impl Rng) -> BTreeSet<NodeId> {
    assert!((0.0..=1.0).contains(&fraction), "fraction out of range");
    let take = (fraction * n as f64).round() as usize;
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(rng);
    order.truncate(take);
    order.into_iter().map(NodeId).collect()
}

/// One estimator's answer for a single run.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    /// Posterior argmax; ties break toward the lowest node id.
    pub guess: NodeId,
    /// Normalized posterior over candidate originators.
    pub posterior: BTreeMap<NodeId, f64>,
    /// Count of candidates whose posterior is within a factor of e of the
    /// maximum. A point mass yields 1; a uniform posterior yields its size.
    pub anonymity_set_size: usize,
    /// Shannon entropy of the posterior, in bits.
    pub entropy_bits: f64,
}

impl EstimateReport {
    /// Builds a report from unnormalized non-negative scores.
    ///
    /// Panics if `scores` is empty or sums to zero; every estimator path
    /// guarantees at least one positive score.
    fn from_scores(scores: BTreeMap<NodeId, f64>) -> Self {
        let total: f64 = scores.values().sum();
        assert!(total > 0.0, "estimator produced no posterior mass");
        let posterior: BTreeMap<NodeId, f64> =
            scores.into_iter().map(|(id, s)| (id, s / total)).collect();
        let mut guess = NodeId(u32::MAX);
        let mut best = f64::NEG_INFINITY;
        for (&id, &p) in &posterior {
            if p > best {
                best = p;
                guess = id;
            }
        }
        let floor = best / std::f64::consts::E;
        let anonymity_set_size = posterior
            .values()
            .filter(|&&p| p >= floor - 1e-12)
            .count();
        let entropy_bits = posterior
            .values()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.log2())
            .sum();
        EstimateReport {
            guess,
            posterior,
            anonymity_set_size,
            entropy_bits,
        }
    }

    fn point_mass(target: NodeId) -> Self {
        let mut scores = BTreeMap::new();
        scores.insert(target, 1.0);
        EstimateReport::from_scores(scores)
    }

    fn uniform(candidates: impl IntoIterator<Item = NodeId>) -> Self {
        let scores: BTreeMap<NodeId, f64> =
            candidates.into_iter().map(|id| (id, 1.0)).collect();
        EstimateReport::from_scores(scores)
    }
}

/// Which origin estimator a run is scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Exponential-decay scoring of first-delivery timestamps.
    FirstTimestamp,
    /// Uniform posterior over honest nodes; the floor any estimator must beat.
    Uniform,
    /// Insider view of the originator's send group.
    DcGroup,
}

impl Estimator {
    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::FirstTimestamp => "first_timestamp",
            Estimator::Uniform => "uniform",
            Estimator::DcGroup => "dc_group",
        }
    }
}

/// Earliest tick at which each honest source was seen delivering to a
/// corrupted node. Records with an honest destination are invisible and
/// records with a corrupted source carry no information about the origin.
fn first_seen(
    records: &[TraceRecord],
    adversaries: &BTreeSet<NodeId>,
) -> BTreeMap<NodeId, Tick> {
    let mut seen: BTreeMap<NodeId, Tick> = BTreeMap::new();
    for rec in records {
        if !adversaries.contains(&rec.dst) || adversaries.contains(&rec.src) {
            continue;
        }
        seen.entry(rec.src)
            .and_modify(|t| *t = (*t).min(rec.t))
            .or_insert(rec.t);
    }
    seen
}

/// Phase of the first record delivered to any corrupted node, or `None` if
/// the adversary saw nothing.
pub fn first_observation_phase(
    records: &[TraceRecord],
    adversaries: &BTreeSet<NodeId>,
) -> Option<usize> {
    records
        .iter()
        .filter(|rec| adversaries.contains(&rec.dst))
        .min_by_key(|rec| rec.t)
        .and_then(|rec| phase_of_wire_name(rec.kind))
}

/// Scores honest nodes by how early the adversary first saw them relaying.
///
/// A source first seen `delta` ticks after the earliest observation gets
/// weight `exp(-delta)`; the tick is the decay constant. Nodes never observed
/// get no mass. With no observations at all the posterior falls back to
/// uniform over the honest population, whose entropy is `log2(n - |adv|)`.
pub fn first_timestamp_estimate(
    records: &[TraceRecord],
    adversaries: &BTreeSet<NodeId>,
    n: usize,
) -> EstimateReport {
    let seen = first_seen(records, adversaries);
    if seen.is_empty() {
        return uniform_estimate(adversaries, n);
    }
    let t_min = seen.values().copied().min().expect("nonempty");
    let scores: BTreeMap<NodeId, f64> = seen
        .into_iter()
        .map(|(id, t)| (id, (-((t - t_min) as f64)).exp()))
        .collect();
    EstimateReport::from_scores(scores)
}

/// Uniform posterior over every honest node.
pub fn uniform_estimate(adversaries: &BTreeSet<NodeId>, n: usize) -> EstimateReport {
    let honest = (0..n as u32).map(NodeId).filter(|id| !adversaries.contains(id));
    EstimateReport::uniform(honest)
}

/// Insider estimate for a corrupted member of the originator's send group.
///
/// Share traffic is symmetric inside the group, so the insider learns exactly
/// the membership roster and nothing more: the posterior is uniform over the
/// honest members and its entropy is exactly `log2` of their count. If the
/// sender itself is corrupted, or every member is, the origin is exposed and
/// the posterior collapses to a point mass on the sender.
pub fn dc_group_estimate(
    group: &BTreeSet<NodeId>,
    adversaries: &BTreeSet<NodeId>,
    sender: NodeId,
) -> EstimateReport {
    assert!(group.contains(&sender), "sender must belong to the group");
    if adversaries.contains(&sender) {
        return EstimateReport::point_mass(sender);
    }
    let honest: Vec<NodeId> = group
        .iter()
        .copied()
        .filter(|id| !adversaries.contains(id))
        .collect();
    if honest.is_empty() {
        return EstimateReport::point_mass(sender);
    }
    EstimateReport::uniform(honest)
}

/// Runs one estimator against a finished run's trace.
pub fn estimate(
    estimator: Estimator,
    records: &[TraceRecord],
    adversaries: &BTreeSet<NodeId>,
    n: usize,
    group: Option<&BTreeSet<NodeId>>,
    sender: NodeId,
) -> EstimateReport {
    match estimator {
        Estimator::FirstTimestamp => first_timestamp_estimate(records, adversaries, n),
        Estimator::Uniform => uniform_estimate(adversaries, n),
        Estimator::DcGroup => match group {
            Some(group) => dc_group_estimate(group, adversaries, sender),
            None => uniform_estimate(adversaries, n),
        },
    }
}

/// Aggregate deanonymization quality over a batch of runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrecisionReport {
    pub runs: usize,
    /// Fraction of runs whose guess named the true originator.
    pub precision: f64,
    pub mean_anonymity_set: f64,
    pub mean_entropy_bits: f64,
    /// Runs whose first adversary observation fell in phase 0, 1, or 2.
    pub first_observation_phases: [usize; 3],
    /// Runs in which no corrupted node received anything.
    pub unobserved: usize,
}

/// Folds per-run estimates into a [`PrecisionReport`].
///
/// Each item is the run's estimate, the true originator, and the phase of the
/// adversary's first observation (`None` when it saw nothing).
pub fn evaluate<'a, I>(items: I) -> PrecisionReport
where
    I: IntoIterator<Item = (&'a EstimateReport, NodeId, Option<usize>)>,
{
    let mut runs = 0usize;
    let mut correct = 0usize;
    let mut anonymity = 0.0f64;
    let mut entropy = 0.0f64;
    let mut phases = [0usize; 3];
    let mut unobserved = 0usize;
    for (report, truth, phase) in items {
        runs += 1;
        correct += usize::from(report.guess == truth);
        anonymity += report.anonymity_set_size as f64;
        entropy += report.entropy_bits;
        match phase {
            Some(p) => phases[p] += 1,
            None => unobserved += 1,
        }
    }
    assert!(runs > 0, "evaluate needs at least one run");
    PrecisionReport {
        runs,
        precision: correct as f64 / runs as f64,
        mean_anonymity_set: anonymity / runs as f64,
        mean_entropy_bits: entropy / runs as f64,
        first_observation_phases: phases,
        unobserved,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groups::MembershipIndex;
    use crate::protocol::{self, Mode, RunParams};
    use crate::simnet::{seeded, RngPurpose, Topology};

    fn rec(t: Tick, kind: &'static str, src: u32, dst: u32) -> TraceRecord {
        TraceRecord {
            t,
            kind,
            src: NodeId(src),
            dst: NodeId(dst),
            mid: String::new(),
            size: 24,
        }
    }

    fn adv(ids: &[u32]) -> BTreeSet<NodeId> {
        ids.iter().copied().map(NodeId).collect()
    }

    #[test]
    fn selection_is_sized_seeded_and_nested() {
        let mut rng = seeded(7, RngPurpose::Adversary);
        assert!(select_adversaries(50, 0.0, &mut rng).is_empty());

        let mut a = seeded(7, RngPurpose::Adversary);
        let mut b = seeded(7, RngPurpose::Adversary);
        let small = select_adversaries(1000, 0.05, &mut a);
        let large = select_adversaries(1000, 0.2, &mut b);
        assert_eq!(small.len(), 50);
        assert_eq!(large.len(), 200);
        assert!(small.is_subset(&large));

        let mut c = seeded(7, RngPurpose::Adversary);
        assert_eq!(large, select_adversaries(1000, 0.2, &mut c));
        let mut d = seeded(8, RngPurpose::Adversary);
        assert_ne!(large, select_adversaries(1000, 0.2, &mut d));
    }

    #[test]
    fn no_observation_falls_back_to_uniform_over_honest() {
        let adversaries = adv(&[3, 4]);
        let report = first_timestamp_estimate(&[], &adversaries, 10);
        assert_eq!(report.posterior.len(), 8);
        assert_eq!(report.anonymity_set_size, 8);
        assert!((report.entropy_bits - 8f64.log2()).abs() < 1e-12);
        assert_eq!(report.guess, NodeId(0));
        let mass: f64 = report.posterior.values().sum();
        assert!((mass - 1.0).abs() < 1e-12);
        assert_eq!(
            first_observation_phase(&[], &adversaries),
            None
        );
    }

    #[test]
    fn watcher_down_a_line_blames_its_nearest_honest_neighbor() {
        let adversaries = adv(&[5]);
        let records = vec![
            rec(1, "flood", 0, 1),
            rec(2, "flood", 1, 2),
            rec(3, "flood", 2, 3),
            rec(4, "flood", 3, 4),
            rec(5, "flood", 4, 5),
            rec(6, "flood", 5, 6),
        ];
        let report = first_timestamp_estimate(&records, &adversaries, 7);
        assert_eq!(report.guess, NodeId(4));
        assert_eq!(report.posterior.len(), 1);
        assert_eq!(report.anonymity_set_size, 1);
        assert_eq!(report.entropy_bits, 0.0);
    }

    #[test]
    fn corrupt_neighbors_of_the_origin_identify_it() {
        let adversaries = adv(&[2, 4]);
        let records = vec![
            rec(1, "flood", 3, 2),
            rec(1, "flood", 3, 4),
            rec(2, "flood", 2, 1),
            rec(3, "flood", 1, 0),
            rec(3, "flood", 1, 2),
        ];
        let report = first_timestamp_estimate(&records, &adversaries, 5);
        assert_eq!(report.guess, NodeId(3));
        assert!(report.posterior[&NodeId(3)] > report.posterior[&NodeId(1)]);
    }

    #[test]
    fn deliveries_to_honest_nodes_are_invisible() {
        let adversaries = adv(&[6]);
        let records = vec![
            rec(1, "flood", 0, 1),
            rec(2, "flood", 1, 6),
            rec(9, "flood", 2, 6),
        ];
        let report = first_timestamp_estimate(&records, &adversaries, 7);
        assert_eq!(report.guess, NodeId(1));
        assert!(!report.posterior.contains_key(&NodeId(0)));
        let expected = 1.0 / (1.0 + (-7.0f64).exp());
        assert!((report.posterior[&NodeId(1)] - expected).abs() < 1e-12);
    }

    #[test]
    fn decay_scores_drop_by_e_per_tick_and_bound_the_anonymity_set() {
        let adversaries = adv(&[9]);
        let records = vec![
            rec(5, "flood", 1, 9),
            rec(6, "flood", 2, 9),
            rec(8, "flood", 3, 9),
        ];
        let report = first_timestamp_estimate(&records, &adversaries, 10);
        let p1 = report.posterior[&NodeId(1)];
        let p2 = report.posterior[&NodeId(2)];
        let p3 = report.posterior[&NodeId(3)];
        assert!((p1 / p2 - std::f64::consts::E).abs() < 1e-9);
        assert!((p1 / p3 - std::f64::consts::E.powi(3)).abs() < 1e-6);
        assert_eq!(report.anonymity_set_size, 2);
        assert_eq!(report.guess, NodeId(1));
    }

    #[test]
    fn group_insider_learns_only_the_honest_roster() {
        let group = adv(&[10, 11, 12, 13, 14]);
        let adversaries = adv(&[11, 13]);
        let report = dc_group_estimate(&group, &adversaries, NodeId(12));
        assert_eq!(report.posterior.len(), 3);
        for id in [10, 12, 14] {
            assert!((report.posterior[&NodeId(id)] - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(report.guess, NodeId(10));
        assert_eq!(report.anonymity_set_size, 3);
        assert!((report.entropy_bits - 3f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn corrupt_or_isolated_senders_are_exposed() {
        let group = adv(&[10, 11, 12, 13, 14]);
        let report = dc_group_estimate(&group, &adv(&[11, 13]), NodeId(13));
        assert_eq!(report.guess, NodeId(13));
        assert_eq!(report.anonymity_set_size, 1);
        assert_eq!(report.entropy_bits, 0.0);

        let all = adv(&[10, 11, 12, 13, 14]);
        let report = dc_group_estimate(&group, &all, NodeId(12));
        assert_eq!(report.guess, NodeId(12));
        assert_eq!(report.entropy_bits, 0.0);
    }

    #[test]
    fn first_observation_phase_tracks_the_earliest_visible_record() {
        let adversaries = adv(&[4]);
        let records = vec![
            rec(3, "diffusion_spread", 2, 4),
            rec(5, "flood", 1, 4),
            rec(1, "dc_share", 0, 3),
        ];
        assert_eq!(first_observation_phase(&records, &adversaries), Some(1));
        let records = vec![rec(2, "dc_share", 0, 4), rec(3, "flood", 1, 4)];
        assert_eq!(first_observation_phase(&records, &adversaries), Some(0));
    }

    #[test]
    fn evaluate_averages_the_batch() {
        let a = EstimateReport::point_mass(NodeId(1));
        let b = EstimateReport::uniform([NodeId(0), NodeId(1)]);
        let c = EstimateReport::uniform((0..4).map(NodeId));
        let report = evaluate([
            (&a, NodeId(1), Some(2)),
            (&b, NodeId(1), Some(2)),
            (&c, NodeId(3), None),
        ]);
        assert_eq!(report.runs, 3);
        assert!((report.precision - 1.0 / 3.0).abs() < 1e-12);
        assert!((report.mean_anonymity_set - (1.0 + 2.0 + 4.0) / 3.0).abs() < 1e-12);
        assert!((report.mean_entropy_bits - (0.0 + 1.0 + 2.0) / 3.0).abs() < 1e-12);
        assert_eq!(report.first_observation_phases, [0, 0, 2]);
        assert_eq!(report.unobserved, 1);
    }

    #[test]
    fn flood_precision_grows_with_the_corrupted_fraction() {
        let n = 100;
        let trials = 40u64;
        let fractions = [0.05, 0.1, 0.2, 0.35];
        let mut correct = [0usize; 4];
        for trial in 0..trials {
            let seed = 9000 + trial;
            let topology = Topology::regular(n, 4, &mut seeded(seed, RngPurpose::Topology))
                .expect("regular graph");
            let membership = MembershipIndex::bootstrap(
                n as u32,
                5,
                1,
                &mut seeded(seed, RngPurpose::Schedule),
            );
            let widest = select_adversaries(
                n,
                *fractions.last().expect("nonempty"),
                &mut seeded(seed, RngPurpose::Adversary),
            );
            let origin = (0..n as u32)
                .map(NodeId)
                .find(|id| !widest.contains(id))
                .expect("someone stays honest");
            let report = protocol::run(&RunParams {
                topology: &topology,
                membership: &membership,
                mode: Mode::FloodOnly,
                d_max: 0,
                round_interval: 8,
                schedule: crate::diffusion::AlphaSchedule::Harmonic,
                message: b"monotone".to_vec(),
                origin,
                master_seed: seed,
                event_budget: crate::simnet::DEFAULT_EVENT_BUDGET,
                collect_trace: true,
                preload: Vec::new(),
            })
            .expect("run");
            let records = report.trace.records();
            for (slot, &fraction) in fractions.iter().enumerate() {
                let adversaries = select_adversaries(
                    n,
                    fraction,
                    &mut seeded(seed, RngPurpose::Adversary),
                );
                let estimate = first_timestamp_estimate(&records, &adversaries, n);
                correct[slot] += usize::from(estimate.guess == origin);
            }
        }
        for pair in correct.windows(2) {
            assert!(
                pair[1] >= pair[0],
                "precision counts not monotone: {correct:?}"
            );
        }
        assert!(correct[3] > correct[0], "watching a third of the network should beat 5%");
    }
}
