//! Set partitions, dissections of ordered sets, and cumulants of operator
//! semigroups.

use crate::error::{Error, Result};
use crate::operators::{Direction, Dynamics, SubsetSelector};
use crate::sector::sector_len;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Enumeration cap on the number of labels.
pub const MAX_LABELS: usize = 8;

/// One element of a cumulant's index set: either a merged cluster of slots,
/// evolved as a unit, or a single slot. Slot 0 is the tracer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClusterLabel {
    Merged(Vec<usize>),
    Single(usize),
}

impl ClusterLabel {
    pub fn slots(&self) -> Vec<usize> {
        match self {
            ClusterLabel::Merged(s) => s.clone(),
            ClusterLabel::Single(i) => vec![*i],
        }
    }

    pub fn selector(&self) -> Result<SubsetSelector> {
        SubsetSelector::from_slots(&self.slots())
    }
}

/// Blocks of element indices. Blocks are listed by their smallest element.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Partition {
    pub blocks: Vec<Vec<usize>>,
}

/// Ordered parts of element indices; each part is increasing.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Dissection {
    pub parts: Vec<Vec<usize>>,
}

/// How "dissections into linearly ordered subsets" are enumerated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DissectionRule {
    /// Splits into consecutive intervals.
    #[default]
    Consecutive,
    /// Ordered set partitions: any blocks, blocks in any order.
    OrderedSetPartition,
}

fn check_cap(n: usize) -> Result<()> {
    if n > MAX_LABELS {
        return Err(Error::CapExceeded {
            what: "labels",
            value: n,
            cap: MAX_LABELS,
        });
    }
    Ok(())
}

/// All set partitions of `0..n` via restricted-growth strings, in
/// lexicographic order of the strings.
pub fn partitions(n: usize) -> Result<Vec<Partition>> {
    check_cap(n)?;
    if n == 0 {
        return Ok(vec![Partition { blocks: Vec::new() }]);
    }
    let mut out = Vec::new();
    let mut a = vec![0usize; n];
    loop {
        let k = a.iter().max().copied().unwrap_or(0) + 1;
        let mut blocks = vec![Vec::new(); k];
        for (i, &b) in a.iter().enumerate() {
            blocks[b].push(i);
        }
        out.push(Partition { blocks });
        // Next restricted-growth string: a[i] <= 1 + max(a[..i]).
        let mut i = n - 1;
        loop {
            if i == 0 {
                return Ok(out);
            }
            let prefix_max = a[..i].iter().max().copied().unwrap_or(0);
            if a[i] <= prefix_max {
                a[i] += 1;
                a[i + 1..].iter_mut().for_each(|v| *v = 0);
                break;
            }
            i -= 1;
        }
    }
}

/// Partitions of a list of labels.
pub fn enumerate_partitions<T: Clone>(elements: &[T]) -> Result<Vec<Vec<Vec<T>>>> {
    Ok(partitions(elements.len())?
        .into_iter()
        .map(|p| {
            p.blocks
                .iter()
                .map(|b| b.iter().map(|&i| elements[i].clone()).collect())
                .collect()
        })
        .collect())
}

fn compositions(n: usize, max_parts: usize) -> Vec<Dissection> {
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    // Bit i of `cuts` set means a cut after element i.
    for cuts in 0u32..(1 << (n - 1)) {
        if cuts.count_ones() as usize + 1 > max_parts {
            continue;
        }
        let mut parts = vec![vec![0]];
        for i in 1..n {
            if cuts & (1 << (i - 1)) != 0 {
                parts.push(Vec::new());
            }
            parts.last_mut().expect("nonempty").push(i);
        }
        out.push(Dissection { parts });
    }
    out
}

fn ordered_set_partitions(n: usize, max_parts: usize) -> Result<Vec<Dissection>> {
    let mut out = Vec::new();
    if n == 0 {
        return Ok(out);
    }
    for p in partitions(n)? {
        if p.blocks.len() > max_parts {
            continue;
        }
        for perm in crate::sector::permutations(p.blocks.len()) {
            out.push(Dissection {
                parts: perm.iter().map(|&k| p.blocks[k].clone()).collect(),
            });
        }
    }
    Ok(out)
}

/// Dissections of `0..n` into at most `max_parts` nonempty parts.
pub fn dissections(n: usize, max_parts: usize, rule: DissectionRule) -> Result<Vec<Dissection>> {
    check_cap(n)?;
    match rule {
        DissectionRule::Consecutive => Ok(compositions(n, max_parts)),
        DissectionRule::OrderedSetPartition => ordered_set_partitions(n, max_parts),
    }
}

pub fn enumerate_dissections<T: Clone>(
    elements: &[T],
    max_parts: usize,
    rule: DissectionRule,
) -> Result<Vec<Vec<Vec<T>>>> {
    Ok(dissections(elements.len(), max_parts, rule)?
        .into_iter()
        .map(|d| {
            d.parts
                .iter()
                .map(|b| b.iter().map(|&i| elements[i].clone()).collect())
                .collect()
        })
        .collect())
}

/// `(-1)^{k-1} (k-1)!`.
pub fn mobius_coefficient(blocks: usize) -> f64 {
    let k = blocks.max(1);
    let fact: f64 = (1..k).map(|i| i as f64).product();
    if k % 2 == 1 {
        fact
    } else {
        -fact
    }
}

fn union_selector(labels: &[&SubsetSelector]) -> Result<SubsetSelector> {
    let slots: Vec<usize> = labels.iter().flat_map(|l| l.slots()).collect();
    SubsetSelector::from_slots(&slots)
}

fn check_labels(labels: &[SubsetSelector], s: usize) -> Result<()> {
    check_cap(labels.len())?;
    if labels.is_empty() {
        return Err(Error::Invalid("cumulant needs at least one label".into()));
    }
    for (a, la) in labels.iter().enumerate() {
        la.check(s)?;
        for lb in &labels[a + 1..] {
            if !la.is_disjoint(lb) {
                return Err(Error::Overlap(format!("{la:?} and {lb:?}")));
            }
        }
    }
    Ok(())
}

/// Cumulant of the semigroup over a list of disjoint slot clusters:
/// `sum_P (-1)^{|P|-1} (|P|-1)! prod_{B in P} e^{t L(theta(B))}`.
pub fn cumulant(
    dynamics: &Dynamics,
    direction: Direction,
    t: f64,
    s: usize,
    labels: &[SubsetSelector],
) -> Result<DMatrix<f64>> {
    check_labels(labels, s)?;
    if labels.len() == 1 {
        return Ok((*dynamics.semigroup(&labels[0], s, direction, t)?).clone());
    }
    let dim = sector_len(dynamics.n_states(), s);
    let mut acc = DMatrix::<f64>::zeros(dim, dim);
    for p in partitions(labels.len())? {
        let parts = p
            .blocks
            .iter()
            .map(|b| union_selector(&b.iter().map(|&i| &labels[i]).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let prod = dynamics.partition_semigroup(&parts, s, direction, t)?;
        acc += prod * mobius_coefficient(p.blocks.len());
    }
    Ok(acc)
}

fn labels_for(cluster: &SubsetSelector, singles: &[usize]) -> Result<Vec<SubsetSelector>> {
    let mut labels = vec![cluster.clone()];
    for &i in singles {
        labels.push(SubsetSelector::from_slots(&[i])?);
    }
    Ok(labels)
}

/// `A_{1+|X|}(t, {cluster}, X)` for the forward semigroups on the `1+s` sector.
pub fn forward_cumulant(
    dynamics: &Dynamics,
    t: f64,
    s: usize,
    cluster: &SubsetSelector,
    singles: &[usize],
) -> Result<DMatrix<f64>> {
    cumulant(dynamics, Direction::Forward, t, s, &labels_for(cluster, singles)?)
}

/// Same as [`forward_cumulant`] with the dual semigroups.
pub fn dual_cumulant(
    dynamics: &Dynamics,
    t: f64,
    s: usize,
    cluster: &SubsetSelector,
    singles: &[usize],
) -> Result<DMatrix<f64>> {
    cumulant(dynamics, Direction::Dual, t, s, &labels_for(cluster, singles)?)
}

/// Rebuilds `e^{t L}` on the `1+s` sector from the cumulants of the labels
/// `({tracer, 1..s-n}, s-n+1, ..., s)` and returns the max entrywise
/// deviation from the directly exponentiated semigroup.
pub fn verify_cluster_expansion(
    dynamics: &Dynamics,
    direction: Direction,
    t: f64,
    s: usize,
    n: usize,
) -> Result<f64> {
    if n > s {
        return Err(Error::Invalid(format!("{n} singles exceed {s} environment slots")));
    }
    check_cap(n + 1)?;
    let merged = SubsetSelector::new(true, 1..=(s - n))?;
    let singles: Vec<usize> = ((s - n + 1)..=s).collect();
    let labels = labels_for(&merged, &singles)?;
    let dim = sector_len(dynamics.n_states(), s);
    let mut cache: HashMap<Vec<usize>, DMatrix<f64>> = HashMap::new();
    let mut rebuilt = DMatrix::<f64>::zeros(dim, dim);
    for p in partitions(labels.len())? {
        let mut prod = DMatrix::<f64>::identity(dim, dim);
        for block in &p.blocks {
            if !cache.contains_key(block) {
                let sub: Vec<SubsetSelector> = block.iter().map(|&i| labels[i].clone()).collect();
                cache.insert(block.clone(), cumulant(dynamics, direction, t, s, &sub)?);
            }
            prod = &cache[block] * prod;
        }
        rebuilt += prod;
    }
    let full = dynamics.semigroup(&SubsetSelector::full(s), s, direction, t)?;
    Ok((rebuilt - &*full).abs().max())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, RateTable};
    use crate::operators::tests::random_model;
    use proptest::prelude::*;

    /// Independent count: partitions of n by recursion on the block of the
    /// last element.
    fn bell_recursive(n: usize) -> usize {
        fn choose(n: usize, k: usize) -> usize {
            (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
        }
        (0..n).fold(vec![1usize], |mut b, m| {
            b.push((0..=m).map(|k| choose(m, k) * b[k]).sum());
            b
        })[n]
    }

    #[test]
    fn bell_numbers() {
        assert_eq!(partitions(1).unwrap().len(), 1);
        assert_eq!(partitions(3).unwrap().len(), 5);
        assert_eq!(partitions(5).unwrap().len(), 52);
        for n in 0..=8 {
            assert_eq!(partitions(n).unwrap().len(), bell_recursive(n));
        }
        assert!(matches!(partitions(9), Err(Error::CapExceeded { .. })));
    }

    #[test]
    fn partitions_are_distinct_and_cover() {
        let ps = partitions(5).unwrap();
        let set: std::collections::HashSet<_> = ps.iter().cloned().collect();
        assert_eq!(set.len(), ps.len());
        for p in &ps {
            let mut all: Vec<usize> = p.blocks.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..5).collect::<Vec<_>>());
            assert!(p.blocks.iter().all(|b| !b.is_empty()));
        }
    }

    /// Exhaustive oracle: every assignment of elements to part labels
    /// `0..k`, kept when all parts are nonempty and, for the consecutive
    /// rule, when part labels are nondecreasing along the order.
    fn dissection_oracle(n: usize, cap: usize, consecutive: bool) -> usize {
        let mut count = 0;
        for k in 1..=cap.min(n) {
            for code in 0..k.pow(n as u32) {
                let digits: Vec<usize> = (0..n).map(|i| code / k.pow(i as u32) % k).collect();
                if (0..k).any(|p| !digits.contains(&p)) {
                    continue;
                }
                if consecutive && digits.windows(2).any(|w| w[1] < w[0]) {
                    continue;
                }
                count += 1;
            }
        }
        count
    }

    #[test]
    fn dissection_counts() {
        for rule in [DissectionRule::Consecutive, DissectionRule::OrderedSetPartition] {
            assert_eq!(dissections(1, 1, rule).unwrap().len(), 1);
            assert_eq!(dissections(1, 4, rule).unwrap().len(), 1);
            assert_eq!(dissections(4, 1, rule).unwrap().len(), 1);
        }
        for n in 1..=5 {
            for cap in 1..=n {
                assert_eq!(
                    dissections(n, cap, DissectionRule::Consecutive).unwrap().len(),
                    dissection_oracle(n, cap, true)
                );
                assert_eq!(
                    dissections(n, cap, DissectionRule::OrderedSetPartition).unwrap().len(),
                    dissection_oracle(n, cap, false)
                );
            }
        }
        // Frozen from the oracle above.
        assert_eq!(dissections(3, 3, DissectionRule::Consecutive).unwrap().len(), 4);
        assert_eq!(dissections(3, 3, DissectionRule::OrderedSetPartition).unwrap().len(), 13);
        assert!(dissections(9, 2, DissectionRule::Consecutive).is_err());
    }

    #[test]
    fn consecutive_parts_concatenate() {
        for d in dissections(5, 3, DissectionRule::Consecutive).unwrap() {
            let flat: Vec<usize> = d.parts.concat();
            assert_eq!(flat, (0..5).collect::<Vec<_>>());
            assert!(d.parts.len() <= 3);
        }
    }

    /// Möbius function of the partition lattice, `mu(P, top)`, by the
    /// defining recursion over coarsenings.
    fn lattice_mobius(n: usize) -> Vec<(Partition, f64)> {
        let ps = partitions(n).unwrap();
        let refines = |a: &Partition, b: &Partition| {
            a.blocks
                .iter()
                .all(|ba| b.blocks.iter().any(|bb| ba.iter().all(|x| bb.contains(x))))
        };
        let mut order: Vec<usize> = (0..ps.len()).collect();
        order.sort_by_key(|&i| ps[i].blocks.len());
        let mut mu = vec![0.0; ps.len()];
        for &i in &order {
            if ps[i].blocks.len() == 1 {
                mu[i] = 1.0;
                continue;
            }
            let mut acc = 0.0;
            for &j in &order {
                if j != i && ps[j].blocks.len() < ps[i].blocks.len() && refines(&ps[i], &ps[j]) {
                    acc += mu[j];
                }
            }
            mu[i] = -acc;
        }
        ps.into_iter().zip(mu).collect()
    }

    #[test]
    fn mobius_matches_lattice() {
        for n in 1..=5 {
            for (p, mu) in lattice_mobius(n) {
                assert_eq!(mobius_coefficient(p.blocks.len()), mu, "{p:?}");
            }
        }
    }

    #[test]
    fn first_order_cumulants_are_semigroups() {
        let d = Dynamics::new(ModelSpec::tiny(0.1, 1));
        let a1 = forward_cumulant(&d, 0.4, 0, &SubsetSelector::tracer_only(), &[]).unwrap();
        let e = d
            .semigroup(&SubsetSelector::tracer_only(), 0, Direction::Forward, 0.4)
            .unwrap();
        assert_eq!(a1, *e);
        let a1d = dual_cumulant(&d, 0.4, 0, &SubsetSelector::tracer_only(), &[]).unwrap();
        let ed = d
            .semigroup(&SubsetSelector::tracer_only(), 0, Direction::Dual, 0.4)
            .unwrap();
        assert_eq!(a1d, *ed);
    }

    #[test]
    fn second_order_two_term_formula() {
        let d = Dynamics::new(ModelSpec::tiny(0.1, 1));
        let tr = SubsetSelector::tracer_only();
        let env = SubsetSelector::env_slot(1).unwrap();
        let full = SubsetSelector::full(1);
        for dir in [Direction::Forward, Direction::Dual] {
            let a2 = cumulant(&d, dir, 0.7, 1, &[tr.clone(), env.clone()]).unwrap();
            let direct = &*d.semigroup(&full, 1, dir, 0.7).unwrap()
                - &*d.semigroup(&tr, 1, dir, 0.7).unwrap() * &*d.semigroup(&env, 1, dir, 0.7).unwrap();
            assert!((&a2 - &direct).abs().max() <= 1e-12);
            assert!(a2.abs().max() > 1e-4);
            let at0 = cumulant(&d, dir, 0.0, 1, &[tr.clone(), env.clone()]).unwrap();
            assert!(at0.abs().max() == 0.0);
        }
        let d0 = Dynamics::new(ModelSpec::tiny(0.0, 1));
        let a2 = forward_cumulant(&d0, 0.7, 1, &tr, &[1]).unwrap();
        assert!(a2.abs().max() <= 1e-15);
    }

    #[test]
    fn overlapping_labels_rejected() {
        let d = Dynamics::new(ModelSpec::tiny(0.1, 2));
        let r = forward_cumulant(&d, 0.4, 2, &SubsetSelector::full(1), &[1]);
        assert!(matches!(r, Err(Error::Overlap(_))));
    }

    #[test]
    fn cluster_expansion_tiny_and_random() {
        let d = Dynamics::new(ModelSpec::tiny(0.1, 1));
        assert_eq!(verify_cluster_expansion(&d, Direction::Forward, 0.5, 1, 0).unwrap(), 0.0);
        assert!(verify_cluster_expansion(&d, Direction::Forward, 0.5, 1, 1).unwrap() <= 1e-10);
        let r = Dynamics::new(random_model(2, 0.3, 2, 21));
        for dir in [Direction::Forward, Direction::Dual] {
            assert!(verify_cluster_expansion(&r, dir, 0.3, 2, 2).unwrap() <= 1e-9);
        }
    }

    #[test]
    fn factorized_dynamics_kill_mixed_cumulants() {
        let mut m = random_model(2, 0.0, 3, 4);
        m.rate_env2 = RateTable::constant(2, 2, 0.0);
        let d = Dynamics::new(m);
        let tr = SubsetSelector::tracer_only();
        for (s, singles) in [(2usize, vec![1usize, 2]), (3, vec![2, 3]), (3, vec![1, 2, 3])] {
            let cluster = if singles.len() == s {
                tr.clone()
            } else {
                SubsetSelector::new(true, 1..=(s - singles.len())).unwrap()
            };
            for dir in [Direction::Forward, Direction::Dual] {
                let a = cumulant(
                    &d,
                    dir,
                    0.9,
                    s,
                    &labels_for(&cluster, &singles).unwrap(),
                )
                .unwrap();
                assert!(a.abs().max() <= 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn cluster_expansion_inverts_cumulants(seed in 0u64..1000, t in 0.05f64..1.5, eps in 0.0f64..1.0) {
            let d = Dynamics::new(random_model(2, eps, 3, seed));
            for (s, n) in [(1, 1), (2, 1), (2, 2), (3, 1)] {
                let r = verify_cluster_expansion(&d, Direction::Forward, t, s, n).unwrap();
                prop_assert!(r <= 1e-9, "s={} n={} residual {}", s, n, r);
            }
        }

        #[test]
        fn higher_cumulants_vanish_at_zero(seed in 0u64..1000) {
            let d = Dynamics::new(random_model(2, 0.5, 2, seed));
            let a = dual_cumulant(&d, 0.0, 2, &SubsetSelector::tracer_only(), &[1, 2]).unwrap();
            prop_assert!(a.abs().max() <= 1e-15);
        }
    }
}
