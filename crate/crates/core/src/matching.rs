//! Monthly random pairing of consumers with prosumers and per-cycle
//! selection of the users that aggregate total deviations.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use thiserror::Error;

use crate::market::{Role, UserId};
use crate::rng;

pub const AGGREGATORS_PER_ROLE: usize = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MatchingError {
    #[error("no {} in the population", .0.as_str())]
    EmptyRole(Role),
    #[error("{user} listed among the {} ids", .expected.as_str())]
    WrongRole { user: UserId, expected: Role },
    #[error("{0} listed twice")]
    DuplicateUser(UserId),
}

/// `M(u)` for every user, fixed for one billing period.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchMap {
    pub forward: BTreeMap<UserId, Vec<UserId>>,
    pub period_id: u64,
}

impl MatchMap {
    pub fn matches(&self, user: UserId) -> &[UserId] {
        self.forward.get(&user).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Users that receive copies of `user`'s data: `user` itself, then `M(user)`.
    pub fn recipients(&self, user: UserId) -> impl Iterator<Item = UserId> + '_ {
        std::iter::once(user).chain(self.matches(user).iter().copied())
    }

    /// Each matched (consumer, prosumer) pair once, consumer first.
    pub fn pairs(&self) -> Vec<(UserId, UserId)> {
        self.forward
            .iter()
            .filter(|(u, _)| u.is_consumer())
            .flat_map(|(&c, ps)| ps.iter().map(move |&p| (c, p)))
            .collect()
    }

    /// Plain-text dump for the run report.
    pub fn render(&self) -> String {
        let mut out = format!("period {}\n", self.period_id);
        for (user, list) in &self.forward {
            let list: Vec<String> = list.iter().map(UserId::to_string).collect();
            let _ = writeln!(out, "{user} -> {}", list.join(","));
        }
        out
    }
}

fn check_role(ids: &[UserId], role: Role) -> Result<(), MatchingError> {
    if ids.is_empty() {
        return Err(MatchingError::EmptyRole(role));
    }
    if let Some(&user) = ids.iter().find(|u| u.role != role) {
        return Err(MatchingError::WrongRole {
            user,
            expected: role,
        });
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(MatchingError::DuplicateUser(w[0]));
    }
    Ok(())
}

/// Shuffles both roles and deals the larger one round-robin onto the
/// smaller one. Larger-role users get exactly one match; smaller-role
/// list lengths differ by at most one.
pub fn match_users(
    consumers: &[UserId],
    prosumers: &[UserId],
    period_id: u64,
    seed: u64,
) -> Result<MatchMap, MatchingError> {
    check_role(consumers, Role::Consumer)?;
    check_role(prosumers, Role::Prosumer)?;
    let mut rng = rng::stream(seed, "matching", &[period_id]);
    let mut cs = consumers.to_vec();
    let mut ps = prosumers.to_vec();
    cs.sort();
    ps.sort();
    cs.shuffle(&mut rng);
    ps.shuffle(&mut rng);
    let (small, large) = if cs.len() <= ps.len() { (cs, ps) } else { (ps, cs) };

    let mut forward: BTreeMap<UserId, Vec<UserId>> = BTreeMap::new();
    for (i, &u) in large.iter().enumerate() {
        let partner = small[i % small.len()];
        forward.insert(u, vec![partner]);
        forward.entry(partner).or_default().push(u);
    }
    for list in forward.values_mut() {
        list.sort();
    }
    Ok(MatchMap { forward, period_id })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AggregatorSet {
    pub consumers: Vec<UserId>,
    pub prosumers: Vec<UserId>,
    pub cycle: u64,
}

impl AggregatorSet {
    pub fn for_role(&self, role: Role) -> &[UserId] {
        match role {
            Role::Consumer => &self.consumers,
            Role::Prosumer => &self.prosumers,
        }
    }
}

/// Draws `min(3, population)` users of each role without replacement.
pub fn select_aggregators(
    consumers: &[UserId],
    prosumers: &[UserId],
    cycle: u64,
    seed: u64,
) -> Result<AggregatorSet, MatchingError> {
    check_role(consumers, Role::Consumer)?;
    check_role(prosumers, Role::Prosumer)?;
    let mut rng = rng::stream(seed, "aggregators", &[cycle]);
    let mut pick = |ids: &[UserId]| {
        let mut sorted = ids.to_vec();
        sorted.sort();
        let mut chosen: Vec<UserId> = sorted
            .choose_multiple(&mut rng, AGGREGATORS_PER_ROLE.min(ids.len()))
            .copied()
            .collect();
        chosen.sort();
        chosen
    };
    let consumers = pick(consumers);
    let prosumers = pick(prosumers);
    Ok(AggregatorSet {
        consumers,
        prosumers,
        cycle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::population;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn assert_invariants(map: &MatchMap, cs: &[UserId], ps: &[UserId]) {
        assert_eq!(map.forward.len(), cs.len() + ps.len());
        for (u, list) in &map.forward {
            assert!(!list.is_empty(), "{u} unmatched");
            assert!(list.iter().all(|m| m.role == u.role.opposite()));
            for m in list {
                assert!(map.matches(*m).contains(u), "{u} -> {m} not symmetric");
            }
        }
        for ids in [cs, ps] {
            let lens: Vec<usize> = ids.iter().map(|u| map.matches(*u).len()).collect();
            assert!(lens.iter().max().unwrap() - lens.iter().min().unwrap() <= 1);
        }
        if cs.len() == ps.len() {
            assert!(map.forward.values().all(|l| l.len() == 1));
        }
        assert_eq!(map.pairs().len(), cs.len().max(ps.len()));
    }

    #[test]
    fn equal_populations_give_a_perfect_matching() {
        let (cs, ps) = population(2, 2);
        let map = match_users(&cs, &ps, 0, 9).unwrap();
        assert_invariants(&map, &cs, &ps);
        let partners: BTreeSet<UserId> = cs.iter().map(|c| map.matches(*c)[0]).collect();
        assert_eq!(partners.len(), 2);
    }

    #[test]
    fn single_prosumer_takes_all_consumers() {
        let (cs, ps) = population(3, 1);
        let map = match_users(&cs, &ps, 0, 4).unwrap();
        assert_eq!(map.matches(ps[0]), &cs[..]);
        for c in &cs {
            assert_eq!(map.matches(*c), &ps[..]);
        }
    }

    #[test]
    fn bad_populations_are_configuration_errors() {
        let (cs, ps) = population(2, 0);
        assert_eq!(
            match_users(&cs, &ps, 0, 1),
            Err(MatchingError::EmptyRole(Role::Prosumer))
        );
        assert!(matches!(
            match_users(&cs, &cs, 0, 1),
            Err(MatchingError::WrongRole { .. })
        ));
        let dup = vec![UserId::prosumer(0), UserId::prosumer(0)];
        assert!(matches!(
            match_users(&cs, &dup, 0, 1),
            Err(MatchingError::DuplicateUser(_))
        ));
        assert!(select_aggregators(&cs, &ps, 0, 1).is_err());
    }

    #[test]
    fn matching_depends_on_seed_and_period() {
        let (cs, ps) = population(20, 20);
        let a = match_users(&cs, &ps, 0, 1).unwrap();
        assert_eq!(a, match_users(&cs, &ps, 0, 1).unwrap());
        assert_ne!(a.forward, match_users(&cs, &ps, 0, 2).unwrap().forward);
        assert_ne!(a.forward, match_users(&cs, &ps, 1, 1).unwrap().forward);
    }

    #[test]
    fn aggregator_sizes_follow_population() {
        let (cs, ps) = population(250, 250);
        let set = select_aggregators(&cs, &ps, 17, 7).unwrap();
        assert_eq!((set.consumers.len(), set.prosumers.len()), (3, 3));
        assert_eq!(set, select_aggregators(&cs, &ps, 17, 7).unwrap());
        let (cs, ps) = population(2, 2);
        let set = select_aggregators(&cs, &ps, 0, 7).unwrap();
        assert_eq!((set.consumers, set.prosumers), (cs, ps));
    }

    #[test]
    fn aggregator_selection_reaches_everyone() {
        let (cs, ps) = population(10, 7);
        let mut seen = BTreeSet::new();
        for cycle in 0..200 {
            let set = select_aggregators(&cs, &ps, cycle, 3).unwrap();
            seen.extend(set.consumers);
            seen.extend(set.prosumers);
        }
        assert_eq!(seen.len(), 17);
    }

    proptest! {
        #[test]
        fn random_populations_satisfy_match_invariants(n_c in 1u32..=50, n_p in 1u32..=50, seed: u64) {
            let (cs, ps) = population(n_c, n_p);
            let map = match_users(&cs, &ps, 0, seed).unwrap();
            assert_invariants(&map, &cs, &ps);
        }

        #[test]
        fn aggregators_are_distinct_members(n_c in 1u32..=50, n_p in 1u32..=50, cycle: u64, seed: u64) {
            let (cs, ps) = population(n_c, n_p);
            let set = select_aggregators(&cs, &ps, cycle, seed).unwrap();
            prop_assert_eq!(set.consumers.len(), (n_c as usize).min(3));
            prop_assert_eq!(set.prosumers.len(), (n_p as usize).min(3));
            prop_assert!(set.consumers.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(set.prosumers.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(set.consumers.iter().all(|u| u.is_consumer() && u.ordinal < n_c));
            prop_assert!(set.prosumers.iter().all(|u| !u.is_consumer() && u.ordinal < n_p));
        }
    }
}
