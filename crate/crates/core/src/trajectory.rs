//! Demonstrated trajectories, possibly with missing segments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{ActionId, DestinationSet, Mdp, StateId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObservedStep {
    pub state: StateId,
    pub action: ActionId,
}

impl ObservedStep {
    pub fn new(state: usize, action: usize) -> Self {
        ObservedStep { state: StateId(state), action: ActionId(action) }
    }
}

/// Either a run of observed state-action pairs or a missing stretch between
/// the last observed state `u` (whose action is unobserved) and the next
/// observed state `v`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Observed(Vec<ObservedStep>),
    Gap { u: StateId, v: StateId },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub origin: StateId,
    pub dest: StateId,
    pub segments: Vec<Segment>,
}

/// A missing segment `(u, v)` tagged with the trajectory it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MissingPair {
    pub u: StateId,
    pub v: StateId,
    pub group: usize,
}

impl Trajectory {
    /// A fully observed trajectory. `steps` must end with the action that
    /// enters `dest`.
    pub fn complete(origin: StateId, dest: StateId, steps: Vec<ObservedStep>) -> Self {
        let segments = if steps.is_empty() { Vec::new() } else { vec![Segment::Observed(steps)] };
        Trajectory { origin, dest, segments }
    }

    pub fn steps(&self) -> impl Iterator<Item = &ObservedStep> {
        self.segments.iter().flat_map(|seg| match seg {
            Segment::Observed(steps) => steps.as_slice(),
            Segment::Gap { .. } => &[],
        })
    }

    pub fn gaps(&self) -> impl Iterator<Item = (StateId, StateId)> + '_ {
        self.segments.iter().filter_map(|seg| match *seg {
            Segment::Gap { u, v } => Some((u, v)),
            Segment::Observed(_) => None,
        })
    }

    pub fn is_complete(&self) -> bool {
        self.gaps().next().is_none()
    }

    /// Observed states: every state with an observed action, each gap start
    /// and the destination.
    pub fn observed_state_count(&self) -> usize {
        self.steps().count() + self.gaps().count() + 1
    }

    /// Visited states of a complete trajectory, origin to destination.
    pub fn states(&self) -> Result<Vec<StateId>> {
        if !self.is_complete() {
            return Err(Error::invalid("state sequence requested for a trajectory with gaps"));
        }
        let mut out: Vec<StateId> = self.steps().map(|s| s.state).collect();
        out.push(self.dest);
        Ok(out)
    }

    /// Checks the trajectory against the kernel: actions exist, each observed
    /// successor is possible, gaps connect consecutive observations, and the
    /// walk ends in `dest`.
    pub fn validate(&self, mdp: &Mdp) -> Result<()> {
        mdp.check_state(self.origin)?;
        mdp.check_state(self.dest)?;
        let kernel = mdp.kernel();
        let mut current = self.origin;
        let mut pending: Option<ObservedStep> = None;
        let arrive = |pending: &Option<ObservedStep>, current: StateId, next: StateId| -> Result<()> {
            match pending {
                Some(step) => {
                    let (succ, _) = kernel.successors(step.state, step.action).expect("checked when pending was set");
                    if succ.binary_search(&next.0).is_err() {
                        return Err(Error::invalid(format!(
                            "action {} at state {} cannot lead to state {next}",
                            step.action, step.state
                        )));
                    }
                }
                None if current != next => {
                    return Err(Error::invalid(format!("expected state {current}, found {next}")));
                }
                None => {}
            }
            Ok(())
        };
        for seg in &self.segments {
            match seg {
                Segment::Observed(steps) => {
                    for step in steps {
                        mdp.check_state(step.state)?;
                        arrive(&pending, current, step.state)?;
                        if step.state == self.dest {
                            return Err(Error::invalid(format!("observed action at destination {}", self.dest)));
                        }
                        if kernel.successors(step.state, step.action).is_none() {
                            return Err(Error::invalid(format!(
                                "action {} not available at state {}",
                                step.action, step.state
                            )));
                        }
                        pending = Some(*step);
                    }
                }
                Segment::Gap { u, v } => {
                    mdp.check_state(*u)?;
                    mdp.check_state(*v)?;
                    if u == v {
                        return Err(Error::invalid(format!("gap with identical endpoints {u}")));
                    }
                    if *u == self.dest {
                        return Err(Error::invalid(format!("gap starts at destination {u}")));
                    }
                    arrive(&pending, current, *u)?;
                    pending = None;
                    current = *v;
                }
            }
        }
        arrive(&pending, current, self.dest)
    }
}

/// Destination groups of a dataset: distinct destinations in ascending order
/// and, for each trajectory, the index of its group.
#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    pub groups: Vec<DestinationSet>,
    pub assignment: Vec<usize>,
}

impl Grouping {
    pub fn by_destination(trajectories: &[Trajectory]) -> Grouping {
        let mut index: BTreeMap<StateId, usize> = BTreeMap::new();
        for t in trajectories {
            index.entry(t.dest).or_insert(0);
        }
        for (i, v) in index.values_mut().enumerate() {
            *v = i;
        }
        Grouping {
            groups: index.keys().map(|&d| DestinationSet::single(d)).collect(),
            assignment: trajectories.iter().map(|t| index[&t.dest]).collect(),
        }
    }

    /// Every gap in the dataset with its group, in trajectory order.
    pub fn missing_pairs(&self, trajectories: &[Trajectory]) -> Vec<MissingPair> {
        trajectories
            .iter()
            .zip(&self.assignment)
            .flat_map(|(t, &group)| t.gaps().map(move |(u, v)| MissingPair { u, v, group }))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{FeatureKind, FeatureSpec, FeatureTensor, TransitionKernel};

    fn diamond() -> Mdp {
        let kernel = TransitionKernel::deterministic(4, &[(0, 1), (0, 2), (1, 3), (2, 3)]).unwrap();
        let spec = FeatureSpec { name: "inc".into(), kind: FeatureKind::Boolean };
        let rows: Vec<_> = [(0, 1), (0, 2), (1, 3), (2, 3)].iter().map(|&(a, b)| (a, b, vec![1.0])).collect();
        Mdp::new(kernel, FeatureTensor::from_rows(4, vec![spec], &rows).unwrap()).unwrap()
    }

    #[test]
    fn valid_complete_and_gapped() {
        let mdp = diamond();
        let full = Trajectory::complete(StateId(0), StateId(3), vec![ObservedStep::new(0, 0), ObservedStep::new(1, 0)]);
        full.validate(&mdp).unwrap();
        assert_eq!(full.states().unwrap(), vec![StateId(0), StateId(1), StateId(3)]);

        let gapped = Trajectory {
            origin: StateId(0),
            dest: StateId(3),
            segments: vec![Segment::Gap { u: StateId(0), v: StateId(3) }],
        };
        gapped.validate(&mdp).unwrap();
        assert!(!gapped.is_complete());
        assert!(gapped.states().is_err());
    }

    #[test]
    fn inconsistent_trajectories_rejected() {
        let mdp = diamond();
        // action 1 at state 0 leads to 2, not 1
        let bad = Trajectory::complete(StateId(0), StateId(3), vec![ObservedStep::new(0, 1), ObservedStep::new(1, 0)]);
        assert!(bad.validate(&mdp).is_err());
        // ends before destination
        let short = Trajectory::complete(StateId(0), StateId(3), vec![ObservedStep::new(0, 0)]);
        assert!(short.validate(&mdp).is_err());
        // gap not starting where the walk is
        let gap = Trajectory {
            origin: StateId(0),
            dest: StateId(3),
            segments: vec![Segment::Observed(vec![ObservedStep::new(0, 0)]), Segment::Gap { u: StateId(2), v: StateId(3) }],
        };
        assert!(gap.validate(&mdp).is_err());
        // unknown action
        let act = Trajectory::complete(StateId(0), StateId(3), vec![ObservedStep::new(0, 5)]);
        assert!(act.validate(&mdp).is_err());
    }

    #[test]
    fn grouping_is_sorted_by_destination() {
        let t = |d| Trajectory::complete(StateId(0), StateId(d), vec![]);
        let g = Grouping::by_destination(&[t(5), t(2), t(5)]);
        assert_eq!(g.groups, vec![DestinationSet::single(StateId(2)), DestinationSet::single(StateId(5))]);
        assert_eq!(g.assignment, vec![1, 0, 1]);
    }
}
