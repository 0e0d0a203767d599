//! Compactor groups forced by residual connections.
//!
//! Compactors acting on the same dimension family must compress the same
//! index set. Each group learns one leader; members hold exact copies
//! (Duplicate) or transposes (Flip) of it.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::reparam::{layer_sites, ReparamGrads, ReparamModel, Site, Slot};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    /// Residual stream, shared by every layer.
    Blue,
    /// Attention-inner width of one layer.
    Orange(usize),
    /// FFN-inner width of one layer.
    Green(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Relation {
    Duplicate,
    Flip,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentGroup {
    pub id: usize,
    pub color: Color,
    pub leader: Slot,
    /// Every slot of the group, leader first.
    pub members: Vec<(Slot, Relation)>,
}

impl AlignmentGroup {
    pub fn layer(&self) -> Option<usize> {
        match self.color {
            Color::Blue => None,
            Color::Orange(l) | Color::Green(l) => Some(l),
        }
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Color::Blue => f.write_str("blue"),
            Color::Orange(l) => write!(f, "orange.{l}"),
            Color::Green(l) => write!(f, "green.{l}"),
        }
    }
}

/// Group ids: Blue is 0, Orange of layer `l` is `1 + l`, Green is `1 + L + l`.
pub fn build_groups(layers: usize) -> Vec<AlignmentGroup> {
    use Relation::*;
    let emb = Slot::column(Site::Embedding);
    let mut blue = vec![(emb, Duplicate)];
    for l in 0..layers {
        let [q, k, v, o, u, d] = layer_sites(l);
        blue.extend([
            (Slot::row(q), Flip),
            (Slot::row(k), Flip),
            (Slot::row(v), Flip),
            (Slot::column(o), Duplicate),
            (Slot::row(u), Flip),
            (Slot::column(d), Duplicate),
        ]);
    }
    blue.push((Slot::row(Site::Output), Flip));

    let mut groups = vec![AlignmentGroup {
        id: 0,
        color: Color::Blue,
        leader: emb,
        members: blue,
    }];
    for l in 0..layers {
        let [q, k, v, o, _, _] = layer_sites(l);
        groups.push(AlignmentGroup {
            id: 1 + l,
            color: Color::Orange(l),
            leader: Slot::column(v),
            members: vec![
                (Slot::column(v), Duplicate),
                (Slot::column(q), Duplicate),
                (Slot::column(k), Duplicate),
                (Slot::row(o), Flip),
            ],
        });
    }
    for l in 0..layers {
        let [_, _, _, _, u, d] = layer_sites(l);
        groups.push(AlignmentGroup {
            id: 1 + layers + l,
            color: Color::Green(l),
            leader: Slot::column(u),
            members: vec![(Slot::column(u), Duplicate), (Slot::row(d), Flip)],
        });
    }
    groups
}

/// How a leader's gradient is formed from its group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GradientPolicy {
    /// The leader's own slot gradient.
    #[default]
    LeaderOnly,
    /// Sum over all members, transposing Flip members first.
    TiedSum,
}

impl fmt::Display for GradientPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradientPolicy::LeaderOnly => "leader_only",
            GradientPolicy::TiedSum => "tied_sum",
        })
    }
}

impl FromStr for GradientPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leader_only" => Ok(GradientPolicy::LeaderOnly),
            "tied_sum" => Ok(GradientPolicy::TiedSum),
            other => Err(Error::Config(format!("unknown gradient policy `{other}`"))),
        }
    }
}

/// Gradient used to update the leader of `group`.
pub fn leader_gradient(
    group: &AlignmentGroup,
    grads: &ReparamGrads,
    layers: usize,
    policy: GradientPolicy,
) -> Result<Tensor> {
    let mut g = grads.get(group.leader, layers).clone();
    if policy == GradientPolicy::TiedSum {
        for (slot, rel) in &group.members {
            if *slot == group.leader {
                continue;
            }
            let m = grads.get(*slot, layers);
            match rel {
                Relation::Duplicate => g.add_assign(m)?,
                Relation::Flip => g.add_assign(&m.transpose()?)?,
            }
        }
    }
    Ok(g)
}

/// Copies the leader of `group` into every member.
pub fn broadcast_leader(model: &mut ReparamModel, group: &AlignmentGroup) -> Result<()> {
    let leader = model.weight(group.leader).clone();
    let flipped = leader.transpose()?;
    for (slot, rel) in &group.members {
        if *slot == group.leader {
            continue;
        }
        let w = match rel {
            Relation::Duplicate => leader.clone(),
            Relation::Flip => flipped.clone(),
        };
        model.set_weight(*slot, w)?;
    }
    Ok(())
}

pub fn broadcast_all(model: &mut ReparamModel, groups: &[AlignmentGroup]) -> Result<()> {
    for g in groups {
        broadcast_leader(model, g)?;
    }
    Ok(())
}

/// Verifies bitwise Duplicate/Flip equality for every group.
pub fn check_alignment(model: &ReparamModel) -> Result<()> {
    for g in model.groups() {
        let leader = model.weight(g.leader);
        let flipped = leader.transpose()?;
        for (slot, rel) in &g.members {
            let w = model.weight(*slot);
            let expect = match rel {
                Relation::Duplicate => leader,
                Relation::Flip => &flipped,
            };
            let same = w.shape() == expect.shape()
                && w
                    .data()
                    .iter()
                    .zip(expect.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(Error::State(format!(
                    "{slot} is out of sync with leader {} of group {}",
                    g.leader, g.id
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn group_counts() {
        let g = build_groups(12);
        assert_eq!(g.len(), 25);
        assert_eq!(g[0].members.len(), 1 + 6 * 12 + 1);
        let g0 = build_groups(0);
        assert_eq!(g0.len(), 1);
        assert_eq!(
            g0[0].members,
            vec![
                (Slot::column(Site::Embedding), Relation::Duplicate),
                (Slot::row(Site::Output), Relation::Flip)
            ]
        );
    }

    #[test]
    fn every_slot_in_exactly_one_group() {
        for layers in [0, 1, 4] {
            let mut seen = HashSet::new();
            for g in build_groups(layers) {
                assert_eq!(g.members[0], (g.leader, Relation::Duplicate));
                for (s, _) in g.members {
                    assert!(seen.insert(s), "{s} twice");
                }
            }
            let all: HashSet<_> = Slot::all(layers).into_iter().collect();
            assert_eq!(seen, all);
        }
    }

    #[test]
    fn policy_names() {
        assert_eq!("tied_sum".parse::<GradientPolicy>().unwrap(), GradientPolicy::TiedSum);
        assert!("sum".parse::<GradientPolicy>().is_err());
    }
}
