//! Search-tree bookkeeping: nodes, UCT scores, selection, expansion and
//! reward backpropagation. Independent of how transitions are simulated.

use rand::Rng;

use crate::substrate::StopId;
use crate::teg::{BusId, Teg};
use crate::{Error, Minutes, Result};

/// UCT score; unvisited nodes get `+inf` so they are tried first.
pub fn uct(reward_sum: f64, visits: u64, parent_visits: u64, c: f64) -> f64 {
    if visits == 0 {
        return f64::INFINITY;
    }
    let n = visits as f64;
    reward_sum / n + c * ((parent_visits.max(1) as f64).ln() / n).sqrt()
}

pub type NodeId = usize;

/// A state `(t_k, G_k)` of the design process.
#[derive(Debug, Clone)]
pub struct SearchNode {
    pub sim_time: Minutes,
    pub teg: Teg,
    /// Bus to extend at `sim_time`; `None` for a terminal node.
    pub frontier: Option<BusId>,
    pub visits: u64,
    pub reward_sum: f64,
    /// Cumulative reward sample of every simulation through this node,
    /// counted from this node on.
    pub rewards: Vec<f64>,
    /// Summed reward of the transition into this node, one term per visit.
    pub inbound_sum: f64,
    pub children: Vec<(StopId, NodeId)>,
    pub untried: Vec<StopId>,
    pub parent: Option<NodeId>,
    pub action: Option<StopId>,
}

impl SearchNode {
    pub fn new(sim_time: Minutes, teg: Teg, frontier: Option<BusId>, untried: Vec<StopId>) -> Self {
        SearchNode {
            sim_time,
            teg,
            frontier,
            visits: 0,
            reward_sum: 0.0,
            rewards: Vec::new(),
            inbound_sum: 0.0,
            children: Vec::new(),
            untried,
            parent: None,
            action: None,
        }
    }

    pub fn mean(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.reward_sum / self.visits as f64
        }
    }

    /// Reward sum of the action leading here: the transition plus everything after it.
    pub fn action_reward_sum(&self) -> f64 {
        self.inbound_sum + self.reward_sum
    }

    pub fn max_reward(&self) -> f64 {
        self.rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_expandable(&self) -> bool {
        !self.untried.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SearchTree {
    nodes: Vec<SearchNode>,
}

impl SearchTree {
    pub const ROOT: NodeId = 0;

    pub fn new(root: SearchNode) -> Self {
        SearchTree { nodes: vec![root] }
    }

    pub fn root(&self) -> &SearchNode {
        &self.nodes[Self::ROOT]
    }

    pub fn node(&self, id: NodeId) -> &SearchNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Root-to-node path following maximal UCT of the action value until a node with untried
    /// actions or a leaf without children. Ties go to the first child.
    pub fn select(&self, c: f64) -> Vec<NodeId> {
        let mut path = vec![Self::ROOT];
        let mut id = Self::ROOT;
        loop {
            let node = &self.nodes[id];
            if node.is_expandable() || node.children.is_empty() {
                return path;
            }
            let mut best = node.children[0].1;
            let mut best_score = f64::NEG_INFINITY;
            for &(_, child) in &node.children {
                let ch = &self.nodes[child];
                let score = uct(ch.action_reward_sum(), ch.visits, node.visits, c);
                if score > best_score {
                    best_score = score;
                    best = child;
                }
            }
            path.push(best);
            id = best;
        }
    }

    /// Removes a uniformly random untried action of `id`.
    pub fn pop_untried<R: Rng + ?Sized>(&mut self, id: NodeId, rng: &mut R) -> Result<StopId> {
        let untried = &mut self.nodes[id].untried;
        if untried.is_empty() {
            return Err(Error::Contract(format!("node {id} has no untried action")));
        }
        let k = super::random_index(untried.len(), rng);
        Ok(untried.swap_remove(k))
    }

    /// Attaches `child`, reached from `parent` by `action`.
    pub fn add_child(&mut self, parent: NodeId, action: StopId, mut child: SearchNode) -> NodeId {
        let id = self.nodes.len();
        child.parent = Some(parent);
        child.action = Some(action);
        self.nodes.push(child);
        self.nodes[parent].children.push((action, id));
        id
    }

    /// Expands `id` with a random untried action; `make_child` builds the
    /// resulting state.
    pub fn expand<R: Rng + ?Sized>(
        &mut self,
        id: NodeId,
        rng: &mut R,
        make_child: impl FnOnce(&SearchNode, StopId, &mut R) -> Result<SearchNode>,
    ) -> Result<NodeId> {
        let action = self.pop_untried(id, rng)?;
        let child = make_child(&self.nodes[id], action, rng)?;
        Ok(self.add_child(id, action, child))
    }

    /// `step_rewards[j]` is the reward of the transition into `path[j + 1]`.
    /// Node `path[k]` records `leaf_reward` plus every step reward below it.
    pub fn backpropagate(&mut self, path: &[NodeId], leaf_reward: f64, step_rewards: &[f64]) {
        debug_assert_eq!(step_rewards.len() + 1, path.len());
        let mut below = leaf_reward;
        for (k, &id) in path.iter().enumerate().rev() {
            let node = &mut self.nodes[id];
            node.visits += 1;
            node.reward_sum += below;
            node.rewards.push(below);
            if k > 0 {
                node.inbound_sum += step_rewards[k - 1];
                below += step_rewards[k - 1];
            }
        }
    }
}
