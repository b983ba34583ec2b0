//! Genealogy of a binary branching particle system and finite point measures.

use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};

pub type NodeId = usize;

/// How a particle's life ended.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "time", rename_all = "snake_case")]
pub enum Fate {
    /// Alive at the horizon.
    Alive,
    /// Split into two children at the given time.
    Branched(f64),
    /// Removed by barrier pruning at the given checkpoint.
    Pruned(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub birth_time: f64,
    pub branch_time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pruned_time: Option<f64>,
    #[serde(skip)]
    pub(crate) children: Option<[NodeId; 2]>,
    #[serde(skip)]
    pub(crate) depth: u32,
}

impl Node {
    pub fn fate(&self) -> Fate {
        match (self.branch_time, self.pruned_time) {
            (Some(b), _) => Fate::Branched(b),
            (None, Some(p)) => Fate::Pruned(p),
            (None, None) => Fate::Alive,
        }
    }

    pub fn children(&self) -> Option<[NodeId; 2]> {
        self.children
    }
}

/// Full branching history up to the horizon, with leaf heights.
///
/// Ids are dense and assigned in birth order. A node is alive at time `s`
/// iff `birth_time <= s < end`, where `end` is its branch time, pruning time
/// or the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenealogyTree {
    nodes: Vec<Node>,
    horizon: f64,
    /// `(leaf id, height)` sorted by id.
    leaf_heights: Vec<(NodeId, f64)>,
    #[serde(skip)]
    height_index: Vec<Option<f64>>,
}

/// Raw node record used to assemble a tree.
#[derive(Debug, Clone, Copy)]
pub struct RawNode {
    pub parent: Option<usize>,
    pub birth_time: f64,
    pub fate: Fate,
    /// Height at the horizon for `Fate::Alive` nodes.
    pub height: f64,
}

impl GenealogyTree {
    /// Assemble from raw records whose `parent` fields index into `raw`.
    /// Records are relabelled in birth order (ties keep input order).
    pub fn from_raw(raw: &[RawNode], horizon: f64) -> Result<Self> {
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| raw[a].birth_time.total_cmp(&raw[b].birth_time).then(a.cmp(&b)));
        let mut relabel = vec![0usize; raw.len()];
        for (new, &old) in order.iter().enumerate() {
            relabel[old] = new;
        }
        let mut nodes: Vec<Node> = order
            .iter()
            .enumerate()
            .map(|(new, &old)| {
                let r = &raw[old];
                let (branch_time, pruned_time) = match r.fate {
                    Fate::Alive => (None, None),
                    Fate::Branched(b) => (Some(b), None),
                    Fate::Pruned(p) => (None, Some(p)),
                };
                Node {
                    id: new,
                    parent: r.parent.map(|p| relabel[p]),
                    birth_time: r.birth_time,
                    branch_time,
                    pruned_time,
                    children: None,
                    depth: 0,
                }
            })
            .collect();
        let mut leaf_heights = Vec::new();
        for (new, &old) in order.iter().enumerate() {
            if raw[old].fate == Fate::Alive {
                leaf_heights.push((new, raw[old].height));
            }
        }
        // children, in id order
        let mut kids: Vec<Vec<NodeId>> = vec![Vec::new(); nodes.len()];
        for n in &nodes {
            if let Some(p) = n.parent {
                kids[p].push(n.id);
            }
        }
        for (i, k) in kids.into_iter().enumerate() {
            match k.len() {
                0 => {}
                2 => nodes[i].children = Some([k[0], k[1]]),
                n => {
                    return Err(Error::Input(format!("node {i} has {n} children, expected 0 or 2")))
                }
            }
        }
        for i in 0..nodes.len() {
            if let Some(p) = nodes[i].parent {
                nodes[i].depth = nodes[p].depth + 1;
            }
        }
        let tree = Self::finish(nodes, horizon, leaf_heights);
        tree.validate()?;
        Ok(tree)
    }

    fn finish(nodes: Vec<Node>, horizon: f64, leaf_heights: Vec<(NodeId, f64)>) -> Self {
        let mut height_index = vec![None; nodes.len()];
        for &(id, h) in &leaf_heights {
            height_index[id] = Some(h);
        }
        Self { nodes, horizon, leaf_heights, height_index }
    }

    /// Rebuild derived indices after deserialization.
    pub fn reindex(self) -> Result<Self> {
        let raw: Vec<RawNode> = self
            .nodes
            .iter()
            .map(|n| RawNode {
                parent: n.parent,
                birth_time: n.birth_time,
                fate: n.fate(),
                height: self
                    .leaf_heights
                    .iter()
                    .find(|(id, _)| *id == n.id)
                    .map(|&(_, h)| h)
                    .unwrap_or(f64::NAN),
            })
            .collect();
        Self::from_raw(&raw, self.horizon)
    }

    /// Check the structural invariants of a genealogy.
    pub fn validate(&self) -> Result<()> {
        let roots: Vec<&Node> = self.nodes.iter().filter(|n| n.parent.is_none()).collect();
        if roots.len() != 1 || roots[0].birth_time != 0.0 {
            return input("genealogy must have exactly one root born at time 0");
        }
        for n in &self.nodes {
            match n.fate() {
                Fate::Branched(b) => {
                    if !(b > n.birth_time) || b > self.horizon {
                        return input(format!("node {} has branch time {b} not after birth", n.id));
                    }
                    let Some(ch) = n.children else {
                        return input(format!("internal node {} lacks two children", n.id));
                    };
                    for c in ch {
                        if self.nodes[c].birth_time != b {
                            return input(format!("child {c} not born at parent's branch time"));
                        }
                    }
                    if self.height_index[n.id].is_some() {
                        return input(format!("internal node {} carries a leaf height", n.id));
                    }
                }
                Fate::Alive => {
                    if n.children.is_some() {
                        return input(format!("leaf {} has children", n.id));
                    }
                    if self.height_index[n.id].is_none() {
                        return input(format!("leaf {} has no height", n.id));
                    }
                }
                Fate::Pruned(_) => {
                    if n.children.is_some() || self.height_index[n.id].is_some() {
                        return input(format!("pruned node {} must be a dead end", n.id));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id).ok_or_else(|| Error::Input(format!("unknown node id {id}")))
    }

    /// Leaves alive at the horizon with their heights, sorted by id.
    pub fn leaf_heights(&self) -> &[(NodeId, f64)] {
        &self.leaf_heights
    }

    pub fn leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.leaf_heights.iter().map(|&(id, _)| id)
    }

    pub fn height(&self, leaf: NodeId) -> Result<f64> {
        self.height_index
            .get(leaf)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Input(format!("node {leaf} is not a leaf at the horizon")))
    }

    /// Time at which the node stops being alive.
    pub fn end_time(&self, id: NodeId) -> Result<f64> {
        let n = self.node(id)?;
        Ok(match n.fate() {
            Fate::Alive => self.horizon,
            Fate::Branched(b) => b,
            Fate::Pruned(p) => p,
        })
    }

    /// Cross-section `L_s`: nodes alive at time `s`.
    pub fn alive_at(&self, s: f64) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| {
                let end = match n.fate() {
                    Fate::Alive => self.horizon,
                    Fate::Branched(b) => b,
                    Fate::Pruned(p) => p,
                };
                n.birth_time <= s && (s < end || (n.fate() == Fate::Alive && s == self.horizon))
            })
            .map(|n| n.id)
            .collect()
    }

    fn lca(&self, mut a: NodeId, mut b: NodeId) -> NodeId {
        while self.nodes[a].depth > self.nodes[b].depth {
            a = self.nodes[a].parent.unwrap();
        }
        while self.nodes[b].depth > self.nodes[a].depth {
            b = self.nodes[b].parent.unwrap();
        }
        while a != b {
            a = self.nodes[a].parent.unwrap();
            b = self.nodes[b].parent.unwrap();
        }
        a
    }

    /// Largest time at which `x` and `y` share a common ancestor.
    pub fn mrca_time(&self, x: NodeId, y: NodeId) -> Result<f64> {
        self.node(x)?;
        self.node(y)?;
        let a = self.lca(x, y);
        // An ancestor (or the node itself) is shared until it stops living.
        self.end_time(a)
    }

    /// Distance between leaves at the horizon.
    pub fn genealogical_distance(&self, x: NodeId, y: NodeId) -> Result<f64> {
        self.distance_at(x, self.horizon, y, self.horizon)
    }

    /// Distance between `x` viewed at time `t` and `y` viewed at time `t2`.
    pub fn distance_at(&self, x: NodeId, t: f64, y: NodeId, t2: f64) -> Result<f64> {
        for (id, time) in [(x, t), (y, t2)] {
            let n = self.node(id)?;
            if time < n.birth_time || time > self.end_time(id)? {
                return input(format!("node {id} is not alive at time {time}"));
            }
        }
        let s = self.mrca_time(x, y)?.min(t).min(t2);
        Ok(((t - s) + (t2 - s)) / 2.0)
    }

    /// Oldest ancestor `a` of `x` (possibly `x`) such that every leaf below `a`
    /// is within distance `< r` of `x`. `None` when `r <= 0`.
    fn ball_root(&self, x: NodeId, r: f64) -> Option<NodeId> {
        if r <= 0.0 {
            return None;
        }
        let cutoff = self.horizon - r;
        let mut a = x;
        while let Some(p) = self.nodes[a].parent {
            // leaves split off at p are at distance horizon - branch_time(p)
            if self.nodes[p].branch_time.unwrap() > cutoff {
                a = p;
            } else {
                break;
            }
        }
        Some(a)
    }

    /// Leaves below `root`, in DFS order.
    fn leaves_below(&self, root: NodeId, out: &mut Vec<NodeId>) {
        let mut stack = vec![root];
        while let Some(n) = stack.pop() {
            match (self.nodes[n].children, self.height_index[n]) {
                (Some([a, b]), _) => {
                    stack.push(b);
                    stack.push(a);
                }
                (None, Some(_)) => out.push(n),
                _ => {}
            }
        }
    }

    /// Leaves within genealogical distance `< r` of leaf `x`, sorted by id.
    pub fn ball(&self, x: NodeId, r: f64) -> Result<Vec<NodeId>> {
        self.height(x)?;
        if r.is_nan() || r < 0.0 {
            return input(format!("ball radius must be nonnegative, got {r}"));
        }
        let mut out = Vec::new();
        if let Some(root) = self.ball_root(x, r) {
            self.leaves_below(root, &mut out);
        }
        out.sort_unstable();
        Ok(out)
    }

    pub(crate) fn ball_root_of(&self, x: NodeId, r: f64) -> Option<NodeId> {
        self.ball_root(x, r)
    }

    pub(crate) fn raw_children(&self, id: NodeId) -> Option<[NodeId; 2]> {
        self.nodes[id].children
    }

    pub(crate) fn leaf_height_opt(&self, id: NodeId) -> Option<f64> {
        self.height_index[id]
    }

    pub(crate) fn leaves_under(&self, root: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        self.leaves_below(root, &mut out);
        out
    }
}

/// Finite atomic measure on the real line, stored as sorted atoms.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointMeasure {
    atoms: Vec<f64>,
}

impl PointMeasure {
    pub fn new(mut atoms: Vec<f64>) -> Self {
        atoms.retain(|a| !a.is_nan());
        atoms.sort_unstable_by(f64::total_cmp);
        Self { atoms }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn total(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn max(&self) -> Option<f64> {
        self.atoms.last().copied()
    }

    /// Number of atoms in the closed interval `[a, b]`; `b` may be `+inf`.
    pub fn count_in(&self, a: f64, b: f64) -> Result<usize> {
        if a.is_nan() || b.is_nan() || a > b {
            return input(format!("count_in needs a <= b, got [{a}, {b}]"));
        }
        let lo = self.atoms.partition_point(|&x| x < a);
        let hi = self.atoms.partition_point(|&x| x <= b);
        Ok(hi - lo)
    }

    /// Atoms `>= a`.
    #[inline]
    pub fn count_at_least(&self, a: f64) -> usize {
        self.atoms.len() - self.atoms.partition_point(|&x| x < a)
    }

    pub fn shift(&self, c: f64) -> Self {
        Self { atoms: self.atoms.iter().map(|x| x + c).collect() }
    }

    pub fn superpose<'a>(measures: impl IntoIterator<Item = &'a PointMeasure>) -> Self {
        let mut atoms = Vec::new();
        for m in measures {
            atoms.extend_from_slice(&m.atoms);
        }
        Self::new(atoms)
    }

    pub fn push(&mut self, x: f64) {
        let i = self.atoms.partition_point(|&a| a <= x);
        self.atoms.insert(i, x);
    }
}

impl FromIterator<f64> for PointMeasure {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}
