//! Max-flow / min-cut by augmenting paths with two search trees grown from
//! the source and the sink, reused between augmentations (Boykov and
//! Kolmogorov's strategy, well suited to grid graphs).

use std::collections::VecDeque;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arc {
    pub from: usize,
    pub to: usize,
    pub capacity: f64,
}

/// Directed network with explicit source and sink nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowNetwork {
    num_nodes: usize,
    source: usize,
    sink: usize,
    arcs: Vec<Arc>,
}

impl FlowNetwork {
    pub fn new(num_nodes: usize, source: usize, sink: usize) -> Result<Self> {
        if source >= num_nodes || sink >= num_nodes || source == sink {
            return Err(Error::InvalidArgument(format!(
                "bad terminals s={source}, t={sink} for {num_nodes} nodes"
            )));
        }
        Ok(FlowNetwork {
            num_nodes,
            source,
            sink,
            arcs: Vec::new(),
        })
    }

    pub fn with_capacity(num_nodes: usize, source: usize, sink: usize, arcs: usize) -> Result<Self> {
        let mut net = FlowNetwork::new(num_nodes, source, sink)?;
        net.arcs.reserve(arcs);
        Ok(net)
    }

    pub fn add_arc(&mut self, from: usize, to: usize, capacity: f64) -> Result<()> {
        if from >= self.num_nodes || to >= self.num_nodes || from == to {
            return Err(Error::InvalidArgument(format!("bad arc {from} -> {to}")));
        }
        if !(capacity >= 0.0 && capacity.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "arc {from} -> {to} capacity {capacity}"
            )));
        }
        self.arcs.push(Arc { from, to, capacity });
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn source(&self) -> usize {
        self.source
    }

    pub fn sink(&self) -> usize {
        self.sink
    }

    pub fn arcs(&self) -> &[Arc] {
        &self.arcs
    }

    /// Total capacity of arcs leaving the source side of `source_side`.
    pub fn cut_value(&self, source_side: &[bool]) -> f64 {
        self.arcs
            .iter()
            .filter(|a| source_side[a.from] && !source_side[a.to])
            .map(|a| a.capacity)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinCut {
    /// Value of the maximum flow.
    pub flow: f64,
    /// `true` for nodes on the source side of a minimum cut.
    pub source_side: Vec<bool>,
}

const NONE: u32 = u32::MAX;
const TERMINAL: u32 = u32::MAX - 1;
const ORPHAN: u32 = u32::MAX - 2;
const INF_DIST: u32 = u32::MAX;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Tree {
    Free,
    Source,
    Sink,
}

struct Solver {
    // Residual arcs come in pairs: 2k is arc k forward, 2k + 1 its reverse.
    head: Vec<u32>,
    next: Vec<u32>,
    rcap: Vec<f64>,
    first: Vec<u32>,
    tree: Vec<Tree>,
    parent: Vec<u32>,
    ts: Vec<u64>,
    dist: Vec<u32>,
    queued: Vec<bool>,
    active: VecDeque<u32>,
    orphans: Vec<u32>,
    time: u64,
}

#[inline]
fn sister(a: u32) -> u32 {
    a ^ 1
}

impl Solver {
    fn new(net: &FlowNetwork) -> Self {
        let n = net.num_nodes;
        let m = net.arcs.len() * 2;
        let mut s = Solver {
            head: Vec::with_capacity(m),
            next: Vec::with_capacity(m),
            rcap: Vec::with_capacity(m),
            first: vec![NONE; n],
            tree: vec![Tree::Free; n],
            parent: vec![NONE; n],
            ts: vec![0; n],
            dist: vec![0; n],
            queued: vec![false; n],
            active: VecDeque::new(),
            orphans: Vec::new(),
            time: 0,
        };
        for a in &net.arcs {
            for (tail, head, cap) in [(a.from, a.to, a.capacity), (a.to, a.from, 0.0)] {
                let id = s.head.len() as u32;
                s.head.push(head as u32);
                s.rcap.push(cap);
                s.next.push(s.first[tail]);
                s.first[tail] = id;
            }
        }
        for (root, tree) in [(net.source, Tree::Source), (net.sink, Tree::Sink)] {
            s.tree[root] = tree;
            s.parent[root] = TERMINAL;
            s.dist[root] = 0;
            s.activate(root as u32);
        }
        s
    }

    fn activate(&mut self, p: u32) {
        if !self.queued[p as usize] {
            self.queued[p as usize] = true;
            self.active.push_back(p);
        }
    }

    fn next_active(&mut self) -> Option<u32> {
        while let Some(p) = self.active.pop_front() {
            self.queued[p as usize] = false;
            if self.tree[p as usize] != Tree::Free {
                return Some(p);
            }
        }
        None
    }

    /// Grows the tree of `p` by one layer; returns an arc from a source-tree
    /// node to a sink-tree node if the trees touch.
    fn grow(&mut self, p: u32) -> Option<u32> {
        let pi = p as usize;
        let from_source = self.tree[pi] == Tree::Source;
        let mut a = self.first[pi];
        while a != NONE {
            let residual = if from_source {
                self.rcap[a as usize]
            } else {
                self.rcap[sister(a) as usize]
            };
            if residual > 0.0 {
                let q = self.head[a as usize] as usize;
                match self.tree[q] {
                    Tree::Free => {
                        self.tree[q] = self.tree[pi];
                        self.parent[q] = sister(a);
                        self.ts[q] = self.ts[pi];
                        self.dist[q] = self.dist[pi] + 1;
                        self.activate(q as u32);
                    }
                    t if t != self.tree[pi] => {
                        return Some(if from_source { a } else { sister(a) });
                    }
                    _ => {
                        if self.ts[q] <= self.ts[pi] && self.dist[q] > self.dist[pi] {
                            self.parent[q] = sister(a);
                            self.ts[q] = self.ts[pi];
                            self.dist[q] = self.dist[pi] + 1;
                        }
                    }
                }
            }
            a = self.next[a as usize];
        }
        None
    }

    /// Pushes the bottleneck flow along source root -> ... -> tail(mid) ->
    /// head(mid) -> ... -> sink root.
    fn augment(&mut self, mid: u32) -> f64 {
        let mut bottleneck = self.rcap[mid as usize];
        let mut x = self.head[sister(mid) as usize];
        while self.parent[x as usize] != TERMINAL {
            let b = self.parent[x as usize];
            bottleneck = bottleneck.min(self.rcap[sister(b) as usize]);
            x = self.head[b as usize];
        }
        let mut x = self.head[mid as usize];
        while self.parent[x as usize] != TERMINAL {
            let b = self.parent[x as usize];
            bottleneck = bottleneck.min(self.rcap[b as usize]);
            x = self.head[b as usize];
        }

        self.rcap[mid as usize] -= bottleneck;
        self.rcap[sister(mid) as usize] += bottleneck;
        let mut x = self.head[sister(mid) as usize];
        while self.parent[x as usize] != TERMINAL {
            let b = self.parent[x as usize];
            let up = self.head[b as usize];
            self.rcap[sister(b) as usize] -= bottleneck;
            self.rcap[b as usize] += bottleneck;
            if self.rcap[sister(b) as usize] <= 0.0 {
                self.parent[x as usize] = ORPHAN;
                self.orphans.push(x);
            }
            x = up;
        }
        let mut x = self.head[mid as usize];
        while self.parent[x as usize] != TERMINAL {
            let b = self.parent[x as usize];
            let up = self.head[b as usize];
            self.rcap[b as usize] -= bottleneck;
            self.rcap[sister(b) as usize] += bottleneck;
            if self.rcap[b as usize] <= 0.0 {
                self.parent[x as usize] = ORPHAN;
                self.orphans.push(x);
            }
            x = up;
        }
        bottleneck
    }

    /// Distance of `j` from its tree root through valid parents, or
    /// `INF_DIST` if the chain ends at an orphan.
    fn origin_distance(&mut self, j: u32) -> u32 {
        let mut d = 0u32;
        let mut k = j as usize;
        loop {
            if self.ts[k] == self.time {
                return d + self.dist[k];
            }
            let pa = self.parent[k];
            d += 1;
            if pa == TERMINAL {
                self.ts[k] = self.time;
                self.dist[k] = 1;
                return d;
            }
            if pa == ORPHAN {
                return INF_DIST;
            }
            k = self.head[pa as usize] as usize;
        }
    }

    fn adopt(&mut self) {
        while let Some(p) = self.orphans.pop() {
            let pi = p as usize;
            let tree = self.tree[pi];
            let mut best = NONE;
            let mut best_d = INF_DIST;
            let mut a = self.first[pi];
            while a != NONE {
                let q = self.head[a as usize];
                let qi = q as usize;
                let residual = if tree == Tree::Source {
                    self.rcap[sister(a) as usize]
                } else {
                    self.rcap[a as usize]
                };
                if self.tree[qi] == tree && residual > 0.0 {
                    let d = self.origin_distance(q);
                    if d != INF_DIST {
                        if d < best_d {
                            best = a;
                            best_d = d;
                        }
                        let mut dd = d;
                        let mut k = qi;
                        while self.ts[k] != self.time {
                            self.ts[k] = self.time;
                            self.dist[k] = dd;
                            dd = dd.saturating_sub(1);
                            k = self.head[self.parent[k] as usize] as usize;
                        }
                    }
                }
                a = self.next[a as usize];
            }
            if best != NONE {
                self.parent[pi] = best;
                self.ts[pi] = self.time;
                self.dist[pi] = best_d + 1;
                continue;
            }
            // No valid parent: p leaves its tree.
            let mut a = self.first[pi];
            while a != NONE {
                let q = self.head[a as usize];
                let qi = q as usize;
                if self.tree[qi] == tree {
                    let residual = if tree == Tree::Source {
                        self.rcap[sister(a) as usize]
                    } else {
                        self.rcap[a as usize]
                    };
                    if residual > 0.0 {
                        self.activate(q);
                    }
                    let pa = self.parent[qi];
                    if pa != TERMINAL && pa != ORPHAN && self.head[pa as usize] == p {
                        self.parent[qi] = ORPHAN;
                        self.orphans.push(q);
                    }
                }
                a = self.next[a as usize];
            }
            self.tree[pi] = Tree::Free;
            self.parent[pi] = NONE;
        }
    }

    fn run(&mut self) {
        let mut current: Option<u32> = None;
        loop {
            let p = match current.take() {
                Some(p) if self.tree[p as usize] != Tree::Free => p,
                _ => match self.next_active() {
                    Some(p) => p,
                    None => return,
                },
            };
            if let Some(mid) = self.grow(p) {
                current = Some(p);
                self.time += 1;
                self.augment(mid);
                self.adopt();
            }
        }
    }
}

/// Maximum s-t flow and a minimum cut of `net`.
pub fn max_flow(net: &FlowNetwork) -> MinCut {
    let mut solver = Solver::new(net);
    solver.run();
    // Arc k carries the flow held in its reverse residual 2k + 1.
    let mut flow = 0.0;
    for (k, a) in net.arcs.iter().enumerate() {
        let f = solver.rcap[2 * k + 1];
        if a.from == net.source {
            flow += f;
        } else if a.to == net.source {
            flow -= f;
        }
    }
    let source_side = solver.tree.iter().map(|&t| t == Tree::Source).collect();
    MinCut { flow, source_side }
}
