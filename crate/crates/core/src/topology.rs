//! Random P2P overlay graphs and the connectivity math behind secure
//! transmission: the G(n, p) connectivity threshold and the key-pool /
//! key-ring overlap trade-off.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// Undirected simple graph over node ids `0..node_count`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    node_count: u32,
    edges: BTreeSet<(u32, u32)>,
}

impl Graph {
    pub fn new(node_count: u32) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::parameter("graph needs at least one node"));
        }
        Ok(Graph { node_count, edges: BTreeSet::new() })
    }

    pub fn node_count(&self) -> u32 {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn add_edge(&mut self, u: u32, v: u32) -> Result<()> {
        if u == v {
            return Err(Error::parameter("self-loops are not allowed"));
        }
        if u >= self.node_count || v >= self.node_count {
            return Err(Error::parameter(format!(
                "edge ({u},{v}) references a node outside 0..{}",
                self.node_count
            )));
        }
        self.edges.insert((u.min(v), u.max(v)));
        Ok(())
    }

    pub fn has_edge(&self, u: u32, v: u32) -> bool {
        self.edges.contains(&(u.min(v), u.max(v)))
    }

    pub fn edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.edges.iter().copied()
    }

    pub fn neighbors(&self, u: u32) -> Vec<u32> {
        // BTreeSet ordering gives ascending neighbor ids for free.
        let mut out: Vec<u32> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == u {
                    Some(b)
                } else if b == u {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Subgraph induced by `nodes`, with the original node ids preserved.
    pub fn induced(&self, nodes: &BTreeSet<u32>) -> Graph {
        let edges = self
            .edges
            .iter()
            .filter(|(a, b)| nodes.contains(a) && nodes.contains(b))
            .copied()
            .collect();
        Graph { node_count: self.node_count, edges }
    }

    /// Edge-list text format: header `n=<count>`, then one `u v` per line.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "n={}", self.node_count);
        for (u, v) in &self.edges {
            let _ = writeln!(out, "{u} {v}");
        }
        out
    }

    pub fn from_edge_list(text: &str) -> Result<Graph> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Wire("empty edge list".into()))?;
        let n: u32 = header
            .trim()
            .strip_prefix("n=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Wire(format!("bad edge-list header: {header:?}")))?;
        let mut g = Graph::new(n)?;
        for line in lines {
            let mut it = line.split_whitespace();
            let (u, v) = match (it.next(), it.next()) {
                (Some(u), Some(v)) => (u, v),
                _ => return Err(Error::Wire(format!("bad edge line: {line:?}"))),
            };
            let u: u32 = u.parse().map_err(|_| Error::Wire(format!("bad node id {u:?}")))?;
            let v: u32 = v.parse().map_err(|_| Error::Wire(format!("bad node id {v:?}")))?;
            g.add_edge(u, v)?;
        }
        Ok(g)
    }
}

/// Sample G(n, p): every unordered pair is an edge independently with
/// probability p. Deterministic for a fixed seed.
pub fn generate_random_graph(n: u32, p: f64, seed: u64) -> Result<Graph> {
    if n < 2 {
        return Err(Error::parameter(format!("need n >= 2 nodes, got {n}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::parameter(format!("edge probability {p} outside [0, 1]")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut g = Graph::new(n)?;
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.gen::<f64>() < p {
                g.add_edge(u, v)?;
            }
        }
    }
    Ok(g)
}

/// Asymptotic probability that G(n, ln n / n + c / n) is connected: e^(-e^(-c)).
pub fn connectivity_probability(c: f64) -> f64 {
    (-(-c).exp()).exp()
}

/// Edge probability hitting a desired connectivity: invert the threshold
/// function, c = -ln(-ln P_c), p = (ln n + c) / n.
pub fn threshold_edge_probability(n: u32, target_pc: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::parameter(format!("need n >= 2 nodes, got {n}")));
    }
    if !(0.0 < target_pc && target_pc < 1.0) {
        return Err(Error::parameter(format!(
            "target connectivity {target_pc} outside (0, 1)"
        )));
    }
    let c = -(-target_pc.ln()).ln();
    Ok(((n as f64).ln() + c) / n as f64)
}

/// Probability that two rings of `l` distinct keys drawn from a pool of
/// `pool_size` share at least one key.
///
/// Evaluated as `1 - prod_{i=0}^{l-1} (pool-l-i)/(pool-i)`; the factorial
/// form overflows every native width long before pool_size=2000.
pub fn shared_key_probability(pool_size: u64, ring_size: u64) -> Result<f64> {
    if 2 * ring_size > pool_size {
        return Err(Error::parameter(format!(
            "need 2l <= pool size, got l={ring_size}, pool={pool_size}"
        )));
    }
    let mut none_shared = 1.0f64;
    for i in 0..ring_size {
        none_shared *= (pool_size - ring_size - i) as f64 / (pool_size - i) as f64;
    }
    Ok(1.0 - none_shared)
}

/// Connectivity check via union-find from node 0.
pub fn is_connected(g: &Graph) -> bool {
    let n = g.node_count() as usize;
    let mut parent: Vec<u32> = (0..n as u32).collect();
    fn find(parent: &mut [u32], mut x: u32) -> u32 {
        while parent[x as usize] != x {
            parent[x as usize] = parent[parent[x as usize] as usize];
            x = parent[x as usize];
        }
        x
    }
    let mut components = n;
    for (u, v) in g.edges() {
        let (ru, rv) = (find(&mut parent, u), find(&mut parent, v));
        if ru != rv {
            parent[ru as usize] = rv;
            components -= 1;
        }
    }
    components == 1
}

/// Connectivity restricted to a node subset (of the induced subgraph).
pub fn is_connected_subset(g: &Graph, nodes: &BTreeSet<u32>) -> bool {
    if nodes.is_empty() {
        return false;
    }
    let start = *nodes.iter().next().unwrap();
    let mut seen = BTreeSet::from([start]);
    let mut stack = vec![start];
    while let Some(u) = stack.pop() {
        for v in g.neighbors(u) {
            if nodes.contains(&v) && seen.insert(v) {
                stack.push(v);
            }
        }
    }
    seen.len() == nodes.len()
}
