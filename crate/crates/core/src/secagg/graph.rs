//! Communication topology: each client exchanges masks and shares only with
//! its graph neighbors. A complete graph is classic SecAgg; a k-regular
//! subgraph cuts per-client work from n to k.

use std::collections::BTreeSet;

use super::{ClientIndex, SecAggError};
use crate::rng::DetRng;

const BUILD_ATTEMPTS: u32 = 100;
const PAIR_PICK_TRIES: u32 = 200;

/// Undirected simple graph over `n` clients, no self-loops.
#[derive(Debug, Clone)]
pub struct CommGraph {
    neighbors: Vec<BTreeSet<ClientIndex>>,
}

impl CommGraph {
    pub fn complete(n: usize) -> CommGraph {
        let neighbors = (0..n)
            .map(|i| (0..n).filter(|&j| j != i).collect())
            .collect();
        CommGraph { neighbors }
    }

    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: ClientIndex) -> &BTreeSet<ClientIndex> {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: ClientIndex) -> usize {
        self.neighbors[i].len()
    }

    pub fn min_degree(&self) -> usize {
        self.neighbors.iter().map(|s| s.len()).min().unwrap_or(0)
    }

    pub fn is_connected(&self) -> bool {
        let n = self.n();
        if n == 0 {
            return false;
        }
        let mut seen = vec![false; n];
        let mut queue = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = queue.pop() {
            for &j in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    queue.push(j);
                }
            }
        }
        count == n
    }

}

/// Build a random k-regular connected graph over `n` nodes. When n*k is odd
/// node 0 takes one extra edge, making the graph near-regular. `k = n-1`
/// short-circuits to the complete graph; `k = 2` is sampled directly as a
/// random Hamiltonian cycle. Generation retries until connected, erroring
/// after 100 attempts.
pub fn build_topology(
    n: usize,
    k: usize,
    t: usize,
    seed: u64,
) -> Result<CommGraph, SecAggError> {
    if n < 2 || k < 1 || k > n - 1 {
        return Err(SecAggError::BadGraphParams(format!("need 2 <= n and 1 <= k <= n-1, got n={n}, k={k}")));
    }
    if k < t {
        return Err(SecAggError::InfeasibleGraph { k, t });
    }
    if k == n - 1 {
        return Ok(CommGraph::complete(n));
    }
    if k == 1 {
        // The only connected 1-regular graph is a single edge.
        return Err(SecAggError::BadGraphParams(
            "no connected 1-regular graph exists for n > 2".into(),
        ));
    }

    let mut rng = DetRng::new(seed);

    if k == 2 {
        // Connected 2-regular means one cycle over all nodes.
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let mut neighbors: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for i in 0..n {
            let a = order[i];
            let b = order[(i + 1) % n];
            neighbors[a].insert(b);
            neighbors[b].insert(a);
        }
        return Ok(CommGraph { neighbors });
    }

    // Sequential stub matching works well for sparse degrees but dead-ends
    // in dense regimes, so for k above (n-1)/2 generate the sparse
    // complement and invert. An odd stub total adjusts node 0 by one stub:
    // +1 in the direct case, -1 in the complement case, so the final graph
    // always has node 0 at degree k+1 and everyone else at k.
    let use_complement = k > (n - 1) / 2;
    let deg = if use_complement { n - 1 - k } else { k };

    for _attempt in 0..BUILD_ATTEMPTS {
        let Some(matched) = stub_match(n, deg, use_complement, &mut rng) else {
            continue;
        };
        let neighbors = if use_complement {
            (0..n)
                .map(|i| (0..n).filter(|&j| j != i && !matched[i].contains(&j)).collect())
                .collect()
        } else {
            matched
        };
        let g = CommGraph { neighbors };
        if g.min_degree() >= k && g.is_connected() {
            return Ok(g);
        }
    }
    Err(SecAggError::DisconnectedAfterRetries(BUILD_ATTEMPTS))
}

/// One attempt at a random simple graph with `deg` stubs per node. When the
/// stub total is odd, node 0 takes one extra stub (direct mode) or gives one
/// up (complement mode). Returns None on a dead end.
fn stub_match(
    n: usize,
    deg: usize,
    complement: bool,
    rng: &mut DetRng,
) -> Option<Vec<BTreeSet<usize>>> {
    let mut stubs: Vec<usize> = Vec::with_capacity(n * deg + 1);
    for node in 0..n {
        for _ in 0..deg {
            stubs.push(node);
        }
    }
    if stubs.len() % 2 == 1 {
        if complement {
            let pos = stubs.iter().position(|&s| s == 0).expect("node 0 has a stub");
            stubs.swap_remove(pos);
        } else {
            stubs.push(0);
        }
    }
    let mut neighbors: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    while !stubs.is_empty() {
        let mut paired = false;
        for _ in 0..PAIR_PICK_TRIES {
            let i = rng.next_below(stubs.len() as u64) as usize;
            let j = rng.next_below(stubs.len() as u64) as usize;
            if i == j {
                continue;
            }
            let (a, b) = (stubs[i], stubs[j]);
            if a == b || neighbors[a].contains(&b) {
                continue;
            }
            neighbors[a].insert(b);
            neighbors[b].insert(a);
            let (hi, lo) = if i > j { (i, j) } else { (j, i) };
            stubs.swap_remove(hi);
            stubs.swap_remove(lo);
            paired = true;
            break;
        }
        if !paired {
            return None;
        }
    }
    Some(neighbors)
}
