use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Parent/child orientation of a radial feeder rooted at the slack bus.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    /// Hops from the slack bus.
    pub depth: Vec<usize>,
    /// Upstream branch of each bus (`None` for the slack bus).
    pub parent_branch: Vec<Option<usize>>,
    /// Downstream branches of each bus.
    pub children: Vec<Vec<usize>>,
    /// Buses in breadth-first order from the slack bus.
    pub order: Vec<usize>,
    /// For each branch, `(upstream bus, downstream bus)`.
    pub oriented: Vec<(usize, usize)>,
}

impl Topology {
    /// Orients `edges` (bus index pairs, either direction) away from `slack`.
    /// Fails unless the edges form a spanning tree of `names.len()` buses.
    pub fn build(names: &[String], edges: &[(usize, usize)], slack: usize) -> Result<Self> {
        let n = names.len();
        if n == 0 {
            return Err(Error::validation("feeder", "no buses"));
        }
        if edges.len() + 1 != n {
            return Err(Error::validation(
                "feeder",
                format!(
                    "not radial: {} branches for {} buses (a tree needs {})",
                    edges.len(),
                    n,
                    n - 1
                ),
            ));
        }

        let mut adjacency = vec![Vec::new(); n];
        for (l, &(a, b)) in edges.iter().enumerate() {
            adjacency[a].push(l);
            adjacency[b].push(l);
        }

        let mut depth = vec![usize::MAX; n];
        let mut parent_branch = vec![None; n];
        let mut children = vec![Vec::new(); n];
        let mut oriented = vec![(usize::MAX, usize::MAX); edges.len()];
        let mut order = Vec::with_capacity(n);
        let mut queue = VecDeque::from([slack]);
        depth[slack] = 0;

        while let Some(bus) = queue.pop_front() {
            order.push(bus);
            for &l in &adjacency[bus] {
                if Some(l) == parent_branch[bus] {
                    continue;
                }
                let (a, b) = edges[l];
                let other = if a == bus { b } else { a };
                if depth[other] != usize::MAX {
                    return Err(Error::validation(
                        "feeder",
                        format!("not radial: cycle through bus {}", names[other]),
                    ));
                }
                depth[other] = depth[bus] + 1;
                parent_branch[other] = Some(l);
                children[bus].push(l);
                oriented[l] = (bus, other);
                queue.push_back(other);
            }
        }

        let unreachable: Vec<String> = (0..n)
            .filter(|&b| depth[b] == usize::MAX)
            .map(|b| names[b].clone())
            .collect();
        if !unreachable.is_empty() {
            return Err(Error::Disconnected(unreachable));
        }

        Ok(Topology {
            depth,
            parent_branch,
            children,
            order,
            oriented,
        })
    }

    pub fn upstream(&self, branch: usize) -> usize {
        self.oriented[branch].0
    }

    pub fn downstream(&self, branch: usize) -> usize {
        self.oriented[branch].1
    }
}
