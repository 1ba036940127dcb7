use std::collections::{HashMap, HashSet, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EnvError, Result};

const GEANT2_JSON: &str = include_str!("../../data/geant2.json");

/// One full-duplex link. Each direction carries `capacity_mbps` independently.
#[derive(Clone, Debug, PartialEq)]
pub struct Link {
    pub a: usize,
    pub b: usize,
    pub capacity_mbps: f64,
    pub prop_delay_ms: f64,
}

#[derive(Serialize, Deserialize)]
struct LinkDoc {
    a: String,
    b: String,
    capacity_mbps: f64,
    prop_delay_ms: f64,
}

#[derive(Serialize, Deserialize)]
struct Document {
    #[serde(default)]
    name: String,
    nodes: Vec<String>,
    links: Vec<LinkDoc>,
}

/// Validated, immutable network graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    name: String,
    nodes: Vec<String>,
    links: Vec<Link>,
    // per node: (neighbor, link index), sorted by neighbor
    adjacency: Vec<Vec<(usize, usize)>>,
}

fn invalid(msg: impl Into<String>) -> EnvError {
    EnvError::Topology(msg.into())
}

impl Topology {
    pub fn new(name: impl Into<String>, nodes: Vec<String>, links: Vec<Link>) -> Result<Self> {
        let n = nodes.len();
        if n < 2 {
            return Err(invalid("a topology needs at least two nodes"));
        }
        let mut seen = HashSet::new();
        for (i, l) in links.iter().enumerate() {
            if l.a >= n || l.b >= n {
                return Err(invalid(format!(
                    "link {i} references a node outside 0..{n}"
                )));
            }
            if l.a == l.b {
                return Err(invalid(format!("self-loop on node {}", nodes[l.a])));
            }
            if !(l.capacity_mbps.is_finite() && l.capacity_mbps > 0.0) {
                return Err(invalid(format!(
                    "link {i} has nonpositive capacity {}",
                    l.capacity_mbps
                )));
            }
            if !(l.prop_delay_ms.is_finite() && l.prop_delay_ms > 0.0) {
                return Err(invalid(format!(
                    "link {i} has nonpositive delay {}",
                    l.prop_delay_ms
                )));
            }
            if !seen.insert((l.a.min(l.b), l.a.max(l.b))) {
                return Err(invalid(format!(
                    "duplicate link {}-{}",
                    nodes[l.a], nodes[l.b]
                )));
            }
        }
        let mut adjacency = vec![Vec::new(); n];
        for (i, l) in links.iter().enumerate() {
            adjacency[l.a].push((l.b, i));
            adjacency[l.b].push((l.a, i));
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
        }

        let mut reached = vec![false; n];
        let mut queue = VecDeque::from([0]);
        reached[0] = true;
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &adjacency[u] {
                if !reached[v] {
                    reached[v] = true;
                    queue.push_back(v);
                }
            }
        }
        if let Some(lost) = reached.iter().position(|r| !r) {
            return Err(invalid(format!(
                "disconnected graph: {} unreachable",
                nodes[lost]
            )));
        }

        Ok(Self {
            name: name.into(),
            nodes,
            links,
            adjacency,
        })
    }

    /// Builds a topology with nodes named `0..n` from `(a, b, capacity, delay)` tuples.
    pub fn from_edges(name: &str, n: usize, edges: &[(usize, usize, f64, f64)]) -> Result<Self> {
        let nodes = (0..n).map(|i| i.to_string()).collect();
        let links = edges
            .iter()
            .map(|&(a, b, capacity_mbps, prop_delay_ms)| Link {
                a,
                b,
                capacity_mbps,
                prop_delay_ms,
            })
            .collect();
        Self::new(name, nodes, links)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Document = serde_json::from_str(text)?;
        let index: HashMap<&str, usize> = doc
            .nodes
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        if index.len() != doc.nodes.len() {
            return Err(invalid("duplicate node name"));
        }
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| invalid(format!("unknown node {name:?}")))
        };
        let links = doc
            .links
            .iter()
            .map(|l| {
                Ok(Link {
                    a: lookup(&l.a)?,
                    b: lookup(&l.b)?,
                    capacity_mbps: l.capacity_mbps,
                    prop_delay_ms: l.prop_delay_ms,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(doc.name, doc.nodes, links)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// The bundled 24-node, 37-link GEANT2 approximation.
    pub fn geant2() -> Self {
        Self::from_json(GEANT2_JSON).expect("bundled topology is valid")
    }

    pub fn to_json(&self) -> String {
        let doc = Document {
            name: self.name.clone(),
            nodes: self.nodes.clone(),
            links: self
                .links
                .iter()
                .map(|l| LinkDoc {
                    a: self.nodes[l.a].clone(),
                    b: self.nodes[l.b].clone(),
                    capacity_mbps: l.capacity_mbps,
                    prop_delay_ms: l.prop_delay_ms,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("topology serializes")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    /// `(neighbor, link index)` pairs in ascending neighbor order.
    pub fn neighbors(&self, node: usize) -> &[(usize, usize)] {
        &self.adjacency[node]
    }

    /// Sum of capacities over both directions of every link.
    pub fn total_capacity(&self) -> f64 {
        2.0 * self.links.iter().map(|l| l.capacity_mbps).sum::<f64>()
    }
}
