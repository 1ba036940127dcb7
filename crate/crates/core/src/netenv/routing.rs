use std::cmp::Ordering;

use super::topology::Topology;
use super::{EnvError, Result};

/// Link costs are clamped to at least this before path search.
pub const WEIGHT_FLOOR: f64 = 1e-6;

/// One hop: the link used and whether it is traversed from `a` to `b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Hop {
    pub link: usize,
    pub forward: bool,
}

impl Hop {
    /// Index into per-direction arrays of length `2 * L`.
    pub fn directed(self) -> usize {
        2 * self.link + usize::from(!self.forward)
    }
}

/// Minimum-cost path for every ordered pair.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingSolution {
    n: usize,
    paths: Vec<Vec<usize>>,
    hops: Vec<Vec<Hop>>,
}

impl RoutingSolution {
    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Node sequence from `src` to `dst`; `[src]` when they coincide.
    pub fn path(&self, src: usize, dst: usize) -> &[usize] {
        &self.paths[src * self.n + dst]
    }

    pub fn hops(&self, src: usize, dst: usize) -> &[Hop] {
        &self.hops[src * self.n + dst]
    }
}

/// Cost of a path summed hop by hop from the source, as the search does.
pub fn path_cost(path: &[usize], topology: &Topology, weights: &[f64]) -> Option<f64> {
    let mut cost = 0.0;
    for w in path.windows(2) {
        let &(_, link) = topology.neighbors(w[0]).iter().find(|(v, _)| *v == w[1])?;
        cost += weights[link].max(WEIGHT_FLOOR);
    }
    Some(cost)
}

fn check_action(action: &[f64], topology: &Topology) -> Result<()> {
    if action.len() != topology.link_count() {
        return Err(EnvError::Action(format!(
            "{} weights for {} links",
            action.len(),
            topology.link_count()
        )));
    }
    if let Some((i, w)) = action
        .iter()
        .enumerate()
        .find(|(_, w)| !(**w > 0.0 && **w < 1.0))
    {
        return Err(EnvError::Action(format!(
            "weight {i} = {w} lies outside (0,1)"
        )));
    }
    Ok(())
}

/// Shortest paths under per-link weights `action`, ties broken by the
/// lexicographically smallest node sequence.
pub fn decode_action(action: &[f64], topology: &Topology) -> Result<RoutingSolution> {
    check_action(action, topology)?;
    let n = topology.node_count();
    let mut paths = Vec::with_capacity(n * n);
    let mut hops = Vec::with_capacity(n * n);
    for src in 0..n {
        for (dst, path) in single_source(src, action, topology).into_iter().enumerate() {
            let path = path.ok_or_else(|| EnvError::Routing(format!("no path {src}->{dst}")))?;
            let h = path
                .windows(2)
                .map(|w| {
                    let &(_, link) = topology
                        .neighbors(w[0])
                        .iter()
                        .find(|(v, _)| *v == w[1])
                        .expect("consecutive path nodes are adjacent");
                    Hop {
                        link,
                        forward: topology.links()[link].a == w[0],
                    }
                })
                .collect();
            paths.push(path);
            hops.push(h);
        }
    }
    Ok(RoutingSolution { n, paths, hops })
}

fn label_cmp(a: &(f64, Vec<usize>), b: &(f64, Vec<usize>)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1))
}

// Dense Dijkstra over (cost, path) labels; the graphs here are small.
fn single_source(src: usize, weights: &[f64], topology: &Topology) -> Vec<Option<Vec<usize>>> {
    let n = topology.node_count();
    let mut label: Vec<Option<(f64, Vec<usize>)>> = vec![None; n];
    let mut done = vec![false; n];
    label[src] = Some((0.0, vec![src]));
    loop {
        let next = (0..n)
            .filter(|&v| !done[v])
            .filter_map(|v| label[v].as_ref().map(|l| (v, l)))
            .min_by(|x, y| label_cmp(x.1, y.1))
            .map(|(v, _)| v);
        let Some(u) = next else { break };
        done[u] = true;
        let (du, pu) = label[u].clone().expect("settled node has a label");
        for &(v, link) in topology.neighbors(u) {
            if done[v] {
                continue;
            }
            let mut path = pu.clone();
            path.push(v);
            let cand = (du + weights[link].max(WEIGHT_FLOOR), path);
            let better = match &label[v] {
                None => true,
                Some(cur) => label_cmp(&cand, cur) == Ordering::Less,
            };
            if better {
                label[v] = Some(cand);
            }
        }
    }
    label.into_iter().map(|l| l.map(|(_, p)| p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_weights_give_min_hop_lexicographic() {
        // square 0-1-3, 0-2-3 plus chord 1-2
        let t = Topology::from_edges(
            "sq",
            4,
            &[
                (0, 1, 1.0, 1.0),
                (0, 2, 1.0, 1.0),
                (1, 3, 1.0, 1.0),
                (2, 3, 1.0, 1.0),
                (1, 2, 1.0, 1.0),
            ],
        )
        .unwrap();
        let r = decode_action(&[0.5; 5], &t).unwrap();
        assert_eq!(r.path(0, 3), &[0, 1, 3]);
        assert_eq!(r.path(3, 0), &[3, 1, 0]);
        assert_eq!(r.path(0, 0), &[0]);
    }

    #[test]
    fn triangle_detour() {
        let t = Topology::from_edges(
            "tri",
            3,
            &[(0, 1, 1.0, 1.0), (1, 2, 1.0, 1.0), (0, 2, 1.0, 1.0)],
        )
        .unwrap();
        let w = [0.1, 0.2, 0.9];
        let direct = path_cost(&[0, 2], &t, &w).unwrap();
        let detour = path_cost(&[0, 1, 2], &t, &w).unwrap();
        assert!(detour < direct);
        let r = decode_action(&w, &t).unwrap();
        assert_eq!(r.path(0, 2), &[0, 1, 2]);
        assert_eq!(
            r.hops(2, 0),
            &[
                Hop {
                    link: 1,
                    forward: false
                },
                Hop {
                    link: 0,
                    forward: false
                }
            ]
        );
    }

    #[test]
    fn weights_outside_open_unit_are_rejected() {
        let t = Topology::from_edges("p", 2, &[(0, 1, 1.0, 1.0)]).unwrap();
        for w in [0.0, 1.0, -0.5, f64::NAN] {
            assert!(matches!(decode_action(&[w], &t), Err(EnvError::Action(_))));
        }
        assert!(decode_action(&[0.5, 0.5], &t).is_err());
    }
}
