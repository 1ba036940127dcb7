use serde::{Deserialize, Serialize};

use super::routing::RoutingSolution;
use super::topology::Topology;
use super::traffic::TrafficMatrix;
use super::{EnvError, Result};

/// Analytic per-link delay: propagation plus `queue_scale_ms / (C - load)`,
/// or a fixed penalty once the load reaches capacity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayModel {
    /// Converts `1 / (C - load)` with rates in Mbit/s into milliseconds.
    pub queue_scale_ms: f64,
    pub penalty_factor: f64,
    /// Overload penalty uses the queueing delay at this spare-capacity fraction.
    pub penalty_headroom: f64,
}

impl Default for DelayModel {
    fn default() -> Self {
        Self {
            queue_scale_ms: 1000.0,
            penalty_factor: 10.0,
            penalty_headroom: 0.01,
        }
    }
}

impl DelayModel {
    pub fn link_delay(&self, capacity: f64, prop_ms: f64, load: f64) -> f64 {
        if load < capacity {
            prop_ms + self.queue_scale_ms / (capacity - load)
        } else {
            self.penalty_factor
                * (prop_ms + self.queue_scale_ms / (self.penalty_headroom * capacity))
        }
    }
}

/// Per-pair delays plus the per-direction link loads that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct DelayReport {
    n: usize,
    delays: Vec<f64>,
    link_loads: Vec<f64>,
    link_delays: Vec<f64>,
}

impl DelayReport {
    pub fn from_delays(n: usize, delays: Vec<f64>) -> Result<Self> {
        if delays.len() != n * n {
            return Err(EnvError::Routing(format!(
                "{} delays for {n} nodes",
                delays.len()
            )));
        }
        Ok(Self {
            n,
            delays,
            link_loads: Vec::new(),
            link_delays: Vec::new(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn delay(&self, src: usize, dst: usize) -> f64 {
        self.delays[src * self.n + dst]
    }

    pub fn delays(&self) -> &[f64] {
        &self.delays
    }

    /// Offered load per direction, indexed by [`super::Hop::directed`].
    pub fn link_loads(&self) -> &[f64] {
        &self.link_loads
    }

    pub fn link_delays(&self) -> &[f64] {
        &self.link_delays
    }

    pub fn overloaded_links(&self, topology: &Topology) -> usize {
        self.link_loads
            .iter()
            .enumerate()
            .filter(|(d, load)| **load >= topology.links()[d / 2].capacity_mbps)
            .count()
    }
}

pub fn compute_delay(
    routing: &RoutingSolution,
    tm: &TrafficMatrix,
    topology: &Topology,
) -> Result<DelayReport> {
    compute_delay_with(&DelayModel::default(), routing, tm, topology)
}

pub fn compute_delay_with(
    model: &DelayModel,
    routing: &RoutingSolution,
    tm: &TrafficMatrix,
    topology: &Topology,
) -> Result<DelayReport> {
    let n = topology.node_count();
    if routing.node_count() != n || tm.size() != n {
        return Err(EnvError::Routing(format!(
            "routing covers {} nodes, traffic {}, topology {n}",
            routing.node_count(),
            tm.size()
        )));
    }
    let mut loads = vec![0.0; 2 * topology.link_count()];
    for src in 0..n {
        for dst in (0..n).filter(|&d| d != src) {
            let demand = tm.get(src, dst);
            if demand == 0.0 {
                continue;
            }
            let hops = routing.hops(src, dst);
            if hops.is_empty() {
                return Err(EnvError::Routing(format!(
                    "no path for demanded pair {src}->{dst}"
                )));
            }
            for h in hops {
                loads[h.directed()] += demand;
            }
        }
    }
    let link_delays: Vec<f64> = loads
        .iter()
        .enumerate()
        .map(|(d, &load)| {
            let l = &topology.links()[d / 2];
            model.link_delay(l.capacity_mbps, l.prop_delay_ms, load)
        })
        .collect();
    let mut delays = vec![0.0; n * n];
    for src in 0..n {
        for dst in (0..n).filter(|&d| d != src) {
            delays[src * n + dst] = routing
                .hops(src, dst)
                .iter()
                .map(|h| link_delays[h.directed()])
                .sum();
        }
    }
    Ok(DelayReport {
        n,
        delays,
        link_loads: loads,
        link_delays,
    })
}

/// `(1/N^2) * sum_ij D_ij`, diagonal zeros included in the divisor.
pub fn mean_delay(report: &DelayReport) -> f64 {
    report.delays.iter().sum::<f64>() / (report.n * report.n) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netenv::routing::decode_action;

    #[test]
    fn single_link_formula() {
        let m = DelayModel {
            queue_scale_ms: 1.0,
            ..DelayModel::default()
        };
        assert!((m.link_delay(10.0, 1.0, 5.0) - 1.2).abs() < 1e-15);
        assert!((DelayModel::default().link_delay(10.0, 1.0, 5.0) - 201.0).abs() < 1e-12);
        // overload: 10 * (1 + 1000 / 0.1)
        assert_eq!(DelayModel::default().link_delay(10.0, 1.0, 10.0), 100_010.0);
    }

    #[test]
    fn zero_traffic_is_propagation_only() {
        let t = Topology::from_edges("line", 3, &[(0, 1, 100.0, 2.0), (1, 2, 100.0, 3.0)]).unwrap();
        let r = decode_action(&[0.5, 0.5], &t).unwrap();
        let rep = compute_delay(&r, &TrafficMatrix::zeros(3), &t).unwrap();
        let q = 1000.0 / 100.0;
        assert!((rep.delay(0, 2) - (2.0 + q + 3.0 + q)).abs() < 1e-12);
        assert_eq!(rep.delay(1, 1), 0.0);
    }

    #[test]
    fn mean_delay_divides_by_n_squared() {
        let rep = DelayReport::from_delays(2, vec![0.0, 4.0, 4.0, 0.0]).unwrap();
        assert_eq!(mean_delay(&rep), 2.0);
        assert_eq!(
            mean_delay(&DelayReport::from_delays(2, vec![0.0; 4]).unwrap()),
            0.0
        );
    }

    #[test]
    fn mismatched_sizes() {
        let t = Topology::from_edges("p", 2, &[(0, 1, 1.0, 1.0)]).unwrap();
        let r = decode_action(&[0.5], &t).unwrap();
        assert!(compute_delay(&r, &TrafficMatrix::zeros(3), &t).is_err());
    }
}
