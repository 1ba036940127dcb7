use std::io::{Read, Write};

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use super::topology::Topology;
use super::{EnvError, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Bandwidth demands `b_ij` in Mbit/s, row-major `N x N` with a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficMatrix {
    n: usize,
    demands: Vec<f64>,
}

impl TrafficMatrix {
    pub fn new(n: usize, demands: Vec<f64>) -> Result<Self> {
        if demands.len() != n * n {
            return Err(EnvError::Traffic(format!(
                "{} demands for {n} nodes",
                demands.len()
            )));
        }
        for i in 0..n {
            if demands[i * n + i] != 0.0 {
                return Err(EnvError::Traffic(format!("nonzero diagonal at node {i}")));
            }
        }
        if let Some(v) = demands.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(EnvError::Traffic(format!(
                "demand {v} is not a nonnegative number"
            )));
        }
        Ok(Self { n, demands })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            demands: vec![0.0; n * n],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, src: usize, dst: usize) -> f64 {
        self.demands[src * self.n + dst]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.demands
    }

    pub fn total(&self) -> f64 {
        self.demands.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GravityConfig {
    /// Total demand as a fraction of [`Topology::total_capacity`].
    pub ilt: f64,
    /// AR(1) coefficient applied to node masses between steps. 0 draws each step independently.
    #[serde(default)]
    pub correlation: f64,
}

impl GravityConfig {
    pub fn new(ilt: f64) -> Self {
        Self {
            ilt,
            correlation: 0.0,
        }
    }
}

/// Gravity-model sequence with independent Exp(1) masses per step.
pub fn generate_traffic(
    topology: &Topology,
    ilt: f64,
    length: usize,
    seed: u64,
) -> Result<Vec<TrafficMatrix>> {
    generate_gravity(topology, &GravityConfig::new(ilt), length, seed)
}

pub fn generate_gravity(
    topology: &Topology,
    config: &GravityConfig,
    length: usize,
    seed: u64,
) -> Result<Vec<TrafficMatrix>> {
    if !(config.ilt > 0.0 && config.ilt.is_finite()) {
        return Err(EnvError::Traffic(format!(
            "ILT must be positive, got {}",
            config.ilt
        )));
    }
    if !(0.0..1.0).contains(&config.correlation) {
        return Err(EnvError::Traffic(format!(
            "mass correlation must lie in [0,1), got {}",
            config.correlation
        )));
    }
    if length == 0 {
        return Err(EnvError::Traffic(
            "sequence length must be at least 1".into(),
        ));
    }
    let n = topology.node_count();
    let volume = config.ilt * topology.total_capacity();
    let rho = config.correlation;
    let mut rng = seeded(seed);
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect()
    };
    let mut origin = draw(&mut rng);
    let mut dest = draw(&mut rng);

    let mut out = Vec::with_capacity(length);
    for step in 0..length {
        if step > 0 {
            let (o, d) = (draw(&mut rng), draw(&mut rng));
            for (m, e) in origin.iter_mut().zip(o).chain(dest.iter_mut().zip(d)) {
                *m = rho * *m + (1.0 - rho) * e;
            }
        }
        let mut demands = vec![0.0; n * n];
        let mut raw_total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let v = origin[i] * dest[j];
                    demands[i * n + j] = v;
                    raw_total += v;
                }
            }
        }
        if raw_total > 0.0 {
            let k = volume / raw_total;
            demands.iter_mut().for_each(|v| *v *= k);
        }
        out.push(TrafficMatrix { n, demands });
    }
    Ok(out)
}

/// Packs the off-diagonal demands into an `(N-1) x N` frame: column `j`
/// lists `b_ij` for every `i != j` in ascending `i`.
pub fn pack_state(tm: &TrafficMatrix) -> Tensor {
    let n = tm.n;
    let mut data = vec![0.0; (n - 1) * n];
    for j in 0..n {
        for (row, i) in (0..n).filter(|&i| i != j).enumerate() {
            data[row * n + j] = tm.get(i, j);
        }
    }
    Tensor::new(vec![n - 1, n], data).expect("packed shape")
}

pub fn unpack_state(frame: &Tensor) -> Result<TrafficMatrix> {
    let shape = frame.shape();
    if shape.len() != 2 || shape[0] + 1 != shape[1] {
        return Err(EnvError::Traffic(format!(
            "packed frame must be (N-1) x N, got {shape:?}"
        )));
    }
    let n = shape[1];
    let mut demands = vec![0.0; n * n];
    for j in 0..n {
        for (row, i) in (0..n).filter(|&i| i != j).enumerate() {
            demands[i * n + j] = frame.data()[row * n + j];
        }
    }
    TrafficMatrix::new(n, demands)
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    step: usize,
    src: usize,
    dst: usize,
    mbps: f64,
}

/// Writes `step,src,dst,mbps` rows for every off-diagonal pair.
pub fn write_traffic_csv<W: Write>(out: W, sequence: &[TrafficMatrix]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (step, tm) in sequence.iter().enumerate() {
        for src in 0..tm.n {
            for dst in (0..tm.n).filter(|&d| d != src) {
                w.serialize(CsvRow {
                    step,
                    src,
                    dst,
                    mbps: tm.get(src, dst),
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_traffic_csv<R: Read>(input: R, n: usize) -> Result<Vec<TrafficMatrix>> {
    let mut r = csv::Reader::from_reader(input);
    let mut steps: Vec<Vec<f64>> = Vec::new();
    for row in r.deserialize() {
        let row: CsvRow = row?;
        if row.src >= n || row.dst >= n || row.src == row.dst {
            return Err(EnvError::Traffic(format!(
                "bad pair {}->{} for {n} nodes",
                row.src, row.dst
            )));
        }
        if row.step >= steps.len() {
            steps.resize(row.step + 1, vec![0.0; n * n]);
        }
        steps[row.step][row.src * n + row.dst] = row.mbps;
    }
    steps
        .into_iter()
        .map(|d| TrafficMatrix::new(n, d))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest};

    #[test]
    fn gravity_scaling_and_diagonal() {
        let topo = Topology::geant2();
        for ilt in [0.2, 0.4, 0.6, 0.8, 1.0] {
            for tm in generate_traffic(&topo, ilt, 5, 11).unwrap() {
                let ratio = tm.total() / topo.total_capacity();
                assert!((ratio - ilt).abs() <= 1e-9 * ilt);
                assert!((0..24).all(|i| tm.get(i, i) == 0.0));
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let topo = Topology::geant2();
        let a = generate_traffic(&topo, 0.4, 3, 5).unwrap();
        assert_eq!(a, generate_traffic(&topo, 0.4, 3, 5).unwrap());
        assert_ne!(a, generate_traffic(&topo, 0.4, 3, 6).unwrap());
    }

    #[test]
    fn invalid_ilt() {
        let topo = Topology::geant2();
        assert!(generate_traffic(&topo, 0.0, 3, 5).is_err());
        assert!(generate_traffic(&topo, -0.2, 3, 5).is_err());
    }

    #[test]
    fn correlated_masses_move_slowly() {
        let topo = Topology::geant2();
        let cfg = GravityConfig {
            ilt: 0.5,
            correlation: 0.95,
        };
        let seq = generate_gravity(&topo, &cfg, 50, 1).unwrap();
        let diff = |a: &TrafficMatrix, b: &TrafficMatrix| -> f64 {
            a.as_slice()
                .iter()
                .zip(b.as_slice())
                .map(|(x, y)| (x - y).abs())
                .sum()
        };
        let smooth: f64 = seq.windows(2).map(|w| diff(&w[0], &w[1])).sum();
        let iid = generate_traffic(&topo, 0.5, 50, 1).unwrap();
        let rough: f64 = iid.windows(2).map(|w| diff(&w[0], &w[1])).sum();
        assert!(smooth < 0.5 * rough);
    }

    #[test]
    fn pack_single_entry() {
        let mut d = vec![0.0; 24 * 24];
        d[2 * 24 + 1] = 5.0;
        let frame = pack_state(&TrafficMatrix::new(24, d).unwrap());
        assert_eq!(frame.shape(), &[23, 24]);
        let nz: Vec<f64> = frame.data().iter().copied().filter(|v| *v != 0.0).collect();
        assert_eq!(nz, vec![5.0]);
        assert!(pack_state(&TrafficMatrix::zeros(24))
            .data()
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn nonzero_diagonal_rejected() {
        assert!(TrafficMatrix::new(2, vec![1.0, 0.0, 0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn pack_round_trip(n in 2usize..8, seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let mut d = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        d[i * n + j] = rng.random_range(0.0..100.0);
                    }
                }
            }
            let tm = TrafficMatrix::new(n, d).unwrap();
            prop_assert_eq!(unpack_state(&pack_state(&tm)).unwrap(), tm);
        }
    }

    #[test]
    fn csv_round_trip() {
        let topo = Topology::from_edges("t", 3, &[(0, 1, 10.0, 1.0), (1, 2, 10.0, 1.0)]).unwrap();
        let seq = generate_traffic(&topo, 0.7, 4, 3).unwrap();
        let mut buf = Vec::new();
        write_traffic_csv(&mut buf, &seq).unwrap();
        assert!(buf.starts_with(b"step,src,dst,mbps\n"));
        assert_eq!(read_traffic_csv(buf.as_slice(), 3).unwrap(), seq);
    }
}
