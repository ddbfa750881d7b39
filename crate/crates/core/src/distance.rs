//! Hungarian matching distance between two networks.
//!
//! For each layer, every neuron is described by its incoming weight row with
//! the bias appended. Neurons of the two networks are paired by a
//! minimum-cost perfect matching on Euclidean distance, and the matched costs
//! are summed over all layers of the actor and the critic. Layers are matched
//! independently; `log_std` has no neuron structure and is left out.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{unflatten_unchecked, Dense, ParameterVector, PolicySpec};

/// Square matrix of nonnegative assignment costs, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut entries = Vec::with_capacity(n * n);
        for row in rows {
            if row.len() != n {
                return Err(Error::NonSquare {
                    rows: n,
                    cols: row.len(),
                });
            }
            entries.extend_from_slice(row);
        }
        Self::from_flat(n, entries)
    }

    pub fn from_flat(n: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::NonSquare {
                rows: n,
                cols: entries.len().checked_div(n).unwrap_or(0),
            });
        }
        if entries.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::malformed(
                "cost matrix",
                "entries must be finite and nonnegative",
            ));
        }
        Ok(CostMatrix { n, entries })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.n + col]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// `assignment[row] = col`.
    pub assignment: Vec<usize>,
    pub total_cost: f64,
}

/// Optimal assignment by the O(n³) shortest-augmenting-path form of the
/// Hungarian method with row/column potentials.
pub fn hungarian_solve(cost: &CostMatrix) -> Matching {
    let n = cost.size();
    if n == 0 {
        return Matching {
            assignment: Vec::new(),
            total_cost: 0.0,
        };
    }
    // 1-based arrays; index 0 is the virtual column used to start each row.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[col_owner[j] - 1] = j - 1;
    }
    let total_cost = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost.get(i, j))
        .sum();
    Matching {
        assignment,
        total_cost,
    }
}

/// Pairwise distances between the neurons of two layers of equal shape.
pub fn layer_cost_matrix(a: &Dense, b: &Dense) -> Result<CostMatrix> {
    if a.inputs != b.inputs || a.outputs != b.outputs {
        return Err(Error::LayoutMismatch(format!(
            "layer shapes {}x{} and {}x{} differ",
            a.outputs, a.inputs, b.outputs, b.inputs
        )));
    }
    let n = a.outputs;
    let mut entries = Vec::with_capacity(n * n);
    for i in 0..n {
        let ri = a.row(i);
        for j in 0..n {
            let rj = b.row(j);
            let mut sq: f64 = ri.iter().zip(rj).map(|(x, y)| (x - y).powi(2)).sum();
            sq += (a.bias[i] - b.bias[j]).powi(2);
            entries.push(sq.sqrt());
        }
    }
    CostMatrix::from_flat(n, entries)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDistance {
    /// e.g. `actor.0` or `critic.2`.
    pub layer: String,
    pub neurons: usize,
    pub cost: f64,
    pub assignment: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    /// Sum of all per-layer costs (actor and critic together).
    pub total: f64,
    pub layers: Vec<LayerDistance>,
    pub combine: String,
    pub log_std_excluded: bool,
}

impl DistanceReport {
    pub fn layer(&self, name: &str) -> Option<&LayerDistance> {
        self.layers.iter().find(|l| l.layer == name)
    }
}

/// Hungarian matching distance between two policies with the same layout.
pub fn hungarian_distance(a: &ParameterVector, b: &ParameterVector) -> Result<DistanceReport> {
    a.check_same_layout(b)?;
    let spec = PolicySpec::from_layout(a.layout())?;
    let pa = unflatten_unchecked(a.data(), &spec);
    let pb = unflatten_unchecked(b.data(), &spec);
    let mut layers = Vec::new();
    let mut nets = vec![("actor", &pa.mean_net, &pb.mean_net)];
    if let (Some(ca), Some(cb)) = (&pa.critic, &pb.critic) {
        nets.push(("critic", ca, cb));
    }
    for (name, na, nb) in nets {
        for (l, (la, lb)) in na.layers.iter().zip(&nb.layers).enumerate() {
            let m = hungarian_solve(&layer_cost_matrix(la, lb)?);
            layers.push(LayerDistance {
                layer: format!("{name}.{l}"),
                neurons: la.outputs,
                cost: m.total_cost,
                assignment: m.assignment,
            });
        }
    }
    Ok(DistanceReport {
        total: layers.iter().map(|l| l.cost).sum(),
        layers,
        combine: "sum".into(),
        log_std_excluded: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{flatten, GaussianPolicy};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(cost: &CostMatrix) -> f64 {
        fn rec(cost: &CostMatrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            let n = cost.size();
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    rec(cost, row + 1, used, acc + cost.get(row, j), best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost.size()], 0.0, &mut best);
        best
    }

    #[test]
    fn two_by_two_examples() {
        let m = hungarian_solve(&CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap());
        assert_eq!(m.assignment, vec![0, 1]);
        assert_eq!(m.total_cost, 0.0);
        let m = hungarian_solve(&CostMatrix::from_rows(&[vec![4.0, 1.0], vec![2.0, 3.0]]).unwrap());
        assert_eq!(m.assignment, vec![1, 0]);
        assert_eq!(m.total_cost, 3.0);
    }

    #[test]
    fn non_square_is_rejected() {
        assert!(matches!(
            CostMatrix::from_rows(&[vec![1.0, 2.0]]),
            Err(Error::NonSquare { .. })
        ));
        assert!(CostMatrix::from_rows(&[vec![-1.0]]).is_err());
    }

    #[test]
    fn six_by_six_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let rows: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..6).map(|_| rng.random_range(0.0..10.0)).collect())
                .collect();
            let c = CostMatrix::from_rows(&rows).unwrap();
            let m = hungarian_solve(&c);
            assert!((m.total_cost - brute_force(&c)).abs() < 1e-9);
            let mut seen = m.assignment.clone();
            seen.sort();
            assert_eq!(seen, (0..6).collect::<Vec<_>>());
        }
    }

    fn policy(seed: u64) -> GaussianPolicy {
        let spec = PolicySpec::actor_critic(3, 2, &[5, 4]).unwrap();
        GaussianPolicy::init(&spec, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn identical_networks_are_at_distance_zero() {
        let a = flatten(&policy(1));
        let r = hungarian_distance(&a, &a).unwrap();
        assert_eq!(r.total, 0.0);
        assert!(r.log_std_excluded);
        assert_eq!(r.layers.len(), 6);
    }

    #[test]
    fn functional_permutation_zeroes_the_permuted_layer() {
        let a = policy(2);
        let mut b = a.clone();
        let perm = [3usize, 0, 4, 1, 2];
        let (l0, l1) = b.mean_net.layers.split_at_mut(1);
        let src = &a.mean_net.layers;
        for (new, &old) in perm.iter().enumerate() {
            l0[0].weight[new * 3..new * 3 + 3].copy_from_slice(src[0].row(old));
            l0[0].bias[new] = src[0].bias[old];
            for o in 0..l1[0].outputs {
                l1[0].weight[o * 5 + new] = src[1].weight[o * 5 + old];
            }
        }
        // same function
        let obs = [0.2, -0.4, 0.9];
        let (ma, mb) = (a.mean(&obs), b.mean(&obs));
        for (x, y) in ma.iter().zip(&mb) {
            assert!((x - y).abs() < 1e-12);
        }
        let r = hungarian_distance(&flatten(&a), &flatten(&b)).unwrap();
        assert_eq!(r.layer("actor.0").unwrap().cost, 0.0);
        assert_eq!(r.layer("actor.0").unwrap().assignment, vec![1, 3, 4, 0, 2]);
    }

    #[test]
    fn single_weight_perturbation_costs_its_magnitude() {
        let a = policy(3);
        let mut b = a.clone();
        let eps = 1e-3;
        b.mean_net.layers[1].weight[7] += eps;
        let r = hungarian_distance(&flatten(&a), &flatten(&b)).unwrap();
        assert!((r.total - eps).abs() < 1e-12, "total = {}", r.total);
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let a = flatten(&policy(1));
        let spec = PolicySpec::actor_critic(3, 2, &[6, 4]).unwrap();
        let b = flatten(&GaussianPolicy::zeros(&spec));
        assert!(hungarian_distance(&a, &b).is_err());
    }

    proptest! {
        #[test]
        fn symmetric_and_nonnegative(s1 in any::<u64>(), s2 in any::<u64>()) {
            let a = flatten(&policy(s1));
            let b = flatten(&policy(s2));
            let ab = hungarian_distance(&a, &b).unwrap().total;
            let ba = hungarian_distance(&b, &a).unwrap().total;
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-9 * (1.0 + ab));
        }
    }
}
