//! Regular-vine copulas: sequential structure selection, density,
//! Rosenblatt and inverse-Rosenblatt transforms, and sampling.
//!
//! Tree 1 is the maximum spanning tree on |Kendall tau|; deeper trees are
//! chosen greedily on h-transformed pseudo-observations under the proximity
//! condition (two edges may be joined only if they share a node). Each edge
//! carries one fitted pair copula, so a d-dimensional model has d(d-1)/2
//! pair copulas.

use serde::{Deserialize, Serialize};

use super::bivariate::{fit_bivariate, kendall_tau, BivariateCopula, CopulaError};
use crate::ecdf::{pseudo_observations, EmpiricalCdf};

/// Which conditional a parent edge supplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Side {
    /// F(a | D u {b}) of the parent edge.
    AGivenRest,
    /// F(b | D u {a}) of the parent edge.
    BGivenRest,
}

/// One edge of a vine tree.
#[derive(Debug, Clone)]
pub struct VineEdge {
    /// Endpoints in the node space of this tree (variables for tree 0,
    /// previous-tree edge indices above).
    pub node_u: usize,
    pub node_v: usize,
    /// Conditioned variable pair (from the `node_u` side, `node_v` side).
    pub cond: (u8, u8),
    /// Conditioning set, sorted.
    pub conditioning: Vec<u8>,
    /// Pair copula on (F(a|D), F(b|D)).
    pub copula: BivariateCopula,
    parent_a: Option<(usize, Side)>,
    parent_b: Option<(usize, Side)>,
}

impl VineEdge {
    /// Complete union: conditioned pair plus conditioning set.
    fn union_set(&self) -> Vec<u8> {
        let mut s = self.conditioning.clone();
        s.push(self.cond.0);
        s.push(self.cond.1);
        s.sort_unstable();
        s
    }
}

/// Step of the sampling order: peel variable `var` off through `edge` of
/// `tree`.
#[derive(Debug, Clone)]
struct PeelStep {
    tree: usize,
    edge: usize,
    var: u8,
}

/// Fitted regular vine on uniform margins.
#[derive(Debug, Clone)]
pub struct VineCopula {
    pub dim: usize,
    pub trees: Vec<Vec<VineEdge>>,
    /// Peel order: steps for k = d down to 2; `order_first` is the variable
    /// left over at the end (the first in sampling order).
    peel: Vec<PeelStep>,
    order_first: u8,
}

/// Per-edge values of a forward evaluation pass.
#[derive(Debug, Clone, Copy, Default)]
struct EdgeValues {
    z_a: f64,
    z_b: f64,
    h_a_given_rest: f64,
    h_b_given_rest: f64,
}

impl VineCopula {
    /// Builds a vine from explicit tree structure: per tree a list of
    /// (node_u, node_v, copula) with node indices into the previous tree's
    /// edge list (variables for tree 0). Validates the proximity condition.
    pub fn from_structure(
        dim: usize,
        structure: Vec<Vec<(usize, usize, BivariateCopula)>>,
    ) -> Result<Self, CopulaError> {
        if dim < 2 {
            return Err(CopulaError::TooFewDimensions(dim));
        }
        let invalid = |msg: &str| CopulaError::InvalidParameter {
            family: "vine".into(),
            message: msg.into(),
        };
        if structure.len() != dim - 1 {
            return Err(invalid(&format!("expected {} trees, got {}", dim - 1, structure.len())));
        }
        let mut trees: Vec<Vec<VineEdge>> = Vec::with_capacity(dim - 1);
        for (t, level) in structure.into_iter().enumerate() {
            if level.len() != dim - 1 - t {
                return Err(invalid(&format!("tree {t} must have {} edges", dim - 1 - t)));
            }
            let mut edges = Vec::with_capacity(level.len());
            for (node_u, node_v, copula) in level {
                let edge = if t == 0 {
                    if node_u >= dim || node_v >= dim || node_u == node_v {
                        return Err(invalid("tree 0 nodes must be distinct variables"));
                    }
                    VineEdge {
                        node_u,
                        node_v,
                        cond: (node_u as u8, node_v as u8),
                        conditioning: Vec::new(),
                        copula,
                        parent_a: None,
                        parent_b: None,
                    }
                } else {
                    let prev: &Vec<VineEdge> = &trees[t - 1];
                    if node_u >= prev.len() || node_v >= prev.len() || node_u == node_v {
                        return Err(invalid("node indices out of range"));
                    }
                    derive_edge(prev, node_u, node_v, copula)
                        .ok_or_else(|| invalid("proximity condition violated"))?
                };
                edges.push(edge);
            }
            trees.push(edges);
        }
        let (peel, order_first) = build_peel_order(dim, &trees)
            .ok_or_else(|| invalid("structure admits no sampling order"))?;
        Ok(VineCopula { dim, trees, peel, order_first })
    }

    /// Fits structure and pair copulas to an `n x d` matrix of uniforms
    /// given as `d` columns.
    pub fn fit(columns: &[Vec<f64>]) -> Result<Self, CopulaError> {
        let dim = columns.len();
        if dim < 2 {
            return Err(CopulaError::TooFewDimensions(dim));
        }
        let n = columns[0].len();
        if columns.iter().any(|c| c.len() != n) {
            return Err(CopulaError::LengthMismatch(n, 0));
        }

        // tree 0: nodes are variables carrying their own pseudo-observations
        let mut node_sets: Vec<Vec<u8>> = (0..dim).map(|i| vec![i as u8]).collect();
        // per node: (F(a|rest) array stand-ins) for tree 0 both sides equal
        struct NodeObs {
            a: Vec<f64>,
            b: Vec<f64>,
            cond: (u8, u8),
        }
        let mut node_obs: Vec<NodeObs> = columns
            .iter()
            .enumerate()
            .map(|(i, c)| NodeObs { a: c.clone(), b: c.clone(), cond: (i as u8, i as u8) })
            .collect();
        fn pick_obs(obs: &NodeObs, var: u8) -> &[f64] {
            if var == obs.cond.0 {
                &obs.a
            } else {
                debug_assert_eq!(var, obs.cond.1);
                &obs.b
            }
        }

        let mut trees: Vec<Vec<VineEdge>> = Vec::new();
        for t in 0..dim - 1 {
            let n_nodes = node_sets.len();
            // candidate edges under proximity, weighted by |tau|
            let mut candidates: Vec<(f64, usize, usize, Vec<f64>, Vec<f64>)> = Vec::new();
            for i in 0..n_nodes {
                for j in (i + 1)..n_nodes {
                    if t > 0 {
                        let (eu_i, ev_i) = (trees[t - 1][i].node_u, trees[t - 1][i].node_v);
                        let (eu_j, ev_j) = (trees[t - 1][j].node_u, trees[t - 1][j].node_v);
                        let share =
                            eu_i == eu_j || eu_i == ev_j || ev_i == eu_j || ev_i == ev_j;
                        if !share {
                            continue;
                        }
                    }
                    let (za, zb) = match conditioned_pair(&node_sets[i], &node_sets[j]) {
                        Some(pair) => pair,
                        None => continue,
                    };
                    let zi = pick_obs(&node_obs[i], za);
                    let zj = pick_obs(&node_obs[j], zb);
                    let tau = kendall_tau(zi, zj)?;
                    candidates.push((tau.abs(), i, j, zi.to_vec(), zj.to_vec()));
                }
            }

            // maximum spanning tree over nodes (Prim, deterministic ties)
            let mut in_tree = vec![false; n_nodes];
            in_tree[0] = true;
            let mut chosen: Vec<(usize, usize, Vec<f64>, Vec<f64>)> = Vec::new();
            while chosen.len() < n_nodes - 1 {
                let mut best: Option<&(f64, usize, usize, Vec<f64>, Vec<f64>)> = None;
                for cand in &candidates {
                    let (w, i, j, _, _) = (cand.0, cand.1, cand.2, (), ());
                    if in_tree[i] == in_tree[j] {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some(b) => w > b.0 + 1e-15 || ((w - b.0).abs() <= 1e-15 && (i, j) < (b.1, b.2)),
                    };
                    if better {
                        best = Some(cand);
                    }
                }
                let (_, i, j, zi, zj) =
                    best.expect("proximity graph of a tree is connected");
                in_tree[*i] = true;
                in_tree[*j] = true;
                chosen.push((*i, *j, zi.clone(), zj.clone()));
            }
            // stable edge order
            chosen.sort_by_key(|&(i, j, _, _)| (i, j));

            let mut edges: Vec<VineEdge> = Vec::with_capacity(n_nodes - 1);
            let mut new_sets: Vec<Vec<u8>> = Vec::new();
            let mut new_obs: Vec<NodeObs> = Vec::new();
            for (i, j, zi, zj) in chosen {
                let report = fit_bivariate(&zi, &zj)?;
                let copula = report.copula;
                let (a, b) = conditioned_pair(&node_sets[i], &node_sets[j])
                    .expect("candidate pairs share all but one variable");
                let mut conditioning: Vec<u8> = node_sets[i]
                    .iter()
                    .cloned()
                    .filter(|x| node_sets[j].contains(x))
                    .collect();
                conditioning.sort_unstable();
                let edge = VineEdge {
                    node_u: i,
                    node_v: j,
                    cond: (a, b),
                    conditioning,
                    parent_a: if t == 0 { None } else { Some((i, side_of(&trees[t - 1][i], a))) },
                    parent_b: if t == 0 { None } else { Some((j, side_of(&trees[t - 1][j], b))) },
                    copula: copula.clone(),
                };
                // propagate pseudo-observations
                let ha: Vec<f64> =
                    zi.iter().zip(&zj).map(|(&x, &y)| copula.h1(x, y)).collect();
                let hb: Vec<f64> =
                    zi.iter().zip(&zj).map(|(&x, &y)| copula.h2(y, x)).collect();
                new_obs.push(NodeObs { a: ha, b: hb, cond: (a, b) });
                new_sets.push(edge.union_set());
                edges.push(edge);
            }
            trees.push(edges);
            node_sets = new_sets;
            node_obs = new_obs;
        }

        let (peel, order_first) =
            build_peel_order(dim, &trees).expect("fitted vine admits a sampling order");
        Ok(VineCopula { dim, trees, peel, order_first })
    }

    /// Total number of pair copulas, `d (d - 1) / 2`.
    pub fn n_pair_copulas(&self) -> usize {
        self.trees.iter().map(|t| t.len()).sum()
    }

    fn forward_pass(&self, u: &[f64]) -> Vec<Vec<EdgeValues>> {
        let mut values: Vec<Vec<EdgeValues>> = Vec::with_capacity(self.trees.len());
        for (t, tree) in self.trees.iter().enumerate() {
            let mut level = Vec::with_capacity(tree.len());
            for edge in tree {
                let z_a = match edge.parent_a {
                    None => u[edge.cond.0 as usize],
                    Some((p, side)) => read_side(&values[t - 1][p], side),
                };
                let z_b = match edge.parent_b {
                    None => u[edge.cond.1 as usize],
                    Some((p, side)) => read_side(&values[t - 1][p], side),
                };
                level.push(EdgeValues {
                    z_a,
                    z_b,
                    h_a_given_rest: edge.copula.h1(z_a, z_b),
                    h_b_given_rest: edge.copula.h2(z_b, z_a),
                });
            }
            values.push(level);
        }
        values
    }

    /// Vine density at a point of the unit hypercube.
    pub fn density(&self, u: &[f64]) -> f64 {
        self.log_density(u).exp()
    }

    pub fn log_density(&self, u: &[f64]) -> f64 {
        assert_eq!(u.len(), self.dim);
        let values = self.forward_pass(u);
        let mut acc = 0.0;
        for (t, tree) in self.trees.iter().enumerate() {
            for (e, edge) in tree.iter().enumerate() {
                let v = &values[t][e];
                acc += edge.copula.density(v.z_a, v.z_b).max(1e-300).ln();
            }
        }
        acc
    }

    /// Maps dependent uniforms to independent uniforms via sequential
    /// conditional CDFs. Component `j` of the result conditions variable `j`
    /// on the variables preceding it in the vine's sampling order, so the
    /// map is the identity for an all-independence vine.
    pub fn rosenblatt(&self, u_hat: &[f64]) -> Vec<f64> {
        assert_eq!(u_hat.len(), self.dim);
        let values = self.forward_pass(u_hat);
        let mut w = vec![0.0; self.dim];
        w[self.order_first as usize] = u_hat[self.order_first as usize];
        for step in &self.peel {
            let edge = &self.trees[step.tree][step.edge];
            let v = &values[step.tree][step.edge];
            w[step.var as usize] = if step.var == edge.cond.0 {
                v.h_a_given_rest
            } else {
                v.h_b_given_rest
            };
        }
        w
    }

    /// Inverse of [`Self::rosenblatt`]: turns independent uniforms into
    /// dependent uniforms with the vine's law.
    pub fn inverse_rosenblatt(&self, w: &[f64]) -> Vec<f64> {
        assert_eq!(w.len(), self.dim);
        let mut u_hat = vec![f64::NAN; self.dim];
        let mut assigned = vec![false; self.dim];
        u_hat[self.order_first as usize] = w[self.order_first as usize];
        assigned[self.order_first as usize] = true;

        let mut memo: Vec<Vec<Option<EdgeValues>>> =
            self.trees.iter().map(|t| vec![None; t.len()]).collect();

        // peel steps were recorded top-down; invert bottom-up
        for step in self.peel.iter().rev() {
            let x = step.var;
            let mut p = w[x as usize];
            let (mut t, mut e) = (step.tree, step.edge);
            loop {
                let edge = &self.trees[t][e];
                let x_is_a = x == edge.cond.0;
                let other_z = if t == 0 {
                    let other = if x_is_a { edge.cond.1 } else { edge.cond.0 };
                    u_hat[other as usize]
                } else {
                    let (parent, side) = if x_is_a { edge.parent_b } else { edge.parent_a }
                        .expect("deep edges have parents");
                    read_side(
                        &memo[t - 1][parent].expect("conditioning values already computed"),
                        side,
                    )
                };
                p = if x_is_a {
                    edge.copula.h1_inv(p, other_z)
                } else {
                    edge.copula.h2_inv(p, other_z)
                };
                if t == 0 {
                    u_hat[x as usize] = p;
                    assigned[x as usize] = true;
                    break;
                }
                let (parent, _) = if x_is_a { edge.parent_a } else { edge.parent_b }
                    .expect("deep edges have parents");
                t -= 1;
                e = parent;
            }
            // refresh memo for every edge whose variables are all assigned
            for t in 0..self.trees.len() {
                for (e, edge) in self.trees[t].iter().enumerate() {
                    if memo[t][e].is_some() {
                        continue;
                    }
                    if !edge.union_set().iter().all(|&v| assigned[v as usize]) {
                        continue;
                    }
                    let z_a = match edge.parent_a {
                        None => u_hat[edge.cond.0 as usize],
                        Some((p_idx, side)) => match memo[t - 1][p_idx] {
                            Some(ref vals) => read_side(vals, side),
                            None => continue,
                        },
                    };
                    let z_b = match edge.parent_b {
                        None => u_hat[edge.cond.1 as usize],
                        Some((p_idx, side)) => match memo[t - 1][p_idx] {
                            Some(ref vals) => read_side(vals, side),
                            None => continue,
                        },
                    };
                    memo[t][e] = Some(EdgeValues {
                        z_a,
                        z_b,
                        h_a_given_rest: edge.copula.h1(z_a, z_b),
                        h_b_given_rest: edge.copula.h2(z_b, z_a),
                    });
                }
            }
        }
        u_hat
    }
}

fn read_side(values: &EdgeValues, side: Side) -> f64 {
    match side {
        Side::AGivenRest => values.h_a_given_rest,
        Side::BGivenRest => values.h_b_given_rest,
    }
}

fn side_of(parent: &VineEdge, var: u8) -> Side {
    if parent.cond.0 == var {
        Side::AGivenRest
    } else {
        debug_assert_eq!(parent.cond.1, var);
        Side::BGivenRest
    }
}

/// Exclusive variables of two node sets differing in exactly one element.
fn conditioned_pair(set_i: &[u8], set_j: &[u8]) -> Option<(u8, u8)> {
    let a: Vec<u8> = set_i.iter().cloned().filter(|x| !set_j.contains(x)).collect();
    let b: Vec<u8> = set_j.iter().cloned().filter(|x| !set_i.contains(x)).collect();
    if a.len() == 1 && b.len() == 1 {
        Some((a[0], b[0]))
    } else {
        None
    }
}

fn derive_edge(
    prev: &[VineEdge],
    node_u: usize,
    node_v: usize,
    copula: BivariateCopula,
) -> Option<VineEdge> {
    let set_u = prev[node_u].union_set();
    let set_v = prev[node_v].union_set();
    let (a, b) = conditioned_pair(&set_u, &set_v)?;
    // the new conditioned variables must be conditioned in their parents
    if prev[node_u].cond.0 != a && prev[node_u].cond.1 != a {
        return None;
    }
    if prev[node_v].cond.0 != b && prev[node_v].cond.1 != b {
        return None;
    }
    let mut conditioning: Vec<u8> =
        set_u.iter().cloned().filter(|x| set_v.contains(x)).collect();
    conditioning.sort_unstable();
    Some(VineEdge {
        node_u,
        node_v,
        cond: (a, b),
        conditioning,
        parent_a: Some((node_u, side_of(&prev[node_u], a))),
        parent_b: Some((node_v, side_of(&prev[node_v], b))),
        copula,
    })
}

/// Builds the peel (sampling) order: repeatedly take the unique top edge of
/// the sub-vine on the remaining variables and remove one of its conditioned
/// variables.
fn build_peel_order(dim: usize, trees: &[Vec<VineEdge>]) -> Option<(Vec<PeelStep>, u8)> {
    let mut remaining: Vec<u8> = (0..dim as u8).collect();
    let mut steps = Vec::with_capacity(dim - 1);
    for k in (2..=dim).rev() {
        let t = k - 2;
        let mut found: Option<(usize, &VineEdge)> = None;
        for (e, edge) in trees[t].iter().enumerate() {
            if edge.union_set().iter().all(|v| remaining.contains(v)) {
                if found.is_some() {
                    return None;
                }
                found = Some((e, edge));
            }
        }
        let (e, edge) = found?;
        // deterministic choice: peel the larger conditioned variable
        let var = edge.cond.0.max(edge.cond.1);
        steps.push(PeelStep { tree: t, edge: e, var });
        remaining.retain(|&v| v != var);
    }
    debug_assert_eq!(remaining.len(), 1);
    // steps were recorded from the top tree down; store in that order
    Some((steps, remaining[0]))
}

/// Vine copula plus marginal distributions: the full multivariate model.
#[derive(Debug, Clone)]
pub struct VineModel {
    pub vine: VineCopula,
    pub marginals: Vec<EmpiricalCdf>,
}

impl VineModel {
    /// Fits marginals (empirical) and the vine (on pseudo-observations) to
    /// data columns.
    pub fn fit(columns: &[Vec<f64>]) -> Result<Self, CopulaError> {
        let pseudo: Vec<Vec<f64>> =
            columns.iter().map(|c| pseudo_observations(c)).collect();
        let vine = VineCopula::fit(&pseudo)?;
        let marginals = columns.iter().map(|c| EmpiricalCdf::new(c.clone())).collect();
        Ok(VineModel { vine, marginals })
    }

    /// Maps independent uniforms to a sample of the target variables:
    /// inverse Rosenblatt into dependent uniforms, then marginal inverse
    /// CDFs.
    pub fn sample_y(&self, u: &[f64]) -> Vec<f64> {
        let u_hat = self.vine.inverse_rosenblatt(u);
        u_hat
            .iter()
            .zip(&self.marginals)
            .map(|(&uh, m)| m.quantile(uh))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// persistence

#[derive(Serialize, Deserialize)]
struct EdgeSpec {
    node_u: usize,
    node_v: usize,
    copula: BivariateCopula,
}

/// Serialized form of a [`VineModel`].
#[derive(Serialize, Deserialize)]
pub struct VineModelSpec {
    pub schema_version: u32,
    pub dim: usize,
    trees: Vec<Vec<EdgeSpec>>,
    marginals: Vec<Vec<f64>>,
}

pub const VINE_SCHEMA_VERSION: u32 = 1;

impl VineModel {
    pub fn to_spec(&self) -> VineModelSpec {
        VineModelSpec {
            schema_version: VINE_SCHEMA_VERSION,
            dim: self.vine.dim,
            trees: self
                .vine
                .trees
                .iter()
                .map(|tree| {
                    tree.iter()
                        .map(|e| EdgeSpec {
                            node_u: e.node_u,
                            node_v: e.node_v,
                            copula: e.copula.clone(),
                        })
                        .collect()
                })
                .collect(),
            marginals: self.marginals.iter().map(|m| m.values().to_vec()).collect(),
        }
    }

    pub fn from_spec(spec: VineModelSpec) -> Result<Self, CopulaError> {
        if spec.schema_version != VINE_SCHEMA_VERSION {
            return Err(CopulaError::InvalidParameter {
                family: "vine".into(),
                message: format!("unsupported schema version {}", spec.schema_version),
            });
        }
        let structure: Vec<Vec<(usize, usize, BivariateCopula)>> = spec
            .trees
            .into_iter()
            .map(|tree| tree.into_iter().map(|e| (e.node_u, e.node_v, e.copula)).collect())
            .collect();
        let vine = VineCopula::from_structure(spec.dim, structure)?;
        let marginals = spec.marginals.into_iter().map(EmpiricalCdf::new).collect();
        Ok(VineModel { vine, marginals })
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<(), CopulaError> {
        let json = serde_json::to_string(&self.to_spec())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self, CopulaError> {
        let spec: VineModelSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_spec(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::copula::bivariate::{Family, Rotation};
    use crate::rng::substream;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn gaussian_pair(rho: f64) -> BivariateCopula {
        BivariateCopula::new(Family::Gaussian { rho }, Rotation::R0).unwrap()
    }

    fn independence_vine(dim: usize) -> VineCopula {
        // D-vine path 0-1-...-d-1, all pairs independent
        let mut structure = Vec::new();
        structure.push(
            (0..dim - 1)
                .map(|i| (i, i + 1, BivariateCopula::independence()))
                .collect::<Vec<_>>(),
        );
        for t in 1..dim - 1 {
            structure.push(
                (0..dim - 1 - t)
                    .map(|i| (i, i + 1, BivariateCopula::independence()))
                    .collect(),
            );
        }
        VineCopula::from_structure(dim, structure).unwrap()
    }

    #[test]
    fn independence_vine_has_unit_density_and_identity_transforms() {
        let vine = independence_vine(5);
        assert_eq!(vine.n_pair_copulas(), 10);
        let mut rng = substream(1, 0);
        for _ in 0..50 {
            let u: Vec<f64> = (0..5).map(|_| rng.gen()).collect();
            assert_relative_eq!(vine.density(&u), 1.0, epsilon = 1e-9);
            let w = vine.rosenblatt(&u);
            let back = vine.inverse_rosenblatt(&u);
            for j in 0..5 {
                assert_relative_eq!(w[j], u[j], epsilon = 1e-9);
                assert_relative_eq!(back[j], u[j], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn two_dimensional_vine_is_a_single_pair() {
        let mut rng = substream(2, 0);
        let truth = gaussian_pair(0.6);
        let n = 2000;
        let mut cols = vec![Vec::with_capacity(n), Vec::with_capacity(n)];
        for _ in 0..n {
            let v: f64 = rng.gen();
            let p: f64 = rng.gen();
            cols[0].push(truth.h1_inv(p, v));
            cols[1].push(v);
        }
        let vine = VineCopula::fit(&cols).unwrap();
        assert_eq!(vine.trees.len(), 1);
        assert_eq!(vine.trees[0].len(), 1);
        assert_eq!(vine.n_pair_copulas(), 1);
    }

    /// Trivariate Gaussian copula density, the closed-form factorization
    /// oracle for a Gaussian D-vine.
    fn trivariate_gaussian_copula_density(u: &[f64; 3], r01: f64, r12: f64, r02: f64) -> f64 {
        use statrs::distribution::{ContinuousCDF, Normal};
        let n = Normal::new(0.0, 1.0).unwrap();
        let x: Vec<f64> = u.iter().map(|&ui| n.inverse_cdf(ui)).collect();
        // correlation matrix determinant and inverse (3x3, symmetric)
        let det = 1.0 + 2.0 * r01 * r12 * r02 - r01 * r01 - r12 * r12 - r02 * r02;
        let inv = [
            [(1.0 - r12 * r12) / det, (r02 * r12 - r01) / det, (r01 * r12 - r02) / det],
            [(r02 * r12 - r01) / det, (1.0 - r02 * r02) / det, (r01 * r02 - r12) / det],
            [(r01 * r12 - r02) / det, (r01 * r02 - r12) / det, (1.0 - r01 * r01) / det],
        ];
        let mut quad = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let delta = if i == j { 1.0 } else { 0.0 };
                quad += x[i] * (inv[i][j] - delta) * x[j];
            }
        }
        (-0.5 * quad).exp() / det.sqrt()
    }

    #[test]
    fn gaussian_d_vine_density_matches_trivariate_closed_form() {
        let (r01, r12, r02_cond) = (0.65f64, 0.4f64, 0.3f64);
        // implied unconditional correlation of the (0,2) pair
        let r02 = r02_cond * ((1.0 - r01 * r01) * (1.0 - r12 * r12)).sqrt() + r01 * r12;
        let vine = VineCopula::from_structure(
            3,
            vec![
                vec![(0, 1, gaussian_pair(r01)), (1, 2, gaussian_pair(r12))],
                vec![(0, 1, gaussian_pair(r02_cond))],
            ],
        )
        .unwrap();
        for i in 1..=10 {
            for j in 1..=10 {
                for k in 1..=10 {
                    let u = [i as f64 / 11.0, j as f64 / 11.0, k as f64 / 11.0];
                    let direct = trivariate_gaussian_copula_density(&u, r01, r12, r02);
                    let vined = vine.density(&u);
                    assert_relative_eq!(vined, direct, max_relative = 1e-6);
                }
            }
        }
    }

    #[test]
    fn density_mc_integrates_to_one_on_3dim_model() {
        let vine = VineCopula::from_structure(
            3,
            vec![
                vec![
                    (0, 1, BivariateCopula::new(Family::Clayton { theta: 2.0 }, Rotation::R0).unwrap()),
                    (1, 2, gaussian_pair(0.5)),
                ],
                vec![(0, 1, BivariateCopula::new(Family::Frank { theta: 3.0 }, Rotation::R0).unwrap())],
            ],
        )
        .unwrap();
        let mut rng = substream(9, 0);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let u = [rng.gen(), rng.gen(), rng.gen()];
            acc += vine.density(&u);
        }
        let integral = acc / n as f64;
        assert!((integral - 1.0).abs() < 0.01, "MC integral {integral}");
    }

    #[test]
    fn fitted_tree1_connects_strongest_pairs() {
        let truth = VineCopula::from_structure(
            3,
            vec![
                vec![(0, 1, gaussian_pair(0.8)), (1, 2, gaussian_pair(0.6))],
                vec![(0, 1, gaussian_pair(0.3))],
            ],
        )
        .unwrap();
        let mut rng = substream(21, 0);
        let n = 3000;
        let mut cols = vec![Vec::new(), Vec::new(), Vec::new()];
        for _ in 0..n {
            let w: Vec<f64> = (0..3).map(|_| rng.gen()).collect();
            let u = truth.inverse_rosenblatt(&w);
            for j in 0..3 {
                cols[j].push(u[j]);
            }
        }
        // the maximum spanning tree must pick the two highest-|tau| pairs
        let mut taus: Vec<(f64, (u8, u8))> = Vec::new();
        for i in 0..3u8 {
            for j in (i + 1)..3 {
                let t = kendall_tau(&cols[i as usize], &cols[j as usize]).unwrap();
                taus.push((t.abs(), (i, j)));
            }
        }
        taus.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut expected = vec![taus[0].1, taus[1].1];
        expected.sort_unstable();
        let fitted = VineCopula::fit(&cols).unwrap();
        let mut edges: Vec<(u8, u8)> = fitted.trees[0]
            .iter()
            .map(|e| (e.cond.0.min(e.cond.1), e.cond.0.max(e.cond.1)))
            .collect();
        edges.sort_unstable();
        assert_eq!(edges, expected);
    }

    #[test]
    fn rosenblatt_round_trip_on_fitted_model() {
        let (ens_cols, _) = synthetic_5d_data(4000, 31);
        let model = VineModel::fit(&ens_cols).unwrap();
        let mut rng = substream(32, 0);
        let mut max_err = 0.0f64;
        for _ in 0..1000 {
            let w: Vec<f64> = (0..5).map(|_| rng.gen()).collect();
            let u_hat = model.vine.inverse_rosenblatt(&w);
            let back = model.vine.rosenblatt(&u_hat);
            for j in 0..5 {
                max_err = max_err.max((back[j] - w[j]).abs());
            }
        }
        assert!(max_err <= 1e-6, "round-trip max error {max_err}");
    }

    #[test]
    fn pushforward_reproduces_kendall_tau_matrix() {
        let (cols, _) = synthetic_5d_data(4000, 41);
        let model = VineModel::fit(&cols).unwrap();
        let mut rng = substream(42, 0);
        let n = 10_000;
        let mut sampled: Vec<Vec<f64>> = vec![Vec::with_capacity(n); 5];
        for _ in 0..n {
            let w: Vec<f64> = (0..5).map(|_| rng.gen()).collect();
            let u = model.vine.inverse_rosenblatt(&w);
            for j in 0..5 {
                sampled[j].push(u[j]);
            }
        }
        for i in 0..5 {
            for j in (i + 1)..5 {
                let tau_data = kendall_tau(&cols[i], &cols[j]).unwrap();
                let tau_model = kendall_tau(&sampled[i], &sampled[j]).unwrap();
                assert!(
                    (tau_data - tau_model).abs() <= 0.05,
                    "tau({i},{j}): data {tau_data} vs model {tau_model}"
                );
            }
        }
    }

    #[test]
    fn sample_y_is_deterministic_and_hits_medians_under_independence() {
        let (cols, _) = synthetic_5d_data(500, 51);
        let model = VineModel::fit(&cols).unwrap();
        let u = vec![0.31, 0.62, 0.11, 0.84, 0.5];
        assert_eq!(model.sample_y(&u), model.sample_y(&u));

        let indep = VineModel {
            vine: independence_vine(5),
            marginals: cols.iter().map(|c| EmpiricalCdf::new(c.clone())).collect(),
        };
        let y = indep.sample_y(&[0.5; 5]);
        for (j, m) in indep.marginals.iter().enumerate() {
            assert_relative_eq!(y[j], m.quantile(0.5), epsilon = 1e-12);
        }
    }

    #[test]
    fn marginal_ranks_of_joint_samples_are_uniform() {
        let (cols, _) = synthetic_5d_data(2000, 61);
        let model = VineModel::fit(&cols).unwrap();
        let mut rng = substream(62, 0);
        let n = 10_000;
        let mut sampled: Vec<Vec<f64>> = vec![Vec::with_capacity(n); 5];
        for _ in 0..n {
            let w: Vec<f64> = (0..5).map(|_| rng.gen()).collect();
            let u = model.vine.inverse_rosenblatt(&w);
            for j in 0..5 {
                sampled[j].push(u[j]);
            }
        }
        for col in &sampled {
            // KS statistic against the uniform CDF
            let mut s = col.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut ks = 0.0f64;
            for (i, &x) in s.iter().enumerate() {
                let ecdf_hi = (i + 1) as f64 / n as f64;
                let ecdf_lo = i as f64 / n as f64;
                ks = ks.max((ecdf_hi - x).abs()).max((x - ecdf_lo).abs());
            }
            assert!(ks <= 0.02, "uniformity KS {ks}");
        }
    }

    #[test]
    fn json_round_trip_preserves_behavior() {
        let (cols, _) = synthetic_5d_data(400, 71);
        let model = VineModel::fit(&cols).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vine.json");
        model.save_json(&path).unwrap();
        let loaded = VineModel::load_json(&path).unwrap();
        let u = vec![0.2, 0.9, 0.4, 0.6, 0.7];
        assert_eq!(model.sample_y(&u), loaded.sample_y(&u));
        assert_relative_eq!(
            model.vine.density(&u),
            loaded.vine.density(&u),
            max_relative = 1e-12
        );
    }

    /// Correlated 5-dim test data with nontrivial margins.
    fn synthetic_5d_data(n: usize, seed: u64) -> (Vec<Vec<f64>>, ()) {
        let mut rng = substream(seed, 0);
        let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); 5];
        for _ in 0..n {
            let z0: f64 = rng.gen();
            let z1: f64 = rng.gen();
            let z2: f64 = rng.gen();
            let z3: f64 = rng.gen();
            let z4: f64 = rng.gen();
            let a = z0;
            let b = 0.7 * z0 + 0.3 * z1;
            let c = 0.5 * z1 + 0.5 * z2;
            let d = 0.6 * b + 0.4 * z3;
            let e = 0.3 * c + 0.7 * z4;
            cols[0].push((a * 3.0).exp());
            cols[1].push(b.powi(2) + 0.1);
            cols[2].push(c.ln_1p());
            cols[3].push(d - 0.5);
            cols[4].push(e.sqrt());
        }
        (cols, ())
    }
}
