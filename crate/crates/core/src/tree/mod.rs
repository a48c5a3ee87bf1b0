//! Exact inference on tree-structured factor graphs over discrete variables:
//! sum-product in log-space, singleton/pairwise beliefs with the exact
//! log-partition, the analytic tree KL decomposition, and ancestral sampling
//! through the Gumbel-Softmax relaxation.

pub mod gaussian;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{gumbel, Prng};
use crate::tensor::{log_sum_exp, Tensor};

/// Pairwise tree over discrete variables. Edges are stored as
/// `(parent, child)` pairs whose potential table is `[card_parent, card_child]`;
/// node 0 is the root of the message schedule (any root yields the same
/// beliefs).
#[derive(Debug, Clone)]
pub struct TreeFactorGraph {
    pub cardinalities: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    /// `log psi_i`, one `[card_i]` vector per node.
    pub log_singleton: Vec<Tensor>,
    /// `log psi_ij`, one `[card_i, card_j]` table per edge.
    pub log_pairwise: Vec<Tensor>,
}

/// On-disk tree description.
#[derive(Serialize, Deserialize)]
struct TreeFile {
    cardinalities: Vec<usize>,
    edges: Vec<(usize, usize)>,
    log_psi_singleton: Vec<Vec<f64>>,
    log_psi_pairwise: Vec<Vec<Vec<f64>>>,
}

impl TreeFactorGraph {
    pub fn new(
        cardinalities: Vec<usize>,
        edges: Vec<(usize, usize)>,
        log_singleton: Vec<Tensor>,
        log_pairwise: Vec<Tensor>,
    ) -> Result<Self> {
        let g = TreeFactorGraph {
            cardinalities,
            edges,
            log_singleton,
            log_pairwise,
        };
        g.validate()?;
        Ok(g)
    }

    /// Uniform (all-zero log-potential) graph over the given topology.
    pub fn uniform(cardinalities: Vec<usize>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let log_singleton = cardinalities
            .iter()
            .map(|&c| Tensor::zeros(&[c]))
            .collect();
        let log_pairwise = edges
            .iter()
            .map(|&(a, b)| Tensor::zeros(&[cardinalities[a], cardinalities[b]]))
            .collect();
        TreeFactorGraph::new(cardinalities, edges, log_singleton, log_pairwise)
    }

    pub fn node_count(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0usize; self.node_count()];
        for &(a, b) in &self.edges {
            d[a] += 1;
            d[b] += 1;
        }
        d
    }

    fn validate(&self) -> Result<()> {
        let n = self.node_count();
        if n == 0 {
            return Err(Error::MalformedTree("empty graph".into()));
        }
        if self.edges.len() != n - 1 {
            return Err(Error::MalformedTree(format!(
                "{} edges for {} nodes (tree needs n-1)",
                self.edges.len(),
                n
            )));
        }
        if self.log_singleton.len() != n || self.log_pairwise.len() != self.edges.len() {
            return Err(Error::MalformedTree("potential count mismatch".into()));
        }
        for (i, t) in self.log_singleton.iter().enumerate() {
            if t.shape != vec![self.cardinalities[i]] {
                return Err(Error::MalformedTree(format!(
                    "singleton table {i} has shape {:?}",
                    t.shape
                )));
            }
        }
        // Union-find connectivity; n-1 edges and connected implies acyclic.
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for (e, &(a, b)) in self.edges.iter().enumerate() {
            if a >= n || b >= n || a == b {
                return Err(Error::MalformedTree(format!("bad edge ({a}, {b})")));
            }
            if self.log_pairwise[e].shape != vec![self.cardinalities[a], self.cardinalities[b]] {
                return Err(Error::MalformedTree(format!(
                    "pairwise table {e} has shape {:?}",
                    self.log_pairwise[e].shape
                )));
            }
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra == rb {
                return Err(Error::MalformedTree(format!("cycle through edge ({a}, {b})")));
            }
            parent[ra] = rb;
        }
        let root = find(&mut parent, 0);
        for i in 1..n {
            if find(&mut parent, i) != root {
                return Err(Error::MalformedTree(format!("node {i} is disconnected")));
            }
        }
        Ok(())
    }

    pub fn same_structure(&self, other: &TreeFactorGraph) -> bool {
        self.cardinalities == other.cardinalities && self.edges == other.edges
    }

    /// A BFS edge schedule from node 0: `(edge_index, towards_child)` pairs
    /// ordered leaves-last; the inward pass runs it reversed.
    fn rooted_order(&self) -> Vec<(usize, bool)> {
        let n = self.node_count();
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n]; // (neighbor, edge)
        for (e, &(a, b)) in self.edges.iter().enumerate() {
            adj[a].push((b, e));
            adj[b].push((a, e));
        }
        let mut order = Vec::with_capacity(self.edges.len());
        let mut seen = vec![false; n];
        let mut queue = std::collections::VecDeque::new();
        queue.push_back(0usize);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for &(j, e) in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    // `towards_child` is true when the edge's stored (parent,
                    // child) orientation matches the traversal direction.
                    order.push((e, self.edges[e].0 == i));
                    queue.push_back(j);
                }
            }
        }
        order
    }

    /// Exhaustive enumeration of the unnormalized log-joint over all states;
    /// the reference route the message-passing path is validated against.
    pub fn enumerate_log_joint(&self) -> Result<Vec<f64>> {
        let mut states: u64 = 1;
        for &c in &self.cardinalities {
            states = states.saturating_mul(c as u64);
            if states > (1 << 22) {
                return Err(Error::TooLarge {
                    states,
                    limit: 1 << 22,
                });
            }
        }
        let n = self.node_count();
        let total = states as usize;
        let mut out = vec![0.0; total];
        let mut assign = vec![0usize; n];
        for (s, slot) in out.iter_mut().enumerate() {
            let mut rem = s;
            for i in 0..n {
                assign[i] = rem % self.cardinalities[i];
                rem /= self.cardinalities[i];
            }
            let mut lp = 0.0;
            for i in 0..n {
                lp += self.log_singleton[i].data[assign[i]];
            }
            for (e, &(a, b)) in self.edges.iter().enumerate() {
                lp += self.log_pairwise[e].at(assign[a], assign[b]);
            }
            *slot = lp;
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let file = TreeFile {
            cardinalities: self.cardinalities.clone(),
            edges: self.edges.clone(),
            log_psi_singleton: self.log_singleton.iter().map(|t| t.data.clone()).collect(),
            log_psi_pairwise: self
                .log_pairwise
                .iter()
                .map(|t| {
                    let (r, c) = (t.shape[0], t.shape[1]);
                    (0..r).map(|i| t.data[i * c..(i + 1) * c].to_vec()).collect()
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("tree serialization")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: TreeFile =
            serde_json::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let log_singleton = file
            .log_psi_singleton
            .into_iter()
            .map(Tensor::vector)
            .collect();
        let log_pairwise = file
            .log_psi_pairwise
            .into_iter()
            .map(|rows| {
                let r = rows.len();
                let c = rows.first().map(|x| x.len()).unwrap_or(0);
                Tensor::new(vec![r, c], rows.into_iter().flatten().collect())
            })
            .collect();
        TreeFactorGraph::new(file.cardinalities, file.edges, log_singleton, log_pairwise)
    }
}

/// Exact marginals from one inward-outward sweep: normalized singleton and
/// pairwise beliefs plus the log-partition.
#[derive(Debug, Clone)]
pub struct Beliefs {
    pub cardinalities: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    pub degrees: Vec<usize>,
    pub singleton: Vec<Tensor>,
    pub pairwise: Vec<Tensor>,
    pub log_partition: f64,
}

impl Beliefs {
    pub fn same_structure(&self, other: &Beliefs) -> bool {
        self.cardinalities == other.cardinalities && self.edges == other.edges
    }
}

/// Exact sum-product on a tree; all message arithmetic in log-space with
/// max-subtraction normalization.
pub fn sum_product(graph: &TreeFactorGraph) -> Result<Beliefs> {
    graph.validate()?;
    let n = graph.node_count();
    let cards = &graph.cardinalities;
    // msgs[2e] = message along edge e in (parent -> child) orientation,
    // msgs[2e+1] = reverse; each is a log-potential vector over the target.
    let mut msgs: Vec<Option<Tensor>> = vec![None; graph.edges.len() * 2];
    let order = graph.rooted_order();

    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (e, &(a, b)) in graph.edges.iter().enumerate() {
        adj[a].push((b, e));
        adj[b].push((a, e));
    }

    // Log-potential of source node plus all messages into it except the one
    // arriving along edge `skip`.
    let collect = |msgs: &[Option<Tensor>], i: usize, skip: Option<usize>| -> Tensor {
        let mut acc = graph.log_singleton[i].clone();
        for &(j, e) in &adj[i] {
            if Some(e) == skip {
                continue;
            }
            let slot = if graph.edges[e].0 == j { 2 * e } else { 2 * e + 1 };
            if let Some(m) = &msgs[slot] {
                for (a, b) in acc.data.iter_mut().zip(m.data.iter()) {
                    *a += b;
                }
            }
        }
        acc
    };

    let send = |msgs: &mut Vec<Option<Tensor>>, e: usize, towards_child: bool| {
        let (p, c) = graph.edges[e];
        let (src, dst) = if towards_child { (p, c) } else { (c, p) };
        let inc = collect(msgs, src, Some(e));
        let table = &graph.log_pairwise[e];
        let mut out = Tensor::zeros(&[cards[dst]]);
        for xd in 0..cards[dst] {
            let vals: Vec<f64> = (0..cards[src])
                .map(|xs| {
                    let t = if towards_child {
                        table.at(xs, xd)
                    } else {
                        table.at(xd, xs)
                    };
                    t + inc.data[xs]
                })
                .collect();
            out.data[xd] = log_sum_exp(&vals);
        }
        let slot = if towards_child { 2 * e } else { 2 * e + 1 };
        msgs[slot] = Some(out);
    };

    // Inward (leaves to root), then outward.
    for &(e, towards_child) in order.iter().rev() {
        send(&mut msgs, e, !towards_child);
    }
    for &(e, towards_child) in order.iter() {
        send(&mut msgs, e, towards_child);
    }

    let root_acc = collect(&msgs, 0, None);
    let log_partition = log_sum_exp(&root_acc.data);
    if !log_partition.is_finite() {
        return Err(Error::NonFinite("sum_product log-partition"));
    }

    let mut singleton = Vec::with_capacity(n);
    for i in 0..n {
        let acc = collect(&msgs, i, None);
        singleton.push(acc.map(|v| (v - log_partition).exp()));
    }
    let mut pairwise = Vec::with_capacity(graph.edges.len());
    for (e, &(a, b)) in graph.edges.iter().enumerate() {
        let acc_a = collect(&msgs, a, Some(e));
        let acc_b = collect(&msgs, b, Some(e));
        let table = &graph.log_pairwise[e];
        let mut out = Tensor::zeros(&[cards[a], cards[b]]);
        for xa in 0..cards[a] {
            for xb in 0..cards[b] {
                out.data[xa * cards[b] + xb] =
                    (table.at(xa, xb) + acc_a.data[xa] + acc_b.data[xb] - log_partition).exp();
            }
        }
        pairwise.push(out);
    }
    Ok(Beliefs {
        cardinalities: cards.clone(),
        edges: graph.edges.clone(),
        degrees: graph.degrees(),
        singleton,
        pairwise,
        log_partition,
    })
}

fn categorical_kl(q: &[f64], p: &[f64], what: &str) -> Result<f64> {
    let mut kl = 0.0;
    for (&qi, &pi) in q.iter().zip(p.iter()) {
        if qi <= 0.0 {
            continue;
        }
        if pi <= 0.0 {
            return Err(Error::InfiniteKL(what.to_string()));
        }
        kl += qi * (qi.ln() - pi.ln());
    }
    Ok(kl)
}

/// Analytic KL between two tree distributions with the same topology:
/// `sum_edges KL(b_ij^q || b_ij^p) - sum_i (d_i - 1) KL(b_i^q || b_i^p)`.
pub fn tree_kl(q: &Beliefs, p: &Beliefs) -> Result<f64> {
    if !q.same_structure(p) {
        return Err(Error::StructureMismatch(
            "tree_kl requires identical topology and cardinalities".into(),
        ));
    }
    let mut kl = 0.0;
    for (e, (bq, bp)) in q.pairwise.iter().zip(p.pairwise.iter()).enumerate() {
        kl += categorical_kl(&bq.data, &bp.data, &format!("pairwise belief {e}"))?;
    }
    for (i, (bq, bp)) in q.singleton.iter().zip(p.singleton.iter()).enumerate() {
        let w = q.degrees[i] as f64 - 1.0;
        if w != 0.0 {
            kl -= w * categorical_kl(&bq.data, &bp.data, &format!("singleton belief {i}"))?;
        }
    }
    Ok(kl)
}

/// One relaxed categorical draw: `softmax((log probs + gumbel) / temperature)`.
fn gumbel_softmax(log_probs: &[f64], temperature: f64, rng: &mut Prng) -> Tensor {
    let noisy: Vec<f64> = log_probs
        .iter()
        .map(|&lp| (lp + gumbel(rng)) / temperature)
        .collect();
    let lse = log_sum_exp(&noisy);
    Tensor::vector(noisy.iter().map(|&v| (v - lse).exp()).collect())
}

/// Ancestral Gumbel-Softmax sampling from tree beliefs: the root draws from
/// its marginal, children from `b_ij / b_i` conditionals weighted by the
/// relaxed parent sample. Returns one relaxed one-hot vector per node.
pub fn ancestral_sample(beliefs: &Beliefs, temperature: f64, rng: &mut Prng) -> Vec<Tensor> {
    assert!(temperature > 0.0, "temperature must be positive");
    let n = beliefs.cardinalities.len();
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (e, &(a, b)) in beliefs.edges.iter().enumerate() {
        adj[a].push((b, e));
        adj[b].push((a, e));
    }
    let mut out: Vec<Option<Tensor>> = vec![None; n];
    let root_logits: Vec<f64> = beliefs.singleton[0].data.iter().map(|&p| p.max(1e-300).ln()).collect();
    out[0] = Some(gumbel_softmax(&root_logits, temperature, rng));
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(0usize);
    let mut seen = vec![false; n];
    seen[0] = true;
    while let Some(i) = queue.pop_front() {
        for &(j, e) in &adj[i] {
            if seen[j] {
                continue;
            }
            seen[j] = true;
            let (pa, _ch) = beliefs.edges[e];
            let parent_vals = out[i].as_ref().unwrap().clone();
            let (ci, cj) = (beliefs.cardinalities[i], beliefs.cardinalities[j]);
            // log conditional of j given parent state, averaged under the
            // relaxed parent.
            let mut logits = vec![0.0; cj];
            for xj in 0..cj {
                let mut acc = 0.0;
                for xi in 0..ci {
                    let joint = if pa == i {
                        beliefs.pairwise[e].at(xi, xj)
                    } else {
                        beliefs.pairwise[e].at(xj, xi)
                    };
                    let cond = (joint.max(1e-300) / beliefs.singleton[i].data[xi].max(1e-300))
                        .max(1e-300)
                        .ln();
                    acc += parent_vals.data[xi] * cond;
                }
                logits[xj] = acc;
            }
            out[j] = Some(gumbel_softmax(&logits, temperature, rng));
            queue.push_back(j);
        }
    }
    out.into_iter().map(|t| t.unwrap()).collect()
}

/// Hard transformation of relaxed samples: `0.5 (sign(z - 0.5) + 1)` on the
/// forward value, with sign(0) = 0 so exactly-0.5 entries pass through.
pub fn hard_sample(z: &Tensor) -> Tensor {
    debug_assert!(z.data.iter().all(|&v| (-1e-9..=1.0 + 1e-9).contains(&v)));
    z.map(|x| {
        let s = x - 0.5;
        let sign = if s > 0.0 {
            1.0
        } else if s < 0.0 {
            -1.0
        } else {
            0.0
        };
        0.5 * (sign + 1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn beliefs_from_enumeration(graph: &TreeFactorGraph) -> (Vec<Tensor>, Vec<Tensor>, f64) {
        let log_joint = graph.enumerate_log_joint().unwrap();
        let log_z = log_sum_exp(&log_joint);
        let n = graph.node_count();
        let mut singleton: Vec<Tensor> = graph
            .cardinalities
            .iter()
            .map(|&c| Tensor::zeros(&[c]))
            .collect();
        let mut pairwise: Vec<Tensor> = graph
            .edges
            .iter()
            .map(|&(a, b)| Tensor::zeros(&[graph.cardinalities[a], graph.cardinalities[b]]))
            .collect();
        for (s, &lp) in log_joint.iter().enumerate() {
            let p = (lp - log_z).exp();
            let mut rem = s;
            let mut assign = vec![0usize; n];
            for i in 0..n {
                assign[i] = rem % graph.cardinalities[i];
                rem /= graph.cardinalities[i];
            }
            for i in 0..n {
                singleton[i].data[assign[i]] += p;
            }
            for (e, &(a, b)) in graph.edges.iter().enumerate() {
                let cb = graph.cardinalities[b];
                pairwise[e].data[assign[a] * cb + assign[b]] += p;
            }
        }
        (singleton, pairwise, log_z)
    }

    pub(crate) fn random_tree(rng: &mut Prng, n: usize, max_card: usize) -> TreeFactorGraph {
        use crate::rng::uniform;
        let cardinalities: Vec<usize> = (0..n)
            .map(|_| 2 + (uniform(rng, 0.0, 1.0) * (max_card - 1) as f64) as usize)
            .collect();
        // Random attachment yields a uniform-ish random tree shape.
        let mut edges = Vec::new();
        for i in 1..n {
            let parent = (uniform(rng, 0.0, 1.0) * i as f64) as usize;
            edges.push((parent.min(i - 1), i));
        }
        let log_singleton = cardinalities
            .iter()
            .map(|&c| Tensor::from_shape_fn(&[c], |_| uniform(rng, -2.0, 2.0)))
            .collect();
        let log_pairwise = edges
            .iter()
            .map(|&(a, b)| {
                Tensor::from_shape_fn(&[cardinalities[a], cardinalities[b]], |_| {
                    uniform(rng, -2.0, 2.0)
                })
            })
            .collect();
        TreeFactorGraph::new(cardinalities, edges, log_singleton, log_pairwise).unwrap()
    }

    #[test]
    fn single_node_normalization() {
        let g = TreeFactorGraph::new(
            vec![2],
            vec![],
            vec![Tensor::vector(vec![1.0f64.ln(), 3.0f64.ln()])],
            vec![],
        )
        .unwrap();
        let b = sum_product(&g).unwrap();
        assert!((b.singleton[0].data[0] - 0.25).abs() < 1e-12);
        assert!((b.singleton[0].data[1] - 0.75).abs() < 1e-12);
        assert!((b.log_partition - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_node_uniform_potentials() {
        let g = TreeFactorGraph::uniform(vec![3, 3], vec![(0, 1)]).unwrap();
        let b = sum_product(&g).unwrap();
        for bi in &b.singleton {
            for &v in &bi.data {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
        for &v in &b.pairwise[0].data {
            assert!((v - 1.0 / 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_enumeration_on_random_trees() {
        let mut rng = seeded(100);
        for _ in 0..20 {
            let g = random_tree(&mut rng, 6, 4);
            let b = sum_product(&g).unwrap();
            let (si, pa, lz) = beliefs_from_enumeration(&g);
            assert!((b.log_partition - lz).abs() < 1e-10);
            for (x, y) in b.singleton.iter().zip(si.iter()) {
                assert!(x.max_abs_diff(y) < 1e-10);
            }
            for (x, y) in b.pairwise.iter().zip(pa.iter()) {
                assert!(x.max_abs_diff(y) < 1e-10);
            }
        }
    }

    #[test]
    fn pairwise_beliefs_marginalize_to_singletons() {
        let mut rng = seeded(101);
        for _ in 0..10 {
            let g = random_tree(&mut rng, 7, 4);
            let b = sum_product(&g).unwrap();
            for (e, &(i, j)) in b.edges.iter().enumerate() {
                let (ci, cj) = (b.cardinalities[i], b.cardinalities[j]);
                for xi in 0..ci {
                    let row: f64 = (0..cj).map(|xj| b.pairwise[e].at(xi, xj)).sum();
                    assert!((row - b.singleton[i].data[xi]).abs() < 1e-9);
                }
                for xj in 0..cj {
                    let col: f64 = (0..ci).map(|xi| b.pairwise[e].at(xi, xj)).sum();
                    assert!((col - b.singleton[j].data[xj]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn rescaling_potentials_shifts_log_partition_only() {
        let mut rng = seeded(102);
        let g = random_tree(&mut rng, 6, 3);
        let b0 = sum_product(&g).unwrap();
        let c = 1.7f64;
        let mut g2 = g.clone();
        for t in g2.log_singleton.iter_mut() {
            *t = t.map(|v| v + c.ln());
        }
        let b1 = sum_product(&g2).unwrap();
        let n = g.node_count() as f64;
        assert!((b1.log_partition - b0.log_partition - n * c.ln()).abs() < 1e-9);
        for (x, y) in b1.singleton.iter().zip(b0.singleton.iter()) {
            assert!(x.max_abs_diff(y) < 1e-10);
        }
        let mut g3 = g.clone();
        for t in g3.log_pairwise.iter_mut() {
            *t = t.map(|v| v + c.ln());
        }
        let b2 = sum_product(&g3).unwrap();
        let e = g.edges.len() as f64;
        assert!((b2.log_partition - b0.log_partition - e * c.ln()).abs() < 1e-9);
    }

    #[test]
    fn root_choice_does_not_change_beliefs() {
        // Relabel nodes so a different node plays root; beliefs must agree
        // under the permutation.
        let mut rng = seeded(103);
        let g = random_tree(&mut rng, 6, 3);
        let b = sum_product(&g).unwrap();
        let n = g.node_count();
        // Swap labels 0 and 3.
        let perm: Vec<usize> = (0..n).map(|i| match i {
            0 => 3,
            3 => 0,
            other => other,
        }).collect();
        let cards: Vec<usize> = (0..n).map(|i| g.cardinalities[perm[i]]).collect();
        let mut singleton = vec![Tensor::zeros(&[1]); n];
        for i in 0..n {
            singleton[i] = g.log_singleton[perm[i]].clone();
        }
        let inv: Vec<usize> = perm.clone();
        let edges: Vec<(usize, usize)> = g.edges.iter().map(|&(a, b)| (inv[a], inv[b])).collect();
        let g2 = TreeFactorGraph::new(cards, edges, singleton, g.log_pairwise.clone()).unwrap();
        let b2 = sum_product(&g2).unwrap();
        assert!((b.log_partition - b2.log_partition).abs() < 1e-10);
        for i in 0..n {
            assert!(b.singleton[perm[i]].max_abs_diff(&b2.singleton[i]) < 1e-10);
        }
    }

    #[test]
    fn malformed_trees_are_rejected() {
        // Cycle.
        assert!(matches!(
            TreeFactorGraph::uniform(vec![2, 2, 2], vec![(0, 1), (1, 2)]).and_then(|mut g| {
                g.edges = vec![(0, 1), (1, 0)];
                g.validate()?;
                Ok(g)
            }),
            Err(Error::MalformedTree(_))
        ));
        // Disconnected (self-contradictory edge count caught first for 4
        // nodes with 2 edges).
        assert!(matches!(
            TreeFactorGraph::uniform(vec![2, 2, 2, 2], vec![(0, 1), (2, 3)]),
            Err(Error::MalformedTree(_))
        ));
    }

    #[test]
    fn tree_kl_identical_beliefs_is_zero() {
        let mut rng = seeded(104);
        let g = random_tree(&mut rng, 5, 3);
        let b = sum_product(&g).unwrap();
        assert!(tree_kl(&b, &b).unwrap().abs() < 1e-10);
    }

    fn random_chain(rng: &mut Prng, cards: &[usize]) -> TreeFactorGraph {
        use crate::rng::uniform;
        let edges: Vec<(usize, usize)> = (1..cards.len()).map(|i| (i - 1, i)).collect();
        let log_singleton = cards
            .iter()
            .map(|&c| Tensor::from_shape_fn(&[c], |_| uniform(rng, -2.0, 2.0)))
            .collect();
        let log_pairwise = edges
            .iter()
            .map(|&(a, b)| {
                Tensor::from_shape_fn(&[cards[a], cards[b]], |_| uniform(rng, -2.0, 2.0))
            })
            .collect();
        TreeFactorGraph::new(cards.to_vec(), edges, log_singleton, log_pairwise).unwrap()
    }

    #[test]
    fn tree_kl_matches_joint_enumeration() {
        let mut rng = seeded(105);
        for _ in 0..10 {
            // Same topology (3-chain), different potentials.
            let cards = vec![2, 3, 2];
            let q_graph = random_chain(&mut rng, &cards);
            let p_graph = random_chain(&mut rng, &cards);
            let bq = sum_product(&q_graph).unwrap();
            let bp = sum_product(&p_graph).unwrap();
            let kl = tree_kl(&bq, &bp).unwrap();

            let jq = q_graph.enumerate_log_joint().unwrap();
            let jp = p_graph.enumerate_log_joint().unwrap();
            let zq = log_sum_exp(&jq);
            let zp = log_sum_exp(&jp);
            let mut expect = 0.0;
            for (lq, lp) in jq.iter().zip(jp.iter()) {
                let pq = (lq - zq).exp();
                expect += pq * ((lq - zq) - (lp - zp));
            }
            assert!((kl - expect).abs() < 1e-9, "kl {kl} vs {expect}");
            assert!(kl >= -1e-10);
        }
    }

    #[test]
    fn tree_kl_not_symmetric_in_general() {
        let mut rng = seeded(106);
        let q_graph = random_chain(&mut rng, &[2, 2, 2]);
        let mut p_graph = q_graph.clone();
        for t in p_graph.log_singleton.iter_mut() {
            for (i, v) in t.data.iter_mut().enumerate() {
                *v += 0.7 * (i as f64 + 1.0);
            }
        }
        let bq = sum_product(&q_graph).unwrap();
        let bp = sum_product(&p_graph).unwrap();
        let fwd = tree_kl(&bq, &bp).unwrap();
        let bwd = tree_kl(&bp, &bq).unwrap();
        assert!((fwd - bwd).abs() > 1e-6);
    }

    #[test]
    fn tree_kl_detects_zero_support() {
        let g = TreeFactorGraph::uniform(vec![2, 2], vec![(0, 1)]).unwrap();
        let bq = sum_product(&g).unwrap();
        let mut p_graph = g.clone();
        p_graph.log_singleton[0] = Tensor::vector(vec![0.0, -1e10]);
        let bp = sum_product(&p_graph).unwrap();
        // p's second state has vanishing mass; q has 0.5 there.
        assert!(matches!(tree_kl(&bq, &bp), Err(Error::InfiniteKL(_))));
        // Structure mismatch.
        let g2 = TreeFactorGraph::uniform(vec![2, 3], vec![(0, 1)]).unwrap();
        let b2 = sum_product(&g2).unwrap();
        assert!(matches!(
            tree_kl(&bq, &b2),
            Err(Error::StructureMismatch(_))
        ));
    }

    #[test]
    fn hard_sample_formula() {
        let z = Tensor::vector(vec![0.7, 0.3, 0.5]);
        assert_eq!(hard_sample(&z).data, vec![1.0, 0.0, 0.5]);
    }

    #[test]
    fn low_temperature_samples_concentrate_on_argmax() {
        let mut rng = seeded(107);
        let g = random_tree(&mut rng, 4, 3);
        let b = sum_product(&g).unwrap();
        let mut hard_consistent = 0usize;
        let draws = 10_000;
        for _ in 0..draws {
            let s = ancestral_sample(&b, 0.01, &mut rng);
            // Hard-consistent: the hard transform of every node is a proper
            // one-hot (exactly one entry crosses the 0.5 threshold).
            let ok = s.iter().all(|node| {
                let h = hard_sample(node);
                (h.sum() - 1.0).abs() < 1e-12
            });
            if ok {
                hard_consistent += 1;
            }
        }
        assert!(
            hard_consistent as f64 / draws as f64 > 0.99,
            "{hard_consistent}/{draws}"
        );
    }

    #[test]
    fn deterministic_beliefs_sample_one_hot() {
        // One-hot marginals: force singleton potentials to a single state.
        let g = TreeFactorGraph::new(
            vec![2, 2],
            vec![(0, 1)],
            vec![
                Tensor::vector(vec![0.0, -1e9]),
                Tensor::vector(vec![-1e9, 0.0]),
            ],
            vec![Tensor::zeros(&[2, 2])],
        )
        .unwrap();
        let b = sum_product(&g).unwrap();
        let mut rng = seeded(108);
        for _ in 0..50 {
            let s = ancestral_sample(&b, 0.2, &mut rng);
            assert!(s[0].data[0] > 0.999);
            assert!(s[1].data[1] > 0.999);
        }
    }

    #[test]
    fn hard_sampling_frequencies_match_marginals() {
        let mut rng = seeded(109);
        let mut g = random_tree(&mut rng, 4, 2);
        // Keep marginals away from 0/1 so the binomial band is informative.
        for t in g.log_singleton.iter_mut() {
            *t = t.map(|v| v * 0.3);
        }
        for t in g.log_pairwise.iter_mut() {
            *t = t.map(|v| v * 0.3);
        }
        let b = sum_product(&g).unwrap();
        let draws = 100_000usize;
        let mut counts = vec![0.0; 4];
        for _ in 0..draws {
            let s = ancestral_sample(&b, 0.1, &mut rng);
            for (i, node) in s.iter().enumerate() {
                let h = hard_sample(node);
                counts[i] += h.data[1];
            }
        }
        for i in 0..4 {
            let p = b.singleton[i].data[1];
            let freq = counts[i] / draws as f64;
            let sigma = (p * (1.0 - p) / draws as f64).sqrt();
            assert!(
                (freq - p).abs() < 3.0 * sigma + 5e-3,
                "node {i}: freq {freq} vs {p} (sigma {sigma})"
            );
        }
    }

    #[test]
    fn tree_json_roundtrip() {
        let mut rng = seeded(110);
        let g = random_tree(&mut rng, 5, 3);
        let s = g.to_json();
        let g2 = TreeFactorGraph::from_json(&s).unwrap();
        assert!(g.same_structure(&g2));
        let b1 = sum_product(&g).unwrap();
        let b2 = sum_product(&g2).unwrap();
        assert!((b1.log_partition - b2.log_partition).abs() < 1e-12);
    }
}
