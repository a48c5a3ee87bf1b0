//! TreeSRVAE: binary tree-structured latents with amortised recognition that
//! emits tree-structured factor potentials (singleton and pairwise), exact
//! belief-propagation inference of the combined posterior approximation, and
//! a Bernoulli decoder trained through Gumbel-Softmax samples with an
//! optional straight-through hard transform.
//!
//! Two restricted variants share the architecture: the SVAE variant forces
//! the pairwise recognition potentials to zero (tree prior, singleton-only
//! amortisation) and the VAE variant additionally replaces the tree prior by
//! independent Bernoulli nodes.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::io::{checkpoint_to_json, CheckpointData, MetricTrace, TrainConfig};
use crate::rng::{self, Prng};
use crate::tape::{mlp_forward, mlp_forward_pure, Activation, ParamId, ParamSet, Tape, Var};
use crate::tensor::{log_sum_exp, Tensor};
use crate::tree::{sum_product, Beliefs, TreeFactorGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeVariant {
    /// Tree prior, tree-structured recognition (singleton + pairwise).
    Tree,
    /// Tree prior, singleton-only recognition.
    Svae,
    /// Factorised prior, singleton-only recognition.
    Vae,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TreeSrvaeConfig {
    pub nodes: usize,
    pub data_dim: usize,
    pub hidden: usize,
    pub variant: TreeVariant,
    /// Tree topology as (parent, child) pairs oriented away from node 0;
    /// ignored by the VAE variant. Empty means the default chain.
    #[serde(default)]
    pub edges: Vec<(usize, usize)>,
    pub temperature: f64,
    pub hard_sample: bool,
    /// Affine decoder by default; a two-hidden-layer MLP otherwise.
    pub decoder_mlp: bool,
    pub seed: u64,
}

impl TreeSrvaeConfig {
    pub fn bar_default(variant: TreeVariant, seed: u64) -> Self {
        TreeSrvaeConfig {
            nodes: 16,
            data_dim: 64,
            hidden: 50,
            variant,
            edges: Vec::new(),
            temperature: 0.5,
            hard_sample: true,
            decoder_mlp: false,
            seed,
        }
    }

    /// Chain over the latents unless a topology was supplied.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        if !self.edges.is_empty() {
            return self.edges.clone();
        }
        (1..self.nodes).map(|i| (i - 1, i)).collect()
    }
}

/// Recognition output for one image: additive log-potentials matching the
/// prior's structure.
#[derive(Debug, Clone)]
pub struct TreePotentials {
    pub singleton: Vec<Tensor>,
    pub pairwise: Vec<Tensor>,
}

/// Adds recognition log-potentials onto the prior graph's: the combined
/// graph is the posterior-approximation factor graph.
pub fn combine(prior: &TreeFactorGraph, xi: &TreePotentials) -> Result<TreeFactorGraph> {
    if xi.singleton.len() != prior.log_singleton.len()
        || xi.pairwise.len() != prior.log_pairwise.len()
    {
        return Err(Error::StructureMismatch(
            "recognition potentials do not match the prior graph".into(),
        ));
    }
    let mut out = prior.clone();
    for (t, x) in out.log_singleton.iter_mut().zip(xi.singleton.iter()) {
        if t.shape != x.shape {
            return Err(Error::StructureMismatch(format!(
                "singleton shape {:?} vs {:?}",
                t.shape, x.shape
            )));
        }
        *t = t.add(x);
    }
    for (t, x) in out.log_pairwise.iter_mut().zip(xi.pairwise.iter()) {
        if t.shape != x.shape {
            return Err(Error::StructureMismatch(format!(
                "pairwise shape {:?} vs {:?}",
                t.shape, x.shape
            )));
        }
        *t = t.add(x);
    }
    Ok(out)
}

struct TreeIds {
    // Tree/Svae prior: root logit and per-edge conditional logits [n-1, 2].
    prior_root: Option<ParamId>,
    prior_cond: Option<ParamId>,
    // Vae prior: per-node logits.
    prior_node: Option<ParamId>,
    trunk: Vec<(ParamId, ParamId)>,
    sing_head: (ParamId, ParamId),
    pair_head: Option<(ParamId, ParamId)>,
    dec: Vec<(ParamId, ParamId)>,
}

pub struct TreeSrvae {
    pub config: TreeSrvaeConfig,
    pub params: ParamSet,
    edges: Vec<(usize, usize)>,
    ids: TreeIds,
}

fn init_linear(
    rng: &mut Prng,
    params: &mut ParamSet,
    name: &str,
    out: usize,
    inp: usize,
) -> (ParamId, ParamId) {
    let bound = 1.0 / (inp as f64).sqrt();
    let w = params.add(
        &format!("{name}.w"),
        rng::uniform_tensor(rng, &[out, inp], -bound, bound),
    );
    let b = params.add(&format!("{name}.b"), Tensor::zeros(&[out]));
    (w, b)
}

impl TreeSrvae {
    pub fn new(config: TreeSrvaeConfig) -> Result<Self> {
        let n = config.nodes;
        let edges = config.edge_list();
        // Validate topology through the graph constructor.
        if config.variant != TreeVariant::Vae {
            TreeFactorGraph::uniform(vec![2; n], edges.clone())?;
            let mut seen = vec![false; n];
            seen[0] = true;
            for &(a, b) in &edges {
                if !seen[a] || seen[b] {
                    return Err(Error::MalformedTree(
                        "edges must be oriented away from node 0".into(),
                    ));
                }
                seen[b] = true;
            }
        }
        let mut rng = rng::seeded(config.seed);
        let mut params = ParamSet::new();
        let (prior_root, prior_cond, prior_node) = match config.variant {
            TreeVariant::Vae => (
                None,
                None,
                Some(params.add("prior.node_logits", Tensor::zeros(&[n]))),
            ),
            _ => (
                Some(params.add("prior.root_logit", Tensor::zeros(&[1]))),
                Some(params.add(
                    "prior.cond_logits",
                    Tensor::zeros(&[n.saturating_sub(1), 2]),
                )),
                None,
            ),
        };
        let trunk = vec![
            init_linear(&mut rng, &mut params, "rec.l1", config.hidden, config.data_dim),
            init_linear(&mut rng, &mut params, "rec.l2", config.hidden, config.hidden),
        ];
        let sing_head = init_linear(&mut rng, &mut params, "rec.sing", 2 * n, config.hidden);
        let pair_head = if config.variant == TreeVariant::Tree {
            Some(init_linear(
                &mut rng,
                &mut params,
                "rec.pair",
                4 * edges.len(),
                config.hidden,
            ))
        } else {
            None
        };
        let dec = if config.decoder_mlp {
            vec![
                init_linear(&mut rng, &mut params, "dec.l1", config.hidden, n),
                init_linear(&mut rng, &mut params, "dec.l2", config.hidden, config.hidden),
                init_linear(&mut rng, &mut params, "dec.head", config.data_dim, config.hidden),
            ]
        } else {
            vec![init_linear(&mut rng, &mut params, "dec.affine", config.data_dim, n)]
        };
        Ok(TreeSrvae {
            config,
            params,
            edges,
            ids: TreeIds {
                prior_root,
                prior_cond,
                prior_node,
                trunk,
                sing_head,
                pair_head,
                dec,
            },
        })
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// The current prior as a factor graph (tree variants only).
    pub fn prior_graph(&self) -> Result<TreeFactorGraph> {
        let n = self.config.nodes;
        match self.config.variant {
            TreeVariant::Vae => Err(Error::InvalidConfig(
                "the factorised prior has no tree graph".into(),
            )),
            _ => {
                let root = self.params.value(self.ids.prior_root.unwrap()).data[0];
                let cond = self.params.value(self.ids.prior_cond.unwrap());
                let mut log_singleton = vec![Tensor::zeros(&[2]); n];
                log_singleton[0] =
                    Tensor::vector(vec![-softplus(root), -softplus(-root)]);
                let log_pairwise = self
                    .edges
                    .iter()
                    .enumerate()
                    .map(|(e, _)| {
                        let l0 = cond.data[e * 2];
                        let l1 = cond.data[e * 2 + 1];
                        Tensor::matrix(&[
                            vec![-softplus(l0), -softplus(-l0)],
                            vec![-softplus(l1), -softplus(-l1)],
                        ])
                    })
                    .collect();
                TreeFactorGraph::new(vec![2; n], self.edges.clone(), log_singleton, log_pairwise)
            }
        }
    }

    /// Per-node Bernoulli(1) probabilities of the factorised prior.
    pub fn prior_node_probs(&self) -> Result<Vec<f64>> {
        match self.config.variant {
            TreeVariant::Vae => Ok(self
                .params
                .value(self.ids.prior_node.unwrap())
                .data
                .iter()
                .map(|&l| sigmoid(l))
                .collect()),
            _ => Err(Error::InvalidConfig("tree variants use prior_graph".into())),
        }
    }

    /// Pure recognition pass for one image row.
    pub fn recognition_potentials(&self, y_row: &Tensor) -> Result<TreePotentials> {
        let n = self.config.nodes;
        let trunk: Vec<(Tensor, Tensor)> = self
            .ids
            .trunk
            .iter()
            .map(|&(w, b)| (self.params.value(w).clone(), self.params.value(b).clone()))
            .collect();
        let y = Tensor::new(vec![1, self.config.data_dim], y_row.data.clone());
        let mut hid = mlp_forward_pure(&trunk, Activation::Identity, &y);
        hid = hid.map(|v| v.max(0.0)); // trunk output feeds two heads post-ReLU
        let sing_layers = [(
            self.params.value(self.ids.sing_head.0).clone(),
            self.params.value(self.ids.sing_head.1).clone(),
        )];
        let sing = mlp_forward_pure(&sing_layers, Activation::Identity, &hid);
        let singleton = (0..n)
            .map(|i| Tensor::vector(vec![sing.data[i * 2], sing.data[i * 2 + 1]]))
            .collect();
        let pairwise = match (&self.ids.pair_head, self.config.variant) {
            (Some(head), TreeVariant::Tree) => {
                let layers = [(
                    self.params.value(head.0).clone(),
                    self.params.value(head.1).clone(),
                )];
                let pair = mlp_forward_pure(&layers, Activation::Identity, &hid);
                self.edges
                    .iter()
                    .enumerate()
                    .map(|(e, _)| {
                        Tensor::new(vec![2, 2], pair.data[e * 4..(e + 1) * 4].to_vec())
                    })
                    .collect()
            }
            _ => self.edges.iter().map(|_| Tensor::zeros(&[2, 2])).collect(),
        };
        Ok(TreePotentials {
            singleton,
            pairwise,
        })
    }

    /// Combined posterior-approximation beliefs for one image (pure route).
    pub fn posterior_beliefs(&self, y_row: &Tensor) -> Result<Beliefs> {
        let prior = self.prior_graph()?;
        let xi = self.recognition_potentials(y_row)?;
        let q = combine(&prior, &xi)?;
        sum_product(&q)
    }

    pub fn decoder_weights(&self) -> Vec<(Tensor, Tensor)> {
        self.ids
            .dec
            .iter()
            .map(|&(w, b)| (self.params.value(w).clone(), self.params.value(b).clone()))
            .collect()
    }

    /// Bernoulli rates for a batch of latent configurations `[S, n]`.
    pub fn decode_pure(&self, z: &Tensor) -> Tensor {
        mlp_forward_pure(&self.decoder_weights(), Activation::Sigmoid, z)
    }

    /// Decoder logits (pre-sigmoid) for a batch of latents.
    pub fn decode_logits_pure(&self, z: &Tensor) -> Tensor {
        mlp_forward_pure(&self.decoder_weights(), Activation::Identity, z)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── Tape objective ──────────────────────────────────────────────────

pub struct Objective {
    pub tape: Tape,
    pub free_energy: Var,
    pub recon: Var,
    pub kl: Var,
}

/// Batched tree state on the tape: per-node `[B, 2]` log-potentials and
/// per-edge `[B, 4]` tables.
struct TapeTree {
    singles: Vec<Var>,
    pairs: Vec<Var>,
}

impl TreeSrvae {
    /// Monte-Carlo free energy of an image batch with fresh Gumbel noise.
    pub fn free_energy(&self, y: &Tensor, rng: &mut Prng) -> Result<Objective> {
        let b = y.shape[0];
        let gumbel = rng::gumbel_tensor(rng, &[b, 2 * self.config.nodes]);
        self.free_energy_with_noise(y, &gumbel)
    }

    /// Same objective with fixed Gumbel noise `[B, 2 * nodes]` (node-major).
    pub fn free_energy_with_noise(&self, y: &Tensor, gumbel: &Tensor) -> Result<Objective> {
        if y.shape.len() != 2 || y.shape[1] != self.config.data_dim {
            return Err(Error::ShapeMismatch {
                op: "tree free_energy",
                expected: format!("[B, {}]", self.config.data_dim),
                got: format!("{:?}", y.shape),
            });
        }
        match self.config.variant {
            TreeVariant::Vae => self.vae_objective(y, gumbel),
            _ => self.tree_objective(y, gumbel),
        }
    }

    fn rec_outputs(&self, tape: &mut Tape, y: &Tensor) -> Result<(Var, Option<Var>)> {
        let trunk: Vec<(Var, Var)> = self
            .ids
            .trunk
            .iter()
            .map(|&(w, b)| (tape.param(&self.params, w), tape.param(&self.params, b)))
            .collect();
        let y_node = tape.constant(y.clone());
        let pre = mlp_forward(tape, &trunk, Activation::Identity, y_node)?;
        let hid = tape.relu(pre);
        let sw = tape.param(&self.params, self.ids.sing_head.0);
        let sb = tape.param(&self.params, self.ids.sing_head.1);
        let swt = tape.transpose(sw);
        let sproj = tape.matmul(hid, swt);
        let sing = tape.add_row_vector(sproj, sb); // [B, 2n]
        let pair = match self.ids.pair_head {
            Some((pw, pb)) => {
                let pwv = tape.param(&self.params, pw);
                let pbv = tape.param(&self.params, pb);
                let pwt = tape.transpose(pwv);
                let pproj = tape.matmul(hid, pwt);
                Some(tape.add_row_vector(pproj, pbv)) // [B, 4E]
            }
            None => None,
        };
        Ok((sing, pair))
    }

    /// Prior log-potentials on the tape as `[1, _]` rows.
    fn prior_tape_tree(&self, tape: &mut Tape) -> TapeTree {
        let n = self.config.nodes;
        let root = tape.param(&self.params, self.ids.prior_root.unwrap());
        let cond = tape.param(&self.params, self.ids.prior_cond.unwrap());
        let mut singles = Vec::with_capacity(n);
        {
            let sp_pos = tape.softplus(root);
            let neg_root = tape.neg(root);
            let sp_neg = tape.softplus(neg_root);
            let a = tape.neg(sp_pos);
            let bb = tape.neg(sp_neg);
            let am = tape.reshape(a, &[1, 1]);
            let bm = tape.reshape(bb, &[1, 1]);
            singles.push(tape.concat_cols(&[am, bm]));
        }
        for _ in 1..n {
            singles.push(tape.constant(Tensor::zeros(&[1, 2])));
        }
        let mut pairs = Vec::with_capacity(self.edges.len());
        for e in 0..self.edges.len() {
            let row = tape.row(cond, e); // [2]
            let rowm = tape.reshape(row, &[1, 2]);
            let l0 = tape.slice_cols(rowm, 0, 1);
            let l1 = tape.slice_cols(rowm, 1, 2);
            let mk = |tape: &mut Tape, l: Var| -> (Var, Var) {
                let sp = tape.softplus(l);
                let nl = tape.neg(l);
                let sn = tape.softplus(nl);
                let a = tape.neg(sp);
                let b = tape.neg(sn);
                (a, b)
            };
            let (a0, b0) = mk(tape, l0);
            let (a1, b1) = mk(tape, l1);
            // Table rows: parent state 0 then parent state 1.
            pairs.push(tape.concat_cols(&[a0, b0, a1, b1])); // [1, 4]
        }
        TapeTree { singles, pairs }
    }

    /// Combined (prior + recognition) batch tree.
    fn combined_tape_tree(
        &self,
        tape: &mut Tape,
        sing: Var,
        pair: Option<Var>,
        b: usize,
    ) -> TapeTree {
        let n = self.config.nodes;
        let prior = self.prior_tape_tree(tape);
        let mut singles = Vec::with_capacity(n);
        for i in 0..n {
            let xi = tape.slice_cols(sing, 2 * i, 2 * i + 2); // [B, 2]
            let pv = tape.reshape(prior.singles[i], &[2]);
            singles.push(tape.add_row_vector(xi, pv));
        }
        let mut pairs = Vec::with_capacity(self.edges.len());
        for e in 0..self.edges.len() {
            let base = match pair {
                Some(p) => tape.slice_cols(p, 4 * e, 4 * e + 4),
                None => tape.constant(Tensor::zeros(&[b, 4])),
            };
            let pv = tape.reshape(prior.pairs[e], &[4]);
            pairs.push(tape.add_row_vector(base, pv));
        }
        TapeTree { singles, pairs }
    }

    /// Batched sum-product over the rooted orientation. Returns per-node
    /// log-beliefs `[B, 2]`, per-edge log-beliefs `[B, 4]`, and the
    /// log-partition `[B]`.
    fn tape_sum_product(
        &self,
        tape: &mut Tape,
        tree: &TapeTree,
        b: usize,
    ) -> (Vec<Var>, Vec<Var>, Var) {
        let n = self.config.nodes;
        let edges = &self.edges;
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (e, &(pa, ch)) in edges.iter().enumerate() {
            adj[pa].push((ch, e));
            adj[ch].push((pa, e));
        }
        // BFS order from the root; edges are stored parent -> child.
        let mut order = Vec::with_capacity(edges.len());
        {
            let mut seen = vec![false; n];
            seen[0] = true;
            let mut queue = std::collections::VecDeque::from([0usize]);
            while let Some(i) = queue.pop_front() {
                for &(j, e) in &adj[i] {
                    if !seen[j] {
                        seen[j] = true;
                        order.push(e);
                        queue.push_back(j);
                    }
                }
            }
        }
        let mut msg_down: Vec<Option<Var>> = vec![None; edges.len()]; // parent -> child
        let mut msg_up: Vec<Option<Var>> = vec![None; edges.len()]; // child -> parent

        let collect = |tape: &mut Tape,
                       msg_down: &[Option<Var>],
                       msg_up: &[Option<Var>],
                       i: usize,
                       skip: Option<usize>|
         -> Var {
            let mut acc = tree.singles[i];
            for &(j, e) in &adj[i] {
                if Some(e) == skip {
                    continue;
                }
                let m = if edges[e].0 == j { msg_down[e] } else { msg_up[e] };
                if let Some(mv) = m {
                    acc = tape.add(acc, mv);
                }
            }
            acc
        };

        // Inward pass (reverse BFS order sends child -> parent), then outward.
        for &e in order.iter().rev() {
            let (_pa, ch) = edges[e];
            let inc = collect(tape, &msg_down, &msg_up, ch, Some(e));
            let table = tape.batch_table_add_col(tree.pairs[e], inc, 2, 2);
            msg_up[e] = Some(tape.batch_table_lse(table, 2, 2, false)); // [B, 2] over child axis
        }
        for &e in order.iter() {
            let (pa, _ch) = edges[e];
            let inc = collect(tape, &msg_down, &msg_up, pa, Some(e));
            let table = tape.batch_table_add_row(tree.pairs[e], inc, 2, 2);
            msg_down[e] = Some(tape.batch_table_lse(table, 2, 2, true));
        }

        let root_acc = collect(tape, &msg_down, &msg_up, 0, None);
        let log_z = tape.logsumexp_rows(root_acc); // [B]
        let neg_log_z = tape.neg(log_z);
        let mut log_b = Vec::with_capacity(n);
        for i in 0..n {
            let acc = collect(tape, &msg_down, &msg_up, i, None);
            log_b.push(tape.add_col_vector(acc, neg_log_z));
        }
        let mut log_be = Vec::with_capacity(edges.len());
        for (e, &(pa, ch)) in edges.iter().enumerate() {
            let acc_pa = collect(tape, &msg_down, &msg_up, pa, Some(e));
            let acc_ch = collect(tape, &msg_down, &msg_up, ch, Some(e));
            let t1 = tape.batch_table_add_row(tree.pairs[e], acc_pa, 2, 2);
            let t2 = tape.batch_table_add_col(t1, acc_ch, 2, 2);
            log_be.push(tape.add_col_vector(t2, neg_log_z));
        }
        let _ = b;
        (log_b, log_be, log_z)
    }

    /// Analytic tree KL between the batch posteriors and the shared prior:
    /// `sum_e KL(b_e^q || b_e^p) - sum_i (d_i - 1) KL(b_i^q || b_i^p)`,
    /// one value per batch row.
    fn tape_tree_kl(
        &self,
        tape: &mut Tape,
        q_sing: &[Var],
        q_pair: &[Var],
        p_sing: &[Var],
        p_pair: &[Var],
    ) -> Var {
        let n = self.config.nodes;
        let mut degrees = vec![0usize; n];
        for &(a, b) in &self.edges {
            degrees[a] += 1;
            degrees[b] += 1;
        }
        let kl_rows = |tape: &mut Tape, lq: Var, lp_row: Var, width: usize| -> Var {
            // lp_row is [1, width]; broadcast over the batch.
            let lpv = tape.reshape(lp_row, &[width]);
            let neg = tape.neg(lpv);
            let diff = tape.add_row_vector(lq, neg);
            let q = tape.exp(lq);
            let prod = tape.mul(q, diff);
            tape.sum_rows(prod) // [B]
        };
        let mut total: Option<Var> = None;
        for (e, &q) in q_pair.iter().enumerate() {
            let term = kl_rows(tape, q, p_pair[e], 4);
            total = Some(match total {
                Some(acc) => tape.add(acc, term),
                None => term,
            });
        }
        for (i, &q) in q_sing.iter().enumerate() {
            let w = degrees[i] as f64 - 1.0;
            if w == 0.0 {
                continue;
            }
            let term = kl_rows(tape, q, p_sing[i], 2);
            let scaled = tape.scale(term, -w);
            total = Some(match total {
                Some(acc) => tape.add(acc, scaled),
                None => scaled,
            });
        }
        total.expect("at least one KL term")
    }

    /// Ancestral Gumbel-Softmax sampling from batched beliefs; returns the
    /// per-node state-1 values `[B, nodes]`.
    fn tape_ancestral(
        &self,
        tape: &mut Tape,
        log_b: &[Var],
        log_be: &[Var],
        gumbel: &Tensor,
        b: usize,
    ) -> Var {
        let n = self.config.nodes;
        let temp = self.config.temperature;
        let soft_sample = |tape: &mut Tape, logits: Var, node: usize| -> Var {
            let g = Tensor::new(
                vec![b, 2],
                (0..b)
                    .flat_map(|bi| {
                        vec![
                            gumbel.data[bi * 2 * n + 2 * node],
                            gumbel.data[bi * 2 * n + 2 * node + 1],
                        ]
                    })
                    .collect(),
            );
            let gn = tape.constant(g);
            let noisy = tape.add(logits, gn);
            let scaled = tape.scale(noisy, 1.0 / temp);
            let lse = tape.logsumexp_rows(scaled);
            let nlse = tape.neg(lse);
            let centered = tape.add_col_vector(scaled, nlse);
            let relaxed = tape.exp(centered);
            if self.config.hard_sample {
                tape.hard_sample(relaxed)
            } else {
                relaxed
            }
        };
        let mut samples: Vec<Option<Var>> = vec![None; n];
        samples[0] = Some(soft_sample(tape, log_b[0], 0));
        // Children in BFS edge order; log conditional = log b_e - log b_pa.
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (e, &(pa, ch)) in self.edges.iter().enumerate() {
            adj[pa].push((ch, e));
            adj[ch].push((pa, e));
        }
        let mut seen = vec![false; n];
        seen[0] = true;
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(i) = queue.pop_front() {
            for &(j, e) in &adj[i] {
                if seen[j] {
                    continue;
                }
                seen[j] = true;
                let (pa, _ch) = self.edges[e];
                debug_assert_eq!(pa, i);
                let neg_bpa = tape.neg(log_b[i]);
                let cond = tape.batch_table_add_row(log_be[e], neg_bpa, 2, 2);
                let parent = samples[i].unwrap();
                let logits = tape.batch_vec_table(parent, cond, 2, 2);
                samples[j] = Some(soft_sample(tape, logits, j));
                queue.push_back(j);
            }
        }
        let cols: Vec<Var> = (0..n)
            .map(|i| tape.slice_cols(samples[i].unwrap(), 1, 2))
            .collect();
        tape.concat_cols(&cols) // [B, n]
    }

    /// Bernoulli reconstruction term `sum_d y ln s(a) + (1-y) ln(1-s(a))`,
    /// one value per batch row.
    fn tape_bernoulli_recon(&self, tape: &mut Tape, z: Var, y: &Tensor) -> Result<Var> {
        let dec: Vec<(Var, Var)> = self
            .ids
            .dec
            .iter()
            .map(|&(w, b)| (tape.param(&self.params, w), tape.param(&self.params, b)))
            .collect();
        let logits = mlp_forward(tape, &dec, Activation::Identity, z)?;
        let y_node = tape.constant(y.clone());
        let ya = tape.mul(y_node, logits);
        let sp = tape.softplus(logits);
        let diff = tape.sub(ya, sp);
        Ok(tape.sum_rows(diff)) // [B]
    }

    fn tree_objective(&self, y: &Tensor, gumbel: &Tensor) -> Result<Objective> {
        let b = y.shape[0];
        let mut tape = Tape::new();
        let (sing, pair) = self.rec_outputs(&mut tape, y)?;
        let pair = match self.config.variant {
            TreeVariant::Tree => pair,
            _ => None,
        };
        let q_tree = self.combined_tape_tree(&mut tape, sing, pair, b);
        let (q_log_b, q_log_be, _) = self.tape_sum_product(&mut tape, &q_tree, b);
        let p_tree = self.prior_tape_tree(&mut tape);
        let (p_log_b, p_log_be, _) = self.tape_sum_product(&mut tape, &p_tree, 1);
        let kl_rows = self.tape_tree_kl(&mut tape, &q_log_b, &q_log_be, &p_log_b, &p_log_be);
        let z = self.tape_ancestral(&mut tape, &q_log_b, &q_log_be, gumbel, b);
        let recon_rows = self.tape_bernoulli_recon(&mut tape, z, y)?;
        let diff = tape.sub(recon_rows, kl_rows);
        let fe = tape.mean(diff);
        let recon = tape.mean(recon_rows);
        let kl = tape.mean(kl_rows);
        Ok(Objective {
            tape,
            free_energy: fe,
            recon,
            kl,
        })
    }

    fn vae_objective(&self, y: &Tensor, gumbel: &Tensor) -> Result<Objective> {
        let b = y.shape[0];
        let n = self.config.nodes;
        let mut tape = Tape::new();
        let (sing, _) = self.rec_outputs(&mut tape, y)?;
        let prior_logits = tape.param(&self.params, self.ids.prior_node.unwrap());
        // Per-node posterior log-probabilities and KL to the prior Bernoulli.
        let mut z_cols = Vec::with_capacity(n);
        let mut kl_total: Option<Var> = None;
        for i in 0..n {
            let xi = tape.slice_cols(sing, 2 * i, 2 * i + 2); // [B, 2]
            let lse = tape.logsumexp_rows(xi);
            let nlse = tape.neg(lse);
            let log_q = tape.add_col_vector(xi, nlse);
            // Prior log-probs for node i: [-sp(l), -sp(-l)].
            let pl = {
                let r = tape.reshape(prior_logits, &[1, n]);
                let sl = tape.slice_cols(r, i, i + 1);
                tape.reshape(sl, &[1])
            };
            let sp_pos = tape.softplus(pl);
            let npl = tape.neg(pl);
            let sp_neg = tape.softplus(npl);
            let a = tape.neg(sp_pos);
            let bb = tape.neg(sp_neg);
            let am = tape.reshape(a, &[1, 1]);
            let bm = tape.reshape(bb, &[1, 1]);
            let log_p = tape.concat_cols(&[am, bm]); // [1, 2]
            let lpv = tape.reshape(log_p, &[2]);
            let nlp = tape.neg(lpv);
            let diffl = tape.add_row_vector(log_q, nlp);
            let q = tape.exp(log_q);
            let prod = tape.mul(q, diffl);
            let kl_i = tape.sum_rows(prod);
            kl_total = Some(match kl_total {
                Some(acc) => tape.add(acc, kl_i),
                None => kl_i,
            });
            // Gumbel-softmax relaxed sample for node i.
            let g = Tensor::new(
                vec![b, 2],
                (0..b)
                    .flat_map(|bi| {
                        vec![
                            gumbel.data[bi * 2 * n + 2 * i],
                            gumbel.data[bi * 2 * n + 2 * i + 1],
                        ]
                    })
                    .collect(),
            );
            let gn = tape.constant(g);
            let noisy = tape.add(log_q, gn);
            let scaled = tape.scale(noisy, 1.0 / self.config.temperature);
            let slse = tape.logsumexp_rows(scaled);
            let nslse = tape.neg(slse);
            let centered = tape.add_col_vector(scaled, nslse);
            let relaxed = tape.exp(centered);
            let sample = if self.config.hard_sample {
                tape.hard_sample(relaxed)
            } else {
                relaxed
            };
            z_cols.push(tape.slice_cols(sample, 1, 2));
        }
        let z = tape.concat_cols(&z_cols);
        let recon_rows = self.tape_bernoulli_recon(&mut tape, z, y)?;
        let kl_rows = kl_total.unwrap();
        let diff = tape.sub(recon_rows, kl_rows);
        let fe = tape.mean(diff);
        let recon = tape.mean(recon_rows);
        let kl = tape.mean(kl_rows);
        Ok(Objective {
            tape,
            free_energy: fe,
            recon,
            kl,
        })
    }

    pub fn train(&mut self, images: &Tensor, config: &TrainConfig) -> Result<MetricTrace> {
        config.validate()?;
        let mut rng = rng::seeded(config.seed);
        let n = images.shape[0];
        let dd = self.config.data_dim;
        let bsz = config.batch_len.min(n);
        let mut trace = MetricTrace::default();
        let started = std::time::Instant::now();
        for epoch in 0..config.epochs {
            let order = rng::shuffled_indices(&mut rng, n);
            let (mut fe, mut rc, mut kl, mut cnt) = (0.0, 0.0, 0.0, 0.0);
            for chunk in order.chunks(bsz) {
                let mut y = Tensor::zeros(&[chunk.len(), dd]);
                for (r, &i) in chunk.iter().enumerate() {
                    y.data[r * dd..(r + 1) * dd]
                        .copy_from_slice(&images.data[i * dd..(i + 1) * dd]);
                }
                let obj = self.free_energy(&y, &mut rng)?;
                let mut tape = obj.tape;
                let neg = tape.neg(obj.free_energy);
                tape.backward(neg, &mut self.params)?;
                self.params
                    .adam_step(config.learning_rate, 0.9, 0.999, 1e-8);
                self.params.zero_grad();
                fe += tape.scalar_value(obj.free_energy);
                rc += tape.scalar_value(obj.recon);
                kl += tape.scalar_value(obj.kl);
                cnt += 1.0;
            }
            trace.push(
                epoch,
                fe / cnt,
                rc / cnt,
                kl / cnt,
                started.elapsed().as_secs_f64(),
            );
        }
        Ok(trace)
    }

    pub fn to_checkpoint(&self, rng_state: (u64, u128), train_config: serde_json::Value) -> serde_json::Value {
        checkpoint_to_json(
            match self.config.variant {
                TreeVariant::Tree => "tree_srvae",
                TreeVariant::Svae => "tree_svae",
                TreeVariant::Vae => "tree_vae_baseline",
            },
            &self.params,
            rng_state,
            json!({ "model": self.config, "train": train_config }),
        )
    }

    pub fn from_checkpoint(data: &CheckpointData) -> Result<Self> {
        let config: TreeSrvaeConfig = serde_json::from_value(
            data.config
                .get("model")
                .cloned()
                .ok_or_else(|| Error::InvalidConfig("checkpoint missing model config".into()))?,
        )
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut model = TreeSrvae::new(config)?;
        if data.params.len() != model.params.len() {
            return Err(Error::InvalidConfig(
                "checkpoint parameter count mismatch".into(),
            ));
        }
        model.params = data.params.clone();
        Ok(model)
    }
}

// ── Exact posterior (enumeration oracle) ────────────────────────────

pub struct ExactPosterior {
    /// `p(z | y)` over all `2^n` states, state bits little-endian in z.
    pub joint: Vec<f64>,
    /// `p(z_i = 1 | y)` per node.
    pub marginals: Vec<f64>,
    /// KL from the exact posterior to its moment-matched tree projection.
    pub tree_gap: f64,
}

impl TreeSrvae {
    /// Exhaustive posterior `p(z | y) ∝ p(z) p(y | z)`. The likelihood is
    /// organised per the affine-decoder decomposition: singleton evidence
    /// terms `z_i sum_j W_ji y_j` plus the joint normalizer factor
    /// `phi_z(z) = -sum_j softplus(a_j(z))`, which carries the explaining-away
    /// coupling. MLP decoders fall back to direct per-state evaluation.
    pub fn exact_posterior(&self, y_row: &Tensor) -> Result<ExactPosterior> {
        let n = self.config.nodes;
        if n > 20 {
            return Err(Error::TooLarge {
                states: 1u64 << n,
                limit: 1 << 20,
            });
        }
        let states = 1usize << n;
        let log_prior = match self.config.variant {
            TreeVariant::Vae => {
                let probs = self.prior_node_probs()?;
                let mut lp = vec![0.0; states];
                for (s, slot) in lp.iter_mut().enumerate() {
                    for (i, &p) in probs.iter().enumerate() {
                        let on = (s >> i) & 1 == 1;
                        *slot += if on { p.ln() } else { (1.0 - p).ln() };
                    }
                }
                lp
            }
            _ => {
                let graph = self.prior_graph()?;
                let raw = graph.enumerate_log_joint()?;
                let z = log_sum_exp(&raw);
                // Reindex: enumerate_log_joint uses mixed-radix over node
                // order, which for binary nodes is exactly the bit order.
                raw.iter().map(|&v| v - z).collect()
            }
        };

        let mut log_post = vec![0.0; states];
        if !self.config.decoder_mlp {
            let (w, bias) = {
                let dec = self.decoder_weights();
                (dec[0].0.clone(), dec[0].1.clone())
            };
            let d = self.config.data_dim;
            // Singleton evidence coefficients: sum_j W_ji y_j.
            let mut evid = vec![0.0; n];
            for (i, item) in evid.iter_mut().enumerate() {
                *item = (0..d).map(|j| w.data[j * n + i] * y_row.data[j]).sum();
            }
            let const_term: f64 = (0..d).map(|j| y_row.data[j] * bias.data[j]).sum();
            for (s, slot) in log_post.iter_mut().enumerate() {
                let mut ll = const_term;
                // Evidence singletons.
                for (i, ev) in evid.iter().enumerate() {
                    if (s >> i) & 1 == 1 {
                        ll += ev;
                    }
                }
                // Joint normalizer factor phi_z.
                for j in 0..d {
                    let mut a = bias.data[j];
                    for i in 0..n {
                        if (s >> i) & 1 == 1 {
                            a += w.data[j * n + i];
                        }
                    }
                    ll -= softplus(a);
                }
                *slot = log_prior[s] + ll;
            }
        } else {
            for (s, slot) in log_post.iter_mut().enumerate() {
                let z = Tensor::new(
                    vec![1, n],
                    (0..n).map(|i| ((s >> i) & 1) as f64).collect(),
                );
                let logits = self.decode_logits_pure(&z);
                let mut ll = 0.0;
                for j in 0..self.config.data_dim {
                    let a = logits.data[j];
                    ll += y_row.data[j] * a - softplus(a);
                }
                *slot = log_prior[s] + ll;
            }
        }
        let z = log_sum_exp(&log_post);
        let joint: Vec<f64> = log_post.iter().map(|&v| (v - z).exp()).collect();
        let mut marginals = vec![0.0; n];
        for (s, &p) in joint.iter().enumerate() {
            for (i, m) in marginals.iter_mut().enumerate() {
                if (s >> i) & 1 == 1 {
                    *m += p;
                }
            }
        }
        let tree_gap = match self.config.variant {
            TreeVariant::Vae => {
                // Projection onto the factorised family: product of marginals.
                let mut gap = 0.0;
                for (s, &p) in joint.iter().enumerate() {
                    if p <= 0.0 {
                        continue;
                    }
                    let mut lq = 0.0;
                    for (i, &m) in marginals.iter().enumerate() {
                        let on = (s >> i) & 1 == 1;
                        lq += if on { m.max(1e-300).ln() } else { (1.0 - m).max(1e-300).ln() };
                    }
                    gap += p * (p.ln() - lq);
                }
                gap
            }
            _ => {
                // Moment-matched tree on the model's edges.
                let mut pair = vec![[0.0f64; 4]; self.edges.len()];
                for (s, &p) in joint.iter().enumerate() {
                    for (e, &(a, b)) in self.edges.iter().enumerate() {
                        let ia = (s >> a) & 1;
                        let ib = (s >> b) & 1;
                        pair[e][ia * 2 + ib] += p;
                    }
                }
                let mut degrees = vec![0usize; n];
                for &(a, b) in &self.edges {
                    degrees[a] += 1;
                    degrees[b] += 1;
                }
                let mut gap = 0.0;
                for (s, &p) in joint.iter().enumerate() {
                    if p <= 0.0 {
                        continue;
                    }
                    let mut lq = 0.0;
                    for (e, &(a, b)) in self.edges.iter().enumerate() {
                        let ia = (s >> a) & 1;
                        let ib = (s >> b) & 1;
                        lq += pair[e][ia * 2 + ib].max(1e-300).ln();
                    }
                    for (i, &deg) in degrees.iter().enumerate() {
                        if deg > 1 {
                            let on = (s >> i) & 1 == 1;
                            let m = if on { marginals[i] } else { 1.0 - marginals[i] };
                            lq -= (deg - 1) as f64 * m.max(1e-300).ln();
                        }
                    }
                    gap += p * (p.ln() - lq);
                }
                gap
            }
        };
        Ok(ExactPosterior {
            joint,
            marginals,
            tree_gap,
        })
    }
}

/// Mutual information between two bits of an exhaustive joint table.
pub fn pairwise_mutual_information(joint: &[f64], i: usize, j: usize) -> f64 {
    let mut pij = [0.0f64; 4];
    for (s, &p) in joint.iter().enumerate() {
        let a = (s >> i) & 1;
        let b = (s >> j) & 1;
        pij[a * 2 + b] += p;
    }
    let pi = [pij[0] + pij[1], pij[2] + pij[3]];
    let pj = [pij[0] + pij[2], pij[1] + pij[3]];
    let mut mi = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            let p = pij[a * 2 + b];
            if p > 1e-300 {
                mi += p * (p.ln() - pi[a].max(1e-300).ln() - pj[b].max(1e-300).ln());
            }
        }
    }
    mi
}

// ── Exact (enumeration) restricted objective for tiny trees ─────────

/// Exact free energy for a small binary tree with directly parametrised
/// recognition potentials: `F = E_q[log p(y|z)] - KL(q || prior)`, with both
/// terms computed by state enumeration on the tape (no sampling). Used to
/// optimize restricted potential families numerically.
///
/// `xi_sing[i]` is a `[2]` parameter per node; `xi_pair`, when present, a
/// `[4]` parameter per edge. `loglik` is the fixed `[B, 2^n]` table of
/// per-state decoder log-likelihoods.
pub fn exact_restricted_objective(
    tape: &mut Tape,
    params: &ParamSet,
    prior: &TreeFactorGraph,
    xi_sing: &[ParamId],
    xi_pair: Option<&[ParamId]>,
    loglik: &Tensor,
) -> Result<Var> {
    let n = prior.node_count();
    let states = 1usize << n;
    if loglik.shape[1] != states {
        return Err(Error::ShapeMismatch {
            op: "exact_restricted_objective",
            expected: format!("[B, {states}]"),
            got: format!("{:?}", loglik.shape),
        });
    }
    let b = loglik.shape[0];
    // Combined log-potentials as tape nodes.
    let sing: Vec<Var> = (0..n)
        .map(|i| {
            let xi = tape.param(params, xi_sing[i]); // [2]
            let pv = tape.constant(prior.log_singleton[i].clone());
            tape.add(xi, pv)
        })
        .collect();
    let pairs: Vec<Var> = prior
        .edges
        .iter()
        .enumerate()
        .map(|(e, _)| {
            let pv = tape.constant(Tensor::vector(prior.log_pairwise[e].data.clone()));
            match xi_pair {
                Some(ids) => {
                    let xp = tape.param(params, ids[e]);
                    tape.add(xp, pv)
                }
                None => pv,
            }
        })
        .collect();
    // Unnormalized log q per state, then normalize across states.
    let mut state_cols = Vec::with_capacity(states);
    for s in 0..states {
        let mut acc: Option<Var> = None;
        for (i, &sv) in sing.iter().enumerate() {
            let idx = (s >> i) & 1;
            let m = tape.reshape(sv, &[1, 2]);
            let sl = tape.slice_cols(m, idx, idx + 1);
            acc = Some(match acc {
                Some(a) => tape.add(a, sl),
                None => sl,
            });
        }
        for (e, &(pa, ch)) in prior.edges.iter().enumerate() {
            let ia = (s >> pa) & 1;
            let ib = (s >> ch) & 1;
            let idx = ia * 2 + ib;
            let m = tape.reshape(pairs[e], &[1, 4]);
            let sl = tape.slice_cols(m, idx, idx + 1);
            let a = acc.unwrap();
            acc = Some(tape.add(a, sl));
        }
        state_cols.push(acc.unwrap()); // [1, 1]
    }
    let logits_row = tape.concat_cols(&state_cols); // [1, states]
    let lse = tape.logsumexp_rows(logits_row);
    let nlse = tape.neg(lse);
    let log_q = tape.add_col_vector(logits_row, nlse); // [1, states]
    let q = tape.exp(log_q);

    // Prior log-probabilities per state (constants on the tape).
    let prior_logj = prior.enumerate_log_joint()?;
    let prior_z = log_sum_exp(&prior_logj);
    let log_p = Tensor::new(
        vec![1, states],
        prior_logj.iter().map(|&v| v - prior_z).collect(),
    );
    let log_p_node = tape.constant(log_p);

    // E_q[log p(y|z)] summed over the batch, plus -KL(q || p).
    let mut recon: Option<Var> = None;
    for bi in 0..b {
        let ll_row = tape.constant(Tensor::new(
            vec![1, states],
            loglik.data[bi * states..(bi + 1) * states].to_vec(),
        ));
        let w = tape.mul(q, ll_row);
        let sumw = tape.sum(w);
        recon = Some(match recon {
            Some(a) => tape.add(a, sumw),
            None => sumw,
        });
    }
    let recon = recon.unwrap();
    let diff = tape.sub(log_q, log_p_node);
    let wkl = tape.mul(q, diff);
    let kl = tape.sum(wkl);
    let kl_b = tape.scale(kl, b as f64);
    Ok(tape.sub(recon, kl_b))
}
