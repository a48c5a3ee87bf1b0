//! Define-by-run reverse-mode differentiation tape.
//!
//! A `Tape` records one forward evaluation as a flat list of `TapeNode`s;
//! values are computed eagerly, so node indices are already in topological
//! order and `backward` is a single reverse sweep. Tapes are rebuilt per
//! minibatch and are single-threaded per model instance.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

/// Local gradient rule identifier plus parent references.
#[derive(Debug, Clone)]
enum Op {
    /// Input node; `param` links it to a `ParamSet` slot for gradient export.
    Leaf { param: Option<usize> },
    Neg(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Multiply by a compile-time constant.
    Scale(Var, f64),
    /// Add a compile-time constant elementwise.
    Shift(Var),
    /// Elementwise multiply by a scalar node (shape `[1]`).
    MulScalar(Var, Var),
    Recip(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Row(Var, usize),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    /// Per-latent `[1, M_k]` rows assembled into a block-diagonal `[K, sum M_k]`.
    BlockDiagRows(Vec<Var>),
    DiagPart(Var),
    DiagEmbed(Var),
    RepeatScalar(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    /// `m[i, j] + v[j]`.
    AddRowVector(Var, Var),
    /// `m[i, j] + v[i]`.
    AddColVector(Var, Var),
    LogSumExpRows(Var),
    Cholesky(Var),
    SolveLower(Var, Var),
    SolveLowerT(Var, Var),
    /// `0.5 * (sign(x - 0.5) + 1)` forward, identity backward.
    HardSample(Var),
    /// `d[i, j] = (z_i - z_j)^2` for a location vector `z`.
    PairwiseSqDist(Var),
    /// `d[t, j] = (x_t - z_j)^2` against fixed inputs `x`.
    CrossSqDist(Var, Vec<f64>),
    /// Batched table reduce: rows are flattened `ci x cj` tables.
    BatchTableLse {
        t: Var,
        ci: usize,
        cj: usize,
        over_rows: bool,
    },
    /// Table plus per-row-index vector: `t[b, i, j] + v[b, i]`.
    BatchTableAddRow { t: Var, v: Var, ci: usize, cj: usize },
    /// Table plus per-col-index vector: `t[b, i, j] + v[b, j]`.
    BatchTableAddCol { t: Var, v: Var, ci: usize, cj: usize },
    /// `out[b, j] = sum_i v[b, i] * t[b, i, j]`.
    BatchVecTable { v: Var, t: Var, ci: usize, cj: usize },
    /// Lower-triangular matrix from a diagonal vector and packed strict
    /// lower entries (row-major: (1,0), (2,0), (2,1), ...).
    LowerTriFromParts { diag: Var, off: Var, n: usize },
}

pub struct TapeNode {
    pub value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

/// sign with sign(0) = 0, so exactly-0.5 inputs to the hard transform pass
/// through at 0.5.
fn zero_sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        assert!(self.nodes[v.0].value.is_scalar());
        self.nodes[v.0].value.data[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(TapeNode { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf { param: None })
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf linked to a parameter slot; `backward` accumulates into its
    /// gradient.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.value(id).clone(), Op::Leaf { param: Some(id.0) })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::Shift(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert!(self.value(s).is_scalar(), "mul_scalar needs shape [1]");
        let sv = self.value(s).data[0];
        let v = self.value(a).scale(sv);
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(stable_sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(stable_softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old = self.value(a);
        assert_eq!(
            old.len(),
            shape.iter().product::<usize>(),
            "reshape element count"
        );
        let v = Tensor::new(shape.to_vec(), old.data.clone());
        self.push(v, Op::Reshape(a))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let m = self.value(a);
        let c = m.shape[1];
        let v = Tensor::vector(m.data[i * c..(i + 1) * c].to_vec());
        self.push(v, Op::Row(a, i))
    }

    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        let m = self.value(a);
        let (r, c) = (m.shape[0], m.shape[1]);
        assert!(from <= to && to <= c);
        let mut data = Vec::with_capacity(r * (to - from));
        for i in 0..r {
            data.extend_from_slice(&m.data[i * c + from..i * c + to]);
        }
        let v = Tensor::new(vec![r, to - from], data);
        self.push(v, Op::SliceCols(a, from, to))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.value(parts[0]).shape[0];
        let total: usize = parts.iter().map(|&p| self.value(p).shape[1]).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let m = self.value(p);
                let c = m.shape[1];
                data.extend_from_slice(&m.data[i * c..(i + 1) * c]);
            }
        }
        let v = Tensor::new(vec![r, total], data);
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).shape[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.shape[1], c, "concat_rows column mismatch");
            rows += m.shape[0];
            data.extend_from_slice(&m.data);
        }
        let v = Tensor::new(vec![rows, c], data);
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn block_diag_rows(&mut self, parts: &[Var]) -> Var {
        let k = parts.len();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let m = self.value(p);
                assert_eq!(m.shape[0], 1, "block_diag_rows expects [1, M] rows");
                m.shape[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[k, total]);
        let mut off = 0;
        for (i, &p) in parts.iter().enumerate() {
            let m = self.value(p);
            for j in 0..widths[i] {
                out.data[i * total + off + j] = m.data[j];
            }
            off += widths[i];
        }
        self.push(out, Op::BlockDiagRows(parts.to_vec()))
    }

    pub fn diag_part(&mut self, a: Var) -> Var {
        let v = self.value(a).diag();
        self.push(v, Op::DiagPart(a))
    }

    pub fn diag_embed(&mut self, a: Var) -> Var {
        let d = self.value(a);
        let n = d.len();
        let mut out = Tensor::zeros(&[n, n]);
        for i in 0..n {
            out.data[i * n + i] = d.data[i];
        }
        self.push(out, Op::DiagEmbed(a))
    }

    pub fn repeat_scalar(&mut self, a: Var, n: usize) -> Var {
        assert!(self.value(a).is_scalar());
        let x = self.value(a).data[0];
        self.push(Tensor::vector(vec![x; n]), Op::RepeatScalar(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(a))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let (r, c) = (m.shape[0], m.shape[1]);
        let v = Tensor::vector(
            (0..r)
                .map(|i| m.data[i * c..(i + 1) * c].iter().sum())
                .collect(),
        );
        self.push(v, Op::SumRows(a))
    }

    pub fn add_row_vector(&mut self, m: Var, v: Var) -> Var {
        let mv = self.value(m);
        let vv = self.value(v);
        let (r, c) = (mv.shape[0], mv.shape[1]);
        assert_eq!(vv.len(), c, "add_row_vector length");
        let mut data = mv.data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += vv.data[j];
            }
        }
        let out = Tensor::new(vec![r, c], data);
        self.push(out, Op::AddRowVector(m, v))
    }

    pub fn add_col_vector(&mut self, m: Var, v: Var) -> Var {
        let mv = self.value(m);
        let vv = self.value(v);
        let (r, c) = (mv.shape[0], mv.shape[1]);
        assert_eq!(vv.len(), r, "add_col_vector length");
        let mut data = mv.data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += vv.data[i];
            }
        }
        let out = Tensor::new(vec![r, c], data);
        self.push(out, Op::AddColVector(m, v))
    }

    /// Log-sum-exp across each row of a matrix, or of a whole vector.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = match m.shape.len() {
            1 => Tensor::scalar(tensor::log_sum_exp(&m.data)),
            2 => {
                let (r, c) = (m.shape[0], m.shape[1]);
                Tensor::vector(
                    (0..r)
                        .map(|i| tensor::log_sum_exp(&m.data[i * c..(i + 1) * c]))
                        .collect(),
                )
            }
            _ => panic!("logsumexp_rows rank"),
        };
        self.push(v, Op::LogSumExpRows(a))
    }

    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let l = tensor::cholesky(self.value(a))?;
        Ok(self.push(l, Op::Cholesky(a)))
    }

    pub fn solve_lower(&mut self, l: Var, b: Var) -> Var {
        let v = tensor::solve_lower(self.value(l), self.value(b));
        self.push(v, Op::SolveLower(l, b))
    }

    pub fn solve_lower_t(&mut self, l: Var, b: Var) -> Var {
        let v = tensor::solve_lower_t(self.value(l), self.value(b));
        self.push(v, Op::SolveLowerT(l, b))
    }

    pub fn hard_sample(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 0.5 * (zero_sign(x - 0.5) + 1.0));
        self.push(v, Op::HardSample(a))
    }

    pub fn pairwise_sqdist(&mut self, z: Var) -> Var {
        let zv = self.value(z);
        let m = zv.len();
        let mut out = Tensor::zeros(&[m, m]);
        for i in 0..m {
            for j in 0..m {
                let d = zv.data[i] - zv.data[j];
                out.data[i * m + j] = d * d;
            }
        }
        self.push(out, Op::PairwiseSqDist(z))
    }

    pub fn cross_sqdist(&mut self, z: Var, xs: &[f64]) -> Var {
        let zv = self.value(z);
        let (t, m) = (xs.len(), zv.len());
        let mut out = Tensor::zeros(&[t, m]);
        for i in 0..t {
            for j in 0..m {
                let d = xs[i] - zv.data[j];
                out.data[i * m + j] = d * d;
            }
        }
        self.push(out, Op::CrossSqDist(z, xs.to_vec()))
    }

    pub fn batch_table_lse(&mut self, t: Var, ci: usize, cj: usize, over_rows: bool) -> Var {
        let tv = self.value(t);
        let b = tv.shape[0];
        assert_eq!(tv.shape[1], ci * cj, "batch_table_lse table width");
        let keep = if over_rows { cj } else { ci };
        let mut out = Tensor::zeros(&[b, keep]);
        for bi in 0..b {
            let tab = &tv.data[bi * ci * cj..(bi + 1) * ci * cj];
            for k in 0..keep {
                let vals: Vec<f64> = if over_rows {
                    (0..ci).map(|i| tab[i * cj + k]).collect()
                } else {
                    (0..cj).map(|j| tab[k * cj + j]).collect()
                };
                out.data[bi * keep + k] = tensor::log_sum_exp(&vals);
            }
        }
        self.push(
            out,
            Op::BatchTableLse {
                t,
                ci,
                cj,
                over_rows,
            },
        )
    }

    pub fn batch_table_add_row(&mut self, t: Var, v: Var, ci: usize, cj: usize) -> Var {
        let tv = self.value(t);
        let vv = self.value(v);
        let b = tv.shape[0];
        assert_eq!(tv.shape[1], ci * cj);
        assert_eq!(vv.shape, vec![b, ci]);
        let mut data = tv.data.clone();
        for bi in 0..b {
            for i in 0..ci {
                let add = vv.data[bi * ci + i];
                for j in 0..cj {
                    data[bi * ci * cj + i * cj + j] += add;
                }
            }
        }
        let out = Tensor::new(vec![b, ci * cj], data);
        self.push(out, Op::BatchTableAddRow { t, v, ci, cj })
    }

    pub fn batch_table_add_col(&mut self, t: Var, v: Var, ci: usize, cj: usize) -> Var {
        let tv = self.value(t);
        let vv = self.value(v);
        let b = tv.shape[0];
        assert_eq!(tv.shape[1], ci * cj);
        assert_eq!(vv.shape, vec![b, cj]);
        let mut data = tv.data.clone();
        for bi in 0..b {
            for i in 0..ci {
                for j in 0..cj {
                    data[bi * ci * cj + i * cj + j] += vv.data[bi * cj + j];
                }
            }
        }
        let out = Tensor::new(vec![b, ci * cj], data);
        self.push(out, Op::BatchTableAddCol { t, v, ci, cj })
    }

    pub fn batch_vec_table(&mut self, v: Var, t: Var, ci: usize, cj: usize) -> Var {
        let tv = self.value(t);
        let vv = self.value(v);
        let b = tv.shape[0];
        assert_eq!(tv.shape[1], ci * cj);
        assert_eq!(vv.shape, vec![b, ci]);
        let mut out = Tensor::zeros(&[b, cj]);
        for bi in 0..b {
            for i in 0..ci {
                let w = vv.data[bi * ci + i];
                for j in 0..cj {
                    out.data[bi * cj + j] += w * tv.data[bi * ci * cj + i * cj + j];
                }
            }
        }
        self.push(out, Op::BatchVecTable { v, t, ci, cj })
    }

    pub fn lower_tri_from_parts(&mut self, diag: Var, off: Var, n: usize) -> Var {
        let dv = self.value(diag);
        let ov = self.value(off);
        assert_eq!(dv.len(), n);
        assert_eq!(ov.len(), n * (n - 1) / 2);
        let mut out = Tensor::zeros(&[n, n]);
        let mut k = 0;
        for i in 0..n {
            for j in 0..i {
                out.data[i * n + j] = ov.data[k];
                k += 1;
            }
            out.data[i * n + i] = dv.data[i];
        }
        self.push(out, Op::LowerTriFromParts { diag, off, n })
    }

    // ── Composite helpers ───────────────────────────────────────────

    /// Matrix-vector product `A v` returning a vector node.
    pub fn matvec(&mut self, a: Var, v: Var) -> Var {
        let n = self.value(v).len();
        let col = self.reshape(v, &[n, 1]);
        let prod = self.matmul(a, col);
        let rows = self.value(prod).shape[0];
        self.reshape(prod, &[rows])
    }

    /// `sum(a * b)` as a scalar node.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum(p)
    }

    /// Adds `rel * mean(diag)` jitter to the diagonal and factorizes,
    /// retrying once with a larger jitter (the kernel-matrix policy).
    pub fn cholesky_jittered(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).shape[0];
        let mean_diag = (0..n).map(|i| self.value(a).at(i, i)).sum::<f64>() / n.max(1) as f64;
        let base = if mean_diag.abs() > 1e-100 {
            mean_diag.abs()
        } else {
            1.0e-4
        };
        let mut last: Option<Error> = None;
        for &rel in &[1e-8, 1e-6] {
            let d = self.diag_part(a);
            let mean_node = self.mean(d);
            let jit = self.scale(mean_node, rel * base / mean_diag.abs().max(1e-300));
            // When the diagonal mean is degenerate the jitter above reduces to
            // an absolute constant; keep the graph connected either way.
            let jit_vec = self.repeat_scalar(jit, n);
            let jit_mat = self.diag_embed(jit_vec);
            let aj = self.add(a, jit_mat);
            match self.cholesky(aj) {
                Ok(l) => return Ok(l),
                Err(e) => last = Some(e),
            }
        }
        Err(last.unwrap())
    }

    /// Fetches gradients for every node after a backward pass.
    pub fn backward(&self, root: Var, params: &mut ParamSet) -> Result<Vec<Tensor>> {
        let grads = self.backward_collect(root)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pid) } = node.op {
                let g = &grads[i];
                let slot = &mut params.params[pid].grad;
                for (s, gv) in slot.data.iter_mut().zip(g.data.iter()) {
                    *s += gv;
                }
            }
        }
        Ok(grads)
    }

    /// Reverse sweep returning one gradient tensor per node (zeros where a
    /// node does not influence the root).
    pub fn backward_collect(&self, root: Var) -> Result<Vec<Tensor>> {
        let root_shape = &self.nodes[root.0].value.shape;
        if root_shape != &vec![1] {
            return Err(Error::NonScalarRoot {
                shape: root_shape.clone(),
            });
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(&n.value.shape))
            .collect();
        grads[root.0].data[0] = 1.0;

        for idx in (0..=root.0).rev() {
            if grads[idx].data.iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = grads[idx].clone();
            match &self.nodes[idx].op {
                Op::Leaf { .. } => {}
                Op::Neg(a) => accum(&mut grads, *a, &g.map(|x| -x)),
                Op::Add(a, b) => {
                    accum(&mut grads, *a, &g);
                    accum(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *a, &g);
                    accum(&mut grads, *b, &g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip(&self.nodes[b.0].value, |x, y| x * y);
                    let gb = g.zip(&self.nodes[a.0].value, |x, y| x * y);
                    accum(&mut grads, *a, &ga);
                    accum(&mut grads, *b, &gb);
                }
                Op::Scale(a, c) => accum(&mut grads, *a, &g.scale(*c)),
                Op::Shift(a) => accum(&mut grads, *a, &g),
                Op::MulScalar(a, s) => {
                    let sv = self.nodes[s.0].value.data[0];
                    accum(&mut grads, *a, &g.scale(sv));
                    let gs = g.dot(&self.nodes[a.0].value);
                    accum(&mut grads, *s, &Tensor::scalar(gs));
                }
                Op::Recip(a) => {
                    let ga = g.zip(&self.nodes[a.0].value, |gv, x| -gv / (x * x));
                    accum(&mut grads, *a, &ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip(&self.nodes[idx].value, |gv, y| gv * y);
                    accum(&mut grads, *a, &ga);
                }
                Op::Ln(a) => {
                    let ga = g.zip(&self.nodes[a.0].value, |gv, x| gv / x);
                    accum(&mut grads, *a, &ga);
                }
                Op::Sqrt(a) => {
                    let ga = g.zip(&self.nodes[idx].value, |gv, y| gv / (2.0 * y));
                    accum(&mut grads, *a, &ga);
                }
                Op::Relu(a) => {
                    // Subgradient 0 at the kink.
                    let ga = g.zip(&self.nodes[a.0].value, |gv, x| if x > 0.0 { gv } else { 0.0 });
                    accum(&mut grads, *a, &ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip(&self.nodes[idx].value, |gv, y| gv * y * (1.0 - y));
                    accum(&mut grads, *a, &ga);
                }
                Op::Softplus(a) => {
                    let ga = g.zip(&self.nodes[a.0].value, |gv, x| gv * stable_sigmoid(x));
                    accum(&mut grads, *a, &ga);
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let gm = Tensor::new(self.nodes[idx].value.shape.clone(), g.data.clone());
                    let ga = gm.matmul(&bv.transpose());
                    let gb = av.transpose().matmul(&gm);
                    accum(&mut grads, *a, &reshape_like(&ga, av));
                    accum(&mut grads, *b, &reshape_like(&gb, bv));
                }
                Op::Transpose(a) => {
                    let gm = Tensor::new(self.nodes[idx].value.shape.clone(), g.data.clone());
                    accum(&mut grads, *a, &gm.transpose());
                }
                Op::Reshape(a) => {
                    let target = &self.nodes[a.0].value;
                    accum(&mut grads, *a, &reshape_like(&g, target));
                }
                Op::Row(a, i) => {
                    let src = &self.nodes[a.0].value;
                    let mut ga = Tensor::zeros(&src.shape);
                    let c = src.shape[1];
                    ga.data[i * c..(i + 1) * c].copy_from_slice(&g.data);
                    accum(&mut grads, *a, &ga);
                }
                Op::SliceCols(a, from, to) => {
                    let src = &self.nodes[a.0].value;
                    let (r, c) = (src.shape[0], src.shape[1]);
                    let w = to - from;
                    let mut ga = Tensor::zeros(&src.shape);
                    for i in 0..r {
                        for j in 0..w {
                            ga.data[i * c + from + j] = g.data[i * w + j];
                        }
                    }
                    accum(&mut grads, *a, &ga);
                }
                Op::ConcatCols(parts) => {
                    let r = self.nodes[idx].value.shape[0];
                    let total = self.nodes[idx].value.shape[1];
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.nodes[p.0].value.shape[1];
                        let mut gp = Tensor::zeros(&[r, pc]);
                        for i in 0..r {
                            for j in 0..pc {
                                gp.data[i * pc + j] = g.data[i * total + off + j];
                            }
                        }
                        accum(&mut grads, p, &gp);
                        off += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let c = self.nodes[idx].value.shape[1];
                    let mut off = 0;
                    for &p in parts {
                        let pr = self.nodes[p.0].value.shape[0];
                        let gp = Tensor::new(
                            vec![pr, c],
                            g.data[off * c..(off + pr) * c].to_vec(),
                        );
                        accum(&mut grads, p, &gp);
                        off += pr;
                    }
                }
                Op::BlockDiagRows(parts) => {
                    let total = self.nodes[idx].value.shape[1];
                    let mut off = 0;
                    for (i, &p) in parts.iter().enumerate() {
                        let w = self.nodes[p.0].value.shape[1];
                        let mut gp = Tensor::zeros(&[1, w]);
                        for j in 0..w {
                            gp.data[j] = g.data[i * total + off + j];
                        }
                        accum(&mut grads, p, &gp);
                        off += w;
                    }
                }
                Op::DiagPart(a) => {
                    let src = &self.nodes[a.0].value;
                    let mut ga = Tensor::zeros(&src.shape);
                    let n = g.len();
                    let c = src.shape[1];
                    for i in 0..n {
                        ga.data[i * c + i] = g.data[i];
                    }
                    accum(&mut grads, *a, &ga);
                }
                Op::DiagEmbed(a) => {
                    let n = self.nodes[a.0].value.len();
                    let ga = Tensor::vector((0..n).map(|i| g.data[i * n + i]).collect());
                    accum(&mut grads, *a, &ga);
                }
                Op::RepeatScalar(a) => {
                    accum(&mut grads, *a, &Tensor::scalar(g.sum()));
                }
                Op::Sum(a) => {
                    let src = &self.nodes[a.0].value;
                    accum(&mut grads, *a, &Tensor::new(src.shape.clone(), vec![g.data[0]; src.len()]));
                }
                Op::Mean(a) => {
                    let src = &self.nodes[a.0].value;
                    let gv = g.data[0] / src.len() as f64;
                    accum(&mut grads, *a, &Tensor::new(src.shape.clone(), vec![gv; src.len()]));
                }
                Op::SumRows(a) => {
                    let src = &self.nodes[a.0].value;
                    let (r, c) = (src.shape[0], src.shape[1]);
                    let mut ga = Tensor::zeros(&src.shape);
                    for i in 0..r {
                        for j in 0..c {
                            ga.data[i * c + j] = g.data[i];
                        }
                    }
                    accum(&mut grads, *a, &ga);
                }
                Op::AddRowVector(m, v) => {
                    accum(&mut grads, *m, &g);
                    let c = self.nodes[v.0].value.len();
                    let r = g.len() / c;
                    let mut gv = Tensor::zeros(&[c]);
                    for i in 0..r {
                        for j in 0..c {
                            gv.data[j] += g.data[i * c + j];
                        }
                    }
                    gv.shape = self.nodes[v.0].value.shape.clone();
                    accum(&mut grads, *v, &gv);
                }
                Op::AddColVector(m, v) => {
                    accum(&mut grads, *m, &g);
                    let r = self.nodes[v.0].value.len();
                    let c = g.len() / r;
                    let mut gv = Tensor::zeros(&[r]);
                    for i in 0..r {
                        for j in 0..c {
                            gv.data[i] += g.data[i * c + j];
                        }
                    }
                    gv.shape = self.nodes[v.0].value.shape.clone();
                    accum(&mut grads, *v, &gv);
                }
                Op::LogSumExpRows(a) => {
                    let src = &self.nodes[a.0].value;
                    let out = &self.nodes[idx].value;
                    let mut ga = Tensor::zeros(&src.shape);
                    match src.shape.len() {
                        1 => {
                            for j in 0..src.len() {
                                ga.data[j] = g.data[0] * (src.data[j] - out.data[0]).exp();
                            }
                        }
                        _ => {
                            let (r, c) = (src.shape[0], src.shape[1]);
                            for i in 0..r {
                                for j in 0..c {
                                    ga.data[i * c + j] =
                                        g.data[i] * (src.data[i * c + j] - out.data[i]).exp();
                                }
                            }
                        }
                    }
                    accum(&mut grads, *a, &ga);
                }
                Op::Cholesky(a) => {
                    let l = &self.nodes[idx].value;
                    let n = l.shape[0];
                    let gl = Tensor::new(vec![n, n], g.data.clone());
                    // Murray's formula: dA = 0.5 (V + V^T) with
                    // V = L^{-T} Phi(L^T dL) L^{-1}.
                    let p = l.transpose().matmul(&gl);
                    let mut phi = Tensor::zeros(&[n, n]);
                    for i in 0..n {
                        for j in 0..i {
                            phi.data[i * n + j] = p.data[i * n + j];
                        }
                        phi.data[i * n + i] = 0.5 * p.data[i * n + i];
                    }
                    let y_t = tensor::solve_lower_t(l, &phi.transpose());
                    let v = tensor::solve_lower_t(l, &y_t.transpose());
                    let mut ga = Tensor::zeros(&[n, n]);
                    for i in 0..n {
                        for j in 0..n {
                            ga.data[i * n + j] =
                                0.5 * (v.data[i * n + j] + v.data[j * n + i]);
                        }
                    }
                    accum(&mut grads, *a, &ga);
                }
                Op::SolveLower(lv, bv) => {
                    let l = &self.nodes[lv.0].value;
                    let x = &self.nodes[idx].value;
                    let gx = Tensor::new(x.shape.clone(), g.data.clone());
                    let gb = tensor::solve_lower_t(l, &gx);
                    let xm = as_matrix(x);
                    let gbm = as_matrix(&gb);
                    let gl_full = gbm.matmul(&xm.transpose());
                    let n = l.shape[0];
                    let mut gl = Tensor::zeros(&[n, n]);
                    for i in 0..n {
                        for j in 0..=i {
                            gl.data[i * n + j] = -gl_full.data[i * n + j];
                        }
                    }
                    accum(&mut grads, *lv, &gl);
                    accum(&mut grads, *bv, &reshape_like(&gb, &self.nodes[bv.0].value));
                }
                Op::SolveLowerT(lv, bv) => {
                    let l = &self.nodes[lv.0].value;
                    let x = &self.nodes[idx].value;
                    let gx = Tensor::new(x.shape.clone(), g.data.clone());
                    let gb = tensor::solve_lower(l, &gx);
                    let xm = as_matrix(x);
                    let gbm = as_matrix(&gb);
                    let gl_full = xm.matmul(&gbm.transpose());
                    let n = l.shape[0];
                    let mut gl = Tensor::zeros(&[n, n]);
                    for i in 0..n {
                        for j in 0..=i {
                            gl.data[i * n + j] = -gl_full.data[i * n + j];
                        }
                    }
                    accum(&mut grads, *lv, &gl);
                    accum(&mut grads, *bv, &reshape_like(&gb, &self.nodes[bv.0].value));
                }
                Op::HardSample(a) => {
                    // Straight-through estimator.
                    accum(&mut grads, *a, &g);
                }
                Op::PairwiseSqDist(z) => {
                    let zv = &self.nodes[z.0].value;
                    let m = zv.len();
                    let mut gz = Tensor::zeros(&zv.shape);
                    for i in 0..m {
                        for j in 0..m {
                            let d = zv.data[i] - zv.data[j];
                            gz.data[i] += 2.0 * d * (g.data[i * m + j] + g.data[j * m + i]);
                        }
                    }
                    accum(&mut grads, *z, &gz);
                }
                Op::CrossSqDist(z, xs) => {
                    let zv = &self.nodes[z.0].value;
                    let m = zv.len();
                    let mut gz = Tensor::zeros(&zv.shape);
                    for (t, &x) in xs.iter().enumerate() {
                        for j in 0..m {
                            gz.data[j] += -2.0 * (x - zv.data[j]) * g.data[t * m + j];
                        }
                    }
                    accum(&mut grads, *z, &gz);
                }
                Op::BatchTableLse {
                    t,
                    ci,
                    cj,
                    over_rows,
                } => {
                    let tv = &self.nodes[t.0].value;
                    let out = &self.nodes[idx].value;
                    let b = tv.shape[0];
                    let mut gt = Tensor::zeros(&tv.shape);
                    let keep = if *over_rows { *cj } else { *ci };
                    for bi in 0..b {
                        for k in 0..keep {
                            let go = g.data[bi * keep + k];
                            if go == 0.0 {
                                continue;
                            }
                            let lse = out.data[bi * keep + k];
                            if *over_rows {
                                for i in 0..*ci {
                                    let p = bi * ci * cj + i * cj + k;
                                    gt.data[p] += go * (tv.data[p] - lse).exp();
                                }
                            } else {
                                for j in 0..*cj {
                                    let p = bi * ci * cj + k * cj + j;
                                    gt.data[p] += go * (tv.data[p] - lse).exp();
                                }
                            }
                        }
                    }
                    accum(&mut grads, *t, &gt);
                }
                Op::BatchTableAddRow { t, v, ci, cj } => {
                    accum(&mut grads, *t, &g);
                    let b = self.nodes[v.0].value.shape[0];
                    let mut gv = Tensor::zeros(&[b, *ci]);
                    for bi in 0..b {
                        for i in 0..*ci {
                            for j in 0..*cj {
                                gv.data[bi * ci + i] += g.data[bi * ci * cj + i * cj + j];
                            }
                        }
                    }
                    accum(&mut grads, *v, &gv);
                }
                Op::BatchTableAddCol { t, v, ci, cj } => {
                    accum(&mut grads, *t, &g);
                    let b = self.nodes[v.0].value.shape[0];
                    let mut gv = Tensor::zeros(&[b, *cj]);
                    for bi in 0..b {
                        for i in 0..*ci {
                            for j in 0..*cj {
                                gv.data[bi * cj + j] += g.data[bi * ci * cj + i * cj + j];
                            }
                        }
                    }
                    accum(&mut grads, *v, &gv);
                }
                Op::BatchVecTable { v, t, ci, cj } => {
                    let vv = &self.nodes[v.0].value;
                    let tv = &self.nodes[t.0].value;
                    let b = tv.shape[0];
                    let mut gv = Tensor::zeros(&vv.shape);
                    let mut gt = Tensor::zeros(&tv.shape);
                    for bi in 0..b {
                        for i in 0..*ci {
                            for j in 0..*cj {
                                let go = g.data[bi * cj + j];
                                gv.data[bi * ci + i] += go * tv.data[bi * ci * cj + i * cj + j];
                                gt.data[bi * ci * cj + i * cj + j] += go * vv.data[bi * ci + i];
                            }
                        }
                    }
                    accum(&mut grads, *v, &gv);
                    accum(&mut grads, *t, &gt);
                }
                Op::LowerTriFromParts { diag, off, n } => {
                    let mut gd = Tensor::zeros(&self.nodes[diag.0].value.shape);
                    let mut go = Tensor::zeros(&self.nodes[off.0].value.shape);
                    let mut k = 0;
                    for i in 0..*n {
                        for j in 0..i {
                            go.data[k] = g.data[i * n + j];
                            k += 1;
                        }
                        gd.data[i] = g.data[i * n + i];
                    }
                    accum(&mut grads, *diag, &gd);
                    accum(&mut grads, *off, &go);
                }
            }
        }
        Ok(grads)
    }
}

fn accum(grads: &mut [Tensor], v: Var, g: &Tensor) {
    let slot = &mut grads[v.0];
    debug_assert_eq!(slot.len(), g.len(), "gradient shape mismatch");
    for (s, gv) in slot.data.iter_mut().zip(g.data.iter()) {
        *s += gv;
    }
}

fn reshape_like(t: &Tensor, like: &Tensor) -> Tensor {
    Tensor::new(like.shape.clone(), t.data.clone())
}

fn as_matrix(t: &Tensor) -> Tensor {
    match t.shape.len() {
        1 => Tensor::new(vec![t.shape[0], 1], t.data.clone()),
        _ => t.clone(),
    }
}

// ── Parameters and the adaptive-moment optimizer ─────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Trainable leaf: value, gradient slot, and first/second moment
/// accumulators for the adaptive-moment update.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        let shape = value.shape.clone();
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            step: 0,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Standard adaptive-moment update with bias correction. Gradient slots
    /// are left untouched; the caller zeroes them.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) {
        self.adam_step_subset(lr, beta1, beta2, eps, None)
    }

    /// Adam restricted to a subset of parameters (used when only some leaves
    /// are trainable, e.g. re-inference over inducing locations).
    pub fn adam_step_subset(
        &mut self,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        subset: Option<&[ParamId]>,
    ) {
        let ids: Vec<usize> = match subset {
            Some(s) => s.iter().map(|p| p.0).collect(),
            None => (0..self.params.len()).collect(),
        };
        for i in ids {
            let p = &mut self.params[i];
            p.step += 1;
            let t = p.step as f64;
            let bc1 = 1.0 - beta1.powf(t);
            let bc2 = 1.0 - beta2.powf(t);
            for j in 0..p.value.data.len() {
                let g = p.grad.data[j];
                p.m.data[j] = beta1 * p.m.data[j] + (1.0 - beta1) * g;
                p.v.data[j] = beta2 * p.v.data[j] + (1.0 - beta2) * g * g;
                let m_hat = p.m.data[j] / bc1;
                let v_hat = p.v.data[j] / bc2;
                p.value.data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

// ── MLP ─────────────────────────────────────────────────────────────

/// Final-layer activation of an MLP; hidden layers are always ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Identity,
    Sigmoid,
    Softplus,
}

/// Batched MLP forward on the tape: affine layers with ReLU hidden
/// non-linearities and a configurable output activation. Weights are
/// `[out, in]`, biases `[out]`, input `[B, in]`.
pub fn mlp_forward(
    tape: &mut Tape,
    layers: &[(Var, Var)],
    activation: Activation,
    input: Var,
) -> Result<Var> {
    let mut x = input;
    for (li, &(w, b)) in layers.iter().enumerate() {
        let wv = tape.value(w).shape.clone();
        let xv = tape.value(x).shape.clone();
        if wv.len() != 2 || xv.len() != 2 || xv[1] != wv[1] {
            return Err(Error::ShapeMismatch {
                op: "mlp_forward",
                expected: format!("input cols = weight cols ({})", wv.get(1).unwrap_or(&0)),
                got: format!("layer {li}: input {xv:?}, weight {wv:?}"),
            });
        }
        let wt = tape.transpose(w);
        let prod = tape.matmul(x, wt);
        x = tape.add_row_vector(prod, b);
        if li + 1 < layers.len() {
            x = tape.relu(x);
        }
    }
    Ok(match activation {
        Activation::Identity => x,
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Softplus => tape.softplus(x),
    })
}

/// Plain (untracked) MLP forward with the same conventions; used by data
/// generators with fixed decoder weights and by evaluation paths.
pub fn mlp_forward_pure(
    layers: &[(Tensor, Tensor)],
    activation: Activation,
    input: &Tensor,
) -> Tensor {
    let mut x = input.clone();
    for (li, (w, b)) in layers.iter().enumerate() {
        let mut y = x.matmul(&w.transpose());
        let (r, c) = (y.shape[0], y.shape[1]);
        for i in 0..r {
            for j in 0..c {
                y.data[i * c + j] += b.data[j];
            }
        }
        x = if li + 1 < layers.len() {
            y.map(|v| v.max(0.0))
        } else {
            y
        };
    }
    match activation {
        Activation::Identity => x,
        Activation::Sigmoid => x.map(stable_sigmoid),
        Activation::Softplus => x.map(stable_softplus),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, uniform_tensor};

    /// Central finite differences of a scalar function of flat inputs.
    fn finite_diff(
        f: &dyn Fn(&[Tensor]) -> f64,
        inputs: &[Tensor],
        step: f64,
    ) -> Vec<Tensor> {
        let mut grads = Vec::new();
        for pi in 0..inputs.len() {
            let mut g = Tensor::zeros(&inputs[pi].shape);
            for j in 0..inputs[pi].len() {
                let mut plus = inputs.to_vec();
                plus[pi].data[j] += step;
                let mut minus = inputs.to_vec();
                minus[pi].data[j] -= step;
                g.data[j] = (f(&plus) - f(&minus)) / (2.0 * step);
            }
            grads.push(g);
        }
        grads
    }

    fn check_grad(
        build: &dyn Fn(&mut Tape, &[Var]) -> Var,
        inputs: &[Tensor],
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward_collect(root).unwrap();

        let f = |ts: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ts.iter().map(|x| t.constant(x.clone())).collect();
            let r = build(&mut t, &vs);
            t.scalar_value(r)
        };
        let fd = finite_diff(&f, inputs, 1e-5);
        for (i, v) in vars.iter().enumerate() {
            let ad = &grads[v.0];
            let denom = fd[i].frobenius_norm().max(1e-8);
            let diff = ad
                .data
                .iter()
                .zip(fd[i].data.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(
                diff / denom < tol,
                "input {i}: ad={:?} fd={:?}",
                ad.data,
                fd[i].data
            );
        }
    }

    fn random_pd(rng: &mut crate::rng::Prng, n: usize) -> Tensor {
        let b = uniform_tensor(rng, &[n, n], -1.0, 1.0);
        let mut a = b.matmul(&b.transpose());
        for i in 0..n {
            *a.at_mut(i, i) += n as f64;
        }
        a
    }

    #[test]
    fn square_gradient() {
        // f(x) = x^2 at x = 3 -> gradient 6.
        let mut tape = Tape::new();
        let x = tape.constant_scalar(3.0);
        let y = tape.mul(x, x);
        let grads = tape.backward_collect(y).unwrap();
        assert!((grads[x.0].data[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn constant_scalar_has_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant_scalar(5.0);
        let s = tape.sum(x);
        let _ = s;
        let grads = tape.backward_collect(c).unwrap();
        assert!(grads[x.0].data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward_collect(x),
            Err(Error::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn repeated_backward_accumulates_into_params() {
        let mut params = ParamSet::new();
        let pid = params.add("x", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let x = tape.param(&params, pid);
        let y = tape.mul(x, x);
        tape.backward(y, &mut params).unwrap();
        tape.backward(y, &mut params).unwrap();
        assert!((params.grad(pid).data[0] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_network_matches_finite_differences() {
        // f = sum(sigmoid(W x + b)), checked against central differences.
        let mut rng = seeded(5);
        let w = uniform_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let x = uniform_tensor(&mut rng, &[4, 1], -2.0, 2.0);
        let b = uniform_tensor(&mut rng, &[3, 1], -2.0, 2.0);
        check_grad(
            &|t, vs| {
                let wx = t.matmul(vs[0], vs[1]);
                let z = t.add(wx, vs[2]);
                let s = t.sigmoid(z);
                t.sum(s)
            },
            &[w, x, b],
            1e-4,
        );
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = seeded(9);
        let x = uniform_tensor(&mut rng, &[2, 3], 0.3, 2.0);
        let y = uniform_tensor(&mut rng, &[2, 3], 0.3, 2.0);
        check_grad(
            &|t, vs| {
                let a = t.exp(vs[0]);
                let b = t.ln(vs[1]);
                let c = t.mul(a, b);
                let d = t.sqrt(vs[0]);
                let e = t.softplus(vs[1]);
                let f = t.add(c, d);
                let g = t.add(f, e);
                let h = t.recip(g);
                t.sum(h)
            },
            &[x, y],
            1e-4,
        );
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = seeded(13);
        let m = uniform_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let v = uniform_tensor(&mut rng, &[4], -2.0, 2.0);
        let u = uniform_tensor(&mut rng, &[3], -2.0, 2.0);
        check_grad(
            &|t, vs| {
                let a = t.add_row_vector(vs[0], vs[1]);
                let b = t.add_col_vector(a, vs[2]);
                let r = t.row(b, 1);
                let s1 = t.sum(r);
                let sl = t.slice_cols(b, 1, 3);
                let lse = t.logsumexp_rows(sl);
                let s2 = t.sum(lse);
                let tr = t.transpose(b);
                let sr = t.sum_rows(tr);
                let s3 = t.sum(sr);
                let t1 = t.add(s1, s2);
                t.add(t1, s3)
            },
            &[m, v, u],
            1e-4,
        );
    }

    #[test]
    fn block_and_concat_ops_match_finite_differences() {
        let mut rng = seeded(17);
        let a = uniform_tensor(&mut rng, &[1, 2], -2.0, 2.0);
        let b = uniform_tensor(&mut rng, &[1, 3], -2.0, 2.0);
        let w = uniform_tensor(&mut rng, &[5, 2], -1.0, 1.0);
        check_grad(
            &|t, vs| {
                let bd = t.block_diag_rows(&[vs[0], vs[1]]);
                let prod = t.matmul(bd, vs[2]);
                let cc = t.concat_cols(&[prod, prod]);
                let cr = t.concat_rows(&[cc, cc]);
                t.sum(cr)
            },
            &[a, b, w],
            1e-4,
        );
    }

    #[test]
    fn cholesky_and_solves_match_finite_differences() {
        let mut rng = seeded(21);
        let a = random_pd(&mut rng, 4);
        let b = uniform_tensor(&mut rng, &[4, 2], -1.0, 1.0);
        // Symmetrize the perturbed input inside the build so finite
        // differences stay within the symmetric manifold.
        check_grad(
            &|t, vs| {
                let at = t.transpose(vs[0]);
                let sym = t.add(vs[0], at);
                let half = t.scale(sym, 0.5);
                let l = t.cholesky(half).unwrap();
                let x = t.solve_lower(l, vs[1]);
                let y = t.solve_lower_t(l, x);
                let d = t.diag_part(l);
                let ld = t.ln(d);
                let s1 = t.sum(ld);
                let s2 = t.sum(y);
                t.add(s1, s2)
            },
            &[a, b],
            1e-4,
        );
    }

    #[test]
    fn distance_ops_match_finite_differences() {
        let mut rng = seeded(25);
        let z = uniform_tensor(&mut rng, &[4], -2.0, 2.0);
        check_grad(
            &|t, vs| {
                let d = t.pairwise_sqdist(vs[0]);
                let c = t.cross_sqdist(vs[0], &[0.3, -0.7, 1.1]);
                let e = t.exp(d);
                let s1 = t.sum(e);
                let s2 = t.sum(c);
                t.add(s1, s2)
            },
            &[z],
            1e-4,
        );
    }

    #[test]
    fn batch_table_ops_match_finite_differences() {
        let mut rng = seeded(29);
        let (b, ci, cj) = (2, 3, 2);
        let table = uniform_tensor(&mut rng, &[b, ci * cj], -1.5, 1.5);
        let vrow = uniform_tensor(&mut rng, &[b, ci], -1.5, 1.5);
        let vcol = uniform_tensor(&mut rng, &[b, cj], -1.5, 1.5);
        check_grad(
            &|t, vs| {
                let t1 = t.batch_table_add_row(vs[0], vs[1], ci, cj);
                let t2 = t.batch_table_add_col(t1, vs[2], ci, cj);
                let l1 = t.batch_table_lse(t2, ci, cj, true);
                let l2 = t.batch_table_lse(t2, ci, cj, false);
                let m = t.batch_vec_table(l2, t2, ci, cj);
                let s1 = t.sum(l1);
                let s2 = t.sum(m);
                t.add(s1, s2)
            },
            &[table, vrow, vcol],
            1e-4,
        );
    }

    #[test]
    fn lower_tri_assembly_matches_finite_differences() {
        let mut rng = seeded(33);
        let diag = uniform_tensor(&mut rng, &[3], 0.5, 2.0);
        let off = uniform_tensor(&mut rng, &[3], -1.0, 1.0);
        check_grad(
            &|t, vs| {
                let l = t.lower_tri_from_parts(vs[0], vs[1], 3);
                let lt = t.transpose(l);
                let s = t.matmul(l, lt);
                let e = t.exp(s);
                t.sum(e)
            },
            &[diag, off],
            1e-4,
        );
    }

    #[test]
    fn hard_sample_forward_and_straight_through() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.7, 0.3, 0.5]));
        let h = tape.hard_sample(x);
        assert_eq!(tape.value(h).data, vec![1.0, 0.0, 0.5]);
        let s = tape.sum(h);
        let grads = tape.backward_collect(s).unwrap();
        assert_eq!(grads[x.0].data, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameter_unchanged() {
        let mut params = ParamSet::new();
        let pid = params.add("w", Tensor::vector(vec![1.5, -2.0]));
        params.adam_step(0.01, 0.9, 0.999, 1e-8);
        assert_eq!(params.value(pid).data, vec![1.5, -2.0]);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        // First bias-corrected step: m_hat = g, v_hat = g^2, so the update is
        // exactly lr * g / (|g| + eps') with eps' = eps scaled post-correction.
        let mut params = ParamSet::new();
        let pid = params.add("w", Tensor::scalar(1.0));
        params.params[pid.0].grad.data[0] = 0.37;
        let lr = 0.05;
        params.adam_step(lr, 0.9, 0.999, 1e-8);
        let moved = 1.0 - params.value(pid).data[0];
        assert!((moved - lr).abs() < lr * 1e-6, "moved {moved}");
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut params = ParamSet::new();
            let pid = params.add("w", Tensor::vector(vec![0.3, -0.8, 2.0]));
            for step in 0..25 {
                for (j, g) in params.params[pid.0].grad.data.iter_mut().enumerate() {
                    *g = ((step * 3 + j) as f64).sin();
                }
                params.adam_step(1e-2, 0.9, 0.999, 1e-8);
                params.zero_grad();
            }
            params.value(pid).data.clone()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn mlp_zero_weights_gives_zero_output() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::zeros(&[3, 2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.1]));
        let out = mlp_forward(&mut tape, &[(w, b)], Activation::Identity, x).unwrap();
        assert!(tape.value(out).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_identity_layer_passes_input_through() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::eye(3));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]));
        let out = mlp_forward(&mut tape, &[(w, b)], Activation::Identity, x).unwrap();
        assert_eq!(tape.value(out).data, tape.value(x).data);
    }

    #[test]
    fn mlp_hand_computed_value() {
        // 2-2-1 net: hidden = relu(W1 x + b1), out = W2 hidden + b2.
        // x = [1, 2], W1 = [[1, -1], [0.5, 0.5]], b1 = [0.5, -2],
        // hidden pre = [1*1 - 1*2 + 0.5, 0.5 + 1 - 2] = [-0.5, -0.5] -> relu 0
        // wait: choose values that keep one unit active.
        // W1 x = [1 - 2, 0.5 + 1] = [-1, 1.5]; + b1 = [-0.5, -0.5].
        // Use b1 = [2, 0]: pre = [1, 1.5] -> relu = [1, 1.5].
        // W2 = [[2, -1]], b2 = [0.25] -> out = 2 - 1.5 + 0.25 = 0.75.
        let mut tape = Tape::new();
        let w1 = tape.constant(Tensor::matrix(&[vec![1.0, -1.0], vec![0.5, 0.5]]));
        let b1 = tape.constant(Tensor::vector(vec![2.0, 0.0]));
        let w2 = tape.constant(Tensor::matrix(&[vec![2.0, -1.0]]));
        let b2 = tape.constant(Tensor::vector(vec![0.25]));
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let out = mlp_forward(&mut tape, &[(w1, b1), (w2, b2)], Activation::Identity, x).unwrap();
        assert!((tape.value(out).data[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn mlp_shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::zeros(&[3, 5]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            mlp_forward(&mut tape, &[(w, b)], Activation::Identity, x),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn mlp_pure_matches_tape() {
        let mut rng = seeded(41);
        let w1 = uniform_tensor(&mut rng, &[4, 3], -1.0, 1.0);
        let b1 = uniform_tensor(&mut rng, &[4], -1.0, 1.0);
        let w2 = uniform_tensor(&mut rng, &[2, 4], -1.0, 1.0);
        let b2 = uniform_tensor(&mut rng, &[2], -1.0, 1.0);
        let x = uniform_tensor(&mut rng, &[5, 3], -2.0, 2.0);
        let pure = mlp_forward_pure(
            &[(w1.clone(), b1.clone()), (w2.clone(), b2.clone())],
            Activation::Sigmoid,
            &x,
        );
        let mut tape = Tape::new();
        let vars = [
            (tape.constant(w1), tape.constant(b1)),
            (tape.constant(w2), tape.constant(b2)),
        ];
        let xv = tape.constant(x);
        let out = mlp_forward(&mut tape, &vars, Activation::Sigmoid, xv).unwrap();
        assert!(tape.value(out).max_abs_diff(&pure) < 1e-14);
    }
}
