//! Wengert-style tape: ops record their inputs and whatever the backward pass
//! needs, then `backward` replays the record in reverse.
//!
//! The primitive op set is closed: matmul, add, mul, softmax, rms_norm,
//! row gather (embedding lookup) and its adjoint scatter-add, reshape,
//! permute, cross_entropy, sigmoid and log. Everything else (`sum_all`,
//! `silu`, `linear`, ...) is composed from those.

use std::collections::{HashMap, HashSet};

use super::{broadcast_offsets, broadcast_shape, Element, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        /// `b` is shared across the batch (a 2-D weight).
        shared_rhs: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Gather {
        table: Var,
        index: Vec<usize>,
    },
    ScatterAdd {
        src: Var,
        index: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Sigmoid {
        x: Var,
    },
    Log {
        x: Var,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Softmax { .. } => "softmax",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Log { .. } => "log",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Gradients of the leaves (and retained intermediates) after a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.remove(&var)
    }
}

/// Single-threaded record of one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    retained: HashSet<Var>,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            retained: HashSet::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::ReusedTape);
        }
        if v.0 >= self.nodes.len() {
            return Err(TensorError::UnknownVar(v.0));
        }
        Ok(())
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::ReusedTape);
        }
        let id = self.nodes.len();
        if !value.all_finite() {
            return Err(TensorError::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(id))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(Op::Leaf, value, false)
    }

    /// Keep the gradient of an intermediate value after `backward`.
    pub fn retain_grad(&mut self, v: Var) {
        self.retained.insert(v);
    }

    /// Matrix product. Accepts `[.., m, k] · [k, n]` (shared right operand)
    /// and `[b, m, k] · [b, k, n]` (batched).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (batch, m, k, n, shared_rhs, out_shape) = if sa.len() >= 2 && sb.len() == 2 {
            let k = sa[sa.len() - 1];
            if sb[0] != k {
                return Err(mismatch());
            }
            let m: usize = sa[..sa.len() - 1].iter().product();
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(sb[1]);
            (1, m, k, sb[1], true, shape)
        } else if sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1] {
            (sa[0], sa[1], sa[2], sb[2], false, vec![sa[0], sa[1], sb[2]])
        } else {
            return Err(mismatch());
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..batch {
                let bslice = if shared_rhs {
                    bv
                } else {
                    &bv[bi * k * n..(bi + 1) * k * n]
                };
                T::gemm(
                    m,
                    k,
                    n,
                    &av[bi * m * k..(bi + 1) * m * k],
                    (k as isize, 1),
                    bslice,
                    (n as isize, 1),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            Tensor::new(out_shape, out)?,
            rg,
        )
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let op_name = if mul { "mul" } else { "add" };
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| TensorError::ShapeMismatch {
            op: op_name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<T> = if sa == sb {
            if mul {
                av.iter().zip(bv).map(|(&x, &y)| x * y).collect()
            } else {
                av.iter().zip(bv).map(|(&x, &y)| x + y).collect()
            }
        } else {
            let oa = broadcast_offsets(&sa, &out_shape);
            let ob = broadcast_offsets(&sb, &out_shape);
            oa.iter()
                .zip(&ob)
                .map(|(&i, &j)| if mul { av[i] * bv[j] } else { av[i] + bv[j] })
                .collect()
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let op = if mul { Op::Mul { a, b } } else { Op::Add { a, b } };
        self.push(op, Tensor::new(out_shape, data)?, rg)
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::BadAxis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(xv[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push(Op::Softmax { x, axis }, Tensor::new(shape, out)?, rg)
    }

    /// `x / sqrt(mean(x²) + eps) · gain` over the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gain)?;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(gain) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "rms_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let rows = if d == 0 { 0 } else { xv.len() / d };
        let eps = T::from_f64_lossy(eps);
        let dt = T::from_f64_lossy(d as f64);
        let mut out = Vec::with_capacity(xv.len());
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / dt;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            out.extend(row.iter().zip(gv).map(|(&v, &g)| v * inv * g));
        }
        let rg = self.requires_grad(x) || self.requires_grad(gain);
        self.push(Op::RmsNorm { x, gain, inv_rms }, Tensor::new(shape, out)?, rg)
    }

    /// Row lookup `table[index[i], :]` (embedding gather) on a 2-D table.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        self.check(table)?;
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::BadAxis {
                op: "gather",
                axis: 1,
                rank: shape.len(),
            });
        }
        let (rows, d) = (shape[0], shape[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.requires_grad(table);
        self.push(
            Op::Gather {
                table,
                index: index.to_vec(),
            },
            Tensor::new(vec![index.len(), d], out)?,
            rg,
        )
    }

    /// Adjoint of [`gather_rows`](Self::gather_rows): `out[index[i], :] += src[i, :]`
    /// into a zero `[rows, d]` tensor.
    pub fn scatter_add_rows(&mut self, src: Var, index: &[usize], rows: usize) -> Result<Var> {
        self.check(src)?;
        let shape = self.shape(src).to_vec();
        if shape.len() != 2 || shape[0] != index.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_add",
                lhs: shape,
                rhs: vec![index.len()],
            });
        }
        let d = shape[1];
        let sv = self.value(src).data();
        let mut out = vec![T::zero(); rows * d];
        for (r, &i) in index.iter().enumerate() {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "scatter_add",
                    index: i,
                    bound: rows,
                });
            }
            for c in 0..d {
                out[i * d + c] = out[i * d + c] + sv[r * d + c];
            }
        }
        let rg = self.requires_grad(src);
        self.push(
            Op::ScatterAdd {
                src,
                index: index.to_vec(),
            },
            Tensor::new(vec![rows, d], out)?,
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.requires_grad(x);
        self.push(Op::Reshape { x }, value, rg)
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check(x)?;
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() {
            return Err(TensorError::BadAxis {
                op: "permute",
                axis: axes.len(),
                rank: shape.len(),
            });
        }
        for &a in axes {
            if a >= shape.len() || seen[a] {
                return Err(TensorError::BadAxis {
                    op: "permute",
                    axis: a,
                    rank: shape.len(),
                });
            }
            seen[a] = true;
        }
        let offsets = permute_offsets(&shape, axes);
        let xv = self.value(x).data();
        let data = offsets.iter().map(|&o| xv[o]).collect();
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let rg = self.requires_grad(x);
        self.push(
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            Tensor::new(out_shape, data)?,
            rg,
        )
    }

    /// Mean over unmasked rows of `-log softmax(logits)[target]`. `logits` is
    /// viewed as `[rows, V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        self.check(logits)?;
        let shape = self.shape(logits).to_vec();
        let v = *shape.last().unwrap_or(&0);
        let rows = if v == 0 { 0 } else { self.value(logits).numel() / v };
        if targets.len() != rows || mask.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyLossSupport);
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = 0.0f64;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: v,
                });
            }
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut sum = T::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[r * v + j] = e;
                sum = sum + e;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p = *p / sum;
            }
            let lse = max + sum.ln();
            total += (lse - row[t]).to_f64_lossy();
        }
        let loss = T::from_f64_lossy(total / count as f64);
        let rg = self.requires_grad(logits);
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            Tensor::scalar(loss),
            rg,
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x);
        let data = value
            .data()
            .iter()
            .map(|&v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            })
            .collect();
        let out = Tensor::new(value.shape().to_vec(), data)?;
        let rg = self.requires_grad(x);
        self.push(Op::Sigmoid { x }, out, rg)
    }

    /// Natural log; non-positive inputs surface as a non-finite error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x);
        let data = value.data().iter().map(|&v| v.ln()).collect();
        let out = Tensor::new(value.shape().to_vec(), data)?;
        let rg = self.requires_grad(x);
        self.push(Op::Log { x }, out, rg)
    }

    // ---- composites ----

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let s = self.constant(Tensor::scalar(T::from_f64_lossy(c)))?;
        self.mul(x, s)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Sum of all elements as a rank-0 tensor (ones-vector product).
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[1, n])?;
        let ones = self.constant(Tensor::ones(&[n, 1]))?;
        let s = self.matmul(flat, ones)?;
        self.reshape(s, &[])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let s = self.sigmoid(x)?;
        self.mul(x, s)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(TensorError::BadAxis {
                op: "transpose",
                axis: 1,
                rank,
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    /// `x · wᵀ` for a weight stored as `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let wt = self.transpose(w)?;
        self.matmul(x, wt)
    }

    // ---- reverse pass ----

    /// Populate gradients of every trainable leaf with respect to the scalar
    /// `root`. Consumes the record: a tape supports exactly one backward pass.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::ReusedTape);
        }
        self.check(root)?;
        if self.value(root).numel() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape(root).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        let mut out = HashMap::new();

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite {
                    op: node.op.name(),
                    node: id,
                });
            }
            self.propagate(id, &g, &mut grads)?;
            let var = Var(id);
            if matches!(node.op, Op::Leaf) || self.retained.contains(&var) {
                out.insert(var, Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        self.nodes.clear();
        self.retained.clear();
        self.consumed = true;
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {
                if nodes[$v.0].requires_grad {
                    let n = nodes[$v.0].value.numel();
                    let $buf = grads[$v.0].get_or_insert_with(|| vec![T::zero(); n]);
                    $body
                }
            };
        }

        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                with_grad!(*a, |ga| {
                    for bi in 0..batch {
                        let bs = if *shared_rhs {
                            bv
                        } else {
                            &bv[bi * k * n..(bi + 1) * k * n]
                        };
                        // dA = dC · Bᵀ
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n as isize, 1),
                            bs,
                            (1, n as isize),
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            true,
                        );
                    }
                });
                with_grad!(*b, |gb| {
                    for bi in 0..batch {
                        let dst = if *shared_rhs {
                            &mut gb[..]
                        } else {
                            &mut gb[bi * k * n..(bi + 1) * k * n]
                        };
                        // dB = Aᵀ · dC
                        T::gemm(
                            k,
                            m,
                            n,
                            &av[bi * m * k..(bi + 1) * m * k],
                            (1, k as isize),
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n as isize, 1),
                            dst,
                            true,
                        );
                    }
                });
            }
            Op::Add { a, b } | Op::Mul { a, b } => {
                let is_mul = matches!(nodes[id].op, Op::Mul { .. });
                let out_shape = nodes[id].value.shape();
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let same = sa == sb;
                let oa = if same {
                    Vec::new()
                } else {
                    broadcast_offsets(sa, out_shape)
                };
                let ob = if same {
                    Vec::new()
                } else {
                    broadcast_offsets(sb, out_shape)
                };
                let ia = |i: usize| if same { i } else { oa[i] };
                let ib = |i: usize| if same { i } else { ob[i] };
                with_grad!(*a, |ga| {
                    for (i, &gi) in g.iter().enumerate() {
                        let d = if is_mul { gi * bv[ib(i)] } else { gi };
                        ga[ia(i)] = ga[ia(i)] + d;
                    }
                });
                with_grad!(*b, |gb| {
                    for (i, &gi) in g.iter().enumerate() {
                        let d = if is_mul { gi * av[ia(i)] } else { gi };
                        gb[ib(i)] = gb[ib(i)] + d;
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = nodes[id].value.data();
                let shape = nodes[id].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                with_grad!(*x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let mut dot = T::zero();
                            for j in 0..len {
                                dot = dot + g[at(j)] * y[at(j)];
                            }
                            for j in 0..len {
                                let p = at(j);
                                gx[p] = gx[p] + y[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = nodes[x.0].value.data();
                let gv = nodes[gain.0].value.data();
                let d = gv.len();
                let dt = T::from_f64_lossy(d as f64);
                with_grad!(*gain, |gg| {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for j in 0..d {
                            gg[j] = gg[j] + g[r * d + j] * xv[r * d + j] * inv;
                        }
                    }
                });
                with_grad!(*x, |gx| {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = r * d;
                        let mut dot = T::zero();
                        for j in 0..d {
                            dot = dot + g[row + j] * gv[j] * xv[row + j];
                        }
                        let c = inv * inv * inv / dt * dot;
                        for j in 0..d {
                            gx[row + j] = gx[row + j] + inv * gv[j] * g[row + j] - c * xv[row + j];
                        }
                    }
                });
            }
            Op::Gather { table, index } => {
                let d = nodes[table.0].value.shape()[1];
                with_grad!(*table, |gt| {
                    for (r, &i) in index.iter().enumerate() {
                        for c in 0..d {
                            gt[i * d + c] = gt[i * d + c] + g[r * d + c];
                        }
                    }
                });
            }
            Op::ScatterAdd { src, index } => {
                let d = nodes[src.0].value.shape()[1];
                with_grad!(*src, |gs| {
                    for (r, &i) in index.iter().enumerate() {
                        for c in 0..d {
                            gs[r * d + c] = gs[r * d + c] + g[i * d + c];
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                with_grad!(*x, |gx| {
                    for (dst, &src) in gx.iter_mut().zip(g) {
                        *dst = *dst + src;
                    }
                });
            }
            Op::Permute { x, axes } => {
                let offsets = permute_offsets(nodes[x.0].value.shape(), axes);
                with_grad!(*x, |gx| {
                    for (i, &o) in offsets.iter().enumerate() {
                        gx[o] = gx[o] + g[i];
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = *nodes[logits.0].value.shape().last().unwrap_or(&0);
                let scale = g[0] / T::from_f64_lossy(*count as f64);
                with_grad!(*logits, |gl| {
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..v {
                            let p = probs[r * v + j];
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[r * v + j] = gl[r * v + j] + scale * (p - onehot);
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = nodes[id].value.data();
                with_grad!(*x, |gx| {
                    for (i, &gi) in g.iter().enumerate() {
                        gx[i] = gx[i] + gi * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Log { x } => {
                let xv = nodes[x.0].value.data();
                with_grad!(*x, |gx| {
                    for (i, &gi) in g.iter().enumerate() {
                        gx[i] = gx[i] + gi / xv[i];
                    }
                });
            }
        }
        Ok(())
    }
}

/// Input offsets, in output order, of the permutation `axes` applied to `shape`.
fn permute_offsets(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel: usize = shape.iter().product();
    let mut offsets = Vec::with_capacity(numel);
    let mut index = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        offsets.push(off);
        for d in (0..rank).rev() {
            index[d] += 1;
            off += strides[d];
            if index[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * index[d];
            index[d] = 0;
        }
    }
    offsets
}
