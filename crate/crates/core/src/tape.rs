//! Reverse-mode automatic differentiation over a per-forward tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Parameters and other
//! long-lived tensors enter by reference ([`Tape::param`] / [`Tape::ext`]),
//! so inference pays no copy cost; intermediates are owned by the tape and
//! die with it. [`Tape::backward`] runs once per tape and returns the
//! parameter gradients as a [`GradMap`], which the caller applies to the
//! store after the tape is dropped (the tape borrows the store immutably).
//!
//! Frozen sub-networks are expressed structurally: feed their weights with
//! `ext` instead of `param` and no gradient is ever computed for them.



use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Storage<'p, S> {
    Owned(Vec<S>),
    Borrowed(&'p [S]),
}

impl<S> Storage<'_, S> {
    fn as_slice(&self) -> &[S] {
        match self {
            Storage::Owned(v) => v,
            Storage::Borrowed(s) => s,
        }
    }
}

enum Op<S> {
    /// Constant or parameter leaf; `param_name` on the node marks trainables.
    Leaf,
    Matmul { a: Var, b: Var },
    MatmulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddBroadcast { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: S },
    Neg { a: Var },
    Embedding { table: Var, ids: Vec<u32> },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    LogSumExp { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var },
    Gelu { a: Var },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    Reshape { a: Var },
    Gather { a: Var, ids: Vec<usize> },
    LogAddExp { a: Var, b: Var },
    RepeatRows { a: Var, times: usize },
    TileRows { a: Var, times: usize },
    Sum { a: Var },
    Mean { a: Var },
}

struct Node<'p, S> {
    shape: Vec<usize>,
    data: Storage<'p, S>,
    /// Op-specific saved values (layer norm keeps `xhat ++ rstd`).
    aux: Vec<S>,
    op: Op<S>,
    needs_grad: bool,
    param_name: Option<String>,
}

/// Gradients collected by [`Tape::backward`], keyed by parameter name.
#[derive(Debug, Default)]
pub struct GradMap<S: Scalar> {
    grads: Vec<(String, Vec<S>)>,
}

impl<S: Scalar> GradMap<S> {
    /// Accumulates into the matching tensors' grad buffers (additive, as with
    /// repeated parameter use inside one tape or across micro-batches).
    pub fn apply(self, store: &mut ParamStore<S>) {
        for (name, g) in self.grads {
            let tensor = store
                .get_mut(&name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            if tensor.requires_grad() {
                tensor.accumulate_grad(&g);
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.grads.iter().map(|(n, _)| n)
    }
}

pub struct Tape<'p, S: Scalar> {
    nodes: Vec<Node<'p, S>>,
    grad_enabled: bool,
    consumed: bool,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

impl<'p, S: Scalar> Tape<'p, S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// Tape that records values only; no gradient bookkeeping. Used for
    /// inference and for frozen teacher forwards.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
            consumed: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[S] {
        self.nodes[v.0].data.as_slice()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<S>,
        aux: Vec<S>,
        op: Op<S>,
        needs_grad: bool,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let needs_grad = needs_grad && self.grad_enabled;
        // Without gradients the op record is dead weight; keep values only.
        let (op, aux) = if needs_grad { (op, aux) } else { (Op::Leaf, Vec::new()) };
        self.nodes.push(Node {
            shape,
            data: Storage::Owned(data),
            aux,
            op,
            needs_grad,
            param_name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Owned constant leaf (no gradient).
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<S>) -> Var {
        self.push(shape, data, Vec::new(), Op::Leaf, false)
    }

    pub fn scalar_input(&mut self, v: S) -> Var {
        self.input(vec![], vec![v])
    }

    /// Borrowed constant leaf: frozen weights, cached activations.
    pub fn ext(&mut self, t: &'p Tensor<S>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: Storage::Borrowed(t.data()),
            aux: Vec::new(),
            op: Op::Leaf,
            needs_grad: false,
            param_name: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed slice leaf (e.g. a KV cache segment).
    pub fn ext_slice(&mut self, shape: Vec<usize>, data: &'p [S]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data: Storage::Borrowed(data),
            aux: Vec::new(),
            op: Op::Leaf,
            needs_grad: false,
            param_name: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable parameter leaf; gradients are collected under `name`.
    pub fn param(&mut self, name: &str, t: &'p Tensor<S>) -> Var {
        let needs_grad = self.grad_enabled && t.requires_grad();
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: Storage::Borrowed(t.data()),
            aux: Vec::new(),
            op: Op::Leaf,
            needs_grad,
            param_name: needs_grad.then(|| name.to_string()),
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                left: s.to_vec(),
                right: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    // ── primitives ──────────────────────────────────────────────────────

    /// C = A @ B for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        kernels::matmul(self.value(a), m, ka, self.value(b), n, &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Vec::new(), Op::Matmul { a, b }, ng))
    }

    /// C = A @ B^T where B is (n, k).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.dims2(a, "matmul_nt")?;
        let (n, kb) = self.dims2(b, "matmul_nt")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        kernels::matmul_nt(self.value(a), m, ka, self.value(b), n, &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Vec::new(), Op::MatmulNT { a, b }, ng))
    }

    /// Elementwise sum of same-shape operands.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Vec::new(), Op::Add { a, b }, ng))
    }

    /// Adds a length-d bias vector to every row of a (n, d) operand.
    pub fn add_broadcast(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, d) = rows_cols(self.shape(a));
        let bs = self.shape(bias);
        if bs.len() != 1 || bs[0] != d {
            return Err(Error::ShapeMismatch {
                op: "add_broadcast",
                left: self.shape(a).to_vec(),
                right: bs.to_vec(),
            });
        }
        let bias_v = self.value(bias).to_vec();
        let out: Vec<S> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bias_v[i % d])
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(shape, out, Vec::new(), Op::AddBroadcast { a, bias }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Vec::new(), Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out: Vec<S> = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(shape, out, Vec::new(), Op::Scale { a, c }, ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out: Vec<S> = self.value(a).iter().map(|&x| -x).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(shape, out, Vec::new(), Op::Neg { a }, ng)
    }

    /// Row lookup: ids into a (vocab, d) table, yielding (len, d).
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (vocab, d) = self.dims2(table, "embedding")?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::ShapeMismatch {
                    op: "embedding",
                    left: vec![id],
                    right: vec![vocab],
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Vec::new(),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let (rows, cols) = rows_cols(self.shape(a));
        let mut out = vec![S::zero(); rows * cols];
        kernels::softmax_rows(self.value(a), rows, cols, &mut out);
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(shape, out, Vec::new(), Op::Softmax { a }, ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (rows, cols) = rows_cols(self.shape(a));
        let mut out = vec![S::zero(); rows * cols];
        kernels::log_softmax_rows(self.value(a), rows, cols, &mut out);
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(shape, out, Vec::new(), Op::LogSoftmax { a }, ng)
    }

    /// Reduces the last axis: (n, v) → (n,).
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let (rows, cols) = rows_cols(self.shape(a));
        let mut out = vec![S::zero(); rows];
        kernels::logsumexp_rows(self.value(a), rows, cols, &mut out);
        let ng = self.needs(a);
        self.push(vec![rows], out, Vec::new(), Op::LogSumExp { a }, ng)
    }

    /// Layer norm over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, d) = rows_cols(self.shape(x));
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gain).to_vec(),
            });
        }
        let eps = S::from_f64(1e-5);
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = vec![S::zero(); rows * d];
        // aux: normalized activations, then one rstd per row.
        let mut aux = vec![S::zero(); rows * d + rows];
        let inv_d = S::one() / S::from_f64(d as f64);
        for r in 0..rows {
            let xs = &xv[r * d..(r + 1) * d];
            let mut mean = S::zero();
            for &v in xs {
                mean += v;
            }
            mean *= inv_d;
            let mut var = S::zero();
            for &v in xs {
                let c = v - mean;
                var += c * c;
            }
            var *= inv_d;
            let rstd = S::one() / (var + eps).sqrt();
            for i in 0..d {
                let xhat = (xs[i] - mean) * rstd;
                aux[r * d + i] = xhat;
                out[r * d + i] = xhat * g[i] + b[i];
            }
            aux[rows * d + r] = rstd;
        }
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(shape, out, aux, Op::LayerNorm { x, gain, bias }, ng))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<S> = self.value(a).iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(shape, out, Vec::new(), Op::Gelu { a }, ng)
    }

    /// Rows `start..end` of a 2-D operand.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_rows")?;
        if start > end || end > m {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                left: vec![start, end],
                right: vec![m, n],
            });
        }
        let out = self.value(a)[start * n..end * n].to_vec();
        let ng = self.needs(a);
        Ok(self.push(
            vec![end - start, n],
            out,
            Vec::new(),
            Op::SliceRows { a, start },
            ng,
        ))
    }

    /// Columns `start..end` of a 2-D operand.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start > end || end > n {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: vec![start, end],
                right: vec![m, n],
            });
        }
        let w = end - start;
        let av = self.value(a);
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&av[r * n + start..r * n + end]);
        }
        let ng = self.needs(a);
        Ok(self.push(vec![m, w], out, Vec::new(), Op::SliceCols { a, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let (_, n) = self.dims2(parts[0], "concat_rows")?;
        let mut total = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, pn) = self.dims2(p, "concat_rows")?;
            if pn != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![n],
                    right: vec![pn],
                });
            }
            total += m;
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            vec![total, n],
            out,
            Vec::new(),
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let (m, _) = self.dims2(parts[0], "concat_cols")?;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| self.dims2(p, "concat_cols").map(|(pm, pn)| {
                debug_assert_eq!(pm, m);
                pn
            }))
            .collect::<Result<_>>()?;
        let total: usize = widths.iter().sum();
        let mut out = vec![S::zero(); m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for r in 0..m {
                out[r * total + off..r * total + off + w]
                    .copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            vec![m, total],
            out,
            Vec::new(),
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape,
            });
        }
        let out = self.value(a).to_vec();
        let ng = self.needs(a);
        Ok(self.push(shape, out, Vec::new(), Op::Reshape { a }, ng))
    }

    /// Picks scalars by flat index: out[i] = a.flat[ids[i]].
    pub fn gather(&mut self, a: Var, ids: &[usize]) -> Var {
        let av = self.value(a);
        let out: Vec<S> = ids.iter().map(|&i| av[i]).collect();
        let ng = self.needs(a);
        self.push(
            vec![ids.len()],
            out,
            Vec::new(),
            Op::Gather {
                a,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Picks whole rows of a 2-D operand by index (duplicates allowed).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(a, "select_rows")?;
        let mut ids = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            assert!(r < m, "row {r} out of bounds for {m} rows");
            ids.extend((r * n)..(r + 1) * n);
        }
        let flat = self.gather(a, &ids);
        self.reshape(flat, vec![rows.len(), n])
    }

    /// Elementwise stable log(exp(a) + exp(b)).
    pub fn logaddexp(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "logaddexp",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| kernels::logaddexp(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Vec::new(), Op::LogAddExp { a, b }, ng))
    }

    /// Repeats each row `times` times consecutively: (n,d) → (n·times, d).
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "repeat_rows")?;
        let av = self.value(a);
        let mut out = Vec::with_capacity(m * times * n);
        for r in 0..m {
            for _ in 0..times {
                out.extend_from_slice(&av[r * n..(r + 1) * n]);
            }
        }
        let ng = self.needs(a);
        Ok(self.push(
            vec![m * times, n],
            out,
            Vec::new(),
            Op::RepeatRows { a, times },
            ng,
        ))
    }

    /// Repeats the whole block `times` times: (n,d) → (times·n, d).
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "tile_rows")?;
        let av = self.value(a);
        let mut out = Vec::with_capacity(m * times * n);
        for _ in 0..times {
            out.extend_from_slice(av);
        }
        let ng = self.needs(a);
        Ok(self.push(
            vec![m * times, n],
            out,
            Vec::new(),
            Op::TileRows { a, times },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: S = self.value(a).iter().cloned().sum();
        let ng = self.needs(a);
        self.push(vec![], vec![s], Vec::new(), Op::Sum { a }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s: S = self.value(a).iter().cloned().sum();
        let ng = self.needs(a);
        self.push(
            vec![],
            vec![s / S::from_f64(n as f64)],
            Vec::new(),
            Op::Mean { a },
            ng,
        )
    }

    /// Scaled-dot-product attention with an additive mask, composed from the
    /// primitives so gradients flow through every piece.
    ///
    /// q: (nq, d), k/v: (nk, d), mask: (nq, nk) additive (0 visible, large
    /// negative masked). Splits into `n_heads` column groups.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Var,
        n_heads: usize,
    ) -> Result<Var> {
        let (_nq, d) = self.dims2(q, "attention")?;
        if d % n_heads != 0 {
            return Err(Error::ShapeMismatch {
                op: "attention",
                left: vec![d],
                right: vec![n_heads],
            });
        }
        let dh = d / n_heads;
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = self.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = self.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = self.slice_cols(v, h * dh, (h + 1) * dh)?;
            let scores = self.matmul_nt(qh, kh)?;
            let scaled = self.scale(scores, scale);
            let masked = self.add(scaled, mask)?;
            let attn = self.softmax(masked);
            let out = self.matmul(attn, vh)?;
            heads.push(out);
        }
        self.concat_cols(&heads)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Returns parameter gradients keyed by
    /// name; apply them with [`GradMap::apply`] once the tape is dropped.
    /// A second call on the same tape is an error.
    pub fn backward(&mut self, loss: Var) -> Result<GradMap<S>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        if !self.value(loss)[0].is_finite() {
            log::warn!("backward on non-finite loss {}", self.value(loss)[0]);
        }

        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![S::one()]);
        }

        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads);
            // Keep leaf grads for export.
            if self.nodes[i].param_name.is_some() {
                grads[i] = Some(g);
            }
        }

        let mut map = GradMap::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param_name {
                if let Some(g) = grads[i].take() {
                    map.grads.push((name.clone(), g));
                }
            }
        }
        Ok(map)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], v: Var, delta: impl Fn(&mut [S])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![S::zero(); self.value(v).len()]);
        }
        delta(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![S::zero(); m * k];
                    kernels::matmul_nt(g, m, n, self.value(*b), k, &mut da);
                    self.accumulate(grads, *a, |buf| add_into(buf, &da));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![S::zero(); k * n];
                    kernels::matmul_tn(self.value(*a), m, k, g, n, &mut db);
                    self.accumulate(grads, *b, |buf| add_into(buf, &db));
                }
            }
            Op::MatmulNT { a, b } => {
                // C = A @ B^T, A (m,k), B (n,k), C (m,n)
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.nodes[a.0].needs_grad {
                    // dA = dC @ B
                    let mut da = vec![S::zero(); m * k];
                    kernels::matmul(g, m, n, self.value(*b), k, &mut da);
                    self.accumulate(grads, *a, |buf| add_into(buf, &da));
                }
                if self.nodes[b.0].needs_grad {
                    // dB = dC^T @ A
                    let mut db = vec![S::zero(); n * k];
                    kernels::matmul_tn(g, m, n, self.value(*a), k, &mut db);
                    self.accumulate(grads, *b, |buf| add_into(buf, &db));
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |buf| add_into(buf, g));
                self.accumulate(grads, *b, |buf| add_into(buf, g));
            }
            Op::AddBroadcast { a, bias } => {
                self.accumulate(grads, *a, |buf| add_into(buf, g));
                let d = self.value(*bias).len();
                self.accumulate(grads, *bias, |buf| {
                    for (i, &gv) in g.iter().enumerate() {
                        buf[i % d] += gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                self.accumulate(grads, *a, |buf| {
                    for ((o, &gv), &bvv) in buf.iter_mut().zip(g).zip(bv) {
                        *o += gv * bvv;
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    for ((o, &gv), &avv) in buf.iter_mut().zip(g).zip(av) {
                        *o += gv * avv;
                    }
                });
            }
            Op::Scale { a, c } => {
                let c = *c;
                self.accumulate(grads, *a, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv * c;
                    }
                });
            }
            Op::Neg { a } => {
                self.accumulate(grads, *a, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o -= gv;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                self.accumulate(grads, *table, |buf| {
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = &mut buf[id as usize * d..(id as usize + 1) * d];
                        let src = &g[row * d..(row + 1) * d];
                        add_into(dst, src);
                    }
                });
            }
            Op::Softmax { a } => {
                let (rows, cols) = rows_cols(&node.shape);
                let y = node.data.as_slice();
                self.accumulate(grads, *a, |buf| {
                    for r in 0..rows {
                        let ys = &y[r * cols..(r + 1) * cols];
                        let gs = &g[r * cols..(r + 1) * cols];
                        let mut dot = S::zero();
                        for (&yv, &gv) in ys.iter().zip(gs) {
                            dot += yv * gv;
                        }
                        let bs = &mut buf[r * cols..(r + 1) * cols];
                        for ((o, &yv), &gv) in bs.iter_mut().zip(ys).zip(gs) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { a } => {
                let (rows, cols) = rows_cols(&node.shape);
                let y = node.data.as_slice();
                self.accumulate(grads, *a, |buf| {
                    for r in 0..rows {
                        let ys = &y[r * cols..(r + 1) * cols];
                        let gs = &g[r * cols..(r + 1) * cols];
                        let gsum: S = gs.iter().cloned().sum();
                        let bs = &mut buf[r * cols..(r + 1) * cols];
                        for ((o, &yv), &gv) in bs.iter_mut().zip(ys).zip(gs) {
                            *o += gv - yv.exp() * gsum;
                        }
                    }
                });
            }
            Op::LogSumExp { a } => {
                let (rows, cols) = rows_cols(self.shape(*a));
                let x = self.value(*a);
                let out = node.data.as_slice();
                self.accumulate(grads, *a, |buf| {
                    for r in 0..rows {
                        let o = out[r];
                        let gv = g[r];
                        let xs = &x[r * cols..(r + 1) * cols];
                        let bs = &mut buf[r * cols..(r + 1) * cols];
                        for (b, &xv) in bs.iter_mut().zip(xs) {
                            *b += gv * (xv - o).exp();
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                let (rows, d) = rows_cols(&node.shape);
                let xhat = &node.aux[..rows * d];
                let rstd = &node.aux[rows * d..];
                let gv = self.value(*gain);
                let inv_d = S::one() / S::from_f64(d as f64);
                self.accumulate(grads, *x, |buf| {
                    for r in 0..rows {
                        let gs = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for i in 0..d {
                            let dxh = gs[i] * gv[i];
                            m1 += dxh;
                            m2 += dxh * xh[i];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        let bs = &mut buf[r * d..(r + 1) * d];
                        for i in 0..d {
                            let dxh = gs[i] * gv[i];
                            bs[i] += rstd[r] * (dxh - m1 - xh[i] * m2);
                        }
                    }
                });
                self.accumulate(grads, *gain, |buf| {
                    for r in 0..rows {
                        for i in 0..d {
                            buf[i] += g[r * d + i] * xhat[r * d + i];
                        }
                    }
                });
                self.accumulate(grads, *bias, |buf| {
                    for r in 0..rows {
                        for i in 0..d {
                            buf[i] += g[r * d + i];
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let x = self.value(*a);
                self.accumulate(grads, *a, |buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(x) {
                        *o += gv * gelu_bwd(xv);
                    }
                });
            }
            Op::SliceRows { a, start } => {
                let n = self.shape(*a)[1];
                let start = *start;
                self.accumulate(grads, *a, |buf| {
                    add_into(&mut buf[start * n..start * n + g.len()], g);
                });
            }
            Op::SliceCols { a, start } => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let w = node.shape[1];
                let start = *start;
                self.accumulate(grads, *a, |buf| {
                    for r in 0..m {
                        let dst = &mut buf[r * n + start..r * n + start + w];
                        add_into(dst, &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, |buf| add_into(buf, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols { parts } => {
                let m = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.accumulate(grads, p, |buf| {
                        for r in 0..m {
                            add_into(
                                &mut buf[r * w..(r + 1) * w],
                                &g[r * total + off..r * total + off + w],
                            );
                        }
                    });
                    off += w;
                }
            }
            Op::Reshape { a } => {
                self.accumulate(grads, *a, |buf| add_into(buf, g));
            }
            Op::Gather { a, ids } => {
                self.accumulate(grads, *a, |buf| {
                    for (out_i, &flat) in ids.iter().enumerate() {
                        buf[flat] += g[out_i];
                    }
                });
            }
            Op::LogAddExp { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let out = node.data.as_slice();
                self.accumulate(grads, *a, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * (av[i] - out[i]).exp();
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * (bv[i] - out[i]).exp();
                    }
                });
            }
            Op::RepeatRows { a, times } => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let times = *times;
                self.accumulate(grads, *a, |buf| {
                    for r in 0..m {
                        for t in 0..times {
                            let src = &g[(r * times + t) * n..(r * times + t + 1) * n];
                            add_into(&mut buf[r * n..(r + 1) * n], src);
                        }
                    }
                });
            }
            Op::TileRows { a, times } => {
                let len = self.value(*a).len();
                let times = *times;
                self.accumulate(grads, *a, |buf| {
                    for t in 0..times {
                        add_into(buf, &g[t * len..(t + 1) * len]);
                    }
                });
            }
            Op::Sum { a } => {
                let gv = g[0];
                self.accumulate(grads, *a, |buf| {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::Mean { a } => {
                let n = self.value(*a).len();
                let gv = g[0] / S::from_f64(n as f64);
                self.accumulate(grads, *a, |buf| {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                });
            }
        }
    }
}

impl<S: Scalar> Default for Tape<'_, S> {
    fn default() -> Self {
        Tape::new()
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}
