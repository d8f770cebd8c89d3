//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every tensor is a row-major `(rows, cols)` matrix of `f64`.  Operations
//! execute eagerly and append a node recording what is needed for the
//! backward pass; [`Tape::backward`] then walks the nodes in reverse and
//! accumulates gradients.  A fresh tape is built per training step while
//! parameters live outside the tape (see [`super::layers::ParamStore`]).
//!
//! Fused nodes (multi-head attention, 1-D convolution, generalized divisive
//! normalization, the base-2 two-term cross-entropy) keep the tape short and
//! their backward passes analytic.

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub grad: Option<Vec<f64>>,
    op: Op,
    /// Whether gradients should propagate into/through this node.
    pub needs_grad: bool,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Elementwise product with a constant tensor (no gradient to the mask).
    MulConst(Var, Vec<f64>),
    /// Row `r` multiplied by constant `mask[r]`.
    MulRowConst(Var, Vec<f64>),
    /// `[n, d]` matrix plus a `[1, d]` row vector broadcast over rows.
    AddRowBroadcast(Var, Var),
    /// Same-shape constant tensor added (no gradient to the constant).
    AddConst(Var),
    Matmul(Var, Var),
    /// `a @ b^T` where `a: [m, k]`, `b: [n, k]`.
    MatmulBt(Var, Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    /// Fused multi-head self-attention over `seqs` sequences of length `len`.
    Mha {
        x: Var,
        wq: Var,
        wk: Var,
        wv: Var,
        wo: Var,
        bq: Var,
        bk: Var,
        bv: Var,
        bo: Var,
        heads: usize,
        seqs: usize,
        len: usize,
        q: Vec<f64>,
        k: Vec<f64>,
        v: Vec<f64>,
        probs: Vec<f64>,
        ctx: Vec<f64>,
    },
    /// 1-D convolution along each sequence, kernel 3, stride 1, zero padding.
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        seqs: usize,
        len: usize,
        /// Correlate with the flipped kernel (transposed-convolution layout).
        flip: bool,
    },
    /// Generalized divisive normalization across columns of each row.
    Gdn {
        x: Var,
        beta_r: Var,
        gamma_r: Var,
        inverse: bool,
        denom: Vec<f64>,
    },
    /// `y = target * x / ||x||` over the whole tensor.
    NormalizeToPower {
        x: Var,
        target: f64,
        norm: f64,
    },
    /// Interleaved (re, im) pairs multiplied by a complex constant.
    ComplexScale {
        x: Var,
        re: f64,
        im: f64,
    },
    ConcatCols(Vec<Var>),
    SumList(Vec<Var>),
    Sum(Var),
    AddScaled(Var, Var, f64),
    Dropout(Var, Vec<f64>),
    /// Two-term binary cross-entropy in bits over softmax rows, masked and
    /// averaged over `sentences`.
    SoftmaxBce2 {
        logits: Var,
        targets: Vec<usize>,
        row_mask: Vec<f64>,
        sentences: usize,
        probs: Vec<f64>,
    },
    Reshape(Var),
}

/// Probability clamp bounds used inside the cross-entropy.
pub const PROB_CLAMP: f64 = 1e-12;

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, data: Vec<f64>, rows: usize, cols: usize, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node {
            data,
            rows,
            cols,
            grad: None,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable leaf (parameters are loaded through this).
    pub fn leaf(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> Var {
        self.push(data, rows, cols, Op::Leaf, true)
    }

    /// A constant leaf; gradients stop here.
    pub fn constant(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> Var {
        self.push(data, rows, cols, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Copies a value out of the tape as a gradient-stopped constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let (rows, cols) = self.shape(v);
        let data = self.nodes[v.0].data.clone();
        self.constant(data, rows, cols)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (r, c), "add shape mismatch");
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(data, r, c, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (r, c), "sub shape mismatch");
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(data, r, c, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (r, c), "mul shape mismatch");
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(data, r, c, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let data = self.value(a).iter().map(|x| x * s).collect();
        let ng = self.needs(a);
        self.push(data, r, c, Op::Scale(a, s), ng)
    }

    pub fn mul_const(&mut self, a: Var, mask: &[f64]) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(mask.len(), r * c, "mul_const mask length");
        let data = zip_map(self.value(a), mask, |x, m| x * m);
        let ng = self.needs(a);
        self.push(data, r, c, Op::MulConst(a, mask.to_vec()), ng)
    }

    pub fn mul_row_const(&mut self, a: Var, mask: &[f64]) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(mask.len(), r, "mul_row_const mask length");
        let mut data = self.value(a).to_vec();
        for i in 0..r {
            let m = mask[i];
            for x in &mut data[i * c..(i + 1) * c] {
                *x *= m;
            }
        }
        let ng = self.needs(a);
        self.push(data, r, c, Op::MulRowConst(a, mask.to_vec()), ng)
    }

    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "broadcast row must be [1, cols]");
        let mut data = self.value(a).to_vec();
        let rv = self.value(row).to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += rv[j];
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(data, r, c, Op::AddRowBroadcast(a, row), ng)
    }

    pub fn add_const(&mut self, a: Var, k: &[f64]) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(k.len(), r * c, "add_const length");
        let data = zip_map(self.value(a), k, |x, y| x + y);
        let ng = self.needs(a);
        self.push(data, r, c, Op::AddConst(a), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims");
        let mut data = vec![0.0; m * n];
        matmul_ab(self.value(a), self.value(b), m, k, n, &mut data);
        let ng = self.needs(a) || self.needs(b);
        self.push(data, m, n, Op::Matmul(a, b), ng)
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_bt inner dims");
        let mut data = vec![0.0; m * n];
        matmul_abt(self.value(a), self.value(b), m, k, n, &mut data);
        let ng = self.needs(a) || self.needs(b);
        self.push(data, m, n, Op::MatmulBt(a, b), ng)
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let (v, d) = self.shape(table);
        let mut data = vec![0.0; ids.len() * d];
        {
            let t = self.value(table);
            for (r, &id) in ids.iter().enumerate() {
                assert!(id < v, "embedding id {id} out of range {v}");
                data[r * d..(r + 1) * d].copy_from_slice(&t[id * d..(id + 1) * d]);
            }
        }
        let ng = self.needs(table);
        self.push(
            data,
            ids.len(),
            d,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let data = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let ng = self.needs(a);
        self.push(data, r, c, Op::Relu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut data = self.value(a).to_vec();
        for i in 0..r {
            softmax_in_place(&mut data[i * c..(i + 1) * c]);
        }
        let ng = self.needs(a);
        self.push(data, r, c, Op::SoftmaxRows(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, c));
        assert_eq!(self.shape(beta), (1, c));
        let mut data = vec![0.0; r * c];
        let mut mean = vec![0.0; r];
        let mut rstd = vec![0.0; r];
        {
            let xv = self.value(x);
            let g = self.nodes[gamma.0].data.clone();
            let b = self.nodes[beta.0].data.clone();
            for i in 0..r {
                let row = &xv[i * c..(i + 1) * c];
                let m = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / c as f64;
                let rs = 1.0 / (var + eps).sqrt();
                mean[i] = m;
                rstd[i] = rs;
                for j in 0..c {
                    data[i * c + j] = (row[j] - m) * rs * g[j] + b[j];
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            data,
            r,
            c,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            ng,
        )
    }

    /// Multi-head self-attention over `seqs` sequences of `len` rows each.
    ///
    /// `x` is `[seqs*len, d]`; weights are `[d, d]`, biases `[1, d]`.
    #[allow(clippy::too_many_arguments)]
    pub fn mha(
        &mut self,
        x: Var,
        wq: Var,
        wk: Var,
        wv: Var,
        wo: Var,
        bq: Var,
        bk: Var,
        bv: Var,
        bo: Var,
        heads: usize,
        seqs: usize,
        len: usize,
    ) -> Var {
        let (rows, d) = self.shape(x);
        assert_eq!(rows, seqs * len, "mha row count");
        assert_eq!(d % heads, 0, "head count must divide width");
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();

        let project = |t: &Tape, w: Var, b: Var| -> Vec<f64> {
            let mut out = vec![0.0; rows * d];
            matmul_ab(t.value(x), t.value(w), rows, d, d, &mut out);
            let bv = t.value(b);
            for i in 0..rows {
                for j in 0..d {
                    out[i * d + j] += bv[j];
                }
            }
            out
        };
        let q = project(self, wq, bq);
        let k = project(self, wk, bk);
        let v = project(self, wv, bv);

        let mut probs = vec![0.0; seqs * heads * len * len];
        let mut ctx = vec![0.0; rows * d];
        for s in 0..seqs {
            for h in 0..heads {
                let off = h * dk;
                let p = &mut probs[(s * heads + h) * len * len..(s * heads + h + 1) * len * len];
                for i in 0..len {
                    let qi = &q[(s * len + i) * d + off..(s * len + i) * d + off + dk];
                    for j in 0..len {
                        let kj = &k[(s * len + j) * d + off..(s * len + j) * d + off + dk];
                        p[i * len + j] = scale * dot(qi, kj);
                    }
                }
                for i in 0..len {
                    softmax_in_place(&mut p[i * len..(i + 1) * len]);
                }
                for i in 0..len {
                    let crow = s * len + i;
                    for j in 0..len {
                        let w = p[i * len + j];
                        let vj = &v[(s * len + j) * d + off..(s * len + j) * d + off + dk];
                        for (t, &vv) in vj.iter().enumerate() {
                            ctx[crow * d + off + t] += w * vv;
                        }
                    }
                }
            }
        }

        let mut data = vec![0.0; rows * d];
        matmul_ab(&ctx, self.value(wo), rows, d, d, &mut data);
        let bov = self.value(bo);
        for i in 0..rows {
            for j in 0..d {
                data[i * d + j] += bov[j];
            }
        }

        let ng = [x, wq, wk, wv, wo, bq, bk, bv, bo]
            .iter()
            .any(|&p| self.needs(p));
        self.push(
            data,
            rows,
            d,
            Op::Mha {
                x,
                wq,
                wk,
                wv,
                wo,
                bq,
                bk,
                bv,
                bo,
                heads,
                seqs,
                len,
                q,
                k,
                v,
                probs,
                ctx,
            },
            ng,
        )
    }

    /// Kernel-3 same-length 1-D convolution per sequence.
    ///
    /// `x` is `[seqs*len, cin]`, `w` is `[cout, 3*cin]` (tap-major), `b` is
    /// `[1, cout]`.  `flip` reverses the tap order (transposed convolution
    /// with stride 1).
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, seqs: usize, len: usize, flip: bool) -> Var {
        let (rows, cin) = self.shape(x);
        assert_eq!(rows, seqs * len, "conv1d row count");
        let (cout, wk) = self.shape(w);
        assert_eq!(wk, 3 * cin, "conv1d kernel layout");
        assert_eq!(self.shape(b), (1, cout));
        let mut data = vec![0.0; rows * cout];
        {
            let xv = self.value(x);
            let wv = self.nodes[w.0].data.clone();
            let bv = self.nodes[b.0].data.clone();
            for s in 0..seqs {
                for t in 0..len {
                    let orow = s * len + t;
                    for co in 0..cout {
                        let mut acc = bv[co];
                        for (tap, dt) in [-1i64, 0, 1].iter().enumerate() {
                            let src = t as i64 + dt;
                            if src < 0 || src >= len as i64 {
                                continue;
                            }
                            let tap_idx = if flip { 2 - tap } else { tap };
                            let xrow = &xv[(s * len + src as usize) * cin..][..cin];
                            let wrow = &wv[co * wk + tap_idx * cin..][..cin];
                            acc += dot(xrow, wrow);
                        }
                        data[orow * cout + co] = acc;
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            data,
            rows,
            cout,
            Op::Conv1d {
                x,
                w,
                b,
                seqs,
                len,
                flip,
            },
            ng,
        )
    }

    /// (Inverse) generalized divisive normalization across columns.
    ///
    /// `y_i = x_i * (beta_i + sum_j gamma_ij x_j^2)^(-1/2)` (GDN) or the
    /// `(+1/2)` power (IGDN).  `beta = beta_r^2 + 1e-6`, `gamma = gamma_r^2`.
    pub fn gdn(&mut self, x: Var, beta_r: Var, gamma_r: Var, inverse: bool) -> Var {
        let (rows, ch) = self.shape(x);
        assert_eq!(self.shape(beta_r), (1, ch));
        assert_eq!(self.shape(gamma_r), (ch, ch));
        let mut data = vec![0.0; rows * ch];
        let mut denom = vec![0.0; rows * ch];
        {
            let xv = self.value(x);
            let br = self.nodes[beta_r.0].data.clone();
            let gr = self.nodes[gamma_r.0].data.clone();
            for r in 0..rows {
                let row = &xv[r * ch..(r + 1) * ch];
                for i in 0..ch {
                    let mut d = br[i] * br[i] + 1e-6;
                    for j in 0..ch {
                        let g = gr[i * ch + j];
                        d += g * g * row[j] * row[j];
                    }
                    denom[r * ch + i] = d;
                    let p = if inverse { d.sqrt() } else { 1.0 / d.sqrt() };
                    data[r * ch + i] = row[i] * p;
                }
            }
        }
        let ng = self.needs(x) || self.needs(beta_r) || self.needs(gamma_r);
        self.push(
            data,
            rows,
            ch,
            Op::Gdn {
                x,
                beta_r,
                gamma_r,
                inverse,
                denom,
            },
            ng,
        )
    }

    /// Scales the whole tensor so its L2 norm becomes `target`.
    ///
    /// Returns `None` when the input has zero energy.
    pub fn normalize_to_power(&mut self, x: Var, target: f64) -> Option<Var> {
        let (r, c) = self.shape(x);
        let norm = self.value(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return None;
        }
        let s = target / norm;
        let data = self.value(x).iter().map(|v| v * s).collect();
        let ng = self.needs(x);
        Some(self.push(data, r, c, Op::NormalizeToPower { x, target, norm }, ng))
    }

    /// Multiplies interleaved (re, im) pairs by the complex constant `re + j*im`.
    pub fn complex_scale(&mut self, x: Var, re: f64, im: f64) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!((r * c) % 2, 0, "complex_scale needs an even element count");
        let xv = self.value(x);
        let mut data = vec![0.0; r * c];
        for t in 0..r * c / 2 {
            let (a, b) = (xv[2 * t], xv[2 * t + 1]);
            data[2 * t] = a * re - b * im;
            data[2 * t + 1] = a * im + b * re;
        }
        let ng = self.needs(x);
        self.push(data, r, c, Op::ComplexScale { x, re, im }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = vec![0.0; rows * total];
        let mut col0 = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            assert_eq!(pr, rows, "concat_cols row mismatch");
            let pv = self.value(p);
            for i in 0..rows {
                data[i * total + col0..i * total + col0 + pc]
                    .copy_from_slice(&pv[i * pc..(i + 1) * pc]);
            }
            col0 += pc;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(data, rows, total, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Elementwise sum of same-shape tensors.
    pub fn sum_list(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (r, c) = self.shape(parts[0]);
        let mut data = vec![0.0; r * c];
        for &p in parts {
            assert_eq!(self.shape(p), (r, c), "sum_list shape mismatch");
            for (d, v) in data.iter_mut().zip(self.value(p)) {
                *d += v;
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(data, r, c, Op::SumList(parts.to_vec()), ng)
    }

    /// Sum of all entries, as a `[1, 1]` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).iter().sum();
        let ng = self.needs(a);
        self.push(vec![total], 1, 1, Op::Sum(a), ng)
    }

    /// `a + s * b`.
    pub fn add_scaled(&mut self, a: Var, b: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (r, c), "add_scaled shape mismatch");
        let data = zip_map(self.value(a), self.value(b), |x, y| x + s * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(data, r, c, Op::AddScaled(a, b, s), ng)
    }

    /// Inverted dropout with a caller-supplied 0 / (1/(1-p)) mask.
    pub fn dropout(&mut self, a: Var, mask: &[f64]) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(mask.len(), r * c, "dropout mask length");
        let data = zip_map(self.value(a), mask, |x, m| x * m);
        let ng = self.needs(a);
        self.push(data, r, c, Op::Dropout(a, mask.to_vec()), ng)
    }

    /// Reinterprets the tensor with a new shape of equal element count.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(r * c, rows * cols, "reshape element count");
        let data = self.value(a).to_vec();
        let ng = self.needs(a);
        self.push(data, rows, cols, Op::Reshape(a), ng)
    }

    /// Two-term binary cross-entropy in bits over softmax rows.
    ///
    /// For each unmasked row `r` with target `t`:
    /// `loss_r = -sum_w [q_w log2 p_w + (1-q_w) log2 (1-p_w)]` with
    /// `q = onehot(t)` and `p = clamp(softmax(logits_r))`.  The node value is
    /// `sum_r mask_r * loss_r / sentences`.
    pub fn softmax_bce2(
        &mut self,
        logits: Var,
        targets: &[usize],
        row_mask: &[f64],
        sentences: usize,
    ) -> Var {
        let (rows, vocab) = self.shape(logits);
        assert_eq!(targets.len(), rows);
        assert_eq!(row_mask.len(), rows);
        assert!(sentences > 0);
        let ln2 = std::f64::consts::LN_2;
        let mut probs = vec![0.0; rows * vocab];
        probs.copy_from_slice(self.value(logits));
        let mut total = 0.0;
        for r in 0..rows {
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            softmax_in_place(row);
            if row_mask[r] == 0.0 {
                continue;
            }
            let t = targets[r];
            assert!(t < vocab, "target id out of range");
            let mut loss = 0.0;
            for (w, &p) in row.iter().enumerate() {
                let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                if w == t {
                    loss -= pc.ln() / ln2;
                } else {
                    loss -= (1.0 - pc).ln() / ln2;
                }
            }
            total += row_mask[r] * loss;
        }
        total /= sentences as f64;
        let ng = self.needs(logits);
        self.push(
            vec![total],
            1,
            1,
            Op::SoftmaxBce2 {
                logits,
                targets: targets.to_vec(),
                row_mask: row_mask.to_vec(),
                sentences,
                probs,
            },
            ng,
        )
    }

    fn grad_buf(&mut self, v: Var) -> &mut Vec<f64> {
        let n = &mut self.nodes[v.0];
        if n.grad.is_none() {
            n.grad = Some(vec![0.0; n.rows * n.cols]);
        }
        n.grad.as_mut().unwrap()
    }

    fn add_grad(&mut self, v: Var, g: &[f64]) {
        if !self.needs(v) {
            return;
        }
        let buf = self.grad_buf(v);
        for (b, x) in buf.iter_mut().zip(g) {
            *b += x;
        }
    }

    /// Runs the backward pass from a `[1, 1]` scalar node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        self.grad_buf(loss)[0] = 1.0;
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            self.step_backward(idx);
        }
    }

    fn step_backward(&mut self, idx: usize) {
        let g = self.nodes[idx].grad.clone().unwrap();
        // Take the op out to avoid borrow conflicts; leaves stay in place.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(*a, &g);
                self.add_grad(*b, &g);
            }
            Op::Sub(a, b) => {
                self.add_grad(*a, &g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.add_grad(*b, &neg);
            }
            Op::Mul(a, b) => {
                let ga = zip_map(&g, self.value(*b), |x, y| x * y);
                let gb = zip_map(&g, self.value(*a), |x, y| x * y);
                self.add_grad(*a, &ga);
                self.add_grad(*b, &gb);
            }
            Op::Scale(a, s) => {
                let ga: Vec<f64> = g.iter().map(|x| x * s).collect();
                self.add_grad(*a, &ga);
            }
            Op::MulConst(a, mask) => {
                let ga = zip_map(&g, mask, |x, m| x * m);
                self.add_grad(*a, &ga);
            }
            Op::MulRowConst(a, mask) => {
                let (r, c) = self.shape(*a);
                let mut ga = g.clone();
                for i in 0..r {
                    for x in &mut ga[i * c..(i + 1) * c] {
                        *x *= mask[i];
                    }
                }
                self.add_grad(*a, &ga);
            }
            Op::AddRowBroadcast(a, row) => {
                self.add_grad(*a, &g);
                let (r, c) = self.shape(*a);
                let mut grow = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        grow[j] += g[i * c + j];
                    }
                }
                self.add_grad(*row, &grow);
            }
            Op::AddConst(a) => self.add_grad(*a, &g),
            Op::Matmul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_abt(&g, self.value(*b), m, n, k, &mut ga);
                    self.add_grad(*a, &ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_atb(self.value(*a), &g, m, k, n, &mut gb);
                    self.add_grad(*b, &gb);
                }
            }
            Op::MatmulBt(a, b) => {
                // c = a @ b^T, a: [m,k], b: [n,k], c/g: [m,n]
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).0;
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_ab(&g, self.value(*b), m, n, k, &mut ga);
                    self.add_grad(*a, &ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; n * k];
                    matmul_atb(&g, self.value(*a), m, n, k, &mut gb);
                    self.add_grad(*b, &gb);
                }
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let d = self.shape(*table).1;
                    let buf = self.grad_buf(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            buf[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let ga = zip_map(&g, self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 });
                self.add_grad(*a, &ga);
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = self.shape(*a);
                let p = self.nodes[idx].data.clone();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let pr = &p[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let inner: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        ga[i * c + j] = pr[j] * (gr[j] - inner);
                    }
                }
                self.add_grad(*a, &ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let (r, c) = self.shape(*x);
                let xv = self.nodes[x.0].data.clone();
                let gv = self.nodes[gamma.0].data.clone();
                let mut gx = vec![0.0; r * c];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    let m = mean[i];
                    let rs = rstd[i];
                    let xr = &xv[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let mut sum_gy = 0.0;
                    let mut sum_gyx = 0.0;
                    for j in 0..c {
                        let xhat = (xr[j] - m) * rs;
                        gg[j] += gr[j] * xhat;
                        gb[j] += gr[j];
                        let gy = gr[j] * gv[j];
                        sum_gy += gy;
                        sum_gyx += gy * xhat;
                    }
                    for j in 0..c {
                        let xhat = (xr[j] - m) * rs;
                        let gy = gr[j] * gv[j];
                        gx[i * c + j] =
                            rs * (gy - sum_gy / c as f64 - xhat * sum_gyx / c as f64);
                    }
                }
                self.add_grad(*x, &gx);
                self.add_grad(*gamma, &gg);
                self.add_grad(*beta, &gb);
            }
            Op::Mha {
                x,
                wq,
                wk,
                wv,
                wo,
                bq,
                bk,
                bv,
                bo,
                heads,
                seqs,
                len,
                q,
                k,
                v,
                probs,
                ctx,
            } => {
                let (rows, d) = self.shape(*x);
                let dk = d / heads;
                let scale = 1.0 / (dk as f64).sqrt();

                // Output projection.
                let mut g_ctx = vec![0.0; rows * d];
                matmul_abt(&g, self.value(*wo), rows, d, d, &mut g_ctx);
                if self.needs(*wo) {
                    let mut gwo = vec![0.0; d * d];
                    matmul_atb(ctx, &g, rows, d, d, &mut gwo);
                    self.add_grad(*wo, &gwo);
                }
                if self.needs(*bo) {
                    let mut gbo = vec![0.0; d];
                    for i in 0..rows {
                        for j in 0..d {
                            gbo[j] += g[i * d + j];
                        }
                    }
                    self.add_grad(*bo, &gbo);
                }

                // Attention core.
                let mut gq = vec![0.0; rows * d];
                let mut gk = vec![0.0; rows * d];
                let mut gv = vec![0.0; rows * d];
                for s in 0..*seqs {
                    for h in 0..*heads {
                        let off = h * dk;
                        let p = &probs[(s * heads + h) * len * len..][..len * len];
                        // g wrt probs and v.
                        let mut gp = vec![0.0; len * len];
                        for i in 0..*len {
                            let grow = &g_ctx[(s * len + i) * d + off..][..dk];
                            for j in 0..*len {
                                let vrow = &v[(s * len + j) * d + off..][..dk];
                                gp[i * len + j] = dot(grow, vrow);
                                let w = p[i * len + j];
                                for t in 0..dk {
                                    gv[(s * len + j) * d + off + t] += w * grow[t];
                                }
                            }
                        }
                        // Softmax backward, then q/k.
                        for i in 0..*len {
                            let pr = &p[i * len..(i + 1) * len];
                            let gpr = &gp[i * len..(i + 1) * len];
                            let inner: f64 = pr.iter().zip(gpr).map(|(a, b)| a * b).sum();
                            for j in 0..*len {
                                let gs = pr[j] * (gpr[j] - inner) * scale;
                                let krow = &k[(s * len + j) * d + off..][..dk];
                                let qrow = &q[(s * len + i) * d + off..][..dk];
                                for t in 0..dk {
                                    gq[(s * len + i) * d + off + t] += gs * krow[t];
                                    gk[(s * len + j) * d + off + t] += gs * qrow[t];
                                }
                            }
                        }
                    }
                }

                // Input projections.
                let mut gx = vec![0.0; rows * d];
                for (gproj, w, b) in [(&gq, wq, bq), (&gk, wk, bk), (&gv, wv, bv)] {
                    matmul_abt(gproj, self.value(*w), rows, d, d, &mut gx);
                    if self.needs(*w) {
                        let mut gw = vec![0.0; d * d];
                        matmul_atb(self.value(*x), gproj, rows, d, d, &mut gw);
                        self.add_grad(*w, &gw);
                    }
                    if self.needs(*b) {
                        let mut gb = vec![0.0; d];
                        for i in 0..rows {
                            for j in 0..d {
                                gb[j] += gproj[i * d + j];
                            }
                        }
                        self.add_grad(*b, &gb);
                    }
                }
                self.add_grad(*x, &gx);
            }
            Op::Conv1d {
                x,
                w,
                b,
                seqs,
                len,
                flip,
            } => {
                let (_, cin) = self.shape(*x);
                let (cout, wk) = self.shape(*w);
                let xv = self.nodes[x.0].data.clone();
                let wv = self.nodes[w.0].data.clone();
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; cout];
                for s in 0..*seqs {
                    for t in 0..*len {
                        let orow = s * len + t;
                        for co in 0..cout {
                            let go = g[orow * cout + co];
                            if go == 0.0 {
                                continue;
                            }
                            gb[co] += go;
                            for (tap, dt) in [-1i64, 0, 1].iter().enumerate() {
                                let src = t as i64 + dt;
                                if src < 0 || src >= *len as i64 {
                                    continue;
                                }
                                let tap_idx = if *flip { 2 - tap } else { tap };
                                let xoff = (s * len + src as usize) * cin;
                                let woff = co * wk + tap_idx * cin;
                                for ci in 0..cin {
                                    gx[xoff + ci] += go * wv[woff + ci];
                                    gw[woff + ci] += go * xv[xoff + ci];
                                }
                            }
                        }
                    }
                }
                self.add_grad(*x, &gx);
                self.add_grad(*w, &gw);
                self.add_grad(*b, &gb);
            }
            Op::Gdn {
                x,
                beta_r,
                gamma_r,
                inverse,
                denom,
            } => {
                let (rows, ch) = self.shape(*x);
                let xv = self.nodes[x.0].data.clone();
                let br = self.nodes[beta_r.0].data.clone();
                let gr = self.nodes[gamma_r.0].data.clone();
                let mut gx = vec![0.0; rows * ch];
                let mut gbeta = vec![0.0; ch];
                let mut ggamma = vec![0.0; ch * ch];
                let sign = if *inverse { 0.5 } else { -0.5 };
                for r in 0..rows {
                    let xr = &xv[r * ch..(r + 1) * ch];
                    let gror = &g[r * ch..(r + 1) * ch];
                    let dr = &denom[r * ch..(r + 1) * ch];
                    for i in 0..ch {
                        let d = dr[i];
                        let p = if *inverse { d.sqrt() } else { 1.0 / d.sqrt() };
                        // dy_i/dx_i direct term.
                        gx[r * ch + i] += gror[i] * p;
                        // dy_i/dD term: y_i = x_i * D^(+-1/2).
                        let dy_dd = sign * xr[i] * p / d;
                        let gd = gror[i] * dy_dd;
                        // D = beta_r_i^2 + eps + sum_j gamma_r_ij^2 x_j^2.
                        gbeta[i] += gd * 2.0 * br[i];
                        for j in 0..ch {
                            let grij = gr[i * ch + j];
                            ggamma[i * ch + j] += gd * 2.0 * grij * xr[j] * xr[j];
                            gx[r * ch + j] += gd * grij * grij * 2.0 * xr[j];
                        }
                    }
                }
                self.add_grad(*x, &gx);
                self.add_grad(*beta_r, &gbeta);
                self.add_grad(*gamma_r, &ggamma);
            }
            Op::NormalizeToPower { x, target, norm } => {
                let xv = self.nodes[x.0].data.clone();
                let s = target / norm;
                let xg: f64 = xv.iter().zip(&g).map(|(a, b)| a * b).sum();
                let coef = s * xg / (norm * norm);
                let gx: Vec<f64> = xv
                    .iter()
                    .zip(&g)
                    .map(|(xi, gi)| s * gi - coef * xi)
                    .collect();
                self.add_grad(*x, &gx);
            }
            Op::ComplexScale { x, re, im } => {
                // R^2 Jacobian transpose = multiplication by the conjugate.
                let mut gx = vec![0.0; g.len()];
                for t in 0..g.len() / 2 {
                    let (ga, gb) = (g[2 * t], g[2 * t + 1]);
                    gx[2 * t] = ga * re + gb * im;
                    gx[2 * t + 1] = -ga * im + gb * re;
                }
                self.add_grad(*x, &gx);
            }
            Op::ConcatCols(parts) => {
                let rows = self.shape(Var(idx)).0;
                let total = self.shape(Var(idx)).1;
                let mut col0 = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    if self.needs(p) {
                        let mut gp = vec![0.0; rows * pc];
                        for i in 0..rows {
                            gp[i * pc..(i + 1) * pc]
                                .copy_from_slice(&g[i * total + col0..i * total + col0 + pc]);
                        }
                        self.add_grad(p, &gp);
                    }
                    col0 += pc;
                }
            }
            Op::SumList(parts) => {
                for &p in parts {
                    self.add_grad(p, &g);
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                let ga = vec![g[0]; r * c];
                self.add_grad(*a, &ga);
            }
            Op::AddScaled(a, b, s) => {
                self.add_grad(*a, &g);
                let gb: Vec<f64> = g.iter().map(|x| x * s).collect();
                self.add_grad(*b, &gb);
            }
            Op::Dropout(a, mask) => {
                let ga = zip_map(&g, mask, |x, m| x * m);
                self.add_grad(*a, &ga);
            }
            Op::SoftmaxBce2 {
                logits,
                targets,
                row_mask,
                sentences,
                probs,
            } => {
                let (rows, vocab) = self.shape(*logits);
                let ln2 = std::f64::consts::LN_2;
                let gscale = g[0] / *sentences as f64;
                let mut gl = vec![0.0; rows * vocab];
                for r in 0..rows {
                    if row_mask[r] == 0.0 {
                        continue;
                    }
                    let p = &probs[r * vocab..(r + 1) * vocab];
                    let t = targets[r];
                    // dloss/dp, honoring the clamp (zero outside it).
                    let mut dldp = vec![0.0; vocab];
                    for w in 0..vocab {
                        let inside = (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p[w]);
                        if !inside {
                            continue;
                        }
                        dldp[w] = if w == t {
                            -1.0 / (p[w] * ln2)
                        } else {
                            1.0 / ((1.0 - p[w]) * ln2)
                        };
                    }
                    let inner: f64 = dldp.iter().zip(p).map(|(a, b)| a * b).sum();
                    let rscale = gscale * row_mask[r];
                    for w in 0..vocab {
                        gl[r * vocab + w] = rscale * p[w] * (dldp[w] - inner);
                    }
                }
                self.add_grad(*logits, &gl);
            }
            Op::Reshape(a) => {
                self.add_grad(*a, &g);
            }
        }
        self.nodes[idx].op = op;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `out += a @ b`, `a: [m, k]`, `b: [k, n]`.
pub(crate) fn matmul_ab(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out += a @ b^T`, `a: [m, k]`, `b: [n, k]`.
pub(crate) fn matmul_abt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// `out += a^T @ b`, `a: [m, k]`, `b: [m, n]`, out `[k, n]`.
pub(crate) fn matmul_atb(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
