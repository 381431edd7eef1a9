//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an arena of eagerly-evaluated nodes in creation order.
//! Builder methods run the forward computation immediately and record the
//! backward rule; [`Tape::backward`] replays the arena in reverse and
//! accumulates gradients into each node's `grad` buffer.
//!
//! One tape covers one forward/backward pass (one batch). Parameters live
//! outside the tape and are re-bound as leaves each pass; shape mismatches
//! are programmer errors and panic.

pub mod gradcheck;
pub mod special;

/// Index of a node on a tape.
pub type Id = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Scale(Id, f64),
    AddConst(Id),
    Relu(Id),
    Tanh(Id),
    Softplus(Id),
    Exp(Id),
    Log(Id),
    /// ln(max(x, floor)); gradient is zero where the clamp is active.
    LogClamp(Id, f64),
    Square(Id),
    Sum(Id),
    Mean(Id),
    /// [B,K] -> [B]
    SumRows(Id),
    /// [B,K] -> [K], mean over the batch axis.
    ColMean(Id),
    /// [B] -> [B,K]
    BroadcastCols(Id, usize),
    /// [B,C,T] -> [B,C], mean over time.
    MeanTime(Id),
    /// [B,F] x [F,O] -> [B,O]
    MatMul(Id, Id),
    /// [B,O] + [O]
    AddRowVec(Id, Id),
    Conv1d {
        x: Id,
        w: Id,
        b: Id,
        stride: usize,
        pad_l: usize,
    },
    BatchNorm {
        x: Id,
        gamma: Id,
        beta: Id,
        train: bool,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Id),
    LogSoftmax(Id),
    Lgamma(Id),
    Digamma(Id),
    /// [B,C,T] -> [B,C] at fixed t.
    SliceTime(Id, usize),
    /// T x [B,C] -> [B,C,T]
    StackTime(Vec<Id>),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    requires: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all nodes; outstanding ids become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, id: Id) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: Id) -> &[f64] {
        &self.nodes[id].grad
    }

    pub fn shape(&self, id: Id) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn scalar(&self, id: Id) -> f64 {
        assert_eq!(self.nodes[id].value.len(), 1, "expected scalar node");
        self.nodes[id].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires: bool, op: Op) -> Id {
        debug_assert_eq!(numel(&shape), value.len());
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node {
            shape,
            value,
            grad,
            requires,
            op,
        });
        self.nodes.len() - 1
    }

    fn req(&self, id: Id) -> bool {
        self.nodes[id].requires
    }

    pub fn leaf(&mut self, value: Vec<f64>, shape: Vec<usize>, requires: bool) -> Id {
        assert_eq!(
            numel(&shape),
            value.len(),
            "leaf data length {} != product of shape {:?}",
            value.len(),
            shape
        );
        self.push(shape, value, requires, Op::Leaf)
    }

    pub fn constant(&mut self, value: Vec<f64>, shape: Vec<usize>) -> Id {
        self.leaf(value, shape, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Id {
        self.constant(vec![v], vec![1])
    }

    /// Copy of the value as a fresh gradient-stopping leaf.
    pub fn detach(&mut self, id: Id) -> Id {
        let value = self.nodes[id].value.clone();
        let shape = self.nodes[id].shape.clone();
        self.leaf(value, shape, false)
    }

    // ---- elementwise ----

    fn same_shape(&self, a: Id, b: Id) {
        assert_eq!(
            self.nodes[a].shape, self.nodes[b].shape,
            "shape mismatch: {:?} vs {:?}",
            self.nodes[a].shape, self.nodes[b].shape
        );
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        self.same_shape(a, b);
        let value: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let requires = self.req(a) || self.req(b);
        self.push(shape, value, requires, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Id {
        self.same_shape(a, b);
        let value: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let requires = self.req(a) || self.req(b);
        self.push(shape, value, requires, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        self.same_shape(a, b);
        let value: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let requires = self.req(a) || self.req(b);
        self.push(shape, value, requires, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Id, c: f64) -> Id {
        let value: Vec<f64> = self.nodes[a].value.iter().map(|x| x * c).collect();
        let shape = self.nodes[a].shape.clone();
        let requires = self.req(a);
        self.push(shape, value, requires, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Id) -> Id {
        self.scale(a, -1.0)
    }

    pub fn add_const(&mut self, a: Id, c: f64) -> Id {
        let value: Vec<f64> = self.nodes[a].value.iter().map(|x| x + c).collect();
        let shape = self.nodes[a].shape.clone();
        let requires = self.req(a);
        self.push(shape, value, requires, Op::AddConst(a))
    }

    pub fn relu(&mut self, a: Id) -> Id {
        let value: Vec<f64> = self.nodes[a].value.iter().map(|x| x.max(0.0)).collect();
        let shape = self.nodes[a].shape.clone();
        let requires = self.req(a);
        self.push(shape, value, requires, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Id) -> Id {
        let value: Vec<f64> = self.nodes[a].value.iter().map(|x| x.tanh()).collect();
        let shape = self.nodes[a].shape.clone();
        let requires = self.req(a);
        self.push(shape, value, requires, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Id) -> Id {
        let value: Vec<f64> = self.nodes[a].value.iter().map(|&x| softplus_f(x)).collect();
        let shape = self.nodes[a].shape.clone();
        let requires = self.req(a);
        self.push(shape, value, requires, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Id) -> Id {
        let value: Vec<f64> = self.nodes[a].value.iter().map(|x| x.exp()).collect();
        let shape = self.nodes[a].shape.clone();
        let requires = self.req(a);
        self.push(shape, value, requires, Op::Exp(a))
    }

    pub fn log(&mut self, a: Id) -> Id {
        let value: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .map(|&x| {
                assert!(x > 0.0, "log of non-positive value {x}");
                x.ln()
            })
            .collect();
        let shape = self.nodes[a].shape.clone();
        let requires = self.req(a);
        self.push(shape, value, requires, Op::Log(a))
    }

    /// ln(max(x, floor)); used under probabilities so 0*log 0 limits stay finite.
    pub fn log_clamp(&mut self, a: Id, floor: f64) -> Id {
        let value: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .map(|&x| x.max(floor).ln())
            .collect();
        let shape = self.nodes[a].shape.clone();
        let requires = self.req(a);
        self.push(shape, value, requires, Op::LogClamp(a, floor))
    }

    pub fn square(&mut self, a: Id) -> Id {
        let value: Vec<f64> = self.nodes[a].value.iter().map(|x| x * x).collect();
        let shape = self.nodes[a].shape.clone();
        let requires = self.req(a);
        self.push(shape, value, requires, Op::Square(a))
    }

    pub fn lgamma(&mut self, a: Id) -> Id {
        let value: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .map(|&x| special::lgamma(x))
            .collect();
        let shape = self.nodes[a].shape.clone();
        let requires = self.req(a);
        self.push(shape, value, requires, Op::Lgamma(a))
    }

    pub fn digamma(&mut self, a: Id) -> Id {
        let value: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .map(|&x| special::digamma(x))
            .collect();
        let shape = self.nodes[a].shape.clone();
        let requires = self.req(a);
        self.push(shape, value, requires, Op::Digamma(a))
    }

    // ---- reductions / reshapes ----

    pub fn sum(&mut self, a: Id) -> Id {
        let v = self.nodes[a].value.iter().sum();
        let requires = self.req(a);
        self.push(vec![1], vec![v], requires, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Id) -> Id {
        let n = self.nodes[a].value.len() as f64;
        let v = self.nodes[a].value.iter().sum::<f64>() / n;
        let requires = self.req(a);
        self.push(vec![1], vec![v], requires, Op::Mean(a))
    }

    /// Row sums of a [B,K] tensor -> [B].
    pub fn sum_rows(&mut self, a: Id) -> Id {
        let (b, k) = self.dims2(a);
        let value: Vec<f64> = (0..b)
            .map(|i| self.nodes[a].value[i * k..(i + 1) * k].iter().sum())
            .collect();
        let requires = self.req(a);
        self.push(vec![b], value, requires, Op::SumRows(a))
    }

    /// Column means of a [B,K] tensor -> [K] (the batch-marginal).
    pub fn col_mean(&mut self, a: Id) -> Id {
        let (b, k) = self.dims2(a);
        let mut value = vec![0.0; k];
        for i in 0..b {
            for j in 0..k {
                value[j] += self.nodes[a].value[i * k + j];
            }
        }
        for v in &mut value {
            *v /= b as f64;
        }
        let requires = self.req(a);
        self.push(vec![k], value, requires, Op::ColMean(a))
    }

    /// Repeat a [B] vector across k columns -> [B,k].
    pub fn broadcast_cols(&mut self, a: Id, k: usize) -> Id {
        assert_eq!(self.nodes[a].shape.len(), 1, "broadcast_cols expects [B]");
        let b = self.nodes[a].shape[0];
        let mut value = vec![0.0; b * k];
        for i in 0..b {
            let v = self.nodes[a].value[i];
            value[i * k..(i + 1) * k].fill(v);
        }
        let requires = self.req(a);
        self.push(vec![b, k], value, requires, Op::BroadcastCols(a, k))
    }

    /// Mean over the time axis of [B,C,T] -> [B,C].
    pub fn mean_time(&mut self, a: Id) -> Id {
        let (b, c, t) = self.dims3(a);
        let mut value = vec![0.0; b * c];
        for i in 0..b * c {
            let row = &self.nodes[a].value[i * t..(i + 1) * t];
            value[i] = row.iter().sum::<f64>() / t as f64;
        }
        let requires = self.req(a);
        self.push(vec![b, c], value, requires, Op::MeanTime(a))
    }

    /// [B,C,T] at time t -> [B,C].
    pub fn slice_time(&mut self, a: Id, t: usize) -> Id {
        let (b, c, tt) = self.dims3(a);
        assert!(t < tt);
        let mut value = vec![0.0; b * c];
        for i in 0..b * c {
            value[i] = self.nodes[a].value[i * tt + t];
        }
        let requires = self.req(a);
        self.push(vec![b, c], value, requires, Op::SliceTime(a, t))
    }

    /// T tensors of shape [B,C] -> [B,C,T].
    pub fn stack_time(&mut self, parts: &[Id]) -> Id {
        assert!(!parts.is_empty());
        let (b, c) = self.dims2(parts[0]);
        let t = parts.len();
        let mut value = vec![0.0; b * c * t];
        let mut requires = false;
        for (step, &p) in parts.iter().enumerate() {
            assert_eq!(self.nodes[p].shape, vec![b, c]);
            requires |= self.req(p);
            for i in 0..b * c {
                value[i * t + step] = self.nodes[p].value[i];
            }
        }
        self.push(vec![b, c, t], value, requires, Op::StackTime(parts.to_vec()))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Id, w: Id) -> Id {
        let (b, f) = self.dims2(a);
        let (f2, o) = self.dims2(w);
        assert_eq!(f, f2, "matmul inner dims: {f} vs {f2}");
        let mut value = vec![0.0; b * o];
        for i in 0..b {
            let a_row = &self.nodes[a].value[i * f..(i + 1) * f];
            let out_row = &mut value[i * o..(i + 1) * o];
            for (j, &av) in a_row.iter().enumerate() {
                if av != 0.0 {
                    let w_row = &self.nodes[w].value[j * o..(j + 1) * o];
                    for (ov, &wv) in out_row.iter_mut().zip(w_row) {
                        *ov += av * wv;
                    }
                }
            }
        }
        let requires = self.req(a) || self.req(w);
        self.push(vec![b, o], value, requires, Op::MatMul(a, w))
    }

    pub fn add_row_vec(&mut self, a: Id, v: Id) -> Id {
        let (b, o) = self.dims2(a);
        assert_eq!(self.nodes[v].shape, vec![o], "bias shape mismatch");
        let mut value = self.nodes[a].value.clone();
        for i in 0..b {
            for j in 0..o {
                value[i * o + j] += self.nodes[v].value[j];
            }
        }
        let requires = self.req(a) || self.req(v);
        self.push(vec![b, o], value, requires, Op::AddRowVec(a, v))
    }

    /// x:[B,F] . w:[F,O] + b:[O]
    pub fn dense(&mut self, x: Id, w: Id, b: Id) -> Id {
        let mm = self.matmul(x, w);
        self.add_row_vec(mm, b)
    }

    /// 1-D cross-correlation of x:[B,Cin,L] with w:[Cout,Cin,Kw] and bias b:[Cout].
    /// Asymmetric zero padding so even kernels can preserve length.
    pub fn conv1d_padded(
        &mut self,
        x: Id,
        w: Id,
        b: Id,
        stride: usize,
        pad_l: usize,
        pad_r: usize,
    ) -> Id {
        let (bs, cin, l) = self.dims3(x);
        let (cout, cin2, kw) = self.dims3(w);
        assert_eq!(cin, cin2, "conv1d channel mismatch: {cin} vs {cin2}");
        assert_eq!(self.nodes[b].shape, vec![cout], "conv1d bias shape");
        assert!(stride >= 1);
        let padded = l + pad_l + pad_r;
        assert!(
            padded + 1 > kw,
            "conv1d: kernel {kw} longer than padded input {padded}"
        );
        let lout = (padded - kw) / stride + 1;
        assert!(lout >= 1, "conv1d output length < 1");

        let mut value = vec![0.0; bs * cout * lout];
        for bi in 0..bs {
            for co in 0..cout {
                let out_row = &mut value[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                out_row.fill(self.nodes[b].value[co]);
                for ci in 0..cin {
                    let x_row = &self.nodes[x].value[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                    for k in 0..kw {
                        let wv = self.nodes[w].value[(co * cin + ci) * kw + k];
                        if wv == 0.0 {
                            continue;
                        }
                        // out[j] += wv * x[j*stride + k - pad_l] over valid j.
                        if stride == 1 {
                            let j_lo = pad_l.saturating_sub(k);
                            let j_hi = (l + pad_l).saturating_sub(k).min(lout);
                            if j_lo >= j_hi {
                                continue;
                            }
                            let x_off = j_lo + k - pad_l;
                            let xs = &x_row[x_off..x_off + (j_hi - j_lo)];
                            for (ov, &xv) in out_row[j_lo..j_hi].iter_mut().zip(xs) {
                                *ov += wv * xv;
                            }
                        } else {
                            for (j, ov) in out_row.iter_mut().enumerate() {
                                let pos = j * stride + k;
                                if pos >= pad_l && pos - pad_l < l {
                                    *ov += wv * x_row[pos - pad_l];
                                }
                            }
                        }
                    }
                }
            }
        }
        let requires = self.req(x) || self.req(w) || self.req(b);
        self.push(
            vec![bs, cout, lout],
            value,
            requires,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_l,
            },
        )
    }

    pub fn conv1d(&mut self, x: Id, w: Id, b: Id, stride: usize, pad: usize) -> Id {
        self.conv1d_padded(x, w, b, stride, pad, pad)
    }

    /// Batch normalization over [B,C,T] (per-channel statistics across B and T).
    ///
    /// Train mode normalizes by batch statistics; if `update_running` is set,
    /// running stats move by `momentum` toward the batch statistics. Eval mode
    /// uses the provided running stats only.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Id,
        gamma: Id,
        beta: Id,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        train: bool,
        update_running: bool,
        momentum: f64,
        eps: f64,
    ) -> Id {
        let (b, c, t) = self.dims3(x);
        assert_eq!(self.nodes[gamma].shape, vec![c]);
        assert_eq!(self.nodes[beta].shape, vec![c]);
        assert_eq!(running_mean.len(), c);
        assert_eq!(running_var.len(), c);
        let n = b * t;
        if train {
            assert!(n > 1, "batchnorm train mode needs more than one element per channel");
        }

        let mut mean = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        if train {
            for ci in 0..c {
                let mut s = 0.0;
                for bi in 0..b {
                    let row = &self.nodes[x].value[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                    s += row.iter().sum::<f64>();
                }
                let m = s / n as f64;
                let mut v = 0.0;
                for bi in 0..b {
                    let row = &self.nodes[x].value[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                    v += row.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
                }
                let var = v / n as f64;
                mean[ci] = m;
                inv_std[ci] = 1.0 / (var + eps).sqrt();
                if update_running {
                    running_mean[ci] = (1.0 - momentum) * running_mean[ci] + momentum * m;
                    running_var[ci] = (1.0 - momentum) * running_var[ci] + momentum * var;
                }
            }
        } else {
            for ci in 0..c {
                mean[ci] = running_mean[ci];
                inv_std[ci] = 1.0 / (running_var[ci] + eps).sqrt();
            }
        }

        let mut value = vec![0.0; b * c * t];
        for bi in 0..b {
            for ci in 0..c {
                let g = self.nodes[gamma].value[ci];
                let be = self.nodes[beta].value[ci];
                let m = mean[ci];
                let is = inv_std[ci];
                let src = &self.nodes[x].value[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                let dst = &mut value[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = g * (s - m) * is + be;
                }
            }
        }
        let requires = self.req(x) || self.req(gamma) || self.req(beta);
        self.push(
            vec![b, c, t],
            value,
            requires,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                train,
                mean,
                inv_std,
            },
        )
    }

    /// Row-wise softmax of [B,K], max-shifted for stability.
    pub fn softmax(&mut self, a: Id) -> Id {
        let (b, k) = self.dims2(a);
        let mut value = vec![0.0; b * k];
        for i in 0..b {
            let row = &self.nodes[a].value[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut value[i * k..(i + 1) * k];
            let mut z = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - m).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        }
        let requires = self.req(a);
        self.push(vec![b, k], value, requires, Op::Softmax(a))
    }

    /// Row-wise log-softmax of [B,K].
    pub fn log_softmax(&mut self, a: Id) -> Id {
        let (b, k) = self.dims2(a);
        let mut value = vec![0.0; b * k];
        for i in 0..b {
            let row = &self.nodes[a].value[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for (o, &x) in value[i * k..(i + 1) * k].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let requires = self.req(a);
        self.push(vec![b, k], value, requires, Op::LogSoftmax(a))
    }

    fn dims2(&self, a: Id) -> (usize, usize) {
        let s = &self.nodes[a].shape;
        assert_eq!(s.len(), 2, "expected rank-2 tensor, got {s:?}");
        (s[0], s[1])
    }

    fn dims3(&self, a: Id) -> (usize, usize, usize) {
        let s = &self.nodes[a].shape;
        assert_eq!(s.len(), 3, "expected rank-3 tensor, got {s:?}");
        (s[0], s[1], s[2])
    }
    // ---- backward ----

    /// Accumulate dLoss/d(node) into every requiring node's grad buffer.
    /// Each call propagates from a fresh unit seed, so repeated calls on the
    /// same loss accumulate k copies of the gradient.
    pub fn backward(&mut self, loss: Id) {
        assert!(loss < self.nodes.len(), "stale node id");
        assert_eq!(
            self.nodes[loss].value.len(),
            1,
            "backward requires a scalar loss"
        );
        if !self.nodes[loss].requires {
            return;
        }

        let n = self.nodes.len();
        let mut adj: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|nd| {
                if nd.requires {
                    vec![0.0; nd.value.len()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        adj[loss][0] = 1.0;

        for i in (0..n).rev() {
            if !self.nodes[i].requires {
                continue;
            }
            let (adj_head, adj_tail) = adj.split_at_mut(i);
            let dy: &[f64] = &adj_tail[0];
            let nodes = &self.nodes;
            let node = &nodes[i];
            let wants = |id: Id| nodes[id].requires;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if wants(*a) {
                        axpy(&mut adj_head[*a], 1.0, dy);
                    }
                    if wants(*b) {
                        axpy(&mut adj_head[*b], 1.0, dy);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        axpy(&mut adj_head[*a], 1.0, dy);
                    }
                    if wants(*b) {
                        axpy(&mut adj_head[*b], -1.0, dy);
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        for ((g, &y), &d) in
                            adj_head[*a].iter_mut().zip(&nodes[*b].value).zip(dy)
                        {
                            *g += y * d;
                        }
                    }
                    if wants(*b) {
                        for ((g, &x), &d) in
                            adj_head[*b].iter_mut().zip(&nodes[*a].value).zip(dy)
                        {
                            *g += x * d;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    axpy(&mut adj_head[*a], *c, dy);
                }
                Op::AddConst(a) => {
                    axpy(&mut adj_head[*a], 1.0, dy);
                }
                Op::Relu(a) => {
                    for ((g, &x), &d) in adj_head[*a].iter_mut().zip(&nodes[*a].value).zip(dy) {
                        if x > 0.0 {
                            *g += d;
                        }
                    }
                }
                Op::Tanh(a) => {
                    for ((g, &y), &d) in adj_head[*a].iter_mut().zip(&node.value).zip(dy) {
                        *g += (1.0 - y * y) * d;
                    }
                }
                Op::Softplus(a) => {
                    for ((g, &x), &d) in adj_head[*a].iter_mut().zip(&nodes[*a].value).zip(dy) {
                        *g += sigmoid_f(x) * d;
                    }
                }
                Op::Exp(a) => {
                    for ((g, &y), &d) in adj_head[*a].iter_mut().zip(&node.value).zip(dy) {
                        *g += y * d;
                    }
                }
                Op::Log(a) => {
                    for ((g, &x), &d) in adj_head[*a].iter_mut().zip(&nodes[*a].value).zip(dy) {
                        *g += d / x;
                    }
                }
                Op::LogClamp(a, floor) => {
                    for ((g, &x), &d) in adj_head[*a].iter_mut().zip(&nodes[*a].value).zip(dy) {
                        if x > *floor {
                            *g += d / x;
                        }
                    }
                }
                Op::Square(a) => {
                    for ((g, &x), &d) in adj_head[*a].iter_mut().zip(&nodes[*a].value).zip(dy) {
                        *g += 2.0 * x * d;
                    }
                }
                Op::Lgamma(a) => {
                    for ((g, &x), &d) in adj_head[*a].iter_mut().zip(&nodes[*a].value).zip(dy) {
                        *g += special::digamma(x) * d;
                    }
                }
                Op::Digamma(a) => {
                    for ((g, &x), &d) in adj_head[*a].iter_mut().zip(&nodes[*a].value).zip(dy) {
                        *g += special::trigamma(x) * d;
                    }
                }
                Op::Sum(a) => {
                    let d = dy[0];
                    for g in adj_head[*a].iter_mut() {
                        *g += d;
                    }
                }
                Op::Mean(a) => {
                    let d = dy[0] / nodes[*a].value.len() as f64;
                    for g in adj_head[*a].iter_mut() {
                        *g += d;
                    }
                }
                Op::SumRows(a) => {
                    let k = nodes[*a].shape[1];
                    for (r, &d) in dy.iter().enumerate() {
                        for g in adj_head[*a][r * k..(r + 1) * k].iter_mut() {
                            *g += d;
                        }
                    }
                }
                Op::ColMean(a) => {
                    let (b, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let inv_b = 1.0 / b as f64;
                    for r in 0..b {
                        for (j, &d) in dy.iter().enumerate() {
                            adj_head[*a][r * k + j] += d * inv_b;
                        }
                    }
                }
                Op::BroadcastCols(a, k) => {
                    let b = nodes[*a].shape[0];
                    for r in 0..b {
                        adj_head[*a][r] += dy[r * k..(r + 1) * k].iter().sum::<f64>();
                    }
                }
                Op::MeanTime(a) => {
                    let t = nodes[*a].shape[2];
                    let inv_t = 1.0 / t as f64;
                    for (r, &d) in dy.iter().enumerate() {
                        for g in adj_head[*a][r * t..(r + 1) * t].iter_mut() {
                            *g += d * inv_t;
                        }
                    }
                }
                Op::SliceTime(a, t) => {
                    let tt = nodes[*a].shape[2];
                    for (r, &d) in dy.iter().enumerate() {
                        adj_head[*a][r * tt + t] += d;
                    }
                }
                Op::StackTime(parts) => {
                    let t = parts.len();
                    for (step, &p) in parts.iter().enumerate() {
                        if !wants(p) {
                            continue;
                        }
                        let len = nodes[p].value.len();
                        for r in 0..len {
                            adj_head[p][r] += dy[r * t + step];
                        }
                    }
                }
                Op::MatMul(a, w) => {
                    let (b, o) = (node.shape[0], node.shape[1]);
                    let f = nodes[*a].shape[1];
                    if wants(*a) {
                        // dA[b,f] = sum_o dy[b,o] * W[f,o]
                        for r in 0..b {
                            let dy_row = &dy[r * o..(r + 1) * o];
                            let da_row = &mut adj_head[*a][r * f..(r + 1) * f];
                            for (j, da) in da_row.iter_mut().enumerate() {
                                *da += dot(dy_row, &nodes[*w].value[j * o..(j + 1) * o]);
                            }
                        }
                    }
                    if wants(*w) {
                        // dW[f,o] += A[b,f] * dy[b,o]
                        for r in 0..b {
                            let dy_row = &dy[r * o..(r + 1) * o];
                            let a_row = &nodes[*a].value[r * f..(r + 1) * f];
                            for (j, &av) in a_row.iter().enumerate() {
                                if av != 0.0 {
                                    axpy(&mut adj_head[*w][j * o..(j + 1) * o], av, dy_row);
                                }
                            }
                        }
                    }
                }
                Op::AddRowVec(a, v) => {
                    let (b, o) = (node.shape[0], node.shape[1]);
                    if wants(*a) {
                        axpy(&mut adj_head[*a], 1.0, dy);
                    }
                    if wants(*v) {
                        for r in 0..b {
                            axpy_into(&mut adj_head[*v], &dy[r * o..(r + 1) * o]);
                        }
                    }
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    stride,
                    pad_l,
                    ..
                } => {
                    conv1d_backward(nodes, adj_head, dy, node, *x, *w, *b, *stride, *pad_l);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    train,
                    mean,
                    inv_std,
                    ..
                } => {
                    batchnorm_backward(
                        nodes, adj_head, dy, node, *x, *gamma, *beta, *train, mean, inv_std,
                    );
                }
                Op::Softmax(a) => {
                    let (b, k) = (node.shape[0], node.shape[1]);
                    for r in 0..b {
                        let y = &node.value[r * k..(r + 1) * k];
                        let dyr = &dy[r * k..(r + 1) * k];
                        let s = dot(y, dyr);
                        for j in 0..k {
                            adj_head[*a][r * k + j] += y[j] * (dyr[j] - s);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let (b, k) = (node.shape[0], node.shape[1]);
                    for r in 0..b {
                        let logp = &node.value[r * k..(r + 1) * k];
                        let dyr = &dy[r * k..(r + 1) * k];
                        let s: f64 = dyr.iter().sum();
                        for j in 0..k {
                            adj_head[*a][r * k + j] += dyr[j] - logp[j].exp() * s;
                        }
                    }
                }
            }
        }

        for (nd, a) in self.nodes.iter_mut().zip(&adj) {
            if nd.requires {
                axpy(&mut nd.grad, 1.0, a);
            }
        }
    }
}

fn axpy(dst: &mut [f64], c: f64, src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn axpy_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Overflow-safe softplus: ln(1+e^x) = max(x,0) + ln(1+e^{-|x|}).
pub fn softplus_f(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward(
    nodes: &[Node],
    adj: &mut [Vec<f64>],
    dy: &[f64],
    node: &Node,
    x: Id,
    w: Id,
    b: Id,
    stride: usize,
    pad_l: usize,
) {
    let (bs, cout, lout) = (node.shape[0], node.shape[1], node.shape[2]);
    let (cin, l) = (nodes[x].shape[1], nodes[x].shape[2]);
    let kw = nodes[w].shape[2];

    if nodes[b].requires {
        for bi in 0..bs {
            for co in 0..cout {
                adj[b][co] += dy[(bi * cout + co) * lout..(bi * cout + co + 1) * lout]
                    .iter()
                    .sum::<f64>();
            }
        }
    }

    if nodes[x].requires {
        for bi in 0..bs {
            for co in 0..cout {
                let dy_row = &dy[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                for ci in 0..cin {
                    let dx_row = &mut adj[x][(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                    for k in 0..kw {
                        let wv = nodes[w].value[(co * cin + ci) * kw + k];
                        if wv == 0.0 {
                            continue;
                        }
                        if stride == 1 {
                            let j_lo = pad_l.saturating_sub(k);
                            let j_hi = (l + pad_l).saturating_sub(k).min(lout);
                            if j_lo >= j_hi {
                                continue;
                            }
                            let x_off = j_lo + k - pad_l;
                            axpy(
                                &mut dx_row[x_off..x_off + (j_hi - j_lo)],
                                wv,
                                &dy_row[j_lo..j_hi],
                            );
                        } else {
                            for (j, &d) in dy_row.iter().enumerate() {
                                let pos = j * stride + k;
                                if pos >= pad_l && pos - pad_l < l {
                                    dx_row[pos - pad_l] += wv * d;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    if nodes[w].requires {
        for bi in 0..bs {
            for co in 0..cout {
                let dy_row = &dy[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                for ci in 0..cin {
                    let x_row = &nodes[x].value[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                    for k in 0..kw {
                        let mut acc = 0.0;
                        if stride == 1 {
                            let j_lo = pad_l.saturating_sub(k);
                            let j_hi = (l + pad_l).saturating_sub(k).min(lout);
                            if j_lo < j_hi {
                                let x_off = j_lo + k - pad_l;
                                acc = dot(&dy_row[j_lo..j_hi], &x_row[x_off..x_off + (j_hi - j_lo)]);
                            }
                        } else {
                            for (j, &d) in dy_row.iter().enumerate() {
                                let pos = j * stride + k;
                                if pos >= pad_l && pos - pad_l < l {
                                    acc += d * x_row[pos - pad_l];
                                }
                            }
                        }
                        adj[w][(co * cin + ci) * kw + k] += acc;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn batchnorm_backward(
    nodes: &[Node],
    adj: &mut [Vec<f64>],
    dy: &[f64],
    node: &Node,
    x: Id,
    gamma: Id,
    beta: Id,
    train: bool,
    mean: &[f64],
    inv_std: &[f64],
) {
    let (b, c, t) = (node.shape[0], node.shape[1], node.shape[2]);
    let n = (b * t) as f64;

    for ci in 0..c {
        let m = mean[ci];
        let is = inv_std[ci];
        let g = nodes[gamma].value[ci];

        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for bi in 0..b {
            let off = (bi * c + ci) * t;
            let d = &dy[off..off + t];
            let xv = &nodes[x].value[off..off + t];
            for (&dv, &xraw) in d.iter().zip(xv) {
                sum_dy += dv;
                sum_dy_xhat += dv * (xraw - m) * is;
            }
        }
        if nodes[gamma].requires {
            adj[gamma][ci] += sum_dy_xhat;
        }
        if nodes[beta].requires {
            adj[beta][ci] += sum_dy;
        }
        if nodes[x].requires {
            for bi in 0..b {
                let off = (bi * c + ci) * t;
                for i in 0..t {
                    let xraw = nodes[x].value[off + i];
                    let dv = dy[off + i];
                    let dx = if train {
                        let xhat = (xraw - m) * is;
                        g * is * (dv - sum_dy / n - xhat * sum_dy_xhat / n)
                    } else {
                        g * is * dv
                    };
                    adj[x][off + i] += dx;
                }
            }
        }
    }
}
