use super::gemm::{gemm, View};
use super::{Result, Tape, TensorError, Var};

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBroadcast(Var, Var),
    MulConst(Var, Vec<f64>),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat1(Var, Var),
    Slice1 { x: Var, start: usize },
    Sum(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Conv1d { x: Var, w: Var, b: Var, stride: usize, padding: usize, cols: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, pad: usize, probs: Vec<f64>, count: usize },
    Attention { qkv: Var, heads: usize, probs: Vec<f64> },
    Gather { x: Var, idx: Vec<Option<usize>> },
    LogSumExpRows(Var),
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

fn rank3(tape: &Tape, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
    match *tape.shape(x) {
        [b, t, d] => Ok((b, t, d)),
        ref s => Err(TensorError::ShapeMismatch { op, lhs: s.to_vec(), rhs: vec![0, 0, 0] }),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Log of the sum of exponentials; `-inf` when every entry is `-inf`.
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        Ok(self.output(self.shape(a).to_vec(), data, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        Ok(self.output(self.shape(a).to_vec(), data, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        Ok(self.output(self.shape(a).to_vec(), data, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * s).collect();
        self.output(self.shape(a).to_vec(), data, &[a], Op::Scale(a, s))
    }

    /// `x + y` where `y`'s shape is a trailing suffix of `x`'s (bias, positional rows).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ys = self.shape(y);
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(TensorError::ShapeMismatch {
                op: "add_broadcast",
                lhs: xs.to_vec(),
                rhs: ys.to_vec(),
            });
        }
        let yd = self.data(y);
        let n = yd.len().max(1);
        let data = self.data(x).iter().enumerate().map(|(i, v)| v + yd[i % n]).collect();
        Ok(self.output(self.shape(x).to_vec(), data, &[x, y], Op::AddBroadcast(x, y)))
    }

    /// Elementwise product with a constant (non-differentiable) array of the same size.
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.data(x).len() {
            return Err(TensorError::ShapeMismatch {
                op: "mul_const",
                lhs: self.shape(x).to_vec(),
                rhs: vec![c.len()],
            });
        }
        let data = self.data(x).iter().zip(&c).map(|(a, b)| a * b).collect();
        Ok(self.output(self.shape(x).to_vec(), data, &[x], Op::MulConst(x, c)))
    }

    /// `A·B` for `A` of shape `[.., m, k]` (leading axes folded into rows) and `B` of shape `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch { op: "matmul", lhs: ash.clone(), rhs: bsh.clone() };
        if ash.len() < 2 || bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
            return Err(mismatch());
        }
        let (k, n) = (bsh[0], bsh[1]);
        let m = if k == 0 { ash[..ash.len() - 1].iter().product() } else { self.data(a).len() / k };
        let mut out = vec![0.0; m * n];
        gemm(View::rm(self.data(a), 0, m, k), View::rm(self.data(b), 0, k, n), &mut out, 0, n, 0.0);
        let mut shape = ash[..ash.len() - 1].to_vec();
        shape.push(n);
        Ok(self.output(shape, out, &[a, b], Op::MatMul(a, b)))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let (bt, r, c) = match sh[..] {
            [r, c] => (1, r, c),
            [b, r, c] => (b, r, c),
            _ => return Err(TensorError::InvalidAxis { axis: 0, rank: sh.len() }),
        };
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for b in 0..bt {
            let o = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[o + j * r + i] = src[o + i * c + j];
                }
            }
        }
        let mut shape = sh.clone();
        let n = shape.len();
        shape.swap(n - 1, n - 2);
        Ok(self.output(shape, out, &[x], Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.data(x).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let data = self.data(x).to_vec();
        Ok(self.output(shape, data, &[x], Op::Reshape(x)))
    }

    /// Concatenates two rank-3 tensors along axis 1.
    pub fn concat1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ta, da) = rank3(self, "concat1", a)?;
        let (bb, tb, db) = rank3(self, "concat1", b)?;
        if ba != bb || da != db {
            return Err(TensorError::ShapeMismatch {
                op: "concat1",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = Vec::with_capacity(ba * (ta + tb) * da);
        for i in 0..ba {
            out.extend_from_slice(&self.data(a)[i * ta * da..(i + 1) * ta * da]);
            out.extend_from_slice(&self.data(b)[i * tb * da..(i + 1) * tb * da]);
        }
        Ok(self.output(vec![ba, ta + tb, da], out, &[a, b], Op::Concat1(a, b)))
    }

    /// Selects `len` consecutive steps along axis 1 of a rank-3 tensor.
    pub fn slice1(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (b, t, d) = rank3(self, "slice1", x)?;
        if start + len > t {
            return Err(TensorError::IndexOutOfRange { index: start + len, bound: t });
        }
        let mut out = Vec::with_capacity(b * len * d);
        for i in 0..b {
            let o = (i * t + start) * d;
            out.extend_from_slice(&self.data(x)[o..o + len * d]);
        }
        Ok(self.output(vec![b, len, d], out, &[x], Op::Slice1 { x, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.output(vec![], vec![s], &[x], Op::Sum(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self
            .data(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        self.output(self.shape(x).to_vec(), data, &[x], Op::Gelu(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if axis >= sh.len() {
            return Err(TensorError::InvalidAxis { axis, rank: sh.len() });
        }
        let (outer, len, inner) = split_axis(&sh, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |p: usize| o * len * inner + p * inner + i;
                let m = (0..len).map(|p| src[at(p)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for p in 0..len {
                    let e = (src[at(p)] - m).exp();
                    out[at(p)] = e;
                    z += e;
                }
                for p in 0..len {
                    out[at(p)] /= z;
                }
            }
        }
        Ok(self.output(sh, out, &[x], Op::Softmax { x, axis }))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let d = *sh.last().ok_or(TensorError::InvalidAxis { axis: 0, rank: 0 })?;
        let mut out = self.data(x).to_vec();
        if d > 0 {
            for row in out.chunks_mut(d) {
                let lse = log_sum_exp(row);
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
        }
        Ok(self.output(sh, out, &[x], Op::LogSoftmax(x)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let d = *sh.last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: sh,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let src = self.data(x);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + bt[j];
            }
        }
        Ok(self.output(sh, out, &[x, gamma, beta], Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Row gather: output row `i` is `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let sh = self.shape(table).to_vec();
        let [v, d] = sh[..] else {
            return Err(TensorError::ShapeMismatch { op: "embedding", lhs: sh, rhs: vec![0, 0] });
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::IndexOutOfRange { index: bad, bound: v });
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.output(vec![ids.len(), d], out, &[table], Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Strided 1-D convolution with zero padding.
    ///
    /// `x` is `[C_in, L]` or `[B, C_in, L]`, `w` is `[C_out, C_in, k]`, `b` is `[C_out]`.
    /// Output length is `floor((L + 2·padding − k)/stride) + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, cin, len, batched) = match xs[..] {
            [c, l] => (1, c, l, false),
            [n, c, l] => (n, c, l, true),
            _ => return Err(TensorError::ShapeMismatch { op: "conv1d", lhs: xs, rhs: vec![] }),
        };
        let ws = self.shape(w).to_vec();
        let [cout, wcin, k] = ws[..] else {
            return Err(TensorError::ShapeMismatch { op: "conv1d", lhs: xs, rhs: ws });
        };
        if wcin != cin || self.shape(b) != [cout] || stride == 0 || k == 0 {
            return Err(TensorError::ShapeMismatch { op: "conv1d", lhs: xs, rhs: ws });
        }
        let lout = conv_out_len(len, k, stride, padding)
            .ok_or(TensorError::SequenceTooShort { len, kernel: k, padding })?;
        let ck = cin * k;
        let src = self.data(x);
        let mut cols = vec![0.0; batch * ck * lout];
        for n in 0..batch {
            for c in 0..cin {
                for r in 0..k {
                    let row = n * ck * lout + (c * k + r) * lout;
                    for t in 0..lout {
                        let pos = (t * stride + r) as isize - padding as isize;
                        if pos >= 0 && (pos as usize) < len {
                            cols[row + t] = src[n * cin * len + c * len + pos as usize];
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; batch * cout * lout];
        let bias = self.data(b);
        for n in 0..batch {
            for o in 0..cout {
                out[n * cout * lout + o * lout..n * cout * lout + (o + 1) * lout].fill(bias[o]);
            }
            gemm(
                View::rm(self.data(w), 0, cout, ck),
                View::rm(&cols, n * ck * lout, ck, lout),
                &mut out,
                n * cout * lout,
                lout,
                1.0,
            );
        }
        let shape = if batched { vec![batch, cout, lout] } else { vec![cout, lout] };
        Ok(self.output(shape, out, &[x, w, b], Op::Conv1d { x, w, b, stride, padding, cols }))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)` over the
    /// last axis, skipping positions whose target equals `pad`.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var> {
        let sh = self.shape(logits).to_vec();
        let v = *sh.last().unwrap_or(&0);
        let rows = if v == 0 { 0 } else { self.data(logits).len() / v };
        if rows != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_cross_entropy",
                lhs: sh,
                rhs: vec![targets.len()],
            });
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; src.len()];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == pad {
                continue;
            }
            if t >= v {
                return Err(TensorError::IndexOutOfRange { index: t, bound: v });
            }
            let row = &src[r * v..(r + 1) * v];
            let lse = log_sum_exp(row);
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
            total -= row[t] - lse;
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::EmptyTarget);
        }
        let loss = total / count as f64;
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), pad, probs, count };
        Ok(self.output(vec![], vec![loss], &[logits], op))
    }

    /// Multi-head scaled dot-product attention over a packed `[B, S, 3·d]`
    /// query/key/value projection.
    ///
    /// `allowed[(b·S + i)·S + j]` says whether query `i` may attend to key `j`
    /// in sample `b`. A query with no allowed key outputs zeros.
    pub fn attention(&mut self, qkv: Var, heads: usize, allowed: &[bool]) -> Result<Var> {
        let (bsz, s, d3) = rank3(self, "attention", qkv)?;
        if heads == 0 || d3 % (3 * heads) != 0 || allowed.len() != bsz * s * s {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: self.shape(qkv).to_vec(),
                rhs: vec![heads, allowed.len()],
            });
        }
        let d = d3 / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.data(qkv);
        let mut probs = vec![0.0; bsz * heads * s * s];
        let mut out = vec![0.0; bsz * s * d];
        for b in 0..bsz {
            let base = b * s * d3;
            let mask = &allowed[b * s * s..(b + 1) * s * s];
            for h in 0..heads {
                let p_off = (b * heads + h) * s * s;
                let q = View::strided(src, base + h * dh, s, dh, d3);
                let k = View::strided(src, base + d + h * dh, s, dh, d3);
                gemm(q, k.t(), &mut probs, p_off, s, 0.0);
                let p = &mut probs[p_off..p_off + s * s];
                for i in 0..s {
                    let row = &mut p[i * s..(i + 1) * s];
                    let m = &mask[i * s..(i + 1) * s];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..s {
                        if m[j] {
                            row[j] *= scale;
                            mx = mx.max(row[j]);
                        }
                    }
                    if mx == f64::NEG_INFINITY {
                        row.fill(0.0);
                        continue;
                    }
                    let mut z = 0.0;
                    for j in 0..s {
                        row[j] = if m[j] { (row[j] - mx).exp() } else { 0.0 };
                        z += row[j];
                    }
                    for v in row.iter_mut() {
                        *v /= z;
                    }
                }
                let v = View::strided(src, base + 2 * d + h * dh, s, dh, d3);
                gemm(View::rm(&probs, p_off, s, s), v, &mut out, b * s * d + h * dh, d, 0.0);
            }
        }
        Ok(self.output(vec![bsz, s, d], out, &[qkv], Op::Attention { qkv, heads, probs }))
    }

    /// Flat gather; `None` entries produce `-inf` and receive no gradient.
    pub fn gather(&mut self, x: Var, idx: &[Option<usize>]) -> Result<Var> {
        let n = self.data(x).len();
        if let Some(bad) = idx.iter().flatten().find(|&&i| i >= n) {
            return Err(TensorError::IndexOutOfRange { index: *bad, bound: n });
        }
        let src = self.data(x);
        let out = idx.iter().map(|i| i.map_or(f64::NEG_INFINITY, |i| src[i])).collect();
        Ok(self.output(vec![idx.len()], out, &[x], Op::Gather { x, idx: idx.to_vec() }))
    }

    /// Log-sum-exp over the last axis of a rank-2 tensor.
    pub fn log_sum_exp_rows(&mut self, x: Var) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let [r, c] = sh[..] else {
            return Err(TensorError::ShapeMismatch { op: "log_sum_exp_rows", lhs: sh, rhs: vec![] });
        };
        let out = (0..r).map(|i| log_sum_exp(&self.data(x)[i * c..(i + 1) * c])).collect();
        Ok(self.output(vec![r], out, &[x], Op::LogSumExpRows(x)))
    }

    /// Vector-Jacobian products of node `i` given its output gradient `g`.
    pub(super) fn backward_node(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let y = &node.value.data;
        let needs = |v: &Var| self.nodes[v.0].value.requires_grad;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                res.push((*a, g.iter().zip(bd).map(|(g, b)| g * b).collect()));
                res.push((*b, g.iter().zip(ad).map(|(g, a)| g * a).collect()));
            }
            Op::Scale(a, s) => res.push((*a, g.iter().map(|v| v * s).collect())),
            Op::AddBroadcast(x, yv) => {
                res.push((*x, g.to_vec()));
                if needs(yv) {
                    let n = self.data(*yv).len();
                    let mut gy = vec![0.0; n];
                    if n > 0 {
                        for (k, v) in g.iter().enumerate() {
                            gy[k % n] += v;
                        }
                    }
                    res.push((*yv, gy));
                }
            }
            Op::MulConst(x, c) => res.push((*x, g.iter().zip(c).map(|(g, c)| g * c).collect())),
            Op::MatMul(a, b) => {
                let bs = self.shape(*b);
                let (k, n) = (bs[0], bs[1]);
                let m = if k == 0 { g.len() / n.max(1) } else { self.data(*a).len() / k };
                if needs(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(View::rm(g, 0, m, n), View::rm(self.data(*b), 0, k, n).t(), &mut ga, 0, k, 0.0);
                    res.push((*a, ga));
                }
                if needs(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(View::rm(self.data(*a), 0, m, k).t(), View::rm(g, 0, m, n), &mut gb, 0, n, 0.0);
                    res.push((*b, gb));
                }
            }
            Op::Transpose(x) => {
                let sh = &node.value.shape;
                let n = sh.len();
                let (r, c) = (sh[n - 2], sh[n - 1]);
                let bt = g.len() / (r * c).max(1);
                let mut gx = vec![0.0; g.len()];
                for b in 0..bt {
                    let o = b * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            gx[o + j * r + i] = g[o + i * c + j];
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::Concat1(a, b) => {
                let (bsz, ta, d) = (self.shape(*a)[0], self.shape(*a)[1], self.shape(*a)[2]);
                let tb = self.shape(*b)[1];
                let mut ga = Vec::with_capacity(bsz * ta * d);
                let mut gb = Vec::with_capacity(bsz * tb * d);
                for i in 0..bsz {
                    let o = i * (ta + tb) * d;
                    ga.extend_from_slice(&g[o..o + ta * d]);
                    gb.extend_from_slice(&g[o + ta * d..o + (ta + tb) * d]);
                }
                res.push((*a, ga));
                res.push((*b, gb));
            }
            Op::Slice1 { x, start } => {
                let xs = self.shape(*x);
                let (bsz, t, d) = (xs[0], xs[1], xs[2]);
                let len = node.value.shape[1];
                let mut gx = vec![0.0; bsz * t * d];
                for i in 0..bsz {
                    let o = (i * t + start) * d;
                    gx[o..o + len * d].copy_from_slice(&g[i * len * d..(i + 1) * len * d]);
                }
                res.push((*x, gx));
            }
            Op::Sum(x) => res.push((*x, vec![g[0]; self.data(*x).len()])),
            Op::Gelu(x) => {
                let gx = self
                    .data(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, g)| {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * dt)
                    })
                    .collect();
                res.push((*x, gx));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(&node.value.shape, *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |p: usize| o * len * inner + p * inner + i;
                        let dot: f64 = (0..len).map(|p| g[at(p)] * y[at(p)]).sum();
                        for p in 0..len {
                            gx[at(p)] = y[at(p)] * (g[at(p)] - dot);
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::LogSoftmax(x) => {
                let d = *node.value.shape.last().unwrap();
                let mut gx = vec![0.0; y.len()];
                for r in 0..y.len() / d.max(1) {
                    let gs: f64 = g[r * d..(r + 1) * d].iter().sum();
                    for j in 0..d {
                        gx[r * d + j] = g[r * d + j] - y[r * d + j].exp() * gs;
                    }
                }
                res.push((*x, gx));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.data(*gamma).len();
                let gm = self.data(*gamma);
                let rows = xhat.len() / d;
                if needs(x) {
                    let mut gx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for j in 0..d {
                            let dxh = g[r * d + j] * gm[j];
                            m1 += dxh;
                            m2 += dxh * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gm[j];
                            gx[r * d + j] = rstd[r] * (dxh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                    res.push((*x, gx));
                }
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                        gb[j] += g[r * d + j];
                    }
                }
                res.push((*gamma, gg));
                res.push((*beta, gb));
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut gt = vec![0.0; self.data(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
                res.push((*table, gt));
            }
            Op::Conv1d { x, w, b, stride, padding, cols } => {
                let xs = self.shape(*x);
                let (batch, cin, len) = if xs.len() == 2 { (1, xs[0], xs[1]) } else { (xs[0], xs[1], xs[2]) };
                let ws = self.shape(*w);
                let (cout, k) = (ws[0], ws[2]);
                let ck = cin * k;
                let lout = node.value.shape[node.value.shape.len() - 1];
                if needs(w) {
                    let mut gw = vec![0.0; cout * ck];
                    for n in 0..batch {
                        gemm(
                            View::rm(g, n * cout * lout, cout, lout),
                            View::rm(cols, n * ck * lout, ck, lout).t(),
                            &mut gw,
                            0,
                            ck,
                            1.0,
                        );
                    }
                    res.push((*w, gw));
                }
                if needs(b) {
                    let mut gb = vec![0.0; cout];
                    for n in 0..batch {
                        for o in 0..cout {
                            let s = n * cout * lout + o * lout;
                            gb[o] += g[s..s + lout].iter().sum::<f64>();
                        }
                    }
                    res.push((*b, gb));
                }
                if needs(x) {
                    let mut gx = vec![0.0; batch * cin * len];
                    let mut gcols = vec![0.0; ck * lout];
                    for n in 0..batch {
                        gemm(
                            View::rm(self.data(*w), 0, cout, ck).t(),
                            View::rm(g, n * cout * lout, cout, lout),
                            &mut gcols,
                            0,
                            lout,
                            0.0,
                        );
                        for c in 0..cin {
                            for r in 0..k {
                                for t in 0..lout {
                                    let pos = (t * stride + r) as isize - *padding as isize;
                                    if pos >= 0 && (pos as usize) < len {
                                        gx[n * cin * len + c * len + pos as usize] += gcols[(c * k + r) * lout + t];
                                    }
                                }
                            }
                        }
                    }
                    res.push((*x, gx));
                }
            }
            Op::CrossEntropy { logits, targets, pad, probs, count } => {
                let v = *self.shape(*logits).last().unwrap();
                let scale = g[0] / *count as f64;
                let mut gl = vec![0.0; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == *pad {
                        continue;
                    }
                    for j in 0..v {
                        gl[r * v + j] = scale * probs[r * v + j];
                    }
                    gl[r * v + t] -= scale;
                }
                res.push((*logits, gl));
            }
            Op::Attention { qkv, heads, probs } => {
                let qs = self.shape(*qkv);
                let (bsz, s, d3) = (qs[0], qs[1], qs[2]);
                let d = d3 / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let src = self.data(*qkv);
                let mut gq = vec![0.0; src.len()];
                let mut dp = vec![0.0; s * s];
                for b in 0..bsz {
                    let base = b * s * d3;
                    for h in 0..*heads {
                        let p_off = (b * heads + h) * s * s;
                        let p = View::rm(probs, p_off, s, s);
                        let go = View::strided(g, b * s * d + h * dh, s, dh, d);
                        // dV = Pᵀ·dO
                        gemm(p.t(), go, &mut gq, base + 2 * d + h * dh, d3, 0.0);
                        // dP = dO·Vᵀ
                        let v = View::strided(src, base + 2 * d + h * dh, s, dh, d3);
                        gemm(go, v.t(), &mut dp, 0, s, 0.0);
                        let pr = &probs[p_off..p_off + s * s];
                        for i in 0..s {
                            let row = &mut dp[i * s..(i + 1) * s];
                            let prow = &pr[i * s..(i + 1) * s];
                            let dot: f64 = row.iter().zip(prow).map(|(a, b)| a * b).sum();
                            for j in 0..s {
                                row[j] = prow[j] * (row[j] - dot) * scale;
                            }
                        }
                        let ds = View::rm(&dp, 0, s, s);
                        let q = View::strided(src, base + h * dh, s, dh, d3);
                        let k = View::strided(src, base + d + h * dh, s, dh, d3);
                        gemm(ds, k, &mut gq, base + h * dh, d3, 0.0);
                        gemm(ds.t(), q, &mut gq, base + d + h * dh, d3, 0.0);
                    }
                }
                res.push((*qkv, gq));
            }
            Op::Gather { x, idx } => {
                let mut gx = vec![0.0; self.data(*x).len()];
                for (o, i) in idx.iter().enumerate() {
                    if let Some(i) = i {
                        gx[*i] += g[o];
                    }
                }
                res.push((*x, gx));
            }
            Op::LogSumExpRows(x) => {
                let c = self.shape(*x)[1];
                let xd = self.data(*x);
                let mut gx = vec![0.0; xd.len()];
                for (r, (&lse, &gr)) in y.iter().zip(g).enumerate() {
                    if lse == f64::NEG_INFINITY {
                        continue;
                    }
                    for j in 0..c {
                        let v = xd[r * c + j];
                        if v != f64::NEG_INFINITY {
                            gx[r * c + j] = gr * (v - lse).exp();
                        }
                    }
                }
                res.push((*x, gx));
            }
        }
        res.retain(|(v, _)| needs(v));
        res
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `floor((len + 2·padding − kernel)/stride) + 1`, or `None` when the padded
/// input is shorter than the kernel.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}
