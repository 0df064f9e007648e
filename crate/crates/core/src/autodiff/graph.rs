use super::{AutodiffError, Real, Result, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
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
        shared_rhs: bool,
    },
    Transpose {
        a: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: T,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Reshape {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of recorded operations. Nodes are appended in execution order,
/// which is a topological order by construction.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.shapes[v.0].clone(),
            data: g.clone(),
        })
    }

    /// Gradient of `v`, or zeros of its shape if nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(data) => Tensor { shape, data },
            None => Tensor::zeros(&shape),
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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
        &self.nodes[v.0].value.shape
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// `a @ b` over the last two axes. `b` is either a shared `[k, n]` matrix
    /// or carries the same leading batch axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || AutodiffError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && &sb[..sb.len() - 2] != lead {
            return Err(err());
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = &self.nodes[a.0].value.data;
            let bv = &self.nodes[b.0].value.data;
            if shared_rhs {
                T::gemm(
                    batch * m,
                    k,
                    n,
                    T::one(),
                    av,
                    k as isize,
                    1,
                    bv,
                    n as isize,
                    1,
                    T::zero(),
                    &mut out,
                );
            } else {
                for bi in 0..batch {
                    T::gemm(
                        m,
                        k,
                        n,
                        T::one(),
                        &av[bi * m * k..],
                        k as isize,
                        1,
                        &bv[bi * k * n..],
                        n as isize,
                        1,
                        T::zero(),
                        &mut out[bi * m * n..(bi + 1) * m * n],
                    );
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            "matmul",
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            rg,
        )
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(AutodiffError::Invalid {
                op: "transpose",
                msg: format!("needs at least 2 axes, got {s:?}"),
            });
        }
        let out = transpose_last2(&self.nodes[a.0].value.data, &s);
        let mut shape = s.clone();
        let nd = shape.len();
        shape.swap(nd - 1, nd - 2);
        let rg = self.rg(a);
        self.push(
            "transpose",
            Tensor { shape, data: out },
            Op::Transpose { a },
            rg,
        )
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(AutodiffError::Shape {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bv = &self.nodes[b.0].value.data;
        let av = &self.nodes[a.0].value;
        let mut out = av.data.clone();
        for chunk in out.chunks_mut(bv.len()) {
            for (o, &x) in chunk.iter_mut().zip(bv) {
                *o = *o + x;
            }
        }
        let shape = av.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push("add", Tensor { shape, data: out }, Op::Add { a, b }, rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let data = av.data.iter().map(|&x| x * s).collect();
        let shape = av.shape.clone();
        let rg = self.rg(a);
        self.push("scale", Tensor { shape, data }, Op::Scale { a, s }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let n = *av.shape.last().unwrap();
        let mut out = av.data.clone();
        for row in out.chunks_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum = sum + *x;
            }
            for x in row.iter_mut() {
                *x = *x / sum;
            }
        }
        let shape = av.shape.clone();
        let rg = self.rg(a);
        self.push(
            "softmax",
            Tensor { shape, data: out },
            Op::Softmax { a },
            rg,
        )
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(AutodiffError::Shape {
                    op: "layer_norm",
                    lhs: sx.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = &self.nodes[x.0].value.data;
        let g = &self.nodes[gain.0].value.data;
        let b = &self.nodes[bias.0].value.data;
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            "layer_norm",
            Tensor {
                shape: sx,
                data: out,
            },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let c = T::lit(GELU_C);
        let s = T::lit(SQRT_2_OVER_PI);
        let half = T::lit(0.5);
        let data = av
            .data
            .iter()
            .map(|&x| half * x * (T::one() + (s * (x + c * x * x * x)).tanh()))
            .collect();
        let shape = av.shape.clone();
        let rg = self.rg(a);
        self.push("gelu", Tensor { shape, data }, Op::Gelu { a }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let data = av.data.iter().map(|&x| x.max(T::zero())).collect();
        let shape = av.shape.clone();
        let rg = self.rg(a);
        self.push("relu", Tensor { shape, data }, Op::Relu { a }, rg)
    }

    /// `x @ w + b` with `x: [.., in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        let fan_in = *sx.last().unwrap();
        if sw.len() != 2 || sw[0] != fan_in {
            return Err(AutodiffError::Shape {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let fan_out = sw[1];
        if sb != [fan_out] {
            return Err(AutodiffError::Shape {
                op: "linear(bias)",
                lhs: sw,
                rhs: sb,
            });
        }
        let rows = self.nodes[x.0].value.len() / fan_in;
        let mut out = Vec::with_capacity(rows * fan_out);
        let bv = &self.nodes[b.0].value.data;
        for _ in 0..rows {
            out.extend_from_slice(bv);
        }
        T::gemm(
            rows,
            fan_in,
            fan_out,
            T::one(),
            &self.nodes[x.0].value.data,
            fan_in as isize,
            1,
            &self.nodes[w.0].value.data,
            fan_out as isize,
            1,
            T::one(),
            &mut out,
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = fan_out;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            "linear",
            Tensor { shape, data: out },
            Op::Linear { x, w, b },
            rg,
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(AutodiffError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for {first:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(AutodiffError::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = &self.nodes[p.0].value;
                let len = v.shape[axis] * inner;
                out.extend_from_slice(&v.data[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            "concat",
            Tensor { shape, data: out },
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(AutodiffError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} of {s:?}"),
            });
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let av = &self.nodes[a.0].value.data;
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&av[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let rg = self.rg(a);
        self.push(
            "slice",
            Tensor { shape, data: out },
            Op::Slice { a, axis, start },
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[a.0].value.clone().reshaped(shape)?;
        let rg = self.rg(a);
        self.push("reshape", t, Op::Reshape { a }, rg)
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value.data;
        let m = av.iter().copied().sum::<T>() / T::lit(av.len() as f64);
        let rg = self.rg(a);
        self.push("mean", Tensor::scalar(m), Op::Mean { a }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.data.iter().copied().sum::<T>();
        let rg = self.rg(a);
        self.push("sum", Tensor::scalar(s), Op::Sum { a }, rg)
    }

    /// Mean squared error against a constant target of the same size.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let pv = &self.nodes[pred.0].value;
        if pv.len() != target.len() {
            return Err(AutodiffError::Shape {
                op: "mse_loss",
                lhs: pv.shape.clone(),
                rhs: target.shape.clone(),
            });
        }
        let n = T::lit(pv.len() as f64);
        let l = pv
            .data
            .iter()
            .zip(&target.data)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<T>()
            / n;
        let rg = self.rg(pred);
        self.push(
            "mse_loss",
            Tensor::scalar(l),
            Op::Mse {
                pred,
                target: target.data.clone(),
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NotScalar(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value.data;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let bv = val(b);
                let av = val(a);
                if let Some(ga) = self.acc(grads, a) {
                    if shared_rhs {
                        // dA = dC · Bᵀ
                        T::gemm(
                            batch * m,
                            n,
                            k,
                            T::one(),
                            g,
                            n as isize,
                            1,
                            bv,
                            1,
                            n as isize,
                            T::one(),
                            ga,
                        );
                    } else {
                        for bi in 0..batch {
                            T::gemm(
                                m,
                                n,
                                k,
                                T::one(),
                                &g[bi * m * n..],
                                n as isize,
                                1,
                                &bv[bi * k * n..],
                                1,
                                n as isize,
                                T::one(),
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                            );
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    if shared_rhs {
                        // dB = Aᵀ · dC
                        T::gemm(
                            k,
                            batch * m,
                            n,
                            T::one(),
                            av,
                            1,
                            k as isize,
                            g,
                            n as isize,
                            1,
                            T::one(),
                            gb,
                        );
                    } else {
                        for bi in 0..batch {
                            T::gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                &av[bi * m * k..],
                                1,
                                k as isize,
                                &g[bi * m * n..],
                                n as isize,
                                1,
                                T::one(),
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                            );
                        }
                    }
                }
            }
            &Op::Transpose { a } => {
                let s = &node.value.shape;
                let gt = transpose_last2(g, s);
                if let Some(ga) = self.acc(grads, a) {
                    add_into(ga, &gt);
                }
            }
            &Op::Add { a, b } => {
                if let Some(ga) = self.acc(grads, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, b) {
                    let n = gb.len();
                    for chunk in g.chunks(n) {
                        add_into(gb, chunk);
                    }
                }
            }
            &Op::Scale { a, s } => {
                if let Some(ga) = self.acc(grads, a) {
                    for (o, &x) in ga.iter_mut().zip(g) {
                        *o = *o + x * s;
                    }
                }
            }
            &Op::Softmax { a } => {
                let y = &node.value.data;
                let n = *node.value.shape.last().unwrap();
                if let Some(ga) = self.acc(grads, a) {
                    for ((gr, yr), outr) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot = gr.iter().zip(yr).map(|(&u, &v)| u * v).sum::<T>();
                        for j in 0..n {
                            outr[j] = outr[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *node.value.shape.last().unwrap();
                let gv = val(*gain);
                if let Some(gg) = self.acc(grads, *gain) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let dn = T::lit(d as f64);
                    let mut dh = vec![T::zero(); d];
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = gr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / dn;
                        let mean_dh_h = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] = out[j] + rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            &Op::Gelu { a } => {
                let xs = val(a);
                let c = T::lit(GELU_C);
                let s = T::lit(SQRT_2_OVER_PI);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                if let Some(ga) = self.acc(grads, a) {
                    for ((o, &x), &gy) in ga.iter_mut().zip(xs).zip(g) {
                        let t = (s * (x + c * x * x * x)).tanh();
                        let d = half * (T::one() + t)
                            + half * x * (T::one() - t * t) * s * (T::one() + three * c * x * x);
                        *o = *o + gy * d;
                    }
                }
            }
            &Op::Relu { a } => {
                let xs = val(a);
                if let Some(ga) = self.acc(grads, a) {
                    for ((o, &x), &gy) in ga.iter_mut().zip(xs).zip(g) {
                        if x > T::zero() {
                            *o = *o + gy;
                        }
                    }
                }
            }
            &Op::Linear { x, w, b } => {
                let sw = &self.nodes[w.0].value.shape;
                let (fan_in, fan_out) = (sw[0], sw[1]);
                let rows = g.len() / fan_out;
                let wv = val(w);
                let xv = val(x);
                if let Some(gx) = self.acc(grads, x) {
                    T::gemm(
                        rows,
                        fan_out,
                        fan_in,
                        T::one(),
                        g,
                        fan_out as isize,
                        1,
                        wv,
                        1,
                        fan_out as isize,
                        T::one(),
                        gx,
                    );
                }
                if let Some(gw) = self.acc(grads, w) {
                    T::gemm(
                        fan_in,
                        rows,
                        fan_out,
                        T::one(),
                        xv,
                        1,
                        fan_in as isize,
                        g,
                        fan_out as isize,
                        1,
                        T::one(),
                        gw,
                    );
                }
                if let Some(gb) = self.acc(grads, b) {
                    for row in g.chunks(fan_out) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(&node.value.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.shape[*axis];
                    if let Some(gp) = self.acc(grads, p) {
                        for o in 0..outer {
                            let src = &g
                                [(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut gp[o * len * inner..(o + 1) * len * inner], src);
                        }
                    }
                    offset += len;
                }
            }
            &Op::Slice { a, axis, start } => {
                let (outer, len, inner) = split_axis(&self.nodes[a.0].value.shape, axis);
                let width = node.value.shape[axis];
                if let Some(ga) = self.acc(grads, a) {
                    for o in 0..outer {
                        let dst = o * len * inner + start * inner;
                        add_into(
                            &mut ga[dst..dst + width * inner],
                            &g[o * width * inner..(o + 1) * width * inner],
                        );
                    }
                }
            }
            &Op::Reshape { a } => {
                if let Some(ga) = self.acc(grads, a) {
                    add_into(ga, g);
                }
            }
            &Op::Mean { a } => {
                if let Some(ga) = self.acc(grads, a) {
                    let d = g[0] / T::lit(ga.len() as f64);
                    for o in ga.iter_mut() {
                        *o = *o + d;
                    }
                }
            }
            &Op::Sum { a } => {
                if let Some(ga) = self.acc(grads, a) {
                    for o in ga.iter_mut() {
                        *o = *o + g[0];
                    }
                }
            }
            Op::Mse { pred, target } => {
                let pv = val(*pred);
                if let Some(gp) = self.acc(grads, *pred) {
                    let scale = g[0] * T::lit(2.0 / pv.len() as f64);
                    for ((o, &p), &t) in gp.iter_mut().zip(pv).zip(target) {
                        *o = *o + scale * (p - t);
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn transpose_last2<T: Real>(data: &[T], shape: &[usize]) -> Vec<T> {
    let nd = shape.len();
    let (m, n) = (shape[nd - 2], shape[nd - 1]);
    let mut out = vec![T::zero(); data.len()];
    for (src, dst) in data.chunks(m * n).zip(out.chunks_mut(m * n)) {
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}
