use std::rc::Rc;

use super::gemm::{gemm, gemm_strided, Layout};
use super::grid::Grid4;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Pixel index sets of every instance in one batch item, used by the
/// discriminative embedding loss.
pub type InstanceSets = Vec<Vec<usize>>;

#[derive(Clone, Copy, Debug)]
pub struct DiscriminativeMargins {
    pub pull: f64,
    pub push: f64,
    pub reg: f64,
}

impl Default for DiscriminativeMargins {
    fn default() -> Self {
        Self {
            pull: 0.5,
            push: 1.5,
            reg: 0.001,
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatmulNt {
        a: Var,
        b: Var,
    },
    Matmul {
        a: Var,
        b: Var,
    },
    Softmax {
        x: Var,
        temperature: f64,
    },
    LogSoftmax {
        x: Var,
        temperature: f64,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    AvgPoolFull {
        x: Var,
    },
    AvgPool2d {
        x: Var,
        k: usize,
    },
    Gather {
        x: Var,
        idx: Rc<Vec<usize>>,
    },
    Reshape {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: f64,
    },
    Square {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    BceWithLogits {
        logits: Var,
        target: Var,
    },
    Discriminative {
        emb: Var,
        instances: Rc<Vec<InstanceSets>>,
        margins: DiscriminativeMargins,
    },
}

struct Node {
    value: Grid4,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Ops are recorded in execution order; `backward`
/// replays them in exact reverse order and leaves gradients on the leaves.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            recording: true,
        }
    }

    /// A tape that never records backward information. Forward values are
    /// identical to a recording tape.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Grid4) -> Var {
        let rg = value.requires_grad() && self.recording;
        self.push(value, Op::Leaf, rg)
    }

    /// Constant leaf (never receives a gradient).
    pub fn constant(&mut self, value: Grid4) -> Var {
        self.push(value.with_requires_grad(false), Op::Leaf, false)
    }

    /// Gradient-detached copy of `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone().with_requires_grad(false);
        self.push(v, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Grid4 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.values()[0]
    }

    fn push(&mut self, value: Grid4, op: Op, requires_grad: bool) -> Var {
        self.consumed = false;
        let op = if self.recording && requires_grad {
            op
        } else {
            Op::Leaf
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.recording,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn vals(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    // ------------------------------------------------------------------
    // forward ops

    /// Cross-correlation. `x` (B, Cin, H, W), `w` (Cout, Cin, kh, kw),
    /// `b` any grid holding Cout values.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if stride == 0 {
            return Err(Error::InvalidArgument(
                "conv2d stride must be positive".into(),
            ));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if let Some(b) = b {
            if self.value(b).len() != ws[0] {
                return Err(Error::shape("conv2d bias", &ws, &self.shape(b)));
            }
        }
        let geo = ConvGeom::new(xs, ws, stride, pad)?;
        let mut out = vec![0.0; xs[0] * geo.cout * geo.p()];
        let wv = self.vals(w);
        let band = geo.band();
        let mut cols = vec![0.0; geo.k() * band * geo.wo];
        for bi in 0..xs[0] {
            let xb = &self.vals(x)[bi * geo.in_len()..(bi + 1) * geo.in_len()];
            let ob = &mut out[bi * geo.cout * geo.p()..(bi + 1) * geo.cout * geo.p()];
            if geo.is_pointwise() {
                gemm(
                    geo.cout,
                    geo.k(),
                    geo.p(),
                    1.0,
                    wv,
                    Layout::N,
                    xb,
                    Layout::N,
                    0.0,
                    ob,
                );
            } else {
                for oy0 in (0..geo.ho).step_by(band) {
                    let oy1 = (oy0 + band).min(geo.ho);
                    let pt = (oy1 - oy0) * geo.wo;
                    geo.im2col(xb, oy0, oy1, &mut cols);
                    let (k, p) = (geo.k(), geo.p());
                    gemm_strided(
                        geo.cout,
                        k,
                        pt,
                        1.0,
                        wv,
                        (k, 1),
                        &cols,
                        (pt, 1),
                        0.0,
                        &mut ob[oy0 * geo.wo..],
                        p,
                    );
                }
            }
            if let Some(b) = b {
                let bv = self.vals(b);
                for (co, chunk) in ob.chunks_mut(geo.p()).enumerate() {
                    let bias = bv[co];
                    chunk.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let value = Grid4::new([xs[0], geo.cout, geo.ho, geo.wo], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Affine map over the last axis: `x` (B, C, N, Din), `w` (1, 1, Din, Dout),
    /// `b` any grid holding Dout values.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws[0] != 1 || ws[1] != 1 || ws[2] != xs[3] {
            return Err(Error::shape("linear", &xs, &ws));
        }
        let dout = ws[3];
        if let Some(b) = b {
            if self.value(b).len() != dout {
                return Err(Error::shape("linear bias", &ws, &self.shape(b)));
            }
        }
        let rows = xs[0] * xs[1] * xs[2];
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bv = self.vals(b);
            for r in out.chunks_mut(dout.max(1)) {
                r.copy_from_slice(&bv[..dout]);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(
            rows,
            xs[3],
            dout,
            1.0,
            self.vals(x),
            Layout::N,
            self.vals(w),
            Layout::N,
            beta,
            &mut out,
        );
        let value = Grid4::new([xs[0], xs[1], xs[2], dout], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// Batched `a · bᵀ`: (B, C, N, D) × (B, C, M, D) → (B, C, N, M).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa[0] != sb[0] || sa[1] != sb[1] || sa[3] != sb[3] {
            return Err(Error::shape("matmul_nt", &sa, &sb));
        }
        let (n, d, m) = (sa[2], sa[3], sb[2]);
        let groups = sa[0] * sa[1];
        let mut out = vec![0.0; groups * n * m];
        for g in 0..groups {
            gemm(
                n,
                d,
                m,
                1.0,
                &self.vals(a)[g * n * d..],
                Layout::N,
                &self.vals(b)[g * m * d..],
                Layout::T,
                0.0,
                &mut out[g * n * m..(g + 1) * n * m],
            );
        }
        let value = Grid4::new([sa[0], sa[1], n, m], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatmulNt { a, b }, rg))
    }

    /// Batched `a · b`: (B, C, N, K) × (B, C, K, M) → (B, C, N, M).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa[0] != sb[0] || sa[1] != sb[1] || sa[3] != sb[2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (n, k, m) = (sa[2], sa[3], sb[3]);
        let groups = sa[0] * sa[1];
        let mut out = vec![0.0; groups * n * m];
        for g in 0..groups {
            gemm(
                n,
                k,
                m,
                1.0,
                &self.vals(a)[g * n * k..],
                Layout::N,
                &self.vals(b)[g * k * m..],
                Layout::N,
                0.0,
                &mut out[g * n * m..(g + 1) * n * m],
            );
        }
        let value = Grid4::new([sa[0], sa[1], n, m], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Matmul { a, b }, rg))
    }

    /// Row-wise softmax of `x / temperature` over the last axis.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let s = self.shape(x);
        let mut out = self.vals(x).to_vec();
        for row in out.chunks_mut(s[3].max(1)) {
            softmax_in_place(row, temperature);
        }
        let value = Grid4::new(s, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x, temperature }, rg))
    }

    /// Row-wise log-softmax of `x / temperature` over the last axis.
    pub fn log_softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let s = self.shape(x);
        let mut out = self.vals(x).to_vec();
        for row in out.chunks_mut(s[3].max(1)) {
            log_softmax_in_place(row, temperature);
        }
        let value = Grid4::new(s, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::LogSoftmax { x, temperature }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let out = self.vals(x).iter().map(|&v| v.max(0.0)).collect();
        let value = Grid4::new(s, out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let out = self.vals(x).iter().map(|&v| sigmoid(v)).collect();
        let value = Grid4::new(s, out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    /// Global mean per (batch, channel): (B, C, H, W) → (B, C, 1, 1).
    pub fn avg_pool_full(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let hw = s[2] * s[3];
        let out = self
            .vals(x)
            .chunks(hw.max(1))
            .map(|c| {
                if hw == 0 {
                    0.0
                } else {
                    c.iter().sum::<f64>() / hw as f64
                }
            })
            .collect();
        let value = Grid4::new([s[0], s[1], 1, 1], out).expect("pooled shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::AvgPoolFull { x }, rg)
    }

    /// Non-overlapping k×k mean pooling; k must divide both spatial dims.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x);
        if k == 0 || !s[2].is_multiple_of(k) || !s[3].is_multiple_of(k) {
            return Err(Error::InvalidArgument(format!(
                "avg_pool2d: window {k} does not divide {}x{}",
                s[2], s[3]
            )));
        }
        let (ho, wo) = (s[2] / k, s[3] / k);
        let inv = 1.0 / (k * k) as f64;
        let xv = self.vals(x);
        let mut out = vec![0.0; s[0] * s[1] * ho * wo];
        for bc in 0..s[0] * s[1] {
            let src = &xv[bc * s[2] * s[3]..];
            let dst = &mut out[bc * ho * wo..(bc + 1) * ho * wo];
            for h in 0..s[2] {
                for w in 0..s[3] {
                    dst[(h / k) * wo + w / k] += src[h * s[3] + w] * inv;
                }
            }
        }
        let value = Grid4::new([s[0], s[1], ho, wo], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::AvgPool2d { x, k }, rg))
    }

    /// `out[i] = x[idx[i]]` reshaped to `shape`. Backward scatter-adds.
    pub fn gather(&mut self, x: Var, idx: Rc<Vec<usize>>, shape: [usize; 4]) -> Result<Var> {
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != idx.len() {
            return Err(Error::shape("gather", &shape, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range {n}"
            )));
        }
        let xv = self.vals(x);
        let out = idx.iter().map(|&i| xv[i]).collect();
        let value = Grid4::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Gather { x, idx }, rg))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::InvalidArgument(
                "upsample factor must be positive".into(),
            ));
        }
        let s = self.shape(x);
        let (ho, wo) = (s[2] * factor, s[3] * factor);
        let mut idx = Vec::with_capacity(s[0] * s[1] * ho * wo);
        for bc in 0..s[0] * s[1] {
            for h in 0..ho {
                for w in 0..wo {
                    idx.push((bc * s[2] + h / factor) * s[3] + w / factor);
                }
            }
        }
        self.gather(x, Rc::new(idx), [s[0], s[1], ho, wo])
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: [usize; 4]) -> Result<Var> {
        let mut seen = [false; 4];
        for &p in &perm {
            if p > 3 || seen[p] {
                return Err(Error::InvalidArgument(format!(
                    "invalid permutation {perm:?}"
                )));
            }
            seen[p] = true;
        }
        let s = self.shape(x);
        let strides = [s[1] * s[2] * s[3], s[2] * s[3], s[3], 1];
        let os = [s[perm[0]], s[perm[1]], s[perm[2]], s[perm[3]]];
        let mut idx = Vec::with_capacity(self.value(x).len());
        for a in 0..os[0] {
            for b in 0..os[1] {
                for c in 0..os[2] {
                    for d in 0..os[3] {
                        idx.push(
                            a * strides[perm[0]]
                                + b * strides[perm[1]]
                                + c * strides[perm[2]]
                                + d * strides[perm[3]],
                        );
                    }
                }
            }
        }
        self.gather(x, Rc::new(idx), os)
    }

    /// Non-overlapping s×s patches flattened channel-major:
    /// (B, C, H, W) → (B, 1, (H/s)(W/s), C·s·s), patches in row-major order.
    pub fn patchify(&mut self, x: Var, s: usize) -> Result<Var> {
        let sh = self.shape(x);
        if s == 0 || !sh[2].is_multiple_of(s) || !sh[3].is_multiple_of(s) {
            return Err(Error::InvalidArgument(format!(
                "patch size {s} does not divide {}x{}",
                sh[2], sh[3]
            )));
        }
        let (ph, pw) = (sh[2] / s, sh[3] / s);
        let dim = sh[1] * s * s;
        let mut idx = Vec::with_capacity(self.value(x).len());
        for b in 0..sh[0] {
            for py in 0..ph {
                for px in 0..pw {
                    for c in 0..sh[1] {
                        for dy in 0..s {
                            for dx in 0..s {
                                idx.push(
                                    ((b * sh[1] + c) * sh[2] + py * s + dy) * sh[3] + px * s + dx,
                                );
                            }
                        }
                    }
                }
            }
        }
        self.gather(x, Rc::new(idx), [sh[0], 1, ph * pw, dim])
    }

    /// Values at cells where `mask` is true, flattened to (1, 1, 1, n).
    pub fn masked_select(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("masked_select", &self.shape(x), &[mask.len()]));
        }
        let idx: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
            .collect();
        let n = idx.len();
        self.gather(x, Rc::new(idx), [1, 1, 1, n])
    }

    pub fn reshape(&mut self, x: Var, shape: [usize; 4]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?.with_requires_grad(false);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 3 {
            return Err(Error::InvalidArgument(
                "concat needs parts and axis < 4".into(),
            ));
        }
        let s0 = self.shape(parts[0]);
        let mut out_shape = s0;
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            for d in 0..4 {
                if d != axis && s[d] != s0[d] {
                    return Err(Error::shape("concat", &s0, &s));
                }
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.vals(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Grid4::new(out_shape, out)?;
        let rg = self.rg(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, 1)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Grid4> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::shape(name, &sa, &sb));
        }
        let out = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Grid4::new(sa, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let s = self.shape(x);
        let out = self.vals(x).iter().map(|&v| v * k).collect();
        let value = Grid4::new(s, out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, k }, rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let out = self.vals(x).iter().map(|&v| v * v).collect();
        let value = Grid4::new(s, out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Square { x }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.vals(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Grid4::scalar(v), Op::Sum { x }, rg)
    }

    /// Mean of all entries; the mean of an empty grid is defined as 0.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let v = if n == 0 {
            0.0
        } else {
            self.vals(x).iter().sum::<f64>() / n as f64
        };
        let rg = self.rg(&[x]);
        self.push(Grid4::scalar(v), Op::Mean { x }, rg)
    }

    /// Mean squared difference of two same-shape grids.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Mean binary cross-entropy of `logits` against (soft) `target`
    /// probabilities, in the overflow-free form
    /// `max(s, 0) - s·t + ln(1 + e^{-|s|})`. Empty input yields 0.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        let sl = self.shape(logits);
        let st = self.shape(target);
        if sl != st {
            return Err(Error::shape("bce_with_logits", &sl, &st));
        }
        let n = self.value(logits).len();
        let total: f64 = self
            .vals(logits)
            .iter()
            .zip(self.vals(target))
            .map(|(&s, &t)| bce_logit(s, t))
            .sum();
        let v = if n == 0 { 0.0 } else { total / n as f64 };
        let rg = self.rg(&[logits, target]);
        Ok(self.push(Grid4::scalar(v), Op::BceWithLogits { logits, target }, rg))
    }

    /// Softmax attention over a token sequence `x` (B, 1, N, D):
    /// returns (attention weights (B, 1, N, N), attended values (B, 1, N, D)).
    pub fn scaled_dot_attention(
        &mut self,
        x: Var,
        wq: Var,
        wk: Var,
        wv: Var,
    ) -> Result<(Var, Var)> {
        let d = self.shape(wq)[3];
        let q = self.linear(x, wq, None)?;
        let k = self.linear(x, wk, None)?;
        let v = self.linear(x, wv, None)?;
        let logits = self.matmul_nt(q, k)?;
        let logits = self.scale(logits, 1.0 / (d as f64).sqrt());
        let a = self.softmax_rows(logits, 1.0)?;
        let out = self.matmul(a, v)?;
        Ok((a, out))
    }

    /// Discriminative instance-embedding loss (pull within an instance,
    /// push apart instance means, small mean-norm regulariser), averaged
    /// over the batch. `emb` is (B, E, H, W); `instances[b]` lists pixel
    /// indices (h·W + w) of every instance in item b.
    pub fn discriminative_loss(
        &mut self,
        emb: Var,
        instances: Rc<Vec<InstanceSets>>,
        margins: DiscriminativeMargins,
    ) -> Result<Var> {
        let s = self.shape(emb);
        if instances.len() != s[0] {
            return Err(Error::shape("discriminative_loss", &s, &[instances.len()]));
        }
        let hw = s[2] * s[3];
        for sets in instances.iter() {
            if sets.iter().flatten().any(|&p| p >= hw) {
                return Err(Error::InvalidArgument("instance pixel out of range".into()));
            }
        }
        let mut grad_unused = Vec::new();
        let v = disc_forward_backward(
            self.vals(emb),
            s,
            &instances,
            margins,
            0.0,
            &mut grad_unused,
        );
        let rg = self.rg(&[emb]);
        Ok(self.push(
            Grid4::scalar(v),
            Op::Discriminative {
                emb,
                instances,
                margins,
            },
            rg,
        ))
    }

    // ------------------------------------------------------------------
    // backward

    /// Populate gradients of every `requires_grad` leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Backward(
                "tape already consumed; run a new forward first".into(),
            ));
        }
        if !self.recording {
            return Err(Error::Backward(
                "inference tape has no backward record".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.set_grad(g)?;
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xs = self.shape(*x);
                let geo =
                    ConvGeom::new(xs, self.shape(*w), *stride, *pad).expect("validated in forward");
                let (p, k, cout) = (geo.p(), geo.k(), geo.cout);
                let wv = self.vals(*w);
                let need_x = self.requires_grad(*x);
                let need_w = self.requires_grad(*w);
                let mut dw = vec![0.0; cout * k];
                let mut dx = if need_x {
                    vec![0.0; self.value(*x).len()]
                } else {
                    Vec::new()
                };
                let band = geo.band();
                let mut cols = vec![0.0; k * band * geo.wo];
                let mut dcols = vec![0.0; k * band * geo.wo];
                for bi in 0..xs[0] {
                    let gb = &g[bi * cout * p..(bi + 1) * cout * p];
                    let xb = &self.vals(*x)[bi * geo.in_len()..(bi + 1) * geo.in_len()];
                    if geo.is_pointwise() {
                        if need_w {
                            gemm(cout, p, k, 1.0, gb, Layout::N, xb, Layout::T, 1.0, &mut dw);
                        }
                        if need_x {
                            let dxb = &mut dx[bi * geo.in_len()..(bi + 1) * geo.in_len()];
                            gemm(k, cout, p, 1.0, wv, Layout::T, gb, Layout::N, 0.0, dxb);
                        }
                        continue;
                    }
                    for oy0 in (0..geo.ho).step_by(band) {
                        let oy1 = (oy0 + band).min(geo.ho);
                        let pt = (oy1 - oy0) * geo.wo;
                        let gt = &gb[oy0 * geo.wo..];
                        if need_w {
                            geo.im2col(xb, oy0, oy1, &mut cols);
                            gemm_strided(
                                cout,
                                pt,
                                k,
                                1.0,
                                gt,
                                (p, 1),
                                &cols,
                                (1, pt),
                                1.0,
                                &mut dw,
                                k,
                            );
                        }
                        if need_x {
                            let dxb = &mut dx[bi * geo.in_len()..(bi + 1) * geo.in_len()];
                            gemm_strided(
                                k,
                                cout,
                                pt,
                                1.0,
                                wv,
                                (1, k),
                                gt,
                                (p, 1),
                                0.0,
                                &mut dcols,
                                pt,
                            );
                            geo.col2im(&dcols, oy0, oy1, dxb);
                        }
                    }
                }
                if need_x {
                    accumulate(grads, *x, &dx);
                }
                if need_w {
                    accumulate(grads, *w, &dw);
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; cout];
                        for bi in 0..xs[0] {
                            for (co, d) in db.iter_mut().enumerate() {
                                *d += g[(bi * cout + co) * p..(bi * cout + co + 1) * p]
                                    .iter()
                                    .sum::<f64>();
                            }
                        }
                        accumulate(grads, *b, &db);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let dout = self.shape(*w)[3];
                let rows = xs[0] * xs[1] * xs[2];
                let din = xs[3];
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; rows * din];
                    gemm(
                        rows,
                        dout,
                        din,
                        1.0,
                        g,
                        Layout::N,
                        self.vals(*w),
                        Layout::T,
                        0.0,
                        &mut dx,
                    );
                    accumulate(grads, *x, &dx);
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; din * dout];
                    gemm(
                        din,
                        rows,
                        dout,
                        1.0,
                        self.vals(*x),
                        Layout::T,
                        g,
                        Layout::N,
                        0.0,
                        &mut dw,
                    );
                    accumulate(grads, *w, &dw);
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0; dout];
                        for r in g.chunks(dout.max(1)) {
                            for (d, v) in db.iter_mut().zip(r) {
                                *d += v;
                            }
                        }
                        accumulate(grads, *b, &db);
                    }
                }
            }
            Op::MatmulNt { a, b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (n, d, m) = (sa[2], sa[3], sb[2]);
                let groups = sa[0] * sa[1];
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; groups * n * d];
                    for gi in 0..groups {
                        gemm(
                            n,
                            m,
                            d,
                            1.0,
                            &g[gi * n * m..],
                            Layout::N,
                            &self.vals(*b)[gi * m * d..],
                            Layout::N,
                            0.0,
                            &mut da[gi * n * d..(gi + 1) * n * d],
                        );
                    }
                    accumulate(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; groups * m * d];
                    for gi in 0..groups {
                        gemm(
                            m,
                            n,
                            d,
                            1.0,
                            &g[gi * n * m..],
                            Layout::T,
                            &self.vals(*a)[gi * n * d..],
                            Layout::N,
                            0.0,
                            &mut db[gi * m * d..(gi + 1) * m * d],
                        );
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::Matmul { a, b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (n, k, m) = (sa[2], sa[3], sb[3]);
                let groups = sa[0] * sa[1];
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; groups * n * k];
                    for gi in 0..groups {
                        gemm(
                            n,
                            m,
                            k,
                            1.0,
                            &g[gi * n * m..],
                            Layout::N,
                            &self.vals(*b)[gi * k * m..],
                            Layout::T,
                            0.0,
                            &mut da[gi * n * k..(gi + 1) * n * k],
                        );
                    }
                    accumulate(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; groups * k * m];
                    for gi in 0..groups {
                        gemm(
                            k,
                            n,
                            m,
                            1.0,
                            &self.vals(*a)[gi * n * k..],
                            Layout::T,
                            &g[gi * n * m..],
                            Layout::N,
                            0.0,
                            &mut db[gi * k * m..(gi + 1) * k * m],
                        );
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::Softmax { x, temperature } => {
                let cols = node.value.shape()[3].max(1);
                let y = node.value.values();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..yr.len() {
                        dr[j] = yr[j] * (gr[j] - dot) / temperature;
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::LogSoftmax { x, temperature } => {
                let cols = node.value.shape()[3].max(1);
                let y = node.value.values();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let gs: f64 = gr.iter().sum();
                    for j in 0..yr.len() {
                        dr[j] = (gr[j] - yr[j].exp() * gs) / temperature;
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = self
                    .vals(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, &dx);
            }
            Op::Sigmoid { x } => {
                let dx: Vec<f64> = node
                    .value
                    .values()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| gv * y * (1.0 - y))
                    .collect();
                accumulate(grads, *x, &dx);
            }
            Op::AvgPoolFull { x } => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let mut dx = vec![0.0; self.value(*x).len()];
                if hw > 0 {
                    for (bc, gv) in g.iter().enumerate() {
                        let v = gv / hw as f64;
                        dx[bc * hw..(bc + 1) * hw].iter_mut().for_each(|d| *d = v);
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::AvgPool2d { x, k } => {
                let s = self.shape(*x);
                let (ho, wo) = (s[2] / k, s[3] / k);
                let inv = 1.0 / (k * k) as f64;
                let mut dx = vec![0.0; self.value(*x).len()];
                for bc in 0..s[0] * s[1] {
                    for h in 0..s[2] {
                        for w in 0..s[3] {
                            dx[(bc * s[2] + h) * s[3] + w] =
                                g[(bc * ho + h / k) * wo + w / k] * inv;
                        }
                    }
                }
                accumulate(grads, *x, &dx);
            }
            Op::Gather { x, idx } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (&i, &gv) in idx.iter().zip(g) {
                    dx[i] += gv;
                }
                accumulate(grads, *x, &dx);
            }
            Op::Reshape { x } => accumulate(grads, *x, g),
            Op::Concat { parts, axis } => {
                let s0 = self.shape(parts[0]);
                let outer: usize = s0[..*axis].iter().product();
                let inner: usize = s0[axis + 1..].iter().product();
                let total_chunk = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let start = o * total_chunk + offset;
                            dp.extend_from_slice(&g[start..start + chunk]);
                        }
                        accumulate(grads, p, &dp);
                    }
                    offset += chunk;
                }
            }
            Op::Add { a, b } => {
                if self.requires_grad(*a) {
                    accumulate(grads, *a, g);
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub { a, b } => {
                if self.requires_grad(*a) {
                    accumulate(grads, *a, g);
                }
                if self.requires_grad(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(grads, *b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.requires_grad(*a) {
                    let d: Vec<f64> = g.iter().zip(self.vals(*b)).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, &d);
                }
                if self.requires_grad(*b) {
                    let d: Vec<f64> = g.iter().zip(self.vals(*a)).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, &d);
                }
            }
            Op::Scale { x, k } => {
                let d: Vec<f64> = g.iter().map(|v| v * k).collect();
                accumulate(grads, *x, &d);
            }
            Op::Square { x } => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.vals(*x))
                    .map(|(gv, v)| 2.0 * gv * v)
                    .collect();
                accumulate(grads, *x, &d);
            }
            Op::Sum { x } => {
                let d = vec![g[0]; self.value(*x).len()];
                accumulate(grads, *x, &d);
            }
            Op::Mean { x } => {
                let n = self.value(*x).len();
                if n > 0 {
                    let d = vec![g[0] / n as f64; n];
                    accumulate(grads, *x, &d);
                }
            }
            Op::BceWithLogits { logits, target } => {
                let n = self.value(*logits).len();
                if n == 0 {
                    return;
                }
                let scale = g[0] / n as f64;
                if self.requires_grad(*logits) {
                    let d: Vec<f64> = self
                        .vals(*logits)
                        .iter()
                        .zip(self.vals(*target))
                        .map(|(&s, &t)| (sigmoid(s) - t) * scale)
                        .collect();
                    accumulate(grads, *logits, &d);
                }
                if self.requires_grad(*target) {
                    let d: Vec<f64> = self.vals(*logits).iter().map(|&s| -s * scale).collect();
                    accumulate(grads, *target, &d);
                }
            }
            Op::Discriminative {
                emb,
                instances,
                margins,
            } => {
                let mut d = vec![0.0; self.value(*emb).len()];
                disc_forward_backward(
                    self.vals(*emb),
                    self.shape(*emb),
                    instances,
                    *margins,
                    g[0],
                    &mut d,
                );
                accumulate(grads, *emb, &d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(d).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d.to_vec()),
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {t}"
        )));
    }
    Ok(())
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Per-element binary cross-entropy of logit `s` against probability `t`.
#[inline]
pub fn bce_logit(s: f64, t: f64) -> f64 {
    s.max(0.0) - s * t + (-s.abs()).exp().ln_1p()
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row
        .iter()
        .map(|v| ((v - max) / temperature).exp())
        .sum::<f64>()
        .ln();
    for v in row.iter_mut() {
        *v = (*v - max) / temperature - lse;
    }
}

const NORM_EPS: f64 = 1e-12;

/// Target size in f64s of one im2col tile.
const TILE_ELEMS: usize = 1 << 15;

/// Forward value of the discriminative loss; when `upstream != 0` also
/// accumulates its gradient (scaled by `upstream`) into `grad`.
fn disc_forward_backward(
    emb: &[f64],
    shape: [usize; 4],
    instances: &[InstanceSets],
    m: DiscriminativeMargins,
    upstream: f64,
    grad: &mut [f64],
) -> f64 {
    let [batch, e, h, w] = shape;
    let hw = h * w;
    let want_grad = upstream != 0.0 && !grad.is_empty();
    let inv_b = if batch == 0 { 0.0 } else { 1.0 / batch as f64 };
    let mut total = 0.0;
    for (b, sets) in instances.iter().enumerate() {
        let sets: Vec<&Vec<usize>> = sets.iter().filter(|s| !s.is_empty()).collect();
        let k = sets.len();
        if k == 0 {
            continue;
        }
        let base = b * e * hw;
        let at = |p: usize, d: usize| emb[base + d * hw + p];
        let means: Vec<Vec<f64>> = sets
            .iter()
            .map(|s| {
                let mut mu = vec![0.0; e];
                for &p in s.iter() {
                    for (d, m) in mu.iter_mut().enumerate() {
                        *m += at(p, d);
                    }
                }
                mu.iter_mut().for_each(|v| *v /= s.len() as f64);
                mu
            })
            .collect();
        let mut g_mu = vec![vec![0.0; e]; k];
        let coef_out = upstream * inv_b;

        let mut var_term = 0.0;
        for (ki, s) in sets.iter().enumerate() {
            let coef = 1.0 / (k as f64 * s.len() as f64);
            for &p in s.iter() {
                let diff: Vec<f64> = (0..e).map(|d| at(p, d) - means[ki][d]).collect();
                let n = (diff.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
                let r = (n - m.pull).max(0.0);
                var_term += coef * r * r;
                if want_grad && r > 0.0 {
                    for d in 0..e {
                        let gd = coef_out * coef * 2.0 * r * diff[d] / n;
                        grad[base + d * hw + p] += gd;
                        g_mu[ki][d] -= gd;
                    }
                }
            }
        }

        let mut dist_term = 0.0;
        if k > 1 {
            let coef = 1.0 / (k as f64 * (k as f64 - 1.0));
            for a in 0..k {
                for c in 0..k {
                    if a == c {
                        continue;
                    }
                    let diff: Vec<f64> = (0..e).map(|d| means[a][d] - means[c][d]).collect();
                    let n = (diff.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
                    let r = (m.push - n).max(0.0);
                    dist_term += coef * r * r;
                    if want_grad && r > 0.0 {
                        for d in 0..e {
                            let gd = -coef_out * coef * 2.0 * r * diff[d] / n;
                            g_mu[a][d] += gd;
                            g_mu[c][d] -= gd;
                        }
                    }
                }
            }
        }

        let mut reg_term = 0.0;
        for (ki, mu) in means.iter().enumerate() {
            let n = (mu.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
            reg_term += n / k as f64;
            if want_grad {
                for d in 0..e {
                    g_mu[ki][d] += coef_out * m.reg * mu[d] / (n * k as f64);
                }
            }
        }

        if want_grad {
            for (ki, s) in sets.iter().enumerate() {
                let inv = 1.0 / s.len() as f64;
                for &p in s.iter() {
                    for d in 0..e {
                        grad[base + d * hw + p] += g_mu[ki][d] * inv;
                    }
                }
            }
        }
        total += var_term + dist_term + m.reg * reg_term;
    }
    total * inv_b
}

/// Geometry of one convolution, shared by forward and backward.
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(xs: [usize; 4], ws: [usize; 4], stride: usize, pad: usize) -> Result<Self> {
        let (h, w) = (xs[2] + 2 * pad, xs[3] + 2 * pad);
        if ws[2] > h || ws[3] > w || ws[2] == 0 || ws[3] == 0 {
            return Err(Error::shape(
                "conv2d kernel larger than padded input",
                &xs,
                &ws,
            ));
        }
        Ok(Self {
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho: (h - ws[2]) / stride + 1,
            wo: (w - ws[3]) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` is inside the row.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let (s, pad) = (self.stride, self.pad);
        let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(s) };
        // need ox*s + kx - pad <= w - 1
        let hi = if self.w + pad > kx {
            ((self.w + pad - kx - 1) / s + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Rows of output pixels handled per im2col tile, sized so the tile
    /// stays cache resident.
    fn band(&self) -> usize {
        (TILE_ELEMS / (self.k() * self.wo).max(1)).clamp(1, self.ho.max(1))
    }

    /// Columns for output rows `oy0..oy1`, laid out `k x ((oy1-oy0)*wo)`.
    fn im2col(&self, x: &[f64], oy0: usize, oy1: usize, cols: &mut [f64]) {
        let p = (oy1 - oy0) * self.wo;
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * p;
                    let dst = &mut cols[row..row + p];
                    let (lo, hi) = self.valid_ox(kx);
                    for oy in oy0..oy1 {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[(oy - oy0) * self.wo..(oy - oy0 + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        let src = &x[(c * self.h + iy as usize) * self.w
                            ..(c * self.h + iy as usize + 1) * self.w];
                        let first = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (v, &sv) in line[lo..hi]
                                .iter_mut()
                                .zip(src[first..].iter().step_by(self.stride))
                            {
                                *v = sv;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], oy0: usize, oy1: usize, dx: &mut [f64]) {
        let p = (oy1 - oy0) * self.wo;
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * p;
                    let (lo, hi) = self.valid_ox(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base =
                            (c * self.h + iy as usize) * self.w + lo * self.stride + kx - self.pad;
                        let at = row + (oy - oy0) * self.wo;
                        let src = &cols[at + lo..at + hi];
                        if self.stride == 1 {
                            for (d, &v) in dx[base..base + hi - lo].iter_mut().zip(src) {
                                *d += v;
                            }
                        } else {
                            for (d, &v) in dx[base..].iter_mut().step_by(self.stride).zip(src) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
}
