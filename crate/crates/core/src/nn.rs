//! Minimal reverse-mode differentiation over `(channels, height, width)`
//! tensors in f64, with just the layers the score network needs.
//!
//! A [`Graph`] records one forward pass for one example. Parameters live in a
//! [`ParamStore`] and are read in place; `backward` accumulates parameter
//! gradients into a caller-supplied buffer so per-example passes can be summed
//! in a fixed order.

use rand::Rng;

pub type NodeId = usize;

/// Dense `(c, h, w)` tensor, row-major. Vectors are `(n, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Self { c, h, w, data }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_vec(n, 1, 1, data)
    }

    fn dims(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    /// Registers a parameter drawn from `U(-bound, bound)`.
    pub fn uniform<R: Rng>(&mut self, name: String, shape: Vec<usize>, bound: f64, rng: &mut R) -> usize {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.push(name, shape, data)
    }

    pub fn zeros(&mut self, name: String, shape: Vec<usize>) -> usize {
        let n = shape.iter().product();
        self.push(name, shape, vec![0.0; n])
    }

    fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>) -> usize {
        self.params.push(Param { name, shape, data });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.data.len()]).collect()
    }
}

enum Op {
    Input,
    Param(usize),
    Conv { x: NodeId, w: usize, b: usize, cout: usize, k: usize },
    Linear { x: NodeId, w: usize, b: Option<usize>, out: usize },
    Add(NodeId, NodeId),
    PlaneBias { x: NodeId, bias: NodeId },
    Silu(NodeId),
    AvgPool2(NodeId),
    Upsample2(NodeId),
    Concat(NodeId, NodeId),
    Crop { x: NodeId },
    ScaleShift { x: NodeId, scale: f64 },
}

struct Node {
    op: Op,
    value: Tensor,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, t)
    }

    /// Exposes a parameter as a vector node (used for learned embeddings).
    pub fn param(&mut self, p: usize) -> NodeId {
        let t = Tensor::vector(self.store.params[p].data.clone());
        self.push(Op::Param(p), t)
    }

    /// `k x k` convolution with stride 1 and zero "same" padding.
    /// Weight shape `(cout, cin, k, k)`, bias `(cout)`.
    pub fn conv(&mut self, x: NodeId, w: usize, b: usize) -> NodeId {
        let shape = &self.store.params[w].shape;
        let (cout, cin, k) = (shape[0], shape[1], shape[2]);
        let xv = &self.nodes[x].value;
        assert_eq!(xv.c, cin, "conv input channels");
        let (h, wd) = (xv.h, xv.w);
        let hw = h * wd;
        let kk = cin * k * k;
        let cols = im2col(xv, k);
        let mut out = vec![0.0; cout * hw];
        let bias = &self.store.params[b].data;
        for (o, row) in out.chunks_exact_mut(hw).enumerate() {
            row.fill(bias[o]);
        }
        gemm(
            cout,
            kk,
            hw,
            &self.store.params[w].data,
            (kk, 1),
            cols.as_deref().unwrap_or(&xv.data),
            (hw, 1),
            &mut out,
            hw,
        );
        self.push(
            Op::Conv { x, w, b, cout, k },
            Tensor::from_vec(cout, h, wd, out),
        )
    }

    /// `W x + b` on a vector node. Weight shape `(out, in)`.
    pub fn linear(&mut self, x: NodeId, w: usize, b: Option<usize>) -> NodeId {
        let shape = &self.store.params[w].shape;
        let (out, inp) = (shape[0], shape[1]);
        let xv = &self.nodes[x].value.data;
        assert_eq!(xv.len(), inp, "linear input width");
        let wd = &self.store.params[w].data;
        let mut y: Vec<f64> = match b {
            Some(b) => self.store.params[b].data.clone(),
            None => vec![0.0; out],
        };
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &wd[o * inp..(o + 1) * inp];
            *yo += row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
        }
        self.push(Op::Linear { x, w, b, out }, Tensor::vector(y))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(av.dims(), bv.dims(), "add shapes");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(av.c, av.h, av.w, data);
        self.push(Op::Add(a, b), t)
    }

    /// Adds a `(c * h)` vector to every time column: `x[c, y, t] + bias[c * h + y]`.
    pub fn plane_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let bv = &self.nodes[bias].value.data;
        assert_eq!(bv.len(), xv.c * xv.h, "plane bias width");
        let mut data = xv.data.clone();
        for (row, &b) in data.chunks_exact_mut(xv.w).zip(bv) {
            row.iter_mut().for_each(|v| *v += b);
        }
        let t = Tensor::from_vec(xv.c, xv.h, xv.w, data);
        self.push(Op::PlaneBias { x, bias }, t)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let data = xv.data.iter().map(|&v| v * sigmoid(v)).collect();
        let t = Tensor::from_vec(xv.c, xv.h, xv.w, data);
        self.push(Op::Silu(x), t)
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        assert!(xv.h % 2 == 0 && xv.w % 2 == 0, "pooling needs even extents");
        let (h2, w2) = (xv.h / 2, xv.w / 2);
        let mut out = Tensor::zeros(xv.c, h2, w2);
        for c in 0..xv.c {
            for y in 0..h2 {
                for t in 0..w2 {
                    let at = |dy: usize, dt: usize| xv.data[(c * xv.h + 2 * y + dy) * xv.w + 2 * t + dt];
                    out.data[(c * h2 + y) * w2 + t] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                }
            }
        }
        self.push(Op::AvgPool2(x), out)
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let (h2, w2) = (xv.h * 2, xv.w * 2);
        let mut out = Tensor::zeros(xv.c, h2, w2);
        for c in 0..xv.c {
            for y in 0..h2 {
                for t in 0..w2 {
                    out.data[(c * h2 + y) * w2 + t] = xv.data[(c * xv.h + y / 2) * xv.w + t / 2];
                }
            }
        }
        self.push(Op::Upsample2(x), out)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!((av.h, av.w), (bv.h, bv.w), "concat extents");
        let mut data = av.data.clone();
        data.extend_from_slice(&bv.data);
        let t = Tensor::from_vec(av.c + bv.c, av.h, av.w, data);
        self.push(Op::Concat(a, b), t)
    }

    /// Keeps the leading `h x w` window of every channel.
    pub fn crop(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        assert!(h <= xv.h && w <= xv.w, "crop larger than input");
        let mut out = Tensor::zeros(xv.c, h, w);
        for c in 0..xv.c {
            for y in 0..h {
                let src = (c * xv.h + y) * xv.w;
                out.data[(c * h + y) * w..(c * h + y + 1) * w].copy_from_slice(&xv.data[src..src + w]);
            }
        }
        self.push(Op::Crop { x }, out)
    }

    /// `scale * x + shift` with a constant scalar scale and constant tensor shift.
    pub fn scale_shift(&mut self, x: NodeId, scale: f64, shift: &[f64]) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(shift.len(), xv.data.len(), "shift length");
        let data = xv.data.iter().zip(shift).map(|(v, s)| scale * v + s).collect();
        let t = Tensor::from_vec(xv.c, xv.h, xv.w, data);
        self.push(Op::ScaleShift { x, scale }, t)
    }

    /// Back-propagates `seed` (the gradient of a scalar loss with respect to
    /// `out`) and adds parameter gradients into `param_grads`.
    pub fn backward(&self, out: NodeId, seed: &[f64], param_grads: &mut [Vec<f64>]) {
        assert_eq!(seed.len(), self.nodes[out].value.data.len(), "seed length");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out + 1];
        grads[out] = Some(seed.to_vec());
        for id in (0..=out).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match node.op {
                Op::Input => {}
                Op::Param(p) => add_into(&mut param_grads[p], &g),
                Op::Conv { x, w, b, cout, k } => {
                    let xv = &self.nodes[x].value;
                    let hw = xv.h * xv.w;
                    let kk = xv.c * k * k;
                    let cols = im2col(xv, k);
                    let cols = cols.as_deref().unwrap_or(&xv.data);
                    // dW += dOut · colsᵀ
                    gemm(cout, hw, kk, &g, (hw, 1), cols, (1, hw), &mut param_grads[w], kk);
                    for (o, row) in g.chunks_exact(hw).enumerate() {
                        param_grads[b][o] += row.iter().sum::<f64>();
                    }
                    // dcols = Wᵀ · dOut
                    let mut dcols = vec![0.0; kk * hw];
                    gemm(kk, cout, hw, &self.store.params[w].data, (1, kk), &g, (hw, 1), &mut dcols, hw);
                    let dx = grad_slot(&mut grads, x, xv.data.len());
                    if k == 1 {
                        add_into(dx, &dcols);
                    } else {
                        col2im_add(&dcols, xv.dims(), k, dx);
                    }
                }
                Op::Linear { x, w, b, out } => {
                    let xv = &self.nodes[x].value.data;
                    let inp = xv.len();
                    let wg = &mut param_grads[w];
                    for (o, &go) in g.iter().enumerate().take(out) {
                        for (wi, &xi) in wg[o * inp..(o + 1) * inp].iter_mut().zip(xv) {
                            *wi += go * xi;
                        }
                    }
                    if let Some(b) = b {
                        add_into(&mut param_grads[b], &g);
                    }
                    let wd = &self.store.params[w].data;
                    let dx = grad_slot(&mut grads, x, inp);
                    for (o, &go) in g.iter().enumerate() {
                        for (d, &wv) in dx.iter_mut().zip(&wd[o * inp..(o + 1) * inp]) {
                            *d += go * wv;
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(grad_slot(&mut grads, a, g.len()), &g);
                    add_into(grad_slot(&mut grads, b, g.len()), &g);
                }
                Op::PlaneBias { x, bias } => {
                    let w = node.value.w;
                    let nb = self.nodes[bias].value.data.len();
                    let db = grad_slot(&mut grads, bias, nb);
                    for (d, row) in db.iter_mut().zip(g.chunks_exact(w)) {
                        *d += row.iter().sum::<f64>();
                    }
                    add_into(grad_slot(&mut grads, x, g.len()), &g);
                }
                Op::Silu(x) => {
                    let xv = &self.nodes[x].value.data;
                    let dx = grad_slot(&mut grads, x, g.len());
                    for ((d, &gv), &v) in dx.iter_mut().zip(&g).zip(xv) {
                        let s = sigmoid(v);
                        *d += gv * s * (1.0 + v * (1.0 - s));
                    }
                }
                Op::AvgPool2(x) => {
                    let xv = &self.nodes[x].value;
                    let (h2, w2) = (node.value.h, node.value.w);
                    let dx = grad_slot(&mut grads, x, xv.data.len());
                    for c in 0..xv.c {
                        for y in 0..h2 {
                            for t in 0..w2 {
                                let gq = 0.25 * g[(c * h2 + y) * w2 + t];
                                for dy in 0..2 {
                                    let base = (c * xv.h + 2 * y + dy) * xv.w + 2 * t;
                                    dx[base] += gq;
                                    dx[base + 1] += gq;
                                }
                            }
                        }
                    }
                }
                Op::Upsample2(x) => {
                    let xv = &self.nodes[x].value;
                    let (h2, w2) = (node.value.h, node.value.w);
                    let dx = grad_slot(&mut grads, x, xv.data.len());
                    for c in 0..xv.c {
                        for y in 0..h2 {
                            for t in 0..w2 {
                                dx[(c * xv.h + y / 2) * xv.w + t / 2] += g[(c * h2 + y) * w2 + t];
                            }
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let na = self.nodes[a].value.data.len();
                    add_into(grad_slot(&mut grads, a, na), &g[..na]);
                    add_into(grad_slot(&mut grads, b, g.len() - na), &g[na..]);
                }
                Op::Crop { x } => {
                    let xv = &self.nodes[x].value;
                    let (h, w) = (node.value.h, node.value.w);
                    let dx = grad_slot(&mut grads, x, xv.data.len());
                    for c in 0..xv.c {
                        for y in 0..h {
                            let dst = (c * xv.h + y) * xv.w;
                            add_into(&mut dx[dst..dst + w], &g[(c * h + y) * w..(c * h + y + 1) * w]);
                        }
                    }
                }
                Op::ScaleShift { x, scale } => {
                    let dx = grad_slot(&mut grads, x, g.len());
                    for (d, gv) in dx.iter_mut().zip(&g) {
                        *d += scale * gv;
                    }
                }
            }
        }
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Patch matrix `(c·k·k) x (h·w)` for a same-padded `k x k` convolution.
/// `None` for `k = 1`, where the input itself is the patch matrix.
fn im2col(x: &Tensor, k: usize) -> Option<Vec<f64>> {
    if k == 1 {
        return None;
    }
    let (c, h, w) = x.dims();
    let p = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - p;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = (ch * h + sy as usize) * w;
                    let dst = row + y * w;
                    let dx = kx as isize - p;
                    let (lo, hi) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize) as usize);
                    for t in lo..hi {
                        cols[dst + t] = x.data[src + (t as isize + dx) as usize];
                    }
                }
            }
        }
    }
    Some(cols)
}

fn col2im_add(cols: &[f64], (c, h, w): (usize, usize, usize), k: usize, dx: &mut [f64]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - p;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = (ch * h + sy as usize) * w;
                    let src = row + y * w;
                    let d = kx as isize - p;
                    let (lo, hi) = ((-d).max(0) as usize, (w as isize - d).min(w as isize) as usize);
                    for t in lo..hi {
                        dx[dst + (t as isize + d) as usize] += cols[src + t];
                    }
                }
            }
        }
    }
}

/// `C[m x n] += A[m x k] · B[k x n]`, with `(row, col)` strides for A and B
/// and a row stride for C.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + k.saturating_sub(1) * csa || k == 0);
    assert!(b.len() > k.saturating_sub(1) * rsb + (n - 1) * csb || k == 0);
    assert!(c.len() >= (m - 1) * rsc + n);
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}
