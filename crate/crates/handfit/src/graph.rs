//! Reverse-mode autodiff over [`Tensor`]s on a flat tape.
//!
//! Every forward pass builds a fresh `Graph`; node ids are indices into the
//! tape, which is already in topological order, so backward is a single
//! reverse sweep. Parent gradients are only computed for nodes that can reach
//! a tracked leaf, which is what lets frozen model halves skip their weight
//! gradients during training.

use crate::tensor::{
    avg_pool, avg_pool_grad, conv2d, conv2d_grad_input, conv2d_grad_weight, filter2d_clamp,
    filter2d_clamp_grad, matmul, matmul_nt, matmul_tn, upsample_nearest, upsample_nearest_grad,
    Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId(usize);

type BackFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<VarId>,
    requires_grad: bool,
    backward: Option<BackFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `id`, or `None` if the node never
    /// influenced the loss (or was a constant).
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, parents: Vec<VarId>, backward: Option<BackFn>) -> VarId {
        let requires_grad =
            backward.is_some() && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, parents, requires_grad, backward });
        VarId(self.nodes.len() - 1)
    }

    /// Tracked input: gradients are retained for it.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.nodes.push(Node { value, parents: vec![], requires_grad: true, backward: None });
        VarId(self.nodes.len() - 1)
    }

    /// Untracked input: no gradient flows into it or through its use as a
    /// parameter, though gradients still flow through ops applied to it.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.nodes.push(Node { value, parents: vec![], requires_grad: false, backward: None });
        VarId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Reverse sweep from a scalar root. Returns gradients for every node on
    /// the path; callers read them out by `VarId`.
    pub fn backward(&self, root: VarId) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad && id != root.0 {
                continue;
            }
            let Some(g) = grads[id].clone() else { continue };
            let Some(back) = &node.backward else { continue };
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> =
                node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let pgrads = back(&g, &parent_vals, &node.value, &needs);
            assert_eq!(pgrads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(pgrads) {
                if let Some(pg) = pg {
                    match &mut grads[p.0] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
            // Interior gradients are kept; graphs here are small enough.
        }
        Gradients { grads }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).add(self.value(b));
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _, _, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| g.clone()),
                ]
            })),
        )
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).sub(self.value(b));
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _, _, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| g.scale(-1.0)),
                ]
            })),
        )
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.value(a).mul(self.value(b));
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, pv, _, needs| {
                vec![
                    needs[0].then(|| g.mul(pv[1])),
                    needs[1].then(|| g.mul(pv[0])),
                ]
            })),
        )
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.value(a).scale(c);
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, _, needs| vec![needs[0].then(|| g.scale(c))])),
        )
    }

    pub fn silu(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, pv, _, needs| {
                vec![needs[0].then(|| {
                    g.zip_map(pv[0], |gv, x| {
                        let s = sigmoid(x);
                        gv * (s + x * s * (1.0 - s))
                    })
                })]
            })),
        )
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, pv, _, needs| {
                vec![needs[0].then(|| g.zip_map(pv[0], |gv, x| if x > 0.0 { gv } else { 0.0 }))]
            })),
        )
    }

    /// `sqrt(x + eps)`, defined for `x + eps > 0`.
    pub fn sqrt_eps(&mut self, a: VarId, eps: f64) -> VarId {
        let v = self.value(a).map(|x| (x + eps).sqrt());
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, _, out, needs| {
                vec![needs[0].then(|| g.zip_map(out, |gv, y| gv * 0.5 / y))]
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, pv, _, needs| {
                vec![needs[0].then(|| Tensor::filled(pv[0].shape(), g.item()))]
            })),
        )
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let n = self.value(a).len() as f64;
        let v = Tensor::scalar(self.value(a).sum() / n);
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, pv, _, needs| {
                vec![needs[0].then(|| Tensor::filled(pv[0].shape(), g.item() / n))]
            })),
        )
    }

    /// Scalar maximum; gradient routes to the first argmax element.
    pub fn max_all(&mut self, a: VarId) -> VarId {
        let data = self.value(a).data();
        let mut best = 0usize;
        for (i, &x) in data.iter().enumerate() {
            if x > data[best] {
                best = i;
            }
        }
        let v = Tensor::scalar(data[best]);
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, pv, _, needs| {
                vec![needs[0].then(|| {
                    let mut t = Tensor::zeros(pv[0].shape());
                    t.data_mut()[best] = g.item();
                    t
                })]
            })),
        )
    }

    /// `x / (s + eps)` with a scalar variable `s`.
    pub fn div_scalar_eps(&mut self, x: VarId, s: VarId, eps: f64) -> VarId {
        let sv = self.value(s).item();
        let v = self.value(x).scale(1.0 / (sv + eps));
        self.push(
            v,
            vec![x, s],
            Some(Box::new(move |g, pv, _, needs| {
                let d = pv[1].item() + eps;
                vec![
                    needs[0].then(|| g.scale(1.0 / d)),
                    needs[1].then(|| {
                        let acc: f64 =
                            g.data().iter().zip(pv[0].data()).map(|(&gv, &xv)| gv * xv).sum();
                        Tensor::scalar(-acc / (d * d))
                    }),
                ]
            })),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = matmul(self.value(a), self.value(b));
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, pv, _, needs| {
                vec![
                    needs[0].then(|| matmul_nt(g, pv[1])),
                    needs[1].then(|| matmul_tn(pv[0], g)),
                ]
            })),
        )
    }

    /// `x [n,k] * w [k,m] + b [m]` broadcast over rows.
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        let mut v = matmul(self.value(x), self.value(w));
        let m = v.shape()[1];
        let bias = self.value(b);
        assert_eq!(bias.shape(), [m]);
        for row in v.data_mut().chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(bias.data()) {
                *o += bv;
            }
        }
        self.push(
            v,
            vec![x, w, b],
            Some(Box::new(move |g, pv, _, needs| {
                vec![
                    needs[0].then(|| matmul_nt(g, pv[1])),
                    needs[1].then(|| matmul_tn(pv[0], g)),
                    needs[2].then(|| {
                        let mut gb = vec![0.0; m];
                        for row in g.data().chunks(m) {
                            for (o, &gv) in gb.iter_mut().zip(row) {
                                *o += gv;
                            }
                        }
                        Tensor::new(&[m], gb)
                    }),
                ]
            })),
        )
    }

    /// Row-wise softmax of `[n,m]`.
    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let x = self.value(a);
        let (n, m) = (x.shape()[0], x.shape()[1]);
        let mut v = vec![0.0; n * m];
        for i in 0..n {
            let row = &x.data()[i * m..(i + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &xv) in v[i * m..(i + 1) * m].iter_mut().zip(row) {
                *o = (xv - mx).exp();
                z += *o;
            }
            for o in &mut v[i * m..(i + 1) * m] {
                *o /= z;
            }
        }
        self.push(
            Tensor::new(&[n, m], v),
            vec![a],
            Some(Box::new(move |g, _, out, needs| {
                vec![needs[0].then(|| {
                    let mut gx = vec![0.0; n * m];
                    for i in 0..n {
                        let y = &out.data()[i * m..(i + 1) * m];
                        let gr = &g.data()[i * m..(i + 1) * m];
                        let dot: f64 = y.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..m {
                            gx[i * m + j] = y[j] * (gr[j] - dot);
                        }
                    }
                    Tensor::new(&[n, m], gx)
                })]
            })),
        )
    }

    /// Multiply each row of `[n,m]` by a fixed 0/1 gate. Zeroed rows pass no
    /// gradient, which is what makes gated paths exactly inert.
    pub fn gate_rows(&mut self, a: VarId, gate: &[bool]) -> VarId {
        let x = self.value(a);
        let (n, m) = (x.shape()[0], x.shape()[1]);
        assert_eq!(gate.len(), n, "gate length vs rows");
        let gate = gate.to_vec();
        let mut v = x.clone();
        for (i, row) in v.data_mut().chunks_mut(m).enumerate() {
            if !gate[i] {
                row.fill(0.0);
            }
        }
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, _, needs| {
                vec![needs[0].then(|| {
                    let mut gx = g.clone();
                    for (i, row) in gx.data_mut().chunks_mut(m).enumerate() {
                        if !gate[i] {
                            row.fill(0.0);
                        }
                    }
                    gx
                })]
            })),
        )
    }

    /// LayerNorm over the last axis of `[n,d]` with learned affine.
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> VarId {
        let xv = self.value(x);
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(self.value(gamma).shape(), [d]);
        assert_eq!(self.value(beta).shape(), [d]);
        let gam = self.value(gamma).clone();
        let bet = self.value(beta).clone();
        let mut out = vec![0.0; n * d];
        let mut stats = Vec::with_capacity(n); // (mean, inv_std)
        for i in 0..n {
            let row = &xv.data()[i * d..(i + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            stats.push((mu, istd));
            for j in 0..d {
                out[i * d + j] = (row[j] - mu) * istd * gam.data()[j] + bet.data()[j];
            }
        }
        self.push(
            Tensor::new(&[n, d], out),
            vec![x, gamma, beta],
            Some(Box::new(move |g, pv, _, needs| {
                let xv = pv[0];
                let df = d as f64;
                let need_x = needs[0];
                let mut gx = vec![0.0; n * d];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for i in 0..n {
                    let (mu, istd) = stats[i];
                    let row = &xv.data()[i * d..(i + 1) * d];
                    let gr = &g.data()[i * d..(i + 1) * d];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (row[j] - mu) * istd;
                        let dxhat = gr[j] * gam.data()[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        gg[j] += gr[j] * xhat;
                        gb[j] += gr[j];
                    }
                    if need_x {
                        for j in 0..d {
                            let xhat = (row[j] - mu) * istd;
                            let dxhat = gr[j] * gam.data()[j];
                            gx[i * d + j] =
                                istd * (dxhat - sum_dxhat / df - xhat * sum_dxhat_xhat / df);
                        }
                    }
                }
                vec![
                    need_x.then(|| Tensor::new(&[n, d], gx)),
                    needs[1].then(|| Tensor::new(&[d], gg)),
                    needs[2].then(|| Tensor::new(&[d], gb)),
                ]
            })),
        )
    }

    // ---- conv / spatial ----

    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId, stride: usize, pad: usize) -> VarId {
        let v = conv2d(self.value(x), self.value(w), self.value(b), stride, pad);
        self.push(
            v,
            vec![x, w, b],
            Some(Box::new(move |g, pv, _, needs| {
                let x_shape = pv[0].shape().to_vec();
                let w_shape = pv[1].shape().to_vec();
                let mut gw = None;
                let mut gb = None;
                if needs[1] || needs[2] {
                    let (w_, b_) = conv2d_grad_weight(g, pv[0], stride, pad, &w_shape);
                    gw = Some(w_);
                    gb = Some(b_);
                }
                vec![
                    needs[0].then(|| conv2d_grad_input(g, pv[1], stride, pad, &x_shape)),
                    if needs[1] { gw } else { None },
                    if needs[2] { gb } else { None },
                ]
            })),
        )
    }

    pub fn avg_pool(&mut self, x: VarId, factor: usize) -> VarId {
        let v = avg_pool(self.value(x), factor);
        self.push(
            v,
            vec![x],
            Some(Box::new(move |g, _, _, needs| {
                vec![needs[0].then(|| avg_pool_grad(g, factor))]
            })),
        )
    }

    pub fn upsample_nearest(&mut self, x: VarId, factor: usize) -> VarId {
        let v = upsample_nearest(self.value(x), factor);
        self.push(
            v,
            vec![x],
            Some(Box::new(move |g, _, _, needs| {
                vec![needs[0].then(|| upsample_nearest_grad(g, factor))]
            })),
        )
    }

    pub fn concat_channels(&mut self, a: VarId, b: VarId) -> VarId {
        let (av, bv) = (self.value(a), self.value(b));
        let (c1, h, w) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let c2 = bv.shape()[0];
        assert_eq!(&bv.shape()[1..], &[h, w]);
        let mut data = Vec::with_capacity((c1 + c2) * h * w);
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        self.push(
            Tensor::new(&[c1 + c2, h, w], data),
            vec![a, b],
            Some(Box::new(move |g, _, _, needs| {
                let split = c1 * h * w;
                vec![
                    needs[0].then(|| Tensor::new(&[c1, h, w], g.data()[..split].to_vec())),
                    needs[1].then(|| Tensor::new(&[c2, h, w], g.data()[split..].to_vec())),
                ]
            })),
        )
    }

    /// Broadcast-add a per-channel vector over the spatial grid of `[c,h,w]`.
    pub fn add_channel_vec(&mut self, x: VarId, v: VarId) -> VarId {
        let xv = self.value(x);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(self.value(v).shape(), [c]);
        let vec_ = self.value(v).clone();
        let mut out = xv.clone();
        for ch in 0..c {
            let vv = vec_.data()[ch];
            for o in &mut out.data_mut()[ch * h * w..(ch + 1) * h * w] {
                *o += vv;
            }
        }
        self.push(
            out,
            vec![x, v],
            Some(Box::new(move |g, _, _, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| {
                        let mut gv = vec![0.0; c];
                        for ch in 0..c {
                            gv[ch] = g.data()[ch * h * w..(ch + 1) * h * w].iter().sum();
                        }
                        Tensor::new(&[c], gv)
                    }),
                ]
            })),
        )
    }

    /// `[c,h,w]` feature map to `[h*w, c]` token rows (row-major spatial order).
    pub fn chw_to_tokens(&mut self, x: VarId) -> VarId {
        let xv = self.value(x);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = vec![0.0; h * w * c];
        for ch in 0..c {
            for p in 0..h * w {
                out[p * c + ch] = xv.data()[ch * h * w + p];
            }
        }
        self.push(
            Tensor::new(&[h * w, c], out),
            vec![x],
            Some(Box::new(move |g, _, _, needs| {
                vec![needs[0].then(|| {
                    let mut gx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for p in 0..h * w {
                            gx[ch * h * w + p] = g.data()[p * c + ch];
                        }
                    }
                    Tensor::new(&[c, h, w], gx)
                })]
            })),
        )
    }

    /// Inverse of [`Graph::chw_to_tokens`].
    pub fn tokens_to_chw(&mut self, x: VarId, h: usize, w: usize) -> VarId {
        let xv = self.value(x);
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(n, h * w);
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for p in 0..n {
                out[ch * h * w + p] = xv.data()[p * c + ch];
            }
        }
        self.push(
            Tensor::new(&[c, h, w], out),
            vec![x],
            Some(Box::new(move |g, _, _, needs| {
                vec![needs[0].then(|| {
                    let mut gx = vec![0.0; n * c];
                    for ch in 0..c {
                        for p in 0..n {
                            gx[p * c + ch] = g.data()[ch * h * w + p];
                        }
                    }
                    Tensor::new(&[n, c], gx)
                })]
            })),
        )
    }

    pub fn select_row(&mut self, x: VarId, row: usize) -> VarId {
        let xv = self.value(x);
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        assert!(row < n);
        let v = Tensor::new(&[1, d], xv.data()[row * d..(row + 1) * d].to_vec());
        self.push(
            v,
            vec![x],
            Some(Box::new(move |g, _, _, needs| {
                vec![needs[0].then(|| {
                    let mut gx = Tensor::zeros(&[n, d]);
                    gx.data_mut()[row * d..(row + 1) * d].copy_from_slice(g.data());
                    gx
                })]
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let d = self.value(parts[0]).shape()[1];
        let mut rows = Vec::new();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.shape()[1], d);
            rows.push(v.shape()[0]);
            data.extend_from_slice(v.data());
        }
        let total: usize = rows.iter().sum();
        self.push(
            Tensor::new(&[total, d], data),
            parts.to_vec(),
            Some(Box::new(move |g, _, _, needs| {
                let mut out = Vec::with_capacity(rows.len());
                let mut off = 0;
                for (i, &r) in rows.iter().enumerate() {
                    out.push(
                        needs[i].then(|| Tensor::new(&[r, d], g.data()[off..off + r * d].to_vec())),
                    );
                    off += r * d;
                }
                out
            })),
        )
    }

    // ---- image-side ops used by the edge loss ----

    /// Luma projection of an `[h,w,3]` image with the usual BT.601 weights.
    pub fn rgb_to_gray(&mut self, x: VarId) -> VarId {
        const W: [f64; 3] = [0.299, 0.587, 0.114];
        let xv = self.value(x);
        let (h, w) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(xv.shape()[2], 3);
        let mut out = vec![0.0; h * w];
        for p in 0..h * w {
            out[p] = W[0] * xv.data()[p * 3] + W[1] * xv.data()[p * 3 + 1] + W[2] * xv.data()[p * 3 + 2];
        }
        self.push(
            Tensor::new(&[h, w], out),
            vec![x],
            Some(Box::new(move |g, _, _, needs| {
                vec![needs[0].then(|| {
                    let mut gx = vec![0.0; h * w * 3];
                    for p in 0..h * w {
                        for ch in 0..3 {
                            gx[p * 3 + ch] = g.data()[p] * W[ch];
                        }
                    }
                    Tensor::new(&[h, w, 3], gx)
                })]
            })),
        )
    }

    /// Crop rows `y0..y1`, cols `x0..x1` from an `[h,w]` map (half-open).
    pub fn crop_hw(&mut self, x: VarId, y0: usize, x0: usize, y1: usize, x1: usize) -> VarId {
        let xv = self.value(x);
        let (h, w) = (xv.shape()[0], xv.shape()[1]);
        assert!(y0 < y1 && x0 < x1 && y1 <= h && x1 <= w, "bad crop");
        let (ch, cw) = (y1 - y0, x1 - x0);
        let mut out = vec![0.0; ch * cw];
        for y in 0..ch {
            out[y * cw..(y + 1) * cw]
                .copy_from_slice(&xv.data()[(y0 + y) * w + x0..(y0 + y) * w + x1]);
        }
        self.push(
            Tensor::new(&[ch, cw], out),
            vec![x],
            Some(Box::new(move |g, _, _, needs| {
                vec![needs[0].then(|| {
                    let mut gx = Tensor::zeros(&[h, w]);
                    for y in 0..ch {
                        gx.data_mut()[(y0 + y) * w + x0..(y0 + y) * w + x1]
                            .copy_from_slice(&g.data()[y * cw..(y + 1) * cw]);
                    }
                    gx
                })]
            })),
        )
    }

    /// Correlate an `[h,w]` map with a fixed kernel, replicate padding.
    pub fn filter2d(&mut self, x: VarId, kernel: Tensor) -> VarId {
        let v = filter2d_clamp(self.value(x), &kernel);
        self.push(
            v,
            vec![x],
            Some(Box::new(move |g, _, _, needs| {
                vec![needs[0].then(|| filter2d_clamp_grad(g, &kernel))]
            })),
        )
    }

    /// Forward takes the precomputed `hard` value, backward behaves as the
    /// identity into `soft` (straight-through estimator).
    pub fn straight_through(&mut self, soft: VarId, hard: Tensor) -> VarId {
        assert_eq!(self.value(soft).shape(), hard.shape());
        self.push(
            hard,
            vec![soft],
            Some(Box::new(|g, _, _, needs| vec![needs[0].then(|| g.clone())])),
        )
    }

    /// Relabel the shape; data order is untouched.
    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> VarId {
        let old: Vec<usize> = self.shape(x).to_vec();
        let v = self.value(x).clone().reshape(shape);
        self.push(
            v,
            vec![x],
            Some(Box::new(move |g, _, _, needs| {
                vec![needs[0].then(|| g.clone().reshape(&old))]
            })),
        )
    }

    /// Block rearrangement `[c*f*f,h,w]` to `[c,h*f,w*f]`; the adjoint is the
    /// inverse rearrangement, so backward is exact.
    pub fn depth_to_space(&mut self, x: VarId, f: usize) -> VarId {
        let v = crate::tensor::depth_to_space(self.value(x), f);
        self.push(
            v,
            vec![x],
            Some(Box::new(move |g, _, _, needs| {
                vec![needs[0].then(|| crate::tensor::space_to_depth(g, f))]
            })),
        )
    }

    /// Per-cell channel means over a `grid`-by-`grid` partition of an
    /// `[h,w,c]` image; returns `[grid*grid, c]` rows in row-major cell order.
    pub fn cell_means(&mut self, x: VarId, grid: usize) -> VarId {
        let xv = self.value(x);
        let (h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(h % grid == 0 && w % grid == 0, "cell_means: {h}x{w} not divisible by {grid}");
        let (ch, cw) = (h / grid, w / grid);
        let inv = 1.0 / (ch * cw) as f64;
        let mut out = vec![0.0; grid * grid * c];
        for gy in 0..grid {
            for gx in 0..grid {
                for y in gy * ch..(gy + 1) * ch {
                    for x_ in gx * cw..(gx + 1) * cw {
                        for k in 0..c {
                            out[(gy * grid + gx) * c + k] += xv.data()[(y * w + x_) * c + k] * inv;
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new(&[grid * grid, c], out),
            vec![x],
            Some(Box::new(move |g, _, _, needs| {
                vec![needs[0].then(|| {
                    let mut gx_t = vec![0.0; h * w * c];
                    for y in 0..h {
                        for x_ in 0..w {
                            let cell = (y / ch) * grid + x_ / cw;
                            for k in 0..c {
                                gx_t[(y * w + x_) * c + k] = g.data()[cell * c + k] * inv;
                            }
                        }
                    }
                    Tensor::new(&[h, w, c], gx_t)
                })]
            })),
        )
    }

    /// `a [m,k] * b^T` for `b [n,k]`, the attention-score shape.
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> VarId {
        let v = matmul_nt(self.value(a), self.value(b));
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, pv, _, needs| {
                vec![
                    needs[0].then(|| matmul(g, pv[1])),
                    needs[1].then(|| matmul_tn(g, pv[0])),
                ]
            })),
        )
    }

    /// Columns `start..start+len` of an `[n,m]` matrix.
    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let xv = self.value(x);
        let (n, m) = (xv.shape()[0], xv.shape()[1]);
        assert!(start + len <= m, "slice_cols: {start}+{len} exceeds {m} columns");
        let mut out = vec![0.0; n * len];
        for i in 0..n {
            out[i * len..(i + 1) * len]
                .copy_from_slice(&xv.data()[i * m + start..i * m + start + len]);
        }
        self.push(
            Tensor::new(&[n, len], out),
            vec![x],
            Some(Box::new(move |g, _, _, needs| {
                vec![needs[0].then(|| {
                    let mut gx = Tensor::zeros(&[n, m]);
                    for i in 0..n {
                        gx.data_mut()[i * m + start..i * m + start + len]
                            .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                    }
                    gx
                })]
            })),
        )
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).shape()[0];
        let cols: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let v = self.value(p);
                assert_eq!(v.shape()[0], n, "concat_cols: row counts differ");
                v.shape()[1]
            })
            .collect();
        let total: usize = cols.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        for (pi, &p) in parts.iter().enumerate() {
            let v = self.value(p);
            for i in 0..n {
                out[i * total + off..i * total + off + cols[pi]]
                    .copy_from_slice(&v.data()[i * cols[pi]..(i + 1) * cols[pi]]);
            }
            off += cols[pi];
        }
        self.push(
            Tensor::new(&[n, total], out),
            parts.to_vec(),
            Some(Box::new(move |g, _, _, needs| {
                let mut out = Vec::with_capacity(cols.len());
                let mut off = 0;
                for (pi, &c) in cols.iter().enumerate() {
                    out.push(needs[pi].then(|| {
                        let mut gp = vec![0.0; n * c];
                        for i in 0..n {
                            gp[i * c..(i + 1) * c]
                                .copy_from_slice(&g.data()[i * total + off..i * total + off + c]);
                        }
                        Tensor::new(&[n, c], gp)
                    }));
                    off += c;
                }
                out
            })),
        )
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerical gradient checking helpers shared by unit and acceptance tests.
pub mod gradcheck {
    use super::Tensor;

    /// Relative error with the usual guard against tiny denominators.
    pub fn relative_error(numerical: f64, analytical: f64) -> f64 {
        (numerical - analytical).abs() / (numerical.abs() + analytical.abs()).max(1e-8)
    }

    /// Central-difference derivative of `f` w.r.t. element `idx` of `x`.
    pub fn central_diff(x: &Tensor, idx: usize, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> f64 {
        let mut xp = x.clone();
        xp.data_mut()[idx] += h;
        let mut xm = x.clone();
        xm.data_mut()[idx] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    /// Deterministic spread of probe indices over a tensor of length `len`.
    pub fn probe_indices(len: usize, count: usize) -> Vec<usize> {
        let count = count.min(len);
        (0..count).map(|i| i * len / count).collect()
    }
}
