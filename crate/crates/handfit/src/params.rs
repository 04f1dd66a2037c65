//! Named parameter blocks shared by every learned component.
//!
//! Each tensor lives at a dot-joined path like `denoiser.enc1.c0.w`. The path
//! seeds its initializer, so adding or removing unrelated blocks never changes
//! existing weights. The same paths drive checkpoint IO, the optimizer's
//! moment tables, and graph registration with per-phase freezing.

use crate::graph::{Graph, VarId};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;

/// LayerNorm epsilon used everywhere.
pub const LN_EPS: f64 = 1e-5;

/// FNV-1a over the path, XORed with the master seed.
pub fn path_seed(master: u64, path: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in path.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ master
}

/// Weight initializer: uniform with fan-in scaling, deterministic per path.
pub struct Init {
    master: u64,
}

impl Init {
    pub fn new(master: u64) -> Self {
        Init { master }
    }

    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) over `shape`.
    pub fn uniform(&self, path: &str, shape: &[usize], fan_in: usize) -> Tensor {
        assert!(fan_in > 0);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut rng = ChaCha12Rng::seed_from_u64(path_seed(self.master, path));
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
    }
}

/// Traversal over named tensors. `prefix` is the owner's path; implementations
/// append their own segments.
pub trait ParamBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));
}

/// Dense layer: `w` is `[fan_in, fan_out]`, `b` is `[fan_out]`.
#[derive(Clone, Debug)]
pub struct LinearP {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearP {
    pub fn init(init: &Init, path: &str, fan_in: usize, fan_out: usize) -> Self {
        LinearP {
            w: init.uniform(&format!("{path}.w"), &[fan_in, fan_out], fan_in),
            b: Tensor::zeros(&[fan_out]),
        }
    }
}

impl ParamBlock for LinearP {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

/// Bias-free projection matrix `[fan_in, fan_out]`. Used where a bias would
/// break exact row gating (a gated-off attention row must stay exactly zero).
#[derive(Clone, Debug)]
pub struct MatP {
    pub w: Tensor,
}

impl MatP {
    pub fn init(init: &Init, path: &str, fan_in: usize, fan_out: usize) -> Self {
        MatP { w: init.uniform(&format!("{path}.w"), &[fan_in, fan_out], fan_in) }
    }
}

impl ParamBlock for MatP {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.w"), &self.w);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w"), &mut self.w);
    }
}

/// LayerNorm affine: `gamma` ones, `beta` zeros at init.
#[derive(Clone, Debug)]
pub struct LnP {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LnP {
    pub fn init(dim: usize) -> Self {
        LnP { gamma: Tensor::filled(&[dim], 1.0), beta: Tensor::zeros(&[dim]) }
    }
}

impl ParamBlock for LnP {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

/// Conv layer: `w` is `[out, in, kh, kw]`, `b` is `[out]`.
#[derive(Clone, Debug)]
pub struct ConvP {
    pub w: Tensor,
    pub b: Tensor,
}

impl ConvP {
    pub fn init(init: &Init, path: &str, c_out: usize, c_in: usize, k: usize) -> Self {
        ConvP {
            w: init.uniform(&format!("{path}.w"), &[c_out, c_in, k, k], c_in * k * k),
            b: Tensor::zeros(&[c_out]),
        }
    }

    /// Exactly-zero weights and bias; the residual-branch terminator.
    pub fn zero(c_out: usize, c_in: usize, k: usize) -> Self {
        ConvP { w: Tensor::zeros(&[c_out, c_in, k, k]), b: Tensor::zeros(&[c_out]) }
    }

    pub fn is_all_zero(&self) -> bool {
        self.w.data().iter().all(|&v| v == 0.0) && self.b.data().iter().all(|&v| v == 0.0)
    }
}

impl ParamBlock for ConvP {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

/// Stack of linear+ReLU layers; widths `dims[0] -> dims[1] -> ...`.
#[derive(Clone, Debug)]
pub struct MlpP {
    pub layers: Vec<LinearP>,
}

impl MlpP {
    pub fn init(init: &Init, path: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2);
        let layers = (0..dims.len() - 1)
            .map(|i| LinearP::init(init, &format!("{path}.l{i}"), dims[i], dims[i + 1]))
            .collect();
        MlpP { layers }
    }
}

impl ParamBlock for MlpP {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.l{i}"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.l{i}"), f);
        }
    }
}

/// Stack of linear+LayerNorm layers.
#[derive(Clone, Debug)]
pub struct LnStackP {
    pub layers: Vec<(LinearP, LnP)>,
}

impl LnStackP {
    pub fn init(init: &Init, path: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2);
        let layers = (0..dims.len() - 1)
            .map(|i| {
                (
                    LinearP::init(init, &format!("{path}.l{i}"), dims[i], dims[i + 1]),
                    LnP::init(dims[i + 1]),
                )
            })
            .collect();
        LnStackP { layers }
    }
}

impl ParamBlock for LnStackP {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, (l, n)) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.l{i}"), f);
            n.visit(&format!("{prefix}.l{i}.ln"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, (l, n)) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.l{i}"), f);
            n.visit_mut(&format!("{prefix}.l{i}.ln"), f);
        }
    }
}

/// Parameter paths registered into a graph. Trainable paths become gradient
/// leaves; the rest enter as constants, so frozen weights cost no backward
/// work and provably receive no updates.
pub struct VarMap {
    map: BTreeMap<String, VarId>,
}

impl VarMap {
    pub fn register(
        g: &mut Graph,
        block: &dyn ParamBlock,
        prefix: &str,
        trainable: &dyn Fn(&str) -> bool,
    ) -> VarMap {
        let mut map = BTreeMap::new();
        block.visit(prefix, &mut |path, t| {
            let id = if trainable(&path) { g.leaf(t.clone()) } else { g.constant(t.clone()) };
            let prev = map.insert(path.clone(), id);
            assert!(prev.is_none(), "duplicate parameter path {path}");
        });
        VarMap { map }
    }

    pub fn frozen(g: &mut Graph, block: &dyn ParamBlock, prefix: &str) -> VarMap {
        VarMap::register(g, block, prefix, &|_| false)
    }

    pub fn get(&self, path: &str) -> VarId {
        *self.map.get(path).unwrap_or_else(|| panic!("no parameter at path {path}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &VarId)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// `x @ w + b` with weights looked up at `path`.
pub fn linear_fwd(g: &mut Graph, vm: &VarMap, path: &str, x: VarId) -> VarId {
    let w = vm.get(&format!("{path}.w"));
    let b = vm.get(&format!("{path}.b"));
    g.linear(x, w, b)
}

/// Bias-free `x @ w` with the matrix looked up at `path`.
pub fn mat_fwd(g: &mut Graph, vm: &VarMap, path: &str, x: VarId) -> VarId {
    let w = vm.get(&format!("{path}.w"));
    g.matmul(x, w)
}

pub fn conv_fwd(g: &mut Graph, vm: &VarMap, path: &str, x: VarId, stride: usize, pad: usize) -> VarId {
    let w = vm.get(&format!("{path}.w"));
    let b = vm.get(&format!("{path}.b"));
    g.conv2d(x, w, b, stride, pad)
}

pub fn layer_norm_fwd(g: &mut Graph, vm: &VarMap, path: &str, x: VarId) -> VarId {
    let gamma = vm.get(&format!("{path}.gamma"));
    let beta = vm.get(&format!("{path}.beta"));
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Stack of `layers` linear+ReLU blocks rooted at `path` (segments `.l0`...).
pub fn mlp_relu_fwd(g: &mut Graph, vm: &VarMap, path: &str, x: VarId, layers: usize) -> VarId {
    let mut h = x;
    for i in 0..layers {
        h = linear_fwd(g, vm, &format!("{path}.l{i}"), h);
        h = g.relu(h);
    }
    h
}

/// Stack of `layers` linear+LayerNorm blocks rooted at `path`.
pub fn ln_stack_fwd(g: &mut Graph, vm: &VarMap, path: &str, x: VarId, layers: usize) -> VarId {
    let mut h = x;
    for i in 0..layers {
        h = linear_fwd(g, vm, &format!("{path}.l{i}"), h);
        h = layer_norm_fwd(g, vm, &format!("{path}.l{i}.ln"), h);
    }
    h
}

/// Total scalar count across a block, for capacity reporting.
pub fn param_count(block: &dyn ParamBlock) -> usize {
    let mut n = 0;
    block.visit("", &mut |_, t| n += t.len());
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_path_keyed_and_deterministic() {
        let init = Init::new(42);
        let a = init.uniform("m.x.w", &[4, 5], 4);
        let b = init.uniform("m.x.w", &[4, 5], 4);
        let c = init.uniform("m.y.w", &[4, 5], 4);
        assert_eq!(a, b, "same path must reproduce the same weights");
        assert_ne!(a, c, "different paths must diverge");
        let bound = 1.0 / 2.0;
        assert!(a.data().iter().all(|v| v.abs() < bound));
        let other = Init::new(43);
        assert_ne!(a, other.uniform("m.x.w", &[4, 5], 4), "master seed must matter");
    }

    #[test]
    fn visit_enumerates_every_tensor_once() {
        let init = Init::new(7);
        let mlp = MlpP::init(&init, "enc", &[8, 4, 4]);
        let mut names = Vec::new();
        mlp.visit("enc", &mut |n, _| names.push(n));
        assert_eq!(names, vec!["enc.l0.w", "enc.l0.b", "enc.l1.w", "enc.l1.b"]);

        let lns = LnStackP::init(&init, "t", &[2, 4]);
        let mut names = Vec::new();
        lns.visit("t", &mut |n, _| names.push(n));
        assert_eq!(names, vec!["t.l0.w", "t.l0.b", "t.l0.ln.gamma", "t.l0.ln.beta"]);
    }

    #[test]
    fn visit_mut_edits_are_seen_by_visit() {
        let init = Init::new(7);
        let mut lin = LinearP::init(&init, "p", 3, 2);
        lin.visit_mut("p", &mut |name, t| {
            if name.ends_with(".b") {
                for v in t.data_mut() {
                    *v = 9.0;
                }
            }
        });
        let mut seen = 0.0;
        lin.visit("p", &mut |name, t| {
            if name.ends_with(".b") {
                seen = t.data()[0];
            }
        });
        assert_eq!(seen, 9.0);
    }

    #[test]
    fn varmap_freezing_controls_gradient_flow() {
        let init = Init::new(1);
        let lin = LinearP::init(&init, "p", 3, 2);
        let mut g = Graph::new();
        let vm = VarMap::register(&mut g, &lin, "p", &|path| path.ends_with(".w"));
        let x = g.constant(Tensor::new(&[1, 3], vec![0.3, -0.2, 0.5]));
        let y = linear_fwd(&mut g, &vm, "p", x);
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        assert!(grads.get(vm.get("p.w")).is_some(), "trainable weight must get a gradient");
        assert!(grads.get(vm.get("p.b")).is_none(), "frozen bias must stay gradient-free");
    }

    #[test]
    fn zero_conv_param_is_all_zero() {
        let z = ConvP::zero(4, 3, 1);
        assert!(z.is_all_zero());
        let init = Init::new(5);
        let c = ConvP::init(&init, "c", 4, 3, 3);
        assert!(!c.is_all_zero());
        assert_eq!(c.w.shape(), &[4, 3, 3, 3]);
    }
}
