//! Parameter initialisation and the dense-layer helpers shared by the
//! model components.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tsa_diffcore::{Bound, DiffError, Graph, NodeId, ParamStore, Tensor};

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()).expect("shape")
}

/// `name.w`, `fan_in × fan_out`, uniform ±1/√fan_in.
pub(crate) fn init_weight(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{name}.w"), uniform(rng, &[fan_in, fan_out], bound));
}

/// [`init_weight`] plus a zero `name.b`.
pub(crate) fn init_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    init_weight(store, name, fan_in, fan_out, rng);
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

/// Kernel-`k` convolution weights laid out `(k·c_in) × c_out`.
pub(crate) fn init_conv(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng) {
    init_linear(store, name, k * c_in, c_out, rng);
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, name: &str, d: usize) {
    store.insert(format!("{name}.g"), Tensor::full(&[d], 1.0));
    store.insert(format!("{name}.b"), Tensor::zeros(&[d]));
}

pub(crate) fn linear(g: &mut Graph, p: &Bound, name: &str, x: NodeId) -> Result<NodeId, DiffError> {
    let h = g.matmul(x, p.get(&format!("{name}.w"))?)?;
    g.add_bias(h, p.get(&format!("{name}.b"))?)
}

pub(crate) fn conv(g: &mut Graph, p: &Bound, name: &str, x: NodeId, k: usize) -> Result<NodeId, DiffError> {
    g.conv1d(x, p.get(&format!("{name}.w"))?, p.get(&format!("{name}.b"))?, k)
}

pub(crate) fn layer_norm(g: &mut Graph, p: &Bound, name: &str, x: NodeId) -> Result<NodeId, DiffError> {
    g.layer_norm(x, p.get(&format!("{name}.g"))?, p.get(&format!("{name}.b"))?)
}

/// `name.fc1 → ReLU → name.fc2 → ReLU → name.fc3`.
pub(crate) fn mlp3(g: &mut Graph, p: &Bound, name: &str, x: NodeId) -> Result<NodeId, DiffError> {
    let h = linear(g, p, &format!("{name}.fc1"), x)?;
    let h = g.relu(h)?;
    let h = linear(g, p, &format!("{name}.fc2"), h)?;
    let h = g.relu(h)?;
    linear(g, p, &format!("{name}.fc3"), h)
}

pub(crate) fn init_mlp3(store: &mut ParamStore, name: &str, dims: [usize; 4], rng: &mut ChaCha8Rng) {
    for (i, w) in dims.windows(2).enumerate() {
        init_linear(store, &format!("{name}.fc{}", i + 1), w[0], w[1], rng);
    }
}
