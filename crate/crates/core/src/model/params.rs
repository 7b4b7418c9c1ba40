use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use super::ops::Scalar;
use crate::attn::Mechanism;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    /// Receives decoupled weight decay.
    pub decay: bool,
}

impl<F: Scalar> Tensor<F> {
    fn new(name: String, shape: Vec<usize>, fill: F, decay: bool) -> Self {
        let len = shape.iter().product();
        Self {
            name,
            shape,
            data: vec![fill; len],
            decay,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::narrow(x.widen())).collect(),
            decay: self.decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet<F> {
    pub tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Vec<F>> {
        self.tensors.iter().map(|t| vec![F::zero(); t.len()]).collect()
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerIdx {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub wq2: Option<usize>,
    pub wk2: Option<usize>,
    pub head_gain: Option<usize>,
    pub head_bias: Option<usize>,
    pub beta: Option<usize>,
    pub lambda: Option<usize>,
    pub norm1: usize,
    pub norm2: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub wte: usize,
    pub layers: Vec<LayerIdx>,
}

struct Builder<F> {
    tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> Builder<F> {
    fn push(&mut self, name: String, shape: Vec<usize>, fill: F, decay: bool) -> usize {
        self.tensors.push(Tensor::new(name, shape, fill, decay));
        self.tensors.len() - 1
    }
}

/// Allocates every tensor for `cfg` with its initial constant; random
/// matrices are filled by [`init_params`].
pub(crate) fn build_layout<F: Scalar>(cfg: &ModelConfig) -> (ParamSet<F>, Layout) {
    let (d, h, hd, v) = (cfg.d_model, cfg.n_heads, cfg.head_dim(), cfg.vocab_size);
    let mech = cfg.mechanism;
    let mut b = Builder { tensors: Vec::new() };
    let wte = b.push("wte".into(), vec![v, d], F::zero(), true);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let n = |s: &str| format!("h{l}.{s}");
        let wq = b.push(n("attn.wq"), vec![d, d], F::zero(), true);
        let wk = b.push(n("attn.wk"), vec![d, d], F::zero(), true);
        let wv = b.push(n("attn.wv"), vec![d, d], F::zero(), true);
        let wo = b.push(n("attn.wo"), vec![d, d], F::zero(), true);
        let (wq2, wk2) = if mech.is_differential() {
            (
                Some(b.push(n("attn.wq2"), vec![d, d], F::zero(), true)),
                Some(b.push(n("attn.wk2"), vec![d, d], F::zero(), true)),
            )
        } else {
            (None, None)
        };
        let normed = matches!(mech, Mechanism::Rela | Mechanism::Tra | Mechanism::Tda);
        let head_gain = normed.then(|| b.push(n("attn.head_gain"), vec![h, hd], F::one(), false));
        let head_bias = (mech == Mechanism::Rela).then(|| b.push(n("attn.head_bias"), vec![h, hd], F::zero(), false));
        let beta = mech.is_thresholded().then(|| {
            let len = if cfg.per_head_beta { h } else { 1 };
            b.push(n("attn.beta"), vec![len], F::narrow(cfg.attn_params.beta), false)
        });
        let lambda = mech
            .is_differential()
            .then(|| b.push(n("attn.lambda"), vec![1], F::narrow(cfg.attn_params.lambda), false));
        let norm1 = b.push(n("norm1"), vec![d], F::one(), false);
        let w1 = b.push(n("mlp.w1"), vec![d, 4 * d], F::zero(), true);
        let b1 = b.push(n("mlp.b1"), vec![4 * d], F::zero(), false);
        let w2 = b.push(n("mlp.w2"), vec![4 * d, d], F::zero(), true);
        let b2 = b.push(n("mlp.b2"), vec![d], F::zero(), false);
        let norm2 = b.push(n("norm2"), vec![d], F::one(), false);
        layers.push(LayerIdx {
            wq,
            wk,
            wv,
            wo,
            wq2,
            wk2,
            head_gain,
            head_bias,
            beta,
            lambda,
            norm1,
            norm2,
            w1,
            b1,
            w2,
            b2,
        });
    }
    (ParamSet { tensors: b.tensors }, Layout { wte, layers })
}

/// Stable 64-bit FNV-1a of a tensor name.
fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// `N(0, 0.02)` for matrices, scaled by `1/sqrt(2L)` on residual projections.
///
/// Each tensor draws from its own stream keyed by its name, so tensors shared
/// between mechanisms start identical under the same seed.
pub(crate) fn init_params<F: Scalar>(params: &mut ParamSet<F>, layout: &Layout, cfg: &ModelConfig) {
    let resid_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();
    let mut fill = |idx: usize, std: f64| {
        let tensor = &mut params.tensors[idx];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(name_key(&tensor.name));
        let dist = Normal::new(0.0, std).expect("positive std");
        for x in tensor.data.iter_mut() {
            *x = F::narrow(dist.sample(&mut rng));
        }
    };
    fill(layout.wte, INIT_STD);
    for l in &layout.layers {
        for idx in [l.wq, l.wk, l.wv].into_iter().chain(l.wq2).chain(l.wk2) {
            fill(idx, INIT_STD);
        }
        fill(l.wo, resid_std);
        fill(l.w1, INIT_STD);
        fill(l.w2, resid_std);
    }
}
