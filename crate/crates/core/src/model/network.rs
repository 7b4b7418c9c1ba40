use ndarray::{Array4, ArrayView4};
use rayon::prelude::*;

use super::attention::{
    combined_weights, core_backward, core_forward, post_backward, post_forward, CoreCache, CoreGrads, HeadInputs,
    HeadSpec, PostCache,
};
use super::ops::{gelu, gelu_grad, gemm, rmsnorm_rows, rmsnorm_rows_backward, Rope, Scalar};
use super::params::{build_layout, init_params, LayerIdx, Layout, ParamSet};
use super::{ModelConfig, BLOCK_NORM_EPS};
use crate::attn::{AttnBatch, AttnParams, Mechanism};
use crate::error::{Error, Result};
use crate::kernel::{tda_backward_streaming, tda_streaming_audited, tra_backward_streaming_audited, tra_forward_streaming_audited, ScratchAudit};

/// Decoder-only LM. Parameters live in a flat [`ParamSet`] in creation order.
#[derive(Debug, Clone)]
pub struct Model<F: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamSet<F>,
    layout: Layout,
    rope: Rope,
}

struct Dims {
    b: usize,
    t: usize,
    d: usize,
    h: usize,
    dh: usize,
}

impl Dims {
    fn n(&self) -> usize {
        self.b * self.t
    }

    fn head_len(&self) -> usize {
        self.t * self.dh
    }
}

/// Query/key pair for one view in head layout `[B, H, T, dh]`.
#[derive(Debug, Clone, Default)]
struct View<F> {
    q: Vec<F>,
    k: Vec<F>,
    /// Row norms before L2 normalization (thresholded mechanisms only).
    q_norm: Vec<F>,
    k_norm: Vec<F>,
}

#[derive(Debug, Clone)]
struct HeadState<F> {
    raw: Vec<F>,
    core: CoreCache<F>,
    post: PostCache<F>,
}

#[derive(Debug, Clone)]
struct LayerCache<F> {
    x: Vec<F>,
    view1: View<F>,
    view2: Option<View<F>>,
    v: Vec<F>,
    heads: Vec<HeadState<F>>,
    concat: Vec<F>,
    r1: Vec<F>,
    inv1: Vec<F>,
    n1: Vec<F>,
    h1: Vec<F>,
    u: Vec<F>,
    r2: Vec<F>,
    inv2: Vec<F>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    layers: Vec<LayerCache<F>>,
    tokens: Vec<u32>,
    hidden: Vec<F>,
    batch: usize,
    seq: usize,
}

impl<F: Scalar> ForwardCache<F> {
    /// Output of the last block, `[B * T, d_model]`.
    pub fn hidden(&self) -> &[F] {
        &self.hidden
    }
}

fn to_heads<F: Scalar>(x: &[F], dm: &Dims) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for b in 0..dm.b {
        for t in 0..dm.t {
            let src = &x[(b * dm.t + t) * dm.d..(b * dm.t + t + 1) * dm.d];
            for h in 0..dm.h {
                let dst = ((b * dm.h + h) * dm.t + t) * dm.dh;
                out[dst..dst + dm.dh].copy_from_slice(&src[h * dm.dh..(h + 1) * dm.dh]);
            }
        }
    }
    out
}

fn from_heads<F: Scalar>(x: &[F], dm: &Dims) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for b in 0..dm.b {
        for h in 0..dm.h {
            for t in 0..dm.t {
                let src = ((b * dm.h + h) * dm.t + t) * dm.dh;
                let dst = (b * dm.t + t) * dm.d + h * dm.dh;
                out[dst..dst + dm.dh].copy_from_slice(&x[src..src + dm.dh]);
            }
        }
    }
    out
}

fn matmul<F: Scalar>(x: &[F], w: &[F], n: usize, k: usize, m: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n * m];
    gemm(false, false, n, k, m, x, w, &mut out, false);
    out
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a = *a + *b;
    }
}

/// L2-normalizes each `dh` row in place and returns the original norms.
/// Zero rows stay zero and report norm 0.
fn normalize_rows<F: Scalar>(x: &mut [F], dh: usize) -> Vec<F> {
    x.chunks_mut(dh)
        .map(|row| {
            let n = row.iter().map(|v| v.widen() * v.widen()).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v = F::narrow(v.widen() / n));
            }
            F::narrow(n)
        })
        .collect()
}

/// `dx = (g - x~ (x~ . g)) / |x|`, in place over `grad`.
fn normalize_rows_backward<F: Scalar>(xn: &[F], norms: &[F], grad: &mut [F], dh: usize) {
    for ((row, g), n) in xn.chunks(dh).zip(grad.chunks_mut(dh)).zip(norms) {
        let n = n.widen();
        if n == 0.0 {
            g.iter_mut().for_each(|v| *v = F::zero());
            continue;
        }
        let proj: f64 = row.iter().zip(g.iter()).map(|(a, b)| a.widen() * b.widen()).sum();
        for (gv, xv) in g.iter_mut().zip(row) {
            *gv = F::narrow((gv.widen() - xv.widen() * proj) / n);
        }
    }
}

impl<F: Scalar> Model<F> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (mut params, layout) = build_layout(&config);
        init_params(&mut params, &layout, &config);
        let rope = Rope::new(config.head_dim(), config.context_len, config.rope_theta)?;
        Ok(Self {
            config,
            params,
            layout,
            rope,
        })
    }

    /// Rebuilds a model around existing parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamSet<F>) -> Result<Self> {
        config.validate()?;
        let (expected, layout) = build_layout::<F>(&config);
        if expected.tensors.len() != params.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.tensors.len(),
                params.tensors.len()
            )));
        }
        for (e, p) in expected.tensors.iter().zip(&params.tensors) {
            if e.name != p.name || e.shape != p.shape || p.data.len() != e.data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: expected {} {:?}, found {} {:?}",
                    e.name, e.shape, p.name, p.shape
                )));
            }
        }
        let rope = Rope::new(config.head_dim(), config.context_len, config.rope_theta)?;
        Ok(Self {
            config,
            params,
            layout,
            rope,
        })
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            rope: self.rope.clone(),
        }
    }

    /// Same weights with a different maximum context (rotary tables are rebuilt).
    pub fn with_context_len(&self, context_len: usize) -> Result<Self> {
        let mut config = self.config.clone();
        config.context_len = context_len;
        config.validate()?;
        Ok(Self {
            rope: Rope::new(config.head_dim(), context_len, config.rope_theta)?,
            config,
            params: self.params.clone(),
            layout: self.layout.clone(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    fn data(&self, idx: usize) -> &[F] {
        &self.params.tensors[idx].data
    }

    fn dims(&self, batch: usize, seq: usize) -> Dims {
        Dims {
            b: batch,
            t: seq,
            d: self.config.d_model,
            h: self.config.n_heads,
            dh: self.config.head_dim(),
        }
    }

    fn check_tokens(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<()> {
        if seq == 0 || batch == 0 {
            return Err(Error::Shape("batch and sequence length must be >= 1".into()));
        }
        if tokens.len() != batch * seq {
            return Err(Error::Shape(format!(
                "expected {} tokens for batch {batch} x seq {seq}, got {}",
                batch * seq,
                tokens.len()
            )));
        }
        if seq > self.config.context_len {
            return Err(Error::ContextOverflow {
                len: seq,
                max: self.config.context_len,
            });
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidParam(format!("token {bad} outside vocabulary")));
        }
        Ok(())
    }

    fn head_spec<'a>(&'a self, li: &LayerIdx, h: usize, t: usize) -> HeadSpec<'a, F> {
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let beta = li
            .beta
            .map(|i| {
                let b = self.data(i);
                b[h % b.len()].widen()
            })
            .unwrap_or(cfg.attn_params.beta);
        let lambda = li.lambda.map(|i| self.data(i)[0].widen()).unwrap_or(0.0);
        HeadSpec {
            mechanism: cfg.mechanism,
            t,
            dh,
            beta,
            lambda,
            kappa: cfg.attn_params.kappa,
            power: cfg.attn_params.power,
            eps: cfg.attn_params.norm_epsilon,
            gain: li.head_gain.map(|i| &self.data(i)[h * dh..(h + 1) * dh]),
            bias: li.head_bias.map(|i| &self.data(i)[h * dh..(h + 1) * dh]),
        }
    }

    fn project_view(&self, x: &[F], wq: usize, wk: usize, dm: &Dims) -> View<F> {
        let n = dm.n();
        let mut q = to_heads(&matmul(x, self.data(wq), n, dm.d, dm.d), dm);
        let mut k = to_heads(&matmul(x, self.data(wk), n, dm.d, dm.d), dm);
        for head in q.chunks_mut(dm.head_len()).chain(k.chunks_mut(dm.head_len())) {
            self.rope.apply(head, false);
        }
        let (q_norm, k_norm) = if self.config.mechanism.is_thresholded() {
            (normalize_rows(&mut q, dm.dh), normalize_rows(&mut k, dm.dh))
        } else {
            (Vec::new(), Vec::new())
        };
        View { q, k, q_norm, k_norm }
    }

    fn head_inputs<'a>(&self, c: &'a LayerCache<F>, bh: usize, dm: &Dims) -> HeadInputs<'a, F> {
        let r = bh * dm.head_len()..(bh + 1) * dm.head_len();
        HeadInputs {
            q: &c.view1.q[r.clone()],
            k: &c.view1.k[r.clone()],
            q2: c.view2.as_ref().map(|v| &v.q[r.clone()]),
            k2: c.view2.as_ref().map(|v| &v.k[r.clone()]),
            v: &c.v[r],
        }
    }

    fn kernel_params(&self, li: &LayerIdx) -> AttnParams {
        let mut p = self.config.attn_params;
        if let Some(i) = li.beta {
            p.beta = self.data(i)[0].widen();
        }
        if let Some(i) = li.lambda {
            p.lambda = self.data(i)[0].widen();
        }
        p
    }

    fn as4<'a>(x: &'a [F], dm: &Dims) -> ArrayView4<'a, F> {
        ArrayView4::from_shape((dm.b, dm.h, dm.t, dm.dh), x).expect("head layout")
    }

    /// Raw aggregation from the streaming kernel, `[B, H, T, dh]`.
    fn streaming_raw(&self, li: &LayerIdx, c: &LayerCache<F>, dm: &Dims) -> Result<Vec<F>> {
        let tiles = self.config.backend.tiles().expect("streaming backend");
        let params = self.kernel_params(li);
        let audit = ScratchAudit::new();
        let q = Self::as4(&c.view1.q, dm).to_owned();
        let k = Self::as4(&c.view1.k, dm).to_owned();
        let v = Self::as4(&c.v, dm).to_owned();
        let out: Array4<F> = match &c.view2 {
            None => tra_forward_streaming_audited(&q, &k, &v, &params, tiles, false, &audit)?,
            Some(v2) => {
                let batch = AttnBatch::two_view(q, k, Self::as4(&v2.q, dm).to_owned(), Self::as4(&v2.k, dm).to_owned(), v)?;
                tda_streaming_audited(&batch, &params, tiles, false, &audit)?
            }
        };
        Ok(out.into_raw_vec_and_offset().0)
    }

    fn layer_forward(&self, li: &LayerIdx, x: Vec<F>, dm: &Dims) -> Result<(Vec<F>, LayerCache<F>)> {
        let n = dm.n();
        let view1 = self.project_view(&x, li.wq, li.wk, dm);
        let view2 = match (li.wq2, li.wk2) {
            (Some(a), Some(b)) => Some(self.project_view(&x, a, b, dm)),
            _ => None,
        };
        let v = to_heads(&matmul(&x, self.data(li.wv), n, dm.d, dm.d), dm);
        let mut cache = LayerCache {
            x,
            view1,
            view2,
            v,
            heads: Vec::new(),
            concat: Vec::new(),
            r1: Vec::new(),
            inv1: Vec::new(),
            n1: Vec::new(),
            h1: Vec::new(),
            u: Vec::new(),
            r2: Vec::new(),
            inv2: Vec::new(),
        };

        let streamed = match self.config.backend.tiles() {
            Some(_) => Some(self.streaming_raw(li, &cache, dm)?),
            None => None,
        };
        let hl = dm.head_len();
        let results: Vec<(Vec<F>, HeadState<F>)> = (0..dm.b * dm.h)
            .into_par_iter()
            .map(|bh| {
                let spec = self.head_spec(li, bh % dm.h, dm.t);
                let (raw, core) = match &streamed {
                    Some(all) => (all[bh * hl..(bh + 1) * hl].to_vec(), CoreCache::default()),
                    None => core_forward(&spec, &self.head_inputs(&cache, bh, dm)),
                };
                let mut out = vec![F::zero(); hl];
                let post = post_forward(&spec, &raw, &mut out);
                (out, HeadState { raw, core, post })
            })
            .collect();
        let mut heads_out = Vec::with_capacity(n * dm.d);
        for (out, state) in results {
            heads_out.extend_from_slice(&out);
            cache.heads.push(state);
        }
        cache.concat = from_heads(&heads_out, dm);

        let attn = matmul(&cache.concat, self.data(li.wo), n, dm.d, dm.d);
        let mut r1 = cache.x.clone();
        add_into(&mut r1, &attn);
        let mut n1 = vec![F::zero(); n * dm.d];
        cache.inv1 = rmsnorm_rows(&r1, self.data(li.norm1), BLOCK_NORM_EPS, &mut n1);
        cache.r1 = r1;

        let f = 4 * dm.d;
        let mut h1 = matmul(&n1, self.data(li.w1), n, dm.d, f);
        for row in h1.chunks_mut(f) {
            add_into(row, self.data(li.b1));
        }
        let u: Vec<F> = h1.iter().map(|x| F::narrow(gelu(x.widen()))).collect();
        let mut r2 = matmul(&u, self.data(li.w2), n, f, dm.d);
        for row in r2.chunks_mut(dm.d) {
            add_into(row, self.data(li.b2));
        }
        add_into(&mut r2, &n1);
        let mut y = vec![F::zero(); n * dm.d];
        cache.inv2 = rmsnorm_rows(&r2, self.data(li.norm2), BLOCK_NORM_EPS, &mut y);
        cache.r2 = r2;
        cache.n1 = n1;
        cache.h1 = h1;
        cache.u = u;
        Ok((y, cache))
    }

    /// Runs every block and keeps activations for [`Model::backward`].
    pub fn forward(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<ForwardCache<F>> {
        self.check_tokens(tokens, batch, seq)?;
        let dm = self.dims(batch, seq);
        let wte = self.data(self.layout.wte);
        let mut x = Vec::with_capacity(dm.n() * dm.d);
        for &tok in tokens {
            let t = tok as usize;
            x.extend_from_slice(&wte[t * dm.d..(t + 1) * dm.d]);
        }
        let mut layers = Vec::with_capacity(self.layout.layers.len());
        for li in &self.layout.layers {
            let (y, cache) = self.layer_forward(li, x, &dm)?;
            layers.push(cache);
            x = y;
        }
        Ok(ForwardCache {
            layers,
            tokens: tokens.to_vec(),
            hidden: x,
            batch,
            seq,
        })
    }

    /// Tied-embedding logits for the given hidden rows, `[rows, vocab]`.
    pub fn logits_from_hidden(&self, hidden: &[F]) -> Vec<F> {
        let d = self.config.d_model;
        let rows = hidden.len() / d;
        let mut out = vec![F::zero(); rows * self.config.vocab_size];
        gemm(false, true, rows, d, self.config.vocab_size, hidden, self.data(self.layout.wte), &mut out, false);
        out
    }

    pub fn logits(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<Vec<F>> {
        let cache = self.forward(tokens, batch, seq)?;
        Ok(self.logits_from_hidden(&cache.hidden))
    }

    /// Mean next-token cross-entropy (nats).
    pub fn loss(&self, tokens: &[u32], targets: &[u32], batch: usize, seq: usize) -> Result<f64> {
        let logits = self.logits(tokens, batch, seq)?;
        Ok(cross_entropy(&logits, targets, self.config.vocab_size, false).0)
    }

    /// Loss and gradients aligned with `self.params.tensors`.
    pub fn loss_and_grads(&self, tokens: &[u32], targets: &[u32], batch: usize, seq: usize) -> Result<(f64, Vec<Vec<F>>)> {
        let cache = self.forward(tokens, batch, seq)?;
        if targets.len() != tokens.len() {
            return Err(Error::Shape("targets must match tokens".into()));
        }
        let logits = self.logits_from_hidden(&cache.hidden);
        let (loss, dlogits) = cross_entropy(&logits, targets, self.config.vocab_size, true);
        let grads = self.backward(&cache, &dlogits)?;
        Ok((loss, grads))
    }

    /// Gradients of `<dlogits, logits>` for a cached forward pass.
    pub fn backward(&self, cache: &ForwardCache<F>, dlogits: &[F]) -> Result<Vec<Vec<F>>> {
        let dm = self.dims(cache.batch, cache.seq);
        let (n, d, v) = (dm.n(), dm.d, self.config.vocab_size);
        let mut grads = self.params.zeros_like();
        let wte = self.layout.wte;
        let mut dx = matmul(dlogits, self.data(wte), n, v, d);
        gemm(true, false, v, n, d, dlogits, &cache.hidden, &mut grads[wte], false);
        for (li, lc) in self.layout.layers.iter().zip(&cache.layers).rev() {
            dx = self.layer_backward(li, lc, &dx, &dm, &mut grads)?;
        }
        for (row, &tok) in cache.tokens.iter().enumerate() {
            let t = tok as usize;
            add_into(&mut grads[wte][t * d..(t + 1) * d], &dx[row * d..(row + 1) * d]);
        }
        Ok(grads)
    }

    fn layer_backward(&self, li: &LayerIdx, c: &LayerCache<F>, dy: &[F], dm: &Dims, grads: &mut [Vec<F>]) -> Result<Vec<F>> {
        let (n, d, f) = (dm.n(), dm.d, 4 * dm.d);
        let mut dr2 = vec![F::zero(); n * d];
        rmsnorm_rows_backward(&c.r2, self.data(li.norm2), &c.inv2, dy, &mut dr2, &mut grads[li.norm2]);
        // FFN branch.
        for row in dr2.chunks(d) {
            add_into(&mut grads[li.b2], row);
        }
        gemm(true, false, f, n, d, &c.u, &dr2, &mut grads[li.w2], false);
        let mut dh1 = vec![F::zero(); n * f];
        gemm(false, true, n, d, f, &dr2, self.data(li.w2), &mut dh1, false);
        for (g, x) in dh1.iter_mut().zip(&c.h1) {
            *g = F::narrow(g.widen() * gelu_grad(x.widen()));
        }
        for row in dh1.chunks(f) {
            add_into(&mut grads[li.b1], row);
        }
        gemm(true, false, d, n, f, &c.n1, &dh1, &mut grads[li.w1], false);
        let mut dn1 = dr2;
        gemm(false, true, n, f, d, &dh1, self.data(li.w1), &mut dn1, true);

        let mut dr1 = vec![F::zero(); n * d];
        rmsnorm_rows_backward(&c.r1, self.data(li.norm1), &c.inv1, &dn1, &mut dr1, &mut grads[li.norm1]);
        gemm(true, false, d, n, d, &c.concat, &dr1, &mut grads[li.wo], false);
        let mut dconcat = vec![F::zero(); n * d];
        gemm(false, true, n, d, d, &dr1, self.data(li.wo), &mut dconcat, false);
        let dheads = to_heads(&dconcat, dm);

        let (mut dq, mut dk, mut dq2, mut dk2, dv) = self.attention_backward(li, c, &dheads, dm, grads)?;

        normalize_and_rope_backward(self, &c.view1, &mut dq, &mut dk, dm);
        if let Some(v2) = &c.view2 {
            normalize_and_rope_backward(self, v2, &mut dq2, &mut dk2, dm);
        }
        let mut dx = dr1;
        let mut project_back = |w: usize, dh: &[F]| {
            let g = from_heads(dh, dm);
            gemm(true, false, d, n, d, &c.x, &g, &mut grads[w], false);
            gemm(false, true, n, d, d, &g, &self.params.tensors[w].data, &mut dx, true);
        };
        project_back(li.wq, &dq);
        project_back(li.wk, &dk);
        project_back(li.wv, &dv);
        if let (Some(a), Some(b)) = (li.wq2, li.wk2) {
            project_back(a, &dq2);
            project_back(b, &dk2);
        }
        Ok(dx)
    }

    /// Returns head-layout `(dq, dk, dq2, dk2, dv)` with respect to the score
    /// inputs, accumulating head-norm, beta and lambda gradients.
    #[allow(clippy::type_complexity)]
    fn attention_backward(
        &self,
        li: &LayerIdx,
        c: &LayerCache<F>,
        dheads: &[F],
        dm: &Dims,
        grads: &mut [Vec<F>],
    ) -> Result<(Vec<F>, Vec<F>, Vec<F>, Vec<F>, Vec<F>)> {
        let hl = dm.head_len();
        let total = dm.b * dm.h * hl;
        let streaming = self.config.backend.tiles();
        struct HeadBack<F> {
            dgain: Vec<F>,
            dbias: Vec<F>,
            draw: Vec<F>,
            core: Option<CoreGrads<F>>,
        }
        let per_head: Vec<HeadBack<F>> = (0..dm.b * dm.h)
            .into_par_iter()
            .map(|bh| {
                let spec = self.head_spec(li, bh % dm.h, dm.t);
                let st = &c.heads[bh];
                let mut dgain = vec![F::zero(); dm.dh];
                let mut dbias = vec![F::zero(); dm.dh];
                let draw = post_backward(&spec, &st.raw, &st.post, &dheads[bh * hl..(bh + 1) * hl], &mut dgain, &mut dbias);
                let core = streaming
                    .is_none()
                    .then(|| core_backward(&spec, &self.head_inputs(c, bh, dm), &st.core, &draw));
                HeadBack { dgain, dbias, draw, core }
            })
            .collect();

        let mut dq = vec![F::zero(); total];
        let mut dk = vec![F::zero(); total];
        let mut dv = vec![F::zero(); total];
        let two = c.view2.is_some();
        let mut dq2 = if two { vec![F::zero(); total] } else { Vec::new() };
        let mut dk2 = if two { vec![F::zero(); total] } else { Vec::new() };
        let per_head_beta = li.beta.map(|i| self.params.tensors[i].len() > 1).unwrap_or(false);

        for (bh, hb) in per_head.iter().enumerate() {
            let h = bh % dm.h;
            if let Some(i) = li.head_gain {
                add_into(&mut grads[i][h * dm.dh..(h + 1) * dm.dh], &hb.dgain);
            }
            if let Some(i) = li.head_bias {
                add_into(&mut grads[i][h * dm.dh..(h + 1) * dm.dh], &hb.dbias);
            }
            if let Some(cg) = &hb.core {
                let r = bh * hl..(bh + 1) * hl;
                dq[r.clone()].copy_from_slice(&cg.dq);
                dk[r.clone()].copy_from_slice(&cg.dk);
                dv[r.clone()].copy_from_slice(&cg.dv);
                if let (Some(a), Some(b)) = (&cg.dq2, &cg.dk2) {
                    dq2[r.clone()].copy_from_slice(a);
                    dk2[r].copy_from_slice(b);
                }
                if let Some(i) = li.beta {
                    let slot = if per_head_beta { h } else { 0 };
                    grads[i][slot] = F::narrow(grads[i][slot].widen() + cg.dbeta);
                }
                if let Some(i) = li.lambda {
                    grads[i][0] = F::narrow(grads[i][0].widen() + cg.dlambda);
                }
            }
        }

        if let Some(tiles) = streaming {
            let mut draw = Vec::with_capacity(total);
            for hb in &per_head {
                draw.extend_from_slice(&hb.draw);
            }
            let up = Self::as4(&draw, dm).to_owned();
            let params = self.kernel_params(li);
            let audit = ScratchAudit::new();
            let q = Self::as4(&c.view1.q, dm).to_owned();
            let k = Self::as4(&c.view1.k, dm).to_owned();
            let v = Self::as4(&c.v, dm).to_owned();
            let (dbeta, dlambda) = match &c.view2 {
                None => {
                    let g = tra_backward_streaming_audited(&q, &k, &v, &params, &up, tiles, false, &audit)?;
                    dq = g.dq.into_raw_vec_and_offset().0;
                    dk = g.dk.into_raw_vec_and_offset().0;
                    dv = g.dv.into_raw_vec_and_offset().0;
                    (g.dbeta, 0.0)
                }
                Some(v2) => {
                    let batch = AttnBatch::two_view(q, k, Self::as4(&v2.q, dm).to_owned(), Self::as4(&v2.k, dm).to_owned(), v)?;
                    let g = tda_backward_streaming(&batch, &params, &up, tiles, false, &audit)?;
                    dq = g.dq.into_raw_vec_and_offset().0;
                    dk = g.dk.into_raw_vec_and_offset().0;
                    dq2 = g.dq2.into_raw_vec_and_offset().0;
                    dk2 = g.dk2.into_raw_vec_and_offset().0;
                    dv = g.dv.into_raw_vec_and_offset().0;
                    (g.dbeta, g.dlambda)
                }
            };
            if let Some(i) = li.beta {
                grads[i][0] = F::narrow(grads[i][0].widen() + dbeta);
            }
            if let Some(i) = li.lambda {
                grads[i][0] = F::narrow(grads[i][0].widen() + dlambda);
            }
        }
        Ok((dq, dk, dq2, dk2, dv))
    }

    /// Signed per-layer weights `[B, H, T, T]`: `a1 - lambda a2` for
    /// differential mechanisms, the activation output otherwise.
    pub fn attention_weights(&self, tokens: &[u32], batch: usize, seq: usize) -> Result<Vec<Array4<f64>>> {
        let mut dense = self.clone();
        dense.config.backend = super::AttentionBackend::Dense;
        let cache = dense.forward(tokens, batch, seq)?;
        let dm = dense.dims(batch, seq);
        let mut out = Vec::with_capacity(cache.layers.len());
        for (li, lc) in dense.layout.layers.iter().zip(&cache.layers) {
            let mut w = Array4::zeros((dm.b, dm.h, dm.t, dm.t));
            for (bh, st) in lc.heads.iter().enumerate() {
                let spec = dense.head_spec(li, bh % dm.h, dm.t);
                let combined = combined_weights(&spec, &st.core);
                for (o, x) in w
                    .slice_mut(ndarray::s![bh / dm.h, bh % dm.h, .., ..])
                    .iter_mut()
                    .zip(&combined)
                {
                    *o = x.widen();
                }
            }
            out.push(w);
        }
        Ok(out)
    }

    /// Argmax continuation of `prompt`; ties go to the lowest token id.
    pub fn greedy_decode(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::Shape("prompt must contain at least one token".into()));
        }
        if prompt.len() + max_new > self.config.context_len {
            return Err(Error::ContextOverflow {
                len: prompt.len() + max_new,
                max: self.config.context_len,
            });
        }
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(max_new);
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        for _ in 0..max_new {
            let cache = self.forward(&seq, 1, seq.len())?;
            let last = &cache.hidden[(seq.len() - 1) * d..seq.len() * d];
            let logits = self.logits_from_hidden(last);
            let mut best = 0;
            for (i, x) in logits.iter().enumerate().take(v) {
                if *x > logits[best] {
                    best = i;
                }
            }
            out.push(best as u32);
            seq.push(best as u32);
        }
        Ok(out)
    }

    pub fn mechanism(&self) -> Mechanism {
        self.config.mechanism
    }
}

fn normalize_and_rope_backward<F: Scalar>(model: &Model<F>, view: &View<F>, dq: &mut [F], dk: &mut [F], dm: &Dims) {
    if model.config.mechanism.is_thresholded() {
        normalize_rows_backward(&view.q, &view.q_norm, dq, dm.dh);
        normalize_rows_backward(&view.k, &view.k_norm, dk, dm.dh);
    }
    for head in dq.chunks_mut(dm.head_len()).chain(dk.chunks_mut(dm.head_len())) {
        model.rope.apply(head, true);
    }
}

/// Mean cross-entropy and, when requested, its gradient with respect to the logits.
pub(crate) fn cross_entropy<F: Scalar>(logits: &[F], targets: &[u32], vocab: usize, grad: bool) -> (f64, Vec<F>) {
    let rows = targets.len();
    let mut loss = 0.0;
    let mut d = if grad { vec![F::zero(); logits.len()] } else { Vec::new() };
    let inv_rows = 1.0 / rows as f64;
    for (r, &tgt) in targets.iter().enumerate() {
        let row = &logits[r * vocab..(r + 1) * vocab];
        let max = row.iter().map(|x| x.widen()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|x| (x.widen() - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[tgt as usize].widen();
        if grad {
            for (j, x) in row.iter().enumerate() {
                let p = (x.widen() - lse).exp();
                let g = if j == tgt as usize { p - 1.0 } else { p };
                d[r * vocab + j] = F::narrow(g * inv_rows);
            }
        }
    }
    (loss * inv_rows, d)
}
