use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;

use super::{gelu, HeadParams, MlpParams, Normalization, Transformer};

const RMS_EPS: f64 = 1e-6;

/// Clean or corrupted activations of one forward pass.
///
/// `outputs[u]` is the residual-stream contribution of producer node `u`
/// (input, heads, MLPs in graph order), shape `[positions × d_model]`.
/// `residuals` holds the residual sum read by each group of nodes:
/// index `2l` feeds the heads of layer `l`, `2l + 1` feeds MLP `l`, and the
/// last entry feeds the logits node.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCache<S> {
    tokens: Vec<u32>,
    outputs: Vec<Mat<S>>,
    residuals: Vec<Mat<S>>,
    logits: Mat<S>,
}

impl<S: Scalar> ActivationCache<S> {
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn positions(&self) -> usize {
        self.tokens.len()
    }

    pub fn outputs(&self) -> &[Mat<S>] {
        &self.outputs
    }

    pub fn output(&self, node: usize) -> &Mat<S> {
        &self.outputs[node]
    }

    pub fn residuals(&self) -> &[Mat<S>] {
        &self.residuals
    }

    /// Residual sum entering the logits node.
    pub fn final_residual(&self) -> &Mat<S> {
        self.residuals.last().expect("at least the final residual")
    }

    pub fn logits(&self) -> &Mat<S> {
        &self.logits
    }

    pub fn final_logits(&self) -> &[S] {
        self.logits.row(self.logits.rows() - 1)
    }
}

/// In-circuit sources of every `(target node, input channel)` pair.
///
/// Channels are indexed per node kind: heads have `q = 0, k = 1, v = 2`,
/// MLPs and the logits node have a single channel `0`, the input node none.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMask {
    sources: Vec<Vec<Vec<usize>>>,
}

impl EdgeMask {
    pub fn empty(config: &super::ModelConfig) -> Self {
        let mut sources = vec![Vec::new()];
        for _ in 0..config.n_layers {
            for _ in 0..config.n_heads {
                sources.push(vec![Vec::new(); 3]);
            }
            sources.push(vec![Vec::new()]);
        }
        sources.push(vec![Vec::new()]);
        Self { sources }
    }

    pub fn insert(&mut self, target: usize, channel: usize, source: usize) {
        let list = &mut self.sources[target][channel];
        if let Err(pos) = list.binary_search(&source) {
            list.insert(pos, source);
        }
    }

    pub fn remove(&mut self, target: usize, channel: usize, source: usize) {
        let list = &mut self.sources[target][channel];
        if let Ok(pos) = list.binary_search(&source) {
            list.remove(pos);
        }
    }

    pub fn sources(&self, target: usize, channel: usize) -> &[usize] {
        &self.sources[target][channel]
    }

    pub fn len(&self) -> usize {
        self.sources.iter().flatten().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Intervention applied during a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Patch<'a, S> {
    None,
    /// Edge-level mixing: each channel input is the sum of clean outputs over
    /// in-circuit edges plus corrupted outputs over the rest.
    Edges { mask: &'a EdgeMask, corrupted: &'a ActivationCache<S> },
    /// Outputs of nodes with `keep[u] == false` are replaced by their
    /// corrupted values.
    Nodes { keep: &'a [bool], corrupted: &'a ActivationCache<S> },
    /// Single output dimensions with `keep[u][d] == false` are replaced by
    /// their corrupted values.
    Neurons { keep: &'a [Vec<bool>], corrupted: &'a ActivationCache<S> },
    /// Adds `offset` to one channel input of one node, leaving every other
    /// reader of the residual stream untouched.
    ChannelOffset { node: usize, channel: usize, offset: &'a Mat<S> },
    /// Adds `offset` to every channel input of one node.
    InputOffset { node: usize, offset: &'a Mat<S> },
    /// Adds `offset` to the output of one producer node.
    OutputOffset { node: usize, offset: &'a Mat<S> },
}

impl<'a, S: Scalar> Patch<'a, S> {
    fn corrupted(&self) -> Option<&'a ActivationCache<S>> {
        match *self {
            Patch::Edges { corrupted, .. }
            | Patch::Nodes { corrupted, .. }
            | Patch::Neurons { corrupted, .. } => Some(corrupted),
            _ => None,
        }
    }

    fn patch_output(&self, node: usize, z: &mut Mat<S>) {
        match *self {
            Patch::Nodes { keep, corrupted } if !keep[node] => {
                z.as_mut_slice().copy_from_slice(corrupted.outputs[node].as_slice());
            }
            Patch::Neurons { keep, corrupted } => {
                let mask = &keep[node];
                if mask.iter().all(|&k| k) {
                    return;
                }
                let src = &corrupted.outputs[node];
                for p in 0..z.rows() {
                    let (dst, from) = (z.row_mut(p), src.row(p));
                    for (d, &k) in mask.iter().enumerate() {
                        if !k {
                            dst[d] = from[d];
                        }
                    }
                }
            }
            Patch::OutputOffset { node: target, offset } if target == node => z.add_assign(offset),
            _ => {}
        }
    }

    /// Input of `(node, channel)` given the running residual `resid`, or
    /// `None` when the residual itself should be used unchanged.
    fn channel_input(
        &self,
        node: usize,
        channel: usize,
        snapshot: usize,
        resid: &Mat<S>,
        outputs: &[Mat<S>],
    ) -> Option<Mat<S>> {
        match *self {
            Patch::Edges { mask, corrupted } => {
                let mut x = corrupted.residuals[snapshot].clone();
                for &u in mask.sources(node, channel) {
                    x.add_difference(&outputs[u], &corrupted.outputs[u]);
                }
                Some(x)
            }
            Patch::ChannelOffset { node: n, channel: c, offset } if n == node && c == channel => {
                let mut x = resid.clone();
                x.add_assign(offset);
                Some(x)
            }
            Patch::InputOffset { node: n, offset } if n == node => {
                let mut x = resid.clone();
                x.add_assign(offset);
                Some(x)
            }
            _ => None,
        }
    }
}

/// Logits and node outputs of a patched run.
#[derive(Clone, Debug)]
pub struct PatchedRun<S> {
    pub outputs: Vec<Mat<S>>,
    pub logits: Mat<S>,
}

impl<S: Scalar> PatchedRun<S> {
    pub fn final_logits(&self) -> &[S] {
        self.logits.row(self.logits.rows() - 1)
    }
}

/// Normalized node input; `inv_rms` is absent without normalization.
#[derive(Clone, Debug)]
pub(crate) struct Normed<S> {
    pub y: Mat<S>,
    pub inv_rms: Option<Vec<S>>,
}

pub(crate) fn normalize<S: Scalar>(x: Mat<S>, mode: Normalization) -> Normed<S> {
    match mode {
        Normalization::None => Normed { y: x, inv_rms: None },
        Normalization::RmsInternal => {
            let mut y = x;
            let d = S::lit(y.cols() as f64);
            let mut inv = Vec::with_capacity(y.rows());
            for p in 0..y.rows() {
                let row = y.row_mut(p);
                let ms = row.iter().map(|&v| v * v).sum::<S>() / d;
                let r = S::one() / (ms + S::lit(RMS_EPS)).sqrt();
                row.iter_mut().for_each(|v| *v *= r);
                inv.push(r);
            }
            Normed { y, inv_rms: Some(inv) }
        }
    }
}

pub(crate) struct HeadTrace<S> {
    pub q_in: Normed<S>,
    pub k_in: Normed<S>,
    pub v_in: Normed<S>,
    pub q: Mat<S>,
    pub k: Mat<S>,
    pub v: Mat<S>,
    pub attn: Mat<S>,
    pub mix: Mat<S>,
}

pub(crate) struct MlpTrace<S> {
    pub x: Normed<S>,
    pub pre: Mat<S>,
    pub act: Mat<S>,
}

pub(crate) enum NodeTrace<S> {
    Input,
    Head(Box<HeadTrace<S>>),
    Mlp(Box<MlpTrace<S>>),
}

pub(crate) struct Pass<S> {
    pub tokens: Vec<u32>,
    pub outputs: Vec<Mat<S>>,
    pub residuals: Vec<Mat<S>>,
    pub logits_in: Normed<S>,
    pub logits: Mat<S>,
    pub traces: Vec<NodeTrace<S>>,
}

impl<S: Scalar> Pass<S> {
    pub fn into_cache(self) -> ActivationCache<S> {
        ActivationCache {
            tokens: self.tokens,
            outputs: self.outputs,
            residuals: self.residuals,
            logits: self.logits,
        }
    }
}

fn head_forward<S: Scalar>(
    hp: &HeadParams<S>,
    inputs: [Mat<S>; 3],
    norm: Normalization,
    d_head: usize,
) -> (Mat<S>, HeadTrace<S>) {
    let [xq, xk, xv] = inputs;
    let q_in = normalize(xq, norm);
    let k_in = normalize(xk, norm);
    let v_in = normalize(xv, norm);
    let q = q_in.y.matmul(&hp.w_q);
    let k = k_in.y.matmul(&hp.w_k);
    let v = v_in.y.matmul(&hp.w_v);
    let scale = S::one() / S::lit(d_head as f64).sqrt();
    let mut attn = Mat::matmul_nt(&q, &k);
    let n = attn.rows();
    for i in 0..n {
        let row = attn.row_mut(i);
        let mut max = S::neg_infinity();
        for s in row[..=i].iter_mut() {
            *s *= scale;
            max = max.max(*s);
        }
        let mut total = S::zero();
        for s in row[..=i].iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        for s in row[..=i].iter_mut() {
            *s /= total;
        }
        for s in row[i + 1..].iter_mut() {
            *s = S::zero();
        }
    }
    let mix = attn.matmul(&v);
    let z = mix.matmul(&hp.w_o);
    (z, HeadTrace { q_in, k_in, v_in, q, k, v, attn, mix })
}

fn mlp_forward<S: Scalar>(mp: &MlpParams<S>, x: Mat<S>, norm: Normalization) -> (Mat<S>, MlpTrace<S>) {
    let x = normalize(x, norm);
    let mut pre = x.y.matmul(&mp.w_in);
    for p in 0..pre.rows() {
        for (h, &b) in pre.row_mut(p).iter_mut().zip(&mp.b_in) {
            *h += b;
        }
    }
    let mut act = pre.clone();
    act.as_mut_slice().iter_mut().for_each(|a| *a = gelu(*a));
    let mut z = act.matmul(&mp.w_out);
    for p in 0..z.rows() {
        for (o, &b) in z.row_mut(p).iter_mut().zip(&mp.b_out) {
            *o += b;
        }
    }
    (z, MlpTrace { x, pre, act })
}

impl<S: Scalar> Transformer<S> {
    /// Token plus learned position embedding: the input node's output.
    pub fn embed(&self, tokens: &[u32]) -> Result<Mat<S>> {
        self.check_tokens(tokens)?;
        let p = &self.params;
        Ok(Mat::from_fn(tokens.len(), self.config.d_model, |pos, d| {
            p.tok_embed.get(tokens[pos] as usize, d) + p.pos_embed.get(pos, d)
        }))
    }

    /// Plain forward pass recording every node output.
    pub fn forward_with_cache(&self, tokens: &[u32]) -> Result<ActivationCache<S>> {
        Ok(self.run(tokens, None, &Patch::None)?.into_cache())
    }

    pub fn logits(&self, tokens: &[u32]) -> Result<Mat<S>> {
        Ok(self.run(tokens, None, &Patch::None)?.logits)
    }

    /// Forward pass under an intervention. Node inputs are recomputed in
    /// topological order; corrupted values always come from the supplied
    /// corrupted cache, never from the patched run itself.
    pub fn forward_patched(&self, tokens: &[u32], patch: &Patch<'_, S>) -> Result<PatchedRun<S>> {
        let pass = self.run(tokens, None, patch)?;
        Ok(PatchedRun { outputs: pass.outputs, logits: pass.logits })
    }

    /// Forward pass whose input-node output is replaced by `embedding`.
    pub fn forward_from_embedding(&self, tokens: &[u32], embedding: &Mat<S>) -> Result<ActivationCache<S>> {
        Ok(self.run(tokens, Some(embedding), &Patch::None)?.into_cache())
    }

    pub(crate) fn run(
        &self,
        tokens: &[u32],
        input_override: Option<&Mat<S>>,
        patch: &Patch<'_, S>,
    ) -> Result<Pass<S>> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let (positions, d) = (tokens.len(), cfg.d_model);
        if let Some(c) = patch.corrupted() {
            if c.tokens.len() != positions {
                return Err(Error::ShapeMismatch);
            }
        }
        let norm = cfg.normalization;
        let mut outputs: Vec<Mat<S>> = Vec::with_capacity(cfg.n_producers());
        let mut traces: Vec<NodeTrace<S>> = Vec::with_capacity(cfg.n_producers());

        let mut emb = match input_override {
            Some(e) => {
                if e.shape() != (positions, d) {
                    return Err(Error::ShapeMismatch);
                }
                e.clone()
            }
            None => self.embed(tokens)?,
        };
        patch.patch_output(0, &mut emb);
        let mut resid = emb.clone();
        outputs.push(emb);
        traces.push(NodeTrace::Input);

        let mut residuals = Vec::with_capacity(2 * cfg.n_layers + 1);
        for (l, layer) in self.params.layers.iter().enumerate() {
            residuals.push(resid.clone());
            let mut layer_sum = Mat::zeros(positions, d);
            for (h, hp) in layer.heads.iter().enumerate() {
                let node = cfg.head_index(l, h);
                let inputs = [0, 1, 2].map(|c| {
                    patch
                        .channel_input(node, c, 2 * l, &resid, &outputs)
                        .unwrap_or_else(|| resid.clone())
                });
                let (mut z, trace) = head_forward(hp, inputs, norm, cfg.d_head);
                patch.patch_output(node, &mut z);
                layer_sum.add_assign(&z);
                outputs.push(z);
                traces.push(NodeTrace::Head(Box::new(trace)));
            }
            resid.add_assign(&layer_sum);
            residuals.push(resid.clone());

            let node = cfg.mlp_index(l);
            let x = patch
                .channel_input(node, 0, 2 * l + 1, &resid, &outputs)
                .unwrap_or_else(|| resid.clone());
            let (mut z, trace) = mlp_forward(&layer.mlp, x, norm);
            patch.patch_output(node, &mut z);
            resid.add_assign(&z);
            outputs.push(z);
            traces.push(NodeTrace::Mlp(Box::new(trace)));
        }
        residuals.push(resid.clone());

        let x = patch
            .channel_input(cfg.logits_index(), 0, 2 * cfg.n_layers, &resid, &outputs)
            .unwrap_or(resid);
        let logits_in = normalize(x, norm);
        let logits = logits_in.y.matmul(&self.params.unembed);
        Ok(Pass { tokens: tokens.to_vec(), outputs, residuals, logits_in, logits, traces })
    }
}
