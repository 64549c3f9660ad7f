use crate::error::Result;
use crate::scalar::Scalar;
use crate::tasks::MetricSpec;
use crate::tensor::Mat;

use super::forward::{ActivationCache, HeadTrace, MlpTrace, NodeTrace, Normed, Pass, Patch};
use super::{gelu_grad, HeadParams, MlpParams, ModelParams, Transformer};

/// Gradients of a scalar metric at the final position.
///
/// `inputs[v][c]` is the partial derivative with respect to channel `c` of
/// node `v`'s input, holding every other reader of the residual stream
/// fixed; this is the factor that multiplies `z'_u - z_u` for edge `(u, v)`.
/// `outputs[u]` is the total derivative with respect to producer `u`'s
/// output, which equals the sum of `inputs[v][c]` over all `(v, c)` that
/// read `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricGradients<S> {
    pub inputs: Vec<Vec<Mat<S>>>,
    pub outputs: Vec<Mat<S>>,
}

impl<S: Scalar> MetricGradients<S> {
    /// Gradient for `(node, channel)`; `channel == None` sums all channels,
    /// which is the gradient of an undivided head input.
    pub fn channel(&self, node: usize, channel: Option<usize>) -> Mat<S> {
        match channel {
            Some(c) => self.inputs[node][c].clone(),
            None => {
                let mut total = self.inputs[node][0].clone();
                for g in &self.inputs[node][1..] {
                    total.add_assign(g);
                }
                total
            }
        }
    }

    pub(crate) fn accumulate(&mut self, other: &MetricGradients<S>) {
        for (a, b) in self.inputs.iter_mut().zip(&other.inputs) {
            for (x, y) in a.iter_mut().zip(b) {
                x.add_assign(y);
            }
        }
        for (x, y) in self.outputs.iter_mut().zip(&other.outputs) {
            x.add_assign(y);
        }
    }

    pub(crate) fn scale(&mut self, s: S) {
        self.inputs.iter_mut().flatten().for_each(|m| m.scale(s));
        self.outputs.iter_mut().for_each(|m| m.scale(s));
    }
}

fn normalize_back<S: Scalar>(n: &Normed<S>, mut dy: Mat<S>) -> Mat<S> {
    let Some(inv) = &n.inv_rms else { return dy };
    let d = S::lit(dy.cols() as f64);
    for (p, &r) in inv.iter().enumerate() {
        let y = n.y.row(p);
        let row = dy.row_mut(p);
        let s = y.iter().zip(row.iter()).map(|(&a, &b)| a * b).sum::<S>() / d;
        for (g, &yj) in row.iter_mut().zip(y) {
            *g = r * (*g - yj * s);
        }
    }
    dy
}

fn head_backward<S: Scalar>(
    hp: &HeadParams<S>,
    t: &HeadTrace<S>,
    dz: &Mat<S>,
    d_head: usize,
    grads: Option<&mut HeadParams<S>>,
) -> [Mat<S>; 3] {
    let n = t.attn.rows();
    let scale = S::one() / S::lit(d_head as f64).sqrt();
    let dmix = Mat::matmul_nt(dz, &hp.w_o);
    let dattn = Mat::matmul_nt(&dmix, &t.v);
    let mut dv = Mat::zeros(n, d_head);
    dv.matmul_tn_acc(&t.attn, &dmix);
    let mut dscores = Mat::zeros(n, n);
    for i in 0..n {
        let a = t.attn.row(i);
        let da = dattn.row(i);
        let inner: S = a[..=i].iter().zip(&da[..=i]).map(|(&x, &y)| x * y).sum();
        let out = dscores.row_mut(i);
        for j in 0..=i {
            out[j] = a[j] * (da[j] - inner) * scale;
        }
    }
    let dq = dscores.matmul(&t.k);
    let mut dk = Mat::zeros(n, d_head);
    dk.matmul_tn_acc(&dscores, &t.q);
    if let Some(g) = grads {
        g.w_o.matmul_tn_acc(&t.mix, dz);
        g.w_q.matmul_tn_acc(&t.q_in.y, &dq);
        g.w_k.matmul_tn_acc(&t.k_in.y, &dk);
        g.w_v.matmul_tn_acc(&t.v_in.y, &dv);
    }
    [
        normalize_back(&t.q_in, Mat::matmul_nt(&dq, &hp.w_q)),
        normalize_back(&t.k_in, Mat::matmul_nt(&dk, &hp.w_k)),
        normalize_back(&t.v_in, Mat::matmul_nt(&dv, &hp.w_v)),
    ]
}

fn mlp_backward<S: Scalar>(
    mp: &MlpParams<S>,
    t: &MlpTrace<S>,
    dz: &Mat<S>,
    grads: Option<&mut MlpParams<S>>,
) -> Mat<S> {
    let mut dpre = Mat::matmul_nt(dz, &mp.w_out);
    for (g, &x) in dpre.as_mut_slice().iter_mut().zip(t.pre.as_slice()) {
        *g *= gelu_grad(x);
    }
    if let Some(g) = grads {
        g.w_out.matmul_tn_acc(&t.act, dz);
        for p in 0..dz.rows() {
            for (b, &v) in g.b_out.iter_mut().zip(dz.row(p)) {
                *b += v;
            }
            for (b, &v) in g.b_in.iter_mut().zip(dpre.row(p)) {
                *b += v;
            }
        }
        g.w_in.matmul_tn_acc(&t.x.y, &dpre);
    }
    normalize_back(&t.x, Mat::matmul_nt(&dpre, &mp.w_in))
}

impl<S: Scalar> Transformer<S> {
    /// Reverse pass from a gradient on the logits. Parameter gradients are
    /// accumulated into `param_grads` when given.
    pub(crate) fn backward(
        &self,
        pass: &Pass<S>,
        dlogits: &Mat<S>,
        mut param_grads: Option<&mut ModelParams<S>>,
    ) -> MetricGradients<S> {
        let cfg = &self.config;
        let n_prod = cfg.n_producers();
        let mut inputs: Vec<Vec<Mat<S>>> = vec![Vec::new(); n_prod + 1];
        let mut outputs: Vec<Mat<S>> = vec![Mat::zeros(0, 0); n_prod];

        if let Some(g) = param_grads.as_deref_mut() {
            g.unembed.matmul_tn_acc(&pass.logits_in.y, dlogits);
        }
        let g_logits = normalize_back(&pass.logits_in, Mat::matmul_nt(dlogits, &self.params.unembed));
        let mut resid_grad = g_logits.clone();
        inputs[n_prod] = vec![g_logits];

        for (l, layer) in self.params.layers.iter().enumerate().rev() {
            let node = cfg.mlp_index(l);
            let NodeTrace::Mlp(trace) = &pass.traces[node] else { unreachable!("mlp trace") };
            outputs[node] = resid_grad.clone();
            let g = mlp_backward(
                &layer.mlp,
                trace,
                &resid_grad,
                param_grads.as_deref_mut().map(|p| &mut p.layers[l].mlp),
            );
            resid_grad.add_assign(&g);
            inputs[node] = vec![g];

            let mut layer_grad = Mat::zeros(resid_grad.rows(), resid_grad.cols());
            for (h, hp) in layer.heads.iter().enumerate() {
                let node = cfg.head_index(l, h);
                let NodeTrace::Head(trace) = &pass.traces[node] else { unreachable!("head trace") };
                outputs[node] = resid_grad.clone();
                let gs = head_backward(
                    hp,
                    trace,
                    &resid_grad,
                    cfg.d_head,
                    param_grads.as_deref_mut().map(|p| &mut p.layers[l].heads[h]),
                );
                for g in &gs {
                    layer_grad.add_assign(g);
                }
                inputs[node] = gs.into();
            }
            resid_grad.add_assign(&layer_grad);
        }

        if let Some(g) = param_grads {
            for (p, &tok) in pass.tokens.iter().enumerate() {
                for (e, &v) in g.tok_embed.row_mut(tok as usize).iter_mut().zip(resid_grad.row(p)) {
                    *e += v;
                }
                for (e, &v) in g.pos_embed.row_mut(p).iter_mut().zip(resid_grad.row(p)) {
                    *e += v;
                }
            }
        }
        outputs[0] = resid_grad;
        MetricGradients { inputs, outputs }
    }

    fn metric_backward(&self, pass: &Pass<S>, metric: &MetricSpec) -> Result<(S, MetricGradients<S>)> {
        metric.check_vocab(self.config.vocab_size)?;
        let last = pass.logits.rows() - 1;
        let row = pass.logits.row(last);
        let value = metric.value(row);
        let mut dlogits = Mat::zeros(pass.logits.rows(), pass.logits.cols());
        dlogits.row_mut(last).copy_from_slice(&metric.gradient(row));
        Ok((value, self.backward(pass, &dlogits, None)))
    }

    /// Clean forward pass, metric value at the final position, and metric
    /// gradients for every node input channel and producer output.
    pub fn metric_gradients(
        &self,
        tokens: &[u32],
        metric: &MetricSpec,
    ) -> Result<(ActivationCache<S>, S, MetricGradients<S>)> {
        let pass = self.run(tokens, None, &Patch::None)?;
        let (value, grads) = self.metric_backward(&pass, metric)?;
        Ok((pass.into_cache(), value, grads))
    }

    /// As [`Transformer::metric_gradients`] but with the input node's output
    /// replaced by `embedding` and everything downstream recomputed.
    pub fn metric_gradients_from_embedding(
        &self,
        tokens: &[u32],
        embedding: &Mat<S>,
        metric: &MetricSpec,
    ) -> Result<(S, MetricGradients<S>)> {
        let pass = self.run(tokens, Some(embedding), &Patch::None)?;
        self.metric_backward(&pass, metric)
    }
}
