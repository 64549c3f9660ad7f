//! Fixtures and reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use circuitscope::graph::{Channel, EdgeId, NodeId};
use circuitscope::model::{ModelParams, Transformer};
use circuitscope::tasks::{MetricMode, MetricSpec, TaskExample, TaskSpec, ToyVocab};
use circuitscope::tensor::Mat;
use circuitscope::{build_model, Circuit, Family, Member, Model, ModelConfig, Normalization};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn config(n_layers: usize, n_heads: usize, d_model: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_heads,
        d_model,
        d_head: 4,
        d_mlp: 2 * d_model,
        vocab_size: 12,
        max_positions: 6,
        normalization: Normalization::None,
        seed,
    }
}

/// Randomly initialized model with every parameter multiplied by `scale`,
/// so that attention and GELU leave their near-linear regime.
pub fn scaled_model(cfg: &ModelConfig, scale: f64) -> Model {
    let mut m = build_model::<f64>(cfg).unwrap();
    for block in m.params.blocks_mut() {
        block.iter_mut().for_each(|x| *x *= scale);
    }
    m
}

/// Random clean/corrupted pairs that differ in at least one position.
pub fn random_task(vocab: usize, n: usize, len: usize, mode: MetricMode, seed: u64) -> TaskSpec {
    let mut r = rng(seed);
    let examples = (0..n)
        .map(|_| {
            let clean: Vec<u32> = (0..len).map(|_| r.gen_range(0..vocab as u32)).collect();
            let mut corrupted = clean.clone();
            let p = r.gen_range(0..len);
            corrupted[p] = (clean[p] + r.gen_range(1..vocab as u32)) % vocab as u32;
            let a = r.gen_range(0..vocab as u32);
            let b = (a + r.gen_range(1..vocab as u32)) % vocab as u32;
            TaskExample { clean, corrupted, metric: MetricSpec { mode, positive: vec![a], negative: vec![b] } }
        })
        .collect();
    TaskSpec { id: format!("random-{seed}"), family: Family::Formal, kind: None, examples, vocab: ToyVocab::vocab() }
}

/// One-layer, two-head model whose metric is, to fourth order, a separable
/// quadratic in every node output.
///
/// The embedding lives in dims 0..4; head `h` reads only dim `h` through a
/// uniform attention pattern (zero query and key weights) and writes dims
/// `4 + 2h..6 + 2h`. Every MLP unit reads a single residual dim with a small
/// weight, so GELU stays close to `x/2 + x^2/sqrt(2 pi)` and the metric has
/// no cross terms between different sources.
pub fn quadratic_testbed(seed: u64) -> (Model, TaskSpec) {
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_head: 2,
        d_mlp: 12,
        vocab_size: 12,
        max_positions: 6,
        normalization: Normalization::None,
        seed,
    };
    let mut r = rng(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let g = |r: &mut ChaCha8Rng| normal.sample(r);
    let mut p = ModelParams::<f64>::zeros(&cfg);
    p.tok_embed = Mat::from_fn(12, 8, |_, c| if c < 4 { g(&mut r) } else { 0.0 });
    p.pos_embed = Mat::from_fn(6, 8, |_, c| if c < 4 { 0.3 * g(&mut r) } else { 0.0 });
    for h in 0..2 {
        let hp = &mut p.layers[0].heads[h];
        hp.w_v = Mat::from_fn(8, 2, |row, _| if row == h { g(&mut r) } else { 0.0 });
        hp.w_o = Mat::from_fn(2, 8, |_, c| if c / 2 == 2 + h { g(&mut r) } else { 0.0 });
    }
    let mlp = &mut p.layers[0].mlp;
    mlp.w_in = Mat::from_fn(8, 12, |row, u| if u % 8 == row { 0.3 * g(&mut r) } else { 0.0 });
    mlp.w_out = Mat::from_fn(12, 8, |_, _| g(&mut r));
    p.unembed = Mat::from_fn(8, 12, |_, _| g(&mut r));
    let model = Transformer::new(cfg, p).unwrap();

    let metric = MetricSpec { mode: MetricMode::LogitDiff, positive: vec![1], negative: vec![2] };
    let examples = (0..8)
        .map(|_| {
            let clean: Vec<u32> = (0..4).map(|_| r.gen_range(0..12)).collect();
            let mut corrupted = clean.clone();
            corrupted[1] = r.gen_range(0..12);
            corrupted[3] = r.gen_range(0..12);
            TaskExample { clean, corrupted, metric: metric.clone() }
        })
        .collect();
    let task = TaskSpec { id: format!("quadratic-{seed}"), family: Family::Formal, kind: None, examples, vocab: ToyVocab::vocab() };
    (model, task)
}

pub fn random_edge_circuit(graph: &circuitscope::ComputationalGraph, p: f64, r: &mut ChaCha8Rng) -> Circuit {
    let members = graph.edges().iter().filter(|_| r.gen_bool(p)).map(|&e| (Member::Edge(e), 1.0));
    Circuit::from_members(circuitscope::Granularity::Edge, members, circuitscope::Provenance::new("random", "none"))
        .unwrap()
}

// ---------------------------------------------------------------------------
// Reference forward pass with explicit re-summation of every node input.

type Rows = Vec<Vec<f64>>;

fn mat(m: &Mat<f64>) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn matmul(a: &Rows, b: &Mat<f64>) -> Rows {
    a.iter()
        .map(|row| (0..b.cols()).map(|j| row.iter().enumerate().map(|(k, x)| x * b.get(k, j)).sum()).collect())
        .collect()
}

fn rms(x: &Rows, norm: Normalization) -> Rows {
    match norm {
        Normalization::None => x.clone(),
        Normalization::RmsInternal => x
            .iter()
            .map(|row| {
                let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
                let r = 1.0 / (ms + 1e-6).sqrt();
                row.iter().map(|v| v * r).collect()
            })
            .collect(),
    }
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn head(model: &Model, l: usize, h: usize, xq: &Rows, xk: &Rows, xv: &Rows) -> Rows {
    let hp = &model.params.layers[l].heads[h];
    let norm = model.config.normalization;
    let q = matmul(&rms(xq, norm), &hp.w_q);
    let k = matmul(&rms(xk, norm), &hp.w_k);
    let v = matmul(&rms(xv, norm), &hp.w_v);
    let scale = 1.0 / (model.config.d_head as f64).sqrt();
    let n = q.len();
    let mut mix = vec![vec![0.0; v[0].len()]; n];
    for i in 0..n {
        let s: Vec<f64> =
            (0..=i).map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - max).exp()).collect();
        let total: f64 = e.iter().sum();
        for j in 0..=i {
            for (d, m) in mix[i].iter_mut().enumerate() {
                *m += e[j] / total * v[j][d];
            }
        }
    }
    matmul(&mix, &hp.w_o)
}

fn mlp(model: &Model, l: usize, x: &Rows) -> Rows {
    let mp = &model.params.layers[l].mlp;
    let mut pre = matmul(&rms(x, model.config.normalization), &mp.w_in);
    for row in &mut pre {
        for (v, b) in row.iter_mut().zip(&mp.b_in) {
            *v = gelu(*v + b);
        }
    }
    let mut z = matmul(&pre, &mp.w_out);
    for row in &mut z {
        for (v, b) in row.iter_mut().zip(&mp.b_out) {
            *v += b;
        }
    }
    z
}

fn add(a: &mut Rows, b: &Rows) {
    for (x, y) in a.iter_mut().zip(b) {
        for (u, v) in x.iter_mut().zip(y) {
            *u += v;
        }
    }
}

/// Node outputs and final-position logits. `pick(src, dst, channel)` says
/// whether the channel input of `dst` reads `src` from this run (`true`) or
/// from `corrupted` (`false`); every input is rebuilt as a fresh sum over all
/// upstream producers.
pub fn reference_forward(
    model: &Model,
    tokens: &[u32],
    corrupted: Option<&[Rows]>,
    pick: &dyn Fn(usize, usize, usize) -> bool,
) -> (Vec<Rows>, Vec<f64>) {
    let cfg = &model.config;
    let a = cfg.n_heads + 1;
    let emb: Rows = tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| (0..cfg.d_model).map(|d| model.params.tok_embed.get(t as usize, d) + model.params.pos_embed.get(p, d)).collect())
        .collect();
    let mut outs: Vec<Rows> = vec![emb];
    let input = |outs: &[Rows], upto: usize, dst: usize, ch: usize| -> Rows {
        let mut x = vec![vec![0.0; cfg.d_model]; tokens.len()];
        for u in 0..upto {
            let from = match corrupted {
                Some(c) if !pick(u, dst, ch) => &c[u],
                _ => &outs[u],
            };
            add(&mut x, from);
        }
        x
    };
    for l in 0..cfg.n_layers {
        let upto = 1 + l * a;
        let mut layer = Vec::new();
        for h in 0..cfg.n_heads {
            let dst = 1 + l * a + h;
            let [xq, xk, xv] = [0, 1, 2].map(|c| input(&outs, upto, dst, c));
            layer.push(head(model, l, h, &xq, &xk, &xv));
        }
        outs.extend(layer);
        let dst = 1 + l * a + cfg.n_heads;
        let x = input(&outs, dst, dst, 0);
        outs.push(mlp(model, l, &x));
    }
    let n = outs.len();
    let x = input(&outs, n, n, 0);
    let x = rms(&x, cfg.normalization);
    let logits = matmul(&x[x.len() - 1..].to_vec(), &model.params.unembed).remove(0);
    (outs, logits)
}

pub fn cache_rows(outputs: &[Mat<f64>]) -> Vec<Rows> {
    outputs.iter().map(mat).collect()
}

/// `(src, dst, channel)` model indices of a split-mode edge circuit.
pub fn edge_triples(model: &Model, circuit: &Circuit) -> BTreeSet<(usize, usize, usize)> {
    let cfg = &model.config;
    let index = |n: &NodeId| match *n {
        NodeId::Input => 0,
        NodeId::Head { layer, head } => cfg.head_index(layer, head),
        NodeId::Mlp { layer } => cfg.mlp_index(layer),
        NodeId::Logits => cfg.logits_index(),
    };
    circuit
        .members
        .keys()
        .map(|m| match m {
            Member::Edge(EdgeId { src, dst, channel }) => {
                let c = match channel {
                    Channel::Q => 0,
                    Channel::K => 1,
                    Channel::V => 2,
                    Channel::Direct => 0,
                };
                (index(src), index(dst), c)
            }
            _ => panic!("edge circuits only"),
        })
        .collect()
}

/// Number of `k`-subsets of `0..n` (exact, small `n`).
pub fn choose(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}
