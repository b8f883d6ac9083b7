//! Finite-difference verification of every differentiable path: one case
//! per tape op, then sampled parameters of each model module under the
//! full training loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{finite_diff_check, finite_diff_params, Graph, ParamId, Var};
use crate::error::Result;
use crate::model::{Model, ModelConfig, Sample};
use crate::nn::{group_mask, Attention};
use crate::tensor::Tensor;
use crate::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseResult {
    /// `ops` for op-level cases, otherwise the owning module.
    pub module: String,
    /// Op or parameter name.
    pub name: String,
    pub max_rel_error: f64,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn failures(&self, tolerance: f64) -> Vec<&CaseResult> {
        // `!(e < tol)` also catches NaN
        self.cases.iter().filter(|c| !(c.max_rel_error < tolerance)).collect()
    }

    /// Worst case per module, in first-seen order.
    pub fn worst_by_module(&self) -> Vec<&CaseResult> {
        let mut out: Vec<&CaseResult> = Vec::new();
        for c in &self.cases {
            match out.iter_mut().find(|w| w.module == c.module) {
                Some(w) if !(c.max_rel_error <= w.max_rel_error) => *w = c,
                Some(_) => {}
                None => out.push(c),
            }
        }
        out
    }
}

type OpCase = (&'static str, Vec<usize>, Box<dyn Fn(&mut Graph<'static>, Var) -> Result<Var>>);

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn project(g: &mut Graph<'static>, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(rand(g.shape(y), seed));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn op_cases() -> Vec<OpCase> {
    vec![
        ("add", vec![2, 3], Box::new(|g, x| {
            let b = g.constant(rand(&[3], 1));
            let y = g.add(x, b)?;
            project(g, y, 50)
        })),
        ("sub", vec![2, 3], Box::new(|g, x| {
            let b = g.constant(rand(&[2, 1], 2));
            let y = g.sub(b, x)?;
            project(g, y, 51)
        })),
        ("mul", vec![2, 1, 3], Box::new(|g, x| {
            let b = g.constant(rand(&[4, 1], 3));
            let y = g.mul(x, b)?;
            project(g, y, 52)
        })),
        ("div", vec![2, 3], Box::new(|g, x| {
            let sq = g.mul(x, x)?;
            let d = g.add_scalar(sq, 1.0)?;
            let n = g.constant(rand(&[2, 3], 4));
            let y = g.div(n, d)?;
            project(g, y, 53)
        })),
        ("scale", vec![4], Box::new(|g, x| {
            let y = g.scale(x, -1.7)?;
            project(g, y, 54)
        })),
        ("add_scalar", vec![4], Box::new(|g, x| {
            let sq = g.mul(x, x)?;
            let y = g.add_scalar(sq, 0.3)?;
            project(g, y, 55)
        })),
        ("exp", vec![5], Box::new(|g, x| {
            let y = g.exp(x)?;
            project(g, y, 56)
        })),
        ("log", vec![5], Box::new(|g, x| {
            let sq = g.mul(x, x)?;
            let p = g.add_scalar(sq, 0.5)?;
            let y = g.log(p)?;
            project(g, y, 57)
        })),
        ("sqrt", vec![5], Box::new(|g, x| {
            let sq = g.mul(x, x)?;
            let p = g.add_scalar(sq, 0.5)?;
            let y = g.sqrt(p)?;
            project(g, y, 58)
        })),
        ("gelu", vec![7], Box::new(|g, x| {
            let y = g.gelu(x)?;
            project(g, y, 59)
        })),
        ("sum_axis", vec![2, 3, 4], Box::new(|g, x| {
            let y = g.sum_axis(x, 1)?;
            project(g, y, 60)
        })),
        ("sum", vec![2, 3], Box::new(|g, x| {
            let sq = g.mul(x, x)?;
            g.sum(sq)
        })),
        ("reshape", vec![2, 6], Box::new(|g, x| {
            let y = g.reshape(x, &[3, 4])?;
            project(g, y, 61)
        })),
        ("permute", vec![2, 3, 4], Box::new(|g, x| {
            let y = g.permute(x, &[2, 0, 1])?;
            project(g, y, 62)
        })),
        ("concat", vec![2, 3], Box::new(|g, x| {
            let b = g.constant(rand(&[2, 2], 5));
            let y = g.concat(&[b, x, x], 1)?;
            project(g, y, 63)
        })),
        ("narrow", vec![2, 5], Box::new(|g, x| {
            let y = g.narrow(x, 1, 1, 3)?;
            project(g, y, 64)
        })),
        ("index_select", vec![3, 2], Box::new(|g, x| {
            let y = g.index_select(x, 0, &[2, 0, 0, 1])?;
            project(g, y, 65)
        })),
        ("matmul", vec![2, 3, 4], Box::new(|g, x| {
            let b = g.constant(rand(&[4, 2], 6));
            let y = g.matmul(x, b)?;
            project(g, y, 66)
        })),
        ("softmax_last", vec![3, 5], Box::new(|g, x| {
            let y = g.softmax_last(x)?;
            project(g, y, 67)
        })),
        ("log_softmax_last", vec![3, 5], Box::new(|g, x| {
            let y = g.log_softmax_last(x)?;
            project(g, y, 68)
        })),
        ("layer_norm", vec![3, 6], Box::new(|g, x| {
            let gm = g.constant(rand(&[6], 7));
            let bt = g.constant(rand(&[6], 8));
            let y = g.layer_norm(x, gm, bt)?;
            project(g, y, 69)
        })),
        ("patch_extract", vec![4, 5, 5, 2], Box::new(|g, x| {
            let y = g.patches(x, [3, 3, 3], [2, 2, 2], [1, 1, 1])?;
            project(g, y, 70)
        })),
        ("resize_linear", vec![2, 3, 3, 2], Box::new(|g, x| {
            let y = g.trilinear(x, [4, 7, 5])?;
            project(g, y, 71)
        })),
        ("l2_normalize", vec![3, 4], Box::new(|g, x| {
            let y = g.l2_normalize(x)?;
            project(g, y, 72)
        })),
        ("masked_attention", vec![6, 4], Box::new(|g, x| {
            // two frames of three tokens; the mask blocks cross-frame scores
            let mut store = ParamStore::new();
            let attn = Attention::new(&mut store, "a", 4, 2, &mut ChaCha8Rng::seed_from_u64(9))?;
            let mask = g.constant(group_mask(&[0, 0, 0, 1, 1, 1]));
            let frozen = frozen_attention(&store, &attn, g)?;
            let y = attend(g, &frozen, x, mask)?;
            project(g, y, 73)
        })),
        ("kld_trilinear", vec![2, 2, 2], Box::new(|g, x| {
            let h = crate::heads::heatmaps_from_logits(g, x, [3, 4, 4])?;
            let gaze = [Some((0.2, 0.7)), None, Some((0.9, 0.1))];
            let (t, valid) = crate::heads::gaussian_target(&gaze, 4, 4, &crate::heads::TargetConfig { kernel: 3, sigma: 1.0 })?;
            crate::heads::kld_loss(g, h, &t, &valid)
        })),
    ]
}

/// Attention weights as graph constants, so an op-level case can use the
/// module without a parameter store.
struct FrozenAttention {
    q: (Var, Var),
    k: (Var, Var),
    v: (Var, Var),
    o: (Var, Var),
    heads: usize,
}

fn frozen_attention(store: &ParamStore, a: &Attention, g: &mut Graph<'static>) -> Result<FrozenAttention> {
    let mut c = |l: &crate::nn::Linear| {
        let w = g.constant(store.get(l.weight).clone());
        let b = g.constant(store.get(l.bias.expect("attention projections carry a bias")).clone());
        (w, b)
    };
    Ok(FrozenAttention { q: c(&a.query), k: c(&a.key), v: c(&a.value), o: c(&a.out), heads: a.heads })
}

fn attend(g: &mut Graph<'static>, a: &FrozenAttention, x: Var, mask: Var) -> Result<Var> {
    let [s, d] = <[usize; 2]>::try_from(g.shape(x)).expect("rank 2");
    let hd = d / a.heads;
    let split = |g: &mut Graph<'static>, p: (Var, Var)| -> Result<Var> {
        let y = g.linear(x, p.0, Some(p.1))?;
        let y = g.reshape(y, &[s, a.heads, hd])?;
        g.permute(y, &[1, 0, 2])
    };
    let (q, k, v) = (split(g, a.q)?, split(g, a.k)?, split(g, a.v)?);
    let kt = g.permute(k, &[0, 2, 1])?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (hd as f64).sqrt())?;
    let scores = g.add(scores, mask)?;
    let p = g.softmax_last(scores)?;
    let y = g.matmul(p, v)?;
    let y = g.permute(y, &[1, 0, 2])?;
    let y = g.reshape(y, &[s, d])?;
    g.linear(y, a.o.0, Some(a.o.1))
}

pub fn run_op_cases(h: f64) -> Result<Vec<CaseResult>> {
    op_cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, shape, f))| {
            let x = rand(&shape, 1000 + i as u64);
            let r = finite_diff_check(f, &x, h)?;
            Ok(CaseResult {
                module: "ops".into(),
                name: name.into(),
                max_rel_error: r.max_rel_error,
                analytic: r.analytic,
                numeric: r.numeric,
                checked: r.checked,
            })
        })
        .collect()
}

/// Module a parameter belongs to: the first name component, or the first
/// two for fusion submodules.
pub fn module_of(name: &str) -> String {
    let mut parts = name.split('.');
    let first = parts.next().unwrap_or_default();
    match (first, parts.next()) {
        ("fusion", Some(sub @ ("spatial" | "temporal"))) => format!("fusion.{sub}"),
        _ => first.to_owned(),
    }
}

/// A deterministic random batch shaped for `cfg`.
pub fn random_batch(cfg: &ModelConfig, n: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [h, w] = cfg.image();
    let a = cfg.audio.input;
    (0..n)
        .map(|i| {
            let frames = Tensor::uniform(&[cfg.video.input[0], h, w, 3], 0.0, 1.0, &mut rng);
            let specs = Tensor::uniform(&[a[0], a[1], a[2]], 0.0, 2.0, &mut rng);
            let gaze = (0..cfg.t_out)
                .map(|k| (k != 3 || i != 0).then_some((0.15 + 0.08 * k as f64, 0.3 + 0.05 * i as f64)))
                .collect();
            Sample::new(frames, specs, gaze, cfg)
        })
        .collect()
}

/// Probes the `per_tensor` largest-gradient entries of every parameter
/// tensor under the total loss on a random batch of two.
pub fn run_model_cases(cfg: &ModelConfig, seed: u64, per_tensor: usize, h: f64) -> Result<Vec<CaseResult>> {
    let (model, store) = Model::new(cfg, seed)?;
    let batch = random_batch(cfg, 2, seed.wrapping_add(1))?;
    let refs: Vec<&Sample> = batch.iter().collect();
    let loss = |g: &mut Graph<'_>| model.batch_loss(g, &refs).map(|l| l.total);
    let analytic = {
        let mut g = Graph::with_params(&store);
        let out = loss(&mut g)?;
        g.backward(out)?.params(&g)
    };
    let selection: Vec<(ParamId, Vec<usize>)> = store
        .ids()
        .map(|id| {
            let grad = analytic.iter().find(|(p, _)| *p == id).map(|(_, t)| t.data().to_vec()).unwrap_or_default();
            let mut idx: Vec<usize> = (0..store.get(id).numel()).collect();
            idx.sort_by(|&a, &b| {
                let (ga, gb) = (grad.get(a).map_or(0.0, |v| v.abs()), grad.get(b).map_or(0.0, |v| v.abs()));
                gb.total_cmp(&ga).then(a.cmp(&b))
            });
            idx.truncate(per_tensor);
            (id, idx)
        })
        .collect();
    let checks = finite_diff_params(&store, loss, &selection, h)?;
    Ok(checks
        .into_iter()
        .map(|c| CaseResult {
            module: module_of(&c.name),
            name: c.name,
            max_rel_error: c.report.max_rel_error,
            analytic: c.report.analytic,
            numeric: c.report.numeric,
            checked: c.report.checked,
        })
        .collect())
}

/// Op cases followed by model cases.
pub fn run_suite(cfg: &ModelConfig, seed: u64, per_tensor: usize) -> Result<SuiteReport> {
    let mut cases = run_op_cases(1e-5)?;
    cases.extend(run_model_cases(cfg, seed, per_tensor, 1e-5)?);
    Ok(SuiteReport { cases })
}
