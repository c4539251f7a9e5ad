//! Random problem instances shared by the suites.

use std::collections::HashMap;

use crossalign::autodiff::{Graph, Tensor};
use crossalign::cache::{synthetic_encoder, EmbeddingCache};
use crossalign::descriptions::{stub_text, PromptKind};
use crossalign::losses::distance_loss;
use crossalign::models::{init_params, Arch, ModelBundle, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{central_diff, objective, rel_err, Batch};

#[derive(Clone)]
pub struct Instance {
    pub b: usize,
    pub d: usize,
    pub k: usize,
    pub features: Vec<f64>,
    pub w: Vec<f64>,
    pub text: Vec<f64>,
    pub tau: f64,
    pub normalize: bool,
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, d, k) = (rng.random_range(1..=8), rng.random_range(1..=16), rng.random_range(1..=16));
    let mut text: Vec<f64> = (0..b * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    for row in text.chunks_mut(k) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    Instance {
        b,
        d,
        k,
        features: (0..b * d).map(|_| rng.random_range(-3.0..3.0)).collect(),
        w: (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        text,
        tau: rng.random_range(0.05..2.0),
        normalize: rng.random_bool(0.5),
    }
}

pub fn library_loss(x: &Instance) -> f64 {
    let mut g = Graph::new();
    let f = g.leaf(Tensor::new(vec![x.b, x.d], x.features.clone()).unwrap().with_grad());
    let w = g.leaf(Tensor::new(vec![x.k, x.d], x.w.clone()).unwrap().with_grad());
    let l = distance_loss(&mut g, &x.text, f, w, x.tau, x.normalize).unwrap();
    g.value(l).item()
}

pub fn oracle_loss(x: &Instance) -> f64 {
    super::infonce(&x.features, &x.w, &x.text, x.b, x.d, x.k, x.tau, x.normalize)
}

pub const H: f64 = 1e-5;
/// Central differences carry ~1e-11 of round-off at this step, so the
/// relative error is taken against at least this magnitude.
pub const FLOOR: f64 = 1e-4;

pub struct Case {
    pub model: ModelBundle,
    pub batch: Batch,
    pub lambda: f64,
    pub tau: f64,
    pub normalize: bool,
}

pub fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = if seed % 2 == 0 { Arch::Mlp } else { Arch::TinyCnn };
    let (c, hw) = (rng.random_range(1..=2), rng.random_range(3..=5));
    let classes = rng.random_range(2..=5);
    let b = rng.random_range(2..=5);
    let cfg = ModelConfig {
        d: rng.random_range(2..=6),
        k: rng.random_range(2..=5),
        init_seed: seed,
        ..ModelConfig::new(arch, [c, hw, hw], classes)
    };
    let mut model = init_params(&cfg).unwrap();
    // non-zero biases so their gradients are exercised away from init
    for p in model.params_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let pixels = (0..b * c * hw * hw).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..b).map(|_| rng.random_range(0..classes)).collect();
    let text = (0..b * cfg.k).map(|_| rng.random_range(-1.0..1.0)).collect();
    Case {
        model,
        batch: Batch { pixels, labels, text },
        lambda: rng.random_range(0.1..1.0),
        tau: rng.random_range(0.2..1.5),
        normalize: rng.random_bool(0.5),
    }
}

/// Max over all parameter entries of the relative error between the
/// analytic gradient and a central difference.
pub fn max_gradient_error(case: &Case) -> (f64, usize) {
    let (_, grads) = objective(&case.model, &case.batch, case.lambda, case.tau, case.normalize, true);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (pi, grad) in grads.iter().enumerate() {
        let base = case.model.params()[pi].value.data().to_vec();
        let mut f = |x: &[f64]| {
            let mut m = case.model.clone();
            m.params_mut()[pi].value.data_mut().copy_from_slice(x);
            objective(&m, &case.batch, case.lambda, case.tau, case.normalize, false).0
        };
        for (i, &analytic) in grad.iter().enumerate() {
            let numeric = central_diff(&mut f, &base, i, H);
            worst = worst.max(rel_err(analytic, numeric, FLOOR));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Three Gaussian blobs in R^16 with unit spread and centres 10σ apart.
pub fn blobs(seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for c in 0..3 {
        for _ in 0..20 {
            for dim in 0..16 {
                let centre = if dim == c { 10.0 } else { 0.0 };
                x.push(centre + rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(c);
        }
    }
    (x, labels)
}

pub fn synthetic_cache(classes: usize, per_class: usize) -> (EmbeddingCache, HashMap<String, usize>) {
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut labels = HashMap::new();
    for c in 0..classes {
        for i in 0..per_class {
            let id = format!("c{c:02}_{i:03}");
            let v = synthetic_encoder(&stub_text(&id, c, PromptKind::Short), c, 16, 0.3, 0);
            rows.extend(v.iter().map(|&x| x as f32));
            labels.insert(id.clone(), c);
            ids.push(id);
        }
    }
    (EmbeddingCache::from_rows(16, ids, rows).unwrap(), labels)
}

