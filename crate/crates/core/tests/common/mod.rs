//! Reference implementations used as test oracles. Everything here is
//! written from the defining formulas, with compensated (double-double)
//! accumulation, and shares no code with the library kernels.
#![allow(dead_code)]

use crossalign::autodiff::Graph;
use crossalign::losses::{distance_loss, total_objective};
use crossalign::models::ModelBundle;

/// Unevaluated sum `hi + lo` with |lo| ≤ ulp(hi)/2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    pub fn new(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    fn renorm(hi: f64, lo: f64) -> Self {
        let (hi, lo) = two_sum(hi, lo);
        Dd { hi, lo }
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        Dd::renorm(s, e + self.lo + o.lo)
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(Dd { hi: -o.hi, lo: -o.lo })
    }

    pub fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        Dd::renorm(p, e + self.hi * o.lo + self.lo * o.hi)
    }

    pub fn div(self, o: Dd) -> Dd {
        let q = self.hi / o.hi;
        // one correction step
        let r = self.sub(o.mul(Dd::new(q)));
        Dd::renorm(q, r.hi / o.hi)
    }

    pub fn sqrt(self) -> Dd {
        if self.hi <= 0.0 {
            return Dd::ZERO;
        }
        let x = self.hi.sqrt();
        let r = self.sub(Dd::new(x).mul(Dd::new(x)));
        Dd::renorm(x, r.hi / (2.0 * x))
    }

    /// exp with the high part through libm and a first-order correction
    /// for the low part.
    pub fn exp(self) -> Dd {
        let e = self.hi.exp();
        Dd::renorm(e, e * self.lo)
    }

    pub fn ln(self) -> Dd {
        let l = self.hi.ln();
        // Newton step on exp(y) = x
        let y = Dd::new(l);
        y.add(self.div(y.exp())).sub(Dd::new(1.0))
    }

    pub fn f(self) -> f64 {
        self.hi + self.lo
    }
}

pub fn dd_dot(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> Dd {
    a.into_iter()
        .zip(b)
        .fold(Dd::ZERO, |acc, (x, y)| acc.add(Dd::new(x).mul(Dd::new(y))))
}

/// `a (m×k) · b (k×n)` by the triple loop.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = dd_dot((0..k).map(|t| a[i * k + t]), (0..k).map(|t| b[t * n + j])).f();
        }
    }
    out
}

/// Cross-correlation by direct summation over every tap, zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    input: &[f64],
    kernel: &[f64],
    [b, c, h, w]: [usize; 4],
    [o, kh, kw]: [usize; 3],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for n in 0..b {
        for f in 0..o {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = Dd::ZERO;
                    for ch in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (x * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let v = input[((n * c + ch) * h + iy as usize) * w + ix as usize];
                                let k = kernel[((f * c + ch) * kh + i) * kw + j];
                                acc = acc.add(Dd::new(v).mul(Dd::new(k)));
                            }
                        }
                    }
                    out[((n * o + f) * oh + y) * ow + x] = acc.f();
                }
            }
        }
    }
    (out, [b, o, oh, ow])
}

/// Mean over rows of `log Σ_j exp(z_j) − z_label`.
pub fn cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    let mut total = Dd::ZERO;
    for (row, &l) in logits.chunks(classes).zip(labels) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s = row.iter().fold(Dd::ZERO, |acc, &z| acc.add(Dd::new(z - m).exp()));
        total = total.add(s.ln().add(Dd::new(m)).sub(Dd::new(row[l])));
    }
    total.div(Dd::new(labels.len() as f64)).f()
}

/// The alignment loss evaluated term by term: for each sample i,
/// `p_i = W f_i` (optionally unit-normalized), `L_ij = t_j·p_i / τ`, and the
/// contribution `−log(exp(L_ii) / Σ_j exp(L_ij))`, averaged over i.
pub fn infonce(features: &[f64], w: &[f64], text: &[f64], b: usize, d: usize, k: usize, tau: f64, normalize: bool) -> f64 {
    let mut projected: Vec<Vec<Dd>> = Vec::with_capacity(b);
    for i in 0..b {
        let mut p: Vec<Dd> = (0..k)
            .map(|r| dd_dot((0..d).map(|c| w[r * d + c]), (0..d).map(|c| features[i * d + c])))
            .collect();
        if normalize {
            let norm = p.iter().fold(Dd::ZERO, |acc, v| acc.add(v.mul(*v))).sqrt();
            let norm = if norm.f() > 1e-12 { norm } else { Dd::new(1e-12) };
            p.iter_mut().for_each(|v| *v = v.div(norm));
        }
        projected.push(p);
    }
    let inv_tau = Dd::new(1.0).div(Dd::new(tau));
    let mut total = Dd::ZERO;
    for i in 0..b {
        let logits: Vec<Dd> = (0..b)
            .map(|j| {
                (0..k)
                    .fold(Dd::ZERO, |acc, r| acc.add(Dd::new(text[j * k + r]).mul(projected[i][r])))
                    .mul(inv_tau)
            })
            .collect();
        let m = logits.iter().map(|l| l.f()).fold(f64::NEG_INFINITY, f64::max);
        let s = logits.iter().fold(Dd::ZERO, |acc, l| acc.add(l.sub(Dd::new(m)).exp()));
        total = total.add(s.ln().add(Dd::new(m)).sub(logits[i]));
    }
    total.div(Dd::new(b as f64)).f()
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let fp = f(&xp);
    xp[i] = x[i] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

/// Batch for the full objective.
pub struct Batch {
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
    pub text: Vec<f64>,
}

/// `ce + λ·dist` for `model` on `batch`, with gradients for every
/// parameter when `with_grads` is set.
pub fn objective(model: &ModelBundle, batch: &Batch, lambda: f64, tau: f64, normalize: bool, with_grads: bool) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, with_grads);
    let x = model.input(&mut g, batch.labels.len(), batch.pixels.clone()).unwrap();
    let f = model.forward_features(&mut g, &bound, x).unwrap();
    let logits = model.classify(&mut g, &bound, f).unwrap();
    let ce = g.softmax_cross_entropy(logits, &batch.labels).unwrap();
    let dist = distance_loss(&mut g, &batch.text, f, bound.projection(), tau, normalize).unwrap();
    let total = total_objective(&mut g, ce, dist, lambda).unwrap();
    let value = g.value(total).item();
    if !with_grads {
        return (value, Vec::new());
    }
    g.backward(total).unwrap();
    let grads = bound.vars().iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();
    (value, grads)
}

pub mod cases;

pub mod tasks {
    use crossalign::cache::{build_cache, EmbeddingCache, SyntheticEncoder};
    use crossalign::data::{synthetic_dataset, Dataset, SynthConfig};
    use crossalign::descriptions::{build_description_set, PromptKind, StubProvider};

    pub struct Task {
        pub data: Dataset,
        pub train: Dataset,
        pub val: Dataset,
    }

    impl Task {
        pub fn new(cfg: &SynthConfig) -> Self {
            let data = synthetic_dataset(cfg).unwrap();
            let (train, val) = data.split_validation(0.2).unwrap();
            Task { data, train, val }
        }

        /// 10 classes, 2000 train / 500 val, 8×8 grayscale.
        pub fn desk() -> Self {
            Self::new(&SynthConfig::default())
        }

        pub fn small() -> Self {
            Self::new(&SynthConfig { classes: 3, per_class: 20, size: 4, seed: 9, ..Default::default() })
        }

        /// Stub descriptions of `kind` encoded by the synthetic encoder.
        pub fn cache(&self, kind: PromptKind, k: usize, sigma: f64) -> EmbeddingCache {
            let provider = StubProvider::new(self.data.label_pairs());
            let set = build_description_set(self.data.ids(), &provider, kind).unwrap();
            let encoder = SyntheticEncoder::new(self.data.label_pairs(), k, sigma, 0).unwrap();
            build_cache(&set, &encoder, true).unwrap()
        }
    }
}
