//! Central-difference gradient checks at f64.

use leafscope::layers::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, dropout, dropout_backward, maxpool2_backward,
    maxpool2_forward, relu, relu_backward, scce_loss_and_grad, Padding,
};
use leafscope::model::{build_cnn, CnnArch, LayerKind, ModelGraph};
use leafscope::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;

/// Relative error with a floor on the denominator so that two tiny values compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Report {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl Report {
    pub fn merge(self, o: Report) -> Report {
        Report {
            max_rel_err: self.max_rel_err.max(o.max_rel_err),
            checked: self.checked + o.checked,
            skipped: self.skipped + o.skipped,
        }
    }
}

/// Compares `analytic` against central differences of `f` around `x`.
///
/// `f` returns the objective and a discrete signature of the evaluation
/// (ReLU patterns, pool switches); when the signatures at `x + h` and
/// `x - h` differ the coordinate straddles a kink and is skipped.
pub fn check<S: PartialEq>(x: &Tensor<f64>, analytic: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> (f64, S)) -> Report {
    assert_eq!(x.shape(), analytic.shape());
    let mut r = Report::default();
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= STEP;
        let (fp, sp) = f(&xp);
        let (fm, sm) = f(&xm);
        if sp != sm {
            r.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * STEP);
        r.max_rel_err = r.max_rel_err.max(rel_err(analytic.data()[i], numeric));
        r.checked += 1;
    }
    r
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

pub fn conv_instance(seed: u64, stride: usize, padding: Padding) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[2, 6, 7], -1.0, 1.0);
    let k = uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let b = uniform(&mut rng, &[3], -1.0, 1.0);
    let y = conv2d_forward(&x, &k, &b, stride, padding).unwrap();
    let r = uniform(&mut rng, y.shape(), -1.0, 1.0);
    let (dx, dk, db) = conv2d_backward(&r, &x, &k, stride, padding).unwrap();
    let obj = |x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>| (dot(&r, &conv2d_forward(x, k, b, stride, padding).unwrap()), ());
    check(&x, &dx, |v| obj(v, &k, &b))
        .merge(check(&k, &dk, |v| obj(&x, v, &b)))
        .merge(check(&b, &db, |v| obj(&x, &k, v)))
}

pub fn pool_instance(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[3, 6, 8], -1.0, 1.0);
    let (y, sw) = maxpool2_forward(&x).unwrap();
    let r = uniform(&mut rng, y.shape(), -1.0, 1.0);
    let dx = maxpool2_backward(&r, &sw, x.shape()).unwrap();
    check(&x, &dx, |v| {
        let (y, s) = maxpool2_forward(v).unwrap();
        (dot(&r, &y), s.indices)
    })
}

pub fn dense_instance(seed: u64, batch: Option<usize>) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m) = (7, 5);
    let xshape = match batch {
        Some(b) => vec![b, n],
        None => vec![n],
    };
    let x = uniform(&mut rng, &xshape, -1.0, 1.0);
    let w = uniform(&mut rng, &[m, n], -1.0, 1.0);
    let b = uniform(&mut rng, &[m], -1.0, 1.0);
    let y = dense_forward(&x, &w, &b).unwrap();
    let r = uniform(&mut rng, y.shape(), -1.0, 1.0);
    let (dx, dw, db) = dense_backward(&r, &x, &w).unwrap();
    let obj = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| (dot(&r, &dense_forward(x, w, b).unwrap()), ());
    check(&x, &dx, |v| obj(v, &w, &b))
        .merge(check(&w, &dw, |v| obj(&x, v, &b)))
        .merge(check(&b, &db, |v| obj(&x, &w, v)))
}

pub fn relu_instance(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[4, 5], -1.0, 1.0);
    let r = uniform(&mut rng, x.shape(), -1.0, 1.0);
    let dx = relu_backward(&r, &x).unwrap();
    check(&x, &dx, |v| {
        let pattern: Vec<bool> = v.data().iter().map(|&e| e > 0.0).collect();
        (dot(&r, &relu(v)), pattern)
    })
}

pub fn scce_instance(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 6;
    let z = uniform(&mut rng, &[k], -3.0, 3.0);
    let label = rng.gen_range(0..k);
    let (_, dz) = scce_loss_and_grad(&z, label).unwrap();
    check(&z, &dz, |v| (scce_loss_and_grad(v, label).unwrap().0, ()))
}

pub fn dropout_instance(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[3, 10], -1.0, 1.0);
    let r = uniform(&mut rng, x.shape(), -1.0, 1.0);
    let (_, mask) = dropout(&x, 0.5, &mut ChaCha8Rng::seed_from_u64(seed + 1), true).unwrap();
    let dx = dropout_backward(&r, mask.as_ref()).unwrap();
    check(&x, &dx, |v| {
        let (y, _) = dropout(v, 0.5, &mut ChaCha8Rng::seed_from_u64(seed + 1), true).unwrap();
        (dot(&r, &y), ())
    })
}

pub fn tiny_arch() -> CnnArch {
    CnnArch {
        input: [3, 8, 8],
        filters: [2, 4, 2],
        kernel: 3,
        dense: [8, 6],
        dropout: 0.5,
        num_classes: 3,
    }
}

/// ReLU activity and pool switches of every layer, for kink detection.
fn model_signature(g: &ModelGraph<f64>, batch: &Tensor<f64>, training: bool, seed: u64) -> (Vec<bool>, Vec<Vec<usize>>) {
    let (_, cache) = g.forward_with_cache(batch, training, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut pattern = Vec::new();
    let mut switches = Vec::new();
    for l in g.layers() {
        match l.kind {
            LayerKind::Conv { relu: true, .. } | LayerKind::Dense { relu: true, .. } | LayerKind::Relu => {
                pattern.extend(cache.output(&l.name).unwrap().data().iter().map(|&v| v > 0.0));
            }
            LayerKind::Pool => switches.extend(cache.switches(&l.name).unwrap().iter().map(|s| s.indices.clone())),
            _ => {}
        }
    }
    (pattern, switches)
}

/// Every parameter of the tiny CNN against the batch cross-entropy.
pub fn tiny_model_instance(seed: u64, training: bool) -> Report {
    let g: ModelGraph<f64> = build_cnn(&tiny_arch(), seed).unwrap().cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let batch = uniform(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    let labels: Vec<usize> = (0..2).map(|_| rng.gen_range(0..3)).collect();
    let drop_seed = seed + 17;
    let (_, grads) = g
        .loss_and_gradients(&batch, &labels, training, &mut ChaCha8Rng::seed_from_u64(drop_seed))
        .unwrap();
    let mut report = Report::default();
    for p in 0..g.weights().len() {
        let param = &g.weights().tensors()[p];
        report = report.merge(check(param, &grads.tensors()[p], |v| {
            let mut h = g.clone();
            h.weights_mut().tensors_mut()[p] = v.clone();
            let loss = h
                .loss(&batch, &labels, training, &mut ChaCha8Rng::seed_from_u64(drop_seed))
                .unwrap();
            (loss, model_signature(&h, &batch, training, drop_seed))
        }));
    }
    report
}

/// The full instance list: every primitive in several configurations plus the tiny model.
pub fn all_instances() -> Vec<(String, Box<dyn Fn() -> Report + Send + Sync>)> {
    let mut v: Vec<(String, Box<dyn Fn() -> Report + Send + Sync>)> = Vec::new();
    for (i, &(stride, pad)) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid), (2, Padding::Valid)]
        .iter()
        .enumerate()
    {
        for rep in 0..2u64 {
            let seed = 100 + 10 * i as u64 + rep;
            v.push((format!("conv2d s{stride} {pad:?} #{rep}"), Box::new(move || conv_instance(seed, stride, pad))));
        }
    }
    for rep in 0..3u64 {
        v.push((format!("maxpool2 #{rep}"), Box::new(move || pool_instance(200 + rep))));
        v.push((format!("dense single #{rep}"), Box::new(move || dense_instance(300 + rep, None))));
        v.push((format!("dense batch #{rep}"), Box::new(move || dense_instance(310 + rep, Some(3)))));
        v.push((format!("relu #{rep}"), Box::new(move || relu_instance(400 + rep))));
        v.push((format!("softmax cross-entropy #{rep}"), Box::new(move || scce_instance(500 + rep))));
    }
    v.push(("dropout".into(), Box::new(|| dropout_instance(600))));
    for rep in 0..3u64 {
        v.push((format!("tiny model inference #{rep}"), Box::new(move || tiny_model_instance(700 + rep, false))));
    }
    v.push(("tiny model with dropout".into(), Box::new(|| tiny_model_instance(710, true))));
    v
}
