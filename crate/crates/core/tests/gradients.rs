//! Analytic gradients against central finite differences (h = 1e-5, f64).
//! Error is measured per gradient array as
//! `max|analytic - numeric| / max(max|analytic|, max|numeric|)`.

use spq_core::cqc_loss::{batch_loss, loss_backward, CqcConfig, CrossSimMatrix};
use spq_core::encoder::{ActShape, Encoder, Layer};
use spq_core::pq_head::{soft_quantize, soft_quantize_backward, CodebookSet};
use spq_core::{Rng, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to every entry of `x`.
fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + H;
            let up = f(&probe);
            probe[i] = orig - H;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn random_vec(n: usize, std: f64, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.normal(0.0, std)).collect()
}

fn weighted_sum(a: &[f64], w: &[f64]) -> f64 {
    a.iter().zip(w).map(|(x, y)| x * y).sum()
}

/// Architecture `variant` with small random extents.
fn random_encoder(variant: usize, rng: &mut Rng) -> Encoder {
    let h = 2 * (1 + rng.below(3));
    let w = 2 * (1 + rng.below(3));
    let c = 1 + rng.below(3);
    let oc = 1 + rng.below(3);
    let spatial = ActShape::Spatial { h, w, c };
    let (input, layers) = match variant {
        0 => (spatial, vec![Layer::conv3x3(c, oc, rng), Layer::Flatten]),
        1 => (spatial, vec![Layer::conv3x3(c, oc, rng), Layer::Relu, Layer::Flatten]),
        2 => (spatial, vec![Layer::MaxPool2x2, Layer::Flatten, Layer::affine(h / 2 * (w / 2) * c, 3, rng)]),
        3 => {
            let d = 2 + rng.below(5);
            (
                ActShape::Flat(d),
                vec![Layer::affine(d, 5, rng), Layer::Relu, Layer::affine(5, 3, rng)],
            )
        }
        _ => {
            let (h, w) = (4, 4);
            (
                ActShape::Spatial { h, w, c },
                vec![
                    Layer::conv3x3(c, 2, rng),
                    Layer::Relu,
                    Layer::MaxPool2x2,
                    Layer::conv3x3(2, 3, rng),
                    Layer::Relu,
                    Layer::MaxPool2x2,
                    Layer::Flatten,
                    Layer::affine(3, 4, rng),
                ],
            )
        }
    };
    let mut enc = Encoder::network(input, layers).unwrap();
    for p in enc.params_mut() {
        for v in p.iter_mut() {
            *v = rng.normal(0.0, 0.5);
        }
    }
    enc
}

fn input_dims(enc: &Encoder) -> Vec<usize> {
    match enc.input_shape() {
        ActShape::Spatial { h, w, c } => vec![h, w, c],
        ActShape::Flat(d) => vec![d],
    }
}

#[test]
fn encoder_layers_match_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..25u64 {
        let mut rng = Rng::new(seed, 1);
        let enc = random_encoder(seed as usize % 5, &mut rng);
        let batch = 1 + rng.below(3);
        let mut shape = vec![batch];
        shape.extend(input_dims(&enc));
        let n_in: usize = shape.iter().product();
        let x = Tensor::new(shape.clone(), random_vec(n_in, 1.0, &mut rng)).unwrap();
        let g = Tensor::new(vec![batch, enc.output_dim()], random_vec(batch * enc.output_dim(), 1.0, &mut rng)).unwrap();

        let (_, tape) = enc.forward(&x).unwrap();
        let grads = enc.backward(tape, &g).unwrap();

        let loss_of = |e: &Encoder, x: &Tensor<f64>| weighted_sum(e.encode(x).unwrap().data(), g.data());

        let numeric_in = numeric_grad(x.data(), |v| loss_of(&enc, &Tensor::new(shape.clone(), v.to_vec()).unwrap()));
        let err = relative_error(grads.input.data(), &numeric_in);
        assert!(err <= TOL, "seed {seed}: input gradient error {err:e}");
        worst = worst.max(err);

        for (pi, analytic) in grads.params.iter().enumerate() {
            let base: Vec<f64> = enc.params()[pi].to_vec();
            let numeric = numeric_grad(&base, |v| {
                let mut e = enc.clone();
                e.params_mut()[pi].copy_from_slice(v);
                loss_of(&e, &x)
            });
            let err = relative_error(analytic, &numeric);
            assert!(err <= TOL, "seed {seed}: parameter array {pi} error {err:e}");
            worst = worst.max(err);
        }
    }
    eprintln!("encoder worst relative error {worst:e}");
}

#[test]
fn soft_quantize_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..25u64 {
        let mut rng = Rng::new(seed, 2);
        let m = [1, 2, 4][rng.below(3)];
        let k = [1, 2, 4, 8, 16][rng.below(5)];
        let s = 1 + rng.below(4);
        let b = 1 + rng.below(5);
        let tau = rng.uniform(0.1, 2.0);
        let cb = CodebookSet::random(m, k, s, &mut rng).unwrap();
        let d = m * s;
        let x = Tensor::new(vec![b, d], random_vec(b * d, 0.7, &mut rng)).unwrap();
        let g = Tensor::new(vec![b, d], random_vec(b * d, 1.0, &mut rng)).unwrap();

        let (_, tape) = soft_quantize(&cb, &x, tau).unwrap();
        let (gc, gx) = soft_quantize_backward(tape, &cb, &x, &g).unwrap();

        let loss = |cb: &CodebookSet, x: &Tensor<f64>| weighted_sum(soft_quantize(cb, x, tau).unwrap().0.data(), g.data());
        let nx = numeric_grad(x.data(), |v| loss(&cb, &Tensor::new(vec![b, d], v.to_vec()).unwrap()));
        let nc = numeric_grad(cb.codewords(), |v| loss(&CodebookSet::new(m, k, s, v.to_vec()).unwrap(), &x));
        let ex = relative_error(gx.data(), &nx);
        let ec = relative_error(gc.data(), &nc);
        assert!(ex <= TOL && ec <= TOL, "seed {seed} (M={m} K={k} s={s} tau={tau}): {ex:e} {ec:e}");
        worst = worst.max(ex).max(ec);
    }
    eprintln!("soft_quantize worst relative error {worst:e}");
}

#[test]
fn batch_loss_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..24u64 {
        let mut rng = Rng::new(seed, 3);
        let n = 2 + rng.below(5);
        let d = 2 + rng.below(7);
        let cfg = CqcConfig {
            tau_cqc: rng.uniform(0.1, 1.0),
            include_positive_in_denominator: seed % 2 == 1,
        };
        let shape = vec![2 * n, d];
        let anchors = Tensor::new(shape.clone(), random_vec(2 * n * d, 1.0, &mut rng)).unwrap();
        let targets = Tensor::new(shape.clone(), random_vec(2 * n * d, 1.0, &mut rng)).unwrap();

        let lg = loss_backward(&anchors, &targets, &cfg).unwrap();
        let loss = |a: &Tensor<f64>, t: &Tensor<f64>| batch_loss(&CrossSimMatrix::from_views(a, t).unwrap(), &cfg).unwrap();
        assert!((lg.loss - loss(&anchors, &targets)).abs() < 1e-12);

        let na = numeric_grad(anchors.data(), |v| loss(&Tensor::new(shape.clone(), v.to_vec()).unwrap(), &targets));
        let nt = numeric_grad(targets.data(), |v| loss(&anchors, &Tensor::new(shape.clone(), v.to_vec()).unwrap()));
        let ea = relative_error(lg.anchors.data(), &na);
        let et = relative_error(lg.targets.data(), &nt);
        assert!(ea <= TOL && et <= TOL, "seed {seed} (N={n} D={d}): {ea:e} {et:e}");
        worst = worst.max(ea).max(et);
    }
    eprintln!("batch_loss worst relative error {worst:e}");
}
