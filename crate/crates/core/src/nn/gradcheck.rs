//! Central finite-difference checks of every layer's backward pass in f64.
//!
//! Each check evaluates the scalar `sum(y * r)` for a fixed random `r`, so
//! the upstream gradient is `r`, and compares the analytic gradient of every
//! input and parameter with `(f(v + h) - f(v - h)) / 2h`. Inputs to ReLU and
//! L1 are kept at least 0.05 away from their kinks.

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::network::{build_srnet, Mode, Network, SrNetConfig};
use super::ops::{self, ConvGeometry};
use super::tensor::Tensor4;
use crate::error::Result;
use crate::rng;

pub const STEP: f64 = 1e-4;
/// Denominator floor of the relative error, so that gradients that are
/// zero analytically are judged by absolute error.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub layer: &'static str,
    /// Input shape of the case.
    pub shape: [usize; 4],
    pub max_rel_error: f64,
    /// Number of scalar derivatives compared.
    pub checked: usize,
}

pub const LAYERS: [&str; 10] =
    ["conv", "transposed_conv", "batch_norm_train", "batch_norm_eval", "relu", "avg_pool", "dropout", "concat", "l1_loss", "srnet"];

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

type Forward<'a> = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64> + 'a>;
/// Forward pass that also reports its piecewise-linear region.
type ForwardRegion<'a> = Box<dyn Fn(&[Vec<f64>]) -> (Vec<f64>, u64) + 'a>;
type Backward<'a> = Box<dyn Fn(&[Vec<f64>], &Tensor4<f64>) -> Vec<Vec<f64>> + 'a>;

/// Compares analytic and numeric gradients of `sum(forward(v) * r)` with
/// respect to every entry of every tensor in `inputs`.
fn compare(inputs: Vec<Vec<f64>>, out_shape: [usize; 4], forward: Forward, backward: Backward, rng: &mut ChaCha8Rng) -> (f64, usize) {
    let (worst, checked, _) = compare_regions(inputs, out_shape, Box::new(move |v| (forward(v), 0)), backward, usize::MAX, rng);
    (worst, checked)
}

/// As [`compare`], probing at most `per_tensor` random entries of each
/// tensor and skipping probes whose `+h` or `-h` evaluation leaves the
/// region of the unperturbed point (a kink lies within the step). Returns
/// the worst error, the number compared and the number skipped.
fn compare_regions(
    inputs: Vec<Vec<f64>>,
    out_shape: [usize; 4],
    forward: ForwardRegion,
    backward: Backward,
    per_tensor: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, usize, usize) {
    let n_out: usize = out_shape.iter().product();
    let weights: Vec<f64> = (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dy = Tensor4::from_vec(out_shape, weights.clone()).unwrap();
    let analytic = backward(&inputs, &dy);
    let objective = |v: &[Vec<f64>]| -> (f64, u64) {
        let (y, region) = forward(v);
        (y.iter().zip(&weights).map(|(a, b)| a * b).sum(), region)
    };
    let (_, home) = objective(&inputs);
    let mut worst = 0.0f64;
    let (mut count, mut skipped) = (0, 0);
    let mut probe = inputs.clone();
    for (t, grads) in analytic.iter().enumerate() {
        assert_eq!(grads.len(), inputs[t].len(), "gradient {t} has the wrong length");
        let mut idx: Vec<usize> = (0..grads.len()).collect();
        if idx.len() > per_tensor {
            idx.shuffle(rng);
            idx.truncate(per_tensor);
        }
        for i in idx {
            let orig = probe[t][i];
            probe[t][i] = orig + STEP;
            let (plus, rp) = objective(&probe);
            probe[t][i] = orig - STEP;
            let (minus, rm) = objective(&probe);
            probe[t][i] = orig;
            if rp != home || rm != home {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(grads[i], numeric));
            count += 1;
        }
    }
    (worst, count, skipped)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let d = Uniform::new(lo, hi);
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Values in `[-1, -0.05] ∪ [0.05, 1]`.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn tensor(shape: [usize; 4], data: &[f64]) -> Tensor4<f64> {
    Tensor4::from_vec(shape, data.to_vec()).unwrap()
}

const GEOMETRIES: [ConvGeometry; 4] = [
    ConvGeometry { kernel: [3, 3], stride: [1, 1], pad: [1, 1] },
    ConvGeometry { kernel: [4, 4], stride: [2, 2], pad: [1, 1] },
    ConvGeometry { kernel: [4, 3], stride: [2, 1], pad: [1, 1] },
    ConvGeometry { kernel: [1, 1], stride: [1, 1], pad: [0, 0] },
];

/// Runs case `case` of layer `layer` with shapes drawn from `seed`.
pub fn check_case(layer: &'static str, seed: u64, case: usize) -> Result<GradCheck> {
    let mut r = rng::stream(seed, rng::stream_id([7, LAYERS.iter().position(|l| *l == layer).unwrap() as u16, case as u16, 0]));
    let n = r.gen_range(1..=2);
    let c = r.gen_range(1..=3);
    let h = 2 * r.gen_range(1..=4);
    let w = 2 * r.gen_range(1..=4);
    let shape = [n, c, h, w];
    let len = n * c * h * w;
    let (worst, checked) = match layer {
        "conv" => {
            let g = GEOMETRIES[case % GEOMETRIES.len()];
            let oc = r.gen_range(1..=3);
            let taps = g.kernel[0] * g.kernel[1];
            let inputs = vec![uniform(&mut r, len, -1.0, 1.0), uniform(&mut r, oc * c * taps, -1.0, 1.0), uniform(&mut r, oc, -1.0, 1.0)];
            let (oh, ow) = g.conv_out(h, w).unwrap();
            compare(
                inputs,
                [n, oc, oh, ow],
                Box::new(move |v| ops::conv2d_forward(&tensor(shape, &v[0]), &v[1], &v[2], oc, &g).unwrap().into_vec()),
                Box::new(move |v, dy| {
                    let (dx, dw, db) = ops::conv2d_backward(&tensor(shape, &v[0]), &v[1], dy, &g).unwrap();
                    vec![dx.into_vec(), dw, db]
                }),
                &mut r,
            )
        }
        "transposed_conv" => {
            let g = GEOMETRIES[case % GEOMETRIES.len()];
            let oc = r.gen_range(1..=3);
            let taps = g.kernel[0] * g.kernel[1];
            let inputs = vec![uniform(&mut r, len, -1.0, 1.0), uniform(&mut r, c * oc * taps, -1.0, 1.0), uniform(&mut r, oc, -1.0, 1.0)];
            let (oh, ow) = g.transposed_out(h, w).unwrap();
            compare(
                inputs,
                [n, oc, oh, ow],
                Box::new(move |v| ops::tconv2d_forward(&tensor(shape, &v[0]), &v[1], &v[2], oc, &g).unwrap().into_vec()),
                Box::new(move |v, dy| {
                    let (dx, dw, db) = ops::tconv2d_backward(&tensor(shape, &v[0]), &v[1], dy, &g).unwrap();
                    vec![dx.into_vec(), dw, db]
                }),
                &mut r,
            )
        }
        "batch_norm_train" => {
            let eps = 1e-3;
            let inputs = vec![uniform(&mut r, len, -1.0, 1.0), uniform(&mut r, c, 0.5, 1.5), uniform(&mut r, c, -0.5, 0.5)];
            compare(
                inputs,
                shape,
                Box::new(move |v| ops::batchnorm_train(&tensor(shape, &v[0]), &v[1], &v[2], eps).unwrap().0.into_vec()),
                Box::new(move |v, dy| {
                    let (_, cache) = ops::batchnorm_train(&tensor(shape, &v[0]), &v[1], &v[2], eps).unwrap();
                    let (dx, dg, db) = ops::batchnorm_backward(dy, &cache, &v[1]);
                    vec![dx.into_vec(), dg, db]
                }),
                &mut r,
            )
        }
        "batch_norm_eval" => {
            // Eval mode is affine per channel: y = gamma * (x - mean) / sqrt(var + eps) + beta.
            let eps = 1e-3;
            let mean = uniform(&mut r, c, -0.5, 0.5);
            let var = uniform(&mut r, c, 0.2, 2.0);
            let inputs = vec![uniform(&mut r, len, -1.0, 1.0), uniform(&mut r, c, 0.5, 1.5), uniform(&mut r, c, -0.5, 0.5)];
            let (m2, v2) = (mean.clone(), var.clone());
            compare(
                inputs,
                shape,
                Box::new(move |v| ops::batchnorm_eval(&tensor(shape, &v[0]), &v[1], &v[2], &mean, &var, eps).unwrap().into_vec()),
                Box::new(move |v, dy| {
                    let p = h * w;
                    let mut dx = vec![0.0; len];
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (j, d) in dy.as_slice().iter().enumerate() {
                        let ch = (j / p) % c;
                        let inv = 1.0 / (v2[ch] + eps).sqrt();
                        dx[j] = d * v[1][ch] * inv;
                        dg[ch] += d * (v[0][j] - m2[ch]) * inv;
                        db[ch] += d;
                    }
                    vec![dx, dg, db]
                }),
                &mut r,
            )
        }
        "relu" => compare(
            vec![away_from_zero(&mut r, len)],
            shape,
            Box::new(move |v| ops::relu_forward(&tensor(shape, &v[0])).into_vec()),
            Box::new(move |v, dy| {
                let y = ops::relu_forward(&tensor(shape, &v[0]));
                vec![ops::relu_backward(dy, &y).into_vec()]
            }),
            &mut r,
        ),
        "avg_pool" => compare(
            vec![uniform(&mut r, len, -1.0, 1.0)],
            [n, c, h / 2, w / 2],
            Box::new(move |v| ops::avgpool_forward(&tensor(shape, &v[0]), 2).unwrap().into_vec()),
            Box::new(move |_, dy| vec![ops::avgpool_backward(dy, shape, 2).into_vec()]),
            &mut r,
        ),
        "dropout" => {
            let rate = [0.25f32, 0.5, 0.1][case % 3];
            let mask_seed = r.gen();
            compare(
                vec![uniform(&mut r, len, -1.0, 1.0)],
                shape,
                Box::new(move |v| {
                    ops::dropout_forward(&tensor(shape, &v[0]), rate, true, &mut rng::stream(mask_seed, 0)).unwrap().0.into_vec()
                }),
                Box::new(move |v, dy| {
                    let (_, mask) = ops::dropout_forward(&tensor(shape, &v[0]), rate, true, &mut rng::stream(mask_seed, 0)).unwrap();
                    vec![ops::dropout_backward(dy, mask.as_deref()).into_vec()]
                }),
                &mut r,
            )
        }
        "concat" => {
            let c2 = r.gen_range(1..=3);
            let other = [n, c2, h, w];
            compare(
                vec![uniform(&mut r, len, -1.0, 1.0), uniform(&mut r, n * c2 * h * w, -1.0, 1.0)],
                [n, c + c2, h, w],
                Box::new(move |v| ops::concat_forward(&tensor(shape, &v[0]), &tensor(other, &v[1])).unwrap().into_vec()),
                Box::new(move |_, dy| {
                    let (a, b) = ops::concat_backward(dy, c);
                    vec![a.into_vec(), b.into_vec()]
                }),
                &mut r,
            )
        }
        "l1_loss" => {
            let target = uniform(&mut r, len, -1.0, 1.0);
            let offsets = away_from_zero(&mut r, len);
            let pred: Vec<f64> = target.iter().zip(&offsets).map(|(t, o)| t + o).collect();
            let t2 = target.clone();
            compare(
                vec![pred],
                [1, 1, 1, 1],
                Box::new(move |v| vec![ops::l1_loss(&tensor(shape, &v[0]), &tensor(shape, &target)).unwrap().0]),
                Box::new(move |v, dy| {
                    let (_, g) = ops::l1_loss(&tensor(shape, &v[0]), &tensor(shape, &t2)).unwrap();
                    vec![g.into_vec().into_iter().map(|x| x * dy.as_slice()[0]).collect()]
                }),
                &mut r,
            )
        }
        "srnet" => return check_network(seed, case),
        other => panic!("unknown layer {other}"),
    };
    Ok(GradCheck { layer, shape, max_rel_error: worst, checked })
}

/// Whole-network check on a two-filter encoder-decoder in training mode,
/// covering skip-gradient accumulation and the parameter ordering. Probes
/// are sampled per tensor and those straddling a ReLU kink are skipped.
fn check_network(seed: u64, case: usize) -> Result<GradCheck> {
    const PER_TENSOR: usize = 12;
    let mut r = rng::stream(seed, rng::stream_id([8, case as u16, 0, 0]));
    let factor = [2, 4, 8][case % 3];
    let spec = build_srnet(&SrNetConfig { factor, base_filters: 2, dropout_rate: 0.25, bn_momentum: 0.9 })?;
    let net = Network::<f64>::init(spec, r.gen())?;
    let (n, rows, cols) = (2, 16, 16);
    let shape = [n, 1, rows / factor, cols];
    let x = uniform(&mut r, n * rows / factor * cols, 0.0, 1.0);
    let mask_seed: u64 = r.gen();
    let n_params = net.params.trainable().len();
    let mut inputs: Vec<Vec<f64>> = net.params.trainable().iter().map(|t| t.to_vec()).collect();
    inputs.push(x);
    let with = |v: &[Vec<f64>]| {
        let mut net = net.clone();
        for (dst, src) in net.params.trainable_mut().into_iter().zip(v) {
            dst.copy_from_slice(src);
        }
        net
    };
    let (worst, checked, skipped) = compare_regions(
        inputs,
        [n, 1, rows, cols],
        Box::new(|v| {
            let (y, tape) = with(v).forward_train(&tensor(shape, &v[n_params]), Mode::Train, &mut rng::stream(mask_seed, 0)).unwrap();
            (y.into_vec(), tape.relu_pattern())
        }),
        Box::new(|v, dy| {
            let net = with(v);
            let (_, tape) = net.forward_train(&tensor(shape, &v[n_params]), Mode::Train, &mut rng::stream(mask_seed, 0)).unwrap();
            let (mut grads, dx) = net.backward(&tape, dy).unwrap();
            grads.push(dx.into_vec());
            grads
        }),
        PER_TENSOR,
        &mut r,
    );
    log::debug!("srnet gradient check skipped {skipped} probes at ReLU kinks");
    Ok(GradCheck { layer: "srnet", shape, max_rel_error: worst, checked })
}

/// `cases` checks of every layer.
pub fn check_all(seed: u64, cases: usize) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for layer in LAYERS {
        let n = if layer == "srnet" { cases.min(4) } else { cases };
        for case in 0..n {
            out.push(check_case(layer, seed, case)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_passes_a_few_cases() {
        for g in check_all(1, 3).unwrap() {
            assert!(g.max_rel_error < 1e-4, "{g:?}");
            assert!(g.checked > 0);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        assert!(relative_error(1.0, 1.01) > 1e-4);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
    }
}
