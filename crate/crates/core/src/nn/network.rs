use rand::Rng;

use super::params::{ModelParams, ParamEntry};
use super::spec::{ActShape, LayerSpec, NetworkSpec};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// `c = a · b` (or `c += a · b` when `accumulate`), all row-major.
/// `a` is `m×k` (stored `k×m` when `a_t`), `b` is `k×n` (stored `n×k` when `b_t`).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, c: &mut [f32], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Drops each element with probability `rate` and scales survivors by
/// `1 / (1 - rate)`. Returns the applied multiplier per element.
pub fn apply_dropout(values: &mut [f32], rate: f32, rng: &mut RngStream) -> Vec<f32> {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mask: Vec<f32> = (0..values.len())
        .map(|_| if rng.gen::<f32>() < keep { scale } else { 0.0 })
        .collect();
    for (v, m) in values.iter_mut().zip(&mask) {
        *v *= m;
    }
    mask
}

enum Cache {
    Conv {
        cols: Vec<f32>,
        in_h: usize,
        in_w: usize,
        in_c: usize,
    },
    Pool {
        argmax: Vec<u32>,
        in_len: usize,
    },
    Dense {
        input: Vec<f32>,
    },
    Relu {
        active: Vec<bool>,
    },
    Dropout {
        mask: Option<Vec<f32>>,
    },
    Passthrough,
}

struct Trace {
    /// Pre-softmax activations, `batch × num_classes`.
    logits: Vec<f32>,
    probs: Vec<f32>,
    caches: Vec<Cache>,
}

fn check_batch(spec: &NetworkSpec, batch: &Tensor) -> Result<usize> {
    let (h, w, c) = spec.input_shape();
    let shape = batch.shape();
    if shape.len() != 4 || shape[1..] != [h, w, c] {
        let mut expected = vec![shape.first().copied().unwrap_or(1), h, w, c];
        expected.truncate(4);
        return Err(Error::ShapeMismatch {
            expected,
            actual: shape.to_vec(),
        });
    }
    Ok(shape[0])
}

fn softmax_rows(logits: &[f32], classes: usize) -> Vec<f32> {
    let mut out = vec![0.0; logits.len()];
    for (row, dst) in logits.chunks_exact(classes).zip(out.chunks_exact_mut(classes)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for (d, &z) in dst.iter_mut().zip(row) {
            *d = (z - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

fn run(
    spec: &NetworkSpec,
    params: &ModelParams,
    batch: &Tensor,
    dropout: bool,
    rng: &mut RngStream,
    keep_caches: bool,
) -> Result<Trace> {
    let bsz = check_batch(spec, batch)?;
    params.check_matches(spec)?;
    let inputs = spec.layer_inputs();
    let mut act = batch.data().to_vec();
    let mut caches = Vec::with_capacity(spec.layers().len());
    let mut entries = params.entries().iter();
    let mut logits = Vec::new();

    for (layer, in_shape) in spec.layers().iter().zip(inputs) {
        let cache = match (*layer, in_shape) {
            (
                LayerSpec::Conv2d {
                    kernel_h,
                    kernel_w,
                    filters,
                },
                ActShape::Spatial { h, w, c },
            ) => {
                let entry = entries.next().expect("validated layout");
                let (oh, ow) = (h - kernel_h + 1, w - kernel_w + 1);
                let kk = kernel_h * kernel_w * c;
                let rows = bsz * oh * ow;
                let mut cols = vec![0.0f32; rows * kk];
                let span = kernel_w * c;
                for n in 0..bsz {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let row = (n * oh + oy) * ow + ox;
                            for dy in 0..kernel_h {
                                let src = ((n * h + oy + dy) * w + ox) * c;
                                let dst = row * kk + dy * span;
                                cols[dst..dst + span].copy_from_slice(&act[src..src + span]);
                            }
                        }
                    }
                }
                let mut out = vec![0.0f32; rows * filters];
                gemm(
                    rows,
                    kk,
                    filters,
                    &cols,
                    false,
                    entry.weight.data(),
                    false,
                    &mut out,
                    false,
                );
                add_bias(&mut out, entry.bias.data());
                act = out;
                Cache::Conv {
                    cols: if keep_caches { cols } else { Vec::new() },
                    in_h: h,
                    in_w: w,
                    in_c: c,
                }
            }
            (LayerSpec::MaxPool2d { size }, ActShape::Spatial { h, w, c }) => {
                let (oh, ow) = (h / size, w / size);
                let mut out = vec![0.0f32; bsz * oh * ow * c];
                let mut argmax = vec![0u32; out.len()];
                for n in 0..bsz {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for ch in 0..c {
                                let o = ((n * oh + oy) * ow + ox) * c + ch;
                                let mut best = f32::NEG_INFINITY;
                                let mut best_i = 0;
                                for dy in 0..size {
                                    for dx in 0..size {
                                        let i = ((n * h + oy * size + dy) * w + ox * size + dx) * c + ch;
                                        if act[i] > best {
                                            best = act[i];
                                            best_i = i;
                                        }
                                    }
                                }
                                out[o] = best;
                                argmax[o] = best_i as u32;
                            }
                        }
                    }
                }
                let in_len = act.len();
                act = out;
                Cache::Pool { argmax, in_len }
            }
            (LayerSpec::Dense { units }, ActShape::Flat(n_in)) => {
                let entry = entries.next().expect("validated layout");
                let mut out = vec![0.0f32; bsz * units];
                gemm(
                    bsz,
                    n_in,
                    units,
                    &act,
                    false,
                    entry.weight.data(),
                    false,
                    &mut out,
                    false,
                );
                add_bias(&mut out, entry.bias.data());
                let input = std::mem::replace(&mut act, out);
                Cache::Dense {
                    input: if keep_caches { input } else { Vec::new() },
                }
            }
            (LayerSpec::Relu, _) => {
                let mut active = Vec::new();
                if keep_caches {
                    active = act.iter().map(|&v| v > 0.0).collect();
                }
                for v in act.iter_mut() {
                    if *v <= 0.0 {
                        *v = 0.0;
                    }
                }
                Cache::Relu { active }
            }
            (LayerSpec::Dropout { rate }, _) => {
                if dropout && rate > 0.0 {
                    let mask = apply_dropout(&mut act, rate, rng);
                    Cache::Dropout { mask: Some(mask) }
                } else {
                    Cache::Dropout { mask: None }
                }
            }
            (LayerSpec::Softmax, _) => {
                let probs = softmax_rows(&act, spec.num_classes());
                logits = std::mem::replace(&mut act, probs);
                Cache::Passthrough
            }
            (LayerSpec::Flatten, _) => Cache::Passthrough,
            (layer, shape) => unreachable!("{layer:?} on {shape:?} rejected by shape inference"),
        };
        caches.push(cache);
    }

    Ok(Trace {
        logits,
        probs: act,
        caches,
    })
}

fn add_bias(out: &mut [f32], bias: &[f32]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Class probabilities for a `(B, H, W, C)` batch, shape `(B, num_classes)`.
/// With `dropout_enabled` every dropout layer samples a fresh mask from `rng`;
/// otherwise dropout is the identity and `rng` is untouched.
pub fn forward(
    spec: &NetworkSpec,
    params: &ModelParams,
    batch: &Tensor,
    dropout_enabled: bool,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let trace = run(spec, params, batch, dropout_enabled, rng, false)?;
    let bsz = batch.shape()[0];
    Tensor::new(vec![bsz, spec.num_classes()], trace.probs)
}

/// Mean cross-entropy over the batch in training mode (dropout enabled),
/// with its gradient with respect to every parameter.
pub fn loss_and_grads(
    spec: &NetworkSpec,
    params: &ModelParams,
    batch: &Tensor,
    labels: &[usize],
    rng: &mut RngStream,
) -> Result<(f32, ModelParams)> {
    let bsz = check_batch(spec, batch)?;
    let classes = spec.num_classes();
    if labels.len() != bsz {
        return Err(Error::invalid(format!("{} labels for a batch of {bsz}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} outside [0, {classes})")));
    }
    let trace = run(spec, params, batch, true, rng, true)?;

    let mut loss = 0.0f64;
    let mut grad = trace.probs.clone();
    let inv_b = 1.0 / bsz as f32;
    for (i, &label) in labels.iter().enumerate() {
        let z = &trace.logits[i * classes..(i + 1) * classes];
        let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f32>().ln();
        loss += (lse - z[label]) as f64;
        let g = &mut grad[i * classes..(i + 1) * classes];
        g[label] -= 1.0;
        for v in g.iter_mut() {
            *v *= inv_b;
        }
    }
    let loss = (loss / bsz as f64) as f32;

    let layers = spec.layers();
    let mut grads: Vec<Option<ParamEntry>> = vec![None; layers.len()];
    let mut param_iter = params.entries().iter().rev();
    let first_param_layer = layers.iter().position(LayerSpec::has_params);

    // Softmax (the last layer) is folded into the cross-entropy gradient.
    for idx in (0..layers.len() - 1).rev() {
        // nothing upstream needs a gradient below the first parameterized layer
        let need_input_grad = first_param_layer.is_some_and(|f| idx > f);
        match (&layers[idx], &trace.caches[idx]) {
            (
                LayerSpec::Conv2d {
                    kernel_h,
                    kernel_w,
                    filters,
                },
                Cache::Conv { cols, in_h, in_w, in_c },
            ) => {
                let entry = param_iter.next().expect("validated layout");
                let (h, w, c) = (*in_h, *in_w, *in_c);
                let (oh, ow) = (h - kernel_h + 1, w - kernel_w + 1);
                let kk = kernel_h * kernel_w * c;
                let rows = bsz * oh * ow;
                let mut dw = vec![0.0f32; kk * filters];
                gemm(kk, rows, *filters, cols, true, &grad, false, &mut dw, false);
                let db = column_sums(&grad, *filters);
                grads[idx] = Some(ParamEntry {
                    layer: entry.layer,
                    weight: Tensor::new(entry.weight.shape().to_vec(), dw)?,
                    bias: Tensor::new(entry.bias.shape().to_vec(), db)?,
                });
                if need_input_grad {
                    let mut dcols = vec![0.0f32; rows * kk];
                    gemm(
                        rows,
                        *filters,
                        kk,
                        &grad,
                        false,
                        entry.weight.data(),
                        true,
                        &mut dcols,
                        false,
                    );
                    let mut dinput = vec![0.0f32; bsz * h * w * c];
                    let span = kernel_w * c;
                    for n in 0..bsz {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let row = (n * oh + oy) * ow + ox;
                                for dy in 0..*kernel_h {
                                    let dst = ((n * h + oy + dy) * w + ox) * c;
                                    let src = row * kk + dy * span;
                                    for (d, s) in dinput[dst..dst + span].iter_mut().zip(&dcols[src..src + span]) {
                                        *d += s;
                                    }
                                }
                            }
                        }
                    }
                    grad = dinput;
                }
            }
            (LayerSpec::Dense { units }, Cache::Dense { input }) => {
                let entry = param_iter.next().expect("validated layout");
                let n_in = entry.weight.shape()[0];
                let mut dw = vec![0.0f32; n_in * units];
                gemm(n_in, bsz, *units, input, true, &grad, false, &mut dw, false);
                let db = column_sums(&grad, *units);
                grads[idx] = Some(ParamEntry {
                    layer: entry.layer,
                    weight: Tensor::new(entry.weight.shape().to_vec(), dw)?,
                    bias: Tensor::new(entry.bias.shape().to_vec(), db)?,
                });
                if need_input_grad {
                    let mut dx = vec![0.0f32; bsz * n_in];
                    gemm(
                        bsz,
                        *units,
                        n_in,
                        &grad,
                        false,
                        entry.weight.data(),
                        true,
                        &mut dx,
                        false,
                    );
                    grad = dx;
                }
            }
            (LayerSpec::MaxPool2d { .. }, Cache::Pool { argmax, in_len }) => {
                if need_input_grad {
                    let mut dinput = vec![0.0f32; *in_len];
                    for (g, &i) in grad.iter().zip(argmax) {
                        dinput[i as usize] += g;
                    }
                    grad = dinput;
                }
            }
            (LayerSpec::Relu, Cache::Relu { active }) => {
                for (g, &a) in grad.iter_mut().zip(active) {
                    if !a {
                        *g = 0.0;
                    }
                }
            }
            (LayerSpec::Dropout { .. }, Cache::Dropout { mask }) => {
                if let Some(mask) = mask {
                    for (g, m) in grad.iter_mut().zip(mask) {
                        *g *= m;
                    }
                }
            }
            (LayerSpec::Flatten, _) => {}
            (layer, _) => unreachable!("no backward rule for {layer:?}"),
        }
    }

    let entries = grads.into_iter().flatten().collect();
    Ok((loss, ModelParams::from_entries(entries)))
}

fn column_sums(grad: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; cols];
    for row in grad.chunks_exact(cols) {
        for (o, g) in out.iter_mut().zip(row) {
            *o += g;
        }
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 256;

/// Deterministic (dropout disabled) class predictions for a set of samples.
pub fn predict_classes(
    spec: &NetworkSpec,
    params: &ModelParams,
    dataset: &LabeledDataset,
    indices: &[usize],
) -> Result<Vec<usize>> {
    // dropout is disabled, so the stream is never drawn from
    let mut rng = RngStream::new(0, 0);
    let classes = spec.num_classes();
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = dataset.batch(chunk)?;
        let probs = forward(spec, params, &batch, false, &mut rng)?;
        out.extend(probs.data().chunks_exact(classes).map(argmax));
    }
    Ok(out)
}

/// Fraction of samples whose deterministic prediction equals the label.
pub fn evaluate(spec: &NetworkSpec, params: &ModelParams, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let predicted = predict_classes(spec, params, dataset, &indices)?;
    let correct = predicted.iter().zip(dataset.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / dataset.len() as f64)
}
