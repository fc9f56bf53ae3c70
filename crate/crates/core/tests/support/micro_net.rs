#![allow(dead_code)]

//! Independent double-precision reference for a small conv net, used to
//! check analytic gradients against central finite differences.

use fedsup_core::nn::{init_params, loss_and_grads, LayerSpec, ModelParams, NetworkSpec};
use fedsup_core::{RngStream, Tensor};
use rand::Rng;

pub const H: usize = 6;
pub const W: usize = 6;
pub const C: usize = 1;
pub const K: usize = 3;
pub const F: usize = 2;
pub const CLASSES: usize = 3;
pub const BATCH: usize = 2;
pub const STEP: f64 = 1e-3;
/// Instances with a ReLU input or max-pool runner-up this close to a kink
/// are redrawn; a finite difference straddling a kink is meaningless.
pub const KINK_MARGIN: f64 = 2e-2;

pub fn micro_spec() -> NetworkSpec {
    NetworkSpec::new(
        vec![
            LayerSpec::Conv2d {
                kernel_h: K,
                kernel_w: K,
                filters: F,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Dropout { rate: 0.0 },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 4 },
            LayerSpec::Relu,
            LayerSpec::Dense { units: CLASSES },
            LayerSpec::Softmax,
        ],
        (H, W, C),
        CLASSES,
    )
    .unwrap()
}

/// Flat f64 copy of the parameters in the order conv W, conv b, d1 W, d1 b,
/// d2 W, d2 b.
pub fn flatten(p: &ModelParams) -> Vec<f64> {
    p.values().map(f64::from).collect()
}

pub struct Reference {
    pub loss: f64,
    /// Smallest distance of any ReLU input from 0 or any pool winner from
    /// its runner-up.
    pub margin: f64,
}

/// Loss of the micro network written out with plain loops.
pub fn reference_loss(theta: &[f64], images: &[f64], labels: &[usize]) -> Reference {
    let (oh, ow) = (H - K + 1, W - K + 1);
    let (ph, pw) = (oh / 2, ow / 2);
    let flat = ph * pw * F;
    let mut off = 0;
    let mut take = |n: usize| {
        let s = &theta[off..off + n];
        off += n;
        s
    };
    let cw = take(K * K * C * F);
    let cb = take(F);
    let w1 = take(flat * 4);
    let b1 = take(4);
    let w2 = take(4 * CLASSES);
    let b2 = take(CLASSES);

    let mut loss = 0.0;
    let mut margin = f64::INFINITY;
    for (n, &label) in labels.iter().enumerate() {
        let img = &images[n * H * W * C..(n + 1) * H * W * C];
        let mut conv = vec![0.0; oh * ow * F];
        for y in 0..oh {
            for x in 0..ow {
                for f in 0..F {
                    let mut z = cb[f];
                    for ky in 0..K {
                        for kx in 0..K {
                            for c in 0..C {
                                z += img[((y + ky) * W + x + kx) * C + c] * cw[((ky * K + kx) * C + c) * F + f];
                            }
                        }
                    }
                    margin = margin.min(z.abs());
                    conv[(y * ow + x) * F + f] = z.max(0.0);
                }
            }
        }
        let mut pooled = vec![0.0; flat];
        for y in 0..ph {
            for x in 0..pw {
                for f in 0..F {
                    let mut window: Vec<f64> = (0..4)
                        .map(|i| conv[((2 * y + i / 2) * ow + 2 * x + i % 2) * F + f])
                        .collect();
                    window.sort_by(|a, b| b.total_cmp(a));
                    if window[0] > 0.0 {
                        margin = margin.min(window[0] - window[1]);
                    }
                    pooled[(y * pw + x) * F + f] = window[0];
                }
            }
        }
        let mut hidden = [0.0; 4];
        for (u, h) in hidden.iter_mut().enumerate() {
            let z = b1[u] + (0..flat).map(|i| pooled[i] * w1[i * 4 + u]).sum::<f64>();
            margin = margin.min(z.abs());
            *h = z.max(0.0);
        }
        let logits: Vec<f64> = (0..CLASSES)
            .map(|k| b2[k] + (0..4).map(|u| hidden[u] * w2[u * CLASSES + k]).sum::<f64>())
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - logits[label];
    }
    Reference {
        loss: loss / labels.len() as f64,
        margin,
    }
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-6)
}

pub struct GradientCheck {
    pub checked: usize,
    pub redrawn: usize,
    pub worst: f64,
    /// `(instance, relative error)` of every instance at or above `tolerance`.
    pub failures: Vec<(usize, f64)>,
}

/// Checks `instances` kink-free random instances drawn from `seed`.
pub fn gradient_check(instances: usize, seed: u64, tolerance: f64) -> GradientCheck {
    let spec = micro_spec();
    let mut rng = RngStream::new(seed, 0);
    let mut out = GradientCheck {
        checked: 0,
        redrawn: 0,
        worst: 0.0,
        failures: Vec::new(),
    };
    while out.checked < instances {
        let params = init_params(&spec, &mut rng);
        let images: Vec<f32> = (0..BATCH * H * W * C).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..BATCH).map(|_| rng.gen_range(0..CLASSES)).collect();
        let images64: Vec<f64> = images.iter().copied().map(f64::from).collect();
        let theta = flatten(&params);
        if reference_loss(&theta, &images64, &labels).margin < KINK_MARGIN {
            out.redrawn += 1;
            assert!(
                out.redrawn < 100 * instances + 1000,
                "could not find kink-free instances"
            );
            continue;
        }

        let batch = Tensor::new(vec![BATCH, H, W, C], images).unwrap();
        let (_, grads) = loss_and_grads(&spec, &params, &batch, &labels, &mut rng).unwrap();
        let analytic: Vec<f64> = grads.values().map(f64::from).collect();

        let mut numeric = Vec::with_capacity(theta.len());
        let mut probe = theta.clone();
        for i in 0..theta.len() {
            probe[i] = theta[i] + STEP;
            let up = reference_loss(&probe, &images64, &labels).loss;
            probe[i] = theta[i] - STEP;
            let down = reference_loss(&probe, &images64, &labels).loss;
            probe[i] = theta[i];
            numeric.push((up - down) / (2.0 * STEP));
        }
        let err = relative_error(&analytic, &numeric);
        if err.is_nan() || err >= tolerance {
            out.failures.push((out.checked, err));
        }
        out.worst = out.worst.max(err);
        out.checked += 1;
    }
    out
}
