//! Monte Carlo dropout scoring and the client-side upload filter.
//!
//! A client runs `M` forward passes with dropout active. For the class with
//! the highest mean probability, the mean of its per-pass probabilities is
//! the confidence `r` and their population variance is the uncertainty
//! `alpha`. Only images with `alpha >= epsilon` are uploaded to the edge.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{forward, ModelParams, NetworkSpec};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    /// Number of stochastic forward passes, `M`.
    pub passes: usize,
    /// Upload threshold on `alpha`.
    pub epsilon: f64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            passes: 3,
            epsilon: 0.025,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes == 0 {
            return Err(Error::invalid("M (passes) must be >= 1"));
        }
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::invalid("epsilon must be a finite value >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub sample_id: usize,
    pub r: f64,
    pub alpha: f64,
    pub predicted_class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confidence {
    pub r: f64,
    pub alpha: f64,
    pub predicted_class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McPrediction {
    pub mean_probs: Vec<f64>,
    /// `M` rows of class probabilities, one per stochastic pass.
    pub per_pass: Vec<Vec<f64>>,
}

/// `M` dropout-enabled passes over a whole `(B, H, W, C)` batch; one
/// prediction per sample.
pub fn mc_predict_batch(
    spec: &NetworkSpec,
    params: &ModelParams,
    batch: &Tensor,
    passes: usize,
    rng: &mut RngStream,
) -> Result<Vec<McPrediction>> {
    if passes == 0 {
        return Err(Error::invalid("M (passes) must be >= 1"));
    }
    let classes = spec.num_classes();
    let bsz = batch.shape().first().copied().unwrap_or(0);
    let mut per_sample: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(passes); bsz];
    for _ in 0..passes {
        let probs = forward(spec, params, batch, true, rng)?;
        for (rows, row) in per_sample.iter_mut().zip(probs.data().chunks_exact(classes)) {
            rows.push(row.iter().map(|&p| p as f64).collect());
        }
    }
    Ok(per_sample
        .into_iter()
        .map(|per_pass| {
            let mut mean_probs = vec![0.0; classes];
            for row in &per_pass {
                for (m, p) in mean_probs.iter_mut().zip(row) {
                    *m += p;
                }
            }
            for m in mean_probs.iter_mut() {
                *m /= passes as f64;
            }
            McPrediction { mean_probs, per_pass }
        })
        .collect())
}

/// Single-image form of [`mc_predict_batch`]; `image` is `(H, W, C)`.
pub fn mc_predict(
    spec: &NetworkSpec,
    params: &ModelParams,
    image: &Tensor,
    passes: usize,
    rng: &mut RngStream,
) -> Result<McPrediction> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let batch = image.clone().reshape(shape)?;
    Ok(mc_predict_batch(spec, params, &batch, passes, rng)?
        .pop()
        .expect("one sample in, one prediction out"))
}

/// Confidence and uncertainty of the argmax-of-mean class.
pub fn confidence_uncertainty(per_pass: &[Vec<f64>]) -> Result<Confidence> {
    let classes = per_pass.first().map_or(0, Vec::len);
    if classes == 0 {
        return Err(Error::invalid("empty probability matrix"));
    }
    if per_pass.iter().any(|row| row.len() != classes) {
        return Err(Error::invalid("ragged probability matrix"));
    }
    let mut sums = vec![0.0f64; classes];
    for row in per_pass {
        for (s, p) in sums.iter_mut().zip(row) {
            *s += p;
        }
    }
    let mut predicted_class = 0;
    for (c, &s) in sums.iter().enumerate() {
        if s > sums[predicted_class] {
            predicted_class = c;
        }
    }
    // Welford update over the predicted class's column
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for (i, row) in per_pass.iter().enumerate() {
        let p = row[predicted_class];
        let delta = p - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (p - mean);
    }
    let alpha = (m2 / per_pass.len() as f64).max(0.0);
    Ok(Confidence {
        r: mean,
        alpha,
        predicted_class,
    })
}

/// Samples a client offers to its edge, keyed by sample id, with their
/// uncertainty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UploadDict {
    pub entries: BTreeMap<usize, f64>,
}

impl UploadDict {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClientUpload {
    pub client_id: usize,
    pub dict: UploadDict,
    /// One record per local image, uploaded or not.
    pub records: Vec<UncertaintyRecord>,
}

const UPLOAD_CHUNK: usize = 64;

/// Scores every local image of a client under the current cloud model and
/// keeps those whose uncertainty reaches `config.epsilon`.
pub fn client_upload(
    client_id: usize,
    spec: &NetworkSpec,
    params: &ModelParams,
    dataset: &LabeledDataset,
    local_samples: &[usize],
    config: &ClientConfig,
    rng: &mut RngStream,
) -> Result<ClientUpload> {
    config.validate()?;
    let mut out = ClientUpload {
        client_id,
        ..Default::default()
    };
    for chunk in local_samples.chunks(UPLOAD_CHUNK) {
        let batch = dataset.batch(chunk)?;
        let preds = mc_predict_batch(spec, params, &batch, config.passes, rng)?;
        for (&sample_id, pred) in chunk.iter().zip(preds) {
            let c = confidence_uncertainty(&pred.per_pass)?;
            if c.alpha >= config.epsilon {
                out.dict.entries.insert(sample_id, c.alpha);
            }
            out.records.push(UncertaintyRecord {
                sample_id,
                r: c.r,
                alpha: c.alpha,
                predicted_class: c.predicted_class,
            });
        }
    }
    Ok(out)
}
