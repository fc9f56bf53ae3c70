use std::io::{Read, Write};

use rand_distr::{Distribution, Normal};

use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FSUP";
const FORMAT_VERSION: u32 = 1;

/// Weight and bias of one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub layer: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// The trainable parameters of a network, ordered by layer index.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    entries: Vec<ParamEntry>,
}

impl ModelParams {
    pub fn from_entries(entries: Vec<ParamEntry>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        let entries = spec
            .param_layout()
            .into_iter()
            .map(|(layer, w, b)| ParamEntry {
                layer,
                weight: Tensor::zeros(&w),
                bias: Tensor::zeros(&b),
            })
            .collect();
        Self { entries }
    }

    pub fn zeros_like(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|e| ParamEntry {
                layer: e.layer,
                weight: Tensor::zeros(e.weight.shape()),
                bias: Tensor::zeros(e.bias.shape()),
            })
            .collect();
        Self { entries }
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|e| e.weight.len() + e.bias.len()).sum()
    }

    /// Iterates over every scalar parameter, weights before bias, layer by layer.
    pub fn values(&self) -> impl Iterator<Item = f32> + '_ {
        self.entries
            .iter()
            .flat_map(|e| e.weight.data().iter().chain(e.bias.data()).copied())
    }

    pub fn value_mut(&mut self, mut index: usize) -> Option<&mut f32> {
        for e in &mut self.entries {
            let w = e.weight.len();
            if index < w {
                return Some(&mut e.weight.data_mut()[index]);
            }
            index -= w;
            let b = e.bias.len();
            if index < b {
                return Some(&mut e.bias.data_mut()[index]);
            }
            index -= b;
        }
        None
    }

    /// Errors unless `other` has the same layers in the same order with the
    /// same tensor shapes.
    pub fn check_compatible(&self, other: &ModelParams) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::invalid(format!(
                "parameter sets have {} and {} entries",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.layer != b.layer {
                return Err(Error::invalid(format!(
                    "parameter entry for layer {} paired with layer {}",
                    a.layer, b.layer
                )));
            }
            a.weight.same_shape(&b.weight)?;
            a.bias.same_shape(&b.bias)?;
        }
        Ok(())
    }

    pub fn check_matches(&self, spec: &NetworkSpec) -> Result<()> {
        ModelParams::zeros(spec).check_compatible(self)
    }

    /// `self - eta * grads`, element-wise.
    pub fn sgd_step(&self, grads: &ModelParams, eta: f32) -> Result<ModelParams> {
        if eta.is_nan() || eta < 0.0 {
            return Err(Error::invalid(format!("learning rate {eta} must be >= 0")));
        }
        self.check_compatible(grads)?;
        let mut out = self.clone();
        out.sgd_step_in_place(grads, eta);
        Ok(out)
    }

    pub(crate) fn sgd_step_in_place(&mut self, grads: &ModelParams, eta: f32) {
        for (p, g) in self.entries.iter_mut().zip(&grads.entries) {
            for (x, d) in p.weight.data_mut().iter_mut().zip(g.weight.data()) {
                *x -= eta * d;
            }
            for (x, d) in p.bias.data_mut().iter_mut().zip(g.bias.data()) {
                *x -= eta * d;
            }
        }
    }

    /// `Σ w_k · params_k`, accumulated in `f64`.
    pub fn weighted_sum(items: &[(&ModelParams, f64)]) -> Result<ModelParams> {
        let (first, _) = items
            .first()
            .ok_or_else(|| Error::invalid("weighted sum of zero parameter sets"))?;
        for (p, _) in &items[1..] {
            first.check_compatible(p)?;
        }
        let combine = |pick: &dyn Fn(&ParamEntry) -> &Tensor, idx: usize| -> Tensor {
            let template = pick(&first.entries[idx]);
            let mut acc = vec![0f64; template.len()];
            for (p, w) in items {
                for (a, &v) in acc.iter_mut().zip(pick(&p.entries[idx]).data()) {
                    *a += w * v as f64;
                }
            }
            Tensor::new(template.shape().to_vec(), acc.into_iter().map(|v| v as f32).collect())
                .expect("shape preserved")
        };
        let entries = (0..first.entries.len())
            .map(|i| ParamEntry {
                layer: first.entries[i].layer,
                weight: combine(&|e| &e.weight, i),
                bias: combine(&|e| &e.bias, i),
            })
            .collect();
        Ok(ModelParams { entries })
    }

    /// Size in bytes of [`ModelParams::write_to`] output.
    pub fn serialized_len(&self) -> usize {
        12 + self
            .entries
            .iter()
            .flat_map(|e| [&e.weight, &e.bias])
            .map(|t| 8 + 4 * t.rank() + 4 * t.len())
            .sum::<usize>()
    }

    /// Little-endian binary encoding. Each entry is written as two tensor
    /// records (weight, then bias) tagged with the owning layer index, so
    /// the header's entry count is twice the number of layers.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&((self.entries.len() * 2) as u32).to_le_bytes())?;
        for e in &self.entries {
            for t in [&e.weight, &e.bias] {
                w.write_all(&(e.layer as u32).to_le_bytes())?;
                w.write_all(&(t.rank() as u32).to_le_bytes())?;
                for &d in t.shape() {
                    w.write_all(&(d as u32).to_le_bytes())?;
                }
                let mut buf = Vec::with_capacity(t.len() * 4);
                for v in t.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.serialized_len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(r: R) -> Result<ModelParams> {
        let mut r = CountingReader { inner: r, pos: 0 };
        let magic: [u8; 4] = r.array()?;
        if &magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic, expected FSUP".into(),
            });
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let count_at = r.pos;
        let count = r.u32()? as usize;
        if !count.is_multiple_of(2) {
            return Err(Error::Format {
                offset: count_at,
                message: format!("odd tensor record count {count}"),
            });
        }
        let mut entries = Vec::with_capacity(count / 2);
        for _ in 0..count / 2 {
            let (layer, weight) = r.tensor()?;
            let at = r.pos;
            let (bias_layer, bias) = r.tensor()?;
            if bias_layer != layer {
                return Err(Error::Format {
                    offset: at,
                    message: format!("bias record for layer {bias_layer} follows weight of layer {layer}"),
                });
            }
            entries.push(ParamEntry { layer, weight, bias });
        }
        Ok(ModelParams { entries })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
        Self::read_from(bytes)
    }
}

pub(crate) struct CountingReader<R> {
    pub(crate) inner: R,
    pub(crate) pos: u64,
}

impl<R: Read> CountingReader<R> {
    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    pub(crate) fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        let mut read = 0;
        while read < buf.len() {
            match self.inner.read(&mut buf[read..]) {
                Ok(0) => {
                    return Err(Error::Format {
                        offset: self.pos + read as u64,
                        message: format!("unexpected end of file ({} bytes missing)", buf.len() - read),
                    })
                }
                Ok(n) => read += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.pos += buf.len() as u64;
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut buf = vec![0u8; n * 4];
        self.fill(&mut buf)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn tensor(&mut self) -> Result<(usize, Tensor)> {
        let start = self.pos;
        let layer = self.u32()? as usize;
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format {
                offset: start + 4,
                message: format!("implausible tensor rank {rank}"),
            });
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32()? as usize);
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && n <= 1 << 30)
            .ok_or_else(|| Error::Format {
                offset: start + 8,
                message: format!("invalid tensor dims {dims:?}"),
            })?;
        let data = self.f32s(len)?;
        Ok((layer, Tensor::new(dims, data)?))
    }
}

/// He-style initialization: weights from `N(0, 2 / fan_in)`, zero biases.
pub fn init_params(spec: &NetworkSpec, rng: &mut RngStream) -> ModelParams {
    let entries = spec
        .param_layout()
        .into_iter()
        .map(|(layer, w_dims, b_dims)| {
            // fan-in is every weight dim except the output one
            let fan_in: usize = w_dims[..w_dims.len() - 1].iter().product();
            let std = (2.0 / fan_in as f64).sqrt() as f32;
            let normal = Normal::new(0.0f32, std).expect("std is positive and finite");
            let len = w_dims.iter().product();
            let data = (0..len).map(|_| normal.sample(rng)).collect();
            ParamEntry {
                layer,
                weight: Tensor::new(w_dims, data).expect("layout is consistent"),
                bias: Tensor::zeros(&b_dims),
            }
        })
        .collect();
    ModelParams { entries }
}
