//! Fully-connected teacher and width-divided student networks.
//!
//! A network maps standardized inputs through ReLU hidden layers to a linear
//! embedding `K`. Two affine heads read `K`: the classifier producing logits
//! and, when keypoints are configured, the regression head `R`.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    /// Teacher widths; the effective widths are divided by `width_divisor`.
    pub hidden_widths: Vec<usize>,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub num_keypoint_coords: usize,
    pub width_divisor: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            input_dim: 64,
            hidden_widths: vec![256, 256, 128],
            embedding_dim: 64,
            num_classes: 32,
            num_keypoint_coords: 10,
            width_divisor: 1,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("embedding_dim", self.embedding_dim),
            ("num_classes", self.num_classes),
            ("width_divisor", self.width_divisor),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Spec(format!("{name} must be positive")));
            }
        }
        if self.hidden_widths.is_empty() {
            return Err(Error::Spec("at least one hidden layer is required".into()));
        }
        if let Some(i) = self.divided_widths().iter().position(|&w| w == 0) {
            return Err(Error::Spec(format!(
                "hidden layer {i} has zero width after dividing {:?} by {}",
                self.hidden_widths, self.width_divisor
            )));
        }
        Ok(())
    }

    /// Same architecture with hidden widths divided by `divisor`.
    pub fn student(&self, divisor: usize) -> NetworkSpec {
        NetworkSpec {
            width_divisor: divisor,
            ..self.clone()
        }
    }

    /// `ceil(width / divisor)` for each hidden layer.
    pub fn divided_widths(&self) -> Vec<usize> {
        let d = self.width_divisor.max(1);
        self.hidden_widths.iter().map(|w| w.div_ceil(d)).collect()
    }

    /// `(fan_in, fan_out)` of every affine layer in build order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for w in self.divided_widths() {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, self.embedding_dim));
        dims.push((self.embedding_dim, self.num_classes));
        if self.num_keypoint_coords > 0 {
            dims.push((self.embedding_dim, self.num_keypoint_coords));
        }
        dims
    }

    pub fn num_parameters(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn has_regression_head(&self) -> bool {
        self.num_keypoint_coords > 0
    }
}

/// Per-feature standardization applied to raw inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Statistics of `rows`; near-constant features keep unit scale.
    pub fn fit<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Data("cannot fit a normalizer on zero rows".into()))?;
        let dim = first.as_ref().len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.as_ref()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r.as_ref()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, batch: &Tensor) -> Result<Tensor> {
        let (b, d) = batch.dims2()?;
        if d != self.mean.len() {
            return Err(Error::dim("normalize", batch.shape(), &[self.mean.len()]));
        }
        let mut out = batch.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Tensor::matrix(b, d, out)
    }
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    pub logits: Var,
    pub embedding: Var,
    pub regression: Option<Var>,
}

/// A forward pass recorded on a tape, with the parameter leaves it used.
#[derive(Debug, Clone)]
pub struct Forward {
    pub outputs: Outputs,
    pub params: Vec<Var>,
}

/// Plain-value outputs of [`Network::predict`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Tensor,
    pub embedding: Tensor,
    pub regression: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Tensor>,
    normalizer: Normalizer,
}

impl Network {
    /// Fresh network with He-uniform weights and zero biases.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Network> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (fan_in, fan_out) in spec.layer_dims() {
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params.push(Tensor::matrix(fan_in, fan_out, w)?);
            params.push(Tensor::zeros(&[1, fan_out]));
        }
        Ok(Network {
            spec: spec.clone(),
            params,
            normalizer: Normalizer::identity(spec.input_dim),
        })
    }

    /// Network with explicit parameters in build order.
    pub fn from_parts(spec: NetworkSpec, params: Vec<Tensor>, normalizer: Normalizer) -> Result<Network> {
        spec.validate()?;
        let dims = spec.layer_dims();
        if params.len() != dims.len() * 2 {
            return Err(Error::Spec(format!(
                "expected {} parameter tensors, got {}",
                dims.len() * 2,
                params.len()
            )));
        }
        for (i, &(fi, fo)) in dims.iter().enumerate() {
            for (p, want) in [(&params[2 * i], [fi, fo]), (&params[2 * i + 1], [1, fo])] {
                if p.shape() != want {
                    return Err(Error::dim("parameter", p.shape(), &want));
                }
            }
        }
        if normalizer.mean.len() != spec.input_dim || normalizer.std.len() != spec.input_dim {
            return Err(Error::Spec("normalizer width differs from input_dim".into()));
        }
        Ok(Network { spec, params, normalizer })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn set_normalizer(&mut self, normalizer: Normalizer) -> Result<()> {
        if normalizer.mean.len() != self.spec.input_dim {
            return Err(Error::dim(
                "set_normalizer",
                &[normalizer.mean.len()],
                &[self.spec.input_dim],
            ));
        }
        self.normalizer = normalizer;
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Records the forward pass. With `trainable` the parameters become
    /// gradient-tracked leaves; otherwise they enter as constants.
    pub fn forward(&self, tape: &mut Tape, batch: &Tensor, trainable: bool) -> Result<Forward> {
        let (_, width) = batch.dims2()?;
        if width != self.spec.input_dim {
            return Err(Error::dim("forward", batch.shape(), &[self.spec.input_dim]));
        }
        let x = tape.constant(self.normalizer.apply(batch)?);
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                let p = p.clone().with_requires_grad(trainable);
                tape.leaf(p)
            })
            .collect();

        let n_hidden = self.spec.hidden_widths.len();
        let mut h = x;
        for layer in 0..n_hidden {
            let z = tape.matmul(h, params[2 * layer])?;
            let z = tape.add_bias(z, params[2 * layer + 1])?;
            h = tape.relu(z)?;
        }
        let affine = |tape: &mut Tape, input: Var, layer: usize| -> Result<Var> {
            let z = tape.matmul(input, params[2 * layer])?;
            tape.add_bias(z, params[2 * layer + 1])
        };
        let embedding = affine(tape, h, n_hidden)?;
        let logits = affine(tape, embedding, n_hidden + 1)?;
        let regression = if self.spec.has_regression_head() {
            Some(affine(tape, embedding, n_hidden + 2)?)
        } else {
            None
        };
        Ok(Forward {
            outputs: Outputs {
                logits,
                embedding,
                regression,
            },
            params,
        })
    }

    /// Evaluates the network without tracking gradients.
    pub fn predict(&self, batch: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, batch, false)?;
        let o = f.outputs;
        Ok(Prediction {
            logits: tape.value(o.logits).clone(),
            embedding: tape.value(o.embedding).clone(),
            regression: o.regression.map(|r| tape.value(r).clone()),
        })
    }

    /// Copies the tape gradients of `forward.params` into the parameter grad
    /// slots. Parameters the loss never reached get a zero gradient.
    pub fn store_grads(&mut self, tape: &Tape, forward: &Forward) -> Result<()> {
        if forward.params.len() != self.params.len() {
            return Err(Error::contract("forward pass belongs to a different network"));
        }
        for (p, &v) in self.params.iter_mut().zip(&forward.params) {
            let g = tape
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.numel()]);
            p.set_grad(g)?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Writes the checkpoint container to `w`.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let s = &self.spec;
        let mut header = vec![s.input_dim as u64, s.hidden_widths.len() as u64];
        header.extend(s.hidden_widths.iter().map(|&w| w as u64));
        header.extend([
            s.embedding_dim as u64,
            s.num_classes as u64,
            s.num_keypoint_coords as u64,
            s.width_divisor as u64,
        ]);
        for v in header {
            w.write_all(&v.to_le_bytes())?;
        }
        write_f64s(w, &self.normalizer.mean)?;
        write_f64s(w, &self.normalizer.std)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(p.shape().len() as u64).to_le_bytes())?;
            for &d in p.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            write_f64s(w, p.data())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Network> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Data("not a network checkpoint".into()));
        }
        let mut ver = [0u8; 4];
        r.read_exact(&mut ver).map_err(truncated)?;
        let ver = u32::from_le_bytes(ver);
        if ver != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {ver}")));
        }
        let input_dim = read_len(r)?;
        let n_hidden = read_len(r)?;
        let hidden_widths = (0..n_hidden).map(|_| read_len(r)).collect::<Result<_>>()?;
        let spec = NetworkSpec {
            input_dim,
            hidden_widths,
            embedding_dim: read_len(r)?,
            num_classes: read_len(r)?,
            num_keypoint_coords: read_len(r)?,
            width_divisor: read_len(r)?,
        };
        spec.validate()?;
        let normalizer = Normalizer {
            mean: read_f64s(r)?,
            std: read_f64s(r)?,
        };
        let n_params = read_len(r)?;
        let mut params = Vec::with_capacity(n_params.min(64));
        for _ in 0..n_params {
            let ndim = read_len(r)?;
            let shape = (0..ndim).map(|_| read_len(r)).collect::<Result<Vec<_>>>()?;
            params.push(Tensor::new(shape, read_f64s(r)?)?);
        }
        Network::from_parts(spec, params, normalizer)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Network> {
        let bytes = std::fs::read(path)?;
        Network::read_checkpoint(&mut bytes.as_slice())
    }
}

/// Overwrites `dst` with an independent copy of `src`'s parameters and
/// normalizer. Both networks must share the same spec.
pub fn copy_parameters(src: &Network, dst: &mut Network) -> Result<()> {
    if src.spec != dst.spec {
        return Err(Error::contract(format!(
            "cannot copy parameters between different specs (divisor {} -> {})",
            src.spec.width_divisor, dst.spec.width_divisor
        )));
    }
    dst.params = src.params.iter().map(|p| Tensor::new(p.shape().to_vec(), p.data().to_vec())).collect::<Result<_>>()?;
    dst.normalizer = src.normalizer.clone();
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DFNC";
const CHECKPOINT_VERSION: u32 = 1;
/// Guards allocation sizes read from untrusted files.
const MAX_LEN: u64 = 1 << 32;

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Data("checkpoint is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn read_len<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    let v = u64::from_le_bytes(b);
    if v > MAX_LEN {
        return Err(Error::Data(format!("implausible length {v} in checkpoint")));
    }
    Ok(v as usize)
}

fn read_f64s<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let n = read_len(r)?;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b).map_err(truncated)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}
