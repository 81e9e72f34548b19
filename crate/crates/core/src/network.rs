//! Fully connected ReLU classifier with an optional extra-class head.
//!
//! The in-class logits are affine in the embedding, `z_c = w_c · G(x) + b_c`.
//! The extra logit comes in two flavours:
//!
//! * [`ExtraHead::Quadratic`]: `z_{k+1} = Σ_i exp(w'_i) · G_i(x)² + b_{k+1}`.
//!   The weights are kept in the positive orthant by storing their logarithm.
//! * [`ExtraHead::Linear`]: `z_{k+1} = w' · G(x) + b_{k+1}`, an ordinary
//!   "none of the above" output.
//!
//! The embedding `G(x)` is the output of the last hidden ReLU layer, so it is
//! componentwise nonnegative.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, log_sum_exp, Matrix, RngState};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden_dims,
            num_classes,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::invalid("architecture dims must be >= 1"));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::invalid("architecture needs at least one hidden layer"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be >= 1"));
        }
        Ok(())
    }

    /// Width of the final hidden layer.
    pub fn embed_dim(&self) -> usize {
        *self.hidden_dims.last().expect("validated architecture")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtraHead {
    /// k outputs only.
    Absent,
    /// Plain affine extra logit.
    Linear,
    /// Positive-weight squared-embedding extra logit.
    Quadratic,
}

impl ExtraHead {
    pub fn is_present(self) -> bool {
        !matches!(self, ExtraHead::Absent)
    }

    fn tag(self) -> u8 {
        match self {
            ExtraHead::Absent => 0,
            ExtraHead::Linear => 1,
            ExtraHead::Quadratic => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(ExtraHead::Absent),
            1 => Ok(ExtraHead::Linear),
            2 => Ok(ExtraHead::Quadratic),
            t => Err(Error::ModelFormat(format!("unknown extra head tag {t}"))),
        }
    }
}

/// One affine layer, `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }
}

/// Every trainable array of a model, in declaration order:
/// hidden layers (weight, bias)..., head weight, head bias, raw extra
/// weights, extra bias.
pub trait ParamTensors {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn tensor_lens(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.len()).collect()
    }
}

impl ParamTensors for Vec<Vec<f64>> {
    fn tensors(&self) -> Vec<&[f64]> {
        self.iter().map(Vec::as_slice).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.iter_mut().map(Vec::as_mut_slice).collect()
    }
}

macro_rules! impl_param_tensors {
    ($ty:ty) => {
        impl ParamTensors for $ty {
            fn tensors(&self) -> Vec<&[f64]> {
                let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.layers.len() + 4);
                for l in &self.layers {
                    out.push(l.weight.as_slice());
                    out.push(&l.bias);
                }
                out.push(self.head_w.as_slice());
                out.push(&self.head_b);
                out.push(&self.extra_raw_w);
                out.push(std::slice::from_ref(&self.extra_b));
                out
            }

            fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
                let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len() + 4);
                for l in &mut self.layers {
                    out.push(l.weight.as_mut_slice());
                    out.push(&mut l.bias);
                }
                out.push(self.head_w.as_mut_slice());
                out.push(&mut self.head_b);
                out.push(&mut self.extra_raw_w);
                out.push(std::slice::from_mut(&mut self.extra_b));
                out
            }
        }
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub extra_head: ExtraHead,
    pub layers: Vec<DenseLayer>,
    /// `k x d`, row `c` is `w_c`.
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
    /// Quadratic head: log of the positive weights. Linear head: the weights.
    pub extra_raw_w: Vec<f64>,
    pub extra_b: f64,
}

/// Gradients, shaped exactly like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<DenseLayer>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
    pub extra_raw_w: Vec<f64>,
    pub extra_b: f64,
}

impl_param_tensors!(ModelParams);
impl_param_tensors!(ParamGrads);

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let arch = &params.arch;
        let mut layers = Vec::with_capacity(arch.hidden_dims.len());
        let mut fan_in = arch.input_dim;
        for &w in &arch.hidden_dims {
            layers.push(DenseLayer::zeros(fan_in, w));
            fan_in = w;
        }
        Self {
            layers,
            head_w: Matrix::zeros(arch.num_classes, fan_in),
            head_b: vec![0.0; arch.num_classes],
            extra_raw_w: vec![0.0; fan_in],
            extra_b: 0.0,
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// He-normal weights (`N(0, 2/fan_in)`), zero biases, zero extra head.
pub fn init_params(arch: &Architecture, extra_head: ExtraHead, rng: &mut RngState) -> Result<ModelParams> {
    arch.validate()?;
    let mut layers = Vec::with_capacity(arch.hidden_dims.len());
    let mut fan_in = arch.input_dim;
    for &width in &arch.hidden_dims {
        layers.push(he_layer(fan_in, width, rng));
        fan_in = width;
    }
    let head = he_layer(fan_in, arch.num_classes, rng);
    Ok(ModelParams {
        arch: arch.clone(),
        extra_head,
        layers,
        head_w: head.weight,
        head_b: head.bias,
        extra_raw_w: vec![0.0; fan_in],
        extra_b: 0.0,
    })
}

fn he_layer(fan_in: usize, fan_out: usize, rng: &mut RngState) -> DenseLayer {
    let sd = (2.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| sd * rng.next_normal()).collect();
    DenseLayer {
        weight: Matrix::from_vec(fan_out, fan_in, data).expect("sized above"),
        bias: vec![0.0; fan_out],
    }
}

/// Everything `forward` computed for one input; enough to run `backward`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    /// Per hidden layer, pre-activation values.
    pub pre: Vec<Vec<f64>>,
    /// Per hidden layer, post-ReLU values. The last one is the embedding.
    pub post: Vec<Vec<f64>>,
    pub class_logits: Vec<f64>,
    pub extra_logit: Option<f64>,
    /// `ln A(x)`: log of the softmax denominator over all logits.
    /// Kept in log space since `A(x)` overflows for far-away inputs.
    pub log_denom: f64,
}

impl ForwardTrace {
    pub fn embedding(&self) -> &[f64] {
        self.post.last().expect("at least one hidden layer")
    }

    pub fn num_classes(&self) -> usize {
        self.class_logits.len()
    }

    /// `[z_1..z_k]` followed by `z_{k+1}` when the model has an extra head.
    pub fn logits(&self) -> Vec<f64> {
        let mut z = self.class_logits.clone();
        z.extend(self.extra_logit);
        z
    }

    pub fn num_logits(&self) -> usize {
        self.class_logits.len() + usize::from(self.extra_logit.is_some())
    }
}

impl ModelParams {
    /// Copy of `self` carrying a fresh (zeroed) extra head of the given kind.
    pub fn with_extra_head(&self, extra_head: ExtraHead) -> ModelParams {
        let mut out = self.clone();
        out.extra_head = extra_head;
        out.extra_raw_w.iter_mut().for_each(|w| *w = 0.0);
        out.extra_b = 0.0;
        out
    }

    /// Extra logit for a given embedding, `None` when the head is absent.
    pub fn extra_logit_for(&self, embedding: &[f64]) -> Option<f64> {
        match self.extra_head {
            ExtraHead::Absent => None,
            ExtraHead::Linear => Some(dot(&self.extra_raw_w, embedding) + self.extra_b),
            ExtraHead::Quadratic => Some(
                self.extra_raw_w
                    .iter()
                    .zip(embedding)
                    .map(|(w, g)| w.exp() * g * g)
                    .sum::<f64>()
                    + self.extra_b,
            ),
        }
    }

    /// Effective extra-head weights (`exp` of the raw ones for the quadratic head).
    pub fn extra_weights(&self) -> Vec<f64> {
        match self.extra_head {
            ExtraHead::Quadratic => self.extra_raw_w.iter().map(|w| w.exp()).collect(),
            _ => self.extra_raw_w.clone(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.arch.input_dim {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: (1, self.arch.input_dim),
                right: (1, x.len()),
            });
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = post.last().map_or(x, Vec::as_slice);
            let mut z = layer.weight.matvec(input)?;
            for (zi, b) in z.iter_mut().zip(&layer.bias) {
                *zi += b;
            }
            post.push(z.iter().map(|&v| v.max(0.0)).collect());
            pre.push(z);
        }
        let g = post.last().expect("validated architecture");
        let mut class_logits = self.head_w.matvec(g)?;
        for (z, b) in class_logits.iter_mut().zip(&self.head_b) {
            *z += b;
        }
        let extra_logit = self.extra_logit_for(g);
        let mut all = class_logits.clone();
        all.extend(extra_logit);
        let log_denom = log_sum_exp(&all)?;
        Ok(ForwardTrace {
            input: x.to_vec(),
            pre,
            post,
            class_logits,
            extra_logit,
            log_denom,
        })
    }

    /// Row-wise [`forward`](Self::forward).
    pub fn forward_batch(&self, xs: &Matrix) -> Result<Vec<ForwardTrace>> {
        if xs.cols() != self.arch.input_dim {
            return Err(Error::ShapeMismatch {
                op: "forward_batch",
                left: (xs.rows(), self.arch.input_dim),
                right: xs.shape(),
            });
        }
        xs.row_iter().map(|x| self.forward(x)).collect()
    }

    /// Gradients of `Σ_j grad_logits[j] · z_j` with respect to every parameter.
    pub fn backward(&self, trace: &ForwardTrace, grad_logits: &[f64]) -> Result<ParamGrads> {
        let mut grads = ParamGrads::zeros_like(self);
        self.backward_into(trace, grad_logits, &mut grads)?;
        Ok(grads)
    }

    /// Like [`backward`](Self::backward) but accumulates into `grads`.
    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        grad_logits: &[f64],
        grads: &mut ParamGrads,
    ) -> Result<()> {
        let k = self.arch.num_classes;
        let expected = k + usize::from(self.extra_head.is_present());
        if grad_logits.len() != expected || trace.num_logits() != expected {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: (1, expected),
                right: (trace.num_logits(), grad_logits.len()),
            });
        }
        let g = trace.embedding();
        let d = g.len();
        let mut d_embed = vec![0.0; d];

        for (c, &gz) in grad_logits[..k].iter().enumerate() {
            if gz == 0.0 {
                continue;
            }
            grads.head_b[c] += gz;
            let w_row = self.head_w.row(c);
            let gw_row = grads.head_w.row_mut(c);
            for i in 0..d {
                gw_row[i] += gz * g[i];
                d_embed[i] += gz * w_row[i];
            }
        }

        if let Some(&gz) = grad_logits.get(k) {
            grads.extra_b += gz;
            match self.extra_head {
                ExtraHead::Quadratic => {
                    for i in 0..d {
                        let w = self.extra_raw_w[i].exp();
                        grads.extra_raw_w[i] += gz * w * g[i] * g[i];
                        d_embed[i] += gz * 2.0 * w * g[i];
                    }
                }
                ExtraHead::Linear => {
                    for i in 0..d {
                        grads.extra_raw_w[i] += gz * g[i];
                        d_embed[i] += gz * self.extra_raw_w[i];
                    }
                }
                ExtraHead::Absent => unreachable!("length checked above"),
            }
        }

        let mut delta = d_embed;
        for l in (0..self.layers.len()).rev() {
            for (dv, &z) in delta.iter_mut().zip(&trace.pre[l]) {
                if z <= 0.0 {
                    *dv = 0.0;
                }
            }
            let input = if l == 0 { &trace.input } else { &trace.post[l - 1] };
            let layer = &self.layers[l];
            let glayer = &mut grads.layers[l];
            let mut next = vec![0.0; input.len()];
            for (o, &dv) in delta.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                glayer.bias[o] += dv;
                let gw = glayer.weight.row_mut(o);
                let w = layer.weight.row(o);
                for i in 0..input.len() {
                    gw[i] += dv * input[i];
                    next[i] += dv * w[i];
                }
            }
            delta = next;
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

const MODEL_MAGIC: &[u8; 4] = b"PLDM";
const MODEL_VERSION: u32 = 1;

impl ModelParams {
    /// Little-endian binary layout:
    ///
    /// ```text
    /// "PLDM" | version u32 | extra_head u8 | input_dim u32 | n_hidden u32
    /// | hidden widths u32... | num_classes u32 | f64 arrays in tensor order
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.num_parameters());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.push(self.extra_head.tag());
        out.extend_from_slice(&(self.arch.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.arch.hidden_dims.len() as u32).to_le_bytes());
        for &h in &self.arch.hidden_dims {
            out.extend_from_slice(&(h as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.arch.num_classes as u32).to_le_bytes());
        for t in self.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor { bytes, pos: 0 };
        if cur.take(4)? != MODEL_MAGIC {
            return Err(Error::ModelFormat("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {version}")));
        }
        let extra_head = ExtraHead::from_tag(cur.take(1)?[0])?;
        let input_dim = cur.u32()? as usize;
        let n_hidden = cur.u32()? as usize;
        if n_hidden > 1 << 16 {
            return Err(Error::ModelFormat(format!("implausible layer count {n_hidden}")));
        }
        let hidden_dims = (0..n_hidden)
            .map(|_| cur.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let num_classes = cur.u32()? as usize;
        let arch = Architecture::new(input_dim, hidden_dims, num_classes)
            .map_err(|e| Error::ModelFormat(e.to_string()))?;
        let grads = ParamGrads::zeros_like(&ModelParams {
            arch: arch.clone(),
            extra_head,
            layers: Vec::new(),
            head_w: Matrix::zeros(0, 0),
            head_b: Vec::new(),
            extra_raw_w: Vec::new(),
            extra_b: 0.0,
        });
        let mut params = ModelParams {
            arch,
            extra_head,
            layers: grads.layers,
            head_w: grads.head_w,
            head_b: grads.head_b,
            extra_raw_w: grads.extra_raw_w,
            extra_b: 0.0,
        };
        let needed: usize = params.tensor_lens().iter().sum::<usize>() * 8;
        if cur.remaining() != needed {
            return Err(Error::ModelFormat(format!(
                "expected {needed} bytes of parameters, found {}",
                cur.remaining()
            )));
        }
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                *v = f64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
            }
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::ModelFormat("unexpected end of data".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model(head: ExtraHead, seed: u64) -> ModelParams {
        let arch = Architecture::new(3, vec![4], 2).unwrap();
        let mut p = init_params(&arch, head, &mut RngState::new(seed)).unwrap();
        let mut rng = RngState::new(seed + 1000);
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v += 0.3 * rng.next_normal();
            }
        }
        p
    }

    #[test]
    fn rejects_empty_hidden_layers() {
        assert!(Architecture::new(2, vec![], 2).is_err());
        assert!(Architecture::new(2, vec![3, 0], 2).is_err());
        assert!(Architecture::new(0, vec![3], 2).is_err());
    }

    #[test]
    fn init_shapes_and_determinism() {
        let arch = Architecture::new(5, vec![7, 6], 3).unwrap();
        let a = init_params(&arch, ExtraHead::Quadratic, &mut RngState::new(9)).unwrap();
        let b = init_params(&arch, ExtraHead::Quadratic, &mut RngState::new(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layers[0].weight.shape(), (7, 5));
        assert_eq!(a.layers[1].weight.shape(), (6, 7));
        assert_eq!(a.head_w.shape(), (3, 6));
        assert_eq!(a.head_b.len(), 3);
        assert_eq!(a.extra_raw_w, vec![0.0; 6]);
        assert_eq!(a.extra_weights(), vec![1.0; 6]);
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn he_variance() {
        let arch = Architecture::new(256, vec![256], 2).unwrap();
        let p = init_params(&arch, ExtraHead::Absent, &mut RngState::new(4)).unwrap();
        let w = p.layers[0].weight.as_slice();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let target = 2.0 / 256.0;
        assert!(var > 0.9 * target && var < 1.1 * target, "{var}");
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let mut p = small_model(ExtraHead::Quadratic, 1);
        for t in p.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        // raw weights of 0 mean effective weight 1, but the embedding is 0.
        let tr = p.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(tr.class_logits, vec![0.0, 0.0]);
        assert_eq!(tr.extra_logit, Some(0.0));
        assert!((tr.log_denom - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn relu_zeroes_negative_coordinate() {
        let arch = Architecture::new(2, vec![2], 2).unwrap();
        let mut p = init_params(&arch, ExtraHead::Absent, &mut RngState::new(0)).unwrap();
        p.layers[0].weight = Matrix::identity(2);
        p.head_w = Matrix::identity(2);
        let tr = p.forward(&[1.0, -1.0]).unwrap();
        assert_eq!(tr.pre[0], vec![1.0, -1.0]);
        assert_eq!(tr.embedding(), &[1.0, 0.0]);
        assert_eq!(tr.class_logits, vec![1.0, 0.0]);
        assert_eq!(tr.extra_logit, None);
    }

    #[test]
    fn forward_dimension_mismatch() {
        let p = small_model(ExtraHead::Absent, 2);
        assert!(matches!(p.forward(&[1.0]), Err(Error::ShapeMismatch { .. })));
        assert!(p.forward_batch(&Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn extra_logit_bounded_below_by_bias() {
        let mut rng = RngState::new(77);
        for s in 0..200 {
            let mut p = small_model(ExtraHead::Quadratic, s);
            p.extra_b = 5.0 * rng.next_normal();
            let x: Vec<f64> = (0..3).map(|_| 100.0 * rng.next_normal()).collect();
            let z = p.forward(&x).unwrap().extra_logit.unwrap();
            assert!(z >= p.extra_b);
        }
    }

    #[test]
    fn batch_matches_singles() {
        let p = small_model(ExtraHead::Quadratic, 3);
        let mut rng = RngState::new(8);
        let xs = Matrix::from_vec(6, 3, (0..18).map(|_| rng.next_normal()).collect()).unwrap();
        let batch = p.forward_batch(&xs).unwrap();
        for (i, tr) in batch.iter().enumerate() {
            assert_eq!(*tr, p.forward(xs.row(i)).unwrap());
        }
        let dup = Matrix::from_rows(&[xs.row(0).to_vec(), xs.row(0).to_vec()]).unwrap();
        let b = p.forward_batch(&dup).unwrap();
        assert_eq!(b[0], b[1]);
    }

    #[test]
    fn backward_is_linear_in_upstream_gradient() {
        let p = small_model(ExtraHead::Quadratic, 4);
        let tr = p.forward(&[0.5, 0.2, -0.1]).unwrap();
        let zero = p.backward(&tr, &[0.0; 3]).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
        let g1 = p.backward(&tr, &[0.3, -0.7, 1.1]).unwrap();
        let mut g2 = p.backward(&tr, &[0.6, -1.4, 2.2]).unwrap();
        g2.scale(0.5);
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn backward_rejects_wrong_length() {
        let p = small_model(ExtraHead::Quadratic, 5);
        let tr = p.forward(&[0.5, 0.2, -0.1]).unwrap();
        assert!(p.backward(&tr, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn bytes_roundtrip_bit_exact() {
        for head in [ExtraHead::Absent, ExtraHead::Linear, ExtraHead::Quadratic] {
            let mut p = small_model(head, 6);
            p.extra_b = -0.0;
            p.head_b[0] = f64::MIN_POSITIVE / 3.0;
            let back = ModelParams::from_bytes(&p.to_bytes()).unwrap();
            assert_eq!(back.extra_head, head);
            for (a, b) in p.tensors().iter().zip(back.tensors()) {
                let ab: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u64> = b.iter().map(|v| v.to_bits()).collect();
                assert_eq!(ab, bb);
            }
        }
    }

    #[test]
    fn from_bytes_rejects_garbage() {
        assert!(ModelParams::from_bytes(b"nope").is_err());
        let mut bytes = small_model(ExtraHead::Linear, 1).to_bytes();
        bytes.pop();
        assert!(matches!(
            ModelParams::from_bytes(&bytes),
            Err(Error::ModelFormat(_))
        ));
    }
}
