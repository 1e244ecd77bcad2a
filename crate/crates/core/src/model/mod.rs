//! Single-layer multi-head attention with a single query.
//!
//! Per head `h`:
//!
//! ```text
//! alpha_h = E W_K,h W_Q,hᵀ e        (n)
//! theta_h = softmax(alpha_h)         (n)
//! z_h     = Eᵀ theta_h               (d)
//! p_h     = W_V,hᵀ z_h               (d_v)
//! ```
//!
//! then `o = W_Oᵀ [p_1; ...; p_H]` (plus `e` with a skip connection) and
//! `y_hat = W_Dᵀ o`. There is no `1/sqrt(d_h)` logit scaling.

mod data;

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

pub(crate) use data::argmax;
pub use data::{Dataset, DatasetDims, Example, Task};

use crate::error::{arg_err, dim_err, Result};
use crate::numerics::{axpy, Matrix};
use crate::random::gaussian_matrix;

/// Layer shape. `r = min(n, d_h)` depends on the data and is not stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttentionConfig {
    pub heads: usize,
    pub d: usize,
    pub d_h: usize,
    pub d_v: usize,
    pub d_out: usize,
    pub skip_connection: bool,
}

impl AttentionConfig {
    pub fn new(heads: usize, d: usize, d_h: usize, d_v: usize, d_out: usize) -> Result<Self> {
        let cfg = Self {
            heads,
            d,
            d_h,
            d_v,
            d_out,
            skip_connection: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_skip(mut self, skip: bool) -> Self {
        self.skip_connection = skip;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(arg_err!("need at least one head"));
        }
        if self.d_h == 0 {
            return Err(arg_err!("d_h must be at least 1"));
        }
        if !(1 <= self.d_out && self.d_out <= self.d_v && self.d_v <= self.d) {
            return Err(arg_err!(
                "need 1 <= d_out <= d_v <= d, got d_out={}, d_v={}, d={}",
                self.d_out,
                self.d_v,
                self.d
            ));
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.heads * (2 * self.d * self.d_h + self.d * self.d_v) + self.heads * self.d_v * self.d + self.d * self.d_out
    }
}

/// Key, query and value matrices of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    /// `d x d_h`
    pub key: Matrix,
    /// `d x d_h`
    pub query: Matrix,
    /// `d x d_v`
    pub value: Matrix,
}

impl HeadWeights {
    pub fn zeros(cfg: &AttentionConfig) -> Self {
        Self {
            key: Matrix::zeros(cfg.d, cfg.d_h),
            query: Matrix::zeros(cfg.d, cfg.d_h),
            value: Matrix::zeros(cfg.d, cfg.d_v),
        }
    }

    /// Attention logits `E W_K W_Qᵀ e`, evaluated right to left.
    pub fn logits(&self, context: &Matrix, query: &[f64]) -> Result<Vec<f64>> {
        let q = self.query.tr_mul_vec(query)?;
        let k = self.key.mul_vec(&q)?;
        context.mul_vec(&k)
    }

    /// The bilinear form `W_K W_Qᵀ` (`d x d`).
    pub fn bilinear(&self) -> Matrix {
        self.key
            .matmul(&self.query.transpose())
            .expect("key and query share d_h")
    }
}

/// All parameters of the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub heads: Vec<HeadWeights>,
    /// `(H d_v) x d`
    pub output: Matrix,
    /// `d x d_out`
    pub readout: Matrix,
}

impl AttentionWeights {
    pub fn zeros(cfg: &AttentionConfig) -> Self {
        Self {
            heads: (0..cfg.heads).map(|_| HeadWeights::zeros(cfg)).collect(),
            output: Matrix::zeros(cfg.heads * cfg.d_v, cfg.d),
            readout: Matrix::zeros(cfg.d, cfg.d_out),
        }
    }

    /// Gaussian initialisation with standard deviation `1/sqrt(fan_in)`.
    pub fn random<R: Rng + ?Sized>(cfg: &AttentionConfig, rng: &mut R) -> Self {
        let inv = |fan_in: usize| 1.0 / libm::sqrt(fan_in as f64);
        let heads = (0..cfg.heads)
            .map(|_| HeadWeights {
                key: gaussian_matrix(rng, cfg.d, cfg.d_h, inv(cfg.d)),
                query: gaussian_matrix(rng, cfg.d, cfg.d_h, inv(cfg.d)),
                value: gaussian_matrix(rng, cfg.d, cfg.d_v, inv(cfg.d)),
            })
            .collect();
        Self {
            heads,
            output: gaussian_matrix(rng, cfg.heads * cfg.d_v, cfg.d, inv(cfg.heads * cfg.d_v)),
            readout: gaussian_matrix(rng, cfg.d, cfg.d_out, inv(cfg.d)),
        }
    }

    /// Check every matrix against `cfg` and for finiteness.
    pub fn validate(&self, cfg: &AttentionConfig) -> Result<()> {
        cfg.validate()?;
        if self.heads.len() != cfg.heads {
            return Err(dim_err!("expected {} heads, got {}", cfg.heads, self.heads.len()));
        }
        let expect = |m: &Matrix, r: usize, c: usize, name: &str| {
            if m.shape() != (r, c) {
                Err(dim_err!("{name} is {}x{}, expected {r}x{c}", m.rows(), m.cols()))
            } else {
                m.ensure_finite()
            }
        };
        for h in &self.heads {
            expect(&h.key, cfg.d, cfg.d_h, "key")?;
            expect(&h.query, cfg.d, cfg.d_h, "query")?;
            expect(&h.value, cfg.d, cfg.d_v, "value")?;
        }
        expect(&self.output, cfg.heads * cfg.d_v, cfg.d, "output")?;
        expect(&self.readout, cfg.d, cfg.d_out, "readout")
    }

    /// Every parameter matrix in a fixed order: per head key, query, value; then output, readout.
    pub fn matrices(&self) -> Vec<&Matrix> {
        let mut out = Vec::with_capacity(3 * self.heads.len() + 2);
        for h in &self.heads {
            out.extend([&h.key, &h.query, &h.value]);
        }
        out.push(&self.output);
        out.push(&self.readout);
        out
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::with_capacity(3 * self.heads.len() + 2);
        for h in &mut self.heads {
            out.push(&mut h.key);
            out.push(&mut h.query);
            out.push(&mut h.value);
        }
        out.push(&mut self.output);
        out.push(&mut self.readout);
        out
    }

    /// Stacked value weights `[W_V,1; ...; W_V,H]` (`(H d) x d_v`).
    pub fn stacked_values(&self) -> Matrix {
        let blocks: Vec<&Matrix> = self.heads.iter().map(|h| &h.value).collect();
        Matrix::vstack(&blocks).expect("value blocks share d_v")
    }
}

/// Intermediate values of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrace {
    pub logits: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub attended: Vec<f64>,
    pub projected: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub heads: Vec<HeadTrace>,
    /// Layer output `o` (`d`).
    pub output: Vec<f64>,
    /// Prediction `y_hat` (`d_out`).
    pub prediction: Vec<f64>,
}

/// Max-subtracted softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| libm::exp(x - max)).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    out
}

fn check_input(cfg: &AttentionConfig, context: &Matrix, query: &[f64]) -> Result<()> {
    if context.cols() != cfg.d || query.len() != cfg.d {
        return Err(dim_err!(
            "context is {}x{} and query has length {}, expected width {}",
            context.rows(),
            context.cols(),
            query.len(),
            cfg.d
        ));
    }
    if context.rows() == 0 {
        return Err(dim_err!("context has no tokens"));
    }
    Ok(())
}

/// Run the layer on one example and keep every intermediate.
pub fn forward(w: &AttentionWeights, cfg: &AttentionConfig, context: &Matrix, query: &[f64]) -> Result<ForwardTrace> {
    w.validate(cfg)?;
    forward_unchecked(w, cfg, context, query)
}

/// `forward` without the weight-shape validation; inputs are still checked.
pub(crate) fn forward_unchecked(
    w: &AttentionWeights,
    cfg: &AttentionConfig,
    context: &Matrix,
    query: &[f64],
) -> Result<ForwardTrace> {
    check_input(cfg, context, query)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut output = if cfg.skip_connection {
        query.to_vec()
    } else {
        vec![0.0; cfg.d]
    };
    for (h, hw) in w.heads.iter().enumerate() {
        let logits = hw.logits(context, query)?;
        let coefficients = softmax(&logits);
        let attended = context.tr_mul_vec(&coefficients)?;
        let projected = hw.value.tr_mul_vec(&attended)?;
        for (j, &p) in projected.iter().enumerate() {
            axpy(p, w.output.row(h * cfg.d_v + j), &mut output);
        }
        heads.push(HeadTrace {
            logits,
            coefficients,
            attended,
            projected,
        });
    }
    let prediction = w.readout.tr_mul_vec(&output)?;
    Ok(ForwardTrace {
        heads,
        output,
        prediction,
    })
}

fn check_dataset(cfg: &AttentionConfig, data: &Dataset) -> Result<()> {
    if data.dims().d != cfg.d {
        return Err(dim_err!("dataset has d={}, config has d={}", data.dims().d, cfg.d));
    }
    Ok(())
}

/// Rows `z_h⁽ᵗ⁾ = E⁽ᵗ⁾ᵀ softmax(E⁽ᵗ⁾ W_K W_Qᵀ e⁽ᵗ⁾)` of one head (`T x d`).
pub fn attended_block(head: &HeadWeights, data: &Dataset) -> Result<Matrix> {
    let d = data.dims().d;
    let mut out = Matrix::zeros(data.len(), d);
    for (t, ex) in data.examples().iter().enumerate() {
        let theta = softmax(&head.logits(&ex.context, &ex.query)?);
        out.row_mut(t).copy_from_slice(&ex.context.tr_mul_vec(&theta)?);
    }
    Ok(out)
}

/// Feature matrix `Z` (`T x H d`): row `t` concatenates `z_h⁽ᵗ⁾` over heads.
pub fn feature_matrix(w: &AttentionWeights, cfg: &AttentionConfig, data: &Dataset) -> Result<Matrix> {
    w.validate(cfg)?;
    check_dataset(cfg, data)?;
    let blocks = w
        .heads
        .iter()
        .map(|h| attended_block(h, data))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Matrix> = blocks.iter().collect();
    Matrix::hstack(&refs)
}

/// The token-mixing layer with `W_K = W_Q = 0`, `W_V = W_O = I` and a skip
/// connection: every token (query and context rows) gets the context mean added.
pub fn mixing_layer(data: &Dataset) -> Dataset {
    let examples = data
        .examples()
        .iter()
        .map(|ex| {
            let mean = ex.context.row_mean();
            let mut context = ex.context.clone();
            for i in 0..context.rows() {
                axpy(1.0, &mean, context.row_mut(i));
            }
            let mut query = ex.query.clone();
            axpy(1.0, &mean, &mut query);
            Example {
                context,
                query,
                label: ex.label.clone(),
            }
        })
        .collect();
    Dataset::new(examples, data.task()).expect("mixing preserves dataset shape")
}

/// Sinusoidal encodings: entry `(i, 2k) = sin(i / 10000^(2k/d))` and
/// `(i, 2k+1) = cos(i / 10000^(2k/d))` for positions `i = 0..n_positions`.
pub fn sinusoidal_positional_encoding(n_positions: usize, d: usize) -> Result<Matrix> {
    if d % 2 != 0 {
        return Err(arg_err!("positional encoding needs an even width, got {d}"));
    }
    Ok(Matrix::from_fn(n_positions, d, |i, j| {
        let k = j / 2;
        let freq = libm::pow(10000.0, (2 * k) as f64 / d as f64);
        let angle = i as f64 / freq;
        if j % 2 == 0 {
            libm::sin(angle)
        } else {
            libm::cos(angle)
        }
    }))
}
