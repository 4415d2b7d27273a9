//! The sentence model: a hierarchy of feature-wise valid 1-D convolutions of
//! increasing kernel size that telescopes a sentence matrix down to a single
//! column, plus the exact backward pass for kernels, biases, and word vectors.
//!
//! Each feature (embedding dimension) is composed independently with its own
//! kernels; the resulting value for feature f in the sentence vector depends
//! only on row f of the sentence matrix. Cross-feature mixing happens later,
//! in the discourse model.

use crate::error::{Error, Result};
use crate::numerics::{conv1d_valid, Mat, Sigmoid};

/// The per-length sequence of kernel sizes.
///
/// For a sentence of `l` words the sequence has length `t = ⌈√(2l)⌉ − 1`
/// (with the degenerate case `l = 1 → sizes = [1]`): sizes start at 2 and
/// grow by one, and the final size is whatever is left so that repeated
/// valid convolution reduces the length exactly to 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelSchedule {
    sentence_len: usize,
    sizes: Vec<usize>,
}

impl KernelSchedule {
    /// Builds the schedule for a sentence of `l` words.
    pub fn for_len(l: usize) -> Result<Self> {
        if l == 0 {
            return Err(Error::invalid("no kernel schedule for an empty sentence"));
        }
        // t = ⌈√(2l)⌉ − 1, computed in integers: smallest r with r² ≥ 2l.
        let mut r = 1usize;
        while r * r < 2 * l {
            r += 1;
        }
        let t = r - 1;
        let mut sizes = Vec::with_capacity(t);
        let mut consumed = 0; // Σ (k_j − 1) so far
        for i in 1..t {
            let k = i + 1;
            sizes.push(k);
            consumed += k - 1;
        }
        // Closing size: whatever reduces the remaining length to 1. For t = 1
        // this yields l itself (so l = 1 gets the size-1 degenerate kernel).
        sizes.push(l - consumed);
        debug_assert_eq!(sizes.iter().map(|k| k - 1).sum::<usize>(), l - 1);
        Ok(KernelSchedule { sentence_len: l, sizes })
    }

    pub fn sentence_len(&self) -> usize {
        self.sentence_len
    }

    /// Number of convolution layers t.
    pub fn depth(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Row lengths through the hierarchy: l, then one entry per layer,
    /// ending in 1.
    pub fn lengths(&self) -> Vec<usize> {
        let mut lengths = Vec::with_capacity(self.sizes.len() + 1);
        let mut len = self.sentence_len;
        lengths.push(len);
        for &k in &self.sizes {
            len = len - k + 1;
            lengths.push(len);
        }
        lengths
    }
}

/// Builds the schedule for `l` words (the spec-level entry point).
pub fn schedule_for(l: usize) -> Result<KernelSchedule> {
    KernelSchedule::for_len(l)
}

/// Largest kernel size any sentence of length ≤ `max_len` needs at each
/// layer. Kernels are stored at these sizes and prefix-sliced when a
/// particular sentence length demands a smaller final kernel.
pub fn stored_kernel_sizes(max_len: usize) -> Vec<usize> {
    assert!(max_len >= 1);
    let depth = KernelSchedule::for_len(max_len).unwrap().depth();
    let mut sizes = vec![1usize; depth];
    for l in 1..=max_len {
        let schedule = KernelSchedule::for_len(l).unwrap();
        for (layer, &k) in schedule.sizes().iter().enumerate() {
            if k > sizes[layer] {
                sizes[layer] = k;
            }
        }
    }
    sizes
}

/// A sentence paired with its matrix: column j is the embedding of word j.
#[derive(Debug, Clone)]
pub struct SentenceMatrix {
    /// n features × l words.
    pub mat: Mat,
    /// Token ids, one per column; kept so gradients can be routed back to
    /// embedding rows.
    pub tokens: Vec<usize>,
}

impl SentenceMatrix {
    pub fn n_features(&self) -> usize {
        self.mat.rows()
    }

    pub fn len(&self) -> usize {
        self.mat.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.mat.cols() == 0
    }
}

/// Builds the sentence matrix from token ids.
///
/// `embeddings` has one row per vocabulary entry (V × n); column j of the
/// result is the embedding of `tokens[j]`.
pub fn embed_sentence(tokens: &[usize], embeddings: &Mat) -> Result<SentenceMatrix> {
    if tokens.is_empty() {
        return Err(Error::invalid("cannot embed an empty sentence"));
    }
    let n = embeddings.cols();
    let vocab = embeddings.rows();
    let mut mat = Mat::zeros(n, tokens.len());
    for (j, &t) in tokens.iter().enumerate() {
        if t >= vocab {
            return Err(Error::invalid(format!(
                "token id {t} out of range for vocabulary of {vocab}"
            )));
        }
        let vec = embeddings.row(t);
        for f in 0..n {
            mat.set(f, j, vec[f]);
        }
    }
    Ok(SentenceMatrix { mat, tokens: tokens.to_vec() })
}

/// Convolution kernels and biases for the sentence model: one kernel and one
/// scalar bias per (feature, layer).
///
/// The final kernel size of the schedule depends on the sentence length, so a
/// stored kernel is sized for the largest demand at its layer (over all
/// lengths ≤ `max_len`) and prefix-sliced down when a shorter sentence asks
/// for less. Gradients flow only into the used prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct HcnnParams {
    n_features: usize,
    max_len: usize,
    layer_sizes: Vec<usize>,
    layer_offsets: Vec<usize>,
    feature_stride: usize,
    /// Feature-major storage: all layers of feature 0, then feature 1, ...
    pub kernels: Vec<f64>,
    /// Feature-major: bias of (feature f, layer i) at `f * n_layers + i`.
    pub biases: Vec<f64>,
    pub sigmoid: Sigmoid,
}

impl HcnnParams {
    /// Zero-initialised parameters supporting sentences up to `max_len` words.
    pub fn new(n_features: usize, max_len: usize, sigmoid: Sigmoid) -> Self {
        assert!(n_features >= 1 && max_len >= 1);
        let layer_sizes = stored_kernel_sizes(max_len);
        let mut layer_offsets = Vec::with_capacity(layer_sizes.len());
        let mut off = 0;
        for &s in &layer_sizes {
            layer_offsets.push(off);
            off += s;
        }
        let feature_stride = off;
        HcnnParams {
            n_features,
            max_len,
            kernels: vec![0.0; n_features * feature_stride],
            biases: vec![0.0; n_features * layer_sizes.len()],
            layer_sizes,
            layer_offsets,
            feature_stride,
            sigmoid,
        }
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len()
    }

    /// Stored kernel size per layer.
    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    fn kernel_offset(&self, feature: usize, layer: usize) -> usize {
        feature * self.feature_stride + self.layer_offsets[layer]
    }

    /// Full stored kernel for (feature, layer).
    pub fn kernel(&self, feature: usize, layer: usize) -> &[f64] {
        let off = self.kernel_offset(feature, layer);
        &self.kernels[off..off + self.layer_sizes[layer]]
    }

    pub fn bias(&self, feature: usize, layer: usize) -> f64 {
        self.biases[feature * self.n_layers() + layer]
    }

    pub fn n_params(&self) -> usize {
        self.kernels.len() + self.biases.len()
    }
}

/// All intermediate activations of one forward pass, retained for the
/// backward pass: M^1 = M^s through M^{t+1} (a single column).
#[derive(Debug, Clone)]
pub struct HcnnTrace {
    pub layers: Vec<Mat>,
    pub schedule: KernelSchedule,
    pub tokens: Vec<usize>,
}

impl HcnnTrace {
    pub fn sentence_vector(&self) -> Vec<f64> {
        self.layers.last().unwrap().col(0)
    }
}

/// Runs the hierarchy of feature-wise convolutions.
///
/// Returns the sentence vector (one value per feature) and the full trace.
pub fn hcnn_forward(m: &SentenceMatrix, params: &HcnnParams) -> Result<(Vec<f64>, HcnnTrace)> {
    let n = m.n_features();
    if n != params.n_features {
        return Err(Error::invalid(format!(
            "sentence matrix has {n} features, parameters expect {}",
            params.n_features
        )));
    }
    let l = m.len();
    if l > params.max_len {
        return Err(Error::Capacity { len: l, max_len: params.max_len });
    }
    let schedule = KernelSchedule::for_len(l)?;
    debug_assert!(schedule.depth() <= params.n_layers());

    let mut layers = Vec::with_capacity(schedule.depth() + 1);
    layers.push(m.mat.clone());
    for (layer, &k) in schedule.sizes().iter().enumerate() {
        let prev = layers.last().unwrap();
        let out_len = prev.cols() - k + 1;
        let mut next = Mat::zeros(n, out_len);
        for f in 0..n {
            let ker = &params.kernel(f, layer)[..k];
            let conv = conv1d_valid(ker, prev.row(f))?;
            let b = params.bias(f, layer);
            let row = next.row_mut(f);
            for (q, c) in conv.iter().enumerate() {
                row[q] = params.sigmoid.apply(c + b);
            }
        }
        layers.push(next);
    }
    debug_assert_eq!(layers.last().unwrap().cols(), 1);

    let trace = HcnnTrace { layers, schedule, tokens: m.tokens.clone() };
    Ok((trace.sentence_vector(), trace))
}

/// Gradients produced by [`hcnn_backward`]: same layout as the parameter
/// storage, plus the gradient with respect to the input sentence matrix
/// (one column per word, to be accumulated into embedding rows).
#[derive(Debug, Clone)]
pub struct HcnnGrads {
    pub kernels: Vec<f64>,
    pub biases: Vec<f64>,
    pub input: Mat,
}

/// Exact gradients of a scalar loss with respect to every kernel weight,
/// bias, and input column, given ∂L/∂(sentence vector).
pub fn hcnn_backward(
    trace: &HcnnTrace,
    params: &HcnnParams,
    grad_sentence_vector: &[f64],
) -> Result<HcnnGrads> {
    let mut kernels = vec![0.0; params.kernels.len()];
    let mut biases = vec![0.0; params.biases.len()];
    let input =
        hcnn_backward_into(trace, params, grad_sentence_vector, &mut kernels, &mut biases)?;
    Ok(HcnnGrads { kernels, biases, input })
}

/// Backward pass accumulating kernel/bias gradients into caller-owned
/// buffers (laid out exactly like `params.kernels` / `params.biases`).
/// Returns ∂L/∂M^s.
pub fn hcnn_backward_into(
    trace: &HcnnTrace,
    params: &HcnnParams,
    grad_sentence_vector: &[f64],
    kernel_grads: &mut [f64],
    bias_grads: &mut [f64],
) -> Result<Mat> {
    let n = params.n_features;
    if grad_sentence_vector.len() != n {
        return Err(Error::invalid(format!(
            "sentence-vector gradient has length {}, expected {n}",
            grad_sentence_vector.len()
        )));
    }
    if kernel_grads.len() != params.kernels.len() || bias_grads.len() != params.biases.len() {
        return Err(Error::invalid("gradient buffer layout mismatch"));
    }
    let depth = trace.schedule.depth();
    if trace.layers.len() != depth + 1 || trace.layers[0].rows() != n {
        return Err(Error::invalid("trace does not match parameters"));
    }

    // d_next holds ∂L/∂M^{i+1} while processing layer i, walking top-down.
    let mut d_next = Mat::zeros(n, 1);
    for f in 0..n {
        d_next.set(f, 0, grad_sentence_vector[f]);
    }

    for layer in (0..depth).rev() {
        let k = trace.schedule.sizes()[layer];
        let m_in = &trace.layers[layer];
        let m_out = &trace.layers[layer + 1];
        let out_len = m_out.cols();
        let mut d_in = Mat::zeros(n, m_in.cols());
        for f in 0..n {
            let in_row = m_in.row(f);
            let out_row = m_out.row(f);
            let d_out_row = d_next.row(f);
            let ker = &params.kernel(f, layer)[..k];
            let ker_off = params.kernel_offset(f, layer);
            let d_in_row = d_in.row_mut(f);
            let mut db = 0.0;
            for q in 0..out_len {
                let da = d_out_row[q] * params.sigmoid.derivative_from_output(out_row[q]);
                db += da;
                for j in 0..k {
                    let idx = k + q - j - 1;
                    kernel_grads[ker_off + j] += da * in_row[idx];
                    d_in_row[idx] += da * ker[j];
                }
            }
            bias_grads[f * params.n_layers() + layer] += db;
        }
        d_next = d_in;
    }
    Ok(d_next)
}
