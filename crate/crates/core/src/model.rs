//! Datasets, losses and their exact gradients.

use std::borrow::Cow;

use crate::error::{invalid, Error, Result};
use crate::vector::{DenseVector, Model};

/// An immutable labelled dataset.
///
/// Rows are stored sparsely (nonzero positions only), which matters for image
/// data where most pixels are zero. Feature value `j` of row `i` is
/// `scale · stored[i][j] + offset`: an affine standardization keeps the
/// stored rows sparse, and the losses fold the offset in through per-class
/// weight sums instead of densifying every row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
    row_ptr: Vec<usize>,
    nz_idx: Vec<u32>,
    nz_val: Vec<f64>,
    scale: f64,
    offset: f64,
}

impl Dataset {
    /// Builds a dataset from row-major dense features.
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, num_classes: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension(0));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * dim,
                actual: features.len(),
            });
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(invalid("features", "non-finite feature value"));
        }
        let mut row_ptr = Vec::with_capacity(labels.len() + 1);
        let mut nz_idx = Vec::new();
        let mut nz_val = Vec::new();
        row_ptr.push(0);
        for row in features.chunks(dim) {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    nz_idx.push(j as u32);
                    nz_val.push(v);
                }
            }
            row_ptr.push(nz_idx.len());
        }
        Self::from_parts(labels, dim, num_classes, row_ptr, nz_idx, nz_val, 1.0, 0.0)
    }

    #[allow(clippy::too_many_arguments)]
    fn from_parts(
        labels: Vec<usize>,
        dim: usize,
        num_classes: usize,
        row_ptr: Vec<usize>,
        nz_idx: Vec<u32>,
        nz_val: Vec<f64>,
        scale: f64,
        offset: f64,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(invalid("num_classes", "must be positive"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(invalid(
                "labels",
                format!("label {bad} not below num_classes {num_classes}"),
            ));
        }
        Ok(Self {
            labels,
            dim,
            num_classes,
            row_ptr,
            nz_idx,
            nz_val,
            scale,
            offset,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature dimension `d_x`.
    pub fn feature_dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Dense feature row `i`.
    pub fn features(&self, i: usize) -> Vec<f64> {
        let mut row = vec![self.offset; self.dim];
        let (idx, val) = self.sparse_row(i);
        for (&j, &v) in idx.iter().zip(val) {
            row[j as usize] = self.scale * v + self.offset;
        }
        row
    }

    pub(crate) fn sparse_row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.nz_idx[a..b], &self.nz_val[a..b])
    }

    /// `(scale, offset)` of the affine map from stored to actual features.
    pub(crate) fn affine(&self) -> (f64, f64) {
        (self.scale, self.offset)
    }

    /// Copy of the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut row_ptr = Vec::with_capacity(indices.len() + 1);
        let mut nz_idx = Vec::new();
        let mut nz_val = Vec::new();
        let mut labels = Vec::with_capacity(indices.len());
        row_ptr.push(0);
        for &i in indices {
            if i >= self.len() {
                return Err(invalid("indices", format!("index {i} out of range")));
            }
            let (idx, val) = self.sparse_row(i);
            nz_idx.extend_from_slice(idx);
            nz_val.extend_from_slice(val);
            row_ptr.push(nz_idx.len());
            labels.push(self.labels[i]);
        }
        Self::from_parts(labels, self.dim, self.num_classes, row_ptr, nz_idx, nz_val, self.scale, self.offset)
    }

    /// Same features, labels replaced through `f`.
    pub fn map_labels(&self, f: impl Fn(usize) -> usize) -> Result<Dataset> {
        let labels = self.labels.iter().map(|&l| f(l)).collect();
        Self::from_parts(
            labels,
            self.dim,
            self.num_classes,
            self.row_ptr.clone(),
            self.nz_idx.clone(),
            self.nz_val.clone(),
            self.scale,
            self.offset,
        )
    }

    /// Same labels, every feature value `x` replaced by `scale · x + offset`.
    /// Sparsity of the stored rows is preserved.
    pub fn affine_map(&self, scale: f64, offset: f64) -> Result<Dataset> {
        if !(scale.is_finite() && offset.is_finite()) || scale == 0.0 {
            return Err(invalid("scale", "affine map must be finite and invertible"));
        }
        Self::from_parts(
            self.labels.clone(),
            self.dim,
            self.num_classes,
            self.row_ptr.clone(),
            self.nz_idx.clone(),
            self.nz_val.clone(),
            scale * self.scale,
            scale * self.offset + offset,
        )
    }

    /// Mean and population standard deviation over all feature values.
    pub fn feature_moments(&self) -> (f64, f64) {
        let n = (self.len() * self.dim).max(1) as f64;
        let mean = self.nz_val.iter().sum::<f64>() / n;
        let sq = self.nz_val.iter().map(|x| x * x).sum::<f64>() / n;
        let std = (sq - mean * mean).max(0.0).sqrt();
        (self.scale * mean + self.offset, self.scale.abs() * std)
    }
}

/// A mini-batch: a view of some samples of a dataset.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    data: &'a Dataset,
    indices: Cow<'a, [usize]>,
}

impl<'a> Batch<'a> {
    pub fn new(data: &'a Dataset, indices: impl Into<Cow<'a, [usize]>>) -> Result<Self> {
        let indices = indices.into();
        if let Some(&bad) = indices.iter().find(|&&i| i >= data.len()) {
            return Err(invalid("batch", format!("index {bad} out of range")));
        }
        Ok(Self { data, indices })
    }

    pub fn all(data: &'a Dataset) -> Self {
        Self {
            data,
            indices: Cow::Owned((0..data.len()).collect()),
        }
    }

    pub fn data(&self) -> &'a Dataset {
        self.data
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// The learning objective.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    /// Softmax cross-entropy with one weight block per class, flattened
    /// row-major: block `c` holds the `d_x` weights of class `c`, followed by
    /// the class bias when `bias` is set.
    MulticlassLogistic { bias: bool },
    /// `F(w) = <c, w>`; ignores the data.
    Linear(DenseVector),
    /// `F(w) = ½‖w − center‖²`; ignores the data.
    Quadratic(DenseVector),
}

impl LossSpec {
    /// Model dimension this loss expects for the given data.
    pub fn model_dim(&self, data: &Dataset) -> usize {
        match self {
            LossSpec::MulticlassLogistic { bias } => {
                data.num_classes() * (data.feature_dim() + usize::from(*bias))
            }
            LossSpec::Linear(c) => c.dim(),
            LossSpec::Quadratic(center) => center.dim(),
        }
    }

    fn check(&self, w: &Model, batch: &Batch<'_>) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("batch"));
        }
        let expected = self.model_dim(batch.data());
        if w.dim() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: w.dim(),
            });
        }
        Ok(())
    }

    /// Mean per-sample loss of `w` on the batch.
    pub fn loss(&self, w: &Model, batch: &Batch<'_>) -> Result<f64> {
        self.check(w, batch)?;
        Ok(match self {
            LossSpec::MulticlassLogistic { bias } => {
                let mut logits = vec![0.0; batch.data().num_classes()];
                let shifts = offset_terms(w.as_slice(), batch.data(), *bias);
                let mut total = 0.0;
                for &i in batch.indices() {
                    logistic_logits(w.as_slice(), batch.data(), i, *bias, &shifts, &mut logits);
                    total += sample_cross_entropy(&logits, batch.data().label(i));
                }
                total / batch.len() as f64
            }
            LossSpec::Linear(c) => crate::vector::dot(c.as_slice(), w.as_slice()),
            LossSpec::Quadratic(center) => {
                0.5 * crate::vector::sq_dist(w.as_slice(), center.as_slice())
            }
        })
    }

    /// Exact gradient of [`LossSpec::loss`].
    pub fn grad(&self, w: &Model, batch: &Batch<'_>) -> Result<DenseVector> {
        self.check(w, batch)?;
        Ok(match self {
            LossSpec::MulticlassLogistic { bias } => {
                let data = batch.data();
                let classes = data.num_classes();
                let stride = data.feature_dim() + usize::from(*bias);
                let inv_n = 1.0 / batch.len() as f64;
                let (scale, offset) = data.affine();
                let mut g = vec![0.0; w.dim()];
                let mut logits = vec![0.0; classes];
                let shifts = offset_terms(w.as_slice(), data, *bias);
                // Per-class sum of the softmax residuals, spread over every
                // feature through the offset at the end.
                let mut residual = vec![0.0; classes];
                for &i in batch.indices() {
                    logistic_logits(w.as_slice(), data, i, *bias, &shifts, &mut logits);
                    softmax_in_place(&mut logits);
                    logits[data.label(i)] -= 1.0;
                    let (idx, val) = data.sparse_row(i);
                    for (c, &coef) in logits.iter().enumerate() {
                        let block = &mut g[c * stride..(c + 1) * stride];
                        let s = coef * inv_n;
                        residual[c] += s;
                        let sx = s * scale;
                        for (&j, &x) in idx.iter().zip(val) {
                            block[j as usize] += sx * x;
                        }
                        if *bias {
                            block[stride - 1] += s;
                        }
                    }
                }
                if offset != 0.0 {
                    for (c, &r) in residual.iter().enumerate() {
                        let shift = offset * r;
                        for gj in &mut g[c * stride..c * stride + data.feature_dim()] {
                            *gj += shift;
                        }
                    }
                }
                DenseVector::from_vec(g)
            }
            LossSpec::Linear(c) => c.clone(),
            LossSpec::Quadratic(center) => w.sub(center)?,
        })
    }

    /// Precomputes what two-point evaluations around `w` share.
    pub fn prepare<'a>(&'a self, w: &'a Model, batch: &'a Batch<'a>) -> Result<PreparedLoss<'a>> {
        self.check(w, batch)?;
        let base_logits = match self {
            LossSpec::MulticlassLogistic { bias } => {
                let classes = batch.data().num_classes();
                let mut out = vec![0.0; batch.len() * classes];
                let shifts = offset_terms(w.as_slice(), batch.data(), *bias);
                for (k, &i) in batch.indices().iter().enumerate() {
                    logistic_logits(
                        w.as_slice(),
                        batch.data(),
                        i,
                        *bias,
                        &shifts,
                        &mut out[k * classes..(k + 1) * classes],
                    );
                }
                out
            }
            _ => Vec::new(),
        };
        Ok(PreparedLoss {
            spec: self,
            w,
            batch,
            base_logits,
        })
    }
}

/// A loss anchored at a model and batch, for evaluating `F(w ± μz)` along
/// many directions.
///
/// For the logistic loss the logits are affine in the model, so the logits
/// at `w ± μz` are `B ± μ·Z` with the base logits `B` computed once.
pub struct PreparedLoss<'a> {
    spec: &'a LossSpec,
    w: &'a Model,
    batch: &'a Batch<'a>,
    base_logits: Vec<f64>,
}

impl PreparedLoss<'_> {
    /// Returns `(F(w + μz), F(w − μz))`.
    pub fn pair(&self, z: &DenseVector, mu: f64) -> Result<(f64, f64)> {
        self.w.check_dim(z)?;
        match self.spec {
            LossSpec::MulticlassLogistic { bias } => {
                let data = self.batch.data();
                let classes = data.num_classes();
                let mut dir = vec![0.0; classes];
                let mut plus = vec![0.0; classes];
                let mut minus = vec![0.0; classes];
                let (mut f_plus, mut f_minus) = (0.0, 0.0);
                let shifts = offset_terms(z.as_slice(), data, *bias);
                for (k, &i) in self.batch.indices().iter().enumerate() {
                    logistic_logits(z.as_slice(), data, i, *bias, &shifts, &mut dir);
                    let base = &self.base_logits[k * classes..(k + 1) * classes];
                    for c in 0..classes {
                        plus[c] = base[c] + mu * dir[c];
                        minus[c] = base[c] - mu * dir[c];
                    }
                    let y = data.label(i);
                    f_plus += sample_cross_entropy(&plus, y);
                    f_minus += sample_cross_entropy(&minus, y);
                }
                let n = self.batch.len() as f64;
                Ok((f_plus / n, f_minus / n))
            }
            _ => {
                let mut shifted = self.w.clone();
                shifted.axpy(mu, z)?;
                let f_plus = self.spec.loss(&shifted, self.batch)?;
                let mut shifted = self.w.clone();
                shifted.axpy(-mu, z)?;
                let f_minus = self.spec.loss(&shifted, self.batch)?;
                Ok((f_plus, f_minus))
            }
        }
    }
}

/// Per-class contribution of the dataset's feature offset to the logits:
/// `offset · Σ_j w_cj`. Empty when there is no offset.
fn offset_terms(w: &[f64], data: &Dataset, bias: bool) -> Vec<f64> {
    let (_, offset) = data.affine();
    if offset == 0.0 {
        return Vec::new();
    }
    let stride = data.feature_dim() + usize::from(bias);
    (0..data.num_classes())
        .map(|c| offset * w[c * stride..c * stride + data.feature_dim()].iter().sum::<f64>())
        .collect()
}

#[inline]
fn logistic_logits(w: &[f64], data: &Dataset, i: usize, bias: bool, shifts: &[f64], out: &mut [f64]) {
    let stride = data.feature_dim() + usize::from(bias);
    let (scale, _) = data.affine();
    let (idx, val) = data.sparse_row(i);
    for (c, slot) in out.iter_mut().enumerate() {
        let block = &w[c * stride..(c + 1) * stride];
        let mut acc = 0.0;
        for (&j, &x) in idx.iter().zip(val) {
            acc += block[j as usize] * x;
        }
        acc *= scale;
        if let Some(s) = shifts.get(c) {
            acc += s;
        }
        if bias {
            acc += block[stride - 1];
        }
        *slot = acc;
    }
}

#[inline]
fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln()
}

#[inline]
fn sample_cross_entropy(logits: &[f64], label: usize) -> f64 {
    log_sum_exp(logits) - logits[label]
}

fn softmax_in_place(logits: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - m).exp();
        s += *l;
    }
    for l in logits.iter_mut() {
        *l /= s;
    }
}

/// Index of the largest logit; ties go to the lowest class.
pub fn predict(w: &Model, data: &Dataset, i: usize, bias: bool) -> usize {
    let shifts = offset_terms(w.as_slice(), data, bias);
    predict_shifted(w, data, i, bias, &shifts)
}

fn predict_shifted(w: &Model, data: &Dataset, i: usize, bias: bool, shifts: &[f64]) -> usize {
    let mut logits = vec![0.0; data.num_classes()];
    logistic_logits(w.as_slice(), data, i, bias, shifts, &mut logits);
    let mut best = 0;
    for c in 1..logits.len() {
        if logits[c] > logits[best] {
            best = c;
        }
    }
    best
}

/// Fraction of test samples whose argmax prediction is correct.
pub fn accuracy(spec: &LossSpec, w: &Model, test: &Dataset) -> Result<f64> {
    let LossSpec::MulticlassLogistic { bias } = spec else {
        return Err(invalid("spec", "accuracy is defined for the logistic loss only"));
    };
    if test.is_empty() {
        return Err(Error::EmptyInput("test set"));
    }
    let expected = spec.model_dim(test);
    if w.dim() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            actual: w.dim(),
        });
    }
    let shifts = offset_terms(w.as_slice(), test, *bias);
    let correct = (0..test.len())
        .filter(|&i| predict_shifted(w, test, i, *bias, &shifts) == test.label(i))
        .count();
    Ok(correct as f64 / test.len() as f64)
}
