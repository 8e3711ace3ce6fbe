use serde::{Deserialize, Serialize};

use super::NumericsError;

/// Dense row-major tensor of `f64`.
///
/// Every dimension is positive and every entry is finite; both are checked
/// when a tensor is built, so downstream code never sees NaN or infinities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = NumericsError;

    fn try_from(raw: RawTensor) -> Result<Self, Self::Error> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl From<Tensor> for RawTensor {
    fn from(t: Tensor) -> Self {
        RawTensor {
            shape: t.shape,
            data: t.data,
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(NumericsError::Shape(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::Shape(format!(
                "shape {shape:?} needs {expected} entries, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite(format!(
                "entry {pos} of tensor with shape {shape:?} is {}",
                data[pos]
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, NumericsError> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self, NumericsError> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Result<Self, NumericsError> {
        Tensor::new(vec![1], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self, NumericsError> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumericsError::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Result<Self, NumericsError> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::matrix(n, n, data)
    }

    /// Construction path for values produced by internal kernels; still
    /// rejects non-finite output.
    pub(crate) fn from_kernel(
        shape: Vec<usize>,
        data: Vec<f64>,
        op: &str,
    ) -> Result<Self, NumericsError> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite(format!("{op} produced a non-finite value")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows when viewed as a matrix (leading dims collapsed).
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    /// Size of the trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols()).map(<[f64]>::to_vec).collect()
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self, NumericsError> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn as_scalar(&self) -> Result<f64, NumericsError> {
        if self.numel() == 1 {
            Ok(self.data[0])
        } else {
            Err(NumericsError::Shape(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn require_matrix(&self, op: &str) -> Result<(usize, usize), NumericsError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(NumericsError::Shape(format!(
                "{op} expects a matrix, got shape {other:?}"
            ))),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, NumericsError> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(NumericsError::Shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let out = kernels::matmul(&self.data, &other.data, m, k, n);
        Tensor::from_kernel(vec![m, n], out, "matmul")
    }

    pub fn transpose(&self) -> Result<Tensor, NumericsError> {
        let (m, n) = self.require_matrix("transpose")?;
        Ok(Tensor {
            shape: vec![n, m],
            data: kernels::transpose(&self.data, m, n),
        })
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor, NumericsError> {
        if axis >= self.shape.len() {
            return Err(NumericsError::Shape(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = vec![0.0; self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| self.data[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (self.data[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        Tensor::from_kernel(self.shape.clone(), out, "softmax")
    }

    /// Normalises the trailing dimension to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor, NumericsError> {
        check_layer_norm(self, gain, bias, eps)?;
        let (out, _) = kernels::layer_norm(&self.data, gain.data(), bias.data(), self.cols(), eps);
        Tensor::from_kernel(self.shape.clone(), out, "layer_norm")
    }
}

pub(crate) fn check_layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(), NumericsError> {
    if !(eps > 0.0) {
        return Err(NumericsError::Config(format!("layer_norm eps must be positive, got {eps}")));
    }
    let c = x.cols();
    if gain.numel() != c || bias.numel() != c {
        return Err(NumericsError::Shape(format!(
            "layer_norm gain {:?} / bias {:?} must match last dimension {c}",
            gain.shape(),
            bias.shape()
        )));
    }
    Ok(())
}

/// Scaled dot-product attention `softmax(q kᵀ / √w) v` without masking.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor, NumericsError> {
    let (_, wq) = q.require_matrix("attention")?;
    let (t, wk) = k.require_matrix("attention")?;
    let (tv, _) = v.require_matrix("attention")?;
    if wq != wk {
        return Err(NumericsError::Shape(format!(
            "attention query width {:?} differs from key width {:?}",
            q.shape(),
            k.shape()
        )));
    }
    if t != tv {
        return Err(NumericsError::Shape(format!(
            "attention keys {:?} and values {:?} disagree on length",
            k.shape(),
            v.shape()
        )));
    }
    let scale = 1.0 / (wq as f64).sqrt();
    let mut logits = q.matmul(&k.transpose()?)?;
    logits.data_mut().iter_mut().for_each(|x| *x *= scale);
    logits.softmax(1)?.matmul(v)
}

pub(crate) mod kernels {
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        out
    }

    /// `a` is m×k, `b` is n×k; returns a·bᵀ (m×n).
    pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    /// `a` is k×m, `b` is k×n; returns aᵀ·b (m×n).
    pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let arow = &a[p * m..(p + 1) * m];
            let brow = &b[p * n..(p + 1) * n];
            for (i, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        out
    }

    pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        out
    }

    /// Returns the output and, per row, (mean, 1/std).
    pub fn layer_norm(
        x: &[f64],
        gain: &[f64],
        bias: &[f64],
        cols: usize,
        eps: f64,
    ) -> (Vec<f64>, Vec<(f64, f64)>) {
        let mut out = vec![0.0; x.len()];
        let mut stats = Vec::with_capacity(x.len() / cols);
        for (row, orow) in x.chunks(cols).zip(out.chunks_mut(cols)) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                orow[j] = (row[j] - mean) * rstd * gain[j] + bias[j];
            }
            stats.push((mean, rstd));
        }
        (out, stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(matches!(
            Tensor::vector(vec![1.0, f64::NAN]),
            Err(NumericsError::NonFinite(_))
        ));
        assert!(Tensor::vector(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn matmul_identity_and_zero() {
        let b = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let i3 = Tensor::identity(3).unwrap();
        assert_eq!(i3.matmul(&b).unwrap(), b);
        let z = Tensor::zeros(&[2, 3]).unwrap();
        assert_eq!(z.matmul(&b).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[4, 5]).unwrap();
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let u = Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap().softmax(0).unwrap();
        assert!(close(u.data(), &[1.0 / 3.0; 3], 1e-15));
        let s = Tensor::vector(vec![1000.0, 0.0]).unwrap().softmax(0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);
        let h = Tensor::vector(vec![2f64.ln(), 0.0]).unwrap().softmax(0).unwrap();
        assert!(close(h.data(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
        assert!(Tensor::vector(vec![1.0]).unwrap().softmax(1).is_err());
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 3.0]]).unwrap();
        let s = x.softmax(0).unwrap();
        assert!(close(&[s.data()[0], s.data()[2]], &[0.5, 0.5], 1e-15));
        assert!((s.data()[1] + s.data()[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_cases() {
        let one = Tensor::vector(vec![1.0, 1.0]).unwrap();
        let zero = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let c = Tensor::vector(vec![4.0, 4.0]).unwrap();
        assert_eq!(c.layer_norm(&one, &zero, 1e-5).unwrap().data(), &[0.0, 0.0]);

        let x = Tensor::vector(vec![1.0, -1.0]).unwrap();
        let y = x.layer_norm(&one, &zero, 1e-14).unwrap();
        assert!(close(y.data(), &[1.0, -1.0], 1e-12));

        let bias = Tensor::vector(vec![0.3, -0.7]).unwrap();
        let y = x.layer_norm(&zero, &bias, 1e-5).unwrap();
        assert_eq!(y.data(), bias.data());

        assert!(matches!(
            x.layer_norm(&one, &zero, 0.0),
            Err(NumericsError::Config(_))
        ));
    }

    #[test]
    fn attention_degenerate_cases() {
        let q = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.3, -2.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let v = Tensor::from_rows(&[vec![7.0, -1.0]]).unwrap();
        let out = attention(&q, &k, &v).unwrap();
        assert_eq!(out.to_rows(), vec![vec![7.0, -1.0], vec![7.0, -1.0]]);

        // all logits zero: uniform weights give the column mean of v
        let q = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 3.0], vec![6.0, 0.0]]).unwrap();
        let out = attention(&q, &k, &v).unwrap();
        assert!(close(out.data(), &[3.0, 1.0], 1e-15));
    }

    #[test]
    fn attention_hand_case() {
        // width 2 so the scale is 1/√2; choose q·k = √2·ln2 for the first key
        let a = std::f64::consts::SQRT_2 * 2f64.ln();
        let q = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![a, 0.0], vec![0.0, 1.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let out = attention(&q, &k, &v).unwrap();
        assert!(close(out.data(), &[2.0, 1.0], 1e-12));
        let bad = Tensor::zeros(&[2, 3]).unwrap();
        assert!(attention(&q, &bad, &bad).is_err());
    }
}
