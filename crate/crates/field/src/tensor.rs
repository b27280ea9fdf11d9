use crate::scalar::Scalar;

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![S::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data does not match shape {shape:?}");
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self::from_vec(shape, data.iter().map(|&x| S::of(x)).collect())
    }

    pub fn scalar(x: S) -> Self {
        Tensor { shape: vec![1], data: vec![x] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension of a matrix-shaped tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| T::of(x.f64())).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Fixed sparse linear map from `n_in` rows to `n_out` rows, applied row-wise:
/// `out[r] = Σ w · in[i]` over the entries of row `r` (CSR layout).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMap {
    pub n_in: usize,
    pub offsets: Vec<usize>,
    pub index: Vec<u32>,
    pub weight: Vec<f64>,
}

impl SparseMap {
    pub fn from_rows(n_in: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut index = Vec::new();
        let mut weight = Vec::new();
        offsets.push(0);
        for row in rows {
            for &(i, w) in row {
                assert!(i < n_in, "sparse map index {i} out of range {n_in}");
                index.push(i as u32);
                weight.push(w);
            }
            offsets.push(index.len());
        }
        SparseMap { n_in, offsets, index, weight }
    }

    /// Row selection: `out[r] = in[rows[r]]`.
    pub fn gather(n_in: usize, rows: &[usize]) -> Self {
        let rows: Vec<Vec<(usize, f64)>> = rows.iter().map(|&i| vec![(i, 1.0)]).collect();
        Self::from_rows(n_in, &rows)
    }

    pub fn n_out(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.offsets[r]..self.offsets[r + 1]).map(move |e| (self.index[e] as usize, self.weight[e]))
    }

    pub fn apply<S: Scalar>(&self, x: &[S], cols: usize) -> Vec<S> {
        assert_eq!(x.len(), self.n_in * cols);
        let mut out = vec![S::zero(); self.n_out() * cols];
        for r in 0..self.n_out() {
            let o = &mut out[r * cols..(r + 1) * cols];
            for (i, w) in self.entries(r) {
                let w = S::of(w);
                for (a, &b) in o.iter_mut().zip(&x[i * cols..(i + 1) * cols]) {
                    *a += w * b;
                }
            }
        }
        out
    }

    pub fn apply_transpose_add<S: Scalar>(&self, dout: &[S], cols: usize, dx: &mut [S]) {
        for r in 0..self.n_out() {
            let g = &dout[r * cols..(r + 1) * cols];
            for (i, w) in self.entries(r) {
                let w = S::of(w);
                for (a, &b) in dx[i * cols..(i + 1) * cols].iter_mut().zip(g) {
                    *a += w * b;
                }
            }
        }
    }
}

/// Offset-grouped gather/scatter rules of a sparse 3×3×3 convolution:
/// for each of the 27 kernel taps, the `(output row, input row)` pairs it links.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ConvRules {
    pub n_in: usize,
    pub n_out: usize,
    pub taps: Vec<Vec<(u32, u32)>>,
}
