//! Dense row-major `f64` tensors and the structural array operations used by
//! the rest of the crate: matrix products, circular 1-D convolution, pooling
//! and circular rotation.
//!
//! Storage is 0-based. The only 1-based entry point is [`circ_add`], which
//! mirrors the `i ⊕ r` index arithmetic on `[1, d_in]`; internally a rotation
//! by `r` maps position `i` to `(i + r) mod d_in`.

use crate::error::{arg, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return arg(format!("shape {shape:?} has a zero extent"));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return arg(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Rank-1 tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return arg("no rows");
        };
        let cols = first.len();
        if rows.iter().any(|r| r.len() != cols) {
            return arg("ragged rows");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &s)| {
                debug_assert!(i < s);
                acc * s + i
            })
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.data.len() / self.shape[0];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Sub-tensor at index `i` of the leading axis, keeping the leading axis with extent 1.
    pub fn slice_outer(&self, i: usize) -> Tensor {
        let inner = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Stack tensors of identical shape along the leading axis (which must be 1 or absent).
    pub fn concat_outer(parts: &[Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return arg("nothing to concatenate");
        };
        let inner_shape = &first.shape[1..];
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut rows = 0;
        for p in parts {
            if &p.shape[1..] != inner_shape {
                return arg("concat_outer: inner shapes differ");
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Tensor::new(shape, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return arg(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.len() != other.len() {
            return arg("dot: length mismatch");
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return arg("transpose needs a rank-2 tensor");
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// `[n, k] × [k, m] → [n, m]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[0] {
            return arg(format!(
                "matmul: incompatible shapes {:?} × {:?}",
                self.shape, rhs.shape
            ));
        }
        let (n, k, m) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let mut out = vec![0.0; n * m];
        matmul_into(&self.data, &rhs.data, &mut out, n, k, m);
        Tensor::new(vec![n, m], out)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out[n×m] += a[n×k] · b[k×m]`, i-k-j loop order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// The `i ⊕ r` index rule on 1-based indices `i ∈ [1, d_in]`.
pub fn circ_add(i: usize, r: usize, d_in: usize) -> Result<usize> {
    if d_in == 0 || i < 1 || i > d_in {
        return arg(format!("index {i} outside [1, {d_in}]"));
    }
    if r >= d_in {
        return arg(format!("shift {r} outside [0, {d_in})"));
    }
    let s = i + r;
    Ok(if s <= d_in { s } else { s - d_in })
}

/// `out(i) = x(i ⊕ r)` for a rank-1 tensor.
pub fn rotate(x: &Tensor, r: usize) -> Result<Tensor> {
    if x.rank() != 1 {
        return arg("rotate expects a rank-1 tensor");
    }
    rotate_channels(x, r)
}

/// Rotate the last (spatial) axis of a tensor of any rank by `r`.
pub fn rotate_channels(z: &Tensor, r: usize) -> Result<Tensor> {
    let d = *z.shape.last().expect("non-empty shape");
    if r >= d {
        return arg(format!("shift {r} outside [0, {d})"));
    }
    let mut out = Vec::with_capacity(z.len());
    for chunk in z.data.chunks(d) {
        out.extend_from_slice(&chunk[r..]);
        out.extend_from_slice(&chunk[..r]);
    }
    Tensor::new(z.shape.clone(), out)
}

fn check_conv_shapes(c_in: usize, d: usize, kernel: &Tensor) -> Result<(usize, usize)> {
    if kernel.rank() != 3 {
        return arg("conv kernel must be [w_cv, c_in, c_out]");
    }
    let (w_cv, k_in, c_out) = (kernel.shape[0], kernel.shape[1], kernel.shape[2]);
    if k_in != c_in {
        return arg(format!("conv: input has {c_in} channels, kernel expects {k_in}"));
    }
    if w_cv >= d {
        return arg(format!("conv: window {w_cv} must be smaller than d_in = {d}"));
    }
    Ok((w_cv, c_out))
}

/// Circular convolution of one example: `[c_in, d] ⊛ [w_cv, c_in, c_out] → [c_out, d]`,
/// `q(o, f) = Σ_{cv, i} K(cv, i, o) · z(i, f ⊕ cv)` (0-based).
pub fn conv1d_circular(z: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    if z.rank() != 2 {
        return arg("conv1d_circular expects z of shape [c_in, d_in]");
    }
    let batched = z.reshape(vec![1, z.shape[0], z.shape[1]])?;
    let out = conv1d_circular_batch(&batched, kernel)?;
    out.reshape(vec![out.shape[1], out.shape[2]])
}

/// Batched circular convolution `[n, c_in, d] → [n, c_out, d]`.
pub fn conv1d_circular_batch(z: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    if z.rank() != 3 {
        return arg("conv1d_circular_batch expects [n, c_in, d_in]");
    }
    let (n, c_in, d) = (z.shape[0], z.shape[1], z.shape[2]);
    let (w_cv, c_out) = check_conv_shapes(c_in, d, kernel)?;
    let mut out = vec![0.0; n * c_out * d];
    for b in 0..n {
        let zb = &z.data[b * c_in * d..(b + 1) * c_in * d];
        let ob = &mut out[b * c_out * d..(b + 1) * c_out * d];
        for cv in 0..w_cv {
            for i in 0..c_in {
                let zrow = &zb[i * d..(i + 1) * d];
                for o in 0..c_out {
                    let k = kernel.data[(cv * c_in + i) * c_out + o];
                    if k == 0.0 {
                        continue;
                    }
                    let orow = &mut ob[o * d..(o + 1) * d];
                    for (f, out) in orow.iter_mut().enumerate() {
                        let src = f + cv;
                        let src = if src >= d { src - d } else { src };
                        *out += k * zrow[src];
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c_out, d], out)
}

/// `[c, d] → [c]`, per-channel mean.
///
/// Each channel is summed in ascending value order, so the result depends only on the
/// multiset of entries and is bitwise invariant under any rotation of the spatial axis.
pub fn global_average_pool(z: &Tensor) -> Result<Tensor> {
    if z.rank() != 2 {
        return arg("global_average_pool expects [c, d_in]");
    }
    let d = z.shape[1];
    let data = z
        .data
        .chunks(d)
        .map(|c| {
            let mut sorted = c.to_vec();
            sorted.sort_by(f64::total_cmp);
            sorted.iter().sum::<f64>() / d as f64
        })
        .collect();
    Tensor::new(vec![z.shape[0]], data)
}

/// `[c, d] → [c, d / window]`, max over contiguous windows.
pub fn max_pool_1d(z: &Tensor, window: usize) -> Result<Tensor> {
    if z.rank() != 2 {
        return arg("max_pool_1d expects [c, d_in]");
    }
    let d = z.shape[1];
    if window == 0 || !d.is_multiple_of(window) {
        return Err(Error::Argument(format!(
            "window {window} does not divide d_in = {d}"
        )));
    }
    let data = z
        .data
        .chunks(window)
        .map(|w| w.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Tensor::new(vec![z.shape[0], d / window], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn circ_add_examples() {
        assert_eq!(circ_add(1, 0, 4).unwrap(), 1);
        assert_eq!(circ_add(3, 2, 4).unwrap(), 1);
        assert_eq!(circ_add(4, 3, 4).unwrap(), 3);
        assert!(circ_add(0, 0, 4).is_err());
        assert!(circ_add(5, 0, 4).is_err());
        assert!(circ_add(1, 4, 4).is_err());
    }

    #[test]
    fn rotate_examples() {
        let x = Tensor::vector(vec![1., 2., 3., 4.]);
        assert_eq!(rotate(&x, 1).unwrap().data(), &[2., 3., 4., 1.]);
        assert_eq!(rotate(&x, 3).unwrap().data(), &[4., 1., 2., 3.]);
        assert_eq!(rotate(&Tensor::vector(vec![5.]), 0).unwrap().data(), &[5.]);
        assert!(rotate(&x, 4).is_err());
    }

    #[test]
    fn rotate_matches_circ_add_rule() {
        let x = Tensor::vector(vec![10., 20., 30., 40., 50.]);
        for r in 0..5 {
            let rx = rotate(&x, r).unwrap();
            for i in 1..=5 {
                let src = circ_add(i, r, 5).unwrap();
                assert_eq!(rx.data()[i - 1], x.data()[src - 1]);
            }
        }
    }

    #[test]
    fn conv_examples() {
        let id = Tensor::new(vec![2, 1, 1], vec![1., 0.]).unwrap();
        let z = t2(&[&[1., 0., 0., 0.]]);
        assert_eq!(conv1d_circular(&z, &id).unwrap().data(), &[1., 0., 0., 0.]);

        let pair = Tensor::new(vec![2, 1, 1], vec![1., 1.]).unwrap();
        let z = t2(&[&[1., 2., 3., 4.]]);
        let q = conv1d_circular(&z, &pair).unwrap();
        assert_eq!(q.shape(), &[1, 4]);
        assert_eq!(q.data(), &[3., 5., 7., 5.]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let z = t2(&[&[1., 2., 3., 4.]]);
        let wide = Tensor::zeros(&[4, 1, 1]);
        assert!(conv1d_circular(&z, &wide).is_err());
        let wrong_cin = Tensor::zeros(&[2, 2, 1]);
        assert!(conv1d_circular(&z, &wrong_cin).is_err());
    }

    #[test]
    fn pooling_examples() {
        assert_eq!(global_average_pool(&t2(&[&[2., 4.]])).unwrap().data(), &[3.]);
        assert_eq!(global_average_pool(&t2(&[&[0., 0., 0., 0.]])).unwrap().data(), &[0.]);
        assert_eq!(
            global_average_pool(&t2(&[&[1., 2., 3., 4.], &[4., 4., 4., 4.]]))
                .unwrap()
                .data(),
            &[2.5, 4.]
        );
        assert_eq!(max_pool_1d(&t2(&[&[1., 3., 2., 0.]]), 2).unwrap().data(), &[3., 2.]);
        assert_eq!(max_pool_1d(&t2(&[&[5., 5., 5., 5.]]), 4).unwrap().data(), &[5.]);
        assert_eq!(max_pool_1d(&t2(&[&[-1., -2.]]), 2).unwrap().data(), &[-1.]);
        assert!(max_pool_1d(&t2(&[&[1., 2., 3.]]), 2).is_err());
    }

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    fn arb_channels(c: usize, d: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-3.0f64..3.0, c * d)
            .prop_map(move |v| Tensor::new(vec![c, d], v).unwrap())
    }

    proptest! {
        #[test]
        fn rotate_is_a_bijection(v in prop::collection::vec(-5.0f64..5.0, 1..9), r in 0usize..9) {
            let d = v.len();
            let r = r % d;
            let x = Tensor::vector(v);
            let back = rotate(&rotate(&x, r).unwrap(), (d - r) % d).unwrap();
            prop_assert_eq!(back, x);
        }

        #[test]
        fn conv_is_rotation_equivariant(z in arb_channels(2, 6), k in prop::collection::vec(-1.0f64..1.0, 3 * 2 * 3), r in 0usize..6) {
            let kernel = Tensor::new(vec![3, 2, 3], k).unwrap();
            let lhs = conv1d_circular(&rotate_channels(&z, r).unwrap(), &kernel).unwrap();
            let rhs = rotate_channels(&conv1d_circular(&z, &kernel).unwrap(), r).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
        }

        #[test]
        fn conv_is_linear(z1 in arb_channels(1, 5), z2 in arb_channels(1, 5), a in -2.0f64..2.0, b in -2.0f64..2.0,
                          k in prop::collection::vec(-1.0f64..1.0, 4)) {
            let kernel = Tensor::new(vec![2, 1, 2], k).unwrap();
            let mix = z1.scale(a).add(&z2.scale(b)).unwrap();
            let lhs = conv1d_circular(&mix, &kernel).unwrap();
            let rhs = conv1d_circular(&z1, &kernel).unwrap().scale(a)
                .add(&conv1d_circular(&z2, &kernel).unwrap().scale(b)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
        }

        #[test]
        fn pooled_value_is_rotation_invariant(z in arb_channels(3, 4), r in 0usize..4) {
            let a = global_average_pool(&z).unwrap();
            let b = global_average_pool(&rotate_channels(&z, r).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
