//! Elementwise, structural and dense operations recorded on a [`Graph`].

use super::graph::{Backward, Graph, NodeId};
use super::tensor::{Scalar, Tensor};
use crate::error::{ensure, Result};

struct LeakyRelu<T> {
    slope: T,
}

impl<T: Scalar> Backward<T> for LeakyRelu<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let slope = self.slope;
        vec![Some(inputs[0].zip_map(grad, |x, g| if x > T::zero() { g } else { g * slope }))]
    }
}

struct Tanh;

impl<T: Scalar> Backward<T> for Tanh {
    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(out.zip_map(grad, |y, g| g * (T::one() - y * y)))]
    }
}

struct Sigmoid;

impl<T: Scalar> Backward<T> for Sigmoid {
    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(out.zip_map(grad, |y, g| g * y * (T::one() - y)))]
    }
}

struct Reshape {
    shape: Vec<usize>,
}

impl<T: Scalar> Backward<T> for Reshape {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.clone().reshaped(&self.shape).expect("same element count"))]
    }
}

struct ConcatCols {
    left: usize,
    right: usize,
}

impl<T: Scalar> Backward<T> for ConcatCols {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let rows = grad.dim(0);
        let width = self.left + self.right;
        let mut left = Vec::with_capacity(rows * self.left);
        let mut right = Vec::with_capacity(rows * self.right);
        for r in grad.data().chunks(width) {
            left.extend_from_slice(&r[..self.left]);
            right.extend_from_slice(&r[self.left..]);
        }
        vec![
            needs[0].then(|| Tensor::from_vec(&[rows, self.left], left).expect("shape")),
            needs[1].then(|| Tensor::from_vec(&[rows, self.right], right).expect("shape")),
        ]
    }
}

struct SliceCols {
    start: usize,
    width: usize,
}

impl<T: Scalar> Backward<T> for SliceCols {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let full = inputs[0].dim(1);
        let mut out = Tensor::zeros(inputs[0].shape());
        for (dst, src) in out.data_mut().chunks_mut(full).zip(grad.data().chunks(self.width)) {
            dst[self.start..self.start + self.width].copy_from_slice(src);
        }
        vec![Some(out)]
    }
}

struct GatherRows {
    index: Vec<usize>,
}

impl<T: Scalar> Backward<T> for GatherRows {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut out = Tensor::zeros(inputs[0].shape());
        let width = out.row_len();
        for (k, &src) in self.index.iter().enumerate() {
            let g = grad.row(k);
            let dst = &mut out.data_mut()[src * width..(src + 1) * width];
            for (d, &v) in dst.iter_mut().zip(g) {
                *d = *d + v;
            }
        }
        vec![Some(out)]
    }
}

struct Linear;

impl<T: Scalar> Backward<T> for Linear {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (rows, fan_in) = (x.dim(0), x.dim(1));
        let fan_out = w.dim(0);
        let dx = needs[0].then(|| {
            let mut dx = Tensor::zeros(x.shape());
            // dx = grad (rows, out) @ w (out, in)
            T::gemm(
                rows, fan_out, fan_in, T::one(),
                grad.data(), fan_out as isize, 1,
                w.data(), fan_in as isize, 1,
                T::zero(), dx.data_mut(), fan_in as isize, 1,
            );
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = Tensor::zeros(w.shape());
            // dw = grad^T (out, rows) @ x (rows, in)
            T::gemm(
                fan_out, rows, fan_in, T::one(),
                grad.data(), 1, fan_out as isize,
                x.data(), fan_in as isize, 1,
                T::zero(), dw.data_mut(), fan_in as isize, 1,
            );
            dw
        });
        let db = needs[2].then(|| {
            let mut db = Tensor::zeros(&[fan_out]);
            for r in grad.data().chunks(fan_out) {
                for (d, &g) in db.data_mut().iter_mut().zip(r) {
                    *d = *d + g;
                }
            }
            db
        });
        vec![dx, dw, db]
    }
}

struct WeightedSum<T> {
    weights: Vec<T>,
}

impl<T: Scalar> Backward<T> for WeightedSum<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let g = grad.item();
        self.weights
            .iter()
            .zip(needs)
            .map(|(&w, &need)| need.then(|| Tensor::scalar(g * w)))
            .collect()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let slope = T::from_f64c(slope);
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        self.record(&[x], value, LeakyRelu { slope })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.tanh());
        self.record(&[x], value, Tanh)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.record(&[x], value, Sigmoid)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let original = self.shape(x).to_vec();
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.record(&[x], value, Reshape { shape: original }))
    }

    /// Flattens every axis after the first.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x);
        let rows = shape[0];
        let width: usize = shape[1..].iter().product();
        self.reshape(x, &[rows, width])
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        ensure!(
            sa.len() == 2 && sb.len() == 2 && sa[0] == sb[0],
            Input,
            "concat needs two (B, d) arrays with equal B, got {:?} and {:?}",
            sa,
            sb
        );
        let mut data = Vec::with_capacity(sa[0] * (sa[1] + sb[1]));
        for r in 0..sa[0] {
            data.extend_from_slice(self.value(a).row(r));
            data.extend_from_slice(self.value(b).row(r));
        }
        let value = Tensor::from_vec(&[sa[0], sa[1] + sb[1]], data)?;
        Ok(self.record(&[a, b], value, ConcatCols { left: sa[1], right: sb[1] }))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        ensure!(
            shape.len() == 2 && start + width <= shape[1],
            Input,
            "column slice {}..{} out of range for {:?}",
            start,
            start + width,
            shape
        );
        let data = self
            .value(x)
            .data()
            .chunks(shape[1])
            .flat_map(|r| r[start..start + width].iter().copied())
            .collect();
        let value = Tensor::from_vec(&[shape[0], width], data)?;
        Ok(self.record(&[x], value, SliceCols { start, width }))
    }

    /// Row `k` of the output is row `index[k]` of the input.
    pub fn gather_rows(&mut self, x: NodeId, index: &[usize]) -> Result<NodeId> {
        let rows = self.shape(x)[0];
        ensure!(
            index.iter().all(|&i| i < rows),
            Input,
            "row index out of range for {} rows",
            rows
        );
        let value = self.value(x).select_rows(index);
        Ok(self.record(&[x], value, GatherRows { index: index.to_vec() }))
    }

    /// `x (B, in) @ w^T + b` with `w` of shape `(out, in)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        ensure!(
            sx.len() == 2 && sw.len() == 2 && sx[1] == sw[1] && sb == [sw[0]],
            Input,
            "linear: input {:?} incompatible with weight {:?} / bias {:?}",
            sx,
            sw,
            sb
        );
        let (rows, fan_in, fan_out) = (sx[0], sx[1], sw[0]);
        let mut out = Tensor::zeros(&[rows, fan_out]);
        for r in out.data_mut().chunks_mut(fan_out) {
            r.copy_from_slice(self.value(b).data());
        }
        T::gemm(
            rows, fan_in, fan_out, T::one(),
            self.value(x).data(), fan_in as isize, 1,
            self.value(w).data(), 1, fan_in as isize,
            T::one(), out.data_mut(), fan_out as isize, 1,
        );
        Ok(self.record(&[x, w, b], out, Linear))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let weights: Vec<T> = terms.iter().map(|&(_, w)| T::from_f64c(w)).collect();
        let total = terms
            .iter()
            .zip(&weights)
            .fold(T::zero(), |acc, (&(n, _), &w)| acc + w * self.value(n).item());
        let inputs: Vec<NodeId> = terms.iter().map(|&(n, _)| n).collect();
        self.record(&inputs, Tensor::scalar(total), WeightedSum { weights })
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).clone();
        self.constant(value)
    }
}
