use ndarray::{ArrayD, Axis, IxDyn, Slice};

use crate::tensor::Tensor;

/// Right-aligned numpy-style broadcast of two shapes.
pub(crate) fn bcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum `grad` down to `shape` (inverse of broadcasting).
pub(crate) fn reduce_to(grad: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut g = grad;
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (i, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[i] != 1 {
            let summed = g.sum_axis(Axis(i));
            g = summed.insert_axis(Axis(i));
        }
    }
    assert_eq!(g.shape(), shape);
    g
}

fn broadcast_to(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    if a.shape() == shape {
        a.clone()
    } else {
        a.broadcast(IxDyn(shape)).expect("broadcast failed").to_owned()
    }
}

macro_rules! binary_op {
    ($name:ident, $fwd:expr, $bwd:expr) => {
        pub fn $name(&self, other: &Tensor) -> Tensor {
            let shape = bcast_shape(self.dims(), other.dims());
            let a = broadcast_to(self.data(), &shape);
            let b = broadcast_to(other.data(), &shape);
            let fwd: fn(&ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64> = $fwd;
            let out = fwd(&a, &b);
            Tensor::from_op(
                out,
                vec![self.clone(), other.clone()],
                Box::new(move |parents, _out, grad| {
                    let a = broadcast_to(parents[0].data(), grad.shape());
                    let b = broadcast_to(parents[1].data(), grad.shape());
                    let bwd: fn(
                        &ArrayD<f64>,
                        &ArrayD<f64>,
                        &ArrayD<f64>,
                    ) -> (ArrayD<f64>, ArrayD<f64>) = $bwd;
                    let (ga, gb) = bwd(&a, &b, grad);
                    vec![
                        Some(reduce_to(ga, parents[0].dims())),
                        Some(reduce_to(gb, parents[1].dims())),
                    ]
                }),
            )
        }
    };
}

macro_rules! unary_op {
    ($name:ident, $fwd:expr, $bwd:expr) => {
        pub fn $name(&self) -> Tensor {
            let fwd: fn(f64) -> f64 = $fwd;
            let out = self.data().mapv(fwd);
            Tensor::from_op(
                out,
                vec![self.clone()],
                Box::new(move |parents, out, grad| {
                    let x = parents[0].data();
                    let bwd: fn(f64, f64) -> f64 = $bwd; // (x, y) -> dy/dx
                    let mut g = grad.clone();
                    ndarray::Zip::from(&mut g).and(x).and(out).for_each(|g, &x, &y| {
                        *g *= bwd(x, y);
                    });
                    vec![Some(g)]
                }),
            )
        }
    };
}

impl Tensor {
    binary_op!(add, |a, b| a + b, |_a, _b, g| (g.clone(), g.clone()));
    binary_op!(sub, |a, b| a - b, |_a, _b, g| (g.clone(), -g));
    binary_op!(mul, |a, b| a * b, |a, b, g| (g * b, g * a));
    binary_op!(div, |a, b| a / b, |a, b, g| (g / b, -&(g * a) / &(b * b)));

    unary_op!(neg, |x| -x, |_x, _y| -1.0);
    unary_op!(exp, |x| x.exp(), |_x, y| y);
    unary_op!(ln, |x| x.ln(), |x, _y| 1.0 / x);
    unary_op!(sin, |x| x.sin(), |x, _y| x.cos());
    unary_op!(sqrt, |x| x.sqrt(), |_x, y| 0.5 / y);
    unary_op!(sqr, |x| x * x, |x, _y| 2.0 * x);
    unary_op!(abs, |x| x.abs(), |x, _y| if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    });
    unary_op!(tanh, |x| x.tanh(), |_x, y| 1.0 - y * y);
    unary_op!(recip, |x| 1.0 / x, |_x, y| -y * y);
    unary_op!(relu, |x| x.max(0.0), |x, _y| if x > 0.0 { 1.0 } else { 0.0 });

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let out = self.data().mapv(|x| if x >= 0.0 { x } else { slope * x });
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |parents, _out, grad| {
                let x = parents[0].data();
                let mut g = grad.clone();
                ndarray::Zip::from(&mut g).and(x).for_each(|g, &x| {
                    if x < 0.0 {
                        *g *= slope;
                    }
                });
                vec![Some(g)]
            }),
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes inside the interval (inclusive).
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let out = self.data().mapv(|x| x.clamp(lo, hi));
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |parents, _out, grad| {
                let x = parents[0].data();
                let mut g = grad.clone();
                ndarray::Zip::from(&mut g).and(x).for_each(|g, &x| {
                    if x < lo || x > hi {
                        *g = 0.0;
                    }
                });
                vec![Some(g)]
            }),
        )
    }

    pub fn add_scalar(&self, v: f64) -> Tensor {
        let out = self.data().mapv(|x| x + v);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(|_parents, _out, grad| vec![Some(grad.clone())]),
        )
    }

    pub fn mul_scalar(&self, v: f64) -> Tensor {
        let out = self.data().mapv(|x| x * v);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |_parents, _out, grad| vec![Some(grad.mapv(|g| g * v))]),
        )
    }

    pub fn log10(&self) -> Tensor {
        self.ln().mul_scalar(std::f64::consts::LOG10_E)
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().sum();
        let shape: Vec<usize> = self.dims().to_vec();
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[]), s),
            vec![self.clone()],
            Box::new(move |_parents, _out, grad| {
                let g = grad.iter().next().copied().unwrap_or(0.0);
                vec![Some(ArrayD::from_elem(IxDyn(&shape), g))]
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.elem_count().max(1) as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Sum over `axes` (ascending, distinct), keeping them as size-1 dims.
    pub fn sum_axes_keepdim(&self, axes: &[usize]) -> Tensor {
        let mut out = self.data().clone();
        for &ax in axes {
            let summed = out.sum_axis(Axis(ax));
            out = summed.insert_axis(Axis(ax));
        }
        let in_shape: Vec<usize> = self.dims().to_vec();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |_parents, _out, grad| vec![Some(broadcast_to(grad, &in_shape))]),
        )
    }

    pub fn mean_axes_keepdim(&self, axes: &[usize]) -> Tensor {
        let n: usize = axes.iter().map(|&a| self.dims()[a]).product();
        self.sum_axes_keepdim(axes).mul_scalar(1.0 / n.max(1) as f64)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(self.elem_count(), n, "reshape {:?} -> {shape:?}", self.dims());
        let in_shape: Vec<usize> = self.dims().to_vec();
        let data = self
            .data()
            .as_standard_layout()
            .to_shape(IxDyn(shape))
            .expect("reshape")
            .to_owned();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |_parents, _out, grad| {
                vec![Some(
                    grad.as_standard_layout().to_shape(IxDyn(&in_shape)).unwrap().to_owned(),
                )]
            }),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let axes_v: Vec<usize> = axes.to_vec();
        let data = self
            .data()
            .clone()
            .permuted_axes(IxDyn(&axes_v))
            .as_standard_layout()
            .to_owned();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |_parents, _out, grad| {
                let mut inv = vec![0usize; axes_v.len()];
                for (i, &a) in axes_v.iter().enumerate() {
                    inv[a] = i;
                }
                vec![Some(
                    grad.clone()
                        .permuted_axes(IxDyn(&inv))
                        .as_standard_layout()
                        .to_owned(),
                )]
            }),
        )
    }

    pub fn transpose(&self, a: usize, b: usize) -> Tensor {
        let mut axes: Vec<usize> = (0..self.dims().len()).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.dims()[axis], "narrow out of range");
        let data = self
            .data()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let in_shape: Vec<usize> = self.dims().to_vec();
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |_parents, _out, grad| {
                let mut g = ArrayD::zeros(IxDyn(&in_shape));
                g.slice_axis_mut(Axis(axis), Slice::from(start..start + grad.shape()[axis]))
                    .assign(grad);
                vec![Some(g)]
            }),
        )
    }

    pub fn cat(tensors: &[Tensor], axis: usize) -> Tensor {
        assert!(!tensors.is_empty());
        let views: Vec<_> = tensors.iter().map(|t| t.data().view()).collect();
        let data = ndarray::concatenate(Axis(axis), &views).expect("cat shape mismatch");
        let sizes: Vec<usize> = tensors.iter().map(|t| t.dims()[axis]).collect();
        Tensor::from_op(
            data,
            tensors.to_vec(),
            Box::new(move |_parents, _out, grad| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut off = 0;
                for &s in &sizes {
                    out.push(Some(
                        grad.slice_axis(Axis(axis), Slice::from(off..off + s)).to_owned(),
                    ));
                    off += s;
                }
                out
            }),
        )
    }

    pub fn pad_zeros(&self, axis: usize, before: usize, after: usize) -> Tensor {
        let mut shape: Vec<usize> = self.dims().to_vec();
        let orig = shape[axis];
        shape[axis] += before + after;
        let mut data = ArrayD::zeros(IxDyn(&shape));
        data.slice_axis_mut(Axis(axis), Slice::from(before..before + orig))
            .assign(self.data());
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |_parents, _out, grad| {
                vec![Some(
                    grad.slice_axis(Axis(axis), Slice::from(before..before + orig)).to_owned(),
                )]
            }),
        )
    }

    /// Reflection padding along the last axis (no edge duplication, like
    /// `x[n] = x[-n]` mirroring): requires pad < len.
    pub fn pad_reflect_last(&self, before: usize, after: usize) -> Tensor {
        let ndim = self.dims().len();
        let axis = ndim - 1;
        let len = self.dims()[axis];
        assert!(before < len && after < len, "reflect pad must be < length");
        let mut shape: Vec<usize> = self.dims().to_vec();
        shape[axis] = len + before + after;
        let mut data = ArrayD::zeros(IxDyn(&shape));
        data.slice_axis_mut(Axis(axis), Slice::from(before..before + len))
            .assign(self.data());
        for j in 0..before {
            let src = self.data().slice_axis(Axis(axis), Slice::from(j + 1..j + 2)).to_owned();
            data.slice_axis_mut(Axis(axis), Slice::from(before - 1 - j..before - j))
                .assign(&src);
        }
        for j in 0..after {
            let src = self
                .data()
                .slice_axis(Axis(axis), Slice::from(len - 2 - j..len - 1 - j))
                .to_owned();
            data.slice_axis_mut(
                Axis(axis),
                Slice::from(before + len + j..before + len + j + 1),
            )
            .assign(&src);
        }
        Tensor::from_op(
            data,
            vec![self.clone()],
            Box::new(move |_parents, _out, grad| {
                let mut g = grad
                    .slice_axis(Axis(axis), Slice::from(before..before + len))
                    .to_owned();
                for j in 0..before {
                    let extra = grad.slice_axis(Axis(axis), Slice::from(before - 1 - j..before - j));
                    let mut dst = g.slice_axis_mut(Axis(axis), Slice::from(j + 1..j + 2));
                    dst += &extra;
                }
                for j in 0..after {
                    let extra = grad.slice_axis(
                        Axis(axis),
                        Slice::from(before + len + j..before + len + j + 1),
                    );
                    let mut dst = g.slice_axis_mut(Axis(axis), Slice::from(len - 2 - j..len - 1 - j));
                    dst += &extra;
                }
                vec![Some(g)]
            }),
        )
    }

    /// 2-D matrix product `(M,K) x (K,N) -> (M,N)`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.dims().len(), 2);
        assert_eq!(other.dims().len(), 2);
        assert_eq!(self.dims()[1], other.dims()[0], "matmul inner dim");
        let a = self.data().view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = other.data().view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let out = a.dot(&b).into_dyn();
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(|parents, _out, grad| {
                let a = parents[0].data().view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let b = parents[1].data().view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let g = grad.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                vec![
                    Some(g.dot(&b.t()).into_dyn()),
                    Some(a.t().dot(&g).into_dyn()),
                ]
            }),
        )
    }

    /// Batched matrix product `(B,M,K) x (K,N) -> (B,M,N)`.
    pub fn bmm_shared(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.dims().len(), 3);
        assert_eq!(other.dims().len(), 2);
        assert_eq!(self.dims()[2], other.dims()[0], "bmm inner dim");
        let (bsz, m, _k) = (self.dims()[0], self.dims()[1], self.dims()[2]);
        let n = other.dims()[1];
        let a = self.data().view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let b = other.data().view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut out = ndarray::Array3::<f64>::zeros((bsz, m, n));
        for i in 0..bsz {
            out.index_axis_mut(Axis(0), i).assign(&a.index_axis(Axis(0), i).dot(&b));
        }
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), other.clone()],
            Box::new(|parents, _out, grad| {
                let a = parents[0].data().view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let b = parents[1].data().view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let g = grad.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let bsz = a.shape()[0];
                let mut ga = ndarray::Array3::<f64>::zeros((a.shape()[0], a.shape()[1], a.shape()[2]));
                let mut gb = ndarray::Array2::<f64>::zeros((b.shape()[0], b.shape()[1]));
                for i in 0..bsz {
                    let gi = g.index_axis(Axis(0), i);
                    ga.index_axis_mut(Axis(0), i).assign(&gi.dot(&b.t()));
                    gb += &a.index_axis(Axis(0), i).t().dot(&gi);
                }
                vec![Some(ga.into_dyn()), Some(gb.into_dyn())]
            }),
        )
    }
}
