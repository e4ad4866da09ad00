use ndarray::{Array2, Array3, Array4, ArrayD, ArrayView2, Axis};
use rayon::prelude::*;

use crate::tensor::Tensor;

/// Valid output-position range `[lo, hi)` such that `t*stride + offset` lies
/// in `[0, len)` for all `t` in the range, clamped to `[0, t_max)`.
fn trange(offset: isize, stride: usize, len: usize, t_max: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset < 0 { (-offset + s - 1) / s } else { 0 };
    let hi = (len as isize - offset + s - 1) / s;
    let lo = lo.clamp(0, t_max as isize) as usize;
    let hi = hi.clamp(0, t_max as isize) as usize;
    (lo, hi.max(lo))
}

pub(crate) fn conv1d_out_len(l: usize, k: usize, stride: usize, pad: usize, dil: usize) -> usize {
    let eff = dil * (k - 1) + 1;
    assert!(l + 2 * pad >= eff, "conv1d input too short: len {l}, kernel {k}, dil {dil}, pad {pad}");
    (l + 2 * pad - eff) / stride + 1
}

/// (C, L) -> (C*K, T) patch matrix. Zero outside the padded input.
fn im2col_1d(x: &ArrayView2<f64>, k: usize, stride: usize, pad: usize, dil: usize) -> Array2<f64> {
    let (c_in, l) = (x.shape()[0], x.shape()[1]);
    let t_len = conv1d_out_len(l, k, stride, pad, dil);
    let mut col = Array2::<f64>::zeros((c_in * k, t_len));
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().unwrap();
    let cs = col.as_slice_mut().unwrap();
    for c in 0..c_in {
        for j in 0..k {
            let offset = (j * dil) as isize - pad as isize;
            let (lo, hi) = trange(offset, stride, l, t_len);
            let row = (c * k + j) * t_len;
            for t in lo..hi {
                cs[row + t] = xs[c * l + (t as isize * stride as isize + offset) as usize];
            }
        }
    }
    col
}

/// Adjoint of [`im2col_1d`]: scatter a (C*K, T) patch gradient back to (C, L).
fn col2im_1d(
    col: &ArrayView2<f64>,
    c_in: usize,
    l: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
) -> Array2<f64> {
    let t_len = col.shape()[1];
    let mut x = Array2::<f64>::zeros((c_in, l));
    let col_std = col.as_standard_layout();
    let cs = col_std.as_slice().unwrap();
    let xs = x.as_slice_mut().unwrap();
    for c in 0..c_in {
        for j in 0..k {
            let offset = (j * dil) as isize - pad as isize;
            let (lo, hi) = trange(offset, stride, l, t_len);
            let row = (c * k + j) * t_len;
            for t in lo..hi {
                xs[c * l + (t as isize * stride as isize + offset) as usize] += cs[row + t];
            }
        }
    }
    x
}

fn to3(t: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    t.view().into_dimensionality::<ndarray::Ix3>().unwrap()
}

impl Tensor {
    /// `(B, C_in, L) * (C_out, C_in, K) -> (B, C_out, L_out)` cross-correlation.
    pub fn conv1d(&self, weight: &Tensor, stride: usize, padding: usize, dilation: usize) -> Tensor {
        assert_eq!(self.dims().len(), 3, "conv1d input must be (B, C, L)");
        assert_eq!(weight.dims().len(), 3, "conv1d weight must be (O, C, K)");
        assert_eq!(self.dims()[1], weight.dims()[1], "conv1d channel mismatch");
        let (b, c_in, l) = (self.dims()[0], self.dims()[1], self.dims()[2]);
        let (c_out, k) = (weight.dims()[0], weight.dims()[2]);
        let t_len = conv1d_out_len(l, k, stride, padding, dilation);
        let x = to3(self.data());
        let w_mat = weight
            .data()
            .view()
            .into_shape_with_order((c_out, c_in * k))
            .unwrap();
        let per_item: Vec<Array2<f64>> = (0..b)
            .into_par_iter()
            .map(|i| {
                let col = im2col_1d(&x.index_axis(Axis(0), i), k, stride, padding, dilation);
                w_mat.dot(&col)
            })
            .collect();
        let mut out = Array3::<f64>::zeros((b, c_out, t_len));
        for (i, y) in per_item.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&y);
        }
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), weight.clone()],
            Box::new(move |parents, _out, grad| {
                let x = to3(parents[0].data());
                let w_mat = parents[1]
                    .data()
                    .view()
                    .into_shape_with_order((c_out, c_in * k))
                    .unwrap();
                let g = to3(grad);
                let parts: Vec<(Array2<f64>, Array2<f64>)> = (0..b)
                    .into_par_iter()
                    .map(|i| {
                        let gi = g.index_axis(Axis(0), i);
                        let gi = gi.as_standard_layout();
                        let col = im2col_1d(&x.index_axis(Axis(0), i), k, stride, padding, dilation);
                        let dw = gi.dot(&col.t());
                        let dcol = w_mat.t().dot(&gi);
                        let dx = col2im_1d(&dcol.view(), c_in, l, k, stride, padding, dilation);
                        (dx, dw)
                    })
                    .collect();
                let mut dx = Array3::<f64>::zeros((b, c_in, l));
                let mut dw = Array2::<f64>::zeros((c_out, c_in * k));
                for (i, (dxi, dwi)) in parts.into_iter().enumerate() {
                    dx.index_axis_mut(Axis(0), i).assign(&dxi);
                    dw += &dwi;
                }
                vec![
                    Some(dx.into_dyn()),
                    Some(dw.into_shape_with_order((c_out, c_in, k)).unwrap().into_dyn()),
                ]
            }),
        )
    }

    /// `(B, C_in, L) * (C_in, C_out, K) -> (B, C_out, L_out)` transposed
    /// convolution, `L_out = (L-1)*stride - 2*padding + K + output_padding`.
    pub fn conv_transpose1d(
        &self,
        weight: &Tensor,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Tensor {
        assert_eq!(self.dims().len(), 3);
        assert_eq!(weight.dims().len(), 3);
        assert_eq!(self.dims()[1], weight.dims()[0], "conv_transpose1d channel mismatch");
        assert!(output_padding < stride, "output_padding must be < stride");
        let (b, c_in, l) = (self.dims()[0], self.dims()[1], self.dims()[2]);
        let (c_out, k) = (weight.dims()[1], weight.dims()[2]);
        let l_out = (l - 1) * stride + k + output_padding;
        assert!(l_out > 2 * padding, "conv_transpose1d padding too large");
        let l_out = l_out - 2 * padding;
        // w_fold[(o*K + j), c] = w[c, o, j]
        let fold_weight = move |w: &ArrayD<f64>| -> Array2<f64> {
            let w = to3(w);
            let mut f = Array2::<f64>::zeros((c_out * k, c_in));
            for c in 0..c_in {
                for o in 0..c_out {
                    for j in 0..k {
                        f[(o * k + j, c)] = w[(c, o, j)];
                    }
                }
            }
            f
        };
        let w_fold = fold_weight(weight.data());
        let x = to3(self.data());
        let per_item: Vec<Array2<f64>> = (0..b)
            .into_par_iter()
            .map(|i| {
                let col = w_fold.dot(&x.index_axis(Axis(0), i));
                col2im_1d(&col.view(), c_out, l_out, k, stride, padding, 1)
            })
            .collect();
        let mut out = Array3::<f64>::zeros((b, c_out, l_out));
        for (i, y) in per_item.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&y);
        }
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), weight.clone()],
            Box::new(move |parents, _out, grad| {
                let x = to3(parents[0].data());
                let w_fold = fold_weight(parents[1].data());
                let g = to3(grad);
                let parts: Vec<(Array2<f64>, Array2<f64>)> = (0..b)
                    .into_par_iter()
                    .map(|i| {
                        // colg[(o*K + j), t] = g[o, t*stride + j - padding]
                        let colg = im2col_1d(&g.index_axis(Axis(0), i), k, stride, padding, 1);
                        let dx = w_fold.t().dot(&colg);
                        let xi = x.index_axis(Axis(0), i);
                        let dwf = xi.dot(&colg.t()); // (C_in, O*K)
                        (dx, dwf)
                    })
                    .collect();
                let mut dx = Array3::<f64>::zeros((b, c_in, l));
                let mut dwf = Array2::<f64>::zeros((c_in, c_out * k));
                for (i, (dxi, dwi)) in parts.into_iter().enumerate() {
                    dx.index_axis_mut(Axis(0), i).assign(&dxi);
                    dwf += &dwi;
                }
                let dw = dwf.into_shape_with_order((c_in, c_out, k)).unwrap();
                vec![Some(dx.into_dyn()), Some(dw.into_dyn())]
            }),
        )
    }

    /// `(B, C_in, H, W) * (O, C_in, Kh, Kw) -> (B, O, Ho, Wo)` with
    /// per-axis stride and zero padding (dilation 1).
    pub fn conv2d(
        &self,
        weight: &Tensor,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Tensor {
        assert_eq!(self.dims().len(), 4);
        assert_eq!(weight.dims().len(), 4);
        assert_eq!(self.dims()[1], weight.dims()[1], "conv2d channel mismatch");
        let (b, c_in, h, w) = (self.dims()[0], self.dims()[1], self.dims()[2], self.dims()[3]);
        let (c_out, kh, kw) = (weight.dims()[0], weight.dims()[2], weight.dims()[3]);
        let (sh, sw) = stride;
        let (ph, pw) = padding;
        let ho = conv1d_out_len(h, kh, sh, ph, 1);
        let wo = conv1d_out_len(w, kw, sw, pw, 1);
        let im2col = move |x: &ArrayView2<f64>| -> Array2<f64> {
            // x viewed as (C_in, H*W) rows; produce (C_in*Kh*Kw, Ho*Wo)
            let x_std = x.as_standard_layout();
            let xs = x_std.as_slice().unwrap();
            let mut col = Array2::<f64>::zeros((c_in * kh * kw, ho * wo));
            let cs = col.as_slice_mut().unwrap();
            for c in 0..c_in {
                for jh in 0..kh {
                    let off_h = jh as isize - ph as isize;
                    let (hlo, hhi) = trange(off_h, sh, h, ho);
                    for jw in 0..kw {
                        let off_w = jw as isize - pw as isize;
                        let (wlo, whi) = trange(off_w, sw, w, wo);
                        let row = ((c * kh + jh) * kw + jw) * (ho * wo);
                        for th in hlo..hhi {
                            let src_h = (th as isize * sh as isize + off_h) as usize;
                            for tw in wlo..whi {
                                let src_w = (tw as isize * sw as isize + off_w) as usize;
                                cs[row + th * wo + tw] = xs[(c * h + src_h) * w + src_w];
                            }
                        }
                    }
                }
            }
            col
        };
        let col2im = move |col: &ArrayView2<f64>| -> Array2<f64> {
            let col_std = col.as_standard_layout();
            let cs = col_std.as_slice().unwrap();
            let mut x = Array2::<f64>::zeros((c_in, h * w));
            let xs = x.as_slice_mut().unwrap();
            for c in 0..c_in {
                for jh in 0..kh {
                    let off_h = jh as isize - ph as isize;
                    let (hlo, hhi) = trange(off_h, sh, h, ho);
                    for jw in 0..kw {
                        let off_w = jw as isize - pw as isize;
                        let (wlo, whi) = trange(off_w, sw, w, wo);
                        let row = ((c * kh + jh) * kw + jw) * (ho * wo);
                        for th in hlo..hhi {
                            let src_h = (th as isize * sh as isize + off_h) as usize;
                            for tw in wlo..whi {
                                let src_w = (tw as isize * sw as isize + off_w) as usize;
                                xs[(c * h + src_h) * w + src_w] += cs[row + th * wo + tw];
                            }
                        }
                    }
                }
            }
            x
        };
        let view_item = |d: &ArrayD<f64>, i: usize, rows: usize, cols: usize| -> Array2<f64> {
            d.index_axis(Axis(0), i)
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order((rows, cols))
                .unwrap()
        };
        let w_mat = weight
            .data()
            .view()
            .into_shape_with_order((c_out, c_in * kh * kw))
            .unwrap()
            .to_owned();
        let per_item: Vec<Array2<f64>> = (0..b)
            .into_par_iter()
            .map(|i| {
                let xi = view_item(self.data(), i, c_in, h * w);
                let col = im2col(&xi.view());
                w_mat.dot(&col)
            })
            .collect();
        let mut out = Array4::<f64>::zeros((b, c_out, ho, wo));
        for (i, y) in per_item.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), i)
                .assign(&y.into_shape_with_order((c_out, ho, wo)).unwrap());
        }
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), weight.clone()],
            Box::new(move |parents, _out, grad| {
                let w_mat = parents[1]
                    .data()
                    .view()
                    .into_shape_with_order((c_out, c_in * kh * kw))
                    .unwrap()
                    .to_owned();
                let parts: Vec<(Array2<f64>, Array2<f64>)> = (0..b)
                    .into_par_iter()
                    .map(|i| {
                        let xi = view_item(parents[0].data(), i, c_in, h * w);
                        let gi = view_item(grad, i, c_out, ho * wo);
                        let col = im2col(&xi.view());
                        let dw = gi.dot(&col.t());
                        let dcol = w_mat.t().dot(&gi);
                        let dx = col2im(&dcol.view());
                        (dx, dw)
                    })
                    .collect();
                let mut dx = ArrayD::<f64>::zeros(ndarray::IxDyn(&[b, c_in, h, w]));
                let mut dw = Array2::<f64>::zeros((c_out, c_in * kh * kw));
                for (i, (dxi, dwi)) in parts.into_iter().enumerate() {
                    dx.index_axis_mut(Axis(0), i)
                        .assign(&dxi.into_shape_with_order((c_in, h, w)).unwrap());
                    dw += &dwi;
                }
                vec![
                    Some(dx),
                    Some(
                        dw.into_shape_with_order((c_out, c_in, kh, kw)).unwrap().into_dyn(),
                    ),
                ]
            }),
        )
    }

    /// Same FIR filter applied to every channel of `(B, C, L)`; constant taps,
    /// output length `L + pad_left + pad_right - K + 1`.
    pub fn depthwise_fir(&self, taps: &[f64], pad_left: usize, pad_right: usize) -> Tensor {
        assert_eq!(self.dims().len(), 3);
        let (b, c, l) = (self.dims()[0], self.dims()[1], self.dims()[2]);
        let k = taps.len();
        assert!(l + pad_left + pad_right >= k, "fir input too short");
        let l_out = l + pad_left + pad_right - k + 1;
        let taps: Vec<f64> = taps.to_vec();
        let run = move |xs: &[f64], taps: &[f64]| -> Vec<f64> {
            // y[t] = sum_j taps[j] * x[t + j - pad_left]
            let mut y = vec![0.0; l_out];
            for (j, &tap) in taps.iter().enumerate() {
                let offset = j as isize - pad_left as isize;
                let (lo, hi) = trange(offset, 1, l, l_out);
                for (t, yt) in y.iter_mut().enumerate().take(hi).skip(lo) {
                    *yt += tap * xs[(t as isize + offset) as usize];
                }
            }
            y
        };
        let x2 = self
            .data()
            .view()
            .into_shape_with_order((b * c, l))
            .unwrap();
        let rows: Vec<Vec<f64>> = (0..b * c)
            .into_par_iter()
            .map(|r| run(x2.index_axis(Axis(0), r).as_slice().unwrap(), &taps))
            .collect();
        let mut out = Array2::<f64>::zeros((b * c, l_out));
        for (r, y) in rows.into_iter().enumerate() {
            out.row_mut(r).assign(&ndarray::Array1::from(y));
        }
        let taps_b = taps.clone();
        Tensor::from_op(
            out.into_shape_with_order((b, c, l_out)).unwrap().into_dyn(),
            vec![self.clone()],
            Box::new(move |_parents, _out, grad| {
                let g2 = grad.view().into_shape_with_order((b * c, l_out)).unwrap();
                let rows: Vec<Vec<f64>> = (0..b * c)
                    .into_par_iter()
                    .map(|r| {
                        let gs = g2.index_axis(Axis(0), r);
                        let gs = gs.as_slice().unwrap();
                        let mut dx = vec![0.0; l];
                        for (j, &tap) in taps_b.iter().enumerate() {
                            let offset = j as isize - pad_left as isize;
                            let (lo, hi) = trange(offset, 1, l, l_out);
                            for (t, &gt) in gs.iter().enumerate().take(hi).skip(lo) {
                                dx[(t as isize + offset) as usize] += tap * gt;
                            }
                        }
                        dx
                    })
                    .collect();
                let mut dx = Array2::<f64>::zeros((b * c, l));
                for (r, d) in rows.into_iter().enumerate() {
                    dx.row_mut(r).assign(&ndarray::Array1::from(d));
                }
                vec![Some(dx.into_shape_with_order((b, c, l)).unwrap().into_dyn())]
            }),
        )
    }

    /// Insert `factor - 1` zeros after every sample along the last axis.
    pub fn zero_stuff(&self, factor: usize) -> Tensor {
        assert!(factor >= 1);
        let nd = self.dims().len();
        let l = self.dims()[nd - 1];
        let rows: usize = self.dims()[..nd - 1].iter().product();
        let x2 = self.data().view().into_shape_with_order((rows, l)).unwrap();
        let mut out = Array2::<f64>::zeros((rows, l * factor));
        for r in 0..rows {
            for t in 0..l {
                out[(r, t * factor)] = x2[(r, t)];
            }
        }
        let mut out_shape: Vec<usize> = self.dims().to_vec();
        out_shape[nd - 1] = l * factor;
        Tensor::from_op(
            out.into_shape_with_order(out_shape.as_slice()).unwrap().into_dyn(),
            vec![self.clone()],
            Box::new(move |parents, _out, grad| {
                let g2 = grad
                    .view()
                    .into_shape_with_order((rows, l * factor))
                    .unwrap();
                let mut dx = Array2::<f64>::zeros((rows, l));
                for r in 0..rows {
                    for t in 0..l {
                        dx[(r, t)] = g2[(r, t * factor)];
                    }
                }
                vec![Some(
                    dx.into_shape_with_order(parents[0].dims()).unwrap().into_dyn(),
                )]
            }),
        )
    }

    /// Keep every `factor`-th sample along the last axis (offset 0).
    pub fn decimate(&self, factor: usize) -> Tensor {
        assert!(factor >= 1);
        let nd = self.dims().len();
        let l = self.dims()[nd - 1];
        let l_out = l.div_ceil(factor);
        let rows: usize = self.dims()[..nd - 1].iter().product();
        let x2 = self.data().view().into_shape_with_order((rows, l)).unwrap();
        let mut out = Array2::<f64>::zeros((rows, l_out));
        for r in 0..rows {
            for t in 0..l_out {
                out[(r, t)] = x2[(r, t * factor)];
            }
        }
        let mut out_shape: Vec<usize> = self.dims().to_vec();
        out_shape[nd - 1] = l_out;
        Tensor::from_op(
            out.into_shape_with_order(out_shape.as_slice()).unwrap().into_dyn(),
            vec![self.clone()],
            Box::new(move |parents, _out, grad| {
                let g2 = grad.view().into_shape_with_order((rows, l_out)).unwrap();
                let mut dx = Array2::<f64>::zeros((rows, l));
                for r in 0..rows {
                    for t in 0..l_out {
                        dx[(r, t * factor)] = g2[(r, t)];
                    }
                }
                vec![Some(
                    dx.into_shape_with_order(parents[0].dims()).unwrap().into_dyn(),
                )]
            }),
        )
    }

    /// Slide a window over `(B, L)` waveforms: output `(B, F, win)` with
    /// `F = 1 + (L - win) / hop`. Requires `L >= win`.
    pub fn unfold_frames(&self, win: usize, hop: usize) -> Tensor {
        assert_eq!(self.dims().len(), 2, "unfold_frames expects (B, L)");
        let (b, l) = (self.dims()[0], self.dims()[1]);
        assert!(l >= win, "unfold_frames: input {l} shorter than window {win}");
        let f = 1 + (l - win) / hop;
        let x = self.data().view().into_shape_with_order((b, l)).unwrap();
        let mut out = Array3::<f64>::zeros((b, f, win));
        for i in 0..b {
            let row = x.index_axis(Axis(0), i);
            let row = row.as_slice().unwrap();
            for fr in 0..f {
                out.slice_mut(ndarray::s![i, fr, ..])
                    .assign(&ndarray::ArrayView1::from(&row[fr * hop..fr * hop + win]));
            }
        }
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |_parents, _out, grad| {
                let g = grad.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let mut dx = Array2::<f64>::zeros((b, l));
                for i in 0..b {
                    for fr in 0..f {
                        let mut dst = dx.slice_mut(ndarray::s![i, fr * hop..fr * hop + win]);
                        dst += &g.slice(ndarray::s![i, fr, ..]);
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }
}
