//! 2D convolution via im2col + GEMM.

use ndarray::{Array1, Array2, Array4, Axis};

use super::Tensor;

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `(c_out, c_in, k, k)`
    pub weight: Array4<f32>,
    pub bias: Option<Array1<f32>>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.weight.shape()[2];
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn weight2d(&self) -> Array2<f32> {
        let (co, ci, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((co, ci * k * k))
            .expect("weight is standard layout")
            .to_owned()
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (n, c_in, h, w) = x.dim();
        let (co, wc_in, k, _) = self.weight.dim();
        assert_eq!(c_in, wc_in, "channel mismatch in conv");
        let (oh, ow) = self.out_hw(h, w);
        let mut y = Array4::zeros((n, co, oh, ow));
        let w2 = self.weight2d();
        for img in 0..n {
            let xs = x.index_axis(Axis(0), img);
            let y2 = if k == 1 && self.stride == 1 && self.pad == 0 {
                let x2 = xs
                    .into_shape_with_order((c_in, h * w))
                    .expect("sample view is contiguous");
                w2.dot(&x2)
            } else {
                let cols = im2col(
                    xs.as_slice().expect("standard layout"),
                    c_in,
                    h,
                    w,
                    k,
                    self.stride,
                    self.pad,
                    oh,
                    ow,
                );
                w2.dot(&cols)
            };
            let mut ys = y.index_axis_mut(Axis(0), img);
            ys.as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(y2.as_slice().expect("gemm output is contiguous"));
        }
        if let Some(bias) = &self.bias {
            for img in 0..n {
                for ch in 0..co {
                    let b = bias[ch];
                    y.index_axis_mut(Axis(0), img)
                        .index_axis_mut(Axis(0), ch)
                        .mapv_inplace(|v| v + b);
                }
            }
        }
        y
    }

    /// Accumulates weight/bias gradients into `dw`/`db` and returns the
    /// gradient with respect to the input. The im2col buffer is recomputed
    /// rather than kept from the forward pass to bound memory.
    pub fn backward(
        &self,
        x: &Tensor,
        dy: &Tensor,
        dw: &mut Array4<f32>,
        db: Option<&mut Array1<f32>>,
        ) -> Tensor {
        let (n, c_in, h, w) = x.dim();
        let (co, _, k, _) = self.weight.dim();
        let (oh, ow) = self.out_hw(h, w);
        let w2 = self.weight2d();
        let mut dx = Array4::zeros((n, c_in, h, w));
        let mut dw2 = Array2::zeros((co, c_in * k * k));
        for img in 0..n {
            let dy2 = dy
                .index_axis(Axis(0), img)
                .into_shape_with_order((co, oh * ow))
                .expect("sample view is contiguous");
            let xs = x.index_axis(Axis(0), img);
            if k == 1 && self.stride == 1 && self.pad == 0 {
                let x2 = xs
                    .into_shape_with_order((c_in, h * w))
                    .expect("sample view is contiguous");
                dw2 += &dy2.dot(&x2.t());
                let dx2 = w2.t().dot(&dy2);
                dx.index_axis_mut(Axis(0), img)
                    .as_slice_mut()
                    .expect("standard layout")
                    .copy_from_slice(dx2.as_slice().expect("contiguous"));
            } else {
                let cols = im2col(
                    xs.as_slice().expect("standard layout"),
                    c_in,
                    h,
                    w,
                    k,
                    self.stride,
                    self.pad,
                    oh,
                    ow,
                );
                dw2 += &dy2.dot(&cols.t());
                let dcols = w2.t().dot(&dy2);
                col2im_add(
                    dcols.as_slice().expect("contiguous"),
                    dx.index_axis_mut(Axis(0), img)
                        .as_slice_mut()
                        .expect("standard layout"),
                    c_in,
                    h,
                    w,
                    k,
                    self.stride,
                    self.pad,
                    oh,
                    ow,
                );
            }
        }
        *dw += &dw2
            .into_shape_with_order((co, c_in, k, k))
            .expect("shapes agree");
        if let Some(db) = db {
            for img in 0..n {
                let dy2 = dy
                    .index_axis(Axis(0), img)
                    .into_shape_with_order((co, oh * ow))
                    .expect("contiguous");
                *db += &dy2.sum_axis(Axis(1));
            }
        }
        dx
    }
}

/// Unfold `(c, h, w)` into `(c*k*k, oh*ow)`; padded locations stay zero.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f32> {
    let mut cols = Array2::zeros((c * k * k, oh * ow));
    let cs = cols.as_slice_mut().expect("standard layout");
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let row_base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_base = (ch * h + iy as usize) * w;
                    let dst_base = row_base + oy * ow;
                    if stride == 1 {
                        // contiguous span of valid ox
                        let shift = kx as isize - pad as isize;
                        let ox0 = (-shift).max(0) as usize;
                        let ox1 = ow.min((w as isize - shift).max(0) as usize);
                        if ox0 < ox1 {
                            let s0 = (ox0 as isize + shift) as usize;
                            cs[dst_base + ox0..dst_base + ox1]
                                .copy_from_slice(&x[src_base + s0..src_base + s0 + (ox1 - ox0)]);
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                cs[dst_base + ox] = x[src_base + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the unfolded gradient back onto the input layout.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    cols: &[f32],
    dx: &mut [f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let row_base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_base = (ch * h + iy as usize) * w;
                    let src_base = row_base + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[dst_base + ix as usize] += cols[src_base + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    /// Direct (nested-loop) convolution as an independent reference.
    fn conv_reference(x: &Tensor, conv: &Conv2d) -> Tensor {
        let (n, c_in, h, w) = x.dim();
        let (co, _, k, _) = conv.weight.dim();
        let (oh, ow) = conv.out_hw(h, w);
        let mut y = Array4::zeros((n, co, oh, ow));
        for img in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b[o]);
                        for ci in 0..c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        acc += x[(img, ci, iy as usize, ix as usize)]
                                            * conv.weight[(o, ci, ky, kx)];
                                    }
                                }
                            }
                        }
                        y[(img, o, oy, ox)] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn gemm_conv_matches_direct_reference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for &(k, stride, pad) in &[(3usize, 1usize, 1usize), (3, 2, 1), (1, 1, 0), (7, 2, 3)] {
            let conv = Conv2d {
                weight: Array4::from_shape_simple_fn((4, 3, k, k), || rng.gen_range(-1.0..1.0)),
                bias: Some(arr1(&[0.1, -0.2, 0.3, 0.0])),
                stride,
                pad,
            };
            let x = Array4::from_shape_simple_fn((2, 3, 10, 8), || rng.gen_range(-1.0..1.0));
            let y = conv.forward(&x);
            let y_ref = conv_reference(&x, &conv);
            assert_eq!(y.dim(), y_ref.dim());
            for (a, b) in y.iter().zip(y_ref.iter()) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b} (k={k} s={stride})");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut conv = Conv2d {
            weight: Array4::from_shape_simple_fn((2, 2, 3, 3), || rng.gen_range(-0.5..0.5)),
            bias: Some(arr1(&[0.0, 0.0])),
            stride: 2,
            pad: 1,
        };
        let x = Array4::from_shape_simple_fn((1, 2, 6, 6), || rng.gen_range(-1.0f32..1.0));
        // loss = sum(y^2)/2, so dL/dy = y
        let y = conv.forward(&x);
        let mut dw = Array4::zeros(conv.weight.raw_dim());
        let mut db = Array1::zeros(2);
        let dx = conv.backward(&x, &y, &mut dw, Some(&mut db));

        let loss = |conv: &Conv2d, x: &Tensor| -> f64 {
            conv.forward(x)
                .iter()
                .map(|&v| 0.5 * (v as f64) * (v as f64))
                .sum()
        };
        let h = 1e-3f32;
        // weight probe
        for &idx in &[0usize, 7, 20] {
            conv.weight.as_slice_mut().unwrap()[idx] += h;
            let hi = loss(&conv, &x);
            conv.weight.as_slice_mut().unwrap()[idx] -= 2.0 * h;
            let lo = loss(&conv, &x);
            conv.weight.as_slice_mut().unwrap()[idx] += h;
            let num = (hi - lo) / (2.0 * h as f64);
            let ana = dw.as_slice().unwrap()[idx] as f64;
            assert!((num - ana).abs() / num.abs().max(ana.abs()).max(1e-3) < 1e-2);
        }
        // input probe
        let mut xp = x.clone();
        for &idx in &[0usize, 13, 40] {
            xp.as_slice_mut().unwrap()[idx] += h;
            let hi = loss(&conv, &xp);
            xp.as_slice_mut().unwrap()[idx] -= 2.0 * h;
            let lo = loss(&conv, &xp);
            xp.as_slice_mut().unwrap()[idx] += h;
            let num = (hi - lo) / (2.0 * h as f64);
            let ana = dx.as_slice().unwrap()[idx] as f64;
            assert!((num - ana).abs() / num.abs().max(ana.abs()).max(1e-3) < 1e-2);
        }
    }
}
