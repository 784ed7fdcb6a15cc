//! Batched tensor primitives for the encoder-decoder net.
//!
//! All convolutions are 3x3 with padding 1 (stride 1 or 2) and run as
//! im2col + matrix multiply per image, parallelized over the batch axis.
//! Gradient reductions over the batch are summed in index order so results
//! are bit-reproducible regardless of thread scheduling.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis, Zip};
use rayon::prelude::*;

use super::Nonlinearity;

/// Negative-side slope of the leaky rectifier.
pub(crate) const LEAKY_SLOPE: f64 = 0.1;

pub(crate) const KSIZE: usize = 3;
pub(crate) const KAREA: usize = KSIZE * KSIZE;

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ConvSpec {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn kernel_len(&self) -> usize {
        self.out_c * self.in_c * KAREA
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }
}

/// Valid `ox` range for a kernel column offset, so that
/// `ix = ox * stride + kx - 1` stays inside `[0, w)`.
#[inline]
fn ox_range(kx: usize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    let ox0 = usize::from(kx == 0); // ix = ox*stride - 1 < 0 at ox = 0
    let mut ox1 = ow;
    while ox1 > ox0 && (ox1 - 1) * stride + kx > w {
        ox1 -= 1;
    }
    (ox0.min(ox1), ox1)
}

/// Unrolls one image into a `[C*9, OH*OW]` patch matrix (zero padding 1).
/// Operates on flat slices; padding positions stay zero.
fn im2col(x: &ArrayView3<f64>, stride: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let oh = (h - 1) / stride + 1;
    let ow = (w - 1) / stride + 1;
    let owned;
    let xs = match x.as_slice() {
        Some(s) => s,
        None => {
            owned = x.to_owned();
            owned.as_slice().expect("owned copy is standard layout")
        }
    };
    let mut cols = vec![0.0f64; c * KAREA * oh * ow];
    for ci in 0..c {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row_base = (ci * KAREA + ky * KSIZE + kx) * (oh * ow);
                let (ox0, ox1) = ox_range(kx, stride, w, ow);
                if ox0 >= ox1 {
                    continue;
                }
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut cols[row_base + oy * ow + ox0..row_base + oy * ow + ox1];
                    if stride == 1 {
                        let ix0 = ox0 + kx - 1;
                        dst.copy_from_slice(&src_row[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for (d, ox) in dst.iter_mut().zip(ox0..ox1) {
                            *d = src_row[ox * stride + kx - 1];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * KAREA, oh * ow), cols).unwrap()
}

/// Scatter-adds a `[C*9, OH*OW]` patch-gradient matrix back to `[C, H, W]`.
fn col2im(dcols: &Array2<f64>, stride: usize, h: usize, w: usize) -> Array3<f64> {
    let c = dcols.dim().0 / KAREA;
    let oh = (h - 1) / stride + 1;
    let ow = (w - 1) / stride + 1;
    let src = dcols.as_slice().expect("gemm output is contiguous");
    let mut dx = vec![0.0f64; c * h * w];
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row_base = (ci * KAREA + ky * KSIZE + kx) * (oh * ow);
                let (ox0, ox1) = ox_range(kx, stride, w, ow);
                if ox0 >= ox1 {
                    continue;
                }
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = &src[row_base + oy * ow + ox0..row_base + oy * ow + ox1];
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        let ix0 = ox0 + kx - 1;
                        for (d, s) in drow[ix0..ix0 + srow.len()].iter_mut().zip(srow) {
                            *d += s;
                        }
                    } else {
                        for (s, ox) in srow.iter().zip(ox0..ox1) {
                            drow[ox * stride + kx - 1] += s;
                        }
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((c, h, w), dx).unwrap()
}

/// Batched 3x3 convolution. `kernel` is the flat `[OC, IC*9]` tensor.
pub(crate) fn conv2d_batch(
    x: &Array4<f64>,
    kernel: &[f64],
    bias: &[f64],
    spec: &ConvSpec,
) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    debug_assert_eq!(c, spec.in_c);
    debug_assert_eq!(kernel.len(), spec.kernel_len());
    let (oh, ow) = spec.out_hw(h, w);
    let k2 = ArrayView2::from_shape((spec.out_c, spec.in_c * KAREA), kernel).unwrap();
    let mut out = Array4::<f64>::zeros((n, spec.out_c, oh, ow));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(x.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut on, xn)| {
            let cols = im2col(&xn, spec.stride);
            let mut y2 = k2.dot(&cols);
            for (r, &b) in bias.iter().enumerate() {
                y2.row_mut(r).mapv_inplace(|v| v + b);
            }
            on.assign(&y2.into_shape_with_order((spec.out_c, oh, ow)).unwrap());
        });
    out
}

pub(crate) struct ConvGrad {
    pub dkernel: Vec<f64>,
    pub dbias: Vec<f64>,
    pub dx: Option<Array4<f64>>,
}

/// Backward pass of [`conv2d_batch`]; recomputes im2col instead of caching.
pub(crate) fn conv2d_backward_batch(
    x: &Array4<f64>,
    kernel: &[f64],
    spec: &ConvSpec,
    dy: &Array4<f64>,
    need_dx: bool,
) -> ConvGrad {
    let (n, _, h, w) = x.dim();
    let (oh, ow) = spec.out_hw(h, w);
    let k2 = ArrayView2::from_shape((spec.out_c, spec.in_c * KAREA), kernel).unwrap();

    let per_image: Vec<(Array2<f64>, Vec<f64>, Option<Array3<f64>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xn = x.index_axis(Axis(0), i);
            let dyn_ = dy.index_axis(Axis(0), i);
            let cols = im2col(&xn, spec.stride);
            let dy2 = dyn_
                .into_shape_with_order((spec.out_c, oh * ow))
                .unwrap();
            let dk = dy2.dot(&cols.t());
            let db: Vec<f64> = dy2.rows().into_iter().map(|r| r.sum()).collect();
            let dx = if need_dx {
                let dcols = k2.t().dot(&dy2);
                Some(col2im(&dcols, spec.stride, h, w))
            } else {
                None
            };
            (dk, db, dx)
        })
        .collect();

    let mut dkernel = vec![0.0; spec.kernel_len()];
    let mut dbias = vec![0.0; spec.out_c];
    let mut dx = need_dx.then(|| Array4::<f64>::zeros(x.dim()));
    for (i, (dk, db, dxn)) in per_image.into_iter().enumerate() {
        for (acc, v) in dkernel.iter_mut().zip(dk.iter()) {
            *acc += v;
        }
        for (acc, v) in dbias.iter_mut().zip(&db) {
            *acc += v;
        }
        if let (Some(total), Some(part)) = (dx.as_mut(), dxn) {
            total.index_axis_mut(Axis(0), i).assign(&part);
        }
    }
    ConvGrad { dkernel, dbias, dx }
}

pub(crate) fn act_forward(kind: Nonlinearity, z: &Array4<f64>) -> Array4<f64> {
    match kind {
        Nonlinearity::LeakyRelu => z.mapv(|v| if v >= 0.0 { v } else { LEAKY_SLOPE * v }),
        Nonlinearity::Silu => z.mapv(|v| v / (1.0 + (-v).exp())),
        Nonlinearity::Tanh => z.mapv(f64::tanh),
    }
}

/// `dz = act'(z) ⊙ dy`.
pub(crate) fn act_backward(kind: Nonlinearity, z: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut out = dy.clone();
    match kind {
        Nonlinearity::LeakyRelu => {
            Zip::from(&mut out).and(z).for_each(|g, &zv| {
                if zv < 0.0 {
                    *g *= LEAKY_SLOPE;
                }
            });
        }
        Nonlinearity::Silu => {
            Zip::from(&mut out).and(z).for_each(|g, &zv| {
                let s = 1.0 / (1.0 + (-zv).exp());
                *g *= s * (1.0 + zv * (1.0 - s));
            });
        }
        Nonlinearity::Tanh => {
            Zip::from(&mut out).and(z).for_each(|g, &zv| {
                let t = zv.tanh();
                *g *= 1.0 - t * t;
            });
        }
    }
    out
}

pub(crate) fn sigmoid(z: &Array4<f64>) -> Array4<f64> {
    z.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

/// `dz = dy ⊙ y(1-y)` given the forward output `y`.
pub(crate) fn sigmoid_backward(y: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut out = dy.clone();
    Zip::from(&mut out).and(y).for_each(|g, &yv| *g *= yv * (1.0 - yv));
    out
}

/// Nearest-neighbor x2 upsampling.
pub(crate) fn upsample2(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let owned;
    let xs = match x.as_slice() {
        Some(s) => s,
        None => {
            owned = x.to_owned();
            owned.as_slice().expect("owned copy is standard layout")
        }
    };
    let mut out = vec![0.0f64; n * c * 4 * h * w];
    for plane in 0..n * c {
        let src = &xs[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..h {
            let srow = &src[y * w..(y + 1) * w];
            let (top, bottom) = dst[2 * y * 2 * w..(2 * y + 2) * 2 * w].split_at_mut(2 * w);
            for (xx, &v) in srow.iter().enumerate() {
                top[2 * xx] = v;
                top[2 * xx + 1] = v;
            }
            bottom.copy_from_slice(top);
        }
    }
    Array4::from_shape_vec((n, c, 2 * h, 2 * w), out).unwrap()
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub(crate) fn upsample2_backward(dy: &Array4<f64>) -> Array4<f64> {
    let (n, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let owned;
    let ds = match dy.as_slice() {
        Some(s) => s,
        None => {
            owned = dy.to_owned();
            owned.as_slice().expect("owned copy is standard layout")
        }
    };
    let mut out = vec![0.0f64; n * c * h * w];
    for plane in 0..n * c {
        let src = &ds[plane * h2 * w2..(plane + 1) * h2 * w2];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            let top = &src[2 * y * w2..(2 * y + 1) * w2];
            let bottom = &src[(2 * y + 1) * w2..(2 * y + 2) * w2];
            let drow = &mut dst[y * w..(y + 1) * w];
            for (xx, d) in drow.iter_mut().enumerate() {
                *d = top[2 * xx] + top[2 * xx + 1] + bottom[2 * xx] + bottom[2 * xx + 1];
            }
        }
    }
    Array4::from_shape_vec((n, c, h, w), out).unwrap()
}

/// Channel concat with guaranteed standard layout.
pub(crate) fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    let (n, ca, h, w) = a.dim();
    let cb = b.dim().1;
    debug_assert_eq!((n, h, w), (b.dim().0, b.dim().2, b.dim().3));
    let mut out = Array4::<f64>::zeros((n, ca + cb, h, w));
    out.slice_mut(s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(s![.., ca.., .., ..]).assign(b);
    out
}

/// Splits a channel-concat gradient back into its two parts.
pub(crate) fn split_channels(d: &Array4<f64>, first: usize) -> (Array4<f64>, Array4<f64>) {
    (
        d.slice(s![.., ..first, .., ..]).to_owned(),
        d.slice(s![.., first.., .., ..]).to_owned(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn rand4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let s = SeedStream::new(seed);
        let mut c = 0u64;
        Array4::from_shape_simple_fn(shape, || {
            c += 1;
            s.symmetric_f64(c, 1.0)
        })
    }

    /// Direct convolution used as the oracle for the im2col path.
    fn conv_naive(x: &Array4<f64>, k: &[f64], bias: &[f64], spec: &ConvSpec) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = spec.out_hw(h, w);
        let mut out = Array4::<f64>::zeros((n, spec.out_c, oh, ow));
        for ni in 0..n {
            for oc in 0..spec.out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[oc];
                        for ci in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * spec.stride + ky) as isize - 1;
                                    let ix = (ox * spec.stride + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[(ni, ci, iy as usize, ix as usize)]
                                        * k[oc * c * 9 + ci * 9 + ky * 3 + kx];
                                }
                            }
                        }
                        out[(ni, oc, oy, ox)] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_stride1_and_2() {
        for &stride in &[1usize, 2] {
            let spec = ConvSpec { name: "t".into(), in_c: 3, out_c: 5, stride };
            let x = rand4((2, 3, 8, 8), 1);
            let k: Vec<f64> = (0..spec.kernel_len())
                .map(|i| SeedStream::new(2).symmetric_f64(i as u64, 0.5))
                .collect();
            let bias: Vec<f64> = (0..5).map(|i| 0.1 * i as f64).collect();
            let got = conv2d_batch(&x, &k, &bias, &spec);
            let want = conv_naive(&x, &k, &bias, &spec);
            let max = (&got - &want).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(max < 1e-12, "stride {stride}: max diff {max}");
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let spec = ConvSpec { name: "t".into(), in_c: 2, out_c: 3, stride: 1 };
        let x = rand4((1, 2, 5, 5), 3);
        let k: Vec<f64> = (0..spec.kernel_len())
            .map(|i| SeedStream::new(4).symmetric_f64(i as u64, 0.5))
            .collect();
        let bias = vec![0.05, -0.02, 0.01];
        // loss = sum(y^2)/2, dy = y
        let y = conv2d_batch(&x, &k, &bias, &spec);
        let g = conv2d_backward_batch(&x, &k, &spec, &y, true);

        let h = 1e-6;
        let loss = |k: &[f64], bias: &[f64], x: &Array4<f64>| -> f64 {
            let y = conv2d_batch(x, k, bias, &spec);
            0.5 * y.iter().map(|v| v * v).sum::<f64>()
        };
        for i in [0usize, 7, 23, spec.kernel_len() - 1] {
            let mut kp = k.clone();
            kp[i] += h;
            let mut km = k.clone();
            km[i] -= h;
            let fd = (loss(&kp, &bias, &x) - loss(&km, &bias, &x)) / (2.0 * h);
            assert!((fd - g.dkernel[i]).abs() < 1e-5, "k[{i}] fd {fd} vs {}", g.dkernel[i]);
        }
        for i in 0..3 {
            let mut bp = bias.clone();
            bp[i] += h;
            let mut bm = bias.clone();
            bm[i] -= h;
            let fd = (loss(&k, &bp, &x) - loss(&k, &bm, &x)) / (2.0 * h);
            assert!((fd - g.dbias[i]).abs() < 1e-5);
        }
        let dx = g.dx.unwrap();
        for idx in [(0, 0, 0, 0), (0, 1, 2, 3), (0, 0, 4, 4)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&k, &bias, &xp) - loss(&k, &bias, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-5);
        }
    }

    #[test]
    fn upsample_roundtrip_shapes() {
        let x = rand4((2, 3, 4, 4), 9);
        let up = upsample2(&x);
        assert_eq!(up.dim(), (2, 3, 8, 8));
        let back = upsample2_backward(&up);
        // each position was copied 4x, so the adjoint sums to 4x the input
        let diff = (&back - &(&x * 4.0)).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(diff < 1e-12);
    }

    #[test]
    fn concat_split_are_inverse() {
        let a = rand4((1, 2, 4, 4), 5);
        let b = rand4((1, 3, 4, 4), 6);
        let cat = concat_channels(&a, &b);
        assert_eq!(cat.dim(), (1, 5, 4, 4));
        let (ga, gb) = split_channels(&cat, 2);
        assert_eq!(ga, a);
        assert_eq!(gb, b);
    }
}
