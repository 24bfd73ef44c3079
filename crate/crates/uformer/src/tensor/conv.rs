//! 2-D convolution, its transposed counterparts, and the 1-D synthesis
//! transposed convolution, all lowered onto the `mm_acc` kernel via
//! im2col/col2im so the hot loops stay contiguous.
//!
//! The transposed 2-D convolution is deliberately implemented as a
//! zero-stuffed stride-1 convolution with a flipped, channel-swapped kernel
//! rather than by calling the input-gradient path of `conv2d`; the adjoint
//! identity between the two is checked by the verification suite instead of
//! holding by construction.

use super::{mm_acc, Elem, Node, OpKind, Tensor};

#[derive(Clone, Copy)]
struct Conv2dDims {
    channels_in: usize,
    channels_out: usize,
    t_in: usize,
    f_in: usize,
    t_out: usize,
    f_out: usize,
    kt: usize,
    kf: usize,
    st: usize,
    sf: usize,
    pt: usize,
    pf: usize,
}

impl Conv2dDims {
    fn patch(&self) -> usize {
        self.channels_in * self.kt * self.kf
    }

    fn spatial_out(&self) -> usize {
        self.t_out * self.f_out
    }
}

fn conv2d_dims(
    x: &[usize],
    w: &[usize],
    stride: (usize, usize),
    pad: (usize, usize),
) -> Conv2dDims {
    assert_eq!(x.len(), 4, "conv2d: input must be [N,C,T,F], got {x:?}");
    assert_eq!(w.len(), 4, "conv2d: weight must be [O,C,kT,kF], got {w:?}");
    assert_eq!(
        x[1], w[1],
        "conv2d: input channels {} do not match weight channels {} ({x:?} vs {w:?})",
        x[1], w[1]
    );
    assert!(stride.0 >= 1 && stride.1 >= 1, "conv2d: strides must be >= 1");
    let (kt, kf) = (w[2], w[3]);
    let (t_in, f_in) = (x[2], x[3]);
    assert!(
        t_in + 2 * pad.0 >= kt && f_in + 2 * pad.1 >= kf,
        "conv2d: kernel ({kt},{kf}) larger than padded input ({},{})",
        t_in + 2 * pad.0,
        f_in + 2 * pad.1
    );
    Conv2dDims {
        channels_in: x[1],
        channels_out: w[0],
        t_in,
        f_in,
        t_out: (t_in + 2 * pad.0 - kt) / stride.0 + 1,
        f_out: (f_in + 2 * pad.1 - kf) / stride.1 + 1,
        kt,
        kf,
        st: stride.0,
        sf: stride.1,
        pt: pad.0,
        pf: pad.1,
    }
}

/// Gathers padded patches of one `[C,T,F]` image into `cols[patch][t'*F'+f']`.
fn im2col<E: Elem>(x: &[E], d: &Conv2dDims, cols: &mut [E]) {
    let spatial = d.spatial_out();
    for v in cols.iter_mut() {
        *v = E::zero();
    }
    for c in 0..d.channels_in {
        for kt in 0..d.kt {
            for kf in 0..d.kf {
                let row = ((c * d.kt + kt) * d.kf + kf) * spatial;
                // f' range with the f index in bounds: 0 <= f'*sf - pf + kf < f_in
                let f_lo = d.pf.saturating_sub(kf).div_ceil(d.sf);
                let f_hi = if d.f_in + d.pf > kf {
                    (((d.f_in + d.pf - kf - 1) / d.sf) + 1).min(d.f_out)
                } else {
                    0
                };
                for t_out in 0..d.t_out {
                    let ti = (t_out * d.st + kt) as isize - d.pt as isize;
                    if ti < 0 || ti as usize >= d.t_in {
                        continue;
                    }
                    let src_base = (c * d.t_in + ti as usize) * d.f_in;
                    let dst_base = row + t_out * d.f_out;
                    for f_out in f_lo..f_hi {
                        let fi = f_out * d.sf + kf - d.pf;
                        cols[dst_base + f_out] = x[src_base + fi];
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into one `[C,T,F]` image (transpose of `im2col`).
fn col2im_add<E: Elem>(cols: &[E], d: &Conv2dDims, x: &mut [E]) {
    let spatial = d.spatial_out();
    for c in 0..d.channels_in {
        for kt in 0..d.kt {
            for kf in 0..d.kf {
                let row = ((c * d.kt + kt) * d.kf + kf) * spatial;
                let f_lo = d.pf.saturating_sub(kf).div_ceil(d.sf);
                let f_hi = if d.f_in + d.pf > kf {
                    (((d.f_in + d.pf - kf - 1) / d.sf) + 1).min(d.f_out)
                } else {
                    0
                };
                for t_out in 0..d.t_out {
                    let ti = (t_out * d.st + kt) as isize - d.pt as isize;
                    if ti < 0 || ti as usize >= d.t_in {
                        continue;
                    }
                    let dst_base = (c * d.t_in + ti as usize) * d.f_in;
                    let src_base = row + t_out * d.f_out;
                    for f_out in f_lo..f_hi {
                        let fi = f_out * d.sf + kf - d.pf;
                        x[dst_base + fi] = x[dst_base + fi] + cols[src_base + f_out];
                    }
                }
            }
        }
    }
}

/// `out[O x S] = w_flat[O x CK] · im2col(x)`, one image.
fn conv_core_forward<E: Elem>(x: &[E], w: &[E], d: &Conv2dDims, cols: &mut [E], out: &mut [E]) {
    im2col(x, d, cols);
    mm_acc(w, cols, d.channels_out, d.patch(), d.spatial_out(), out);
}

/// Input gradient of the core convolution: `col2im(w^T · d_out)`.
fn conv_core_dx<E: Elem>(d_out: &[E], w: &[E], d: &Conv2dDims, dx: &mut [E]) {
    let ck = d.patch();
    let s = d.spatial_out();
    let mut dcols = vec![E::zero(); ck * s];
    E::gemm_acc(
        ck,
        d.channels_out,
        s,
        w,
        1,
        ck as isize,
        d_out,
        s as isize,
        1,
        &mut dcols,
        s as isize,
        1,
    );
    col2im_add(&dcols, d, dx);
}

/// Weight gradient of the core convolution: `d_out · im2col(x)^T`.
fn conv_core_dw<E: Elem>(x: &[E], d_out: &[E], d: &Conv2dDims, cols: &mut [E], dw: &mut [E]) {
    let ck = d.patch();
    let s = d.spatial_out();
    im2col(x, d, cols);
    E::gemm_acc(
        d.channels_out,
        s,
        ck,
        d_out,
        s as isize,
        1,
        cols,
        1,
        s as isize,
        dw,
        ck as isize,
        1,
    );
}

impl<E: Elem> Tensor<E> {
    /// `[N,C,T,F] * [O,C,kT,kF] -> [N,O,T',F']` with zero padding.
    pub fn conv2d(
        &self,
        w: &Tensor<E>,
        bias: &Tensor<E>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Tensor<E> {
        let d = conv2d_dims(self.shape(), w.shape(), stride, pad);
        assert_eq!(
            bias.numel(),
            d.channels_out,
            "conv2d: bias length {} does not match output channels {}",
            bias.numel(),
            d.channels_out
        );
        let batch = self.shape()[0];
        let xs = self.data();
        let ws = w.data();
        let bs = bias.data();
        let image = d.channels_in * d.t_in * d.f_in;
        let s = d.spatial_out();
        let mut cols = vec![E::zero(); d.patch() * s];
        let mut out = vec![E::zero(); batch * d.channels_out * s];
        for n in 0..batch {
            let block = &mut out[n * d.channels_out * s..(n + 1) * d.channels_out * s];
            conv_core_forward(&xs[n * image..(n + 1) * image], &ws, &d, &mut cols, block);
            for o in 0..d.channels_out {
                let b = bs[o];
                for v in &mut block[o * s..(o + 1) * s] {
                    *v = *v + b;
                }
            }
        }
        drop(xs);
        drop(ws);
        drop(bs);
        Tensor::from_op(
            out,
            vec![batch, d.channels_out, d.t_out, d.f_out],
            OpKind::Conv2d { stride, pad },
            vec![self.clone(), w.clone(), bias.clone()],
        )
    }

    /// Transposed 2-D convolution, `[N,C,T,F] * [C,O,kT,kF] -> [N,O,T',F']`
    /// with `T' = (T-1)*sT - 2*pT + kT` (likewise `F'`). With a weight shared
    /// with `conv2d` (axes 0/1 read as its output/input channels) this is the
    /// adjoint of `conv2d` at the same stride and padding.
    pub fn conv_transpose2d(
        &self,
        w: &Tensor<E>,
        bias: &Tensor<E>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Tensor<E> {
        let (stuffed, d, wflip) = self.transpose2d_setup(w, stride, pad);
        assert_eq!(
            bias.numel(),
            d.channels_out,
            "conv_transpose2d: bias length {} does not match output channels {}",
            bias.numel(),
            d.channels_out
        );
        let batch = self.shape()[0];
        let bs = bias.data();
        let image = d.channels_in * d.t_in * d.f_in;
        let s = d.spatial_out();
        let mut cols = vec![E::zero(); d.patch() * s];
        let mut out = vec![E::zero(); batch * d.channels_out * s];
        for n in 0..batch {
            let block = &mut out[n * d.channels_out * s..(n + 1) * d.channels_out * s];
            conv_core_forward(&stuffed[n * image..(n + 1) * image], &wflip, &d, &mut cols, block);
            for o in 0..d.channels_out {
                let b = bs[o];
                for v in &mut block[o * s..(o + 1) * s] {
                    *v = *v + b;
                }
            }
        }
        drop(bs);
        Tensor::from_op(
            out,
            vec![batch, d.channels_out, d.t_out, d.f_out],
            OpKind::ConvTranspose2d { stride, pad },
            vec![self.clone(), w.clone(), bias.clone()],
        )
    }

    /// Zero-stuffs the input at the stride and flips/swaps the kernel so the
    /// transposed convolution becomes a stride-1 convolution.
    fn transpose2d_setup(
        &self,
        w: &Tensor<E>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> (Vec<E>, Conv2dDims, Vec<E>) {
        let x = self.shape();
        let ws = w.shape();
        assert_eq!(x.len(), 4, "conv_transpose2d: input must be [N,C,T,F], got {x:?}");
        assert_eq!(ws.len(), 4, "conv_transpose2d: weight must be [C,O,kT,kF], got {ws:?}");
        assert_eq!(
            x[1], ws[0],
            "conv_transpose2d: input channels {} do not match weight channels {} ({x:?} vs {ws:?})",
            x[1], ws[0]
        );
        let (kt, kf) = (ws[2], ws[3]);
        assert!(
            pad.0 < kt && pad.1 < kf,
            "conv_transpose2d: padding ({},{}) must be smaller than the kernel ({kt},{kf})",
            pad.0,
            pad.1
        );
        let (batch, c, t, f) = (x[0], x[1], x[2], x[3]);
        let t_up = (t - 1) * stride.0 + 1;
        let f_up = (f - 1) * stride.1 + 1;
        let src = self.data();
        let mut stuffed = vec![E::zero(); batch * c * t_up * f_up];
        for n in 0..batch {
            for ci in 0..c {
                for ti in 0..t {
                    let src_base = ((n * c + ci) * t + ti) * f;
                    let dst_base = ((n * c + ci) * t_up + ti * stride.0) * f_up;
                    for fi in 0..f {
                        stuffed[dst_base + fi * stride.1] = src[src_base + fi];
                    }
                }
            }
        }
        drop(src);
        let o = ws[1];
        let wd = w.data();
        let mut wflip = vec![E::zero(); o * c * kt * kf];
        for ci in 0..c {
            for oi in 0..o {
                for a in 0..kt {
                    for b in 0..kf {
                        wflip[((oi * c + ci) * kt + (kt - 1 - a)) * kf + (kf - 1 - b)] =
                            wd[((ci * o + oi) * kt + a) * kf + b];
                    }
                }
            }
        }
        drop(wd);
        let d = conv2d_dims(
            &[batch, c, t_up, f_up],
            &[o, c, kt, kf],
            (1, 1),
            (kt - 1 - pad.0, kf - 1 - pad.1),
        );
        (stuffed, d, wflip)
    }

    /// Overlap-add synthesis: `[N,C,T] * [C,1,K] -> [N,1,(T-1)*stride+K]`.
    /// Each frame's channel vector is expanded through the kernel bank and
    /// placed at its hop position.
    pub fn conv_transpose1d(&self, w: &Tensor<E>, stride: usize) -> Tensor<E> {
        let x = self.shape();
        let ws = w.shape();
        assert_eq!(x.len(), 3, "conv_transpose1d: input must be [N,C,T], got {x:?}");
        assert!(
            ws.len() == 3 && ws[1] == 1,
            "conv_transpose1d: weight must be [C,1,K], got {ws:?}"
        );
        assert_eq!(
            x[1], ws[0],
            "conv_transpose1d: input channels {} do not match weight channels {}",
            x[1], ws[0]
        );
        let (batch, c, t) = (x[0], x[1], x[2]);
        let k = ws[2];
        let l = (t - 1) * stride + k;
        let xd = self.data();
        let wd = w.data();
        let mut out = vec![E::zero(); batch * l];
        for n in 0..batch {
            for ti in 0..t {
                let seg = &mut out[n * l + ti * stride..n * l + ti * stride + k];
                for ci in 0..c {
                    let s = xd[(n * c + ci) * t + ti];
                    let krow = &wd[ci * k..(ci + 1) * k];
                    for (o, &kv) in seg.iter_mut().zip(krow) {
                        *o = *o + s * kv;
                    }
                }
            }
        }
        drop(xd);
        drop(wd);
        Tensor::from_op(
            out,
            vec![batch, 1, l],
            OpKind::ConvTranspose1d { stride },
            vec![self.clone(), w.clone()],
        )
    }
}

pub(super) fn backward_conv2d<E: Elem>(
    node: &Node<E>,
    grad: &[E],
    stride: (usize, usize),
    pad: (usize, usize),
) {
    let x = &node.inputs[0];
    let w = &node.inputs[1];
    let bias = &node.inputs[2];
    let d = conv2d_dims(x.shape(), w.shape(), stride, pad);
    let batch = x.shape()[0];
    let image = d.channels_in * d.t_in * d.f_in;
    let s = d.spatial_out();

    if bias.requires_grad() {
        let mut db = vec![E::zero(); d.channels_out];
        for n in 0..batch {
            for o in 0..d.channels_out {
                let base = (n * d.channels_out + o) * s;
                let mut acc = E::zero();
                for i in 0..s {
                    acc = acc + grad[base + i];
                }
                db[o] = db[o] + acc;
            }
        }
        bias.accumulate_grad(&db);
    }
    if w.requires_grad() {
        let xd = x.data();
        let mut dw = vec![E::zero(); w.numel()];
        let mut cols = vec![E::zero(); d.patch() * s];
        for n in 0..batch {
            conv_core_dw(
                &xd[n * image..(n + 1) * image],
                &grad[n * d.channels_out * s..(n + 1) * d.channels_out * s],
                &d,
                &mut cols,
                &mut dw,
            );
        }
        drop(xd);
        w.accumulate_grad(&dw);
    }
    if x.requires_grad() {
        let wd = w.data();
        let mut dx = vec![E::zero(); x.numel()];
        for n in 0..batch {
            conv_core_dx(
                &grad[n * d.channels_out * s..(n + 1) * d.channels_out * s],
                &wd,
                &d,
                &mut dx[n * image..(n + 1) * image],
            );
        }
        drop(wd);
        x.accumulate_grad(&dx);
    }
}

pub(super) fn backward_conv_transpose2d<E: Elem>(
    node: &Node<E>,
    grad: &[E],
    stride: (usize, usize),
    pad: (usize, usize),
) {
    let x = &node.inputs[0];
    let w = &node.inputs[1];
    let bias = &node.inputs[2];
    let (stuffed, d, wflip) = x.transpose2d_setup(w, stride, pad);
    let batch = x.shape()[0];
    let image = d.channels_in * d.t_in * d.f_in;
    let s = d.spatial_out();
    let (kt, kf) = (d.kt, d.kf);

    if bias.requires_grad() {
        let mut db = vec![E::zero(); d.channels_out];
        for n in 0..batch {
            for o in 0..d.channels_out {
                let base = (n * d.channels_out + o) * s;
                let mut acc = E::zero();
                for i in 0..s {
                    acc = acc + grad[base + i];
                }
                db[o] = db[o] + acc;
            }
        }
        bias.accumulate_grad(&db);
    }
    if w.requires_grad() {
        let mut dwflip = vec![E::zero(); wflip.len()];
        let mut cols = vec![E::zero(); d.patch() * s];
        for n in 0..batch {
            conv_core_dw(
                &stuffed[n * image..(n + 1) * image],
                &grad[n * d.channels_out * s..(n + 1) * d.channels_out * s],
                &d,
                &mut cols,
                &mut dwflip,
            );
        }
        // Undo the flip/swap applied in the forward lowering.
        let c = d.channels_in;
        let o = d.channels_out;
        let mut dw = vec![E::zero(); w.numel()];
        for ci in 0..c {
            for oi in 0..o {
                for a in 0..kt {
                    for b in 0..kf {
                        dw[((ci * o + oi) * kt + a) * kf + b] =
                            dwflip[((oi * c + ci) * kt + (kt - 1 - a)) * kf + (kf - 1 - b)];
                    }
                }
            }
        }
        w.accumulate_grad(&dw);
    }
    if x.requires_grad() {
        let mut dx_up = vec![E::zero(); stuffed.len()];
        for n in 0..batch {
            conv_core_dx(
                &grad[n * d.channels_out * s..(n + 1) * d.channels_out * s],
                &wflip,
                &d,
                &mut dx_up[n * image..(n + 1) * image],
            );
        }
        // Sample the stuffed positions back out.
        let xs = x.shape();
        let (c, t, f) = (xs[1], xs[2], xs[3]);
        let (t_up, f_up) = (d.t_in, d.f_in);
        let mut dx = vec![E::zero(); x.numel()];
        for n in 0..batch {
            for ci in 0..c {
                for ti in 0..t {
                    let src_base = ((n * c + ci) * t_up + ti * stride.0) * f_up;
                    let dst_base = ((n * c + ci) * t + ti) * f;
                    for fi in 0..f {
                        dx[dst_base + fi] = dx_up[src_base + fi * stride.1];
                    }
                }
            }
        }
        x.accumulate_grad(&dx);
    }
}

pub(super) fn backward_conv_transpose1d<E: Elem>(node: &Node<E>, grad: &[E], stride: usize) {
    let x = &node.inputs[0];
    let w = &node.inputs[1];
    let xs = x.shape();
    let (batch, c, t) = (xs[0], xs[1], xs[2]);
    let k = w.shape()[2];
    let l = (t - 1) * stride + k;

    if x.requires_grad() {
        let wd = w.data();
        let mut dx = vec![E::zero(); x.numel()];
        for n in 0..batch {
            for ti in 0..t {
                let seg = &grad[n * l + ti * stride..n * l + ti * stride + k];
                for ci in 0..c {
                    let krow = &wd[ci * k..(ci + 1) * k];
                    let mut acc = E::zero();
                    for (&g, &kv) in seg.iter().zip(krow) {
                        acc = acc + g * kv;
                    }
                    dx[(n * c + ci) * t + ti] = acc;
                }
            }
        }
        drop(wd);
        x.accumulate_grad(&dx);
    }
    if w.requires_grad() {
        let xd = x.data();
        let mut dw = vec![E::zero(); w.numel()];
        for n in 0..batch {
            for ti in 0..t {
                let seg = &grad[n * l + ti * stride..n * l + ti * stride + k];
                for ci in 0..c {
                    let s = xd[(n * c + ci) * t + ti];
                    let drow = &mut dw[ci * k..(ci + 1) * k];
                    for (o, &g) in drow.iter_mut().zip(seg) {
                        *o = *o + s * g;
                    }
                }
            }
        }
        drop(xd);
        w.accumulate_grad(&dw);
    }
}
