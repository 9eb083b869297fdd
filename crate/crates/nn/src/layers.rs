//! Layer compositions built from primitive tensor ops.
//!
//! Everything here returns ordinary graph tensors, so the autograd engine
//! differentiates through these layers with no extra rules. Weight layouts
//! follow the usual conventions: `[out, in, k, ...]` for convolutions and
//! `[in, out, k, ...]` for their transposed counterparts.

use crate::conv::{ConvGeom, ConvGeom3};
use crate::tensor::Tensor;

/// `x [B,I] @ w [I,O] + b [O]`.
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let batch = x.shape()[0];
    let out = w.shape()[1];
    let y = x.matmul(w);
    y.add(&b.reshape(&[1, out]).broadcast_to(&[batch, out]))
}

/// 2-d convolution. `x [B,Cin,H,W]`, `w [Cout,Cin,k,k]`, `b [Cout]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [batch, cin, h, width] = four(x.shape());
    let cout = w.shape()[0];
    let k = w.shape()[2];
    assert_eq!(w.shape()[1], cin, "conv2d: channel mismatch");
    let geom = ConvGeom::new(batch, cin, h, width, k, stride, pad);
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let cols = x.im2col2d(&geom);
    let wmat = w.reshape(&[cout, cin * k * k]);
    let y = wmat.matmul(&cols); // [Cout, B*Ho*Wo]
    let y = y.reshape(&[cout, batch, oh, ow]).permute(&[1, 0, 2, 3]);
    y.add(&b.reshape(&[1, cout, 1, 1]).broadcast_to(&[batch, cout, oh, ow]))
}

/// Transposed 2-d convolution (adjoint of `conv2d` in its spatial map).
/// `x [B,Cin,H,W]`, `w [Cin,Cout,k,k]`, output `[B,Cout,(H-1)s+k-2p,...]`.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> Tensor {
    let [batch, cin, h, width] = four(x.shape());
    assert_eq!(w.shape()[0], cin, "conv_transpose2d: channel mismatch");
    let cout = w.shape()[1];
    let k = w.shape()[2];
    let out_h = (h - 1) * stride + k - 2 * pad;
    let out_w = (width - 1) * stride + k - 2 * pad;
    // geometry of the forward conv this op transposes
    let geom = ConvGeom::new(batch, cout, out_h, out_w, k, stride, pad);
    debug_assert_eq!((geom.out_h(), geom.out_w()), (h, width));
    let xmat = x.permute(&[1, 0, 2, 3]).reshape(&[cin, batch * h * width]);
    let wmat = w.reshape(&[cin, cout * k * k]);
    let cols = wmat.transpose().matmul(&xmat); // [Cout*k*k, B*H*W]
    let y = cols.col2im2d(&geom);
    y.add(&b.reshape(&[1, cout, 1, 1]).broadcast_to(&[batch, cout, out_h, out_w]))
}

/// 3-d convolution. `x [B,Cin,D,H,W]`, `w [Cout,Cin,k,k,k]`, `b [Cout]`.
pub fn conv3d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [batch, cin, d, h, width] = five(x.shape());
    let cout = w.shape()[0];
    let k = w.shape()[2];
    assert_eq!(w.shape()[1], cin, "conv3d: channel mismatch");
    let geom = ConvGeom3::new(batch, cin, d, h, width, k, stride, pad);
    let (od, oh, ow) = (geom.out_d(), geom.out_h(), geom.out_w());
    let cols = x.im2col3d(&geom);
    let wmat = w.reshape(&[cout, cin * k * k * k]);
    let y = wmat.matmul(&cols);
    let y = y.reshape(&[cout, batch, od, oh, ow]).permute(&[1, 0, 2, 3, 4]);
    y.add(
        &b.reshape(&[1, cout, 1, 1, 1])
            .broadcast_to(&[batch, cout, od, oh, ow]),
    )
}

/// Transposed 3-d convolution. `x [B,Cin,D,H,W]`, `w [Cin,Cout,k,k,k]`.
pub fn conv_transpose3d(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> Tensor {
    let [batch, cin, d, h, width] = five(x.shape());
    assert_eq!(w.shape()[0], cin, "conv_transpose3d: channel mismatch");
    let cout = w.shape()[1];
    let k = w.shape()[2];
    let out_d = (d - 1) * stride + k - 2 * pad;
    let out_h = (h - 1) * stride + k - 2 * pad;
    let out_w = (width - 1) * stride + k - 2 * pad;
    let geom = ConvGeom3::new(batch, cout, out_d, out_h, out_w, k, stride, pad);
    debug_assert_eq!((geom.out_d(), geom.out_h(), geom.out_w()), (d, h, width));
    let xmat = x
        .permute(&[1, 0, 2, 3, 4])
        .reshape(&[cin, batch * d * h * width]);
    let wmat = w.reshape(&[cin, cout * k * k * k]);
    let cols = wmat.transpose().matmul(&xmat);
    let y = cols.col2im3d(&geom);
    y.add(
        &b.reshape(&[1, cout, 1, 1, 1])
            .broadcast_to(&[batch, cout, out_d, out_h, out_w]),
    )
}

/// One LSTM step. `x [B,I]`, `h`/`c` `[B,H]`, `wx [I,4H]`, `wh [H,4H]`,
/// `b [4H]`, gate order `(input, forget, cell, output)`. Returns `(h', c')`.
pub fn lstm_step(
    x: &Tensor,
    h: &Tensor,
    c: &Tensor,
    wx: &Tensor,
    wh: &Tensor,
    b: &Tensor,
) -> (Tensor, Tensor) {
    let batch = x.shape()[0];
    let hidden = h.shape()[1];
    assert_eq!(b.shape(), &[4 * hidden], "lstm_step: bias shape");
    let gates = x
        .matmul(wx)
        .add(&h.matmul(wh))
        .add(&b.reshape(&[1, 4 * hidden]).broadcast_to(&[batch, 4 * hidden]));
    let i = gates.slice_axis(1, 0, hidden).sigmoid();
    let f = gates.slice_axis(1, hidden, hidden).sigmoid();
    let g = gates.slice_axis(1, 2 * hidden, hidden).tanh();
    let o = gates.slice_axis(1, 3 * hidden, hidden).sigmoid();
    let c_next = f.mul(c).add(&i.mul(&g));
    let h_next = o.mul(&c_next.tanh());
    (h_next, c_next)
}

/// Mean over the spatial axes of `[B,C,D,H,W]`, giving `[B,C]`.
pub fn global_avg_pool3d(x: &Tensor) -> Tensor {
    let [_, _, d, h, w] = five(x.shape());
    let n = (d * h * w) as f64;
    x.sum_axis(4).sum_axis(3).sum_axis(2).scale(1.0 / n)
}

/// Row-wise log-softmax of `x [B,K]`. The max shift uses a detached
/// constant, which leaves the value and all derivatives exact.
pub fn log_softmax(x: &Tensor) -> Tensor {
    let [batch, k] = two(x.shape());
    let v = x
        .value()
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("log_softmax: rank-2");
    let mut maxes = Vec::with_capacity(batch);
    for row in v.rows() {
        maxes.push(row.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
    let m = Tensor::constant(
        ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[batch, 1]), maxes).expect("max"),
    )
    .broadcast_to(&[batch, k]);
    let shifted = x.sub(&m);
    let lse = shifted.exp().sum_axis(1).ln(); // [B]
    shifted.sub(&lse.reshape(&[batch, 1]).broadcast_to(&[batch, k]))
}

/// Mean cross-entropy between logits `[B,K]` and one-hot targets `[B,K]`.
pub fn cross_entropy(logits: &Tensor, one_hot: &Tensor) -> Tensor {
    let batch = logits.shape()[0] as f64;
    log_softmax(logits).mul(one_hot).sum_all().scale(-1.0 / batch)
}

fn two(s: &[usize]) -> [usize; 2] {
    assert_eq!(s.len(), 2, "expected rank-2 tensor, got {s:?}");
    [s[0], s[1]]
}


fn four(s: &[usize]) -> [usize; 4] {
    assert_eq!(s.len(), 4, "expected rank-4 tensor, got {s:?}");
    [s[0], s[1], s[2], s[3]]
}

fn five(s: &[usize]) -> [usize; 5] {
    assert_eq!(s.len(), 5, "expected rank-5 tensor, got {s:?}");
    [s[0], s[1], s[2], s[3], s[4]]
}
