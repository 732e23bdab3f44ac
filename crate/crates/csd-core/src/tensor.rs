//! Dense tensor kernels shared by the backbone and the embedding extractor.
//!
//! Layout conventions: batches are `(B, C, H, W)`, single images `(C, H, W)`.
//! Convolutions are stride-1 with "same" zero padding and odd kernels; the
//! forward pass lowers each row chunk to a column matrix and multiplies, the
//! backward pass scatters the column gradients back.

use ndarray::{s, Array1, Array3, Array4, ArrayView1, ArrayView4, Axis};

/// Rows per im2col chunk, chosen so the column buffer stays around 32 MB.
fn chunk_rows(ci: usize, k: usize, w: usize) -> usize {
    let per_row = ci * k * k * w;
    (4_000_000 / per_row.max(1)).max(1)
}

/// Lower input rows `[y0, y1)` of one batch item to a `(ci*k*k, (y1-y0)*w)`
/// column matrix. Out-of-bounds taps read as zero.
fn im2col(
    x: &Array4<f64>,
    item: usize,
    y0: usize,
    y1: usize,
    k: usize,
) -> ndarray::Array2<f64> {
    let (_, ci, h, w) = x.dim();
    let pad = k / 2;
    let rows = y1 - y0;
    let mut col = ndarray::Array2::<f64>::zeros((ci * k * k, rows * w));
    let xs = x.as_slice().expect("standard layout");
    let base = item * ci * h * w;
    for c in 0..ci {
        for dy in 0..k {
            for dx in 0..k {
                let row_idx = (c * k + dy) * k + dx;
                let col_row = col.row_mut(row_idx);
                let dst = col_row.into_slice().expect("contiguous row");
                for y in y0..y1 {
                    let sy = y as isize + dy as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &xs[base + (c * h + sy as usize) * w..][..w];
                    let out_row = &mut dst[(y - y0) * w..][..w];
                    // output x reads input x + dx - pad
                    let shift = dx as isize - pad as isize;
                    let (xo_start, xi_start) = if shift < 0 {
                        ((-shift) as usize, 0)
                    } else {
                        (0, shift as usize)
                    };
                    let n = w - xo_start.max(xi_start);
                    out_row[xo_start..xo_start + n].copy_from_slice(&src_row[xi_start..xi_start + n]);
                }
            }
        }
    }
    col
}

/// Scatter-add a column-matrix gradient back onto the input gradient.
fn col2im_add(
    gx: &mut Array4<f64>,
    gcol: &ndarray::Array2<f64>,
    item: usize,
    y0: usize,
    y1: usize,
    k: usize,
) {
    let (_, ci, h, w) = gx.dim();
    let pad = k / 2;
    let gxs = gx.as_slice_mut().expect("standard layout");
    let base = item * ci * h * w;
    for c in 0..ci {
        for dy in 0..k {
            for dx in 0..k {
                let row_idx = (c * k + dy) * k + dx;
                let src = gcol.row(row_idx);
                let src = src.as_slice().expect("contiguous row");
                for y in y0..y1 {
                    let sy = y as isize + dy as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut gxs[base + (c * h + sy as usize) * w..][..w];
                    let src_row = &src[(y - y0) * w..][..w];
                    let shift = dx as isize - pad as isize;
                    let (xo_start, xi_start) = if shift < 0 {
                        ((-shift) as usize, 0)
                    } else {
                        (0, shift as usize)
                    };
                    let n = w - xo_start.max(xi_start);
                    for i in 0..n {
                        dst_row[xi_start + i] += src_row[xo_start + i];
                    }
                }
            }
        }
    }
}

/// Stride-1 same-padding convolution: `x (B,Ci,H,W)`, `w (Co,Ci,k,k)`, `b (Co)`.
pub fn conv2d(x: &Array4<f64>, w: ArrayView4<f64>, b: ArrayView1<f64>) -> Array4<f64> {
    let chunk = chunk_rows(w.dim().1, w.dim().2, x.dim().3);
    conv2d_chunked(x, w, b, chunk)
}

fn conv2d_chunked(
    x: &Array4<f64>,
    w: ArrayView4<f64>,
    b: ArrayView1<f64>,
    chunk: usize,
) -> Array4<f64> {
    let (bs, ci, h, wd) = x.dim();
    let (co, ciw, k, k2) = w.dim();
    assert_eq!(ci, ciw, "conv input channel mismatch");
    assert_eq!(k, k2, "square kernels only");
    assert_eq!(k % 2, 1, "odd kernels only");
    let wmat = w
        .to_shape((co, ci * k * k))
        .expect("weight reshape")
        .to_owned();
    let mut out = Array4::<f64>::zeros((bs, co, h, wd));
    for item in 0..bs {
        let mut y0 = 0;
        while y0 < h {
            let y1 = (y0 + chunk).min(h);
            let col = im2col(x, item, y0, y1, k);
            let o = wmat.dot(&col);
            out.slice_mut(s![item, .., y0..y1, ..]).assign(
                &o.into_shape_with_order((co, y1 - y0, wd))
                    .expect("output reshape"),
            );
            y0 = y1;
        }
    }
    for (mut plane, &bias) in out.axis_iter_mut(Axis(1)).zip(b.iter()) {
        plane += bias;
    }
    out
}

pub struct ConvGradients {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub input: Option<Array4<f64>>,
}

/// Gradients of `conv2d` w.r.t. weight, bias and (optionally) input.
pub fn conv2d_backward(
    x: &Array4<f64>,
    w: ArrayView4<f64>,
    grad_out: &Array4<f64>,
    need_input_grad: bool,
) -> ConvGradients {
    let chunk = chunk_rows(w.dim().1, w.dim().2, x.dim().3);
    conv2d_backward_chunked(x, w, grad_out, need_input_grad, chunk)
}

fn conv2d_backward_chunked(
    x: &Array4<f64>,
    w: ArrayView4<f64>,
    grad_out: &Array4<f64>,
    need_input_grad: bool,
    chunk: usize,
) -> ConvGradients {
    let (bs, ci, h, wd) = x.dim();
    let (co, _, k, _) = w.dim();
    assert_eq!(grad_out.dim(), (bs, co, h, wd), "grad_out shape");
    let wmat = w
        .to_shape((co, ci * k * k))
        .expect("weight reshape")
        .to_owned();
    let wmat_t = wmat.t().to_owned();

    let mut gw = ndarray::Array2::<f64>::zeros((co, ci * k * k));
    let mut gb = Array1::<f64>::zeros(co);
    let mut gx = need_input_grad.then(|| Array4::<f64>::zeros((bs, ci, h, wd)));

    for (c, acc) in gb.iter_mut().enumerate() {
        *acc = grad_out.slice(s![.., c, .., ..]).sum();
    }

    for item in 0..bs {
        let mut y0 = 0;
        while y0 < h {
            let y1 = (y0 + chunk).min(h);
            let col = im2col(x, item, y0, y1, k);
            let go = grad_out
                .slice(s![item, .., y0..y1, ..])
                .to_shape((co, (y1 - y0) * wd))
                .expect("grad reshape")
                .to_owned();
            gw += &go.dot(&col.t());
            if let Some(gx) = gx.as_mut() {
                let gcol = wmat_t.dot(&go);
                col2im_add(gx, &gcol, item, y0, y1, k);
            }
            y0 = y1;
        }
    }

    ConvGradients {
        weight: gw
            .into_shape_with_order((co, ci, k, k))
            .expect("grad weight reshape"),
        bias: gb,
        input: gx,
    }
}

pub fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Backward through ReLU given the *post-activation* values.
pub fn relu_backward(grad_out: &Array4<f64>, activated: &Array4<f64>) -> Array4<f64> {
    let mut g = grad_out.clone();
    g.zip_mut_with(activated, |gv, &av| {
        if av <= 0.0 {
            *gv = 0.0;
        }
    });
    g
}

/// 2x2 max pooling with stride 2 (floor semantics for odd dims).
/// Returns the pooled map and the winning corner index (0..4) per cell.
pub fn maxpool2(x: &Array4<f64>) -> (Array4<f64>, Array4<u8>) {
    let (bs, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::<f64>::zeros((bs, c, oh, ow));
    let mut arg = Array4::<u8>::zeros((bs, c, oh, ow));
    for b in 0..bs {
        for ch in 0..c {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut which = 0u8;
                    for (i, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        let v = x[[b, ch, 2 * y + dy, 2 * xo + dx]];
                        if v > best {
                            best = v;
                            which = i as u8;
                        }
                    }
                    out[[b, ch, y, xo]] = best;
                    arg[[b, ch, y, xo]] = which;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(
    grad_out: &Array4<f64>,
    arg: &Array4<u8>,
    input_dim: (usize, usize, usize, usize),
) -> Array4<f64> {
    let (bs, c, oh, ow) = grad_out.dim();
    let mut gx = Array4::<f64>::zeros(input_dim);
    let corners = [(0, 0), (0, 1), (1, 0), (1, 1)];
    for b in 0..bs {
        for ch in 0..c {
            for y in 0..oh {
                for xo in 0..ow {
                    let (dy, dx) = corners[arg[[b, ch, y, xo]] as usize];
                    gx[[b, ch, 2 * y + dy, 2 * xo + dx]] += grad_out[[b, ch, y, xo]];
                }
            }
        }
    }
    gx
}

/// Rearrange `(B, C*s^2, H, W)` into `(B, C, H*s, W*s)`.
pub fn pixel_shuffle(x: &Array4<f64>, s: usize) -> Array4<f64> {
    let (bs, cs2, h, w) = x.dim();
    assert_eq!(cs2 % (s * s), 0, "channels must be divisible by s^2");
    let c = cs2 / (s * s);
    let mut out = Array4::<f64>::zeros((bs, c, h * s, w * s));
    for b in 0..bs {
        for ch in 0..c {
            for i in 0..s {
                for j in 0..s {
                    let src = x.slice(s![b, ch * s * s + i * s + j, .., ..]);
                    let mut dst = out.slice_mut(s![b, ch, i..; s, j..; s]);
                    dst.assign(&src);
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_shuffle`]; also its gradient (pure permutation).
pub fn pixel_unshuffle(x: &Array4<f64>, s: usize) -> Array4<f64> {
    let (bs, c, hs, ws) = x.dim();
    assert_eq!(hs % s, 0);
    assert_eq!(ws % s, 0);
    let (h, w) = (hs / s, ws / s);
    let mut out = Array4::<f64>::zeros((bs, c * s * s, h, w));
    for b in 0..bs {
        for ch in 0..c {
            for i in 0..s {
                for j in 0..s {
                    let src = x.slice(s![b, ch, i..; s, j..; s]);
                    let mut dst = out.slice_mut(s![b, ch * s * s + i * s + j, .., ..]);
                    dst.assign(&src);
                }
            }
        }
    }
    out
}

/// One of the 8 dihedral transforms: optional horizontal flip, then `k`
/// counter-clockwise quarter turns.
pub fn dihedral(img: &Array3<f64>, k_rot: usize, flip: bool) -> Array3<f64> {
    let mut cur = if flip {
        img.slice(s![.., .., ..; -1]).to_owned()
    } else {
        img.clone()
    };
    for _ in 0..(k_rot % 4) {
        cur = rot90_ccw(&cur);
    }
    cur
}

/// Inverse of [`dihedral`] with the same `(k_rot, flip)` pair.
pub fn dihedral_inverse(img: &Array3<f64>, k_rot: usize, flip: bool) -> Array3<f64> {
    let mut cur = img.clone();
    for _ in 0..((4 - (k_rot % 4)) % 4) {
        cur = rot90_ccw(&cur);
    }
    if flip {
        cur = cur.slice(s![.., .., ..; -1]).to_owned();
    }
    cur
}

fn rot90_ccw(img: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let mut out = Array3::<f64>::zeros((c, w, h));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ch, w - 1 - x, y]] = img[[ch, y, x]];
            }
        }
    }
    out
}
