// Raw loops behind the tape ops. All buffers are row-major.

use super::Tensor;
use crate::error::{Error, Result};

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
pub(crate) fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] += g_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
pub(crate) fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

/// Output side length of a 2x2 pool over `n` cells (odd sizes padded by one).
pub fn pooled_len(n: usize) -> usize {
    n.div_ceil(2)
}

fn conv_dims(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<[usize; 5]> {
    let (is, ws) = (input.shape(), weight.shape());
    if is.len() != 4 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
        return Err(Error::Shape {
            op: "conv2d_3x3",
            left: is.to_vec(),
            right: ws.to_vec(),
        });
    }
    if is[1] != ws[1] {
        return Err(Error::Shape {
            op: "conv2d_3x3 channels",
            left: is.to_vec(),
            right: ws.to_vec(),
        });
    }
    if bias.shape() != [ws[0]] {
        return Err(Error::Shape {
            op: "conv2d_3x3 bias",
            left: ws.to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    if is[2] == 0 || is[3] == 0 {
        return Err(Error::Empty("convolution input"));
    }
    Ok([is[0], is[1], ws[0], is[2], is[3]])
}

// For kernel offset `d` in {-1,0,1}: the range of output coordinates whose
// shifted input coordinate stays inside [0, len).
fn valid_range(d: isize, len: usize) -> (usize, usize) {
    let lo = if d < 0 { 1 } else { 0 };
    let hi = if d > 0 { len.saturating_sub(1) } else { len };
    (lo.min(hi), hi)
}

/// Same-padded 3x3 convolution, `[N,C,H,W] x [F,C,3,3] + [F] -> [N,F,H,W]`,
/// without activation.
pub fn conv2d_3x3_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [n_batch, chans, feats, h, w] = conv_dims(input, weight, bias)?;
    let plane = h * w;
    let mut out = vec![0.0; n_batch * feats * plane];
    let (x, wt) = (input.data(), weight.data());
    for n in 0..n_batch {
        for f in 0..feats {
            let o = &mut out[(n * feats + f) * plane..(n * feats + f + 1) * plane];
            o.fill(bias.data()[f]);
            for c in 0..chans {
                let src = &x[(n * chans + c) * plane..(n * chans + c + 1) * plane];
                let kern = &wt[(f * chans + c) * 9..(f * chans + c + 1) * 9];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = valid_range(dy, h);
                    for kx in 0..3 {
                        let wv = kern[ky * 3 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let dx = kx as isize - 1;
                        let (x0, x1) = valid_range(dx, w);
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let orow = &mut o[y * w + x0..y * w + x1];
                            let srow = &src[sy * w + (x0 as isize + dx) as usize
                                ..sy * w + (x1 as isize + dx) as usize];
                            for (ov, &sv) in orow.iter_mut().zip(srow) {
                                *ov += wv * sv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n_batch, feats, h, w], out)
}

/// Accumulates input, weight and bias gradients of [`conv2d_3x3_forward`].
pub(crate) fn conv2d_3x3_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f64],
    grad_in: Option<&mut [f64]>,
    grad_w: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
) {
    let s = input.shape();
    let (n_batch, chans, h, w) = (s[0], s[1], s[2], s[3]);
    let feats = weight.shape()[0];
    let plane = h * w;
    let (x, wt) = (input.data(), weight.data());

    if let Some(gb) = grad_b {
        for n in 0..n_batch {
            for (f, g) in gb.iter_mut().enumerate() {
                *g += grad_out[(n * feats + f) * plane..(n * feats + f + 1) * plane]
                    .iter()
                    .sum::<f64>();
            }
        }
    }
    if let Some(gw) = grad_w {
        for n in 0..n_batch {
            for f in 0..feats {
                let go = &grad_out[(n * feats + f) * plane..(n * feats + f + 1) * plane];
                for c in 0..chans {
                    let src = &x[(n * chans + c) * plane..(n * chans + c + 1) * plane];
                    for ky in 0..3 {
                        let dy = ky as isize - 1;
                        let (y0, y1) = valid_range(dy, h);
                        for kx in 0..3 {
                            let dx = kx as isize - 1;
                            let (x0, x1) = valid_range(dx, w);
                            let mut acc = 0.0;
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let grow = &go[y * w + x0..y * w + x1];
                                let srow = &src[sy * w + (x0 as isize + dx) as usize
                                    ..sy * w + (x1 as isize + dx) as usize];
                                acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                            }
                            gw[(f * chans + c) * 9 + ky * 3 + kx] += acc;
                        }
                    }
                }
            }
        }
    }
    if let Some(gi) = grad_in {
        for n in 0..n_batch {
            for f in 0..feats {
                let go = &grad_out[(n * feats + f) * plane..(n * feats + f + 1) * plane];
                for c in 0..chans {
                    let dst = &mut gi[(n * chans + c) * plane..(n * chans + c + 1) * plane];
                    let kern = &wt[(f * chans + c) * 9..(f * chans + c + 1) * 9];
                    for ky in 0..3 {
                        let dy = ky as isize - 1;
                        let (y0, y1) = valid_range(dy, h);
                        for kx in 0..3 {
                            let wv = kern[ky * 3 + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let dx = kx as isize - 1;
                            let (x0, x1) = valid_range(dx, w);
                            for y in y0..y1 {
                                let sy = (y as isize + dy) as usize;
                                let grow = &go[y * w + x0..y * w + x1];
                                let drow = &mut dst[sy * w + (x0 as isize + dx) as usize
                                    ..sy * w + (x1 as isize + dx) as usize];
                                for (d, &g) in drow.iter_mut().zip(grow) {
                                    *d += wv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Non-overlapping 2x2 max pool over the last two axes of `[N,C,H,W]`.
/// Odd sides behave as if padded with negative infinity. Returns the pooled
/// tensor and, per output cell, the flat input index of the winning cell
/// (first maximum in row-major window order).
pub fn maxpool_2x2_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::Shape {
            op: "maxpool_2x2",
            left: s.to_vec(),
            right: vec![],
        });
    }
    let (n_batch, chans, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (pooled_len(h), pooled_len(w));
    let mut out = Vec::with_capacity(n_batch * chans * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    let x = input.data();
    for plane in 0..n_batch * chans {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let (y, xx) = (2 * oy + dy, 2 * ox + dx);
                    if y >= h || xx >= w {
                        continue;
                    }
                    let idx = base + y * w + xx;
                    if best_idx == usize::MAX || x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(&[n_batch, chans, oh, ow], out)?, argmax))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
        let s = input.shape();
        let (nb, c, h, w) = (s[0], s[1], s[2], s[3]);
        let f = weight.shape()[0];
        let mut out = Tensor::zeros(&[nb, f, h, w]);
        for n in 0..nb {
            for ff in 0..f {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = bias.data()[ff];
                        for cc in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = y as isize + ky as isize - 1;
                                    let sx = x as isize + kx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    acc += weight.data()[((ff * c + cc) * 3 + ky) * 3 + kx]
                                        * input.data()
                                            [((n * c + cc) * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                        out.data_mut()[((n * f + ff) * h + y) * w + x] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(len: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..len)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive_loop() {
        for &(h, w) in &[(1, 1), (2, 3), (5, 4), (7, 7)] {
            let input = Tensor::new(&[2, 3, h, w], pseudo(2 * 3 * h * w, 1)).unwrap();
            let weight = Tensor::new(&[4, 3, 3, 3], pseudo(4 * 27, 2)).unwrap();
            let bias = Tensor::vector(pseudo(4, 3));
            let fast = conv2d_3x3_forward(&input, &weight, &bias).unwrap();
            let slow = naive_conv(&input, &weight, &bias);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_by_one_input_uses_only_center_tap() {
        let input = Tensor::new(&[1, 2, 1, 1], vec![3.0, -2.0]).unwrap();
        let mut wdata = vec![100.0; 2 * 9];
        wdata[4] = 0.5; // channel 0 centre
        wdata[9 + 4] = 0.25; // channel 1 centre
        let weight = Tensor::new(&[1, 2, 3, 3], wdata).unwrap();
        let out = conv2d_3x3_forward(&input, &weight, &Tensor::vector(vec![0.1])).unwrap();
        assert!((out.item() - (0.1 + 1.5 - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let input = Tensor::zeros(&[1, 3, 4, 4]);
        let weight = Tensor::zeros(&[2, 4, 3, 3]);
        let err = conv2d_3x3_forward(&input, &weight, &Tensor::zeros(&[2])).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn pool_windows_and_odd_padding() {
        let t = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (p, idx) = maxpool_2x2_forward(&t).unwrap();
        assert_eq!(p.data(), &[4.0]);
        assert_eq!(idx, vec![3]);

        let t = Tensor::new(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let (p, _) = maxpool_2x2_forward(&t).unwrap();
        assert_eq!(p.shape(), &[1, 1, 2, 2]);
        assert_eq!(p.data(), &[5.0, 6.0, 8.0, 9.0]);

        let c = Tensor::filled(&[1, 2, 4, 6], 0.7);
        let (p, idx) = maxpool_2x2_forward(&c).unwrap();
        assert_eq!(p.shape(), &[1, 2, 2, 3]);
        assert!(p.data().iter().all(|&v| v == 0.7));
        // ties resolve to the top-left cell of each window
        assert_eq!(idx[0], 0);
        assert_eq!(idx[1], 2);
    }
}
