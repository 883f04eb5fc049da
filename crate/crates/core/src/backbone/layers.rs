//! Layer kernels on raw NCHW slices.

/// `C = alpha * op(A) * op(B) + beta * C` with row-major storage, where
/// `op(A)` is `m x k` and `op(B)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `c x h x w` image into `(c*9) x (h*w)` columns for a 3x3
/// convolution with zero padding 1.
pub fn im2col(x: &[f32], c: usize, h: usize, w: usize, col: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `dx`.
pub fn col2im(col: &[f32], c: usize, h: usize, w: usize, dx: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

/// 3x3 same-padding convolution over a batch. `weight` is `cout x cin x 3 x 3`.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_forward(
    x: &[f32],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    bias: &[f32],
    cout: usize,
    out: &mut [f32],
) {
    let hw = h * w;
    let mut col = vec![0.0f32; cin * 9 * hw];
    for i in 0..n {
        im2col(&x[i * cin * hw..(i + 1) * cin * hw], cin, h, w, &mut col);
        let o = &mut out[i * cout * hw..(i + 1) * cout * hw];
        gemm(cout, cin * 9, hw, weight, false, &col, false, 0.0, o);
        for (co, plane) in o.chunks_exact_mut(hw).enumerate() {
            let b = bias[co];
            plane.iter_mut().for_each(|v| *v += b);
        }
    }
}

/// Accumulates weight and bias gradients; writes the input gradient when
/// `dx` is given.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    x: &[f32],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    cout: usize,
    dout: &[f32],
    dweight: &mut [f32],
    dbias: &mut [f32],
    mut dx: Option<&mut [f32]>,
) {
    let hw = h * w;
    let mut col = vec![0.0f32; cin * 9 * hw];
    let mut dcol = vec![0.0f32; cin * 9 * hw];
    if let Some(dx) = dx.as_deref_mut() {
        dx.fill(0.0);
    }
    for i in 0..n {
        let d = &dout[i * cout * hw..(i + 1) * cout * hw];
        im2col(&x[i * cin * hw..(i + 1) * cin * hw], cin, h, w, &mut col);
        gemm(cout, hw, cin * 9, d, false, &col, true, 1.0, dweight);
        for (co, plane) in d.chunks_exact(hw).enumerate() {
            dbias[co] += plane.iter().map(|&v| v as f64).sum::<f64>() as f32;
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(cin * 9, cout, hw, weight, true, d, false, 0.0, &mut dcol);
            col2im(&dcol, cin, h, w, &mut dx[i * cin * hw..(i + 1) * cin * hw]);
        }
    }
}

/// Saved quantities for the batch-norm backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
}

/// `sum f(v)` in f64 over eight independent lanes, which lets the loop
/// vectorise without reassociating a single accumulator.
#[inline]
fn lane_sum(xs: &[f32], f: impl Fn(f64) -> f64) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = xs.chunks_exact(8);
    let rest = chunks.remainder();
    for ch in chunks {
        for l in 0..8 {
            acc[l] += f(ch[l] as f64);
        }
    }
    acc.iter().sum::<f64>() + rest.iter().map(|&v| f(v as f64)).sum::<f64>()
}

/// Per-channel batch statistics `(mean, biased variance)` in f64.
pub fn channel_stats(x: &[f32], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * hw) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let planes = || (0..n).map(move |i| &x[(i * c + ch) * hw..][..hw]);
        let m = planes().map(|p| lane_sum(p, |v| v)).sum::<f64>() / count;
        let ss = planes().map(|p| lane_sum(p, |v| (v - m) * (v - m))).sum::<f64>();
        mean[ch] = m;
        var[ch] = ss / count;
    }
    (mean, var)
}

/// Normalises with batch statistics in place. Returns the cache (with an
/// empty `xhat` unless `keep_xhat`) and the batch `(mean, biased variance)`.
#[allow(clippy::too_many_arguments)]
pub fn bn_train_forward(
    x: &mut [f32],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[f32],
    beta: &[f32],
    eps: f64,
    keep_xhat: bool,
) -> (BnCache, Vec<f64>, Vec<f64>) {
    let (mean, var) = channel_stats(x, n, c, hw);
    let inv_std: Vec<f32> = var.iter().map(|&v| (1.0 / (v + eps).sqrt()) as f32).collect();
    let mut xhat = if keep_xhat { vec![0.0f32; x.len()] } else { Vec::new() };
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let (m, s, g, b) = (mean[ch] as f32, inv_std[ch], gamma[ch], beta[ch]);
            let xs = &mut x[off..off + hw];
            if keep_xhat {
                for (xv, xh) in xs.iter_mut().zip(&mut xhat[off..off + hw]) {
                    *xh = (*xv - m) * s;
                    *xv = g * *xh + b;
                }
            } else {
                xs.iter_mut().for_each(|xv| *xv = g * ((*xv - m) * s) + b);
            }
        }
    }
    (BnCache { xhat, inv_std }, mean, var)
}

#[allow(clippy::too_many_arguments)]
pub fn bn_eval_forward(
    x: &mut [f32],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f64,
) {
    for ch in 0..c {
        let s = (1.0 / (var[ch] as f64 + eps).sqrt()) as f32;
        let scale = gamma[ch] * s;
        let shift = beta[ch] - mean[ch] * scale;
        for i in 0..n {
            x[(i * c + ch) * hw..][..hw].iter_mut().for_each(|v| *v = *v * scale + shift);
        }
    }
}

/// Batch-norm backward in place (`dy` becomes `dx`); accumulates the scale
/// and shift gradients.
#[allow(clippy::too_many_arguments)]
pub fn bn_backward(
    dy: &mut [f32],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[f32],
    cache: &BnCache,
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) {
    let count = (n * hw) as f64;
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for i in 0..n {
            let off = (i * c + ch) * hw;
            sum_dy += lane_sum(&dy[off..off + hw], |v| v);
            let (d, xh) = (&dy[off..off + hw], &cache.xhat[off..off + hw]);
            let mut acc = [0.0f64; 8];
            let (dc, xc) = (d.chunks_exact(8), xh.chunks_exact(8));
            let tail: f64 = dc.remainder().iter().zip(xc.remainder()).map(|(a, b)| *a as f64 * *b as f64).sum();
            for (a, b) in dc.zip(xc) {
                for l in 0..8 {
                    acc[l] += a[l] as f64 * b[l] as f64;
                }
            }
            sum_dy_xhat += acc.iter().sum::<f64>() + tail;
        }
        dgamma[ch] += sum_dy_xhat as f32;
        dbeta[ch] += sum_dy as f32;
        // dx = k * (count * dy - sum_dy - xhat * sum_dy_xhat), evaluated in f32
        // with the per-channel constants formed in f64.
        let k = gamma[ch] as f64 * cache.inv_std[ch] as f64 / count;
        let (a, b, e) = ((k * count) as f32, (k * sum_dy) as f32, (k * sum_dy_xhat) as f32);
        for i in 0..n {
            let off = (i * c + ch) * hw;
            for (d, xh) in dy[off..off + hw].iter_mut().zip(&cache.xhat[off..off + hw]) {
                *d = a * *d - b - *xh * e;
            }
        }
    }
}

pub fn relu_forward(x: &mut [f32]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// 2x2 stride-2 max pooling (floor on odd sides) over `nc` planes. When
/// `argmax` is given it receives, per output element, the window position
/// of the maximum (`dy * 2 + dx`, first maximum wins).
pub fn maxpool2_forward(x: &[f32], nc: usize, h: usize, w: usize, mut argmax: Option<&mut Vec<u8>>) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; nc * oh * ow];
    if let Some(a) = argmax.as_deref_mut() {
        a.clear();
        a.resize(nc * oh * ow, 0);
    }
    for p in 0..nc {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            let r0 = &plane[2 * y * w..2 * y * w + 2 * ow];
            let r1 = &plane[(2 * y + 1) * w..(2 * y + 1) * w + 2 * ow];
            let o = p * oh * ow + y * ow;
            let dst = &mut out[o..o + ow];
            match argmax.as_deref_mut() {
                None => {
                    for (xx, d) in dst.iter_mut().enumerate() {
                        *d = r0[2 * xx].max(r0[2 * xx + 1]).max(r1[2 * xx].max(r1[2 * xx + 1]));
                    }
                }
                Some(a) => {
                    let codes = &mut a[o..o + ow];
                    for xx in 0..ow {
                        let (mut m, mut code) = (r0[2 * xx], 0u8);
                        for (v, k) in [(r0[2 * xx + 1], 1u8), (r1[2 * xx], 2), (r1[2 * xx + 1], 3)] {
                            if v > m {
                                m = v;
                                code = k;
                            }
                        }
                        dst[xx] = m;
                        codes[xx] = code;
                    }
                }
            }
        }
    }
    out
}

/// Routes pooled gradients back through max pooling and the ReLU before it:
/// each window's maximum receives the gradient when the pooled (post-ReLU)
/// value is positive; everything else is zero.
pub fn maxpool2_relu_backward(dy: &[f32], pooled: &[f32], argmax: &[u8], nc: usize, h: usize, w: usize, dx: &mut [f32]) {
    let (oh, ow) = (h / 2, w / 2);
    dx.fill(0.0);
    for p in 0..nc {
        let plane = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            let o = p * oh * ow + y * ow;
            for xx in 0..ow {
                if pooled[o + xx] > 0.0 {
                    let code = argmax[o + xx] as usize;
                    plane[(2 * y + code / 2) * w + 2 * xx + code % 2] = dy[o + xx];
                }
            }
        }
    }
}

pub fn global_avg_pool(x: &[f32], nc: usize, hw: usize) -> Vec<f32> {
    (0..nc)
        .map(|p| (x[p * hw..(p + 1) * hw].iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
        .collect()
}
