//! Forward kernels. Each function is pure; the graph in [`super::graph`]
//! records calls to these and supplies the matching adjoints.

use super::Tensor;
use crate::error::{Error, Result};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::ShapeMismatch { op: "matmul", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    gemm(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

/// Batched product of `[B, M, K]` and `[B, K, N]`.
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 3 || b.ndim() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1] {
        return Err(Error::ShapeMismatch { op: "bmm", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    let (batch, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
    let mut out = vec![0.0; batch * m * n];
    for i in 0..batch {
        gemm(
            &a.data()[i * m * k..(i + 1) * m * k],
            &b.data()[i * k * n..(i + 1) * k * n],
            &mut out[i * m * n..(i + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Tensor::new(&[batch, m, n], out)
}

/// `out += a · b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += aᵀ · b` for `a: k×m`, `b: k×n`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` for `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

pub fn softmax(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = x.split_at_axis(axis);
    let mut out = x.clone();
    let src = x.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (src[at(j)] - max).exp();
                dst[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                dst[at(j)] /= total;
            }
        }
    }
    out
}

/// Softmax restricted to entries where `valid` is nonzero. Invalid entries
/// come out as exactly `0.0` and never influence the valid ones.
pub fn masked_softmax(x: &Tensor, valid: &Tensor, axis: usize) -> Result<Tensor> {
    if x.shape() != valid.shape() {
        return Err(Error::ShapeMismatch {
            op: "masked_softmax",
            lhs: x.shape().to_vec(),
            rhs: valid.shape().to_vec(),
        });
    }
    let (outer, len, inner) = x.split_at_axis(axis);
    let mut out = Tensor::zeros(x.shape());
    let src = x.data();
    let mask = valid.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).filter(|&j| mask[at(j)] != 0.0).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::NoValidEntries);
            }
            let mut total = 0.0;
            for j in 0..len {
                if mask[at(j)] != 0.0 {
                    let e = (src[at(j)] - max).exp();
                    dst[at(j)] = e;
                    total += e;
                }
            }
            for j in 0..len {
                if mask[at(j)] != 0.0 {
                    dst[at(j)] /= total;
                }
            }
        }
    }
    Ok(out)
}

/// Same-padded, stride-1 2D convolution of `x: [Cin, H, W]` with
/// `kernel: [Cout, Cin, k, k]` (odd `k`), plus an optional per-output bias.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if x.ndim() != 3 || kernel.ndim() != 4 || kernel.shape()[1] != x.shape()[0] {
        return Err(Error::ShapeMismatch { op: "conv2d", lhs: x.shape().to_vec(), rhs: kernel.shape().to_vec() });
    }
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    if kh != kw || kh % 2 == 0 {
        return Err(Error::invalid("conv2d", format!("same padding needs a square odd kernel, got {kh}x{kw}")));
    }
    let pad = kh / 2;
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::ShapeMismatch { op: "conv2d bias", lhs: vec![cout], rhs: b.shape().to_vec() });
        }
    }
    let mut out = vec![0.0; cout * h * w];
    let xd = x.data();
    let kd = kernel.data();
    for co in 0..cout {
        let plane = &mut out[co * h * w..(co + 1) * h * w];
        if let Some(b) = bias {
            plane.fill(b.data()[co]);
        }
        for ci in 0..cin {
            let src = &xd[ci * h * w..(ci + 1) * h * w];
            for dy in 0..kh {
                for dx in 0..kw {
                    let wv = kd[((co * cin + ci) * kh + dy) * kw + dx];
                    if wv == 0.0 {
                        continue;
                    }
                    let oy = dy as isize - pad as isize;
                    let ox = dx as isize - pad as isize;
                    let (r0, r1) = valid_range(h, oy);
                    let (c0, c1) = valid_range(w, ox);
                    for r in r0..r1 {
                        let sr = (r as isize + oy) as usize;
                        let orow = &mut plane[r * w + c0..r * w + c1];
                        let srow = &src[sr * w + (c0 as isize + ox) as usize..];
                        for (o, s) in orow.iter_mut().zip(srow) {
                            *o += wv * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[cout, h, w], out)
}

/// Output positions `[lo, hi)` whose source `pos + shift` lies inside `0..n`.
pub(crate) fn valid_range(n: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (n as isize - shift).min(n as isize).max(0) as usize;
    (lo.min(hi), hi)
}

/// Marks every cell of `h: [K, H, W]` that equals the maximum of its
/// `kernel×kernel` neighbourhood (padding counts as `-inf`). Tied maxima are
/// all marked.
pub fn max_pool_peaks(h: &Tensor, kernel: usize) -> Result<Tensor> {
    if kernel.is_multiple_of(2) {
        return Err(Error::invalid("max_pool_peaks", format!("kernel {kernel} must be odd")));
    }
    if h.ndim() != 3 {
        return Err(Error::invalid("max_pool_peaks", format!("expected [K, H, W], got {:?}", h.shape())));
    }
    let (k, rows, cols) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    let r = (kernel / 2) as isize;
    let d = h.data();
    let mut out = Tensor::zeros(h.shape());
    for c in 0..k {
        let plane = &d[c * rows * cols..(c + 1) * rows * cols];
        for y in 0..rows {
            for x in 0..cols {
                let v = plane[y * cols + x];
                let mut is_peak = true;
                'scan: for dy in -r..=r {
                    let yy = y as isize + dy;
                    if yy < 0 || yy >= rows as isize {
                        continue;
                    }
                    for dx in -r..=r {
                        let xx = x as isize + dx;
                        if xx < 0 || xx >= cols as isize {
                            continue;
                        }
                        if plane[yy as usize * cols + xx as usize] > v {
                            is_peak = false;
                            break 'scan;
                        }
                    }
                }
                if is_peak {
                    out.data_mut()[(c * rows + y) * cols + x] = 1.0;
                }
            }
        }
    }
    Ok(out)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap(), b);

        let row = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let col = Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&row, &col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[4, 5], &mut rng);
        let b = random(&[5, 3], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = 0.0;
                for p in 0..5 {
                    acc += a.get(&[i, p]) * b.get(&[p, j]);
                }
                assert!((c.get(&[i, j]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch_with_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::new(&[3], vec![0.0; 3]).unwrap(), 0);
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&Tensor::new(&[2], vec![1000.0, 1000.0]).unwrap(), 0);
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), 0);
        // e^k / (e + e^2 + e^3), evaluated by hand.
        let expected = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (v, e) in s.data().iter().zip(expected) {
            assert!((v - e).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = Tensor::new(&[2, 2], vec![0.0, 10.0, 0.0, -10.0]).unwrap();
        let s = softmax(&x, 0);
        assert!((s.get(&[0, 0]) - 0.5).abs() < 1e-15);
        assert!((s.get(&[0, 1]) + s.get(&[1, 1]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_examples() {
        let x = Tensor::new(&[3], vec![5.0, 7.0, 9.0]).unwrap();
        let m = Tensor::new(&[3], vec![1.0, 0.0, 1.0]).unwrap();
        let s = masked_softmax(&x, &m, 0).unwrap();
        let reduced = softmax(&Tensor::new(&[2], vec![5.0, 9.0]).unwrap(), 0);
        assert_eq!(s.data()[1], 0.0);
        assert!((s.data()[0] - reduced.data()[0]).abs() < 1e-15);
        assert!((s.data()[2] - reduced.data()[1]).abs() < 1e-15);

        let only = Tensor::new(&[3], vec![1.0, 0.0, 0.0]).unwrap();
        let s = masked_softmax(&Tensor::new(&[3], vec![-3.0, 4.0, 8.0]).unwrap(), &only, 0).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0, 0.0]);

        let none = Tensor::zeros(&[3]);
        assert!(matches!(masked_softmax(&x, &none, 0), Err(Error::NoValidEntries)));
    }

    #[test]
    fn conv2d_trivial_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[1, 4, 5], &mut rng);
        let k1 = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d(&x, &k1, None).unwrap();
        assert_eq!(y, x.map(|v| 2.0 * v));

        let mut k3 = Tensor::zeros(&[1, 1, 3, 3]);
        k3.set(&[0, 0, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &k3, None).unwrap(), x);
    }

    #[test]
    fn conv2d_matches_sliding_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 5, 5], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let y = conv2d(&x, &k, Some(&b)).unwrap();
        for co in 0..3 {
            for r in 0..5 {
                for c in 0..5 {
                    let mut acc = b.data()[co];
                    for ci in 0..2 {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let (sr, sc) = (r as isize + dy - 1, c as isize + dx - 1);
                                if (0..5).contains(&sr) && (0..5).contains(&sc) {
                                    acc += k.get(&[co, ci, dy as usize, dx as usize])
                                        * x.get(&[ci, sr as usize, sc as usize]);
                                }
                            }
                        }
                    }
                    assert!((y.get(&[co, r, c]) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv2d_rejects_even_and_oversized_kernels() {
        assert!(conv2d(&Tensor::zeros(&[1, 4, 4]), &Tensor::zeros(&[1, 1, 2, 2]), None).is_err());
        assert!(conv2d(&Tensor::zeros(&[1, 0, 4]), &Tensor::zeros(&[1, 1, 3, 3]), None).is_err());
        assert!(conv2d(&Tensor::zeros(&[2, 4, 4]), &Tensor::zeros(&[1, 1, 3, 3]), None).is_err());
    }

    #[test]
    fn peaks_single_spike_and_constant() {
        // Every zero cell shares a window with the spike, so none of them is
        // a (tied) maximum.
        let mut h = Tensor::zeros(&[1, 3, 3]);
        h.set(&[0, 1, 1], 1.0);
        let p = max_pool_peaks(&h, 3).unwrap();
        assert_eq!(p.sum(), 1.0);
        assert_eq!(p.get(&[0, 1, 1]), 1.0);

        let c = Tensor::full(&[2, 4, 4], 0.3);
        assert_eq!(max_pool_peaks(&c, 3).unwrap(), Tensor::ones(&[2, 4, 4]));
    }

    #[test]
    fn peaks_two_spikes_far_apart() {
        let mut h = Tensor::full(&[1, 3, 9], -1.0);
        h.set(&[0, 1, 1], 0.5);
        h.set(&[0, 1, 6], 0.8);
        let p = max_pool_peaks(&h, 3).unwrap();
        // Direct neighbourhood scan: a cell is a peak iff nothing in its 3×3
        // window is larger.
        for y in 0..3 {
            for x in 0..9 {
                let v = h.get(&[0, y, x]);
                let mut peak = true;
                for yy in y.saturating_sub(1)..(y + 2).min(3) {
                    for xx in x.saturating_sub(1)..(x + 2).min(9) {
                        peak &= h.get(&[0, yy, xx]) <= v;
                    }
                }
                assert_eq!(p.get(&[0, y, x]) == 1.0, peak, "cell ({y},{x})");
            }
        }
        assert_eq!(p.get(&[0, 1, 1]), 1.0);
        assert_eq!(p.get(&[0, 1, 6]), 1.0);
    }

    #[test]
    fn peaks_on_border_use_neg_infinity_padding() {
        // Values fall off away from the corner, so only the corner is a peak.
        let h = Tensor::from_fn(&[1, 3, 3], |i| -((i / 3 + i % 3) as f64) - 1.0);
        let p = max_pool_peaks(&h, 3).unwrap();
        assert_eq!(p.get(&[0, 0, 0]), 1.0);
        assert_eq!(p.sum(), 1.0);
        assert!(max_pool_peaks(&h, 2).is_err());
    }
}
