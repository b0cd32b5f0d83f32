// Row-major matrix kernels shared by the forward and backward passes.

/// `out += a · b` with `a: p×q`, `b: q×r`.
pub(super) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let dst = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let av = a[i * q + k];
            if av == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (d, &bv) in dst.iter_mut().zip(brow) {
                *d += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: p×r`, `b: q×r`, `out: p×q`.
pub(super) fn matmul_a_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], p: usize, r: usize, q: usize) {
    for i in 0..p {
        let arow = &a[i * r..(i + 1) * r];
        for j in 0..q {
            let brow = &b[j * r..(j + 1) * r];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * q + j] += s;
        }
    }
}

/// `out += aᵀ · b` with `a: p×q`, `b: p×r`, `out: q×r`.
pub(super) fn matmul_at_b_acc(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let brow = &b[i * r..(i + 1) * r];
        for k in 0..q {
            let av = a[i * q + k];
            if av == 0.0 {
                continue;
            }
            let dst = &mut out[k * r..(k + 1) * r];
            for (d, &bv) in dst.iter_mut().zip(brow) {
                *d += av * bv;
            }
        }
    }
}

/// Outer/axis/inner strides for a reduction over `axis` of `shape`.
pub(super) fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
