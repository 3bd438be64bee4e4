//! Dense row-major matrix products.

/// `m×k · k×n`.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c[i * n..(i + 1) * n].iter_mut().zip(row) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `g · bᵀ` for `g: m×n`, `b: k×n` → `m×k`.
pub(crate) fn gemm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        for p in 0..k {
            c[i * k + p] = g[i * n..(i + 1) * n]
                .iter()
                .zip(&b[p * n..(p + 1) * n])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    c
}

/// `aᵀ · g` for `a: m×k`, `g: m×n` → `k×n`.
pub(crate) fn gemm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for (cv, gv) in c[p * n..(p + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                *cv += av * gv;
            }
        }
    }
    c
}
