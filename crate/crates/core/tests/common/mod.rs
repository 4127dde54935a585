//! Brute-force oracles shared by the integration tests.

#![allow(dead_code)]

/// `W₂` between two uniform measures with the same number of atoms, by
/// enumerating every permutation coupling (Heap's algorithm).
pub fn w2_by_permutations(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let cost = |p: &[usize]| -> f64 {
        p.iter()
            .enumerate()
            .map(|(i, &j)| (a[i] - b[j]).powi(2))
            .sum::<f64>()
            / n as f64
    };
    let mut best = cost(&perm);
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(cost(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best.sqrt()
}

/// Repeat every atom `times` times.
pub fn replicate(atoms: &[f64], times: usize) -> Vec<f64> {
    atoms
        .iter()
        .flat_map(|&x| std::iter::repeat_n(x, times))
        .collect()
}

/// Integrate `k̇ = k²` backward from `k(T) = k_T` to `t = 0` with classic RK4.
pub fn riccati_backward_rk4(k_t: f64, horizon: f64, dt: f64) -> f64 {
    let steps = (horizon / dt).round() as usize;
    let h = horizon / steps as f64;
    let f = |k: f64| k * k;
    let mut k = k_t;
    // in reversed time s = T − t the equation reads dk/ds = −k²
    for _ in 0..steps {
        let k1 = -f(k);
        let k2 = -f(k + 0.5 * h * k1);
        let k3 = -f(k + 0.5 * h * k2);
        let k4 = -f(k + h * k3);
        k += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    k
}
