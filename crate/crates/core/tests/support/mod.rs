//! Independent oracles shared by integration and acceptance tests.
#![allow(dead_code)]

/// Modularity straight from the pairwise definition
/// `(1/2m) sum_ij [A_ij - gamma k_i k_j / 2m] [c_i == c_j]`.
pub fn pairwise_modularity(n: usize, a: &[f64], labels: &[usize], gamma: f64) -> f64 {
    let k: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i * n + j]).sum()).collect();
    let m2: f64 = k.iter().sum();
    if m2 == 0.0 {
        return 0.0;
    }
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if labels[i] == labels[j] {
                q += a[i * n + j] - gamma * k[i] * k[j] / m2;
            }
        }
    }
    q / m2
}

/// Best modularity over every set partition of `n` nodes, enumerated as
/// restricted growth strings. Returns `(q, labels)`.
pub fn brute_force_modularity(n: usize, a: &[f64], gamma: f64) -> (f64, Vec<usize>) {
    assert!(n >= 1 && n <= 11, "exhaustive search is only for tiny graphs");
    let mut rgs = vec![0usize; n];
    let mut best = (f64::NEG_INFINITY, rgs.clone());
    loop {
        let q = pairwise_modularity(n, a, &rgs, gamma);
        if q > best.0 {
            best = (q, rgs.clone());
        }
        // next restricted growth string: rgs[i] <= 1 + max(rgs[..i])
        let mut i = n - 1;
        loop {
            if i == 0 {
                return best;
            }
            let prefix_max = rgs[..i].iter().copied().max().unwrap_or(0);
            if rgs[i] <= prefix_max {
                rgs[i] += 1;
                for v in rgs[i + 1..].iter_mut() {
                    *v = 0;
                }
                break;
            }
            i -= 1;
        }
    }
}

/// Bell numbers, to check the enumeration is complete.
pub fn bell(n: usize) -> usize {
    let mut row = vec![1usize];
    for _ in 0..n {
        let mut next = vec![*row.last().unwrap()];
        for v in &row {
            let last = *next.last().unwrap();
            next.push(last + v);
        }
        row = next;
    }
    row[0]
}

pub fn count_partitions(n: usize) -> usize {
    let mut rgs = vec![0usize; n];
    let mut count = 0;
    loop {
        count += 1;
        let mut i = n - 1;
        loop {
            if i == 0 {
                return count;
            }
            let prefix_max = rgs[..i].iter().copied().max().unwrap_or(0);
            if rgs[i] <= prefix_max {
                rgs[i] += 1;
                for v in rgs[i + 1..].iter_mut() {
                    *v = 0;
                }
                break;
            }
            i -= 1;
        }
    }
}

/// Two `k`-cliques with unit weights joined by one unit edge between node
/// `k - 1` and node `k`.
pub fn two_cliques(k: usize) -> Vec<f64> {
    let n = 2 * k;
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j && (i < k) == (j < k) {
                a[i * n + j] = 1.0;
            }
        }
    }
    a[(k - 1) * n + k] = 1.0;
    a[k * n + k - 1] = 1.0;
    a
}
