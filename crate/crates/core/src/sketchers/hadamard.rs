//! In-place fast Walsh–Hadamard transform.

/// Unnormalized Walsh–Hadamard transform of `data`, whose length must be a
/// power of two (or zero). Applying it twice multiplies by `data.len()`.
pub fn fwht_in_place(data: &mut [f64]) {
    let n = data.len();
    assert!(n == 0 || n.is_power_of_two(), "length {n} is not a power of two");
    let mut half = 1;
    while half < n {
        for block in data.chunks_exact_mut(2 * half) {
            let (lo, hi) = block.split_at_mut(half);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        half *= 2;
    }
}
