/// Smallest `t` with `2^t >= n`; zero for `n <= 1`.
pub fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

/// `ceil(log2(log2(n)))`, zero when `n <= 2`.
pub fn ceil_log2_log2(n: u64) -> u32 {
    if n <= 2 {
        return 0;
    }
    // ceil(log2(x)) for real x = log2(n) >= 1: smallest t with 2^t >= log2(n),
    // i.e. n <= 2^(2^t).
    let mut t = 0u32;
    while t < 6 && (n as u128) > (1u128 << (1u32 << t)) {
        t += 1;
    }
    t
}

/// `2^(2^e)` saturating at `u64::MAX`.
pub fn tower2(e: u32) -> u64 {
    if e >= 6 {
        return u64::MAX;
    }
    let p = 1u32 << e;
    if p >= 64 {
        u64::MAX
    } else {
        1u64 << p
    }
}

/// Binomial coefficient as f64 (exact for the small arguments used here).
pub fn binomial_f64(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logs() {
        assert_eq!(ceil_log2(1), 0);
        assert_eq!(ceil_log2(2), 1);
        assert_eq!(ceil_log2(3), 2);
        assert_eq!(ceil_log2(8), 3);
        assert_eq!(ceil_log2(9), 4);
        assert_eq!(ceil_log2_log2(2), 0);
        assert_eq!(ceil_log2_log2(4), 1);
        assert_eq!(ceil_log2_log2(5), 2);
        assert_eq!(ceil_log2_log2(16), 2);
        assert_eq!(ceil_log2_log2(17), 3);
        assert_eq!(ceil_log2_log2(1 << 16), 4);
        assert_eq!(ceil_log2_log2((1 << 16) + 1), 5);
    }

    #[test]
    fn towers() {
        assert_eq!(tower2(0), 2);
        assert_eq!(tower2(1), 4);
        assert_eq!(tower2(2), 16);
        assert_eq!(tower2(4), 65536);
        assert_eq!(tower2(5), 1 << 32);
        assert_eq!(tower2(6), u64::MAX);
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial_f64(16, 2), 120.0);
        assert_eq!(binomial_f64(5, 0), 1.0);
        assert_eq!(binomial_f64(3, 4), 0.0);
    }
}
