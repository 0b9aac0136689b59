//! Small numeric helpers shared by the clustering and metrics code.

/// Correctly rounded sum of finite values (Shewchuk's algorithm, as in
/// Python's `math.fsum`). The result does not depend on input order.
///
/// Falls back to naive summation if any input is non-finite.
pub fn exact_sum<I>(values: I) -> f64
where
    I: IntoIterator<Item = f64>,
{
    let mut partials: Vec<f64> = Vec::new();
    let mut special = 0.0f64;
    let mut saw_special = false;
    for mut x in values {
        if !x.is_finite() {
            saw_special = true;
            special += x;
            continue;
        }
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    if saw_special {
        return special + partials.iter().sum::<f64>();
    }

    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    // Round half-even across the remaining partials.
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        let yr = x - hi;
        if y == yr {
            hi = x;
        }
    }
    hi
}

/// Empirical quantile with linear interpolation between order statistics
/// (position `(n - 1) * q`). Returns `None` for empty input.
pub fn quantile_linear(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = q.clamp(0.0, 1.0);
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_sum_cancels() {
        assert_eq!(exact_sum([1e100, 1.0, -1e100]), 1.0);
        assert_eq!(exact_sum([0.1; 10]), 1.0);
        assert_eq!(exact_sum(std::iter::empty()), 0.0);
    }

    #[test]
    fn exact_sum_is_order_independent() {
        let xs = [3.0e-3, 1.0e16, -7.5, 2.25e-9, -1.0e16, 0.1, 0.7];
        let mut rev = xs;
        rev.reverse();
        assert_eq!(exact_sum(xs), exact_sum(rev));
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile_linear(&[], 0.1), None);
        assert_eq!(quantile_linear(&[5.0], 0.1), Some(5.0));
        // position 0.1 * 10 = 1.0
        let v: Vec<f64> = (0..=10).map(f64::from).collect();
        assert!((quantile_linear(&v, 0.1).unwrap() - 1.0).abs() < 1e-12);
        // position 0.1 * 3 = 0.3 between 1 and 2
        assert!((quantile_linear(&[2.0, 1.0, 4.0, 3.0], 0.1).unwrap() - 1.3).abs() < 1e-12);
    }
}
