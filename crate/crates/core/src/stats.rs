//! Rank statistics and the Kruskal-Wallis H test.

use crate::error::{Error, Result};

/// 1-based ranks with ties assigned their mean rank. NaNs are rejected.
pub fn average_ranks(values: &[f64]) -> Result<Vec<f64>> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("cannot rank NaN".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j share rank (i+1 + j) / 2
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    Ok(ranks)
}

/// Sizes of tie groups among `values`.
fn tie_sizes(values: &[f64]) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut sizes = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        sizes.push(j - i);
        i = j;
    }
    sizes
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KruskalWallis {
    pub h: f64,
    pub p_value: f64,
    pub df: usize,
}

/// Kruskal-Wallis H test with tie correction; `p` is the upper tail of the
/// chi-square distribution with `groups - 1` degrees of freedom.
pub fn kruskal_wallis(groups: &[&[f64]]) -> Result<KruskalWallis> {
    if groups.len() < 2 {
        return Err(Error::InvalidArgument("kruskal_wallis needs at least two groups".into()));
    }
    if groups.iter().any(|g| g.is_empty()) {
        return Err(Error::Empty("kruskal_wallis group"));
    }
    let pooled: Vec<f64> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    let ranks = average_ranks(&pooled)?;
    let n = pooled.len() as f64;
    let df = groups.len() - 1;

    let ties: f64 = tie_sizes(&pooled).into_iter().map(|t| (t * t * t - t) as f64).sum();
    let correction = 1.0 - ties / (n * n * n - n);
    if correction <= 0.0 {
        // every value identical
        return Ok(KruskalWallis { h: 0.0, p_value: 1.0, df });
    }

    let mut offset = 0;
    let mut sum = 0.0;
    for g in groups {
        let ni = g.len() as f64;
        let mean_rank = ranks[offset..offset + g.len()].iter().sum::<f64>() / ni;
        sum += ni * (mean_rank - (n + 1.0) / 2.0).powi(2);
        offset += g.len();
    }
    let h = 12.0 / (n * (n + 1.0)) * sum / correction;
    Ok(KruskalWallis {
        h,
        p_value: chi_square_sf(h, df as f64),
        df,
    })
}

/// Upper tail `P[X > x]` of a chi-square variable with `df` degrees of freedom.
pub fn chi_square_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    regularized_gamma_q(df / 2.0, x / 2.0)
}

const GAMMA_EPS: f64 = 1e-16;
const GAMMA_MAX_ITER: usize = 10_000;

/// Regularized upper incomplete gamma `Q(a, x) = Gamma(a, x) / Gamma(a)`.
///
/// Uses the power series of `P` for `x < a + 1` and a modified Lentz
/// continued fraction for `Q` otherwise.
pub fn regularized_gamma_q(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0, "Q({a}, {x}) is undefined");
    if x == 0.0 {
        return 1.0;
    }
    let log_prefactor = a * x.ln() - x - libm::lgamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..GAMMA_MAX_ITER {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * GAMMA_EPS {
                break;
            }
        }
        1.0 - sum * log_prefactor.exp()
    } else {
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..GAMMA_MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < GAMMA_EPS {
                break;
            }
        }
        log_prefactor.exp() * h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]).unwrap(), vec![1.5, 3.0, 1.5, 4.0]);
        assert!(average_ranks(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn identical_groups() {
        let r = kruskal_wallis(&[&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(r.h, 0.0);
        assert!((r.p_value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn separated_pairs_hand_value() {
        // ranks 1,2 | 3,4: H = 12/20 * (2 * 1 + 2 * 1) = 2.4
        // one degree of freedom: p = Q(1/2, 1.2) = erfc(sqrt(1.2))
        let r = kruskal_wallis(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert!((r.h - 2.4).abs() < 1e-12);
        let expected = libm::erfc(1.2f64.sqrt());
        assert!((r.p_value - expected).abs() < 1e-12);
        assert!((r.p_value - 0.1213).abs() < 5e-5);
    }

    #[test]
    fn all_values_equal_is_not_an_error() {
        let r = kruskal_wallis(&[&[2.0, 2.0], &[2.0]]).unwrap();
        assert_eq!((r.h, r.p_value), (0.0, 1.0));
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(kruskal_wallis(&[&[1.0]]).is_err());
        assert!(kruskal_wallis(&[&[1.0], &[]]).is_err());
    }

    #[test]
    fn gamma_q_closed_forms() {
        // Q(1, x) = exp(-x); Q(1/2, x) = erfc(sqrt x)
        for x in [0.01, 0.5, 1.0, 2.0, 7.5, 30.0] {
            assert!((regularized_gamma_q(1.0, x) - (-x).exp()).abs() < 1e-14, "{x}");
            assert!((regularized_gamma_q(0.5, x) - libm::erfc(x.sqrt())).abs() < 1e-13, "{x}");
        }
        // Q(2, x) = (1 + x) exp(-x)
        for x in [0.3, 3.0, 12.0] {
            assert!((regularized_gamma_q(2.0, x) - (1.0 + x) * (-x).exp()).abs() < 1e-14);
        }
    }
}
