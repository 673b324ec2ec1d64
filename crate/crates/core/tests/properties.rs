use lntune::drift::{change_d, distances};
use lntune::mask::selected_count;
use lntune::stats::{average_ranks, kruskal_wallis};
use proptest::prelude::*;

fn pair(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..max).prop_flat_map(|n| {
        (
            prop::collection::vec(-100.0..100.0f64, n),
            prop::collection::vec(-100.0..100.0f64, n),
        )
    })
}

fn groups() -> impl Strategy<Value = Vec<Vec<f64>>> {
    // coarse values so that ties are common
    prop::collection::vec(prop::collection::vec((0..20i32).prop_map(|v| v as f64 / 4.0), 1..8), 2..5)
}

proptest! {
    #[test]
    fn change_d_is_symmetric_mean_l1((a, b) in pair(64)) {
        let d = change_d(&a, &b).unwrap();
        prop_assert_eq!(d, change_d(&b, &a).unwrap());
        let dist = distances(&a, &b).unwrap();
        prop_assert!((d - dist.l1 / a.len() as f64).abs() <= 1e-12 * (1.0 + d));
        prop_assert!(dist.l0 <= a.len());
        prop_assert_eq!(change_d(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(distances(&a, &a).unwrap().l0, 0);
    }

    #[test]
    fn ranks_sum_to_triangular_number(v in prop::collection::vec((0..10i32).prop_map(f64::from), 1..40)) {
        let r = average_ranks(&v).unwrap();
        let n = v.len() as f64;
        prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] < v[j] {
                    prop_assert!(r[i] < r[j]);
                }
            }
        }
    }

    #[test]
    fn kruskal_wallis_depends_only_on_ranks(gs in groups(), scale in 0.1..10.0f64, shift in -5.0..5.0f64) {
        let refs: Vec<&[f64]> = gs.iter().map(Vec::as_slice).collect();
        let kw = kruskal_wallis(&refs).unwrap();
        let moved: Vec<Vec<f64>> = gs.iter().map(|g| g.iter().map(|v| (v * scale + shift).exp()).collect()).collect();
        let moved_refs: Vec<&[f64]> = moved.iter().map(Vec::as_slice).collect();
        let again = kruskal_wallis(&moved_refs).unwrap();
        prop_assert_eq!(kw.h, again.h);
        prop_assert!(kw.h >= 0.0);
        prop_assert!((0.0..=1.0).contains(&kw.p_value));
        prop_assert_eq!(kw.df, gs.len() - 1);
    }

    #[test]
    fn selected_count_rounds_half_up(n in 0usize..100_000, f in 0.0..=1.0f64) {
        let k = selected_count(f, n).unwrap();
        prop_assert!(k <= n);
        let x = f * n as f64;
        let gap = k as f64 - x;
        prop_assert!(gap.abs() <= 0.5);
        if gap.abs() == 0.5 {
            prop_assert!(gap > 0.0);
        }
    }
}
