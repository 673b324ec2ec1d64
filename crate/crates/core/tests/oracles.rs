//! Results checked against independent implementations or hand calculation.

use lntune::data::{load_dataset, SynthKind, TaskSpec};
use lntune::finetune::{grid_search, make_freeze_plan, train_cell, Strategy, TrainConfig};
use lntune::metrics::{matthews, spearman, MetricKind};
use lntune::model::{build_model, Head, ModelConfig};
use lntune::stats::{chi_square_sf, kruskal_wallis, regularized_gamma_q};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::gamma_ur;

#[test]
fn kruskal_wallis_two_pairs() {
    let kw = kruskal_wallis(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
    // ranks 1,2 | 3,4: H = 12/(4*5) * (2*(1.5-2.5)^2 + 2*(3.5-2.5)^2) = 2.4
    assert!((kw.h - 2.4).abs() < 1e-12);
    assert_eq!(kw.df, 1);
    let p = ChiSquared::new(1.0).unwrap().sf(2.4);
    assert!((kw.p_value - p).abs() < 1e-12);
    assert!((kw.p_value - 0.121_335_9).abs() < 1e-6);
}

#[test]
fn kruskal_wallis_tie_correction_by_hand() {
    // pooled 1,1,2 | 2,3,3: ranks 1.5,1.5,3.5 | 3.5,5.5,5.5
    let kw = kruskal_wallis(&[&[1.0, 1.0, 2.0], &[2.0, 3.0, 3.0]]).unwrap();
    let raw = 12.0 / 42.0 * (3.0 * (6.5 / 3.0 - 3.5f64).powi(2) + 3.0 * (14.5 / 3.0 - 3.5f64).powi(2));
    let correction = 1.0 - 3.0 * 6.0 / 210.0;
    assert!((kw.h - raw / correction).abs() < 1e-12);
}

#[test]
fn chi_square_tail_matches_statrs() {
    for df in [1.0, 2.0, 3.0, 5.0, 8.0, 17.0] {
        let dist = ChiSquared::new(df).unwrap();
        for x in [0.01, 0.3, 1.0, 2.4, 5.0, 11.0, 30.0, 80.0] {
            let want = dist.sf(x);
            let got = chi_square_sf(x, df);
            assert!((got - want).abs() <= 1e-12 + 1e-9 * want, "df {df} x {x}: {got} vs {want}");
        }
    }
}

#[test]
fn incomplete_gamma_matches_statrs() {
    for a in [0.5, 1.0, 2.5, 4.0, 10.0] {
        for x in [0.1, 0.9, 3.0, 7.5, 20.0] {
            let (got, want) = (regularized_gamma_q(a, x), gamma_ur(a, x));
            assert!((got - want).abs() < 1e-12, "Q({a}, {x}): {got} vs {want}");
        }
    }
}

#[test]
fn spearman_and_matthews_by_hand() {
    // ranks x: 1,2,3,4,5; y: 2,1,4,3,5; d^2 sum = 4 -> 1 - 6*4/(5*24) = 0.8
    let rho = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[20.0, 10.0, 40.0, 30.0, 50.0]).unwrap();
    assert!((rho - 0.8).abs() < 1e-12);
    // tp 2, tn 1, fp 1, fn 1
    let mcc = matthews(&[1, 1, 1, 0, 0], &[1, 1, 0, 1, 0]).unwrap();
    assert!((mcc - 1.0 / 6.0).abs() < 1e-12);
}

#[test]
fn grid_search_picks_the_brute_force_best_cell() {
    let cfg = ModelConfig::toy(Head::Classification { num_labels: 2 });
    let params = build_model(&cfg, 3).unwrap();
    let task = TaskSpec::for_synthetic("pairclass", SynthKind::PairClass);
    let train = load_dataset("synth://pairclass/4/48", &task).unwrap();
    let val = load_dataset("synth://pairclass/5/16", &task).unwrap();
    let strategy = Strategy::LayerNorm;
    let mut tc = TrainConfig::new(&strategy, MetricKind::Accuracy, 9);
    tc.lr_grid = vec![1e-2, 1e-3, 5e-3];
    tc.max_epochs = 3;
    let plan = make_freeze_plan(&strategy, params.layout()).unwrap();

    let mut best: Option<(f64, f64, usize)> = None;
    for &lr in &tc.lr_grid {
        let cell = train_cell(&params, &cfg, &tc, lr, &plan.selection, &train, &val).unwrap();
        for (e, m) in cell.report.metrics.iter().enumerate() {
            let candidate = (m.score(), lr, e + 1);
            best = match best {
                None => Some(candidate),
                Some(b) => {
                    let better = candidate.0 > b.0
                        || (candidate.0 == b.0 && (candidate.1 < b.1 || (candidate.1 == b.1 && candidate.2 < b.2)));
                    Some(if better { candidate } else { b })
                }
            };
        }
    }
    let (score, lr, epoch) = best.unwrap();
    let (report, _) = grid_search(&params, &cfg, &tc, &strategy, &train, &val).unwrap();
    assert_eq!(report.best_metric.score(), score);
    assert_eq!(report.best_lr, lr);
    assert_eq!(report.best_epoch, epoch);
}
