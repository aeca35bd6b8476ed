mod common;

use common::*;
use equimod::evalsuite::{absolute_equivariance, relative_equivariance};
use equimod::expcli::{preset, preset_names, ExperimentConfig};
use equimod::objectives::{equimod_loss, equimod_view_losses, simclr_invariance_loss, Denominator, EmbeddingBundle};
use equimod::trainer::{byol_momentum, cosine_lr, StepSchedule};
use proptest::prelude::*;

fn bundle(z_equi: &[Vec<f64>], z_pred: &[Vec<f64>]) -> EmbeddingBundle {
    let n = z_equi.len() / 2;
    EmbeddingBundle {
        z: tensor(z_equi),
        z_equi: tensor(z_equi),
        z_orig: tensor(&z_equi[..n]),
        z_pred: tensor(z_pred),
    }
}

fn loss(z_equi: &[Vec<f64>], z_pred: &[Vec<f64>], tau: f64, d: Denominator) -> f64 {
    equimod_loss(&bundle(z_equi, z_pred), tau, d).unwrap().to_scalar::<f64>().unwrap()
}

/// `images` source images, two views each, rows of width `width`, bounded
/// away from zero norm.
fn views(images: std::ops::Range<usize>, width: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (images, width).prop_flat_map(|(n, w)| {
        let row = prop::collection::vec(-3.0f64..3.0, w).prop_filter("nonzero row", |r| norm(r) > 1e-2);
        (prop::collection::vec(row.clone(), 2 * n), prop::collection::vec(row, 2 * n))
    })
}

fn vector(width: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, width).prop_filter("nonzero", |r| norm(r) > 1e-2)
}

fn denominator() -> impl Strategy<Value = Denominator> {
    prop_oneof![Just(Denominator::Verbatim), Just(Denominator::IncludePositive)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn equimod_loss_ignores_row_scale(
        (ze, zp) in views(2..6, 2..12),
        scales in prop::collection::vec(0.05f64..20.0, 24),
        tau in 0.05f64..1.0,
        d in denominator(),
    ) {
        let scale = |rows: &[Vec<f64>], off: usize| -> Vec<Vec<f64>> {
            rows.iter().enumerate().map(|(i, r)| r.iter().map(|x| x * scales[(i + off) % scales.len()]).collect()).collect()
        };
        let a = loss(&ze, &zp, tau, d);
        let b = loss(&scale(&ze, 0), &scale(&zp, 7), tau, d);
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn equimod_loss_is_invariant_to_image_order(
        (ze, zp) in views(2..6, 2..12),
        seed in any::<u64>(),
        tau in 0.05f64..1.0,
        d in denominator(),
    ) {
        let n = ze.len() / 2;
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        // image k keeps its two views at k and k + N
        let permute = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            (0..2 * n).map(|r| rows[perm[r % n] + (r / n) * n].clone()).collect()
        };
        let a = loss(&ze, &zp, tau, d);
        let b = loss(&permute(&ze), &permute(&zp), tau, d);
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn equimod_loss_matches_oracle((ze, zp) in views(2..8, 2..16), tau in 0.05f64..1.0, d in denominator()) {
        let want = oracle_equimod(&ze, &zp, tau, d == Denominator::IncludePositive);
        let got = loss(&ze, &zp, tau, d);
        prop_assert!((want - got).abs() <= 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn perfect_prediction_never_raises_a_view_loss((ze, zp) in views(2..6, 2..12), tau in 0.05f64..1.0, d in denominator()) {
        let before = flat(&equimod_view_losses(&bundle(&ze, &zp), tau, d).unwrap());
        let after = flat(&equimod_view_losses(&bundle(&ze, &ze), tau, d).unwrap());
        for (b, a) in before.iter().zip(&after) {
            prop_assert!(a <= &(b + 1e-12));
        }
    }

    #[test]
    fn verbatim_is_below_include_positive((ze, zp) in views(2..6, 2..12), tau in 0.05f64..1.0) {
        prop_assert!(loss(&ze, &zp, tau, Denominator::Verbatim) < loss(&ze, &zp, tau, Denominator::IncludePositive));
    }

    #[test]
    fn nt_xent_matches_oracle_and_is_positive((z, _) in views(2..6, 2..12), tau in 0.05f64..1.0) {
        let got = simclr_invariance_loss(&tensor(&z), tau).unwrap().to_scalar::<f64>().unwrap();
        let want = oracle_nt_xent(&z, tau);
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
        prop_assert!(got > 0.0);
    }

    #[test]
    fn absolute_metric_is_bounded_and_zero_on_identity(v in vector(6), p in vector(6), o in vector(6)) {
        let a = absolute_equivariance(&v, &p, &o).unwrap();
        prop_assert!((-2.0..=2.0).contains(&a));
        prop_assert!(absolute_equivariance(&v, &o, &o).unwrap().abs() < 1e-12);
        prop_assert!(absolute_equivariance(&v, &v, &o).unwrap() >= -1e-12);
    }

    #[test]
    fn relative_metric_is_nonnegative_and_one_on_identity(v in vector(6), p in vector(6), o in vector(6)) {
        prop_assert!(relative_equivariance(&v, &p, &o).unwrap() >= 0.0);
        prop_assert!((relative_equivariance(&v, &o, &o).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cosine_lr_stays_in_range_and_decays(base in 0.01f64..10.0, warmup in 0u64..50, extra in 1u64..500) {
        let schedule = StepSchedule { warmup, total: warmup + extra };
        let mut prev = f64::INFINITY;
        for step in 0..=schedule.total {
            let lr = cosine_lr(step, base, schedule).unwrap();
            prop_assert!((0.0..=base + 1e-12).contains(&lr));
            if step >= warmup {
                prop_assert!(lr <= prev + 1e-12);
                prev = lr;
            }
        }
        prop_assert!(cosine_lr(schedule.total, base, schedule).unwrap().abs() < 1e-9 * base);
        prop_assert!(cosine_lr(schedule.total + 1, base, schedule).is_err());
    }

    #[test]
    fn byol_momentum_rises_to_one(tau_base in 0.9f64..1.0, total in 1u64..2000) {
        let mut prev = 0.0;
        for step in (0..=total).step_by((total as usize / 50).max(1)) {
            let tau = byol_momentum(step, total, tau_base);
            prop_assert!(tau >= prev - 1e-15 && (tau_base - 1e-15..=1.0).contains(&tau));
            prev = tau;
        }
        prop_assert!((byol_momentum(0, total, tau_base) - tau_base).abs() < 1e-12);
        prop_assert!((byol_momentum(total, total, tau_base) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_survives_toml_round_trip(
        index in 0usize..64,
        lambda in 0.0f64..10.0,
        tau_prime in 0.01f64..2.0,
        batch in 2usize..2048,
        // TOML integers are signed 64-bit
        seed in 0u64..i64::MAX as u64,
    ) {
        let names: Vec<_> = preset_names().collect();
        let mut c = preset(names[index % names.len()]).unwrap();
        c.set("loss.lambda", &lambda.to_string()).unwrap();
        c.set("loss.tau_prime", &tau_prime.to_string()).unwrap();
        c.set("batch_size", &batch.to_string()).unwrap();
        c.set("seed", &seed.to_string()).unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, c);
    }
}
