use critscore::io::format_number;
use critscore::models::lmm::{LmmData, LmmGroup, LmmModel};
use critscore::models::toy::{toy_simulate, toy_statistic_closed_form, ToyModel};
use critscore::region::region_from_fn;
use critscore::{chisq_cdf, chisq_quantile, invert_region, modified_statistic, schur_complement, Formula, StatOptions};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn spd(dim: usize, entries: &[f64]) -> DMatrix<f64> {
    let a = DMatrix::from_iterator(dim, dim, entries.iter().copied());
    &a * a.transpose() + DMatrix::identity(dim, dim) * 0.5
}

fn lmm_data(ys: &[f64], slope_scale: f64) -> LmmData {
    let groups = ys
        .chunks(4)
        .map(|c| {
            let x = DMatrix::from_fn(4, 2, |t, k| if k == 0 { 1.0 } else { slope_scale * t as f64 });
            LmmGroup::new(DVector::from_column_slice(c), x.clone(), x).unwrap()
        })
        .collect();
    LmmData::new(groups, vec![0, 1]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schur_complement_is_inverse_of_inverse_block(entries in prop::collection::vec(-2.0f64..2.0, 25), k in 1usize..5) {
        let m = spd(5, &entries);
        let keep: Vec<usize> = (0..k).collect();
        let s = schur_complement(&m, &keep).unwrap();
        let inv = m.clone().try_inverse().unwrap();
        let block = inv.view((0, 0), (k, k)).into_owned().try_inverse().unwrap();
        prop_assert!((s - &block).abs().max() <= 1e-8 * block.abs().max().max(1.0));
    }

    #[test]
    fn nested_schur_complements_compose(entries in prop::collection::vec(-2.0f64..2.0, 25)) {
        let m = spd(5, &entries);
        let once = schur_complement(&m, &[1, 3]).unwrap();
        let outer = schur_complement(&m, &[1, 3, 4]).unwrap();
        let twice = schur_complement(&outer, &[0, 1]).unwrap();
        prop_assert!((once - twice).abs().max() <= 1e-8 * m.abs().max());
    }

    #[test]
    fn chi_square_cdf_and_quantile_are_dual(df in 1usize..30, p in 1e-6f64..(1.0 - 1e-6)) {
        let q = chisq_quantile(df, p).unwrap();
        prop_assert!((chisq_cdf(df, q).unwrap() - p).abs() < 1e-9);
    }

    #[test]
    fn toy_generic_matches_closed_form(theta in 0.0f64..3.0, seed in 0u64..1000, r in 1usize..5) {
        let data = toy_simulate(0.5, 30, r, seed).unwrap();
        let a = modified_statistic(&ToyModel, &ToyModel::theta(theta).unwrap(), &data).unwrap().statistic;
        let b = toy_statistic_closed_form(theta, &data).unwrap();
        prop_assert!((a - b).abs() <= 1e-8 * a.abs().max(b.abs()).max(1.0));
    }

    #[test]
    fn region_levels_are_nested(offset in -3.0f64..3.0, width in 0.2f64..4.0) {
        let axes = vec![(0..21).map(|i| i as f64 * 0.5 - 5.0).collect::<Vec<_>>()];
        let grid = region_from_fn(axes, 1, &[0.5, 0.8, 0.95, 0.99], |p| Ok(((p[0] - offset) / width).powi(2))).unwrap();
        for i in 0..grid.len() {
            for l in 1..grid.levels.len() {
                prop_assert!(!grid.membership[l - 1][i] || grid.membership[l][i]);
            }
        }
    }

    #[test]
    fn lmm_statistic_is_invariant_to_rescaling_a_fixed_effect(ys in prop::collection::vec(-3.0f64..3.0, 24), c in 0.2f64..5.0, l1 in 0.0f64..0.8) {
        let model = LmmModel::known_sigma(1.0);
        let base = lmm_data(&ys, 1.0);
        // scaling the slope column by c rescales ψ₂ by 1/c and λ₂ by 1/c
        let scaled = lmm_data(&ys, c);
        let a = modified_statistic(&model, &model.theta(&[l1, 0.3], &[0.2, 0.4], 1.0).unwrap(), &base).unwrap().statistic;
        let b = modified_statistic(&model, &model.theta(&[l1, 0.3 / c], &[0.2, 0.4 / c], 1.0).unwrap(), &scaled).unwrap().statistic;
        prop_assert!((a - b).abs() <= 1e-7 * a.max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn numbers_round_trip_through_text(bits in any::<u64>()) {
        let v = f64::from_bits(bits);
        prop_assume!(v.is_finite());
        let back: f64 = format_number(v).parse().unwrap();
        prop_assert_eq!(back.to_bits(), v.to_bits());
    }

    #[test]
    fn formula_display_round_trips(slope in prop::bool::ANY, tie in prop::bool::ANY) {
        let text = match (slope, tie) {
            (true, true) => "y ~ 1 + x | re(1):a + re(x):a",
            (true, false) => "y ~ 1 + x | re(1) + re(x)",
            (false, _) => "y ~ 1 + x | re(1)",
        };
        let f = Formula::parse(text).unwrap();
        prop_assert_eq!(Formula::parse(&f.to_string()).unwrap(), f);
    }
}

#[test]
fn toy_region_matches_analytic_inversion() {
    let data = toy_simulate(0.6, 200, 2, 3).unwrap();
    let axis: Vec<f64> = (0..60).map(|i| i as f64 * 0.02).collect();
    let grid = invert_region(&ToyModel, &data, &ToyModel::theta(0.0).unwrap(), &[0], vec![axis.clone()], &[0.95], &StatOptions::default()).unwrap();
    let crit = chisq_quantile(1, 0.95).unwrap();
    for (i, &t) in axis.iter().enumerate() {
        let inside = toy_statistic_closed_form(t, &data).unwrap() <= crit;
        assert_eq!(grid.membership[0][i], inside, "theta {t}");
    }
}
