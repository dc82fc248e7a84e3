use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use robust_value::models::{GaussianLaw, LgModel, RegimeModel, TimeSeries, UtilityGrowth};
use robust_value::numgrid::Extrap;
use robust_value::pricing::{realized_series, AffineGrowth, ANNUALIZE};
use robust_value::robust_solver::{Distortion, GridSpec, Preferences, RobustProblem, SolveOptions};

fn chain(n: usize, raw: &[f64], means: &[f64]) -> RegimeModel {
    let mut lambda = DMatrix::from_fn(n, n, |i, j| raw[i * n + j] + 0.01);
    for mut col in lambda.column_iter_mut() {
        let s = col.sum();
        col /= s;
    }
    let laws = means
        .iter()
        .map(|m| GaussianLaw::new(DVector::from_element(1, *m), DMatrix::from_element(1, 1, 1.0)).unwrap())
        .collect();
    RegimeModel::new(lambda, laws).unwrap()
}

proptest! {
    #[test]
    fn filter_keeps_beliefs_on_simplex(
        n in 2usize..6,
        raw in proptest::collection::vec(0.0f64..1.0, 25),
        means in proptest::collection::vec(-3.0f64..3.0, 5),
        obs in proptest::collection::vec(-10.0f64..10.0, 1..300),
    ) {
        let m = chain(n, &raw, &means[..n]);
        let mut xi = vec![1.0 / n as f64; n];
        for phi in obs {
            xi = m.filter_step(&xi, &[phi]).unwrap();
            prop_assert!(xi.iter().all(|p| *p >= 0.0));
            prop_assert_eq!(xi.iter().sum::<f64>(), 1.0);
        }
    }
}

#[test]
fn realized_series_from_csv_matches_gaussian_shift() {
    let p = RobustProblem::new(
        Arc::new(LgModel::scalar(0.0, 0.5, 1.0).unwrap()),
        Preferences::from_alpha(-1.0, 0.5).unwrap(),
        UtilityGrowth::affine(0.0, vec![0.0], vec![1.0]).unwrap(),
        &GridSpec {
            nodes: 61,
            extrap: Extrap::Linear,
            ..GridSpec::default()
        },
    )
    .unwrap();
    let (v, _) = p.solve_v(&SolveOptions::default()).unwrap();
    let dist = Distortion::new(&p, v).unwrap();
    let ent = dist.continuation_entropy(&SolveOptions::default().neumann).unwrap();

    let csv = "date,x\n2001q1,0.3\n2001q2,-0.4\n2001q3,1.1\n2001q4,0.0\n";
    let ts = TimeSeries::read_csv(csv.as_bytes()).unwrap();
    let mut back = Vec::new();
    ts.write_csv(&mut back).unwrap();
    assert_eq!(TimeSeries::read_csv(back.as_slice()).unwrap(), ts);

    let gc = AffineGrowth::new(0.0, vec![0.0], vec![1.0]);
    let rows = realized_series(&dist, &ent.gamma, &gc, &ts.dates, &ts.rows, p.rule()).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].date, "2001q1");
    // worst case shifts the next-state mean by (b + alpha) sigma^2 = -4/3
    let shift: f64 = -4.0 / 3.0;
    for (r, w) in rows.iter().zip(ts.rows.windows(2)) {
        let log_m = shift * (w[1][0] - 0.5 * w[0][0]) - 0.5 * shift * shift;
        assert!((r.m.ln() - log_m).abs() < 1e-6, "{} vs {log_m}", r.m.ln());
        assert!((r.spread_pct_pa + shift * ANNUALIZE).abs() < 1e-5);
        assert_eq!(r.weight_entropy, 0.0);
        assert!((r.gamma - 8.0 / 9.0).abs() < 1e-6);
    }
}
