use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

/// Variance substituted for a sample set with no spread.
const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// `P(T_df > t)`: the probability that `a` does not outperform `b`.
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Upper tail of Student's t with `df` degrees of freedom.
pub fn student_t_sf(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 0.0 } else { 1.0 };
    }
    let tail = 0.5 * beta_reg(df / 2.0, 0.5, df / (df + t * t));
    if t >= 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// One-sided Welch test of `H0: mean(a) <= mean(b)`.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Stats(format!(
            "Welch's test needs at least two samples per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Stats("samples must be finite".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if va == 0.0 && vb == 0.0 && ma == mb {
        let df = (a.len() + b.len() - 2) as f64;
        return Ok(WelchResult { t: 0.0, df, p: 0.5 });
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let sa = va.max(VARIANCE_FLOOR) / na;
    let sb = vb.max(VARIANCE_FLOOR) / nb;
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(WelchResult { t, df, p: student_t_sf(t, df) })
}

#[cfg(test)]
mod tests {
    use super::*;

    // (a, b, t, df, p) from an independent statistics package.
    #[allow(clippy::type_complexity)]
    const REFERENCE: [(&[f64], &[f64], f64, f64, f64); 5] = [
        (&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0], -1.0, 8.0, 0.8267032464563329),
        (
            &[10.5, 12.1, 9.8, 11.4, 13.0],
            &[8.2, 9.9, 10.1, 7.5, 9.0],
            3.2189504340194093,
            7.857920792809849,
            0.00627716050456427,
        ),
        (
            &[-300.2, -280.5, -350.1, -310.0, -295.7],
            &[-420.3, -390.8, -505.2, -460.0, -399.9],
            5.290384266243837,
            6.239938155912886,
            0.0008169930030452172,
        ),
        (
            &[0.1, 0.4, 0.35, 0.2],
            &[0.3, 0.1, 0.25, 0.15, 0.4, 0.22],
            0.3167721192680597,
            5.3820685408681515,
            0.38166927146223123,
        ),
        (
            &[5.0, 5.5],
            &[1.0, 9.0, 3.0, 7.0, 2.0, 8.0],
            0.1769611259104872,
            5.3008026023352635,
            0.43305173101267863,
        ),
    ];

    #[test]
    fn matches_reference_values() {
        for (a, b, t, df, p) in REFERENCE {
            let r = welch_t_test(a, b).unwrap();
            assert!((r.t - t).abs() < 1e-9, "{r:?}");
            assert!((r.df - df).abs() < 1e-9, "{r:?}");
            assert!((r.p - p).abs() < 1e-6, "{r:?}");
        }
    }

    #[test]
    fn identical_sets_give_half() {
        let a = [3.0, 1.0, 4.0, 1.0, 5.0];
        let r = welch_t_test(&a, &a).unwrap();
        assert_eq!((r.t, r.p), (0.0, 0.5));
        let c = [2.0, 2.0, 2.0];
        assert_eq!(welch_t_test(&c, &c).unwrap().p, 0.5);
    }

    #[test]
    fn degenerate_second_set_uses_the_floor() {
        let r = welch_t_test(&[0.0, 2.0], &[0.0, 0.0]).unwrap();
        assert!((r.t - 1.0).abs() < 1e-9 && r.p < 0.5, "{r:?}");
        let r = welch_t_test(&[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!(r.t > 1e5 && r.p < 1e-9, "{r:?}");
    }

    #[test]
    fn antisymmetric() {
        let (a, b) = ([1.0, 2.5, 3.1, 0.2], [0.5, 0.9, 1.7]);
        let s = welch_t_test(&a, &b).unwrap().p + welch_t_test(&b, &a).unwrap().p;
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn undersized_samples_are_errors() {
        assert!(matches!(welch_t_test(&[1.0], &[1.0, 2.0]), Err(Error::Stats(_))));
    }

    #[test]
    fn disjoint_five_seed_sets_are_significant() {
        let a = [-150.0, -160.0, -140.0, -155.0, -148.0];
        let b = [-400.0, -380.0, -420.0, -395.0, -410.0];
        assert!(welch_t_test(&a, &b).unwrap().p < 0.01);
    }
}
