//! Built-in consistency checks run by `radpos selftest`.

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fusion::{combine_with_radiologist, ConfusionCounts, Level, Source};
use crate::metrics::{interpolate_at_sensitivity, OperatingPoint, SweepCurve};

type Q = Ratio<i128>;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn q(n: u64, d: u64) -> Q {
    Q::new(n as i128, d as i128)
}

/// Draws radiologist counts with `tp, fp >= 1` and a compatible ML split.
pub fn random_tabulation(rng: &mut ChaCha8Rng) -> (ConfusionCounts, ConfusionCounts) {
    let rad = ConfusionCounts::new(Source::Rad, Level::Patient).with_counts(
        rng.random_range(1..2000),
        rng.random_range(1..2000),
        rng.random_range(0..2000),
        rng.random_range(0..2000),
    );
    let ptp = rng.random_range(0..=rad.tp);
    let ptn = rng.random_range(0..=rad.fp);
    let ml = ConfusionCounts::new(Source::MlOnPositives, Level::Patient).with_counts(
        ptp,
        rad.fp - ptn,
        ptn,
        rad.tp - ptp,
    );
    (rad, ml)
}

/// Checks `sen' = sen·⁺sen` and `spc' = spc + (1−spc)·⁺spc` exactly.
pub fn fusion_identities(n: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let (rad, ml) = random_tabulation(&mut rng);
        let c = match combine_with_radiologist(&rad, &ml) {
            Ok(c) => c,
            Err(e) => {
                return Check {
                    name: "fusion-identities",
                    passed: false,
                    detail: format!("tabulation {i}: {e}"),
                }
            }
        };
        let sen = q(rad.tp, rad.tp + rad.fn_);
        let spc = q(rad.tn, rad.tn + rad.fp);
        let psen = q(ml.tp, ml.tp + ml.fn_);
        let pspc = q(ml.tn, ml.tn + ml.fp);
        let csen = q(c.tp, c.tp + c.fn_);
        let cspc = q(c.tn, c.tn + c.fp);
        let one = Q::from_integer(1);
        if csen != sen * psen || cspc != spc + (one - spc) * pspc {
            return Check {
                name: "fusion-identities",
                passed: false,
                detail: format!("tabulation {i}: rad {:?} ml {:?}", rad.as_array(), ml.as_array()),
            };
        }
    }
    Check {
        name: "fusion-identities",
        passed: true,
        detail: format!("{n} tabulations exact"),
    }
}

fn interpolation(name: &'static str, a: (f64, f64), b: (f64, f64), expected: f64) -> Check {
    let curve = SweepCurve::new(
        Level::Patient,
        Source::Rad,
        vec![
            OperatingPoint::new(0.0, a.0 / 100.0, a.1 / 100.0),
            OperatingPoint::new(1.0, b.0 / 100.0, b.1 / 100.0),
        ],
    );
    match interpolate_at_sensitivity(&curve, 0.8) {
        Ok(v) => Check {
            name,
            passed: (v * 100.0 - expected).abs() <= 0.02,
            detail: format!("{:.4}% (expected {expected}% ± 0.02)", v * 100.0),
        },
        Err(e) => Check {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

pub fn run_all() -> Vec<Check> {
    vec![
        fusion_identities(1000, 0x5eed),
        interpolation("interpolation-rad", (92.19, 7.84), (65.47, 70.30), 36.33),
        interpolation("interpolation-t2", (83.85, 42.86), (78.88, 41.73), 41.98),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_all() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
