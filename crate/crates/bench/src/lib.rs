//! Representative inputs for the benchmarks, one per blow-up regime.

use rep_core::{validate, RepParams, SpectralInitialData};

pub type Data = (RepParams, SpectralInitialData);

/// `(label, data)` for cases I, IIa, IIb, IIc and III.
pub fn regimes() -> Vec<(&'static str, Data)> {
    let d = |n, k, c_b, rho0, l: &[f64]| validate(n, k, c_b, rho0, l).expect("valid data");
    vec![
        ("I", d(2, 1.0, 1.0, 1.0, &[-3.0, 0.0])),
        ("IIa", d(5, 1.0, 1.0, 1.0, &[-2.0, -2.0, 0.0, 0.5, 1.0])),
        ("IIb", d(4, 4.0, 1.0, 0.5, &[-1.0, -1.0, 1.0, 1.0])),
        ("IIc", d(4, 4.0, 1.0, 1.0, &[-1.0, -1.0, 1.0, 1.0])),
        (
            "III",
            d(7, 1.0, 1.0, 1.0, &[-2.0, -2.0, -2.0, 0.0, 0.5, 1.0, 1.5]),
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rep_core::{classify, CaseLabel};

    #[test]
    fn regimes_are_labelled_as_named() {
        let want = [
            CaseLabel::I,
            CaseLabel::IIa,
            CaseLabel::IIb,
            CaseLabel::IIc,
            CaseLabel::III,
        ];
        for ((label, (p, i)), case) in regimes().iter().zip(want) {
            assert_eq!(classify(p, i).case_label, Some(case), "{label}");
        }
    }
}
