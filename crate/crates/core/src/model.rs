//! Domain types for the restricted Euler-Poisson spectral system and the
//! classification rules that depend only on the initial data.

use serde::Serialize;

use crate::error::{Error, Result};

/// Physical parameters of the system: dimension `n`, force constant `k`,
/// background state `c_b`, and the derived frequency `omega = sqrt(k c_b / n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RepParams {
    n: usize,
    k: f64,
    c_b: f64,
    omega: f64,
}

impl RepParams {
    pub fn new(n: usize, k: f64, c_b: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::DimensionTooSmall(n));
        }
        check_positive("k", k)?;
        check_positive("c_b", c_b)?;
        let omega = (k * c_b / n as f64).sqrt();
        Ok(Self { n, k, c_b, omega })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn c_b(&self) -> f64 {
        self.c_b
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    /// `k / n`, the coupling in front of `(rho - c_b)`.
    pub fn coupling(&self) -> f64 {
        self.k / self.n as f64
    }
}

fn check_positive(name: &'static str, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::NonFiniteInput(name));
    }
    if value <= 0.0 {
        return Err(Error::NonPositiveParameter { name, value });
    }
    Ok(())
}

/// A run of equal initial eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Group {
    pub value: f64,
    pub multiplicity: usize,
    /// Index of the first member in the sorted eigenvalue vector.
    pub first: usize,
}

/// Initial density and sorted initial eigenvalues with the multiplicity `J`
/// of the minimum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralInitialData {
    rho0: f64,
    lambda0: Vec<f64>,
    #[serde(rename = "J")]
    j: usize,
}

impl SpectralInitialData {
    /// Sorts `lambda0` ascending and recomputes `J`.
    pub fn new(rho0: f64, mut lambda0: Vec<f64>) -> Result<Self> {
        check_positive("rho0", rho0)?;
        if lambda0.len() < 2 {
            return Err(Error::DimensionTooSmall(lambda0.len()));
        }
        if lambda0.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput("lambda0"));
        }
        lambda0.sort_by(f64::total_cmp);
        // -0.0 and 0.0 compare equal but must share one bit pattern so that
        // grouped states stay bitwise identical.
        for x in &mut lambda0 {
            if *x == 0.0 {
                *x = 0.0;
            }
        }
        let j = compute_j(&lambda0);
        Ok(Self { rho0, lambda0, j })
    }

    /// Builds from already-sorted data and checks the stored multiplicity.
    pub fn from_parts(rho0: f64, lambda0: Vec<f64>, j: usize) -> Result<Self> {
        if lambda0.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Unsorted);
        }
        let data = Self::new(rho0, lambda0)?;
        if data.j != j {
            return Err(Error::MultiplicityMismatch {
                stored: j,
                computed: data.j,
            });
        }
        Ok(data)
    }

    pub fn rho0(&self) -> f64 {
        self.rho0
    }

    pub fn lambda0(&self) -> &[f64] {
        &self.lambda0
    }

    pub fn n(&self) -> usize {
        self.lambda0.len()
    }

    pub fn j(&self) -> usize {
        self.j
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda0[0]
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda0[self.lambda0.len() - 1]
    }

    /// `lambda_{n,0} - lambda_{1,0}`.
    pub fn spread(&self) -> f64 {
        self.lambda_max() - self.lambda_min()
    }

    pub fn all_equal(&self) -> bool {
        self.j == self.lambda0.len()
    }

    /// Runs of exactly equal eigenvalues, in ascending order.
    pub fn groups(&self) -> Vec<Group> {
        let mut groups: Vec<Group> = Vec::new();
        for (i, &x) in self.lambda0.iter().enumerate() {
            match groups.last_mut() {
                Some(g) if g.value == x => g.multiplicity += 1,
                _ => groups.push(Group {
                    value: x,
                    multiplicity: 1,
                    first: i,
                }),
            }
        }
        groups
    }

    /// `(lambda_{1,0} - lambda_{3,0})(lambda_{1,0} - lambda_{4,0})`, defined for `n = 4`.
    pub fn a0(&self) -> Option<f64> {
        (self.n() == 4).then(|| {
            let l = &self.lambda0;
            (l[0] - l[2]) * (l[0] - l[3])
        })
    }
}

/// Number of entries exactly equal to the minimum of a sorted vector.
pub fn compute_j(sorted: &[f64]) -> usize {
    match sorted.first() {
        None => 0,
        Some(&first) => sorted.iter().take_while(|&&x| x == first).count(),
    }
}

/// Checks raw inputs and returns the validated parameter/data pair.
pub fn validate(
    n: usize,
    k: f64,
    c_b: f64,
    rho0: f64,
    lambda0: &[f64],
) -> Result<(RepParams, SpectralInitialData)> {
    if !k.is_finite() {
        return Err(Error::NonFiniteInput("k"));
    }
    if !c_b.is_finite() {
        return Err(Error::NonFiniteInput("c_b"));
    }
    if !rho0.is_finite() {
        return Err(Error::NonFiniteInput("rho0"));
    }
    let params = RepParams::new(n, k, c_b)?;
    if lambda0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: lambda0.len(),
        });
    }
    let init = SpectralInitialData::new(rho0, lambda0.to_vec())?;
    Ok((params, init))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    GlobalBounded,
    BlowupPossible,
}

/// Which rule produced the verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Rule {
    /// `J > n/2`.
    #[serde(rename = "J>n/2")]
    MultiplicityAboveHalf,
    /// `J >= 3` and `J = n/2`.
    #[serde(rename = "J>=3,J=n/2")]
    MultiplicityHalfAtLeastThree,
    /// All initial eigenvalues coincide; the system reduces to a scalar Riccati equation.
    #[serde(rename = "degenerate-all-equal")]
    AllEqual,
    /// Necessary conditions for blow-up hold; the theory does not decide sufficiency.
    #[serde(rename = "unresolved-by-theory")]
    UnresolvedByTheory,
    /// `n = 4`, `J = 2`, `A0 < k rho0`: no blow-up case applies, but global
    /// boundedness is not established either.
    #[serde(rename = "IIb-excluded")]
    IIbExcluded,
}

/// Blow-up rate regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum CaseLabel {
    I,
    IIa,
    IIb,
    IIc,
    III,
}

impl CaseLabel {
    /// True for the regimes with first-order poles in every eigenvalue.
    pub fn first_order_poles(self) -> bool {
        !matches!(self, CaseLabel::IIc)
    }
}

impl std::fmt::Display for CaseLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CaseLabel::I => "I",
            CaseLabel::IIa => "IIa",
            CaseLabel::IIb => "IIb",
            CaseLabel::IIc => "IIc",
            CaseLabel::III => "III",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Classification {
    pub verdict: Verdict,
    pub reason: Rule,
    #[serde(rename = "caseLabel")]
    pub case_label: Option<CaseLabel>,
    #[serde(rename = "A0")]
    pub a0: Option<f64>,
}

/// Relative slack for the `A0 = k rho0` surface: a handful of ulps, so data
/// built on the surface by arithmetic is recognised.
const A0_SURFACE_RTOL: f64 = 1e-12;

/// Classifies validated initial data by the global-existence and
/// necessary-blow-up rules.
pub fn classify(params: &RepParams, init: &SpectralInitialData) -> Classification {
    let n = init.n();
    let j = init.j();
    let a0 = (n == 4 && j == 2).then(|| init.a0()).flatten();
    let global = |reason| Classification {
        verdict: Verdict::GlobalBounded,
        reason,
        case_label: None,
        a0,
    };
    if j == n {
        return global(Rule::AllEqual);
    }
    if 2 * j > n {
        return global(Rule::MultiplicityAboveHalf);
    }
    if j >= 3 && 2 * j == n {
        return global(Rule::MultiplicityHalfAtLeastThree);
    }
    let possible = |case| Classification {
        verdict: Verdict::BlowupPossible,
        reason: Rule::UnresolvedByTheory,
        case_label: Some(case),
        a0,
    };
    match j {
        1 => possible(CaseLabel::I),
        2 if n >= 5 => possible(CaseLabel::IIa),
        2 => {
            let a0v = a0.expect("n = 4 and J = 2");
            let krho = params.k() * init.rho0();
            if (a0v - krho).abs() <= A0_SURFACE_RTOL * a0v.abs().max(krho) {
                possible(CaseLabel::IIc)
            } else if a0v > krho {
                possible(CaseLabel::IIb)
            } else {
                Classification {
                    verdict: Verdict::BlowupPossible,
                    reason: Rule::IIbExcluded,
                    case_label: None,
                    a0,
                }
            }
        }
        _ => possible(CaseLabel::III),
    }
}
