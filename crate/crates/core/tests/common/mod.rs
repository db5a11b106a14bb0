//! Random initial data shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rep_core::integrate::StepControl;
use rep_core::{validate, RepParams, SpectralInitialData};

pub use rand::SeedableRng;

pub type Data = (RepParams, SpectralInitialData);

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `J` copies of a minimum followed by `n - J` strictly larger values.
fn spectrum(rng: &mut ChaCha8Rng, n: usize, j: usize, lo: f64, hi: f64) -> Vec<f64> {
    let m = rng.gen_range(lo..hi);
    let mut l = vec![m; j];
    l.extend((j..n).map(|_| m + rng.gen_range(0.2..3.0)));
    l
}

/// Blow-up data cycling through the regimes: `J = 1`; `J = 2`, `n >= 5`;
/// `n = 4`, `J = 2` above the double-pole surface; `J = 3`, `n >= 7`.
pub fn blowup_data(rng: &mut ChaCha8Rng, index: usize) -> Data {
    let k = rng.gen_range(0.5..4.0);
    let c_b = rng.gen_range(0.5..2.0);
    let (n, j) = match index % 4 {
        0 => (rng.gen_range(2..=6), 1),
        1 => (rng.gen_range(5..=6), 2),
        2 => (4, 2),
        _ => (rng.gen_range(7..=8), 3),
    };
    let l = spectrum(rng, n, j, -3.0, 0.0);
    let rho0 = if index % 4 == 2 {
        let a0 = (l[0] - l[2]) * (l[0] - l[3]);
        a0 / (k * rng.gen_range(1.2..4.0))
    } else {
        rng.gen_range(0.2..2.0)
    };
    validate(n, k, c_b, rho0, &l).expect("sampled data are valid")
}

/// Data with `J > n/2` for `n` in 3..=5.
pub fn majority_data(rng: &mut ChaCha8Rng) -> Data {
    let n = rng.gen_range(3..=5);
    let j = rng.gen_range(n / 2 + 1..=n);
    let l = spectrum(rng, n, j, -3.0, 1.0);
    let (k, c_b, rho0) = (
        rng.gen_range(0.5..4.0),
        rng.gen_range(0.5..2.0),
        rng.gen_range(0.2..2.0),
    );
    validate(n, k, c_b, rho0, &l).expect("sampled data are valid")
}

/// Data with `J = n/2 >= 3` for `n` in {6, 8}.
pub fn half_data(rng: &mut ChaCha8Rng) -> Data {
    let n = if rng.gen_bool(0.5) { 6 } else { 8 };
    let l = spectrum(rng, n, n / 2, -3.0, 1.0);
    let (k, c_b, rho0) = (
        rng.gen_range(0.5..4.0),
        rng.gen_range(0.5..2.0),
        rng.gen_range(0.2..2.0),
    );
    validate(n, k, c_b, rho0, &l).expect("sampled data are valid")
}

/// `max |a - b| / max(1, |b|)`
pub fn mixed_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs() / y.abs().max(1.0)))
}

/// Control for runs expected to stay global. Near-collisions, where `u_1`
/// nearly reaches zero and turns back, push `|lambda_1|` past the default
/// escape threshold before the turn.
pub fn global_control() -> StepControl {
    StepControl {
        lambda_escape: 1e15,
        ..StepControl::default()
    }
}
