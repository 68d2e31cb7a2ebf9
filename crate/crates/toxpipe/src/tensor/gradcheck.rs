//! Finite-difference gradient checking utilities.
//!
//! These helpers re-evaluate a scalar-valued forward function under central
//! perturbations of registry parameters and never touch the reverse-mode
//! path, so they stay an independent oracle for it.

use super::registry::ParamRegistry;

/// Relative error with the conventional guarded denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Central finite differences of `f` with respect to every element of
/// parameter `index`: `(f(x + h) - f(x - h)) / (2h)` per element. The
/// parameter is restored bit-exactly afterwards.
pub fn finite_difference_grads<E, F>(
    registry: &mut ParamRegistry,
    index: usize,
    h: f64,
    mut f: F,
) -> Result<Vec<f64>, E>
where
    F: FnMut(&ParamRegistry) -> Result<f64, E>,
{
    let len = registry.values(index).len();
    let mut grads = Vec::with_capacity(len);
    for i in 0..len {
        let original = registry.values(index)[i];
        registry.values_mut(index)[i] = original + h;
        let plus = f(registry)?;
        registry.values_mut(index)[i] = original - h;
        let minus = f(registry)?;
        registry.values_mut(index)[i] = original;
        grads.push((plus - minus) / (2.0 * h));
    }
    Ok(grads)
}

/// Largest relative error between analytic and central-difference gradients
/// over every element of every parameter. `h` is the perturbation step.
pub fn max_relative_error<E, F>(
    registry: &mut ParamRegistry,
    analytic: &[Vec<f64>],
    h: f64,
    mut f: F,
) -> Result<f64, E>
where
    F: FnMut(&ParamRegistry) -> Result<f64, E>,
{
    assert_eq!(analytic.len(), registry.len());
    let mut worst = 0.0f64;
    for (index, expected) in analytic.iter().enumerate() {
        let numeric = finite_difference_grads(registry, index, h, &mut f)?;
        assert_eq!(numeric.len(), expected.len());
        for (&a, &n) in expected.iter().zip(&numeric) {
            worst = worst.max(relative_error(a, n));
        }
    }
    Ok(worst)
}
