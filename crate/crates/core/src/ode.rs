use nalgebra::DVector;

use crate::error::Result;

/// One classical fourth-order Runge–Kutta step of size `h`.
pub fn rk4_step<F>(f: &mut F, t: f64, y: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    Ok(y + rk4_increment(f, t, y, h)?)
}

/// The increment `y(t + h) - y(t)` of a classical RK4 step, kept separate so
/// callers can add it with compensated summation.
pub fn rk4_increment<F>(f: &mut F, t: f64, y: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let half = 0.5 * h;
    let k1 = f(t, y)?;
    let k2 = f(t + half, &(y + &k1 * half))?;
    let k3 = f(t + half, &(y + &k2 * half))?;
    let k4 = f(t + h, &(y + &k3 * h))?;
    Ok((k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0))
}

/// Integrating-factor (Lawson) RK4 step for `y' = -A y + N(t, y)` with a
/// constant PSD `A`, written in terms of the full right-hand side
/// `f(t, y) = -A y + N(t, y)`.
///
/// `apply_a` applies `A` and `apply_half_exp` applies `e^{-A h/2}`. The step
/// is fourth order for smooth `N` and stays stable however large `A` is, since
/// only decaying exponentials appear. With `A = 0` it is classical RK4.
pub fn lawson_rk4_step<F, L, E>(
    f: &mut F,
    apply_a: &L,
    apply_half_exp: &E,
    t: f64,
    y: &DVector<f64>,
    h: f64,
) -> Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
    L: Fn(&DVector<f64>) -> DVector<f64>,
    E: Fn(&DVector<f64>) -> DVector<f64>,
{
    let (base, delta) = lawson_rk4_parts(f, apply_a, apply_half_exp, t, y, h)?;
    Ok(base + delta)
}

/// [`lawson_rk4_step`] split as `(e^{-Ah} y, rest)` for a linear
/// `apply_half_exp`. Components the exponential leaves alone get `base = y`
/// exactly, so the split suits compensated summation.
pub fn lawson_rk4_parts<F, L, E>(
    f: &mut F,
    apply_a: &L,
    apply_half_exp: &E,
    t: f64,
    y: &DVector<f64>,
    h: f64,
) -> Result<(DVector<f64>, DVector<f64>)>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
    L: Fn(&DVector<f64>) -> DVector<f64>,
    E: Fn(&DVector<f64>) -> DVector<f64>,
{
    let half = 0.5 * h;
    let mut n = |t: f64, y: &DVector<f64>| -> Result<DVector<f64>> { Ok(f(t, y)? + apply_a(y)) };
    let ey = apply_half_exp(y);
    let k1 = n(t, y)?;
    let y2 = apply_half_exp(&(y + &k1 * half));
    let k2 = n(t + half, &y2)?;
    let y3 = &ey + &k2 * half;
    let k3 = n(t + half, &y3)?;
    let y4 = apply_half_exp(&(&ey + &k3 * h));
    let k4 = n(t + h, &y4)?;
    let base = apply_half_exp(&ey);
    let inner = apply_half_exp(&(k1 * (h / 6.0))) + (k2 + k3) * (h / 3.0);
    Ok((base, apply_half_exp(&inner) + k4 * (h / 6.0)))
}

/// Kahan-compensated `sum += delta`; `carry` holds the running low-order
/// error and starts at zero.
pub fn compensated_add(sum: &mut DVector<f64>, carry: &mut DVector<f64>, delta: &DVector<f64>) {
    for ((s, c), &d) in sum.iter_mut().zip(carry.iter_mut()).zip(delta.iter()) {
        let y = d - *c;
        let t = *s + y;
        *c = (t - *s) - y;
        *s = t;
    }
}
