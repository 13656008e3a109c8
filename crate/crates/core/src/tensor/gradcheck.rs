//! Central-difference gradient oracle used by the test suites.

use super::{ParamStore, Result, Tape, Tensor, Var};

/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-6)`.
/// The floor keeps round-off on gradients that are zero in exact
/// arithmetic from counting as a mismatch.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-6)
}

/// Largest relative error between the tape gradient of `f` at `x` and
/// central differences with step `eps`. `f` must build a scalar on the tape.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.input(point);
        let out = f(&mut tape, xv)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let zeros = vec![0.0; x.numel()];
    let analytic = grads.get(xv).unwrap_or(&zeros).to_vec();

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.to_vec();
        plus[i] += eps;
        let mut minus = x.to_vec();
        minus[i] -= eps;
        let fp = eval(Tensor::new(x.shape().to_vec(), plus)?)?;
        let fm = eval(Tensor::new(x.shape().to_vec(), minus)?)?;
        let numeric = (fp - fm) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Same check with respect to every parameter in `store`. At most
/// `max_coords_per_param` evenly spaced coordinates of each tensor are probed.
pub fn finite_diff_check_params<F>(
    f: F,
    store: &ParamStore,
    eps: f64,
    max_coords_per_param: usize,
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let analytic = tape.param_gradients(&grads, store);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let o = f(&mut t, s)?;
        Ok(t.value(o).data()[0])
    };

    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for id in store.ids() {
        let base = store.get(id).clone();
        let n = base.numel();
        let stride = n.div_ceil(max_coords_per_param.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let mut plus = base.to_vec();
            plus[i] += eps;
            probe.set(id, Tensor::new(base.shape().to_vec(), plus)?)?;
            let fp = eval(&probe)?;
            let mut minus = base.to_vec();
            minus[i] -= eps;
            probe.set(id, Tensor::new(base.shape().to_vec(), minus)?)?;
            let fm = eval(&probe)?;
            probe.set(id, base.clone())?;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[id.index()].data()[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = finite_diff_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");

        let mut tape = Tape::new();
        let v = tape.input(x);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let err = finite_diff_check(|t, _| Ok(t.input(Tensor::scalar(4.2))), &x, 1e-5).unwrap();
        assert!(err < 1e-12);
    }
}
