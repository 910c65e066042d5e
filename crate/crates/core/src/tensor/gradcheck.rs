use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares tape gradients of a scalar function against central differences.
///
/// Returns the maximum over coordinates of
/// `|analytic - fd| / (|analytic| + |fd| + 1e-8)`.
pub fn gradient_check<F>(f: F, point: &Tensor, h: f32) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: &Tensor, track: bool| -> Result<(Tape, Var, Var)> {
        let mut tape = Tape::new();
        let mut t = t.clone();
        t.requires_grad = track;
        let x = tape.leaf(t);
        let y = f(&mut tape, x)?;
        if !tape.value(y).is_scalar() {
            return Err(Error::Contract(format!(
                "gradient_check needs a scalar function, got shape {:?}",
                tape.shape(y)
            )));
        }
        Ok((tape, x, y))
    };

    let (tape, x, y) = eval(point, true)?;
    let analytic = tape
        .backward(y)?
        .wrt(x)
        .map(<[f32]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let (tp, _, yp) = eval(&probe, false)?;
        let fp = tp.value(yp).data()[0] as f64;
        probe.data_mut()[i] = orig - h;
        let (tm, _, ym) = eval(&probe, false)?;
        let fm = tm.value(ym).data()[0] as f64;
        probe.data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * h as f64);
        let a = analytic[i] as f64;
        let err = (a - fd).abs() / (a.abs() + fd.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        // A dyadic step keeps every f32 evaluation exact for a quadratic.
        let p = Tensor::from_slice(&[1.0, 2.0, 3.0]);
        let err = gradient_check(
            |t, x| {
                let s = t.square(x)?;
                t.sum(s)
            },
            &p,
            1.0 / 64.0,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_scalar_function_rejected() {
        let p = Tensor::from_slice(&[1.0, 2.0]);
        let r = gradient_check(|t, x| t.square(x), &p, 1e-3);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
