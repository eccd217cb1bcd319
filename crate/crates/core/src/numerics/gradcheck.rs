//! Central-difference gradient checking.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn check_h(h: f64) -> Result<()> {
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::invalid(format!(
            "perturbation {h} outside [1e-7, 1e-4]"
        )));
    }
    Ok(())
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compares the tape gradient of `f` at `point` against central differences.
/// Returns the largest `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_h(h)?;
    let eval = |p: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.input(p.clone());
        let y = f(&mut tape, x)?;
        let v = tape.scalar(y);
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check forward".into()));
        }
        Ok(v)
    };
    let mut tape = Tape::new();
    let x = tape.input(point.clone());
    let y = f(&mut tape, x)?;
    if !tape.scalar(y).is_finite() {
        return Err(Error::NonFinite("grad_check forward".into()));
    }
    let grads = tape.backward(y)?;
    let analytic = grads
        .wrt(x)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; point.numel()]);
    let mut worst: f64 = 0.0;
    let mut p = point.clone();
    for j in 0..point.numel() {
        let x0 = p.data[j];
        p.data[j] = x0 + h;
        let fp = eval(&p)?;
        p.data[j] = x0 - h;
        let fm = eval(&p)?;
        p.data[j] = x0;
        worst = worst.max(rel_err(analytic[j], (fp - fm) / (2.0 * h)));
    }
    Ok(worst)
}

/// Worst coordinate found by [`grad_check_params`].
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Checks `analytic` (indexed by parameter id, `None` meaning zero) against
/// central differences of `loss` over every `stride`-th coordinate of every
/// parameter.
pub fn grad_check_params<F>(
    store: &ParamStore,
    analytic: &[Option<Vec<f64>>],
    loss: F,
    h: f64,
    stride: usize,
) -> Result<ParamCheck>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    check_h(h)?;
    let mut work = store.clone();
    let mut out = ParamCheck {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };
    let stride = stride.max(1);
    let mut counter = 0usize;
    for id in store.ids() {
        let n = store.get(id).numel();
        for j in 0..n {
            counter += 1;
            if (counter - 1) % stride != 0 {
                continue;
            }
            let x0 = work.get(id).data[j];
            work.get_mut(id).data[j] = x0 + h;
            let fp = loss(&work)?;
            work.get_mut(id).data[j] = x0 - h;
            let fm = loss(&work)?;
            work.get_mut(id).data[j] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite("grad_check_params forward".into()));
            }
            let a = analytic
                .get(id.0)
                .and_then(|g| g.as_ref())
                .map_or(0.0, |g| g[j]);
            let e = rel_err(a, (fp - fm) / (2.0 * h));
            out.coords_checked += 1;
            if e > out.max_rel_err {
                out.max_rel_err = e;
                out.worst_param = store.name(ParamId(id.0)).to_string();
                out.worst_index = j;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{Purpose, RandomSource};

    #[test]
    fn sum_of_squares() {
        let e = grad_check(
            |t, x| {
                let s = t.square(x);
                Ok(t.sum(s))
            },
            &Tensor::row(vec![1.0, 2.0]),
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-8, "{e}");
    }

    #[test]
    fn rejects_bad_perturbation() {
        let r = grad_check(|t, x| Ok(t.sum(x)), &Tensor::row(vec![1.0]), 1e-2);
        assert!(r.is_err());
    }

    #[test]
    fn non_finite_forward_is_error() {
        let r = grad_check(
            |t, x| {
                let l = t.log(x);
                Ok(t.sum(l))
            },
            &Tensor::row(vec![-1.0]),
            1e-5,
        );
        assert!(r.is_err());
    }

    fn random_point(rows: usize, cols: usize, seed: u64) -> Tensor {
        let v = RandomSource::new(seed)
            .stream(Purpose::Misc, &[])
            .normals(rows * cols);
        Tensor::matrix(rows, cols, v).unwrap()
    }

    fn check(f: impl Fn(&mut Tape, Var) -> Result<Var>, seed: u64) {
        let e = grad_check(&f, &random_point(3, 4, seed), 1e-5).unwrap();
        assert!(e < 1e-5, "max rel err {e}");
    }

    // Every differentiable primitive, each reduced to a scalar through a
    // fixed random projection so no adjoint is trivially uniform.
    fn project(t: &mut Tape, y: Var) -> Result<Var> {
        let n = t.value(y).numel();
        let shape = t.shape(y).to_vec();
        let w = RandomSource::new(99).stream(Purpose::Misc, &[n as u64]).normals(n);
        let w = t.constant(Tensor::new(shape, w)?);
        let p = t.mul(y, w)?;
        Ok(t.sum(p))
    }

    #[test]
    fn primitives_pass_grad_check() {
        let other = random_point(4, 3, 7);
        let other34 = random_point(3, 4, 8);
        check(|t, x| { let b = t.constant(other.clone()); let y = t.matmul(x, b)?; project(t, y) }, 1);
        check(|t, x| { let b = t.constant(other34.clone()); let y = t.matmul_nt(x, b)?; project(t, y) }, 2);
        check(|t, x| { let y = t.matmul_nt(x, x)?; project(t, y) }, 3);
        check(|t, x| { let b = t.constant(other34.clone()); let y = t.add(x, b)?; let y = t.mul(y, x)?; project(t, y) }, 4);
        check(|t, x| { let r = t.slice(x, 0, 1, 1)?; let y = t.sub(x, r)?; project(t, y) }, 5);
        check(|t, x| { let e = t.exp(x); let d = t.offset(e, 1.0); let y = t.div(x, d)?; project(t, y) }, 6);
        check(|t, x| { let e = t.exp(x); let y = t.log(e); let y = t.tanh(y); project(t, y) }, 7);
        check(|t, x| { let y = t.softplus(x); let y = t.silu(y); project(t, y) }, 8);
        check(|t, x| { let y = t.softmax(x, None)?; project(t, y) }, 9);
        check(|t, x| { let m = [true, false, true, true, false, true, true, true, true, true, true, false]; let y = t.softmax(x, Some(&m))?; project(t, y) }, 10);
        check(|t, x| { let y = t.log_softmax(x); project(t, y) }, 11);
        check(|t, x| { let y = t.sum_axis(x, 0)?; let z = t.mean_axis(x, 1)?; let a = project(t, y)?; let b = project(t, z)?; t.add(a, b) }, 12);
        check(|t, x| { let a = t.slice(x, 1, 0, 2)?; let b = t.slice(x, 1, 2, 2)?; let y = t.concat(&[b, a], 1)?; let z = t.concat(&[y, x], 0)?; project(t, z) }, 13);
        check(|t, x| { let y = t.layer_norm(x, 1e-5); project(t, y) }, 14);
        check(|t, x| { let y = t.clamp(x, -0.5, 0.5); let y = t.mul(y, x)?; project(t, y) }, 15);
        check(|t, x| { let y = t.gather_rows(x, &[2, 0, 2])?; project(t, y) }, 16);
        check(|t, x| { let n = t.neg(x); let y = t.minimum(x, n)?; project(t, y) }, 17);
        check(|t, x| { let y = t.reshape(x, &[2, 6])?; let y = t.scale(y, 3.0); let y = t.square(y); let m = t.mean(y); let s = project(t, y)?; t.add(m, s) }, 18);
        check(|t, x| {
            let mut rng = RandomSource::new(4).stream(Purpose::Dropout, &[]);
            let y = t.dropout(x, 0.3, Some(&mut rng));
            project(t, y)
        }, 19);
    }
}
