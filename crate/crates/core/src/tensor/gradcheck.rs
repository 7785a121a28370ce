use super::{Tape, Tensor, TensorError, Var};

/// Magnitude below which a gradient entry is compared in absolute rather
/// than relative terms. Central differences on O(1) losses carry roughly
/// 1e-11 of rounding noise at h = 1e-5, so smaller gradients cannot be
/// resolved relatively.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradFailure {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
    /// Coordinates whose relative error exceeded the tolerance.
    pub failures: Vec<GradFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

fn eval<F, E>(f: &F, params: &[Tensor]) -> std::result::Result<(Tape, Vec<Var>, Var), E>
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("objective must be scalar, got {:?}", tape.shape(out)),
        }
        .into());
    }
    Ok((tape, vars, out))
}

/// Compares tape gradients of the scalar `f` against central differences
/// `(f(θ+h) − f(θ−h)) / 2h`, coordinate by coordinate over every parameter.
pub fn grad_check<F, E>(f: F, params: &[Tensor], h: f64, tol: f64) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    if !(h > 0.0) {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("step must be positive, got {h}"),
        }
        .into());
    }
    let (tape, vars, out) = eval(&f, params)?;
    let grads = tape.backward(out).map_err(E::from)?;
    drop(tape);

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coordinates: 0,
        failures: Vec::new(),
    };
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, params[pi].shape());
        for i in 0..params[pi].numel() {
            let orig = params[pi].data()[i];
            work[pi].data_mut()[i] = orig + h;
            let plus = {
                let (t, _, o) = eval(&f, &work)?;
                t.value(o).item()
            };
            work[pi].data_mut()[i] = orig - h;
            let minus = {
                let (t, _, o) = eval(&f, &work)?;
                t.value(o).item()
            };
            work[pi].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = relative_error(a, numeric);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > tol {
                report.failures.push(GradFailure {
                    param: pi,
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    use crate::tensor::Result;

    fn check<F>(f: F, params: Vec<Tensor>)
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let report = grad_check(f, &params, 1e-5, 1e-4).unwrap();
        assert!(
            report.passed(),
            "max rel err {} ({:?})",
            report.max_rel_error,
            report.failures.first()
        );
    }

    #[test]
    fn linear_function_has_exact_unit_gradient() {
        let x = Tensor::uniform(&[6], -1.0, 1.0, &mut rng());
        let report = grad_check(|t, v| Result::Ok(t.sum(v[0])), &[x], 1e-5, 1e-4).unwrap();
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::uniform(&[4], -1.0, 1.0, &mut rng());
        let report = grad_check(
            |t, _| Result::Ok(t.constant(Tensor::scalar(2.5))),
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert_eq!(report.max_abs_error, 0.0);
    }

    #[test]
    fn reports_rather_than_raises_on_wrong_gradients() {
        // The bump is a constant on the tape but moves with θ₀, so finite
        // differences see a slope of 10 that backward cannot.
        let x = Tensor::uniform(&[3], -1.0, 1.0, &mut rng());
        let x0 = x.data()[0];
        let report = grad_check(
            move |t, v| {
                let s = t.sigmoid(v[0]);
                let y = t.sum(s);
                let probe = t.value(v[0]).data()[0] - x0;
                let bump = t.constant(Tensor::scalar(probe * 10.0));
                t.add(y, bump)
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].index, 0);
    }

    #[test]
    fn elementwise_ops() {
        let mut r = rng();
        let a = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut r);
        let bias = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
        check(
            |t, v| {
                let m = t.mul(v[0], v[1])?;
                let s = t.sub(m, v[1])?;
                let g = t.gelu(s);
                let r = t.add_row(g, v[2])?;
                let q = t.sigmoid(r);
                let q = t.scale(q, 1.7);
                let w = t.add(q, v[0])?;
                let w2 = t.mul(w, w)?;
                Ok(t.mean(w2))
            },
            vec![a, b, bias],
        );
    }

    #[test]
    fn matrix_ops() {
        let mut r = rng();
        let a = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut r);
        let c = Tensor::uniform(&[5, 4], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut r);
        check(
            |t, v| {
                let ab = t.matmul(v[0], v[1])?; // 3×2
                let ac = t.matmul_nt(v[0], v[2])?; // 3×5
                let act = t.transpose(ac)?; // 5×3
                let x = t.matmul(act, ab)?; // 5×2
                let y = t.matmul(v[3], act)?; // 3×3
                let y2 = t.mul(y, y)?;
                let s1 = t.sum(y2);
                let x2 = t.mul(x, x)?;
                let s2 = t.sum(x2);
                t.add(s1, s2)
            },
            vec![a, b, c, w],
        );
    }

    #[test]
    fn softmax_and_layer_norm() {
        let mut r = rng();
        let x = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut r);
        let g = Tensor::uniform(&[5], 0.5, 1.5, &mut r);
        let b = Tensor::uniform(&[5], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut r);
        check(
            |t, v| {
                let n = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let s = t.softmax(n, 1)?;
                let s0 = t.softmax(v[0], 0)?;
                let p = t.mul(s, v[3])?;
                let q = t.mul(s0, v[3])?;
                let a = t.sum(p);
                let c = t.sum(q);
                let both = t.add(a, c)?;
                let sq = t.mul(both, both)?;
                Ok(sq)
            },
            vec![x, g, b, w],
        );
    }

    #[test]
    fn structural_ops() {
        let mut r = rng();
        let x = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut r);
        let y = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[6, 5], -1.0, 1.0, &mut r);
        check(
            |t, v| {
                let rows = t.concat_rows(&[v[0], v[1]])?; // 6×3
                let g = t.gather_rows(rows, vec![5, 0, 0, 3, 2, 1])?; // 6×3
                let sl = t.slice_cols(v[2], 1, 3)?; // 6×2
                let cat = t.concat_cols(&[g, sl])?; // 6×5
                let prod = t.mul(cat, v[2])?;
                let pooled = t.group_mean_rows(prod, vec![vec![0, 1], vec![2, 3, 4], vec![5]])?;
                let rs = t.reshape(pooled, &[15])?;
                let sq = t.mul(rs, rs)?;
                let sl = t.sum_last(sq);
                let g2 = t.gelu(sl);
                Ok(t.sum(g2))
            },
            vec![x, y, w],
        );
    }

    #[test]
    fn loss_ops() {
        let mut r = rng();
        let logits = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut r);
        let targets = Tensor::from_fn(&[3, 4], |i| ((i * 7) % 3 == 0) as u8 as f64);
        check(
            |t, v| {
                let a = t.bce_with_logits(v[0], &targets)?;
                let b = t.softmax_cross_entropy(v[0], &[1, 3, 0])?;
                t.add(a, b)
            },
            vec![logits],
        );
    }
}
