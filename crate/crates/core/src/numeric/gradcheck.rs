use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{ConnaError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Maximum over all scalar parameters of
    /// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

fn evaluate<F>(params: &ParamStore, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let loss = loss_fn(&mut tape)?;
    let v = tape.scalar(loss);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ConnaError::NumericDomain(format!("loss evaluated to {v}")))
    }
}

/// Compares reverse-mode gradients against central differences
/// `(f(θ+h) − f(θ−h)) / 2h`, element by element, over every parameter.
///
/// `params` is restored bitwise before returning.
pub fn grad_check<F>(params: &mut ParamStore, h: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(ConnaError::NumericDomain(format!(
            "finite-difference step {h} outside [1e-6, 1e-3]"
        )));
    }
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = loss_fn(&mut tape)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(ConnaError::NumericDomain(format!("loss evaluated to {v}")));
        }
        tape.backward(loss)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.get(id).len();
        let grad = analytic.get(id).map(<[f64]>::to_vec);
        for i in 0..n {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + h;
            let plus = evaluate(params, &loss_fn);
            params.get_mut(id).data_mut()[i] = orig - h;
            let minus = evaluate(params, &loss_fn);
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let a = grad.as_ref().map_or(0.0, |g| g[i]);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = params.name(id).to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numeric::tape::AttnMask;

    fn store(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.insert_uniform("x", 3, 4, 1.0, &mut rng).unwrap();
        s.insert_uniform("w", 4, 4, 0.5, &mut rng).unwrap();
        s.insert_uniform("g", 1, 4, 1.0, &mut rng).unwrap();
        s.insert_uniform("b", 1, 4, 1.0, &mut rng).unwrap();
        s.insert_uniform("table", 5, 4, 1.0, &mut rng).unwrap();
        s
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let mut s = store(1);
        let report = grad_check(&mut s, 1e-5, |t| {
            let x = t.param_named("x");
            let y = t.matmul(x, x, true);
            let picks = (0..3).map(|i| (i, i, 1.0)).collect();
            Ok(t.pick(y, picks))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut s = store(2);
        let report = grad_check(&mut s, 1e-4, |t| Ok(t.constant(3.5))).unwrap();
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn params_restored_after_check() {
        let mut s = store(3);
        let before = s.clone();
        grad_check(&mut s, 1e-4, |t| {
            let x = t.param_named("x");
            Ok(t.sum(x))
        })
        .unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn step_outside_range_rejected() {
        let mut s = store(4);
        assert!(grad_check(&mut s, 1e-2, |t| Ok(t.constant(0.0))).is_err());
    }

    /// Every kernel combined into one scalar, checked across seeds.
    #[test]
    fn kernels_match_central_differences() {
        for seed in 0..20 {
            let mut s = store(seed);
            let report = grad_check(&mut s, 1e-5, |t| {
                let x = t.param_named("x");
                let w = t.param_named("w");
                let g = t.param_named("g");
                let b = t.param_named("b");
                let table = t.param_named("table");
                let e = t.gather(table, &[4, 1, 1]);
                let x = t.add(x, e);
                let n = t.layer_norm(x, g, b, 1e-5);
                let q = t.matmul(n, w, false);
                let mem = t.rows(table, 0, 4);
                let a = t.attention(
                    q,
                    mem,
                    mem,
                    2,
                    &AttnMask::keys(vec![true, false, true, true]),
                );
                let sa = t.attention(a, a, a, 2, &AttnMask::causal());
                let h = t.gelu(sa);
                let h = t.add_row(h, b);
                let both = t.concat_rows(&[h, n]);
                let lp = t.log_softmax_rows(both);
                let sm = t.softmax_rows(h);
                let l1 = t.pick(lp, vec![(0, 1, -1.0), (4, 3, -0.5)]);
                let l2 = t.neg_log_pick(sm, vec![(2, 2, 1.0)]);
                let l = t.add(l1, l2);
                let r = t.add_const(l, -1.0);
                let r = t.relu(r);
                let d = t.sub(l, r);
                Ok(t.scale(d, 0.7))
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }
}
