use super::{ParamId, ParameterStore, Result, Tape, Tensor, Var};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// `(input or parameter index, element index)` of the worst element.
    pub worst: (usize, usize),
}

impl GradCheckReport {
    fn record(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(1e-4);
        self.checked += 1;
        self.max_abs_error = self.max_abs_error.max(abs);
        if rel > self.max_rel_error || !rel.is_finite() {
            self.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
            self.worst = (input, elem);
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tol
    }
}

const STEP: f64 = 1e-5;

/// Checks `f` (scalar-valued) with respect to every element of `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).sum())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out);

    let mut report = GradCheckReport::default();
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| inputs[i].map(|_| 0.0));
        for e in 0..inputs[i].len() {
            let orig = xs[i].data()[e];
            xs[i].data_mut()[e] = orig + STEP;
            let hi = eval(&xs)?;
            xs[i].data_mut()[e] = orig - STEP;
            let lo = eval(&xs)?;
            xs[i].data_mut()[e] = orig;
            report.record(i, e, analytic.data()[e], (hi - lo) / (2.0 * STEP));
        }
    }
    Ok(report)
}

/// Checks `f` with respect to the parameters in `store`. At most
/// `max_per_param` evenly spaced elements are probed in each parameter.
pub fn grad_check_params<F>(
    store: &mut ParameterStore,
    f: F,
    max_per_param: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic: Vec<(ParamId, Tensor)> = {
        let mut tape = Tape::with_params(store);
        let out = f(&mut tape)?;
        tape.backward(out).param_grads()
    };
    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let grad = analytic.iter().find(|(p, _)| *p == id).map(|(_, g)| g);
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        for e in (0..n).step_by(stride) {
            let orig = store.get(id).data()[e];
            store.get_mut(id).data_mut()[e] = orig + STEP;
            let hi = eval_store(store, &f)?;
            store.get_mut(id).data_mut()[e] = orig - STEP;
            let lo = eval_store(store, &f)?;
            store.get_mut(id).data_mut()[e] = orig;
            let a = grad.map(|g| g.data()[e]).unwrap_or(0.0);
            report.record(id.index(), e, a, (hi - lo) / (2.0 * STEP));
        }
    }
    Ok(report)
}

fn eval_store<F>(store: &ParameterStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::with_params(store);
    let out = f(&mut tape)?;
    Ok(tape.value(out).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SHAPES: [(usize, usize); 3] = [(1, 3), (2, 4), (5, 2)];

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect())
    }

    fn check(name: &str, f: impl Fn(&mut Tape<'_>, &[Var]) -> Result<Var>, inputs: &[Tensor]) {
        let r = grad_check(f, inputs).unwrap();
        assert!(r.passes(1e-4), "{name}: {r:?}");
    }

    // Weighted sum so every output element gets a distinct upstream gradient.
    fn weighted(t: &mut Tape<'_>, y: Var) -> Result<Var> {
        let (r, c) = t.value(y).dims();
        let w = t.constant(Tensor::matrix(r, c, (0..r * c).map(|i| 0.3 + 0.17 * i as f64).collect()));
        let p = t.mul(y, w)?;
        Ok(t.sum(p))
    }

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::row(vec![1.0, 2.0, 3.0]);
        let r = grad_check(|t, v| Ok(t.scale(v[0], 2.5)), &[x]).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(r, c) in &SHAPES {
            let a = rand_t(&mut rng, r, c);
            let b = rand_t(&mut rng, r, c);
            let w = rand_t(&mut rng, c, 3);
            let row = rand_t(&mut rng, 1, c);
            let col = rand_t(&mut rng, r, 1);
            let two = [a.clone(), b.clone()];
            check("matmul", |t, v| { let y = t.matmul(v[0], v[1])?; weighted(t, y) }, &[a.clone(), w.clone()]);
            check("add", |t, v| { let y = t.add(v[0], v[1])?; weighted(t, y) }, &two);
            check("sub", |t, v| { let y = t.sub(v[0], v[1])?; weighted(t, y) }, &two);
            check("mul", |t, v| { let y = t.mul(v[0], v[1])?; weighted(t, y) }, &two);
            check("add_row", |t, v| { let y = t.add_row(v[0], v[1])?; weighted(t, y) }, &[a.clone(), row.clone()]);
            check("add_col", |t, v| { let y = t.add_col(v[0], v[1])?; weighted(t, y) }, &[a.clone(), col.clone()]);
            check("mul_row", |t, v| { let y = t.mul_row(v[0], v[1])?; weighted(t, y) }, &[a.clone(), row.clone()]);
            check("scale", |t, v| { let y = t.scale(v[0], -1.7); weighted(t, y) }, std::slice::from_ref(&a));
            check("one_minus", |t, v| { let y = t.one_minus(v[0]); weighted(t, y) }, std::slice::from_ref(&a));
            check("sigmoid", |t, v| { let y = t.sigmoid(v[0]); weighted(t, y) }, std::slice::from_ref(&a));
            check("tanh", |t, v| { let y = t.tanh(v[0]); weighted(t, y) }, std::slice::from_ref(&a));
            let shifted = a.map(|x| if x.abs() < 0.05 { x + 0.2 } else { x });
            check("relu", |t, v| { let y = t.relu(v[0]); weighted(t, y) }, &[shifted]);
            check("softmax", |t, v| { let y = t.softmax(v[0]); weighted(t, y) }, std::slice::from_ref(&a));
            let targets: Vec<usize> = (0..r).map(|i| i % c).collect();
            check("cross_entropy", |t, v| t.cross_entropy(v[0], &targets), std::slice::from_ref(&a));
            check("concat_cols", |t, v| { let y = t.concat_cols(&[v[0], v[1]])?; weighted(t, y) }, &two);
            check("concat_rows", |t, v| { let y = t.concat_rows(&[v[0], v[1]])?; weighted(t, y) }, &two);
            check("slice_cols", |t, v| { let y = t.slice_cols(v[0], c / 2, c - c / 2)?; weighted(t, y) }, std::slice::from_ref(&a));
            check("slice_rows", |t, v| { let y = t.slice_rows(v[0], r / 2, r - r / 2)?; weighted(t, y) }, std::slice::from_ref(&a));
            check("transpose", |t, v| { let y = t.transpose(v[0]); weighted(t, y) }, std::slice::from_ref(&a));
            check("mean_rows", |t, v| { let y = t.mean_rows(v[0]); weighted(t, y) }, std::slice::from_ref(&a));
            check("max_rows", |t, v| { let y = t.max_rows(v[0])?; weighted(t, y) }, std::slice::from_ref(&a));
            let ids: Vec<usize> = (0..4).map(|i| (i * 7) % r).collect();
            check("gather", |t, v| { let y = t.gather(v[0], &ids)?; weighted(t, y) }, std::slice::from_ref(&a));
            check("row_norm", |t, v| { let y = t.row_norm(v[0], 1e-6); weighted(t, y) }, &[rand_t(&mut rng, r, c + 1)]);
            check("dropout(eval)", |t, v| { let y = t.dropout(v[0], 0.2); weighted(t, y) }, std::slice::from_ref(&a));
            check("softmax∘matmul", |t, v| { let m = t.matmul(v[0], v[1])?; let y = t.softmax(m); weighted(t, y) }, &[a.clone(), w.clone()]);
        }
    }

    #[test]
    fn dropout_in_train_mode_uses_fixed_mask() {
        let mut tape = Tape::new().train(5);
        let x = tape.leaf(Tensor::full(1, 50, 2.0));
        let y = tape.dropout(x, 0.2);
        let s = tape.sum(y);
        let g = tape.backward(s);
        for (gi, yi) in g.wrt(x).unwrap().data().iter().zip(tape.value(y).data()) {
            assert!((gi * 2.0 - yi).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_check_covers_shared_reads() {
        let mut store = ParameterStore::new(4);
        let w = store.xavier("w", 3, 3).unwrap();
        let b = store.zeros("b", 1, 3).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.1, -0.4, 0.9, 1.2, 0.3, -0.8]);
        let f = |t: &mut Tape<'_>| {
            let xv = t.constant(x.clone());
            let wv = t.param(w);
            let bv = t.param(b);
            let h = t.matmul(xv, wv)?;
            let h = t.add_row(h, bv)?;
            let h = t.tanh(h);
            let h = t.matmul(h, wv)?;
            weighted(t, h)
        };
        let r = grad_check_params(&mut store, f, 100).unwrap();
        assert!(r.passes(1e-4), "{r:?}");
        assert_eq!(r.checked, 12);
    }
}
