use super::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Location of the worst element, e.g. `input 1 [7]`.
    pub worst: String,
}

impl GradCheckReport {
    fn observe(&mut self, analytic: f64, numeric: f64, location: impl FnOnce() -> String) {
        let err = rel_error(analytic, numeric);
        self.checked += 1;
        if self.worst.is_empty() || err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst = format!("{} (analytic {analytic:.3e}, numeric {numeric:.3e})", location());
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if self.worst.is_empty() || other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

/// `|a − n| / max(|a|, |n|, 1e−8)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar<T: Scalar>(g: &Graph<'_, T>, v: Var) -> f64 {
    g.value(v).data()[0].f64()
}

/// Checks `d f / d inputs` where `f` builds a scalar from freshly bound inputs.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor<T>]| -> Result<(Graph<'static, T>, Vec<Var>, Var)> {
        let mut g = Graph::standalone();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (g, vars, out) = run(inputs)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match grads.wrt(v) {
            Some(g) => g.iter().map(|x| x.f64()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let base = input.data()[e];
            work[i].data_mut()[e] = base + T::of(eps);
            let (g, _, out) = run(&work)?;
            let plus = eval_scalar(&g, out);
            work[i].data_mut()[e] = base - T::of(eps);
            let (g, _, out) = run(&work)?;
            let minus = eval_scalar(&g, out);
            work[i].data_mut()[e] = base;
            let numeric = (plus - minus) / (2.0 * eps);
            report.observe(analytic[i][e], numeric, || format!("input {i} [{e}]"));
        }
    }
    Ok(report)
}

/// Checks gradients of a scalar built from `store` with respect to every stored
/// parameter. `per_tensor` limits how many (evenly spaced) elements of each
/// parameter are perturbed; `None` checks all of them.
pub fn grad_check_params<T, F>(
    store: &ParamStore<T>,
    f: F,
    eps: f64,
    per_tensor: Option<usize>,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let out = f(&mut g)?;
    let grads = g.backward(out)?;
    let mut analytic = store.zero_grads();
    grads.accumulate_params(&mut analytic);

    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::inference(s);
        let out = f(&mut g)?;
        Ok(eval_scalar(&g, out))
    };

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for id in store.ids() {
        let n = store.get(id).numel();
        let picks: Vec<usize> = match per_tensor {
            Some(limit) if limit < n => (0..limit).map(|j| j * n / limit).collect(),
            _ => (0..n).collect(),
        };
        for e in picks {
            let base = store.get(id).data()[e];
            work.get_mut(id).data_mut()[e] = base + T::of(eps);
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[e] = base - T::of(eps);
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[e] = base;
            let numeric = (plus - minus) / (2.0 * eps);
            report.observe(analytic[id.index()][e].f64(), numeric, || {
                format!("{} [{e}]", store.name(id))
            });
        }
    }
    Ok(report)
}
