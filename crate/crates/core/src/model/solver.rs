//! Classic fixed-step RK4 with per-stage Newton resolution of algebraic states.
//!
//! The step schedule is fixed up front: between consecutive save instants the
//! interval is split into the smallest number of equal steps no longer than
//! `dt`, so every save instant is hit exactly. The same schedule is replayed by
//! the discrete adjoint in `ude`.

use nalgebra::{DMatrix, DVector};

use super::{DynamicalModel, SimError, Trajectory};

pub(crate) const NEWTON_TOL: f64 = 1e-10;
pub(crate) const NEWTON_MAX_ITERS: usize = 25;
pub(crate) const NEWTON_MAX_HALVINGS: usize = 8;

/// Differential right-hand side evaluated on the full state.
pub(crate) trait VectorField {
    fn eval(&self, u: &[f64], x: &[f64], t: f64, du: &mut [f64]);
}

pub(crate) struct BaseField<'a> {
    pub model: &'a DynamicalModel,
    pub p: &'a [f64],
}

impl VectorField for BaseField<'_> {
    fn eval(&self, u: &[f64], x: &[f64], t: f64, du: &mut [f64]) {
        self.model.rhs(u, x, self.p, t, du)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PlannedStep {
    pub t: f64,
    pub h: f64,
    /// Index into the save list reached at the end of this step.
    pub save: Option<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct StepPlan {
    pub t0: f64,
    pub initial_save: Option<usize>,
    pub steps: Vec<PlannedStep>,
    pub save_times: Vec<f64>,
}

/// Builds the step schedule. An empty `save_times` saves at every grid point.
pub(crate) fn plan_steps(
    t_span: (f64, f64),
    dt: f64,
    save_times: &[f64],
) -> Result<StepPlan, SimError> {
    let (t0, t1) = t_span;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(SimError::InvalidRequest(format!("dt must be positive, got {dt}")));
    }
    if !t0.is_finite() || !t1.is_finite() || t1 < t0 {
        return Err(SimError::InvalidRequest(format!("invalid time span ({t0}, {t1})")));
    }

    let save_times: Vec<f64> = if save_times.is_empty() {
        let n = (((t1 - t0) / dt) - 1e-9).ceil().max(0.0) as usize;
        let mut ts: Vec<f64> = (0..n).map(|i| t0 + i as f64 * dt).collect();
        ts.push(t1);
        ts
    } else {
        save_times.to_vec()
    };
    let slack = 1e-12 * (1.0 + t0.abs().max(t1.abs()));
    for w in save_times.windows(2) {
        if !(w[1] > w[0]) {
            return Err(SimError::InvalidRequest("save times must be strictly increasing".into()));
        }
    }
    if save_times.iter().any(|&s| s < t0 - slack || s > t1 + slack) {
        return Err(SimError::InvalidRequest(format!(
            "save times must lie inside ({t0}, {t1})"
        )));
    }

    let mut steps = Vec::new();
    let mut initial_save = None;
    let mut t = t0;
    let mut targets: Vec<(f64, Option<usize>)> = Vec::with_capacity(save_times.len() + 1);
    for (i, &s) in save_times.iter().enumerate() {
        if (s - t0).abs() <= slack {
            initial_save = Some(i);
        } else {
            targets.push((s, Some(i)));
        }
    }
    if targets.last().map_or(true, |&(s, _)| s < t1 - slack) && t1 > t0 + slack {
        targets.push((t1, None));
    }
    for (target, save) in targets {
        let span = target - t;
        let n = ((span / dt) - 1e-9).ceil().max(1.0) as usize;
        let h = span / n as f64;
        for i in 0..n {
            let ti = t + i as f64 * h;
            steps.push(PlannedStep {
                t: ti,
                h,
                save: if i + 1 == n { save } else { None },
            });
        }
        t = target;
    }
    Ok(StepPlan {
        t0,
        initial_save,
        steps,
        save_times,
    })
}

/// Full states at the four RK4 stages of one step, recorded for the adjoint.
#[derive(Debug, Clone)]
pub(crate) struct TapeStep {
    pub stages: [Vec<f64>; 4],
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Tape {
    pub steps: Vec<TapeStep>,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// `∂g/∂u_a` by central differences.
pub(crate) fn algebraic_jacobian(
    model: &DynamicalModel,
    u: &[f64],
    x: &[f64],
    p: &[f64],
    t: f64,
) -> DMatrix<f64> {
    let nd = model.n_diff();
    let na = model.n_alg();
    let mut jac = DMatrix::zeros(na, na);
    let mut up = u.to_vec();
    let mut gp = vec![0.0; na];
    let mut gm = vec![0.0; na];
    for j in 0..na {
        let h = 1e-7 * (1.0 + u[nd + j].abs());
        up[nd + j] = u[nd + j] + h;
        model.alg_residual(&up, x, p, t, &mut gp);
        up[nd + j] = u[nd + j] - h;
        model.alg_residual(&up, x, p, t, &mut gm);
        up[nd + j] = u[nd + j];
        for i in 0..na {
            jac[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Solves `g(u_d, u_a) = 0` for `u_a` in place, starting from the current
/// `u_a`, by damped Newton.
pub(crate) fn resolve_algebraic(
    model: &DynamicalModel,
    u: &mut [f64],
    x: &[f64],
    p: &[f64],
    t: f64,
) -> Result<(), SimError> {
    let na = model.n_alg();
    if na == 0 {
        return Ok(());
    }
    let nd = model.n_diff();
    let mut g = vec![0.0; na];
    model.alg_residual(u, x, p, t, &mut g);
    let mut norm = max_abs(&g);
    let mut trial = u.to_vec();
    let mut g_trial = vec![0.0; na];
    for _ in 0..NEWTON_MAX_ITERS {
        if norm <= NEWTON_TOL {
            return Ok(());
        }
        let jac = algebraic_jacobian(model, u, x, p, t);
        let Some(step) = jac.lu().solve(&DVector::from_column_slice(&g)) else {
            return Err(SimError::AlgebraicSolveFailed { t, residual: norm });
        };
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..=NEWTON_MAX_HALVINGS {
            for j in 0..na {
                trial[nd + j] = u[nd + j] - lambda * step[j];
            }
            trial[..nd].copy_from_slice(&u[..nd]);
            model.alg_residual(&trial, x, p, t, &mut g_trial);
            let trial_norm = max_abs(&g_trial);
            if trial_norm < norm {
                u[nd..].copy_from_slice(&trial[nd..]);
                g.copy_from_slice(&g_trial);
                norm = trial_norm;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if norm <= NEWTON_TOL {
        Ok(())
    } else {
        Err(SimError::AlgebraicSolveFailed { t, residual: norm })
    }
}

fn check_finite(v: &[f64], t: f64) -> Result<(), SimError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(SimError::NonFiniteState { t })
    }
}

/// Integrates `field` along `plan`, starting from the model's initial state
/// for `p`. When `tape` is given, every stage state is recorded.
pub(crate) fn integrate<F: VectorField>(
    model: &DynamicalModel,
    p: &[f64],
    field: &F,
    plan: &StepPlan,
    mut tape: Option<&mut Tape>,
) -> Result<Trajectory, SimError> {
    let nd = model.n_diff();
    let ns = model.n_states();
    let nx = model.n_exogenous();
    let ny = model.n_outputs();

    let mut traj = Trajectory {
        times: plan.save_times.clone(),
        states: vec![Vec::new(); plan.save_times.len()],
        outputs: vec![Vec::new(); plan.save_times.len()],
        derivatives: vec![Vec::new(); plan.save_times.len()],
    };
    let mut x = vec![0.0; nx];
    let mut u = model.initial_state(p);
    if u.len() != ns {
        return Err(SimError::InvalidRequest("initial state has the wrong length".into()));
    }
    model.exogenous(plan.t0, &mut x);
    resolve_algebraic(model, &mut u, &x, p, plan.t0)?;
    check_finite(&u, plan.t0)?;

    let mut save = |k: usize, u: &[f64], x: &[f64], t: f64| -> Result<(), SimError> {
        let mut y = vec![0.0; ny];
        model.output(u, x, p, t, &mut y);
        let mut du = vec![0.0; nd];
        field.eval(u, x, t, &mut du);
        check_finite(&y, t)?;
        check_finite(&du, t)?;
        traj.states[k] = u.to_vec();
        traj.outputs[k] = y;
        traj.derivatives[k] = du;
        Ok(())
    };
    if let Some(k) = plan.initial_save {
        save(k, &u, &x, plan.t0)?;
    }

    let mut k1 = vec![0.0; nd];
    let mut k2 = vec![0.0; nd];
    let mut k3 = vec![0.0; nd];
    let mut k4 = vec![0.0; nd];
    let mut z = u.clone();
    if let Some(tape) = tape.as_deref_mut() {
        tape.steps.reserve(plan.steps.len());
    }

    for step in &plan.steps {
        let (t, h) = (step.t, step.h);
        let t_mid = t + 0.5 * h;
        let t_end = t + h;

        model.exogenous(t, &mut x);
        field.eval(&u, &x, t, &mut k1);
        check_finite(&k1, t)?;
        let s1 = u.clone();

        model.exogenous(t_mid, &mut x);
        z.copy_from_slice(&u);
        for i in 0..nd {
            z[i] = u[i] + 0.5 * h * k1[i];
        }
        resolve_algebraic(model, &mut z, &x, p, t_mid)?;
        field.eval(&z, &x, t_mid, &mut k2);
        check_finite(&k2, t_mid)?;
        let s2 = z.clone();

        for i in 0..nd {
            z[i] = u[i] + 0.5 * h * k2[i];
        }
        resolve_algebraic(model, &mut z, &x, p, t_mid)?;
        field.eval(&z, &x, t_mid, &mut k3);
        check_finite(&k3, t_mid)?;
        let s3 = z.clone();

        model.exogenous(t_end, &mut x);
        for i in 0..nd {
            z[i] = u[i] + h * k3[i];
        }
        resolve_algebraic(model, &mut z, &x, p, t_end)?;
        field.eval(&z, &x, t_end, &mut k4);
        check_finite(&k4, t_end)?;
        let s4 = z.clone();

        for i in 0..nd {
            u[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        // Warm-start the end-of-step algebraic solve from the last stage.
        u[nd..].copy_from_slice(&z[nd..]);
        resolve_algebraic(model, &mut u, &x, p, t_end)?;
        check_finite(&u, t_end)?;

        if let Some(tape) = tape.as_deref_mut() {
            tape.steps.push(TapeStep {
                stages: [s1, s2, s3, s4],
            });
        }
        if let Some(k) = step.save {
            let ts = plan.save_times[k];
            save(k, &u, &x, ts)?;
        }
    }
    if let Some(k) = traj.states.iter().position(|s| s.is_empty()) {
        return Err(SimError::InvalidRequest(format!(
            "save time {} was never reached",
            plan.save_times[k]
        )));
    }
    Ok(traj)
}

/// Simulates `model` with parameters `p` over `t_span` using fixed-step RK4.
///
/// Outputs and derivatives are evaluated at `save_times`; an empty list saves
/// at every step.
pub fn simulate(
    model: &DynamicalModel,
    p: &[f64],
    t_span: (f64, f64),
    dt: f64,
    save_times: &[f64],
) -> Result<Trajectory, SimError> {
    if p.len() != model.params().len() {
        return Err(SimError::InvalidRequest(format!(
            "expected {} parameters, got {}",
            model.params().len(),
            p.len()
        )));
    }
    let plan = plan_steps(t_span, dt, save_times)?;
    integrate(model, p, &BaseField { model, p }, &plan, None)
}

/// Dense central-difference Jacobian of `fun` at `u` (`n_out × u.len()`),
/// stored row-major.
pub(crate) fn central_jacobian<F>(u: &[f64], n_out: usize, step: f64, mut fun: F) -> Vec<f64>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let n = u.len();
    let mut jac = vec![0.0; n_out * n];
    let mut up = u.to_vec();
    let mut fp = vec![0.0; n_out];
    let mut fm = vec![0.0; n_out];
    for j in 0..n {
        up[j] = u[j] + step;
        fun(&up, &mut fp);
        up[j] = u[j] - step;
        fun(&up, &mut fm);
        up[j] = u[j];
        for i in 0..n_out {
            jac[i * n + j] = (fp[i] - fm[i]) / (2.0 * step);
        }
    }
    jac
}
