//! Prediction-error identification: minimize the mean squared one-step-ahead prediction
//! error `V_N(theta, eta)` over the model parameters and the arrival cost.
//!
//! The outer solver is Levenberg-Marquardt on the stacked residuals `eps_i / sqrt(N)`,
//! with Marquardt diagonal scaling, box bounds on `theta` enforced by projection and
//! general constraints `h(theta) <= 0` by a quadratic penalty. Windows are solved in
//! parallel and reduced in index order, so results do not depend on the worker count.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::arrival::{ArrivalJson, ArrivalMode, ArrivalParams};
use crate::data::{Trajectory, Window};
use crate::error::{Error, Result};
use crate::mhe::{MheOptions, MheProblem, MheSolution};
use crate::model::ParametricModel;
use crate::sensitivity::{SensitivityContext, SensitivityOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PemOptions {
    pub max_outer: usize,
    /// Stop when the infinity norm of the projected gradient of the merit is below this.
    pub gtol: f64,
    /// Stop when an accepted step lowers the merit by less than this relative amount.
    pub ftol: f64,
    pub lm_lambda0: f64,
    /// Initial weight of the constraint penalty.
    pub penalty_rho: f64,
    pub workers: usize,
    /// Largest fraction of windows that may fail before an evaluation is an error.
    pub max_excluded_fraction: f64,
    pub optimize_theta: bool,
    pub optimize_eta: bool,
    /// Start each inner solve from the previous accepted solution when that is cheaper
    /// than the rollout.
    pub warm_start: bool,
    pub mhe: MheOptions,
    pub sensitivity: SensitivityOptions,
}

impl Default for PemOptions {
    fn default() -> Self {
        PemOptions {
            max_outer: 100,
            gtol: 1e-6,
            ftol: 1e-10,
            lm_lambda0: 1e-3,
            penalty_rho: 1.0,
            workers: 1,
            max_excluded_fraction: 0.1,
            optimize_theta: true,
            optimize_eta: true,
            warm_start: true,
            mhe: MheOptions::default(),
            sensitivity: SensitivityOptions::default(),
        }
    }
}

impl PemOptions {
    pub fn validate(&self) -> Result<()> {
        self.mhe.validate()?;
        self.sensitivity.validate()?;
        let positive = [
            ("gtol", self.gtol),
            ("ftol", self.ftol),
            ("lm_lambda0", self.lm_lambda0),
            ("penalty_rho", self.penalty_rho),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
        }
        if self.workers == 0 {
            return Err(Error::InvalidArgument("workers must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.max_excluded_fraction) {
            return Err(Error::InvalidArgument("max_excluded_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn pool(&self) -> Result<ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowDiagnostic {
    pub trajectory: usize,
    pub offset: usize,
    /// `NaN` for excluded windows.
    pub eps_norm: f64,
    pub kkt_norm: f64,
    pub iterations: usize,
    pub excluded: bool,
    pub reason: Option<String>,
}

/// Prediction errors of every window at one parameter point.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Mean of `|eps|^2` over the included windows.
    pub objective: f64,
    /// `None` for excluded windows.
    pub eps: Vec<Option<DVector<f64>>>,
    pub diagnostics: Vec<WindowDiagnostic>,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub iter: usize,
    #[serde(rename = "V_N")]
    pub v_n: f64,
    pub step_norm: f64,
    pub damping: f64,
    pub accepted: bool,
    /// Parameter iterate after this entry.
    #[serde(skip)]
    pub theta: Vec<f64>,
    #[serde(skip)]
    pub eta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentificationResult {
    pub theta_hat: DVector<f64>,
    pub eta_hat: ArrivalParams,
    /// `V_N` at the estimate.
    pub objective: f64,
    pub trace: Vec<TraceEntry>,
    pub window_diagnostics: Vec<WindowDiagnostic>,
    pub converged: bool,
    pub termination: String,
    /// Accepted and rejected trial steps.
    pub iterations: usize,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultJson {
    pub theta_hat: Vec<f64>,
    pub eta_hat: ArrivalJson,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub wall_time: f64,
}

impl IdentificationResult {
    pub fn to_json(&self) -> ResultJson {
        ResultJson {
            theta_hat: self.theta_hat.iter().copied().collect(),
            eta_hat: self.eta_hat.to_json(),
            objective: self.objective,
            converged: self.converged,
            iterations: self.iterations,
            wall_time: self.wall_time,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, &self.to_json())?;
        Ok(())
    }

    /// Writes `iter,V_N,step_norm,damping,accepted`.
    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut out = csv::Writer::from_path(path)?;
        for entry in &self.trace {
            out.serialize(entry)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Writes one row per window: origin, exclusion flag and the prediction error.
pub fn write_eps_csv(windows: &[Window], eval: &Evaluation, path: &Path) -> Result<()> {
    let p = eval.eps.iter().flatten().map(|e| e.len()).next().unwrap_or(0);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "window,trajectory,offset,excluded")?;
    for j in 0..p {
        write!(out, ",eps_{j}")?;
    }
    writeln!(out)?;
    for (i, (w, e)) in windows.iter().zip(&eval.eps).enumerate() {
        write!(out, "{i},{},{},{}", w.origin.trajectory, w.origin.offset, e.is_none())?;
        match e {
            Some(e) => e.iter().try_for_each(|v| write!(out, ",{v:?}"))?,
            None => (0..p).try_for_each(|_| write!(out, ","))?,
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Free parameters `(theta, packed eta)` with some blocks possibly frozen.
#[derive(Debug, Clone)]
struct Layout {
    theta0: DVector<f64>,
    eta0: ArrivalParams,
    theta_free: bool,
    eta_free: bool,
}

impl Layout {
    fn n_theta(&self) -> usize {
        self.theta0.len()
    }

    fn n_eta(&self) -> usize {
        self.eta0.param_dim()
    }

    fn columns(&self) -> Vec<usize> {
        let mut cols = Vec::new();
        if self.theta_free {
            cols.extend(0..self.n_theta());
        }
        if self.eta_free {
            cols.extend(self.n_theta()..self.n_theta() + self.n_eta());
        }
        cols
    }

    fn pack(&self, theta: &DVector<f64>, eta: &ArrivalParams) -> DVector<f64> {
        let mut v = Vec::new();
        if self.theta_free {
            v.extend(theta.iter());
        }
        if self.eta_free {
            v.extend(eta.pack().iter());
        }
        DVector::from_vec(v)
    }

    fn unpack(&self, p: &DVector<f64>) -> Result<(DVector<f64>, ArrivalParams)> {
        let mut at = 0;
        let theta = if self.theta_free {
            at = self.n_theta();
            p.rows(0, at).into_owned()
        } else {
            self.theta0.clone()
        };
        let eta = if self.eta_free {
            ArrivalParams::from_packed(&p.rows(at, self.n_eta()).into_owned(), self.eta0.state_dim(), self.eta0.mode)?
        } else {
            self.eta0.clone()
        };
        Ok((theta, eta))
    }
}

struct WindowOutcome {
    sol: Option<MheSolution>,
    eps: Option<DVector<f64>>,
    diagnostic: WindowDiagnostic,
}

/// Everything known at one parameter point.
struct Point {
    p: DVector<f64>,
    theta: DVector<f64>,
    eta: ArrivalParams,
    eval: Evaluation,
    sols: Vec<Option<MheSolution>>,
    /// Penalty residuals `sqrt(rho) max(0, h)`.
    penalty: DVector<f64>,
    merit: f64,
}

struct Engine<'a> {
    model: &'a dyn ParametricModel,
    windows: &'a [Window],
    opts: PemOptions,
    pool: ThreadPool,
}

/// Windows enter the objective when converged, or when the solve stopped with a
/// stationarity residual small relative to the cost. The absolute tolerance can lie below
/// rounding for windows with a large cost.
fn usable(sol: &MheSolution, mhe: &MheOptions) -> bool {
    sol.converged || sol.kkt_norm <= mhe.tol * sol.cost.max(1.0)
}

fn excluded_diag(w: &Window, reason: String, kkt: f64, iterations: usize) -> WindowDiagnostic {
    WindowDiagnostic {
        trajectory: w.origin.trajectory,
        offset: w.origin.offset,
        eps_norm: f64::NAN,
        kkt_norm: kkt,
        iterations,
        excluded: true,
        reason: Some(reason),
    }
}

impl<'a> Engine<'a> {
    fn new(model: &'a dyn ParametricModel, windows: &'a [Window], opts: &PemOptions) -> Result<Self> {
        opts.validate()?;
        if windows.is_empty() {
            return Err(Error::Data("dataset has no windows".into()));
        }
        Ok(Engine {
            model,
            windows,
            opts: *opts,
            pool: opts.pool()?,
        })
    }

    fn evaluate(
        &self,
        theta: &DVector<f64>,
        eta: &ArrivalParams,
        warm: &[Option<DVector<f64>>],
    ) -> Result<(Evaluation, Vec<Option<MheSolution>>)> {
        let problem = MheProblem::new(self.model, theta, eta)?;
        let mhe = self.opts.mhe;
        let outcomes: Vec<WindowOutcome> = self.pool.install(|| {
            self.windows
                .par_iter()
                .zip(warm.par_iter())
                .map(|(w, start)| {
                    let start = if self.opts.warm_start { start.as_ref() } else { None };
                    let solved = problem.solve(w, start, &mhe).and_then(|sol| {
                        if usable(&sol, &mhe) {
                            Ok(sol)
                        } else {
                            problem.solve(w, Some(&sol.x_hat), &mhe)
                        }
                    });
                    match solved {
                        Ok(sol) if usable(&sol, &mhe) => {
                            let (_, eps) = problem.prediction(w, &sol);
                            let diagnostic = WindowDiagnostic {
                                trajectory: w.origin.trajectory,
                                offset: w.origin.offset,
                                eps_norm: eps.norm(),
                                kkt_norm: sol.kkt_norm,
                                iterations: sol.iterations,
                                excluded: false,
                                reason: None,
                            };
                            WindowOutcome {
                                sol: Some(sol),
                                eps: Some(eps),
                                diagnostic,
                            }
                        }
                        Ok(sol) => WindowOutcome {
                            diagnostic: excluded_diag(w, "inner solve did not converge".into(), sol.kkt_norm, sol.iterations),
                            sol: None,
                            eps: None,
                        },
                        Err(e) => WindowOutcome {
                            diagnostic: excluded_diag(w, e.to_string(), f64::NAN, 0),
                            sol: None,
                            eps: None,
                        },
                    }
                })
                .collect()
        });
        let total = outcomes.len();
        let excluded = outcomes.iter().filter(|o| o.eps.is_none()).count();
        if excluded as f64 > self.opts.max_excluded_fraction * total as f64 || excluded == total {
            return Err(Error::TooManyExcluded { excluded, total });
        }
        let sum: f64 = outcomes.iter().flat_map(|o| o.eps.as_ref()).map(|e| e.norm_squared()).sum();
        let objective = sum / (total - excluded) as f64;
        if !objective.is_finite() {
            return Err(Error::non_finite("prediction-error objective"));
        }
        let mut eps = Vec::with_capacity(total);
        let mut diagnostics = Vec::with_capacity(total);
        let mut sols = Vec::with_capacity(total);
        for o in outcomes {
            eps.push(o.eps);
            diagnostics.push(o.diagnostic);
            sols.push(o.sol);
        }
        Ok((
            Evaluation {
                objective,
                eps,
                diagnostics,
                excluded,
            },
            sols,
        ))
    }

    fn point(
        &self,
        layout: &Layout,
        p: DVector<f64>,
        rho: f64,
        warm: &[Option<DVector<f64>>],
    ) -> Result<Point> {
        let (theta, eta) = layout.unpack(&p)?;
        let (eval, sols) = self.evaluate(&theta, &eta, warm)?;
        let penalty = self.model.constraints(&theta).map(|h| rho.sqrt() * h.max(0.0));
        let merit = eval.objective + penalty.norm_squared();
        Ok(Point {
            p,
            theta,
            eta,
            eval,
            sols,
            penalty,
            merit,
        })
    }

    /// Residual vector and its Jacobian with respect to the free parameters.
    fn jacobian(&self, layout: &Layout, point: &mut Point, rho: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let ctx = SensitivityContext::new(self.model, &point.theta, &point.eta, &self.opts.sensitivity)?;
        let cols = layout.columns();
        let jacobians: Vec<Option<Result<DMatrix<f64>>>> = self.pool.install(|| {
            self.windows
                .par_iter()
                .zip(point.sols.par_iter())
                .map(|(w, sol)| sol.as_ref().map(|s| ctx.prediction_jacobian(w, s).map(|j| j.d_eps)))
                .collect()
        });
        let included = point.eval.eps.iter().filter(|e| e.is_some()).count();
        let scale = 1.0 / (included as f64).sqrt();
        let p = self.model.output_dim();
        let n_h = point.penalty.len();
        let rows = included * p + n_h;
        let mut r = DVector::zeros(rows);
        let mut jac = DMatrix::zeros(rows, cols.len());
        let mut row = 0;
        for (i, (eps, j)) in point.eval.eps.iter().zip(jacobians).enumerate() {
            let Some(eps) = eps else { continue };
            r.rows_mut(row, p).copy_from(&(eps * scale));
            match j {
                Some(Ok(d)) => {
                    for (c, &src) in cols.iter().enumerate() {
                        jac.view_mut((row, c), (p, 1)).copy_from(&(d.column(src) * scale));
                    }
                }
                Some(Err(e)) => {
                    // Residual kept, derivative unknown: the row stays zero.
                    point.eval.diagnostics[i].reason = Some(e.to_string());
                }
                None => unreachable!("included window without a solution"),
            }
            row += p;
        }
        if n_h > 0 {
            r.rows_mut(row, n_h).copy_from(&point.penalty);
            if layout.theta_free {
                let theta = &point.theta;
                for j in 0..theta.len() {
                    let h = 1e-7 * theta[j].abs().max(1.0);
                    let mut t = theta.clone();
                    t[j] += h;
                    let plus = self.model.constraints(&t).map(|v| v.max(0.0));
                    t[j] -= 2.0 * h;
                    let minus = self.model.constraints(&t).map(|v| v.max(0.0));
                    let d = (plus - minus) * (rho.sqrt() / (2.0 * h));
                    jac.view_mut((row, j), (n_h, 1)).copy_from(&d);
                }
            }
        }
        Ok((r, jac))
    }
}

fn warm_from(sols: &[Option<MheSolution>]) -> Vec<Option<DVector<f64>>> {
    sols.iter().map(|s| s.as_ref().map(|s| s.x_hat.clone())).collect()
}

/// Mean squared prediction error at `(theta, eta)` over all windows.
pub fn evaluate_objective(
    windows: &[Window],
    model: &dyn ParametricModel,
    theta: &DVector<f64>,
    eta: &ArrivalParams,
    opts: &PemOptions,
) -> Result<Evaluation> {
    let engine = Engine::new(model, windows, opts)?;
    Ok(engine.evaluate(theta, eta, &vec![None; windows.len()])?.0)
}

/// Free parameters held at a bound because the gradient points outward.
fn active_bounds(model: &dyn ParametricModel, layout: &Layout, p: &DVector<f64>, grad: &DVector<f64>) -> Vec<bool> {
    let mut active = vec![false; p.len()];
    if let (true, Some(b)) = (layout.theta_free, model.bounds()) {
        for j in 0..layout.n_theta() {
            active[j] = (p[j] <= b.lower[j] && grad[j] > 0.0) || (p[j] >= b.upper[j] && grad[j] < 0.0);
        }
    }
    active
}

/// Damped Gauss-Newton step `(J^T J + lambda D) delta = -J^T r` over the inactive
/// parameters; `grad = 2 J^T r`.
fn lm_step(
    jtj: &DMatrix<f64>,
    grad: &DVector<f64>,
    scaling: &DVector<f64>,
    lambda: f64,
    floor: f64,
    active: &[bool],
) -> Option<DVector<f64>> {
    let free: Vec<usize> = (0..grad.len()).filter(|&j| !active[j]).collect();
    let mut delta = DVector::zeros(grad.len());
    if free.is_empty() {
        return Some(delta);
    }
    let mut system = jtj.select_rows(&free).select_columns(&free);
    for (a, &j) in free.iter().enumerate() {
        system[(a, a)] += lambda * scaling[j].max(floor);
    }
    let rhs = -grad.select_rows(&free) * 0.5;
    let solved = system.cholesky()?.solve(&rhs);
    for (a, &j) in free.iter().enumerate() {
        delta[j] = solved[a];
    }
    delta.iter().all(|v| v.is_finite()).then_some(delta)
}

fn project(model: &dyn ParametricModel, layout: &Layout, p: &mut DVector<f64>) {
    if let (true, Some(bounds)) = (layout.theta_free, model.bounds()) {
        let mut theta = p.rows(0, layout.n_theta()).into_owned();
        bounds.project(&mut theta);
        p.rows_mut(0, layout.n_theta()).copy_from(&theta);
    }
}

/// A trial point is comparable with the current one only if it solves every window the
/// current point solves; otherwise dropping hard windows would lower the mean.
fn keeps_windows(current: &Point, trial: &Point) -> bool {
    current
        .eval
        .eps
        .iter()
        .zip(&trial.eval.eps)
        .all(|(c, t)| c.is_none() || t.is_some())
}

/// Tunes `theta` and `eta` jointly, starting from `(theta0, eta0)`.
pub fn identify(
    windows: &[Window],
    model: &dyn ParametricModel,
    theta0: &DVector<f64>,
    eta0: &ArrivalParams,
    opts: &PemOptions,
) -> Result<IdentificationResult> {
    let start = Instant::now();
    let engine = Engine::new(model, windows, opts)?;
    if theta0.len() != model.param_dim() {
        return Err(Error::dimension("initial parameter vector", model.param_dim(), theta0.len()));
    }
    if theta0.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("initial parameter vector"));
    }
    if eta0.state_dim() != model.state_dim() {
        return Err(Error::dimension("arrival state", model.state_dim(), eta0.state_dim()));
    }
    let layout = Layout {
        theta0: theta0.clone(),
        eta0: eta0.clone(),
        theta_free: opts.optimize_theta,
        eta_free: opts.optimize_eta && eta0.mode == ArrivalMode::Constant,
    };
    let mut p0 = layout.pack(theta0, eta0);
    project(model, &layout, &mut p0);

    let mut rho = opts.penalty_rho;
    let mut current = engine.point(&layout, p0, rho, &vec![None; windows.len()])?;
    let mut trace = vec![TraceEntry {
        iter: 0,
        v_n: current.eval.objective,
        step_norm: 0.0,
        damping: opts.lm_lambda0,
        accepted: true,
        theta: current.theta.iter().copied().collect(),
        eta: current.eta.pack().iter().copied().collect(),
    }];
    let mut iterations = 0;
    let mut converged = false;
    let mut termination = String::from("no free parameters");

    if current.p.is_empty() {
        converged = true;
    }
    while !current.p.is_empty() {
        let (r, jac) = engine.jacobian(&layout, &mut current, rho)?;
        let mut lambda = opts.lm_lambda0;
        let mut nu = 2.0;
        let mut scaling = DVector::zeros(jac.ncols());
        let mut stage_done = false;
        let mut jac_r = (r, jac);
        while !stage_done {
            let (r, jac) = &jac_r;
            let jtj = jac.tr_mul(jac);
            let grad = jac.tr_mul(r) * 2.0;
            for j in 0..scaling.len() {
                scaling[j] = f64::max(scaling[j], jtj[(j, j)]);
            }
            let floor = 1e-12 * scaling.amax().max(1e-300);

            let mut projected = &current.p - &grad;
            project(model, &layout, &mut projected);
            let pg = (&current.p - projected).amax();
            if pg <= opts.gtol {
                termination = format!("gradient norm {pg:.3e} below gtol");
                converged = true;
                break;
            }
            if iterations >= opts.max_outer {
                termination = "iteration limit reached".into();
                break;
            }
            let active = active_bounds(model, &layout, &current.p, &grad);
            let Some(delta) = lm_step(&jtj, &grad, &scaling, lambda, floor, &active) else {
                lambda *= nu;
                nu *= 2.0;
                if lambda > 1e16 {
                    termination = "no acceptable step at maximum damping".into();
                    stage_done = true;
                }
                continue;
            };
            let mut trial_p = &current.p + delta;
            project(model, &layout, &mut trial_p);
            let step = &trial_p - &current.p;
            let step_norm = step.norm();
            iterations += 1;
            if step_norm <= 1e-14 * (current.p.norm() + 1e-14) {
                termination = "step below resolution".into();
                converged = true;
                break;
            }
            let warm = warm_from(&current.sols);
            let trial = engine.point(&layout, trial_p, rho, &warm);
            let predicted = r.norm_squared() - (r + jac * &step).norm_squared();
            match trial {
                Ok(trial) if trial.merit < current.merit && keeps_windows(&current, &trial) => {
                    let gain = (current.merit - trial.merit) / predicted.max(f64::MIN_POSITIVE);
                    lambda *= f64::max(1.0 / 3.0, 1.0 - (2.0 * gain - 1.0).powi(3));
                    nu = 2.0;
                    let relative = (current.merit - trial.merit) / current.merit.max(f64::MIN_POSITIVE);
                    trace.push(TraceEntry {
                        iter: iterations,
                        v_n: trial.eval.objective,
                        step_norm,
                        damping: lambda,
                        accepted: true,
                        theta: trial.theta.iter().copied().collect(),
                        eta: trial.eta.pack().iter().copied().collect(),
                    });
                    current = trial;
                    if relative <= opts.ftol {
                        termination = format!("relative decrease {relative:.3e} below ftol");
                        converged = true;
                        break;
                    }
                    jac_r = engine.jacobian(&layout, &mut current, rho)?;
                }
                other => {
                    trace.push(TraceEntry {
                        iter: iterations,
                        v_n: other.as_ref().map_or(f64::NAN, |t| t.eval.objective),
                        step_norm,
                        damping: lambda,
                        accepted: false,
                        theta: current.theta.iter().copied().collect(),
                        eta: current.eta.pack().iter().copied().collect(),
                    });
                    lambda *= nu;
                    nu *= 2.0;
                    if lambda > 1e16 {
                        termination = "no acceptable step at maximum damping".into();
                        stage_done = true;
                    }
                }
            }
        }
        let violation = model.constraints(&current.theta).iter().fold(0.0f64, |a, &h| a.max(h));
        if violation <= 1e-6 || iterations >= opts.max_outer || !converged {
            if violation > 1e-6 {
                converged = false;
                termination = format!("{termination}; constraint violation {violation:.3e}");
            }
            break;
        }
        // Tighten the penalty and continue from the current point.
        rho *= 100.0;
        converged = false;
        current = engine.point(&layout, current.p.clone(), rho, &warm_from(&current.sols))?;
    }

    // Report the estimate independently of the warm-start history.
    let (final_eval, _) = engine.evaluate(&current.theta, &current.eta, &vec![None; windows.len()])?;
    Ok(IdentificationResult {
        theta_hat: current.theta,
        eta_hat: current.eta,
        objective: final_eval.objective,
        trace,
        window_diagnostics: final_eval.diagnostics,
        converged,
        termination,
        iterations,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Settings of the Monte-Carlo estimate of the expected objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub theta_star: f64,
    pub theta_grid: Vec<f64>,
    pub n_mc: usize,
    /// Windows per realization.
    pub n_windows: usize,
    pub m: usize,
    pub seed: u64,
}

/// Expected objective `E[min_eta V_N]` on a grid of `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct McCurve {
    pub theta: Vec<f64>,
    pub mean: Vec<f64>,
    /// Standard error of each mean.
    pub std_err: Vec<f64>,
    /// `values[g][r]`: minimized objective of realization `r` at grid point `g`.
    pub values: Vec<Vec<f64>>,
    pub argmin: f64,
}

impl McCurve {
    /// Standard error of `mean[a] - mean[b]` over paired realizations.
    pub fn paired_std_err(&self, a: usize, b: usize) -> f64 {
        let d: Vec<f64> = self.values[a].iter().zip(&self.values[b]).map(|(x, y)| x - y).collect();
        std_err(&d)
    }
}

fn std_err(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

/// Arrival prior matched to the output mean and covariance, for models whose outputs
/// measure the state directly. `identify` started here avoids the flat zero-weight limit
/// of the arrival cost, which starts with too weak a prior can drift into.
pub fn output_moment_prior(model: &dyn ParametricModel, trajectories: &[Trajectory]) -> Result<ArrivalParams> {
    if model.output_dim() != model.state_dim() {
        return Err(Error::InvalidArgument(format!(
            "output moments give no arrival prior for {} ({} outputs, {} states)",
            model.name(),
            model.output_dim(),
            model.state_dim()
        )));
    }
    let outputs: Vec<DVector<f64>> = trajectories.iter().flat_map(|t| t.y.iter().cloned()).collect();
    ArrivalParams::from_moments(&outputs)
}

/// Monte-Carlo curve of the expected objective of the scalar LTI system with
/// `theta` frozen on each grid point and `eta` minimized from a prior matched to the
/// output moments. All grid points share the same `n_mc` simulated datasets.
pub fn mc_expected_objective(
    model: &dyn ParametricModel,
    config: &McConfig,
    opts: &PemOptions,
) -> Result<McCurve> {
    use crate::data::extract_windows;
    use crate::model::BuiltinModel;
    use crate::sim::{simulate, SimConfig};

    if model.param_dim() != 1 || model.state_dim() != 1 || model.output_dim() != 1 {
        return Err(Error::InvalidArgument(
            "the expected-objective check needs the scalar LTI model".into(),
        ));
    }
    if config.theta_grid.is_empty() || config.n_mc == 0 || config.n_windows == 0 {
        return Err(Error::InvalidArgument("empty grid or no realizations".into()));
    }
    let frozen = PemOptions {
        optimize_theta: false,
        optimize_eta: true,
        ..*opts
    };
    let mut values = vec![Vec::with_capacity(config.n_mc); config.theta_grid.len()];
    for r in 0..config.n_mc {
        let sim = SimConfig {
            theta_star: Some(vec![config.theta_star]),
            length: Some(config.n_windows + config.m),
            ..SimConfig::new(BuiltinModel::LtiScalar, config.seed.wrapping_add(r as u64))
        };
        let trajectories = simulate(&sim)?;
        let windows = extract_windows(&trajectories, config.m, 1)?;
        let eta = output_moment_prior(model, &trajectories)?;
        for (g, &theta) in config.theta_grid.iter().enumerate() {
            let res = identify(&windows, model, &DVector::from_element(1, theta), &eta, &frozen)?;
            values[g].push(res.objective);
        }
    }
    let mean: Vec<f64> = values.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    let std_errs = values.iter().map(|v| std_err(v)).collect();
    let best = mean
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(McCurve {
        theta: config.theta_grid.clone(),
        argmin: config.theta_grid[best],
        mean,
        std_err: std_errs,
        values,
    })
}
