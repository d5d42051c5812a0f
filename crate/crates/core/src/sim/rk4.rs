//! Classical fourth-order Runge-Kutta integration on a fixed grid, with the
//! final partial step shortened to land exactly on the requested endpoint.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("physiological range violated at t = {t}: {what}")]
    RangeViolation { t: f64, what: String },
    #[error("invalid integration window: t0 = {t0}, t1 = {t1}, dt = {dt}")]
    BadWindow { t0: f64, t1: f64, dt: f64 },
    #[error("observation sampling failed: {0}")]
    Sampling(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// States recorded at every accepted step, including both endpoints.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn last_state(&self) -> &[f64] {
        self.states.last().expect("trajectory never empty")
    }
}

fn rk4_step(
    f: &mut dyn FnMut(f64, &[f64], &mut [f64]),
    t: f64,
    state: &[f64],
    dt: f64,
    scratch: &mut Scratch,
) {
    let n = state.len();
    let Scratch { k1, k2, k3, k4, tmp, out } = scratch;
    f(t, state, k1);
    for i in 0..n {
        tmp[i] = state[i] + 0.5 * dt * k1[i];
    }
    f(t + 0.5 * dt, tmp, k2);
    for i in 0..n {
        tmp[i] = state[i] + 0.5 * dt * k2[i];
    }
    f(t + 0.5 * dt, tmp, k3);
    for i in 0..n {
        tmp[i] = state[i] + dt * k3[i];
    }
    f(t + dt, tmp, k4);
    for i in 0..n {
        out[i] = state[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

struct Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
    out: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Scratch {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
            out: vec![0.0; n],
        }
    }
}

/// Integrates `dstate/dt = f(t, state)` from `t0` to `t1`, recording every
/// step. Aborts with the current time stamp if the state goes non-finite.
pub fn rk4_integrate(
    f: &mut dyn FnMut(f64, &[f64], &mut [f64]),
    state0: &[f64],
    t0: f64,
    t1: f64,
    dt: f64,
) -> Result<Trajectory, SimError> {
    if !(dt > 0.0) || !(t1 > t0) {
        return Err(SimError::BadWindow { t0, t1, dt });
    }
    let mut scratch = Scratch::new(state0.len());
    let mut times = vec![t0];
    let mut states = vec![state0.to_vec()];
    let mut t = t0;
    let mut state = state0.to_vec();
    // margin keeps t1 - t ~ 1e-15 leftovers from producing a spurious step
    while t < t1 - 1e-12 * dt.max(1.0) {
        let step = dt.min(t1 - t);
        rk4_step(f, t, &state, step, &mut scratch);
        state.copy_from_slice(&scratch.out);
        t += step;
        if state.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFinite { t });
        }
        times.push(t);
        states.push(state.clone());
    }
    // snap the recorded endpoint onto t1 exactly
    if let Some(last) = times.last_mut() {
        *last = t1;
    }
    Ok(Trajectory { times, states })
}

/// Integrates through an ascending list of checkpoint times, landing exactly
/// on each one, and returns the state at every checkpoint.
pub fn integrate_checkpoints(
    f: &mut dyn FnMut(f64, &[f64], &mut [f64]),
    state0: &[f64],
    t0: f64,
    checkpoints: &[f64],
    dt: f64,
) -> Result<Vec<Vec<f64>>, SimError> {
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut state = state0.to_vec();
    let mut t = t0;
    for &cp in checkpoints {
        if cp < t - 1e-12 {
            return Err(SimError::BadWindow { t0: t, t1: cp, dt });
        }
        if cp > t + 1e-12 {
            let traj = rk4_integrate(f, &state, t, cp, dt)?;
            state = traj.last_state().to_vec();
            t = cp;
        }
        out.push(state.clone());
    }
    Ok(out)
}
