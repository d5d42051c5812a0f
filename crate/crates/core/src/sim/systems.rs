//! The three ground-truth dynamical systems, their frozen constants, unit
//! parameter sampling, observation maps and treatment-assignment models.
//!
//! Constants that the generating equations leave open are pinned here and
//! versioned with the dataset format; regenerating a dataset with the same
//! config and seed reproduces it byte for byte.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::sigmoid;

use super::DatasetKind;

/// Driven pendulum. Only the angle is observed; treatment injects energy
/// through a damped sinusoidal drive on the restoring term.
pub mod oscillator {
    /// Gravitational acceleration (m/s^2).
    pub const G: f64 = 9.81;
    /// Drive frequency of the exogenous input.
    pub const DRIVE_FREQ: f64 = 1.0;
    /// Exponential decay rate of the exogenous input.
    pub const DRIVE_DECAY: f64 = 0.5;
    /// Dose amplitude as a fraction of the initial angle.
    pub const DOSE_PER_ANGLE: f64 = 0.5;
    /// Initial angle range (rad).
    pub const THETA0_RANGE: (f64, f64) = (0.5, 1.5);
    /// Pendulum length range (m).
    pub const LENGTH_RANGE: (f64, f64) = (0.5, 4.5);

    pub const T_STAR: f64 = 5.0;
    pub const HORIZON: f64 = 15.0;
}

/// Reduced cardiovascular model: stroke volume, arterial and venous
/// pressures, and autonomic baroreflex tone. Treatment is a bell-shaped
/// fluid infusion. Observed: arterial pressure (mmHg) and heart rate (bpm).
pub mod cardio {
    /// Arterial compliance (ml/mmHg).
    pub const C_A: f64 = 4.0;
    /// Venous compliance (ml/mmHg).
    pub const C_V: f64 = 111.0;
    /// Peripheral resistance bounds (mmHg*s/ml) and disease offset.
    pub const R_TPR_MIN: f64 = 0.5335;
    pub const R_TPR_MAX: f64 = 2.134;
    pub const R_TPR_MOD: f64 = 0.0;
    /// Heart rate bounds (Hz).
    pub const F_HR_MIN: f64 = 2.0 / 3.0;
    pub const F_HR_MAX: f64 = 3.0;
    /// Baroreflex time constant (s), sigmoid width (1/mmHg) and set point.
    pub const TAU_BARO: f64 = 20.0;
    pub const K_WIDTH: f64 = 0.1838;
    pub const P_A_SET: f64 = 70.0;
    /// Fluid bolus peak (ml/s), its center and width (s after treatment).
    pub const FLUID_PEAK: f64 = 5.0;
    pub const FLUID_CENTER: f64 = 5.0;
    pub const FLUID_WIDTH: f64 = 5.0;
    /// Treatment-assignment normalization of arterial pressure.
    pub const P_A_MIN: f64 = 75.0;
    pub const P_A_WIDTH: f64 = 10.0;
    /// Hypotensive initial-state ranges.
    pub const SV0_RANGE: (f64, f64) = (55.0, 85.0);
    pub const PA0_RANGE: (f64, f64) = (72.0, 88.0);
    pub const PV0_RANGE: (f64, f64) = (3.0, 8.0);

    pub const T_STAR: f64 = 10.0;
    pub const HORIZON: f64 = 30.0;
}

/// Immune-response pharmacodynamics under a glucocorticoid. States: innate
/// response, drug in lung tissue, drug in plasma, viral load, adaptive
/// response. Observed: innate and adaptive responses; the innate response
/// is the outcome of interest. Treatment is a constant plasma injection.
pub mod dexa {
    pub const K_IR: f64 = 1.0;
    pub const K_PF: f64 = 0.1;
    pub const K_O: f64 = 1.0;
    pub const E_MAX: f64 = 1.0;
    pub const EC_50: f64 = 1.0;
    pub const H_P: f64 = 2.0;
    pub const K_2: f64 = 1.0;
    pub const K_3: f64 = 0.2;
    pub const K_DP: f64 = 1.0;
    pub const K_IIR: f64 = 1.0;
    pub const K_DC: f64 = 0.3;
    pub const H_C: f64 = 1.0;
    pub const K_1: f64 = 0.2;
    /// Constant plasma injection rate under treatment.
    pub const INJECTION: f64 = 10.0;
    /// Drug-sensitivity range; also the confounder.
    pub const K_DEX_RANGE: (f64, f64) = (1.0, 16.0);
    /// Initial viral load range.
    pub const Z4_0_RANGE: (f64, f64) = (0.5, 1.5);

    pub const T_STAR: f64 = 4.0;
    pub const HORIZON: f64 = 14.0;
}

/// Latent simulator parameters plus the initial state for one unit.
#[derive(Clone, Debug)]
pub struct Unit {
    pub params: BTreeMap<String, f64>,
    pub state0: Vec<f64>,
}

/// Draws one unit's latent parameters and initial state.
pub fn sample_unit(kind: DatasetKind, rng: &mut ChaCha8Rng) -> Unit {
    let mut params = BTreeMap::new();
    match kind {
        DatasetKind::Oscillator => {
            let theta0 = rng.random_range(oscillator::THETA0_RANGE.0..oscillator::THETA0_RANGE.1);
            let length = rng.random_range(oscillator::LENGTH_RANGE.0..oscillator::LENGTH_RANGE.1);
            params.insert("theta0".into(), theta0);
            params.insert("length".into(), length);
            params.insert("dose".into(), oscillator::DOSE_PER_ANGLE * theta0);
            Unit {
                params,
                state0: vec![theta0, 0.0],
            }
        }
        DatasetKind::Cardio => {
            let sv0 = rng.random_range(cardio::SV0_RANGE.0..cardio::SV0_RANGE.1);
            let pa0 = rng.random_range(cardio::PA0_RANGE.0..cardio::PA0_RANGE.1);
            let pv0 = rng.random_range(cardio::PV0_RANGE.0..cardio::PV0_RANGE.1);
            let s0 = sigmoid(-cardio::K_WIDTH * (pa0 - cardio::P_A_SET));
            params.insert("sv0".into(), sv0);
            params.insert("pa0".into(), pa0);
            params.insert("pv0".into(), pv0);
            Unit {
                params,
                state0: vec![sv0, pa0, pv0, s0],
            }
        }
        DatasetKind::Dexa => {
            let k_dex = rng.random_range(dexa::K_DEX_RANGE.0..dexa::K_DEX_RANGE.1);
            let z4_0 = rng.random_range(dexa::Z4_0_RANGE.0..dexa::Z4_0_RANGE.1);
            params.insert("k_dex".into(), k_dex);
            params.insert("z4_0".into(), z4_0);
            Unit {
                params,
                state0: vec![1.0, 0.0, 0.0, z4_0, 0.0],
            }
        }
    }
}

/// Exogenous drive of the treated oscillator arm, time measured from the
/// treatment instant; zero before it. Defined right-continuously at zero so
/// the post-treatment vector field is smooth on its whole segment and RK4
/// keeps full order there.
pub fn oscillator_drive(dose: f64, s: f64) -> f64 {
    if s < 0.0 {
        0.0
    } else {
        dose * (oscillator::DRIVE_FREQ * s).sin() * (-oscillator::DRIVE_DECAY * s).exp()
    }
}

/// Fluid infusion rate of the treated cardiovascular arm, time measured
/// from the treatment instant; zero before it, right-continuous at zero.
pub fn fluid_input(s: f64) -> f64 {
    if s < 0.0 {
        0.0
    } else {
        let z = (s - cardio::FLUID_CENTER) / cardio::FLUID_WIDTH;
        cardio::FLUID_PEAK * (-z * z).exp()
    }
}

fn r_tpr(s: f64) -> f64 {
    s * (cardio::R_TPR_MAX - cardio::R_TPR_MIN) + cardio::R_TPR_MIN + cardio::R_TPR_MOD
}

fn f_hr(s: f64) -> f64 {
    s * (cardio::F_HR_MAX - cardio::F_HR_MIN) + cardio::F_HR_MIN
}

/// Time derivative of the system, with the treated arm's exogenous input
/// active for t >= t_star. The treated and untreated vector fields coincide
/// for all t < t_star.
pub fn derivative(
    kind: DatasetKind,
    unit: &Unit,
    treated: bool,
    t_star: f64,
    t: f64,
    state: &[f64],
    out: &mut [f64],
) {
    match kind {
        DatasetKind::Oscillator => {
            let length = unit.params["length"];
            let u = if treated {
                oscillator_drive(unit.params["dose"], t - t_star)
            } else {
                0.0
            };
            out[0] = state[1];
            out[1] = (1.0 + u) * (-oscillator::G / length) * state[0].sin();
        }
        DatasetKind::Cardio => {
            let (sv, pa, pv, s) = (state[0], state[1], state[2], state[3]);
            let i_ext = if treated { fluid_input(t - t_star) } else { 0.0 };
            let dpa = (sv * f_hr(s) - (pa - pv) / r_tpr(s)) / cardio::C_A;
            out[0] = i_ext;
            out[1] = dpa;
            out[2] = (-cardio::C_A * dpa + i_ext) / cardio::C_V;
            out[3] = (sigmoid(-cardio::K_WIDTH * (pa - cardio::P_A_SET)) - s) / cardio::TAU_BARO;
        }
        DatasetKind::Dexa => {
            let (z1, z2, z3, z4, z5) = (state[0], state[1], state[2], state[3], state[4]);
            let k_dex = unit.params["k_dex"];
            let zp = z1.max(0.0).powf(dexa::H_P);
            out[0] = dexa::K_IR * z4 + dexa::K_PF * z4 * z1 - dexa::K_O * z1
                + dexa::E_MAX * zp / (dexa::EC_50.powf(dexa::H_P) + zp)
                - k_dex * z1 * z2;
            out[1] = -dexa::K_2 * z2 + dexa::K_3 * z3;
            out[2] = if treated && t >= t_star {
                dexa::INJECTION
            } else {
                -dexa::K_3 * z3
            };
            out[3] = dexa::K_DP * z4
                - dexa::K_IIR * z4 * z1
                - dexa::K_DC * z4 * z5.max(0.0).powf(dexa::H_C);
            out[4] = dexa::K_1 * z1;
        }
    }
}

/// Maps a latent state to the observed dimensions.
pub fn observe(kind: DatasetKind, state: &[f64], out: &mut [f64]) {
    match kind {
        DatasetKind::Oscillator => out[0] = state[0],
        DatasetKind::Cardio => {
            out[0] = state[1];
            out[1] = f_hr(state[3]) * 60.0;
        }
        DatasetKind::Dexa => {
            out[0] = state[0];
            out[1] = state[4];
        }
    }
}

/// True probability of receiving treatment given the unit's history.
pub fn treatment_probability(
    kind: DatasetKind,
    unit: &Unit,
    state_at_tstar: &[f64],
    gamma: f64,
) -> f64 {
    match kind {
        // assignment leans away from treatment for large initial angles:
        // P(T=0) = sigmoid(gamma * (theta0 - 1))
        DatasetKind::Oscillator => 1.0 - sigmoid(gamma * (unit.params["theta0"] - 1.0)),
        DatasetKind::Cardio => {
            let pa = state_at_tstar[1];
            sigmoid(gamma * ((pa - cardio::P_A_MIN) / cardio::P_A_WIDTH - 0.5))
        }
        // fixed coupling through drug sensitivity; gamma does not apply
        DatasetKind::Dexa => sigmoid((unit.params["k_dex"] - 1.0) / 15.0 - 0.5),
    }
}

/// Kind-specific sanity check on integrated states.
pub fn check_state(kind: DatasetKind, t: f64, state: &[f64]) -> Result<(), super::rk4::SimError> {
    if let DatasetKind::Cardio = kind {
        if state[1] < 0.0 || state[2] < 0.0 {
            return Err(super::rk4::SimError::RangeViolation {
                t,
                what: format!("negative pressure: Pa = {}, Pv = {}", state[1], state[2]),
            });
        }
    }
    Ok(())
}
