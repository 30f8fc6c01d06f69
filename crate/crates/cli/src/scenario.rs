//! Turns a [`Config`] into a concrete problem instance.

use dlmpc::constraints::{BoxBounds, ConstraintSpec, NoiseModel, Polytope, QuadraticCost};
use dlmpc::model::{generate_power_grid, locality_masks, LocalityMasks, SystemModel};
use dlmpc::netsim::{first_step_polytope, NoiseKind};
use dlmpc::textfmt::fmt_f64;
use dlmpc::Error;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, ControllerChoice, NoiseChoice};
use crate::CliError;

/// Offset separating the initial-state stream from the instance stream.
const X0_STREAM: u64 = 100;

/// Plant, constraints, cost, locality masks and initial state.
#[derive(Debug, Clone)]
pub struct Instance {
    pub model: SystemModel,
    /// Constraints carrying the disturbance model the robust controller is
    /// designed for.
    pub spec: ConstraintSpec,
    pub bounds: BoxBounds,
    pub cost: QuadraticCost,
    pub masks: LocalityMasks,
    pub x0: DVector<f64>,
}

/// Angle bounds on even states, frequency bounds on odd states.
pub fn box_bounds(cfg: &Config, model: &SystemModel) -> BoxBounds {
    let x_max = DVector::from_fn(model.n_states(), |k, _| if k % 2 == 0 { cfg.theta_max } else { cfg.omega_max });
    BoxBounds::symmetric(x_max, DVector::from_element(model.n_inputs(), cfg.u_max))
}

/// `x0 ~ U[-x0_scale, x0_scale]` per state.
pub fn initial_state(cfg: &Config, n: usize) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(X0_STREAM));
    DVector::from_fn(n, |_, _| cfg.x0_scale * rng.random_range(-1.0..1.0))
}

fn local_box(model: &SystemModel, horizon: usize, sigma: f64) -> Result<Polytope, Error> {
    let n = model.n_states();
    Polytope::local_box(model, horizon, &DVector::from_element(n, -sigma), &DVector::from_element(n, sigma))
}

/// Disturbance model for the configured noise case. With `zero_set` the
/// noise-free case is modeled as the degenerate box `{0}` instead of no
/// disturbance at all.
pub fn design_noise(cfg: &Config, model: &SystemModel, zero_set: bool) -> Result<NoiseModel, Error> {
    Ok(match cfg.noise {
        NoiseChoice::Zero if zero_set => NoiseModel::Polytope(local_box(model, cfg.horizon, 0.0)?),
        NoiseChoice::Zero => NoiseModel::None,
        NoiseChoice::Local => NoiseModel::LocalNormBound {
            norm: cfg.norm,
            sigma: cfg.sigma,
        },
        NoiseChoice::Polytopic => NoiseModel::Polytope(local_box(model, cfg.horizon, cfg.sigma)?),
    })
}

pub fn x0_to_text(x0: &DVector<f64>) -> String {
    let mut s = format!("x0 {}\n", x0.len());
    for v in x0.iter() {
        s.push_str(&fmt_f64(*v));
        s.push('\n');
    }
    s
}

pub fn x0_from_text(text: &str) -> Result<DVector<f64>, Error> {
    let mut lines = text.lines().enumerate();
    let n = match lines.next().map(|(_, l)| l.split_whitespace().collect::<Vec<_>>()) {
        Some(parts) if parts.len() == 2 && parts[0] == "x0" => dlmpc::textfmt::parse_num::<usize>(parts[1], 1)?,
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: "expected `x0 <length>`".into(),
            })
        }
    };
    let vals = lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| dlmpc::textfmt::parse_num::<f64>(l.trim(), i + 1))
        .collect::<Result<Vec<_>, _>>()?;
    if vals.len() != n {
        return Err(Error::Dimension(format!("x0 declares {n} entries, found {}", vals.len())));
    }
    Ok(DVector::from_vec(vals))
}

impl Instance {
    pub fn build(cfg: &Config) -> Result<Self, CliError> {
        let model = generate_power_grid(&cfg.grid())?.model;
        let bounds = box_bounds(cfg, &model);
        let noise = design_noise(cfg, &model, cfg.controller == ControllerChoice::DlmpcRobust)?;
        let spec = ConstraintSpec::boxes(&model, cfg.horizon, &bounds, noise)?;
        let x0 = initial_state(cfg, model.n_states());
        Self::from_parts(cfg, model, spec, x0)
    }

    pub fn from_parts(cfg: &Config, model: SystemModel, spec: ConstraintSpec, x0: DVector<f64>) -> Result<Self, CliError> {
        if spec.horizon() != cfg.horizon {
            return Err(CliError::Config {
                key: "T".into(),
                msg: format!("instance horizon is {}", spec.horizon()),
            });
        }
        if x0.len() != model.n_states() {
            return Err(Error::Dimension("x0 does not match the model".into()).into());
        }
        Ok(Self {
            bounds: box_bounds(cfg, &model),
            cost: QuadraticCost::identity(&model),
            masks: locality_masks(&model, cfg.d, cfg.horizon),
            model,
            spec,
            x0,
        })
    }

    /// Constraints handed to the controller: the nominal controller ignores
    /// the disturbance model, `dlmpc_robust` models the noise-free case as
    /// the zero set.
    pub fn controller_spec(&self, choice: ControllerChoice) -> Result<ConstraintSpec, Error> {
        match choice {
            ControllerChoice::DlmpcNominal => self.spec.with_noise(NoiseModel::None),
            ControllerChoice::DlmpcRobust if self.spec.noise == NoiseModel::None => {
                self.spec.with_noise(NoiseModel::Polytope(local_box(&self.model, self.spec.horizon(), 0.0)?))
            }
            _ => Ok(self.spec.clone()),
        }
    }

    /// Disturbance applied to the plant.
    pub fn plant_noise(&self, cfg: &Config) -> Result<NoiseKind, Error> {
        let n = self.model.n_states();
        Ok(match cfg.noise {
            NoiseChoice::Zero => NoiseKind::Zero,
            NoiseChoice::Local => NoiseKind::UniformLocal {
                norm: cfg.norm,
                sigma: cfg.sigma,
            },
            NoiseChoice::Polytopic => {
                let step = first_step_polytope(&local_box(&self.model, cfg.horizon, cfg.sigma)?, n);
                if cfg.adversarial {
                    NoiseKind::VertexAdversarial(step)
                } else {
                    NoiseKind::UniformPolytope(step)
                }
            }
        })
    }
}
