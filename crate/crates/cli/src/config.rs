//! Flat `key = value` experiment configuration.
//!
//! Blank lines and text after `#` are ignored. Keys:
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `rows`, `cols` | 4, 4 | mesh size |
//! | `p_connect` | 0.4 | link probability |
//! | `dt` | 0.2 | discretization step |
//! | `d` | 3 | locality radius |
//! | `T` | 5 | horizon |
//! | `rho` | 1.0 | ADMM penalty |
//! | `eps_p`, `eps_d` | 1e-4 | ADMM tolerances |
//! | `max_iter` | 5000 | ADMM iteration cap |
//! | `workers` | 1 | subproblem threads |
//! | `noise` | `zero` | `zero`, `local` or `polytopic` |
//! | `norm` | `inf` | local norm for `noise = local` (`inf`, `1`, `2`) |
//! | `sigma` | 0.1 | disturbance size |
//! | `adversarial` | `true` | vertex-adversarial polytopic noise (else uniform) |
//! | `seed` | 0 | instance, initial state and noise seed |
//! | `controller` | `dlmpc` | `dlmpc`, `dlmpc_nominal`, `dlmpc_robust`, `oracle`, `both` |
//! | `steps` | 20 | closed-loop length |
//! | `theta_max`, `omega_max`, `u_max` | 2.0, 0.8, 1.5 | box bounds |
//! | `x0_scale` | 1.0 | `x0 ~ U[-x0_scale, x0_scale]` per state |
//! | `violation_tol` | 1e-3 | slack before a bound excursion counts |
//! | `sweep` | `N` | benchmark parameter: `N`, `d` or `T` |
//! | `values` | `16,36,64,121` | benchmark values (`N` must be square) |
//! | `seeds` | 5 | benchmark seeds `seed..seed+seeds` |
//! | `repeats` | 3 | timed repeats per configuration (minimum kept) |

use std::fmt;
use std::str::FromStr;

use dlmpc::constraints::LocalNorm;
use dlmpc::dlmpc::AdmmConfig;
use dlmpc::model::GridParams;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseChoice {
    Zero,
    Local,
    Polytopic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerChoice {
    Dlmpc,
    DlmpcNominal,
    DlmpcRobust,
    Oracle,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    N,
    D,
    T,
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::N => "N",
            SweepParam::D => "d",
            SweepParam::T => "T",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub rows: usize,
    pub cols: usize,
    pub p_connect: f64,
    pub dt: f64,
    pub d: usize,
    pub horizon: usize,
    pub rho: f64,
    pub eps_p: f64,
    pub eps_d: f64,
    pub max_iter: usize,
    pub workers: usize,
    pub noise: NoiseChoice,
    pub norm: LocalNorm,
    pub sigma: f64,
    pub adversarial: bool,
    pub seed: u64,
    pub controller: ControllerChoice,
    pub steps: usize,
    pub theta_max: f64,
    pub omega_max: f64,
    pub u_max: f64,
    pub x0_scale: f64,
    pub violation_tol: f64,
    pub sweep: SweepParam,
    pub values: Vec<usize>,
    pub seeds: u64,
    pub repeats: usize,
}

impl Default for Config {
    fn default() -> Self {
        let admm = AdmmConfig::default();
        Self {
            rows: 4,
            cols: 4,
            p_connect: 0.4,
            dt: 0.2,
            d: 3,
            horizon: 5,
            rho: admm.rho,
            eps_p: admm.eps_p,
            eps_d: admm.eps_d,
            max_iter: admm.max_iter,
            workers: 1,
            noise: NoiseChoice::Zero,
            norm: LocalNorm::Inf,
            sigma: 0.1,
            adversarial: true,
            seed: 0,
            controller: ControllerChoice::Dlmpc,
            steps: 20,
            theta_max: 2.0,
            omega_max: 0.8,
            u_max: 1.5,
            x0_scale: 1.0,
            violation_tol: 1e-3,
            sweep: SweepParam::N,
            values: vec![16, 36, 64, 121],
            seeds: 5,
            repeats: 3,
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| CliError::Config {
        key: key.to_string(),
        msg: format!("cannot parse {value:?}"),
    })
}

fn bad(key: &str, msg: impl Into<String>) -> CliError {
    CliError::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

impl Config {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.set_pair(line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` pair.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (key, value) = pair.split_once('=').ok_or_else(|| bad(pair.trim(), "expected key=value"))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        match key {
            "rows" => self.rows = num(key, v)?,
            "cols" => self.cols = num(key, v)?,
            "p_connect" => self.p_connect = num(key, v)?,
            "dt" => self.dt = num(key, v)?,
            "d" => self.d = num(key, v)?,
            "T" => self.horizon = num(key, v)?,
            "rho" => self.rho = num(key, v)?,
            "eps_p" => self.eps_p = num(key, v)?,
            "eps_d" => self.eps_d = num(key, v)?,
            "max_iter" => self.max_iter = num(key, v)?,
            "workers" => self.workers = num(key, v)?,
            "noise" => {
                self.noise = match v {
                    "zero" => NoiseChoice::Zero,
                    "local" => NoiseChoice::Local,
                    "polytopic" => NoiseChoice::Polytopic,
                    _ => return Err(bad(key, format!("unknown noise case {v:?}"))),
                }
            }
            "norm" => {
                self.norm = match v {
                    "inf" => LocalNorm::Inf,
                    "1" => LocalNorm::One,
                    "2" => LocalNorm::Two,
                    _ => return Err(bad(key, format!("unknown norm {v:?}"))),
                }
            }
            "sigma" => self.sigma = num(key, v)?,
            "adversarial" => self.adversarial = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "controller" => {
                self.controller = match v {
                    "dlmpc" => ControllerChoice::Dlmpc,
                    "dlmpc_nominal" => ControllerChoice::DlmpcNominal,
                    "dlmpc_robust" => ControllerChoice::DlmpcRobust,
                    "oracle" => ControllerChoice::Oracle,
                    "both" => ControllerChoice::Both,
                    _ => return Err(bad(key, format!("unknown controller {v:?}"))),
                }
            }
            "steps" => self.steps = num(key, v)?,
            "theta_max" => self.theta_max = num(key, v)?,
            "omega_max" => self.omega_max = num(key, v)?,
            "u_max" => self.u_max = num(key, v)?,
            "x0_scale" => self.x0_scale = num(key, v)?,
            "violation_tol" => self.violation_tol = num(key, v)?,
            "sweep" => {
                self.sweep = match v {
                    "N" => SweepParam::N,
                    "d" => SweepParam::D,
                    "T" => SweepParam::T,
                    _ => return Err(bad(key, format!("unknown sweep parameter {v:?}"))),
                }
            }
            "values" => {
                self.values = v.split(',').map(|s| num(key, s.trim())).collect::<Result<_, _>>()?;
            }
            "seeds" => self.seeds = num(key, v)?,
            "repeats" => self.repeats = num(key, v)?,
            _ => return Err(bad(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let positive = [
            ("rows", self.rows as f64),
            ("cols", self.cols as f64),
            ("T", self.horizon as f64),
            ("dt", self.dt),
            ("rho", self.rho),
            ("eps_p", self.eps_p),
            ("eps_d", self.eps_d),
            ("max_iter", self.max_iter as f64),
            ("workers", self.workers as f64),
            ("seeds", self.seeds as f64),
            ("repeats", self.repeats as f64),
            ("theta_max", self.theta_max),
            ("omega_max", self.omega_max),
            ("u_max", self.u_max),
        ];
        for (key, v) in positive {
            if !(v > 0.0) {
                return Err(bad(key, "must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.p_connect) {
            return Err(bad("p_connect", "must lie in [0, 1]"));
        }
        for (key, v) in [("sigma", self.sigma), ("x0_scale", self.x0_scale), ("violation_tol", self.violation_tol)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(key, "must be finite and nonnegative"));
            }
        }
        if self.values.is_empty() {
            return Err(bad("values", "needs at least one value"));
        }
        if self.sweep == SweepParam::N {
            for &n in &self.values {
                let side = (n as f64).sqrt().round() as usize;
                if side == 0 || side * side != n {
                    return Err(bad("values", format!("N = {n} is not a square mesh")));
                }
            }
        }
        if self.sweep == SweepParam::T && self.values.contains(&0) {
            return Err(bad("values", "horizon must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> GridParams {
        GridParams {
            rows: self.rows,
            cols: self.cols,
            p_connect: self.p_connect,
            dt: self.dt,
            seed: self.seed,
        }
    }

    pub fn admm(&self) -> AdmmConfig {
        AdmmConfig {
            rho: self.rho,
            eps_p: self.eps_p,
            eps_d: self.eps_d,
            max_iter: self.max_iter,
            warm_start: true,
            workers: self.workers,
        }
    }
}
