//! Run configuration: a single JSON file drives every command, so a run is
//! reproducible from its config echo alone.
//!
//! The schema is fixed and unknown keys are rejected:
//!
//! ```text
//! {
//!   "model":     { "m": 1, "p": 3.0 },
//!   "grid":      { "L": 400.0, "n": 3201 },
//!   "time":      { "s0": 10.0, "s_end": 100.0, "ds": 0.005, "snap": 0.5 },
//!   "shrinking": { "A": 30.0, "K": 10.0 },
//!   "kernel":    { "Y": 18.0, "n_y": 1801, "j_max": 18 },
//!   "shoot":     { "box": 1.0, "max_iter": 54 },
//!   "output":    { "dir": "out/m1" }
//! }
//! ```
//!
//! `kernel.s_max` and `kernel.n_s` are optional and override the spectral
//! quadrature cutoff and node budget; left out, the oscillation rule picks
//! them from `j_max` and `Y`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::constants::ModelParams;
use crate::error::{Error, Result};
use crate::kernel::{QuadSpec, TableSpec};
use crate::modes::ShootSettings;
use crate::solver::SolverConfig;

/// Equation selector: derivative order 2m and nonlinearity power p.
#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub m: u32,
    pub p: f64,
}

/// Spatial grid: the domain is [-L, L] with n nodes.
#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(rename = "L")]
    pub l: f64,
    pub n: usize,
}

/// Rescaled-time window, step size, and snapshot spacing.
#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    pub s0: f64,
    pub s_end: f64,
    pub ds: f64,
    pub snap: f64,
}

/// Trapped-set size A and cut scale K.
#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ShrinkingSection {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "K")]
    pub k: f64,
}

/// Kernel table extent and quadrature overrides.
#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    #[serde(rename = "Y")]
    pub y: f64,
    pub n_y: usize,
    pub j_max: usize,
    #[serde(default)]
    pub s_max: Option<f64>,
    #[serde(default)]
    pub n_s: Option<usize>,
}

/// Shooting search: seed box half width and bisection depth per coordinate.
#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ShootSection {
    #[serde(rename = "box")]
    pub box_half: f64,
    pub max_iter: usize,
}

/// Where manifests, traces, snapshots, and plots land.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelSection,
    pub grid: GridSection,
    pub time: TimeSection,
    pub shrinking: ShrinkingSection,
    pub kernel: KernelSection,
    pub shoot: ShootSection,
    pub output: OutputSection,
}

impl Config {
    /// Parse from JSON text. Schema errors carry the serde message.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("config read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Canonical echo for manifests; key order is the struct order.
    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Baseline second-order configuration.
    pub fn default_m1() -> Self {
        Config {
            model: ModelSection { m: 1, p: 3.0 },
            grid: GridSection { l: 400.0, n: 3201 },
            time: TimeSection {
                s0: 10.0,
                s_end: 100.0,
                ds: 0.005,
                snap: 0.5,
            },
            shrinking: ShrinkingSection { a: 30.0, k: 10.0 },
            kernel: KernelSection {
                y: 18.0,
                n_y: 1801,
                j_max: 18,
                s_max: None,
                n_s: None,
            },
            shoot: ShootSection {
                box_half: 1.0,
                max_iter: 54,
            },
            output: OutputSection {
                dir: "out/m1".to_string(),
            },
        }
    }

    /// Baseline sixth-order configuration. The wider kernel table reflects
    /// the slow oscillatory tail of the sixth-order kernel; narrower tables
    /// fail the build-time mass check.
    pub fn default_m3() -> Self {
        Config {
            model: ModelSection { m: 3, p: 2.0 },
            grid: GridSection { l: 80.0, n: 4097 },
            time: TimeSection {
                s0: 20.0,
                s_end: 60.0,
                ds: 0.01,
                snap: 0.5,
            },
            shrinking: ShrinkingSection { a: 50.0, k: 10.0 },
            kernel: KernelSection {
                y: 48.0,
                n_y: 4801,
                j_max: 26,
                s_max: None,
                n_s: None,
            },
            shoot: ShootSection {
                box_half: 1.0,
                max_iter: 54,
            },
            output: OutputSection {
                dir: "out/m3".to_string(),
            },
        }
    }

    /// Check every cross-field constraint and return the model constants.
    /// First failure wins; the message names the offending key.
    pub fn validate(&self) -> Result<ModelParams> {
        let params = ModelParams::new(self.model.m, self.model.p)?;

        if !(self.grid.l > 0.0) || !self.grid.l.is_finite() {
            return Err(Error::Config(format!("grid.L = {} must be positive", self.grid.l)));
        }
        if self.grid.n < 3 || self.grid.n % 2 == 0 {
            return Err(Error::Config(format!(
                "grid.n = {} must be odd and at least 3 so the grid contains y = 0",
                self.grid.n
            )));
        }

        let t = &self.time;
        for (key, v) in [("s0", t.s0), ("s_end", t.s_end), ("ds", t.ds), ("snap", t.snap)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("time.{key} = {v} must be positive")));
            }
        }
        if t.s0 <= 1.0 {
            return Err(Error::Config(format!(
                "time.s0 = {} must exceed 1 (the mode bounds carry powers of 1/ln s and 1/s)",
                t.s0
            )));
        }
        if t.s_end <= t.s0 {
            return Err(Error::Config(format!(
                "time.s_end = {} must exceed s0 = {}",
                t.s_end, t.s0
            )));
        }
        let ratio = t.snap / t.ds;
        if (ratio - ratio.round()).abs() > 1e-6 * ratio || ratio < 1.0 {
            return Err(Error::Config(format!(
                "time.snap = {} must be an integer multiple of ds = {}",
                t.snap, t.ds
            )));
        }

        // Resolution rule: the profile varies on the scale y ~ s^(1/2m), so
        // the spacing must keep at least 20 nodes per unit of that scale at
        // the latest time reached.
        let h = 2.0 * self.grid.l / (self.grid.n - 1) as f64;
        let h_max = self.grid.l / (20.0 * t.s_end.powf(1.0 / (2.0 * self.model.m as f64)));
        if h > h_max {
            return Err(Error::Config(format!(
                "grid spacing h = {h:.4} exceeds L / (20 s_end^(1/2m)) = {h_max:.4}; \
                 the profile scale is unresolved at s_end"
            )));
        }

        if !(self.shrinking.a >= 1.0) || !self.shrinking.a.is_finite() {
            return Err(Error::Config(format!(
                "shrinking.A = {} must be at least 1",
                self.shrinking.a
            )));
        }
        if !(self.shrinking.k > 0.0) || !self.shrinking.k.is_finite() {
            return Err(Error::Config(format!(
                "shrinking.K = {} must be positive",
                self.shrinking.k
            )));
        }

        let kr = &self.kernel;
        if !(kr.y > 0.0) || !kr.y.is_finite() {
            return Err(Error::Config(format!("kernel.Y = {} must be positive", kr.y)));
        }
        if kr.n_y < 3 || kr.n_y % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel.n_y = {} must be odd and at least 3",
                kr.n_y
            )));
        }
        if kr.j_max < params.mode_cutoff {
            return Err(Error::Config(format!(
                "kernel.j_max = {} is below the tracked-mode cutoff M = {} for m = {}, p = {}",
                kr.j_max, params.mode_cutoff, self.model.m, self.model.p
            )));
        }
        if let Some(s_max) = kr.s_max {
            if !(s_max > 0.0) || !s_max.is_finite() {
                return Err(Error::Config(format!("kernel.s_max = {s_max} must be positive")));
            }
        }
        if let Some(n_s) = kr.n_s {
            if n_s < 6 {
                return Err(Error::Config(format!(
                    "kernel.n_s = {n_s} is below one quadrature panel (6 nodes)"
                )));
            }
        }

        if !(self.shoot.box_half >= 0.0) || self.shoot.box_half > self.shrinking.a {
            return Err(Error::Config(format!(
                "shoot.box = {} must lie in [0, A]",
                self.shoot.box_half
            )));
        }
        if self.shoot.max_iter == 0 {
            return Err(Error::Config("shoot.max_iter must be at least 1".to_string()));
        }

        if self.output.dir.is_empty() {
            return Err(Error::Config("output.dir must not be empty".to_string()));
        }
        Ok(params)
    }

    /// Non-fatal observations worth surfacing before a long run.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let two_m = 2.0 * self.model.m as f64;
        let scale = self.shrinking.k * self.time.s_end.powf(1.0 / two_m);
        if scale > 0.9 * self.grid.l {
            out.push(format!(
                "readout scale K s_end^(1/2m) = {scale:.1} exceeds 0.9 L = {:.1}; \
                 outer-region diagnostics will clip at the boundary",
                0.9 * self.grid.l
            ));
        }
        if self.kernel.y > self.grid.l {
            out.push(format!(
                "kernel table half width Y = {} exceeds the grid half width L = {}; \
                 projections only see the grid",
                self.kernel.y, self.grid.l
            ));
        }
        out
    }

    pub fn solver_config(&self) -> Result<SolverConfig> {
        let params = self.validate()?;
        Ok(SolverConfig::new(
            params,
            self.grid.l,
            self.grid.n,
            self.time.s0,
            self.time.ds,
        ))
    }

    /// Kernel table request; quadrature overrides applied on top of the
    /// oscillation rule.
    pub fn table_spec(&self) -> TableSpec {
        let quad = if self.kernel.s_max.is_some() || self.kernel.n_s.is_some() {
            let mut q = QuadSpec::auto(self.model.m, self.kernel.j_max, self.kernel.y);
            if let Some(s_max) = self.kernel.s_max {
                q.s_max = s_max;
            }
            if let Some(n_s) = self.kernel.n_s {
                q = q.with_total_nodes(n_s);
            }
            Some(q)
        } else {
            None
        };
        TableSpec {
            m: self.model.m,
            half_width: self.kernel.y,
            n_y: self.kernel.n_y,
            j_max: self.kernel.j_max,
            quad,
        }
    }

    pub fn shoot_settings(&self) -> ShootSettings {
        ShootSettings {
            box_half: self.shoot.box_half,
            max_iter: self.shoot.max_iter,
            snap: self.time.snap,
            ..ShootSettings::new(self.time.s_end)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        assert!(Config::default_m1().validate().is_ok());
        assert!(Config::default_m3().validate().is_ok());
        assert!(Config::default_m1().warnings().is_empty());
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = Config::default_m1();
        let echo = cfg.to_json_pretty();
        let back = Config::from_json(&echo).unwrap();
        assert_eq!(back.to_json_pretty(), echo);
    }

    #[test]
    fn renamed_keys_match_the_schema() {
        let echo = Config::default_m1().to_json_pretty();
        for key in ["\"L\"", "\"A\"", "\"K\"", "\"Y\"", "\"box\""] {
            assert!(echo.contains(key), "missing {key} in {echo}");
        }
        // Optional quadrature overrides stay optional in the echo.
        assert!(echo.contains("\"s_max\": null"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value =
            serde_json::from_str(&Config::default_m1().to_json_pretty()).unwrap();
        v["grid"]["spacing"] = 0.1.into();
        assert!(Config::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn even_order_is_rejected_with_the_curvature_reason() {
        let mut cfg = Config::default_m1();
        cfg.model.m = 2;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("odd m"), "{err}");
        assert!(err.contains("curvature"), "{err}");
    }

    #[test]
    fn cross_field_constraints_fire() {
        let mut cfg = Config::default_m1();
        cfg.time.snap = 0.5001;
        assert!(cfg.validate().is_err());

        let mut cfg = Config::default_m1();
        cfg.grid.n = 201;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("unresolved"), "{err}");

        let mut cfg = Config::default_m1();
        cfg.kernel.j_max = 4;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("cutoff"), "{err}");

        let mut cfg = Config::default_m1();
        cfg.shoot.box_half = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn quadrature_overrides_reach_the_table_spec() {
        let mut cfg = Config::default_m1();
        assert!(cfg.table_spec().quad.is_none());
        cfg.kernel.n_s = Some(600);
        let q = cfg.table_spec().quad.unwrap();
        assert_eq!(q.n_s(), 600);
        cfg.kernel.s_max = Some(3.5);
        assert_eq!(cfg.table_spec().quad.unwrap().s_max, 3.5);
    }

    #[test]
    fn shoot_settings_inherit_the_time_stanza() {
        let cfg = Config::default_m1();
        let st = cfg.shoot_settings();
        assert_eq!(st.s_end, cfg.time.s_end);
        assert_eq!(st.snap, cfg.time.snap);
        assert_eq!(st.box_half, cfg.shoot.box_half);
    }
}
