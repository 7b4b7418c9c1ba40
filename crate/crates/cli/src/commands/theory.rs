use std::fmt::Write as _;

use anyhow::Result;
use serde::{Deserialize, Serialize};

use tda_core::theory::{
    check_bounds, dispersion_csv, run_dispersion_experiment, run_survivor_experiment, survivor_csv, BoundCheck,
    TrialConfig,
};
use tda_core::AttnParams;

use crate::{write_json, write_text, RunConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheorySummary {
    pub checks: Vec<BoundCheck>,
    pub passed: usize,
    pub failed: usize,
}

impl TheorySummary {
    pub fn all_passed(&self) -> bool {
        self.failed == 0
    }
}

fn gt(name: &str, observed: Option<f64>, limit: Option<f64>) -> BoundCheck {
    let (o, l) = (observed.unwrap_or(f64::NAN), limit.unwrap_or(f64::NAN));
    BoundCheck {
        name: name.to_string(),
        passed: o > l,
        observed: o,
        limit: l,
    }
}

fn lt(name: &str, observed: Option<f64>, limit: Option<f64>) -> BoundCheck {
    let (o, l) = (observed.unwrap_or(f64::NAN), limit.unwrap_or(f64::NAN));
    BoundCheck {
        name: name.to_string(),
        passed: o < l,
        observed: o,
        limit: l,
    }
}

/// Survivor bounds, the beta sweep and the dispersion trend.
pub fn cmd_verify_theory(cfg: &RunConfig) -> Result<TheorySummary> {
    let th = &cfg.theory;
    let out = &cfg.output_dir;
    cfg.write_snapshot(out)?;

    let stats = run_survivor_experiment(&th.trials, &th.noise)?;
    let mut checks = check_bounds(&stats, &th.trials.params, &th.noise);
    write_text(out, "survivors.csv", &survivor_csv(&stats))?;

    let mut sweep_csv = String::new();
    for &ratio in &th.beta_sweep {
        let params = AttnParams {
            beta: ratio * th.noise.sigma,
            ..th.trials.params
        };
        let trial_cfg = TrialConfig {
            rows: th.beta_sweep_rows.clone(),
            params,
            ..th.trials.clone()
        };
        let s = run_survivor_experiment(&trial_cfg, &th.noise)?;
        for mut c in check_bounds(&s, &params, &th.noise) {
            c.name = format!("beta/sigma={ratio}: {}", c.name);
            checks.push(c);
        }
        for line in survivor_csv(&s).lines() {
            if sweep_csv.is_empty() {
                let _ = writeln!(sweep_csv, "beta_over_sigma,{line}");
            } else if !line.starts_with('i') {
                let _ = writeln!(sweep_csv, "{ratio},{line}");
            }
        }
    }
    if !sweep_csv.is_empty() {
        write_text(out, "beta_sweep.csv", &sweep_csv)?;
    }

    if th.dispersion_rows.len() >= 2 {
        let disp_cfg = TrialConfig {
            rows: th.dispersion_rows.clone(),
            ..th.trials.clone()
        };
        let pts = run_dispersion_experiment(&disp_cfg, &th.noise)?;
        write_text(out, "dispersion.csv", &dispersion_csv(&pts))?;
        let (first, last) = (&pts[0], &pts[pts.len() - 1]);
        checks.push(lt(&format!("tra dispersion at i={} < i={}", last.i, first.i), last.tra, first.tra));
        checks.push(lt(&format!("tda dispersion at i={} < i={}", last.i, first.i), last.tda, first.tda));
        checks.push(gt(
            &format!("softmax dispersion at i={}", last.i),
            last.softmax,
            Some(th.softmax_dispersion_floor),
        ));
    }

    let mut bounds = String::from("name,passed,observed,limit\n");
    for c in &checks {
        let _ = writeln!(bounds, "\"{}\",{},{},{}", c.name, c.passed, c.observed, c.limit);
    }
    write_text(out, "bounds.csv", &bounds)?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    let summary = TheorySummary {
        passed: checks.len() - failed,
        failed,
        checks,
    };
    write_json(out, "summary.json", &summary)?;
    Ok(summary)
}
