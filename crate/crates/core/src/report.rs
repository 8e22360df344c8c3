//! Emission of run artifacts: CSV tables for training logs, tuner traces,
//! backoffs and percentile bands, the satisfaction JSON report, and the run
//! manifest. Floats are written with Rust's shortest round-trip formatting,
//! so bodies are byte-identical across runs of the same seed.

use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::backoff::{EvaluationReport, TraceRow};
use crate::reinforce::TrainingHistory;
use crate::rollout::{BackoffMatrix, Trajectory};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("report encode failed: {0}")]
    Serde(#[from] serde_json::Error),
}

fn write_file(path: &Path, body: &str) -> Result<(), ReportError> {
    std::fs::write(path, body).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// training_log.csv: one row per epoch.
pub fn write_training_log(path: &Path, history: &TrainingHistory) -> Result<(), ReportError> {
    let mut body = String::from("epoch,mean_j_hat,mean_j,violation_rate,grad_norm\n");
    for e in history {
        body.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.mean_penalized, e.mean_objective, e.violation_rate, e.grad_norm
        ));
    }
    write_file(path, &body)
}

/// flb_convergence.csv: one row per tuner iteration.
pub fn write_flb_convergence(path: &Path, trace: &[TraceRow]) -> Result<(), ReportError> {
    let mut body = String::from("iteration,gamma,f_hat,f_lb,e_m,a,c,mean_objective\n");
    for row in trace {
        body.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.iteration,
            row.gamma,
            row.f_hat,
            row.f_lb,
            row.e,
            row.bracket_low,
            row.bracket_high,
            row.mean_objective
        ));
    }
    write_file(path, &body)
}

/// backoffs.csv: the applied backoff value of every (constraint, timestep)
/// cell at every iteration. Constraint and timestep indices are 1-based.
pub fn write_backoffs(path: &Path, per_iteration: &[BackoffMatrix]) -> Result<(), ReportError> {
    let mut body = String::from("iteration,constraint,timestep,b_value\n");
    for (iteration, matrix) in per_iteration.iter().enumerate() {
        for j in 0..matrix.constraint_count() {
            for t in 1..=matrix.horizon() {
                body.push_str(&format!("{},{},{},{}\n", iteration, j + 1, t, matrix.value(j, t)));
            }
        }
    }
    write_file(path, &body)
}

/// constraints.csv: per-timestep percentile bands of each constraint.
pub fn write_constraint_bands(path: &Path, report: &EvaluationReport) -> Result<(), ReportError> {
    let mut body = String::from("timestep,constraint,p02,p50,p98,mean\n");
    for (j, bands) in report.constraint_bands.iter().enumerate() {
        for (t_idx, band) in bands.iter().enumerate() {
            body.push_str(&format!(
                "{},{},{},{},{},{}\n",
                t_idx + 1,
                j + 1,
                band.p02,
                band.p50,
                band.p98,
                band.mean
            ));
        }
    }
    write_file(path, &body)
}

/// controls.csv: per-timestep percentile bands of each control.
pub fn write_control_bands(path: &Path, report: &EvaluationReport) -> Result<(), ReportError> {
    let mut body = String::from("timestep,control,p02,p50,p98,mean\n");
    for (i, bands) in report.control_bands.iter().enumerate() {
        for (t_idx, band) in bands.iter().enumerate() {
            body.push_str(&format!(
                "{},{},{},{},{},{}\n",
                t_idx,
                i + 1,
                band.p02,
                band.p50,
                band.p98,
                band.mean
            ));
        }
    }
    write_file(path, &body)
}

/// trajectories.csv: one row per (episode, t); control cells are empty at
/// the terminal step and constraint cells at t = 0.
pub fn write_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<(), ReportError> {
    let n_x = trajectories.first().map_or(0, |t| t.states[0].len());
    let n_u = trajectories.first().map_or(0, |t| t.controls.first().map_or(0, Vec::len));
    let n_g = trajectories.first().map_or(0, Trajectory::constraint_count);

    let mut header = String::from("episode,t");
    for i in 0..n_x {
        header.push_str(&format!(",x{i}"));
    }
    for i in 0..n_u {
        header.push_str(&format!(",u{i}"));
    }
    header.push_str(",reward");
    for j in 0..n_g {
        header.push_str(&format!(",g{j}"));
    }
    header.push('\n');

    let mut body = header;
    for (episode, traj) in trajectories.iter().enumerate() {
        for t in 0..traj.states.len() {
            body.push_str(&format!("{episode},{t}"));
            for v in &traj.states[t] {
                body.push_str(&format!(",{v}"));
            }
            for i in 0..n_u {
                if t < traj.controls.len() {
                    body.push_str(&format!(",{}", traj.controls[t][i]));
                } else {
                    body.push(',');
                }
            }
            body.push_str(&format!(",{}", traj.rewards[t]));
            for j in 0..n_g {
                if t >= 1 {
                    body.push_str(&format!(",{}", traj.constraints[t - 1][j]));
                } else {
                    body.push(',');
                }
            }
            body.push('\n');
        }
    }
    write_file(path, &body)
}

/// satisfaction.json contents.
#[derive(Debug, Serialize)]
pub struct SatisfactionReport {
    pub f_hat: f64,
    pub f_lb: f64,
    pub alpha: f64,
    pub epsilon: f64,
    pub samples: usize,
    pub mean_terminal: f64,
    pub std_terminal: f64,
    pub mean_objective: f64,
}

pub fn write_satisfaction(
    path: &Path,
    report: &EvaluationReport,
    alpha: f64,
) -> Result<(), ReportError> {
    let out = SatisfactionReport {
        f_hat: report.estimate.f_hat,
        f_lb: report.estimate.f_lb,
        alpha,
        epsilon: report.estimate.epsilon,
        samples: report.estimate.sample_count,
        mean_terminal: report.mean_terminal,
        std_terminal: report.std_terminal,
        mean_objective: report.mean_objective,
    };
    write_file(path, &serde_json::to_string_pretty(&out)?)
}

/// Run manifest, written with status "running" before the work starts and
/// rewritten with status "complete" and the output inventory afterwards.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub started_unix: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished_unix: Option<u64>,
    pub status: String,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn begin(command: &str, config_hash: &str, seed: u64) -> Self {
        Self {
            format_version: 1,
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            started_unix: unix_now(),
            finished_unix: None,
            status: "running".to_string(),
            outputs: Vec::new(),
        }
    }

    pub fn finalize(&mut self, outputs: Vec<PathBuf>) {
        self.finished_unix = Some(unix_now());
        self.status = "complete".to_string();
        self.outputs = outputs
            .into_iter()
            .map(|p| p.display().to_string())
            .collect();
    }

    pub fn write(&self, path: &Path) -> Result<(), ReportError> {
        let mut file = std::fs::File::create(path).map_err(|source| ReportError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let text = serde_json::to_string_pretty(self)?;
        file.write_all(text.as_bytes()).map_err(|source| ReportError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backoff::Band;
    use crate::stats::SatisfactionEstimate;

    fn sample_report() -> EvaluationReport {
        let band = Band {
            p02: -0.5,
            p50: -0.25,
            p98: 0.125,
            mean: -0.2,
        };
        EvaluationReport {
            estimate: SatisfactionEstimate {
                f_hat: 0.75,
                sample_count: 4,
                f_lb: 0.5,
                epsilon: 0.05,
            },
            mean_objective: 0.125,
            mean_terminal: 0.25,
            std_terminal: 0.0625,
            constraint_bands: vec![vec![band; 2]; 2],
            control_bands: vec![vec![band; 2]],
        }
    }

    #[test]
    fn csv_bodies_have_pinned_headers_and_parse_cleanly() {
        let dir = std::env::temp_dir().join("chance_rl_report_test");
        std::fs::create_dir_all(&dir).unwrap();

        let trace = vec![TraceRow {
            iteration: 0,
            gamma: 1.0,
            f_hat: 0.75,
            f_lb: 0.5,
            e: -0.49,
            bracket_low: 0.0,
            bracket_high: 2.0,
            mean_objective: 0.125,
        }];
        let path = dir.join("flb.csv");
        write_flb_convergence(&path, &trace).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iteration,gamma,f_hat,f_lb,e_m,a,c,mean_objective"
        );
        assert_eq!(lines.next().unwrap(), "0,1,0.75,0.5,-0.49,0,2,0.125");

        let path = dir.join("backoffs.csv");
        write_backoffs(
            &path,
            &[BackoffMatrix::from_base(vec![vec![0.5, 0.25]], 2.0)],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "iteration,constraint,timestep,b_value");
        assert_eq!(lines.next().unwrap(), "0,1,1,1");
        assert_eq!(lines.next().unwrap(), "0,1,2,0.5");

        let report = sample_report();
        let path = dir.join("constraints.csv");
        write_constraint_bands(&path, &report).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("timestep,constraint,p02,p50,p98,mean\n"));
        assert_eq!(text.lines().count(), 5);

        let path = dir.join("controls.csv");
        write_control_bands(&path, &report).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("timestep,control,p02,p50,p98,mean\n"));

        // Every emitted CSV line has the same comma count as its header.
        for file in ["flb.csv", "backoffs.csv", "constraints.csv", "controls.csv"] {
            let text = std::fs::read_to_string(dir.join(file)).unwrap();
            let commas = text.lines().next().unwrap().matches(',').count();
            for line in text.lines().skip(1) {
                assert_eq!(line.matches(',').count(), commas, "ragged row in {file}");
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn trajectory_dump_layout() {
        let dir = std::env::temp_dir().join("chance_rl_report_traj");
        std::fs::create_dir_all(&dir).unwrap();
        let traj = Trajectory {
            states: vec![vec![1.0, 2.0], vec![1.5, 2.5], vec![2.0, 3.0]],
            raw_controls: vec![vec![0.1], vec![0.2]],
            controls: vec![vec![0.1], vec![0.2]],
            rewards: vec![0.0, 0.0, 1.0],
            constraints: vec![vec![-0.5], vec![-0.25]],
            draw_id: 0,
            seed: 0,
        };
        let path = dir.join("trajectories.csv");
        write_trajectories(&path, &[traj]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "episode,t,x0,x1,u0,reward,g0");
        assert_eq!(lines[1], "0,0,1,2,0.1,0,");
        assert_eq!(lines[2], "0,1,1.5,2.5,0.2,0,-0.5");
        assert_eq!(lines[3], "0,2,2,3,,1,-0.25");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn manifest_lifecycle() {
        let dir = std::env::temp_dir().join("chance_rl_report_manifest");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("manifest.json");
        let mut manifest = RunManifest::begin("train", "abcd", 42);
        manifest.write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"status\": \"running\""));

        manifest.finalize(vec![dir.join("out.csv")]);
        manifest.write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"status\": \"complete\""));
        assert!(text.contains("out.csv"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
