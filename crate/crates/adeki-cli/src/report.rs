//! Run artifacts: stage records, posterior tables, design-objective traces,
//! discrepancy trajectories, field-error tables, manifest, and a metrics
//! summary that is written atomically so a crash never leaves a torn file.

use crate::config::RunConfig;
use adeki::bayes::GridPosterior;
use adeki::error::{Error, Result};
use adeki::hybrid::{StageFieldErrors, StageRecord};
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Writes every artifact of one run into a single directory.
pub struct ArtifactWriter {
    dir: PathBuf,
}

impl ArtifactWriter {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// The manifest is the loaded config itself (overrides already applied),
    /// so a run is reproducible from this one file.
    pub fn write_manifest(&self, cfg: &RunConfig) -> Result<()> {
        let text = serde_json::to_string_pretty(cfg)?;
        fs::write(self.path("manifest.json"), text + "\n")?;
        Ok(())
    }

    pub fn write_records(&self, records: &[StageRecord]) -> Result<()> {
        let mut out = String::new();
        for rec in records {
            out.push_str(&serde_json::to_string(rec)?);
            out.push('\n');
        }
        fs::write(self.path("records.jsonl"), out)?;
        Ok(())
    }

    /// One posterior table per stage: node coordinates and probability mass.
    pub fn write_posterior(&self, stage: usize, post: &GridPosterior) -> Result<()> {
        let mut out = String::from("x,y,prob\n");
        for (i, &x) in post.xs.iter().enumerate() {
            for (j, &y) in post.ys.iter().enumerate() {
                out.push_str(&format!("{x:.6},{y:.6},{:.12e}\n", post.prob[[i, j]]));
            }
        }
        fs::write(self.path(&format!("posterior_stage_{stage}.csv")), out)?;
        Ok(())
    }

    /// Design-objective traces of the differentiable searches: one row per
    /// accepted ascent step, the objective being the ensemble information
    /// gain at the current design.
    pub fn write_objective_traces(&self, records: &[StageRecord]) -> Result<()> {
        let mut out = String::from("stage,step,objective\n");
        for rec in records {
            if let Some(trace) = &rec.ascent_objectives {
                for (k, v) in trace.iter().enumerate() {
                    out.push_str(&format!("{},{k},{v:.12e}\n", rec.stage));
                }
            }
        }
        fs::write(self.path("kl_traces.csv"), out)?;
        Ok(())
    }

    /// Discrepancy trajectory: one row per stage, one column per component
    /// (a single amplitude column for the scalar model, the full parameter
    /// vector for the network).
    pub fn write_discrepancy_trajectory(&self, records: &[StageRecord]) -> Result<()> {
        let width = records.iter().map(|r| r.disc_after.len()).max().unwrap_or(0);
        let mut out = String::from("stage");
        for k in 0..width {
            out.push_str(&format!(",theta_{k}"));
        }
        out.push('\n');
        for rec in records {
            out.push_str(&rec.stage.to_string());
            for v in &rec.disc_after {
                out.push_str(&format!(",{v:.12e}"));
            }
            out.push('\n');
        }
        fs::write(self.path("theta_trajectory.csv"), out)?;
        Ok(())
    }

    /// Field-error table: trained vs untrained model, per stage, over the
    /// whole reporting window and the local probe window.
    pub fn write_error_report(&self, report: &[StageFieldErrors]) -> Result<()> {
        let mut out = String::from("stage,variant,scope,mse,re\n");
        let mut row = |stage: usize, variant: &str, scope: &str, e: adeki::hybrid::ErrorRow| {
            out.push_str(&format!("{stage},{variant},{scope},{:.12e},{:.12e}\n", e.mse, e.re));
        };
        for s in report {
            for (variant, rows) in [("corrected", &s.corrected), ("uncorrected", &s.uncorrected)] {
                row(s.stage, variant, "total", rows.total);
                row(s.stage, variant, "local", rows.local);
                if let Some(next) = rows.next_local {
                    row(s.stage, variant, "next_local", next);
                }
            }
        }
        fs::write(self.path("error_report.csv"), out)?;
        Ok(())
    }

    /// Atomic write: serialize to a sibling temp file, then rename over the
    /// final name. Readers never observe a partial summary.
    pub fn write_summary(&self, summary: &RunSummary) -> Result<()> {
        let text = serde_json::to_string_pretty(summary)?;
        let tmp = self.path(".metrics_summary.json.tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(text.as_bytes())?;
            f.write_all(b"\n")?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.path("metrics_summary.json"))?;
        Ok(())
    }
}

/// Per-stage slice of the metrics summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub time: f64,
    pub d_g: [f64; 2],
    pub d_nn: Option<[f64; 2]>,
    pub eig_g: f64,
    pub eig_nn: Option<f64>,
    /// MAP distance to the truth after the physical update and at stage end.
    pub distance_mid: f64,
    pub distance_final: f64,
    pub sigma_eq_final: f64,
    pub train_final_loss: Option<f64>,
    pub network_flag: Option<String>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub n_stages: usize,
    pub truth: [f64; 2],
    pub final_map: [f64; 2],
    pub final_distance: f64,
    pub final_sigma_eq: f64,
    pub final_discrepancy: Vec<f64>,
    pub total_wall_secs: f64,
    pub stages: Vec<StageSummary>,
}

pub fn summarize(cfg: &RunConfig, records: &[StageRecord]) -> Result<RunSummary> {
    let last = records.last().ok_or_else(|| Error::Config("no stages were run".into()))?;
    let stages: Vec<StageSummary> = records
        .iter()
        .map(|r| StageSummary {
            stage: r.stage,
            time: r.time,
            d_g: [r.d_g.x, r.d_g.y],
            d_nn: r.d_nn.map(|d| [d.x, d.y]),
            eig_g: r.eig_g,
            eig_nn: r.eig_nn,
            distance_mid: r.metrics_mid.distance,
            distance_final: r.metrics_final.distance,
            sigma_eq_final: r.metrics_final.sigma_eq,
            train_final_loss: r.train_final_loss,
            network_flag: r.network_flag.clone(),
            wall_secs: r.wall_secs,
        })
        .collect();
    Ok(RunSummary {
        label: cfg.label.clone(),
        seed: cfg.seed,
        n_stages: records.len(),
        truth: [cfg.hybrid.truth.x, cfg.hybrid.truth.y],
        final_map: last.map_final,
        final_distance: last.metrics_final.distance,
        final_sigma_eq: last.metrics_final.sigma_eq,
        final_discrepancy: last.disc_after.clone(),
        total_wall_secs: records.iter().map(|r| r.wall_secs).sum(),
        stages,
    })
}
