//! `run`: one experiment, four output files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lss_core::analysis::{bvcl_diagnostics, estimate_sigma, estimate_zeta, hessian_top_eig, Report};
use lss_core::data::Dataset;
use lss_core::federation::{rounds_csv_string, run_experiment};
use lss_core::model::evaluate;
use lss_core::params::write_checkpoint;
use lss_core::seed;

use crate::config::ExperimentConfig;

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.txt";
pub const CHECKPOINT_FILE: &str = "final.lssw";
pub const CONFIG_FILE: &str = "config.toml";

const THREADS_VAR: &str = "LSS_THREADS";
const SIGMA_LABEL: u64 = 0x516A;
const HESSIAN_LABEL: u64 = 0x4E55;

/// Contents of a run directory, built fully in memory before anything is
/// written.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub rounds_csv: String,
    pub diagnostics: Report,
    pub checkpoint: Vec<u8>,
    pub config: String,
    pub final_accuracy: f64,
}

impl RunArtifacts {
    fn files(&self) -> [(&'static str, Vec<u8>); 4] {
        [
            (ROUNDS_FILE, self.rounds_csv.clone().into_bytes()),
            (DIAGNOSTICS_FILE, self.diagnostics.render().into_bytes()),
            (CHECKPOINT_FILE, self.checkpoint.clone()),
            (CONFIG_FILE, self.config.clone().into_bytes()),
        ]
    }
}

/// Worker count from `LSS_THREADS`, defaulting to the available cores.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .with_context(|| format!("{THREADS_VAR}={v} is not a positive integer"))?;
            if n == 0 {
                bail!("{THREADS_VAR} must be at least 1");
            }
            Ok(n)
        }
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn execute(cfg: &ExperimentConfig, threads: usize) -> Result<RunArtifacts> {
    cfg.validate()?;
    let exp = cfg.experiment();
    let out = run_experiment(&exp, threads)?;
    let spec = &out.data.spec;
    let test = &out.data.test;
    let last = out.records.last().context("run produced no rounds")?;
    let (init_loss, init_acc) = evaluate(&out.initial_model, spec, &test.batch())?;

    let mut report = Report::new();
    report
        .push("strategy", exp.federation.strategy)
        .push("rounds", exp.federation.rounds)
        .push("clients", out.data.clients.len())
        .push("master_seed", exp.federation.master_seed)
        .push("param_count", spec.param_count())
        .push("initial_test_accuracy", init_acc)
        .push("initial_test_loss", init_loss)
        .push("final_test_accuracy", last.global_test_accuracy)
        .push("final_test_loss", last.global_test_loss);

    let a = &cfg.analysis;
    let master = exp.federation.master_seed;
    let fin = &out.final_model;
    if a.zeta {
        report.push("zeta_hat", estimate_zeta(fin, spec, &out.data.clients)?);
    }
    if a.sigma {
        let pooled = Dataset::concat(&out.data.clients)?;
        let sigma = estimate_sigma(
            fin,
            spec,
            &pooled,
            exp.local.batch_size,
            a.sigma_draws,
            seed::derive(master, &[SIGMA_LABEL]),
        )?;
        report.push("sigma_hat", sigma);
    }
    if a.bvcl && out.last_client_models.len() >= 2 {
        let b = bvcl_diagnostics(&out.last_client_models, spec, test)?;
        report
            .push("bvcl_variance", b.variance)
            .push("bvcl_covariance", b.covariance)
            .push("bvcl_locality", b.locality);
    }
    if a.sharpness {
        let eig = hessian_top_eig(
            fin,
            spec,
            test,
            a.hessian_batch_size,
            a.hessian_iters,
            seed::derive(master, &[HESSIAN_LABEL]),
        )?;
        report.push("hessian_top_eig", eig);
    }

    let mut checkpoint = Vec::new();
    write_checkpoint(&mut checkpoint, fin, &spec.shape())?;
    Ok(RunArtifacts {
        rounds_csv: rounds_csv_string(&out.records, a.wall_time),
        diagnostics: report,
        checkpoint,
        config: cfg.to_toml()?,
        final_accuracy: last.global_test_accuracy,
    })
}

/// Writes the artifacts into `dir`, creating it if needed. Files are staged
/// under temporary names and renamed at the end; on failure, staged files
/// and any directories created here are removed.
pub fn write_artifacts(dir: &Path, art: &RunArtifacts) -> Result<()> {
    if dir.exists() && !dir.is_dir() {
        bail!("output path {} exists and is not a directory", dir.display());
    }
    let created = first_missing_ancestor(dir);
    let cleanup = |staged: &[PathBuf]| {
        for p in staged {
            let _ = fs::remove_file(p);
        }
        if let Some(root) = &created {
            let _ = fs::remove_dir_all(root);
        }
    };
    if let Err(e) = fs::create_dir_all(dir) {
        cleanup(&[]);
        return Err(e).with_context(|| format!("creating output directory {}", dir.display()));
    }

    let files = art.files();
    let mut staged = Vec::new();
    for (name, bytes) in &files {
        let tmp = dir.join(format!(".{name}.partial"));
        staged.push(tmp.clone());
        let res = fs::File::create(&tmp).and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        });
        if let Err(e) = res {
            cleanup(&staged);
            return Err(e).with_context(|| format!("writing {}", tmp.display()));
        }
    }
    for (tmp, (name, _)) in staged.iter().zip(&files) {
        if let Err(e) = fs::rename(tmp, dir.join(name)) {
            cleanup(&staged);
            return Err(e).with_context(|| format!("finalizing {name}"));
        }
    }
    Ok(())
}

fn first_missing_ancestor(dir: &Path) -> Option<PathBuf> {
    let mut missing = None;
    let mut cur = Some(dir);
    while let Some(p) = cur {
        if p.as_os_str().is_empty() || p.exists() {
            break;
        }
        missing = Some(p.to_path_buf());
        cur = p.parent();
    }
    missing
}

/// Runs `cfg` and writes its artifacts to `dir`.
pub fn cmd_run(cfg: &ExperimentConfig, dir: &Path, threads: usize) -> Result<RunArtifacts> {
    let art = execute(cfg, threads)?;
    write_artifacts(dir, &art)?;
    Ok(art)
}
