use std::path::PathBuf;

use nalgebra::DVector;
use zapstop::config::Experiment;
use zapstop::pipeline;
use zapstop::ExperimentConfig;

use crate::artifacts::{
    create_dir, fmt, load_record, load_records, output_dir, record_name, trajectory_name, write_csv, write_json,
    Artifact, CliError, CliResult, Manifest, MANIFEST,
};
use crate::{AnalyzeArgs, Common, OdeArgs, OracleArgs, ReadArgs, TrainArgs};

/// A command that ran to completion but whose result is a numerical
/// failure (aborted replicas, failed checks).
pub enum Outcome {
    Done,
    Failed(String),
}

fn load_config(common: &Common) -> CliResult<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    if let Some(m) = common.replicas {
        cfg.run.replicas = m;
    }
    cfg.validate()?;
    let out = output_dir(common.out.as_deref(), &cfg, &common.config);
    Ok((cfg, out))
}

fn records_dir(args: &ReadArgs, out: &std::path::Path) -> PathBuf {
    args.records.clone().unwrap_or_else(|| out.to_path_buf())
}

fn finite(exp: &Experiment, command: &str) -> CliResult<()> {
    match exp {
        Experiment::Finite { .. } => Ok(()),
        Experiment::Finance { .. } => Err(CliError::Usage(format!("{command} needs a finite chain"))),
    }
}

pub fn train(args: &TrainArgs) -> CliResult<Outcome> {
    let (cfg, out) = load_config(&args.common)?;
    let exp = cfg.resolve()?;
    let settings = cfg.learner_settings();
    let mut records = pipeline::train(&exp, &settings, cfg.run.replicas, cfg.run.seed)?;
    create_dir(&out)?;

    let config = cfg.to_json();
    let mut names = Vec::with_capacity(records.len());
    let mut aborted = Vec::new();
    for (m, record) in records.iter_mut().enumerate() {
        record.experiment = Some(config.clone());
        write_json(&out.join(record_name(m)), record)?;
        let mut header = vec!["n".to_string()];
        header.extend((0..record.final_theta.len()).map(|i| format!("theta_{i}")));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = record.snapshots.iter().map(|s| {
            std::iter::once(s.n.to_string())
                .chain(s.theta.iter().map(|&v| fmt(v)))
                .collect::<Vec<_>>()
        });
        write_csv(&out.join(trajectory_name(m)), &header, rows)?;
        names.push(record_name(m));
        if record.is_aborted() {
            aborted.push(m);
        }
    }
    let manifest = Manifest {
        version: zapstop::VERSION.into(),
        config,
        records: names,
        aborted: aborted.clone(),
    };
    write_json(&out.join(MANIFEST), &manifest)?;

    println!(
        "trained {} replica(s) of {} steps -> {}",
        records.len(),
        cfg.run.n_iterations,
        out.display()
    );
    if aborted.is_empty() {
        Ok(Outcome::Done)
    } else {
        let reasons: Vec<String> = aborted
            .iter()
            .map(|&m| {
                format!(
                    "replica {m}: {}",
                    records[m].diagnostics.aborted.as_deref().unwrap_or("")
                )
            })
            .collect();
        Ok(Outcome::Failed(format!(
            "{} replica(s) aborted\n{}",
            aborted.len(),
            reasons.join("\n")
        )))
    }
}

pub fn evaluate(args: &ReadArgs) -> CliResult<Outcome> {
    let (cfg, out) = load_config(&args.common)?;
    let records = load_records(&records_dir(args, &out))?;
    let exp = cfg.resolve()?;
    let summary = pipeline::evaluate(&exp, &records, &cfg.eval)?;
    create_dir(&out)?;

    let rows = summary
        .estimates
        .iter()
        .enumerate()
        .map(|(m, e)| vec![m.to_string(), fmt(e.mean), fmt(e.std_error)]);
    write_csv(&out.join("rewards.csv"), &["replica", "mean", "se"], rows)?;
    let rows = summary
        .histogram
        .rows()
        .map(|(lo, hi, c)| vec![fmt(lo), fmt(hi), c.to_string()]);
    write_csv(&out.join("reward_histogram.csv"), &["bin_lo", "bin_hi", "count"], rows)?;
    write_json(&out.join("evaluation.json"), &Artifact::new("evaluate", &cfg, &summary))?;

    println!("evaluated {} record(s): median value {}", records.len(), summary.median);
    Ok(Outcome::Done)
}

pub fn analyze(args: &AnalyzeArgs) -> CliResult<Outcome> {
    let (cfg, out) = load_config(&args.read.common)?;
    let records = load_records(&records_dir(&args.read, &out))?;
    let exp = cfg.resolve()?;
    let reference = match (&args.reference, &cfg.analysis.reference) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(p)) => Some(cfg.resolve_path(p)),
        (None, None) => None,
    };
    let reference: Option<DVector<f64>> = reference.map(|p| load_record(&p).map(|r| r.theta())).transpose()?;
    let output = pipeline::analyze(&exp, &records, &cfg.analysis, reference.as_ref())?;
    create_dir(&out)?;

    let rows = output
        .scaled_errors
        .iter()
        .enumerate()
        .map(|(k, &e)| vec![k.to_string(), fmt(e)]);
    write_csv(&out.join("scaled_errors.csv"), &["record", "scaled_error"], rows)?;
    let rows = output
        .histogram
        .rows()
        .map(|(lo, hi, c)| vec![fmt(lo), fmt(hi), c.to_string()]);
    write_csv(&out.join("scaled_histogram.csv"), &["bin_lo", "bin_hi", "count"], rows)?;
    write_json(&out.join("analysis.json"), &Artifact::new("analyze", &cfg, &output))?;

    let r = &output.report;
    println!("empirical trace {:.6e}", r.trace_empirical);
    if let Some(t) = r.trace_optimal {
        println!("optimal trace {t:.6e}");
    }
    if r.infinite_covariance {
        println!(
            "infinite asymptotic covariance: max Re eig(GA + I/2) = {:?}",
            r.max_real_eigenvalue
        );
    } else if let Some(t) = r.trace_theory {
        println!("predicted trace {t:.6e}");
    }
    for note in &r.notes {
        println!("note: {note}");
    }
    Ok(Outcome::Done)
}

pub fn oracle_check(args: &OracleArgs) -> CliResult<Outcome> {
    let (cfg, out) = load_config(&args.common)?;
    let exp = cfg.resolve()?;
    finite(&exp, "oracle-check")?;
    let Experiment::Finite { model, basis } = &exp else {
        unreachable!()
    };
    let report = pipeline::oracle_check(model, basis, args.samples, cfg.run.seed);
    create_dir(&out)?;
    write_json(
        &out.join("oracle_check.json"),
        &Artifact::new("oracle-check", &cfg, &report),
    )?;

    for c in &report.checks {
        let tag = if c.passed { "pass" } else { "FAIL" };
        println!("{tag} {}: {:.3e} (tolerance {:.0e})", c.name, c.worst, c.tolerance);
    }
    println!("contraction ratio {:.6}", report.contraction_ratio);
    if report.passed() {
        Ok(Outcome::Done)
    } else {
        Ok(Outcome::Failed("oracle checks failed".into()))
    }
}

pub fn ode_check(args: &OdeArgs) -> CliResult<Outcome> {
    let (cfg, out) = load_config(&args.read.common)?;
    let records = load_records(&records_dir(&args.read, &out))?;
    let exp = cfg.resolve()?;
    finite(&exp, "ode-check")?;
    let Experiment::Finite { model, basis } = &exp else {
        unreachable!()
    };
    let record = records
        .get(args.replica)
        .ok_or_else(|| CliError::Usage(format!("no record for replica {}", args.replica)))?;
    let output = pipeline::ode_check(model, basis, record, &cfg.analysis, args.b_horizon)?;
    create_dir(&out)?;

    let rows = output
        .profile
        .starts
        .iter()
        .zip(&output.profile.deviations)
        .map(|(&s, &d)| vec![fmt(s), fmt(d)]);
    write_csv(&out.join("ode_deviation.csv"), &["start", "deviation"], rows)?;
    write_json(&out.join("ode_check.json"), &Artifact::new("ode-check", &cfg, &output))?;

    println!("deviation ratio (last/first start) {:.4}", output.deviation_ratio);
    match output.b_decay_rate {
        Some(rate) => println!("b decay rate {rate:.4}"),
        None => println!("b decay rate unavailable: b(w) reached b* within the horizon"),
    }
    Ok(Outcome::Done)
}
