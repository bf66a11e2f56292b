//! Thin CLI over the experiment harness.
//!
//! Subcommands: `run <config>`, `generate-data <config>`, `reference
//! <config>`, `report <trace>`. Exit codes: 0 success, 1 validation error,
//! 2 runtime error, 3 reference diagnostic failure. The environment variable
//! `PSRV_OUT_DIR` overrides the configured output directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use posterior_server::harness::{
    self, AlgorithmChoice, ExperimentConfig, HarnessError, OUTPUT_DIR_ENV,
};

fn usage() -> ExitCode {
    eprintln!(
        "usage: posterior-server <command> <path>\n\
         \n\
         commands:\n\
         \x20 run <config>            execute the configured experiment\n\
         \x20 generate-data <config>  write the synthetic dataset\n\
         \x20 reference <config>      compute the long-run MALA reference posterior\n\
         \x20 report <trace>          print the final metrics of a trace file"
    );
    ExitCode::from(1)
}

fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::parse_file(path)?;
    if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
        if !dir.is_empty() {
            cfg.output = PathBuf::from(dir);
        }
    }
    Ok(cfg)
}

fn cmd_run(path: &Path) -> Result<(), HarnessError> {
    let cfg = load_config(path)?;
    let summary = harness::run_experiment(&cfg)?;
    for (k, metrics) in summary.per_run.iter().enumerate() {
        for (name, value) in metrics {
            println!("run {k}: {name} = {value}");
        }
    }
    if summary.per_run.len() > 1 {
        for (name, value) in &summary.mean {
            println!("mean: {name} = {value}");
        }
    }
    for p in &summary.trace_paths {
        println!("trace: {}", p.display());
    }
    Ok(())
}

fn cmd_generate_data(path: &Path) -> Result<(), HarnessError> {
    let cfg = load_config(path)?;
    let out = harness::generate_data_command(&cfg)?;
    println!("dataset: {}", out.display());
    Ok(())
}

fn cmd_reference(path: &Path) -> Result<(), HarnessError> {
    let mut cfg = load_config(path)?;
    cfg.algorithm = AlgorithmChoice::ReferenceMala;
    let summary = harness::run_experiment(&cfg)?;
    for (name, value) in &summary.mean {
        println!("{name} = {value}");
    }
    for p in &summary.params_paths {
        println!("reference params: {}", p.display());
    }
    Ok(())
}

fn cmd_report(path: &Path) -> Result<(), HarnessError> {
    let records = harness::parse_trace(path)?;
    let mut finals = std::collections::BTreeMap::new();
    for r in &records {
        if r.event == "metric" {
            finals.insert(r.metric.clone(), (r.time_s, r.value));
        }
    }
    if finals.is_empty() {
        println!("no metric records in {}", path.display());
    }
    for (name, (time, value)) in finals {
        println!("{name} = {value} (at time_s {time})");
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    if args.len() != 3 {
        return usage();
    }
    let path = Path::new(&args[2]);
    let result = match args[1].as_str() {
        "run" => cmd_run(path),
        "generate-data" => cmd_generate_data(path),
        "reference" => cmd_reference(path),
        "report" => cmd_report(path),
        _ => return usage(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
