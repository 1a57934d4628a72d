use std::fs;
use std::path::{Path, PathBuf};

use fedfm_core::checks::{self, CheckOptions};
use fedfm_core::metrics::{accuracy, feature_quality, FeatureDump, FEATURE_SAMPLE_CAP};
use fedfm_core::{run_experiment, Scalar};

use crate::config::{ExperimentFile, Precision};
use crate::error::{CliError, CliResult};
use crate::output::{self, ComparisonRow, RunSummary};

/// Runs one experiment file and writes its outputs into `out_dir`.
pub fn run_to_dir(exp: &ExperimentFile, file: &Path, out_dir: &Path) -> CliResult<RunSummary> {
    match exp.precision {
        Precision::F32 => execute::<f32>(exp, file, out_dir),
        Precision::F64 => execute::<f64>(exp, file, out_dir),
    }
}

fn execute<T: Scalar>(exp: &ExperimentFile, file: &Path, out_dir: &Path) -> CliResult<RunSummary> {
    let (split, test) = exp.build_data::<T>(file)?;
    let cfg = &exp.federation;
    let outcome = run_experiment(cfg, &split, &test)?;
    let quality = feature_quality(&outcome.final_params, &test, cfg.seed)?;
    let dump = FeatureDump::from_model(&outcome.final_params, &test)?.subsample(FEATURE_SAMPLE_CAP, cfg.seed);
    let totals = outcome.ledger.totals();
    let summary = RunSummary {
        algorithm: cfg.algorithm.to_string(),
        seed: cfg.seed,
        data_seed: exp.data.seed,
        rounds: cfg.rounds,
        best_round: outcome.best_round,
        best_test_acc: outcome.best_test_acc,
        final_test_acc: accuracy(&outcome.final_params, &test)?.as_f64(),
        nmi: quality.nmi,
        silhouette: quality.silhouette,
        total_floats: totals.total_floats(),
        up_floats: totals.up_floats,
        down_floats: totals.down_floats,
        model_floats: totals.model_floats,
        anchor_floats: totals.anchor_floats,
        handshakes: totals.handshakes,
        model_rounds: totals.model_rounds,
        config_hash: exp.config_hash(),
    };

    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    output::write_rounds(&out_dir.join(output::ROUNDS_FILE), &outcome.records)?;
    output::write_ledger(&out_dir.join(output::LEDGER_FILE), &outcome.ledger)?;
    output::write_atomic(&out_dir.join(output::FEATURES_FILE), |w| Ok(dump.write_csv(w)?))?;
    output::write_json(&out_dir.join(output::SCHEMA_FILE), &output::schema())?;
    output::write_json(&out_dir.join(output::SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// `fedfm run <config>`.
pub fn cmd_run(config: &Path, output_root: Option<&Path>) -> CliResult<RunSummary> {
    let exp = ExperimentFile::load(config)?;
    eprintln!("# resolved configuration (defaults filled in)\n{}", exp.to_toml());
    let out_dir = exp.resolved_output_dir(output_root);
    let summary = run_to_dir(&exp, config, &out_dir)?;
    println!("{} -> {}", summary.line(), out_dir.display());
    Ok(summary)
}

/// `fedfm compare <configs...> --out <dir>`. Each run writes to
/// `<out>/<config stem>`; the joined table goes to `<out>` and stdout.
pub fn cmd_compare(configs: &[PathBuf], out: &Path) -> CliResult<Vec<ComparisonRow>> {
    let mut loaded = Vec::with_capacity(configs.len());
    for path in configs {
        let exp = ExperimentFile::load(path)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        if loaded.iter().any(|(s, _, _): &(String, _, _)| *s == stem) {
            return Err(CliError::Config {
                file: path.clone(),
                path: "(file name)".into(),
                message: format!("another config is also named `{stem}`; their outputs would collide"),
            });
        }
        loaded.push((stem, path.clone(), exp));
    }
    let seeds: Vec<u64> = loaded.iter().map(|(_, _, e)| e.data.seed).collect();
    if seeds.iter().any(|&s| s != seeds[0]) {
        eprintln!("warning: configs use different data seeds {seeds:?}; rows are not on the same data");
    }
    for (stem, _, exp) in &loaded {
        eprintln!("# {stem}\n{}", exp.to_toml());
    }

    let results: Vec<CliResult<RunSummary>> = std::thread::scope(|scope| {
        let handles: Vec<_> = loaded
            .iter()
            .map(|(stem, path, exp)| scope.spawn(move || run_to_dir(exp, path, &out.join(stem))))
            .collect();
        handles.into_iter().map(|h| h.join().expect("experiment thread panicked")).collect()
    });
    let mut rows = Vec::with_capacity(results.len());
    for ((stem, _, _), result) in loaded.iter().zip(results) {
        rows.push(ComparisonRow::new(stem.clone(), &result?));
    }

    output::write_csv_rows(&out.join(output::COMPARISON_CSV), &rows)?;
    let table = output::pretty_table(&rows);
    output::write_atomic(&out.join(output::COMPARISON_TXT), |w| {
        w.write_all(table.as_bytes()).map_err(|e| CliError::io(out, e))
    })?;
    print!("{table}");
    Ok(rows)
}

/// `fedfm check [config]`: the verification suite at small scale.
pub fn cmd_check(config: Option<&Path>, inject_fault: Option<String>) -> CliResult<()> {
    let seed = match config {
        Some(path) => ExperimentFile::load(path)?.federation.seed,
        None => 0,
    };
    println!("checks: {}", checks::ALL_CHECKS.join(", "));
    let outcomes = checks::run_checks(&CheckOptions { seed, inject_fault })?;
    let mut failed = Vec::new();
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
        if !o.passed {
            failed.push(o.name.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::ChecksFailed(failed))
    }
}
