use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use adaptqa_core::accounting::{self, RowSpec, TableReport};
use adaptqa_core::autograd::gradcheck::GradCheck;
use adaptqa_core::gradsuite::{composite_cases, faulty_case, op_cases};
use adaptqa_core::model::build_frozen;
use adaptqa_core::span::{generate_dataset, write_dataset};
use adaptqa_core::trainer::{evaluate, train, write_loss_csv};

use crate::error::{CliError, Result};
use crate::manifest::{ExperimentSpec, Manifest};
use crate::report::{run_header, CsvTable, ExperimentReport};

pub const COUNT_CSV: &str = "count.csv";
pub const REPORT_CSV: &str = "report.csv";
pub const PLOT_TRAIN_CSV: &str = "train_seconds_vs_f1.csv";
pub const PLOT_INFERENCE_CSV: &str = "inference_seconds_vs_f1.csv";
pub const PLOT_PARAMS_CSV: &str = "trainable_params_vs_f1.csv";

fn console(out: &mut dyn Write, text: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{text}").map_err(|e| CliError::io("stdout", e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))
}

/// Trainable-parameter table for every experiment, printed and written to `count.csv`.
pub fn cmd_count(manifest: &Manifest, out_dir: &Path, out: &mut dyn Write) -> Result<TableReport> {
    let rows: Vec<RowSpec> = manifest
        .experiments
        .iter()
        .map(|e| RowSpec {
            label: e.label.clone(),
            config: e.model.encoder.clone(),
            policy: e.policy,
            head: e.model.head,
        })
        .collect();
    let report = accounting::table_report(&rows).map_err(|e| CliError::from_core("count", e))?;
    console(out, report.to_table().trim_end())?;
    create_dir(out_dir)?;
    let path = out_dir.join(COUNT_CSV);
    std::fs::write(&path, report.to_csv()).map_err(|e| CliError::io(path.display(), e))?;
    Ok(report)
}

/// Build, freeze, train and evaluate one experiment; writes its loss CSV into `loss_dir`.
pub fn run_experiment(spec: &ExperimentSpec, loss_dir: &Path) -> Result<ExperimentReport> {
    let ctx = format!("experiment `{}`", spec.label);
    let core = |e| CliError::from_core(&ctx, e);
    let mut registry = build_frozen(&spec.model, &spec.policy, spec.train_seed()).map_err(core)?;
    let counted = accounting::count(&spec.model.encoder, &spec.policy, &spec.model.head)
        .map_err(core)?
        .trainable_under_policy;
    if counted != registry.trainable_count() {
        return Err(CliError::Runtime(format!(
            "{ctx}: closed-form count {counted} disagrees with the built model ({})",
            registry.trainable_count()
        )));
    }
    let train_set = generate_dataset(spec.train_seed(), &spec.data).map_err(core)?;
    let eval_set = generate_dataset(spec.eval_seed(), &spec.eval_data()).map_err(core)?;

    let outcome = train(&mut registry, &spec.model, &train_set, &spec.train).map_err(core)?;
    let eval = evaluate(&registry, &spec.model, &eval_set, &spec.train).map_err(core)?;

    create_dir(loss_dir)?;
    let path = loss_dir.join(format!("{}.losses.csv", spec.label));
    let file = File::create(&path).map_err(|e| CliError::io(path.display(), e))?;
    let mut writer = BufWriter::new(file);
    write_loss_csv(&mut writer, &outcome.losses).map_err(core)?;
    writer.flush().map_err(|e| CliError::io(path.display(), e))?;

    Ok(ExperimentReport {
        label: spec.label.clone(),
        layers_trained: spec.policy.top_layers_trainable,
        adapter_size: spec.model.encoder.adapter.map(|a| a.size),
        trainable_count: counted,
        em_percent: eval.em_percent,
        f1_percent: eval.f1_percent,
        train_seconds: outcome.train_seconds,
        inference_seconds: eval.inference_seconds,
        efficiency_ratio: eval.efficiency_ratio(counted).map_err(core)?,
    })
}

/// Runs every experiment whose label is not already in `<out_dir>/report.csv`.
///
/// The report is rewritten after each finished experiment, in manifest order,
/// so an interrupted or failed run can be resumed. With `parallel` the pending
/// experiments run on separate threads; their timings then include contention
/// and are not comparable with sequential runs.
pub fn cmd_run(manifest: &Manifest, out_dir: &Path, parallel: bool, out: &mut dyn Write) -> Result<CsvTable> {
    create_dir(out_dir)?;
    let path = out_dir.join(REPORT_CSV);
    let mut done: HashMap<String, Vec<String>> = HashMap::new();
    let mut extra = Vec::new();
    if path.exists() {
        let existing = CsvTable::read(&path)?;
        if existing.header != run_header() {
            return Err(CliError::Validation(format!(
                "{} exists but is not a run report (header `{}`)",
                path.display(),
                existing.header.join(",")
            )));
        }
        let labels: Vec<&str> = manifest.experiments.iter().map(|e| e.label.as_str()).collect();
        for row in existing.rows {
            if labels.contains(&row[0].as_str()) {
                done.insert(row[0].clone(), row);
            } else {
                extra.push(row);
            }
        }
    }

    let assemble = |done: &HashMap<String, Vec<String>>| {
        let mut table = CsvTable::new(run_header());
        table.rows = manifest
            .experiments
            .iter()
            .filter_map(|e| done.get(&e.label).cloned())
            .chain(extra.iter().cloned())
            .collect();
        table
    };
    let pending: Vec<&ExperimentSpec> = manifest
        .experiments
        .iter()
        .filter(|e| {
            let skip = done.contains_key(&e.label);
            if skip {
                let _ = writeln!(out, "{}: already in report, skipped", e.label);
            }
            !skip
        })
        .collect();
    let loss_dir = |spec: &ExperimentSpec| spec.out_dir.clone().unwrap_or_else(|| out_dir.to_path_buf());

    let mut failure = None;
    if parallel {
        let results: Vec<Result<ExperimentReport>> = std::thread::scope(|s| {
            let handles: Vec<_> = pending
                .iter()
                .map(|spec| {
                    let dir = loss_dir(spec);
                    s.spawn(move || run_experiment(spec, &dir))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Runtime("experiment thread panicked".into()))))
                .collect()
        });
        for result in results {
            match result {
                Ok(r) => {
                    progress(out, &r)?;
                    done.insert(r.label.clone(), r.to_record());
                }
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
        assemble(&done).write(&path)?;
    } else {
        assemble(&done).write(&path)?;
        for spec in pending {
            match run_experiment(spec, &loss_dir(spec)) {
                Ok(r) => {
                    progress(out, &r)?;
                    done.insert(r.label.clone(), r.to_record());
                    assemble(&done).write(&path)?;
                }
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(assemble(&done)),
    }
}

fn progress(out: &mut dyn Write, r: &ExperimentReport) -> Result<()> {
    console(
        out,
        format!(
            "{}: {} trainable, EM {:.1}, F1 {:.1}, train {:.2}s, inference {:.2}s",
            r.label,
            accounting::group_digits(r.trainable_count),
            r.em_percent,
            r.f1_percent,
            r.train_seconds,
            r.inference_seconds
        ),
    )
}

/// Worst result of one check across seeds.
#[derive(Debug, Clone)]
pub struct GradcheckLine {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Every op and composite check over `seeds` consecutive seeds starting at `seed`.
pub fn cmd_gradcheck(
    seed: u64,
    seeds: u64,
    tolerance: f64,
    inject_fault: bool,
    out: &mut dyn Write,
) -> Result<Vec<GradcheckLine>> {
    let mut cases = op_cases();
    cases.extend(composite_cases());
    if inject_fault {
        cases.push(faulty_case());
    }
    let mut lines = Vec::new();
    for case in &cases {
        let results: Vec<GradCheck> = (seed..seed + seeds)
            .map(|s| case.run(s, tolerance).map_err(|e| CliError::from_core(case.name, e)))
            .collect::<Result<_>>()?;
        let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        let passed = results.iter().all(GradCheck::passed);
        console(
            out,
            format!(
                "{} {:<34} max rel err {worst:.3e} over {seeds} seed(s)",
                if passed { "PASS" } else { "FAIL" },
                case.name
            ),
        )?;
        lines.push(GradcheckLine {
            name: case.name.to_string(),
            max_rel_error: worst,
            passed,
        });
    }
    let failed: Vec<&str> = lines.iter().filter(|l| !l.passed).map(|l| l.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(CliError::Runtime(format!(
            "gradient check failed for: {} (tolerance {tolerance:e})",
            failed.join(", ")
        )));
    }
    Ok(lines)
}

/// Projects report CSVs onto the three (x, F1) pairs used for plotting.
///
/// The trainable-parameter output is sorted by count ascending; the other two
/// keep input order.
pub fn cmd_plotdata(reports: &[PathBuf], out_dir: &Path, out: &mut dyn Write) -> Result<[CsvTable; 3]> {
    const COLUMNS: [&str; 5] = ["label", "trainable_params", "f1", "train_seconds", "inference_seconds"];
    let mut rows: Vec<(String, [String; 4])> = Vec::new();
    let mut sources: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for path in reports {
        let source = path.display().to_string();
        let table = CsvTable::read(path)?;
        let idx = table.require(&COLUMNS, &source)?;
        for (n, row) in table.rows.iter().enumerate() {
            let cell = |i: usize| -> Result<String> {
                match row.get(idx[i]) {
                    Some(v) if !v.is_empty() => Ok(v.clone()),
                    _ => Err(CliError::Validation(format!(
                        "{source}: row {} has no value for `{}`",
                        n + 1,
                        COLUMNS[i]
                    ))),
                }
            };
            let label = cell(0)?;
            sources.entry(label.clone()).or_default().push(source.clone());
            rows.push((label, [cell(1)?, cell(2)?, cell(3)?, cell(4)?]));
        }
    }
    let dupes: Vec<String> = sources
        .iter()
        .filter(|(_, s)| s.len() > 1)
        .map(|(l, s)| format!("{l} ({})", s.join(", ")))
        .collect();
    if !dupes.is_empty() {
        return Err(CliError::Validation(format!("duplicate labels: {}", dupes.join("; "))));
    }
    for (label, cells) in &rows {
        for (v, name) in cells.iter().zip(&COLUMNS[1..]) {
            if v.parse::<f64>().is_err() {
                return Err(CliError::Validation(format!("{label}: `{name}` value `{v}` is not a number")));
            }
        }
    }

    let project = |x: &str, xi: usize, rows: &[(String, [String; 4])]| {
        let mut t = CsvTable::new(vec!["label".into(), x.into(), "f1".into()]);
        t.rows = rows.iter().map(|(l, c)| vec![l.clone(), c[xi].clone(), c[1].clone()]).collect();
        t
    };
    let train = project("train_seconds", 2, &rows);
    let inference = project("inference_seconds", 3, &rows);
    let mut by_count = rows.clone();
    by_count.sort_by_key(|(_, c)| c[0].parse::<f64>().map(|v| v as u64).unwrap_or(u64::MAX));
    let params = project("trainable_params", 0, &by_count);

    create_dir(out_dir)?;
    for (table, name) in [(&train, PLOT_TRAIN_CSV), (&inference, PLOT_INFERENCE_CSV), (&params, PLOT_PARAMS_CSV)] {
        let path = out_dir.join(name);
        table.write(&path)?;
        console(out, format!("wrote {} ({} rows)", path.display(), table.rows.len()))?;
    }
    Ok([train, inference, params])
}

/// Writes each experiment's training and held-out sets as `<label>.train.tsv`
/// and `<label>.eval.tsv`.
pub fn cmd_generate_data(manifest: &Manifest, out_dir: &Path, out: &mut dyn Write) -> Result<()> {
    create_dir(out_dir)?;
    for spec in &manifest.experiments {
        let ctx = format!("experiment `{}`", spec.label);
        for (kind, seed, config) in [
            ("train", spec.train_seed(), spec.data),
            ("eval", spec.eval_seed(), spec.eval_data()),
        ] {
            let data = generate_dataset(seed, &config).map_err(|e| CliError::from_core(&ctx, e))?;
            let path = out_dir.join(format!("{}.{kind}.tsv", spec.label));
            let file = File::create(&path).map_err(|e| CliError::io(path.display(), e))?;
            let mut writer = BufWriter::new(file);
            write_dataset(&mut writer, &data).map_err(|e| CliError::from_core(&ctx, e))?;
            writer.flush().map_err(|e| CliError::io(path.display(), e))?;
            console(out, format!("wrote {} ({} examples)", path.display(), data.len()))?;
        }
    }
    Ok(())
}
