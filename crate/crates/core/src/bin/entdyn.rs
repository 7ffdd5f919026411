//! `entdyn`: entropy summaries, run analysis, toy experiments and plot series.
//!
//! Exit codes: 0 on success, 1 for domain or statistical errors, 2 for I/O
//! and format errors (including bad command lines).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use entropy_dynamics::annotation::load_annotations;
use entropy_dynamics::protocols::{
    aggregate_runs, analyze_run, execute, BinSpec, Controls, ControlsList, Manifest,
};
use entropy_dynamics::report::{
    calibration_table, delta_table, entropy_tables, failure_index, main_correlation_table, plot_series,
    regression_table, stage_results, Bundle, Figure, Staged,
};
use entropy_dynamics::trajectory::ingest_log;
use entropy_dynamics::{Error, Result};

#[derive(Parser)]
#[command(name = "entdyn", version, about = "Annotation entropy versus per-example learning dynamics")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Replace every seed in a toy manifest.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Entropy bins: fixed:<lo>,<hi>, quartile or tercile.
    #[arg(long, global = true, value_parser = parse_bins)]
    bins: Option<BinSpec>,
    /// Covariates for the partial correlation, e.g. length,gold.
    #[arg(long, global = true, value_parser = parse_controls)]
    controls: Option<Controls>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Per-uid entropy and category, plus a category summary.
    Entropy { annotations: PathBuf },
    /// Correlation, category dynamics and regression for trajectory logs.
    Analyze {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(required = true)]
        logs: Vec<PathBuf>,
    },
    /// Run a toy-lab experiment manifest.
    Toy { manifest: PathBuf },
    /// Plot-ready series from an analysis bundle.
    Plotdata { bundle: PathBuf, figure: FigureArg },
}

#[derive(Clone, Copy, ValueEnum)]
enum FigureArg {
    Hero,
    Gradnorm,
    Cosine,
    Calibration,
    Cartography,
}

impl From<FigureArg> for Figure {
    fn from(f: FigureArg) -> Self {
        match f {
            FigureArg::Hero => Figure::Hero,
            FigureArg::Gradnorm => Figure::Gradnorm,
            FigureArg::Cosine => Figure::Cosine,
            FigureArg::Calibration => Figure::Calibration,
            FigureArg::Cartography => Figure::Cartography,
        }
    }
}

fn parse_bins(s: &str) -> std::result::Result<BinSpec, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_controls(s: &str) -> std::result::Result<Controls, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Entropy { annotations } => entropy(g, annotations),
        Command::Analyze { annotations, logs } => analyze(g, annotations, logs),
        Command::Toy { manifest } => toy(g, manifest),
        Command::Plotdata { bundle, figure } => plotdata(g, bundle, (*figure).into()),
    }
}

fn commit(staged: &Staged, out: &Path) -> Result<()> {
    for path in staged.commit(out)? {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn entropy(g: &Global, path: &Path) -> Result<()> {
    let loaded = load_annotations(path)?;
    for w in &loaded.warnings {
        eprintln!(
            "warning: line {}: `{}` stored gold {} differs from majority {}",
            w.line, w.uid, w.stored, w.recomputed
        );
    }
    let scheme = g.bins.unwrap_or_default().resolve_records(&loaded.records)?;
    let (per_uid, summary) = entropy_tables(&loaded.records, &scheme)?;
    let mut staged = Staged::default();
    staged.add_table("entropy.csv", &per_uid)?;
    staged.add_table("entropy_summary.csv", &summary)?;
    commit(&staged, &g.out)?;
    print!("{}", summary.to_csv()?);
    Ok(())
}

fn analyze(g: &Global, annotations: &Path, logs: &[PathBuf]) -> Result<()> {
    let records = load_annotations(annotations)?.records;
    let scheme = g.bins.unwrap_or_default().resolve_records(&records)?;
    let controls = g.controls.unwrap_or_default();
    let runs = logs
        .iter()
        .map(|p| ingest_log(p).and_then(|log| analyze_run(&records, &log, &scheme, &controls)))
        .collect::<Result<Vec<_>>>()?;
    let conditions = if runs.len() > 1 { aggregate_runs(&runs)? } else { Vec::new() };
    let main = main_correlation_table(&runs, &conditions)?;
    let mut staged = Staged::default();
    staged.add_table("main_correlation.csv", &main)?;
    staged.add_table("delta_by_category.csv", &delta_table(&runs, &conditions)?)?;
    staged.add_table("regression.csv", &regression_table(&runs)?)?;
    if runs.iter().any(|r| r.calibration.is_some()) {
        staged.add_table("calibration.csv", &calibration_table(&runs)?)?;
    }
    let bundle = Bundle {
        runs,
        conditions,
        verdicts: None,
    };
    staged.add_json("bundle.json", &bundle)?;
    commit(&staged, &g.out)?;
    print!("{}", main.to_csv()?);
    Ok(())
}

fn toy(g: &Global, path: &Path) -> Result<()> {
    let mut manifest = Manifest::load(path)?;
    if let Some(s) = g.seed {
        manifest.override_seed(s);
    }
    if let Some(b) = g.bins {
        manifest.bins = b;
    }
    if let Some(c) = g.controls {
        manifest.controls = ControlsList(c);
    }
    let outcome = match execute(&manifest) {
        Ok(o) => o,
        Err(e) => {
            let mut staged = Staged::default();
            staged.add_json("index.json", &failure_index(manifest.protocol.name(), &e))?;
            commit(&staged, &g.out)?;
            return Err(e);
        }
    };
    let (staged, index) = stage_results(&outcome)?;
    commit(&staged, &g.out)?;
    for run in &outcome.runs {
        let a = &run.analysis;
        println!(
            "{} n={} rho={:.4} p={:.3e} tau={:.4}",
            a.run_id, a.n, a.spearman.coefficient, a.spearman.p_value, a.kendall.coefficient
        );
    }
    for entry in index.runs.iter().filter(|e| e.status != "ok") {
        println!("{} FAILED: {}", entry.run_id, entry.error.as_deref().unwrap_or(""));
    }
    Ok(())
}

fn plotdata(g: &Global, bundle: &Path, figure: Figure) -> Result<()> {
    let bundle = Bundle::load(bundle)?;
    let table = plot_series(&bundle, figure)?;
    let mut staged = Staged::default();
    staged.add_table(format!("{}.csv", figure.name()), &table)?;
    commit(&staged, &g.out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn invoke(args: &[&str]) -> std::result::Result<(), i32> {
        let cli = Cli::try_parse_from(std::iter::once("entdyn").chain(args.iter().copied())).map_err(|e| e.exit_code())?;
        run(cli).map_err(|e| e.exit_code())
    }

    fn annotations(dir: &Path) -> PathBuf {
        let p = dir.join("ann.jsonl");
        fs::write(
            &p,
            concat!(
                "{\"uid\": \"a\", \"counts\": [100, 0, 0], \"text\": \"one two\"}\n",
                "{\"uid\": \"b\", \"counts\": [50, 30, 20], \"text\": \"one two three\"}\n",
                "{\"uid\": \"c\", \"counts\": [34, 33, 33], \"text\": \"one\"}\n",
            ),
        )
        .unwrap();
        p
    }

    fn s(p: &Path) -> &str {
        p.to_str().unwrap()
    }

    #[test]
    fn entropy_writes_rows_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let ann = annotations(dir.path());
        let out = dir.path().join("out");
        invoke(&["--out", s(&out), "entropy", s(&ann)]).unwrap();
        let per_uid = fs::read_to_string(out.join("entropy.csv")).unwrap();
        assert_eq!(per_uid.lines().count(), 4);
        assert!(per_uid.contains("c,1.09"));
        let summary = fs::read_to_string(out.join("entropy_summary.csv")).unwrap();
        assert!(summary.lines().any(|l| l.starts_with("all,3,")));
    }

    #[test]
    fn quartile_bins_give_four_way_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ann.jsonl");
        let lines: String = (0..8)
            .map(|i| format!("{{\"uid\": \"u{i}\", \"counts\": [{}, {}, 2]}}\n", 90 - 10 * i, 8 + 10 * i))
            .collect();
        fs::write(&p, lines).unwrap();
        let out = dir.path().join("out");
        invoke(&["--out", s(&out), "--bins", "quartile", "entropy", s(&p)]).unwrap();
        let text = fs::read_to_string(out.join("entropy.csv")).unwrap();
        let mut labels: Vec<&str> = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(labels, vec!["q1", "q2", "q3", "q4"]);
    }

    #[test]
    fn unreadable_input_exits_two_without_output() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        assert_eq!(invoke(&["--out", s(&out), "entropy", "/no/such/file"]), Err(2));
        assert!(!out.exists());
        let bad = dir.path().join("bad.jsonl");
        fs::write(&bad, "{\"uid\": \"a\", \"counts\": [1, 2]}\nnot json\n").unwrap();
        assert_eq!(invoke(&["--out", s(&out), "entropy", s(&bad)]), Err(2));
        assert!(!out.exists());
    }

    #[test]
    fn bad_flags_and_figures_exit_two() {
        assert_eq!(invoke(&["--bins", "octile", "entropy", "x"]), Err(2));
        assert_eq!(invoke(&["plotdata", "bundle.json", "histogram"]), Err(2));
        let err = Cli::try_parse_from(["entdyn", "plotdata", "b.json", "histogram"]).err().unwrap().to_string();
        for f in Figure::ALL {
            assert!(err.contains(f.name()), "{err}");
        }
    }

    fn toy_manifest(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("manifest.json");
        fs::write(&p, body).unwrap();
        p
    }

    const TINY: &str = r#""config": {"probe_size": 60, "bulk_size": 300, "epochs": 2, "log_every": 5, "pretrain_epochs": 1}"#;

    #[test]
    fn toy_train_then_analyze_and_plot() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy_manifest(dir.path(), &format!(r#"{{"protocol": "train", "seed": 42, {TINY}}}"#));
        let out = dir.path().join("run");
        invoke(&["--out", s(&out), "toy", s(&m)]).unwrap();
        let logs: Vec<_> = fs::read_dir(out.join("logs")).unwrap().collect();
        assert_eq!(logs.len(), 1);
        assert!(out.join("reports/train.csv").exists());
        let index = fs::read_to_string(out.join("index.json")).unwrap();
        assert!(index.contains("\"status\": \"ok\""));

        let log = out.join("logs/train-lowrank-r2-s42.jsonl");
        let ann = out.join("annotations-s42.jsonl");
        let an = dir.path().join("an");
        invoke(&["--out", s(&an), "--controls", "length,gold", "analyze", "--annotations", s(&ann), s(&log)]).unwrap();
        let main = fs::read_to_string(an.join("main_correlation.csv")).unwrap();
        assert!(main.lines().next().unwrap().contains("partial_rho"));
        assert_eq!(main.lines().count(), 2);
        for f in ["delta_by_category.csv", "regression.csv", "bundle.json"] {
            assert!(an.join(f).exists(), "{f}");
        }

        let plots = dir.path().join("plots");
        invoke(&["--out", s(&plots), "plotdata", s(&an.join("bundle.json")), "hero"]).unwrap();
        let bundle = Bundle::load(&an.join("bundle.json")).unwrap();
        let r = &bundle.runs[0];
        let hero = fs::read_to_string(plots.join("hero.csv")).unwrap();
        let rows = hero.lines().filter(|l| !l.starts_with('#')).count() - 1;
        assert_eq!(rows, r.hero.len() * r.steps.len());
        invoke(&["--out", s(&plots), "plotdata", s(&an.join("bundle.json")), "cartography"]).unwrap();
        let carto = fs::read_to_string(plots.join("cartography.csv")).unwrap();
        assert_eq!(carto.lines().count() - 1, r.n);
    }

    #[test]
    fn analyze_appends_seed_aggregate() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy_manifest(
            dir.path(),
            &format!(r#"{{"protocol": "matrix", "conditions": [{{"method": "lowrank", "rank": 2, "seeds": [1, 2, 3]}}], {TINY}}}"#),
        );
        let out = dir.path().join("run");
        invoke(&["--out", s(&out), "toy", s(&m)]).unwrap();
        // seeds share uids, so one annotation file joins every log
        let ann = out.join("annotations-s1.jsonl");
        let logs: Vec<String> = (1..=3).map(|k| s(&out.join(format!("logs/matrix-lowrank-r2-s{k}.jsonl"))).to_string()).collect();
        let an = dir.path().join("an");
        let mut args = vec!["--out", s(&an), "analyze", "--annotations", s(&ann)];
        args.extend(logs.iter().map(String::as_str));
        invoke(&args).unwrap();
        let main = fs::read_to_string(an.join("main_correlation.csv")).unwrap();
        let rows: Vec<&str> = main.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows.len(), 5);
        assert!(rows[4].starts_with("mean:lowrank-r2,"));
        let bundle = Bundle::load(&an.join("bundle.json")).unwrap();
        let rhos: Vec<f64> = bundle.runs.iter().map(|r| r.spearman.coefficient).collect();
        let agg = entropy_dynamics::stats::seed_aggregate(&rhos);
        assert_eq!(bundle.conditions[0].rho, agg);
    }

    #[test]
    fn manifest_errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy_manifest(dir.path(), r#"{"protocol": "train", "config": {"lr": "fast"}}"#);
        let out = dir.path().join("run");
        assert_eq!(invoke(&["--out", s(&out), "toy", s(&m)]), Err(2));
        match Manifest::load(&m).unwrap_err() {
            Error::Manifest { path, .. } => assert!(path.ends_with("config.lr"), "{path}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn failed_protocol_leaves_failure_index() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy_manifest(dir.path(), &format!(r#"{{"protocol": "noise", "fractions": [2.0], {TINY}}}"#));
        let out = dir.path().join("run");
        assert_eq!(invoke(&["--out", s(&out), "toy", s(&m)]), Err(1));
        let index = fs::read_to_string(out.join("index.json")).unwrap();
        assert!(index.contains("\"status\": \"failed\""));
    }

    #[test]
    fn toy_rerun_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy_manifest(dir.path(), &format!(r#"{{"protocol": "sweep", "ranks": [1, 2], {TINY}}}"#));
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        invoke(&["--out", s(&a), "toy", s(&m)]).unwrap();
        invoke(&["--out", s(&b), "toy", s(&m)]).unwrap();
        let mut files = Vec::new();
        for sub in ["logs", "reports"] {
            for e in fs::read_dir(a.join(sub)).unwrap() {
                files.push(Path::new(sub).join(e.unwrap().file_name()));
            }
        }
        assert_eq!(files.len(), 2 + 7);
        for f in files {
            assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{}", f.display());
        }
        let sweep = fs::read_to_string(a.join("reports/sweep.csv")).unwrap();
        assert!(sweep.contains("# monotonicity"));
    }
}
