//! Batch front-end: load a system definition, evaluate geometry at point
//! sets, run the invariant suites, reduce nonholonomic problems and report
//! the shape-map eigenvalue condition.

use clap::{Parser, Subcommand};
use sode_geometry::report::{
    cmd_inspect, cmd_reduce, cmd_roots, cmd_verify, GeometryReport, SystemFile, TensorSelection,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "sode-geometry",
    version,
    about = "Connections, shape maps and invariant checks for second-order ODE systems with and without velocity constraints"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate tensors at the file's points (or sampled points) and emit a
    /// JSON report.
    Inspect {
        file: PathBuf,
        /// comma-separated subset of gamma,phi,k,curvature,torsion,connection,shape,chetaev
        #[arg(long)]
        tensors: Option<String>,
        /// jet order (2 or 3)
        #[arg(long, default_value_t = 2)]
        order: usize,
        /// points to sample when the file lists none
        #[arg(long, default_value_t = 50)]
        npoints: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// directory for CSV table export
        #[arg(long)]
        csv: Option<PathBuf>,
        /// overrides the file's seed
        #[arg(long)]
        seed: Option<u64>,
        /// test-only connection-coefficient perturbation
        #[arg(long, default_value_t = 0.0)]
        perturb: f64,
        /// attach wall-clock timing to the report (breaks byte-for-byte
        /// determinism)
        #[arg(long)]
        timing: bool,
    },
    /// Run the invariant suites at random in-domain points; exit code 0
    /// iff every residual is within tolerance.
    Verify {
        file: PathBuf,
        #[arg(long, default_value_t = 50)]
        npoints: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0.0)]
        perturb: f64,
    },
    /// Reduce a nonholonomic problem: forces, mass matrix, multipliers; a
    /// constrained-kind file is emitted when candidate closed forms verify.
    Reduce {
        file: PathBuf,
        #[arg(long, default_value_t = 50)]
        npoints: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// write the emitted constrained-kind system file here
        #[arg(long)]
        emit: Option<PathBuf>,
    },
    /// Eigencondition polynomial of the shape map and its real roots.
    Roots {
        file: PathBuf,
        #[arg(long, default_value_t = 50)]
        npoints: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_file(path: &Path, perturb: f64) -> Result<sode_geometry::report::LoadedFile, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "system".into());
    let file = SystemFile::from_json(&text).map_err(|e| e.to_string())?;
    file.load(&name, perturb).map_err(|e| e.to_string())
}

fn write_output(out: &Option<PathBuf>, json: &str) -> Result<(), String> {
    match out {
        Some(path) => std::fs::write(path, json)
            .map_err(|e| format!("cannot write {}: {e}", path.display())),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn csv_export(dir: &Path, report: &GeometryReport) -> Result<(), String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let mut files: std::collections::BTreeMap<&str, Vec<(usize, Vec<usize>, f64)>> =
        Default::default();
    let push2 = |name: &'static str,
                     files: &mut std::collections::BTreeMap<&str, Vec<(usize, Vec<usize>, f64)>>,
                     idx: usize,
                     t: &Option<Vec<Vec<f64>>>| {
        if let Some(t) = t {
            for (i, row) in t.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    files.entry(name).or_default().push((idx, vec![i, j], *v));
                }
            }
        }
    };
    let push3 = |name: &'static str,
                     files: &mut std::collections::BTreeMap<&str, Vec<(usize, Vec<usize>, f64)>>,
                     idx: usize,
                     t: &Option<Vec<Vec<Vec<f64>>>>| {
        if let Some(t) = t {
            for (i, block) in t.iter().enumerate() {
                for (j, row) in block.iter().enumerate() {
                    for (kk, v) in row.iter().enumerate() {
                        files
                            .entry(name)
                            .or_default()
                            .push((idx, vec![i, j, kk], *v));
                    }
                }
            }
        }
    };
    for (idx, p) in report.points.iter().enumerate() {
        push2("gamma", &mut files, idx, &p.tensors.gamma);
        push2("psi_ab", &mut files, idx, &p.tensors.psi_ab);
        push2("phi", &mut files, idx, &p.tensors.phi);
        push2("k", &mut files, idx, &p.tensors.k);
        push3("r", &mut files, idx, &p.tensors.r);
        push3("r_hat", &mut files, idx, &p.tensors.r_hat);
        push3("r_check", &mut files, idx, &p.tensors.r_check);
        push3("upsilon", &mut files, idx, &p.tensors.upsilon);
    }
    for (name, rows) in files {
        let path = dir.join(format!("{name}.csv"));
        let mut w = csv::Writer::from_path(&path)
            .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
        w.write_record(["point", "indices", "value"])
            .map_err(|e| e.to_string())?;
        for (idx, indices, v) in rows {
            let idxs = indices
                .iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            w.write_record([idx.to_string(), idxs, format!("{v:e}")])
                .map_err(|e| e.to_string())?;
        }
        w.flush().map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn run() -> Result<u8, String> {
    if let Ok(threads) = std::env::var("SODE_GEOMETRY_THREADS") {
        let n: usize = threads
            .parse()
            .map_err(|_| format!("SODE_GEOMETRY_THREADS={threads} is not a number"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    let cli = Cli::parse();
    match cli.command {
        Command::Inspect {
            file,
            tensors,
            order,
            npoints,
            out,
            csv,
            seed,
            perturb,
            timing,
        } => {
            if !(1..=3).contains(&order) {
                return Err(format!("--order {order} outside 1..=3"));
            }
            let loaded = load_file(&file, perturb)?;
            let sel = match tensors {
                Some(list) => TensorSelection::parse(&list).map_err(|e| e.to_string())?,
                None => TensorSelection::all(),
            };
            let seed = seed.unwrap_or_else(|| loaded.seed());
            let start = std::time::Instant::now();
            let mut report =
                cmd_inspect(&loaded, &sel, order, npoints, seed).map_err(|e| e.to_string())?;
            if timing {
                report.timing_ms = Some(start.elapsed().as_secs_f64() * 1e3);
            }
            if let Some(dir) = csv {
                csv_export(&dir, &report)?;
            }
            write_output(&out, &report.to_json())?;
            Ok(0)
        }
        Command::Verify {
            file,
            npoints,
            tol,
            out,
            seed,
            perturb,
        } => {
            let loaded = load_file(&file, perturb)?;
            let seed = seed.unwrap_or_else(|| loaded.seed());
            let report = cmd_verify(&loaded, npoints, seed).map_err(|e| e.to_string())?;
            let pass = report.passes(tol);
            for (name, value) in report.entries() {
                let mark = if value <= tol { "ok  " } else { "FAIL" };
                println!("{mark} {name:40} {value:.3e}");
            }
            println!(
                "{}: max residual {:.3e} (tolerance {:.1e})",
                if pass { "PASS" } else { "FAIL" },
                report.max_residual(),
                tol
            );
            if let Some(path) = out {
                let json = serde_json::json!({
                    "system": loaded.name,
                    "seed": seed,
                    "tolerance": tol,
                    "pass": pass,
                    "residuals": report.into_map(),
                });
                std::fs::write(&path, serde_json::to_string_pretty(&json).unwrap())
                    .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
            }
            Ok(if pass { 0 } else { 1 })
        }
        Command::Reduce {
            file,
            npoints,
            out,
            seed,
            emit,
        } => {
            let loaded = load_file(&file, 0.0)?;
            let seed = seed.unwrap_or_else(|| loaded.seed());
            let report = cmd_reduce(&loaded, npoints, seed).map_err(|e| e.to_string())?;
            if let Some(path) = emit {
                match &report.emitted {
                    Some(sys) => std::fs::write(
                        &path,
                        serde_json::to_string_pretty(sys).unwrap(),
                    )
                    .map_err(|e| format!("cannot write {}: {e}", path.display()))?,
                    None => {
                        return Err(match report.closed_form_residual {
                            Some(r) => format!(
                                "closed forms disagree with the reduction (residual {r:.3e}); nothing emitted"
                            ),
                            None => "no candidate closed forms in the file; nothing emitted".into(),
                        })
                    }
                }
            }
            write_output(&out, &serde_json::to_string_pretty(&report).unwrap())?;
            Ok(0)
        }
        Command::Roots {
            file,
            npoints,
            out,
            seed,
        } => {
            let loaded = load_file(&file, 0.0)?;
            let seed = seed.unwrap_or_else(|| loaded.seed());
            let report = cmd_roots(&loaded, npoints, seed).map_err(|e| e.to_string())?;
            write_output(&out, &serde_json::to_string_pretty(&report).unwrap())?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}
