use std::error::Error;
use std::fs;
use std::path::Path;

use hsunmix::baseline::separate_unmix;
use hsunmix::io::{self, format_real};
use hsunmix::metrics::{evaluate, EvalReport};
use hsunmix::model::generate_synthetic;
use hsunmix::objective::tune_hyperparameters;
use hsunmix::{
    joint_unmix, par, AbundanceTrajectory, EndmemberTrajectory, FrameSequence, Hyperparams, Init, Matrix,
    ReferenceSpectra, SolverConfig, UnmixResult,
};
use serde_json::{json, Value};

use crate::args::{Command, CompareArgs, EvaluateArgs, GenerateArgs, JointArgs, SeparateArgs};

type Outcome<T = ()> = Result<T, Box<dyn Error>>;

const CONFIG_FILE: &str = "config.json";
const RESULT_FILE: &str = "result.json";
const SPECTRA_FILE: &str = "spectra.csv";
const TRACE_FILE: &str = "trace.csv";
const PERMUTATION_FILE: &str = "permutations.csv";

pub fn run(command: Command) -> Outcome {
    match command {
        Command::Generate(a) => generate(&a),
        Command::UnmixJoint(a) => unmix_joint(&a),
        Command::UnmixSeparate(a) => unmix_separate(&a),
        Command::Evaluate(a) => evaluate_dir(&a),
        Command::Compare(a) => compare(&a),
    }
}

fn write_json(path: &Path, value: &Value) -> Outcome {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn at<T, E: std::fmt::Display>(path: &Path, r: Result<T, E>) -> Outcome<T> {
    r.map_err(|e| format!("{}: {e}", path.display()).into())
}

fn read_json(path: &Path) -> Outcome<Option<Value>> {
    match fs::read_to_string(path) {
        Ok(text) => Ok(Some(at(path, serde_json::from_str(&text))?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn generate(args: &GenerateArgs) -> Outcome {
    let scenario = args.scenario.scenario(args.seed)?;
    let (x, truth) = generate_synthetic(&scenario)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    io::write_sequence(&args.out, &x)?;
    if let Some(dir) = &args.truth_dir {
        io::write_truth_dir(dir, &truth)?;
        let config = json!({
            "command": "generate",
            "out": args.out,
            "seed": args.seed,
            "scenario": args.scenario,
        });
        write_json(&dir.join(CONFIG_FILE), &config)?;
    }
    Ok(())
}

/// All frames side by side: row `l`, column `k * P + p`.
fn spectra_table(s: &EndmemberTrajectory) -> Matrix {
    let frames = s.frames();
    let (l, p) = frames[0].shape();
    Matrix::from_fn(l, frames.len() * p, |i, j| frames[j / p][(i, j % p)])
}

fn trace_csv(result: &UnmixResult) -> String {
    let mut out = String::from("iteration,objective,residual_s,residual_a\n");
    for (i, f) in result.objective_trace.iter().enumerate() {
        let residuals = match i.checked_sub(1).and_then(|j| result.steps.get(j)) {
            Some(step) => format!("{},{}", format_real(step.residual_s), format_real(step.residual_a)),
            None => ",".into(),
        };
        out.push_str(&format!("{i},{},{residuals}\n", format_real(*f)));
    }
    out
}

fn write_graymaps(dir: &Path, a: &AbundanceTrajectory, size: Option<(usize, usize)>) -> Outcome {
    if let Some((w, h)) = size {
        for (k, ak) in a.frames().iter().enumerate() {
            io::export_abundance_pgm(ak, w, h, &dir.join(format!("abundance_k{}", k + 1)))?;
        }
    }
    Ok(())
}

fn write_result_files(dir: &Path, result: &UnmixResult, size: Option<(usize, usize)>) -> Outcome {
    io::write_estimate_dir(dir, &result.s, &result.a, &result.psi)?;
    io::write_matrix_csv(&dir.join(SPECTRA_FILE), &spectra_table(&result.s))?;
    write_graymaps(dir, &result.a, size)
}

fn run_summary(result: &UnmixResult) -> Value {
    json!({
        "converged": result.converged,
        "outer_iterations": result.outer_iterations,
        "objective": result.objective_trace.last(),
        "residual_s": result.residual_s,
        "residual_a": result.residual_a,
    })
}

fn load_init(choice: &str) -> Outcome<Init> {
    if choice == "default" {
        return Ok(Init::Default);
    }
    let dir = Path::new(choice);
    let (s, a, psi) = at(dir, io::read_estimate_dir(dir))?;
    Ok(Init::Given { s, a, psi })
}

fn unmix_joint(args: &JointArgs) -> Outcome {
    let x = at(&args.input, io::read_sequence(&args.input))?;
    let s0 = at(&args.s0, io::read_reference_csv(&args.s0))?;
    let h = args.solver.apply(Hyperparams::default());
    let cfg = SolverConfig { h: h.clone(), init: load_init(&args.init)?, record_trace: true };
    let result = joint_unmix(&x, &s0, &cfg)?;

    let dir = &args.out_dir;
    write_result_files(dir, &result, args.width.zip(args.height))?;
    fs::write(dir.join(TRACE_FILE), trace_csv(&result))?;
    let report = json!({
        "command": "unmix-joint",
        "input": args.input,
        "s0": args.s0,
        "init": args.init,
        "hyperparams": h,
        "threads": par::current_threads(),
        "result": run_summary(&result),
    });
    write_json(&dir.join(RESULT_FILE), &report)?;
    if !result.converged {
        eprintln!("warning: stopped at the outer iteration cap ({}) before converging", h.max_outer);
    }
    Ok(())
}

fn unmix_separate(args: &SeparateArgs) -> Outcome {
    let x = at(&args.input, io::read_sequence(&args.input))?;
    let s_ref = at(&args.s_ref, io::read_reference_csv(&args.s_ref))?;
    let (result, perms) = separate_unmix(&x, args.p, &s_ref)?;

    let dir = &args.out_dir;
    write_result_files(dir, &result, args.width.zip(args.height))?;
    fs::write(dir.join(PERMUTATION_FILE), permutation_csv(&perms.frames))?;
    let report = json!({
        "command": "unmix-separate",
        "input": args.input,
        "p": args.p,
        "s_ref": args.s_ref,
        "seed": args.seed,
        "threads": par::current_threads(),
        "result": {
            "converged": result.converged,
            "data_fit": result.objective_trace.first(),
        },
    });
    write_json(&dir.join(RESULT_FILE), &report)
}

/// One line per frame; entry `i` is the 1-based reference index of estimated source `i`.
fn permutation_csv(frames: &[Vec<usize>]) -> String {
    frames.iter().map(|perm| perm.iter().map(|j| (j + 1).to_string()).collect::<Vec<_>>().join(",") + "\n").collect()
}

fn report_json(r: &EvalReport) -> Value {
    json!({
        "e_S": r.e_s,
        "e_A": r.e_a,
        "e_psi": r.e_psi,
        "e_S_per_frame": r.e_s_per_frame,
        "e_A_per_frame": r.e_a_per_frame,
        "spectral_angles": r.spectral_angles,
    })
}

fn evaluate_dir(args: &EvaluateArgs) -> Outcome {
    let (s, a, psi) = at(&args.est_dir, io::read_estimate_dir(&args.est_dir))?;
    let (s_true, a_true, psi_true) = at(&args.truth_dir, io::read_estimate_dir(&args.truth_dir))?;
    let report = evaluate(&s, &a, &psi, &s_true, &a_true, &psi_true)?;
    let mut value = report_json(&report);
    value["config"] = json!({
        "est_dir": args.est_dir,
        "truth_dir": args.truth_dir,
        "estimate": read_json(&args.est_dir.join(RESULT_FILE))?,
        "truth": read_json(&args.truth_dir.join(CONFIG_FILE))?,
    });
    if let Some(parent) = args.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_json(&args.report, &value)
}

struct Trial {
    seed: u64,
    joint: EvalReport,
    joint_outer: usize,
    separate: EvalReport,
}

fn run_trial(
    x: &FrameSequence,
    truth: &hsunmix::GroundTruth,
    s0: &ReferenceSpectra,
    h: &Hyperparams,
) -> Outcome<(EvalReport, usize, EvalReport)> {
    let cfg = SolverConfig { h: h.clone(), init: Init::Default, record_trace: false };
    let joint = joint_unmix(x, s0, &cfg)?;
    let (sep, _) = separate_unmix(x, s0.sources(), s0)?;
    let score = |r: &UnmixResult| evaluate(&r.s, &r.a, &r.psi, &truth.s, &truth.a, &truth.psi);
    Ok((score(&joint)?, joint.outer_iterations, score(&sep)?))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn compare(args: &CompareArgs) -> Outcome {
    if args.trials == 0 {
        return Err("--trials must be at least 1".into());
    }
    let base = match (&args.solver.lambda_s, args.solver.lambda_a) {
        (Some(_), Some(_)) => Hyperparams::default(),
        _ => {
            let (lambda_s, lambda_a) =
                tune_hyperparameters(args.scenario.sigma_e, args.scenario.sigma_v, args.scenario.b)?;
            Hyperparams::with_lambdas(lambda_s, lambda_a)
        }
    };
    let h = args.solver.apply(base);

    let mut trials = Vec::with_capacity(args.trials);
    for t in 0..args.trials {
        let seed = args.seed + t as u64;
        let (x, truth) = generate_synthetic(&args.scenario.scenario(seed)?)?;
        let (joint, joint_outer, separate) = run_trial(&x, &truth, &truth.s0, &h)?;
        eprintln!(
            "trial {t} (seed {seed}): joint e_S {:.4} e_A {:.4} | separate e_S {:.4} e_A {:.4}",
            joint.e_s, joint.e_a, separate.e_s, separate.e_a
        );
        trials.push(Trial { seed, joint, joint_outer, separate });
    }

    let mut out = String::from(
        "trial,seed,joint_e_S,joint_e_A,joint_e_psi,joint_outer_iterations,separate_e_S,separate_e_A,separate_e_psi\n",
    );
    let columns: Vec<Vec<f64>> = trials
        .iter()
        .map(|t| {
            vec![
                t.joint.e_s,
                t.joint.e_a,
                t.joint.e_psi,
                t.joint_outer as f64,
                t.separate.e_s,
                t.separate.e_a,
                t.separate.e_psi,
            ]
        })
        .collect();
    for (i, (t, row)) in trials.iter().zip(&columns).enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format_real(*v)).collect();
        out.push_str(&format!("{i},{},{}\n", t.seed, cells.join(",")));
    }
    let stats: Vec<(f64, f64)> = (0..columns[0].len())
        .map(|j| mean_std(&columns.iter().map(|r| r[j]).collect::<Vec<_>>()))
        .collect();
    let mean: Vec<String> = stats.iter().map(|s| format_real(s.0)).collect();
    let std: Vec<String> = stats.iter().map(|s| format_real(s.1)).collect();
    out.push_str(&format!("mean,,{}\n", mean.join(",")));
    out.push_str(&format!("std,,{}\n", std.join(",")));

    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&args.out, out)?;
    println!(
        "joint    e_S {:.4} +- {:.4}  e_A {:.4} +- {:.4}",
        stats[0].0, stats[0].1, stats[1].0, stats[1].1
    );
    println!(
        "separate e_S {:.4} +- {:.4}  e_A {:.4} +- {:.4}",
        stats[4].0, stats[4].1, stats[5].0, stats[5].1
    );
    Ok(())
}
