//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::{a_objective, a_oracle, instance, rel_gap, s_objective, s_oracle, scalar_pair};
use hsunmix::admm_abundance::solve_a;
use hsunmix::admm_endmember::solve_s;
use hsunmix::baseline::separate_unmix;
use hsunmix::io;
use hsunmix::metrics::{evaluate, EvalReport};
use hsunmix::model::{generate_synthetic, CircleGeometry, SpectraSource};
use hsunmix::objective::{gradient_smooth_s, tune_hyperparameters};
use hsunmix::solver::update_psi;
use hsunmix::{joint_unmix, Dims, Hyperparams, Init, Matrix, NoiseSpec, Scenario, SolverConfig, UnmixResult};

const TRIALS: u64 = 10;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

struct Trial {
    joint: UnmixResult,
    separate: UnmixResult,
    joint_eval: EvalReport,
    separate_eval: EvalReport,
    seconds: f64,
}

fn tuned() -> Hyperparams {
    let noise = NoiseSpec::default();
    let (ls, la) = tune_hyperparameters(noise.sigma_e, noise.sigma_v, noise.b).unwrap();
    Hyperparams::with_lambdas(ls, la)
}

fn run_trial(seed: u64) -> Trial {
    let (x, truth) = generate_synthetic(&Scenario::benchmark(seed)).unwrap();
    let start = Instant::now();
    let cfg = SolverConfig { h: tuned(), init: Init::Default, record_trace: true };
    let joint = joint_unmix(&x, &truth.s0, &cfg).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let (separate, _) = separate_unmix(&x, 3, &truth.s0).unwrap();
    let score = |r: &UnmixResult| evaluate(&r.s, &r.a, &r.psi, &truth.s, &truth.a, &truth.psi).unwrap();
    Trial { joint_eval: score(&joint), separate_eval: score(&separate), joint, separate, seconds }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn benchmark_comparison(trials: &[Trial]) -> Verdict {
    let js = mean(trials.iter().map(|t| t.joint_eval.e_s));
    let ja = mean(trials.iter().map(|t| t.joint_eval.e_a));
    let ss = mean(trials.iter().map(|t| t.separate_eval.e_s));
    let sa = mean(trials.iter().map(|t| t.separate_eval.e_a));
    let (gain_s, gain_a) = (1.0 - js / ss, 1.0 - ja / sa);
    let slowest = trials.iter().map(|t| t.seconds).fold(0.0, f64::max);
    verdict(
        gain_s >= 0.2 && gain_a >= 0.2 && slowest <= 300.0,
        format!(
            "mean e_S joint {js:.4} vs separate {ss:.4} ({:.0}% lower), mean e_A joint {ja:.4} vs separate {sa:.4} \
             ({:.0}% lower), slowest joint run {slowest:.1}s; reference magnitudes (not enforced): \
             e_S 0.63 vs 0.95, e_A 0.66 vs 1.11",
            100.0 * gain_s,
            100.0 * gain_a
        ),
    )
}

fn scale_recovery(trials: &[Trial]) -> Verdict {
    let worst = trials.iter().map(|t| t.joint_eval.e_psi).fold(0.0, f64::max);
    verdict(worst <= 0.05, format!("largest e_psi over {} trials {worst:.4} (limit 0.05)", trials.len()))
}

fn tuning_formula() -> Verdict {
    let got = tune_hyperparameters(0.05, 0.05, 0.01).unwrap();
    verdict(got == (1.0, 0.25), format!("tune(0.05, 0.05, 0.01) = {got:?}"))
}

fn subproblem_oracles() -> Verdict {
    let mut worst_s = 0.0f64;
    let mut worst_a = 0.0f64;
    for seed in 0..20 {
        let inst = instance(1000 + seed, 3, 8, 10, 2);
        let h = Hyperparams {
            lambda_s: inst.weight(),
            lambda_a: inst.lambda_a,
            max_inner: 20_000,
            admm_eps_abs: 1e-10,
            admm_eps_rel: 1e-9,
            ..Hyperparams::default()
        };
        let (s, _) = solve_s(&inst.x, &inst.a, &inst.psi, &inst.s0, &h, None).unwrap();
        let want = s_objective(&inst, &s_oracle(&inst, inst.a.frames(), 1e-8), inst.a.frames());
        worst_s = worst_s.max(rel_gap(s_objective(&inst, s.frames(), inst.a.frames()), want));

        let (a, _) = solve_a(&inst.x, &inst.s, &h, None).unwrap();
        let (x, sf) = (inst.x.frames(), inst.s.frames());
        let want = a_objective(x, sf, &a_oracle(x, sf, inst.lambda_a, 1e-8), inst.lambda_a);
        worst_a = worst_a.max(rel_gap(a_objective(x, sf, a.frames(), inst.lambda_a), want));
    }
    let (x, s) = scalar_pair(2.0, 4.0);
    let mut pair_err = 0.0f64;
    for (lambda_a, want) in [(0.5, [2.5, 3.5]), (2.0, [3.0, 3.0])] {
        let h = Hyperparams {
            lambda_a,
            max_inner: 20_000,
            admm_eps_abs: 1e-12,
            admm_eps_rel: 1e-12,
            ..Hyperparams::default()
        };
        let (a, _) = solve_a(&x, &s, &h, None).unwrap();
        for k in 0..2 {
            pair_err = pair_err.max((a[k][(0, 0)] - want[k]).abs());
        }
    }
    verdict(
        worst_s <= 1e-5 && worst_a <= 1e-5 && pair_err <= 1e-6,
        format!("worst relative gap S {worst_s:.1e}, A {worst_a:.1e} (limit 1e-5); fused pair error {pair_err:.1e} (limit 1e-6)"),
    )
}

fn fixed_point() -> (Verdict, UnmixResult) {
    let sc = Scenario { noise: NoiseSpec::noiseless(0), amplitude: 0.0, ..Scenario::benchmark(0) };
    let (x, truth) = generate_synthetic(&sc).unwrap();
    let h = Hyperparams { max_outer: 5, eps_s: 1e-300, eps_a: 1e-300, ..tuned() };
    let init = Init::Given { s: truth.s.clone(), a: truth.a.clone(), psi: truth.psi.clone() };
    let r = joint_unmix(&x, &truth.s0, &SolverConfig { h, init, record_trace: false }).unwrap();
    let e = evaluate(&r.s, &r.a, &r.psi, &truth.s, &truth.a, &truth.psi).unwrap();
    (
        verdict(
            r.outer_iterations == 5 && e.e_s <= 1e-6 && e.e_a <= 1e-6,
            format!("after {} outer iterations e_S {:.1e}, e_A {:.1e} (limit 1e-6)", r.outer_iterations, e.e_s, e.e_a),
        ),
        r,
    )
}

fn worst_increase(trace: &[f64]) -> f64 {
    trace.windows(2).map(|w| (w[1] - w[0]) / w[0].abs()).fold(0.0, f64::max)
}

fn monotone_objective(trials: &[Trial]) -> (Verdict, UnmixResult) {
    let (x, truth) = generate_synthetic(&Scenario::benchmark(TRIALS)).unwrap();
    let h = Hyperparams { max_inner: 200, ..tuned() };
    let low_inner = joint_unmix(&x, &truth.s0, &SolverConfig { h, init: Init::Default, record_trace: false }).unwrap();
    let worst = trials
        .iter()
        .map(|t| worst_increase(&t.joint.objective_trace))
        .chain([worst_increase(&low_inner.objective_trace)])
        .fold(0.0, f64::max);
    (
        verdict(
            worst <= 1e-6,
            format!("largest relative increase {worst:.1e} over {} runs (limit 1e-6)", trials.len() + 1),
        ),
        low_inner,
    )
}

fn gradients() -> Verdict {
    let mut worst_fd = 0.0f64;
    let mut worst_psi = 0.0f64;
    for seed in 0..20 {
        let inst = instance(2000 + seed, 3, 8, 10, 2);
        let h = Hyperparams { lambda_s: inst.weight(), lambda_a: inst.lambda_a, ..Hyperparams::default() };
        let g = gradient_smooth_s(&inst.s, &inst.a, &inst.psi, &inst.x, &inst.s0, &h).unwrap();
        let step = 1e-6;
        let (mut err, mut norm) = (0.0f64, 0.0f64);
        for k in 0..3 {
            for idx in 0..inst.s[k].len() {
                let mut plus = inst.s.frames().to_vec();
                let mut minus = plus.clone();
                plus[k][idx] += step;
                minus[k][idx] -= step;
                let a = inst.a.frames();
                let fd = (s_objective(&inst, &plus, a) - s_objective(&inst, &minus, a)) / (2.0 * step);
                err += (fd - g[k][idx]).powi(2);
                norm += g[k][idx].powi(2);
            }
        }
        worst_fd = worst_fd.max(err.sqrt() / norm.sqrt());

        let psi = update_psi(&inst.s, &inst.s0).unwrap();
        let s0 = inst.s0.matrix();
        for k in 0..3 {
            for p in 0..2 {
                let residual = inst.s[k].column(p) - s0.column(p) * psi.get(k, p);
                worst_psi = worst_psi.max((inst.lambda_s[p] * s0.column(p).dot(&residual)).abs());
            }
        }
    }
    verdict(
        worst_fd <= 1e-5 && worst_psi <= 1e-10,
        format!("finite-difference relative error {worst_fd:.1e} (limit 1e-5); scale gradient {worst_psi:.1e} (limit 1e-10)"),
    )
}

fn nonnegative(r: &UnmixResult) -> bool {
    r.s.frames().iter().chain(r.a.frames()).chain([r.psi.matrix()]).all(|m| m.iter().all(|&v| v >= 0.0))
}

fn scratch_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("hsunmix-acceptance-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|path| path.is_file())
        .map(|path| (PathBuf::from(path.file_name().unwrap()), fs::read(&path).unwrap()))
        .collect();
    files.sort();
    files
}

fn max_abs_diff(a: &[Matrix], b: &[Matrix]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

/// Writes a full generate + unmix pass into `dir`.
fn reproducible_pass(dir: &Path, scenario: &Scenario) {
    let (x, truth) = generate_synthetic(scenario).unwrap();
    io::write_sequence(&dir.join("x.hsts"), &x).unwrap();
    io::write_truth_dir(&dir.join("truth"), &truth).unwrap();
    let r = joint_unmix(&x, &truth.s0, &SolverConfig { h: tuned(), ..Default::default() }).unwrap();
    io::write_estimate_dir(&dir.join("joint"), &r.s, &r.a, &r.psi).unwrap();
    let (sep, _) = separate_unmix(&x, 3, &truth.s0).unwrap();
    io::write_estimate_dir(&dir.join("separate"), &sep.s, &sep.a, &sep.psi).unwrap();
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

fn determinism(runs: &[&UnmixResult]) -> Verdict {
    let all_nonnegative = runs.iter().all(|r| nonnegative(r));

    let scenario = Scenario {
        dims: Dims { frames: 6, channels: 64, pixels: 24 * 24, sources: 3 },
        geometry: CircleGeometry::default_for(24, 24, 3),
        noise: NoiseSpec { seed: 77, ..NoiseSpec::default() },
        amplitude: 0.2,
        spectra: SpectraSource::Bumps { seed: 0 },
    };
    let (first, second) = (scratch_dir("a"), scratch_dir("b"));
    reproducible_pass(&first, &scenario);
    reproducible_pass(&second, &scenario);
    let mut identical = true;
    for sub in ["", "truth", "joint", "separate"] {
        let (a, b) = (first.join(sub), second.join(sub));
        let files = dir_bytes(&a);
        identical &= !files.is_empty() && files == dir_bytes(&b);
    }
    let _ = fs::remove_dir_all(&first);
    let _ = fs::remove_dir_all(&second);

    let (x, truth) = generate_synthetic(&Scenario { noise: NoiseSpec { seed: 78, ..scenario.noise }, ..scenario }).unwrap();
    let cfg = SolverConfig { h: tuned(), ..Default::default() };
    let solve = || (joint_unmix(&x, &truth.s0, &cfg).unwrap(), separate_unmix(&x, 3, &truth.s0).unwrap().0);
    let (j1, s1) = with_threads(1, solve);
    let (j4, s4) = with_threads(4, solve);
    let spread = [
        max_abs_diff(j1.s.frames(), j4.s.frames()),
        max_abs_diff(j1.a.frames(), j4.a.frames()),
        (j1.psi.matrix() - j4.psi.matrix()).amax(),
        max_abs_diff(s1.s.frames(), s4.s.frames()),
        max_abs_diff(s1.a.frames(), s4.a.frames()),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let all_nonnegative = all_nonnegative && [&j1, &j4, &s1, &s4].iter().all(|r| nonnegative(r));

    verdict(
        all_nonnegative && identical && spread <= 1e-12,
        format!(
            "nonnegative in {} runs: {all_nonnegative}; repeated runs byte-identical: {identical}; \
             1 vs 4 threads max difference {spread:.1e} (limit 1e-12)",
            runs.len() + 4
        ),
    )
}

fn main() {
    let started = Instant::now();
    let mut verdicts: Vec<(u32, &str, Verdict)> = Vec::new();

    let trials: Vec<Trial> = (0..TRIALS).map(run_trial).collect();
    verdicts.push((1, "joint vs separate unmixing on the benchmark scene", benchmark_comparison(&trials)));
    verdicts.push((2, "scale-factor recovery", scale_recovery(&trials)));
    verdicts.push((3, "hyperparameter formula", tuning_formula()));
    verdicts.push((4, "subproblem oracle equivalence", subproblem_oracles()));
    let (v5, fixed) = fixed_point();
    verdicts.push((5, "ground-truth fixed point", v5));
    let (v6, low_inner) = monotone_objective(&trials);
    verdicts.push((6, "objective monotonicity", v6));
    verdicts.push((7, "gradient verification", gradients()));
    let mut runs: Vec<&UnmixResult> = trials.iter().flat_map(|t| [&t.joint, &t.separate]).collect();
    runs.extend([&fixed, &low_inner]);
    verdicts.push((8, "nonnegativity and determinism", determinism(&runs)));

    println!();
    for t in &trials {
        println!(
            "  trial: joint e_S {:.4} e_A {:.4} e_psi {:.4} ({} outer, {:.1}s) | separate e_S {:.4} e_A {:.4} e_psi {:.4}",
            t.joint_eval.e_s,
            t.joint_eval.e_a,
            t.joint_eval.e_psi,
            t.joint.outer_iterations,
            t.seconds,
            t.separate_eval.e_s,
            t.separate_eval.e_a,
            t.separate_eval.e_psi
        );
    }
    let mut failed = 0;
    for (id, name, v) in &verdicts {
        println!("criterion {id} {}: {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} of {} criteria passed in {:.0}s", verdicts.len() - failed, verdicts.len(), started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
