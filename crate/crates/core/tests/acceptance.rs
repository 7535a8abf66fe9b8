//! Acceptance suite. Prints one `PASS` or `FAIL` line per criterion and a
//! summary.
//!
//! Environment variables:
//! - `STATEGUIDE_ACCEPTANCE_ONLY=1,2,9` runs a subset of criteria.
//! - `STATEGUIDE_ACCEPTANCE_STRICT=1` exits with status 1 when any criterion fails.
//! - `STATEGUIDE_ACCEPTANCE_DIR=<path>` keeps run artefacts there instead of
//!   in a temporary directory.
//!
//! Criteria 5 to 8 and 10 drive the release pipeline through the command-line
//! binary at desk scale and take roughly an hour on one core.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use statrs::distribution::{ChiSquared, ContinuousCDF};

use stateguide::critic::{member_loss_and_grad, sample_digits, DecomposedQ, TdLoss, UtilityTable};
use stateguide::discretise::{all_codes, discretise, BinMode, DeltaCode, DiscretiserConfig, NormStats};
use stateguide::env::EnvSpec;
use stateguide::eval::{load_expert_idm, normalised_return, uniform_code_error, ReferenceScores, ScoresFile};
use stateguide::nn::{grad_check, mse, Activation, Gradients, Matrix, Mlp};
use stateguide::offline::cross_entropy_loss_and_grad;
use stateguide::online::{critic_loss_and_grad, Batch, IdmInput, IdmNet, Td3Agent, Td3Config};
use stateguide::rng::Rng;
use stateguide::theory::{check_bound, IncrementMdp, IncrementMdpConfig};

const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const PARAM_POINTS: u64 = 10;
const LSE_TOL: f64 = 1e-6;
const IDENTITY_TOL: f64 = 1e-5;
const PROPERTY_CASES: usize = 1000;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];
const ALGOS: [&str; 5] = ["oso", "decqn_n", "bc_delta", "bc_sprime", "bc_diff"];
const ORDER_GAP: f64 = 20.0;
const OSO_DIFF_FRACTION: f64 = 0.25;
const DECQN_N_DIFF_FRACTION: f64 = 0.60;
const GUIDE_BUDGET: u64 = 100_000;
const GUIDE_EVAL_INTERVAL: u64 = 5_000;
const FINAL_TOLERANCE: f64 = 5.0;
const ABLATION_BUDGET: u64 = 30_000;
const IDM_RATIO: f64 = 2.0;
const PLATEAU_TOL: f64 = 0.15;

type Check = Result<(bool, String), String>;

fn main() {
    let only: Option<BTreeSet<u32>> = std::env::var("STATEGUIDE_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let strict = matches!(std::env::var("STATEGUIDE_ACCEPTANCE_STRICT").as_deref(), Ok("1" | "true"));
    let (_guard, root) = match std::env::var("STATEGUIDE_ACCEPTANCE_DIR") {
        Ok(dir) => {
            fs::create_dir_all(&dir).expect("create acceptance directory");
            (None, PathBuf::from(dir))
        }
        Err(_) => {
            let tmp = tempfile::tempdir().expect("temporary directory");
            let path = tmp.path().to_path_buf();
            (Some(tmp), path)
        }
    };
    let mut lab = Lab::new(root);
    let criteria: [(u32, &str, fn(&mut Lab) -> Check); 11] = [
        (1, "gradient correctness", c1_gradients),
        (2, "factorisation exactness", c2_factorisation),
        (3, "regulariser equals code cross-entropy", c3_regulariser_identity),
        (4, "discretiser invariants", c4_discretiser),
        (5, "return ordering", c5_ordering),
        (6, "diff-error pattern", c6_diff_error),
        (7, "guidance benefit", c7_guidance),
        (8, "beta ablation", c8_beta_ablation),
        (9, "theorem harness", c9_theory),
        (10, "online IDM convergence", c10_idm),
        (11, "reproducibility", c11_reproducibility),
    ];
    let mut failed = Vec::new();
    let mut ran = 0;
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|set| !set.contains(&n)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let (pass, detail) = check(&mut lab).unwrap_or_else(|e| (false, format!("error: {e}")));
        let secs = start.elapsed().as_secs_f64();
        println!("{} criterion {n} ({name}): {detail} [{secs:.1}s]", if pass { "PASS" } else { "FAIL" });
        if !pass {
            failed.push(n);
        }
    }
    println!(
        "acceptance: {} of {ran} criteria passed{}",
        ran - failed.len(),
        if failed.is_empty() { String::new() } else { format!("; failed {failed:?}") }
    );
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Criterion 1

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

fn random_codes(rows: usize, heads: usize, bins: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    (0..rows).map(|_| (0..heads).map(|_| rng.index(bins)).collect()).collect()
}

fn check_net<F>(net: &Mlp, analytic: &Gradients, rng: &mut Rng, mut loss: F) -> f64
where
    F: FnMut(&Mlp) -> f64,
{
    let mut probe = net.clone();
    grad_check(
        |p| {
            probe.set_flat_params(p).unwrap();
            loss(&probe)
        },
        &net.flat_params(),
        &analytic.flat(),
        usize::MAX,
        FD_STEP,
        rng,
    )
}

fn c1_gradients(_: &mut Lab) -> Check {
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, err: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(err);
    };
    for point in 0..PARAM_POINTS {
        let mut rng = Rng::new(1000 + point);
        let (m, rows) = (3, 12);
        for mode in [BinMode::Two, BinMode::Three] {
            let b = mode.bins();
            let net = Mlp::new(&[m, 8, 8, m * b], Activation::Relu, Activation::Identity, &mut rng);
            let x = random_matrix(rows, m, &mut rng);
            let codes = random_codes(rows, m, b, &mut rng);
            let y: Vec<f64> = (0..rows).map(|_| 3.0 * rng.normal()).collect();
            for (name, loss, alpha) in [
                ("critic_mse", TdLoss::Mse, 5.0),
                ("critic_huber", TdLoss::Huber, 2.0),
                ("regulariser", TdLoss::Mse, 1.0),
            ] {
                let value = |n: &Mlp| {
                    let (l, _) = member_loss_and_grad(n, m, b, &x, &codes, &y, alpha, loss).unwrap();
                    if name == "regulariser" {
                        l.regulariser
                    } else {
                        l.total
                    }
                };
                let analytic = if name == "regulariser" {
                    let (_, with) = member_loss_and_grad(&net, m, b, &x, &codes, &y, 1.0, loss).unwrap();
                    let (_, without) = member_loss_and_grad(&net, m, b, &x, &codes, &y, 0.0, loss).unwrap();
                    difference(&with, &without)
                } else {
                    member_loss_and_grad(&net, m, b, &x, &codes, &y, alpha, loss).unwrap().1
                };
                note(name, check_net(&net, &analytic, &mut rng, value));
            }
            let (_, g) = cross_entropy_loss_and_grad(&net, m, b, &x, &codes).unwrap();
            note(
                "bc_codes",
                check_net(&net, &g, &mut rng, |n| cross_entropy_loss_and_grad(n, m, b, &x, &codes).unwrap().0),
            );
        }

        let reg = Mlp::new(&[m, 8, 8, m], Activation::Relu, Activation::Identity, &mut rng);
        let x = random_matrix(rows, m, &mut rng);
        let target = random_matrix(rows, m, &mut rng);
        let mse_loss = |n: &Mlp| mse(&n.forward_batch(&x).unwrap(), &target).0;
        let trace = reg.forward_traced(&x).unwrap();
        let (_, upstream) = mse(trace.output(), &target);
        let (g, _) = reg.backward(&trace, &upstream).unwrap();
        note("bc_regression", check_net(&reg, &g, &mut rng, mse_loss));

        let stats = NormStats::new(vec![0.3, -0.2, 1.0], vec![1.5, 0.7, 2.0]).unwrap();
        let idm = IdmNet::new(stats, vec![-1.0, -2.0], vec![1.0, 0.5], IdmInput::Code, &[8, 8], &mut rng);
        let feats: Vec<Vec<f64>> = (0..rows)
            .map(|_| {
                let code = DeltaCode::from_digits(&[rng.index(3), rng.index(3), rng.index(3)], BinMode::Three);
                let s: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
                idm.features(&s, &code.as_reals()).unwrap()
            })
            .collect();
        let x = Matrix::from_rows(2 * m, &feats).unwrap();
        let acts: Vec<f64> = (0..rows).flat_map(|_| [rng.uniform_in(-1.0, 1.0), rng.uniform_in(-2.0, 0.5)]).collect();
        let a = Matrix::from_vec(rows, 2, acts).unwrap();
        let (_, g) = idm.l1_loss_and_grad(&x, &a).unwrap();
        let mut probe = idm.clone();
        let err = grad_check(
            |p| {
                probe.net.set_flat_params(p).unwrap();
                probe.l1_loss_and_grad(&x, &a).unwrap().0
            },
            &idm.net.flat_params(),
            &g.flat(),
            usize::MAX,
            FD_STEP,
            &mut rng,
        );
        note("idm_l1", err);

        let spec = EnvSpec::point_mass();
        let agent = Td3Agent::new(&spec, Td3Config { hidden: vec![8, 8], ..Td3Config::default() }, &mut rng);
        let (sm, an) = (spec.state_dim, spec.action_dim);
        let batch = Batch {
            states: random_matrix(rows, sm, &mut rng),
            actions: random_matrix(rows, an, &mut rng),
            rewards: (0..rows).map(|_| rng.normal()).collect(),
            next_states: random_matrix(rows, sm, &mut rng),
            not_done: vec![1.0; rows],
            discount: vec![0.99; rows],
        };
        let y: Vec<f64> = (0..rows).map(|_| rng.normal()).collect();
        let critic = &agent.critics[0];
        let (_, g) = critic_loss_and_grad(critic, &batch, &y).unwrap();
        note(
            "td3_critic",
            check_net(critic, &g, &mut rng, |n| critic_loss_and_grad(n, &batch, &y).unwrap().0),
        );
    }
    let max = worst.values().cloned().fold(0.0, f64::max);
    let detail = worst.iter().map(|(k, v)| format!("{k}={v:.1e}")).collect::<Vec<_>>().join(" ");
    Ok((max < GRAD_TOL, format!("max relative error {max:.2e} over {PARAM_POINTS} points each ({detail})")))
}

fn difference(a: &Gradients, b: &Gradients) -> Gradients {
    let mut out = a.clone();
    for (lo, lb) in out.layers.iter_mut().zip(&b.layers) {
        lo.weights.iter_mut().zip(&lb.weights).for_each(|(x, y)| *x -= y);
        lo.bias.iter_mut().zip(&lb.bias).for_each(|(x, y)| *x -= y);
    }
    out
}

// ---------------------------------------------------------------------------
// Criterion 2

fn enumerated_q(table: &UtilityTable, mode: BinMode) -> Vec<f64> {
    all_codes(table.heads(), mode).iter().map(|c| table.q_value(&c.digits())).collect()
}

fn enumerated_lse(qs: &[f64]) -> f64 {
    let max = qs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + qs.iter().map(|q| (q - max).exp()).sum::<f64>().ln()
}

fn c2_factorisation(_: &mut Lab) -> Check {
    let mut rng = Rng::new(2);
    let mut worst_lse = 0.0f64;
    let mut chi = Vec::new();
    let mut pass = true;
    for mode in [BinMode::Two, BinMode::Three] {
        for heads in 1..=3 {
            let critic = DecomposedQ::new(4, heads, mode, &[16, 16], 2, &mut rng);
            for _ in 0..200 {
                let s: Vec<f64> = (0..4).map(|_| 3.0 * rng.normal()).collect();
                for k in 0..2 {
                    let table = critic.utilities(k, &s).unwrap();
                    let lse = critic.logsumexp_term(k, &s).unwrap();
                    worst_lse = worst_lse.max((lse - enumerated_lse(&enumerated_q(&table, mode))).abs());
                }
            }
            let s: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let table = critic.utilities(0, &s).unwrap();
            for temperature in [1.0, 0.5] {
                let qs: Vec<f64> = enumerated_q(&table, mode).iter().map(|q| q / temperature).collect();
                let lse = enumerated_lse(&qs);
                let probs: Vec<f64> = qs.iter().map(|q| (q - lse).exp()).collect();
                let draws = 20_000;
                let mut counts = vec![0usize; probs.len()];
                let mut via_critic = vec![0usize; probs.len()];
                for _ in 0..draws {
                    let d = sample_digits(&table, temperature, &mut rng);
                    counts[d.iter().fold(0, |acc, x| acc * mode.bins() + x)] += 1;
                    let c = critic.sample_code(0, &s, temperature, &mut rng).unwrap();
                    via_critic[c.digits().iter().fold(0, |acc, x| acc * mode.bins() + x)] += 1;
                }
                let df = (probs.len() - 1) as f64;
                let critical = ChiSquared::new(df).unwrap().inverse_cdf(0.999);
                for observed in [&counts, &via_critic] {
                    let stat: f64 = observed
                        .iter()
                        .zip(&probs)
                        .map(|(c, p)| {
                            let e = p * draws as f64;
                            (*c as f64 - e).powi(2) / e
                        })
                        .sum();
                    pass &= stat < critical;
                    chi.push(stat / critical);
                }
            }
        }
    }
    pass &= worst_lse < LSE_TOL;
    let worst_chi = chi.iter().cloned().fold(0.0, f64::max);
    Ok((
        pass,
        format!(
            "max |LSE - enumeration| {worst_lse:.2e}; worst chi2 / 0.1% critical value {worst_chi:.2} over {} tests (M <= 3, 2 and 3 bins)",
            chi.len()
        ),
    ))
}

// ---------------------------------------------------------------------------
// Criterion 3

fn c3_regulariser_identity(_: &mut Lab) -> Check {
    let mut worst = 0.0f64;
    let mut worst_value = 0.0f64;
    let mut cases = 0;
    for point in 0..PARAM_POINTS {
        let mut rng = Rng::new(3000 + point);
        for mode in [BinMode::Two, BinMode::Three] {
            for heads in 1..=3 {
                let b = mode.bins();
                let rows = 16;
                let net = Mlp::new(&[3, 12, 12, heads * b], Activation::Relu, Activation::Identity, &mut rng);
                let x = random_matrix(rows, 3, &mut rng);
                let codes = random_codes(rows, heads, b, &mut rng);
                let y = vec![0.0; rows];
                let (with, gw) = member_loss_and_grad(&net, heads, b, &x, &codes, &y, 1.0, TdLoss::Mse).unwrap();
                let (_, g0) = member_loss_and_grad(&net, heads, b, &x, &codes, &y, 0.0, TdLoss::Mse).unwrap();
                let reg_grad = difference(&gw, &g0);

                // Cross-entropy over per-head logits U_j / M: scale the last
                // layer, then map its gradient back by the same factor.
                let scale = 1.0 / heads as f64;
                let mut scaled = net.clone();
                let last = scaled.layers_mut().last_mut().unwrap();
                last.weights.iter_mut().for_each(|w| *w = (f64::from(*w) * scale) as f32);
                last.bias.iter_mut().for_each(|w| *w = (f64::from(*w) * scale) as f32);
                let (ce, mut ce_grad) = cross_entropy_loss_and_grad(&scaled, heads, b, &x, &codes).unwrap();
                let top = ce_grad.layers.last_mut().unwrap();
                top.weights.iter_mut().for_each(|g| *g *= scale);
                top.bias.iter_mut().for_each(|g| *g *= scale);

                worst_value = worst_value.max((with.regulariser - ce).abs() / ce.abs().max(1e-12));
                let num: f64 = reg_grad
                    .flat()
                    .iter()
                    .zip(ce_grad.flat())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let den: f64 = ce_grad.flat().iter().map(|v| v * v).sum::<f64>().sqrt();
                worst = worst.max(num / den.max(1e-300));
                cases += 1;
            }
        }
    }
    Ok((
        worst < IDENTITY_TOL && worst_value < IDENTITY_TOL,
        format!("relative gradient gap {worst:.2e}, relative value gap {worst_value:.2e} over {cases} cases"),
    ))
}

// ---------------------------------------------------------------------------
// Criterion 4

fn log_uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    (rng.uniform_in(lo.ln(), hi.ln())).exp()
}

struct Case {
    s: Vec<f64>,
    n: Vec<f64>,
    stats: NormStats,
}

fn random_case(rng: &mut Rng, eps: f64) -> Case {
    loop {
        let m = 1 + rng.index(6);
        let std: Vec<f64> = (0..m).map(|_| log_uniform(rng, 1e-2, 1e2)).collect();
        let mean: Vec<f64> = (0..m).map(|_| 10.0 * rng.normal()).collect();
        let s: Vec<f64> = (0..m).map(|d| mean[d] + std[d] * rng.normal()).collect();
        let n: Vec<f64> = (0..m)
            .map(|d| {
                let z = if rng.uniform() < 0.3 { eps * rng.uniform_in(-2.0, 2.0) } else { rng.normal() };
                s[d] + std[d] * z
            })
            .collect();
        let stats = NormStats::new(mean, std).unwrap();
        // Keep away from the bin edges so rounding cannot decide the code.
        let z = stats.scaled_difference(&s, &n);
        if z.iter().all(|v| (v.abs() - eps).abs() > 1e-6 && v.abs() > 1e-9) {
            return Case { s, n, stats };
        }
    }
}

fn c4_discretiser(_: &mut Lab) -> Check {
    let mut rng = Rng::new(4);
    let eps = 0.05;
    let configs = [DiscretiserConfig::three_bin(eps), DiscretiserConfig::two_bin()];
    let mut failures: BTreeMap<&str, usize> = BTreeMap::new();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut tally = |name: &'static str, ok: bool| {
        *counts.entry(name).or_insert(0) += 1;
        if !ok {
            *failures.entry(name).or_insert(0) += 1;
        }
    };
    for cfg in &configs {
        for _ in 0..PROPERTY_CASES {
            let c = random_case(&mut rng, eps);
            let base = discretise(&c.s, &c.n, &c.stats, cfg).unwrap();

            let scales: Vec<f64> = (0..c.s.len()).map(|_| log_uniform(&mut rng, 1e-3, 1e3)).collect();
            let scale = |v: &[f64]| v.iter().zip(&scales).map(|(x, k)| x * k).collect::<Vec<_>>();
            let stats = NormStats::new(scale(&c.stats.mean), scale(&c.stats.std)).unwrap();
            let rescaled = discretise(&scale(&c.s), &scale(&c.n), &stats, cfg).unwrap();
            tally("scale_invariance", rescaled == base);

            let reversed = discretise(&c.n, &c.s, &c.stats, cfg).unwrap();
            tally("antisymmetry", reversed == base.negated());

            let alphabet = cfg.mode.alphabet();
            tally(
                "alphabet_closure",
                base.len() == c.s.len() && base.values().iter().all(|v| alphabet.contains(v)),
            );
        }
    }
    for _ in 0..PROPERTY_CASES {
        let c = random_case(&mut rng, eps);
        let e1 = rng.uniform_in(0.0, 0.5);
        let e2 = e1 + rng.uniform_in(0.0, 0.5);
        let lo = discretise(&c.s, &c.n, &c.stats, &DiscretiserConfig::three_bin(e1)).unwrap();
        let hi = discretise(&c.s, &c.n, &c.stats, &DiscretiserConfig::three_bin(e2)).unwrap();
        let ok = lo.values().iter().zip(hi.values()).all(|(a, b)| *b == 0 || a == b);
        tally("epsilon_monotonicity", ok);
    }
    let total_fail: usize = failures.values().sum();
    let detail = counts
        .iter()
        .map(|(k, n)| format!("{k} {}/{n}", n - failures.get(k).copied().unwrap_or(0)))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((total_fail == 0 && counts.values().all(|&n| n >= PROPERTY_CASES), detail))
}

// ---------------------------------------------------------------------------
// Pipeline runs through the binary

fn cli(args: &[String]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_stateguide"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .map_err(|e| format!("cannot launch stateguide: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "`stateguide {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn run(command: &str, out: &Path, args: &[&str]) -> Result<(), String> {
    let mut full = vec![command.to_string(), "--out".into(), out.display().to_string(), "--force".into()];
    full.extend(args.iter().map(|s| s.to_string()));
    cli(&full).map(|_| ())
}

fn path(p: &Path) -> String {
    p.display().to_string()
}

fn read(p: &Path) -> Result<String, String> {
    fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn parse_metrics(text: &str) -> BTreeMap<String, String> {
    text.split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

struct CurveRow {
    step: u64,
    mean_return: f64,
}

fn read_curve(p: &Path) -> Result<Vec<CurveRow>, String> {
    read(p)?
        .lines()
        .skip(1)
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            Ok(CurveRow {
                step: cols[0].parse().map_err(|_| format!("bad curve row '{l}'"))?,
                mean_return: cols[1].parse().map_err(|_| format!("bad curve row '{l}'"))?,
            })
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

const NET: [&str; 6] = ["--set", "hidden=64,64", "--set", "batch_size=64", "--set", "lr=0.001"];
const ONLINE_NET: [&str; 8] = [
    "--set",
    "td3.hidden=64,64",
    "--set",
    "td3.batch_size=64",
    "--set",
    "idm_hidden=64,64",
    "--set",
    "idm_batch=128",
];

/// Expert, reference scores, medium data and expert IDM for one environment.
struct EnvSetup {
    dir: PathBuf,
    scores: ReferenceScores,
    scores_path: PathBuf,
    expert_idm: PathBuf,
    idm_heldout: f64,
    data_free: PathBuf,
    state_dim: usize,
}

impl EnvSetup {
    fn build(root: &Path, env: &'static str, expert_steps: u64) -> Result<Self, String> {
        let dir = root.join(env);
        let expert = dir.join("expert");
        run(
            "train-expert",
            &expert,
            &[
                "--env", env, "--steps", &expert_steps.to_string(), "--seed", "0",
                "--set", "td3.hidden=64,64", "--set", "td3.batch_size=64",
                "--set", "eval_interval=5000", "--set", "reference_episodes=20",
            ],
        )?;
        let actor = path(&expert.join("actor.bin"));
        let medium = dir.join("medium");
        let medium_free = dir.join("medium_free");
        let expert_data = dir.join("expert_data");
        let gen = |out: &Path, quality: &str, n: &str, seed: &str, free: bool| {
            let mut args: Vec<&str> = vec!["--env", env, "--quality", quality, "--n", n, "--seed", seed, "--expert", &actor];
            if free {
                args.push("--action-free");
            }
            run("gen-data", out, &args)
        };
        gen(&medium, "medium", "100000", "1", false)?;
        gen(&medium_free, "medium", "100000", "1", true)?;
        gen(&expert_data, "expert", "50000", "2", false)?;
        let idm = dir.join("idm");
        let data = format!(
            "{},{}",
            path(&expert_data.join("dataset.afrl")),
            path(&medium.join("dataset.afrl"))
        );
        run("train-idm", &idm, &["--data", &data, "--steps", "5000", "--set", "hidden=64,64"])?;
        let expert_idm = idm.join("expert_idm.eidm");
        let idm_heldout = load_expert_idm(&expert_idm).map_err(|e| e.to_string())?.code_heldout_total();
        let scores_path = expert.join("scores.txt");
        let scores = ScoresFile::load(&scores_path)
            .and_then(|f| f.get(env))
            .map_err(|e| e.to_string())?;
        Ok(Self {
            dir,
            scores,
            scores_path,
            expert_idm,
            idm_heldout,
            data_free: medium_free.join("dataset.afrl"),
            state_dim: EnvSpec::from_name(env).map_err(|e| e.to_string())?.state_dim,
        })
    }

    fn model(&self, algo: &str, seed: u64) -> PathBuf {
        self.dir.join(format!("pretrain_{algo}_{seed}")).join("model.osom")
    }

    fn pretrain(&self, algo: &str, seed: u64) -> Result<PathBuf, String> {
        let model = self.model(algo, seed);
        if model.exists() {
            return Ok(model);
        }
        let out = model.parent().unwrap();
        let seed = seed.to_string();
        let data = path(&self.data_free);
        let mut args: Vec<&str> = vec!["--data", data.as_str(), "--algo", algo, "--steps", "5000", "--seed", &seed];
        if algo == "decqn_n" {
            args.extend(["--alpha", "0"]);
        }
        args.extend(NET);
        run("pretrain", out, &args)?;
        Ok(model)
    }

    fn normalise(&self, raw: f64) -> f64 {
        normalised_return(raw, &self.scores)
    }
}

struct Lab {
    root: PathBuf,
    envs: BTreeMap<&'static str, EnvSetup>,
    table: BTreeMap<(&'static str, &'static str), Vec<(f64, f64)>>,
    guided: Option<Vec<GuidePair>>,
}

struct GuidePair {
    guided: Vec<CurveRow>,
    unguided: Vec<CurveRow>,
    idm_trace: Vec<f64>,
}

impl Lab {
    fn new(root: PathBuf) -> Self {
        Self {
            root,
            envs: BTreeMap::new(),
            table: BTreeMap::new(),
            guided: None,
        }
    }

    fn env(&mut self, env: &'static str) -> Result<&EnvSetup, String> {
        if !self.envs.contains_key(env) {
            let steps = if env == "pendulum" { 40_000 } else { 20_000 };
            let setup = EnvSetup::build(&self.root, env, steps)?;
            self.envs.insert(env, setup);
        }
        Ok(&self.envs[env])
    }

    /// Normalised return and diff error for every algorithm and seed.
    fn offline_table(&mut self) -> Result<(), String> {
        for env in ["pointmass", "pendulum"] {
            if self.table.keys().any(|(e, _)| *e == env) {
                continue;
            }
            self.env(env)?;
            let setup = &self.envs[env];
            for algo in ALGOS {
                let mut rows = Vec::new();
                for seed in SEEDS {
                    let model = setup.pretrain(algo, seed)?;
                    let out = setup.dir.join(format!("eval_{algo}_{seed}"));
                    run(
                        "eval",
                        &out,
                        &[
                            "--env", env, "--model", &path(&model),
                            "--expert-idm", &path(&setup.expert_idm),
                            "--scores", &path(&setup.scores_path),
                            "--episodes", "20", "--seed", &seed.to_string(),
                        ],
                    )?;
                    let m = parse_metrics(&read(&out.join("metrics.txt"))?);
                    let get = |k: &str| -> Result<f64, String> {
                        m.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| format!("metrics lack {k}"))
                    };
                    rows.push((get("normalised_return")?, get("diff_error")?));
                }
                self.table.insert((env, algo), rows);
            }
        }
        Ok(())
    }

    fn means(&self, env: &'static str, algo: &'static str) -> (f64, f64) {
        let rows = &self.table[&(env, algo)];
        (
            mean(&rows.iter().map(|r| r.0).collect::<Vec<_>>()),
            mean(&rows.iter().map(|r| r.1).collect::<Vec<_>>()),
        )
    }

    fn guide_pairs(&mut self) -> Result<(), String> {
        if self.guided.is_some() {
            return Ok(());
        }
        self.env("pointmass")?;
        let setup = &self.envs["pointmass"];
        let model = setup.pretrain("oso", 1)?;
        let mut pairs = Vec::new();
        for seed in SEEDS {
            let seed_s = seed.to_string();
            let total = GUIDE_BUDGET.to_string();
            let interval = format!("eval_interval={GUIDE_EVAL_INTERVAL}");
            let base = ["--env", "pointmass", "--total-steps", &total, "--seed", &seed_s, "--set", &interval];
            let g = setup.dir.join(format!("guided_{seed}"));
            let u = setup.dir.join(format!("unguided_{seed}"));
            let (model_s, data_s) = (path(&model), path(&setup.data_free));
            let mut args: Vec<&str> = base.to_vec();
            args.extend(["--model", model_s.as_str(), "--data", data_s.as_str()]);
            args.extend(ONLINE_NET);
            run("guide", &g, &args)?;
            let mut args: Vec<&str> = base.to_vec();
            args.push("--no-guide");
            args.extend(ONLINE_NET);
            run("guide", &u, &args)?;
            let trace = read(&g.join("idm_trace.csv"))?
                .lines()
                .skip(1)
                .filter_map(|l| l.split(',').nth(1).and_then(|v| v.parse().ok()))
                .collect();
            pairs.push(GuidePair {
                guided: read_curve(&g.join("curve.csv"))?,
                unguided: read_curve(&u.join("curve.csv"))?,
                idm_trace: trace,
            });
        }
        self.guided = Some(pairs);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Criteria 5 and 6

fn c5_ordering(lab: &mut Lab) -> Check {
    lab.offline_table()?;
    let mut pass = true;
    let mut parts = Vec::new();
    for env in ["pointmass", "pendulum"] {
        let r = |a| lab.means(env, a).0;
        let (oso, delta, sprime, diff) = (r("oso"), r("bc_delta"), r("bc_sprime"), r("bc_diff"));
        let ok = oso >= delta && delta - sprime >= ORDER_GAP && delta - diff >= ORDER_GAP;
        pass &= ok;
        parts.push(format!(
            "{env}: oso {oso:.1} bc_delta {delta:.1} bc_sprime {sprime:.1} bc_diff {diff:.1} decqn_n {:.1} (gaps {:.1}, {:.1}){}",
            r("decqn_n"),
            delta - sprime,
            delta - diff,
            if ok { "" } else { " [ordering not met]" }
        ));
    }
    Ok((pass, parts.join("; ")))
}

fn c6_diff_error(lab: &mut Lab) -> Check {
    lab.offline_table()?;
    let mut pass = true;
    let mut parts = Vec::new();
    for env in ["pointmass", "pendulum"] {
        let random = lab.envs[env].state_dim as f64 * uniform_code_error(BinMode::Three);
        let oso = lab.means(env, "oso").1 / random;
        let decqn_n = lab.means(env, "decqn_n").1 / random;
        pass &= oso < OSO_DIFF_FRACTION && decqn_n > DECQN_N_DIFF_FRACTION;
        parts.push(format!(
            "{env}: oso {:.0}% decqn_n {:.0}% of random {random:.3}",
            100.0 * oso,
            100.0 * decqn_n
        ));
    }
    Ok((pass, parts.join("; ")))
}

// ---------------------------------------------------------------------------
// Criteria 7 and 10

fn c7_guidance(lab: &mut Lab) -> Check {
    lab.guide_pairs()?;
    let setup = &lab.envs["pointmass"];
    let quarter = GUIDE_BUDGET / 4;
    let at = |rows: &[CurveRow], step: u64| -> Result<f64, String> {
        rows.iter()
            .find(|r| r.step == step)
            .map(|r| setup.normalise(r.mean_return))
            .ok_or_else(|| format!("no evaluation at step {step}"))
    };
    let mut wins = 0;
    let (mut gq, mut uq, mut gf, mut uf) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for p in lab.guided.as_ref().unwrap() {
        let (g, u) = (at(&p.guided, quarter)?, at(&p.unguided, quarter)?);
        wins += usize::from(g > u);
        gq.push(g);
        uq.push(u);
        gf.push(at(&p.guided, GUIDE_BUDGET)?);
        uf.push(at(&p.unguided, GUIDE_BUDGET)?);
    }
    let final_ok = mean(&gf) >= mean(&uf) - FINAL_TOLERANCE;
    Ok((
        wins >= 4 && final_ok,
        format!(
            "guided ahead at step {quarter} in {wins}/5 seeds (mean {:.1} vs {:.1}); final {:.1} vs {:.1}",
            mean(&gq),
            mean(&uq),
            mean(&gf),
            mean(&uf)
        ),
    ))
}

fn c10_idm(lab: &mut Lab) -> Check {
    lab.guide_pairs()?;
    let heldout = lab.envs["pointmass"].idm_heldout;
    let mut pass = true;
    let mut finals = Vec::new();
    let mut drifts = Vec::new();
    for p in lab.guided.as_ref().unwrap() {
        let t = &p.idm_trace;
        let fifth = (t.len() / 5).max(1);
        if t.len() < 2 * fifth {
            return Err("IDM trace too short".into());
        }
        let last = mean(&t[t.len() - fifth..]);
        let prev = mean(&t[t.len() - 2 * fifth..t.len() - fifth]);
        let drift = (last - prev).abs() / prev;
        let ratio = t[t.len() - 1] / heldout;
        pass &= drift <= PLATEAU_TOL && (1.0 / IDM_RATIO..=IDM_RATIO).contains(&ratio);
        finals.push(ratio);
        drifts.push(drift);
    }
    Ok((
        pass,
        format!(
            "final online term / expert held-out ({heldout:.3}) per seed {:?}; last-fifth drift {:?}",
            finals.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>(),
            drifts.iter().map(|r| format!("{:.0}%", 100.0 * r)).collect::<Vec<_>>()
        ),
    ))
}

// ---------------------------------------------------------------------------
// Criterion 8

fn c8_beta_ablation(lab: &mut Lab) -> Check {
    lab.env("pendulum")?;
    let setup = &lab.envs["pendulum"];
    let model = path(&setup.pretrain("oso", 1)?);
    let data = path(&setup.data_free);
    let total = ABLATION_BUDGET.to_string();
    let (mut fixed, mut annealed) = (Vec::new(), Vec::new());
    for seed in ABLATION_SEEDS {
        let seed_s = seed.to_string();
        for (label, extra) in [("fixed", Some("0.8")), ("annealed", None)] {
            let out = setup.dir.join(format!("beta_{label}_{seed}"));
            let mut args: Vec<&str> = vec![
                "--env", "pendulum", "--model", &model, "--data", &data, "--total-steps", &total,
                "--seed", &seed_s, "--set", "eval_interval=5000",
            ];
            if let Some(b) = extra {
                args.extend(["--beta-fixed", b]);
            }
            args.extend(ONLINE_NET);
            run("guide", &out, &args)?;
            let curve = read_curve(&out.join("curve.csv"))?;
            let last = setup.normalise(curve.last().ok_or("empty curve")?.mean_return);
            if extra.is_some() {
                fixed.push(last);
            } else {
                annealed.push(last);
            }
        }
    }
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join(",");
    Ok((
        mean(&fixed) < mean(&annealed),
        format!(
            "final normalised return fixed 0.8 mean {:.1} [{}] vs annealed {:.1} [{}]",
            mean(&fixed),
            fmt(&fixed),
            mean(&annealed),
            fmt(&annealed)
        ),
    ))
}

// ---------------------------------------------------------------------------
// Criterion 9

fn c9_theory(_: &mut Lab) -> Check {
    let mut pass = true;
    let mut parts = Vec::new();
    for dims in [1, 2] {
        let config = IncrementMdpConfig {
            dims,
            gamma: 0.9,
            ..IncrementMdpConfig::default()
        };
        let mdp = IncrementMdp::build(&config, &mut Rng::new(9)).map_err(|e| e.to_string())?;
        let report = check_bound(&mdp, &[2, 4, 8, 16], 1e-8).map_err(|e| e.to_string())?;
        let gap_ok = report.rows.iter().all(|r| r.gap <= r.lemma2_bound);
        let kl_ok = report.rows.iter().all(|r| r.eps_kl <= 1.1 * r.eps_kl_theorem_bound);
        let slope_ok = (report.slope_estimate + 1.0).abs() <= 0.15;
        pass &= gap_ok && kl_ok && slope_ok;
        let worst_gap = report.rows.iter().map(|r| r.gap / r.lemma2_bound).fold(0.0, f64::max);
        let worst_kl = report
            .rows
            .iter()
            .map(|r| r.eps_kl / r.eps_kl_theorem_bound)
            .fold(0.0, f64::max);
        parts.push(format!(
            "M={dims}: max gap/bound {worst_gap:.3}, max eps_kl/theorem {worst_kl:.3}, slope {:.3}",
            report.slope_estimate
        ));
    }
    Ok((pass, parts.join("; ")))
}

// ---------------------------------------------------------------------------
// Criterion 11

fn files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))? {
        let p = entry.map_err(|e| e.to_string())?.path();
        let bytes = fs::read(&p).map_err(|e| format!("{}: {e}", p.display()))?;
        out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), bytes);
    }
    Ok(out)
}

fn c11_reproducibility(lab: &mut Lab) -> Check {
    let dir = lab.root.join("repro");
    let p = |name: &str| dir.join(name);
    let f = |name: &str, file: &str| path(&dir.join(name).join(file));
    let small_td3 = ["--set", "td3.hidden=32,32", "--set", "td3.batch_size=32"];
    let steps: Vec<(&str, String, Vec<String>)> = {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let mut expert = s(&["--env", "pointmass", "--steps", "4000", "--set", "eval_interval=1000"]);
        expert.extend(s(&["--set", "reference_episodes=3", "--set", "eval_episodes=2"]));
        expert.extend(s(&small_td3));
        let net = s(&["--set", "hidden=16,16", "--set", "batch_size=32", "--set", "ensemble=2"]);
        let mut oso = s(&["--data", &f("medium_free", "dataset.afrl"), "--algo", "oso", "--steps", "200"]);
        oso.extend(net.clone());
        let mut sprime = s(&["--data", &f("medium_free", "dataset.afrl"), "--algo", "bc_sprime", "--steps", "200"]);
        sprime.extend(net);
        let mut guide = s(&[
            "--env", "pointmass", "--model", &f("oso", "model.osom"), "--data", &f("medium_free", "dataset.afrl"),
            "--total-steps", "1500", "--set", "eval_interval=500", "--set", "eval_episodes=2",
            "--set", "idm_hidden=16,16", "--set", "idm_batch=32", "--set", "idm_warmup=300",
        ]);
        guide.extend(s(&small_td3));
        vec![
            ("gen-data", "random".into(), s(&["--env", "pointmass", "--quality", "random", "--n", "3000", "--seed", "5"])),
            ("train-expert", "expert".into(), expert),
            (
                "gen-data",
                "medium".into(),
                s(&["--env", "pointmass", "--quality", "medium", "--n", "3000", "--expert", &f("expert", "actor.bin")]),
            ),
            (
                "gen-data",
                "medium_free".into(),
                s(&[
                    "--env", "pointmass", "--quality", "medium", "--n", "3000", "--action-free",
                    "--expert", &f("expert", "actor.bin"),
                ]),
            ),
            (
                "train-idm",
                "idm".into(),
                s(&["--data", &f("medium", "dataset.afrl"), "--steps", "200", "--set", "hidden=16,16"]),
            ),
            ("pretrain", "oso".into(), oso),
            ("pretrain", "bc_sprime".into(), sprime),
            ("guide", "guide".into(), guide),
            (
                "eval",
                "eval".into(),
                s(&[
                    "--env", "pointmass", "--model", &f("oso", "model.osom"),
                    "--expert-idm", &f("idm", "expert_idm.eidm"), "--scores", &f("expert", "scores.txt"),
                    "--episodes", "3",
                ]),
            ),
            ("theory-check", "theory".into(), s(&["--M", "1", "--k-list", "2,4"])),
        ]
    };
    let mut checked = Vec::new();
    let mut mismatched = Vec::new();
    for (command, name, args) in &steps {
        let first = p(name);
        let second = p(&format!("{name}_rerun"));
        let mut full = vec![command.to_string(), "--out".into(), path(&first), "--force".into()];
        full.extend(args.iter().cloned());
        cli(&full)?;
        cli(&[
            command.to_string(),
            "--config".into(),
            path(&first.join("resolved_config")),
            "--out".into(),
            path(&second),
            "--force".into(),
        ])?;
        let (a, b) = (files(&first)?, files(&second)?);
        if a.keys().ne(b.keys()) {
            mismatched.push(format!("{name}: file sets differ"));
        }
        for (file, bytes) in &a {
            if b.get(file) != Some(bytes) {
                mismatched.push(format!("{name}/{file}"));
            }
        }
        checked.push(format!("{command}({})", a.len()));
    }
    Ok((
        mismatched.is_empty(),
        if mismatched.is_empty() {
            format!("byte-identical reruns from resolved config: {}", checked.join(" "))
        } else {
            format!("differing files: {}", mismatched.join(", "))
        },
    ))
}
