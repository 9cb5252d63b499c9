//! Subcommand bodies.

use std::fs;
use std::path::Path;

use mbtc_core::fl::{self, Aggregator};
use mbtc_core::io::{parse_model, ModelDocument};
use mbtc_core::mm_general::{self, MmIteration, MmOptions};
use mbtc_core::mm_symmetric;
use mbtc_core::model::{GaussianSourceModel, MbtcParams, RateBudget, SymmetricSourceModel};
use mbtc_core::sim::{self, OptimizerChoice, Scheme};
use mbtc_core::{region, seed_stream};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{
    hex, Command, ExperimentConfig, FlArgs, OptimizeArgs, RegionArgs, SweepArgs, VerifyTarget,
};
use crate::error::CliError;
use crate::output::{num, opt_num, resolve_dir, Sink, Table};

pub fn run(config: &ExperimentConfig) -> Result<(), CliError> {
    let dir = resolve_dir(config.out.as_deref());
    match &config.command {
        Command::Optimize(a) => optimize(a, config, Sink::new(dir, "optimize")?),
        Command::SweepDistortion(a) => sweep(a, config, Sink::new(dir, "sweep-distortion")?),
        Command::FlTrain(a) => fl_train(a, config, Sink::new(dir, "fl-train")?),
        Command::Verify(v) => match &v.target {
            None => verify_suite(config, Sink::new(dir, "verify")?),
            Some(VerifyTarget::Region(a)) => verify_region(a, config, Sink::new(dir, "verify-region")?),
        },
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Parsed model plus the SHA-256 of the file.
fn load_model(path: &Path) -> Result<(ModelDocument, String), CliError> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let doc = parse_model(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    Ok((doc, hex(&Sha256::digest(text.as_bytes()))))
}

/// Expanded model and budget of a document. Flag rates override the file.
fn general_problem(
    doc: &ModelDocument,
    budget_flag: Option<&Vec<f64>>,
    lambda: Option<f64>,
) -> Result<(GaussianSourceModel, RateBudget), CliError> {
    match doc {
        ModelDocument::General(g) => {
            if lambda.is_some() {
                return Err(config_err("--lambda applies to symmetric models only"));
            }
            let model = g.model()?;
            let budget = match (budget_flag, g.budget()) {
                (Some(b), _) => RateBudget::new(b.clone())?,
                (None, Some(b)) => b?,
                (None, None) => return Err(config_err("no rate budget: pass --budget or add \"budget\" to the model")),
            };
            Ok((model, budget))
        }
        ModelDocument::Symmetric(s) => {
            let model = s.model()?;
            let budget = match budget_flag {
                Some(b) => RateBudget::new(b.clone())?,
                None => model.budget(),
            };
            Ok((model.expand(lambda.unwrap_or(s.lambda()))?, budget))
        }
    }
}

#[derive(Serialize)]
struct OptimizeReport {
    algorithm: &'static str,
    q: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    q_groups: Option<Vec<f64>>,
    distortion: f64,
    objective: f64,
    iterations: usize,
    converged: bool,
    constraint_count: usize,
    trace: Vec<MmIteration>,
}

fn optimize(a: &OptimizeArgs, config: &ExperimentConfig, sink: Sink) -> Result<(), CliError> {
    if !(a.eps > 0.0) || a.max_iter == 0 {
        return Err(config_err("--eps must be positive and --max-iter at least 1"));
    }
    let options = MmOptions {
        eps: a.eps,
        max_iter: a.max_iter,
        ..MmOptions::default()
    };
    let (doc, input_hash) = load_model(&a.model)?;
    let report = match (&doc, a.symmetric) {
        (ModelDocument::General(_), true) => {
            return Err(config_err("--symmetric needs a model with rho, sigma2 and groups"));
        }
        (ModelDocument::Symmetric(s), true) => {
            if a.budget.is_some() {
                return Err(config_err("symmetric models take their rates from the groups"));
            }
            let model: SymmetricSourceModel = s.model()?;
            let out = mm_symmetric::optimize_symmetric(&model, a.lambda.unwrap_or(s.lambda()), &options)?;
            OptimizeReport {
                algorithm: "symmetric",
                q: out.q.into_inner(),
                q_groups: Some(out.q_groups.q_groups),
                distortion: out.distortion,
                objective: out.objective,
                iterations: out.iterations,
                converged: out.converged,
                constraint_count: out.constraint_count,
                trace: out.trace,
            }
        }
        _ => {
            let (model, budget) = general_problem(&doc, a.budget.as_ref(), a.lambda)?;
            let out = mm_general::optimize(&model, &budget, &options)?;
            OptimizeReport {
                algorithm: "general",
                q: out.q.into_inner(),
                q_groups: None,
                distortion: out.distortion,
                objective: out.objective,
                iterations: out.iterations,
                converged: out.converged,
                constraint_count: (1usize << model.devices()) - 1,
                trace: out.trace,
            }
        }
    };
    let mut table = Table::new(
        "objective in the algorithm's own units; distortion in squared error per symbol; worst_slack in bits/symbol",
        &["iteration", "objective", "distortion", "worst_slack", "objective_gap", "constraint_gap", "newton_steps"],
    );
    for t in &report.trace {
        table.rows.push(vec![
            t.iteration.to_string(),
            num(t.objective),
            num(t.distortion),
            num(t.worst_slack),
            opt_num(t.objective_gap),
            opt_num(t.constraint_gap),
            t.newton_steps.to_string(),
        ]);
    }
    let value = serde_json::to_value(&report).expect("report serializes");
    sink.json("optimize.json", &value)?;
    sink.csv("optimize.csv", &table)?;
    sink.sidecar(config, json!({ "input_sha256": input_hash }))?;
    println!("{}", serde_json::to_string_pretty(&value).expect("report serializes"));
    Ok(())
}

fn sweep(a: &SweepArgs, config: &ExperimentConfig, sink: Sink) -> Result<(), CliError> {
    let schemes = a
        .schemes
        .iter()
        .map(|s| Scheme::parse(s).ok_or_else(|| config_err(format!("unknown scheme {s:?}; expected mbtc, qsgd or uniform"))))
        .collect::<Result<Vec<_>, _>>()?;
    if a.m == 0 || a.n == 0 {
        return Err(config_err("--M and --N must be positive"));
    }
    if let Some(r) = a.rates.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
        return Err(config_err(format!("rate {r} must be positive")));
    }
    let mut table = Table::new(
        "rate_bits and charged_bits in bits/symbol per device; distortion and predicted_distortion in squared error per symbol",
        &["scheme", "rho", "rate_bits", "charged_bits", "distortion", "predicted_distortion", "seed"],
    );
    let options = MmOptions::default();
    for (ri, &rho) in a.rho.iter().enumerate() {
        let sources = sim::synthetic_sources(rho, a.m, a.n, seed_stream(a.seed, &["sources".into(), ri.into()]))?;
        for (k, &rate) in a.rates.iter().enumerate() {
            let point_seed = seed_stream(a.seed, &["point".into(), ri.into(), k.into()]);
            for &scheme in &schemes {
                let p = sim::sweep_point(scheme, &sources, rho, rate, point_seed, &options)?;
                table.rows.push(vec![
                    scheme.name().to_string(),
                    num(rho),
                    num(rate),
                    num(p.charged_bits),
                    num(p.distortion),
                    opt_num(p.predicted),
                    a.seed.to_string(),
                ]);
            }
        }
    }
    sink.csv("sweep-distortion.csv", &table)?;
    sink.sidecar(
        config,
        json!({
            "rate_accounting": "baselines: fixed-width codes plus one 64-bit scalar per vector; mbtc: analytic corner rates of the noise-addition surrogate",
            "target": "mean of the device vectors",
        }),
    )?;
    print!("{}", table.body()?);
    Ok(())
}

fn aggregator(a: &FlArgs, seed: u64) -> Result<Box<dyn Aggregator>, CliError> {
    let parse = |v: &str| v.parse::<u32>().ok().filter(|n| *n >= 1);
    let spec = a.aggregator.as_str();
    Ok(match spec {
        "error-free" => Box::new(fl::ErrorFree),
        "mbtc" => Box::new(fl::Mbtc {
            budget: RateBudget::uniform(a.devices, a.budget)?,
            choice: OptimizerChoice::General,
            options: MmOptions::default(),
            seed,
        }),
        _ => match spec.split_once(':') {
            Some(("qsgd", v)) => Box::new(fl::Qsgd {
                levels: parse(v).ok_or_else(|| config_err(format!("bad QSGD level count in {spec:?}")))?,
                seed,
            }),
            Some(("uniform", v)) => Box::new(fl::RotatedUniform {
                bits: parse(v)
                    .filter(|b| *b <= sim::MAX_UNIFORM_BITS)
                    .ok_or_else(|| config_err(format!("bad bit width in {spec:?}")))?,
                seed,
            }),
            _ => {
                return Err(config_err(format!(
                    "unknown aggregator {spec:?}; expected mbtc, qsgd:<levels>, uniform:<bits> or error-free"
                )))
            }
        },
    })
}

fn fl_train(a: &FlArgs, config: &ExperimentConfig, sink: Sink) -> Result<(), CliError> {
    if a.rounds == 0 {
        return Err(config_err("--rounds must be at least 1"));
    }
    let mut agg = aggregator(a, seed_stream(a.seed, &["aggregator".into()]))?;
    let task = fl::QuadraticTask::random(a.devices, a.dim, a.samples_per_device, a.mu, seed_stream(a.seed, &["task".into()]))?;
    let trace = fl::run_training(&task, agg.as_mut(), a.rounds, seed_stream(a.seed, &["training".into()]))?;
    let mut header = vec!["round", "loss_gap", "error_energy", "bound_value", "unrolled_bound"].into_iter().map(String::from).collect::<Vec<_>>();
    header.extend((0..a.devices).map(|m| format!("rate_{m}")));
    let mut table = Table {
        units: "loss_gap and bound_value in loss units; error_energy in squared error per coordinate; rate_m in bits/symbol",
        header,
        rows: Vec::new(),
    };
    for r in &trace.rows {
        let mut row = vec![r.round.to_string(), num(r.loss_gap), num(r.error_energy), num(r.bound), num(r.unrolled_bound)];
        row.extend((0..a.devices).map(|m| r.rates.get(m).map(|v| num(*v)).unwrap_or_default()));
        table.rows.push(row);
    }
    sink.csv("fl-train.csv", &table)?;
    sink.sidecar(
        config,
        json!({
            "aggregator": trace.aggregator,
            "omega": trace.omega,
            "Omega": trace.big_omega,
            "eta": trace.eta,
            "worst_round_violation": trace.worst_round_violation(task.dim()),
        }),
    )?;
    print!("{}", table.body()?);
    Ok(())
}

struct Check {
    name: String,
    value: f64,
    expected: String,
    pass: bool,
}

fn near(name: String, value: f64, expected: f64, rel: f64) -> Check {
    Check {
        pass: (value - expected).abs() <= rel * expected.abs(),
        expected: num(expected),
        name,
        value,
    }
}

fn single_source_checks() -> Result<Vec<Check>, CliError> {
    let mut checks = Vec::new();
    for (s2, r, q, d) in [(1.0, 1.0, 1.0 / 3.0, 0.25), (1.0, 0.5, 1.0, 0.5), (4.0, 2.0, 4.0 / 15.0, 0.25)] {
        let (qs, ds) = region::single_source_rd(s2, r)?;
        checks.push(near(format!("closed_form_q sigma2={s2} R={r}"), qs, q, 1e-12));
        checks.push(near(format!("closed_form_d sigma2={s2} R={r}"), ds, d, 1e-12));
        let model = GaussianSourceModel::from_rows(&[vec![s2]], &[1.0])?;
        let v = region::distortion(&model, &MbtcParams::new(vec![qs])?)?;
        checks.push(near(format!("distortion_at_rd_point sigma2={s2} R={r}"), v, ds, 1e-12));
    }
    let unit = GaussianSourceModel::from_rows(&[vec![1.0]], &[1.0])?;
    let w = region::mmse_combiner(&unit, &MbtcParams::new(vec![1.0])?)?;
    checks.push(near("combiner q=1".into(), w[0], 0.5, 1e-12));
    let one_bit = RateBudget::new(vec![1.0])?;
    let f = region::is_feasible(&unit, &MbtcParams::new(vec![1.0 / 3.0])?, &one_bit)?;
    checks.push(Check {
        name: "boundary_feasible q=1/3 R=1".into(),
        value: f.worst_slack,
        expected: "0 within 1e-9".into(),
        pass: f.feasible && f.worst_slack.abs() <= 1e-9,
    });
    let f = region::is_feasible(&unit, &MbtcParams::new(vec![0.1])?, &one_bit)?;
    checks.push(Check {
        name: "infeasible q=0.1 R=1".into(),
        value: f.worst_slack,
        expected: "negative slack".into(),
        pass: !f.feasible,
    });
    for r in [0.5, 1.0, 2.0] {
        let d = 2f64.powf(-2.0 * r);
        let general = mm_general::optimize(&unit, &RateBudget::new(vec![r])?, &MmOptions::default())?;
        checks.push(near(format!("general_algorithm R={r}"), general.distortion, d, 1e-4));
        let sym = SymmetricSourceModel::new(0.0, 1.0, vec![mbtc_core::model::DeviceGroup { size: 1, rate: r }])?;
        let grouped = mm_symmetric::optimize_symmetric(&sym, 1.0, &MmOptions::default())?;
        checks.push(near(format!("symmetric_algorithm R={r}"), grouped.distortion, d, 1e-4));
    }
    Ok(checks)
}

fn verify_suite(config: &ExperimentConfig, sink: Sink) -> Result<(), CliError> {
    let checks = single_source_checks()?;
    let mut table = Table::new("value and expected in the check's own units (bits/symbol, squared error per symbol, or variance)", &["check", "status", "value", "expected"]);
    let mut failed = 0;
    for c in &checks {
        let status = if c.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!c.pass);
        println!("{status} {} value={} expected={}", c.name, num(c.value), c.expected);
        table.rows.push(vec![c.name.clone(), status.into(), num(c.value), c.expected.clone()]);
    }
    sink.csv("verify.csv", &table)?;
    sink.sidecar(config, json!({ "checks": checks.len(), "failed": failed }))?;
    if failed > 0 {
        return Err(CliError::Failed(failed));
    }
    Ok(())
}

fn verify_region(a: &RegionArgs, config: &ExperimentConfig, sink: Sink) -> Result<(), CliError> {
    let (doc, input_hash) = load_model(&a.model)?;
    let (model, budget) = general_problem(&doc, a.budget.as_ref(), None)?;
    let q = MbtcParams::new(a.q.clone())?;
    let f = region::is_feasible(&model, &q, &budget)?;
    let mut table = Table::new("required_bits, budget_bits and slack in bits/symbol", &["subset_mask", "required_bits", "budget_bits", "slack"]);
    for c in &f.constraints {
        table.rows.push(vec![c.subset_mask.to_string(), num(c.required_bits), num(c.budget_bits), num(c.slack)]);
    }
    sink.csv("verify-region.csv", &table)?;
    sink.sidecar(
        config,
        json!({
            "input_sha256": input_hash,
            "feasible": f.feasible,
            "worst_slack": f.worst_slack,
            "binding_mask": f.binding_mask,
        }),
    )?;
    print!("{}", table.body()?);
    Ok(())
}
