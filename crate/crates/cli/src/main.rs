//! `gla`: generate instances, run the forms, verify them, time them and
//! print their cost counters.
//!
//! Exit codes: 0 success, 1 a check failed, 2 bad input or I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use gla_core::exec;
use gla_core::parallel_form::ParallelOptions;
use gla_core::tensor_file::tensor_path;
use gla_core::verify::{all_pass, default_chunk_sweep};
use gla_core::{
    check_equivalence, check_gradients, forward_chunkwise, forward_parallel_with, forward_recurrent,
    make_cotangent, make_instance, predict_cost, predict_parallel_cost, predict_recurrent_cost, read_tensor,
    write_tensor, CheckReport, ChunkPlan, ChunkPolicy, CostReport, Form, GateGradSign, GateSeq, GlaError,
    GlaInstance, GradCheckOptions, Pass, RunConfig, TensorFile,
};

const INPUT_NAMES: [&str; 5] = ["Q", "K", "V", "log_alpha", "log_beta"];

#[derive(Parser)]
#[command(
    name = "gla",
    version,
    about = "Gated linear attention: recurrent, parallel and chunkwise forms"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a seeded instance (Q, K, V, log-gates) and its config.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one form on an instance directory and write O plus counters.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Equivalence checks, or compare two output files with --compare.
    Check {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Check an instance directory instead of a generated instance.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        compare: Option<Vec<PathBuf>>,
    },
    /// Analytic gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Use the opposite sign for the key-decay gradient.
        #[arg(long)]
        flip_dlogb_sign: bool,
    },
    /// Wall-clock medians per form with counted flops and state traffic.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Predicted counters for the configured shape.
    Cost {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    kind: Option<String>,
    #[arg(long = "len", short = 'L')]
    len: Option<usize>,
    #[arg(long)]
    dk: Option<usize>,
    #[arg(long)]
    dv: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gate_floor: Option<f64>,
    #[arg(long)]
    chunk: Option<usize>,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    form: Option<String>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    grad_tol: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let pairs: [(&str, Option<String>); 12] = [
            ("kind", self.kind.clone()),
            ("L", self.len.map(|x| x.to_string())),
            ("dk", self.dk.map(|x| x.to_string())),
            ("dv", self.dv.map(|x| x.to_string())),
            ("seed", self.seed.map(|x| x.to_string())),
            ("gate_floor", self.gate_floor.map(|x| x.to_string())),
            ("chunk", self.chunk.map(|x| x.to_string())),
            ("policy", self.policy.clone()),
            ("form", self.form.clone()),
            ("tol", self.tol.map(|x| x.to_string())),
            ("grad_tol", self.grad_tol.map(|x| x.to_string())),
            ("eps", self.eps.map(|x| x.to_string())),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

enum Failure {
    Checks,
    Input(String),
}

impl From<GlaError> for Failure {
    fn from(e: GlaError) -> Self {
        Failure::Input(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Input(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = apply_thread_env() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Checks) => ExitCode::from(1),
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn apply_thread_env() -> Result<(), String> {
    match std::env::var("GLA_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| format!("GLA_THREADS={v:?} is not a count"))?;
            exec::configure_threads(n);
            Ok(())
        }
        Err(_) => Ok(()),
    }
}

fn dispatch(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Gen { cfg, out } => gen(&cfg.resolve()?, &out),
        Cmd::Run { cfg, input, out } => run(&cfg.resolve()?, &input, &out),
        Cmd::Check { cfg, input, compare } => {
            let cfg = cfg.resolve()?;
            match compare {
                Some(pair) => compare_files(&pair[0], &pair[1], cfg.tol),
                None => check(&cfg, input.as_deref()),
            }
        }
        Cmd::Gradcheck { cfg, flip_dlogb_sign } => gradcheck(&cfg.resolve()?, flip_dlogb_sign),
        Cmd::Bench { cfg, repeats } => bench(&cfg.resolve()?, repeats),
        Cmd::Cost { cfg } => cost(&cfg.resolve()?),
    }
}

fn instance(cfg: &RunConfig) -> Result<GlaInstance, Failure> {
    Ok(make_instance(
        cfg.kind,
        cfg.len,
        cfg.dk,
        cfg.dv,
        cfg.seed,
        cfg.gate_floor,
    )?)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn gen(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let inst = instance(cfg)?;
    create_dir(out)?;
    let tensors = [
        inst.q(),
        inst.k(),
        inst.v(),
        inst.gates().log_alpha(),
        inst.gates().log_beta(),
    ];
    for (name, t) in INPUT_NAMES.iter().zip(tensors) {
        write_tensor(tensor_path(out, name), t)?;
    }
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, cfg.to_string()).map_err(|e| io_err(&cfg_path, e))?;
    println!(
        "wrote {} (L={}, dk={}, dv={}, kind={})",
        out.display(),
        cfg.len,
        cfg.dk,
        cfg.dv,
        cfg.kind
    );
    Ok(())
}

fn load_instance(dir: &Path) -> Result<GlaInstance, Failure> {
    let mut ts = Vec::with_capacity(5);
    for name in INPUT_NAMES {
        ts.push(read_tensor(tensor_path(dir, name))?);
    }
    let mut it = ts.into_iter();
    let mut next = || it.next().expect("five tensors");
    let (q, k, v, la, lb) = (next(), next(), next(), next(), next());
    let gates = GateSeq::new(la, lb).map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))?;
    GlaInstance::new(q, k, v, gates).map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))
}

fn run(cfg: &RunConfig, input: &Path, out: &Path) -> Result<(), Failure> {
    let inst = load_instance(input)?;
    let (o, cost, states) = match cfg.form {
        Form::Recurrent => {
            let t = forward_recurrent(&inst, false);
            (t.o, t.cost, None)
        }
        Form::Parallel => {
            let (o, c) = forward_parallel_with(&inst, ParallelOptions::default())?;
            (o, c, None)
        }
        Form::Chunkwise => {
            let plan = ChunkPlan::new(inst.len(), cfg.chunk)?;
            let r = forward_chunkwise(&inst, &plan, cfg.policy)?;
            (r.o, r.cost, r.states)
        }
    };
    create_dir(out)?;
    write_tensor(tensor_path(out, "O"), &o)?;
    if let Some(states) = states {
        let dir = out.join("states");
        create_dir(&dir)?;
        for (i, s) in states.iter().enumerate() {
            TensorFile::from_state(s).write(dir.join(format!("state_{i:04}.glat")))?;
        }
    }
    let cost_path = out.join("cost.txt");
    let text = format!("form = {}\n{cost}\n", cfg.form);
    fs::write(&cost_path, &text).map_err(|e| io_err(&cost_path, e))?;
    print!("{text}");
    Ok(())
}

fn print_reports(reports: &[CheckReport]) -> Result<(), Failure> {
    for r in reports {
        println!("{r}");
    }
    let passed = reports.iter().filter(|r| r.pass).count();
    println!("summary: {passed}/{} passed", reports.len());
    if all_pass(reports) {
        Ok(())
    } else {
        Err(Failure::Checks)
    }
}

fn check(cfg: &RunConfig, input: Option<&Path>) -> Result<(), Failure> {
    let inst = match input {
        Some(dir) => load_instance(dir)?,
        None => instance(cfg)?,
    };
    let mut chunks = default_chunk_sweep(inst.len());
    chunks.push(cfg.chunk.min(inst.len()));
    chunks.sort_unstable();
    chunks.dedup();
    print_reports(&check_equivalence(&inst, &chunks, cfg.tol))
}

fn compare_files(a: &Path, b: &Path, tol: f64) -> Result<(), Failure> {
    let (x, y) = (read_tensor(a)?, read_tensor(b)?);
    let report = if x.shape() != y.shape() {
        CheckReport::failed(
            "compare",
            tol,
            format!("shapes {:?} vs {:?}", x.shape(), y.shape()),
        )
    } else {
        CheckReport::compare("compare", &x, &y, tol, Default::default())
    };
    print_reports(&[report])
}

fn gradcheck(cfg: &RunConfig, flip: bool) -> Result<(), Failure> {
    let inst = instance(cfg)?;
    let d_o = make_cotangent(cfg.len, cfg.dv, cfg.seed);
    let mut opts = GradCheckOptions::new(cfg.eps, cfg.grad_tol, vec![cfg.chunk.min(cfg.len)]);
    if flip {
        opts.sign = GateGradSign::KeyMinusQuery;
    }
    print_reports(&check_gradients(&inst, &d_o, &opts))
}

fn median_ms(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

fn timed_repeats<T>(repeats: usize, mut f: impl FnMut() -> T) -> (f64, T) {
    let mut samples = Vec::with_capacity(repeats);
    let mut last = None;
    for _ in 0..repeats {
        let start = Instant::now();
        last = Some(f());
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    (median_ms(samples), last.expect("repeats >= 1"))
}

fn bench(cfg: &RunConfig, repeats: usize) -> Result<(), Failure> {
    if repeats < 3 {
        return Err(Failure::Input(format!("--repeats must be >= 3, got {repeats}")));
    }
    let inst = instance(cfg)?;
    let (len, dk, dv) = (cfg.len, cfg.dk, cfg.dv);
    let plan = ChunkPlan::new(len, cfg.chunk)?;
    println!("form\tL\tC\tpolicy\tmedian_ms\tflops\tpredicted_flops\tstate_traffic");

    let (ms, trace) = timed_repeats(repeats, || forward_recurrent(&inst, false));
    let pred = predict_recurrent_cost(len, dk, dv);
    println!(
        "recurrent\t{len}\t-\t-\t{ms:.3}\t{}\t{}\t{}",
        trace.cost.flops,
        pred.flops,
        trace.cost.state_traffic()
    );

    match forward_parallel_with(&inst, ParallelOptions::default()) {
        Err(e) => println!("parallel\t{len}\t-\t-\tSKIP\t-\t-\t- ({e})"),
        Ok(_) => {
            let (ms, res) = timed_repeats(repeats, || {
                forward_parallel_with(&inst, ParallelOptions::default())
            });
            let (_, c) = res?;
            let pred = predict_parallel_cost(len, dk, dv);
            println!(
                "parallel\t{len}\t-\t-\t{ms:.3}\t{}\t{}\t{}",
                c.flops,
                pred.flops,
                c.state_traffic()
            );
        }
    }

    for policy in [ChunkPolicy::Materialize, ChunkPolicy::Recompute] {
        let (ms, res) = timed_repeats(repeats, || forward_chunkwise(&inst, &plan, policy));
        let c = res?.cost;
        let pred = predict_cost(len, dk, dv, &plan, policy, Pass::Forward);
        println!(
            "chunkwise\t{len}\t{}\t{policy}\t{ms:.3}\t{}\t{}\t{}",
            cfg.chunk,
            c.flops,
            pred.flops,
            c.state_traffic()
        );
    }
    Ok(())
}

fn print_cost(label: &str, c: &CostReport) {
    println!("[{label}]\n{c}");
}

fn cost(cfg: &RunConfig) -> Result<(), Failure> {
    let (len, dk, dv) = (cfg.len, cfg.dk, cfg.dv);
    let plan = ChunkPlan::new(len, cfg.chunk)?;
    print_cost("recurrent forward", &predict_recurrent_cost(len, dk, dv));
    print_cost("parallel forward", &predict_parallel_cost(len, dk, dv));
    for policy in [ChunkPolicy::Materialize, ChunkPolicy::Recompute] {
        for (pass, name) in [(Pass::Forward, "forward"), (Pass::Backward, "backward")] {
            let label = format!("chunkwise C={} {policy} {name}", cfg.chunk);
            print_cost(&label, &predict_cost(len, dk, dv, &plan, policy, pass));
        }
    }
    Ok(())
}
