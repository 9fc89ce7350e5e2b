// Copyright 2026 the dam authors
// SPDX-License-Identifier: Apache-2.0 OR MIT

//! The `dam` command line: compile placement-annotated programs to code
//! tables, run them on any of the machines, and check the layered machines
//! against each other and the reference evaluator.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dam_core::bisim::{check_async_equiv, lockstep, LockstepConfig, LockstepReport, ValueShape, Verdict};
use dam_core::bytecode::{compile, deserialize, serialize, CodeTable};
use dam_core::ces::run_ces;
use dam_core::cesh::{run_cesh, CeshValue};
use dam_core::dcesh::{run_dcesh_async, run_dcesh_sync, DMachine, DValue};
use dam_core::dcesh1::{run_dcesh1, D1Value};
use dam_core::machine::{trace_line, Outcome};
use dam_core::network::{AsyncEvent, Policy, SyncEvent};
use dam_core::syntax::{gen_term, parse_core, pretty, CoreTerm, NodeName};

/// Like `println!` but survives the consumer hanging up, so traces can be
/// piped through `head` without a panic. The exit code still reflects the
/// run.
macro_rules! say {
    ($($arg:tt)*) => { emit(format_args!($($arg)*)) };
}

fn emit(args: std::fmt::Arguments) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_fmt(args);
    let _ = out.write_all(b"\n");
}

#[derive(Parser)]
#[command(name = "dam", version, about = "workbench for distributed abstract machines")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MachineKind {
    Ces,
    Cesh,
    Dcesh1,
    Dcesh,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NetKind {
    Sync,
    Async,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compile a source program to a code table.
    Compile {
        /// The `.lam` source file.
        input: PathBuf,
        /// Where to write the table; defaults to the input with `.dam`.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run a program on one of the machines.
    Run {
        /// A `.lam` source file or a `.dam` code table.
        program: PathBuf,
        /// Which machine executes the program.
        #[arg(long, value_enum)]
        machine: MachineKind,
        /// Network semantics; only the dcesh machine offers a choice.
        #[arg(long, value_enum)]
        net: Option<NetKind>,
        /// Maximum number of machine steps.
        #[arg(long, default_value_t = 100_000)]
        fuel: u64,
        /// Comma-separated node names for the dcesh machine.
        #[arg(long)]
        nodes: Option<String>,
        /// The node the program starts on; defaults to the first node.
        #[arg(long)]
        root: Option<String>,
        /// Print one line per transition.
        #[arg(long)]
        trace: bool,
        /// Randomise asynchronous delivery with this seed; default is
        /// first-in first-out.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a program on every layer at once and report disagreements.
    Check {
        /// A `.lam` or `.dam` program; omit it to check generated programs.
        file: Option<PathBuf>,
        /// A half-open seed range `A..B` of generated programs.
        #[arg(long)]
        seeds: Option<String>,
        /// Size bound for generated programs.
        #[arg(long, default_value_t = 30)]
        size: u32,
        /// Maximum number of machine steps per layer.
        #[arg(long, default_value_t = 100_000)]
        fuel: u64,
        /// Closure unfolding depth used by the network relation.
        #[arg(long, default_value_t = 3)]
        rank: u32,
        /// Comma-separated node names for the network layer.
        #[arg(long, default_value = "A,B")]
        nodes: String,
        /// The node the program starts on; defaults to the first node.
        #[arg(long)]
        root: Option<String>,
    },
    /// Print a deterministically generated program.
    Gen {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        size: u32,
        /// Node names the generator may place work on.
        #[arg(long, default_value = "A,B")]
        nodes: String,
    },
}

fn main() -> ExitCode {
    // clap exits 2 on usage errors by default, which would collide with
    // the fuel-exhaustion code; fold them into the configuration class.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let failed = e.use_stderr();
            let _ = e.print();
            return if failed { ExitCode::from(4) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(4)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Compile { input, output } => cmd_compile(&input, output),
        Cmd::Run { program, machine, net, fuel, nodes, root, trace, seed } => {
            cmd_run(RunArgs { program, machine, net, fuel, nodes, root, trace, seed })
        }
        Cmd::Check { file, seeds, size, fuel, rank, nodes, root } => {
            cmd_check(CheckArgs { file, seeds, size, fuel, rank, nodes, root })
        }
        Cmd::Gen { seed, size, nodes } => cmd_gen(seed, size, &nodes),
    }
}

fn parse_nodes(spec: &str) -> Result<Vec<NodeName>> {
    let mut out: Vec<NodeName> = Vec::new();
    for part in spec.split(',') {
        let name = part.trim();
        let node = NodeName::new(name).map_err(|e| anyhow!("bad node name {:?}: {}", name, e))?;
        if out.contains(&node) {
            bail!("node {} listed twice", node);
        }
        out.push(node);
    }
    Ok(out)
}

/// `.lam` files are parsed and compiled, `.dam` files are read back as
/// tables. The source term, when we have one, feeds the reference
/// evaluator in `check`.
fn load_program(path: &Path) -> Result<(CodeTable, Option<CoreTerm>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("lam") => {
            let (term, _) = parse_core(&text).map_err(|e| anyhow!("{}: {}", path.display(), e))?;
            let table = compile(&term).map_err(|e| anyhow!("{}: {}", path.display(), e))?;
            Ok((table, Some(term)))
        }
        Some("dam") => {
            let table = deserialize(&text).map_err(|e| anyhow!("{}: {}", path.display(), e))?;
            Ok((table, None))
        }
        _ => bail!("{}: expected a .lam or .dam file", path.display()),
    }
}

fn cmd_compile(input: &Path, output: Option<PathBuf>) -> Result<ExitCode> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let (term, _) = parse_core(&text).map_err(|e| anyhow!("{}: {}", input.display(), e))?;
    let table = compile(&term).map_err(|e| anyhow!("{}: {}", input.display(), e))?;
    let out = output.unwrap_or_else(|| input.with_extension("dam"));
    fs::write(&out, serialize(&table)).with_context(|| format!("writing {}", out.display()))?;
    say!("table entries: {}", table.len());
    say!("instructions: {}", table.instr_count());
    eprintln!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

struct RunArgs {
    program: PathBuf,
    machine: MachineKind,
    net: Option<NetKind>,
    fuel: u64,
    nodes: Option<String>,
    root: Option<String>,
    trace: bool,
    seed: Option<u64>,
}

/// Exit 0 when the machine halts, 2 on fuel exhaustion, 3 when it gets
/// stuck; configuration and load errors leave through `main` as 4.
fn finish<V>(outcome: Outcome<V>, render: impl FnOnce(&V) -> String) -> ExitCode {
    match outcome {
        Outcome::Halted { value, steps } => {
            say!("steps: {}", steps);
            say!("value: {}", render(&value));
            ExitCode::SUCCESS
        }
        Outcome::FuelExhausted { steps } => {
            say!("steps: {}", steps);
            say!("fuel: exhausted");
            ExitCode::from(2)
        }
        Outcome::Stuck { reason, steps } => {
            say!("steps: {}", steps);
            say!("stuck: {}", reason);
            ExitCode::from(3)
        }
    }
}

fn print_sync_trace<N: Display, R: Display, M: Display>(trace: &[SyncEvent<N, R, M>]) {
    for (i, ev) in trace.iter().enumerate() {
        let t = i + 1;
        match ev {
            SyncEvent::Silent { node, rule } => {
                say!("t={} kind=silent node={} rule={} msg=- inflight=0", t, node, rule);
            }
            SyncEvent::Comm { sender, receiver, send_rule, recv_rule, msg } => {
                say!(
                    "t={} kind=comm node={} recv={} rule={}/{} msg={} inflight=0",
                    t, sender, receiver, send_rule, recv_rule, msg
                );
            }
        }
    }
}

fn print_async_trace<N: Display, R: Display, M: Display>(trace: &[AsyncEvent<N, R, M>]) {
    let mut inflight = 0usize;
    for (i, ev) in trace.iter().enumerate() {
        let t = i + 1;
        match ev {
            AsyncEvent::Silent { node, rule } => {
                say!("t={} kind=silent node={} rule={} msg=- inflight={}", t, node, rule, inflight);
            }
            AsyncEvent::Send { node, rule, msg } => {
                inflight += 1;
                say!("t={} kind=async-send node={} rule={} msg={} inflight={}", t, node, rule, msg, inflight);
            }
            AsyncEvent::Receive { node, rule, msg } => {
                inflight -= 1;
                say!("t={} kind=async-recv node={} rule={} msg={} inflight={}", t, node, rule, msg, inflight);
            }
        }
    }
}

fn render_dvalue(value: &DValue, nodes: &BTreeMap<NodeName, DMachine>) -> String {
    match value {
        DValue::Nat(n) => format!("nat {}", n),
        DValue::Clos(rp) => match nodes.get(&rp.node).and_then(|m| m.clos_heap.deref(rp.ptr)) {
            Some(c) => format!("clos code={} env={}", c.code, c.env.len()),
            // the runner only reports pointers it allocated
            None => format!("clos {}", rp),
        },
    }
}

fn cmd_run(a: RunArgs) -> Result<ExitCode> {
    let (table, _) = load_program(&a.program)?;

    match a.machine {
        MachineKind::Ces | MachineKind::Cesh => {
            if a.net.is_some() || a.nodes.is_some() || a.root.is_some() {
                bail!("the sequential machines run on no network; drop --net, --nodes and --root");
            }
            if a.seed.is_some() {
                bail!("--seed only affects asynchronous delivery");
            }
            if table.uses_remote() {
                bail!("the program uses placement annotations; run it on the dcesh machine");
            }
        }
        MachineKind::Dcesh1 => {
            if a.net == Some(NetKind::Sync) {
                bail!("dcesh1 decomposes calls into messages to itself; it only runs asynchronously");
            }
            if a.nodes.is_some() || a.root.is_some() {
                bail!("dcesh1 runs on a single implicit node; drop --nodes and --root");
            }
            if a.seed.is_some() {
                bail!("dcesh1 has at most one message in flight, so delivery order is fixed");
            }
            if table.uses_remote() {
                bail!("the program uses placement annotations; run it on the dcesh machine");
            }
        }
        MachineKind::Dcesh => {}
    }

    match a.machine {
        MachineKind::Ces => {
            let (outcome, rules) = run_ces(&table, a.fuel);
            if a.trace {
                for (i, r) in rules.iter().enumerate() {
                    say!("{}", trace_line(i as u64 + 1, "ces", *r));
                }
            }
            Ok(finish(outcome, |v| format!("{}", v)))
        }
        MachineKind::Cesh => {
            let (outcome, rules, cfg) = run_cesh(&table, a.fuel);
            if a.trace {
                for (i, r) in rules.iter().enumerate() {
                    say!("{}", trace_line(i as u64 + 1, "cesh", *r));
                }
            }
            Ok(finish(outcome, |v| match v {
                CeshValue::Nat(n) => format!("nat {}", n),
                CeshValue::ClosPtr(p) => match cfg.heap.deref(*p) {
                    Some(c) => format!("clos code={} env={}", c.code, c.env.len()),
                    None => format!("clos ptr={}", p),
                },
            }))
        }
        MachineKind::Dcesh1 => {
            let (outcome, events, machine) = run_dcesh1(&table, a.fuel);
            if a.trace {
                print_async_trace(&events);
            }
            Ok(finish(outcome, |v| match v {
                D1Value::Nat(n) => format!("nat {}", n),
                D1Value::ClosPtr(p) => match machine.clos_heap.deref(*p) {
                    Some(c) => format!("clos code={} env={}", c.code, c.env.len()),
                    None => format!("clos ptr={}", p),
                },
            }))
        }
        MachineKind::Dcesh => {
            let nodes = parse_nodes(a.nodes.as_deref().unwrap_or("A"))?;
            let root = match &a.root {
                Some(r) => NodeName::new(r).map_err(|e| anyhow!("bad node name {:?}: {}", r, e))?,
                None => nodes[0].clone(),
            };
            if !nodes.contains(&root) {
                bail!("root {} is not among the nodes", root);
            }
            let targets = table.remote_targets();
            let missing: Vec<String> =
                targets.iter().filter(|t| !nodes.contains(t)).map(|t| t.to_string()).collect();
            if !missing.is_empty() {
                bail!("the program places work on {} but the network has no such node", missing.join(", "));
            }
            match a.net.unwrap_or(NetKind::Sync) {
                NetKind::Sync => {
                    if a.seed.is_some() {
                        bail!("--seed only affects asynchronous delivery");
                    }
                    let (outcome, trace, net) =
                        run_dcesh_sync(&table, &root, &nodes, a.fuel).map_err(|e| anyhow!(e))?;
                    if a.trace {
                        print_sync_trace(&trace);
                    }
                    Ok(finish(outcome, |v| render_dvalue(v, &net.nodes)))
                }
                NetKind::Async => {
                    let policy = match a.seed {
                        Some(s) => Policy::random(s),
                        None => Policy::Fifo,
                    };
                    let (outcome, trace, net) =
                        run_dcesh_async(&table, &root, &nodes, a.fuel, policy).map_err(|e| anyhow!(e))?;
                    if a.trace {
                        print_async_trace(&trace);
                    }
                    Ok(finish(outcome, |v| render_dvalue(v, &net.nodes)))
                }
            }
        }
    }
}

struct CheckArgs {
    file: Option<PathBuf>,
    seeds: Option<String>,
    size: u32,
    fuel: u64,
    rank: u32,
    nodes: String,
    root: Option<String>,
}

fn parse_seed_range(s: &str) -> Result<(u64, u64)> {
    let (a, b) = s.split_once("..").ok_or_else(|| anyhow!("--seeds takes a half-open range like 0..100"))?;
    let lo: u64 = a.trim().parse().with_context(|| format!("bad seed {:?}", a.trim()))?;
    let hi: u64 = b.trim().parse().with_context(|| format!("bad seed {:?}", b.trim()))?;
    if lo >= hi {
        bail!("empty seed range {}..{}", lo, hi);
    }
    Ok((lo, hi))
}

/// One line per program; a second indented line carries the witness when a
/// layer disagrees. Returns whether everything agreed.
fn print_check_line(ident: &str, report: &LockstepReport, async_result: &Result<(), String>) -> bool {
    let label = match &report.verdict {
        Verdict::AllAgree { .. } => {
            if async_result.is_ok() {
                "all-agree"
            } else {
                "async-mismatch"
            }
        }
        Verdict::RelationBroken { .. } => "relation-broken",
        Verdict::OutcomeMismatch { .. } => "outcome-mismatch",
        Verdict::InvariantViolated { .. } => "invariant-violated",
    };
    let value = match &report.value {
        Some(ValueShape::Nat(n)) => format!("nat:{}", n),
        Some(ValueShape::Clos) => "clos".to_string(),
        None => "-".to_string(),
    };
    say!("{} verdict={} steps={} value={}", ident, label, report.steps, value);
    let mut ok = true;
    if !matches!(report.verdict, Verdict::AllAgree { .. }) {
        say!("  witness: {}", report.verdict);
        ok = false;
    }
    if let Err(e) = async_result {
        say!("  witness: {}", e);
        ok = false;
    }
    ok
}

fn cmd_check(a: CheckArgs) -> Result<ExitCode> {
    let nodes = parse_nodes(&a.nodes)?;
    let root = match &a.root {
        Some(r) => NodeName::new(r).map_err(|e| anyhow!("bad node name {:?}: {}", r, e))?,
        None => nodes[0].clone(),
    };
    if !nodes.contains(&root) {
        bail!("root {} is not among the nodes", root);
    }
    let cfg = LockstepConfig { fuel: a.fuel, rank: a.rank, nodes, root };

    // The reference evaluator recurses on the term, so deep programs need
    // more stack than the default thread carries.
    let handle = std::thread::Builder::new()
        .stack_size(64 << 20)
        .spawn(move || check_body(a, cfg))
        .context("spawning the check thread")?;
    handle.join().map_err(|_| anyhow!("the check thread panicked"))?
}

fn check_body(a: CheckArgs, cfg: LockstepConfig) -> Result<ExitCode> {
    match (a.file, a.seeds) {
        (Some(path), None) => {
            let (table, term) = load_program(&path)?;
            let targets = table.remote_targets();
            let missing: Vec<String> =
                targets.iter().filter(|t| !cfg.nodes.contains(t)).map(|t| t.to_string()).collect();
            if !missing.is_empty() {
                bail!("the program places work on {} but the network has no such node", missing.join(", "));
            }
            let report = lockstep(&table, term.as_ref(), &cfg);
            let async_result =
                check_async_equiv(&table, &cfg.root, &cfg.nodes, cfg.fuel, 7).map(|_| ());
            let ok = print_check_line(&format!("file={}", path.display()), &report, &async_result);
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        (None, Some(range)) => {
            let (lo, hi) = parse_seed_range(&range)?;
            let mut failures = 0u64;
            for seed in lo..hi {
                let term = gen_term(seed, a.size, &cfg.nodes);
                let table = compile(&term).map_err(|e| anyhow!("seed {}: {}", seed, e))?;
                let report = lockstep(&table, Some(&term), &cfg);
                let async_result =
                    check_async_equiv(&table, &cfg.root, &cfg.nodes, cfg.fuel, seed).map(|_| ());
                if !print_check_line(&format!("seed={}", seed), &report, &async_result) {
                    failures += 1;
                }
            }
            say!("checked {} programs: {} failures", hi - lo, failures);
            Ok(if failures == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        (Some(_), Some(_)) => bail!("give a file or --seeds, not both"),
        (None, None) => bail!("give a file or --seeds"),
    }
}

fn cmd_gen(seed: u64, size: u32, nodes: &str) -> Result<ExitCode> {
    let nodes = parse_nodes(nodes)?;
    say!("{}", pretty(&gen_term(seed, size, &nodes)));
    Ok(ExitCode::SUCCESS)
}
