//! Subcommand implementations.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use swiftkv_core::analysis::{
    breakdown_rows, calibrate_attn_context, flops_prefill_token, render_csv, render_table, sim_score, ModelDesc,
};
use swiftkv_core::checkpoint::{self, Checkpoint};
use swiftkv_core::distill::{evaluate, gradcheck, render_history_csv, synth_dataset, train};
use swiftkv_core::model::{forward_full, generate, init_random};
use swiftkv_core::servesim::{memory_study, run_sim, Arrival, EngineConfig, SimMetrics};
use swiftkv_core::swiftkv::{generate_skip, rewire_with_scope, TrainScope};
use swiftkv_core::{CacheConfig, Precision, Quantization, StudentParameters, SwiftKvConfig};

use crate::config::RunConfig;

/// `println!` that stops quietly when stdout is closed early (e.g. piped into `head`).
macro_rules! emitln {
    ($($arg:tt)*) => { emit(&format!("{}\n", format_args!($($arg)*))) };
}

fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if out.write_all(text.as_bytes()).and_then(|_| out.flush()).is_err() {
        std::process::exit(0);
    }
}
use crate::{Cli, Command, GenMode, ScopeArg, SwiftArgs};

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Init { seed, out } => {
            let params = init_random(&cfg.model, seed)?;
            checkpoint::save_model(&out, &params)?;
            emitln!("initialised {} parameters into {}", params.parameter_count(), out.display());
        }
        Command::Transform { checkpoint, out, swift } => {
            apply_swift_args(&mut cfg, &swift);
            let base = load_model(&checkpoint)?;
            let student = rewire(&cfg, &base)?;
            checkpoint::save_student(&out, &student)?;
            emitln!(
                "rewired at cutoff {} (group {}): {} trainable of {} base parameters",
                student.cutoff(),
                student.config.group,
                student.trainable_parameter_count(),
                student.base.parameter_count()
            );
        }
        Command::Distill { checkpoint, out, epochs, lr, sequences, seed, swift } => {
            apply_swift_args(&mut cfg, &swift);
            let t = &mut cfg.train;
            t.optim.epochs = epochs.unwrap_or(t.optim.epochs);
            t.optim.learning_rate = lr.unwrap_or(t.optim.learning_rate);
            t.sequences = sequences.unwrap_or(t.sequences);
            t.optim.seed = seed.unwrap_or(t.optim.seed);
            distill(&cfg, &checkpoint, &out)?;
        }
        Command::Generate { checkpoint, prompt, max_new_tokens, mode, fp8, early_exit, out } => {
            let prompt = parse_tokens(&prompt)?;
            let cache = CacheConfig {
                quantization: if fp8 { Quantization::Fp8PerToken } else { Quantization::None },
                ..CacheConfig::default()
            };
            let ckpt = checkpoint::load(&checkpoint)?;
            let (tokens, exits) = match (mode, &ckpt) {
                (GenMode::Teacher, c) => (generate(c.base(), &prompt, max_new_tokens, &cache)?, 0),
                (GenMode::Swiftkv, Checkpoint::Student(s)) => {
                    generate_skip(s, &prompt, max_new_tokens, &cache, early_exit)?
                }
                (GenMode::Swiftkv, Checkpoint::Model(_)) => {
                    bail!("swiftkv mode needs a student checkpoint; run `transform` first")
                }
            };
            emitln!("{}", join(&tokens));
            if let Some(dir) = out {
                write_json(
                    &dir,
                    "generate.json",
                    &json!({ "prompt": prompt, "tokens": tokens, "early_exits": exits }),
                )?;
            }
        }
        Command::Simscore { checkpoint, prompt, length, seed, include_final, out } => {
            let ckpt = checkpoint::load(&checkpoint)?;
            let base = ckpt.base();
            let tokens = match prompt {
                Some(p) => parse_tokens(&p)?,
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    (0..length).map(|_| rng.random_range(0..base.config.vocab_size)).collect()
                }
            };
            let (_, trace) = forward_full(base, &tokens)?;
            let profile = sim_score(&trace, include_final)?;
            let mut csv = String::from("layer,simscore\n");
            for (l, s) in profile.scores.iter().enumerate() {
                csv.push_str(&format!("{l},{s:.8}\n"));
            }
            emit(&csv);
            if let Some(dir) = out {
                write_file(&dir, "simscore.csv", &csv)?;
            }
        }
        Command::Flops { preset, swiftkv, acrosskv, attn_gflops, causal_factor, out } => {
            let desc = preset_desc(&preset)?;
            let attn = calibrate_attn_context(&desc, attn_gflops * 1e9, causal_factor);
            let l = desc.num_layers;
            let rows = match swiftkv {
                None => breakdown_rows(&desc, attn),
                Some(f) => {
                    if !(0.0..=1.0).contains(&f) {
                        bail!("--swiftkv {f} outside [0, 1]");
                    }
                    let cfg = SwiftKvConfig::from_fraction(l, f, acrosskv);
                    cfg.validate(l)?;
                    let mut label = format!("{}% SwiftKV", (f * 100.0).round());
                    if acrosskv > 1 {
                        label.push_str(&format!(" + {acrosskv}x AcrossKV"));
                    }
                    let base = SwiftKvConfig::baseline(l);
                    vec![
                        ("Baseline".to_string(), flops_prefill_token(&desc, &base, attn)),
                        (label, flops_prefill_token(&desc, &cfg, attn)),
                    ]
                }
            };
            emit(&render_table(&rows));
            if let Some(dir) = out {
                write_file(&dir, "flops.csv", &render_csv(&rows))?;
            }
        }
        Command::Simulate { out, rate, compare_baseline } => {
            if let Some(r) = rate {
                cfg.workload = cfg.workload.with_rate(r);
            }
            let engine = cfg.engine.build(&cfg.swiftkv)?;
            let m = run_sim(&cfg.workload, &engine, &cfg.hardware)?;
            write_file(&out, "requests.csv", &requests_csv(&m)?)?;
            let mut summary = summary_json(&m);
            let mut baseline_line = None;
            if compare_baseline {
                let base = EngineConfig { swiftkv: SwiftKvConfig::baseline(engine.model.num_layers), ..engine.clone() };
                let b = run_sim(&cfg.workload, &base, &cfg.hardware)?;
                summary["baseline"] = summary_json(&b);
                let ratio = if b.throughput > 0.0 { m.throughput / b.throughput } else { 0.0 };
                summary["throughput_ratio"] = json!(ratio);
                baseline_line = Some(format!(
                    "baseline: throughput {:.1} tok/s, mean TTFT {:.4} s, mean TPOT {:.5} s; ratio {ratio:.3}",
                    b.throughput,
                    b.mean_ttft(),
                    b.mean_tpot()
                ));
            }
            write_json(&out, "summary.json", &summary)?;
            emitln!(
                "{} completed, {} rejected; throughput {:.1} tok/s, mean TTFT {:.4} s, mean TPOT {:.5} s",
                m.requests.len(),
                m.rejected.len(),
                m.throughput,
                m.mean_ttft(),
                m.mean_tpot()
            );
            if let Some(line) = baseline_line {
                emitln!("{line}");
            }
        }
        Command::Memstudy { capacities_gb, concurrency, requests, out } => {
            let desc = cfg.engine.model_desc()?;
            cfg.workload.arrival = Arrival::ClosedLoop { concurrency };
            cfg.workload.num_requests = requests;
            let caps: Vec<f64> = capacities_gb.iter().map(|g| g * 1e9).collect();
            let rows = memory_study(&desc, &cfg.hardware, &caps, &cfg.workload)?;
            let mut csv = String::from("capacity_gb,variant,throughput_tok_s,rejected,kv_high_water_bytes\n");
            emitln!("{:>8}  {:<26} {:>12}", "memory", "variant", "tokens/s");
            for r in &rows {
                let tp = r.throughput.map_or("OOM".to_string(), |t| format!("{t:.1}"));
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.capacity / 1e9,
                    r.variant.label(),
                    tp,
                    r.rejected,
                    r.kv_high_water
                ));
                emitln!("{:>6}GB  {:<26} {:>12}", r.capacity / 1e9, r.variant.label(), tp);
            }
            if let Some(dir) = out {
                write_file(&dir, "memstudy.csv", &csv)?;
            }
        }
        Command::Gradcheck { samples, seed, tokens, step, tolerance, out } => {
            if cfg.model.precision != Precision::Double {
                bail!("gradient checking needs double precision");
            }
            let base = init_random(&cfg.model, seed)?;
            cfg.swiftkv.early_exit = true;
            let student = rewire(&cfg, &base)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seq: Vec<usize> = (0..tokens).map(|_| rng.random_range(0..base.config.vocab_size)).collect();
            let report = gradcheck(&student, &seq, cfg.train.optim.temperature, samples, step, seed)?;
            if let Some(dir) = out {
                write_json(&dir, "gradcheck.json", &serde_json::to_value(&report)?)?;
            }
            emitln!("checked {} coordinates, max relative error {:.3e}", report.samples.len(), report.max_rel_err);
            // Written negated so a NaN error also fails.
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(report.max_rel_err <= tolerance) {
                bail!("max relative error {:.3e} exceeds tolerance {tolerance:e}", report.max_rel_err);
            }
        }
    }
    Ok(())
}

fn apply_swift_args(cfg: &mut RunConfig, a: &SwiftArgs) {
    let s = &mut cfg.swiftkv;
    if a.cutoff.is_some() {
        s.cutoff = a.cutoff;
    }
    if let Some(f) = a.fraction {
        s.fraction = f;
        s.cutoff = None;
    }
    s.group = a.group.unwrap_or(s.group);
    s.early_exit |= a.early_exit;
    if let Some(scope) = a.scope {
        s.scope = match scope {
            ScopeArg::Qkv => TrainScope::Qkv,
            ScopeArg::FullLayers => TrainScope::FullLayers,
        };
    }
}

fn rewire(cfg: &RunConfig, base: &swiftkv_core::Parameters) -> Result<StudentParameters> {
    let swift = cfg.swiftkv.resolve(base.config.num_layers)?;
    Ok(rewire_with_scope(base, &swift, cfg.swiftkv.scope)?)
}

fn load_model(dir: &Path) -> Result<swiftkv_core::Parameters> {
    match checkpoint::load(dir)? {
        Checkpoint::Model(p) => Ok(p),
        Checkpoint::Student(_) => bail!("{} is already a student checkpoint", dir.display()),
    }
}

fn distill(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<()> {
    let mut student = match checkpoint::load(ckpt)? {
        Checkpoint::Student(s) => s,
        Checkpoint::Model(p) => rewire(cfg, &p)?,
    };
    let t = &cfg.train;
    let c = &student.base.config;
    let data = synth_dataset(c.vocab_size, t.sequences, t.optim.max_seq_len.min(c.max_seq_len), t.data_seed);
    let initial = evaluate(&student, &data, &t.optim)?;
    let state = train(&mut student, &data, &t.optim)?;
    let final_loss = evaluate(&student, &data, &t.optim)?;
    checkpoint::save_student(out.join("checkpoint"), &student)?;
    write_file(out, "loss.csv", &render_history_csv(&state.history))?;
    write_json(
        out,
        "summary.json",
        &json!({
            "initial_loss": initial,
            "final_loss": final_loss,
            "steps": state.step,
            "trainable_parameters": student.trainable_parameter_count(),
            "scope": student.scope,
            "cutoff": student.cutoff(),
        }),
    )?;
    emitln!("distilled {} steps: loss {initial:.6} -> {final_loss:.6}", state.step);
    Ok(())
}

fn preset_desc(name: &str) -> Result<ModelDesc> {
    ModelDesc::preset(name).with_context(|| format!("unknown model preset `{name}` (expected llama8b or llama70b)"))
}

fn parse_tokens(s: &str) -> Result<Vec<usize>> {
    s.split(',').map(|t| t.trim().parse::<usize>().with_context(|| format!("bad token id `{t}`"))).collect()
}

fn join(tokens: &[usize]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<()> {
    write_file(dir, name, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn requests_csv(m: &SimMetrics) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["request_id", "arrival_s", "ttft_s", "tpot_s", "in_tokens", "out_tokens"])?;
    let mut rows: Vec<_> = m.requests.iter().collect();
    rows.sort_by_key(|r| r.id);
    for r in rows {
        w.write_record([
            r.id.to_string(),
            format!("{:.9}", r.arrival),
            format!("{:.9}", r.ttft),
            format!("{:.9}", r.tpot),
            r.input_tokens.to_string(),
            r.output_tokens.to_string(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn summary_json(m: &SimMetrics) -> serde_json::Value {
    json!({
        "completed": m.requests.len(),
        "rejected": m.rejected,
        "makespan_s": m.makespan,
        "throughput_tok_s": m.throughput,
        "mean_ttft_s": m.mean_ttft(),
        "mean_tpot_s": m.mean_tpot(),
        "max_queue_depth": m.queue_depth.iter().map(|q| q.1).max().unwrap_or(0),
        "kv_high_water_bytes": m.kv_high_water,
        "iterations": m.iterations,
    })
}
