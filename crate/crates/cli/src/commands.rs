use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde_json::json;

use dscnn_core::compiler::plan::compile;
use dscnn_core::compiler::report::{render_text, PlanDocument};
use dscnn_core::compiler::schedule::emit_schedule;
use dscnn_core::config::PipelineConfig;
use dscnn_core::ir::graph::NetworkGraph;
use dscnn_core::ir::manifest::{load_model, save_model};
use dscnn_core::ir::shape::{block_shapes, first_conv_name, BitWidthMap, BlockShape};
use dscnn_core::ir::tensor::{FloatTensor, Shape, Tensor};
use dscnn_core::ir::zoo;
use dscnn_core::kernel::reference::qnet_ref;
use dscnn_core::quant::bn::fuse_graph;
use dscnn_core::quant::calibrate::{calibrate, random_dataset, CalibrationStats};
use dscnn_core::quant::qnet::{quantize_network, QNet};
use dscnn_core::quant::qnet_manifest::{load_qnet, save_qnet};
use dscnn_core::runtime::exec::run_inference;
use dscnn_core::runtime::memory::SharedMemoryImage;
use dscnn_core::sweep::{render_complexity, render_sweep, sweep_row, SweepRow, ALPHAS, RESOLUTIONS};

use crate::artifacts::Staging;
use crate::{Cli, Command, ModelArgs, EXIT_ORACLE_MISMATCH};

pub const MODEL: &str = "model/model.json";
pub const FUSED: &str = "fused/model.json";
pub const STATS: &str = "calibration.json";
pub const QNET: &str = "qnet/qnet.json";
pub const PLAN: &str = "plan.json";

fn config(cli: &Cli) -> Result<PipelineConfig> {
    match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn input_path(cli: &Cli, given: &Option<PathBuf>, default: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| cli.out_dir.join(default))
}

fn report(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

pub fn run(cli: &Cli) -> Result<u8> {
    let cfg = config(cli)?;
    match &cli.command {
        Command::Generate { model, shape_only, output } => generate(cli, &cfg, model, *shape_only, output),
        Command::Fuse { model } => {
            let g = load_model(&input_path(cli, model, MODEL))?;
            let fused = fuse_graph(&g)?;
            let mut st = Staging::new(&cli.out_dir, "fuse")?;
            save_model(&fused, &st.path("fused").join("model.json"))?;
            report(&st.commit()?);
            Ok(0)
        }
        Command::Calibrate { model, dataset } => {
            let g = load_model(&input_path(cli, model, FUSED))?;
            let data = match dataset {
                Some(dir) => read_dataset(dir, g.input_shape())?,
                None => random_dataset(g.input_shape(), cfg.calibration_samples, cli.seed),
            };
            let stats = calibrate(&g, &data)?;
            let mut st = Staging::new(&cli.out_dir, "calibrate")?;
            st.write(STATS, stats.to_json())?;
            report(&st.commit()?);
            Ok(0)
        }
        Command::Quantize { model, stats } => {
            let g = load_model(&input_path(cli, model, FUSED))?;
            let sp = input_path(cli, stats, STATS);
            let text = fs::read_to_string(&sp).with_context(|| format!("reading {}", sp.display()))?;
            let q = quantize_network(&g, &CalibrationStats::from_json(&text)?, &cfg.quant_config())?;
            let mut st = Staging::new(&cli.out_dir, "quantize")?;
            save_qnet(&q, &st.path("qnet").join("qnet.json"))?;
            report(&st.commit()?);
            Ok(0)
        }
        Command::Compile { qnet, model, device } => compile_cmd(cli, &cfg, qnet, model, device),
        Command::Simulate {
            qnet,
            plan,
            input,
            count,
            trace,
            perf,
            oracle_check,
        } => simulate(cli, &cfg, qnet, plan, input, *count, *trace, *perf, *oracle_check),
        Command::Report { arch, models } => report_cmd(cli, &cfg, arch, models),
    }
}

fn generate(cli: &Cli, cfg: &PipelineConfig, m: &ModelArgs, shape_only: bool, output: &Option<PathBuf>) -> Result<u8> {
    let arch = m.arch.clone().unwrap_or_else(|| cfg.arch.clone());
    let alpha = m.alpha.unwrap_or(cfg.alpha);
    let res = m.resolution.unwrap_or(cfg.resolution);
    let g = zoo::by_name(&arch, alpha, res, (!shape_only).then_some(cli.seed))?;
    match output {
        Some(path) => {
            // explicit destination: stage next to it, then move the directory contents
            let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let name = path.file_name().context("--output needs a file name")?.to_string_lossy().to_string();
            let mut st = Staging::new(dir, "generate")?;
            let staged = st.path("gen");
            save_model(&g, &staged.join(&name))?;
            let files: Vec<String> = fs::read_dir(&staged)?
                .map(|e| e.map(|e| e.file_name().to_string_lossy().to_string()))
                .collect::<std::io::Result<_>>()?;
            let mut done = Vec::new();
            for f in files {
                let to = dir.join(&f);
                fs::rename(staged.join(&f), &to).with_context(|| format!("moving {}", to.display()))?;
                done.push(to);
            }
            drop(st);
            report(&done);
        }
        None => {
            let mut st = Staging::new(&cli.out_dir, "generate")?;
            save_model(&g, &st.path("model").join("model.json"))?;
            report(&st.commit()?);
        }
    }
    Ok(0)
}

fn read_dataset(dir: &Path, shape: Shape) -> Result<Vec<FloatTensor>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "bin"));
    files.sort();
    ensure!(!files.is_empty(), "{}: no *.bin input tensors", dir.display());
    files.iter().map(|p| read_tensor(p, shape)).collect()
}

fn read_tensor(path: &Path, shape: Shape) -> Result<FloatTensor> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    ensure!(
        bytes.len() == shape.len() * 4,
        "{}: {} bytes, an input of shape {shape} needs {}",
        path.display(),
        bytes.len(),
        shape.len() * 4
    );
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

fn deployment_bits(g: &NetworkGraph, cfg: &PipelineConfig) -> BitWidthMap {
    let mut map = BitWidthMap::uniform(cfg.bw);
    map.input = cfg.input_bw;
    if let Some(name) = first_conv_name(g) {
        map.overrides.insert(name.to_string(), cfg.first_conv_bw);
    }
    map
}

fn compile_cmd(cli: &Cli, cfg: &PipelineConfig, qnet: &Option<PathBuf>, model: &Option<PathBuf>, device: &Option<PathBuf>) -> Result<u8> {
    let (arch, alpha, res, blocks): (String, f64, usize, Vec<BlockShape>) = match model {
        Some(path) if qnet.is_none() => {
            let g = load_model(path)?;
            let blocks = block_shapes(&g, g.input_resolution, &deployment_bits(&g, cfg))?;
            (g.arch_name.clone(), g.alpha, g.input_resolution, blocks)
        }
        Some(_) => bail!("pass either --qnet or --model, not both"),
        None => {
            let q = load_qnet(&input_path(cli, qnet, QNET))?;
            (q.arch_name.clone(), q.alpha, q.input_resolution, q.block_shapes()?)
        }
    };
    let mut opts = cfg.compile_options()?;
    if let Some(d) = device {
        opts.device = dscnn_core::compiler::resources::DeviceProfile::load(d)?;
    }
    let plan = compile(&arch, alpha, res, blocks, &opts)?;
    let schedule = emit_schedule(&plan)?;
    let text = render_text(&plan, &schedule);
    let doc = PlanDocument::new(plan, schedule);
    let mut st = Staging::new(&cli.out_dir, "compile")?;
    st.write(PLAN, doc.to_json())?;
    st.write("plan.txt", &text)?;
    report(&st.commit()?);
    print!("{text}");
    Ok(0)
}

fn quantize_input(q: &QNet, x: &FloatTensor) -> Result<Tensor<i32>> {
    Ok(Tensor::new(x.shape(), q.input_spec.quantize_tensor(x.data()))?)
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    cli: &Cli,
    cfg: &PipelineConfig,
    qnet: &Option<PathBuf>,
    plan: &Option<PathBuf>,
    input: &Option<PathBuf>,
    count: usize,
    trace: bool,
    perf: bool,
    oracle_check: bool,
) -> Result<u8> {
    ensure!(count > 0, "--count must be positive");
    let q = load_qnet(&input_path(cli, qnet, QNET))?;
    let pp = input_path(cli, plan, PLAN);
    let text = fs::read_to_string(&pp).with_context(|| format!("reading {}", pp.display()))?;
    let doc: PlanDocument = serde_json::from_str(&text).with_context(|| format!("parsing {}", pp.display()))?;
    ensure!(
        doc.plan.blocks == q.block_shapes()?,
        "{} was compiled for a different network than the QNet",
        pp.display()
    );
    let inputs: Vec<FloatTensor> = match input {
        Some(p) => vec![read_tensor(p, q.input_shape())?],
        None => random_dataset(q.input_shape(), count, cli.seed),
    };
    let mut mem = SharedMemoryImage::initialize(&doc.schedule, &q)?;
    let opts = cfg.run_options();
    let mut results = Vec::new();
    let mut mismatches = 0usize;
    let mut first = None;
    for (i, x) in inputs.iter().enumerate() {
        let xq = quantize_input(&q, x)?;
        let r = run_inference(&doc.plan, &doc.schedule, &mut mem, &xq, &opts)?;
        let matched = if oracle_check {
            let ok = qnet_ref(&q, &xq)? == r.output;
            if !ok {
                mismatches += 1;
            }
            Some(ok)
        } else {
            None
        };
        results.push(json!({
            "index": i,
            "argmax": r.argmax,
            "output": r.output,
            "confidence": r.confidences[r.argmax],
            "confidences": r.confidences,
            "oracle_match": matched,
        }));
        first.get_or_insert(r);
    }
    let first = first.expect("at least one input");
    let summary = json!({
        "arch": q.arch_name,
        "output_shape": [first.output_shape.c, first.output_shape.h, first.output_shape.w],
        "oracle_check": oracle_check.then_some(mismatches == 0),
        "results": results,
    });
    let mut st = Staging::new(&cli.out_dir, "simulate")?;
    st.write("inference.json", serde_json::to_string_pretty(&summary)? + "\n")?;
    if trace {
        st.write("trace.csv", first.trace.to_csv())?;
    }
    if perf {
        st.write("perf.txt", first.perf.table())?;
        print!("{}", first.perf.table());
    }
    report(&st.commit()?);
    for (i, r) in summary["results"].as_array().expect("array").iter().enumerate() {
        println!("input {i}: class {} (confidence {:.4})", r["argmax"], r["confidence"].as_f64().unwrap_or(0.0));
    }
    if oracle_check {
        if mismatches > 0 {
            eprintln!("oracle check: {mismatches} of {} inputs differ from the layer-by-layer oracle", inputs.len());
            return Ok(EXIT_ORACLE_MISMATCH);
        }
        println!("oracle check: {} of {} inputs bit-exact", inputs.len(), inputs.len());
    }
    Ok(0)
}

fn model_graphs(dir: &Path, arch: &str) -> Result<Vec<NetworkGraph>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    let mut graphs = Vec::new();
    for p in paths {
        let g = load_model(&p).with_context(|| format!("loading {}", p.display()))?;
        if g.arch_name == arch {
            graphs.push(g);
        }
    }
    ensure!(!graphs.is_empty(), "{}: no {arch} manifests", dir.display());
    graphs.sort_by(|a, b| b.alpha.total_cmp(&a.alpha));
    Ok(graphs)
}

fn report_cmd(cli: &Cli, cfg: &PipelineConfig, arch: &Option<String>, models: &Option<PathBuf>) -> Result<u8> {
    let arch = arch.clone().unwrap_or_else(|| cfg.arch.clone());
    let graphs = match models {
        Some(dir) => model_graphs(dir, &arch)?,
        None if arch == "mobilenet_v2" => ALPHAS
            .iter()
            .map(|&a| zoo::mobilenet_v2(a, 224, None))
            .collect::<dscnn_core::Result<_>>()?,
        None => vec![zoo::by_name(&arch, 1.0, 224, None)?],
    };
    let opts = cfg.compile_options()?;
    let perf = cfg.run_options().perf;
    let mut rows: Vec<SweepRow> = Vec::new();
    for g in &graphs {
        for &h in &RESOLUTIONS {
            rows.push(sweep_row(g, h, cfg.bw, &opts, perf)?);
        }
    }
    let text = format!("{arch}\n\n{}\n{}", render_sweep(&rows), render_complexity(&rows));
    let mut st = Staging::new(&cli.out_dir, "report")?;
    st.write("report.txt", &text)?;
    st.write("report.json", serde_json::to_string_pretty(&rows)? + "\n")?;
    report(&st.commit()?);
    print!("{text}");
    Ok(0)
}
