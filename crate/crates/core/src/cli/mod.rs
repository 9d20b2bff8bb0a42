//! `litepose` command-line entry point.
//!
//! Every subcommand writes into an output directory (`--out`, default
//! `run-<unix seconds>/`) whose `manifest.json` is written first and lists
//! every file produced. Exit codes: 0 success, 1 runtime error, 2 invalid
//! input.

mod manifest;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde::Deserialize;

use crate::archspec::{preset, shape_trace, ArchConfig, Preset};
use crate::costmodel::{kernel_sweep, preset_cost, sig3, CostReport};
use crate::decode::{decode, DecodeParams};
use crate::engine::{forward, Tensor};
use crate::error::{Error, Result};
use crate::eval::{average_precision, joint_constants, joint_constants_for, load_dataset, oks_thresholds, PredAnnotation};
use crate::nas::{evolve, EvolutionParams, FitnessEvaluator, HeatmapProxy, NegMacs};
use crate::rng::SeedTree;
use crate::shrink::{is_chain, shrink_cost, standard_sequence, ShrinkConfig};
use crate::supernet::{extract_to, subnet_arch, SearchSpace, SubnetChoice, WeightStore};
use crate::synth::{generate, SynthParams};

pub use manifest::{output_dir, Outputs, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "litepose", version, about = "Cost modelling, architecture search and keypoint decoding for efficient pose networks")]
pub struct Cli {
    /// Output directory (default: run-<unix seconds> in the working directory).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Root seed; every random subsystem derives its own stream from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parameter and MAC count of a preset or architecture file.
    Cost(CostArgs),
    /// Per-layer CSV reports and a comparison table for several models.
    Report(ReportArgs),
    /// Costs of the standard shrinking ladder and an optional custom sequence.
    Shrink(ShrinkArgs),
    /// Constraint-aware evolutionary search over a supernet space.
    Search(SearchArgs),
    /// Reference forward pass: shape trace, MAC totals, optional output dump.
    Infer(InferArgs),
    /// Decode network outputs into grouped keypoints.
    Decode(DecodeArgs),
    /// OKS-based AP of predictions against ground truth.
    Eval(EvalArgs),
    /// Synthetic scene with planted heatmaps and tags.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct CostArgs {
    /// Preset name or path to an architecture JSON file.
    pub model: String,
    /// Input resolution (default: the model's own).
    pub resolution: Option<u32>,
    /// Also cost the model with every inverted-residual depthwise kernel set to each of these.
    #[arg(long, value_delimiter = ',')]
    pub kernels: Vec<u32>,
    /// Drop the skip concatenations of the deconv head.
    #[arg(long)]
    pub no_fusion: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Preset names or architecture files.
    #[arg(required = true)]
    pub models: Vec<String>,
    #[arg(long)]
    pub resolution: Option<u32>,
}

#[derive(Args, Debug)]
pub struct ShrinkArgs {
    /// JSON file `{"resolution": 512, "configs": [{"name", "stages", "base_channel"}, …]}`;
    /// consecutive configs must each be shrunk from the previous one.
    #[arg(long)]
    pub sequence: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    pub resolution: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvaluatorKind {
    NegMacs,
    HeatmapProxy,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    /// Search-space JSON file or a bundled space (`space-lsm`, `space-xs`).
    #[arg(long)]
    pub space: String,
    #[arg(long)]
    pub max_gmacs: f64,
    #[arg(long, default_value_t = 1000)]
    pub generations: usize,
    #[arg(long, value_enum, default_value_t = EvaluatorKind::NegMacs)]
    pub evaluator: EvaluatorKind,
    #[arg(long, default_value_t = 64)]
    pub population: usize,
    #[arg(long, default_value_t = 8)]
    pub tournament: usize,
    #[arg(long, default_value_t = 0.1)]
    pub p_mut: f64,
    #[arg(long, default_value_t = 100)]
    pub retry_cap: usize,
    /// Synthetic scenes per resolution for the heatmap proxy.
    #[arg(long, default_value_t = 2)]
    pub proxy_images: usize,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Preset name or architecture file (single-branch).
    pub model: String,
    #[arg(long)]
    pub resolution: Option<u32>,
    /// Sub-network choice JSON; weights are sliced from the model's store.
    #[arg(long)]
    pub choice: Option<PathBuf>,
    /// Weight manifest; random weights from the seed otherwise.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Input tensor header (`N×3×R×R`); uniform noise from the seed otherwise.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Write every output tensor.
    #[arg(long)]
    pub dump: bool,
    /// Write the weights that were used.
    #[arg(long)]
    pub save_weights: bool,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    /// Output tensor headers; the first must carry the tag channels.
    #[arg(required = true)]
    pub outputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub image_id: u64,
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    #[arg(long, default_value_t = 1.0)]
    pub tag_threshold: f64,
    #[arg(long, default_value_t = 30)]
    pub max_per_joint: usize,
    #[arg(long, default_value_t = 0.1)]
    pub threshold: f64,
    #[arg(long)]
    pub refine: bool,
    /// Multiply decoded coordinates by this factor.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SigmaTable {
    /// Pick by joint count (17 → COCO, 14 → CrowdPose).
    Auto,
    Coco,
    Crowdpose,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, value_enum, default_value_t = SigmaTable::Auto)]
    pub sigmas: SigmaTable,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2)]
    pub persons: usize,
    #[arg(long, default_value_t = 14)]
    pub joints: usize,
    /// Heatmap side length.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub image_id: u64,
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_invalid_input() {
                2
            } else {
                1
            }
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let dir = output_dir(cli.out.as_deref());
    let root = SeedTree::new(cli.seed);
    match &cli.command {
        Command::Cost(a) => cmd_cost(a, dir, cli.seed),
        Command::Report(a) => cmd_report(a, dir, cli.seed),
        Command::Shrink(a) => cmd_shrink(a, dir, cli.seed),
        Command::Search(a) => cmd_search(a, dir, cli.seed, &root),
        Command::Infer(a) => cmd_infer(a, dir, cli.seed, &root),
        Command::Decode(a) => cmd_decode(a, dir, cli.seed),
        Command::Eval(a) => cmd_eval(a, dir, cli.seed),
        Command::Synth(a) => cmd_synth(a, dir, cli.seed, &root),
    }
}

/// A preset name, or a path to an architecture file.
fn load_model(model: &str) -> Result<(Preset, Vec<String>)> {
    let p = Path::new(model);
    if p.is_file() {
        return Ok((Preset::Single(ArchConfig::load(p)?), vec![model.to_string()]));
    }
    Ok((preset(model)?, Vec::new()))
}

fn load_single(model: &str) -> Result<(ArchConfig, Vec<String>)> {
    match load_model(model)? {
        (Preset::Single(c), paths) => Ok((c, paths)),
        (Preset::MultiBranch(c), _) => Err(Error::InvalidInput(format!(
            "{} is multi-branch; only its cost can be computed",
            c.name
        ))),
    }
}

fn slug(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c.to_ascii_lowercase() } else { '-' }).collect()
}

fn summary_line(r: &CostReport) -> String {
    format!(
        "{} @{}: {}M params, {} GMACs ({} params, {} MACs)",
        r.name,
        r.resolution,
        sig3(r.mparams()),
        sig3(r.gmacs()),
        r.total_params,
        r.total_macs
    )
}

fn cmd_cost(a: &CostArgs, dir: PathBuf, seed: u64) -> Result<()> {
    let (p, paths) = load_model(&a.model)?;
    let p = match (p, a.no_fusion) {
        (Preset::Single(c), true) => Preset::Single(c.without_fusion()),
        (Preset::MultiBranch(_), true) => {
            return Err(Error::InvalidInput("--no-fusion applies to single-branch models".into()))
        }
        (p, false) => p,
    };
    let report = preset_cost(&p, a.resolution)?;
    let sweep = if a.kernels.is_empty() {
        None
    } else {
        match &p {
            Preset::Single(c) => Some(kernel_sweep(&c.with_resolution(report.resolution), &a.kernels)?),
            Preset::MultiBranch(_) => {
                return Err(Error::InvalidInput("--kernels applies to single-branch models".into()))
            }
        }
    };
    let mut files = vec!["cost.csv", "cost.json"];
    if sweep.is_some() {
        files.push("sweep.csv");
    }
    let out = RunManifest::new("cost", paths, seed, dir).commit(&files)?;
    out.write("cost.csv", report.to_csv())?;
    out.write_json("cost.json", &report.summary_json())?;
    println!("{}", summary_line(&report));
    if let Some(sweep) = sweep {
        let mut csv = String::from("kernel,params,macs,gmacs\n");
        for (k, r) in &sweep {
            writeln!(csv, "{k},{},{},{}", r.total_params, r.total_macs, sig3(r.gmacs())).unwrap();
            println!("k={k}: {} GMACs", sig3(r.gmacs()));
        }
        out.write("sweep.csv", csv)?;
    }
    Ok(())
}

fn cmd_report(a: &ReportArgs, dir: PathBuf, seed: u64) -> Result<()> {
    let mut reports = Vec::new();
    let mut paths = Vec::new();
    for m in &a.models {
        let (p, mut ps) = load_model(m)?;
        paths.append(&mut ps);
        reports.push(preset_cost(&p, a.resolution)?);
    }
    let names: Vec<String> = reports.iter().map(|r| format!("{}.csv", slug(&r.name))).collect();
    let mut files: Vec<&str> = vec!["models.csv", "summary.json"];
    files.extend(names.iter().map(String::as_str));
    let out = RunManifest::new("report", paths, seed, dir).commit(&files)?;
    let mut table = String::from("model,resolution,params,macs,mparams,gmacs\n");
    for (r, f) in reports.iter().zip(&names) {
        writeln!(table, "{},{},{},{},{},{}", r.name, r.resolution, r.total_params, r.total_macs, sig3(r.mparams()), sig3(r.gmacs()))
            .unwrap();
        out.write(f, r.to_csv())?;
        println!("{}", summary_line(r));
    }
    out.write("models.csv", table)?;
    let summary: Vec<_> = reports.iter().map(CostReport::summary_json).collect();
    out.write_json("summary.json", &summary)?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceFile {
    #[serde(default)]
    resolution: Option<u32>,
    configs: Vec<SequenceEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceEntry {
    name: String,
    stages: ShrinkConfig,
    base_channel: u32,
}

fn cmd_shrink(a: &ShrinkArgs, dir: PathBuf, seed: u64) -> Result<()> {
    const HEADER: &str = "config,base_channel,resolution,macs,gmacs\n";
    let row = |csv: &mut String, name: &str, c: &ShrinkConfig, ch: u32, res: u32| -> Result<()> {
        let r = shrink_cost(c, ch, res)?;
        writeln!(csv, "{name},{ch},{res},{},{}", r.total_macs, sig3(r.gmacs())).unwrap();
        println!("{name} {c} ch{ch}: {} GMACs", sig3(r.gmacs()));
        Ok(())
    };
    let mut standard = String::from(HEADER);
    for (name, c, ch) in standard_sequence() {
        row(&mut standard, name, &c, ch, a.resolution)?;
    }
    let custom = match &a.sequence {
        None => None,
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let f: SequenceFile = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
            for e in &f.configs {
                e.stages.check()?;
            }
            let chain: Vec<ShrinkConfig> = f.configs.iter().map(|e| e.stages.clone()).collect();
            if !is_chain(&chain) {
                return Err(Error::InvalidShrink("each config must be shrunk from the one before it".into()));
            }
            let res = f.resolution.unwrap_or(a.resolution);
            let mut csv = String::from(HEADER);
            for e in &f.configs {
                row(&mut csv, &e.name, &e.stages, e.base_channel, res)?;
            }
            Some(csv)
        }
    };
    let paths = a.sequence.iter().map(|p| p.display().to_string()).collect();
    let files: &[&str] = if custom.is_some() { &["shrink.csv", "sequence.csv"] } else { &["shrink.csv"] };
    let out = RunManifest::new("shrink", paths, seed, dir).commit(files)?;
    out.write("shrink.csv", standard)?;
    if let Some(csv) = custom {
        out.write("sequence.csv", csv)?;
    }
    Ok(())
}

fn load_space(s: &str) -> Result<(SearchSpace, Vec<String>)> {
    let p = Path::new(s);
    if p.is_file() {
        Ok((SearchSpace::load(p)?, vec![s.to_string()]))
    } else {
        Ok((SearchSpace::bundled(s)?, Vec::new()))
    }
}

fn cmd_search(a: &SearchArgs, dir: PathBuf, seed: u64, root: &SeedTree) -> Result<()> {
    if !(a.max_gmacs.is_finite() && a.max_gmacs > 0.0) {
        return Err(Error::InvalidInput(format!("--max-gmacs {} must be positive", a.max_gmacs)));
    }
    if !(0.0..=1.0).contains(&a.p_mut) {
        return Err(Error::InvalidInput(format!("--p-mut {} outside [0, 1]", a.p_mut)));
    }
    let (space, paths) = load_space(&a.space)?;
    let limit = (a.max_gmacs * 1e9).floor() as u64;
    let params = EvolutionParams {
        population: a.population,
        tournament: a.tournament,
        p_mut: a.p_mut,
        retry_cap: a.retry_cap,
        generations: a.generations,
    };
    let evaluator: Box<dyn FitnessEvaluator> = match a.evaluator {
        EvaluatorKind::NegMacs => Box::new(NegMacs),
        EvaluatorKind::HeatmapProxy => {
            let store = WeightStore::random(&space.arch, root.split("supernet").seed());
            Box::new(HeatmapProxy::new(&space, store, a.proxy_images, root.split("proxy").seed())?)
        }
    };
    let state = evolve(&space, limit, evaluator.as_ref(), &params, root.split("search").seed())?;
    let out = RunManifest::new("search", paths, seed, dir).commit(&["search.jsonl", "best.json"])?;
    let mut jsonl = String::new();
    for h in &state.history {
        jsonl.push_str(&serde_json::to_string(h).expect("history serializes"));
        jsonl.push('\n');
    }
    out.write("search.jsonl", jsonl)?;
    out.write("best.json", state.best.choice.to_json() + "\n")?;
    println!(
        "best after {} generations: fitness {}, {} GMACs, resolution {}",
        state.generation,
        state.best.fitness,
        sig3(state.best.macs as f64 / 1e9),
        state.best.choice.resolution
    );
    Ok(())
}

fn cmd_infer(a: &InferArgs, dir: PathBuf, seed: u64, root: &SeedTree) -> Result<()> {
    let (base, mut paths) = load_single(&a.model)?;
    let store = match &a.weights {
        Some(p) => {
            paths.push(p.display().to_string());
            let s = WeightStore::<f32>::load(p)?;
            s.check_against(&base)?;
            s
        }
        None => WeightStore::random(&base, root.split("weights").seed()),
    };
    let (mut cfg, store) = match &a.choice {
        Some(p) => {
            paths.push(p.display().to_string());
            let choice = SubnetChoice::load(p)?;
            let sub = subnet_arch(&base, &choice)?;
            let w = extract_to(&store, &sub)?;
            (sub, w)
        }
        None => (base, store),
    };
    if let Some(r) = a.resolution {
        cfg = cfg.with_resolution(r);
    }
    let res = cfg.input_resolution;
    let trace = shape_trace(&cfg, res)?;
    let x = match &a.input {
        Some(p) => {
            paths.push(p.display().to_string());
            Tensor::<f32>::load(p)?
        }
        None => {
            let mut rng = root.split("input").rng();
            Tensor::from_fn([1, 3, res as usize, res as usize], |_, _, _, _| rng.gen::<f32>())
        }
    };
    let (outs, counter) = forward(&cfg, &store, &x)?;
    let expected = crate::costmodel::model_cost(&cfg, res)?;

    let mut files: Vec<String> = vec!["trace.csv".into(), "macs.json".into()];
    if a.dump {
        for i in 0..outs.len() {
            files.push(format!("output{i}.json"));
            files.push(format!("output{i}.bin"));
        }
    }
    if a.save_weights {
        files.push("weights.json".into());
        files.push("weights.bin".into());
    }
    let names: Vec<&str> = files.iter().map(String::as_str).collect();
    let out = RunManifest::new("infer", paths, seed, dir).commit(&names)?;

    let mut csv = String::from("layer_id,kind,h_in,w_in,h,w,c,macs\n");
    for t in &trace {
        let m = counter.macs_by_layer.get(&t.layer).copied().unwrap_or(0);
        writeln!(csv, "{},{},{},{},{},{},{},{m}", t.layer, t.block.kind, t.h_in, t.w_in, t.h, t.w, t.c).unwrap();
        println!("{:<8} {:<20} {:>4}x{:<4} -> {:>4}x{:<4} c={:<4} {m}", t.layer, t.block.kind.as_str(), t.h_in, t.w_in, t.h, t.w, t.c);
    }
    out.write("trace.csv", csv)?;
    out.write_json(
        "macs.json",
        &serde_json::json!({
            "name": cfg.name,
            "resolution": res,
            "counted_macs": counter.total(),
            "model_macs": expected.total_macs,
            "outputs": outs.iter().map(|o| o.dims().to_vec()).collect::<Vec<_>>(),
        }),
    )?;
    println!("counted {} MACs, cost model {} MACs", counter.total(), expected.total_macs);
    if a.dump {
        for (i, o) in outs.iter().enumerate() {
            o.save(&out.stem(&format!("output{i}")))?;
        }
    }
    if a.save_weights {
        store.save(&out.stem("weights"))?;
    }
    Ok(())
}

fn cmd_decode(a: &DecodeArgs, dir: PathBuf, seed: u64) -> Result<()> {
    if !(a.scale.is_finite() && a.scale > 0.0) {
        return Err(Error::InvalidInput(format!("--scale {} must be positive", a.scale)));
    }
    let outs = a.outputs.iter().map(|p| Tensor::<f32>::load(p)).collect::<Result<Vec<_>>>()?;
    let params = DecodeParams {
        window: a.window,
        tag_threshold: a.tag_threshold,
        max_per_joint: a.max_per_joint,
        threshold: a.threshold,
        refine: a.refine,
    };
    let set = decode(&outs, &params)?;
    let preds: Vec<PredAnnotation> = set
        .to_json()
        .into_iter()
        .map(|p| PredAnnotation {
            image_id: a.image_id,
            keypoints: p
                .keypoints
                .chunks(3)
                .flat_map(|k| [k[0] * a.scale, k[1] * a.scale, k[2]])
                .collect(),
            score: p.score,
        })
        .collect();
    let paths = a.outputs.iter().map(|p| p.display().to_string()).collect();
    let out = RunManifest::new("decode", paths, seed, dir).commit(&["pred.json"])?;
    out.write_json("pred.json", &preds)?;
    println!("{} persons", preds.len());
    Ok(())
}

fn cmd_eval(a: &EvalArgs, dir: PathBuf, seed: u64) -> Result<()> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let data = load_dataset(&read(&a.gt)?, &read(&a.pred)?)?;
    let joints = data
        .iter()
        .flat_map(|im| im.gt.iter().chain(&im.pred))
        .map(|p| p.keypoints.len())
        .next();
    let k = match a.sigmas {
        SigmaTable::Coco => joint_constants("coco")?,
        SigmaTable::Crowdpose => joint_constants("crowdpose")?,
        SigmaTable::Auto => match joints {
            Some(j) => joint_constants_for(j)?,
            None => Vec::new(),
        },
    };
    let report = average_precision(&data, &k, &oks_thresholds())?;
    let paths = vec![a.gt.display().to_string(), a.pred.display().to_string()];
    let out = RunManifest::new("eval", paths, seed, dir).commit(&["ap.json", "pr.csv"])?;
    out.write_json(
        "ap.json",
        &serde_json::json!({
            "ap": report.ap,
            "ap50": report.ap50,
            "ap75": report.ap75,
            "per_threshold": report.per_threshold,
        }),
    )?;
    out.write("pr.csv", report.pr_csv())?;
    println!("AP   {:.4}", report.ap);
    println!("AP50 {:.4}", report.ap50);
    println!("AP75 {:.4}", report.ap75);
    Ok(())
}

fn cmd_synth(a: &SynthArgs, dir: PathBuf, seed: u64, root: &SeedTree) -> Result<()> {
    let params = SynthParams { persons: a.persons, joints: a.joints, size: a.size, ..Default::default() };
    let scene = generate(root.split("synth").seed(), &params)?;
    let out = RunManifest::new("synth", Vec::new(), seed, dir).commit(&["gt.json", "heatmaps.json", "heatmaps.bin"])?;
    out.write_json("gt.json", &serde_json::json!({ "annotations": scene.gt_annotations(a.image_id) }))?;
    scene.render::<f32>().save(&out.stem("heatmaps"))?;
    println!("{} persons, {} joints, {}x{} maps in {}", a.persons, a.joints, a.size, a.size, out.dir().display());
    Ok(())
}
