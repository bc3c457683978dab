use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use vidcap_core::checkpoint::Checkpoint;
use vidcap_core::config::RunConfig;
use vidcap_core::data::{write_corpus, Dataset, Split, SynthSpec, Vocabulary};
use vidcap_core::encoder::{enumerate_regions, RegionParams};
use vidcap_core::exec::Execution;
use vidcap_core::gradcheck::{component, model_grad_check, TOLERANCE};
use vidcap_core::infer::{generate_all, write_predictions, GenerateConfig};
use vidcap_core::metrics::evaluate;
use vidcap_core::model::ModelConfig;
use vidcap_core::tensor::GradCheckOptions;
use vidcap_core::train::{Example, Trainer};
use vidcap_core::{Error, Result};

#[derive(Parser)]
#[command(name = "vidcap", version, about = "Train, run and evaluate the video captioning model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic moving-shapes corpus (clips, manifest, reference files)
    Synth(SynthArgs),
    /// Train from a config file on a corpus directory
    Train(TrainArgs),
    /// Caption every clip of a split with beam search
    Generate(GenerateArgs),
    /// Score predictions against references (BLEU-4, METEOR, ROUGE-L, CIDEr)
    Eval(EvalArgs),
    /// Enumerate the maskable region catalog for a feature grid
    Regions(RegionsArgs),
    /// Check reverse-mode gradients of the full loss against central differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 80)]
    clips: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Captions per clip are drawn from 1..=N (N <= 3)
    #[arg(long, default_value_t = 3)]
    max_captions: usize,
}

#[derive(Args)]
struct ExecArgs {
    /// Run every data-parallel loop on the calling thread
    #[arg(long)]
    sequential: bool,
}

impl ExecArgs {
    fn mode(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config (preset + model/train/generate overrides); defaults: lr 4e-5,
    /// warmup 0.1, weight decay 0.05, batch 6, accumulation 4, 50 epochs, mask rate 0.5
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory with manifest.jsonl
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoints and train_log.jsonl
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint directory to continue from
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Cap on optimizer steps (also the schedule length)
    #[arg(long)]
    max_steps: Option<usize>,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Predictions JSONL
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    beam: usize,
    /// Maximum generated tokens
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Predictions JSONL: {"video_id", "caption"}
    #[arg(long)]
    pred: PathBuf,
    /// References JSONL: {"video_id", "captions": [...]}
    #[arg(long)]
    refs: PathBuf,
    /// Also write the JSON report here
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct RegionsArgs {
    /// Grid size in cells, ROWSxCOLS
    #[arg(long, default_value = "7x7", value_parser = parse_grid)]
    grid: (usize, usize),
    /// Smallest region side in grid cells (both axes)
    #[arg(long, default_value_t = 2)]
    delta: usize,
    /// Grid cell side in feature cells
    #[arg(long, default_value_t = 4)]
    g: usize,
    /// Area threshold as a fraction of the canvas
    #[arg(long, default_value_t = 0.3)]
    threshold: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "toy")]
    preset: String,
    /// Coordinates sampled per parameter tensor (0 = all)
    #[arg(long, default_value_t = 32)]
    coords: usize,
    /// Central-difference step, in [1e-6, 1e-3]
    #[arg(long, default_value_t = vidcap_core::gradcheck::MODEL_EPS)]
    eps: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Corrupt the analytic gradient (negative control; must fail)
    #[arg(long)]
    inject_fault: bool,
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s.split_once(['x', 'X']).ok_or("expected ROWSxCOLS, e.g. 7x7")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad grid extent `{v}`: {e}"));
    Ok((parse(r)?, parse(c)?))
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        frames: a.frames,
        height: a.height,
        width: a.width,
        seed: a.seed,
        max_captions: a.max_captions,
    };
    let stats = write_corpus(&a.out, a.clips, &spec)?;
    print_json(&stats);
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut run = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset("toy")?,
    };
    if let Some(n) = a.max_steps {
        run.train.max_steps = Some(n);
    }
    let data_dir = a.data.or(run.data.clone()).ok_or_else(|| Error::Input("--data is required".into()))?;
    let out = a.out.or(run.out.clone()).ok_or_else(|| Error::Input("--out is required".into()))?;
    let errs = run.validate();
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }
    let dataset = Dataset::open(&data_dir)?;
    let train_entries: Vec<_> = dataset.split(Split::Train).collect();
    if train_entries.is_empty() {
        return Err(Error::Input(format!("{} has no training clips", data_dir.display())));
    }

    let mut trainer;
    let vocab;
    if let Some(dir) = &a.resume {
        let ck = Checkpoint::load(dir)?;
        vocab = ck.vocab;
        let mut cfg = run.train.clone();
        if a.config.is_none() {
            cfg = ck.train;
            if let Some(n) = a.max_steps {
                cfg.max_steps = Some(n);
            }
        }
        trainer = Trainer::resume(ck.model, cfg, ck.params, Some(ck.adam), ck.step, a.exec.mode())?;
    } else {
        vocab = Vocabulary::build(train_entries.iter().flat_map(|e| e.captions.iter().map(String::as_str)))?;
        let mut model = run.model.clone();
        model.vocab_size = vocab.len();
        trainer = Trainer::new(model, run.train.clone(), a.exec.mode())?;
    }

    let mut examples = Vec::new();
    for e in &train_entries {
        let clip = Arc::new(dataset.load_clip(e)?);
        for c in &e.captions {
            examples.push(Example {
                clip: clip.clone(),
                ids: vocab.wrap(c),
            });
        }
    }

    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let log_path = out.join("train_log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let total = trainer.cfg.total_steps(examples.len());
    println!(
        "training {} examples, {} parameters, steps {} -> {total}",
        examples.len(),
        trainer.params.num_elements(),
        trainer.step
    );
    let every = trainer.cfg.checkpoint_every;
    let snapshot = |t: &Trainer, dir: &Path| -> Result<()> {
        Checkpoint {
            step: t.step,
            model: t.model.clone(),
            train: t.cfg.clone(),
            params: t.params.clone(),
            adam: t.adam.clone(),
            vocab: vocab.clone(),
        }
        .save(dir)
    };
    let result = trainer.train(&examples, |t, m| {
        let line = serde_json::to_string(m).expect("serializable");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if m.step == 1 || m.step % 50 == 0 || m.step == total {
            println!("step {:>6}  loss {:.4}  lr {:.3e}  grad-norm {:.3}", m.step, m.loss, m.lr, m.grad_norm);
        }
        if every > 0 && m.step % every == 0 {
            snapshot(t, &out.join(format!("checkpoint-{}", m.step)))?;
        }
        Ok(())
    });
    if let Err(e) = result {
        if matches!(e, Error::NonFinite(_)) {
            let dir = out.join("diagnostic");
            snapshot(&trainer, &dir)?;
            eprintln!("wrote diagnostic checkpoint to {}", dir.display());
        }
        return Err(e);
    }
    let final_dir = out.join("final");
    snapshot(&trainer, &final_dir)?;
    println!("final checkpoint: {}", final_dir.display());
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let split: Split = a.split.parse()?;
    let opts = GenerateConfig {
        beam: a.beam,
        max_len: a.max_len,
    };
    let errs = opts.validate();
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }
    let dataset = Dataset::open(&a.data)?;
    let clips = dataset.split(split).map(|e| dataset.load_clip(e)).collect::<Result<Vec<_>>>()?;
    let preds = generate_all(&ck.params, &ck.model, &ck.vocab, &clips, &opts, a.exec.mode())?;
    write_predictions(&a.out, &preds)?;
    println!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let report = evaluate(&a.pred, &a.refs)?;
    print_json(&report);
    print!("{}", report.table());
    if let Some(p) = &a.report {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::json(p, e))?;
        fs::write(p, json).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn regions(a: RegionsArgs) -> Result<()> {
    let (rows, cols) = a.grid;
    if rows < 2 || cols < 2 || a.delta == 0 || a.g == 0 || !(0.0..=1.0).contains(&a.threshold) {
        return Err(Error::Validation(vec![
            "need grid >= 2x2, delta >= 1, g >= 1 and threshold in [0, 1]".into(),
        ]));
    }
    let params = RegionParams {
        grid_cell: a.g,
        delta_x: a.delta,
        delta_y: a.delta,
        threshold: a.threshold,
    };
    let catalog = enumerate_regions(rows, cols, params);
    println!("regions: {}", catalog.len());
    println!(
        "canvas: {}x{} grid of {g}x{g}-cell squares = {} feature cells",
        rows,
        cols,
        catalog.canvas_area(),
        g = a.g
    );
    println!("area (feature cells)  count");
    for (area, count) in catalog.area_histogram() {
        println!("{area:>20}  {count}");
    }
    println!(
        "note: grid, region areas and the threshold are all measured in cells of the fused \
         stride-8 feature map (a 224x224 input gives 28x28 cells, i.e. a 7x7 grid at g=4); anchors \
         satisfy i, j >= 1 and extents stay strictly inside the grid. Measuring on the raw frame \
         instead gives a far larger catalog."
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let cfg = ModelConfig::preset(&a.preset)?;
    let opts = GradCheckOptions {
        eps: a.eps,
        max_coords: (a.coords > 0).then_some(a.coords),
        seed: a.seed,
        inject_fault: a.inject_fault,
    };
    let report = model_grad_check(&cfg, &opts, a.seed)?;
    let mut by_component: std::collections::BTreeMap<&str, (usize, f64)> = Default::default();
    for p in &report.params {
        let e = by_component.entry(component(&p.name)).or_default();
        e.0 += p.checked;
        e.1 = e.1.max(p.max_rel_error);
    }
    println!("loss {:.6}", report.value);
    println!("{:<20} {:>8} {:>12}", "component", "coords", "max rel err");
    for (c, (n, err)) in &by_component {
        println!("{c:<20} {n:>8} {err:>12.3e}");
    }
    let passed = report.passed(TOLERANCE);
    if let Some(w) = report.worst() {
        println!(
            "worst: {} [{}] analytic {:.6e} numeric {:.6e} rel {:.3e}",
            w.name, w.worst_index, w.analytic, w.numeric, w.max_rel_error
        );
    }
    println!("{} (tolerance {TOLERANCE:e})", if passed { "PASS" } else { "FAIL" });
    Ok(passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Generate(a) => generate(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Regions(a) => regions(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
