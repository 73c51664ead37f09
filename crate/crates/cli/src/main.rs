mod bench;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use m2dt_core::diffusion::make_zero_snr_schedule;
use m2dt_core::eval::{evaluate, EvalConfig};
use m2dt_core::mask::{build_attention_mask, build_grouped_plan, build_layout, serialize_mask, MaskVariant, SegmentLayout};
use m2dt_core::sampling::{extend_many, generate_fixed, load_segments, save_segments, Denoiser, SamplerConfig};
use m2dt_core::synthetic::make_prototypes;
use m2dt_core::training::{train_with, TrainError, TrainingConfig, CONFIG_FILE};

/// Segment-aligned attention masks, grouped attention, and a toy multi-scene diffusion model.
#[derive(Parser, Debug)]
#[command(name = "m2dt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the attention mask for a layout.
    Mask {
        #[command(flatten)]
        layout: LayoutArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the grouped execution plan for a layout.
    Plan {
        #[command(flatten)]
        layout: LayoutArgs,
    },
    /// Check grouped attention against dense masked attention on random inputs.
    Verify {
        #[command(flatten)]
        layout: LayoutArgs,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        /// Corrupt the plan before comparing (self-test of the check).
        #[arg(long)]
        break_plan: bool,
    },
    /// Time dense and grouped attention and report their workloads as CSV.
    Bench {
        #[command(flatten)]
        layout: LayoutArgs,
        /// Benchmark every variant instead of `--variant`.
        #[arg(long)]
        all_variants: bool,
        #[arg(long, default_value_t = 10)]
        repeat: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the denoiser on the synthetic task.
    Train(TrainArgs),
    /// Generate all scenes jointly from a checkpoint.
    Sample {
        #[command(flatten)]
        run: RunArgs,
        /// One prompt id per scene, e.g. `0,5,2`.
        #[arg(long, value_delimiter = ',', required = true)]
        prompts: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extend clean context segments auto-regressively.
    Extend {
        #[command(flatten)]
        run: RunArgs,
        /// Latent file holding the `n - 1` context segments.
        #[arg(long)]
        context: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        context_prompts: Vec<usize>,
        /// Prompt id of each new segment, in order.
        #[arg(long, value_delimiter = ',', required = true)]
        prompts: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint with the prototype decoder.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct LayoutArgs {
    #[arg(long, default_value_t = 3)]
    n: usize,
    /// Text length per scene; a single value applies to every scene.
    #[arg(long, value_delimiter = ',', default_value = "2")]
    text_lens: Vec<usize>,
    /// Video length per scene; a single value applies to every scene.
    #[arg(long, value_delimiter = ',', default_value = "4")]
    video_lens: Vec<usize>,
    #[arg(long, default_value = "V2")]
    variant: String,
}

impl LayoutArgs {
    fn resolve(&self) -> Result<(SegmentLayout, MaskVariant), CliError> {
        let spread = |v: &[usize]| if v.len() == 1 { vec![v[0]; self.n] } else { v.to_vec() };
        let layout = build_layout(self.n, &spread(&self.text_lens), &spread(&self.video_lens)).map_err(usage)?;
        Ok((layout, parse_variant(&self.variant)?))
    }
}

fn parse_variant(s: &str) -> Result<MaskVariant, CliError> {
    s.parse().map_err(usage)
}

/// Flags mirror the config-file keys; flags override the file.
#[derive(Args, Debug, Default)]
struct TrainArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    stage: Option<String>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    cosine: Option<bool>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    pretrain_steps: Option<usize>,
    #[arg(long)]
    sft_steps: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    diffusion_steps: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    styles: Option<usize>,
    #[arg(long)]
    prompts: Option<usize>,
    #[arg(long)]
    seg_tokens: Option<usize>,
    #[arg(long)]
    token_dim: Option<usize>,
    #[arg(long)]
    text_tokens: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Suppress per-step progress on stderr.
    #[arg(long)]
    quiet: bool,
}

impl TrainArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        macro_rules! push {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field {
                    out.push((stringify!($field), v.to_string()));
                })*
            };
        }
        push!(stage, p, lr, warmup, cosine, batch, steps, pretrain_steps, sft_steps, n, variant, seed, weight_decay);
        push!(diffusion_steps, depth, dim, heads, styles, prompts, seg_tokens, token_dim, text_tokens, sigma, data_seed);
        push!(checkpoint_every);
        if let Some(p) = &self.out_dir {
            out.push(("out_dir", p.display().to_string()));
        }
        if let Some(p) = &self.resume {
            out.push(("resume", p.display().to_string()));
        }
        out
    }

    fn config(&self) -> Result<TrainingConfig, CliError> {
        let mut cfg = TrainingConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            cfg.apply_text(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        }
        for (key, value) in self.overrides() {
            cfg.set(key, &value).map_err(|e| CliError::Usage(format!("--{}: {e}", key.replace('_', "-"))))?;
        }
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

/// Locates a trained model and the run configuration describing its data.
#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run configuration; defaults to `config.txt` next to the checkpoint, if present.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

struct Run {
    config: TrainingConfig,
    model: Denoiser,
    sampler: SamplerConfig,
}

impl RunArgs {
    fn load(&self) -> Result<Run, CliError> {
        let sibling = self.checkpoint.parent().map(|d| d.join(CONFIG_FILE));
        let config_path = self.config.clone().or(sibling.filter(|p| p.exists()));
        let mut config = TrainingConfig::default();
        if let Some(path) = config_path {
            let text = fs::read_to_string(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            config.apply_text(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        }
        let model = Denoiser::load(&self.checkpoint, config.layout(), config.variant).map_err(runtime)?;
        if model.params.config != config.model_config() {
            return Err(CliError::Runtime(format!(
                "checkpoint {} does not match the run configuration",
                self.checkpoint.display()
            )));
        }
        Ok(Run { config, model, sampler: SamplerConfig { steps: self.steps, seed: self.seed } })
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Mask { layout, out } => {
            let (layout, variant) = layout.resolve()?;
            write_output(out.as_deref(), &serialize_mask(&build_attention_mask(&layout, variant)))
        }
        Command::Plan { layout } => {
            let (layout, variant) = layout.resolve()?;
            let plan = build_grouped_plan(&layout, variant);
            println!("{layout}; variant={variant}; L={}", layout.total_len());
            for (block, group) in layout.blocks().zip(plan.groups()) {
                let kv: Vec<String> = group.kv.iter().map(|r| format!("{}..{}", r.start, r.end)).collect();
                println!("{block}\tq={}..{}\tkv=[{}]", group.query.start, group.query.end, kv.join(", "));
            }
            println!("score_entries={}", plan.score_entries());
            Ok(())
        }
        Command::Verify { layout, trials, seed, dim, heads, break_plan } => {
            let (layout, variant) = layout.resolve()?;
            let report = bench::verify(&layout, variant, dim, heads, trials, seed, break_plan).map_err(usage)?;
            println!("trials={} max_abs_diff={:e} tolerance={:e}", report.trials, report.max_abs_diff, bench::VERIFY_TOLERANCE);
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::Runtime("grouped attention diverges from dense masked attention".into()))
            }
        }
        Command::Bench { layout, all_variants, repeat, dim, heads, seed } => {
            let (resolved, variant) = layout.resolve()?;
            let variants = if all_variants { MaskVariant::ALL.to_vec() } else { vec![variant] };
            println!("{}", bench::BENCH_HEADER);
            for v in variants {
                println!("{}", bench::bench(&resolved, v, dim, heads, repeat, seed).map_err(usage)?);
            }
            Ok(())
        }
        Command::Train(args) => {
            let cfg = args.config()?;
            let quiet = args.quiet;
            let total = cfg.total_steps();
            let outcome = train_with(&cfg, |m| {
                if !quiet && (m.step % 100 == 0 || m.step as usize == total) {
                    eprintln!("step {}/{total} {} {} loss={:.5}", m.step, m.stage, m.task, m.loss);
                }
            })
            .map_err(|e| match e {
                TrainError::Config(_) | TrainError::ConfigLine { .. } => usage(e),
                other => runtime(other),
            })?;
            println!("{}", outcome.checkpoint.display());
            Ok(())
        }
        Command::Sample { run, prompts, out } => {
            let Run { config, model, sampler } = run.load()?;
            let sched = make_zero_snr_schedule(config.diffusion_steps).map_err(runtime)?;
            let ids = prompt_ids(&config, &prompts)?;
            let segments = generate_fixed(&model, &ids, &sampler, &sched).map_err(usage)?;
            save_segments(&out, &segments).map_err(runtime)
        }
        Command::Extend { run, context, context_prompts, prompts, out } => {
            let Run { config, model, sampler } = run.load()?;
            let sched = make_zero_snr_schedule(config.diffusion_steps).map_err(runtime)?;
            let ctx = load_segments(&context).map_err(runtime)?;
            let views: Vec<_> = ctx.iter().map(|s| s.view()).collect();
            let ctx_ids = prompt_ids(&config, &context_prompts)?;
            let new_ids = prompt_ids(&config, &prompts)?;
            let segments = extend_many(&model, &views, &ctx_ids, &new_ids, &sampler, &sched).map_err(usage)?;
            save_segments(&out, &segments).map_err(runtime)
        }
        Command::Eval { run, samples, out } => {
            let seed = run.seed;
            let Run { config, model, sampler } = run.load()?;
            let sched = make_zero_snr_schedule(config.diffusion_steps).map_err(runtime)?;
            let bank = make_prototypes(&config.data).map_err(runtime)?;
            let eval = EvalConfig { samples, seed, sampler_steps: sampler.steps };
            let report = evaluate(&model, &bank, &sched, &eval).map_err(runtime)?;
            write_output(out.as_deref(), &report.to_string())
        }
    }
}

fn prompt_ids(config: &TrainingConfig, prompts: &[usize]) -> Result<Vec<Vec<usize>>, CliError> {
    prompts
        .iter()
        .map(|&c| {
            if c >= config.data.prompts {
                Err(CliError::Usage(format!("prompt {c} out of range 0..{}", config.data.prompts)))
            } else {
                Ok(config.data.text_ids(c))
            }
        })
        .collect()
}

fn main() -> ExitCode {
    if let Some(threads) = std::env::var("M2DT_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build_global();
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
