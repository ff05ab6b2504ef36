//! Command-line frontend. Every command prints a JSON summary on stdout; on
//! failure it prints `{"error": {...}}` on stderr and exits 2 (usage),
//! 3 (validation) or 4 (runtime).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use storyplug_core::eval::{image_alignment, text_alignment, HashEmbedder, DEFAULT_QUESTIONS};
use storyplug_core::finetune::{FineTuneConfig, NoObserver};
use storyplug_core::inference::{generate_frame, EditSchedule, LayoutSpec, ScheduleKind};
use storyplug_core::sampler::{DEFAULT_GUIDANCE_SCALE, DEFAULT_STEPS};
use storyplug_core::{Backend, GenerationRequest};

use crate::error::{Error, Result};
use crate::evaluation::{self, ScoreRow};
use crate::story::{self, DiagnosticsFile, StoryManifest};
use crate::{checkpoint, dataset, default_backend, io, pipeline};

#[derive(Debug, Parser)]
#[command(name = "storyplug", version, about = "Character plugins and layout-controlled story rendering")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a training set: character images plus copy-paste augmentations.
    Augment(AugmentArgs),
    /// Fine-tune the text encoder on a dataset directory.
    Train(TrainArgs),
    /// Distill a character plugin from a training checkpoint.
    Extract(ExtractArgs),
    /// Render one frame.
    Generate(GenerateArgs),
    /// Render every frame of a story script.
    RenderStory(RenderStoryArgs),
    /// Alignment scores and human-evaluation sheets.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Plugin file utilities.
    #[command(subcommand)]
    Plugin(PluginCommand),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Directory of RGBA character PNGs.
    #[arg(long)]
    pub chars: PathBuf,
    /// Scene descriptions, one per line.
    #[arg(long)]
    pub scenes: PathBuf,
    /// Number of augmented images.
    #[arg(long, default_value_t = 300)]
    pub n: usize,
    /// Number of backgrounds to synthesize; defaults to one per scene.
    #[arg(long)]
    pub backgrounds: Option<usize>,
    /// Class noun recorded in the manifest.
    #[arg(long)]
    pub class_noun: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub class_noun: String,
    #[arg(long)]
    pub steps: usize,
    #[arg(long, default_value_t = 5e-6)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    /// Write an intermediate checkpoint every N steps (0 disables).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Continue from an earlier checkpoint of the same run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss history CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub name: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Creation time in seconds since the epoch; defaults to now.
    #[arg(long)]
    pub created_at: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScheduleArg {
    LinearDecay,
    ConstantWindow,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub prompt: String,
    /// Plugin files; repeat for several characters.
    #[arg(long = "plugin", num_args = 1..)]
    pub plugins: Vec<PathBuf>,
    /// JSON layout: `{"boxes": {"<plugin name>": [x0, y0, x1, y1]}}`.
    #[arg(long)]
    pub layout: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = DEFAULT_GUIDANCE_SCALE)]
    pub scale: f64,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleArg>,
    /// Fraction of the sampling run during which layout edits are applied.
    #[arg(long)]
    pub active_fraction: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the frame diagnostics JSON here.
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderStoryArgs {
    #[arg(long)]
    pub script: PathBuf,
    /// Directory of plugin files.
    #[arg(long)]
    pub plugins: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Mean image-prompt similarity.
    Ta {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Label for the score row.
        #[arg(long, default_value = "story")]
        story: String,
        /// Score CSV; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean image-reference similarity, averaged per character.
    Ia {
        #[arg(long)]
        images: PathBuf,
        /// One directory of reference images per character.
        #[arg(long = "refs", num_args = 1.., required = true)]
        refs: Vec<PathBuf>,
        #[arg(long, default_value = "story")]
        story: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Blank human-evaluation sheet for a rendered story.
    Sheet {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum PluginCommand {
    /// Print dimensions, metadata and row norms.
    Inspect { file: PathBuf },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Store directory (objects and index).
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Jobs that may run at once.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = write!(stdout, "{e}");
            return 0;
        }
        Err(e) => {
            let report = json!({ "error": { "code": "usage", "message": e.to_string().trim() } });
            let _ = writeln!(stderr, "{report}");
            return 2;
        }
    };
    match execute(cli.command) {
        Ok(summary) => {
            let _ = writeln!(stdout, "{summary}");
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "{}", serde_json::to_string(&e.report()).expect("serializable"));
            e.category().exit_code()
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

pub fn execute(command: Command) -> Result<serde_json::Value> {
    match command {
        Command::Augment(a) => augment(a),
        Command::Train(a) => train(a),
        Command::Extract(a) => extract(a),
        Command::Generate(a) => generate(a),
        Command::RenderStory(a) => render_story(a),
        Command::Eval(c) => eval(c),
        Command::Plugin(PluginCommand::Inspect { file }) => inspect(&file),
        Command::Serve(a) => serve(a),
    }
}

fn augment(a: AugmentArgs) -> Result<serde_json::Value> {
    let backend = default_backend();
    let characters = dataset::load_characters(&a.chars)?;
    let scenes = dataset::load_scenes(&a.scenes)?;
    let mut options = dataset::AugmentOptions::new(a.n, a.seed, a.backgrounds.unwrap_or(scenes.scenes.len()));
    options.label = a.class_noun.clone();
    let label = a.class_noun.unwrap_or_default();
    let (ds, backgrounds) = dataset::build(&backend, &characters, &scenes, &label, &options)?;
    let manifest =
        dataset::write(&a.out, &ds, &characters, &backgrounds, &scenes, &backend.descriptor().backend_id, &options)?;
    Ok(json!({
        "out": a.out,
        "characters": ds.character_images.len(),
        "augmented": ds.augmented_images.len(),
        "total": manifest.images.len(),
        "backgrounds": backgrounds.len(),
    }))
}

fn loss_csv_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

fn train(a: TrainArgs) -> Result<serde_json::Value> {
    let backend = default_backend();
    let config = FineTuneConfig {
        lambda: a.lambda,
        learning_rate: a.lr,
        steps: a.steps,
        batch_size: a.batch_size,
        seed: a.seed,
        checkpoint_every: a.checkpoint_every,
        ..FineTuneConfig::default()
    };
    config.validate()?;
    let resume = a.resume.as_deref().map(checkpoint::read).transpose()?;
    struct Writer<'a> {
        out: &'a Path,
        error: Option<Error>,
    }
    impl storyplug_core::finetune::TrainObserver for Writer<'_> {
        fn on_checkpoint(&mut self, ck: &storyplug_core::finetune::TrainingCheckpoint) {
            let path = self.out.with_extension(format!("step{}.ckpt", ck.step));
            if let Err(e) = checkpoint::write(&path, ck) {
                self.error.get_or_insert(e);
            }
        }
    }
    let ck = if a.checkpoint_every > 0 {
        let mut w = Writer { out: &a.out, error: None };
        let ck = pipeline::train_on_dir(&backend, &a.dataset, &a.class_noun, &config, resume, &mut w)?;
        if let Some(e) = w.error {
            return Err(e);
        }
        ck
    } else {
        pipeline::train_on_dir(&backend, &a.dataset, &a.class_noun, &config, resume, &mut NoObserver)?
    };
    checkpoint::write(&a.out, &ck)?;
    let csv = a.loss_csv.unwrap_or_else(|| loss_csv_path(&a.out));
    io::write_atomic(&csv, &checkpoint::loss_history_csv(&ck.history))?;
    let last = ck.history.last();
    Ok(json!({
        "out": a.out,
        "loss_csv": csv,
        "steps": ck.step,
        "final": last.map(to_value),
    }))
}

fn extract(a: ExtractArgs) -> Result<serde_json::Value> {
    let backend = default_backend();
    let ck = checkpoint::read(&a.ckpt)?;
    let p = pipeline::plugin_from_checkpoint(&backend, &ck, &a.name, a.created_at.unwrap_or_else(pipeline::unix_now))?;
    io::write_plugin(&a.out, &p)?;
    Ok(json!({ "out": a.out, "name": p.name, "class_noun": p.class_noun, "rows": p.rows, "width": p.width }))
}

fn generate(a: GenerateArgs) -> Result<serde_json::Value> {
    let backend = default_backend();
    let plugins =
        a.plugins.iter().map(|p| io::read_valid_plugin(p, backend.descriptor())).collect::<Result<Vec<_>>>()?;
    let layout: LayoutSpec = match &a.layout {
        Some(p) => io::read_json(p)?,
        None => LayoutSpec::default(),
    };
    let mut schedule = EditSchedule::default();
    if let Some(kind) = a.schedule {
        schedule.kind = match kind {
            ScheduleArg::LinearDecay => ScheduleKind::LinearDecay,
            ScheduleArg::ConstantWindow => ScheduleKind::ConstantWindow,
        };
    }
    if let Some(f) = a.active_fraction {
        schedule.active_fraction = f;
    }
    let request = GenerationRequest {
        prompt: a.prompt,
        plugins,
        layout,
        seed: a.seed,
        steps: a.steps,
        guidance_scale: a.scale,
        schedule,
    };
    let out = generate_frame(&backend, &request)?;
    let hash = story::request_hash(&backend.descriptor().backend_id, &request);
    io::write_png(&a.out, &out.image)?;
    if let Some(d) = &a.diagnostics {
        let id = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        io::write_json(d, &DiagnosticsFile { id, request_hash: hash.clone(), diagnostics: out.diagnostics })?;
    }
    Ok(json!({ "out": a.out, "request_hash": hash }))
}

fn render_story(a: RenderStoryArgs) -> Result<serde_json::Value> {
    let backend = default_backend();
    let script = story::read_script(&a.script)?;
    let store = story::load_plugin_dir(&a.plugins, &backend)?;
    let manifest = story::render_story(&backend, &script, &store, a.workers, &a.out)?;
    Ok(json!({
        "out": a.out,
        "frames": manifest.frames.len(),
        "manifest_sha256": io::sha256_hex(&io::to_json_pretty(&manifest)),
        "warnings": script.warnings(),
    }))
}

fn read_images(dir: &Path) -> Result<Vec<storyplug_core::image::RgbImage>> {
    io::list_pngs(dir)?.iter().map(|p| io::read_rgb(p)).collect()
}

fn emit_scores(rows: &[ScoreRow], out: Option<&Path>) -> Result<serde_json::Value> {
    let csv = evaluation::scores_csv(rows);
    match out {
        Some(p) => {
            io::write_atomic(p, &csv)?;
            Ok(json!({ "out": p, "scores": rows }))
        }
        None => Ok(json!({ "scores": rows })),
    }
}

fn eval(c: EvalCommand) -> Result<serde_json::Value> {
    let embedder = HashEmbedder::default();
    match c {
        EvalCommand::Ta { images, prompt, story, out } => {
            let value = text_alignment(&read_images(&images)?, &prompt, &embedder)?;
            emit_scores(&[ScoreRow { story, metric: "ta".into(), value }], out.as_deref())
        }
        EvalCommand::Ia { images, refs, story, out } => {
            let refs = refs.iter().map(|d| read_images(d)).collect::<Result<Vec<_>>>()?;
            let value = image_alignment(&read_images(&images)?, &refs, &embedder)?;
            emit_scores(&[ScoreRow { story, metric: "ia".into(), value }], out.as_deref())
        }
        EvalCommand::Sheet { manifest, out } => {
            let m: StoryManifest = io::read_json(&manifest)?;
            let questions: Vec<String> = DEFAULT_QUESTIONS.iter().map(|s| s.to_string()).collect();
            evaluation::write_sheet(&out, &m, &questions)?;
            Ok(json!({ "out": out, "rows": m.frames.len() * questions.len() }))
        }
    }
}

fn inspect(file: &Path) -> Result<serde_json::Value> {
    let p = io::read_plugin(file)?;
    Ok(json!({
        "name": p.name,
        "class_noun": p.class_noun,
        "rows": p.rows,
        "width": p.width,
        "dims": format!("{}x{}", p.rows, p.width),
        "descriptor_id": p.descriptor_id,
        "created_at": p.created_at,
        "format_version": p.format_version,
        "payload_bytes": p.payload_len(),
        "row_norms": p.row_norms(),
    }))
}

fn serve(a: ServeArgs) -> Result<serde_json::Value> {
    use crate::service::{self, AppState, ServiceConfig};
    let state = AppState::open(default_backend(), &ServiceConfig { root: a.root.clone(), workers: a.workers })?;
    let rt =
        tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| Error::io(a.root.clone(), e))?;
    eprintln!("listening on {}", a.addr);
    rt.block_on(service::serve(state, &a.addr))?;
    Ok(json!({ "stopped": a.addr }))
}
