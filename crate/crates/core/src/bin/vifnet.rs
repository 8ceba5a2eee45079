use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use vifnet::data::{generate_dataset_with, DatasetManifest, Dataset, GenerateOptions, Split};
use vifnet::fusion::{Variant, VifnetModel};
use vifnet::haze::FogPreset;
use vifnet::imaging::{ColorSpace, FeatureMap, ImageTensor};
use vifnet::io::{load_model, read_png, write_png};
use vifnet::train::{
    ablate, ablation_csv, ablation_table, dehaze_image, evaluate, grid_specs, misaligned, train, AblationBudget, Grid,
    RunDir, TrainConfig,
};
use vifnet::{Error, Result};

/// Visible-infrared fusion dehazing: data synthesis, training and evaluation.
#[derive(Parser, Debug)]
#[command(name = "vifnet", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render procedural scenes and write hazy/infrared/clean triplets.
    Synth(SynthArgs),
    /// Train a model on a synthesized dataset.
    Train(TrainArgs),
    /// Score a run's final checkpoint on a split.
    Eval(EvalArgs),
    /// Dehaze one visible/infrared pair.
    Dehaze(DehazeArgs),
    /// Train and score an ablation grid.
    Ablate(AblateArgs),
    /// Dump structure and inconsistency maps of a trained run.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of scenes; each is rendered under every preset.
    #[arg(long)]
    scenes: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scene height and width in pixels.
    #[arg(long, default_value_t = vifnet::data::DEFAULT_SCENE_SIZE)]
    size: usize,
    #[arg(long, value_delimiter = ',', default_values_t = FogPreset::ALL.map(|p| p.to_string()))]
    presets: Vec<String>,
    /// Generator threads; output does not depend on it.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum Profile {
    /// 96-pixel crops, 5000 iterations, base width 16, batch 1, lr 5e-4.
    Desk,
    /// 240-pixel crops, 100000 iterations, base width 24, batch 8, lr 1e-4.
    Full,
}

/// Training overrides; unset flags fall back to the config file, then the profile.
#[derive(Args, Debug, Default)]
struct TrainFlags {
    /// Learning rate [full 1e-4, desk 5e-4]
    #[arg(long)]
    lr: Option<f64>,
    /// Batch size [full 8, desk 1]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training iterations [full 100000, desk 5000]
    #[arg(long)]
    iterations: Option<usize>,
    /// L2 weight decay [5e-4]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Adam first-moment decay [0.9]
    #[arg(long)]
    adam_beta1: Option<f64>,
    /// Adam second-moment decay [0.999]
    #[arg(long)]
    adam_beta2: Option<f64>,
    /// Square crop size [full 240, desk 96]
    #[arg(long)]
    crop: Option<usize>,
    /// Seed for initialization and batch sampling [0]
    #[arg(long)]
    seed: Option<u64>,
    /// Gradient global-norm clip, 0 disables [1.0]
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Steps between checkpoints [full 5000, desk 1000]
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Base channel width c; levels use c, 2c, 4c [full 24, desk 16]
    #[arg(long)]
    base_channels: Option<usize>,
    /// Network variant [dsfe_inconsistency]
    #[arg(long)]
    variant: Option<String>,
    /// L1 weight [1.0]
    #[arg(long)]
    lambda1: Option<f64>,
    /// MS-SSIM weight [0.2]
    #[arg(long)]
    lambda2: Option<f64>,
    /// Dice edge weight [0.05]
    #[arg(long)]
    lambda3: Option<f64>,
    /// Disable random crops and flips.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// TOML file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    #[command(flatten)]
    flags: TrainFlags,
    /// Replace an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Checkpoint to score instead of the run's final one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory instead of the one recorded in the run.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Shift the infrared by this many pixels at 240-pixel width.
    #[arg(long)]
    misalign: Option<u32>,
}

#[derive(Args, Debug)]
struct DehazeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    visible: PathBuf,
    #[arg(long)]
    infrared: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing output file.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    grid: String,
    /// Output directory [ablate_<grid>]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    /// Seeds averaged per row.
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    seeds: Vec<u64>,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Number of samples to dump.
    #[arg(long, default_value_t = 4)]
    count: usize,
    /// Output directory [RUN/inspect]
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Echoed into each run directory.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    data: PathBuf,
    profile: Profile,
    train: TrainConfig,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

fn resolve(profile: Profile, file: Option<&Path>, f: &TrainFlags) -> Result<TrainConfig> {
    let mut c = match file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            // The file overrides the profile field by field.
            let mut base = toml::Table::try_from(profile_config(profile)).map_err(config_err)?;
            let over: toml::Table = text.parse().map_err(config_err)?;
            merge(&mut base, over);
            base.try_into().map_err(config_err)?
        }
        None => profile_config(profile),
    };
    macro_rules! set {
        ($($field:ident).+ <- $flag:expr) => {
            if let Some(v) = $flag.clone() {
                c.$($field).+ = v;
            }
        };
    }
    set!(lr <- f.lr);
    set!(batch_size <- f.batch_size);
    set!(iterations <- f.iterations);
    set!(weight_decay <- f.weight_decay);
    set!(adam_beta1 <- f.adam_beta1);
    set!(adam_beta2 <- f.adam_beta2);
    set!(crop <- f.crop);
    set!(seed <- f.seed);
    set!(grad_clip <- f.grad_clip);
    set!(checkpoint_every <- f.checkpoint_every);
    set!(model.base_channels <- f.base_channels);
    set!(loss_weights.lambda1 <- f.lambda1);
    set!(loss_weights.lambda2 <- f.lambda2);
    set!(loss_weights.lambda3 <- f.lambda3);
    if let Some(v) = &f.variant {
        c.model.variant = v.parse()?;
    }
    if f.no_augment {
        c.augment = false;
    }
    c.validate()?;
    Ok(c)
}

fn profile_config(p: Profile) -> TrainConfig {
    match p {
        Profile::Desk => TrainConfig::desk(),
        Profile::Full => TrainConfig::full(),
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Refuses to reuse a non-empty directory unless `force` is set.
fn fresh_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_none();
        if !empty {
            if !force {
                return Err(Error::Config(format!("{} exists; pass --force to overwrite", dir.display())));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn echo(title: &str, text: &str) {
    println!("# {title}\n{}", text.trim_end());
}

fn read_run(run: &Path) -> Result<RunConfig> {
    let path = RunDir::new(run).config();
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::Format { path, message: e.to_string() })
}

fn synth(a: SynthArgs) -> Result<()> {
    let presets = a.presets.iter().map(|p| p.parse()).collect::<Result<Vec<FogPreset>>>()?;
    echo(
        "resolved config",
        &format!(
            "scenes = {}\nseed = {}\nsize = {}\npresets = {:?}\nout = {:?}",
            a.scenes,
            a.seed,
            a.size,
            presets.iter().map(|p| p.name()).collect::<Vec<_>>(),
            a.out
        ),
    );
    fresh_dir(&a.out, a.force)?;
    let opts = GenerateOptions { height: a.size, width: a.size, workers: a.workers };
    let m = generate_dataset_with(a.scenes, &presets, a.seed, &a.out, &opts)?;
    let val = m.split(Split::Val).count();
    println!("wrote {} triplets ({} train, {val} val) to {}", m.entries.len(), m.entries.len() - val, a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = resolve(a.profile, a.config.as_deref(), &a.flags)?;
    let manifest = DatasetManifest::read(&a.data)?;
    let rc = RunConfig { data: a.data.clone(), profile: a.profile, train: cfg.clone() };
    let text = toml::to_string(&rc).map_err(config_err)?;
    echo("resolved config", &text);
    fresh_dir(&a.out, a.force)?;
    let run = RunDir::new(&a.out);
    write_text(&run.config(), &text)?;
    let data = Dataset::load(&manifest, Split::Train)?;
    println!("training on {} triplets", data.len());
    let model = VifnetModel::new(cfg.model, cfg.seed)?;
    println!("{} parameters", model.params.num_scalars());
    let every = (cfg.iterations / 50).max(1);
    let out = train(model, &data, &cfg, Some(&run), |r| {
        if r.step % every == 0 || r.step + 1 == cfg.iterations {
            println!("step {:>7}  loss {:.5}  lr {:.3e}", r.step, r.total, r.lr);
        }
    })?;
    println!("final loss {:.5}; checkpoint {}", out.history.last().map(|r| r.total).unwrap_or(f64::NAN), run.final_checkpoint().display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    let rc = read_run(&a.run)?;
    let run = RunDir::new(&a.run);
    let data_dir = a.data.clone().unwrap_or(rc.data);
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| run.final_checkpoint());
    echo(
        "resolved config",
        &format!("run = {:?}\ndata = {:?}\ncheckpoint = {:?}\nsplit = {:?}\nmisalign = {:?}", a.run, data_dir, ckpt, split.name(), a.misalign),
    );
    let model: VifnetModel<f32> = load_model(&ckpt)?;
    let mut data = Dataset::load(&DatasetManifest::read(&data_dir)?, split)?;
    if let Some(px) = a.misalign {
        data = misaligned(&data, px)?;
    }
    let table = evaluate(&model, &data)?;
    let csv = table.to_csv(&data_dir.display().to_string(), split.name());
    write_text(&run.metrics_csv(), &csv)?;
    print!("{csv}");
    Ok(())
}

fn dehaze_cmd(a: DehazeArgs) -> Result<()> {
    echo("resolved config", &format!("model = {:?}\nvisible = {:?}\ninfrared = {:?}\nout = {:?}", a.model, a.visible, a.infrared, a.out));
    if a.out.exists() && !a.force {
        return Err(Error::Config(format!("{} exists; pass --force to overwrite", a.out.display())));
    }
    let model: VifnetModel<f32> = load_model(&a.model)?;
    let vi = read_png(&a.visible, ColorSpace::Rgb)?;
    let ir = read_png(&a.infrared, ColorSpace::Infrared)?;
    if !vi.same_dims(&ir) {
        return Err(Error::Shape(format!(
            "visible {}x{} and infrared {}x{} differ",
            vi.height(),
            vi.width(),
            ir.height(),
            ir.width()
        )));
    }
    let out = dehaze_image(&model, &vi, &ir)?;
    write_png(&a.out, &out)?;
    println!("wrote {} ({}x{})", a.out.display(), out.width(), out.height());
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let grid: Grid = a.grid.parse()?;
    let cfg = resolve(a.profile, a.config.as_deref(), &a.flags)?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from(format!("ablate_{}", a.grid)));
    let text = format!(
        "grid = {:?}\nseeds = {:?}\n{}",
        a.grid,
        a.seeds,
        toml::to_string(&RunConfig { data: a.data.clone(), profile: a.profile, train: cfg.clone() }).map_err(config_err)?
    );
    echo("resolved config", &text);
    fresh_dir(&out, a.force)?;
    write_text(&out.join("config.toml"), &text)?;
    let m = DatasetManifest::read(&a.data)?;
    let (tr, val) = (Dataset::load(&m, Split::Train)?, Dataset::load(&m, Split::Val)?);
    let budget = AblationBudget { train: cfg, seeds: a.seeds.clone() };
    let rows = ablate(&tr, &val, &grid_specs(grid), &budget, |msg| println!("{msg}"))?;
    write_text(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    let table = ablation_table(&rows);
    write_text(&out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn map_image(m: &FeatureMap) -> Result<ImageTensor> {
    ImageTensor::from_tensor_clamped(m.tensor.clone(), ColorSpace::Gray)
}

fn inspect_cmd(a: InspectArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    let rc = read_run(&a.run)?;
    let run = RunDir::new(&a.run);
    let out = a.out.clone().unwrap_or_else(|| a.run.join("inspect"));
    echo("resolved config", &format!("run = {:?}\nsplit = {:?}\ncount = {}\nout = {:?}", a.run, split.name(), a.count, out));
    let model: VifnetModel<f32> = load_model(&run.final_checkpoint())?;
    let data = Dataset::load(&DatasetManifest::read(&rc.data)?, split)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    for s in data.samples.iter().take(a.count) {
        let vi = vifnet::train::pad_to_multiple(&s.hazy_visible, 4)?;
        let ir = vifnet::train::pad_to_multiple(&s.infrared, 4)?;
        let tr = model.trace(&vi, &ir)?;
        let p = |name: &str| out.join(format!("{}_{name}.png", s.id));
        write_png(&p("hazy"), &s.hazy_visible)?;
        write_png(&p("infrared"), &s.infrared)?;
        write_png(&p("clean"), &s.clean_gt)?;
        write_png(&p("output"), &tr.output)?;
        let groups = [
            ("stru_vi", &tr.structure_visible),
            ("stru_in", &tr.structure_infrared),
            ("inconsistency", &tr.inconsistency),
            ("weighted", &tr.weighted),
        ];
        for (name, maps) in groups {
            if let Some(maps) = maps {
                for (k, m) in maps.iter().enumerate() {
                    write_png(&p(&format!("{name}{}", k + 1)), &map_image(m)?)?;
                }
            }
        }
    }
    if model.cfg.variant == Variant::BasicFusion {
        println!("basic_fusion has no structure maps; wrote inputs and outputs only");
    }
    println!("wrote maps for {} samples to {}", data.len().min(a.count), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    let res = match cli.cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Dehaze(a) => dehaze_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Inspect(a) => inspect_cmd(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
