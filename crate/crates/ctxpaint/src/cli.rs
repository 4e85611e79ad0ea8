//! Command-line interface: data preparation, training, sampling, evaluation
//! and attention visualisation.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ctxpaint_core::diffusion::{adaptive_sample, PixelSpace, SamplerConfig};
use ctxpaint_core::eval::{AttentionMean, PluginRegistry};
use ctxpaint_core::pose::RelativePose;
use ctxpaint_core::stitch::{
    compose_local_sr, compose_nvs, compose_plain, compose_ref_inpaint, PatchBox, StitchedCanvas,
};
use ctxpaint_core::{Seed, TaskKind};

use crate::backbone::DEFAULT_PROBES;
use crate::config::RunConfig;
use crate::data::{
    eval_mask, eval_sample, filter_cooccurrence, freeze_masks, load_frozen_masks, make_toy_dataset,
    FrozenMask, Manifest, Split, ToyDataConfig, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::imageio::{hstack, mask_canvas, read_image, read_mask, write_image};
use crate::inference::{
    attention_maps, conditions, evaluate, heatmap_image, sample_stitched, ThresholdDetector,
};
use crate::train::{load_run_model, Trainer};

/// Environment variable naming the directory relative run paths resolve against.
pub const ROOT_ENV: &str = "CTXPAINT_CHECKPOINT_ROOT";

#[derive(Debug, Parser)]
#[command(
    name = "ctxpaint",
    version,
    about = "In-context inpainting with task prompts on a toy diffusion backbone"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the toy dataset or validate an external manifest.
    PrepData(PrepDataArgs),
    /// Freeze evaluation masks for a split to disk.
    MakeMasks(MakeMasksArgs),
    /// Train (or resume) a run from a config file.
    Train(TrainArgs),
    /// Sample one input with a trained run.
    Sample(SampleArgs),
    /// Compute metrics over the validation split.
    Eval(EvalArgs),
    /// Write reference-attention heat maps per probe layer and sampling step.
    VizAttn(VizAttnArgs),
}

#[derive(Debug, Args)]
pub struct PrepDataArgs {
    /// Render procedural scenes.
    #[arg(long)]
    pub toy: bool,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub side: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 12)]
    pub views: usize,
    /// External manifest to validate (and optionally filter into `--out`).
    #[arg(long, conflicts_with = "toy")]
    pub manifest: Option<PathBuf>,
    /// Keep only records with co-occurrence in `[LOW, HIGH]`.
    #[arg(long, num_args = 2, value_names = ["LOW", "HIGH"])]
    pub filter: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MakeMasksArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub task: TaskKind,
    #[arg(long, default_value = "val")]
    pub split: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue the run in `--run-dir` from its last checkpoint.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub prompt_lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub cfg: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SamplerArgs {
    fn apply(&self, mut s: SamplerConfig) -> SamplerConfig {
        if let Some(v) = self.steps {
            s.steps = v;
        }
        if let Some(v) = self.eta {
            s.eta = v;
        }
        if let Some(v) = self.cfg {
            s.cfg_scale = v;
        }
        if let Some(v) = self.seed {
            s.seed = Seed(v);
        }
        s
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Manifest holding `--record`; defaults to the run's training manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub record: Option<String>,
    /// Frozen masks to use for `--record` instead of its deterministic evaluation mask.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub tar: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Local-SR patch as `X,Y,SIDE` in reference pixels.
    #[arg(long, value_delimiter = ',')]
    pub patch: Option<Vec<usize>>,
    /// Relative pose as `DTHETA,DPHI,DR`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub pose: Option<Vec<f64>>,
    /// Two-pass view synthesis from the reference object mask.
    #[arg(long)]
    pub adaptive: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the composed canvas.
    #[arg(long)]
    pub dump_stitched: bool,
    /// Also write an input | mask | output grid.
    #[arg(long)]
    pub grid: bool,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Report path; the grid goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub grid: bool,
    /// Copy ground truth instead of sampling.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Debug, Args)]
pub struct VizAttnArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub record: String,
    #[arg(long, value_delimiter = ',', default_value = "1,25,50")]
    pub at: Vec<usize>,
    #[arg(long = "probe")]
    pub probes: Vec<String>,
    /// Divide by the number of masked queries rather than all positions.
    #[arg(long)]
    pub normalized: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

/// Resolves relative run paths against the checkpoint root, when set.
pub fn resolve_run(path: &Path) -> PathBuf {
    match std::env::var_os(ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepData(a) => prep_data(&a),
        Command::MakeMasks(a) => make_masks(&a),
        Command::Train(a) => train(&a),
        Command::Sample(a) => sample_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::VizAttn(a) => viz_attn(&a),
    }
}

/// Exit status for a command result: 0 ok, 2 input or config error, 1 otherwise.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_input_error() => 2,
        Err(_) => 1,
    }
}

fn prep_data(a: &PrepDataArgs) -> Result<()> {
    let window = match a.filter.as_deref() {
        Some([lo, hi]) => Some((*lo, *hi)),
        _ => None,
    };
    if a.toy {
        let cfg = ToyDataConfig {
            side: a.side,
            channels: a.channels,
            views: a.views,
            ..ToyDataConfig::default()
        };
        let m = make_toy_dataset(&a.out, a.n, Seed(a.seed), &cfg)?;
        let val = m.records.iter().filter(|r| r.split == Split::Val).count();
        println!(
            "wrote {} pairs ({} train, {val} val) to {}",
            m.records.len(),
            m.records.len() - val,
            a.out.display()
        );
        if let Some((lo, hi)) = window {
            let (kept, _) = filter_cooccurrence(&m.records, lo, hi);
            println!("{} pairs have co-occurrence in [{lo}, {hi}]", kept.len());
        }
        return Ok(());
    }
    let Some(path) = &a.manifest else {
        return Err(Error::Config("prep-data needs --toy or --manifest".into()));
    };
    let m = Manifest::load(path)?;
    let records = match window {
        Some((lo, hi)) => filter_cooccurrence(&m.records, lo, hi).0,
        None => m.records.clone(),
    };
    fs::create_dir_all(&a.out).map_err(Error::io(&a.out))?;
    let rebased = records
        .into_iter()
        .map(|mut r| {
            let abs = |p: &Path| fs::canonicalize(m.resolve(p)).unwrap_or_else(|_| m.resolve(p));
            r.ref_path = abs(&r.ref_path);
            r.tar_path = abs(&r.tar_path);
            r.match_path = r.match_path.as_deref().map(abs);
            r.object_mask_path = r.object_mask_path.as_deref().map(abs);
            r.tar_object_mask_path = r.tar_object_mask_path.as_deref().map(abs);
            for v in &mut r.views {
                v.path = abs(&v.path);
                v.object_mask_path = abs(&v.object_mask_path);
            }
            r
        })
        .collect::<Vec<_>>();
    let out = Manifest::new(&a.out, rebased);
    out.save(&a.out.join(MANIFEST_FILE))?;
    println!(
        "{} of {} records written to {}",
        out.records.len(),
        m.records.len(),
        a.out.join(MANIFEST_FILE).display()
    );
    Ok(())
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    match s {
        "train" => Ok(Some(Split::Train)),
        "val" => Ok(Some(Split::Val)),
        "all" => Ok(None),
        other => Err(Error::Config(format!(
            "unknown split `{other}` (train, val or all)"
        ))),
    }
}

fn side_of(m: &Manifest) -> Result<usize> {
    let r = m
        .records
        .first()
        .ok_or_else(|| Error::Config("manifest has no records".into()))?;
    let img = m.image(&r.tar_path)?;
    Ok(img.height().min(img.width()))
}

fn make_masks(a: &MakeMasksArgs) -> Result<()> {
    let m = Manifest::load(&a.manifest)?;
    let m = match parse_split(&a.split)? {
        Some(s) => m.split(s),
        None => m,
    };
    let opts = crate::data::DrawOptions::for_side(side_of(&m)?);
    let index = freeze_masks(&m, a.task, &a.out, &opts, Seed(a.seed))?;
    println!(
        "froze {} {} masks in {}",
        index.len(),
        a.task,
        a.out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut trainer = if a.resume {
        let dir = a
            .run_dir
            .as_deref()
            .ok_or_else(|| Error::Config("--resume needs --run-dir".into()))?;
        Trainer::resume(&resolve_run(dir))?
    } else {
        let path = a
            .config
            .as_deref()
            .ok_or_else(|| Error::Config("train needs --config".into()))?;
        let mut cfg = RunConfig::load(path)?;
        if let Some(v) = &a.run_dir {
            cfg.run_dir = v.clone();
        }
        if let Some(v) = a.steps {
            cfg.hyper.steps = v;
        }
        if let Some(v) = a.seed {
            cfg.seed = Seed(v);
        }
        if let Some(v) = &a.manifest {
            cfg.data.manifest = v.clone();
        }
        if let Some(v) = a.prompt_lr {
            cfg.hyper.prompt_lr = Some(v);
        }
        if let Some(v) = a.batch_size {
            cfg.hyper.batch_size = v;
        }
        let dir = resolve_run(&cfg.run_dir);
        Trainer::new(cfg, &dir)?
    };
    let reports = trainer.run()?;
    match (reports.first(), reports.last()) {
        (Some(f), Some(l)) => println!(
            "{}: steps {}..{} loss {:.5} -> {:.5}",
            trainer.run_dir().display(),
            f.step,
            l.step,
            f.loss,
            l.loss
        ),
        _ => println!(
            "{}: already at step {}",
            trainer.run_dir().display(),
            trainer.step()
        ),
    }
    Ok(())
}

fn record_input(
    manifest: &Manifest,
    id: &str,
    task: TaskKind,
    masks: Option<&Path>,
) -> Result<StitchedCanvas> {
    let rec = manifest
        .records
        .iter()
        .find(|r| r.id == id)
        .ok_or_else(|| Error::Config(format!("no record `{id}` in the manifest")))?;
    let opts = crate::data::DrawOptions::for_side(side_of(manifest)?);
    let (entry, mask): (FrozenMask, _) = match masks {
        Some(dir) => load_frozen_masks(dir)?
            .into_iter()
            .find(|(e, _)| e.id == id && e.task == task)
            .ok_or_else(|| {
                Error::Config(format!(
                    "no frozen {task} mask for `{id}` in {}",
                    dir.display()
                ))
            })?,
        None => {
            let (mask, kind, patch) = eval_mask(manifest, rec, task, &opts, Seed(0))?;
            (
                FrozenMask {
                    id: id.into(),
                    task,
                    kind,
                    mask_path: PathBuf::new(),
                    patch,
                },
                mask,
            )
        }
    };
    Ok(eval_sample(manifest, rec, &entry, &mask, &opts)?.stitched)
}

fn file_input(a: &SampleArgs, task: TaskKind) -> Result<StitchedCanvas> {
    let need = |p: &Option<PathBuf>, flag: &str| -> Result<PathBuf> {
        p.clone()
            .ok_or_else(|| Error::Config(format!("{task} sampling from files needs --{flag}")))
    };
    Ok(match task {
        TaskKind::Inpaint | TaskKind::Outpaint => compose_plain(
            &read_image(&need(&a.tar, "tar")?)?,
            &read_mask(&need(&a.mask, "mask")?)?,
            task,
        )?,
        TaskKind::RefInpaint => compose_ref_inpaint(
            &read_image(&need(&a.reference, "ref")?)?,
            &read_image(&need(&a.tar, "tar")?)?,
            &read_mask(&need(&a.mask, "mask")?)?,
        )?,
        TaskKind::LocalSr => {
            let p = match a.patch.as_deref() {
                Some(p @ [_, _, _]) => p,
                _ => {
                    return Err(Error::Config(
                        "local_sr sampling needs --patch X,Y,SIDE".into(),
                    ))
                }
            };
            let reference = read_image(&need(&a.reference, "ref")?)?;
            let side = reference.height().min(reference.width());
            let frame = crate::data::DrawOptions::for_side(side).frame;
            compose_local_sr(
                &reference,
                &PatchBox {
                    x: p[0],
                    y: p[1],
                    w: p[2],
                    h: p[2],
                },
                &frame,
            )?
        }
        TaskKind::Nvs => {
            let p = match a.pose.as_deref() {
                Some(p @ [_, _, _]) => p,
                _ => {
                    return Err(Error::Config(
                        "nvs sampling needs --pose DTHETA,DPHI,DR".into(),
                    ))
                }
            };
            let reference = read_image(&need(&a.reference, "ref")?)?;
            let bg = vec![1.0; reference.channels()];
            let pose = RelativePose::new(p[0], p[1], p[2])?;
            compose_nvs(
                &reference,
                &read_mask(&need(&a.mask, "mask")?)?,
                pose,
                &bg,
                Default::default(),
                Seed(0),
            )?
        }
    })
}

fn sample_cmd(a: &SampleArgs) -> Result<()> {
    let run_dir = resolve_run(&a.run);
    let (cfg, model) = load_run_model(&run_dir)?;
    let schedule = cfg.schedule.build()?;
    let sampler = a.sampler.apply(cfg.sampler());
    let task = cfg.task;
    let manifest = || Manifest::load(a.manifest.as_deref().unwrap_or(&cfg.data.manifest));
    let name = a.record.clone().unwrap_or_else(|| "sample".into());
    if a.adaptive {
        if task != TaskKind::Nvs {
            return Err(Error::Config("--adaptive applies to nvs runs only".into()));
        }
        let id = a
            .record
            .as_deref()
            .ok_or_else(|| Error::Config("--adaptive needs --record".into()))?;
        let m = manifest()?;
        let rec = m
            .records
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::Config(format!("no record `{id}`")))?;
        let (v0, v1) = match (rec.views.first(), rec.views.get(1)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Config(format!(
                    "record {id} has fewer than two views"
                )))
            }
        };
        let reference = m.image(&v0.path)?;
        let bg = vec![1.0; reference.channels()];
        let pose = RelativePose::between(&v0.pose, &v1.pose)?;
        let mut adaptive = cfg.adaptive.unwrap_or_default();
        adaptive.sampler = sampler;
        let probe = compose_nvs(
            &reference,
            &m.mask(&v0.object_mask_path)?,
            pose,
            &bg,
            adaptive.fill,
            Seed(0),
        )?;
        let (cond, null) = conditions(&model, &probe)?;
        let detector = ThresholdDetector {
            background: bg.clone(),
            tolerance: 0.1,
        };
        let out = adaptive_sample(
            &reference,
            &m.mask(&v0.object_mask_path)?,
            pose,
            &bg,
            &detector,
            &model,
            &PixelSpace,
            &schedule,
            &cond,
            &null,
            &adaptive,
        )?;
        write_image(&a.out.join(format!("{name}.png")), &out.image)?;
        write_image(&a.out.join(format!("{name}-rough.png")), &out.rough)?;
        if a.grid {
            let g = hstack(&[&reference, &mask_canvas(&out.second_mask), &out.image])?;
            write_image(&a.out.join(format!("{name}-grid.png")), &g)?;
        }
        println!("wrote {}", a.out.join(format!("{name}.png")).display());
        return Ok(());
    }
    let stitched = match &a.record {
        Some(id) => record_input(&manifest()?, id, task, a.masks.as_deref())?,
        None => file_input(a, task)?,
    };
    if a.dump_stitched {
        write_image(
            &a.out.join(format!("{name}-stitched.png")),
            &stitched.canvas,
        )?;
    }
    let out = sample_stitched(&model, &schedule, &stitched, &sampler)?;
    write_image(&a.out.join(format!("{name}.png")), &out)?;
    if a.grid {
        let g = hstack(&[&stitched.canvas, &mask_canvas(&stitched.mask), &out])?;
        write_image(&a.out.join(format!("{name}-grid.png")), &g)?;
    }
    println!("wrote {}", a.out.join(format!("{name}.png")).display());
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let run_dir = resolve_run(&a.run);
    let (cfg, model) = if a.oracle {
        (
            RunConfig::load(&run_dir.join(crate::train::CONFIG_FILE))?,
            None,
        )
    } else {
        let (c, m) = load_run_model(&run_dir)?;
        (c, Some(m))
    };
    let masks_dir = a
        .masks
        .clone()
        .or_else(|| cfg.data.frozen_masks.clone())
        .ok_or_else(|| {
            Error::Config("no frozen masks given; run `make-masks` and pass --masks".into())
        })?;
    let mut frozen = load_frozen_masks(&masks_dir)?;
    frozen.retain(|(e, _)| e.task == cfg.task);
    if frozen.is_empty() {
        return Err(Error::Config(format!(
            "{} holds no {} masks; run `make-masks --task {}`",
            masks_dir.display(),
            cfg.task,
            cfg.task
        )));
    }
    if let Some(n) = a.limit {
        frozen.truncate(n);
    }
    let manifest = Manifest::load(a.manifest.as_deref().unwrap_or(&cfg.data.manifest))?;
    let opts = cfg.draw_options(side_of(&manifest)?);
    let schedule = cfg.schedule.build()?;
    let sampler = a.sampler.apply(cfg.sampler());
    let (report, items) = evaluate(
        model.as_ref(),
        &schedule,
        &manifest,
        &frozen,
        &opts,
        &sampler,
        &PluginRegistry::default(),
    )?;
    let json = serde_json::to_string_pretty(&report).expect("report serialises");
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    fs::write(&a.out, json.clone() + "\n").map_err(Error::io(&a.out))?;
    if a.grid {
        let rows: Vec<_> = items
            .iter()
            .map(|e| {
                hstack(&[
                    &e.stitched.canvas,
                    &mask_canvas(&e.stitched.mask),
                    &e.output,
                    &e.target,
                ])
            })
            .collect::<Result<_>>()?;
        let grid = vstack(&rows)?;
        write_image(&a.out.with_extension("png"), &grid)?;
    }
    println!("{json}");
    Ok(())
}

fn vstack(rows: &[ctxpaint_core::ImageCanvas]) -> Result<ctxpaint_core::ImageCanvas> {
    let w = rows.iter().map(|r| r.width()).max().unwrap_or(0);
    let h: usize = rows.iter().map(|r| r.height()).sum();
    let c = rows.iter().map(|r| r.channels()).max().unwrap_or(1);
    let mut data = vec![1.0; c * h * w];
    let mut y0 = 0;
    for r in rows {
        for ch in 0..c {
            for y in 0..r.height() {
                for x in 0..r.width() {
                    data[ch * h * w + (y0 + y) * w + x] = r.get(ch.min(r.channels() - 1), y, x);
                }
            }
        }
        y0 += r.height();
    }
    Ok(ctxpaint_core::ImageCanvas::new(h, w, c, data)?)
}

fn viz_attn(a: &VizAttnArgs) -> Result<()> {
    let run_dir = resolve_run(&a.run);
    let (cfg, model) = load_run_model(&run_dir)?;
    let schedule = cfg.schedule.build()?;
    let sampler = a.sampler.apply(cfg.sampler());
    let manifest = Manifest::load(a.manifest.as_deref().unwrap_or(&cfg.data.manifest))?;
    let stitched = record_input(&manifest, &a.record, cfg.task, None)?;
    let probes: Vec<String> = if a.probes.is_empty() {
        DEFAULT_PROBES.iter().map(|s| s.to_string()).collect()
    } else {
        a.probes.clone()
    };
    let mean = if a.normalized {
        AttentionMean::Normalized
    } else {
        AttentionMean::Literal
    };
    let maps = attention_maps(&model, &schedule, &stitched, &sampler, &a.at, &probes, mean)?;
    let (h, pane_w) = (stitched.canvas.height(), stitched.pane_width());
    for m in &maps {
        let path = a
            .out
            .join(format!("{}-{}-step{:03}.png", a.record, m.layer, m.step));
        write_image(&path, &heatmap_image(&m.map, h, pane_w)?)?;
    }
    println!("wrote {} heat maps to {}", maps.len(), a.out.display());
    Ok(())
}
