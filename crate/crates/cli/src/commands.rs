//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use tapkit::diffcore::Fault;
use tapkit::evaltap::{self, metrics_csv, QueryMode};
use tapkit::render::render_overlay;
use tapkit::rng::mix;
use tapkit::synthdata::io::{read_clip, read_dataset, write_clip, Clip};
use tapkit::synthdata::{generate_scene, Domain, SceneConfig};
use tapkit::tracker::{load_checkpoint, predict_chunked, Checkpoint};
use tapkit::trainer::{canonical_ablation, select_fraction, LogRecord, TrainConfig, TrainData, TrainSummary, Trainer, ABLATIONS};
use tapkit::verify::{self, Scope};
use tapkit::QueryPoint;

use crate::manifest::write_manifest;
use crate::{UsageError, VerificationFailed};

/// `println!` that tolerates a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

fn parse_set(items: &[String]) -> Result<Vec<(String, String)>> {
    items
        .iter()
        .map(|s| s.split_once('=').map(|(k, v)| (k.trim().to_string(), v.trim().to_string())).ok_or_else(|| usage(format!("--set expects key=value, got {s:?}"))))
        .collect()
}

fn read_text(path: Option<&Path>) -> Result<String> {
    match path {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(String::new()),
    }
}

fn load_clips(dir: &Path) -> Result<Vec<Clip>> {
    read_dataset(dir).with_context(|| format!("loading clips from {}", dir.display()))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

// ---- gen ------------------------------------------------------------------

/// Generator settings (`key = value` config file).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub sprite_count: usize,
    pub tracks_per_scene: usize,
    pub object_bias: f64,
    pub snap_to_occluder: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            height: 64,
            width: 64,
            sprite_count: 3,
            tracks_per_scene: 48,
            object_bias: 0.8,
            snap_to_occluder: true,
            seed: 0,
        }
    }
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// A (labeled source) or B (unlabeled target, plus a labeled eval split).
    #[arg(long)]
    domain: Domain,
    #[arg(long)]
    clips: usize,
    /// Held-out labeled clips for domain B (default: same as --clips).
    #[arg(long)]
    eval_clips: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Config overrides, `key=value`.
    #[arg(long = "set")]
    set: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Replace existing output.
    #[arg(long)]
    force: bool,
}

fn domain_salt(d: Domain) -> u64 {
    match d {
        Domain::A => 0xa,
        Domain::B => 0xb,
    }
}

fn scene_for(cfg: &GenConfig, domain: Domain, seed: u64) -> Result<Clip> {
    let mut last = None;
    for attempt in 0..8u64 {
        let mut sc = SceneConfig::domain(domain, cfg.frames, cfg.height, cfg.width, mix(seed, attempt));
        sc.sprite_count = cfg.sprite_count;
        sc.tracks_per_scene = cfg.tracks_per_scene;
        sc.object_bias = cfg.object_bias;
        sc.snap_to_occluder = cfg.snap_to_occluder;
        match generate_scene(&sc) {
            Ok(s) => return Ok(Clip::labeled(&s)),
            Err(tapkit::synthdata::SynthError::InvalidConfig(m)) => return Err(usage(format!("scene config: {m}"))),
            Err(e) => last = Some(e),
        }
    }
    Err(anyhow!("scene generation failed: {}", last.expect("at least one attempt")))
}

pub fn gen(a: GenArgs) -> Result<()> {
    let mut overrides = parse_set(&a.set)?;
    if let Some(s) = a.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    let cfg: GenConfig = tapkit::kv::from_kv(&read_text(a.config.as_deref())?, &overrides).map_err(usage)?;
    if a.clips == 0 {
        return Err(usage("--clips must be positive"));
    }
    let splits = [a.out.join("train"), a.out.join("eval")];
    if splits.iter().any(|p| p.exists()) || a.out.join("manifest.json").exists() {
        if !a.force {
            bail!("{} already contains a dataset (use --force to replace it)", a.out.display());
        }
        for p in &splits {
            if p.exists() {
                std::fs::remove_dir_all(p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
    }
    let base = mix(cfg.seed, domain_salt(a.domain));
    for i in 0..a.clips {
        let clip = scene_for(&cfg, a.domain, mix(base, i as u64))?;
        let clip = match a.domain {
            Domain::A => clip,
            Domain::B => Clip { tracks: None, queries: None, ..clip },
        };
        write_clip(&a.out.join("train").join(format!("clip_{i:05}")), &clip)?;
    }
    let eval_clips = if a.domain == Domain::B { a.eval_clips.unwrap_or(a.clips) } else { 0 };
    let eval_base = mix(base, 0xe7a1);
    for i in 0..eval_clips {
        let clip = scene_for(&cfg, a.domain, mix(eval_base, i as u64))?;
        write_clip(&a.out.join("eval").join(format!("clip_{i:05}")), &clip)?;
    }
    let mut config = serde_json::to_value(&cfg)?;
    config["domain"] = serde_json::json!(format!("{:?}", a.domain));
    config["clips"] = serde_json::json!(a.clips);
    config["eval_clips"] = serde_json::json!(eval_clips);
    write_manifest(&a.out, "gen", Some(cfg.seed), config, &[])?;
    eprintln!("wrote {} training clips and {} eval clips to {}", a.clips, eval_clips, a.out.display());
    Ok(())
}

// ---- training ----------------------------------------------------------------

#[derive(Args, Debug, Clone)]
pub struct RunFlags {
    /// `key = value` training config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Config overrides, `key=value`.
    #[arg(long = "set")]
    set: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

impl RunFlags {
    fn resolve(&self, extra: &[(String, String)]) -> Result<TrainConfig> {
        let mut o = parse_set(&self.set)?;
        if let Some(s) = self.steps {
            o.push(("steps".into(), s.to_string()));
        }
        if let Some(s) = self.seed {
            o.push(("seed".into(), s.to_string()));
        }
        o.extend_from_slice(extra);
        Ok(TrainConfig::from_kv(&read_text(self.config.as_deref())?, &o)?)
    }
}

fn print_log(name: &str) -> impl FnMut(&LogRecord) + '_ {
    move |r: &LogRecord| {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut line = format!("[{name}] step {:>6} lr {:.2e} sup {} ssl {} kept {}", r.step, r.lr, f(r.sup_loss), f(r.ssl_loss), f(r.mask_rate));
        if let Some(e) = &r.eval {
            line.push_str(&format!(" | AJ {:.4} <d_avg {:.4} OA {:.4}", e.aj, e.delta_avg, e.oa));
        }
        eprintln!("{line}");
    }
}

/// Train one configuration into `out`, writing the resolved config, summary
/// and manifest next to the checkpoint.
fn run_one(name: &str, cfg: TrainConfig, init: Option<&Checkpoint>, data: &TrainData, out: &Path, inputs: &[&Path]) -> Result<TrainSummary> {
    std::fs::create_dir_all(out)?;
    if out.join("log.jsonl").exists() {
        std::fs::remove_file(out.join("log.jsonl"))?;
    }
    let mut trainer = Trainer::new(cfg, init.map(|c| c.params.clone()))?;
    std::fs::write(out.join("config.kv"), trainer.cfg.to_kv())?;
    write_manifest(out, name, Some(trainer.cfg.seed), serde_json::to_value(&trainer.cfg)?, inputs)?;
    let summary = trainer.train(data, Some(out), print_log(name))?;
    std::fs::write(out.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Labeled clip directory.
    #[arg(long)]
    labeled: PathBuf,
    /// Labeled held-out clips scored during training.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Start from these weights instead of a fresh init.
    #[arg(long)]
    init: Option<PathBuf>,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.run.resolve(&[("ssl_enabled".into(), "false".into())])?;
    let init = a.init.as_deref().map(load_ckpt).transpose()?;
    let data = TrainData {
        labeled: load_clips(&a.labeled)?,
        unlabeled: Vec::new(),
        eval: a.eval.as_deref().map(load_clips).transpose()?.unwrap_or_default(),
    };
    let mut inputs: Vec<&Path> = vec![&a.labeled];
    inputs.extend(a.eval.as_deref());
    inputs.extend(a.init.as_deref());
    let s = run_one("train", cfg, init.as_ref(), &data, &a.run.out, &inputs)?;
    eprintln!("done: {} steps, checkpoint {}", s.steps, s.checkpoint.map(|p| p.display().to_string()).unwrap_or_default());
    Ok(())
}

#[derive(Args, Debug, Clone)]
pub struct CoTrainFlags {
    /// Checkpoint from `train`.
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    labeled: PathBuf,
    #[arg(long)]
    unlabeled: PathBuf,
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Unlabeled clip length (frames) used for co-training.
    #[arg(long)]
    clip_frames: Option<usize>,
    /// Fraction of unlabeled clips to keep, selected by content hash.
    #[arg(long)]
    data_fraction: Option<f64>,
}

impl CoTrainFlags {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut o = Vec::new();
        if let Some(n) = self.clip_frames {
            o.push(("clip_frames".into(), n.to_string()));
        }
        if let Some(f) = self.data_fraction {
            o.push(("data_fraction".into(), f.to_string()));
        }
        o
    }

    fn load(&self, cfg: &TrainConfig) -> Result<(Checkpoint, TrainData)> {
        let init = load_ckpt(&self.init)?;
        let data = TrainData {
            labeled: load_clips(&self.labeled)?,
            unlabeled: select_fraction(load_clips(&self.unlabeled)?, cfg.data_fraction, 0),
            eval: self.eval.as_deref().map(load_clips).transpose()?.unwrap_or_default(),
        };
        Ok((init, data))
    }

    fn inputs(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = vec![&self.init, &self.labeled, &self.unlabeled];
        v.extend(self.eval.as_deref());
        v
    }
}

#[derive(Args, Debug)]
pub struct BootstrapArgs {
    #[command(flatten)]
    run: RunFlags,
    #[command(flatten)]
    data: CoTrainFlags,
    /// Named ablation(s); each runs separately. Default: base.
    #[arg(long = "ablation")]
    ablations: Vec<String>,
}

fn check_ablation(name: &str) -> Result<&'static str> {
    canonical_ablation(name).ok_or_else(|| {
        let known: Vec<&str> = ABLATIONS.iter().map(|a| a.0).collect();
        usage(format!("unknown ablation {name:?} (known: {})", known.join(", ")))
    })
}

pub fn bootstrap(a: BootstrapArgs) -> Result<()> {
    let names: Vec<&'static str> = if a.ablations.is_empty() {
        vec!["base"]
    } else {
        a.ablations.iter().map(|n| check_ablation(n)).collect::<Result<_>>()?
    };
    let base = a.run.resolve(&a.data.overrides())?;
    let (init, data) = a.data.load(&base)?;
    for name in &names {
        let mut cfg = base.clone();
        cfg.apply_ablation(name)?;
        let out = if names.len() == 1 { a.run.out.clone() } else { a.run.out.join(name) };
        let s = run_one(name, cfg, Some(&init), &data, &out, &a.data.inputs())?;
        if let Some(e) = s.eval {
            eprintln!("[{name}] final AJ {:.4} <d_avg {:.4} OA {:.4}", e.aj, e.delta_avg, e.oa);
        }
    }
    Ok(())
}

// ---- ablate -------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    run: RunFlags,
    #[command(flatten)]
    data: CoTrainFlags,
    /// Comma-separated arms: ablation names or `key=value` overrides
    /// (e.g. `clip_frames=2`). Default: every named ablation.
    #[arg(long, value_delimiter = ',')]
    ablations: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
}

#[derive(Debug, Serialize)]
struct ArmResult {
    arm: String,
    seed: u64,
    aj: f64,
    delta_avg: f64,
    oa: f64,
    sup_loss: Option<f64>,
    ssl_loss: Option<f64>,
}

#[derive(Debug, Serialize)]
struct ArmSummary {
    arm: String,
    seeds: usize,
    median_aj: f64,
    median_delta_avg: f64,
    median_oa: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    if a.data.eval.is_none() {
        return Err(usage("ablate needs --eval"));
    }
    let arms: Vec<String> = if a.ablations.is_empty() { ABLATIONS.iter().map(|x| x.0.to_string()).collect() } else { a.ablations.clone() };
    let base = a.run.resolve(&a.data.overrides())?;
    let mut configs = Vec::new();
    for arm in &arms {
        let mut cfg = base.clone();
        if let Some((k, v)) = arm.split_once('=') {
            cfg = TrainConfig::from_kv(&base.to_kv(), &[(k.to_string(), v.to_string())])?;
        } else {
            cfg.apply_ablation(check_ablation(arm)?)?;
        }
        configs.push((arm.replace(['=', '/'], "_"), cfg));
    }
    let (init, data) = a.data.load(&base)?;
    let mut rows = Vec::new();
    for (arm, cfg) in &configs {
        for &seed in &a.seeds {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let out = a.run.out.join(arm).join(format!("seed_{seed}"));
            let s = run_one(arm, cfg, Some(&init), &data, &out, &a.data.inputs())?;
            let e = s.eval.ok_or_else(|| anyhow!("no evaluation produced"))?;
            rows.push(ArmResult {
                arm: arm.clone(),
                seed,
                aj: e.aj,
                delta_avg: e.delta_avg,
                oa: e.oa,
                sup_loss: s.final_sup_loss,
                ssl_loss: s.final_ssl_loss,
            });
        }
    }
    let summary: Vec<ArmSummary> = configs
        .iter()
        .map(|(arm, _)| {
            let mine: Vec<&ArmResult> = rows.iter().filter(|r| &r.arm == arm).collect();
            let col = |f: fn(&ArmResult) -> f64| median(&mine.iter().map(|r| f(r)).collect::<Vec<_>>());
            ArmSummary {
                arm: arm.clone(),
                seeds: mine.len(),
                median_aj: col(|r| r.aj),
                median_delta_avg: col(|r| r.delta_avg),
                median_oa: col(|r| r.oa),
            }
        })
        .collect();
    let mut csv = String::from("arm,seed,aj,delta_avg,oa\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{}\n", r.arm, r.seed, r.aj, r.delta_avg, r.oa));
    }
    std::fs::write(a.run.out.join("results.csv"), csv)?;
    std::fs::write(a.run.out.join("summary.json"), serde_json::to_vec_pretty(&serde_json::json!({"runs": rows, "arms": summary}))?)?;
    write_manifest(&a.run.out, "ablate", None, serde_json::json!({"arms": arms, "seeds": a.seeds, "base": base}), &a.data.inputs())?;
    say!("{:<24} {:>5} {:>9} {:>9} {:>9}", "arm", "seeds", "AJ", "<d_avg", "OA");
    for s in &summary {
        say!("{:<24} {:>5} {:>9.4} {:>9.4} {:>9.4}", s.arm, s.seeds, s.median_aj, s.median_delta_avg, s.median_oa);
    }
    Ok(())
}

// ---- eval ---------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled clip directory.
    #[arg(long)]
    data: PathBuf,
    /// strided or q_first.
    #[arg(long, default_value = "strided")]
    mode: QueryMode,
    /// Queries per forward pass.
    #[arg(long, default_value_t = 64)]
    chunk: usize,
    /// Write metrics.json, per_video.csv and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ck = load_ckpt(&a.checkpoint)?;
    let clips = load_clips(&a.data)?;
    let (report, per) = evaltap::evaluate(&ck.params, &clips, a.mode, a.chunk)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("metrics.json"), &json)?;
        std::fs::write(out.join("per_video.csv"), metrics_csv(&per))?;
        write_manifest(out, "eval", None, serde_json::json!({"mode": a.mode, "chunk": a.chunk}), &[&a.checkpoint, &a.data])?;
    }
    say!("{json}");
    Ok(())
}

// ---- render -------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One clip directory.
    #[arg(long)]
    clip: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Tail length in frames.
    #[arg(long, default_value_t = 6)]
    tail: usize,
    #[arg(long, default_value_t = 16)]
    max_tracks: usize,
}

/// Render queries: first-visible points of the clip's tracks, or a grid on
/// frame 0 for unlabeled clips.
fn render_queries(clip: &Clip, max: usize) -> Vec<QueryPoint> {
    let (h, w) = (clip.video.height(), clip.video.width());
    match &clip.tracks {
        Some(tracks) => tracks.iter().flat_map(|t| evaltap::extract_queries(t, QueryMode::QFirst)).take(max).collect(),
        None => {
            let side = (max as f64).sqrt().floor().max(1.0) as usize;
            let mut qs = Vec::new();
            for i in 0..side {
                for j in 0..side {
                    let x = (j as f64 + 0.5) / side as f64 * (w - 1) as f64;
                    let y = (i as f64 + 0.5) / side as f64 * (h - 1) as f64;
                    qs.push(QueryPoint::new(x, y, 0));
                }
            }
            qs
        }
    }
}

pub fn render(a: RenderArgs) -> Result<()> {
    let ck = load_ckpt(&a.checkpoint)?;
    let clip = read_clip(&a.clip).with_context(|| format!("reading clip {}", a.clip.display()))?;
    let queries = render_queries(&clip, a.max_tracks);
    let preds = predict_chunked(&ck.params, &clip.video, &queries, 64)?;
    let last: Vec<_> = preds.iter().map(|p| p.last().clone()).collect();
    let frames = render_overlay(&clip.video, &last, a.tail);
    std::fs::create_dir_all(&a.out)?;
    let (h, w) = (clip.video.height() as u32, clip.video.width() as u32);
    for (t, f) in frames.into_iter().enumerate() {
        let img = image::RgbImage::from_raw(w, h, f).ok_or_else(|| anyhow!("frame buffer size mismatch"))?;
        let p = a.out.join(format!("frame_{t:04}.png"));
        img.save(&p).with_context(|| format!("writing {}", p.display()))?;
    }
    std::fs::write(a.out.join("predictions.json"), serde_json::to_vec(&serde_json::json!({"queries": queries, "tracks": last}))?)?;
    write_manifest(&a.out, "render", None, serde_json::json!({"tail": a.tail, "max_tracks": a.max_tracks}), &[&a.checkpoint, &a.clip])?;
    eprintln!("wrote {} frames to {}", clip.video.frames(), a.out.display());
    Ok(())
}

// ---- gradcheck ------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// op, model, loss, or all.
    #[arg(long, default_value = "all")]
    scope: Scope,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write report.json and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Deliberately corrupt a backward rule (harness self-test).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let fault = match a.inject_fault.as_deref() {
        None => None,
        Some("conv-kernel-grad") => Some(Fault::ConvKernelGrad),
        Some(other) => return Err(usage(format!("unknown fault {other:?}"))),
    };
    let start = std::time::Instant::now();
    let reports = verify::run(a.scope, a.seed, fault)?;
    say!("{:<28} {:>8} {:>12}  status", "check", "coords", "max rel err");
    for r in &reports {
        say!("{:<28} {:>8} {:>12.3e}  {}", r.name, r.coordinates, r.max_rel_err, if r.passed { "ok" } else { "FAIL" });
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    say!("{} checks, {} failed, {:.1}s", reports.len(), failed.len(), start.elapsed().as_secs_f64());
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("report.json"), serde_json::to_vec_pretty(&reports)?)?;
        write_manifest(out, "gradcheck", Some(a.seed), serde_json::json!({"scope": a.scope, "fault": a.inject_fault}), &[])?;
    }
    if !failed.is_empty() {
        return Err(anyhow!(VerificationFailed(format!("gradient check failed: {}", failed.join(", ")))));
    }
    Ok(())
}
