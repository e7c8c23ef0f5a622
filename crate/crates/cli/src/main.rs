use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use dpi_core::corrector::{initial_condition, make_pairs, train_crt, ConditionSource, Corrector, HoldCondition, IdentityCorrector};
use dpi_core::dataset::{gaussian_images, toy_faces};
use dpi_core::degradation::{degrade_stages, DegradationConfig, DownsampleMode, SevereRanges, Stage};
use dpi_core::denoiser::{train_tiny_denoiser, Denoiser, GaussianOracleDenoiser, TinyDenoiser};
use dpi_core::io::{dump_trace, load_crt, load_denoiser, read_config, read_pnm, save_crt, save_denoiser, write_manifest, write_pnm};
use dpi_core::masks::make_fixed_mask;
use dpi_core::metrics::MetricReport;
use dpi_core::rng::{Domain, RngStreams};
use dpi_core::sampler::{run, ConditionUpdate, DpiConfig, SamplerKind, SigmaForm};
use dpi_core::selftest::{selftest, selftest_with_fault};
use dpi_core::train::{losses_to_csv, TrainConfig};
use dpi_core::{DpiError, ImageTensor, NoiseSchedule, Result};

const MODULE: &str = "cli";

#[derive(Parser)]
#[command(name = "dpi", version, about = "Diffusion prior interpolation for face super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize degraded images with the blur/downsample/noise/JPEG pipeline.
    Degrade(DegradeArgs),
    /// Write a procedurally generated training corpus.
    GenData(GenDataArgs),
    /// Train the tiny noise-prediction U-Net.
    TrainDenoiser(TrainArgs),
    /// Train the condition corrector.
    TrainCrt(TrainCrtArgs),
    /// Super-resolve a low-resolution image with two-stage masked sampling.
    Restore(RestoreArgs),
    /// PSNR, SSIM and grid MSE over image pairs.
    Eval(EvalArgs),
    /// Run the built-in invariant and oracle suites.
    Selftest(SelftestArgs),
}

/// Resolved `key=value` settings: defaults, then config file, then flags.
struct Settings {
    command: &'static str,
    map: BTreeMap<String, String>,
    order: Vec<&'static str>,
}

impl Settings {
    fn resolve(
        command: &'static str,
        defaults: &[(&'static str, &str)],
        config: Option<&Path>,
        flags: Vec<(&'static str, Option<String>)>,
    ) -> Result<Self> {
        let mut map: BTreeMap<String, String> = defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        if let Some(path) = config {
            for (k, v) in read_config(path)? {
                if k == "command" || k.starts_with("output.") {
                    continue;
                }
                if !map.contains_key(&k) {
                    return Err(DpiError::param(MODULE, format!("unknown config key {k:?} for {command}")));
                }
                map.insert(k, v);
            }
        }
        for (k, v) in flags {
            if let Some(v) = v {
                map.insert(k.to_string(), v);
            }
        }
        Ok(Settings { command, map, order: defaults.iter().map(|(k, _)| *k).collect() })
    }

    fn str(&self, key: &str) -> &str {
        &self.map[key]
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.str(key);
        v.parse().map_err(|_| DpiError::param(MODULE, format!("cannot parse {key} = {v:?}")))
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        let v = self.str(key);
        if v.is_empty() {
            return Err(DpiError::param(MODULE, format!("--{} is required", key.replace('_', "-"))));
        }
        Ok(PathBuf::from(v))
    }

    fn manifest(&self, outputs: &[PathBuf]) -> Vec<(String, String)> {
        let mut e = vec![("command".to_string(), self.command.to_string())];
        e.extend(self.order.iter().map(|k| (k.to_string(), self.map[*k].clone())));
        e.extend(outputs.iter().enumerate().map(|(i, p)| (format!("output.{i}"), p.display().to_string())));
        e
    }
}

fn flag<T: ToString>(key: &'static str, v: &Option<T>) -> (&'static str, Option<String>) {
    (key, v.as_ref().map(ToString::to_string))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DpiError::io(dir.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| DpiError::io(path.display().to_string(), e))
}

/// A single image file or every `.pgm`/`.ppm` in a directory, sorted by name.
fn list_images(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(DpiError::data(MODULE, format!("input {} does not exist", input.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| DpiError::io(input.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(DpiError::data(MODULE, format!("no PGM/PPM images in {}", input.display())));
    }
    Ok(files)
}

fn load_images(input: &Path) -> Result<(Vec<PathBuf>, Vec<ImageTensor>)> {
    let files = list_images(input)?;
    let images = files.iter().map(|p| read_pnm(p)).collect::<Result<Vec<_>>>()?;
    Ok((files, images))
}

fn image_name(stem: &str, img: &ImageTensor) -> String {
    format!("{stem}.{}", if img.channels() == 3 { "ppm" } else { "pgm" })
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Args)]
struct DegradeArgs {
    /// Image file or directory of PGM/PPM images.
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    /// key=value file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    blur_ksize: Option<usize>,
    #[arg(long)]
    blur_sigma: Option<f64>,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    jpeg_quality: Option<u8>,
    /// average or bicubic.
    #[arg(long)]
    downsample: Option<String>,
    /// Draw each image's parameters from the severe ranges.
    #[arg(long)]
    severe: Option<bool>,
    /// final (upsampled back) or lr (low-resolution JPEG stage).
    #[arg(long)]
    output: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_downsample(s: &str) -> Result<DownsampleMode> {
    match s {
        "average" => Ok(DownsampleMode::Average),
        "bicubic" => Ok(DownsampleMode::Bicubic),
        _ => Err(DpiError::param(MODULE, format!("downsample must be average or bicubic, got {s:?}"))),
    }
}

fn cmd_degrade(a: &DegradeArgs) -> Result<()> {
    let s = Settings::resolve(
        "degrade",
        &[
            ("input", ""),
            ("out_dir", ""),
            ("blur_ksize", "1"),
            ("blur_sigma", "0.000001"),
            ("scale", "1"),
            ("noise_sigma", "0"),
            ("jpeg_quality", "100"),
            ("downsample", "average"),
            ("severe", "false"),
            ("output", "final"),
            ("seed", "0"),
        ],
        a.config.as_deref(),
        vec![
            flag("input", &a.input),
            flag("out_dir", &a.out_dir),
            flag("blur_ksize", &a.blur_ksize),
            flag("blur_sigma", &a.blur_sigma),
            flag("scale", &a.scale),
            flag("noise_sigma", &a.noise_sigma),
            flag("jpeg_quality", &a.jpeg_quality),
            flag("downsample", &a.downsample),
            flag("severe", &a.severe),
            flag("output", &a.output),
            flag("seed", &a.seed),
        ],
    )?;
    let base = DegradationConfig {
        blur_ksize: s.get("blur_ksize")?,
        blur_sigma: s.get("blur_sigma")?,
        scale: s.get("scale")?,
        noise_sigma: s.get("noise_sigma")?,
        jpeg_quality: s.get("jpeg_quality")?,
        downsample: parse_downsample(s.str("downsample"))?,
        seed: s.get("seed")?,
    };
    let severe: bool = s.get("severe")?;
    let stage = match s.str("output") {
        "final" => Stage::Upsample,
        "lr" => Stage::Jpeg,
        o => return Err(DpiError::param(MODULE, format!("output must be final or lr, got {o:?}"))),
    };
    base.validate()?;
    let (files, images) = load_images(&s.path("input")?)?;
    let out_dir = s.path("out_dir")?;
    let streams = RngStreams::new(base.seed);
    let mut results = Vec::with_capacity(images.len());
    for (i, (file, img)) in files.iter().zip(&images).enumerate() {
        let cfg = if severe {
            let mut rng = streams.stream(Domain::Custom(100), i as u64);
            SevereRanges::default().sample(&mut rng, Some((img.height(), img.width())), base.seed.wrapping_add(i as u64))?
        } else {
            DegradationConfig { seed: base.seed.wrapping_add(i as u64), ..base.clone() }
        };
        let out = degrade_stages(img, &cfg)?.into_iter().find(|(st, _)| *st == stage).expect("stage present").1;
        let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        results.push((out_dir.join(image_name(&stem, &out)), out));
    }
    create_dir(&out_dir)?;
    for (path, img) in &results {
        write_pnm(path, img)?;
    }
    let outputs: Vec<PathBuf> = results.into_iter().map(|(p, _)| p).collect();
    write_manifest(&out_dir.join("manifest.txt"), &s.manifest(&outputs))?;
    println!("wrote {} images to {}", outputs.len(), out_dir.display());
    Ok(())
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// faces or gaussian.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let s = Settings::resolve(
        "gen-data",
        &[("out_dir", ""), ("kind", "faces"), ("count", "100"), ("size", "32"), ("seed", "0")],
        a.config.as_deref(),
        vec![flag("out_dir", &a.out_dir), flag("kind", &a.kind), flag("count", &a.count), flag("size", &a.size), flag("seed", &a.seed)],
    )?;
    let (n, size, seed): (usize, usize, u64) = (s.get("count")?, s.get("size")?, s.get("seed")?);
    if n == 0 || size == 0 {
        return Err(DpiError::param(MODULE, "count and size must be positive"));
    }
    let images = match s.str("kind") {
        "faces" => toy_faces(n, size, seed),
        "gaussian" => {
            let mu = ImageTensor::from_fn(size, size, 1, |i, j, _| 0.5 * ((i + j) as f64 / (2 * size) as f64) - 0.25);
            gaussian_images(n, &mu, &ImageTensor::filled(size, size, 1, 0.04), seed).into_iter().map(|x| x.clamp(-1.0, 1.0)).collect()
        }
        k => return Err(DpiError::param(MODULE, format!("kind must be faces or gaussian, got {k:?}"))),
    };
    let out_dir = s.path("out_dir")?;
    create_dir(&out_dir)?;
    let mut outputs = Vec::with_capacity(n);
    for (i, img) in images.iter().enumerate() {
        let p = out_dir.join(format!("img_{i:05}.pgm"));
        write_pnm(&p, img)?;
        outputs.push(p);
    }
    write_manifest(&out_dir.join("manifest.txt"), &s.manifest(&outputs))?;
    println!("wrote {n} images to {}", out_dir.display());
    Ok(())
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of training images.
    #[arg(long)]
    data: Option<String>,
    /// Checkpoint path; the loss CSV and manifest are written next to it.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    ema_decay: Option<f64>,
    #[arg(long)]
    base: Option<usize>,
    /// ema or raw.
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

const TRAIN_DEFAULTS: &[(&str, &str)] = &[
    ("data", ""),
    ("out", ""),
    ("lr", "0.0001"),
    ("batch_size", "8"),
    ("epochs", "10"),
    ("ema_decay", "0.9999"),
    ("base", "32"),
    ("weights", "ema"),
    ("seed", "0"),
];

impl TrainArgs {
    fn flags(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            flag("data", &self.data),
            flag("out", &self.out),
            flag("lr", &self.lr),
            flag("batch_size", &self.batch_size),
            flag("epochs", &self.epochs),
            flag("ema_decay", &self.ema_decay),
            flag("base", &self.base),
            flag("weights", &self.weights),
            flag("seed", &self.seed),
        ]
    }
}

fn train_config(s: &Settings) -> Result<(TrainConfig, bool)> {
    let cfg = TrainConfig {
        lr: s.get("lr")?,
        batch_size: s.get("batch_size")?,
        epochs: s.get("epochs")?,
        ema_decay: s.get("ema_decay")?,
        seed: s.get("seed")?,
        base: s.get("base")?,
    };
    cfg.validate()?;
    let ema = match s.str("weights") {
        "ema" => true,
        "raw" => false,
        w => return Err(DpiError::param(MODULE, format!("weights must be ema or raw, got {w:?}"))),
    };
    Ok((cfg, ema))
}

fn cmd_train_denoiser(a: &TrainArgs) -> Result<()> {
    let s = Settings::resolve("train-denoiser", TRAIN_DEFAULTS, a.config.as_deref(), a.flags())?;
    let (cfg, ema) = train_config(&s)?;
    let (_, images) = load_images(&s.path("data")?)?;
    let out = s.path("out")?;
    let sched = NoiseSchedule::default_linear();
    let res = train_tiny_denoiser(&images, &sched, &cfg)?;
    let net = if ema { res.ema.clone() } else { res.raw.clone() };
    save_denoiser(&out, &TinyDenoiser::from_net(net)?, &[("weights", s.str("weights").to_string())])?;
    let csv = sibling(&out, ".losses.csv");
    write_text(&csv, &losses_to_csv(&res.losses))?;
    write_manifest(&sibling(&out, ".manifest"), &s.manifest(&[out.clone(), csv]))?;
    println!("trained on {} images; final epoch loss {:.5}", images.len(), res.epoch_means().last().copied().unwrap_or(f64::NAN));
    Ok(())
}

#[derive(Args)]
struct TrainCrtArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Grid stride of the fixed condition mask.
    #[arg(long)]
    k: Option<usize>,
    /// Bicubic downsampling factor used to synthesize conditions.
    #[arg(long)]
    scale: Option<usize>,
}

fn cmd_train_crt(a: &TrainCrtArgs) -> Result<()> {
    let mut defaults = TRAIN_DEFAULTS.to_vec();
    defaults.extend([("k", "2"), ("scale", "4")]);
    let mut flags = a.train.flags();
    flags.extend([flag("k", &a.k), flag("scale", &a.scale)]);
    let s = Settings::resolve("train-crt", &defaults, a.train.config.as_deref(), flags)?;
    let (cfg, ema) = train_config(&s)?;
    let (_, images) = load_images(&s.path("data")?)?;
    let out = s.path("out")?;
    let first = &images[0];
    let fm = make_fixed_mask(first.height(), first.width(), s.get("k")?)?;
    let pairs = make_pairs(&images, &ConditionSource::Bicubic { scale: s.get("scale")? }, &fm)?;
    let sched = NoiseSchedule::default_linear();
    let res = train_crt(&pairs, &fm, &sched, &cfg)?;
    let model = if ema { &res.ema } else { &res.raw };
    save_crt(&out, model, &[("k", s.str("k").to_string()), ("weights", s.str("weights").to_string())])?;
    let csv = sibling(&out, ".losses.csv");
    write_text(&csv, &losses_to_csv(&res.losses))?;
    write_manifest(&sibling(&out, ".manifest"), &s.manifest(&[out.clone(), csv]))?;
    println!("trained corrector on {} pairs; Omega range [{:.4}, {:.4}]", pairs.len(), res.omega_range.0, res.omega_range.1);
    Ok(())
}

#[derive(Args)]
struct RestoreArgs {
    /// Low-resolution input image.
    #[arg(long)]
    input: Option<String>,
    /// Output image path; the manifest is written next to it.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Denoiser checkpoint, or oracle:<dir> for the Gaussian oracle fitted to a directory.
    #[arg(long)]
    denoiser: Option<String>,
    /// Corrector checkpoint, identity or hold.
    #[arg(long)]
    crt: Option<String>,
    /// Upscaling factor from the input to the output.
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    /// ancestral or ddim.
    #[arg(long)]
    sampler: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    /// printed or canonical.
    #[arg(long)]
    sigma_form: Option<String>,
    /// aligned or literal.
    #[arg(long)]
    condition_update: Option<String>,
    #[arg(long)]
    clip_x0: Option<bool>,
    /// Directory for per-step snapshots.
    #[arg(long)]
    trace: Option<String>,
    #[arg(long)]
    trace_stride: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn load_denoiser_spec(spec: &str) -> Result<Box<dyn Denoiser>> {
    if let Some(dir) = spec.strip_prefix("oracle:") {
        let (_, images) = load_images(Path::new(dir))?;
        return Ok(Box::new(GaussianOracleDenoiser::fit_moments(&images, 1e-4, NoiseSchedule::default_linear())?));
    }
    if spec.is_empty() {
        return Err(DpiError::param(MODULE, "--denoiser is required"));
    }
    Ok(Box::new(load_denoiser(Path::new(spec))?))
}

fn load_corrector_spec(spec: &str) -> Result<Box<dyn Corrector>> {
    match spec {
        "identity" => Ok(Box::new(IdentityCorrector)),
        "hold" => Ok(Box::new(HoldCondition)),
        path => Ok(Box::new(load_crt(Path::new(path))?)),
    }
}

fn cmd_restore(a: &RestoreArgs) -> Result<()> {
    let s = Settings::resolve(
        "restore",
        &[
            ("input", ""),
            ("out", ""),
            ("denoiser", ""),
            ("crt", "hold"),
            ("scale", "4"),
            ("tau", "300"),
            ("s", "1.2"),
            ("omega", "750"),
            ("k", "2"),
            ("sampler", "ancestral"),
            ("steps", "1000"),
            ("eta", "0.1"),
            ("sigma_form", "canonical"),
            ("condition_update", "aligned"),
            ("clip_x0", "true"),
            ("trace", ""),
            ("trace_stride", "1"),
            ("seed", "0"),
        ],
        a.config.as_deref(),
        vec![
            flag("input", &a.input),
            flag("out", &a.out),
            flag("denoiser", &a.denoiser),
            flag("crt", &a.crt),
            flag("scale", &a.scale),
            flag("tau", &a.tau),
            flag("s", &a.s),
            flag("omega", &a.omega),
            flag("k", &a.k),
            flag("sampler", &a.sampler),
            flag("steps", &a.steps),
            flag("eta", &a.eta),
            flag("sigma_form", &a.sigma_form),
            flag("condition_update", &a.condition_update),
            flag("clip_x0", &a.clip_x0),
            flag("trace", &a.trace),
            flag("trace_stride", &a.trace_stride),
            flag("seed", &a.seed),
        ],
    )?;
    let sampler = match s.str("sampler") {
        "ancestral" => SamplerKind::Ancestral,
        "ddim" | "implicit" => SamplerKind::Implicit,
        o => return Err(DpiError::param(MODULE, format!("sampler must be ancestral or ddim, got {o:?}"))),
    };
    let sigma_form = match s.str("sigma_form") {
        "printed" => SigmaForm::Printed,
        "canonical" => SigmaForm::Canonical,
        o => return Err(DpiError::param(MODULE, format!("sigma_form must be printed or canonical, got {o:?}"))),
    };
    let condition_update = match s.str("condition_update") {
        "aligned" => ConditionUpdate::Aligned,
        "literal" => ConditionUpdate::Literal,
        o => return Err(DpiError::param(MODULE, format!("condition_update must be aligned or literal, got {o:?}"))),
    };
    let trace_dir = s.str("trace").to_string();
    let cfg = DpiConfig {
        tau: s.get("tau")?,
        s: s.get("s")?,
        omega: s.get("omega")?,
        k: s.get("k")?,
        sampler,
        steps: s.get("steps")?,
        eta: s.get("eta")?,
        seed: s.get("seed")?,
        sigma_form,
        condition_update,
        clip_x0: s.get("clip_x0")?,
        trace_stride: if trace_dir.is_empty() { 0 } else { s.get::<usize>("trace_stride")?.max(1) },
    };
    let sched = NoiseSchedule::default_linear();
    cfg.validate(&sched)?;
    let lr = read_pnm(&s.path("input")?)?;
    let out = s.path("out")?;
    let den = load_denoiser_spec(s.str("denoiser"))?;
    let crt = load_corrector_spec(s.str("crt"))?;
    let scale: usize = s.get("scale")?;
    let fm = make_fixed_mask(lr.height() * scale, lr.width() * scale, cfg.k)?;
    let y = initial_condition(&lr, &fm)?;
    let res = run(den.as_ref(), crt.as_ref(), &y, &cfg, &sched)?;
    write_pnm(&out, &res.image)?;
    let mut outputs = vec![out.clone()];
    if let Some(trace) = &res.trace {
        let dir = PathBuf::from(&trace_dir);
        dump_trace(&dir, trace)?;
        outputs.push(dir);
    }
    write_manifest(&sibling(&out, ".manifest"), &s.manifest(&outputs))?;
    let st = &res.stats;
    println!(
        "restored {}x{} -> {}x{}: {} FCM steps, {} RACM steps, w in [{:.4}, {:.4}], {} denoiser calls",
        lr.height(),
        lr.width(),
        res.image.height(),
        res.image.width(),
        st.fcm_steps,
        st.racm_steps,
        if st.racm_steps > 0 { st.w_min } else { 0.0 },
        if st.racm_steps > 0 { st.w_max } else { 0.0 },
        st.denoiser_calls
    );
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    /// Restored image or directory.
    #[arg(long)]
    sr: PathBuf,
    /// Ground-truth image or directory with matching file names.
    #[arg(long)]
    gt: PathBuf,
    /// Grid stride for grid MSE.
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// CSV report path; prints a table when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let sr_files = list_images(&a.sr)?;
    let pairs: Vec<(PathBuf, PathBuf)> = if a.gt.is_dir() {
        sr_files.iter().map(|p| (p.clone(), a.gt.join(p.file_name().expect("file name")))).collect()
    } else {
        vec![(sr_files[0].clone(), a.gt.clone())]
    };
    let mut report = MetricReport::default();
    for (sr_path, gt_path) in &pairs {
        if !gt_path.is_file() {
            return Err(DpiError::data(MODULE, format!("no ground truth {} for {}", gt_path.display(), sr_path.display())));
        }
        let (sr, gt) = (read_pnm(sr_path)?, read_pnm(gt_path)?);
        let fm = make_fixed_mask(gt.height(), gt.width(), a.k)?;
        let name = sr_path.file_name().and_then(|n| n.to_str()).unwrap_or("image");
        report.push(name, &sr, &gt, &fm)?;
    }
    match &a.out {
        Some(p) => write_text(p, &report.to_csv())?,
        None => print!("{}", report.to_text()),
    }
    Ok(())
}

#[derive(Args)]
struct SelftestArgs {
    /// Perturb one posterior coefficient to confirm the suites catch it.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

fn cmd_selftest(a: &SelftestArgs) -> Result<bool> {
    let results = if a.inject_fault { selftest_with_fault() } else { selftest() };
    for r in &results {
        println!("{}", r.line());
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} of {} suites passed", results.len() - failed, results.len());
    Ok(failed == 0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let res = match &cli.command {
        Command::Degrade(a) => cmd_degrade(a).map(|_| true),
        Command::GenData(a) => cmd_gen_data(a).map(|_| true),
        Command::TrainDenoiser(a) => cmd_train_denoiser(a).map(|_| true),
        Command::TrainCrt(a) => cmd_train_crt(a).map(|_| true),
        Command::Restore(a) => cmd_restore(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Selftest(a) => cmd_selftest(a),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
