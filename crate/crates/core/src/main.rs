//! Command-line front end: reproducible experiments over the library, with
//! one JSON config per run, flag overrides, and provenance manifests in
//! every output directory.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use dtl::config::{EmbedKind, LoadedConfig, ProbeKind, RunConfig};
use dtl::dataset::{DatasetRecord, FilterQuery, LightFilter};
use dtl::denoiser::DenoiserModel;
use dtl::diffusion::ddim_sample;
use dtl::embedding::invert_ode;
use dtl::error::{Error, Result};
use dtl::manifest::Manifest;
use dtl::sample::{stack, unstack, Sample};
use dtl::schedule::NoiseSchedule;
use dtl::tensor_io::{self, fmt_f64};
use dtl::trajectory::{
    choose_side, fit_window, frontalize, save_fit, slope_cosine_matrix, traverse, CosineMatrix,
    FittedWindow, LadderSpec, TraversalConfig, TraversalResult, TraversalStatus,
};
use dtl::RngStream;

#[derive(Parser)]
#[command(name = "dtl", version, about = "Desk-scale diffusion lab")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override; beats the DTL_SEED environment variable and the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainTarget {
    Denoiser,
    Embedder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EmbedMode {
    Ode,
    Net,
}

#[derive(Subcommand)]
enum Command {
    /// Train the noise-prediction network (or the latent embedder).
    Train {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = TrainTarget::Denoiser)]
        target: TrainTarget,
    },
    /// Draw samples with the eta-generalized reverse process.
    Sample {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
        #[arg(long, default_value_t = 1)]
        n: usize,
    },
    /// Compute latent encodings for a batch of inputs.
    Embed {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: EmbedMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rotate a source record along fitted latent trajectories.
    Rotate {
        #[arg(long)]
        source_id: String,
        #[arg(long, allow_hyphen_values = true)]
        target_yaw: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cosine-similarity analysis of fitted trajectory slopes.
    AnalyzeSlopes {
        /// Attributes whose value combinations define the groups.
        #[arg(long, value_delimiter = ',')]
        group_by: Vec<String>,
        /// Also compare fits over sliding yaw windows.
        #[arg(long)]
        windows: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transfer Lab color statistics from a source image onto a target.
    Colorfix {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dataset annotation statistics: yaw histogram and class centroids.
    Stats {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        bin_width: f64,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidSpec(_) | Error::Json(_) => 2,
        Error::Io { .. }
        | Error::Parse { .. }
        | Error::EmptyInput(_)
        | Error::ShapeMismatch { .. } => 3,
        Error::NonFinite(_)
        | Error::InvalidEta { .. }
        | Error::TimestepOutOfRange { .. }
        | Error::DegenerateFit(_) => 4,
    }
}

fn run(cli: Cli) -> Result<()> {
    let loaded = match &cli.config {
        Some(path) => LoadedConfig::load(path)?,
        None => LoadedConfig::empty(),
    };
    let seed = resolve_seed(cli.seed, loaded.config.seed)?;
    match cli.command {
        Command::Train { out, target } => cmd_train(&loaded, seed, &out, target),
        Command::Sample { out, eta, n } => cmd_sample(&loaded, seed, &out, eta, n),
        Command::Embed { input, mode, out } => cmd_embed(&loaded, &input, mode, &out),
        Command::Rotate {
            source_id,
            target_yaw,
            out,
        } => cmd_rotate(&loaded, &source_id, target_yaw, &out),
        Command::AnalyzeSlopes {
            group_by,
            windows,
            out,
        } => cmd_analyze_slopes(&loaded, &group_by, windows, &out),
        Command::Colorfix {
            target,
            source,
            mask,
            out,
        } => cmd_colorfix(&loaded, &target, &source, mask.as_deref(), &out),
        Command::Stats { out, bin_width } => cmd_stats(&loaded, &out, bin_width),
    }
}

fn resolve_seed(flag: Option<u64>, config_seed: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("DTL_SEED") {
        Ok(raw) => raw
            .parse()
            .map_err(|_| Error::InvalidSpec(format!("DTL_SEED must be an integer, got '{raw}'"))),
        Err(_) => Ok(config_seed),
    }
}

fn ensure_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))
}

fn base_manifest(loaded: &LoadedConfig, command: &str) -> Result<Manifest> {
    let mut m = Manifest::new(command, loaded.sha256.clone());
    for (path, digest) in loaded.config.input_digests()? {
        m.inputs.insert(path, digest);
    }
    Ok(m)
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut body = String::with_capacity(rows.len() * 32 + header.len() + 1);
    body.push_str(header);
    body.push('\n');
    for r in rows {
        body.push_str(r);
        body.push('\n');
    }
    dtl::manifest::atomic_write(path, body.as_bytes())
}

// --- train ---

fn cmd_train(loaded: &LoadedConfig, seed: u64, out: &Path, target: TrainTarget) -> Result<()> {
    let cfg = &loaded.config;
    let sched = cfg.schedule()?;
    let train_cfg = cfg.train_config(seed)?;
    ensure_out_dir(out)?;

    let (params, losses) = match target {
        TrainTarget::Denoiser => {
            let arch = cfg.mlp_arch()?;
            let sampler = cfg.data_sampler()?;
            let outcome = dtl::denoiser::train_denoiser(&*sampler, &sched, arch, &train_cfg)?;
            (outcome.params, outcome.losses)
        }
        TrainTarget::Embedder => {
            let model = cfg.denoiser_model()?;
            let section = cfg
                .embedder
                .clone()
                .unwrap_or_else(|| serde_json::from_str("{}").expect("embedder defaults"));
            let outcome = dtl::embedding::train_embedder(
                &model,
                &sched,
                section.hidden,
                &train_cfg,
                section.n_pairs,
            )?;
            (outcome.params, outcome.losses)
        }
    };

    params.save_dir(out.join("model"))?;
    let rows: Vec<String> = losses
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{},{}", i, fmt_f64(*l)))
        .collect();
    write_csv(&out.join("loss.csv"), "step,loss", &rows)?;

    let mut manifest = base_manifest(loaded, "train")?;
    manifest.record_arg("seed", seed);
    manifest.record_arg("target", format!("{target:?}").to_lowercase());
    manifest.record_arg("steps", losses.len());
    manifest.write_to_dir(out)
}

// --- sample ---

fn cmd_sample(loaded: &LoadedConfig, seed: u64, out: &Path, eta: f64, n: usize) -> Result<()> {
    let cfg = &loaded.config;
    let sched = cfg.schedule()?;
    let model = cfg.denoiser_model()?;
    validate_eta(&sched, eta)?;
    if n == 0 {
        return Err(Error::InvalidSpec("sample count must be positive".into()));
    }
    ensure_out_dir(out)?;

    let mut rng = RngStream::new(seed);
    let d = model.dim();
    let mut draws = Vec::with_capacity(n);
    for _ in 0..n {
        let latent = rng.normal_sample(&[d]);
        draws.push(ddim_sample(&model, &sched, &latent, eta, &mut rng)?);
    }
    tensor_io::write_tensor(out.join("samples.dtl"), &stack(&draws)?)?;

    let mut manifest = base_manifest(loaded, "sample")?;
    manifest.record_arg("seed", seed);
    manifest.record_arg("eta", eta);
    manifest.record_arg("n", n);
    manifest.write_to_dir(out)
}

/// The per-step noise scale must satisfy `sigma_t^2 <= 1 - alpha_bar[t-1]`
/// at every step of this schedule.
fn validate_eta(sched: &NoiseSchedule, eta: f64) -> Result<()> {
    if !(eta >= 0.0) {
        return Err(Error::InvalidSpec(format!("eta must be >= 0, got {eta}")));
    }
    for t in 1..=sched.timesteps() {
        if eta * sched.beta_tilde(t) > 1.0 - sched.alpha_bar(t - 1) {
            return Err(Error::InvalidEta {
                eta,
                t,
                kind: sched.kind().to_string(),
            });
        }
    }
    Ok(())
}

// --- embed ---

fn cmd_embed(loaded: &LoadedConfig, input: &Path, mode: EmbedMode, out: &Path) -> Result<()> {
    let cfg = &loaded.config;
    let sched = cfg.schedule()?;
    let model = cfg.denoiser_model()?;
    let batch = tensor_io::read_tensor(input)?;
    let probes = if batch.shape().len() == 1 {
        vec![batch.clone()]
    } else {
        unstack(&batch)?
    };

    let mut embed: Box<dyn FnMut(&Sample) -> Result<Sample>> = match mode {
        EmbedMode::Ode => {
            let m = model.clone();
            let s = sched.clone();
            Box::new(move |p: &Sample| invert_ode(&m, &s, p))
        }
        EmbedMode::Net => {
            let section = cfg.embedder.as_ref().ok_or_else(|| {
                Error::InvalidSpec("net embedding needs the embedder config section".into())
            })?;
            let path = section.path.as_ref().ok_or_else(|| {
                Error::InvalidSpec("net embedding needs embedder.path (a trained model)".into())
            })?;
            let params = dtl::denoiser::MlpParams::load_dir(path)?;
            Box::new(move |p: &Sample| {
                let z = params.forward_plain(p.values())?;
                Sample::new(p.shape().to_vec(), z)
            })
        }
    };

    let report = dtl::embedding::roundtrip_report(&model, &sched, &mut *embed, &probes)?;
    let latents: Vec<Sample> = probes.iter().map(|p| embed(p)).collect::<Result<Vec<_>>>()?;
    ensure_out_dir(out)?;
    tensor_io::write_tensor(out.join("latents.dtl"), &stack(&latents)?)?;

    let model_digest = dtl::manifest::sha256_hex(&serde_json::to_vec(&cfg.model)?);
    let sidecar = serde_json::json!({
        "probes": probes.len(),
        "timesteps": sched.timesteps(),
        "eta": 0.0,
        "mode": format!("{mode:?}").to_lowercase(),
        "model_sha256": model_digest,
        "mean_roundtrip_mse": report.mean_mse,
        "per_probe_mse": report.per_sample_mse,
    });
    dtl::manifest::atomic_write(
        out.join("latents.json"),
        format!("{sidecar:#}\n").as_bytes(),
    )?;
    println!("mean roundtrip mse: {:.6e}", report.mean_mse);

    let mut manifest = base_manifest(loaded, "embed")?;
    manifest.record_input(input)?;
    manifest.record_arg("mode", format!("{mode:?}").to_lowercase());
    manifest.record_arg("probes", probes.len());
    manifest.write_to_dir(out)
}

// --- rotate ---

struct Pipeline {
    records: Vec<DatasetRecord>,
    sched: Option<NoiseSchedule>,
    model: Option<DenoiserModel>,
    embedder: Option<dtl::denoiser::MlpParams>,
    embed_kind: EmbedKind,
}

impl Pipeline {
    fn build(cfg: &RunConfig) -> Result<Self> {
        let records = cfg.dataset_records()?;
        let tsec = cfg.trajectory_section();
        let (sched, model) = if cfg.model.is_some() && !cfg.is_identity_model() {
            (Some(cfg.schedule()?), Some(cfg.denoiser_model()?))
        } else {
            (None, None)
        };
        let embedder = match tsec.embed {
            EmbedKind::Net => {
                let section = cfg.embedder.as_ref().ok_or_else(|| {
                    Error::InvalidSpec("net embedding needs the embedder config section".into())
                })?;
                let path = section.path.as_ref().ok_or_else(|| {
                    Error::InvalidSpec("net embedding needs embedder.path".into())
                })?;
                Some(dtl::denoiser::MlpParams::load_dir(path)?)
            }
            _ => None,
        };
        if tsec.embed == EmbedKind::Ode && model.is_none() {
            return Err(Error::InvalidSpec(
                "ode embedding needs a mixture or mlp model".into(),
            ));
        }
        Ok(Pipeline {
            records,
            sched,
            model,
            embedder,
            embed_kind: tsec.embed,
        })
    }

    fn embed_fn(&self) -> Box<dyn FnMut(&Sample) -> Result<Sample> + '_> {
        match self.embed_kind {
            EmbedKind::Identity => Box::new(|s: &Sample| Ok(s.clone())),
            EmbedKind::Ode => {
                let model = self.model.as_ref().expect("checked in build");
                let sched = self.sched.as_ref().expect("checked in build");
                Box::new(move |s: &Sample| invert_ode(model, sched, s))
            }
            EmbedKind::Net => {
                let params = self.embedder.as_ref().expect("checked in build");
                Box::new(move |s: &Sample| {
                    let z = params.forward_plain(s.values())?;
                    Sample::new(s.shape().to_vec(), z)
                })
            }
        }
    }

    fn generate_fn(&self) -> Box<dyn FnMut(&Sample) -> Result<Sample> + '_> {
        match (&self.model, &self.sched) {
            (Some(model), Some(sched)) => {
                let mut rng = RngStream::new(0); // eta = 0 never touches it
                Box::new(move |z: &Sample| ddim_sample(model, sched, z, 0.0, &mut rng))
            }
            _ => Box::new(|z: &Sample| Ok(z.clone())),
        }
    }
}

fn ladder_spec_for(cfg: &RunConfig, source: Option<&DatasetRecord>) -> Result<LadderSpec> {
    let tsec = cfg.trajectory_section();
    let mut attrs = BTreeMap::new();
    if let Some(src) = source {
        for name in &tsec.match_attrs {
            let v = src.attrs.get(name).ok_or_else(|| {
                Error::InvalidSpec(format!("source record has no attribute '{name}'"))
            })?;
            attrs.insert(name.clone(), *v);
        }
    }
    let light = match source {
        Some(src) if tsec.match_light => LightFilter::only(src.light),
        _ => tsec.light,
    };
    Ok(LadderSpec {
        span_degrees: tsec.span_degrees,
        step_degrees: tsec.step_degrees,
        query: FilterQuery {
            theta: 0.0,
            delta0: tsec.delta0,
            attrs,
            light,
            min_count: tsec.min_count,
            max_widenings: tsec.max_widenings,
        },
    })
}

fn status_name(status: TraversalStatus) -> &'static str {
    match status {
        TraversalStatus::Converged => "converged",
        TraversalStatus::Incomplete => "incomplete",
        TraversalStatus::Unverified => "unverified",
    }
}

fn trail_rows(rows: &mut Vec<String>, phase: &str, trail: &TraversalResult) {
    for (i, step) in trail.steps.iter().enumerate() {
        let measured = step.measured_yaw.map(fmt_f64).unwrap_or_default();
        rows.push(format!(
            "{phase},{},{},{},{},{}",
            i + 1,
            fmt_f64(step.expected_yaw),
            measured,
            step.extra,
            status_name(trail.status)
        ));
    }
}

fn cmd_rotate(loaded: &LoadedConfig, source_id: &str, target_yaw: f64, out: &Path) -> Result<()> {
    let cfg = &loaded.config;
    let pipeline = Pipeline::build(cfg)?;
    let tsec = cfg.trajectory_section();

    let source = pipeline
        .records
        .iter()
        .find(|r| r.id == source_id)
        .cloned()
        .ok_or_else(|| Error::EmptyInput(format!("source id '{source_id}' not in dataset")))?;

    let spec = ladder_spec_for(cfg, Some(&source))?;
    let fits = {
        let mut embed = pipeline.embed_fn();
        dtl::trajectory::split_directions(&pipeline.records, &mut *embed, &spec)?
    };

    let source_latent = {
        let mut embed = pipeline.embed_fn();
        embed(&source.sample)?
    };

    let planted = cfg.planted_model()?;
    let mut probe_closure;
    let mut probe: Option<&mut dyn FnMut(&Sample) -> Result<f64>> = match tsec.probe {
        ProbeKind::Planted => {
            let model = planted
                .ok_or_else(|| Error::InvalidSpec("planted probe needs a planted dataset".into()))?;
            let attrs = source.attrs.clone();
            probe_closure = move |s: &Sample| model.probe_yaw(s, &attrs);
            Some(&mut probe_closure)
        }
        ProbeKind::None => None,
    };

    let traversal_cfg = TraversalConfig {
        target_yaw,
        n_steps: tsec.n_steps,
        max_extra_steps: tsec.max_extra_steps,
        yaw_tolerance: tsec.yaw_tolerance,
        frontalize_threshold: tsec.frontalize_threshold,
    };

    let mut rows: Vec<String> = Vec::new();
    let mut all_steps: Vec<(Sample, Sample)> = Vec::new();
    let mut generate = pipeline.generate_fn();

    let front = frontalize(
        &fits,
        &source_latent,
        source.yaw,
        &traversal_cfg,
        &mut *generate,
        probe.as_deref_mut(),
    )?;
    let (mut current_latent, mut current_yaw) = (source_latent, source.yaw);
    if let Some(trail) = &front.trail {
        trail_rows(&mut rows, "frontalize", trail);
        all_steps.extend(
            trail
                .steps
                .iter()
                .map(|s| (s.latent.clone(), s.output.clone())),
        );
        current_yaw = trail.steps.last().and_then(|s| s.measured_yaw).unwrap_or(0.0);
        current_latent = front.latent.clone();
    }

    let side = choose_side(&fits, current_yaw, target_yaw)?;
    let main_trail = traverse(
        &side.fit,
        &current_latent,
        current_yaw,
        &traversal_cfg,
        &mut *generate,
        probe.as_deref_mut(),
    )?;
    trail_rows(&mut rows, "rotate", &main_trail);
    all_steps.extend(
        main_trail
            .steps
            .iter()
            .map(|s| (s.latent.clone(), s.output.clone())),
    );

    ensure_out_dir(out)?;
    write_csv(
        &out.join("trail.csv"),
        "phase,step,expected_yaw,measured_yaw,extra,status",
        &rows,
    )?;
    let latents: Vec<Sample> = all_steps.iter().map(|(z, _)| z.clone()).collect();
    let outputs: Vec<Sample> = all_steps.iter().map(|(_, o)| o.clone()).collect();
    tensor_io::write_tensor(out.join("latents.dtl"), &stack(&latents)?)?;
    tensor_io::write_tensor(out.join("outputs.dtl"), &stack(&outputs)?)?;
    save_fit(&fits.left.fit, out, "left_fit", Some(&spec.query))?;
    save_fit(&fits.right.fit, out, "right_fit", Some(&spec.query))?;
    write_image_frames(out, &outputs)?;

    let mut manifest = base_manifest(loaded, "rotate")?;
    manifest.record_arg("source_id", source_id);
    manifest.record_arg("target_yaw", target_yaw);
    manifest.record_arg("frontalized", front.trail.is_some());
    manifest.record_arg("status", status_name(main_trail.status));
    manifest.write_to_dir(out)
}

/// Dumps PPM frames for outputs that are image-shaped with in-range values.
fn write_image_frames(out: &Path, outputs: &[Sample]) -> Result<()> {
    for (i, s) in outputs.iter().enumerate() {
        let shape = s.shape();
        let renderable = shape.len() == 3
            && shape[2] == 3
            && s.values().iter().all(|v| (0.0..=1.0).contains(v));
        if renderable {
            let img = dtl::imageops::RgbImage::new(shape[0], shape[1], s.values().to_vec())?;
            dtl::imageops::write_ppm(out.join(format!("frame_{i:03}.ppm")), &img)?;
        }
    }
    Ok(())
}

// --- analyze-slopes ---

fn cmd_analyze_slopes(
    loaded: &LoadedConfig,
    group_by: &[String],
    windows: bool,
    out: &Path,
) -> Result<()> {
    let cfg = &loaded.config;
    let pipeline = Pipeline::build(cfg)?;
    let spec = ladder_spec_for(cfg, None)?;
    ensure_out_dir(out)?;

    if windows {
        let span = spec.span_degrees;
        let step = spec.step_degrees;
        let mut fits: Vec<FittedWindow> = Vec::new();
        let mut labels = Vec::new();
        let mut lo = -span;
        while lo <= 1e-9 {
            let hi = lo + span;
            let mut embed = pipeline.embed_fn();
            fits.push(fit_window(
                &pipeline.records,
                &mut *embed,
                lo,
                hi,
                step,
                &spec.query,
            )?);
            labels.push(format!("[{lo}..{hi}]"));
            lo += step;
        }
        let refs: Vec<&dtl::trajectory::TrajectoryFit> = fits.iter().map(|f| &f.fit).collect();
        let matrix = slope_cosine_matrix(&refs, &labels)?;
        dtl::manifest::atomic_write(out.join("windows_cosine.csv"), matrix.to_csv().as_bytes())?;
        dtl::manifest::atomic_write(out.join("windows_heatmap.pgm"), &matrix.to_pgm(24))?;
    }

    let combos = attribute_combos(&pipeline.records, group_by)?;
    for (side_name, lo, hi) in [
        ("left", 0.0, spec.span_degrees),
        ("right", -spec.span_degrees, 0.0),
    ] {
        let mut fits = Vec::new();
        let mut labels = Vec::new();
        for combo in &combos {
            let mut query = spec.query.clone();
            query.attrs.extend(combo.clone());
            let mut embed = pipeline.embed_fn();
            let fitted = fit_window(
                &pipeline.records,
                &mut *embed,
                lo,
                hi,
                spec.step_degrees,
                &query,
            )?;
            fits.push(fitted);
            labels.push(combo_label(combo));
        }
        let matrix = if fits.len() == 1 {
            CosineMatrix::single(labels[0].clone())
        } else {
            let refs: Vec<&dtl::trajectory::TrajectoryFit> = fits.iter().map(|f| &f.fit).collect();
            slope_cosine_matrix(&refs, &labels)?
        };
        dtl::manifest::atomic_write(
            out.join(format!("{side_name}_cosine.csv")),
            matrix.to_csv().as_bytes(),
        )?;
        dtl::manifest::atomic_write(
            out.join(format!("{side_name}_heatmap.pgm")),
            &matrix.to_pgm(24),
        )?;
    }

    let mut manifest = base_manifest(loaded, "analyze-slopes")?;
    manifest.record_arg("group_by", group_by.join("|"));
    manifest.record_arg("windows", windows);
    manifest.write_to_dir(out)
}

/// Distinct value combinations of the named attributes, sorted. With no
/// names this is one group holding everything.
fn attribute_combos(
    records: &[DatasetRecord],
    group_by: &[String],
) -> Result<Vec<BTreeMap<String, i8>>> {
    if group_by.is_empty() {
        return Ok(vec![BTreeMap::new()]);
    }
    let mut combos: Vec<BTreeMap<String, i8>> = Vec::new();
    for r in records {
        let mut combo = BTreeMap::new();
        for name in group_by {
            let v = r.attrs.get(name).ok_or_else(|| {
                Error::InvalidSpec(format!("record {} has no attribute '{name}'", r.id))
            })?;
            combo.insert(name.clone(), *v);
        }
        if !combos.contains(&combo) {
            combos.push(combo);
        }
    }
    combos.sort();
    Ok(combos)
}

fn combo_label(combo: &BTreeMap<String, i8>) -> String {
    if combo.is_empty() {
        return "all".into();
    }
    combo
        .iter()
        .map(|(k, v)| format!("{k}={v:+}"))
        .collect::<Vec<_>>()
        .join("|")
}

// --- colorfix ---

fn cmd_colorfix(
    loaded: &LoadedConfig,
    target: &Path,
    source: &Path,
    mask: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let target_img = dtl::imageops::read_ppm(target)?;
    let source_img = dtl::imageops::read_ppm(source)?;
    let mask_img = mask.map(dtl::imageops::read_pgm_mask).transpose()?;
    let (corrected, clipped) =
        dtl::imageops::color_correct(&target_img, &source_img, mask_img.as_ref())?;
    ensure_out_dir(out)?;
    dtl::imageops::write_ppm(out.join("corrected.ppm"), &corrected)?;
    println!("clipped channel values: {clipped}");

    let mut manifest = base_manifest(loaded, "colorfix")?;
    manifest.record_input(target)?;
    manifest.record_input(source)?;
    if let Some(m) = mask {
        manifest.record_input(m)?;
    }
    manifest.record_arg("clipped", clipped);
    manifest.write_to_dir(out)
}

// --- stats ---

fn cmd_stats(loaded: &LoadedConfig, out: &Path, bin_width: f64) -> Result<()> {
    let cfg = &loaded.config;
    let metas = cfg.dataset_metas()?;
    if metas.is_empty() {
        return Err(Error::EmptyInput("dataset has no records".into()));
    }
    let yaws: Vec<f64> = metas.iter().map(|m| m.yaw).collect();
    let hist = dtl::dataset::yaw_histogram(&yaws, bin_width)?;
    ensure_out_dir(out)?;

    let fractions = hist.fractions();
    let rows: Vec<String> = hist
        .bins
        .iter()
        .zip(&fractions)
        .map(|(b, f)| {
            format!(
                "{},{},{},{}",
                fmt_f64(b.lo),
                fmt_f64(b.hi),
                b.count,
                fmt_f64(*f)
            )
        })
        .collect();
    write_csv(&out.join("histogram.csv"), "lo,hi,count,fraction", &rows)?;

    let mut summary = vec![
        format!("records,{}", metas.len()),
        format!(
            "yaw_within_10,{}",
            fmt_f64(dtl::dataset::fraction_within(&yaws, -10.0, 10.0))
        ),
        format!(
            "yaw_outside_40,{}",
            fmt_f64(1.0 - dtl::dataset::fraction_within(&yaws, -40.0, 40.0))
        ),
    ];
    for light in [
        dtl::dataset::Light::Left,
        dtl::dataset::Light::Center,
        dtl::dataset::Light::Right,
    ] {
        let frac = metas.iter().filter(|m| m.light == light).count() as f64 / metas.len() as f64;
        summary.push(format!(
            "light_{},{}",
            light.as_str().to_lowercase(),
            fmt_f64(frac)
        ));
    }
    if let Some(first) = metas.first() {
        for name in first.attrs.keys() {
            let frac = metas
                .iter()
                .filter(|m| m.attrs.get(name) == Some(&1))
                .count() as f64
                / metas.len() as f64;
            summary.push(format!("attr_{name}_positive,{}", fmt_f64(frac)));
        }
    }
    write_csv(&out.join("summary.csv"), "key,value", &summary)?;

    // Class centroids per light label when pixel data is available.
    if let Ok(records) = cfg.dataset_records() {
        let mut stats_rows = Vec::new();
        let mut stats = Vec::new();
        for light in [
            dtl::dataset::Light::Left,
            dtl::dataset::Light::Center,
            dtl::dataset::Light::Right,
        ] {
            let cluster: Vec<DatasetRecord> = records
                .iter()
                .filter(|r| r.light == light)
                .cloned()
                .collect();
            if cluster.is_empty() {
                continue;
            }
            let s = dtl::dataset::class_stats(&cluster)?;
            tensor_io::write_tensor(
                out.join(format!("centroid_{}.dtl", light.as_str().to_lowercase())),
                &s.centroid,
            )?;
            stats_rows.push(format!(
                "{},{},{}",
                light.as_str().to_lowercase(),
                s.count,
                fmt_f64(s.variance)
            ));
            stats.push((light, s));
        }
        if !stats_rows.is_empty() {
            write_csv(
                &out.join("class_stats.csv"),
                "group,count,variance",
                &stats_rows,
            )?;
        }
        if stats.len() >= 2 {
            let mut mse_rows = Vec::new();
            for (la, sa) in &stats {
                let mut row = la.as_str().to_lowercase();
                for (_, sb) in &stats {
                    row.push_str(&format!(",{}", fmt_f64(dtl::dataset::centroid_mse(sa, sb)?)));
                }
                mse_rows.push(row);
            }
            let header = std::iter::once("group".to_string())
                .chain(stats.iter().map(|(l, _)| l.as_str().to_lowercase()))
                .collect::<Vec<_>>()
                .join(",");
            write_csv(&out.join("centroid_mse.csv"), &header, &mse_rows)?;
        }
    }

    let mut manifest = base_manifest(loaded, "stats")?;
    manifest.record_arg("bin_width", bin_width);
    manifest.record_arg("records", metas.len());
    manifest.write_to_dir(out)
}
