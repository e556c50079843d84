//! Linear editing trajectories in latent space: embed attribute-matched
//! clusters at a ladder of yaw angles, fit a line through the cluster
//! centroids by least squares, traverse it from a source embedding with
//! rotation feedback, and compare fitted slopes by cosine similarity.

use crate::dataset::{filter_cluster, DatasetRecord, FilterQuery};
use crate::error::{Error, Result};
use crate::sample::Sample;

/// Strictly monotone list of yaw rungs, at least two.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleLadder {
    thetas: Vec<f64>,
}

impl AngleLadder {
    pub fn new(thetas: Vec<f64>) -> Result<Self> {
        if thetas.len() < 2 {
            return Err(Error::InvalidSpec("ladder needs at least two angles".into()));
        }
        let increasing = thetas.windows(2).all(|w| w[1] > w[0]);
        let decreasing = thetas.windows(2).all(|w| w[1] < w[0]);
        if !increasing && !decreasing {
            return Err(Error::InvalidSpec(format!(
                "ladder must be strictly monotone, got {thetas:?}"
            )));
        }
        Ok(AngleLadder { thetas })
    }

    /// Evenly spaced rungs from `lo` to `hi` inclusive.
    pub fn span(lo: f64, hi: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !(hi > lo) {
            return Err(Error::InvalidSpec(format!(
                "ladder span needs hi > lo and step > 0, got [{lo}, {hi}] step {step}"
            )));
        }
        let mut thetas = Vec::new();
        let mut t = lo;
        while t <= hi + 1e-9 {
            thetas.push(t.min(hi));
            t += step;
        }
        AngleLadder::new(thetas)
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    pub fn lo(&self) -> f64 {
        self.thetas
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn hi(&self) -> f64 {
        self.thetas
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest gap between consecutive rungs.
    pub fn max_gap(&self) -> f64 {
        self.thetas
            .windows(2)
            .map(|w| (w[1] - w[0]).abs())
            .fold(0.0, f64::max)
    }

    /// The rung closest to zero yaw (first such in listed order on ties).
    pub fn reference_theta(&self) -> f64 {
        let mut best = self.thetas[0];
        for &t in &self.thetas {
            if t.abs() < best.abs() {
                best = t;
            }
        }
        best
    }
}

/// Fitted editing line: a unit latent direction, the per-degree speed along
/// it, and the fitted point at the reference angle.
#[derive(Debug, Clone)]
pub struct TrajectoryFit {
    pub base: Sample,
    /// Unit vector along the fitted slope.
    pub direction: Sample,
    /// Norm of the per-degree slope vector; `speed * direction` is the
    /// latent velocity per degree of yaw.
    pub speed: f64,
    pub reference_theta: f64,
    pub thetas: AngleLadder,
    pub centroids: Vec<Sample>,
    pub residual_rms: f64,
}

impl TrajectoryFit {
    /// Fitted latent at an arbitrary yaw.
    pub fn point_at(&self, yaw: f64) -> Sample {
        self.base
            .add_scaled(&self.direction, (yaw - self.reference_theta) * self.speed)
            .expect("fit buffers share a shape")
    }
}

/// Mean latent of each cluster under the given embedding, keyed by rung.
/// Centroids, not raw points, feed the regression.
pub fn embed_clusters(
    clusters: &[(f64, Vec<DatasetRecord>)],
    embed_fn: &mut dyn FnMut(&Sample) -> Result<Sample>,
) -> Result<Vec<(f64, Sample)>> {
    let mut out = Vec::with_capacity(clusters.len());
    for (theta, members) in clusters {
        if members.is_empty() {
            return Err(Error::EmptyInput(format!("cluster at theta {theta}")));
        }
        let mut acc: Option<Sample> = None;
        for record in members {
            let z = embed_fn(&record.sample)?;
            acc = Some(match acc {
                None => z,
                Some(a) => a.add(&z)?,
            });
        }
        let centroid = acc.unwrap().scale(1.0 / members.len() as f64);
        out.push((*theta, centroid));
    }
    Ok(out)
}

/// Ordinary least squares of each latent coordinate against yaw. The slope
/// vector's norm becomes `speed`, its normalization `direction`; `base` is
/// the fitted value at the rung nearest zero.
pub fn fit_line(centroids: &[(f64, Sample)]) -> Result<TrajectoryFit> {
    if centroids.len() < 2 {
        return Err(Error::InvalidSpec("fit needs at least two centroids".into()));
    }
    let thetas = AngleLadder::new(centroids.iter().map(|(t, _)| *t).collect())?;
    let n = centroids.len() as f64;
    let dim = centroids[0].1.len();
    for (_, c) in centroids {
        centroids[0].1.check_same_shape(c)?;
    }

    let theta_mean = thetas.thetas().iter().sum::<f64>() / n;
    let ss_theta: f64 = thetas
        .thetas()
        .iter()
        .map(|t| (t - theta_mean) * (t - theta_mean))
        .sum();
    if ss_theta == 0.0 {
        return Err(Error::InvalidSpec("all rungs coincide".into()));
    }

    let mut mean = vec![0.0; dim];
    for (_, c) in centroids {
        for (m, v) in mean.iter_mut().zip(c.values()) {
            *m += v / n;
        }
    }
    let mut slope = vec![0.0; dim];
    for (t, c) in centroids {
        let dt = t - theta_mean;
        for (s, (v, m)) in slope.iter_mut().zip(c.values().iter().zip(&mean)) {
            *s += dt * (v - m) / ss_theta;
        }
    }

    let speed = slope.iter().map(|s| s * s).sum::<f64>().sqrt();
    if speed == 0.0 {
        return Err(Error::DegenerateFit(
            "all centroids coincide; no direction to fit".into(),
        ));
    }
    let direction: Vec<f64> = slope.iter().map(|s| s / speed).collect();

    let reference_theta = thetas.reference_theta();
    let shape = centroids[0].1.shape().to_vec();
    let base: Vec<f64> = mean
        .iter()
        .zip(&slope)
        .map(|(m, s)| m + s * (reference_theta - theta_mean))
        .collect();

    let mut ss_resid = 0.0;
    for (t, c) in centroids {
        for ((m, s), v) in mean.iter().zip(&slope).zip(c.values()) {
            let fitted = m + s * (t - theta_mean);
            ss_resid += (fitted - v) * (fitted - v);
        }
    }
    let residual_rms = (ss_resid / (n * dim as f64)).sqrt();

    Ok(TrajectoryFit {
        base: Sample::new(shape.clone(), base)?,
        direction: Sample::new(shape, direction)?,
        speed,
        reference_theta,
        thetas,
        centroids: centroids.iter().map(|(_, c)| c.clone()).collect(),
        residual_rms,
    })
}

/// Per-rung retrieval summary for a fitted window.
#[derive(Debug, Clone)]
pub struct RungReport {
    pub theta: f64,
    pub count: usize,
    pub shortfall: bool,
    pub final_delta: f64,
}

#[derive(Debug, Clone)]
pub struct FittedWindow {
    pub lo: f64,
    pub hi: f64,
    pub fit: TrajectoryFit,
    pub rungs: Vec<RungReport>,
}

/// Retrieves a cluster per rung over `[lo, hi]`, embeds, and fits. Rung
/// shortfalls are carried in the report rather than failing the fit.
pub fn fit_window(
    records: &[DatasetRecord],
    embed_fn: &mut dyn FnMut(&Sample) -> Result<Sample>,
    lo: f64,
    hi: f64,
    rung_step: f64,
    query: &FilterQuery,
) -> Result<FittedWindow> {
    let ladder = AngleLadder::span(lo, hi, rung_step)?;
    let mut clusters = Vec::new();
    let mut rungs = Vec::new();
    for &theta in ladder.thetas() {
        let q = FilterQuery {
            theta,
            ..query.clone()
        };
        let outcome = filter_cluster(records, &q)?;
        if outcome.records.is_empty() {
            return Err(Error::EmptyInput(format!(
                "no records for rung {theta} in window [{lo}, {hi}]"
            )));
        }
        rungs.push(RungReport {
            theta,
            count: outcome.records.len(),
            shortfall: outcome.shortfall,
            final_delta: outcome.final_delta,
        });
        clusters.push((theta, outcome.records));
    }
    let centroids = embed_clusters(&clusters, embed_fn)?;
    Ok(FittedWindow {
        lo,
        hi,
        fit: fit_line(&centroids)?,
        rungs,
    })
}

/// Ladder geometry for the side fits.
#[derive(Debug, Clone)]
pub struct LadderSpec {
    pub span_degrees: f64,
    pub step_degrees: f64,
    pub query: FilterQuery,
}

impl Default for LadderSpec {
    fn default() -> Self {
        LadderSpec {
            span_degrees: 40.0,
            step_degrees: 10.0,
            query: FilterQuery {
                theta: 0.0,
                delta0: 2.0,
                attrs: Default::default(),
                light: crate::dataset::LightFilter::Any,
                min_count: 1000,
                max_widenings: 6,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitFits {
    /// Leftward rotation: positive yaws, window `[0, +span]`.
    pub left: FittedWindow,
    /// Rightward rotation: negative yaws, window `[-span, 0]`.
    pub right: FittedWindow,
}

/// Two independent fits, one per rotation side. A single line does not
/// approximate large rotations well, so the problem is split at zero yaw.
pub fn split_directions(
    records: &[DatasetRecord],
    embed_fn: &mut dyn FnMut(&Sample) -> Result<Sample>,
    spec: &LadderSpec,
) -> Result<SplitFits> {
    let left = fit_window(
        records,
        embed_fn,
        0.0,
        spec.span_degrees,
        spec.step_degrees,
        &spec.query,
    )?;
    let right = fit_window(
        records,
        embed_fn,
        -spec.span_degrees,
        0.0,
        spec.step_degrees,
        &spec.query,
    )?;
    Ok(SplitFits { left, right })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraversalConfig {
    pub target_yaw: f64,
    pub n_steps: usize,
    pub max_extra_steps: usize,
    pub yaw_tolerance: f64,
    pub frontalize_threshold: f64,
}

impl TraversalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 || !(self.yaw_tolerance > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "traversal needs n_steps >= 1 and yaw_tolerance > 0, got {} / {}",
                self.n_steps, self.yaw_tolerance
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraversalStatus {
    /// Final probed yaw within tolerance of the target.
    Converged,
    /// Extra-step budget exhausted without reaching tolerance.
    Incomplete,
    /// No probe available; ran open-loop for the planned steps.
    Unverified,
}

#[derive(Debug, Clone)]
pub struct TraversalStep {
    pub latent: Sample,
    pub output: Sample,
    pub expected_yaw: f64,
    pub measured_yaw: Option<f64>,
    pub extra: bool,
}

#[derive(Debug, Clone)]
pub struct TraversalResult {
    pub steps: Vec<TraversalStep>,
    pub status: TraversalStatus,
    pub extra_steps: usize,
}

impl TraversalResult {
    pub fn final_latent(&self) -> &Sample {
        &self.steps.last().expect("traversal takes >= 1 step").latent
    }
}

/// Walks the fitted line from a source embedding in `n_steps` equal yaw
/// increments, generating and probing after each step. If the probe misses
/// the target at the end, up to `max_extra_steps` additional steps are
/// appended; the outcome is flagged rather than failed.
pub fn traverse(
    fit: &TrajectoryFit,
    source_latent: &Sample,
    source_yaw: f64,
    cfg: &TraversalConfig,
    generate_fn: &mut dyn FnMut(&Sample) -> Result<Sample>,
    mut yaw_probe_fn: Option<&mut (dyn FnMut(&Sample) -> Result<f64> + '_)>,
) -> Result<TraversalResult> {
    cfg.validate()?;
    check_segment(fit, source_yaw, cfg.target_yaw)?;

    let per_step_yaw = (cfg.target_yaw - source_yaw) / cfg.n_steps as f64;
    let step_scale = per_step_yaw * fit.speed;

    let mut x = source_latent.clone();
    let mut steps = Vec::new();
    let mut last_measured: Option<f64> = None;

    let mut advance = |x: &mut Sample,
                       expected: f64,
                       extra: bool,
                       steps: &mut Vec<TraversalStep>,
                       probe: &mut Option<&mut (dyn FnMut(&Sample) -> Result<f64> + '_)>|
     -> Result<Option<f64>> {
        *x = x.add_scaled(&fit.direction, step_scale)?;
        x.ensure_finite("traversal latent")?;
        let output = generate_fn(x)?;
        let measured = match probe {
            Some(p) => Some(p(&output)?),
            None => None,
        };
        steps.push(TraversalStep {
            latent: x.clone(),
            output,
            expected_yaw: expected,
            measured_yaw: measured,
            extra,
        });
        Ok(measured)
    };

    for k in 1..=cfg.n_steps {
        let expected = source_yaw + per_step_yaw * k as f64;
        last_measured = advance(&mut x, expected, false, &mut steps, &mut yaw_probe_fn)?;
    }

    let mut extra_steps = 0usize;
    let status = if yaw_probe_fn.is_none() {
        TraversalStatus::Unverified
    } else {
        let off_target =
            |m: Option<f64>| m.map(|v| (v - cfg.target_yaw).abs() > cfg.yaw_tolerance) == Some(true);
        while off_target(last_measured) && extra_steps < cfg.max_extra_steps {
            last_measured =
                advance(&mut x, cfg.target_yaw, true, &mut steps, &mut yaw_probe_fn)?;
            extra_steps += 1;
        }
        if off_target(last_measured) {
            TraversalStatus::Incomplete
        } else {
            TraversalStatus::Converged
        }
    };

    Ok(TraversalResult {
        steps,
        status,
        extra_steps,
    })
}

fn check_segment(fit: &TrajectoryFit, source_yaw: f64, target_yaw: f64) -> Result<()> {
    let slack = fit.thetas.max_gap();
    let lo = fit.thetas.lo() - slack;
    let hi = fit.thetas.hi() + slack;
    let (seg_lo, seg_hi) = (source_yaw.min(target_yaw), source_yaw.max(target_yaw));
    if seg_lo < lo || seg_hi > hi {
        return Err(Error::InvalidSpec(format!(
            "motion [{seg_lo}, {seg_hi}] leaves the fitted window [{lo}, {hi}]"
        )));
    }
    Ok(())
}

/// Picks the side whose window covers the motion; ties go to the window
/// containing the target.
pub fn choose_side<'a>(
    fits: &'a SplitFits,
    source_yaw: f64,
    target_yaw: f64,
) -> Result<&'a FittedWindow> {
    let covers = |w: &FittedWindow| {
        let slack = w.fit.thetas.max_gap();
        source_yaw.min(target_yaw) >= w.lo - slack && source_yaw.max(target_yaw) <= w.hi + slack
    };
    let strict = |w: &FittedWindow, yaw: f64| yaw > w.lo && yaw < w.hi;
    match (covers(&fits.left), covers(&fits.right)) {
        (true, false) => Ok(&fits.left),
        (false, true) => Ok(&fits.right),
        (true, true) => {
            match (strict(&fits.left, target_yaw), strict(&fits.right, target_yaw)) {
                (true, false) => Ok(&fits.left),
                (false, true) => Ok(&fits.right),
                _ => Err(Error::InvalidSpec(format!(
                    "ambiguous side for motion {source_yaw} -> {target_yaw}"
                ))),
            }
        }
        (false, false) => Err(Error::InvalidSpec(format!(
            "motion {source_yaw} -> {target_yaw} fits neither window"
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct FrontalizeOutcome {
    pub latent: Sample,
    /// None when the source was already frontal enough.
    pub trail: Option<TraversalResult>,
}

/// Preliminary traversal bringing a high-yaw source near zero before the
/// main rotation. A no-op below the threshold.
pub fn frontalize(
    fits: &SplitFits,
    source_latent: &Sample,
    source_yaw: f64,
    cfg: &TraversalConfig,
    generate_fn: &mut dyn FnMut(&Sample) -> Result<Sample>,
    yaw_probe_fn: Option<&mut (dyn FnMut(&Sample) -> Result<f64> + '_)>,
) -> Result<FrontalizeOutcome> {
    if source_yaw.abs() <= cfg.frontalize_threshold {
        return Ok(FrontalizeOutcome {
            latent: source_latent.clone(),
            trail: None,
        });
    }
    let side = if source_yaw > 0.0 {
        &fits.left
    } else {
        &fits.right
    };
    let front_cfg = TraversalConfig {
        target_yaw: 0.0,
        ..*cfg
    };
    let trail = traverse(
        &side.fit,
        source_latent,
        source_yaw,
        &front_cfg,
        generate_fn,
        yaw_probe_fn,
    )?;
    Ok(FrontalizeOutcome {
        latent: trail.final_latent().clone(),
        trail: Some(trail),
    })
}

/// Symmetric cosine-similarity matrix between fitted directions.
#[derive(Debug, Clone)]
pub struct CosineMatrix {
    pub labels: Vec<String>,
    values: Vec<f64>,
}

impl CosineMatrix {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size() + j]
    }

    /// Mean of off-diagonal entries selected by `keep(i, j)`.
    pub fn mean_where(&self, keep: impl Fn(usize, usize) -> bool) -> f64 {
        let n = self.size();
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            for j in 0..n {
                if i != j && keep(i, j) {
                    total += self.get(i, j);
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    /// Off-diagonal argmin as `(i, j, value)` with `i < j`.
    pub fn min_off_diagonal(&self) -> (usize, usize, f64) {
        let n = self.size();
        let mut best = (0, 1, f64::INFINITY);
        for i in 0..n {
            for j in (i + 1)..n {
                if self.get(i, j) < best.2 {
                    best = (i, j, self.get(i, j));
                }
            }
        }
        best
    }

    /// CSV with a label header row and column, full double precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (i, l) in self.labels.iter().enumerate() {
            out.push_str(l);
            for j in 0..self.size() {
                out.push(',');
                out.push_str(&crate::tensor_io::fmt_f64(self.get(i, j)));
            }
            out.push('\n');
        }
        out
    }

    /// Grayscale heatmap: each cell becomes a `cell_px` square, values
    /// mapped from [-1, 1] to [0, 255] with round-half-up.
    pub fn to_pgm(&self, cell_px: usize) -> Vec<u8> {
        let n = self.size();
        let side = n * cell_px.max(1);
        let mut body = format!("P5\n{side} {side}\n255\n").into_bytes();
        let px = cell_px.max(1);
        for row in 0..side {
            for col in 0..side {
                let v = self.get(row / px, col / px);
                let level = ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8;
                body.push(level);
            }
        }
        body
    }
}

impl CosineMatrix {
    /// Trivial 1x1 matrix for a single group.
    pub fn single(label: String) -> Self {
        CosineMatrix {
            labels: vec![label],
            values: vec![1.0],
        }
    }
}

/// Serializes a fit as tensors (`<name>_base.dtl`, `<name>_direction.dtl`,
/// `<name>_centroids.dtl`) plus a JSON sidecar carrying the rungs, speed,
/// residual and the retrieval query that produced it.
pub fn save_fit(
    fit: &TrajectoryFit,
    dir: &std::path::Path,
    name: &str,
    query: Option<&FilterQuery>,
) -> Result<()> {
    crate::tensor_io::write_tensor(dir.join(format!("{name}_base.dtl")), &fit.base)?;
    crate::tensor_io::write_tensor(dir.join(format!("{name}_direction.dtl")), &fit.direction)?;
    let centroids = crate::sample::stack(&fit.centroids)?;
    crate::tensor_io::write_tensor(dir.join(format!("{name}_centroids.dtl")), &centroids)?;
    let sidecar = serde_json::json!({
        "thetas": fit.thetas.thetas(),
        "reference_theta": fit.reference_theta,
        "speed": fit.speed,
        "residual_rms": fit.residual_rms,
        "query": query,
    });
    crate::manifest::atomic_write(
        dir.join(format!("{name}.json")),
        format!("{sidecar:#}\n").as_bytes(),
    )
}

/// Pairwise cosine similarity of the fits' unit directions.
pub fn slope_cosine_matrix(fits: &[&TrajectoryFit], labels: &[String]) -> Result<CosineMatrix> {
    if fits.len() < 2 {
        return Err(Error::InvalidSpec("cosine matrix needs at least two fits".into()));
    }
    if fits.len() != labels.len() {
        return Err(Error::InvalidSpec(format!(
            "{} fits but {} labels",
            fits.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|l| l.contains(',')) {
        return Err(Error::InvalidSpec("labels must not contain commas".into()));
    }
    let dim = fits[0].direction.len();
    for f in fits {
        if f.direction.len() != dim {
            return Err(Error::ShapeMismatch {
                expected: vec![dim],
                got: f.direction.shape().to_vec(),
            });
        }
        if f.speed == 0.0 {
            return Err(Error::DegenerateFit("zero direction in cosine matrix".into()));
        }
    }
    let n = fits.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let c = if i == j {
                1.0
            } else {
                fits[i]
                    .direction
                    .dot(&fits[j].direction)?
                    .clamp(-1.0, 1.0)
            };
            values[i * n + j] = c;
        }
    }
    Ok(CosineMatrix {
        labels: labels.to_vec(),
        values,
    })
}
