//! Attribute-labeled sample store: annotation CSV ingestion, horizontal-flip
//! augmentation, yaw-window filtering with automatic widening, per-class
//! statistics, and a synthetic generator that plants known latent structure
//! for end-to-end checks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::sample::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Light {
    Left,
    Center,
    Right,
}

impl Light {
    pub fn parse(s: &str) -> Option<Light> {
        match s {
            "LEFT" => Some(Light::Left),
            "CENTER" => Some(Light::Center),
            "RIGHT" => Some(Light::Right),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Light::Left => "LEFT",
            Light::Center => "CENTER",
            Light::Right => "RIGHT",
        }
    }

    /// Left and right swap under a horizontal mirror; center is fixed.
    pub fn flipped(self) -> Light {
        match self {
            Light::Left => Light::Right,
            Light::Center => Light::Center,
            Light::Right => Light::Left,
        }
    }
}

impl fmt::Display for Light {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Annotation row joined across the three label files; no pixel data yet.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordMeta {
    pub id: String,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub light: Light,
    pub attrs: BTreeMap<String, i8>,
}

/// A labeled sample ready for filtering and embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub sample: Sample,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub light: Light,
    pub attrs: BTreeMap<String, i8>,
}

impl DatasetRecord {
    pub fn from_meta(meta: RecordMeta, sample: Sample) -> Self {
        DatasetRecord {
            id: meta.id,
            sample,
            yaw: meta.yaw,
            pitch: meta.pitch,
            roll: meta.roll,
            light: meta.light,
            attrs: meta.attrs,
        }
    }
}

#[derive(Debug)]
pub struct LoadReport {
    /// Records present in all three files, sorted by id.
    pub records: Vec<RecordMeta>,
    /// Ids missing from at least one source.
    pub dropped: usize,
}

/// Joins the attribute, pose and light CSVs on id. Records missing from any
/// source are dropped (counted in the report); malformed rows are hard
/// errors naming the line.
pub fn load_annotations(
    attr_path: impl AsRef<Path>,
    pose_path: impl AsRef<Path>,
    light_path: impl AsRef<Path>,
) -> Result<LoadReport> {
    let attrs = parse_attr_file(attr_path.as_ref())?;
    let poses = parse_pose_file(pose_path.as_ref())?;
    let lights = parse_light_file(light_path.as_ref())?;

    let mut all_ids: BTreeSet<&String> = BTreeSet::new();
    all_ids.extend(attrs.keys());
    all_ids.extend(poses.keys());
    all_ids.extend(lights.keys());

    let mut records = Vec::new();
    let mut dropped = 0usize;
    for id in all_ids {
        match (attrs.get(id), poses.get(id), lights.get(id)) {
            (Some(a), Some(p), Some(l)) => records.push(RecordMeta {
                id: id.clone(),
                yaw: p.0,
                pitch: p.1,
                roll: p.2,
                light: *l,
                attrs: a.clone(),
            }),
            _ => dropped += 1,
        }
    }
    Ok(LoadReport { records, dropped })
}

/// Writes the three annotation CSVs back out. Values use the shortest
/// round-tripping float representation, so load -> write -> load is
/// bit-exact.
pub fn write_annotations(
    records: &[RecordMeta],
    attr_path: impl AsRef<Path>,
    pose_path: impl AsRef<Path>,
    light_path: impl AsRef<Path>,
) -> Result<()> {
    let names: Vec<&String> = records
        .first()
        .map(|r| r.attrs.keys().collect())
        .unwrap_or_default();
    let mut attr_body = format!(
        "id{}\n",
        names.iter().map(|n| format!(",{n}")).collect::<String>()
    );
    let mut pose_body = String::from("id,yaw,pitch,roll\n");
    let mut light_body = String::from("id,light\n");
    for r in records {
        attr_body.push_str(&r.id);
        for n in &names {
            let v = r.attrs.get(*n).ok_or_else(|| {
                Error::InvalidSpec(format!("record {} missing attribute {n}", r.id))
            })?;
            attr_body.push_str(if *v > 0 { ",1" } else { ",-1" });
        }
        attr_body.push('\n');
        pose_body.push_str(&format!("{},{},{},{}\n", r.id, r.yaw, r.pitch, r.roll));
        light_body.push_str(&format!("{},{}\n", r.id, r.light));
    }
    crate::manifest::atomic_write(attr_path, attr_body.as_bytes())?;
    crate::manifest::atomic_write(pose_path, pose_body.as_bytes())?;
    crate::manifest::atomic_write(light_path, light_body.as_bytes())
}

/// Attaches pixel data from `<samples_dir>/<id>.dtl`, skipping denylisted
/// ids.
pub fn load_samples(
    metas: &[RecordMeta],
    samples_dir: impl AsRef<Path>,
    denylist: &BTreeSet<String>,
) -> Result<Vec<DatasetRecord>> {
    let dir = samples_dir.as_ref();
    let mut out = Vec::new();
    for meta in metas {
        if denylist.contains(&meta.id) {
            continue;
        }
        let sample = crate::tensor_io::read_tensor(dir.join(format!("{}.dtl", meta.id)))?;
        out.push(DatasetRecord::from_meta(meta.clone(), sample));
    }
    Ok(out)
}

/// One excluded id per line; blank lines ignored.
pub fn load_denylist(path: impl AsRef<Path>) -> Result<BTreeSet<String>> {
    let path = path.as_ref();
    let body =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(body
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let body =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(body.lines().map(String::from).collect())
}

fn parse_attr_file(path: &Path) -> Result<BTreeMap<String, BTreeMap<String, i8>>> {
    let lines = read_lines(path)?;
    let display = path.display().to_string();
    let header = lines
        .first()
        .ok_or_else(|| Error::parse(&display, 1, "empty attribute file"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first().map(|c| c.eq_ignore_ascii_case("id")) != Some(true) || cols.len() < 2 {
        return Err(Error::parse(
            &display,
            1,
            "attribute header must be 'id,<attr>,...'",
        ));
    }
    let names: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
    let mut out = BTreeMap::new();
    for (i, line) in lines.iter().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != names.len() + 1 {
            return Err(Error::parse(
                &display,
                lineno,
                format!("expected {} columns, found {}", names.len() + 1, fields.len()),
            ));
        }
        let mut attrs = BTreeMap::new();
        for (name, raw) in names.iter().zip(&fields[1..]) {
            let v = match raw.trim_start_matches('+') {
                "1" => 1i8,
                "-1" => -1i8,
                _ => {
                    return Err(Error::parse(
                        &display,
                        lineno,
                        format!("attribute {name} must be -1 or 1, got '{raw}'"),
                    ))
                }
            };
            attrs.insert(name.clone(), v);
        }
        if out.insert(fields[0].to_string(), attrs).is_some() {
            return Err(Error::parse(&display, lineno, format!("duplicate id {}", fields[0])));
        }
    }
    Ok(out)
}

fn parse_pose_file(path: &Path) -> Result<BTreeMap<String, (f64, f64, f64)>> {
    let lines = read_lines(path)?;
    let display = path.display().to_string();
    let mut out = BTreeMap::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if i == 0 && fields.first().map(|c| c.eq_ignore_ascii_case("id")) == Some(true) {
            continue; // header
        }
        if fields.len() != 4 {
            return Err(Error::parse(
                &display,
                lineno,
                format!("expected 'id,yaw,pitch,roll', found {} columns", fields.len()),
            ));
        }
        let mut angles = [0.0f64; 3];
        for (slot, raw) in angles.iter_mut().zip(&fields[1..]) {
            *slot = raw.parse().map_err(|_| {
                Error::parse(&display, lineno, format!("bad angle '{raw}'"))
            })?;
        }
        if !(-180.0..=180.0).contains(&angles[0]) {
            return Err(Error::parse(
                &display,
                lineno,
                format!("yaw {} outside [-180, 180]", angles[0]),
            ));
        }
        if out
            .insert(fields[0].to_string(), (angles[0], angles[1], angles[2]))
            .is_some()
        {
            return Err(Error::parse(&display, lineno, format!("duplicate id {}", fields[0])));
        }
    }
    Ok(out)
}

fn parse_light_file(path: &Path) -> Result<BTreeMap<String, Light>> {
    let lines = read_lines(path)?;
    let display = path.display().to_string();
    let mut out = BTreeMap::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if i == 0 && fields.first().map(|c| c.eq_ignore_ascii_case("id")) == Some(true) {
            continue;
        }
        if fields.len() != 2 {
            return Err(Error::parse(
                &display,
                lineno,
                format!("expected 'id,LIGHT', found {} columns", fields.len()),
            ));
        }
        let light = Light::parse(fields[1]).ok_or_else(|| {
            Error::parse(
                &display,
                lineno,
                format!("light must be LEFT, CENTER or RIGHT, got '{}'", fields[1]),
            )
        })?;
        if out.insert(fields[0].to_string(), light).is_some() {
            return Err(Error::parse(&display, lineno, format!("duplicate id {}", fields[0])));
        }
    }
    Ok(out)
}

/// Horizontal mirror with consistent label inversion: the sample's width
/// axis is reversed, yaw and roll change sign, and the light label swaps
/// left/right. Pitch and binary attributes are unchanged.
pub fn flip_record(r: &DatasetRecord) -> Result<DatasetRecord> {
    let shape = r.sample.shape();
    let (h, w, c) = match shape.len() {
        2 => (shape[0], shape[1], 1),
        3 => (shape[0], shape[1], shape[2]),
        _ => {
            return Err(Error::InvalidSpec(format!(
                "flip needs an image-shaped sample (H,W) or (H,W,C), got {shape:?}"
            )))
        }
    };
    let src = r.sample.values();
    let mut values = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let from = (y * w + x) * c;
            let to = (y * w + (w - 1 - x)) * c;
            values[to..to + c].copy_from_slice(&src[from..from + c]);
        }
    }
    Ok(DatasetRecord {
        id: r.id.clone(),
        sample: Sample::new(shape.to_vec(), values)?,
        yaw: -r.yaw,
        pitch: r.pitch,
        roll: -r.roll,
        light: r.light.flipped(),
        attrs: r.attrs.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LightFilter {
    Any,
    Left,
    Center,
    Right,
}

impl LightFilter {
    pub fn only(light: Light) -> Self {
        match light {
            Light::Left => LightFilter::Left,
            Light::Center => LightFilter::Center,
            Light::Right => LightFilter::Right,
        }
    }

    fn matches(self, light: Light) -> bool {
        match self {
            LightFilter::Any => true,
            LightFilter::Left => light == Light::Left,
            LightFilter::Center => light == Light::Center,
            LightFilter::Right => light == Light::Right,
        }
    }
}

/// Yaw-window query with attribute/light constraints. The window starts at
/// `[theta - delta0, theta + delta0]` and doubles its half-width until the
/// match count reaches `min_count` or `max_widenings` is exhausted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterQuery {
    pub theta: f64,
    pub delta0: f64,
    #[serde(default)]
    pub attrs: BTreeMap<String, i8>,
    pub light: LightFilter,
    pub min_count: usize,
    pub max_widenings: u32,
}

impl FilterQuery {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta0 > 0.0) || self.min_count == 0 {
            return Err(Error::InvalidSpec(format!(
                "filter needs delta0 > 0 and min_count >= 1, got {} / {}",
                self.delta0, self.min_count
            )));
        }
        if self.attrs.values().any(|v| *v != 1 && *v != -1) {
            return Err(Error::InvalidSpec("filter attrs must be -1 or 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct FilterOutcome {
    /// Selected records, nearest-to-theta first; mirror matches appear
    /// already flipped.
    pub records: Vec<DatasetRecord>,
    /// True when the widening budget ran out before reaching `min_count`.
    pub shortfall: bool,
    pub final_delta: f64,
    pub widenings: u32,
}

/// Selects records whose (possibly flipped) yaw falls in the query window.
/// Mirror candidates enter flipped, enlarging the pool; over-full results
/// keep the `min_count` records nearest the target yaw, ties broken by id
/// then original-before-flipped.
pub fn filter_cluster(records: &[DatasetRecord], q: &FilterQuery) -> Result<FilterOutcome> {
    q.validate()?;
    let mut delta = q.delta0;
    let mut widenings = 0u32;
    loop {
        let candidates = collect_candidates(records, q, delta)?;
        if candidates.len() >= q.min_count || widenings >= q.max_widenings {
            let mut sorted = candidates;
            sorted.sort_by(|a, b| {
                let da = (a.0.yaw - q.theta).abs();
                let db = (b.0.yaw - q.theta).abs();
                da.partial_cmp(&db)
                    .unwrap()
                    .then_with(|| a.0.id.cmp(&b.0.id))
                    .then_with(|| a.1.cmp(&b.1))
            });
            let shortfall = sorted.len() < q.min_count;
            sorted.truncate(q.min_count);
            return Ok(FilterOutcome {
                records: sorted.into_iter().map(|(r, _)| r).collect(),
                shortfall,
                final_delta: delta,
                widenings,
            });
        }
        delta *= 2.0;
        widenings += 1;
    }
}

fn attrs_match(record: &BTreeMap<String, i8>, wanted: &BTreeMap<String, i8>) -> bool {
    wanted.iter().all(|(k, v)| record.get(k) == Some(v))
}

fn collect_candidates(
    records: &[DatasetRecord],
    q: &FilterQuery,
    delta: f64,
) -> Result<Vec<(DatasetRecord, bool)>> {
    let lo = q.theta - delta;
    let hi = q.theta + delta;
    let mut out = Vec::new();
    for r in records {
        if !attrs_match(&r.attrs, &q.attrs) {
            continue;
        }
        if r.yaw >= lo && r.yaw <= hi && q.light.matches(r.light) {
            out.push((r.clone(), false));
        }
        // Mirror candidate: its flipped yaw/light would match the query.
        if -r.yaw >= lo && -r.yaw <= hi && q.light.matches(r.light.flipped()) {
            out.push((flip_record(r)?, true));
        }
    }
    Ok(out)
}

/// Descriptive statistics of one class: elementwise mean and the mean over
/// positions of the per-position population variance.
#[derive(Debug, Clone)]
pub struct ClassStats {
    pub centroid: Sample,
    pub variance: f64,
    pub count: usize,
}

pub fn class_stats(cluster: &[DatasetRecord]) -> Result<ClassStats> {
    let first = cluster
        .first()
        .ok_or_else(|| Error::EmptyInput("class_stats cluster".into()))?;
    let shape = first.sample.shape().to_vec();
    let n = cluster.len() as f64;
    let len = first.sample.len();
    let mut mean = vec![0.0; len];
    for r in cluster {
        if r.sample.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                got: r.sample.shape().to_vec(),
            });
        }
        for (m, v) in mean.iter_mut().zip(r.sample.values()) {
            *m += v / n;
        }
    }
    let mut var_total = 0.0;
    for r in cluster {
        for (m, v) in mean.iter().zip(r.sample.values()) {
            let d = v - m;
            var_total += d * d;
        }
    }
    let variance = var_total / (n * len as f64);
    Ok(ClassStats {
        centroid: Sample::new(shape, mean)?,
        variance,
        count: cluster.len(),
    })
}

/// Mean squared distance between two class centroids.
pub fn centroid_mse(a: &ClassStats, b: &ClassStats) -> Result<f64> {
    a.centroid.mse(&b.centroid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct Histogram {
    pub bin_width: f64,
    pub bins: Vec<HistBin>,
    pub total: usize,
}

impl Histogram {
    /// Per-bin fractions; sums to 1.
    pub fn fractions(&self) -> Vec<f64> {
        self.bins
            .iter()
            .map(|b| b.count as f64 / self.total as f64)
            .collect()
    }
}

/// Histogram of yaw angles in bins of `bin_width` degrees anchored at -180.
pub fn yaw_histogram(yaws: &[f64], bin_width: f64) -> Result<Histogram> {
    if !(bin_width > 0.0) {
        return Err(Error::InvalidSpec(format!("bin width must be positive, got {bin_width}")));
    }
    if yaws.is_empty() {
        return Err(Error::EmptyInput("yaw histogram".into()));
    }
    let index = |yaw: f64| ((yaw + 180.0) / bin_width).floor() as i64;
    let lo_idx = yaws.iter().map(|&y| index(y)).min().unwrap();
    let hi_idx = yaws.iter().map(|&y| index(y)).max().unwrap();
    let mut counts = vec![0usize; (hi_idx - lo_idx + 1) as usize];
    for &y in yaws {
        counts[(index(y) - lo_idx) as usize] += 1;
    }
    let bins = counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| {
            let k = lo_idx + i as i64;
            HistBin {
                lo: -180.0 + k as f64 * bin_width,
                hi: -180.0 + (k + 1) as f64 * bin_width,
                count,
            }
        })
        .collect();
    Ok(Histogram {
        bin_width,
        bins,
        total: yaws.len(),
    })
}

/// Fraction of yaws inside `[lo, hi]`, bounds inclusive.
pub fn fraction_within(yaws: &[f64], lo: f64, hi: f64) -> f64 {
    if yaws.is_empty() {
        return 0.0;
    }
    yaws.iter().filter(|&&y| y >= lo && y <= hi).count() as f64 / yaws.len() as f64
}

/// Blueprint for a synthetic dataset with planted linear structure:
/// `sample = base + attr shifts + yaw * direction(side, attrs) + noise`.
/// The planted directions are the ground truth that trajectory fits are
/// checked against.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedSpec {
    pub shape: Vec<usize>,
    #[serde(default)]
    pub base: Option<Vec<f64>>,
    /// Per-degree latent velocity for yaw >= 0.
    pub dir_pos: Vec<f64>,
    /// Per-degree latent velocity for yaw < 0.
    pub dir_neg: Vec<f64>,
    /// Additive shift per attribute, scaled by the attribute value.
    #[serde(default)]
    pub attr_shifts: BTreeMap<String, Vec<f64>>,
    /// Direction perturbation per attribute, scaled by the attribute value.
    #[serde(default)]
    pub attr_dir_shifts: BTreeMap<String, Vec<f64>>,
    pub noise_sigma: f64,
    pub seed: u64,
    pub population: Vec<PlantedCluster>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedCluster {
    pub theta: f64,
    pub count: usize,
    /// Yaw is drawn uniformly from `[theta - yaw_jitter, theta + yaw_jitter]`.
    #[serde(default)]
    pub yaw_jitter: f64,
    #[serde(default)]
    pub attrs: BTreeMap<String, i8>,
    #[serde(default = "default_light")]
    pub light: Light,
}

fn default_light() -> Light {
    Light::Center
}

#[derive(Debug, Clone)]
pub struct PlantedModel {
    spec: PlantedSpec,
    dim: usize,
}

impl PlantedModel {
    pub fn new(spec: PlantedSpec) -> Result<Self> {
        let dim: usize = spec.shape.iter().product();
        if dim == 0 {
            return Err(Error::InvalidSpec("planted shape must be non-empty".into()));
        }
        let check = |name: &str, v: &Vec<f64>| {
            if v.len() != dim {
                return Err(Error::InvalidSpec(format!(
                    "{name} has length {}, shape {:?} needs {dim}",
                    v.len(),
                    spec.shape
                )));
            }
            Ok(())
        };
        check("dir_pos", &spec.dir_pos)?;
        check("dir_neg", &spec.dir_neg)?;
        if let Some(b) = &spec.base {
            check("base", b)?;
        }
        for (k, v) in spec.attr_shifts.iter().chain(spec.attr_dir_shifts.iter()) {
            check(k, v)?;
        }
        if !(spec.noise_sigma >= 0.0) {
            return Err(Error::InvalidSpec("noise_sigma must be >= 0".into()));
        }
        Ok(PlantedModel { spec, dim })
    }

    pub fn spec(&self) -> &PlantedSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn base_at(&self, attrs: &BTreeMap<String, i8>) -> Vec<f64> {
        let mut out = self
            .spec
            .base
            .clone()
            .unwrap_or_else(|| vec![0.0; self.dim]);
        for (name, shift) in &self.spec.attr_shifts {
            if let Some(&v) = attrs.get(name) {
                for (o, s) in out.iter_mut().zip(shift) {
                    *o += v as f64 * s;
                }
            }
        }
        out
    }

    /// Ground-truth per-degree velocity for the given side and attributes.
    pub fn direction(&self, yaw: f64, attrs: &BTreeMap<String, i8>) -> Vec<f64> {
        let mut d = if yaw >= 0.0 {
            self.spec.dir_pos.clone()
        } else {
            self.spec.dir_neg.clone()
        };
        for (name, shift) in &self.spec.attr_dir_shifts {
            if let Some(&v) = attrs.get(name) {
                for (o, s) in d.iter_mut().zip(shift) {
                    *o += v as f64 * s;
                }
            }
        }
        d
    }

    pub fn sample_at(&self, yaw: f64, attrs: &BTreeMap<String, i8>, rng: &mut RngStream) -> Sample {
        let mut values = self.base_at(attrs);
        let dir = self.direction(yaw, attrs);
        for (v, d) in values.iter_mut().zip(&dir) {
            *v += yaw * d;
        }
        if self.spec.noise_sigma > 0.0 {
            for v in values.iter_mut() {
                *v += self.spec.noise_sigma * rng.next_normal();
            }
        }
        Sample::new(self.spec.shape.clone(), values).expect("planted sample is finite")
    }

    /// Inverts the planted structure: projects the residual onto each side's
    /// direction and keeps the better-fitting side. This is the closed-loop
    /// yaw probe used in place of a pose estimator.
    pub fn probe_yaw(&self, sample: &Sample, attrs: &BTreeMap<String, i8>) -> Result<f64> {
        if sample.len() != self.dim {
            return Err(Error::ShapeMismatch {
                expected: self.spec.shape.clone(),
                got: sample.shape().to_vec(),
            });
        }
        let base = self.base_at(attrs);
        let residual: Vec<f64> = sample
            .values()
            .iter()
            .zip(&base)
            .map(|(v, b)| v - b)
            .collect();
        let mut best: Option<(f64, f64)> = None; // (residual norm, yaw)
        for side in [1.0, -1.0] {
            let dir = self.direction(side, attrs);
            let dd: f64 = dir.iter().map(|d| d * d).sum();
            if dd == 0.0 {
                continue;
            }
            let proj: f64 = residual.iter().zip(&dir).map(|(r, d)| r * d).sum::<f64>() / dd;
            let yaw = if side > 0.0 {
                proj.max(0.0)
            } else {
                proj.min(0.0)
            };
            let err: f64 = residual
                .iter()
                .zip(&dir)
                .map(|(r, d)| {
                    let e = r - yaw * d;
                    e * e
                })
                .sum();
            if best.map(|(b, _)| err < b).unwrap_or(true) {
                best = Some((err, yaw));
            }
        }
        best.map(|(_, yaw)| yaw)
            .ok_or_else(|| Error::DegenerateFit("planted directions are all zero".into()))
    }

    /// Generates the configured population with ids `p000000`, `p000001`, ...
    pub fn generate(&self) -> Result<Vec<DatasetRecord>> {
        let mut rng = RngStream::new(self.spec.seed);
        let mut out = Vec::new();
        let mut serial = 0usize;
        for cluster in &self.spec.population {
            for _ in 0..cluster.count {
                let yaw = if cluster.yaw_jitter > 0.0 {
                    cluster.theta + (2.0 * rng.next_uniform() - 1.0) * cluster.yaw_jitter
                } else {
                    cluster.theta
                };
                let yaw = yaw.clamp(-180.0, 180.0);
                let sample = self.sample_at(yaw, &cluster.attrs, &mut rng);
                out.push(DatasetRecord {
                    id: format!("p{serial:06}"),
                    sample,
                    yaw,
                    pitch: 0.0,
                    roll: 0.0,
                    light: cluster.light,
                    attrs: cluster.attrs.clone(),
                });
                serial += 1;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    fn image_record(id: &str, yaw: f64, light: Light, pixels: Vec<f64>) -> DatasetRecord {
        DatasetRecord {
            id: id.into(),
            sample: Sample::new(vec![2, 2], pixels).unwrap(),
            yaw,
            pitch: 1.5,
            roll: -0.5,
            light,
            attrs: BTreeMap::from([("male".to_string(), 1i8)]),
        }
    }

    #[test]
    fn load_join_happy_path() {
        let dir = tempfile::tempdir().unwrap();
        let attrs = write_file(dir.path(), "a.csv", "id,male,smiling\n000042,1,-1\n000043,-1,1\n");
        let pose = write_file(dir.path(), "p.csv", "000042,-12.3,1.0,0.4\n000043,5.0,0.0,0.0\n");
        let light = write_file(dir.path(), "l.csv", "000042,LEFT\n000043,CENTER\n");
        let report = load_annotations(&attrs, &pose, &light).unwrap();
        assert_eq!(report.records.len(), 2);
        assert_eq!(report.dropped, 0);
        let r = &report.records[0];
        assert_eq!(r.id, "000042");
        assert_eq!(r.yaw, -12.3);
        assert_eq!(r.light, Light::Left);
        assert_eq!(r.attrs["male"], 1);
        assert_eq!(r.attrs["smiling"], -1);
    }

    #[test]
    fn zero_attribute_value_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let attrs = write_file(dir.path(), "a.csv", "id,male\n000001,1\n000002,0\n");
        let pose = write_file(dir.path(), "p.csv", "000001,0,0,0\n");
        let light = write_file(dir.path(), "l.csv", "000001,LEFT\n");
        let err = load_annotations(&attrs, &pose, &light).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_column_count_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let attrs = write_file(dir.path(), "a.csv", "id,male\nx,1\n");
        let pose = write_file(dir.path(), "p.csv", "x,1.0,2.0\n");
        let light = write_file(dir.path(), "l.csv", "x,LEFT\n");
        assert!(matches!(
            load_annotations(&attrs, &pose, &light).unwrap_err(),
            Error::Parse { .. }
        ));
    }

    #[test]
    fn empty_intersection_warns_instead_of_failing() {
        let dir = tempfile::tempdir().unwrap();
        let attrs = write_file(dir.path(), "a.csv", "id,male\naaa,1\n");
        let pose = write_file(dir.path(), "p.csv", "bbb,0,0,0\n");
        let light = write_file(dir.path(), "l.csv", "ccc,LEFT\n");
        let report = load_annotations(&attrs, &pose, &light).unwrap();
        assert!(report.records.is_empty());
        assert_eq!(report.dropped, 3);
    }

    #[test]
    fn annotations_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let attrs = write_file(dir.path(), "a.csv", "id,male\nx,1\ny,-1\n");
        let pose = write_file(dir.path(), "p.csv", "x,-12.325,1.75,0.5\ny,44.0,0.125,-3.5\n");
        let light = write_file(dir.path(), "l.csv", "x,LEFT\ny,RIGHT\n");
        let first = load_annotations(&attrs, &pose, &light).unwrap();
        let (a2, p2, l2) = (
            dir.path().join("a2.csv"),
            dir.path().join("p2.csv"),
            dir.path().join("l2.csv"),
        );
        write_annotations(&first.records, &a2, &p2, &l2).unwrap();
        let second = load_annotations(&a2, &p2, &l2).unwrap();
        assert_eq!(first.records, second.records);
    }

    #[test]
    fn flip_is_an_involution() {
        let r = image_record("a", 45.0, Light::Right, vec![1.0, 2.0, 3.0, 4.0]);
        let f = flip_record(&r).unwrap();
        assert_eq!(f.yaw, -45.0);
        assert_eq!(f.roll, 0.5);
        assert_eq!(f.pitch, r.pitch);
        assert_eq!(f.light, Light::Left);
        assert_eq!(f.sample.values(), &[2.0, 1.0, 4.0, 3.0]);
        assert_eq!(f.attrs, r.attrs);
        let ff = flip_record(&f).unwrap();
        assert_eq!(ff, r);
    }

    #[test]
    fn center_light_fixed_under_flip() {
        let r = image_record("a", 10.0, Light::Center, vec![0.0; 4]);
        assert_eq!(flip_record(&r).unwrap().light, Light::Center);
    }

    #[test]
    fn flip_rejects_flat_vectors() {
        let mut r = image_record("a", 0.0, Light::Center, vec![0.0; 4]);
        r.sample = Sample::from_vec(vec![0.0; 4]).unwrap();
        assert!(flip_record(&r).is_err());
    }

    #[test]
    fn flip_preserves_class_variance() {
        let cluster: Vec<DatasetRecord> = (0..4)
            .map(|i| image_record(&format!("r{i}"), 5.0, Light::Left, vec![i as f64, 1.0, 2.0, 0.5 * i as f64]))
            .collect();
        let flipped: Vec<DatasetRecord> =
            cluster.iter().map(|r| flip_record(r).unwrap()).collect();
        let a = class_stats(&cluster).unwrap();
        let b = class_stats(&flipped).unwrap();
        assert!((a.variance - b.variance).abs() < 1e-15);
    }

    #[test]
    fn exact_match_never_widens() {
        let records = vec![image_record("a", -45.0, Light::Left, vec![0.0; 4])];
        let q = FilterQuery {
            theta: -45.0,
            delta0: 2.0,
            attrs: BTreeMap::new(),
            light: LightFilter::Left,
            min_count: 1,
            max_widenings: 5,
        };
        let out = filter_cluster(&records, &q).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.widenings, 0);
        assert!(!out.shortfall);
    }

    #[test]
    fn mirror_match_enters_flipped() {
        // A +44 yaw, RIGHT-lit record must satisfy a theta=-45, LEFT query
        // after flipping.
        let records = vec![image_record("a", 44.0, Light::Right, vec![1.0, 2.0, 3.0, 4.0])];
        let q = FilterQuery {
            theta: -45.0,
            delta0: 2.0,
            attrs: BTreeMap::new(),
            light: LightFilter::Left,
            min_count: 1,
            max_widenings: 0,
        };
        let out = filter_cluster(&records, &q).unwrap();
        assert_eq!(out.records.len(), 1);
        let got = &out.records[0];
        assert_eq!(got.yaw, -44.0);
        assert_eq!(got.light, Light::Left);
        assert_eq!(got.sample.values(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn widening_doubles_until_enough() {
        let records: Vec<DatasetRecord> = (0..20)
            .map(|i| image_record(&format!("r{i:02}"), i as f64, Light::Center, vec![0.0; 4]))
            .collect();
        let q = FilterQuery {
            theta: 0.0,
            delta0: 1.0,
            attrs: BTreeMap::new(),
            light: LightFilter::Center,
            min_count: 6,
            max_widenings: 5,
        };
        let out = filter_cluster(&records, &q).unwrap();
        // Window [-2, 2] (one widening) holds yaws {0, 1, 2} plus their
        // mirrors; exactly 6 candidates.
        assert_eq!(out.records.len(), 6);
        assert!(!out.shortfall);
        assert_eq!(out.final_delta, 2.0);
        assert_eq!(out.widenings, 1);
        let worst = out
            .records
            .iter()
            .map(|r| r.yaw.abs())
            .fold(0.0f64, f64::max);
        assert!(worst <= 2.0);
    }

    #[test]
    fn shortfall_is_flagged_not_an_error() {
        let records = vec![image_record("a", 0.0, Light::Center, vec![0.0; 4])];
        let q = FilterQuery {
            theta: 0.0,
            delta0: 1.0,
            attrs: BTreeMap::new(),
            light: LightFilter::Center,
            min_count: 10,
            max_widenings: 2,
        };
        let out = filter_cluster(&records, &q).unwrap();
        assert!(out.shortfall);
        assert_eq!(out.widenings, 2);
        // Original plus its own mirror (yaw 0, center light).
        assert_eq!(out.records.len(), 2);
    }

    #[test]
    fn nearest_selection_matches_brute_force() {
        // Independent oracle: enumerate candidates (originals + mirrors) at
        // the final window, sort, take min_count.
        let mut rng = RngStream::new(77);
        let records: Vec<DatasetRecord> = (0..1000)
            .map(|i| {
                let yaw = (rng.next_uniform() - 0.5) * 360.0;
                let light = match rng.next_below(3) {
                    0 => Light::Left,
                    1 => Light::Center,
                    _ => Light::Right,
                };
                image_record(&format!("r{i:04}"), yaw, light, vec![0.0; 4])
            })
            .collect();
        let q = FilterQuery {
            theta: 0.0,
            delta0: 2.0,
            attrs: BTreeMap::new(),
            light: LightFilter::Any,
            min_count: 100,
            max_widenings: 8,
        };
        let out = filter_cluster(&records, &q).unwrap();
        assert_eq!(out.records.len(), 100);

        let mut oracle: Vec<f64> = Vec::new();
        for r in &records {
            if (r.yaw - q.theta).abs() <= out.final_delta {
                oracle.push((r.yaw - q.theta).abs());
            }
            if (-r.yaw - q.theta).abs() <= out.final_delta {
                oracle.push((-r.yaw - q.theta).abs());
            }
        }
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let worst = out
            .records
            .iter()
            .map(|r| (r.yaw - q.theta).abs())
            .fold(0.0f64, f64::max);
        assert_eq!(worst, oracle[99]);
    }

    #[test]
    fn class_stats_examples() {
        let identical: Vec<DatasetRecord> = (0..3)
            .map(|i| image_record(&format!("r{i}"), 0.0, Light::Center, vec![1.0, 2.0, 3.0, 4.0]))
            .collect();
        let s = class_stats(&identical).unwrap();
        assert_eq!(s.variance, 0.0);
        assert_eq!(s.centroid.values(), &[1.0, 2.0, 3.0, 4.0]);

        // Two scalar samples {0, 2}: centroid 1, population variance 1.
        let scalars: Vec<DatasetRecord> = [0.0, 2.0]
            .iter()
            .map(|&v| DatasetRecord {
                id: format!("s{v}"),
                sample: Sample::scalar(v).unwrap(),
                yaw: 0.0,
                pitch: 0.0,
                roll: 0.0,
                light: Light::Center,
                attrs: BTreeMap::new(),
            })
            .collect();
        let s = class_stats(&scalars).unwrap();
        assert_eq!(s.centroid.values(), &[1.0]);
        assert_eq!(s.variance, 1.0);
        assert!(class_stats(&[]).is_err());
    }

    #[test]
    fn centroid_mse_unit_separation() {
        let zeros: Vec<DatasetRecord> = vec![DatasetRecord {
            id: "z".into(),
            sample: Sample::from_vec(vec![0.0; 5]).unwrap(),
            yaw: 0.0,
            pitch: 0.0,
            roll: 0.0,
            light: Light::Center,
            attrs: BTreeMap::new(),
        }];
        let ones: Vec<DatasetRecord> = vec![DatasetRecord {
            id: "o".into(),
            sample: Sample::from_vec(vec![1.0; 5]).unwrap(),
            ..zeros[0].clone()
        }];
        let a = class_stats(&zeros).unwrap();
        let b = class_stats(&ones).unwrap();
        assert_eq!(centroid_mse(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn histogram_single_bin_and_fractions() {
        let h = yaw_histogram(&[0.0, 0.0, 0.0], 10.0).unwrap();
        assert_eq!(h.bins.len(), 1);
        assert_eq!(h.bins[0].count, 3);
        assert_eq!(h.bins[0].lo, 0.0);

        let mut rng = RngStream::new(5);
        let yaws: Vec<f64> = (0..500).map(|_| (rng.next_uniform() - 0.5) * 300.0).collect();
        let h = yaw_histogram(&yaws, 7.5).unwrap();
        let sum: f64 = h.fractions().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(yaw_histogram(&[], 10.0).is_err());
        assert!(yaw_histogram(&[0.0], 0.0).is_err());
    }

    #[test]
    fn planted_probe_inverts_generator() {
        let spec = PlantedSpec {
            shape: vec![4, 4],
            base: None,
            dir_pos: (0..16).map(|i| 0.01 * (i as f64 + 1.0)).collect(),
            dir_neg: (0..16).map(|i| 0.02 * (16.0 - i as f64)).collect(),
            attr_shifts: BTreeMap::from([("male".to_string(), vec![0.5; 16])]),
            attr_dir_shifts: BTreeMap::new(),
            noise_sigma: 0.0,
            seed: 1,
            population: vec![],
        };
        let model = PlantedModel::new(spec).unwrap();
        let attrs = BTreeMap::from([("male".to_string(), 1i8)]);
        let mut rng = RngStream::new(0);
        for &yaw in &[-35.0, -10.0, 0.0, 12.5, 40.0] {
            let s = model.sample_at(yaw, &attrs, &mut rng);
            let probed = model.probe_yaw(&s, &attrs).unwrap();
            assert!((probed - yaw).abs() < 1e-9, "yaw {yaw} probed {probed}");
        }
    }

    #[test]
    fn planted_generation_is_seeded_and_counted() {
        let spec = PlantedSpec {
            shape: vec![4],
            base: Some(vec![1.0; 4]),
            dir_pos: vec![0.1; 4],
            dir_neg: vec![0.1; 4],
            attr_shifts: BTreeMap::new(),
            attr_dir_shifts: BTreeMap::new(),
            noise_sigma: 0.05,
            seed: 9,
            population: vec![
                PlantedCluster {
                    theta: 0.0,
                    count: 3,
                    yaw_jitter: 1.0,
                    attrs: BTreeMap::new(),
                    light: Light::Center,
                },
                PlantedCluster {
                    theta: 10.0,
                    count: 2,
                    yaw_jitter: 0.0,
                    attrs: BTreeMap::new(),
                    light: Light::Left,
                },
            ],
        };
        let model = PlantedModel::new(spec).unwrap();
        let a = model.generate().unwrap();
        let b = model.generate().unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
        assert_eq!(a[3].yaw, 10.0);
        assert_eq!(a[3].light, Light::Left);
        assert_eq!(a[0].id, "p000000");
    }
}
