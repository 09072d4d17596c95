//! Run configuration and the batch commands behind the command line tool.
//!
//! The config is flat `key = value` text with `#` comments; lists are comma
//! separated. Unknown or repeated keys are rejected.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Matrix2xX;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{sample_haar_rotation, GramMatrix};
use crate::imaging::{build_design_matrix, candidate_mask, estimate_mass, render_profile, PixelGrid, Profile};
use crate::io::{self, ReadAudit, Report};
use crate::mixture::{pyramid_fixture, RadialMixture3};
use crate::profile_estimation::{deconvolve_profile, reject_outlier_profiles, DeconvolutionSettings, ProfileEstimate, RejectReason};
use crate::reconstruction::{
    align_gram, align_mixture, assemble, default_sigma2_grid, fitted_profile, render_volume, residual_map, shape_distance, sigma2_grid_search,
    RowSelection,
};
use crate::rng::{rng_from_seed, split_seed};
use crate::shape_recovery::{average_gram, diagnosticity, rank3_truncate, recover_from_classes, ProfileClass};
use crate::sparse_solver::LarsOptions;

#[derive(Debug, Clone, PartialEq)]
pub enum MixtureSource {
    None,
    Pyramid,
    File(PathBuf),
}

/// Profile ids making up one class; the first listed is the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub class_id: usize,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub source: MixtureSource,
    pub t: usize,
    pub extent: f64,
    pub noise_sd: f64,
    pub n: usize,
    pub w: f64,
    pub kernel_sigma2: f64,
    pub t_factor: f64,
    pub expected_k: usize,
    pub max_steps: usize,
    pub allow_negative: bool,
    pub classes: Vec<ClassSpec>,
    pub full_k: Option<usize>,
    pub roman_samples: usize,
    pub sigma2_grid: Option<Vec<f64>>,
    /// Rows of the weight regression lie within this many kernel σ of a mean.
    pub weight_radius: f64,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub volume_v: usize,
    pub volume_extent: f64,
    pub residual_samples: usize,
    pub out_dir: PathBuf,
    pub stack: PathBuf,
    pub rotations: PathBuf,
    pub estimates: PathBuf,
    pub reconstruction: PathBuf,
    pub gram: PathBuf,
    pub volume: PathBuf,
    pub residuals: PathBuf,
    pub render_dir: PathBuf,
    pub truth_gram: Option<PathBuf>,
    pub path_dump: Option<PathBuf>,
    /// Compare labels as given in evaluate instead of searching for the best match.
    pub keep_labels: bool,
    /// SHA-256 of the config text (hex), for provenance.
    pub digest: String,
}

const KEYS: &[&str] = &[
    "fixture",
    "mixture",
    "T",
    "L",
    "noise_sd",
    "N",
    "w",
    "kernel_sigma2",
    "t_factor",
    "expected_K",
    "max_steps",
    "allow_negative",
    "full_K",
    "roman_samples",
    "sigma2_grid",
    "weight_radius",
    "seed",
    "jobs",
    "volume_V",
    "volume_extent",
    "residual_samples",
    "out_dir",
    "stack",
    "rotations",
    "estimates",
    "reconstruction",
    "gram",
    "volume",
    "residuals",
    "render_dir",
    "truth_gram",
    "path_dump",
    "align",
];

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Decimal number, `pi`, or `pi/x`.
fn parse_number(key: &str, v: &str) -> Result<f64> {
    let x = if v == "pi" {
        PI
    } else if let Some(d) = v.strip_prefix("pi/") {
        d.trim().parse::<f64>().map(|d| PI / d).map_err(|_| cfg_err(format!("{key}: cannot parse {v:?}")))?
    } else {
        v.parse::<f64>().map_err(|_| cfg_err(format!("{key}: cannot parse {v:?} as a number")))?
    };
    if !x.is_finite() {
        return Err(cfg_err(format!("{key}: value must be finite")));
    }
    Ok(x)
}

fn positive(key: &str, v: &str) -> Result<f64> {
    let x = parse_number(key, v)?;
    if x <= 0.0 {
        return Err(cfg_err(format!("{key} must be positive, got {v}")));
    }
    Ok(x)
}

fn integer(key: &str, v: &str) -> Result<usize> {
    v.parse::<usize>().map_err(|_| cfg_err(format!("{key}: expected a nonnegative integer, got {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(cfg_err(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| cfg_err(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let known = KEYS.contains(&k) || k.strip_prefix("class.").is_some_and(|id| id.parse::<usize>().is_ok());
            if !known {
                return Err(cfg_err(format!("line {}: unknown key {k:?}", i + 1)));
            }
            if kv.insert(k.to_string(), v.to_string()).is_some() {
                return Err(cfg_err(format!("line {}: key {k:?} given twice", i + 1)));
            }
        }
        let get = |k: &str| kv.get(k).map(String::as_str);

        let source = match (get("fixture"), get("mixture")) {
            (Some(_), Some(_)) => return Err(cfg_err("give either fixture or mixture, not both")),
            (Some("pyramid"), None) => MixtureSource::Pyramid,
            (Some(other), None) => return Err(cfg_err(format!("unknown fixture {other:?}"))),
            (None, Some(p)) => MixtureSource::File(PathBuf::from(p)),
            (None, None) => MixtureSource::None,
        };
        let num = |k: &str, default: f64| get(k).map_or(Ok(default), |v| positive(k, v));
        let int = |k: &str, default: usize| get(k).map_or(Ok(default), |v| integer(k, v));
        let noise_sd = match get("noise_sd") {
            Some(v) => {
                let x = parse_number("noise_sd", v)?;
                if x < 0.0 {
                    return Err(cfg_err("noise_sd must be >= 0"));
                }
                x
            }
            None => 1e-4,
        };
        let sigma2_grid = match get("sigma2_grid") {
            Some(v) => Some(v.split(',').map(|s| positive("sigma2_grid", s.trim())).collect::<Result<Vec<_>>>()?),
            None => None,
        };
        let mut classes = Vec::new();
        for (k, v) in &kv {
            if let Some(id) = k.strip_prefix("class.") {
                let members = v.split(',').map(|s| integer(k, s.trim())).collect::<Result<Vec<_>>>()?;
                if members.is_empty() {
                    return Err(cfg_err(format!("{k} lists no profiles")));
                }
                classes.push(ClassSpec { class_id: id.parse().expect("checked above"), members });
            }
        }
        classes.sort_by_key(|c| c.class_id);
        let t_factor = num("t_factor", 0.95)?;
        if t_factor > 1.0 {
            return Err(cfg_err("t_factor must lie in (0, 1]"));
        }
        let out_dir = PathBuf::from(get("out_dir").unwrap_or("."));
        let path = |k: &str, default: &str| get(k).map_or_else(|| out_dir.join(default), PathBuf::from);
        let jobs = match get("jobs") {
            Some(v) => Some(integer("jobs", v)?).filter(|&j| j > 0),
            None => None,
        };
        let full_k = get("full_K").map(|v| integer("full_K", v)).transpose()?;
        let cfg = RunConfig {
            source,
            t: int("T", 64)?,
            extent: num("L", 2.2)?,
            noise_sd,
            n: int("N", 150)?,
            w: num("w", PI / 3.0)?,
            kernel_sigma2: num("kernel_sigma2", 0.46 * 0.46)?,
            t_factor,
            expected_k: int("expected_K", 4)?,
            max_steps: int("max_steps", 2000)?,
            allow_negative: get("allow_negative").map_or(Ok(false), |v| boolean("allow_negative", v))?,
            classes,
            full_k,
            roman_samples: int("roman_samples", 1000)?,
            sigma2_grid,
            weight_radius: num("weight_radius", 3.0)?,
            seed: get("seed").map_or(Ok(1), |v| v.parse::<u64>().map_err(|_| cfg_err(format!("seed: cannot parse {v:?}"))))?,
            jobs,
            volume_v: int("volume_V", 48)?,
            volume_extent: num("volume_extent", 2.0)?,
            residual_samples: int("residual_samples", 3)?,
            stack: path("stack", "profiles.pfs"),
            rotations: path("rotations", "rotations.rot"),
            estimates: path("estimates", "estimates.txt"),
            reconstruction: path("reconstruction", "mixture.rm3"),
            gram: path("gram", "gram.txt"),
            volume: path("volume", "volume.vol"),
            residuals: path("residuals", "residuals.pfs"),
            render_dir: path("render_dir", "render"),
            truth_gram: get("truth_gram").map(PathBuf::from),
            path_dump: get("path_dump").map(PathBuf::from),
            keep_labels: match get("align") {
                None | Some("auto") => false,
                Some("labels") => true,
                Some(other) => return Err(cfg_err(format!("align: expected auto or labels, got {other:?}"))),
            },
            out_dir,
            digest: format!("{:x}", Sha256::digest(text.as_bytes())),
        };
        if cfg.t < 2 {
            return Err(cfg_err("T must be at least 2"));
        }
        if cfg.max_steps == 0 || cfg.roman_samples == 0 || cfg.expected_k == 0 {
            return Err(cfg_err("max_steps, roman_samples and expected_K must be positive"));
        }
        if cfg.volume_v < 2 {
            return Err(cfg_err("volume_V must be at least 2"));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, audit: &ReadAudit) -> Result<RunConfig> {
        let text = audit.read_to_string(path).map_err(|e| cfg_err(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    fn lars_options(&self) -> LarsOptions {
        LarsOptions { max_steps: self.max_steps, nonnegative: !self.allow_negative, t_limit: None }
    }

    fn provenance(&self) -> String {
        format!("config-sha256={} seed={}", self.digest, self.seed)
    }
}

/// Batch subcommands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Deconvolve,
    Reconstruct,
    Evaluate,
    Render,
}

/// Runs `command` on a thread pool capped at `cfg.jobs` workers.
pub fn run(command: Command, cfg: &RunConfig, audit: &ReadAudit) -> Result<Report> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cfg.jobs {
        builder = builder.num_threads(j);
    }
    let pool = builder.build().map_err(|e| cfg_err(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match command {
        Command::Simulate => simulate(cfg, audit),
        Command::Deconvolve => deconvolve(cfg, audit),
        Command::Reconstruct => reconstruct(cfg, audit),
        Command::Evaluate => evaluate(cfg, audit),
        Command::Render => render(cfg, audit),
    })
}

fn load_truth(cfg: &RunConfig, audit: &ReadAudit) -> Result<Option<RadialMixture3>> {
    match &cfg.source {
        MixtureSource::None => Ok(None),
        MixtureSource::Pyramid => Ok(Some(pyramid_fixture())),
        MixtureSource::File(p) => Ok(Some(io::parse_rm3(&audit.read_to_string(p)?)?)),
    }
}

fn read_stack(cfg: &RunConfig, audit: &ReadAudit) -> Result<Vec<Profile>> {
    let profiles = io::parse_pfs1(&audit.read_to_string(&cfg.stack)?)?;
    if let Some(first) = profiles.first() {
        if profiles.iter().any(|p| p.grid != first.grid) {
            return Err(Error::GridMismatch);
        }
    }
    Ok(profiles)
}

fn write_report(path: &Path, report: &Report) -> Result<()> {
    io::write_text(path, &report.format())
}

/// Draws N Haar rotations and noisy profiles; writes the stack and the
/// rotation sidecar.
pub fn simulate(cfg: &RunConfig, audit: &ReadAudit) -> Result<Report> {
    let start = Instant::now();
    if cfg.n == 0 {
        return Err(cfg_err("N must be at least 1"));
    }
    let truth = load_truth(cfg, audit)?.ok_or_else(|| cfg_err("simulate needs `fixture = pyramid` or `mixture = <file>`"))?;
    let grid = PixelGrid::new(cfg.t, cfg.extent)?;
    let drawn: Vec<(Profile, crate::geometry::Rotation3, f64)> = (0..cfg.n)
        .into_par_iter()
        .map(|n| {
            let rotation = sample_haar_rotation(&mut rng_from_seed(split_seed(cfg.seed, 2 * n as u64)));
            let clean = render_profile(&truth, &rotation, &grid, 0.0, 0)?;
            let noisy = render_profile(&truth, &rotation, &grid, cfg.noise_sd, split_seed(cfg.seed, 2 * n as u64 + 1))?.with_id(n);
            let power = clean.pixels.iter().map(|v| v * v).sum::<f64>() / grid.len() as f64;
            Ok((noisy, rotation, power))
        })
        .collect::<Result<Vec<_>>>()?;
    let profiles: Vec<Profile> = drawn.iter().map(|d| d.0.clone()).collect();
    let rotations: Vec<_> = drawn.iter().map(|d| d.1).collect();
    let power = drawn.iter().map(|d| d.2).sum::<f64>() / cfg.n as f64;
    io::write_text(&cfg.stack, &io::format_pfs1(&profiles)?)?;
    io::write_text(&cfg.rotations, &io::format_rotations(&rotations))?;
    let mut r = Report::new();
    r.add("command", "simulate");
    r.add("profiles", cfg.n);
    r.add("T", cfg.t);
    r.add_f("L", cfg.extent);
    r.add_f("noise_sd", cfg.noise_sd);
    r.add_f("signal_power", power);
    if cfg.noise_sd > 0.0 {
        r.add_f("snr", power / (cfg.noise_sd * cfg.noise_sd));
    }
    r.add_f("mass", truth.total_mass());
    r.add("provenance", cfg.provenance());
    log::info!("simulate: {} profiles in {:.2?}", cfg.n, start.elapsed());
    write_report(&cfg.out_dir.join("simulate_report.txt"), &r)?;
    Ok(r)
}

fn empty_estimate(id: usize, mass: f64) -> ProfileEstimate {
    ProfileEstimate { profile_id: id, means2d: Matrix2xX::zeros(0), weights: Vec::new(), labels: Vec::new(), mass, oversized: false }
}

/// Sparse deconvolution of every profile, clustering, ordering and (without
/// class assignments) outlier rejection.
pub fn deconvolve(cfg: &RunConfig, audit: &ReadAudit) -> Result<Report> {
    let start = Instant::now();
    let profiles = read_stack(cfg, audit)?;
    let Some(first) = profiles.first() else {
        return Err(Error::Data("profile stack is empty".into()));
    };
    let grid = first.grid;
    let mass = estimate_mass(&profiles)?;
    let mask = candidate_mask(&grid, cfg.w)?;
    let design = build_design_matrix(&grid, &mask, cfg.kernel_sigma2)?;
    log::info!("deconvolve: {} profiles, {} candidate pixels, mass {:.4}", profiles.len(), mask.len(), mass);
    let settings = DeconvolutionSettings { t_factor: cfg.t_factor, lars: cfg.lars_options() };
    let results: Vec<_> = profiles.par_iter().map(|p| deconvolve_profile(&design, p, mass, &settings)).collect();

    let mut estimates = Vec::new();
    let mut rejected = Vec::new();
    for (p, res) in profiles.iter().zip(results) {
        match res {
            Ok(d) => {
                if let Some(dir) = &cfg.path_dump {
                    io::write_text(&dir.join(format!("profile_{}.path", p.id)), &d.path.dump())?;
                }
                estimates.push(d.estimate);
            }
            Err(Error::EmptySupport | Error::ZeroWeightCluster { .. }) => {
                rejected.push((empty_estimate(p.id, mass), RejectReason::EmptySupport));
            }
            Err(e) => return Err(e),
        }
    }
    let mut k_hist: BTreeMap<usize, usize> = BTreeMap::new();
    for e in &estimates {
        *k_hist.entry(e.k()).or_default() += 1;
    }
    let kept = if cfg.classes.is_empty() {
        let (kept, more) = reject_outlier_profiles(estimates, cfg.expected_k);
        rejected.extend(more);
        kept
    } else {
        estimates
    };
    rejected.sort_by_key(|(e, _)| e.profile_id);
    io::write_text(&cfg.estimates, &io::format_estimates(&kept, &rejected))?;

    let mut r = Report::new();
    r.add("command", "deconvolve");
    r.add("profiles", profiles.len());
    r.add_f("mass", mass);
    r.add("candidate_pixels", mask.len());
    r.add("kept", kept.len());
    for reason in [RejectReason::EmptySupport, RejectReason::ComponentCount, RejectReason::MergedCluster, RejectReason::LeftOutlier] {
        r.add(format!("rejected.{reason}"), rejected.iter().filter(|(_, w)| *w == reason).count());
    }
    for (k, c) in &k_hist {
        r.add(format!("khat.{k}"), c);
    }
    r.add("provenance", cfg.provenance());
    log::info!("deconvolve: kept {} of {} in {:.2?}", kept.len(), profiles.len(), start.elapsed());
    write_report(&cfg.out_dir.join("deconvolve_report.txt"), &r)?;
    Ok(r)
}

/// Gram estimation (single class or class-by-class), global weight and
/// kernel fit, assembly and volume rendering. Never touches the rotation
/// sidecar.
pub fn reconstruct(cfg: &RunConfig, audit: &ReadAudit) -> Result<Report> {
    let start = Instant::now();
    let estimates = io::parse_estimates(&audit.read_to_string(&cfg.estimates)?)?;
    if estimates.is_empty() {
        return Err(Error::Data("no usable profile estimates".into()));
    }
    let profiles = read_stack(cfg, audit)?;
    let by_id: HashMap<usize, &Profile> = profiles.iter().map(|p| (p.id, p)).collect();
    let mut r = Report::new();
    r.add("command", "reconstruct");

    let (raw_gram, gram, completed) = if cfg.classes.is_empty() {
        let k = estimates[0].k();
        if estimates.iter().any(|e| e.k() != k) {
            return Err(cfg_err("estimates have different component counts; assign profiles with class.<id> keys"));
        }
        let raw = average_gram(&estimates.iter().map(ProfileEstimate::centered_means).collect::<Vec<_>>())?;
        let g = rank3_truncate(&raw);
        let completed: Vec<(usize, Matrix2xX<f64>)> = estimates.iter().map(|e| (e.profile_id, e.means2d.clone())).collect();
        (raw, g, completed)
    } else {
        let est_by_id: HashMap<usize, &ProfileEstimate> = estimates.iter().map(|e| (e.profile_id, e)).collect();
        let mut classes = Vec::new();
        for spec in &cfg.classes {
            let members = spec
                .members
                .iter()
                .map(|id| est_by_id.get(id).map(|e| (*e).clone()).ok_or_else(|| cfg_err(format!("class.{}: no estimate for profile {id}", spec.class_id))))
                .collect::<Result<Vec<_>>>()?;
            classes.push(ProfileClass::new(spec.class_id, members, 0)?);
        }
        let full_k = cfg.full_k.unwrap_or_else(|| classes.iter().map(|c| c.declared_k).max().unwrap_or(0));
        let rec = recover_from_classes(&classes, full_k, cfg.roman_samples, cfg.seed)?;
        for c in &rec.classes {
            r.add(format!("class.{}.members", c.class_id), c.aligned.members.len());
            r.add(format!("class.{}.declared_K", c.class_id), c.aligned.declared_k);
            r.add(format!("class.{}.candidates", c.class_id), c.candidates_considered);
            if let Some(d) = c.roman_distance {
                r.add_f(format!("class.{}.roman_distance", c.class_id), d);
                r.add(format!("class.{}.duplicated", c.class_id), format!("{:?}", c.selected.duplicated));
                r.add(format!("class.{}.permutation", c.class_id), format!("{:?}", c.selected.permutation));
            }
        }
        let raw = rec.classes.last().map(|c| c.cumulative.clone()).expect("at least one class");
        (raw, rec.gram.clone(), rec.completed_means())
    };

    let mut used_profiles = Vec::new();
    let mut used_means = Vec::new();
    for (id, m) in &completed {
        let p = by_id.get(id).ok_or_else(|| Error::Data(format!("profile {id} is in the estimates but not in the stack")))?;
        used_profiles.push((*p).clone());
        used_means.push(m.clone());
    }
    let grid = cfg.sigma2_grid.clone().unwrap_or_else(|| default_sigma2_grid(cfg.kernel_sigma2));
    let rows = RowSelection::Within(cfg.weight_radius * cfg.kernel_sigma2.sqrt());
    let fit = sigma2_grid_search(&used_profiles, &used_means, &grid, rows)?;
    let mut result = assemble(&gram, &fit.weights, fit.sigma2)?;
    result.fit_sse = fit.sse;
    result.provenance = cfg.provenance();
    let volume = render_volume(&result.mixture, cfg.volume_v, cfg.volume_extent)?;

    io::write_text(&cfg.reconstruction, &io::format_rm3(&result.mixture))?;
    io::write_text(&cfg.gram, &io::format_gram(&result.gram_estimate, Some(result.mixture.means())))?;
    io::write_text(&cfg.volume, &io::format_vol1(&volume))?;

    r.add("profiles_used", used_profiles.len());
    r.add("K", gram.dim());
    r.add_list("raw_gram_eigenvalues", &raw_gram.eigenvalues());
    r.add_list("gram_eigenvalues", &gram.eigenvalues());
    r.add_f("diagnosticity", diagnosticity(&gram));
    r.add_f("sigma2_hat", fit.sigma2);
    r.add_list("weights", &fit.weights);
    r.add("clamped_weights", format!("{:?}", fit.clamped));
    r.add_f("fit_sse", fit.sse);
    r.add("regression_rows", fit.rows);
    r.add_f("volume_integral", volume.integral());
    r.add("provenance", &result.provenance);
    log::info!("reconstruct: K={} from {} profiles in {:.2?}", gram.dim(), used_profiles.len(), start.elapsed());
    write_report(&cfg.out_dir.join("reconstruct_report.txt"), &r)?;
    Ok(r)
}

/// Compares the reconstruction with the truth: Gram deltas after label
/// alignment, shape distance, weight deltas and residual maps.
pub fn evaluate(cfg: &RunConfig, audit: &ReadAudit) -> Result<Report> {
    let start = Instant::now();
    let truth = load_truth(cfg, audit)?;
    let (estimate_gram, _) = io::parse_gram(&audit.read_to_string(&cfg.gram)?)?;
    let truth_gram: GramMatrix = match (&cfg.truth_gram, &truth) {
        (Some(p), _) => io::parse_gram(&audit.read_to_string(p)?)?.0,
        (None, Some(m)) => m.means().centered().gram(),
        (None, None) => return Err(cfg_err("evaluate needs a truth: fixture, mixture or truth_gram")),
    };
    let recon = if cfg.reconstruction.exists() { Some(io::parse_rm3(&audit.read_to_string(&cfg.reconstruction)?)?) } else { None };
    let weights = match (&truth, &recon) {
        (Some(t), Some(m)) if cfg.truth_gram.is_none() => Some((t.weights(), m.weights())),
        _ => None,
    };
    let (perm, gap) = match weights {
        _ if cfg.keep_labels => {
            if estimate_gram.dim() != truth_gram.dim() {
                return Err(Error::ComponentMismatch(estimate_gram.dim(), truth_gram.dim()));
            }
            ((0..truth_gram.dim()).collect(), estimate_gram.frobenius_distance(&truth_gram)?)
        }
        Some((tw, mw)) => {
            let (perm, gap, _) = align_mixture(&estimate_gram, mw, &truth_gram, tw)?;
            (perm, gap)
        }
        None => align_gram(&estimate_gram, &truth_gram)?,
    };
    let k = truth_gram.dim();
    let mut r = Report::new();
    r.add("command", "evaluate");
    r.add("K", k);
    r.add("alignment", format!("{perm:?}"));
    r.add_f("gram_frobenius", gap);
    for i in 0..k {
        for j in i..k {
            let d = estimate_gram.matrix()[(perm[i], perm[j])] - truth_gram.matrix()[(i, j)];
            r.add_f(format!("gram_delta.{}.{}", i + 1, j + 1), d);
        }
    }
    if let Some((tw, mw)) = weights {
        let deltas: Vec<f64> = (0..k).map(|i| mw[perm[i]] - tw[i]).collect();
        r.add_list("weight_delta", &deltas);
        r.add_f("weight_delta_max", deltas.iter().fold(0.0, |a, d| a.max(d.abs())));
    }
    if let (Some(t), Some(m)) = (&truth, &recon) {
        r.add_f("shape_distance", shape_distance(t, m)?);
        r.add_f("sigma_delta", m.kernel_sigma() - t.kernel_sigma());
    }
    if let Some(m) = &recon {
        if cfg.residual_samples > 0 && cfg.estimates.exists() && cfg.stack.exists() {
            let estimates = io::parse_estimates(&audit.read_to_string(&cfg.estimates)?)?;
            let profiles = read_stack(cfg, audit)?;
            let by_id: HashMap<usize, &Profile> = profiles.iter().map(|p| (p.id, p)).collect();
            let sigma2 = m.kernel_sigma().powi(2);
            let mut maps = Vec::new();
            for e in estimates.iter().filter(|e| e.k() == m.k()).take(cfg.residual_samples) {
                let Some(p) = by_id.get(&e.profile_id) else { continue };
                let fitted = fitted_profile(&p.grid, &e.means2d, m.weights(), sigma2, p.id)?;
                let res = residual_map(p, &fitted)?;
                r.add_f(format!("residual_rms.{}", p.id), (res.norm_squared() / res.len() as f64).sqrt());
                maps.push(Profile::new(p.grid, res, p.id)?);
            }
            if !maps.is_empty() {
                io::write_text(&cfg.residuals, &io::format_pfs1(&maps)?)?;
            }
            r.add("residual_maps", maps.len());
        }
    }
    log::info!("evaluate: Gram gap {gap:.4} in {:.2?}", start.elapsed());
    write_report(&cfg.out_dir.join("evaluate_report.txt"), &r)?;
    Ok(r)
}

/// Volume slices and residual heat maps as PGM images.
pub fn render(cfg: &RunConfig, audit: &ReadAudit) -> Result<Report> {
    let volume = io::parse_vol1(&audit.read_to_string(&cfg.volume)?)?;
    let hi = volume.values.iter().cloned().fold(0.0, f64::max);
    for x in 0..volume.v {
        io::write_pgm(&cfg.render_dir.join(format!("slice_{x:03}.pgm")), &volume.slice(x), 0.0, hi)?;
    }
    let mut r = Report::new();
    r.add("command", "render");
    r.add("slices", volume.v);
    let mut maps = 0;
    if cfg.residuals.exists() {
        for p in io::parse_pfs1(&audit.read_to_string(&cfg.residuals)?)? {
            let a = p.pixels.amax().max(f64::MIN_POSITIVE);
            io::write_pgm(&cfg.render_dir.join(format!("residual_{}.pgm", p.id)), &p.pixels, -a, a)?;
            maps += 1;
        }
    }
    r.add("residual_maps", maps);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = RunConfig::parse("fixture = pyramid\nN = 10 # small\nw = pi/3\n").unwrap();
        assert_eq!(c.source, MixtureSource::Pyramid);
        assert_eq!(c.n, 10);
        assert_eq!(c.t, 64);
        assert!((c.w - PI / 3.0).abs() < 1e-15);
        assert_eq!(c.stack, PathBuf::from("./profiles.pfs"));
        assert_eq!(c.digest.len(), 64);
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(matches!(RunConfig::parse("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("N = 1\nN = 2"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("L = -1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("no equals sign"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("fixture = cube"), Err(Error::Config(_))));
    }

    #[test]
    fn class_lists() {
        let c = RunConfig::parse("class.2 = 5, 6\nclass.1 = 1,2, 3\nfull_K = 6").unwrap();
        assert_eq!(c.classes, vec![ClassSpec { class_id: 1, members: vec![1, 2, 3] }, ClassSpec { class_id: 2, members: vec![5, 6] }]);
        assert_eq!(c.full_k, Some(6));
        assert!(RunConfig::parse("class.x = 1").is_err());
    }

    #[test]
    fn simulate_needs_profiles() {
        let c = RunConfig::parse("fixture = pyramid\nN = 0").unwrap();
        let e = simulate(&c, &ReadAudit::new()).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
