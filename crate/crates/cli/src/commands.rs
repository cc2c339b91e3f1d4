use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use d2feat::convnet::{load_weights, WeightBank};
use d2feat::evaluation::{
    default_thresholds, mma_aggregate, mma_for_pair, point_matches, rate_matches, ratio_pdf as build_ratio_pdf,
    PointMatch,
};
use d2feat::geometry::{correspondences_csv, generate_correspondences, overlap_fraction, DepthMap, Homography, PinholeCamera, View};
use d2feat::image::read_pnm;
use d2feat::keypoints::{encode_d2f, keypoints_csv, read_d2f};
use d2feat::loss::{
    d2_loss, descent_demo, gradient_check, to_feature_cells, CellPair, GradientCheckConfig, LossConfig,
};
use d2feat::matcher::{matches_csv, mutual_nn_match, ratio_filter, MatchRecord};
use d2feat::pipeline::{ExtractConfig, Extractor};
use d2feat::selftest::{run_selftest, SelftestOptions};
use d2feat::{Keypoint, Tensor3};

use crate::output::{CliError, CliResult, ExitCode, Outputs, WithPath};
use crate::ModelArgs;

fn print_json(v: &serde_json::Value) {
    // a closed stdout (e.g. piped into `head`) is not an error for us
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(v).expect("JSON values serialize"));
}

fn extractor(model: &ModelArgs) -> CliResult<Extractor> {
    let bank = match &model.weights {
        Some(p) => load_weights(p).at(p)?,
        None => WeightBank::bundled_tiny(),
    };
    let config = ExtractConfig {
        variant: model.variant,
        multiscale: model.multiscale,
        max_keypoints: model.max_keypoints,
        max_edge: model.max_edge,
        final_relu: model.final_relu,
        centered_cells: model.centered_cells,
    };
    let label = model.weights.clone().unwrap_or_else(|| PathBuf::from("<bundled weights>"));
    Extractor::new(bank, config).at(&label)
}

fn check_ratio(ratio: f64) -> CliResult<()> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(CliError::usage(format!("ratio threshold must be in (0, 1], got {ratio}")));
    }
    Ok(())
}

pub fn extract(image: &Path, out: &Path, csv: Option<&Path>, model: &ModelArgs) -> CliResult<ExitCode> {
    let ex = extractor(model)?;
    let img = read_pnm(image).at(image)?;
    let start = Instant::now();
    let kps = ex.extract(&img).at(image)?;
    let elapsed = start.elapsed();
    let mut outputs = Outputs::default();
    outputs.add(out, encode_d2f(&kps, Some(ex.architecture().output_channels())).at(out)?);
    if let Some(csv) = csv {
        outputs.add(csv, keypoints_csv(&kps));
    }
    outputs.commit()?;
    print_json(&json!({
        "command": "extract",
        "image": image.display().to_string(),
        "keypoints": kps.len(),
        "descriptor_dim": ex.architecture().output_channels(),
        "output": out.display().to_string(),
        "elapsed_ms": elapsed.as_secs_f64() * 1e3,
    }));
    Ok(ExitCode::Ok)
}

fn descriptors(kps: &[Keypoint]) -> Vec<Vec<f32>> {
    kps.iter().map(|k| k.descriptor.clone()).collect()
}

fn match_keypoints(a: &[Keypoint], b: &[Keypoint], ratio: f64) -> d2feat::Result<Vec<MatchRecord>> {
    let all = mutual_nn_match(&descriptors(a), &descriptors(b))?;
    Ok(ratio_filter(&all, ratio))
}

pub fn match_files(a: &Path, b: &Path, ratio: f64, out: &Path) -> CliResult<ExitCode> {
    check_ratio(ratio)?;
    let ka = read_d2f(a).at(a)?;
    let kb = read_d2f(b).at(b)?;
    let start = Instant::now();
    let matches = match_keypoints(&ka, &kb, ratio).at(b)?;
    let elapsed = start.elapsed();
    let mut outputs = Outputs::default();
    outputs.add(out, matches_csv(&matches));
    outputs.commit()?;
    print_json(&json!({
        "command": "match",
        "keypoints_a": ka.len(),
        "keypoints_b": kb.len(),
        "matches": matches.len(),
        "output": out.display().to_string(),
        "elapsed_ms": elapsed.as_secs_f64() * 1e3,
    }));
    Ok(ExitCode::Ok)
}

struct PairSpec {
    a: PathBuf,
    b: PathBuf,
    homography: PathBuf,
}

fn read_pairs(path: &Path) -> CliResult<Vec<PairSpec>> {
    let text = fs::read_to_string(path).at(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(CliError::new(
                ExitCode::Format,
                format!("{}:{}: expected `imageA imageB H-file`, got {} fields", path.display(), n + 1, fields.len()),
            ));
        }
        let p = |s: &str| base.join(s);
        pairs.push(PairSpec { a: p(fields[0]), b: p(fields[1]), homography: p(fields[2]) });
    }
    if pairs.is_empty() {
        return Err(CliError::new(ExitCode::Format, format!("{}: no pairs listed", path.display())));
    }
    Ok(pairs)
}

fn load_features(path: &Path, ex: &Extractor) -> CliResult<Vec<Keypoint>> {
    if path.extension().is_some_and(|e| e == "d2f") {
        read_d2f(path).at(path)
    } else {
        let img = read_pnm(path).at(path)?;
        ex.extract(&img).at(path)
    }
}

struct EvaluatedPair {
    features: usize,
    records: Vec<MatchRecord>,
    points: Vec<PointMatch>,
    homography: Homography,
}

fn evaluate_pairs(pairs_file: &Path, ratio: f64, model: &ModelArgs) -> CliResult<Vec<EvaluatedPair>> {
    check_ratio(ratio)?;
    let pairs = read_pairs(pairs_file)?;
    let ex = extractor(model)?;
    // Validate every homography before the expensive part.
    let homographies = pairs
        .iter()
        .map(|p| Homography::load(&p.homography).at(&p.homography))
        .collect::<CliResult<Vec<_>>>()?;
    pairs
        .iter()
        .zip(homographies)
        .map(|(p, homography)| {
            let ka = load_features(&p.a, &ex)?;
            let kb = load_features(&p.b, &ex)?;
            let records = match_keypoints(&ka, &kb, ratio).at(&p.b)?;
            let points = point_matches(&records, &ka, &kb).at(&p.b)?;
            Ok(EvaluatedPair { features: ka.len(), records, points, homography })
        })
        .collect()
}

pub fn eval_mma(pairs_file: &Path, out: &Path, ratio: f64, model: &ModelArgs) -> CliResult<ExitCode> {
    let evaluated = evaluate_pairs(pairs_file, ratio, model)?;
    let thresholds = default_thresholds();
    let per_pair = evaluated
        .iter()
        .map(|e| mma_for_pair(&e.points, &e.homography, &thresholds, e.features))
        .collect();
    let curve = mma_aggregate(&thresholds, per_pair).at(pairs_file)?;
    let mut outputs = Outputs::default();
    outputs.add(out, curve.to_csv());
    outputs.commit()?;
    print_json(&json!({
        "command": "eval-mma",
        "pairs": curve.pairs.len(),
        "thresholds": curve.thresholds,
        "mma": curve.mma,
        "per_pair": curve.pairs,
        "output": out.display().to_string(),
    }));
    Ok(ExitCode::Ok)
}

pub fn ratio_pdf(pairs_file: &Path, out: &Path, bins: usize, threshold: f64, model: &ModelArgs) -> CliResult<ExitCode> {
    check_ratio(threshold)?;
    if bins < 2 {
        return Err(CliError::usage(format!("--bins must be at least 2, got {bins}")));
    }
    let evaluated = evaluate_pairs(pairs_file, 1.0, model)?;
    let rated: Vec<_> = evaluated
        .iter()
        .flat_map(|e| rate_matches(&e.records, &e.points, &e.homography))
        .collect();
    let pdf = build_ratio_pdf(&rated, bins, threshold).at(pairs_file)?;
    let mut outputs = Outputs::default();
    outputs.add(out, pdf.to_csv());
    outputs.commit()?;
    print_json(&json!({
        "command": "ratio-pdf",
        "correct": pdf.correct_count,
        "discarded": pdf.discarded_count,
        "incorrect": pdf.incorrect_count,
        "threshold": threshold,
        "incorrect_filtered": pdf.incorrect_filtered,
        "correct_lost": pdf.correct_lost,
        "output": out.display().to_string(),
    }));
    Ok(ExitCode::Ok)
}

#[allow(clippy::too_many_arguments)]
pub fn gen_corr(
    depth1: &Path,
    camera1: &Path,
    depth2: &Path,
    camera2: &Path,
    tolerance: f64,
    samples: usize,
    seed: u64,
    out: &Path,
) -> CliResult<ExitCode> {
    if !(tolerance > 0.0) {
        return Err(CliError::usage(format!("--tolerance must be positive, got {tolerance}")));
    }
    if samples == 0 {
        return Err(CliError::usage("--samples must be at least 1"));
    }
    let v1 = View { camera: PinholeCamera::load(camera1).at(camera1)?, depth: DepthMap::load(depth1).at(depth1)? };
    let v2 = View { camera: PinholeCamera::load(camera2).at(camera2)?, depth: DepthMap::load(depth2).at(depth2)? };
    let corr = generate_correspondences(&v1, &v2, tolerance);
    let overlap = overlap_fraction(&v1, &v2, samples, tolerance, seed).at(depth2)?;
    let mut outputs = Outputs::default();
    outputs.add(out, correspondences_csv(&corr));
    outputs.commit()?;
    print_json(&json!({
        "command": "gen-corr",
        "correspondences": corr.len(),
        "overlap_fraction": overlap,
        "output": out.display().to_string(),
    }));
    Ok(ExitCode::Ok)
}

#[derive(Args, Debug)]
pub struct LossCheckArgs {
    /// Random feature-map height.
    #[arg(long, default_value_t = 8)]
    h: usize,
    /// Random feature-map width.
    #[arg(long, default_value_t = 8)]
    w: usize,
    /// Random feature-map channels.
    #[arg(long, default_value_t = 4)]
    c: usize,
    /// Safe radius K (feature cells).
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Margin M.
    #[arg(long, default_value_t = 1.0)]
    m: f64,
    /// Random correspondences to draw.
    #[arg(long, default_value_t = 3)]
    correspondences: usize,
    #[arg(long, default_value_t = 64)]
    probes: usize,
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Feature map of image 1 (`.d2wb`) instead of a random one.
    #[arg(long, requires_all = ["f2", "corr"])]
    f1: Option<PathBuf>,
    #[arg(long)]
    f2: Option<PathBuf>,
    /// Pixel correspondences (`x1,y1,x2,y2` CSV) for the given maps.
    #[arg(long)]
    corr: Option<PathBuf>,
    /// Pixels per feature cell used to convert `--corr`.
    #[arg(long, default_value_t = 8)]
    stride: usize,
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor3 {
    Tensor3::from_fn(h, w, c, |_, _, _| rng.gen_range(0.05..1.05))
}

/// Cells that leave at least one negative candidate outside radius `k`.
fn minable_cells(h: usize, w: usize, k: usize) -> Vec<(usize, usize)> {
    (0..h)
        .flat_map(|i| (0..w).map(move |j| (i, j)))
        .filter(|&(i, j)| i.max(h - 1 - i) > k || j.max(w - 1 - j) > k)
        .collect()
}

fn read_corr_csv(path: &Path) -> CliResult<Vec<d2feat::geometry::Correspondence>> {
    let text = fs::read_to_string(path).at(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let v: Vec<f64> = line.split(',').map(|s| s.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| {
                CliError::new(ExitCode::Format, format!("{}:{}: bad number", path.display(), n + 2))
            })?;
            if v.len() != 4 {
                return Err(CliError::new(ExitCode::Format, format!("{}:{}: expected 4 columns", path.display(), n + 2)));
            }
            Ok(d2feat::geometry::Correspondence { point_a: (v[0], v[1]), point_b: (v[2], v[3]) })
        })
        .collect()
}

fn load_map(path: &Path) -> CliResult<Tensor3> {
    d2feat::container::Container::load(path)
        .and_then(|c| c.tensor(d2feat::container::DATA_ENTRY))
        .at(path)
}

pub fn loss_check(args: &LossCheckArgs) -> CliResult<ExitCode> {
    if !(args.m > 0.0) || !(args.eps > 0.0) || args.stride == 0 {
        return Err(CliError::usage("--m, --eps and --stride must be positive"));
    }
    let cfg = LossConfig { margin: args.m, safe_radius: args.k };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (f1, f2, pairs): (Tensor3, Tensor3, Vec<CellPair>) = match (&args.f1, &args.f2, &args.corr) {
        (Some(p1), Some(p2), Some(pc)) => {
            let f1 = load_map(p1)?;
            let f2 = load_map(p2)?;
            let corr = read_corr_csv(pc)?;
            let pairs = to_feature_cells(&corr, args.stride, (f1.height(), f1.width()), (f2.height(), f2.width()));
            (f1, f2, pairs)
        }
        _ => {
            if args.h == 0 || args.w == 0 || args.c == 0 || args.correspondences == 0 {
                return Err(CliError::usage("--h, --w, --c and --correspondences must be positive"));
            }
            let cells = minable_cells(args.h, args.w, args.k);
            if cells.is_empty() {
                return Err(CliError::new(
                    ExitCode::Shape,
                    format!("a {}x{} map leaves no negatives outside K = {}", args.h, args.w, args.k),
                ));
            }
            let f1 = random_map(&mut rng, args.h, args.w, args.c);
            let f2 = random_map(&mut rng, args.h, args.w, args.c);
            let pairs = (0..args.correspondences)
                .map(|_| CellPair { a: cells[rng.gen_range(0..cells.len())], b: cells[rng.gen_range(0..cells.len())] })
                .collect();
            (f1, f2, pairs)
        }
    };
    let label = args.f1.clone().unwrap_or_else(|| PathBuf::from("<random maps>"));
    let breakdown = d2_loss(&f1, &f2, &pairs, &cfg).at(&label)?;
    let check = GradientCheckConfig { probes: args.probes, eps: args.eps, tolerance: args.tolerance, seed: args.seed };
    let report = gradient_check(&f1, &f2, &pairs, &cfg, &check).at(&label)?;
    print_json(&json!({
        "command": "loss-check",
        "config": cfg,
        "loss": breakdown,
        "gradient": report,
    }));
    Ok(if report.passed { ExitCode::Ok } else { ExitCode::TestFailure })
}

pub fn loss_demo(h: usize, w: usize, c: usize, n: usize, steps: usize, lr: f64, seed: u64) -> CliResult<ExitCode> {
    let cfg = LossConfig::default();
    let cells = minable_cells(h, w, cfg.safe_radius);
    if cells.is_empty() || c == 0 || n == 0 {
        return Err(CliError::new(ExitCode::Shape, "map too small for the default safe radius".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f1 = random_map(&mut rng, h, w, c);
    // image 2 is a noisy copy, so matching cells start out similar
    let f2 = Tensor3::from_fn(h, w, c, |i, j, k| (f1.get(i, j, k) + rng.gen_range(-0.3..0.3)).max(0.05));
    let pairs: Vec<CellPair> = (0..n)
        .map(|_| {
            let a = cells[rng.gen_range(0..cells.len())];
            CellPair { a, b: a }
        })
        .collect();
    let history = descent_demo(&f1, &f2, &pairs, &cfg, steps, lr).map_err(CliError::from)?;
    print_json(&json!({
        "command": "loss-demo",
        "steps": steps,
        "learning_rate": lr,
        "loss": history,
    }));
    Ok(ExitCode::Ok)
}

pub fn selftest(fixtures: Option<&Path>, probes: usize, seed: u64) -> CliResult<ExitCode> {
    if probes == 0 {
        return Err(CliError::usage("--probes must be at least 1"));
    }
    let start = Instant::now();
    let report = run_selftest(fixtures, &SelftestOptions { probes, seed });
    print_json(&json!({
        "command": "selftest",
        "passed": report.passed,
        "suites": report.suites,
        "elapsed_ms": start.elapsed().as_secs_f64() * 1e3,
    }));
    Ok(if report.passed { ExitCode::Ok } else { ExitCode::TestFailure })
}
