//! Built-in oracle suites over small stored fixtures.
//!
//! Each suite has one `D2WB` fixture holding inputs and the values the
//! literal reference implementations produced for them. A suite passes when
//! the engine reproduces the stored values and the stored values still agree
//! with a fresh oracle evaluation, so both engine regressions and edited
//! fixtures are caught.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::container::{Container, Entry};
use crate::convnet::{conv3x3_forward, ConvWeights};
use crate::detector::{hard_detect, soft_scores, Detection};
use crate::error::{D2Error, Result};
use crate::loss::{
    d2_loss, d2_loss_with_gradient, gradient_check, hardest_negative, CellPair, GradientCheckConfig, LossConfig,
};
use crate::oracle;
use crate::tensor::{l2_normalize_descriptors, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Conv,
    Detection,
    Mining,
    Loss,
    Gradient,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Conv, Suite::Detection, Suite::Mining, Suite::Loss, Suite::Gradient];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Conv => "conv",
            Suite::Detection => "detection",
            Suite::Mining => "mining",
            Suite::Loss => "loss",
            Suite::Gradient => "gradient",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.d2wb", self.name())
    }

    fn embedded(self) -> &'static [u8] {
        match self {
            Suite::Conv => include_bytes!("../fixtures/selftest/conv.d2wb"),
            Suite::Detection => include_bytes!("../fixtures/selftest/detection.d2wb"),
            Suite::Mining => include_bytes!("../fixtures/selftest/mining.d2wb"),
            Suite::Loss => include_bytes!("../fixtures/selftest/loss.d2wb"),
            Suite::Gradient => include_bytes!("../fixtures/selftest/gradient.d2wb"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub suite: Suite,
    pub passed: bool,
    pub cases: usize,
    /// Largest deviation observed (suite-specific units).
    pub max_error: f64,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelftestReport {
    pub passed: bool,
    pub suites: Vec<SuiteResult>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelftestOptions {
    pub probes: usize,
    pub seed: u64,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self { probes: 64, seed: 0 }
    }
}

const CONV_CASES: usize = 4;
const DETECTION_CASES: usize = 4;
const MINING_CASES: usize = 6;
const LOSS_CASES: usize = 3;
const GRADIENT_CASES: usize = 2;

fn random_tensor(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, lo: f32, hi: f32) -> Tensor3 {
    Tensor3::from_fn(h, w, c, |_, _, _| rng.gen_range(lo..hi))
}

fn put_tensor(c: &mut Container, name: String, t: &Tensor3) {
    c.insert(name, Entry { dims: vec![t.height(), t.width(), t.channels()], data: t.data().to_vec() });
}

fn put(c: &mut Container, name: String, data: Vec<f32>) {
    c.insert(name, Entry { dims: vec![data.len()], data });
}

fn get<'a>(c: &'a Container, name: &str) -> Result<&'a [f32]> {
    c.get(name)
        .map(|e| e.data.as_slice())
        .ok_or_else(|| D2Error::Format(format!("fixture has no entry {name:?}")))
}

fn pairs_to_vec(pairs: &[CellPair]) -> Vec<f32> {
    pairs
        .iter()
        .flat_map(|p| [p.a.0, p.a.1, p.b.0, p.b.1].map(|v| v as f32))
        .collect()
}

fn vec_to_pairs(v: &[f32]) -> Vec<CellPair> {
    v.chunks_exact(4)
        .map(|c| CellPair { a: (c[0] as usize, c[1] as usize), b: (c[2] as usize, c[3] as usize) })
        .collect()
}

/// Correspondences on an 8×8 map that keep candidates outside `K = 4`.
fn corner_pairs(rng: &mut ChaCha8Rng, n: usize) -> Vec<CellPair> {
    let edge = [0usize, 1, 2, 5, 6, 7];
    let mut pick = || (edge[rng.gen_range(0..6)], edge[rng.gen_range(0..6)]);
    (0..n).map(|_| CellPair { a: pick(), b: pick() }).collect()
}

fn gradient_instance(rng: &mut ChaCha8Rng) -> (Tensor3, Tensor3, Vec<CellPair>) {
    let f1 = random_tensor(rng, 8, 8, 4, 0.05, 1.05);
    let f2 = random_tensor(rng, 8, 8, 4, 0.05, 1.05);
    (f1, f2, corner_pairs(rng, 3))
}

/// Builds every suite's fixture from the literal oracles.
pub fn build_fixture(suite: Suite) -> Container {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5E1F_7E57 + suite as u64);
    let mut c = Container::new();
    match suite {
        Suite::Conv => {
            for n in 0..CONV_CASES {
                let (h, w, cin, cout) = (rng.gen_range(3..12), rng.gen_range(3..12), rng.gen_range(1..5), rng.gen_range(1..5));
                let (stride, dilation) = [(1, 1), (2, 1), (1, 2), (2, 2)][n % 4];
                let x = random_tensor(&mut rng, h, w, cin, -1.0, 1.0);
                let weights: Vec<f32> = (0..cout * cin * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let bias: Vec<f32> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let conv = ConvWeights::new(cout, cin, weights.clone(), bias.clone()).expect("consistent shapes");
                let expected = oracle::direct_conv3x3(&x, &conv, stride, dilation);
                put_tensor(&mut c, format!("case{n}.input"), &x);
                c.insert(format!("case{n}.weight"), Entry { dims: vec![cout, cin, 3, 3], data: weights });
                put(&mut c, format!("case{n}.bias"), bias);
                put(&mut c, format!("case{n}.params"), vec![stride as f32, dilation as f32]);
                put_tensor(&mut c, format!("case{n}.expected"), &expected);
            }
        }
        Suite::Detection => {
            for n in 0..DETECTION_CASES {
                let f = random_tensor(&mut rng, 10, 9, 4, 0.0, 1.0);
                let dets: Vec<f32> = oracle::hard_detect_literal(&f)
                    .iter()
                    .flat_map(|d| [d.i, d.j, d.k].map(|v| v as f32))
                    .collect();
                let scores: Vec<f32> = oracle::soft_scores_literal(&f).scores.iter().map(|&s| s as f32).collect();
                put_tensor(&mut c, format!("case{n}.map"), &f);
                put(&mut c, format!("case{n}.detections"), dets);
                put(&mut c, format!("case{n}.scores"), scores);
            }
        }
        Suite::Mining => {
            for n in 0..MINING_CASES {
                let f1 = random_tensor(&mut rng, 12, 12, 8, 0.05, 1.05);
                let f2 = random_tensor(&mut rng, 12, 12, 8, 0.05, 1.05);
                let a = (rng.gen_range(0..12), rng.gen_range(0..12));
                let b = (rng.gen_range(0..12), rng.gen_range(0..12));
                let (d, n1, n2) = oracle::hardest_negative_literal(&f1, &f2, a, b, 4).expect("12x12 leaves candidates");
                put_tensor(&mut c, format!("case{n}.f1"), &f1);
                put_tensor(&mut c, format!("case{n}.f2"), &f2);
                put(&mut c, format!("case{n}.query"), [a.0, a.1, b.0, b.1, 4].map(|v| v as f32).to_vec());
                put(
                    &mut c,
                    format!("case{n}.expected"),
                    vec![d as f32, n1.0 as f32, n1.1 as f32, n2.0 as f32, n2.1 as f32],
                );
            }
        }
        Suite::Loss => {
            for n in 0..LOSS_CASES {
                let f1 = random_tensor(&mut rng, 10, 10, 4, 0.05, 1.05);
                let f2 = random_tensor(&mut rng, 10, 10, 4, 0.05, 1.05);
                let pairs: Vec<CellPair> = (0..5)
                    .map(|_| CellPair {
                        a: (rng.gen_range(0..10), rng.gen_range(0..10)),
                        b: (rng.gen_range(0..10), rng.gen_range(0..10)),
                    })
                    .collect();
                let raw: Vec<_> = pairs.iter().map(|p| (p.a, p.b)).collect();
                let l = oracle::d2_loss_literal(&f1, &f2, &raw, 2, 1.0).expect("10x10 leaves candidates");
                put_tensor(&mut c, format!("case{n}.f1"), &f1);
                put_tensor(&mut c, format!("case{n}.f2"), &f2);
                put(&mut c, format!("case{n}.pairs"), pairs_to_vec(&pairs));
                put(&mut c, format!("case{n}.params"), vec![2.0, 1.0]);
                put(&mut c, format!("case{n}.expected"), vec![l as f32]);
            }
        }
        Suite::Gradient => {
            for n in 0..GRADIENT_CASES {
                let (f1, f2, pairs) = gradient_instance(&mut rng);
                let raw: Vec<_> = pairs.iter().map(|p| (p.a, p.b)).collect();
                let l = oracle::d2_loss_literal(&f1, &f2, &raw, 4, 1.0).expect("corner pairs leave candidates");
                put_tensor(&mut c, format!("case{n}.f1"), &f1);
                put_tensor(&mut c, format!("case{n}.f2"), &f2);
                put(&mut c, format!("case{n}.pairs"), pairs_to_vec(&pairs));
                put(&mut c, format!("case{n}.expected"), vec![l as f32]);
            }
        }
    }
    c
}

/// Writes all fixtures into `dir`.
pub fn write_fixtures(dir: impl AsRef<Path>) -> Result<()> {
    std::fs::create_dir_all(dir.as_ref())?;
    for s in Suite::ALL {
        build_fixture(s).save(dir.as_ref().join(s.file_name()))?;
    }
    Ok(())
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

struct Outcome {
    cases: usize,
    max_error: f64,
    failure: Option<String>,
}

impl Outcome {
    fn new() -> Self {
        Self { cases: 0, max_error: 0.0, failure: None }
    }

    /// Records one case's error against its tolerance.
    fn check(&mut self, case: usize, what: &str, error: f64, tolerance: f64) {
        self.max_error = self.max_error.max(error);
        if !(error <= tolerance) && self.failure.is_none() {
            self.failure = Some(format!("case {case}: {what} error {error:e} exceeds {tolerance:e}"));
        }
    }

    fn fail(&mut self, case: usize, what: String) {
        if self.failure.is_none() {
            self.failure = Some(format!("case {case}: {what}"));
        }
    }
}

fn run_conv(c: &Container) -> Result<Outcome> {
    let mut out = Outcome::new();
    for n in 0..CONV_CASES {
        let x = c.tensor(&format!("case{n}.input"))?;
        let wt = c.get(&format!("case{n}.weight")).ok_or_else(|| D2Error::Format("missing weight".into()))?;
        let conv = ConvWeights::new(wt.dims[0], wt.dims[1], wt.data.clone(), get(c, &format!("case{n}.bias"))?.to_vec())?;
        let params = get(c, &format!("case{n}.params"))?;
        let (stride, dilation) = (params[0] as usize, params[1] as usize);
        let expected = c.tensor(&format!("case{n}.expected"))?;
        let engine = conv3x3_forward(&x, &conv, stride, dilation)?;
        let fresh = oracle::direct_conv3x3(&x, &conv, stride, dilation);
        if engine.shape() != expected.shape() {
            out.fail(n, format!("shape {:?} vs stored {:?}", engine.shape(), expected.shape()));
            continue;
        }
        let diff = |a: &Tensor3, b: &Tensor3| {
            a.data().iter().zip(b.data()).map(|(x, y)| f64::from((x - y).abs())).fold(0.0, f64::max)
        };
        out.check(n, "engine vs stored", diff(&engine, &expected), 1e-5);
        out.check(n, "oracle vs stored", diff(&fresh, &expected), 1e-5);
        out.cases += 1;
    }
    Ok(out)
}

fn run_detection(c: &Container) -> Result<Outcome> {
    let mut out = Outcome::new();
    for n in 0..DETECTION_CASES {
        let f = c.tensor(&format!("case{n}.map"))?;
        let stored: BTreeSet<Detection> = get(c, &format!("case{n}.detections"))?
            .chunks_exact(3)
            .map(|d| Detection { i: d[0] as usize, j: d[1] as usize, k: d[2] as usize })
            .collect();
        let engine: BTreeSet<Detection> = hard_detect(&f).into_iter().collect();
        let fresh: BTreeSet<Detection> = oracle::hard_detect_literal(&f).into_iter().collect();
        if engine != stored || fresh != stored {
            out.fail(n, "detection sets differ from stored set".into());
        }
        let scores = soft_scores(&f)?;
        let literal = oracle::soft_scores_literal(&f);
        for (idx, &s) in get(c, &format!("case{n}.scores"))?.iter().enumerate() {
            out.check(n, "soft score", rel(scores.scores[idx], f64::from(s)), 1e-6);
            out.check(n, "oracle soft score", rel(literal.scores[idx], f64::from(s)), 1e-6);
        }
        out.cases += 1;
    }
    Ok(out)
}

fn run_mining(c: &Container) -> Result<Outcome> {
    let mut out = Outcome::new();
    for n in 0..MINING_CASES {
        let f1 = c.tensor(&format!("case{n}.f1"))?;
        let f2 = c.tensor(&format!("case{n}.f2"))?;
        let q = get(c, &format!("case{n}.query"))?;
        let e = get(c, &format!("case{n}.expected"))?;
        let (a, b, k) = ((q[0] as usize, q[1] as usize), (q[2] as usize, q[3] as usize), q[4] as usize);
        let pair = CellPair { a, b };
        let neg = hardest_negative(&l2_normalize_descriptors(&f1), &l2_normalize_descriptors(&f2), pair, k)?;
        let stored_cells = ((e[1] as usize, e[2] as usize), (e[3] as usize, e[4] as usize));
        if (neg.n1, neg.n2) != stored_cells {
            out.fail(n, format!("negatives {:?} vs stored {:?}", (neg.n1, neg.n2), stored_cells));
        }
        match oracle::hardest_negative_literal(&f1, &f2, a, b, k) {
            Some((d, n1, n2)) if (n1, n2) == stored_cells => {
                out.check(n, "oracle distance", rel(d, f64::from(e[0])), 1e-6);
            }
            _ => out.fail(n, "oracle disagrees with stored negatives".into()),
        }
        out.check(n, "distance", rel(neg.distance, f64::from(e[0])), 1e-5);
        out.cases += 1;
    }
    Ok(out)
}

fn run_loss(c: &Container) -> Result<Outcome> {
    let mut out = Outcome::new();
    for n in 0..LOSS_CASES {
        let f1 = c.tensor(&format!("case{n}.f1"))?;
        let f2 = c.tensor(&format!("case{n}.f2"))?;
        let pairs = vec_to_pairs(get(c, &format!("case{n}.pairs"))?);
        let p = get(c, &format!("case{n}.params"))?;
        let cfg = LossConfig { safe_radius: p[0] as usize, margin: f64::from(p[1]) };
        let stored = f64::from(get(c, &format!("case{n}.expected"))?[0]);
        let engine = d2_loss(&f1, &f2, &pairs, &cfg)?.total;
        let raw: Vec<_> = pairs.iter().map(|p| (p.a, p.b)).collect();
        let fresh = oracle::d2_loss_literal(&f1, &f2, &raw, cfg.safe_radius, cfg.margin)
            .ok_or(D2Error::NoNegativeCandidates(cfg.safe_radius))?;
        out.check(n, "engine loss", rel(engine, stored), 1e-6);
        out.check(n, "oracle loss", rel(fresh, stored), 1e-6);
        out.cases += 1;
    }
    Ok(out)
}

fn run_gradient(c: &Container, opts: &SelftestOptions) -> Result<Outcome> {
    let mut out = Outcome::new();
    let cfg = LossConfig::default();
    for n in 0..GRADIENT_CASES {
        let f1 = c.tensor(&format!("case{n}.f1"))?;
        let f2 = c.tensor(&format!("case{n}.f2"))?;
        let pairs = vec_to_pairs(get(c, &format!("case{n}.pairs"))?);
        let stored = f64::from(get(c, &format!("case{n}.expected"))?[0]);
        let (loss, _) = d2_loss_with_gradient(&f1, &f2, &pairs, &cfg)?;
        out.check(n, "loss", rel(loss.total, stored), 1e-6);
        let check = GradientCheckConfig {
            probes: opts.probes,
            seed: opts.seed.wrapping_add(n as u64),
            ..GradientCheckConfig::default()
        };
        let report = gradient_check(&f1, &f2, &pairs, &cfg, &check)?;
        out.check(n, "gradient relative", report.max_rel_error, check.tolerance);
        if report.probes < check.probes {
            out.fail(n, format!("only {} of {} probes avoided kinks", report.probes, check.probes));
        }
        out.cases += 1;
    }
    Ok(out)
}

fn load_fixture(suite: Suite, dir: Option<&Path>) -> Result<Container> {
    match dir {
        Some(d) => Container::load(d.join(suite.file_name())),
        None => Container::from_bytes(suite.embedded()),
    }
}

/// Runs one suite; fixture problems are reported as a failure of that suite.
pub fn run_suite(suite: Suite, fixture_dir: Option<&Path>, opts: &SelftestOptions) -> SuiteResult {
    let outcome = load_fixture(suite, fixture_dir).and_then(|c| match suite {
        Suite::Conv => run_conv(&c),
        Suite::Detection => run_detection(&c),
        Suite::Mining => run_mining(&c),
        Suite::Loss => run_loss(&c),
        Suite::Gradient => run_gradient(&c, opts),
    });
    match outcome {
        Ok(o) => SuiteResult {
            suite,
            passed: o.failure.is_none(),
            cases: o.cases,
            max_error: o.max_error,
            message: o.failure,
        },
        Err(e) => SuiteResult {
            suite,
            passed: false,
            cases: 0,
            max_error: f64::NAN,
            message: Some(e.to_string()),
        },
    }
}

/// Runs every suite. `fixture_dir` replaces the embedded fixtures.
pub fn run_selftest(fixture_dir: Option<&Path>, opts: &SelftestOptions) -> SelftestReport {
    let suites: Vec<SuiteResult> = Suite::ALL.iter().map(|&s| run_suite(s, fixture_dir, opts)).collect();
    SelftestReport { passed: suites.iter().all(|s| s.passed), suites }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedded_fixtures_match_generator() {
        for s in Suite::ALL {
            let embedded = Container::from_bytes(s.embedded()).unwrap();
            assert_eq!(embedded, build_fixture(s), "{} fixture is stale", s.name());
        }
    }

    #[test]
    fn all_suites_pass() {
        let report = run_selftest(None, &SelftestOptions::default());
        assert!(report.passed, "{report:#?}");
    }

    #[test]
    fn tampered_fixture_fails_its_suite_only() {
        let dir = tempfile::tempdir().unwrap();
        write_fixtures(dir.path()).unwrap();
        let mut c = build_fixture(Suite::Mining);
        let e = c.entries.get_mut("case2.expected").unwrap();
        e.data[0] += 0.05;
        c.save(dir.path().join(Suite::Mining.file_name())).unwrap();
        let report = run_selftest(Some(dir.path()), &SelftestOptions { probes: 8, seed: 0 });
        for r in &report.suites {
            assert_eq!(r.passed, r.suite != Suite::Mining, "{r:?}");
        }
        assert!(!report.passed);
    }
}
