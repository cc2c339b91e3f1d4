//! End-to-end runs of the `d2feat` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use d2feat::container::{Container, Entry};
use d2feat::geometry::{DepthMap, PinholeCamera};
use d2feat::image::write_pnm;
use d2feat::keypoints::read_d2f;
use d2feat::Image;
use nalgebra::{Matrix3, Vector3};
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_d2feat")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn textured(h: usize, w: usize, phase: f32) -> Image {
    let data = (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as f32, (p % w) as f32 + phase);
            0.5 + 0.25 * (0.7 * x).sin() * (0.45 * y).cos() + 0.2 * ((x * y) * 0.013).sin()
        })
        .collect();
    Image::gray(h, w, data).unwrap()
}

fn write_image(dir: &TempDir, name: &str, img: &Image) -> PathBuf {
    let p = dir.path().join(name);
    write_pnm(img, &p).unwrap();
    p
}

fn extract(dir: &TempDir, image: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.path().join(name);
    let mut args = vec!["extract", s(image), "--out", s(&out)];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn extraction_is_byte_identical_across_runs_and_thread_counts() {
    let dir = TempDir::new().unwrap();
    let img = write_image(&dir, "a.pgm", &textured(48, 56, 0.0));
    let a = extract(&dir, &img, "a.d2f", &[]);
    let b = extract(&dir, &img, "b.d2f", &["--threads", "1"]);
    let (a, b) = (fs::read(a).unwrap(), fs::read(b).unwrap());
    assert!(!read_d2f(dir.path().join("a.d2f")).unwrap().is_empty());
    assert_eq!(a, b);
}

#[test]
fn multiscale_extraction_reports_pyramid_scales() {
    let dir = TempDir::new().unwrap();
    let img = write_image(&dir, "a.pgm", &textured(40, 40, 0.0));
    let csv = dir.path().join("a.csv");
    let f = extract(&dir, &img, "a.d2f", &["--multiscale", "--csv", s(&csv)]);
    let kps = read_d2f(f).unwrap();
    assert!(!kps.is_empty());
    assert!(kps.iter().all(|k| [0.5, 1.0, 2.0].contains(&k.scale)));
    let text = fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("x,y,scale,score\n"));
    assert_eq!(text.lines().count(), kps.len() + 1);
}

#[test]
fn zero_weights_give_no_keypoints_on_a_constant_image() {
    let dir = TempDir::new().unwrap();
    let mut bank = d2feat::convnet::WeightBank::bundled_tiny();
    for conv in bank.convs.values_mut() {
        conv.weights.iter_mut().for_each(|w| *w = 0.0);
        conv.bias.iter_mut().for_each(|b| *b = 0.0);
    }
    let weights = dir.path().join("zero.d2wb");
    d2feat::convnet::save_weights(&bank, &weights).unwrap();
    let img = write_image(&dir, "c.pgm", &Image::constant(32, 32, 0.5));
    let f = extract(&dir, &img, "c.d2f", &["--weights", s(&weights)]);
    assert!(read_d2f(f).unwrap().is_empty());
}

#[test]
fn matching_writes_a_csv_with_header() {
    let dir = TempDir::new().unwrap();
    let a = extract(&dir, &write_image(&dir, "a.pgm", &textured(48, 48, 0.0)), "a.d2f", &[]);
    let b = extract(&dir, &write_image(&dir, "b.pgm", &textured(48, 48, 3.0)), "b.d2f", &[]);
    let out = dir.path().join("m.csv");
    let o = run(&["match", s(&a), s(&b), "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("index_a,index_b,distance,ratio\n"));
    assert_eq!(json(&o)["matches"].as_u64().unwrap() as usize, text.lines().count() - 1);

    let strict = dir.path().join("strict.csv");
    assert_eq!(code(&run(&["match", s(&a), s(&b), "--ratio", "0.5", "--out", s(&strict)])), 0);
    assert!(fs::read_to_string(strict).unwrap().lines().count() <= text.lines().count());
}

#[test]
fn error_classes_map_to_exit_codes_without_partial_output() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("never.d2f");

    // missing input: I/O
    let o = run(&["extract", s(&dir.path().join("missing.pgm")), "--out", s(&out)]);
    assert_eq!(code(&o), 2);

    // garbage image: format
    let bad = dir.path().join("bad.pgm");
    fs::write(&bad, b"P9 nonsense").unwrap();
    assert_eq!(code(&run(&["extract", s(&bad), "--out", s(&out)])), 3);

    // unknown flag and out-of-range ratio: usage, reported as format
    assert_eq!(code(&run(&["extract", "--no-such-flag"])), 3);
    let img = write_image(&dir, "a.pgm", &textured(32, 32, 0.0));
    let a = extract(&dir, &img, "a.d2f", &[]);
    assert_eq!(code(&run(&["match", s(&a), s(&a), "--ratio", "1.5", "--out", s(&out)])), 3);

    // descriptors of different length: shape
    use d2feat::convnet::{save_weights, ArchitectureSpec, Normalization, Variant, WeightBank};
    let arch = ArchitectureSpec::vgg16_with_widths(Variant::Test, 3, [4, 4, 4, 6], false);
    let other = WeightBank::random(&arch, Normalization::imagenet(), 3);
    let weights = dir.path().join("w.d2wb");
    save_weights(&other, &weights).unwrap();
    let b = extract(&dir, &img, "b.d2f", &["--weights", s(&weights)]);
    assert_eq!(code(&run(&["match", s(&a), s(&b), "--out", s(&out)])), 4);

    // image smaller than the network accepts: shape
    let tiny = write_image(&dir, "tiny.pgm", &Image::constant(4, 4, 0.5));
    assert_eq!(code(&run(&["extract", s(&tiny), "--out", s(&out)])), 4);

    assert!(!out.exists());
    assert!(fs::read_dir(dir.path()).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().starts_with(".tmp")));
}

#[test]
fn failed_second_output_leaves_the_first_unwritten() {
    let dir = TempDir::new().unwrap();
    let img = write_image(&dir, "a.pgm", &textured(32, 32, 0.0));
    let out = dir.path().join("a.d2f");
    let csv = dir.path().join("no_such_dir").join("a.csv");
    let o = run(&["extract", s(&img), "--out", s(&out), "--csv", s(&csv)]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
    assert!(!csv.exists());
}

#[test]
fn selftest_passes_and_detects_tampered_fixtures() {
    let o = run(&["selftest"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(json(&o)["passed"], true);

    let dir = TempDir::new().unwrap();
    d2feat::selftest::write_fixtures(dir.path()).unwrap();
    let path = dir.path().join("mining.d2wb");
    let mut c = Container::load(&path).unwrap();
    let mut e: Entry = c.get("case0.expected").unwrap().clone();
    e.data[0] += 0.25;
    c.insert("case0.expected", e);
    c.save(&path).unwrap();

    let o = run(&["selftest", "--fixtures", s(dir.path())]);
    assert_eq!(code(&o), 1);
    let report = json(&o);
    for suite in report["suites"].as_array().unwrap() {
        let failed = suite["passed"] == false;
        assert_eq!(failed, suite["suite"] == "Mining" || suite["suite"] == "mining", "{suite}");
    }
}

#[test]
fn loss_check_reports_loss_and_gradient() {
    let o = run(&["loss-check", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let v = json(&o);
    assert!(v["loss"]["total"].as_f64().unwrap() >= 0.0);
    assert_eq!(v["gradient"]["passed"], true);
    assert!(v["gradient"]["max_rel_error"].as_f64().unwrap() < 1e-3);

    // no negatives exist outside K on a 3x3 map
    assert_eq!(code(&run(&["loss-check", "--h", "3", "--w", "3"])), 4);
}

#[test]
fn loss_demo_decreases_the_loss() {
    let o = run(&["loss-demo", "--steps", "10"]);
    assert_eq!(code(&o), 0);
    let loss: Vec<f64> = json(&o)["loss"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(loss.last().unwrap() < loss.first().unwrap());
}

fn save_depth(dir: &TempDir, name: &str, d: &DepthMap) -> PathBuf {
    let p = dir.path().join(name);
    d.to_container().save(&p).unwrap();
    p
}

fn save_camera(dir: &TempDir, name: &str, c: &PinholeCamera) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, c.to_json()).unwrap();
    p
}

#[test]
fn gen_corr_writes_stereo_correspondences() {
    let dir = TempDir::new().unwrap();
    let left = PinholeCamera::at_origin(100.0, 100.0, 0.0, 0.0);
    let right = left.clone().with_center(Matrix3::identity(), Vector3::new(0.4, 0.0, 0.0)).unwrap();
    let depth = DepthMap::from_fn(4, 32, |_, _| 10.0);
    let d1 = save_depth(&dir, "d1.d2wb", &depth);
    let d2 = save_depth(&dir, "d2.d2wb", &depth);
    let c1 = save_camera(&dir, "c1.json", &left);
    let c2 = save_camera(&dir, "c2.json", &right);
    let out = dir.path().join("corr.csv");
    let o = run(&[
        "gen-corr", "--depth1", s(&d1), "--camera1", s(&c1), "--depth2", s(&d2), "--camera2", s(&c2), "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x1,y1,x2,y2"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    // disparity fx·b/z = 4 px; columns 28..32 of image 2 project past the edge
    assert_eq!(rows.len(), 4 * 28);
    assert!(rows.iter().all(|r| (r[0] - r[2] - 4.0).abs() < 1e-9 && (r[1] - r[3]).abs() < 1e-9));
    assert_eq!(json(&o)["correspondences"], 4 * 28);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{").unwrap();
    let o = run(&["gen-corr", "--depth1", s(&d1), "--camera1", s(&bad), "--depth2", s(&d2), "--camera2", s(&c2), "--out", s(&out)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn homography_evaluation_on_a_translated_pair() {
    let dir = TempDir::new().unwrap();
    let base = textured(64, 72, 0.0);
    write_pnm(&base, dir.path().join("a.pgm")).unwrap();
    write_pnm(&base.translated(0, 8), dir.path().join("b.pgm")).unwrap();
    fs::write(dir.path().join("h.txt"), "1 0 8\n0 1 0\n0 0 1\n").unwrap();
    let pairs = dir.path().join("pairs.txt");
    fs::write(&pairs, "# one translated pair\na.pgm b.pgm h.txt\n").unwrap();

    let out = dir.path().join("mma.csv");
    let o = run(&["eval-mma", "--pairs", s(&pairs), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("threshold,mma"));
    let mma: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(mma.len(), 19);
    assert!(mma.windows(2).all(|w| w[0] <= w[1]));
    assert!(mma[18] > 0.5, "{mma:?}");

    let pdf = dir.path().join("pdf.csv");
    let o = run(&["ratio-pdf", "--pairs", s(&pairs), "--out", s(&pdf), "--bins", "10"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&pdf).unwrap().lines().count(), 11);

    fs::write(&pairs, "a.pgm b.pgm\n").unwrap();
    assert_eq!(code(&run(&["eval-mma", "--pairs", s(&pairs), "--out", s(&out)])), 3);
}
