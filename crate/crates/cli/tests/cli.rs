//! End-to-end runs of the `perimotion` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use perimotion::mesh::TriangleMesh;
use perimotion::neural_field::{Layer, VelocityFieldModel};
use perimotion::volume::read_v4d;
use perimotion_cli::manifest::{RunManifest, MANIFEST_FILE};

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_perimotion"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> Output {
    let o = run(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 16³ periodic sequence with 5 frames.
fn small_gen(root: &Path) -> PathBuf {
    let dir = root.join("gen");
    ok(&dir, &["gen", "--pattern", "periodic", "--grid", "16", "--frames", "5", "--subdivisions", "2"]);
    dir
}

const TINY_NET: [&str; 4] = ["--set", "hidden_layers=1", "--set", "hidden_width=8"];

fn tiny_fit(out: &Path, volume: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["fit", "--volume", s(volume), "--epochs", "2", "--points", "64", "--seed", "3"];
    args.extend_from_slice(&TINY_NET);
    args.extend_from_slice(extra);
    ok(out, &args)
}

fn zero_checkpoint(path: &Path) {
    let layers = vec![
        Layer { weight: vec![0.0f32; 5 * 4], bias: vec![0.0; 4], fan_in: 5, fan_out: 4 },
        Layer { weight: vec![0.0; 4 * 3], bias: vec![0.0; 3], fan_in: 4, fan_out: 3 },
    ];
    VelocityFieldModel::from_layers(layers, 6.0, 1.0, true).unwrap().save(path).unwrap();
}

#[test]
fn gen_writes_volume_and_meshes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("g");
    ok(&out, &["gen", "--pattern", "periodic", "--grid", "24", "--frames", "25", "--subdivisions", "1"]);
    let v = read_v4d(out.join("volume.v4d")).unwrap();
    assert_eq!(v.num_frames(), 25);
    let meshes = fs::read_dir(out.join("meshes")).unwrap().count();
    assert_eq!(meshes, 25);
    let linear = tmp.path().join("l");
    ok(&linear, &["gen", "--pattern", "linear", "--grid", "16", "--frames", "2"]);
    assert_eq!(read_v4d(linear.join("volume.v4d")).unwrap().num_frames(), 2);
}

#[test]
fn usage_errors_exit_2_and_name_the_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["gen", "--pattern", "periodic", "--radius", "-3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--radius"), "{}", stderr(&o));

    let g = small_gen(tmp.path());
    let o = run(&tmp.path().join("f"), &["fit", "--volume", s(&g.join("volume.v4d")), "--set", "bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));

    let o = run(tmp.path(), &["--workers", "0", "gen", "--pattern", "linear"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_volume_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["fit", "--volume", s(&tmp.path().join("absent.v4d"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn fit_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let g = small_gen(tmp.path());
    let vol = g.join("volume.v4d");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let one = tmp.path().join("one");
    ok(&one, &["fit", "--volume", s(&vol), "--epochs", "1", "--points", "32", "--set", "hidden_layers=1", "--set", "hidden_width=8"]);
    let loss = fs::read_to_string(one.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 2, "{loss}");

    tiny_fit(&a, &vol, &[]);
    tiny_fit(&b, &vol, &[]);
    assert_eq!(fs::read(a.join("loss.csv")).unwrap(), fs::read(b.join("loss.csv")).unwrap());
    assert_eq!(fs::read(a.join("model.vfield")).unwrap(), fs::read(b.join("model.vfield")).unwrap());
    let m = RunManifest::read(&a.join(MANIFEST_FILE)).unwrap();
    assert!(m.stale_outputs(&a).is_empty());
    assert_eq!(m.seed, Some(3));
}

#[test]
fn deform_outputs_follow_requested_times() {
    let tmp = tempfile::tempdir().unwrap();
    let g = small_gen(tmp.path());
    let vol = g.join("volume.v4d");
    let mesh = g.join("meshes/frame_000.obj");
    let fitted = tmp.path().join("fit");
    tiny_fit(&fitted, &vol, &[]);
    let ckpt = fitted.join("model.vfield");
    let d = tmp.path().join("d");
    ok(&d, &[
        "deform", "--checkpoint", s(&ckpt), "--mesh", s(&mesh), "--volume", s(&vol),
        "--times", "0,0.25,0.5,0.75,1", "--trajectory-points", "3",
    ]);
    let input = TriangleMesh::read_obj(&mesh).unwrap();
    let at0 = TriangleMesh::read_obj(d.join("deformed_000.obj")).unwrap();
    assert_eq!(at0.faces(), input.faces());
    for (a, b) in at0.vertices().iter().zip(input.vertices()) {
        assert!((0..3).all(|k| (a[k] - b[k]).abs() <= 1e-6));
    }
    let objs = fs::read_dir(&d)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".obj"))
        .count();
    assert_eq!(objs, 5);
    assert!(fs::read_to_string(d.join("trajectory.csv")).unwrap().starts_with("point_id,step,t,x,y,z"));

    let o = run(&d, &["deform", "--checkpoint", s(&ckpt), "--mesh", s(&mesh), "--volume", s(&vol), "--times", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    ok(&d, &["deform", "--checkpoint", s(&ckpt), "--mesh", s(&mesh), "--volume", s(&vol), "--times", "1.5", "--wrap"]);
}

#[test]
fn zero_field_leaves_meshes_in_place() {
    let tmp = tempfile::tempdir().unwrap();
    let g = small_gen(tmp.path());
    let ckpt = tmp.path().join("zero.vfield");
    zero_checkpoint(&ckpt);
    let mesh = g.join("meshes/frame_000.obj");
    let d = tmp.path().join("d");
    ok(&d, &[
        "deform", "--checkpoint", s(&ckpt), "--mesh", s(&mesh), "--volume", s(&g.join("volume.v4d")),
        "--times", "0.1,0.4,0.9",
    ]);
    let input = TriangleMesh::read_obj(&mesh).unwrap();
    for k in 0..3 {
        let m = TriangleMesh::read_obj(d.join(format!("deformed_{k:03}.obj"))).unwrap();
        assert_eq!(m, input);
    }
}

#[test]
fn eval_scores_the_identity_field() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("g");
    ok(&out, &["gen", "--pattern", "periodic", "--grid", "24", "--frames", "25", "--subdivisions", "3"]);
    let ckpt = tmp.path().join("zero.vfield");
    zero_checkpoint(&ckpt);
    let e = tmp.path().join("e");
    let (vol, gt) = (out.join("volume.v4d"), out.join("meshes"));
    let args = [
        "eval", "--checkpoint", s(&ckpt), "--volume", s(&vol),
        "--gt-dir", s(&gt), "--psnr-stride", "4", "--probes", "50",
    ];
    ok(&e, &args);
    let csv = fs::read_to_string(e.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 26);

    // identity field: HSD is the radius change against frame 0
    let radii: Vec<f64> = fs::read_to_string(out.join("radii.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    for (row, r) in csv.lines().skip(1).zip(&radii) {
        let hsd: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        let expect = (r - radii[0]).abs();
        assert!((hsd - expect).abs() <= 0.02 * radii[0], "{hsd} vs {expect}");
    }

    let svg = fs::read_to_string(e.join("volume_curve.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert_eq!(svg.matches('<').count(), svg.matches('>').count());

    let m = RunManifest::read(&e.join(MANIFEST_FILE)).unwrap();
    assert!(m.stale_outputs(&e).is_empty());
    let first = fs::read(e.join("eval.csv")).unwrap();
    ok(&e, &args);
    assert_eq!(fs::read(e.join("eval.csv")).unwrap(), first);
}

#[test]
fn eval_tolerates_missing_reference_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let g = small_gen(tmp.path());
    fs::remove_file(g.join("meshes/frame_002.obj")).unwrap();
    let ckpt = tmp.path().join("zero.vfield");
    zero_checkpoint(&ckpt);
    let e = tmp.path().join("e");
    ok(&e, &[
        "eval", "--checkpoint", s(&ckpt), "--volume", s(&g.join("volume.v4d")),
        "--gt-dir", s(&g.join("meshes")), "--psnr-stride", "0", "--probes", "10",
    ]);
    let csv = fs::read_to_string(e.join("eval.csv")).unwrap();
    let row2 = csv.lines().nth(3).unwrap();
    assert_eq!(row2.split(',').nth(2), Some(""), "{row2}");
    assert!(!csv.lines().nth(2).unwrap().split(',').nth(2).unwrap().is_empty());

    fs::remove_file(g.join("meshes/frame_000.obj")).unwrap();
    let o = run(&e, &[
        "eval", "--checkpoint", s(&ckpt), "--volume", s(&g.join("volume.v4d")), "--gt-dir", s(&g.join("meshes")),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn out_dir_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_perimotion"))
        .args(["gen", "--pattern", "linear", "--grid", "12", "--frames", "2", "--subdivisions", "1"])
        .env("PERIMOTION_OUT_DIR", &dir)
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.join("volume.v4d").exists());
    assert!(dir.join(MANIFEST_FILE).exists());
}
