use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn atlasgraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atlasgraph"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = atlasgraph(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn pngs(dir: &Path) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "png")
        })
        .count()
}

const TINY: &[&str] = &[
    "--set",
    "epochs=2",
    "--set",
    "batches_per_epoch=2",
    "--set",
    "rays_per_batch=128",
    "--set",
    "timestamps_per_batch=2",
    "--set",
    "phase_fields=1",
    "--set",
    "phase_all=1",
];

fn synth(dir: &Path) -> String {
    let spec = dir.join("spec.toml");
    fs::write(
        &spec,
        "width = 32\nheight = 24\nframes = 3\nnodes = 1\nfocal = 40.0\n",
    )
    .unwrap();
    let data = dir.join("data");
    ok(&[
        "synth",
        "--seed",
        "3",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    data.to_str().unwrap().to_string()
}

#[test]
fn full_pipeline_on_a_tiny_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = synth(dir);
    assert_eq!(pngs(&Path::new(&data).join("frames")), 3);
    assert_eq!(pngs(&Path::new(&data).join("masks/node_001")), 3);
    let gt = format!("{data}/ground_truth.nag");

    // The generator's own graph reproduces its frames exactly.
    let eval = ok(&["eval", "--ckpt", &gt, "--data", &data]);
    let lines: Vec<&str> = eval.lines().collect();
    assert_eq!(lines[0], "frame,psnr,ssim");
    assert_eq!(lines.len(), 5);
    assert!(lines[1..4].iter().all(|l| l.contains(",inf,")), "{eval}");
    assert!(lines[4].starts_with("mean,inf,1.0"), "{eval}");

    let ckpt = dir.join("fit.nag");
    let ckpt = ckpt.to_str().unwrap();
    let mut args = vec!["--threads", "1", "fit", "--data", &data, "--out", ckpt];
    args.extend_from_slice(TINY);
    let summary = ok(&args);
    assert!(summary.starts_with("fitted 2 epochs"), "{summary}");
    let csv = fs::read_to_string(dir.join("fit.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("epoch,loss,"));

    let eval = ok(&["eval", "--ckpt", ckpt, "--data", &data]);
    let mean = eval.lines().last().unwrap();
    let p: f64 = mean.split(',').nth(1).unwrap().parse().unwrap();
    assert!(p > 25.0, "{eval}");

    let frames = dir.join("render");
    ok(&[
        "render",
        "--ckpt",
        ckpt,
        "--out",
        frames.to_str().unwrap(),
        "--frames",
        "1..3",
    ]);
    assert_eq!(pngs(&frames), 2);
    assert!(frames.join("00001.png").exists() && frames.join("00002.png").exists());

    let layers = dir.join("layers");
    ok(&[
        "decompose",
        "--ckpt",
        ckpt,
        "--node",
        "1",
        "--out",
        layers.to_str().unwrap(),
    ]);
    assert_eq!(pngs(&layers), 3);
    let img = image::open(layers.join("00000.png")).unwrap();
    assert_eq!(img.color(), image::ColorType::Rgba8);

    let script = dir.join("edit.toml");
    fs::write(&script, "[[edit]]\nop = \"remove\"\nnode = 1\n").unwrap();
    let edited = dir.join("edited");
    let saved = dir.join("edited.nag");
    ok(&[
        "edit",
        "--ckpt",
        ckpt,
        "--script",
        script.to_str().unwrap(),
        "--out",
        edited.to_str().unwrap(),
        "--save",
        saved.to_str().unwrap(),
    ]);
    assert_eq!(pngs(&edited), 3);
    let out = atlasgraph(&[
        "decompose",
        "--ckpt",
        saved.to_str().unwrap(),
        "--node",
        "1",
        "--out",
        "x",
    ]);
    assert!(!out.status.success(), "removed node must be gone");

    let report = ok(&[
        "gradcheck",
        "--ckpt",
        ckpt,
        "--data",
        &data,
        "--samples",
        "20",
        "--excite",
    ]);
    let err: f64 = report.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(err < 1e-4, "{report}");
}

#[test]
fn fits_are_reproducible_with_one_thread() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = synth(dir);
    let run = |name: &str| {
        let out = dir.join(name);
        let mut args = vec![
            "--threads",
            "1",
            "fit",
            "--data",
            &data,
            "--out",
            out.to_str().unwrap(),
        ];
        args.extend_from_slice(TINY);
        ok(&args);
        fs::read(out).unwrap()
    };
    assert!(run("a.nag") == run("b.nag"));
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.nag");
    let cases: Vec<Vec<&str>> = vec![
        vec!["render", "--ckpt", missing.to_str().unwrap(), "--out", "x"],
        vec![
            "eval",
            "--ckpt",
            missing.to_str().unwrap(),
            "--data",
            "nowhere",
        ],
        vec![
            "fit",
            "--data",
            "nowhere",
            "--out",
            "x.nag",
            "--set",
            "no_such_key=1",
        ],
    ];
    for args in cases {
        let out = atlasgraph(&args);
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.trim_end().lines().count(), 1, "{args:?}: {err}");
        assert!(err.starts_with("error: "), "{err}");
    }
    // Not a checkpoint at all.
    let junk = tmp.path().join("junk.nag");
    fs::write(&junk, b"hello").unwrap();
    let out = atlasgraph(&["render", "--ckpt", junk.to_str().unwrap(), "--out", "x"]);
    assert!(!out.status.success());
}
