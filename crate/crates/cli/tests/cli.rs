use std::path::Path;
use std::process::{Command, Output};

use edgedepth::data::{load_raster, save_raster, Raster};

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgedepth")).args(args).current_dir(cwd).env("RUST_LOG", "warn").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Two 64×64 scenes and a three-step desk run in `dir/run`.
fn trained(dir: &Path) -> Output {
    let g = run(&["generate", "--out", "data", "--count", "2", "--seed", "4"], dir);
    assert!(g.status.success(), "{g:?}");
    run(
        &["train", "--preset", "desk", "--seed", "9", "--set", "data.root=data", "--set", "train.max_steps=3", "--set", "train.batch_size=2", "--out", "run"],
        dir,
    )
}

#[test]
fn gradcheck_passes_and_reports_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("max_rel_err"));
    for op in ["em_forward", "pem_forward", "sam_forward", "aspp_forward", "decoder_forward", "silog_loss", "conv2d"] {
        assert!(out.lines().any(|l| l.contains(op) && l.ends_with("pass")), "{op}");
    }
    let scoped = stdout(&run(&["gradcheck", "sam"], dir.path()));
    assert!(scoped.contains("sam_forward") && !scoped.contains("aspp_forward"));
}

#[test]
fn config_errors_exit_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--set", "optim.beta1=2"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("optim.beta1"));
    std::fs::write(dir.path().join("bad.cfg"), "model.input_w=100\n").unwrap();
    let o = run(&["train", "--config", "bad.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.input_w"));
    assert_eq!(run(&["gradcheck", "nothing"], dir.path()).status.code(), Some(2));
    assert_eq!(run(&["train", "--preset", "moon"], dir.path()).status.code(), Some(2));
    assert_eq!(run(&["train", "--cap", "a,b,c"], dir.path()).status.code(), Some(2));
}

#[test]
fn train_header_checkpoints_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let o = trained(dir.path());
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    for line in ["# loss.lambda=0.85", "# train.seed=9", "# optim.beta1=0.9", "# optim.beta2=0.999", "# optim.eps=0.000001", "# model.max_depth=10"] {
        assert!(out.lines().any(|l| l == line), "missing {line}\n{out}");
    }
    let run_dir = dir.path().join("run");
    for f in ["final.ecdw", "final.ecdw.cfg", "best.ecdw", "best.ecdw.cfg", "loss_curve.csv"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let curve = std::fs::read_to_string(run_dir.join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);

    // a second run with the same seed writes the same curve
    let again = tempfile::tempdir().unwrap();
    assert!(trained(again.path()).status.success());
    assert_eq!(std::fs::read_to_string(again.path().join("run/loss_curve.csv")).unwrap(), curve);
}

#[test]
fn nyu_preset_header_echoes_protocol() {
    let dir = tempfile::tempdir().unwrap();
    // no data: fails after the header with a config error
    let o = run(&["train", "--preset", "nyu", "--set", "data.root=missing"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let out = stdout(&o);
    for line in ["# schedule.lr_start=0.0001", "# schedule.lr_end=0.00001", "# train.epochs=50", "# train.batch_size=4", "# model.input_h=480", "# augment.rotation_deg=2.5"] {
        assert!(out.lines().any(|l| l == line), "missing {line}\n{out}");
    }
}

#[test]
fn eval_rows_cap_and_crop() {
    let dir = tempfile::tempdir().unwrap();
    assert!(trained(dir.path()).status.success());
    let o = run(&["eval", "run/final.ecdw", "--split", "train", "--out", "m.csv"], dir.path());
    assert!(o.status.success(), "{o:?}");
    let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "id,delta1,delta2,delta3,absrel,sqrel,rmse,rmse_log,log10");
    // one row per image plus the mean
    assert_eq!(lines.len(), 1 + 2 + 1);
    assert!(stdout(&o).contains("delta1="));
    let capped = run(&["eval", "run/final.ecdw", "--split", "train", "--cap", "0,3"], dir.path());
    assert!(capped.status.success());
    assert_ne!(stdout(&capped).lines().last(), stdout(&o).lines().last());
    // the KITTI window does not fit a 64×64 frame
    let kitti = run(&["eval", "run/final.ecdw", "--split", "train", "--crop", "kitti"], dir.path());
    assert_eq!(kitti.status.code(), Some(2));
}

#[test]
fn predict_is_deterministic_and_in_range() {
    let dir = tempfile::tempdir().unwrap();
    assert!(trained(dir.path()).status.success());
    for out in ["a.drf", "b.drf"] {
        let o = run(&["predict", "run/best.ecdw", "data/train/00001.rgb.drf", "--out", out], dir.path());
        assert!(o.status.success(), "{o:?}");
    }
    let a = std::fs::read(dir.path().join("a.drf")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.drf")).unwrap());
    let r = load_raster(dir.path().join("a.drf")).unwrap();
    assert_eq!((r.width, r.height, r.channels), (64, 64, 1));
    assert!(r.data.iter().all(|&d| d > 0.0 && d < 10.0));

    let small = Raster::new(32, 32, 3, vec![0.5; 32 * 32 * 3]).unwrap();
    save_raster(dir.path().join("small.drf"), &small).unwrap();
    let o = run(&["predict", "run/best.ecdw", "small.drf", "--out", "c.drf"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
