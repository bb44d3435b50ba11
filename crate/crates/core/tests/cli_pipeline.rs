//! Subcommands end to end on a small synthetic dataset.

use std::fs;
use std::path::Path;

use magat::cli::dispatch;

const SMALL: &str = "\
# tiny model for fast tests
blocks = 1
base_width = 4
feature_dim = 8
stem_stride = 2
f_int = 4
epochs = 2
pretrain_epochs = 1
seeds = 3
";

fn run(args: &[&str]) -> i32 {
    dispatch(&args.iter().map(|s| s.to_string()).collect::<Vec<_>>())
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn generate_train_eval_export() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let d = data.to_str().unwrap();
    assert_eq!(run(&["gen-synth", "--seed", "7", "--sites", "150", "--patch-side", "16", "--out", d]), 0);
    assert!(data.join("manifest.tsv").is_file());
    assert_eq!(fs::read_dir(data.join("patches")).unwrap().count(), 150);

    let cfg = root.join("run.cfg");
    fs::write(&cfg, format!("data = {d}\n{SMALL}")).unwrap();
    let c = cfg.to_str().unwrap();

    let a = root.join("a");
    let b = root.join("b");
    for out in [&a, &b] {
        assert_eq!(run(&["train", "--config", c, "--arch", "magat", "--adjacency", "all", "--out", out.to_str().unwrap()]), 0);
    }
    let ra = fs::read(a.join("report.txt")).unwrap();
    assert_eq!(ra, fs::read(b.join("report.txt")).unwrap());
    assert_eq!(fs::read(a.join("report.csv")).unwrap(), fs::read(b.join("report.csv")).unwrap());
    let text = String::from_utf8(ra).unwrap();
    assert!(text.contains("arch: magat"));
    assert!(text.contains("lr: 0.01"));
    assert_eq!(files(&a), vec!["model_seed3.mgtc", "report.csv", "report.txt"]);

    let ck = a.join("model_seed3.mgtc");
    let ev = root.join("eval");
    assert_eq!(run(&["eval", "--config", c, "--checkpoint", ck.to_str().unwrap(), "--out", ev.to_str().unwrap()]), 0);
    assert_eq!(files(&ev), vec!["eval_report.csv", "eval_report.txt", "predictions.csv"]);

    let ex = root.join("export");
    assert_eq!(
        run(&["export-features", "--config", c, "--checkpoint", ck.to_str().unwrap(), "--split", "train", "--out", ex.to_str().unwrap()]),
        0
    );
    let csv = fs::read_to_string(ex.join("features_train.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("site_id,label,f_0,"));
    // three heads of width 4
    assert_eq!(header.split(',').count(), 2 + 12);

    // checkpoint depth does not match a single-relation graph
    let bad = root.join("bad");
    assert_eq!(
        run(&["export-features", "--config", c, "--adjacency", "lst", "--checkpoint", ck.to_str().unwrap(), "--out", bad.to_str().unwrap()]),
        2
    );
}

#[test]
fn pretrain_then_train_from_checkpoint_and_ablate() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let d = data.to_str().unwrap();
    assert_eq!(run(&["gen-synth", "--seed", "8", "--sites", "120", "--patch-side", "16", "--out", d]), 0);
    let cfg = root.join("run.cfg");
    fs::write(&cfg, format!("data = {d}\n{SMALL}")).unwrap();
    let c = cfg.to_str().unwrap();

    let pre = root.join("pre");
    assert_eq!(run(&["pretrain", "--config", c, "--out", pre.to_str().unwrap()]), 0);
    let enc = pre.join("encoder.mgtc");
    assert!(enc.is_file());
    assert!(fs::read_to_string(pre.join("encoder.mgtc.meta")).unwrap().contains("corpus_sha256 = "));

    let tr = root.join("tr");
    let src = format!("pretrain=checkpoint:{}", enc.display());
    assert_eq!(run(&["train", "--config", c, "--set", &src, "--set", "epochs=1", "--out", tr.to_str().unwrap()]), 0);
    assert!(fs::read_to_string(tr.join("report.txt")).unwrap().contains("pretrain: checkpoint:"));

    let ab = root.join("ab");
    assert_eq!(
        run(&["ablate", "--config", c, "--set", "epochs=1", "--axes", "adjacency=uniform|all,norm", "--out", ab.to_str().unwrap()]),
        0
    );
    assert_eq!(fs::read_dir(ab.join("cells")).unwrap().count(), 2 * 2 * 2);
    let table = fs::read_to_string(ab.join("ablation.txt")).unwrap();
    assert!(table.contains("cells: 4"));
}

#[test]
fn selfcheck_passes() {
    assert_eq!(run(&["selfcheck"]), 0);
}
