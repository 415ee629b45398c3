//! End-to-end runs of the `ccspnet` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ccspnet::data::{self, DatasetManifest, ManifestFlags, Phase, TrialSet};
use ccspnet::model::ModelState;

fn ccspnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccspnet"))
        .args(args)
        .env_remove("CCSP_SEED")
        .output()
        .expect("spawn ccspnet")
}

fn ok(args: &[&str]) -> String {
    let out = ccspnet(args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = ccspnet(args);
    (
        out.status.code().expect("exit code"),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small synthetic dataset: 2 subjects, 8 channels, 80 trials each.
fn small_dataset(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    ok(&[
        "synth",
        "--subjects",
        "2",
        "--channels",
        "8",
        "--seed",
        "3",
        "--out",
        s(&out),
    ]);
    out.join("manifest.toml")
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_defaults_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["synth", "--channels", "4", "--out", s(&a)]);
    ok(&["synth", "--channels", "4", "--out", s(&b)]);
    let manifest = DatasetManifest::read(&a.join("manifest.toml")).unwrap();
    assert_eq!(manifest.subjects.len(), 4);
    assert!(manifest.subjects.iter().all(|e| e.counts.total() == 80));
    assert!(!manifest.non_separable);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    let c = tmp.path().join("c");
    ok(&["synth", "--channels", "4", "--seed", "1", "--out", s(&c)]);
    assert_ne!(dir_bytes(&a), dir_bytes(&c));

    let flat = tmp.path().join("flat");
    ok(&[
        "synth",
        "--subjects",
        "2",
        "--channels",
        "4",
        "--erd",
        "1.0",
        "--out",
        s(&flat),
    ]);
    assert!(
        DatasetManifest::read(&flat.join("manifest.toml"))
            .unwrap()
            .non_separable
    );
}

#[test]
fn synth_reads_seed_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&[
        "synth",
        "--subjects",
        "2",
        "--channels",
        "4",
        "--seed",
        "9",
        "--out",
        s(&a),
    ]);
    let out = Command::new(env!("CARGO_BIN_EXE_ccspnet"))
        .args([
            "synth",
            "--subjects",
            "2",
            "--channels",
            "4",
            "--out",
            s(&b),
        ])
        .env("CCSP_SEED", "9")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn eval_sd_writes_results_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_dataset(tmp.path());
    let out = tmp.path().join("run");
    let args = [
        "eval-sd",
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
        "--epochs",
        "3",
        "--batch",
        "30",
        "--seed",
        "5",
    ];
    ok(&args);

    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "subject_id,approach,ablation,accuracy,seed");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,SD,none,") && lines[2].starts_with("2,SD,none,"));
    assert!(fs::read_to_string(out.join("history.csv"))
        .unwrap()
        .starts_with("subject_id,epoch,batch,csp_loss,fisher,combined"));
    assert!(
        out.join("models/subject_001.ccsp").is_file()
            && out.join("models/subject_002.ccsp").is_file()
    );
    let config = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(
        config.contains("epochs = 3") && config.contains("seed = 5"),
        "{config}"
    );

    let first = dir_bytes(&out);
    let first_models = dir_bytes(&out.join("models"));
    ok(&args);
    let second = dir_bytes(&out);
    assert_eq!(first_models, dir_bytes(&out.join("models")));
    for ((name, a), (_, b)) in first.iter().zip(&second) {
        if name == "summary.txt" {
            let strip = |t: &[u8]| {
                String::from_utf8_lossy(t)
                    .lines()
                    .skip(1)
                    .collect::<Vec<_>>()
                    .join("\n")
            };
            assert!(
                String::from_utf8_lossy(a).starts_with("# ccspnet eval-sd generated at unix time")
            );
            assert_eq!(strip(a), strip(b));
        } else {
            assert_eq!(a, b, "{name} differs between runs");
        }
    }

    // The saved config reproduces the run.
    let again = tmp.path().join("again");
    ok(&[
        "eval-sd",
        "--config",
        s(&out.join("config.toml")),
        "--out",
        s(&again),
    ]);
    assert_eq!(
        fs::read(again.join("results.csv")).unwrap(),
        fs::read(out.join("results.csv")).unwrap()
    );
}

#[test]
fn zero_epochs_save_initial_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_dataset(tmp.path());
    let out = tmp.path().join("run");
    ok(&[
        "train",
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
        "--epochs",
        "0",
        "--subjects",
        "1",
    ]);
    let model = ModelState::load(&out.join("models/subject_001.ccsp")).unwrap();
    assert!(model.is_finalized());
    assert!(model.history.is_empty());
    let fresh = ModelState::new(model.config.clone()).unwrap();
    for (a, b) in fresh.params.iter().zip(&model.params) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    let rows = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(rows.lines().count(), 2);
}

#[test]
fn stats_on_fixtures_and_result_files() {
    let report = ok(&["stats", "--fixtures"]);
    assert!(report.contains("1.7679"), "{report}");
    assert!(report.contains("F(8,477)=1.694"), "{report}");
    assert!(report.contains("2.9700"), "{report}");
    assert!(report.contains("paired SD vs SI-offline"), "{report}");

    let tmp = tempfile::tempdir().unwrap();
    let rows = "subject_id,approach,ablation,accuracy,seed\n1,SD,none,70,1\n2,SD,none,85,2\n3,SD,none,60,3\n";
    let (a, b) = (tmp.path().join("a.csv"), tmp.path().join("b.csv"));
    fs::write(&a, rows).unwrap();
    fs::write(&b, rows).unwrap();
    let out = ok(&["stats", s(&a), s(&b)]);
    assert!(out.contains("p(two-sided)=1.0000"), "{out}");

    fs::write(&b, "subject_id,accuracy\n1,70\n").unwrap();
    assert_eq!(code(&["stats", s(&a), s(&b)]).0, 2);
    assert_eq!(code(&["stats"]).0, 1);
    assert_eq!(code(&["stats", "--fixtures", s(&a)]).0, 1);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&["no-such-command"]).0, 1);
    assert_eq!(code(&["--help"]).0, 0);
    assert_eq!(code(&["eval-sd"]).0, 1);

    let config = tmp.path().join("run.toml");
    fs::write(
        &config,
        "seed = 1\n\n[model]\nepochs = 2\nlearning_rate = 0.1\n",
    )
    .unwrap();
    let (c, err) = code(&["eval-sd", "--config", s(&config)]);
    assert_eq!(c, 1);
    assert!(err.contains("line 5"), "{err}");

    let missing = tmp.path().join("nowhere/manifest.toml");
    assert_eq!(code(&["eval-sd", "--manifest", s(&missing)]).0, 2);

    // Flat zero trials leave CSP without any signal power.
    let n = 8;
    let (c_, t) = (4, 4000);
    let blocks: Vec<(u8, Phase)> = data::BLOCKS.iter().cycle().take(n).copied().collect();
    let set = TrialSet::new(
        vec![0.0; n * c_ * t],
        c_,
        t,
        (0..n).map(|i| (i % 2) as u8).collect(),
        vec![1; n],
        blocks.iter().map(|b| b.0).collect(),
        blocks.iter().map(|b| b.1).collect(),
        1000.0,
    )
    .unwrap();
    let manifest = data::write_dataset(
        &set,
        &tmp.path().join("zeros"),
        None,
        ManifestFlags::default(),
    )
    .unwrap();
    let (c, err) = code(&[
        "eval-sd",
        "--manifest",
        s(&manifest),
        "--out",
        s(&tmp.path().join("z")),
        "--epochs",
        "1",
    ]);
    assert_eq!(c, 3, "{err}");
}

#[test]
fn help_documents_csv_schemas() {
    let help = ok(&["eval-sd", "--help"]);
    assert!(help.contains("subject_id,approach,ablation,accuracy,seed"));
    assert!(help.contains("CCSP_SEED"));
    assert!(ok(&["plot", "--help"]).contains("branch,trial,label,x,y"));
}

#[test]
fn params_reports_itemized_counts() {
    let out = ok(&["params"]);
    assert!(out.contains("trainable") && out.contains("5036"), "{out}");
    let ablated = ok(&["params", "--ablation", "frn"]);
    assert_ne!(out, ablated);
}

fn parse_scatter(text: &str) -> Vec<(usize, u8, f64, f64)> {
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (
                f[0].parse().unwrap(),
                f[2].parse().unwrap(),
                f[3].parse().unwrap(),
                f[4].parse().unwrap(),
            )
        })
        .collect()
}

#[test]
fn plots_emit_csv_and_well_formed_svg() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_dataset(tmp.path());
    let run = tmp.path().join("run");
    ok(&[
        "train",
        "--manifest",
        s(&manifest),
        "--out",
        s(&run),
        "--epochs",
        "5",
        "--batch",
        "30",
        "--subjects",
        "1",
    ]);
    let model = run.join("models/subject_001.ccsp");

    let scatter = tmp.path().join("scatter");
    ok(&[
        "plot",
        "--csp-scatter",
        "--manifest",
        s(&manifest),
        "--model",
        s(&model),
        "--subject",
        "1",
        "--out",
        s(&scatter),
    ]);
    let points = parse_scatter(&fs::read_to_string(scatter.join("csp_scatter.csv")).unwrap());
    // 80 trials per subject, 20 in the held-out block.
    assert_eq!(points.len(), 4 * 20);
    let branch1: Vec<_> = points.iter().filter(|p| p.0 == 1).collect();
    let centroid = |label: u8| {
        let pts: Vec<_> = branch1.iter().filter(|p| p.1 == label).collect();
        let n = pts.len() as f64;
        let (mx, my) = (
            pts.iter().map(|p| p.2).sum::<f64>() / n,
            pts.iter().map(|p| p.3).sum::<f64>() / n,
        );
        let var = pts
            .iter()
            .map(|p| (p.2 - mx).powi(2) + (p.3 - my).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        (mx, my, var.sqrt())
    };
    let (c0, c1) = (centroid(0), centroid(1));
    let distance = ((c0.0 - c1.0).powi(2) + (c0.1 - c1.1).powi(2)).sqrt();
    assert!(
        distance > c0.2.max(c1.2),
        "centroid distance {distance}, within-class SD {} / {}",
        c0.2,
        c1.2
    );
    roxmltree::Document::parse(&fs::read_to_string(scatter.join("csp_scatter.svg")).unwrap())
        .unwrap();

    let stft = tmp.path().join("stft");
    ok(&[
        "plot",
        "--stft",
        "--manifest",
        s(&manifest),
        "--model",
        s(&model),
        "--subject",
        "1",
        "--channel",
        "2",
        "--out",
        s(&stft),
    ]);
    let csv = fs::read_to_string(stft.join("stft.csv")).unwrap();
    for stage in ["raw,0,", "wkcnn,3,", "tcnn,3,"] {
        assert!(csv.contains(stage), "missing {stage}");
    }
    let svg = fs::read_to_string(stft.join("stft.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");

    let raw_only = tmp.path().join("raw");
    ok(&[
        "plot",
        "--stft",
        "--manifest",
        s(&manifest),
        "--subject",
        "2",
        "--out",
        s(&raw_only),
    ]);
    let csv = fs::read_to_string(raw_only.join("stft.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.starts_with("raw,0,")));

    let (c, err) = code(&[
        "plot",
        "--csp-scatter",
        "--manifest",
        s(&manifest),
        "--subject",
        "1",
        "--out",
        s(&raw_only),
    ]);
    assert_eq!(c, 1, "{err}");
}

#[test]
fn ablate_and_eval_si_write_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_dataset(tmp.path());
    let out = tmp.path().join("ablate");
    ok(&[
        "ablate",
        "--component",
        "frn",
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
        "--epochs",
        "2",
        "--batch",
        "30",
    ]);
    let csv = fs::read_to_string(out.join("frn/results.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.contains(",SD,frn,")), "{csv}");

    let si = tmp.path().join("si");
    ok(&[
        "eval-si",
        "--phase",
        "online",
        "--manifest",
        s(&manifest),
        "--out",
        s(&si),
        "--epochs",
        "2",
    ]);
    let csv = fs::read_to_string(si.join("results.csv")).unwrap();
    assert!(
        csv.lines().skip(1).all(|l| l.contains(",SI-online,none,")),
        "{csv}"
    );
    let config = fs::read_to_string(si.join("config.toml")).unwrap();
    assert!(
        config.contains("batch_size = 5300") && config.contains("epochs = 2"),
        "{config}"
    );
}
