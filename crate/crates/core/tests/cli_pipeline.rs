use std::fs;
use std::path::Path;

use archdepth::cli::{main_with_args, CompareReport, PriorReport};
use archdepth::metrics::EvalReport;

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("archdepth").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(root: &Path) -> std::path::PathBuf {
    let data = root.join("data");
    let code = run(&[
        "generate",
        "--preset",
        "empty_room",
        "--stations",
        "2x2",
        "--seed",
        "1",
        "--width",
        "40",
        "--height",
        "72",
        "--out",
        s(&data),
    ]);
    assert_eq!(code, 0);
    data
}

const TRAIN_FLAGS: [&str; 6] = ["--iterations", "15", "--resolution", "12", "--rays", "256"];

#[test]
fn generate_priors_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    assert_eq!(fs::read_dir(data.join("rgb")).unwrap().count(), 80);

    assert_eq!(run(&["priors", "--data", s(&data)]), 0);
    let pr: PriorReport = serde_json::from_str(&fs::read_to_string(data.join("priors_report.json")).unwrap()).unwrap();
    assert!(pr.accuracy.coverage > 0.95);
    assert_eq!(pr.per_view_coverage.len(), 80);

    let run_dir = dir.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--mode", "depth_boundl", "--out", s(&run_dir)];
    args.extend(TRAIN_FLAGS);
    assert_eq!(run(&args), 0);
    for f in ["checkpoint.bin", "config.json", "log.jsonl"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run_dir.join("log.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(last["iteration"], 15);
    assert!(last["depth"].as_f64().is_some());

    let eval_dir = dir.path().join("eval");
    let ck = run_dir.join("checkpoint.bin");
    assert_eq!(run(&["eval", "--data", s(&data), "--checkpoint", s(&ck), "--out", s(&eval_dir)]), 0);
    let text = fs::read_to_string(eval_dir.join("report.json")).unwrap();
    let report: EvalReport = serde_json::from_str(&text).unwrap();
    assert_eq!(report.views.len(), 20);
    assert!(report.mean_psnr > 0.0 && report.mean_ssim <= 1.0);
    assert!(report.depth_rmse.is_some() && report.depth_pixels > 0);
    assert_eq!(report.dataset_hash.as_deref().map(str::len), Some(64));
    assert_eq!(report.config["train"]["mode"], "depth_boundl");
    assert_eq!(serde_json::to_string_pretty(&report).unwrap() + "\n", text);
    assert!(fs::read_to_string(eval_dir.join("report.txt")).unwrap().contains("mean"));

    let renders = dir.path().join("renders");
    assert_eq!(
        run(&[
            "render",
            "--data",
            s(&data),
            "--checkpoint",
            s(&ck),
            "--split",
            "eval",
            "--out",
            s(&renders)
        ]),
        0
    );
    for sub in ["rgb", "depth", "depth_vis"] {
        assert_eq!(fs::read_dir(renders.join(sub)).unwrap().count(), 20, "{sub}");
    }
    // Scores from saved renders agree with direct evaluation up to 8-bit/mm quantization.
    let again = dir.path().join("eval_renders");
    assert_eq!(run(&["eval", "--data", s(&data), "--renders", s(&renders), "--out", s(&again)]), 0);
    let from_png: EvalReport = serde_json::from_str(&fs::read_to_string(again.join("report.json")).unwrap()).unwrap();
    assert!((from_png.mean_psnr - report.mean_psnr).abs() < 0.5);
    assert!((from_png.depth_rmse.unwrap() - report.depth_rmse.unwrap()).abs() < 2e-3);
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    assert_eq!(run(&["priors", "--data", s(&data)]), 0);
    let same = dir.path().join("same");
    for sub in ["rgb", "depth"] {
        fs::create_dir_all(same.join(sub)).unwrap();
        for e in fs::read_dir(data.join(sub)).unwrap() {
            let e = e.unwrap();
            fs::copy(e.path(), same.join(sub).join(e.file_name())).unwrap();
        }
    }
    let out = dir.path().join("eval");
    assert_eq!(run(&["eval", "--data", s(&data), "--renders", s(&same), "--out", s(&out)]), 0);
    let r: EvalReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(r.mean_psnr, 100.0);
    assert_eq!(r.mean_ssim, 1.0);
    assert_eq!(r.depth_rmse, Some(0.0));
}

#[test]
fn compare_three_modes() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    assert_eq!(run(&["priors", "--data", s(&data)]), 0);
    let out = dir.path().join("cmp");
    let mut args = vec![
        "compare",
        "--data",
        s(&data),
        "--modes",
        "rgb_only,depth_mse,depth_boundl",
        "--out",
        s(&out),
    ];
    args.extend(TRAIN_FLAGS);
    assert_eq!(run(&args), 0);
    let r: CompareReport = serde_json::from_str(&fs::read_to_string(out.join("compare.json")).unwrap()).unwrap();
    assert_eq!(r.rows.len(), 3);
    assert!(r.rows.iter().all(|row| row.lpips == "n/a"));
    let names: Vec<&str> = r.rows.iter().map(|row| row.mode.name()).collect();
    assert_eq!(names, ["rgb_only", "depth_mse", "depth_boundl"]);

    // Rows match the per-mode eval reports, and reuse reproduces them.
    for row in &r.rows {
        let e: EvalReport = serde_json::from_str(&fs::read_to_string(out.join(row.mode.name()).join("report.json")).unwrap()).unwrap();
        assert_eq!(e.mean_psnr, row.psnr);
        assert_eq!(e.depth_rmse, row.depth_rmse);
        assert_eq!(e.dataset_hash.as_deref(), Some(r.dataset_hash.as_str()));
    }
    let mut args = vec![
        "compare",
        "--data",
        s(&data),
        "--modes",
        "rgb_only,depth_mse,depth_boundl",
        "--reuse",
        "--out",
        s(&out),
    ];
    args.extend(TRAIN_FLAGS);
    assert_eq!(run(&args), 0);
    let again: CompareReport = serde_json::from_str(&fs::read_to_string(out.join("compare.json")).unwrap()).unwrap();
    assert_eq!(again, r);
}

#[test]
fn failures_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    assert_ne!(run(&["priors", "--data", s(&missing)]), 0);
    assert_ne!(run(&["generate", "--preset", "castle", "--out", s(&missing)]), 0);
    assert_ne!(run(&["generate", "--stations", "2by2", "--out", s(&missing)]), 0);
    assert_ne!(run(&["frobnicate"]), 0);
    let data = small_dataset(dir.path());
    let out = dir.path().join("run");
    // Depth supervision without priors.
    assert_ne!(
        run(&[
            "train",
            "--data",
            s(&data),
            "--mode",
            "depth_mse",
            "--iterations",
            "2",
            "--out",
            s(&out)
        ]),
        0
    );
    assert_ne!(run(&["train", "--data", s(&data), "--mode", "no_such_mode", "--out", s(&out)]), 0);
    assert_ne!(run(&["eval", "--data", s(&data), "--out", s(&out)]), 0);
}
