use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn deseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deseg")).args(args).output().expect("spawn deseg")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_writes_paired_pngs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    ok(&deseg(&["gen-data", "--n", "3", "--size", "32", "--seed", "1", "--out", s(&out)]));
    for sub in ["rgb", "mask"] {
        let mut names: Vec<String> =
            fs::read_dir(out.join(sub)).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        names.sort();
        assert_eq!(names, ["SYN_00000.png", "SYN_00001.png", "SYN_00002.png"]);
    }
}

#[test]
fn train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&deseg(&["gen-data", "--n", "10", "--size", "32", "--seed", "2", "--out", s(&data)]));

    let mut runs = Vec::new();
    for (variant, loss) in [("V_U-Net", "ce"), ("V_DeU-Net", "wf")] {
        let run = dir.path().join(format!("{variant}_{loss}"));
        let cfg = dir.path().join(format!("{variant}_{loss}.txt"));
        fs::write(
            &cfg,
            format!(
                "# tiny run\nvariant = {variant}\nloss = {loss}\nepochs = 2\nbatch_size = 2\nlr = 1e-3\n\
                 data = {}\nsize = 32\nbase_channels = 4\ndepth = 2\nsplit = 0.6, 0.2, 0.2\nout_dir = {}\n",
                s(&data),
                s(&run)
            ),
        )
        .unwrap();
        let stdout = ok(&deseg(&["train", "--config", s(&cfg)]));
        assert!(stdout.contains("epoch   2"), "{stdout}");
        assert_eq!(fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 3);
        runs.push(run);
    }

    let stdout = ok(&deseg(&[
        "eval",
        "--checkpoint",
        s(&runs[1].join("best.ckpt")),
        "--data",
        s(&data),
        "--split",
        "test",
        "--size",
        "32",
        "--ratios",
        "0.6,0.2,0.2",
    ]));
    assert!(stdout.starts_with("| Sr. # | Categories | V_DeU-Net_wf Acc | V_DeU-Net_wf IoU |"), "{stdout}");
    // the run's own test report used the same split and checkpoint
    let own = fs::read_to_string(runs[1].join("report.md")).unwrap();
    assert_eq!(stdout, own);

    let table = dir.path().join("tables/table1");
    ok(&deseg(&["report", "--runs", s(&runs[0]), s(&runs[1]), "--out", s(&table)]));
    let md = fs::read_to_string(table.with_extension("md")).unwrap();
    let header = md.lines().next().unwrap();
    assert!(header.find("V_U-Net_ce Acc").unwrap() < header.find("V_DeU-Net_wf Acc").unwrap());
    let csv = fs::read_to_string(table.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 12);
}

#[test]
fn resume_continues_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = dir.path().join("c.txt");
    let write = |epochs: usize| {
        fs::write(
            &cfg,
            format!("epochs = {epochs}\nsynthetic_n = 10\nsize = 32\nbase_channels = 4\ndepth = 2\nout_dir = {}\n", s(&run)),
        )
        .unwrap()
    };
    write(1);
    ok(&deseg(&["train", "--config", s(&cfg)]));
    write(2);
    let stdout = ok(&deseg(&["train", "--config", s(&cfg), "--resume"]));
    assert!(!stdout.contains("epoch   1") && stdout.contains("epoch   2"), "{stdout}");
    assert_eq!(fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 3);
}

#[test]
fn gradcheck_exit_codes() {
    let good = deseg(&["gradcheck", "--only", "loss_"]);
    let text = ok(&good);
    for t in ["loss_cross_entropy/logits", "loss_focal/logits", "loss_weighted_focal/logits"] {
        assert!(text.contains(&format!("PASS {t}")), "{text}");
    }
    let bad = deseg(&["gradcheck", "--only", "loss_", "--corrupt", "1.01"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn bad_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "variant = V_U-Net\nlearning_rate = 1\n").unwrap();
    let out = deseg(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    let out = deseg(&["report", "--runs", s(&dir.path().join("nope"))]);
    assert_eq!(out.status.code(), Some(2));
}
