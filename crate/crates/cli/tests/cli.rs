use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gtforge() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gtforge"))
}

fn c_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures/c")
        .join(name)
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Compiles a C fixture and writes its config. Returns the config path.
fn compile(name: &str, opt: &str, root: &Path) -> PathBuf {
    let dir = root.join(format!("{name}{opt}"));
    fs::create_dir_all(&dir).unwrap();
    let mut sources = Vec::new();
    let mut cs: Vec<PathBuf> = fs::read_dir(c_fixture(name))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "c"))
        .collect();
    cs.sort();
    for c in cs {
        let s = format!("{}.s", c.file_stem().unwrap().to_string_lossy());
        ok(&Command::new("gcc")
            .arg(opt)
            .arg("-S")
            .arg(&c)
            .arg("-o")
            .arg(dir.join(&s))
            .output()
            .unwrap());
        sources.push(s);
    }
    ok(&Command::new("gcc")
        .args(&sources)
        .arg("-o")
        .arg("prog")
        .current_dir(&dir)
        .output()
        .unwrap());
    let cfg = dir.join("gt.conf");
    fs::write(
        &cfg,
        format!(
            "binary = prog\nisa = x64\ncompiler = gcc\noptflag = {opt}\nproject = {name}\nsources = {}\noutput = gt.gtf\n",
            sources.join(" ")
        ),
    )
    .unwrap();
    cfg
}

/// Generic-format predictions claiming every ground-truth instruction, or
/// every one but each `skip`-th.
fn predictions_from(gtf: &Path, tool: &str, skip: Option<usize>) -> String {
    let text = fs::read_to_string(gtf).unwrap();
    let mut out = format!("#tool {tool}\n");
    let insns = text.lines().filter(|l| l.starts_with("I "));
    for (i, line) in insns.enumerate() {
        if skip.is_some_and(|k| i % k == 0) {
            continue;
        }
        let f: Vec<&str> = line.split(' ').collect();
        out.push_str(&format!("{} {} {}\n", f[1], f[2], f[3]));
    }
    out
}

#[test]
fn build_check_score_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut configs = Vec::new();
    for name in ["hello", "switch"] {
        for opt in ["-O0", "-O2"] {
            configs.push(compile(name, opt, root));
        }
    }
    let mut cmd = gtforge();
    cmd.args(["gt", "build", "--jobs", "2"]);
    for c in &configs {
        cmd.arg("--config").arg(c);
    }
    let stdout = ok(&cmd.output().unwrap());
    assert_eq!(stdout.lines().count(), 4, "{stdout}");

    let mut csvs = Vec::new();
    for c in &configs {
        let d = c.parent().unwrap();
        let gtf = d.join("gt.gtf");
        assert!(ok(&gtforge().args(["gt", "check", "--gt"]).arg(&gtf).output().unwrap()).contains(": ok"));
        fs::write(d.join("perfect.txt"), predictions_from(&gtf, "perfect", None)).unwrap();
        fs::write(d.join("lossy.txt"), predictions_from(&gtf, "lossy", Some(3))).unwrap();
        let csv = d.join("scores.csv");
        ok(&gtforge()
            .args(["eval", "score", "--regions", "ignore", "--gt"])
            .arg(&gtf)
            .arg("--pred")
            .arg(d.join("perfect.txt"))
            .arg("--pred")
            .arg(d.join("lossy.txt"))
            .arg("--config")
            .arg(c)
            .arg("--out")
            .arg(&csv)
            .output()
            .unwrap());
        let text = fs::read_to_string(&csv).unwrap();
        let perfect = text.lines().find(|l| l.starts_with("perfect,")).unwrap();
        assert!(
            perfect.ends_with(",1.0,1.0,1.0") || perfect.ends_with(",1,1,1"),
            "{perfect}"
        );
        csvs.push(csv);
    }

    let report = root.join("report");
    let mut cmd = gtforge();
    cmd.args([
        "eval",
        "report",
        "--group-by",
        "compiler",
        "--partition-by",
        "isa",
        "--out",
    ])
    .arg(&report);
    for c in &csvs {
        cmd.arg("--scores").arg(c);
    }
    let table = ok(&cmd.output().unwrap());
    assert!(
        table.starts_with("x64 (1 groups)\nMetric | lossy | perfect\n"),
        "{table}"
    );
    assert!(table.contains("F1 | 0 0.") && table.contains(" | 1 1.00000"), "{table}");
    let summary = fs::read_to_string(report.join("summary.csv")).unwrap();
    let perfect = summary.lines().find(|l| l.starts_with("perfect,")).unwrap();
    assert!(perfect.starts_with("perfect,compiler=gcc,4,"), "{perfect}");
    let wins = fs::read_to_string(report.join("wins.csv")).unwrap();
    assert!(
        wins.starts_with("partition,metric,tool,wins,harmonic_mean,groups\n"),
        "{wins}"
    );
    assert_eq!(fs::read_to_string(report.join("table.txt")).unwrap(), table);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = compile("hello", "-O2", dir.path());
    ok(&gtforge().args(["gt", "build", "--config"]).arg(&cfg).output().unwrap());
    let gtf = cfg.parent().unwrap().join("gt.gtf");

    let missing = gtforge()
        .args(["gt", "build", "--config", "/nonexistent/gt.conf"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
    let bad_format = gtforge()
        .args(["eval", "score", "--format", "nope", "--gt"])
        .arg(&gtf)
        .args(["--pred", "/dev/null"])
        .output()
        .unwrap();
    assert_eq!(bad_format.status.code(), Some(2));

    // flip the last byte of the first instruction record
    let text = fs::read_to_string(&gtf).unwrap();
    let line = text.lines().find(|l| l.starts_with("I ")).unwrap();
    let mut f: Vec<String> = line.split(' ').map(String::from).collect();
    let last = f[3].len() - 2;
    let byte = u8::from_str_radix(&f[3][last..], 16).unwrap() ^ 0xff;
    f[3].replace_range(last.., &format!("{byte:02x}"));
    fs::write(&gtf, text.replacen(line, &f.join(" "), 1)).unwrap();
    let check = gtforge().args(["gt", "check", "--gt"]).arg(&gtf).output().unwrap();
    assert_eq!(
        check.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&check.stdout)
    );
    assert!(String::from_utf8_lossy(&check.stdout).contains("byte-mismatch"));
}

#[test]
fn capture_wrap_and_extract() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("v.c");
    fs::write(&c, "int f(void) { return VER; }\n").unwrap();
    let ledger = dir.path().join("ledger");
    for ver in ["1", "2"] {
        ok(&gtforge()
            .args(["capture", "wrap", "--", &format!("-DVER={ver}"), "-c"])
            .arg(&c)
            .arg("-o")
            .arg(dir.path().join("v.o"))
            .env("GTFORGE_LEDGER", &ledger)
            .env("GTFORGE_REAL_CC", "gcc")
            .env("GTFORGE_BUILD_DIR", dir.path())
            .output()
            .unwrap());
    }
    let out = dir.path().join("versions");
    let listing = ok(&gtforge()
        .args(["capture", "extract", "--ledger"])
        .arg(&ledger)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap());
    assert_eq!(listing, "000001_v.s v.s\n000002_v.s v.s\n");
    assert!(fs::read_to_string(out.join("000001_v.s")).unwrap().contains("$1"));
    assert!(fs::read_to_string(out.join("000002_v.s")).unwrap().contains("$2"));

    let unconfigured = gtforge()
        .args(["capture", "wrap", "--", "-c"])
        .arg(&c)
        .env_remove("GTFORGE_LEDGER")
        .output()
        .unwrap();
    assert_eq!(unconfigured.status.code(), Some(2));
}
