use std::path::Path;
use std::process::{Command, Output};

fn dvfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dvfl")).args(args).output().expect("spawn dvfl")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_libsvm(path: &Path, rows: usize) {
    let mut text = String::new();
    for i in 0..rows {
        let a = (i * 7 % 11) as f64 / 11.0;
        let b = (i * 5 % 13) as f64 / 13.0;
        let label = if a + b > 1.0 { "+1" } else { "-1" };
        text.push_str(&format!("{label} 1:{a} 2:{} 3:{b} 4:{}\n", 1.0 - a, 1.0 - b));
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn split_psi_train_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_libsvm(&d.join("train"), 60);
    let out = dvfl(&[
        "split",
        "--input",
        p(&d.join("train")),
        "--active-cols",
        "0:2",
        "--out-active",
        p(&d.join("a.csv")),
        "--out-passive",
        p(&d.join("p.csv")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let header = std::fs::read_to_string(d.join("a.csv")).unwrap();
    assert!(header.starts_with("id,label,f0,f1\n"));

    let out = dvfl(&[
        "psi",
        "--active",
        p(&d.join("a.csv")),
        "--passive",
        p(&d.join("p.csv")),
        "--workers",
        "3",
        "--out",
        p(&d.join("ids.txt")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ids: Vec<String> = std::fs::read_to_string(d.join("ids.txt"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(ids.len(), 60);
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);

    let config = format!(
        "n_workers = 2\n[model]\nepochs = 3\nbatch = 8\n[data]\nactive = {:?}\npassive = {:?}\n[output]\ncheckpoint = {:?}\nmetrics = {:?}\n",
        p(&d.join("a.csv")),
        p(&d.join("p.csv")),
        p(&d.join("model.ckpt")),
        p(&d.join("metrics.csv")),
    );
    std::fs::write(d.join("run.toml"), config).unwrap();
    let out = dvfl(&["train", "--config", p(&d.join("run.toml")), "--role", "local"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(d.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,step,worker,loss,"));
    assert_eq!(metrics.lines().count(), 1 + 3 * 4 * 2);

    let out = dvfl(&[
        "eval",
        "--model",
        p(&d.join("model.ckpt")),
        "--test-active",
        p(&d.join("a.csv")),
        "--test-passive",
        p(&d.join("p.csv")),
        "--he-rows",
        "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("rows 60"));
    assert!(text.contains("he_ms_per_row"));
}

#[test]
fn two_process_training_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_libsvm(&d.join("train"), 40);
    let out = dvfl(&[
        "split",
        "--input",
        p(&d.join("train")),
        "--out-active",
        p(&d.join("a.csv")),
        "--out-passive",
        p(&d.join("p.csv")),
    ]);
    assert!(out.status.success());
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let common = format!(
        "n_workers = 2\n[model]\nepochs = 2\nbatch = 8\n[endpoints]\npeer = \"127.0.0.1:{port}\"\n[data]\nactive = {:?}\npassive = {:?}\ntest_active = {:?}\ntest_passive = {:?}\n",
        p(&d.join("a.csv")),
        p(&d.join("p.csv")),
        p(&d.join("a.csv")),
        p(&d.join("p.csv")),
    );
    for role in ["active", "passive"] {
        let cfg = format!("{common}[output]\ncheckpoint = {:?}\n", p(&d.join(format!("{role}.ckpt"))));
        std::fs::write(d.join(format!("{role}.toml")), cfg).unwrap();
    }
    let passive = Command::new(env!("CARGO_BIN_EXE_dvfl"))
        .args(["train", "--config", p(&d.join("passive.toml")), "--role", "passive"])
        .spawn()
        .unwrap();
    let out = dvfl(&["train", "--config", p(&d.join("active.toml")), "--role", "active"]);
    let status = passive.wait_with_output().unwrap().status;
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(status.success());

    let local_cfg = format!("{common}[output]\ncheckpoint = {:?}\n", p(&d.join("local.ckpt")));
    std::fs::write(d.join("local.toml"), local_cfg).unwrap();
    let out = dvfl(&["train", "--config", p(&d.join("local.toml"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let (ta, tp) = (d.join("a.csv"), d.join("p.csv"));
    let eval = |models: &[&Path]| {
        let mut args = vec!["eval", "--model"];
        args.extend(models.iter().map(|m| p(m)));
        args.extend(["--test-active", p(&ta), "--test-passive", p(&tp)]);
        let out = dvfl(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let (ac, pc, lc) = (d.join("active.ckpt"), d.join("passive.ckpt"), d.join("local.ckpt"));
    let split = eval(&[&ac, &pc]);
    let local = eval(&[&lc]);
    let strip = |s: &str| s.lines().filter(|l| !l.starts_with("ms_per_row")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&split), strip(&local));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "n_workers = 0\n").unwrap();
    let out = dvfl(&["train", "--config", p(&d.join("bad.toml"))]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(d.join("typo.toml"), "n_wokers = 2\n").unwrap();
    let out = dvfl(&["train", "--config", p(&d.join("typo.toml"))]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(d.join("missing.toml"), "[data]\nactive = \"/nonexistent/a\"\npassive = \"/nonexistent/p\"\n").unwrap();
    let out = dvfl(&["train", "--config", p(&d.join("missing.toml"))]);
    assert_eq!(out.status.code(), Some(4));

    std::fs::write(d.join("broken"), "+1 1:x\n").unwrap();
    let out = dvfl(&[
        "split",
        "--input",
        p(&d.join("broken")),
        "--out-active",
        p(&d.join("a.csv")),
        "--out-passive",
        p(&d.join("p.csv")),
    ]);
    assert_eq!(out.status.code(), Some(4));

    let out = dvfl(&["bench", "--sweep", "warp=9", "--out", p(&d.join("b.csv"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_libsvm(&d.join("train"), 32);
    dvfl(&[
        "split",
        "--input",
        p(&d.join("train")),
        "--out-active",
        p(&d.join("a.csv")),
        "--out-passive",
        p(&d.join("p.csv")),
    ]);
    std::fs::write(d.join("base.toml"), "[model]\nepochs = 1\n").unwrap();
    let out = dvfl(&[
        "bench",
        "--config",
        p(&d.join("base.toml")),
        "--sweep",
        "workers=1,2",
        "he=off,on",
        "key_bits=64",
        "--replicate",
        "2",
        "--active",
        p(&d.join("a.csv")),
        "--passive",
        p(&d.join("p.csv")),
        "--out",
        p(&d.join("bench.csv")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(d.join("bench.csv")).unwrap();
    assert!(text.starts_with("# reference:"));
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.ends_with(",ok")), "{text}");
    assert!(rows.iter().all(|r| r.split(',').nth(3) == Some("64")), "{text}");
}
