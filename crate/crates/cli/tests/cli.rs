use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn merge() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios/merge.toml")
}

fn diffnet(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffnet"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("DIFFNET_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], out: &Path) -> String {
    let o = diffnet(args, out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

/// Data rows of a CSV, without the version line.
fn rows(path: &Path) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# diffnet "));
    lines.map(str::to_string).collect()
}

#[test]
fn run_writes_link_series() {
    let dir = tempfile::tempdir().unwrap();
    let m = merge();
    let stdout = ok(&["run", m.to_str().unwrap()], dir.path());
    assert!(stdout.starts_with("TTT "));
    let r = rows(&dir.path().join("links.csv"));
    assert_eq!(r[0], "t,link,N_up,N_down,density_avg,speed_avg");
    // 401 time points on three links.
    assert_eq!(r.len(), 1 + 401 * 3);
    let last: Vec<&str> = r.last().unwrap().split(',').collect();
    assert_eq!(last[1], "3");
    assert!((last[3].parse::<f64>().unwrap() - 810.0).abs() < 1e-6);
}

#[test]
fn grad_reports_every_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let m = merge();
    ok(
        &[
            "grad",
            m.to_str().unwrap(),
            "--params",
            "q1,q2,u1,u2,u3,alpha1",
            "--objective",
            "ttt",
        ],
        dir.path(),
    );
    let r = rows(&dir.path().join("gradient.csv"));
    assert_eq!(r[0], "parameter,value,ad");
    let names: Vec<&str> = r[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(names, ["q1", "q2", "u1", "u2", "u3", "alpha1"]);
    let u3: f64 = r[5].split(',').nth(2).unwrap().parse().unwrap();
    assert!(u3 < 0.0);
}

#[test]
fn fdcheck_has_one_column_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let m = merge();
    ok(
        &[
            "fdcheck",
            m.to_str().unwrap(),
            "--params",
            "u3",
            "--eps",
            "1e-1,1e-2,1e-3,1e-4,1e-5",
        ],
        dir.path(),
    );
    let r = rows(&dir.path().join("fdcheck.csv"));
    assert_eq!(r.len(), 2);
    assert_eq!(r[0].split(',').count(), 7);
    let v: Vec<f64> = r[1]
        .split(',')
        .skip(1)
        .map(|x| x.parse().unwrap())
        .collect();
    assert!(
        v[1..]
            .iter()
            .all(|fd| (fd - v[0]).abs() / v[0].abs() < 0.05),
        "{v:?}"
    );
}

#[test]
fn trace_lists_link_exits() {
    let dir = tempfile::tempdir().unwrap();
    let m = merge();
    let stdout = ok(
        &[
            "trace",
            m.to_str().unwrap(),
            "--trip",
            "100:1:d",
            "--trip",
            "500:2:d",
        ],
        dir.path(),
    );
    assert!(
        stdout.contains("trip 0: 1 -> d at 100 s takes 100.000 s"),
        "{stdout}"
    );
    let r = rows(&dir.path().join("trajectories.csv"));
    assert_eq!(r[0], "trip,t0,origin,destination,link,t_exit");
    assert_eq!(r.len(), 5);
    assert!(r[1].starts_with("0,100,1,d,1,150"));
}

const TOLLED: &str = "../core/scenarios/tollgrid.toml";

#[test]
fn toll_optimizers_write_trace_and_tolls() {
    let sc = Path::new(env!("CARGO_MANIFEST_DIR")).join(TOLLED);
    let sc = sc.to_str().unwrap();
    for cmd in [
        vec!["optimize-toll", sc, "--iters", "3", "--lr", "1"],
        vec!["spsa-toll", sc, "--iters", "3", "--seed", "4"],
    ] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        ok(&cmd, a.path());
        ok(&cmd, b.path());
        let trace = rows(&a.path().join("trace.csv"));
        assert_eq!(trace[0], "iteration,J,TTT,grad_norm");
        assert_eq!(trace.len(), 4);
        for f in ["trace.csv", "tolls.csv"] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap()
            );
        }
        assert_eq!(rows(&a.path().join("tolls.csv")).len(), 121);
    }
}

#[test]
fn merge_has_no_tolls_to_optimize() {
    let dir = tempfile::tempdir().unwrap();
    let m = merge();
    let o = diffnet(
        &["optimize-toll", m.to_str().unwrap(), "--iters", "1"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let m = merge();
    let m = m.to_str().unwrap();

    let o = diffnet(&["grad", m, "--params", "u9"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("u9"));

    let o = diffnet(&["run", m, "--mu=-1"], dir.path());
    assert_eq!(o.status.code(), Some(1));

    let o = diffnet(&["run", m, "--bogus"], dir.path());
    assert_eq!(o.status.code(), Some(1));

    let o = diffnet(&["run", "/nonexistent/merge.toml"], dir.path());
    assert_eq!(o.status.code(), Some(3));

    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let o = diffnet(&["run", m], &blocker.join("sub"));
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn overrides_change_the_run() {
    let sc = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios/tworoute.toml");
    let sc = sc.to_str().unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&["run", sc], a.path());
    ok(&["run", sc, "--mu", "0", "--segments", "3"], b.path());
    assert_ne!(
        rows(&a.path().join("links.csv")),
        rows(&b.path().join("links.csv"))
    );
}
