use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::thread::sleep;
use std::time::{Duration, Instant};

fn vfpga(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vfpga"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn repo_config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .display()
        .to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn scenario(dir: &Path, scripts: &[&[String]]) -> PathBuf {
    let mut text = String::from("seed = 5\n[device]\nddr_size = 67108864\n");
    for (i, s) in scripts.iter().enumerate() {
        let lines: Vec<String> = s.iter().map(|l| format!("{l:?}")).collect();
        text.push_str(&format!("[[vm]]\nid = {i}\nscript = [{}]\n", lines.join(", ")));
    }
    let p = dir.join("scenario.toml");
    fs::write(&p, text).unwrap();
    p
}

fn compile(out: &Path, prr: u8) {
    let o = vfpga(&[
        "compile",
        "--kind",
        "vec_add",
        "--prr",
        &prr.to_string(),
        "--image-size",
        "16K",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{o:?}");
}

fn errors_of(report: &str) -> Vec<String> {
    report
        .lines()
        .filter(|l| l.starts_with("errors = "))
        .map(str::to_string)
        .collect()
}

#[test]
fn compiled_bitfile_is_accepted_in_its_own_region() {
    let dir = tempfile::tempdir().unwrap();
    let bit = dir.path().join("k.bit");
    compile(&bit, 0);
    let cfg = scenario(
        dir.path(),
        &[&[
            format!("reprogram_file {}", bit.display()),
            "alloc a 16".into(),
            "alloc b 16".into(),
            "alloc c 16".into(),
            "args @a @b @c 4".into(),
            "launch".into(),
            "wait".into(),
        ]],
    );
    let o = vfpga(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(errors_of(&stdout(&o)), ["errors = []"]);
}

#[test]
fn bitfile_for_another_region_is_denied() {
    let dir = tempfile::tempdir().unwrap();
    let bit = dir.path().join("k.bit");
    compile(&bit, 1);
    let cfg = scenario(dir.path(), &[&[format!("reprogram_file {}", bit.display())]]);
    let o = vfpga(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(errors_of(&stdout(&o)), ["errors = [\"0:permission_denied\"]"]);
}

#[test]
fn truncated_bitfile_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let bit = dir.path().join("k.bit");
    compile(&bit, 0);
    let bytes = fs::read(&bit).unwrap();
    fs::write(&bit, &bytes[..bytes.len() / 2]).unwrap();
    let cfg = scenario(dir.path(), &[&[format!("reprogram_file {}", bit.display())]]);
    let o = vfpga(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    let errs = errors_of(&stdout(&o));
    assert!(errs[0].contains("0:format"), "{errs:?}");
}

#[test]
fn compile_rejects_bad_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.bit");
    let o = vfpga(&["compile", "--kind", "fft", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = repo_config("two_tenants.toml");
    let mut outputs = Vec::new();
    for i in 0..2 {
        let (r, t) = (dir.path().join(format!("r{i}")), dir.path().join(format!("t{i}")));
        let o = vfpga(&[
            "run",
            "--config",
            &cfg,
            "--report",
            r.to_str().unwrap(),
            "--trace",
            t.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{o:?}");
        outputs.push((fs::read(r).unwrap(), fs::read(t).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    let o = vfpga(&["run", "--config", &cfg, "--seed", "43"]);
    assert_ne!(o.stdout, outputs[0].0);
}

#[test]
fn replay_accepts_its_own_trace_and_rejects_a_tampered_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = repo_config("two_tenants.toml");
    let t = dir.path().join("trace");
    assert!(vfpga(&["run", "--config", &cfg, "--trace", t.to_str().unwrap()]).status.success());
    let o = vfpga(&["replay", "--config", &cfg, "--trace", t.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("trace_identical = true"));

    let o = vfpga(&["replay", "--config", &cfg, "--trace", t.to_str().unwrap(), "--guard", "off"]);
    assert_eq!(o.status.code(), Some(2), "{o:?}");

    // Claim a different final memory image.
    let text = fs::read_to_string(&t).unwrap();
    let cut = text.rfind("digest=").unwrap() + "digest=".len();
    fs::write(&t, format!("{}{}\n", &text[..cut], "0".repeat(64))).unwrap();
    let o = vfpga(&["replay", "--config", &cfg, "--trace", t.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(5), "{o:?}");
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "colour = 3\n[[vm]]\nid = 0\nscript = []\n").unwrap();
    let o = vfpga(&["run", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
}

#[test]
fn deadlock_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario(
        dir.path(),
        &[&[
            "reprogram vec_add image=4K".into(),
            "args 0 0 0 1000000".into(),
            "launch".into(),
            "reprogram vec_add image=4K".into(),
            "wait".into(),
        ]],
    );
    let o = vfpga(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{o:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("[0]"));
}

#[test]
fn attacks_all_pass() {
    let o = vfpga(&["attack", "all"]);
    assert!(o.status.success(), "{o:?}");
    let s = stdout(&o);
    assert_eq!(s.matches("verdict = pass").count(), 6, "{s}");
    let o = vfpga(&["attack", "hw_corrupt", "--guard", "on"]);
    assert!(stdout(&o).contains("guard_fault=true"));
    assert_eq!(vfpga(&["attack", "sideways"]).status.code(), Some(2));
}

#[test]
fn microbenchmarks() {
    let o = vfpga(&["microbench", "freq"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).matches("mhz = 200.000").count(), 4);
    let o = vfpga(&["microbench", "pcie"]);
    let s = stdout(&o);
    assert!(s.lines().count() == 11, "{s}");
    let o = vfpga(&["microbench", "membw", "--items", "4096"]);
    assert!(stdout(&o).contains("bytes_per_sec"));
}

#[test]
fn calibration_config_lands_near_55_percent_software() {
    let o = vfpga(&["run", "--config", &repo_config("calibration_vec_add.toml")]);
    let s = stdout(&o);
    let share: f64 = s
        .lines()
        .find_map(|l| l.strip_prefix("software_share = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.45..=0.65).contains(&share), "{share}");
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn wire_mode_report_equals_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = repo_config("two_tenants.toml");
    let sock = dir.path().join("vmm.sock");
    let _server = Server(
        Command::new(env!("CARGO_BIN_EXE_vfpga"))
            .args(["serve", "--config", &cfg, "--socket", sock.to_str().unwrap()])
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let start = Instant::now();
    while !sock.exists() {
        assert!(start.elapsed() < Duration::from_secs(10), "server never bound");
        sleep(Duration::from_millis(20));
    }
    let wire = vfpga(&["run", "--config", &cfg, "--connect", sock.to_str().unwrap()]);
    assert!(wire.status.success(), "{wire:?}");
    let local = vfpga(&["run", "--config", &cfg]);
    assert_eq!(wire.stdout, local.stdout);
}
