use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use emscan_core::heatmap::{write_png, RgbImage};

fn emscan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emscan"))
        .args(args)
        .current_dir(workspace())
        .output()
        .expect("binary runs")
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn small_scan(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "scan",
        "--scene",
        "scenarios/desktop_6ft.json",
        "--seed",
        "42",
        "--az-pixels",
        "12",
        "--el-pixels",
        "6",
        "--hop-duration",
        "0.001",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    emscan(&args)
}

#[test]
fn every_command_has_help() {
    for cmd in ["antenna", "plan", "estimate", "scan", "overlay", "export"] {
        let o = emscan(&[cmd, "--help"]);
        assert_eq!(code(&o), 0, "{cmd}");
        assert!(stdout(&o).contains("Usage"), "{cmd}");
    }
    assert_eq!(code(&emscan(&["--help"])), 0);
    assert_eq!(code(&emscan(&["bogus"])), 2);
}

#[test]
fn antenna_text_and_json_agree() {
    let text = emscan(&["antenna", "--turns", "13", "--pitch", "11.3", "--clambda", "1.0"]);
    assert_eq!(code(&text), 0);
    let t = stdout(&text);
    assert!(t.contains("15.91 dBi"), "{t}");
    assert!(t.contains("32.26 deg"), "{t}");

    let json = emscan(&["antenna", "--turns", "13", "--pitch", "11.3", "--clambda", "1.0", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    let gain = v["gain_dbi"].as_f64().unwrap();
    let hpbw = v["hpbw_deg"].as_f64().unwrap();
    let ar = v["axial_ratio"].as_f64().unwrap();
    assert!(t.contains(&format!("{gain:.2} dBi")));
    assert!(t.contains(&format!("{hpbw:.2} deg")));
    assert!(t.contains(&format!("{ar:.4}")));
    assert!((gain - 15.91).abs() < 0.01);
}

#[test]
fn antenna_rejects_zero_turns() {
    let o = emscan(&["antenna", "--turns", "0", "--pitch", "11.3", "--clambda", "1.0"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("turns"));
}

#[test]
fn estimate_examples() {
    let o = emscan(&["estimate", "--az-pixels", "100", "--el-pixels", "100", "--settle", "0.5",
        "--band-mhz", "1648,1728", "--hop-mhz", "20", "--hop-duration", "0.125"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).trim(), "5000 s (1:23:20)");

    let o = emscan(&["estimate", "--az-pixels", "1", "--el-pixels", "1", "--band-mhz", "1648,1668"]);
    assert!(stdout(&o).starts_with("0.5 s"));

    let o = emscan(&["estimate", "--band-mhz", "2400,2450"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("try 16.667 MHz"), "{}", stderr(&o));

    let o = emscan(&["estimate", "--settle", "0.2"]);
    assert_eq!(code(&o), 2);
    let o = emscan(&["estimate", "--settle", "0.2", "--unsafe-settle"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).trim(), "5000 s (1:23:20)");
}

#[test]
fn plan_prints_hops() {
    let o = emscan(&["plan", "--band-mhz", "2400,2500", "--hop-duration", "0.1"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let centers: Vec<f64> = v["plan"]["hops"].as_array().unwrap().iter().map(|h| h["center_hz"].as_f64().unwrap()).collect();
    assert_eq!(centers, vec![2410e6, 2430e6, 2450e6, 2470e6, 2490e6]);
    assert_eq!(v["estimated_duration_s"].as_f64().unwrap(), 5000.0);
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"az_pixels": 10, "el_pixels": 10, "settle_s": 1.0}"#).unwrap();
    let o = emscan(&["estimate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(stdout(&o).trim(), "100 s (0:01:40)");
    let o = emscan(&["estimate", "--config", cfg.to_str().unwrap(), "--settle", "2"]);
    assert_eq!(stdout(&o).trim(), "200 s (0:03:20)");
    std::fs::write(&cfg, r#"{"az_pixels": 10, "settle": 1.0}"#).unwrap();
    let o = emscan(&["estimate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("settle"), "{}", stderr(&o));
}

#[test]
fn desktop_scan_finds_the_documented_bearing() {
    let dir = tempfile::tempdir().unwrap();
    // 4 deg cells centered on -20 deg azimuth and 10 deg elevation
    let o = emscan(&["scan", "--scene", "scenarios/desktop_6ft.json", "--seed", "42",
        "--az-pixels", "45", "--el-pixels", "20", "--hop-duration", "0.002",
        "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert!((m["peak"]["az_deg"].as_f64().unwrap() - -20.0).abs() < 1e-9, "{m}");
    assert!((m["peak"]["el_deg"].as_f64().unwrap() - 10.0).abs() < 1e-9, "{m}");
    assert_eq!(m["complete"], true);
    assert_eq!(m["invalid_pixels"], 0);
    for f in ["heatmap.csv", "heatmap.pgm", "heatmap.png", "pixels.csv", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(dir.path().join("pixels.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 45 * 20);
    assert!(log.starts_with("i_az,i_el,az_deg,el_deg,t_offset_s,hop0_dbm,hop1_dbm,hop2_dbm,hop3_dbm,integrated_dbm\n"));
}

fn read_outputs(dir: &Path) -> Vec<Vec<u8>> {
    ["heatmap.csv", "heatmap.pgm", "heatmap.png", "pixels.csv", "manifest.json"]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).unwrap())
        .collect()
}

#[test]
fn repeat_runs_and_manifest_replay_are_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(code(&small_scan(a.path(), &[])), 0);
    assert_eq!(code(&small_scan(b.path(), &["--pipeline-depth", "1"])), 0);
    let (oa, ob) = (read_outputs(a.path()), read_outputs(b.path()));
    assert_eq!(oa[..4], ob[..4]);

    // replay from the manifest's config block into a third directory
    let c = tempfile::tempdir().unwrap();
    let m: serde_json::Value = serde_json::from_slice(&oa[4]).unwrap();
    let cfg = c.path().join("replay.json");
    std::fs::write(&cfg, m["config"].to_string()).unwrap();
    let out = c.path().join("out");
    let o = emscan(&["scan", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_outputs(&out)[..4], oa[..4]);
}

#[test]
fn scan_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = emscan(&["scan", "--scene", "scenarios/nope.json", "--seed", "1", "--out", d]);
    assert_eq!(code(&o), 2);
    let o = emscan(&["scan", "--scene", "scenarios/desktop_6ft.json", "--out", d]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--seed"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"emitters": [{"label": "x", "position_m": [1,0,0], "eirp_dbm": 0, "band_hz": [1,2], "gain": 3}], "chain": {"pattern": {"model": "gaussian_beam", "boresight_gain_dbi": 10, "hpbw_deg": 30}}}"#).unwrap();
    let o = emscan(&["scan", "--scene", bad.to_str().unwrap(), "--seed", "1", "--out", d]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("emitters[0]"), "{}", stderr(&o));

    let o = emscan(&["scan", "--scene", "scenarios/desktop_6ft.json", "--seed", "1", "--out", d, "--az-range", "-100,100"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unreachable_or_silent_rotor_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("out");
    let o = small_scan(&d, &["--backend", "serial", "--port", "/nonexistent/ttyUSB9"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    // a plain file accepts the command but never answers
    let port = dir.path().join("silent");
    std::fs::write(&port, b"").unwrap();
    let o = small_scan(&d, &["--backend", "serial", "--port", port.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert_eq!(std::fs::read(&port).unwrap(), b"HOME\n");
}

#[test]
fn transcript_records_the_conversation() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("rotor.log");
    let o = small_scan(&dir.path().join("out"), &["--transcript", t.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let log = std::fs::read_to_string(&t).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("> HOME"));
    assert_eq!(lines.next(), Some("< OK"));
    assert!(lines.next().unwrap().starts_with("> MOVE "));
}

#[test]
fn export_and_overlay() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scan");
    assert_eq!(code(&small_scan(&out, &[])), 0);
    let csv = out.join("heatmap.csv");
    let pgm = dir.path().join("e.pgm");
    let png = dir.path().join("e.png");
    let o = emscan(&["export", "--map", csv.to_str().unwrap(), "--pgm", pgm.to_str().unwrap(),
        "--png", png.to_str().unwrap(), "--upscale", "3", "--bilinear"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(&pgm).unwrap(), std::fs::read(out.join("heatmap.pgm")).unwrap());
    let img = emscan_core::heatmap::read_png(&png).unwrap();
    assert_eq!((img.width, img.height), (36, 18));
    assert_eq!(code(&emscan(&["export", "--map", csv.to_str().unwrap()])), 2);

    let photo = dir.path().join("photo.png");
    write_png(&RgbImage::new(90, 30), &photo, None).unwrap();
    let blended = dir.path().join("blend.png");
    let o = emscan(&["overlay", "--map", csv.to_str().unwrap(), "--photo", photo.to_str().unwrap(),
        "--out", blended.to_str().unwrap(), "--hfov", "90", "--vfov", "30", "--cam-az", "0", "--cam-el", "15"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let b = emscan_core::heatmap::read_png(&blended).unwrap();
    assert_eq!((b.width, b.height), (90, 30));
    assert!(b.data.iter().any(|&v| v > 0));

    let o = emscan(&["overlay", "--map", csv.to_str().unwrap(), "--photo", photo.to_str().unwrap(),
        "--out", blended.to_str().unwrap(), "--cam-az", "170", "--cam-el", "-60"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("does not intersect"), "{}", stderr(&o));
}
