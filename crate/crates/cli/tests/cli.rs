use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use xct_cli::dataset::{read_volume, write_volume};
use xct_cli::Manifest;
use xct_core::geometry::{Volume, VolumeRole};
use xct_core::precision::DType;

fn xct(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xct"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn xct")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = xct(dir, args);
    assert!(
        out.status.success(),
        "xct {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn scan(dir: &Path) {
    ok(
        dir,
        &[
            "phantom", "--size", "32", "--slices", "3", "--seed", "5", "--out", "t.xct",
        ],
    );
    ok(
        dir,
        &[
            "project",
            "--geometry",
            "48,3,32",
            "--in",
            "t.xct",
            "--noise",
            "0.01",
            "--seed",
            "9",
            "--out",
            "s.xct",
        ],
    );
}

fn residuals(path: &Path) -> Vec<f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn end_to_end_reconstruction() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(
        d,
        &["phantom", "--size", "32", "--slices", "2", "--out", "t.xct"],
    );
    ok(
        d,
        &[
            "project",
            "--geometry",
            "48,2,32",
            "--in",
            "t.xct",
            "--out",
            "s.xct",
        ],
    );
    ok(
        d,
        &[
            "recon",
            "--in",
            "s.xct",
            "--geometry",
            "48,2,32",
            "--iters",
            "30",
            "--precision",
            "double",
            "--pd",
            "4",
            "--ffactor",
            "2",
            "--out",
            "r.xct",
            "--manifest",
            "r.json",
        ],
    );
    let history = residuals(&d.join("r.residuals.csv"));
    assert_eq!(history.len(), 30);
    assert!(history.windows(2).take(10).all(|w| w[1] < w[0]));
    assert!(history[29] < 0.05 * history[0]);

    let tomogram = read_volume(&d.join("r.xct")).unwrap();
    assert_eq!(tomogram.shape(), [2, 32, 32]);
    assert_eq!(tomogram.dtype(), DType::F64);

    let manifest = Manifest::read(&d.join("r.json")).unwrap();
    let xct_cli::commands::Details::Recon(summary) = manifest.details else {
        panic!("recon details missing");
    };
    assert_eq!(summary.counters.projections, 30);
    assert_eq!(summary.counters.backprojections, 31);
    assert!(summary.volume.global.inter_node_bytes <= summary.volume.direct.inter_node_bytes);
}

#[test]
fn early_stop_truncates_history() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    scan(d);
    ok(
        d,
        &[
            "recon",
            "--in",
            "s.xct",
            "--geometry",
            "48,3,32",
            "--iters",
            "30",
            "--early-stop",
            "4",
            "--precision",
            "single",
            "--out",
            "r.xct",
            "--residuals",
            "h.csv",
        ],
    );
    assert_eq!(residuals(&d.join("h.csv")).len(), 4);
}

#[test]
fn replay_is_byte_identical_across_workers() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    scan(d);
    ok(
        d,
        &[
            "--workers",
            "2",
            "recon",
            "--in",
            "s.xct",
            "--geometry",
            "48,3,32",
            "--iters",
            "6",
            "--precision",
            "mixed",
            "--pd",
            "6",
            "--ffactor",
            "2",
            "--out",
            "r.xct",
            "--manifest",
            "r.json",
        ],
    );
    for workers in ["1", "4", "8"] {
        let out = format!("rep{workers}");
        ok(
            d,
            &[
                "--workers",
                workers,
                "replay",
                "--manifest",
                "r.json",
                "--out-dir",
                &out,
            ],
        );
        for name in ["r.xct", "r.residuals.csv"] {
            assert_eq!(
                fs::read(d.join(name)).unwrap(),
                fs::read(d.join(&out).join(name)).unwrap(),
                "{name} with {workers} workers"
            );
        }
    }
}

#[test]
fn seeded_generation_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "phantom",
            "--kind",
            "random-blobs",
            "--size",
            "24",
            "--seed",
            "11",
            "--out",
            "a.xct",
            "--manifest",
            "a.json",
        ],
    );
    ok(d, &["replay", "--manifest", "a.json", "--out-dir", "again"]);
    assert_eq!(
        fs::read(d.join("a.xct")).unwrap(),
        fs::read(d.join("again/a.xct")).unwrap()
    );
    ok(
        d,
        &[
            "phantom",
            "--kind",
            "random-blobs",
            "--size",
            "24",
            "--seed",
            "12",
            "--out",
            "b.xct",
        ],
    );
    assert_ne!(
        fs::read(d.join("a.xct")).unwrap(),
        fs::read(d.join("b.xct")).unwrap()
    );
}

#[test]
fn half_dataset_roundtrip_through_commands() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "phantom", "--size", "16", "--dtype", "half", "--out", "h.xct",
        ],
    );
    let v = read_volume(&d.join("h.xct")).unwrap();
    assert_eq!(v.dtype(), DType::F16);
    let copy = d.join("copy.xct");
    write_volume(&copy, &v).unwrap();
    assert_eq!(fs::read(&copy).unwrap(), fs::read(d.join("h.xct")).unwrap());
    assert_eq!(fs::metadata(&copy).unwrap().len(), 7 + 12 + 2 * 16 * 16);
}

#[test]
fn export_of_zero_volume_is_black() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write_volume(
        &d.join("z.xct"),
        &Volume::zeros([1, 4, 6], VolumeRole::Tomogram),
    )
    .unwrap();
    ok(
        d,
        &["export", "--in", "z.xct", "--slice", "0", "--out", "z.pgm"],
    );
    let pgm = fs::read(d.join("z.pgm")).unwrap();
    let header = b"P5\n6 4\n65535\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(pgm.len(), header.len() + 48);
    assert!(pgm[header.len()..].iter().all(|&b| b == 0));
}

#[test]
fn plan_auto_splits_large_scan() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    fs::write(
        d.join("summit.topo"),
        "# 4096 nodes\nnodes=4096 sockets=2 gpus=3\nbw_socket=50e9 bw_node=25e9 bw_inter=12.5e9 lat=5e-6\n",
    )
    .unwrap();
    ok(
        d,
        &[
            "plan",
            "--geometry",
            "4501,9209,11283",
            "--topology",
            "summit.topo",
            "--mem-cap",
            "16G",
            "--report",
            "plan.csv",
            "--manifest",
            "plan.json",
        ],
    );
    let manifest = Manifest::read(&d.join("plan.json")).unwrap();
    let xct_cli::commands::Details::Plan(plan) = manifest.details else {
        panic!("plan details missing");
    };
    assert!(plan.pd > 1);
    assert!(plan.bytes_per_process <= 16e9);
    assert!(plan.pb * plan.pd <= plan.total_gpus);

    let csv = fs::read_to_string(d.join("plan.csv")).unwrap();
    let bytes = |level: &str| -> u64 {
        csv.lines()
            .find(|l| l.starts_with(level))
            .unwrap()
            .split(',')
            .nth(3)
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!(bytes("global") <= bytes("direct"));
}

#[test]
fn plan_small_cap_forces_data_partitioning() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let out = ok(d, &["plan", "--geometry", "90,64,64", "--mem-cap", "1.5M"]);
    let pd: usize = out
        .split_whitespace()
        .find_map(|t| t.strip_prefix("pd="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(pd > 1, "{out}");
    let out = xct(d, &["plan", "--geometry", "90,64,64", "--mem-cap", "100K"]);
    assert!(!out.status.success());
}

#[test]
fn bench_reports_counters() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "bench",
            "--geometry",
            "24,1,16",
            "--ffactor-sweep",
            "1..4",
            "--reps",
            "1",
            "--report",
            "b.csv",
        ],
    );
    let csv = fs::read_to_string(d.join("b.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "ffactor,nnz,stored_entries,flops,bytes,intensity,seconds,gflops"
    );
    assert_eq!(lines.len(), 5);
    let intensity: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(5).unwrap().parse().unwrap())
        .collect();
    assert!(intensity.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn errors_exit_nonzero_with_message() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let out = xct(d, &["phantom", "--out", "x.xct", "--bogus"]);
    assert!(!out.status.success());

    let missing: PathBuf = d.join("absent.xct");
    let out = xct(
        d,
        &[
            "recon",
            "--in",
            missing.to_str().unwrap(),
            "--geometry",
            "8,1,8",
            "--out",
            "r.xct",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.xct"));

    scan(d);
    let out = xct(
        d,
        &[
            "recon",
            "--in",
            "s.xct",
            "--geometry",
            "48,2,32",
            "--out",
            "r.xct",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match"));
}
