use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use segt::encoder::bev_scatter;
use segt::model_io::{read_bev, write_voxels};
use segt::tensor::Matrix;
use segt::voxelizer::{random_voxel_set, GridSpec, VoxelSet};
use segt::SeededRng;
use tempfile::TempDir;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

impl Run {
    fn value(&self, key: &str) -> Option<&str> {
        self.stdout.lines().find_map(|l| l.strip_prefix(key)?.strip_prefix('='))
    }
}

fn segt(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_segt"))
        .args(args)
        .env_remove("SEGT_THREADS")
        .output()
        .expect("spawn segt");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_set(dir: &TempDir, name: &str, v: &VoxelSet) -> PathBuf {
    let path = dir.path().join(name);
    let mut buf = Vec::new();
    write_voxels(&mut buf, v).unwrap();
    fs::write(&path, buf).unwrap();
    path
}

fn write_text(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let path = dir.path().join(name);
    fs::write(&path, text).unwrap();
    path
}

/// A small model over an 8-channel 16x16 grid.
const SMALL: &str = "range_min = 0, 0, 0\nrange_max = 16, 16, 1\nvoxel_size = 1, 1, 1\nl_glb = 2\nchannels = 8\nheads = 2\ngroup_size = 4\nin_channels = 8\n";

#[test]
fn voxelize_two_point_csv() {
    let dir = TempDir::new().unwrap();
    let input = write_text(&dir, "pts.csv", "x,y,z,intensity\n0.2,0.2,0.1,0.4\n0.7,0.9,0.3,0.6\n");
    let cfg = write_text(&dir, "c.cfg", "range_min = 0,0,0\nrange_max = 4,4,4\nvoxel_size = 1,1,1\n");
    let out = dir.path().join("v.segv");
    let r = segt(&["voxelize", "--input", p(&input), "--config", p(&cfg), "--output", p(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(r.value("n"), Some("1"));
    assert_eq!(r.value("c"), Some("4"));
    assert_eq!(r.value("dims"), Some("4,4,4"));
    assert_eq!(r.value("dropped"), Some("0"));
    assert!(fs::read(&out).unwrap().starts_with(b"SEGV"));
}

#[test]
fn voxelize_binary_sweep_with_default_grid() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("sweep.bin");
    let pts: [[f32; 5]; 3] = [[1.0, 2.0, 0.0, 10.0, 0.0], [1.1, 2.05, -1.0, 20.0, 0.0], [60.0, 0.0, 0.0, 5.0, 0.1]];
    let bytes: Vec<u8> = pts.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&path, bytes).unwrap();
    let out = dir.path().join("v.segv");
    let r = segt(&["voxelize", "--input", p(&path), "--output", p(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(r.value("n"), Some("1"));
    assert_eq!(r.value("c"), Some("5"));
    assert_eq!(r.value("dims"), Some("384,384,1"));
    assert_eq!(r.value("dropped"), Some("1"));
}

#[test]
fn voxelize_empty_file() {
    let dir = TempDir::new().unwrap();
    let input = write_text(&dir, "empty.bin", "");
    let out = dir.path().join("v.segv");
    let r = segt(&["voxelize", "--input", p(&input), "--output", p(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(r.value("n"), Some("0"));
}

#[test]
fn voxelize_bad_stride_is_config_error() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("odd.bin");
    fs::write(&input, [0u8; 24]).unwrap();
    let out = dir.path().join("v.segv");
    let r = segt(&["voxelize", "--input", p(&input), "--output", p(&out)]);
    assert_eq!(r.code, 3);
    assert!(r.stderr.contains("stride"), "{}", r.stderr);
    let r = segt(&["voxelize", "--input", p(&input), "--output", p(&out), "--stride", "2"]);
    assert_eq!(r.code, 3);
    assert!(r.stdout.is_empty());
}

#[test]
fn missing_input_is_io_error() {
    let r = segt(&["voxelize", "--input", "/nonexistent/points.bin", "--output", "/tmp/unused.segv"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.starts_with("error:"));
}

#[test]
fn bad_config_is_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_text(&dir, "c.cfg", "group_size = 0\n");
    let r = segt(&["bench", "--voxels", "1", "--config", p(&cfg)]);
    assert_eq!(r.code, 3);
    assert!(r.stderr.contains("group_size"));
    let cfg = write_text(&dir, "d.cfg", "\nwat = 1\n");
    let r = segt(&["bench", "--voxels", "1", "--config", p(&cfg)]);
    assert_eq!(r.code, 3);
    assert!(r.stderr.contains("line 2"), "{}", r.stderr);
}

fn three_voxels() -> VoxelSet {
    let f = Matrix::from_fn(3, 1, |r, _| r as f64);
    VoxelSet::new(f, vec![[0, 0, 0], [1, 0, 0], [0, 1, 0]], GridSpec::from_dims([2, 2, 1]).unwrap()).unwrap()
}

fn ranks(csv: &str) -> Vec<usize> {
    csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect()
}

#[test]
fn serialize_three_voxels() {
    let dir = TempDir::new().unwrap();
    let input = write_set(&dir, "v.segv", &three_voxels());
    let cfg = write_text(
        &dir,
        "c.cfg",
        "range_min = 0,0,0\nrange_max = 2,2,1\nvoxel_size = 1,1,1\nl_glb = 1\nl_lcl = 0\n",
    );
    let out = dir.path().join("plus.csv");
    let r = segt(&["serialize", "--input", p(&input), "--strategy", "+", "--config", p(&cfg), "--output", p(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let csv = fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("rank,voxel_row,global_key,local_key,x,y,z\n"));
    assert_eq!(ranks(&csv), vec![0, 2, 1]);
    assert_eq!(csv.lines().nth(2).unwrap(), "1,2,1,0,0,1,0");

    let out = dir.path().join("minus.csv");
    let r = segt(&["serialize", "--input", p(&input), "--strategy", "-", "--config", p(&cfg), "--output", p(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(ranks(&fs::read_to_string(&out).unwrap()), vec![2, 1, 0]);
}

#[test]
fn serialize_strategies_differ_on_random_set() {
    let dir = TempDir::new().unwrap();
    let v = random_voxel_set(&GridSpec::nuscenes(), 1000, 2, &mut SeededRng::new(1)).unwrap();
    let input = write_set(&dir, "v.segv", &v);
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert_eq!(segt(&["serialize", "--input", p(&input), "--strategy", "+", "--output", p(&a)]).code, 0);
    assert_eq!(segt(&["serialize", "--input", p(&input), "--strategy", "minus", "--output", p(&b)]).code, 0);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn serialize_empty_set_and_coverage_error() {
    let dir = TempDir::new().unwrap();
    let empty = VoxelSet::empty(GridSpec::from_dims([64, 64, 1]).unwrap(), 3);
    let input = write_set(&dir, "e.segv", &empty);
    let out = dir.path().join("e.csv");
    let r = segt(&["serialize", "--input", p(&input), "--strategy", "+", "--output", p(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(fs::read_to_string(&out).unwrap(), "rank,voxel_row,global_key,local_key,x,y,z\n");

    let cfg = write_text(&dir, "c.cfg", "l_glb = 3\nl_lcl = 1\n");
    let r = segt(&["serialize", "--input", p(&input), "--strategy", "+", "--config", p(&cfg), "--output", p(&out)]);
    assert_eq!(r.code, 3);
}

#[test]
fn curve_level_one() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("c.csv");
    let r = segt(&["curve", "--level", "1", "--dims", "2", "--output", p(&out)]);
    assert_eq!(r.code, 0);
    assert_eq!(
        fs::read_to_string(&out).unwrap(),
        "index,x,y,z\n0,0,0,0\n1,0,1,0\n2,1,1,0\n3,1,0,0\n"
    );
    assert_eq!(r.value("cells"), Some("4"));
}

#[test]
fn curve_row_counts_and_limits() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("c.csv");
    for (level, dims) in [(3, 2), (2, 3), (0, 2)] {
        let r = segt(&["curve", "--level", &level.to_string(), "--dims", &dims.to_string(), "--output", p(&out)]);
        assert_eq!(r.code, 0);
        let rows = fs::read_to_string(&out).unwrap().lines().count() - 1;
        assert_eq!(rows, 1 << (dims * level));
    }
    assert_eq!(segt(&["curve", "--level", "9", "--output", p(&out)]).code, 3);
    assert_eq!(segt(&["curve", "--level", "2", "--dims", "4", "--output", p(&out)]).code, 3);
}

#[test]
fn curve_svg_segments_are_unit_steps() {
    let dir = TempDir::new().unwrap();
    let (out, svg) = (dir.path().join("c.csv"), dir.path().join("c.svg"));
    let level = 4u32;
    let r = segt(&["curve", "--level", "4", "--output", p(&out), "--svg", p(&svg)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let text = fs::read_to_string(&svg).unwrap();
    let d = text.split("d=\"").nth(1).unwrap().split('"').next().unwrap();
    let points: Vec<(i64, i64)> = d
        .split(['M', 'L'])
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let mut it = s.split_whitespace().map(|v| v.parse::<i64>().unwrap());
            (it.next().unwrap(), it.next().unwrap())
        })
        .collect();
    assert_eq!(points.len() - 1, (1 << (2 * level)) - 1);
    for w in points.windows(2) {
        assert_eq!((w[0].0 - w[1].0).abs() + (w[0].1 - w[1].1).abs(), 1);
    }
}

fn small_case(dir: &TempDir, n: usize) -> (PathBuf, PathBuf, VoxelSet) {
    let v = random_voxel_set(&GridSpec::from_dims([16, 16, 1]).unwrap(), n, 8, &mut SeededRng::new(5)).unwrap();
    (write_set(dir, "v.segv", &v), write_text(dir, "small.cfg", SMALL), v)
}

#[test]
fn encode_identity_reproduces_raw_bev() {
    let dir = TempDir::new().unwrap();
    let (input, cfg, _) = small_case(&dir, 60);
    let out = dir.path().join("b.segb");
    let r = segt(&["encode", "--input", p(&input), "--config", p(&cfg), "--seed", "3", "--init", "identity", "--output", p(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    for i in 0..4 {
        assert!(r.value(&format!("stage{i}_ms")).is_some());
    }
    // SEGV stores f32, so compare against the set as read back.
    let stored = segt::model_io::read_voxels(&fs::read(&input).unwrap()).unwrap();
    assert_eq!(read_bev(&fs::read(&out).unwrap()).unwrap().data(), bev_scatter(&stored).data());
}

#[test]
fn encode_is_deterministic_and_weights_round_trip() {
    let dir = TempDir::new().unwrap();
    let (input, cfg, _) = small_case(&dir, 60);
    let (a, b, c) = (dir.path().join("a.segb"), dir.path().join("b.segb"), dir.path().join("c.segb"));
    let w = dir.path().join("w.segw");
    let csv = dir.path().join("bev.csv");
    let r = segt(&[
        "encode", "--input", p(&input), "--config", p(&cfg), "--seed", "9", "--output", p(&a), "--save-weights", p(&w),
        "--bev-csv", p(&csv),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(segt(&["encode", "--input", p(&input), "--config", p(&cfg), "--seed", "9", "--output", p(&b)]).code, 0);
    assert_eq!(segt(&["--threads", "1", "encode", "--input", p(&input), "--weights", p(&w), "--output", p(&c)]).code, 0);
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    assert_eq!(bytes, fs::read(&c).unwrap());
    let csv = fs::read_to_string(&csv).unwrap();
    assert!(csv.starts_with("x,y,value\n"));
    assert_eq!(csv.lines().count(), 61);
}

#[test]
fn encode_empty_input_gives_zero_bev() {
    let dir = TempDir::new().unwrap();
    let cfg = write_text(&dir, "small.cfg", SMALL);
    let input = write_set(&dir, "e.segv", &VoxelSet::empty(GridSpec::from_dims([16, 16, 1]).unwrap(), 8));
    let out = dir.path().join("b.segb");
    let r = segt(&["encode", "--input", p(&input), "--config", p(&cfg), "--seed", "1", "--output", p(&out)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let bev = read_bev(&fs::read(&out).unwrap()).unwrap();
    assert_eq!((bev.nx(), bev.ny(), bev.channels()), (16, 16, 8));
    assert!(bev.data().iter().all(|&x| x == 0.0));
}

#[test]
fn encode_shape_mismatch_exits_4() {
    let dir = TempDir::new().unwrap();
    let (input, cfg, _) = small_case(&dir, 10);
    let w = dir.path().join("w.segw");
    let out = dir.path().join("b.segb");
    let r = segt(&["encode", "--input", p(&input), "--config", p(&cfg), "--seed", "1", "--output", p(&out), "--save-weights", p(&w)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let other = random_voxel_set(&GridSpec::from_dims([16, 16, 1]).unwrap(), 10, 5, &mut SeededRng::new(2)).unwrap();
    let other = write_set(&dir, "o.segv", &other);
    let r = segt(&["encode", "--input", p(&other), "--weights", p(&w), "--output", p(&out)]);
    assert_eq!(r.code, 4, "{}", r.stderr);

    let mut bytes = fs::read(&w).unwrap();
    bytes.truncate(bytes.len() - 3);
    fs::write(&w, bytes).unwrap();
    let r = segt(&["encode", "--input", p(&input), "--weights", p(&w), "--output", p(&out)]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("truncated"), "{}", r.stderr);
}

#[test]
fn bench_reports_stable_keys() {
    let dir = TempDir::new().unwrap();
    let cfg = write_text(&dir, "small.cfg", SMALL);
    let keys = |r: &Run| r.stdout.lines().map(|l| l.split('=').next().unwrap().to_string()).collect::<Vec<_>>();
    let a = segt(&["bench", "--voxels", "1", "--repeat", "3", "--config", p(&cfg)]);
    let b = segt(&["bench", "--voxels", "1", "--repeat", "3", "--config", p(&cfg), "--seed", "4"]);
    assert_eq!(a.code, 0, "{}", a.stderr);
    assert_eq!(keys(&a), keys(&b));
    for name in ["serialize", "attention", "layer"] {
        for stat in ["min", "median"] {
            let v: f64 = a.value(&format!("{name}_{stat}_ms")).unwrap().parse().unwrap();
            assert!(v > 0.0, "{name}_{stat}_ms = {v}");
        }
    }
    assert_eq!(segt(&["bench", "--voxels", "0"]).code, 3);
}

#[test]
fn selftest_negative_control_names_bijectivity() {
    let r = segt(&["selftest", "--inject-fault", "curve"]);
    assert_eq!(r.code, 1);
    assert_eq!(r.value("curve_bijectivity"), Some("fail"));
    assert!(r.value("failures").unwrap().contains("curve_bijectivity"));
}

#[test]
fn zero_threads_rejected() {
    assert_eq!(segt(&["--threads", "0", "curve", "--level", "1", "--output", "/tmp/unused.csv"]).code, 3);
}
