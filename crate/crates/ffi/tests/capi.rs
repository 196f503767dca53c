use std::ffi::{CStr, CString};
use std::ptr;

use segt::model_io::RunConfig;
use segt::{encoder_forward, serialize, InitMode, SeededRng, Strategy};
use segt_ffi::*;

const SMALL: &str = "range_min = 0, 0, 0\nrange_max = 16, 16, 2\nvoxel_size = 1, 1, 1\nl_glb = 2\n\
                     channels = 8\nheads = 2\ngroup_size = 4\nin_channels = 3\nseed = 11\n";

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> Option<String> {
    let p = segt_last_error();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
}

fn config(text: &str) -> *mut SegtConfig {
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { segt_config_parse(c(text).as_ptr(), &mut cfg) }, SegtStatus::Ok);
    cfg
}

/// `n` distinct voxels with 3 channels on the SMALL grid.
fn voxels(cfg: *const SegtConfig, n: usize, seed: u64) -> *mut SegtVoxelSet {
    let grid = RunConfig::parse(SMALL).unwrap().grid;
    let v = segt::voxelizer::random_voxel_set(&grid, n, 3, &mut SeededRng::new(seed)).unwrap();
    let coords: Vec<u32> = v.coords().iter().flatten().copied().collect();
    let mut out = ptr::null_mut();
    let st = unsafe { segt_voxelset_new(cfg, coords.as_ptr(), v.features().as_slice().as_ptr(), n, 3, &mut out) };
    assert_eq!(st, SegtStatus::Ok, "{:?}", last_error());
    out
}

unsafe fn to_core(v: *const SegtVoxelSet) -> segt::VoxelSet {
    let n = segt_voxelset_len(v);
    let ch = segt_voxelset_channels(v);
    let coords = std::slice::from_raw_parts(segt_voxelset_coords(v), n * 3);
    let f = std::slice::from_raw_parts(segt_voxelset_features(v), n * ch);
    let grid = RunConfig::parse(SMALL).unwrap().grid;
    segt::VoxelSet::new(
        segt::Matrix::from_vec(n, ch, f.to_vec()).unwrap(),
        coords.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
        grid,
    )
    .unwrap()
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(segt_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn config_text_round_trips_with_length_query() {
    let cfg = config(SMALL);
    let mut len = 0usize;
    assert_eq!(unsafe { segt_config_to_text(cfg, ptr::null_mut(), 0, &mut len) }, SegtStatus::Ok);
    let mut buf = vec![0u8; len + 1];
    assert_eq!(unsafe { segt_config_to_text(cfg, buf.as_mut_ptr().cast(), buf.len(), &mut len) }, SegtStatus::Ok);
    let text = CStr::from_bytes_with_nul(&buf).unwrap().to_str().unwrap();
    assert_eq!(RunConfig::parse(text).unwrap(), RunConfig::parse(SMALL).unwrap());

    let mut small = [0x7fu8; 5];
    assert_eq!(unsafe { segt_config_to_text(cfg, small.as_mut_ptr().cast(), 5, ptr::null_mut()) }, SegtStatus::Ok);
    assert_eq!(&small[..4], &text.as_bytes()[..4]);
    assert_eq!(small[4], 0);
    unsafe { segt_config_free(cfg) };
}

#[test]
fn errors_map_to_status_and_message() {
    let mut cfg = 1 as *mut SegtConfig;
    let st = unsafe { segt_config_parse(c("heads = many\n").as_ptr(), &mut cfg) };
    assert_eq!(st, SegtStatus::Parse);
    assert!(cfg.is_null());
    assert!(last_error().unwrap().contains("line 1"));

    let st = unsafe { segt_config_parse(c("heads = 3\nchannels = 8\n").as_ptr(), &mut cfg) };
    assert_eq!(st, SegtStatus::Config, "{:?}", last_error());

    let st = unsafe { segt_config_default(&mut cfg) };
    assert_eq!(st, SegtStatus::Ok);
    assert_eq!(last_error(), None);
    unsafe { segt_config_free(cfg) };
}

#[test]
fn null_arguments_are_rejected() {
    unsafe {
        assert_eq!(segt_config_default(ptr::null_mut()), SegtStatus::NullPointer);
        let mut out = ptr::null_mut();
        assert_eq!(segt_config_parse(ptr::null(), &mut out), SegtStatus::NullPointer);
        assert!(last_error().unwrap().contains("text"));
        assert_eq!(segt_bev_scatter(ptr::null(), &mut ptr::null_mut()), SegtStatus::NullPointer);
        assert_eq!(segt_voxelset_len(ptr::null()), 0);
        assert!(segt_voxelset_coords(ptr::null()).is_null());
        segt_voxelset_free(ptr::null_mut());
        segt_encoder_free(ptr::null_mut());
    }
}

#[test]
fn voxelize_points_matches_core_and_counts_dropped() {
    let cfg = config(SMALL);
    let mut rng = SeededRng::new(3);
    let mut flat = Vec::new();
    for _ in 0..500 {
        flat.extend([rng.uniform(-1.0, 17.0), rng.uniform(0.0, 16.0), rng.uniform(0.0, 2.0)]);
        flat.extend([rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)]);
    }
    let mut out = ptr::null_mut();
    let mut dropped = 0usize;
    let st = unsafe { segt_voxelize_points(cfg, flat.as_ptr(), 500, 5, &mut out, &mut dropped) };
    assert_eq!(st, SegtStatus::Ok, "{:?}", last_error());

    let cloud = segt::PointCloud::from_flat(flat, 5).unwrap();
    let grid = RunConfig::parse(SMALL).unwrap().grid;
    let (want, stats) = segt::voxelizer::voxelize_with_stats(&cloud, &grid).unwrap();
    assert_eq!(dropped, stats.dropped);
    assert!(dropped > 0);
    let got = unsafe { to_core(out) };
    assert_eq!(got.coords(), want.coords());
    assert_eq!(got.features(), want.features());

    let st = unsafe { segt_voxelize_points(cfg, [0.0; 4].as_ptr(), 2, 2, &mut out, ptr::null_mut()) };
    assert_eq!(st, SegtStatus::Config);
    unsafe { segt_config_free(cfg) };
}

#[test]
fn voxel_sets_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let file = c(dir.path().join("v.segv").to_str().unwrap());
    let cfg = config(SMALL);
    let v = voxels(cfg, 40, 1);
    let mut dims = [0u32; 3];
    unsafe {
        assert_eq!(segt_voxelset_dims(v, dims.as_mut_ptr()), SegtStatus::Ok);
        assert_eq!(dims, [16, 16, 2]);
        assert_eq!(segt_voxelset_write(v, file.as_ptr()), SegtStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(segt_voxelset_read(file.as_ptr(), &mut back), SegtStatus::Ok);
        let (a, b) = (to_core(v), to_core(back));
        assert_eq!(a.coords(), b.coords());
        // The container stores features as f32.
        assert!(a.features().max_abs_diff(b.features()) < 1e-6);
        segt_voxelset_free(back);
        segt_voxelset_free(v);
    }

    std::fs::write(dir.path().join("bad.segv"), b"SEGV\x01\x00").unwrap();
    let bad = c(dir.path().join("bad.segv").to_str().unwrap());
    let missing = c(dir.path().join("none.segv").to_str().unwrap());
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(segt_voxelset_read(bad.as_ptr(), &mut out), SegtStatus::Truncated);
        assert_eq!(segt_voxelset_read(missing.as_ptr(), &mut out), SegtStatus::Io);
        segt_config_free(cfg);
    }
}

#[test]
fn voxel_set_construction_validates_coordinates() {
    let cfg = config(SMALL);
    let coords = [1u32, 1, 0, 1, 1, 0];
    let mut out = ptr::null_mut();
    unsafe {
        let st = segt_voxelset_new(cfg, coords.as_ptr(), [0.0; 2].as_ptr(), 2, 1, &mut out);
        assert_eq!(st, SegtStatus::Domain);
        let st = segt_voxelset_new(cfg, [0u32, 0, 2].as_ptr(), [0.0].as_ptr(), 1, 1, &mut out);
        assert_eq!(st, SegtStatus::Domain);
        let st = segt_voxelset_new(cfg, ptr::null(), ptr::null(), 0, 4, &mut out);
        assert_eq!(st, SegtStatus::Ok);
        assert_eq!((segt_voxelset_len(out), segt_voxelset_channels(out)), (0, 4));
        segt_voxelset_free(out);
        segt_config_free(cfg);
    }
}

#[test]
fn hilbert_calls_agree_with_core() {
    for (d, level) in [(2usize, 5u32), (3, 4)] {
        for i in 0..(1u64 << (d as u32 * level)) {
            let mut p = [0u32; 3];
            assert_eq!(unsafe { segt_hilbert_decode(i, level, d, p.as_mut_ptr()) }, SegtStatus::Ok);
            assert_eq!(p, segt::spacecurve::hilbert_decode(i, level, d).unwrap());
            let mut h = 0;
            assert_eq!(unsafe { segt_hilbert_encode(p.as_ptr(), d, level, &mut h) }, SegtStatus::Ok);
            assert_eq!(h, i);
        }
    }
    let mut h = 0;
    assert_eq!(unsafe { segt_hilbert_encode([4u32, 0].as_ptr(), 2, 2, &mut h) }, SegtStatus::Domain);
    assert_eq!(unsafe { segt_hilbert_decode(0, 2, 4, [0u32; 4].as_mut_ptr()) }, SegtStatus::Domain);
}

#[test]
fn serialization_plan_matches_core() {
    let cfg = config(SMALL);
    let v = voxels(cfg, 60, 2);
    let core = unsafe { to_core(v) };
    let expansion = RunConfig::parse(SMALL).unwrap().expansion([16, 16, 2]).unwrap();
    for (code, s) in [(SEGT_STRATEGY_PLUS, Strategy::Plus), (SEGT_STRATEGY_MINUS, Strategy::Minus)] {
        let want = serialize(&core, s, &expansion).unwrap();
        let mut plan = ptr::null_mut();
        assert_eq!(unsafe { segt_serialize(cfg, v, code, &mut plan) }, SegtStatus::Ok);
        let n = unsafe { segt_plan_len(plan) };
        assert_eq!(n, 60);
        let order = unsafe { std::slice::from_raw_parts(segt_plan_order(plan), n) };
        let inverse = unsafe { std::slice::from_raw_parts(segt_plan_inverse(plan), n) };
        assert_eq!(order, want.order());
        assert_eq!(inverse, want.inverse());
        let (mut g, mut l) = (vec![0u64; n], vec![0u64; n]);
        assert_eq!(unsafe { segt_plan_keys(plan, g.as_mut_ptr(), l.as_mut_ptr()) }, SegtStatus::Ok);
        let keys: Vec<(u64, u64)> = g.into_iter().zip(l).collect();
        assert_eq!(keys, want.keys());
        unsafe { segt_plan_free(plan) };
    }
    let mut plan = ptr::null_mut();
    assert_eq!(unsafe { segt_serialize(cfg, v, 7, &mut plan) }, SegtStatus::InvalidArgument);
    unsafe {
        segt_voxelset_free(v);
        segt_config_free(cfg);
    }
}

#[test]
fn encoder_forward_matches_core_and_survives_save_load() {
    let dir = tempfile::tempdir().unwrap();
    let file = c(dir.path().join("w.segw").to_str().unwrap());
    let cfg = config(SMALL);
    let v = voxels(cfg, 50, 4);
    unsafe {
        let mut enc = ptr::null_mut();
        assert_eq!(segt_encoder_new(cfg, SEGT_INIT_RANDOM, &mut enc), SegtStatus::Ok, "{:?}", last_error());
        assert_eq!((segt_encoder_in_channels(enc), segt_encoder_channels(enc)), (3, 8));

        let mut out = ptr::null_mut();
        assert_eq!(segt_encoder_forward(enc, v, &mut out), SegtStatus::Ok, "{:?}", last_error());
        let params = segt::model_io::init_params(&RunConfig::parse(SMALL).unwrap(), InitMode::Random).unwrap();
        let segt::AnyParams::F64(p) = params else { panic!("default precision is f64") };
        let want = encoder_forward(&to_core(v), &p).unwrap();
        let got = to_core(out);
        assert_eq!(got.coords(), want.coords());
        assert_eq!(got.features(), want.features());

        assert_eq!(segt_encoder_save(enc, file.as_ptr()), SegtStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(segt_encoder_load(file.as_ptr(), &mut loaded), SegtStatus::Ok);
        let mut again = ptr::null_mut();
        assert_eq!(segt_encoder_forward(loaded, v, &mut again), SegtStatus::Ok);
        assert_eq!(to_core(again).features(), got.features());

        let mut wrong = ptr::null_mut();
        let st = segt_voxelset_new(cfg, [0u32, 0, 0].as_ptr(), [1.0; 2].as_ptr(), 1, 2, &mut wrong);
        assert_eq!(st, SegtStatus::Ok);
        let mut bad = ptr::null_mut();
        assert_eq!(segt_encoder_forward(enc, wrong, &mut bad), SegtStatus::Shape);
        assert!(bad.is_null());
        assert!(segt_encoder_new(cfg, 9, &mut bad.cast()) == SegtStatus::InvalidArgument);

        for p in [out, again, wrong, v] {
            segt_voxelset_free(p);
        }
        segt_encoder_free(enc);
        segt_encoder_free(loaded);
        segt_config_free(cfg);
    }
}

#[test]
fn bev_scatter_matches_core() {
    let dir = tempfile::tempdir().unwrap();
    let file = c(dir.path().join("b.segb").to_str().unwrap());
    let cfg = config(SMALL);
    let v = voxels(cfg, 80, 5);
    unsafe {
        let mut bev = ptr::null_mut();
        assert_eq!(segt_bev_scatter(v, &mut bev), SegtStatus::Ok);
        let (mut nx, mut ny, mut ch) = (0, 0, 0);
        assert_eq!(segt_bev_shape(bev, &mut nx, &mut ny, &mut ch), SegtStatus::Ok);
        assert_eq!((nx, ny, ch), (16, 16, 3));
        let want = segt::bev_scatter(&to_core(v));
        assert_eq!(std::slice::from_raw_parts(segt_bev_data(bev), nx * ny * ch), want.data());

        assert_eq!(segt_bev_write(bev, file.as_ptr()), SegtStatus::Ok);
        let back = segt::model_io::read_bev(&std::fs::read(dir.path().join("b.segb")).unwrap()).unwrap();
        // Stored as f32.
        let diff = back.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff:e}");
        segt_bev_free(bev);
        segt_voxelset_free(v);
        segt_config_free(cfg);
    }
}

#[test]
fn last_error_is_per_thread() {
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { segt_config_parse(c("bogus = 1\n").as_ptr(), &mut cfg) }, SegtStatus::Parse);
    let here = last_error().unwrap();
    std::thread::spawn(|| assert_eq!(last_error(), None)).join().unwrap();
    assert_eq!(last_error().unwrap(), here);
}
