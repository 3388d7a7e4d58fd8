use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use wdm3d::nifti::{read_nifti, read_volume, write_mask, write_nifti, Datatype, NiftiHeader};
use wdm3d::volume::{voxel_count, Dims, MaskVolume, Volume, IDENTITY_AFFINE};

fn wdm3d(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wdm3d"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = wdm3d(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .expect("error JSON on stderr");
    serde_json::from_str(line).unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn header(dt: Datatype, d: Dims) -> NiftiHeader {
    NiftiHeader::new_3d(dt, d, [1.0; 3], &IDENTITY_AFFINE)
}

fn write_random(dir: &Path, name: &str, d: Dims, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = Volume::new(
        d,
        (0..voxel_count(d))
            .map(|_| rng.random_range(0.0..100.0))
            .collect(),
    )
    .unwrap();
    write_nifti(&v, &header(Datatype::F32, d), &dir.join(name), true).unwrap();
}

fn write_box(dir: &Path, name: &str, d: Dims, lo: usize, hi: usize) {
    let m =
        MaskVolume::from_fn(d, |x, y, z| [x, y, z].iter().all(|c| (lo..hi).contains(c))).unwrap();
    write_mask(&m, &header(Datatype::U8, d), &dir.join(name), true).unwrap();
}

#[test]
fn dwt_forward_then_inverse_reconstructs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_random(p, "vol.nii.gz", [12, 10, 8], 1);
    ok(
        p,
        &["dwt", "--forward", "-i", "vol.nii.gz", "-o", "coef.nii.gz"],
    );
    let coef = read_nifti(&p.join("coef.nii.gz")).unwrap();
    assert_eq!(coef.shape, vec![6, 5, 4, 8]);
    ok(
        p,
        &["dwt", "--inverse", "-i", "coef.nii.gz", "-o", "back.nii.gz"],
    );
    let (a, ha) = read_volume(&p.join("vol.nii.gz")).unwrap();
    let (b, hb) = read_volume(&p.join("back.nii.gz")).unwrap();
    assert_eq!(a.dims(), b.dims());
    let worst = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    assert!(worst <= 1e-6, "max abs diff {worst}");
    assert_eq!(ha.spacing(), hb.spacing());
    assert_eq!(ha.affine(), hb.affine());
}

#[test]
fn dwt_rejects_odd_dims() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_random(p, "odd.nii.gz", [5, 4, 4], 2);
    let out = wdm3d(
        p,
        &["dwt", "--forward", "-i", "odd.nii.gz", "-o", "c.nii.gz"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "OddDimension");
}

#[test]
fn empty_healthy_mask_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let d = [8, 8, 8];
    write_random(p, "scan.nii.gz", d, 3);
    write_mask(
        &MaskVolume::zeros(d).unwrap(),
        &header(Datatype::U8, d),
        &p.join("empty.nii.gz"),
        true,
    )
    .unwrap();
    let out = wdm3d(
        p,
        &[
            "inpaint",
            "--variant",
            "ak",
            "--scan",
            "scan.nii.gz",
            "--healthy-mask",
            "empty.nii.gz",
            "--out",
            "o.nii.gz",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "EmptyMask");
    assert_eq!(err["exit_code"], 1);
    let m = read_json(&p.join("o.nii.gz.manifest.json"));
    assert_eq!(m["status"], "error");
    assert_eq!(m["error"]["code"], "EmptyMask");
    assert!(m["inputs"]
        .as_object()
        .unwrap()
        .contains_key("empty.nii.gz"));
    assert!(!p.join("o.nii.gz").exists());
}

#[test]
fn dc_without_weight_matches_d_on_empty_masks() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let common = [
        "--iters",
        "30",
        "--seed",
        "5",
        "--T",
        "50",
        "--phantoms",
        "2",
        "--empty-masks",
    ];
    let mut dc = vec![
        "train",
        "--objective",
        "DC",
        "--lambda1",
        "0",
        "--out",
        "dc",
    ];
    dc.extend(common);
    let mut d = vec!["train", "--objective", "D", "--out", "d"];
    d.extend(common);
    ok(p, &dc);
    ok(p, &d);
    let a = fs::read_to_string(p.join("dc.loss.csv")).unwrap();
    let b = fs::read_to_string(p.join("d.loss.csv")).unwrap();
    assert_eq!(a.lines().count(), 31);
    assert_eq!(a, b);
}

#[test]
fn trained_checkpoint_drives_inpainting() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(
        p,
        &[
            "train",
            "--objective",
            "AK",
            "--iters",
            "20",
            "--T",
            "40",
            "--phantoms",
            "2",
            "--out",
            "ak",
        ],
    );
    let meta = read_json(&p.join("ak.json"));
    assert!(meta.is_object());
    let d = [16, 16, 16];
    write_random(p, "scan.nii.gz", d, 4);
    write_box(p, "h.nii.gz", d, 4, 9);
    write_box(p, "u.nii.gz", d, 10, 13);
    let r = ok(
        p,
        &[
            "inpaint",
            "--variant",
            "ak",
            "--scan",
            "scan.nii.gz",
            "--healthy-mask",
            "h.nii.gz",
            "--denoiser",
            "ak.json",
            "--T",
            "20",
            "--out",
            "o.nii.gz",
        ],
    );
    assert_eq!(r["variant"], "ak");
    let (scan, _) = read_volume(&p.join("scan.nii.gz")).unwrap();
    let (out, _) = read_volume(&p.join("o.nii.gz")).unwrap();
    let (h, _) = wdm3d::nifti::read_mask(&p.join("h.nii.gz")).unwrap();
    for i in 0..scan.len() {
        if h.data()[i] == 0 {
            assert_eq!(scan.data()[i], out.data()[i]);
        }
    }
    // akh conditions on the healthy mask alone, so the same checkpoint fits
    ok(
        p,
        &[
            "inpaint",
            "--variant",
            "akh",
            "--scan",
            "scan.nii.gz",
            "--healthy-mask",
            "h.nii.gz",
            "--unhealthy-mask",
            "u.nii.gz",
            "--denoiser",
            "ak.json",
            "--T",
            "20",
            "--out",
            "k.nii.gz",
        ],
    );
    let dg = wdm3d(
        p,
        &[
            "train",
            "--objective",
            "Dg",
            "--iters",
            "2",
            "--T",
            "10",
            "--phantoms",
            "1",
            "--phantom-size",
            "8",
            "--out",
            "dg",
        ],
    );
    assert!(dg.status.success());
    let wrong = wdm3d(
        p,
        &[
            "inpaint",
            "--variant",
            "ak",
            "--scan",
            "scan.nii.gz",
            "--healthy-mask",
            "h.nii.gz",
            "--denoiser",
            "dg.json",
            "--out",
            "w.nii.gz",
        ],
    );
    assert_eq!(wrong.status.code(), Some(1));
    assert_eq!(stderr_json(&wrong)["error"], "ChannelContractMismatch");
}

#[test]
fn same_seed_gives_identical_output_checksums() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let d = [16, 16, 16];
    write_random(p, "scan.nii.gz", d, 6);
    write_box(p, "h.nii.gz", d, 3, 10);
    let run = |out: &str| {
        ok(
            p,
            &[
                "inpaint",
                "--variant",
                "replace",
                "--scan",
                "scan.nii.gz",
                "--healthy-mask",
                "h.nii.gz",
                "--sampler",
                "dpmpp2m",
                "--levels",
                "20",
                "--seed",
                "9",
                "--out",
                out,
            ],
        );
        let m = read_json(&p.join(format!("{out}.manifest.json")));
        m["outputs"][out].as_str().unwrap().to_string()
    };
    assert_eq!(run("a.nii.gz"), run("b.nii.gz"));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = wdm3d(p, &["inpaint", "--variant", "ak", "--out", "x.nii.gz"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "UsageError");
    assert!(!p.join("x.nii.gz.manifest.json").exists());

    let out = wdm3d(
        p,
        &["--manifest", "m.json", "schedule", "--kind", "quadratic"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(read_json(&p.join("m.json"))["error"]["code"], "UsageError");
}

#[test]
fn oversized_volumes_need_big() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let d = [98, 98, 98];
    let v = Volume::zeros(d).unwrap();
    write_nifti(&v, &header(Datatype::U8, d), &p.join("big.nii.gz"), true).unwrap();
    write_mask(
        &MaskVolume::ones(d).unwrap(),
        &header(Datatype::U8, d),
        &p.join("m.nii.gz"),
        true,
    )
    .unwrap();
    let out = wdm3d(
        p,
        &[
            "inpaint",
            "--variant",
            "ak",
            "--scan",
            "big.nii.gz",
            "--healthy-mask",
            "m.nii.gz",
            "--out",
            "o.nii.gz",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_json(&out)["message"]
        .as_str()
        .unwrap()
        .contains("--big"));
}

#[test]
fn schedule_dump_has_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let r = ok(
        p,
        &[
            "schedule", "--kind", "cosine", "--T", "25", "--karras", "10", "--dump", "s.csv",
        ],
    );
    assert_eq!(r["T"], 25);
    let csv = fs::read_to_string(p.join("s.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,beta,alpha,alpha_bar,sigma");
    assert_eq!(csv.lines().count(), 26);
    assert!(p.join("s.csv.manifest.json").exists());
}

#[test]
fn maskgen_writes_indexed_masks_inside_the_brain() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(
        p,
        &["phantom", "--out-dir", "ph", "--size", "24", "--seed", "3"],
    );
    let r = ok(
        p,
        &[
            "maskgen",
            "--brain",
            "ph/phantom-brain.nii.gz",
            "--unhealthy",
            "ph/phantom-mask-unhealthy.nii.gz",
            "--out",
            "h.nii.gz",
            "--count",
            "3",
            "--seed",
            "1",
            "--blob-size",
            "2,3",
        ],
    );
    assert_eq!(r["masks"].as_array().unwrap().len(), 3);
    let (brain, _) = wdm3d::nifti::read_mask(&p.join("ph/phantom-brain.nii.gz")).unwrap();
    let (uh, _) = wdm3d::nifti::read_mask(&p.join("ph/phantom-mask-unhealthy.nii.gz")).unwrap();
    for i in 0..3 {
        let (m, _) = wdm3d::nifti::read_mask(&p.join(format!("h-{i:03}.nii.gz"))).unwrap();
        assert!(m.count() > 0);
        assert_eq!(m.overlap_count(&uh).unwrap(), 0);
        assert_eq!(m.difference(&brain).unwrap().count(), 0);
    }
}

#[test]
fn synth_and_metrics_on_a_phantom_case() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(
        p,
        &[
            "phantom",
            "--out-dir",
            ".",
            "--size",
            "16",
            "--seed",
            "7",
            "--id",
            "c",
        ],
    );
    let r = ok(
        p,
        &[
            "synth",
            "--pipeline",
            "kat",
            "--t1n",
            "c-t1n.nii.gz",
            "--t1c",
            "c-t1c.nii.gz",
            "--t2w",
            "c-t2w.nii.gz",
            "--missing",
            "flair",
            "--T",
            "20",
            "--out",
            "flair.nii.gz",
        ],
    );
    assert!(r.is_object());
    let m = ok(
        p,
        &[
            "metrics",
            "--task",
            "synth",
            "--pred",
            "flair.nii.gz",
            "--ref",
            "c-flair.nii.gz",
            "--case-id",
            "c",
            "--out",
            "m.json",
        ],
    );
    let rec = &m["records"][0];
    assert_eq!(rec["case_id"], "c");
    assert!(rec["mse"].as_f64().unwrap() >= 0.0);
    assert!(rec["roi_voxels"].as_u64().unwrap() > 0);
    assert_eq!(read_json(&p.join("m.json")), m);
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = wdm3d(dir.path(), &["selftest"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 8);
}
