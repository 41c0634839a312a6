mod common;

use std::fs;
use std::process::Command;

use common::{run, s, scratch, tiny_config, trained_fixture, write_config};
use videogen::data::{load_clip, save_clip, write_image, VideoClip};
use videogen::Tensor;

fn ramp_image(phase: f32) -> Tensor {
    Tensor::from_fn(&[3, 16, 16], |i| (i as f32 * 0.37 + phase).sin() * 0.8)
}

#[test]
fn generate_without_reference_explains_requirement() {
    let dir = scratch("no-ref");
    let cfg = write_config(&dir, &tiny_config());
    let out = Command::new(env!("CARGO_BIN_EXE_videogen"))
        .args(["generate", "--prompt", "red square moving right", "--config", s(&cfg), "--out"])
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--ref-image") && err.contains("reference"), "{err}");
}

#[test]
fn unknown_config_key_exits_1() {
    let dir = scratch("bad-config");
    let mut v: serde_json::Value = serde_json::from_str(&tiny_config().to_json()).unwrap();
    v["surprise"] = serde_json::json!(true);
    let path = dir.join("c.json");
    fs::write(&path, v.to_string()).unwrap();
    let out = dir.join("data");
    assert_eq!(run(&["make-data", "--config", s(&path), "--kind", "paired", "--out", s(&out)]), 1);
    assert!(!out.exists());
}

#[test]
fn outputs_are_not_overwritten_without_force() {
    let dir = scratch("force");
    let cfg = write_config(&dir, &tiny_config());
    let out = dir.join("data");
    let args = ["make-data", "--config", s(&cfg), "--kind", "unpaired", "--out", s(&out), "--count", "1"];
    assert_eq!(run(&args), 0);
    let before = fs::read(out.join("clip_00000/frame_00000.ppm")).unwrap();
    assert_eq!(run(&args), 1);
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(run(&forced), 0);
    assert_eq!(fs::read(out.join("clip_00000/frame_00000.ppm")).unwrap(), before);
}

#[test]
fn unpaired_data_has_no_captions() {
    let dir = scratch("unpaired");
    let cfg = write_config(&dir, &tiny_config());
    let out = dir.join("data");
    assert_eq!(run(&["make-data", "--config", s(&cfg), "--kind", "unpaired", "--out", s(&out), "--count", "2"]), 0);
    let clip = load_clip(&out.join("clip_00001"), 4).unwrap();
    assert_eq!(clip.caption, None);
    assert_eq!(clip.num_frames(), 5);
    assert!(out.join("clip_00001/scene.json").exists());
}

#[test]
fn later_stage_needs_previous_checkpoint() {
    let dir = scratch("stage-order");
    let cfg = write_config(&dir, &tiny_config());
    let data = dir.join("data");
    assert_eq!(run(&["make-data", "--config", s(&cfg), "--kind", "paired", "--out", s(&data)]), 0);
    assert_eq!(run(&["train-codec", "--config", s(&cfg), "--data", s(&data)]), 0);
    assert_eq!(run(&["train-stage", "--config", s(&cfg), "--stage", "2", "--data", s(&data)]), 1);
    assert_eq!(run(&["train-stage", "--config", s(&cfg), "--stage", "4", "--data", s(&data)]), 1);
}

#[test]
fn eval_reports_infinite_psnr_for_identical_clips() {
    let dir = scratch("eval");
    let clip = VideoClip::new(Tensor::from_fn(&[2, 3, 8, 8], |i| (i % 11) as f32 / 11.0 - 0.5), 4, None).unwrap();
    save_clip(&clip, &dir.join("a")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_videogen"))
        .args(["eval", "--a", s(&dir.join("a")), "--b", s(&dir.join("a")), "--out", s(&dir.join("r.json"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("psnr_db: inf"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["psnr_db"], "inf");
}

#[test]
fn eval_on_mismatched_clips_is_a_contract_error() {
    let dir = scratch("eval-mismatch");
    let a = VideoClip::new(Tensor::zeros(&[2, 3, 8, 8]), 4, None).unwrap();
    let b = VideoClip::new(Tensor::zeros(&[3, 3, 8, 8]), 4, None).unwrap();
    save_clip(&a, &dir.join("a")).unwrap();
    save_clip(&b, &dir.join("b")).unwrap();
    assert_eq!(run(&["eval", "--a", s(&dir.join("a")), "--b", s(&dir.join("b"))]), 2);
}

#[test]
fn generate_writes_clip_and_is_reproducible() {
    let (root, cfg) = trained_fixture();
    let refp = root.join("ref-gen.ppm");
    write_image(&refp, &ramp_image(0.0)).unwrap();
    let out = root.join("gen-a");
    let latents = root.join("gen-a.vgck");
    let args = |o: &str| {
        vec![
            "generate".to_string(),
            "--prompt".into(),
            "red square moving right".into(),
            "--ref-image".into(),
            s(&refp).into(),
            "--config".into(),
            s(cfg).into(),
            "--seed".into(),
            "7".into(),
            "--tsr-passes".into(),
            "1".into(),
            "--out".into(),
            o.into(),
        ]
    };
    let mut first = args(s(&out));
    first.extend(["--latents-out".to_string(), s(&latents).to_string()]);
    assert_eq!(videogen_cli::run_command(std::iter::once("videogen".to_string()).chain(first)), 0);
    let clip = load_clip(&out, 4).unwrap();
    assert_eq!(clip.num_frames(), 7);
    assert_eq!(clip.caption.as_deref(), Some("red square moving right"));
    assert_eq!(clip.fps, 16);

    let decoded = root.join("decoded");
    assert_eq!(run(&["decode", "--config", s(cfg), "--in", s(&latents), "--fps", "16", "--out", s(&decoded)]), 0);
    for t in 0..7 {
        let name = format!("frame_{t:05}.ppm");
        assert_eq!(fs::read(out.join(&name)).unwrap(), fs::read(decoded.join(&name)).unwrap());
    }
}

#[test]
fn interpolate_sixteen_frames_three_passes() {
    let (root, cfg) = trained_fixture();
    let input = root.join("sixteen");
    let frames = Tensor::from_fn(&[16, 3, 16, 16], |i| ((i as f32) * 0.013).sin());
    save_clip(&VideoClip::new(frames, 4, None).unwrap(), &input).unwrap();
    let out = root.join("sixteen-up");
    assert_eq!(run(&["interpolate", "--config", s(cfg), "--in", s(&input), "--passes", "3", "--out", s(&out)]), 0);
    let clip = load_clip(&out, 4).unwrap();
    assert_eq!(clip.num_frames(), 121);
    assert_eq!(clip.fps, 32);
}

#[test]
fn interpolate_single_frame_is_a_contract_error() {
    let (root, cfg) = trained_fixture();
    let input = root.join("single");
    save_clip(&VideoClip::new(Tensor::zeros(&[1, 3, 16, 16]), 4, None).unwrap(), &input).unwrap();
    let out = root.join("single-up");
    assert_eq!(run(&["interpolate", "--config", s(cfg), "--in", s(&input), "--passes", "1", "--out", s(&out)]), 2);
}
