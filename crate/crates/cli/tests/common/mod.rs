#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use videogen::cascade::CascadeConfig;
use videogen::config::PipelineConfig;
use videogen::text::TextConfig;

/// A configuration small enough to train every component in seconds.
pub fn tiny_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::desk();
    cfg.codec.channels = vec![4, 8, 8];
    cfg.text = TextConfig { max_tokens: 4, dim: 8, seed: 5 };
    cfg.cascade = CascadeConfig::desk(4, 4);
    cfg.cascade.schedule.steps = 50;
    for s in cfg.cascade.stages.iter_mut() {
        s.model.base_channels = 8;
        s.model.text_dim = 8;
        s.model.attn_levels = BTreeSet::from([1]);
        s.sampler.num_inference_steps = 3;
    }
    cfg.flow_tsr.flow.widths = vec![4, 8];
    cfg.flow_tsr.refiner.model.base_channels = 8;
    cfg.flow_tsr.refiner.sampler.num_inference_steps = 2;
    cfg.flow_tsr.schedule.steps = 50;
    let t = &mut cfg.training;
    for tc in [&mut t.codec, &mut t.flow, &mut t.refiner, &mut t.decoder]
        .into_iter()
        .chain(t.stages.iter_mut())
    {
        tc.steps = 2;
        tc.batch_size = 1;
    }
    for (s, frames) in [(&mut cfg.data.paired, 4), (&mut cfg.data.unpaired, 5)] {
        s.height = 16;
        s.width = 16;
        s.frames = frames;
        s.min_size = 4;
        s.max_size = 6;
        s.speeds = vec![1.0];
    }
    cfg.data.paired_clips = 3;
    cfg.data.unpaired_clips = 3;
    cfg
}

pub fn write_config(dir: &Path, cfg: &PipelineConfig) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

pub fn run(args: &[&str]) -> i32 {
    videogen_cli::run_command(std::iter::once("videogen").chain(args.iter().copied()))
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A fresh scratch directory under the target dir.
pub fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Data, checkpoints and config for the tiny pipeline, built once per test
/// binary. Returns (root, config path).
pub fn trained_fixture() -> &'static (PathBuf, PathBuf) {
    static FIXTURE: OnceLock<(PathBuf, PathBuf)> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let root = scratch(&format!("fixture-{}", std::process::id()));
        let cfg = write_config(&root, &tiny_config());
        let c = s(&cfg);
        let paired = root.join("paired");
        let unpaired = root.join("unpaired");
        assert_eq!(run(&["make-data", "--config", c, "--kind", "paired", "--out", s(&paired)]), 0);
        assert_eq!(run(&["make-data", "--config", c, "--kind", "unpaired", "--out", s(&unpaired)]), 0);
        assert_eq!(run(&["train-codec", "--config", c, "--data", s(&paired), "--data", s(&unpaired)]), 0);
        for n in ["1", "2", "3"] {
            assert_eq!(run(&["train-stage", "--config", c, "--stage", n, "--data", s(&paired)]), 0, "stage {n}");
        }
        assert_eq!(run(&["train-tsr", "--config", c, "--data", s(&unpaired)]), 0);
        assert_eq!(run(&["train-decoder", "--config", c, "--data", s(&unpaired)]), 0);
        (root, cfg)
    })
}
