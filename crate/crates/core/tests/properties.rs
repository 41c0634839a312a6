use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use videogen::checkpoint::{decode, encode};
use videogen::codec::{degrade, DegradationConfig};
use videogen::data::{decode_ppm, encode_ppm};
use videogen::diffusion::{ddim_step, derive_seed, guided_eps, inference_timesteps, q_sample, NoiseSchedule, ScheduleKind};
use videogen::flow_tsr::{fuse_frequency, temporal_upsample, upsampled_len, FlowNet, FlowNetConfig, FusionConfig, TsrConfig, TsrModels};
use videogen::numerics::filter::gaussian_kernel;
use videogen::numerics::{attention, conv2d, lowpass_gaussian, warp_bilinear};
use videogen::text::{HashEmbedder, TextConfig, TextEmbedding};
use videogen::unet::{assemble_conditions, ConditionSet};
use videogen::Tensor;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn zero_flow_warp_is_identity(c in 1usize..4, h in 1usize..9, w in 1usize..9, seed: u64) {
        let x = randn(&[c, h, w], seed);
        let out = warp_bilinear(&x, &Tensor::zeros(&[2, h, w])).unwrap();
        prop_assert_eq!(out.data(), x.data());
    }

    #[test]
    fn integer_flow_shifts_exactly(dx in 0usize..3, dy in 0usize..3, h in 4usize..9, w in 4usize..9, seed: u64) {
        let x = randn(&[2, h, w], seed);
        let mut flow = Tensor::zeros(&[2, h, w]);
        flow.data_mut()[..h * w].fill(dx as f32);
        flow.data_mut()[h * w..].fill(dy as f32);
        let out = warp_bilinear(&x, &flow).unwrap();
        for c in 0..2 {
            for y in 0..h - dy {
                for xx in 0..w - dx {
                    prop_assert_eq!(out.data()[(c * h + y) * w + xx], x.data()[(c * h + y + dy) * w + xx + dx]);
                }
            }
        }
    }

    #[test]
    fn lowpass_keeps_interior_ramps(a in -1.0f32..1.0, bx in -0.2f32..0.2, by in -0.2f32..0.2, sigma in 0.5f32..1.5) {
        let (h, w) = (16, 16);
        let ramp = Tensor::from_fn(&[h, w], |i| a + bx * (i % w) as f32 + by * (i / w) as f32);
        let out = lowpass_gaussian(&ramp, sigma).unwrap();
        let r = gaussian_kernel(sigma).unwrap().len() / 2;
        let interior = |t: &Tensor| -> Vec<f32> {
            (r..h - r).flat_map(|y| (r..w - r).map(move |x| (y, x))).map(|(y, x)| t.data()[y * w + x]).collect()
        };
        let mean = |v: &[f32]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        prop_assert!((mean(&interior(&out)) - mean(&interior(&ramp))).abs() < 1e-5);
    }

    #[test]
    fn attention_rows_stay_in_value_hull(b in 1usize..3, lq in 1usize..6, lk in 1usize..6, d in 1usize..5, seed: u64) {
        let q = randn(&[b, lq, d], seed);
        let k = randn(&[b, lk, d], seed ^ 1);
        let v = randn(&[b, lk, 3], seed ^ 2);
        let out = attention(&q, &k, &v).unwrap();
        for bi in 0..b {
            for j in 0..3 {
                let col: Vec<f32> = (0..lk).map(|i| v.data()[(bi * lk + i) * 3 + j]).collect();
                let (lo, hi) = col.iter().fold((f32::MAX, f32::MIN), |(l, h), &x| (l.min(x), h.max(x)));
                for i in 0..lq {
                    let o = out.data()[(bi * lq + i) * 3 + j];
                    prop_assert!(o >= lo - 1e-5 && o <= hi + 1e-5);
                }
            }
        }
    }

    #[test]
    fn conv2d_is_pure(cin in 1usize..4, cout in 1usize..4, h in 3usize..8, seed: u64) {
        let x = randn(&[2, cin, h, h], seed);
        let wt = randn(&[cout, cin, 3, 3], seed ^ 7);
        let bias = randn(&[cout], seed ^ 9);
        let a = conv2d(&x, &wt, &bias, 1, 1).unwrap();
        let b = conv2d(&x, &wt, &bias, 1, 1).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn perfect_eps_chain_recovers_x0(steps in 4usize..50, hi in 0.01f64..0.05, n in 1usize..6, seed: u64) {
        let n = n.min(steps);
        let sched = NoiseSchedule::new(ScheduleKind::Linear, steps, 1e-4, hi).unwrap();
        let x0 = Tensor::uniform(&[3, 4, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let eps = randn(x0.shape(), seed ^ 3);
        let ts = inference_timesteps(steps, n);
        let mut x = q_sample(&x0, ts[0], &eps, &sched).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            x = ddim_step(&x, &eps, t, ts.get(i + 1).copied(), &sched, 0.0, None).unwrap();
        }
        prop_assert!(x.max_abs_diff(&x0) < 1e-4);
    }

    #[test]
    fn guidance_matches_formula(s in 0.0f64..10.0, seed: u64) {
        let c = randn(&[2, 3, 3], seed);
        let u = randn(&[2, 3, 3], seed ^ 5);
        let g = guided_eps(&c, &u, s).unwrap();
        for ((&gv, &cv), &uv) in g.data().iter().zip(c.data()).zip(u.data()) {
            let want = uv as f64 + s * (cv as f64 - uv as f64);
            prop_assert!((gv as f64 - want).abs() < 1e-4 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn fusing_a_latent_with_itself_is_identity(c in 1usize..5, h in 2usize..12, sigma in 0.5f32..3.0, seed: u64) {
        let z = randn(&[c, h, h], seed);
        let fused = fuse_frequency(&z, &z, &FusionConfig { sigma }).unwrap();
        prop_assert!(fused.max_abs_diff(&z) < 1e-6);
    }

    #[test]
    fn reference_block_is_zero_after_frame_0(t in 1usize..6, c in 1usize..4, h in 1usize..6, seed: u64) {
        let cfg = TextConfig { max_tokens: 2, dim: 4, seed: 1 };
        let x = randn(&[t, c, h, h], seed);
        let reference = randn(&[c, h, h], seed ^ 1);
        let cond = ConditionSet { text: TextEmbedding::null(&cfg), fps: 8, ref_latent: reference.clone(), prev_stage: None };
        let a = assemble_conditions(&x, &cond, false).unwrap();
        let block = a.narrow_channels(c, c).unwrap();
        prop_assert_eq!(block.index0(0).data().to_vec(), reference.data().to_vec());
        for i in 1..t {
            prop_assert!(block.index0(i).data().iter().all(|&v| v == 0.0));
        }
        prop_assert_eq!(a.narrow_channels(0, c).unwrap().data().to_vec(), x.data().to_vec());
    }

    #[test]
    fn degrade_is_seeded_and_off_is_identity(t in 1usize..3, seed: u64) {
        let x = Tensor::uniform(&[t, 3, 8, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let cfg = DegradationConfig::default();
        prop_assert_eq!(degrade(&x, &cfg, seed).unwrap().data().to_vec(), degrade(&x, &cfg, seed).unwrap().data().to_vec());
        prop_assert_eq!(degrade(&x, &DegradationConfig::off(), seed).unwrap().data().to_vec(), x.data().to_vec());
    }

    #[test]
    fn ppm_round_trips_byte_grid_images(h in 1usize..6, w in 1usize..6, bytes in proptest::collection::vec(any::<u8>(), 75)) {
        let img = Tensor::from_fn(&[3, h, w], |i| bytes[i % bytes.len()] as f32 / 127.5 - 1.0);
        let encoded = encode_ppm(&img).unwrap();
        let back = decode_ppm(&encoded, Path::new("x.ppm")).unwrap();
        prop_assert_eq!(back.data(), img.data());
        prop_assert_eq!(encode_ppm(&back).unwrap(), encoded);
    }

    #[test]
    fn checkpoint_round_trips_any_bits(bits in proptest::collection::vec(any::<u32>(), 2..40), split in 1usize..40) {
        let split = split.min(bits.len() - 1);
        let vals: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
        let tensors = vec![
            ("first".to_string(), Tensor::new(&[split], vals[..split].to_vec()).unwrap()),
            ("second".to_string(), Tensor::new(&[bits.len() - split], vals[split..].to_vec()).unwrap()),
        ];
        let back = decode(&encode(&tensors).unwrap(), Path::new("x.vgck")).unwrap();
        let round: Vec<u32> = back.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect();
        prop_assert_eq!(round, bits);
        prop_assert_eq!(&back[0].0, "first");
    }

    #[test]
    fn derive_seed_is_stable_and_separates_streams(base: u64, a: u64, b: u64) {
        prop_assert_eq!(derive_seed(base, &[a, b]), derive_seed(base, &[a, b]));
        prop_assume!(a != b);
        prop_assert_ne!(derive_seed(base, &[a]), derive_seed(base, &[b]));
    }

    #[test]
    fn text_embedding_is_pure(words in proptest::collection::vec("[a-z]{1,8}", 1..6)) {
        let e = HashEmbedder::new(TextConfig::default());
        let prompt = words.join(" ");
        prop_assert_eq!(e.embed(&prompt).unwrap().tensor().data().to_vec(), e.embed(&prompt).unwrap().tensor().data().to_vec());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn temporal_upsample_only_inserts(t in 2usize..6, passes in 1usize..4, seed: u64) {
        let flow_cfg = FlowNetConfig { widths: vec![4], max_flow: None };
        let models = TsrModels::new(
            TsrConfig { flow: flow_cfg.clone(), ..TsrConfig::desk(2) },
            FlowNet::new(flow_cfg, 2, seed).unwrap(),
            None,
        ).unwrap();
        let z = randn(&[t, 2, 4, 4], seed);
        let up = temporal_upsample(&z, passes, &models, seed).unwrap();
        prop_assert_eq!(up.dim(0), upsampled_len(t, passes));
        for i in 0..t {
            prop_assert_eq!(up.index0(i << passes).data().to_vec(), z.index0(i).data().to_vec());
        }
    }
}
