//! Whole-model gradients against central differences on sampled weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use videogen::autodiff::{Graph, ParamStore};
use videogen::codec::{Codec, CodecConfig, VideoDecoder};
use videogen::Tensor;

fn tiny() -> CodecConfig {
    CodecConfig { factor: 2, latent_channels: 2, channels: vec![4, 8], kl_weight: 1e-6, temporal_kernel: 3 }
}

fn jitter(params: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for v in params.get_mut(id).data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
}

fn loss(vd: &VideoDecoder, params: &ParamStore, z: &Tensor, target: &Tensor) -> f64 {
    let mut g = Graph::inference(params);
    let zv = g.input(z.clone());
    let out = vd.decoder.forward(&mut g, zv, true).unwrap();
    let t = g.input(target.clone());
    let l = g.tape.mse(out, t).unwrap();
    g.value(l).data()[0] as f64
}

#[test]
fn video_decoder_parameter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let codec = Codec::new(tiny(), 1).unwrap();
    let mut vd = VideoDecoder::from_codec(&codec, 2);
    jitter(&mut vd.params, &mut rng);
    let z = Tensor::randn(&[3, 2, 4, 4], 1.0, &mut rng);
    let target = Tensor::randn(&[3, 3, 8, 8], 0.5, &mut rng);

    let mut g = Graph::new(&vd.params);
    let zv = g.input(z.clone());
    let out = vd.decoder.forward(&mut g, zv, true).unwrap();
    let t = g.input(target.clone());
    let l = g.tape.mse(out, t).unwrap();
    let grads = g.param_grads(l).unwrap();

    let step = 1e-2f32;
    let ids: Vec<_> = vd.params.ids().collect();
    let mut worst = (0.0f64, String::new());
    for (k, id) in ids.into_iter().enumerate() {
        let name = vd.params.name(id).to_string();
        let analytic = grads[k].clone().unwrap_or_else(|| panic!("{name} has no gradient"));
        let n = analytic.numel();
        let (mut num, mut ana) = (Vec::new(), Vec::new());
        for _ in 0..4 {
            let i = rng.random_range(0..n);
            let mut p = vd.params.clone();
            p.get_mut(id).data_mut()[i] += step;
            let up = loss(&vd, &p, &z, &target);
            p.get_mut(id).data_mut()[i] -= 2.0 * step;
            let down = loss(&vd, &p, &z, &target);
            num.push((up - down) / (2.0 * step as f64));
            ana.push(analytic.data()[i] as f64);
        }
        let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(ana.iter().map(|a| a * a).sum::<f64>().sqrt());
        // f32 forward passes leave ~1e-5 of absolute noise in the differences.
        let err = diff / scale.max(1e-3);
        if err > worst.0 {
            worst = (err, name.clone());
        }
        assert!(err < 2e-2, "{name}: numeric {num:?} analytic {ana:?}");
    }
    eprintln!("worst relative error {:.2e} at {}", worst.0, worst.1);
}
