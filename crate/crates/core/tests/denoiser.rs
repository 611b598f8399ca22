mod common;

use jamodiff::conditioning::LatentZ;
use jamodiff::denoiser::{time_embedding, DenoiserConfig, UNet};
use jamodiff::diffusion::Denoiser;
use jamodiff::model::{image_batch, Model, ModelConfig};
use jamodiff::schedule::{ScheduleKind, ScheduleSpec};
use jamodiff::training::{loss_graph, PerceptualExtractor, StepNoise};
use jamodiff_tensor::{Array, Graph, ParamStore};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unet(size: usize, seed: u64) -> (ParamStore<f32>, UNet) {
    let mut ps = ParamStore::new();
    let cfg =
        DenoiserConfig { image_size: size, base_channels: 8, channel_mults: vec![1, 2], time_embed_dim: 16, z_dim: 8 };
    let net = UNet::new(&mut ps, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (ps, net)
}

fn run(ps: &ParamStore<f32>, net: &UNet, x: &[jamodiff::image::GlyphImage], steps: &[usize], z: &[f32]) -> Array<f32> {
    let mut g = Graph::new(ps);
    let xs = g.input(image_batch(&x.iter().collect::<Vec<_>>()));
    let zn = g.input(Array::new([x.len(), 8], z.to_vec()));
    let out = net.forward(&mut g, xs, steps, zn, None).unwrap();
    g.value(out).clone()
}

#[test]
fn output_matches_input_shape_at_every_supported_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for size in [32, 64, 128] {
        let (ps, net) = unet(size, 2);
        let x = [common::random_image(size, &mut rng), common::random_image(size, &mut rng)];
        let out = run(&ps, &net, &x, &[1, 500], &[0.1; 16]);
        assert_eq!(out.shape(), [2, 1, size, size]);
        assert!(out.is_finite());
    }
}

#[test]
fn latent_and_step_both_change_the_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (ps, net) = unet(16, 4);
    let x = [common::random_image(16, &mut rng)];
    let base = run(&ps, &net, &x, &[10], &[0.0; 8]);
    assert_ne!(base, run(&ps, &net, &x, &[10], &[0.5; 8]));
    assert_ne!(base, run(&ps, &net, &x, &[900], &[0.0; 8]));
    assert_eq!(base, run(&ps, &net, &x, &[10], &[0.0; 8]));
}

#[test]
fn rejects_wrong_shapes() {
    let (ps, net) = unet(16, 5);
    let mut g = Graph::new(&ps);
    let x = g.input(Array::zeros([1, 1, 8, 8]));
    let z = g.input(Array::zeros([1, 8]));
    assert!(net.forward(&mut g, x, &[1], z, None).is_err());
    let x = g.input(Array::zeros([2, 1, 16, 16]));
    assert!(net.forward(&mut g, x, &[1], z, None).is_err());
}

#[test]
fn time_embeddings_are_distinct_across_a_long_schedule() {
    let all: Vec<Vec<f64>> = (1..=1000).map(|t| time_embedding(t, 128).unwrap()).collect();
    for (i, a) in all.iter().enumerate() {
        for b in &all[i + 1..] {
            let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
            assert!(d > 1e-6);
        }
    }
}

#[test]
fn model_inference_is_deterministic() {
    let model = Model::new(common::toy_model_config(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = vec![common::random_image(16, &mut rng), common::random_image(16, &mut rng)];
    let z = vec![LatentZ::new(vec![0.2; 8]), LatentZ::new(vec![-0.3; 8])];
    let a = model.predict_noise(&x, 7, &z).unwrap();
    assert_eq!(a, model.predict_noise(&x, 7, &z).unwrap());
    assert_eq!(a, Model::new(common::toy_model_config(), 9).unwrap().predict_noise(&x, 7, &z).unwrap());
}

#[test]
fn toy_stack_passes_finite_difference_check() {
    let report = common::gradcheck_total_loss(11, 1e-3);
    assert!(report.failures.is_empty(), "{:#?}", report.failures);
    assert!(report.tensors > 20);
}

#[test]
fn every_parameter_receives_gradient_on_the_default_model() {
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let sched = ScheduleSpec::standard(ScheduleKind::Cosine, 1000).build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let batch = common::items_for("각힝", 32, &mut rng);
    let noise = StepNoise {
        steps: vec![5, 800],
        eps: vec![common::random_image(32, &mut rng), common::random_image(32, &mut rng)],
    };
    let mut g = Graph::new(&model.params);
    let n = loss_graph(
        &mut g,
        &model.cond,
        &model.unet,
        &batch,
        &noise,
        &sched,
        &PerceptualExtractor::Identity,
        0.01,
        None,
    )
    .unwrap();
    let grads = g.backward(n.total).into_param_grads();
    for id in model.params.ids() {
        let grad = grads[id.index()].as_ref().unwrap_or_else(|| panic!("{} has no gradient", model.params.name(id)));
        assert!(grad.iter().any(|v| *v != 0.0), "{} has an all-zero gradient", model.params.name(id));
    }
}

proptest! {
    #[test]
    fn time_embedding_values_are_bounded(t in 0usize..100_000, half in 1usize..64) {
        let e = time_embedding(t, 2 * half).unwrap();
        prop_assert_eq!(e.len(), 2 * half);
        for pair in e.chunks(2) {
            prop_assert!((pair[0].powi(2) + pair[1].powi(2) - 1.0).abs() < 1e-12);
        }
    }
}
