//! Whole-network gradient verification against central finite differences.
//!
//! Lives in the library (test-gated) so both unit tests and the acceptance
//! suite can reuse it: a hand-rolled backward pass is only trustworthy while
//! this check holds.

#![cfg(test)]

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::net::ForwardOptions;
use super::{ModelConfig, PaddedPrompt, ToyDenoiser};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        channels: 3,
        c0: 4,
        c1: 6,
        c2: 8,
        heads: 2,
        head_dim: 4,
        time_dim: 8,
        ..ModelConfig::default()
    }
}

struct Fixture {
    model: ToyDenoiser,
    xs: Vec<Array3<f32>>,
    ts: Vec<usize>,
    prompts: Vec<PaddedPrompt>,
    proj: Vec<Array3<f32>>,
}

fn fixture() -> Fixture {
    let model = ToyDenoiser::new(tiny_config(), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut r = |d: (usize, usize, usize)| {
        Array3::from_shape_simple_fn(d, || rng.random_range(-1.0f32..1.0))
    };
    let xs = vec![r((3, 8, 8)), r((3, 8, 8))];
    let proj = vec![r((3, 8, 8)), r((3, 8, 8))];
    let ts = vec![3, 17];
    let prompts = vec![
        model.pad_prompt(Some(&[2, 8, 1, 16])).unwrap(),
        model.pad_prompt(None).unwrap(),
    ];
    Fixture { model, xs, ts, prompts, proj }
}

fn projected_loss(f: &Fixture, model: &ToyDenoiser) -> f64 {
    let arts = model
        .forward_raw(&f.xs, &f.ts, &f.prompts, ForwardOptions::default())
        .unwrap();
    arts.eps
        .iter()
        .zip(&f.proj)
        .map(|(e, p)| e.iter().zip(p.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>())
        .sum()
}

#[test]
fn full_backward_matches_finite_differences() {
    let f = fixture();
    let arts = f
        .model
        .forward_raw(&f.xs, &f.ts, &f.prompts, ForwardOptions::default())
        .unwrap();
    let mut grads = vec![0f32; f.model.param_count()];
    f.model.backward_raw(&arts.cache, &f.proj, &mut grads).unwrap();

    // sample coordinates across the whole vector plus the largest gradients
    let mut rng = ChaCha8Rng::seed_from_u64(5150);
    let mut coords: Vec<usize> =
        (0..40).map(|_| rng.random_range(0..f.model.param_count())).collect();
    let mut by_mag: Vec<usize> = (0..grads.len()).collect();
    by_mag.sort_by(|a, b| grads[*b].abs().partial_cmp(&grads[*a].abs()).unwrap());
    coords.extend_from_slice(&by_mag[..10]);

    let mut checked = 0;
    for idx in coords {
        let w0 = f.model.weights()[idx];
        let h = (1e-2 * w0.abs()).max(2e-3);

        let mut mp = f.model.clone();
        mp.weights_mut()[idx] = w0 + h;
        let lp = projected_loss(&f, &mp);
        let mut mm = f.model.clone();
        mm.weights_mut()[idx] = w0 - h;
        let lm = projected_loss(&f, &mm);

        let num = (lp - lm) / (2.0 * h as f64);
        let ana = grads[idx] as f64;
        let tol = 0.05 * num.abs().max(ana.abs()).max(0.05);
        assert!(
            (num - ana).abs() <= tol,
            "param {idx}: finite diff {num:.6} vs analytic {ana:.6}"
        );
        checked += 1;
    }
    assert!(checked >= 45);
}

#[test]
fn backward_refuses_overridden_forward() {
    let f = fixture();
    let mut hook = |_site: &super::AttnSite,
                    _triplets: &[crate::attention::AttentionTriplet],
                    defaults: &[crate::attention::FeatureMap]|
     -> crate::Result<Option<Vec<crate::attention::FeatureMap>>> {
        Ok(Some(defaults.iter().map(|d| d.mapv(|_| 0.0)).collect()))
    };
    let arts = f
        .model
        .forward_raw(
            &f.xs,
            &f.ts,
            &f.prompts,
            ForwardOptions { override_fn: Some(&mut hook), ..Default::default() },
        )
        .unwrap();
    let mut grads = vec![0f32; f.model.param_count()];
    let err = f.model.backward_raw(&arts.cache, &f.proj, &mut grads);
    assert!(matches!(err, Err(crate::Error::ContractViolation(_))));
}
