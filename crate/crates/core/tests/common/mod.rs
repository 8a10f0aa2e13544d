#![allow(dead_code)]

use brainrot::interpret::input_gradient;
use brainrot::nn::{rng_for, Activation};
use brainrot::params::ParamSet;
use brainrot::regressor::{self, regressor_forward, Backprop, ConvSpec, LossKind, RegressorConfig, RegressorParams};
use brainrot::vit::{self, ViTConfig, ViTParams};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

pub const H: f64 = 1e-5;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

/// Central differences on up to `per_tensor` entries of every trainable
/// tensor; returns the worst relative error.
pub fn check<F>(params: &mut ParamSet, analytic: &ParamSet, per_tensor: usize, seed: u64, loss: F) -> f64
where
    F: Fn(&ParamSet) -> f64,
{
    let mut rng = rng_for(seed, 99);
    let names: Vec<String> = analytic.names().map(str::to_string).collect();
    let mut worst: f64 = 0.0;
    for name in names {
        let len = params.get(&name).unwrap().len();
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..len)).collect()
        };
        for i in picks {
            let orig = params.get(&name).unwrap().data[i];
            params.get_mut(&name).unwrap().data[i] = orig + H;
            let up = loss(params);
            params.get_mut(&name).unwrap().data[i] = orig - H;
            let down = loss(params);
            params.get_mut(&name).unwrap().data[i] = orig;
            let numeric = (up - down) / (2.0 * H);
            let e = rel_err(analytic.get(&name).unwrap().data[i], numeric);
            if e > worst {
                worst = e;
            }
        }
    }
    worst
}

pub fn random_matrix(h: usize, w: usize, seed: u64, stream: u64) -> Array2<f64> {
    let mut rng = rng_for(seed, stream);
    Array2::from_shape_fn((h, w), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Spreads the small initial weights out so no gradient is negligible.
pub fn scramble(params: &mut ParamSet, scale: f64, seed: u64) {
    let mut rng = rng_for(seed, 7);
    for (name, t) in params.iter_mut() {
        if name.starts_with("meta.") {
            continue;
        }
        for v in t.data.iter_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Worst relative error of the ViT cross-entropy gradient (d=16, L=2).
pub fn vit_gradient_error(seed: u64) -> f64 {
    let cfg = ViTConfig {
        patch_size: 4,
        embed_dim: 16,
        depth: 2,
        heads: 4,
        mlp_ratio: 2.0,
        seed,
        ..ViTConfig::toy()
    };
    let mut p = ViTParams::init(&cfg, (8, 12), 4).unwrap();
    scramble(&mut p.params, 0.3, seed);
    let slices: Vec<_> = (0..3).map(|i| random_matrix(8, 12, seed, 10 + i)).collect();
    let views: Vec<_> = slices.iter().map(|s| s.view()).collect();
    let targets = [0usize, 3, 1];
    let (_, grads, _) = vit::batch_loss_and_grad(&views, &targets, &p).unwrap();
    let arch = p.arch.clone();
    check(&mut p.params, &grads, 12, seed, |ps| {
        let q = ViTParams {
            params: ps.clone(),
            arch: arch.clone(),
        };
        vit::batch_loss_and_grad(&views, &targets, &q).unwrap().0
    })
}

pub fn toy_regressor(seed: u64, loss: LossKind, activation: Activation, residual: bool) -> RegressorConfig {
    RegressorConfig {
        conv_blocks: vec![ConvSpec::new(3, 3, 4), ConvSpec::new(2, 2, 3), ConvSpec::new(2, 2, 2)],
        fc_dims: (12, 6),
        activation,
        residual,
        loss,
        dropout: 0.3,
        seed,
        ..RegressorConfig::toy()
    }
}

/// Worst relative error of the regressor parameter gradient.
pub fn regressor_gradient_error(seed: u64, loss: LossKind, activation: Activation, residual: bool, train_mode: bool) -> f64 {
    let cfg = toy_regressor(seed, loss, activation, residual);
    let mut p = RegressorParams::init(&cfg, (10, 12)).unwrap();
    scramble(&mut p.params, 0.1, seed);
    let zs: Vec<_> = (0..4).map(|i| random_matrix(10, 12, seed, 20 + i)).collect();
    let samples: Vec<_> = zs
        .iter()
        .enumerate()
        .map(|(i, z)| (z.view(), (i % 2) as u8, 1.0 + 0.5 * i as f64))
        .collect();
    let seeds: Vec<(u64, u64)> = (0..samples.len() as u64).map(|k| (seed, 1000 + k)).collect();
    let seeds = train_mode.then_some(seeds.as_slice());
    let (_, grads) = regressor::batch_loss_and_grad(&samples, &p, &cfg, seeds).unwrap();
    let arch = p.arch.clone();
    check(&mut p.params, &grads, 10, seed, |ps| {
        let q = RegressorParams {
            params: ps.clone(),
            arch: arch.clone(),
        };
        regressor::batch_loss_and_grad(&samples, &q, &cfg, seeds).unwrap().0
    })
}

/// Worst relative error of dŷ/dZ at a few positions.
pub fn input_gradient_error(seed: u64) -> f64 {
    let cfg = toy_regressor(seed, LossKind::Mse, Activation::Silu, true);
    let mut p = RegressorParams::init(&cfg, (10, 12)).unwrap();
    scramble(&mut p.params, 0.1, seed);
    let mut z = random_matrix(10, 12, seed, 3);
    let (g, _) = input_gradient(z.view(), 1, &p, Backprop::Standard).unwrap();
    let mut worst: f64 = 0.0;
    for idx in [(0, 0), (4, 7), (9, 11), (5, 2)] {
        let orig = z[idx];
        z[idx] = orig + H;
        let up = regressor_forward(z.view(), 1, &p).unwrap().mean;
        z[idx] = orig - H;
        let down = regressor_forward(z.view(), 1, &p).unwrap().mean;
        z[idx] = orig;
        worst = worst.max(rel_err(g[idx], (up - down) / (2.0 * H)));
    }
    worst
}
