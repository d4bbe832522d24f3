//! Finite-difference check of the full model and loss in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{assemble_input, contrastive_forward, tree_spectrograms, TrainConfig};
use crate::diffcore::{grad_check_at, GradCheckConfig, GradCheckReport, Tensor};
use crate::dsp::LogMelFrontEnd;
use crate::error::Result;
use crate::hac::build_tree_with_min_leaf;
use crate::loss::{hierarchical_loss, Ablation};
use crate::model::{BnMode, Bound, ModelConfig, ParamStore};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub model: ModelConfig,
    pub batch: usize,
    pub root_len: usize,
    pub sample_rate: u32,
    pub tau: f64,
    pub seed: u64,
    pub check: GradCheckConfig,
    /// Coordinates checked per parameter tensor, drawn with the seed;
    /// `None` checks every coordinate.
    pub per_tensor: Option<usize>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            model: ModelConfig::gradcheck(),
            batch: 2,
            root_len: 2048,
            sample_rate: 16_000,
            tau: TrainConfig::desk().tau,
            seed: 0,
            check: GradCheckConfig::default(),
            per_tensor: None,
        }
    }
}

impl GradcheckOptions {
    /// Desk widths with a sampled subset of coordinates in every tensor.
    pub fn desk(per_tensor: usize) -> Self {
        GradcheckOptions {
            model: ModelConfig::desk(),
            root_len: 4096,
            per_tensor: Some(per_tensor),
            ..Self::default()
        }
    }
}

/// Random tonal test signal: a few sines plus a little noise.
fn test_signal(rng: &mut ChaCha8Rng, len: usize, sr: f64) -> Vec<f32> {
    let tones: Vec<(f64, f64)> = (0..4)
        .map(|_| (rng.random_range(100.0..6000.0), rng.random_range(0.1..0.5)))
        .collect();
    (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            let s: f64 = tones.iter().map(|(f, a)| a * (2.0 * std::f64::consts::PI * f * t).sin()).sum();
            (s + 0.05 * rng.random_range(-1.0..1.0)) as f32
        })
        .collect()
}

/// Gradient of the full-configuration loss with respect to every parameter,
/// compared against central differences.
pub fn full_model_gradcheck(opts: &GradcheckOptions) -> Result<GradCheckReport> {
    let cfg = &opts.model;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let store = ParamStore::init(cfg, &mut rng)?;
    let min_leaf = crate::dsp::stft::DEFAULT_WINDOW + cfg.frames - 1;
    let tree = build_tree_with_min_leaf(opts.root_len, cfg.m, cfg.n, min_leaf)?;
    let front = LogMelFrontEnd::new(opts.sample_rate, cfg.mel_bands, cfg.frames);
    let sr = opts.sample_rate as f64;
    let mut trees = Vec::with_capacity(opts.batch);
    let mut roots = Vec::with_capacity(opts.batch);
    for _ in 0..opts.batch {
        let v1 = test_signal(&mut rng, opts.root_len, sr);
        let v2 = test_signal(&mut rng, opts.root_len, sr);
        trees.push(tree_spectrograms(&front, &tree, &v1)?);
        roots.push(front.clip(&v2, (0, opts.root_len))?);
    }
    let input: Tensor<f64> = assemble_input(&trees, &roots, &tree, cfg)?;
    let names: Vec<&str> = store.names().collect();
    let params = store.tensors_as::<f64>();
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| {
            let all: Vec<usize> = (0..p.len()).collect();
            let picked = match opts.per_tensor {
                Some(k) if k < p.len() => rand::seq::index::sample(&mut rng, p.len(), k).into_vec(),
                _ => all,
            };
            picked.into_iter().map(move |ei| (pi, ei))
        })
        .collect();
    grad_check_at(
        |g, vars| {
            let bound = Bound::from_vars(names.iter().copied(), vars)?;
            let (batch, _) =
                contrastive_forward(&bound, cfg, &tree, g.constant(input.clone()), opts.batch, BnMode::Train, true)?;
            Ok(hierarchical_loss(&batch, opts.tau, Ablation::Full)?.0)
        },
        &params,
        opts.check,
        &coords,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampled_coordinates_are_counted() {
        let opts = GradcheckOptions {
            per_tensor: Some(1),
            ..GradcheckOptions::default()
        };
        let tensors = ParamStore::init(&opts.model, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().params.len();
        let rep = full_model_gradcheck(&opts).unwrap();
        assert_eq!(rep.checked, tensors);
        assert!(rep.passed, "{rep:?}");
    }
}
