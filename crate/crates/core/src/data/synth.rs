//! Synthetic videos with a controllable signal-to-noise ratio.
//!
//! Every dataset draws an orthonormal frame of reference in patch space: a
//! `LATENT_DIM`-wide class subspace and a nuisance subspace orthogonal to
//! it. A frame patch of class `c` at time `t` is
//!
//! ```text
//! signal * U((z_c + tau_t w_c) * s_p) + nuisance * V n_{v,p} + pos_p + noise * eps
//! ```
//!
//! where `z_c`, `w_c` derive from the class text seed, `s_p` is a fixed
//! per-patch sign pattern and `n_{v,p}` is a per-video offset that cancels
//! in antithetic pairs inside each class. Class means are therefore exact,
//! so nearest-centroid on raw features is perfect at zero noise while
//! single videos remain dominated by nuisance.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{default_splits, ClassInfo, DatasetManifest, GridShape, VideoRecord};
use crate::error::{Error, Result};

pub const LATENT_DIM: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub videos_per_class: usize,
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
    pub patch_dim: usize,
    pub signal: f64,
    pub nuisance: f64,
    pub nuisance_dim: usize,
    pub drift: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 100,
            videos_per_class: 6,
            frames: 8,
            rows: 2,
            cols: 2,
            patch_dim: 16,
            signal: 1.0,
            nuisance: 3.0,
            nuisance_dim: 4,
            drift: 0.5,
            noise: 0.0,
            seed: 0,
        }
    }
}

fn gaussian_unit<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Class direction and temporal drift direction derived from a text seed.
pub fn class_latent(text_seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(text_seed);
    let z = gaussian_unit(&mut rng, LATENT_DIM);
    let w = gaussian_unit(&mut rng, LATENT_DIM);
    (z, w)
}

/// Gram-Schmidt on Gaussian draws: `count` orthonormal vectors of length `dim`.
fn orthonormal<R: Rng + ?Sized>(rng: &mut R, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

fn combine(basis: &[Vec<f64>], coeffs: &[f64], out: &mut [f64], scale: f64) {
    for (b, &c) in basis.iter().zip(coeffs) {
        out.iter_mut().zip(b).for_each(|(o, x)| *o += scale * c * x);
    }
}

/// Builds a deterministic synthetic manifest; splits follow 64/12/24.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<DatasetManifest> {
    if cfg.classes == 0 || cfg.videos_per_class == 0 || cfg.frames == 0 {
        return Err(Error::Input("synthetic counts must be >= 1".into()));
    }
    if cfg.rows == 0 || cfg.cols == 0 {
        return Err(Error::Input("grid must have at least one patch".into()));
    }
    if cfg.patch_dim < LATENT_DIM + cfg.nuisance_dim {
        return Err(Error::Input(format!(
            "patch_dim {} cannot hold {} class + {} nuisance directions",
            cfg.patch_dim, LATENT_DIM, cfg.nuisance_dim
        )));
    }
    let grid = GridShape {
        rows: cfg.rows,
        cols: cfg.cols,
        dim: cfg.patch_dim,
    };
    let patches = grid.patches();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let basis = orthonormal(&mut rng, LATENT_DIM + cfg.nuisance_dim, cfg.patch_dim);
    let (class_basis, nuisance_basis) = basis.split_at(LATENT_DIM);
    let signs: Vec<Vec<f64>> = (0..patches)
        .map(|p| {
            (0..LATENT_DIM)
                .map(|i| if p == 0 || rng.random::<bool>() || i == p % LATENT_DIM { 1.0 } else { -1.0 })
                .collect()
        })
        .collect();
    let positions: Vec<Vec<f64>> = (0..patches)
        .map(|_| {
            (0..cfg.patch_dim)
                .map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    let splits = default_splits(cfg.classes);
    let mut classes = BTreeMap::new();
    let mut records = Vec::with_capacity(cfg.classes * cfg.videos_per_class);
    for (c, &split) in splits.iter().enumerate() {
        let info = ClassInfo {
            name: format!("synth{}-class{c:04}", cfg.seed),
            split,
        };
        let (z, w) = class_latent(info.text_seed());
        let class_id = c as u32;
        classes.insert(class_id, info);
        let mut pair_offsets: Vec<Vec<f64>> = Vec::new();
        for v in 0..cfg.videos_per_class {
            let antithetic = v % 2 == 1;
            let unpaired = v + 1 == cfg.videos_per_class && !antithetic;
            if !antithetic {
                pair_offsets = (0..patches)
                    .map(|_| {
                        if cfg.nuisance_dim == 0 {
                            Vec::new()
                        } else {
                            gaussian_unit(&mut rng, cfg.nuisance_dim)
                        }
                    })
                    .collect();
            }
            let sign = if antithetic { -1.0 } else { 1.0 };
            let nuisance = if unpaired { 0.0 } else { sign * cfg.nuisance };
            let mut payload = Vec::with_capacity(cfg.frames * grid.frame_len());
            let mut patch = vec![0.0; cfg.patch_dim];
            for t in 0..cfg.frames {
                let tau = if cfg.frames > 1 {
                    cfg.drift * (2.0 * t as f64 / (cfg.frames - 1) as f64 - 1.0)
                } else {
                    0.0
                };
                for p in 0..patches {
                    let coeffs: Vec<f64> = (0..LATENT_DIM)
                        .map(|i| (z[i] + tau * w[i]) * signs[p][i])
                        .collect();
                    patch.copy_from_slice(&positions[p]);
                    combine(class_basis, &coeffs, &mut patch, cfg.signal);
                    combine(nuisance_basis, &pair_offsets[p], &mut patch, nuisance);
                    for x in patch.iter_mut() {
                        let e: f64 = rng.sample(StandardNormal);
                        *x += cfg.noise * e;
                        payload.push(*x as f32);
                    }
                }
            }
            records.push(VideoRecord {
                class_id,
                split,
                frame_count: cfg.frames,
                grid,
                payload,
            });
        }
    }
    DatasetManifest::new(records, classes)
}
