//! Frozen, language-free text features.
//!
//! A class's text seed selects its latent direction; a frozen linear map
//! lifts it to the text width and each of the prompt templates adds a fixed
//! seeded perturbation before unit normalisation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{class_latent, DatasetManifest, SampleMode, LATENT_DIM};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamRegistry};

pub const TEMPLATES: usize = 18;

/// Scale of the per-template perturbation relative to the class signal.
const TEMPLATE_JITTER: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub class_id: u32,
    /// Chosen template, or `None` for the eval-mode average.
    pub template: Option<usize>,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Unit-norm embedding of class text `seed` under `template`.
pub fn template_embedding(registry: &ParamRegistry, latent_map: ParamId, seed: u64, template: usize) -> Vec<f64> {
    let map = registry.tensor(latent_map);
    let width = map.shape()[1];
    let (z, _) = class_latent(seed);
    let mut out = vec![0.0; width];
    for (i, &zi) in z.iter().enumerate().take(LATENT_DIM) {
        out.iter_mut().zip(map.row(i)).for_each(|(o, &m)| *o += zi * m);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(template as u64 + 1)));
    let mut jitter: Vec<f64> = (0..width).map(|_| rng.sample(StandardNormal)).collect();
    normalize(&mut jitter);
    out.iter_mut().zip(&jitter).for_each(|(o, j)| *o += TEMPLATE_JITTER * j);
    normalize(&mut out);
    out
}

/// Average over all templates, renormalised.
pub fn averaged_embedding(registry: &ParamRegistry, latent_map: ParamId, seed: u64) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    for j in 0..TEMPLATES {
        let e = template_embedding(registry, latent_map, seed, j);
        if acc.is_empty() {
            acc = e;
        } else {
            acc.iter_mut().zip(&e).for_each(|(a, b)| *a += b);
        }
    }
    acc.iter_mut().for_each(|a| *a /= TEMPLATES as f64);
    normalize(&mut acc);
    acc
}

/// Class vocabulary view over the frozen text map.
#[derive(Clone, Debug)]
pub struct TextProvider {
    seeds: BTreeMap<u32, u64>,
    latent_map: ParamId,
}

impl TextProvider {
    pub fn new(manifest: &DatasetManifest, latent_map: ParamId) -> Self {
        let seeds = manifest
            .classes()
            .iter()
            .map(|(&id, c)| (id, c.text_seed()))
            .collect();
        Self { seeds, latent_map }
    }

    pub fn latent_map(&self) -> ParamId {
        self.latent_map
    }

    /// Train mode picks one template uniformly; eval mode averages all.
    pub fn embed_class_text<R: Rng + ?Sized>(
        &self,
        registry: &ParamRegistry,
        class_id: u32,
        mode: SampleMode,
        rng: &mut R,
    ) -> Result<TextEmbedding> {
        let seed = *self
            .seeds
            .get(&class_id)
            .ok_or_else(|| Error::Input(format!("unknown class id {class_id}")))?;
        Ok(match mode {
            SampleMode::Train => {
                let j = rng.random_range(0..TEMPLATES);
                TextEmbedding {
                    vector: template_embedding(registry, self.latent_map, seed, j),
                    class_id,
                    template: Some(j),
                }
            }
            SampleMode::Eval => TextEmbedding {
                vector: averaged_embedding(registry, self.latent_map, seed),
                class_id,
                template: None,
            },
        })
    }
}
