use rand::seq::index;
use rand::Rng;

use super::tsn::{tsn_sample, SampleMode};
use super::{DatasetManifest, Split};
use crate::error::{Error, Result};

/// Task shape: `way` classes, `shot` support videos and `queries` query
/// videos per class, `frames` frames per video.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub frames: usize,
}

/// A video reference inside an episode with its selected frame indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeVideo {
    pub record: usize,
    pub frames: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub spec: EpisodeSpec,
    /// Dataset class id for each episode label `0..way`.
    pub classes: Vec<u32>,
    /// Text seed of each episode class.
    pub class_texts: Vec<u64>,
    /// `support[m]` holds the `shot` videos of episode class `m`.
    pub support: Vec<Vec<EpisodeVideo>>,
    pub query: Vec<EpisodeVideo>,
    /// Episode label (index into `classes`) of each query.
    pub query_labels: Vec<usize>,
}

impl Episode {
    pub fn way(&self) -> usize {
        self.spec.way
    }

    pub fn shot(&self) -> usize {
        self.spec.shot
    }

    /// Support videos flattened class-major with their episode labels.
    pub fn support_flat(&self) -> impl Iterator<Item = (usize, &EpisodeVideo)> {
        self.support
            .iter()
            .enumerate()
            .flat_map(|(m, vids)| vids.iter().map(move |v| (m, v)))
    }
}

/// Draws an episode from `split`: `way` distinct classes uniformly, then
/// `shot + queries` distinct videos per class, then TSN frame indices.
pub fn sample_episode<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    spec: EpisodeSpec,
    split: Split,
    mode: SampleMode,
    rng: &mut R,
) -> Result<Episode> {
    if spec.way == 0 || spec.shot == 0 || spec.frames == 0 {
        return Err(Error::Input(format!("degenerate episode shape {spec:?}")));
    }
    let per_class = spec.shot + spec.queries;
    let by_class = manifest.videos_by_class(split);
    let eligible: Vec<(u32, &Vec<usize>)> = by_class
        .iter()
        .filter(|(_, v)| v.len() >= per_class)
        .map(|(&c, v)| (c, v))
        .collect();
    if eligible.len() < spec.way {
        return Err(Error::Input(format!(
            "{split} split has {} classes with >= {per_class} videos, episode needs {} (short by {})",
            eligible.len(),
            spec.way,
            spec.way - eligible.len()
        )));
    }
    let chosen = index::sample(rng, eligible.len(), spec.way);
    let mut classes = Vec::with_capacity(spec.way);
    let mut class_texts = Vec::with_capacity(spec.way);
    let mut support = Vec::with_capacity(spec.way);
    let mut query = Vec::new();
    let mut query_labels = Vec::new();
    for (label, pos) in chosen.into_iter().enumerate() {
        let (class_id, vids) = eligible[pos];
        classes.push(class_id);
        class_texts.push(manifest.class(class_id).expect("class in vocabulary").text_seed());
        let picks = index::sample(rng, vids.len(), per_class);
        let mut shots = Vec::with_capacity(spec.shot);
        for (j, p) in picks.into_iter().enumerate() {
            let record = vids[p];
            let frames = tsn_sample(manifest.record(record).frame_count, spec.frames, mode, rng)?;
            let v = EpisodeVideo { record, frames };
            if j < spec.shot {
                shots.push(v);
            } else {
                query.push(v);
                query_labels.push(label);
            }
        }
        support.push(shots);
    }
    Ok(Episode {
        spec,
        classes,
        class_texts,
        support,
        query,
        query_labels,
    })
}
