use serde::Serialize;

use crate::encoder::{BackboneConfig, Blueprint, Encoder, ParamSpec};
use crate::error::Result;
use crate::model::{trained_groups, ModelOptions};
use crate::tensor::{ParamGroup, ParamRegistry};
use crate::tpcm::Tpcm;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GroupCount {
    pub group: String,
    pub total: usize,
    pub tunable: usize,
}

/// Parameter counts by group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Census {
    pub total: usize,
    pub tunable: usize,
    pub groups: Vec<GroupCount>,
}

impl Census {
    fn from_items(items: impl Iterator<Item = (ParamGroup, usize, bool)>) -> Self {
        let mut groups: Vec<GroupCount> = ParamGroup::ALL
            .iter()
            .map(|g| GroupCount { group: g.name().to_string(), total: 0, tunable: 0 })
            .collect();
        for (group, n, tunable) in items {
            let slot = ParamGroup::ALL.iter().position(|g| *g == group).expect("known group");
            groups[slot].total += n;
            if tunable {
                groups[slot].tunable += n;
            }
        }
        Self {
            total: groups.iter().map(|g| g.total).sum(),
            tunable: groups.iter().map(|g| g.tunable).sum(),
            groups,
        }
    }

    /// Counts declarations; a parameter is tunable when it is declared
    /// trainable and its group is in `trained`.
    pub fn of_specs(specs: &[ParamSpec], trained: &[ParamGroup]) -> Self {
        Self::from_items(
            specs
                .iter()
                .map(|s| (s.group, s.numel(), !s.frozen && trained.contains(&s.group))),
        )
    }

    pub fn of_registry(reg: &ParamRegistry) -> Self {
        Self::from_items(reg.entries().iter().map(|e| (e.group, e.tensor.numel(), !e.frozen)))
    }

    pub fn group(&self, g: ParamGroup) -> &GroupCount {
        self.groups.iter().find(|c| c.group == g.name()).expect("every group is listed")
    }

    pub fn ratio(&self) -> f64 {
        self.tunable as f64 / self.total as f64
    }
}

/// Census of the full model without allocating any weights.
pub fn param_census(cfg: &BackboneConfig, options: ModelOptions) -> Result<Census> {
    let mut bp = Blueprint::new();
    Encoder::declare(cfg, &mut bp)?;
    Tpcm::declare(cfg.text_dim, cfg.tpcm_heads, &mut bp)?;
    Ok(Census::of_specs(bp.specs(), &trained_groups(options, cfg.train_projection)))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Hand count for the default desk backbone.
    fn closed_form(c: &BackboneConfig) -> (usize, usize, usize) {
        let (d, h, dt) = (c.dim, c.bottleneck(), c.text_dim);
        let adapter = d * h + h + h * d + d;
        let adapters = 3 * c.layers * adapter;
        let fc_text = dt * d + d;
        let tpcm = 2 * (2 * dt) + (dt * 3 * dt + 3 * dt) + (dt * dt + dt) + (dt * 4 * dt + 4 * dt) + (4 * dt * dt + dt);
        (adapters, fc_text, tpcm)
    }

    #[test]
    fn desk_census_matches_closed_form() {
        let cfg = BackboneConfig::default();
        let c = param_census(&cfg, ModelOptions::default()).unwrap();
        let (adapters, fc_text, tpcm) = closed_form(&cfg);
        assert_eq!(c.group(ParamGroup::Adapter).tunable, adapters);
        assert_eq!(c.group(ParamGroup::TextProjection).tunable, fc_text);
        assert_eq!(c.group(ParamGroup::Tpcm).tunable, tpcm);
        assert_eq!(c.tunable, adapters + fc_text + tpcm);
        let (d, n, p, l) = (cfg.dim, cfg.patch_tokens, cfg.patch_dim, cfg.layers);
        let block = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d);
        let backbone = p * d + d + (n + 1) * d + 2 * d + l * block + 2 * d;
        assert_eq!(c.group(ParamGroup::Backbone).total, backbone);
        assert_eq!(c.group(ParamGroup::Projection).total, d * cfg.text_dim);
        assert_eq!(c.group(ParamGroup::TextEncoder).total, crate::data::LATENT_DIM * cfg.text_dim);
    }

    #[test]
    fn vit_b32_unit_counts() {
        let cfg = BackboneConfig::vit_b32();
        let c = param_census(&cfg, ModelOptions::default()).unwrap();
        assert_eq!(c.group(ParamGroup::Adapter).tunable, 36 * 295_872);
        assert_eq!(c.group(ParamGroup::TextProjection).tunable, 393_984);
        assert_eq!(c.group(ParamGroup::Tpcm).tunable, 3_152_384);
        assert_eq!(c.tunable, 14_197_760);
    }

    #[test]
    fn frozen_registry_has_nothing_tunable() {
        let mut bp = Blueprint::new();
        Encoder::declare(&BackboneConfig::default(), &mut bp).unwrap();
        let mut reg = bp.materialize(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let ids: Vec<_> = reg.ids().collect();
        for id in ids {
            reg.set_frozen(id, true);
        }
        let c = Census::of_registry(&reg);
        assert_eq!((c.tunable, c.total), (0, Census::of_specs(bp.specs(), &[]).total));
    }
}
