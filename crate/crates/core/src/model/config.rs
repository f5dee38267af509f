//! Model variants, configuration, and per-stage shape planning.

use crate::error::{Error, Result};
use std::fmt;

/// The four published CS-Mixer sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Tiny,
    Small,
    Base,
    Large,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Tiny, Variant::Small, Variant::Base, Variant::Large];

    pub fn parse(s: &str) -> Option<Variant> {
        match s.to_ascii_lowercase().as_str() {
            "t" | "tiny" => Some(Variant::Tiny),
            "s" | "small" => Some(Variant::Small),
            "b" | "base" => Some(Variant::Base),
            "l" | "large" => Some(Variant::Large),
            _ => None,
        }
    }

    pub fn letter(self) -> &'static str {
        match self {
            Variant::Tiny => "T",
            Variant::Small => "S",
            Variant::Base => "B",
            Variant::Large => "L",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CS-Mixer-{}", self.letter())
    }
}

/// Which spatial mixing a layer performs: contiguous tiles or dilated lattices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixMode {
    Local,
    Global,
}

impl MixMode {
    pub fn tag(self) -> &'static str {
        match self {
            MixMode::Local => "la",
            MixMode::Global => "ga",
        }
    }
}

/// Full architectural description of one model instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Which Table-1 size this config was derived from, if any.
    pub variant: Option<Variant>,
    /// Channels after the stage-1 embedding (C). Stage i has C * 2^(i-1).
    pub base_dim: usize,
    /// Low-rank mixing dimension (d).
    pub rank: usize,
    /// Mixer layers per stage.
    pub depths: [usize; 4],
    /// Mixing heads per stage.
    pub heads: [usize; 4],
    /// Aggregation window side; clamped per stage to a divisor of the
    /// stage resolution (see [`effective_group_size`]).
    pub group_size: usize,
    /// Input (height, width); both must be multiples of 32.
    pub image_size: (usize, usize),
    pub in_channels: usize,
    pub num_classes: usize,
    /// Peak stochastic-depth drop probability (linear ramp across layers).
    pub drop_path_rate: f64,
}

impl ModelConfig {
    /// Published configuration for a variant at the given resolution.
    pub fn for_variant(variant: Variant, image_size: (usize, usize), num_classes: usize) -> Self {
        let (base_dim, rank, depths, heads) = match variant {
            Variant::Tiny => (64, 2, [1, 1, 8, 6], [2, 4, 8, 16]),
            Variant::Small => (96, 4, [2, 2, 6, 2], [3, 6, 12, 24]),
            Variant::Base => (96, 4, [2, 2, 18, 2], [3, 6, 12, 24]),
            Variant::Large => (128, 4, [2, 2, 18, 2], [4, 8, 16, 32]),
        };
        ModelConfig {
            variant: Some(variant),
            base_dim,
            rank,
            depths,
            heads,
            group_size: 7,
            image_size,
            in_channels: 3,
            num_classes,
            drop_path_rate: 0.0,
        }
    }

    /// Desk-scale test configuration: 32x32 input, C=8, d=2, one layer per
    /// stage, g=2.
    pub fn desk_tiny(num_classes: usize) -> Self {
        ModelConfig {
            variant: None,
            base_dim: 8,
            rank: 2,
            depths: [1, 1, 1, 1],
            heads: [2, 2, 2, 2],
            group_size: 2,
            image_size: (32, 32),
            in_channels: 3,
            num_classes,
            drop_path_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} must be a multiple of 32 (patch 4, then three 2x merges)"
            )));
        }
        if self.base_dim == 0 || self.base_dim % 8 != 0 {
            return Err(Error::Config(format!(
                "base dim {} must be a positive multiple of 8 (embedding splits C/2,C/4,C/8,C/8)",
                self.base_dim
            )));
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be >= 1".into()));
        }
        if self.group_size == 0 {
            return Err(Error::Config("group size must be >= 1".into()));
        }
        if self.heads.iter().any(|&m| m == 0) {
            return Err(Error::Config("every stage needs >= 1 head".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("need at least one input channel".into()));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::Config(format!(
                "drop_path_rate {} outside [0, 1)",
                self.drop_path_rate
            )));
        }
        Ok(())
    }

    /// Channel width of stage `i` (0-based): C * 2^i.
    pub fn stage_dim(&self, stage: usize) -> usize {
        self.base_dim << stage
    }

    /// Spatial resolution of stage `i` (0-based): (H/4, W/4) / 2^i.
    pub fn stage_resolution(&self, stage: usize) -> (usize, usize) {
        let (h, w) = self.image_size;
        ((h / 4) >> stage, (w / 4) >> stage)
    }

    /// Shape plan for all four stages, including LA/GA layer tags and
    /// per-layer stochastic-depth probabilities.
    pub fn stage_plans(&self) -> Vec<StagePlan> {
        let total_layers: usize = self.depths.iter().sum();
        let mut layer_index = 0;
        (0..4)
            .map(|i| {
                let (h, w) = self.stage_resolution(i);
                let layers = (0..self.depths[i])
                    .map(|j| {
                        let mode = if j % 2 == 0 { MixMode::Local } else { MixMode::Global };
                        let drop_prob = if total_layers <= 1 {
                            0.0
                        } else {
                            self.drop_path_rate * layer_index as f64 / (total_layers - 1) as f64
                        };
                        layer_index += 1;
                        LayerPlan { mode, drop_prob }
                    })
                    .collect();
                StagePlan {
                    stage: i,
                    spatial: (h, w),
                    channels: self.stage_dim(i),
                    group: effective_group_size(h, w, self.group_size),
                    heads: self.heads[i],
                    layers,
                }
            })
            .collect()
    }

    /// True when this config is exactly a Table-1 row (224x224, 1000
    /// classes, g=7), so paper comparisons are meaningful.
    pub fn is_canonical(&self) -> bool {
        match self.variant {
            Some(v) => *self == ModelConfig::for_variant(v, (224, 224), 1000),
            None => false,
        }
    }
}

/// Resolved shape information for one backbone stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: usize,
    pub spatial: (usize, usize),
    pub channels: usize,
    /// Effective aggregation window for this stage.
    pub group: usize,
    pub heads: usize,
    pub layers: Vec<LayerPlan>,
}

impl StagePlan {
    /// Tokens per aggregation group: L = g^2.
    pub fn seq_len(&self) -> usize {
        self.group * self.group
    }

    /// Number of groups: N = h*w / g^2.
    pub fn num_groups(&self) -> usize {
        self.spatial.0 * self.spatial.1 / self.seq_len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPlan {
    pub mode: MixMode,
    pub drop_prob: f64,
}

/// Largest divisor of gcd(h, w) that does not exceed `g`. Equals `g`
/// whenever `g` divides both extents; shrinks gracefully at stages whose
/// resolution drops below (or off the divisor lattice of) the window.
pub fn effective_group_size(h: usize, w: usize, g: usize) -> usize {
    let limit = gcd(h, w);
    (1..=limit.min(g)).rev().find(|d| limit % d == 0).unwrap_or(1)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table1_variant_constants() {
        let t = ModelConfig::for_variant(Variant::Tiny, (224, 224), 1000);
        assert_eq!((t.base_dim, t.rank), (64, 2));
        assert_eq!(t.depths, [1, 1, 8, 6]);
        assert_eq!(t.heads, [2, 4, 8, 16]);
        let l = ModelConfig::for_variant(Variant::Large, (224, 224), 1000);
        assert_eq!((l.base_dim, l.rank), (128, 4));
        assert_eq!(l.depths, [2, 2, 18, 2]);
        assert_eq!(l.heads, [4, 8, 16, 32]);
    }

    #[test]
    fn stage_schedule_at_224() {
        for v in Variant::ALL {
            let cfg = ModelConfig::for_variant(v, (224, 224), 1000);
            let plans = cfg.stage_plans();
            let dims: Vec<(usize, usize)> =
                plans.iter().map(|p| (p.spatial.0, p.channels)).collect();
            let c = cfg.base_dim;
            assert_eq!(dims, vec![(56, c), (28, 2 * c), (14, 4 * c), (7, 8 * c)]);
            assert!(plans.iter().all(|p| p.group == 7));
        }
    }

    #[test]
    fn effective_group_clamps_to_resolution_divisors() {
        assert_eq!(effective_group_size(56, 56, 7), 7);
        assert_eq!(effective_group_size(7, 7, 7), 7);
        assert_eq!(effective_group_size(1, 1, 2), 1);
        assert_eq!(effective_group_size(8, 8, 2), 2);
        // 2 does not divide 7; fall back to 1.
        assert_eq!(effective_group_size(7, 7, 2), 1);
    }

    #[test]
    fn layers_alternate_starting_local() {
        let cfg = ModelConfig::for_variant(Variant::Small, (224, 224), 1000);
        let plans = cfg.stage_plans();
        for plan in &plans {
            for (j, layer) in plan.layers.iter().enumerate() {
                let want = if j % 2 == 0 { MixMode::Local } else { MixMode::Global };
                assert_eq!(layer.mode, want);
            }
        }
        // Depth-1 stages contain only an LA layer.
        let tiny = ModelConfig::for_variant(Variant::Tiny, (224, 224), 1000);
        let tiny_plans = tiny.stage_plans();
        assert_eq!(tiny_plans[0].layers.len(), 1);
        assert_eq!(tiny_plans[0].layers[0].mode, MixMode::Local);
    }

    #[test]
    fn drop_path_ramps_linearly_over_all_layers() {
        let mut cfg = ModelConfig::for_variant(Variant::Small, (224, 224), 1000);
        cfg.drop_path_rate = 0.3;
        let probs: Vec<f64> = cfg
            .stage_plans()
            .iter()
            .flat_map(|p| p.layers.iter().map(|l| l.drop_prob))
            .collect();
        assert_eq!(probs.len(), 12);
        assert_eq!(probs[0], 0.0);
        assert!((probs[11] - 0.3).abs() < 1e-12);
        for pair in probs.windows(2) {
            assert!(pair[1] > pair[0]);
        }
    }

    #[test]
    fn validation_rejects_bad_shapes() {
        let mut cfg = ModelConfig::desk_tiny(4);
        assert!(cfg.validate().is_ok());
        cfg.image_size = (100, 224);
        assert!(cfg.validate().is_err());
        cfg.image_size = (32, 32);
        cfg.base_dim = 12;
        assert!(cfg.validate().is_err());
    }
}
