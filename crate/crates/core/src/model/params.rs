//! Parameter planning, storage, and initialization.
//!
//! [`Architecture::plan`] walks a [`ModelConfig`] once and produces both the
//! typed index structure the forward pass uses and the flat list of
//! [`ParamSpec`]s. The profiler folds counts over the same list, so the
//! "counted params == allocated params" invariant holds by construction
//! (and is still checked by test).

use super::config::{MixMode, ModelConfig, StagePlan};
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

/// Index of a parameter tensor within a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal(0, std) resampled until within 2 standard deviations.
    TruncNormal { std: f64 },
    Zeros,
    Ones,
}

/// Shape and initialization recipe for one named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Whether AdamW applies weight decay (false for biases and norm affines).
    pub decay: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// An affine map's weight/bias pair.
#[derive(Clone, Copy, Debug)]
pub struct AffinePlan {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvPlan {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct NormPlan {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

/// One low-rank mixing head: project to rank d, mix the (L*d)-dimensional
/// group subspace densely, project back to channels.
#[derive(Clone, Copy, Debug)]
pub struct MixerHeadPlan {
    pub v_proj: AffinePlan,
    pub spatial: AffinePlan,
    pub v_back: AffinePlan,
}

/// Token-mixing operator parameters for one layer.
#[derive(Clone, Debug)]
pub struct MixerPlan {
    pub u_proj: AffinePlan,
    pub heads: Vec<MixerHeadPlan>,
    pub out_proj: AffinePlan,
    pub seq_len: usize,
    pub rank: usize,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct BlockPlan {
    pub norm1: NormPlan,
    pub mixer: MixerPlan,
    pub norm2: NormPlan,
    pub mlp_fc1: AffinePlan,
    pub mlp_fc2: AffinePlan,
    pub mode: MixMode,
    pub drop_prob: f64,
}

#[derive(Clone, Debug)]
pub struct StageArch {
    pub plan: StagePlan,
    pub blocks: Vec<BlockPlan>,
    /// Patch-merge convolutions following this stage (empty after stage 4).
    pub merge: Vec<ConvPlan>,
}

/// The fully resolved model structure: every layer with its parameter ids.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    pub embed: Vec<ConvPlan>,
    pub stages: Vec<StageArch>,
    pub final_norm: NormPlan,
    pub head: AffinePlan,
    specs: Vec<ParamSpec>,
}

/// Layer-norm epsilon used everywhere (keeps zero-variance inputs finite).
pub const NORM_EPS: f64 = 1e-6;

const WEIGHT_STD: f64 = 0.02;
const SPATIAL_WEIGHT_STD: f64 = 1e-4;

struct Planner {
    specs: Vec<ParamSpec>,
}

impl Planner {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init, decay: bool) -> ParamId {
        self.specs.push(ParamSpec {
            name,
            shape,
            init,
            decay,
        });
        ParamId(self.specs.len() - 1)
    }

    fn affine(&mut self, path: &str, in_features: usize, out_features: usize) -> AffinePlan {
        AffinePlan {
            weight: self.push(
                format!("{path}.weight"),
                vec![in_features, out_features],
                Init::TruncNormal { std: WEIGHT_STD },
                true,
            ),
            bias: self.push(format!("{path}.bias"), vec![out_features], Init::Zeros, false),
            in_features,
            out_features,
        }
    }

    fn conv(
        &mut self,
        path: &str,
        kernel: usize,
        stride: usize,
        pad: usize,
        in_channels: usize,
        out_channels: usize,
    ) -> ConvPlan {
        ConvPlan {
            weight: self.push(
                format!("{path}.weight"),
                vec![kernel, kernel, in_channels, out_channels],
                Init::TruncNormal { std: WEIGHT_STD },
                true,
            ),
            bias: self.push(format!("{path}.bias"), vec![out_channels], Init::Zeros, false),
            kernel,
            stride,
            pad,
            in_channels,
            out_channels,
        }
    }

    fn norm(&mut self, path: &str, dim: usize) -> NormPlan {
        NormPlan {
            gain: self.push(format!("{path}.gain"), vec![dim], Init::Ones, false),
            bias: self.push(format!("{path}.bias"), vec![dim], Init::Zeros, false),
            dim,
        }
    }

    /// The dense (L*d) -> (L*d) spatial-channel map. Initialized near zero
    /// with an all-ones bias so the gate starts close to a mild identity.
    fn spatial(&mut self, path: &str, dim: usize) -> AffinePlan {
        AffinePlan {
            weight: self.push(
                format!("{path}.weight"),
                vec![dim, dim],
                Init::TruncNormal {
                    std: SPATIAL_WEIGHT_STD,
                },
                true,
            ),
            bias: self.push(format!("{path}.bias"), vec![dim], Init::Ones, false),
            in_features: dim,
            out_features: dim,
        }
    }
}

impl Architecture {
    /// Resolves a config into layers, names, shapes, and init recipes.
    pub fn plan(config: &ModelConfig) -> Result<Architecture> {
        config.validate()?;
        let mut p = Planner { specs: Vec::new() };
        let base = config.base_dim;

        // Cross-scale embedding: stride-4 convs, kernels 4/8/16/32, output
        // channel split C/2, C/4, C/8, C/8, concatenated in kernel order.
        let embed_widths = [base / 2, base / 4, base / 8, base / 8];
        let embed = [(4usize, 0usize), (8, 2), (16, 6), (32, 14)]
            .iter()
            .zip(embed_widths)
            .map(|(&(k, pad), cout)| {
                p.conv(&format!("embed.k{k}"), k, 4, pad, config.in_channels, cout)
            })
            .collect();

        let plans = config.stage_plans();
        let mut stages = Vec::with_capacity(4);
        for plan in plans {
            let stage_no = plan.stage + 1;
            let channels = plan.channels;
            let seq_len = plan.seq_len();
            let rank = config.rank;
            let blocks = plan
                .layers
                .iter()
                .enumerate()
                .map(|(j, layer)| {
                    let path = format!("stage{stage_no}.block{j}");
                    let norm1 = p.norm(&format!("{path}.norm1"), channels);
                    let u_proj = p.affine(&format!("{path}.mix.u_proj"), channels, channels);
                    let heads = (0..plan.heads)
                        .map(|n| {
                            let hp = format!("{path}.mix.head{n}");
                            MixerHeadPlan {
                                v_proj: p.affine(&format!("{hp}.v_proj"), channels, rank),
                                spatial: p.spatial(&format!("{hp}.spatial"), seq_len * rank),
                                v_back: p.affine(&format!("{hp}.v_back"), rank, channels),
                            }
                        })
                        .collect();
                    let out_proj = p.affine(&format!("{path}.mix.out_proj"), channels, channels);
                    let norm2 = p.norm(&format!("{path}.norm2"), channels);
                    let mlp_fc1 = p.affine(&format!("{path}.mlp.fc1"), channels, 4 * channels);
                    let mlp_fc2 = p.affine(&format!("{path}.mlp.fc2"), 4 * channels, channels);
                    BlockPlan {
                        norm1,
                        mixer: MixerPlan {
                            u_proj,
                            heads,
                            out_proj,
                            seq_len,
                            rank,
                            channels,
                        },
                        norm2,
                        mlp_fc1,
                        mlp_fc2,
                        mode: layer.mode,
                        drop_prob: layer.drop_prob,
                    }
                })
                .collect();

            // Cross-scale patch merging after stages 1-3: kernels 2 and 4,
            // stride 2, each contributing c of the 2c output channels.
            let merge = if plan.stage < 3 {
                vec![
                    p.conv(&format!("merge{stage_no}.k2"), 2, 2, 0, channels, channels),
                    p.conv(&format!("merge{stage_no}.k4"), 4, 2, 1, channels, channels),
                ]
            } else {
                Vec::new()
            };
            stages.push(StageArch {
                plan,
                blocks,
                merge,
            });
        }

        let top_dim = config.stage_dim(3);
        let final_norm = p.norm("final_norm", top_dim);
        let head = p.affine("head", top_dim, config.num_classes);

        Ok(Architecture {
            config: config.clone(),
            embed,
            stages,
            final_norm,
            head,
            specs: p.specs,
        })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn total_scalars(&self) -> u64 {
        self.specs.iter().map(|s| s.numel() as u64).sum()
    }
}

/// Named storage for every trainable tensor of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    tensors: Vec<Vec<f64>>,
}

impl ParamSet {
    /// Allocates and initializes all parameters from the plan's recipes,
    /// drawing every random value from `rng` in spec order.
    pub fn init(arch: &Architecture, rng: &mut ChaCha20Rng) -> ParamSet {
        let tensors = arch
            .specs
            .iter()
            .map(|spec| match spec.init {
                Init::Zeros => vec![0.0; spec.numel()],
                Init::Ones => vec![1.0; spec.numel()],
                Init::TruncNormal { std } => {
                    let dist = Normal::new(0.0, std).expect("std is finite");
                    (0..spec.numel())
                        .map(|_| loop {
                            let v = dist.sample(rng);
                            if v.abs() <= 2.0 * std {
                                break v;
                            }
                        })
                        .collect()
                }
            })
            .collect();
        ParamSet { tensors }
    }

    /// All-zero storage matching the plan (used for counting and loading).
    pub fn zeroed(arch: &Architecture) -> ParamSet {
        ParamSet {
            tensors: arch.specs.iter().map(|s| vec![0.0; s.numel()]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_scalars(&self) -> u64 {
        self.tensors.iter().map(|t| t.len() as u64).sum()
    }

    pub fn tensor(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0]
    }

    pub fn by_index(&self, index: usize) -> &[f64] {
        &self.tensors[index]
    }

    pub fn by_index_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.tensors[index]
    }

    /// Replaces a named tensor's contents, validating the length.
    pub fn load_named(&mut self, arch: &Architecture, name: &str, data: &[f64]) -> Result<()> {
        let (idx, spec) = arch
            .specs
            .iter()
            .enumerate()
            .find(|(_, s)| s.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter name `{name}`")))?;
        if data.len() != spec.numel() {
            return Err(Error::ParamMismatch {
                name: name.to_string(),
                expected: spec.shape.clone(),
                found: vec![data.len()],
            });
        }
        self.tensors[idx].copy_from_slice(data);
        Ok(())
    }

    /// Per-parameter flat views in spec order.
    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.tensors.iter()
    }
}

/// Draws an independent seeded RNG for model initialization.
pub fn seeded_rng(seed: u64) -> ChaCha20Rng {
    use rand::SeedableRng;
    ChaCha20Rng::seed_from_u64(seed)
}

/// Samples `n` values uniformly in [lo, hi) (helper for tests and inputs).
pub fn uniform_vec(rng: &mut ChaCha20Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Variant;

    #[test]
    fn plan_names_are_unique_and_stable() {
        let cfg = ModelConfig::desk_tiny(4);
        let a1 = Architecture::plan(&cfg).unwrap();
        let a2 = Architecture::plan(&cfg).unwrap();
        let names1: Vec<&str> = a1.specs().iter().map(|s| s.name.as_str()).collect();
        let names2: Vec<&str> = a2.specs().iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names1, names2);
        let mut sorted = names1.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), names1.len(), "duplicate parameter name");
    }

    #[test]
    fn embedding_channel_split_matches_base_dim() {
        let cfg = ModelConfig::for_variant(Variant::Small, (224, 224), 1000);
        let arch = Architecture::plan(&cfg).unwrap();
        let widths: Vec<usize> = arch.embed.iter().map(|c| c.out_channels).collect();
        assert_eq!(widths, vec![48, 24, 12, 12]);
        assert_eq!(widths.iter().sum::<usize>(), cfg.base_dim);
    }

    #[test]
    fn decay_only_on_weights() {
        let cfg = ModelConfig::desk_tiny(4);
        let arch = Architecture::plan(&cfg).unwrap();
        for spec in arch.specs() {
            let is_weight = spec.name.ends_with(".weight");
            let is_norm = spec.name.contains("norm");
            assert_eq!(spec.decay, is_weight && !is_norm, "{}", spec.name);
        }
    }

    #[test]
    fn init_is_deterministic_and_respects_recipes() {
        let cfg = ModelConfig::desk_tiny(4);
        let arch = Architecture::plan(&cfg).unwrap();
        let p1 = ParamSet::init(&arch, &mut seeded_rng(7));
        let p2 = ParamSet::init(&arch, &mut seeded_rng(7));
        assert_eq!(p1, p2);
        for (spec, data) in arch.specs().iter().zip(p1.iter()) {
            match spec.init {
                Init::Zeros => assert!(data.iter().all(|&v| v == 0.0)),
                Init::Ones => assert!(data.iter().all(|&v| v == 1.0)),
                Init::TruncNormal { std } => {
                    assert!(data.iter().all(|&v| v.abs() <= 2.0 * std), "{}", spec.name)
                }
            }
        }
    }
}
