//! Tape-level forward pass of the CS-Mixer architecture.

use super::config::{MixMode, ModelConfig};
use super::params::{
    AffinePlan, Architecture, BlockPlan, ConvPlan, MixerPlan, NormPlan, ParamSet, NORM_EPS,
};
use crate::error::{Error, Result};
use crate::tensor::{RearrangeSpec, Tape, Tensor, TensorId};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

/// Whether residual branches may be stochastically dropped (training) or are
/// deterministically scaled by their survival probability (evaluation).
#[derive(Debug)]
pub enum ForwardMode<'r> {
    Train { rng: &'r mut ChaCha20Rng },
    Eval,
}

/// Tape handles for one mixer layer's operator weights (the per-group
/// transform shared by all N groups of that layer).
#[derive(Clone, Debug)]
pub struct CsMixerParams {
    pub u_proj: BoundAffine,
    pub heads: Vec<CsMixerHead>,
    pub out_proj: BoundAffine,
    pub seq_len: usize,
    pub rank: usize,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct CsMixerHead {
    pub v_proj: BoundAffine,
    pub spatial: BoundAffine,
    pub v_back: BoundAffine,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundAffine {
    pub weight: TensorId,
    pub bias: TensorId,
}

/// Parameters registered on a tape, indexed like the [`ParamSet`].
pub struct ParamBinding {
    ids: Vec<TensorId>,
}

impl ParamBinding {
    pub fn id(&self, param: super::params::ParamId) -> TensorId {
        self.ids[param.index()]
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }

    fn affine(&self, plan: &AffinePlan) -> BoundAffine {
        BoundAffine {
            weight: self.id(plan.weight),
            bias: self.id(plan.bias),
        }
    }
}

/// A configured CS-Mixer instance: resolved architecture plus its weights.
pub struct Model {
    pub arch: Architecture,
    pub params: ParamSet,
}

impl Model {
    /// Builds a model with freshly initialized weights drawn from `rng`.
    pub fn init(config: &ModelConfig, rng: &mut ChaCha20Rng) -> Result<Model> {
        let arch = Architecture::plan(config)?;
        let params = ParamSet::init(&arch, rng);
        Ok(Model { arch, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    /// Registers every parameter on `tape`. With `trainable` set, leaves
    /// require gradients and `backward` will fill them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ParamBinding {
        bind_params(&self.arch, &self.params, tape, trainable)
    }

    /// Runs the full pipeline on one image tensor already on the tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        image: TensorId,
        mode: &mut ForwardMode,
    ) -> Result<TensorId> {
        forward_on(&self.arch, tape, binding, image, mode)
    }

    /// Convenience eval path: fresh tape, frozen weights, logits out.
    pub fn eval_logits(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false);
        let image = tape.constant(image.clone());
        let logits = self.forward(&mut tape, &binding, image, &mut ForwardMode::Eval)?;
        Ok(tape.data(logits).to_vec())
    }
}

/// Registers a parameter set on a tape in spec order.
pub fn bind_params(
    arch: &Architecture,
    params: &ParamSet,
    tape: &mut Tape,
    trainable: bool,
) -> ParamBinding {
    let ids = arch
        .specs()
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let tensor = Tensor::from_vec(spec.shape.clone(), params.by_index(i).to_vec())
                .expect("param spec shape consistent");
            if trainable {
                tape.leaf(tensor.with_grad())
            } else {
                tape.constant(tensor)
            }
        })
        .collect();
    ParamBinding { ids }
}

/// Full pipeline: embed, four stages with merges between, pool, classify.
pub fn forward_on(
    arch: &Architecture,
    tape: &mut Tape,
    binding: &ParamBinding,
    image: TensorId,
    mode: &mut ForwardMode,
) -> Result<TensorId> {
    let (h, w) = arch.config.image_size;
    if tape.shape(image) != [h, w, arch.config.in_channels] {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: tape.shape(image).to_vec(),
            rhs: vec![h, w, arch.config.in_channels],
        });
    }

    let mut x = cross_scale_embed(tape, binding, &arch.embed, image)?;
    for stage in &arch.stages {
        for block in &stage.blocks {
            x = mixer_layer(tape, binding, block, stage.plan.group, x, mode)?;
        }
        if !stage.merge.is_empty() {
            x = patch_merge(tape, binding, &stage.merge, x)?;
        }
    }

    // Classifier head: norm, global average over positions, linear to K.
    let norm = bound_norm(binding, &arch.final_norm);
    let x = tape.layer_norm(x, norm.0, norm.1, NORM_EPS)?;
    let shape = tape.shape(x).to_vec();
    let (sh, sw, c) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(x, vec![sh * sw, c])?;
    let pooled = tape.mean_rows(flat)?;
    affine(tape, binding.affine(&arch.head), pooled)
}

/// Four stride-4 convolutions (kernels 4/8/16/32) concatenated channel-wise.
pub fn cross_scale_embed(
    tape: &mut Tape,
    binding: &ParamBinding,
    convs: &[ConvPlan],
    image: TensorId,
) -> Result<TensorId> {
    let parts: Result<Vec<TensorId>> = convs
        .iter()
        .map(|conv| conv_forward(tape, binding, conv, image))
        .collect();
    tape.concat_last(&parts?)
}

/// Stride-2 kernels 2 and 4, each producing c channels, concatenated to 2c.
pub fn patch_merge(
    tape: &mut Tape,
    binding: &ParamBinding,
    convs: &[ConvPlan],
    x: TensorId,
) -> Result<TensorId> {
    let shape = tape.shape(x);
    if shape[0] % 2 != 0 || shape[1] % 2 != 0 {
        return Err(Error::InvalidArgument {
            op: "patch_merge",
            msg: format!("odd spatial dims {}x{}", shape[0], shape[1]),
        });
    }
    let parts: Result<Vec<TensorId>> = convs
        .iter()
        .map(|conv| conv_forward(tape, binding, conv, x))
        .collect();
    tape.concat_last(&parts?)
}

fn conv_forward(
    tape: &mut Tape,
    binding: &ParamBinding,
    conv: &ConvPlan,
    x: TensorId,
) -> Result<TensorId> {
    let y = tape.conv2d(x, binding.id(conv.weight), conv.stride, conv.pad)?;
    tape.bias_add(y, binding.id(conv.bias))
}

/// Groups an [h,w,c] map into [N, L, c] token groups.
pub fn aggregate(tape: &mut Tape, x: TensorId, group: usize, mode: MixMode) -> Result<TensorId> {
    let spec = aggregate_spec(tape.shape(x), group, mode)?;
    tape.rearrange(x, &spec)
}

/// Exact inverse of [`aggregate`] back to [h,w,c].
pub fn disaggregate(
    tape: &mut Tape,
    x: TensorId,
    spatial: (usize, usize),
    group: usize,
    mode: MixMode,
) -> Result<TensorId> {
    let channels = *tape.shape(x).last().unwrap();
    let spec = aggregate_spec(&[spatial.0, spatial.1, channels], group, mode)?.inverse();
    tape.rearrange(x, &spec)
}

pub fn aggregate_spec(shape: &[usize], group: usize, mode: MixMode) -> Result<RearrangeSpec> {
    if shape.len() != 3 {
        return Err(Error::InvalidArgument {
            op: "aggregate",
            msg: format!("expected [h,w,c], got {shape:?}"),
        });
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    match mode {
        MixMode::Local => RearrangeSpec::local_aggregate(h, w, c, group),
        MixMode::Global => RearrangeSpec::global_aggregate(h, w, c, group),
    }
}

fn affine(tape: &mut Tape, bound: BoundAffine, x: TensorId) -> Result<TensorId> {
    let y = tape.matmul(x, bound.weight)?;
    tape.bias_add(y, bound.bias)
}

fn bound_norm(binding: &ParamBinding, plan: &NormPlan) -> (TensorId, TensorId) {
    (binding.id(plan.gain), binding.id(plan.bias))
}

/// Binds one layer's operator weights into a [`CsMixerParams`] view.
pub fn bind_mixer(binding: &ParamBinding, plan: &MixerPlan) -> CsMixerParams {
    CsMixerParams {
        u_proj: binding.affine(&plan.u_proj),
        heads: plan
            .heads
            .iter()
            .map(|h| CsMixerHead {
                v_proj: binding.affine(&h.v_proj),
                spatial: binding.affine(&h.spatial),
                v_back: binding.affine(&h.v_back),
            })
            .collect(),
        out_proj: binding.affine(&plan.out_proj),
        seq_len: plan.seq_len,
        rank: plan.rank,
        channels: plan.channels,
    }
}

/// The low-rank spatial-channel mixing operator on grouped tokens.
///
/// Input is [N, L, c] (or [L, c], treated as N=1). Per head: project tokens
/// to rank d, mix the flattened (L*d) group subspace with a dense affine,
/// project back to channels, and sum heads. The summed result gates the
/// direct projection elementwise before the output projection.
pub fn cs_mixer_op(tape: &mut Tape, x: TensorId, params: &CsMixerParams) -> Result<TensorId> {
    let shape = tape.shape(x).to_vec();
    let (groups, seq_len, channels) = match shape.len() {
        2 => (1, shape[0], shape[1]),
        3 => (shape[0], shape[1], shape[2]),
        _ => {
            return Err(Error::InvalidArgument {
                op: "cs_mixer_op",
                msg: format!("expected [N,L,c] or [L,c], got {shape:?}"),
            })
        }
    };
    if seq_len != params.seq_len || channels != params.channels {
        return Err(Error::ShapeMismatch {
            op: "cs_mixer_op",
            lhs: shape,
            rhs: vec![params.seq_len, params.channels],
        });
    }
    let rank = params.rank;

    let gate = affine(tape, params.u_proj, x)?;

    let mut mixed: Option<TensorId> = None;
    for head in &params.heads {
        let v = affine(tape, head.v_proj, x)?; // [N, L, d]
        let v_flat = tape.reshape(v, vec![groups, seq_len * rank])?;
        let v_mixed = affine(tape, head.spatial, v_flat)?; // dense (L*d) map
        let v_grouped = tape.reshape(v_mixed, vec![groups, seq_len, rank])?;
        let back = affine(tape, head.v_back, v_grouped)?; // [N, L, c]
        mixed = Some(match mixed {
            None => back,
            Some(acc) => tape.add(acc, back)?,
        });
    }
    let mixed = mixed.ok_or(Error::InvalidArgument {
        op: "cs_mixer_op",
        msg: "operator needs at least one head".into(),
    })?;

    let gated = tape.mul(gate, mixed)?;
    let out = affine(tape, params.out_proj, gated)?;
    // Restore the caller's rank-2 shape for single groups.
    if shape.len() == 2 {
        tape.reshape(out, vec![seq_len, channels])
    } else {
        Ok(out)
    }
}

/// Per-position MLP: affine c -> 4c, GELU, affine 4c -> c.
pub fn channel_mlp(
    tape: &mut Tape,
    fc1: BoundAffine,
    fc2: BoundAffine,
    x: TensorId,
) -> Result<TensorId> {
    let hidden = affine(tape, fc1, x)?;
    let activated = tape.gelu(hidden);
    affine(tape, fc2, activated)
}

/// One backbone layer: pre-norm token mixer and pre-norm channel MLP, each
/// wrapped in a residual connection with stochastic depth.
pub fn mixer_layer(
    tape: &mut Tape,
    binding: &ParamBinding,
    block: &BlockPlan,
    group: usize,
    x: TensorId,
    mode: &mut ForwardMode,
) -> Result<TensorId> {
    let spatial = {
        let s = tape.shape(x);
        (s[0], s[1])
    };

    let norm1 = bound_norm(binding, &block.norm1);
    let mixer_params = bind_mixer(binding, &block.mixer);
    let x = residual(tape, x, block.drop_prob, mode, |tape, input| {
        let normed = tape.layer_norm(input, norm1.0, norm1.1, NORM_EPS)?;
        let grouped = aggregate(tape, normed, group, block.mode)?;
        let mixed = cs_mixer_op(tape, grouped, &mixer_params)?;
        disaggregate(tape, mixed, spatial, group, block.mode)
    })?;

    let norm2 = bound_norm(binding, &block.norm2);
    let fc1 = binding.affine(&block.mlp_fc1);
    let fc2 = binding.affine(&block.mlp_fc2);
    residual(tape, x, block.drop_prob, mode, |tape, input| {
        let normed = tape.layer_norm(input, norm2.0, norm2.1, NORM_EPS)?;
        channel_mlp(tape, fc1, fc2, normed)
    })
}

/// x + branch(x), with the branch dropped with probability `drop_prob` in
/// training and scaled by its survival probability in evaluation.
fn residual(
    tape: &mut Tape,
    x: TensorId,
    drop_prob: f64,
    mode: &mut ForwardMode,
    branch: impl FnOnce(&mut Tape, TensorId) -> Result<TensorId>,
) -> Result<TensorId> {
    if drop_prob > 0.0 {
        match mode {
            ForwardMode::Train { rng } => {
                if rng.gen::<f64>() < drop_prob {
                    return Ok(x);
                }
                let out = branch(tape, x)?;
                return tape.add(x, out);
            }
            ForwardMode::Eval => {
                let out = branch(tape, x)?;
                let scaled = tape.scale(out, 1.0 - drop_prob);
                return tape.add(x, scaled);
            }
        }
    }
    let out = branch(tape, x)?;
    tape.add(x, out)
}
