//! ArtNet, PhotoNet and vanilla auto-encoder graphs.
//!
//! The decoder mirrors the encoder: the 512-channel bottleneck (stage 5, or the
//! fused feature-aggregation map) goes through four stages of
//! `upsample ×2 → 3×3 conv → ReLU`, producing the channel plan (512, 256, 128, 64),
//! and a final linear 3×3 conv that predicts the ImageNet-normalized image, which a
//! fixed inverse normalization maps back to RGB. With normalized skip connections, the
//! output of decoder stage `k` is concatenated with the instance-normalized
//! encoder stage `5 − k` and fused by another 3×3 conv + ReLU.
//!
//! Transfer modules sit at the bottleneck, at the end of decoder stages and on
//! the skip features. Style statistics for decoder stage `k` come from encoder
//! stage `5 − k` of the style image.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{check_size, Encoder, StageFeatures, STAGE_CHANNELS};
use crate::error::{Error, Result};
use crate::image::{denormalize, denormalize_backward, normalize, pad_to_multiple, Image};
use crate::nn::{
    adaptive_avg_pool, concat_channels, relu_backward_inplace, relu_inplace, take_channels, upsample2,
    upsample2_backward, Conv2d,
};
use crate::tensor::{FeatureMap, Real, Tensor};
use crate::transfer::{
    adain, blend, channel_stats, cov_eigensystem, instance_norm, wct, ChannelStats, CovEigensystem, EPS, EPS_RANK,
};

/// Total input channels of the aggregation layer (64 + 128 + 256 + 512 + 512).
pub const FA_CHANNELS: usize = 1472;
/// Spatial granularity of the network (four 2× poolings).
pub const SIZE_MULTIPLE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    VanillaAe,
    ArtNet,
    PhotoNet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mst {
    None,
    Mst3,
    Mst5,
    MstInf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferKind {
    None,
    Adain,
    Wct,
}

/// Where a transfer module is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Placement {
    Bottleneck,
    /// Output of decoder stage 1..=4.
    DecoderStage(u8),
    /// Normalized skip from encoder stage 1..=4.
    Skip(u8),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub kind: ArchKind,
    pub use_fa: bool,
    pub use_ns: bool,
    pub mst: Mst,
    pub transfer_kind: TransferKind,
    /// Output channels of decoder stages 1..=4.
    pub decoder_channel_plan: Vec<usize>,
}

/// Mirror of the encoder: decoder stage k outputs the channels of encoder stage 5 − k.
pub const DEFAULT_PLAN: [usize; 4] = [512, 256, 128, 64];

impl ArchitectureSpec {
    pub fn vanilla() -> Self {
        Self {
            kind: ArchKind::VanillaAe,
            use_fa: false,
            use_ns: false,
            mst: Mst::None,
            transfer_kind: TransferKind::Wct,
            decoder_channel_plan: DEFAULT_PLAN.to_vec(),
        }
    }

    /// Feature aggregation plus transfers at the bottleneck and the first two decoder stages.
    pub fn artnet() -> Self {
        Self {
            kind: ArchKind::ArtNet,
            use_fa: true,
            use_ns: false,
            mst: Mst::Mst3,
            transfer_kind: TransferKind::Wct,
            decoder_channel_plan: DEFAULT_PLAN.to_vec(),
        }
    }

    /// ArtNet plus normalized skip connections, with transfers everywhere.
    pub fn photonet() -> Self {
        Self {
            kind: ArchKind::PhotoNet,
            use_fa: true,
            use_ns: true,
            mst: Mst::MstInf,
            transfer_kind: TransferKind::Wct,
            decoder_channel_plan: DEFAULT_PLAN.to_vec(),
        }
    }

    pub fn for_kind(kind: ArchKind) -> Self {
        match kind {
            ArchKind::VanillaAe => Self::vanilla(),
            ArchKind::ArtNet => Self::artnet(),
            ArchKind::PhotoNet => Self::photonet(),
        }
    }

    pub fn with_transfer(mut self, kind: TransferKind) -> Self {
        self.transfer_kind = kind;
        self
    }

    pub fn with_mst(mut self, mst: Mst) -> Self {
        self.mst = mst;
        self
    }

    pub fn with_plan(mut self, plan: Vec<usize>) -> Self {
        self.decoder_channel_plan = plan;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidSpec(msg.to_string()));
        if self.mst == Mst::MstInf && !self.use_ns {
            return fail("MSTInf requires use_ns = true");
        }
        match self.kind {
            ArchKind::ArtNet if self.use_ns => return fail("ArtNet requires use_ns = false"),
            ArchKind::PhotoNet if !self.use_ns => return fail("PhotoNet requires use_ns = true"),
            ArchKind::VanillaAe if self.use_fa || self.use_ns => {
                return fail("VanillaAE requires use_fa = false and use_ns = false")
            }
            _ => {}
        }
        if self.decoder_channel_plan.len() != 4 || self.decoder_channel_plan.contains(&0) {
            return fail("decoder_channel_plan needs four positive channel counts");
        }
        for p in self.placements() {
            if let Placement::DecoderStage(k) = p {
                let want = STAGE_CHANNELS[4 - k as usize];
                if self.decoder_channel_plan[k as usize - 1] != want {
                    return Err(Error::InvalidSpec(format!(
                        "transfer at decoder stage {k} needs {want} channels to match encoder stage {}",
                        5 - k
                    )));
                }
            }
        }
        Ok(())
    }

    /// Transfer placement set in application order.
    pub fn placements(&self) -> Vec<Placement> {
        if self.transfer_kind == TransferKind::None {
            return Vec::new();
        }
        let decoder = |n: u8| (1..=n).map(Placement::DecoderStage);
        let mut out = vec![Placement::Bottleneck];
        match self.mst {
            Mst::None => {}
            Mst::Mst3 => out.extend(decoder(2)),
            Mst::Mst5 => out.extend(decoder(4)),
            Mst::MstInf => {
                // forward order: skip into stage k is fused before stage k's own transfer
                for k in 1..=4u8 {
                    out.push(Placement::Skip(5 - k));
                    out.push(Placement::DecoderStage(k));
                }
            }
        }
        out
    }

    /// Equality of everything that determines the parameter set.
    pub fn same_parameters(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.use_fa == other.use_fa
            && self.use_ns == other.use_ns
            && self.decoder_channel_plan == other.decoder_channel_plan
    }

    pub fn label(&self) -> String {
        let base = match self.kind {
            ArchKind::VanillaAe => "VanillaAE",
            ArchKind::ArtNet => "ArtNet",
            ArchKind::PhotoNet => "PhotoNet",
        };
        let t = match self.transfer_kind {
            TransferKind::None => "none",
            TransferKind::Adain => "AdaIN",
            TransferKind::Wct => "WCT",
        };
        format!("{base}({t})")
    }
}

impl fmt::Display for ArchitectureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} fa={} ns={} mst={:?} plan={:?}",
            self.label(),
            self.use_fa,
            self.use_ns,
            self.mst,
            self.decoder_channel_plan
        )
    }
}

/// Trainable decoder-side layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T = f32> {
    pub fa: Option<Conv2d<T>>,
    pub stages: Vec<Conv2d<T>>,
    pub ns: Vec<Conv2d<T>>,
    pub out: Conv2d<T>,
}

impl<T: Real> Decoder<T> {
    /// Zero-initialized layers with the shapes `spec` implies.
    pub fn zeros(spec: &ArchitectureSpec) -> Self {
        let plan = &spec.decoder_channel_plan;
        let fa = spec.use_fa.then(|| Conv2d::zeros(FA_CHANNELS, STAGE_CHANNELS[4], 1));
        let stages = (0..4)
            .map(|k| {
                let cin = if k == 0 { STAGE_CHANNELS[4] } else { plan[k - 1] };
                Conv2d::zeros(cin, plan[k], 3)
            })
            .collect();
        let ns = if spec.use_ns {
            (0..4)
                .map(|k| Conv2d::zeros(plan[k] + STAGE_CHANNELS[3 - k], plan[k], 3))
                .collect()
        } else {
            Vec::new()
        };
        Self {
            fa,
            stages,
            ns,
            out: Conv2d::zeros(plan[3], 3, 3),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            fa: self.fa.as_ref().map(Conv2d::zeros_like),
            stages: self.stages.iter().map(Conv2d::zeros_like).collect(),
            ns: self.ns.iter().map(Conv2d::zeros_like).collect(),
            out: self.out.zeros_like(),
        }
    }

    pub fn cast<U: Real>(&self) -> Decoder<U> {
        Decoder {
            fa: self.fa.as_ref().map(Conv2d::cast),
            stages: self.stages.iter().map(Conv2d::cast).collect(),
            ns: self.ns.iter().map(Conv2d::cast).collect(),
            out: self.out.cast(),
        }
    }

    fn layers(&self) -> Vec<(String, &Conv2d<T>)> {
        let mut v = Vec::new();
        if let Some(fa) = &self.fa {
            v.push(("fa".to_string(), fa));
        }
        for (k, c) in self.stages.iter().enumerate() {
            v.push((format!("dec{}", k + 1), c));
        }
        for (k, c) in self.ns.iter().enumerate() {
            v.push((format!("ns{}", k + 1), c));
        }
        v.push(("out".to_string(), &self.out));
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut Conv2d<T>> {
        let mut v = Vec::new();
        if let Some(fa) = &mut self.fa {
            v.push(fa);
        }
        v.extend(self.stages.iter_mut());
        v.extend(self.ns.iter_mut());
        v.push(&mut self.out);
        v
    }

    /// `(name, shape, values)` for every trainable tensor, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, Vec<usize>, &[T])> {
        self.layers()
            .into_iter()
            .flat_map(|(name, c)| {
                [
                    (format!("{name}.weight"), c.weight_shape().to_vec(), c.weight.as_slice()),
                    (format!("{name}.bias"), vec![c.out_channels], c.bias.as_slice()),
                ]
            })
            .collect()
    }

    /// Mutable parameter buffers in the same order as [`Decoder::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.layers_mut()
            .into_iter()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_params().iter().all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    /// Pool stages 1..4 to the stage-5 size and concatenate with stage 5.
    fn fa_input(stages: &[Tensor<T>]) -> Tensor<T> {
        let s5 = &stages[4];
        let pooled: Vec<Tensor<T>> = stages[..4]
            .iter()
            .map(|s| adaptive_avg_pool(s, s5.height(), s5.width()))
            .collect();
        let mut parts: Vec<&Tensor<T>> = pooled.iter().collect();
        parts.push(s5);
        concat_channels(&parts)
    }

    fn bottleneck(&self, stages: &[Tensor<T>], trace: Option<&mut DecoderTrace<T>>) -> Tensor<T> {
        match &self.fa {
            Some(fa) => {
                let cat = Self::fa_input(stages);
                let mut h = fa.forward(&cat);
                relu_inplace(&mut h);
                if let Some(t) = trace {
                    t.fa_in = Some(cat);
                    t.fa_out = Some(h.clone());
                }
                h
            }
            None => stages[4].clone(),
        }
    }

    /// Decode five encoder stages (H and W multiples of 16). `hook` is invoked at
    /// every placement point with the feature about to flow on; it returns the
    /// (possibly transferred) replacement.
    pub fn forward(
        &self,
        stages: &[Tensor<T>],
        hook: &mut dyn FnMut(Placement, Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let mut h = hook(Placement::Bottleneck, self.bottleneck(stages, None))?;
        for k in 0..4 {
            let mut a = self.stages[k].forward(&upsample2(&h));
            relu_inplace(&mut a);
            if let Some(ns) = self.ns.get(k) {
                let skip_stage = 4 - k; // 1-based encoder stage 5 - (k + 1)
                let skip = instance_norm(&stages[skip_stage - 1], EPS);
                let skip = hook(Placement::Skip(skip_stage as u8), skip)?;
                a = ns.forward(&concat_channels(&[&a, &skip]));
                relu_inplace(&mut a);
            }
            h = hook(Placement::DecoderStage(k as u8 + 1), a)?;
        }
        Ok(denormalize(&self.out.forward(&h)))
    }

    /// Transfer-free forward pass keeping everything the backward pass needs.
    pub fn forward_traced(&self, stages: &[Tensor<T>]) -> (Tensor<T>, DecoderTrace<T>) {
        let mut trace = DecoderTrace::default();
        let mut h = self.bottleneck(stages, Some(&mut trace));
        for k in 0..4 {
            let u = upsample2(&h);
            let mut a = self.stages[k].forward(&u);
            relu_inplace(&mut a);
            trace.stage_in.push(u);
            trace.stage_out.push(a.clone());
            if let Some(ns) = self.ns.get(k) {
                let skip = instance_norm(&stages[3 - k], EPS);
                let cat = concat_channels(&[&a, &skip]);
                a = ns.forward(&cat);
                relu_inplace(&mut a);
                trace.ns_in.push(cat);
                trace.ns_out.push(a.clone());
            }
            h = a;
        }
        let y = denormalize(&self.out.forward(&h));
        trace.out_in = Some(h);
        (y, trace)
    }

    /// Parameter gradients for an upstream gradient on the decoder output.
    pub fn backward(&self, trace: &DecoderTrace<T>, grad_out: &Tensor<T>) -> Decoder<T> {
        let mut grads = self.zeros_like();
        let out_in = trace.out_in.as_ref().expect("traced forward");
        let mut g = self
            .out
            .backward(out_in, &denormalize_backward(grad_out), Some(&mut grads.out), true)
            .expect("input gradient");
        for k in (0..4).rev() {
            if let Some(ns) = self.ns.get(k) {
                relu_backward_inplace(&mut g, &trace.ns_out[k]);
                let gcat = ns
                    .backward(&trace.ns_in[k], &g, Some(&mut grads.ns[k]), true)
                    .expect("input gradient");
                g = take_channels(&gcat, self.stages[k].out_channels);
            }
            relu_backward_inplace(&mut g, &trace.stage_out[k]);
            let need_input = k > 0 || self.fa.is_some();
            match self.stages[k].backward(&trace.stage_in[k], &g, Some(&mut grads.stages[k]), need_input) {
                Some(gu) => g = upsample2_backward(&gu),
                None => return grads,
            }
        }
        if let (Some(fa), Some(gfa)) = (&self.fa, grads.fa.as_mut()) {
            relu_backward_inplace(&mut g, trace.fa_out.as_ref().expect("fa traced"));
            fa.backward(trace.fa_in.as_ref().expect("fa traced"), &g, Some(gfa), false);
        }
        grads
    }
}

/// Intermediate activations of a transfer-free decoder pass.
#[derive(Clone, Debug)]
pub struct DecoderTrace<T> {
    fa_in: Option<Tensor<T>>,
    fa_out: Option<Tensor<T>>,
    stage_in: Vec<Tensor<T>>,
    stage_out: Vec<Tensor<T>>,
    ns_in: Vec<Tensor<T>>,
    ns_out: Vec<Tensor<T>>,
    out_in: Option<Tensor<T>>,
}

impl<T> Default for DecoderTrace<T> {
    fn default() -> Self {
        Self {
            fa_in: None,
            fa_out: None,
            stage_in: Vec::new(),
            stage_out: Vec::new(),
            ns_in: Vec::new(),
            ns_out: Vec::new(),
            out_in: None,
        }
    }
}

/// Style-side statistics consumed by one transfer module.
#[derive(Clone, Debug)]
pub struct StyleTarget {
    pub stats: ChannelStats,
    pub eigensystem: Option<CovEigensystem>,
}

/// Per-placement style statistics precomputed from the style image.
#[derive(Clone, Debug, Default)]
pub struct TransferContext {
    pub targets: BTreeMap<Placement, StyleTarget>,
}

/// Instrumentation counters for one stylization call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PassCounts {
    pub encoder_passes: usize,
    pub decoder_passes: usize,
    pub transfer_applications: usize,
}

/// Encoder reference plus trainable decoder for one architecture.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ArchitectureSpec,
    encoder: Arc<Encoder>,
    pub decoder: Decoder<f32>,
    trained: bool,
    allow_untrained: bool,
}

impl Model {
    /// Fresh model with Kaiming-uniform (fan-in) kernels and zero biases.
    pub fn build(spec: ArchitectureSpec, encoder: Arc<Encoder>, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut decoder = Decoder::zeros(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in decoder.layers_mut() {
            let fan_in = (conv.in_channels * conv.kernel * conv.kernel) as f32;
            let bound = (6.0 / fan_in).sqrt();
            conv.weight.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
        }
        Ok(Self {
            spec,
            encoder,
            decoder,
            trained: false,
            allow_untrained: false,
        })
    }

    /// Model around already-trained decoder parameters.
    pub fn from_parts(spec: ArchitectureSpec, encoder: Arc<Encoder>, decoder: Decoder<f32>) -> Result<Self> {
        spec.validate()?;
        let expected = Decoder::<f32>::zeros(&spec);
        let shapes = |d: &Decoder<f32>| {
            d.named_params()
                .into_iter()
                .map(|(n, s, _)| (n, s))
                .collect::<Vec<_>>()
        };
        if shapes(&expected) != shapes(&decoder) {
            return Err(Error::InvalidSpec(format!("decoder parameters do not match {spec}")));
        }
        Ok(Self {
            spec,
            encoder,
            decoder,
            trained: true,
            allow_untrained: false,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn encoder(&self) -> &Arc<Encoder> {
        &self.encoder
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    /// Permit stylization with untrained decoder weights.
    pub fn allow_untrained(mut self) -> Self {
        self.allow_untrained = true;
        self
    }

    /// Swap the transfer configuration (parameter-free) while keeping the weights.
    pub fn with_transfer(mut self, transfer_kind: TransferKind, mst: Mst) -> Result<Self> {
        let spec = self.spec.clone().with_transfer(transfer_kind).with_mst(mst);
        spec.validate()?;
        self.spec = spec;
        Ok(self)
    }

    /// Fuse the five encoder stages into the 512-channel bottleneck map.
    pub fn aggregate_features(&self, stages: &StageFeatures<f32>) -> Result<FeatureMap> {
        let fa = self.decoder.fa.as_ref().ok_or(Error::FaSpecMismatch)?;
        let parts: Vec<FeatureMap> = stages.iter().cloned().collect();
        if parts.len() != 5 {
            return Err(Error::InvalidArgument("feature aggregation needs all five stages".into()));
        }
        let mut h = fa.forward(&Decoder::fa_input(&parts));
        relu_inplace(&mut h);
        Ok(h)
    }

    fn encode_padded(&self, image: &Image) -> Result<(Vec<FeatureMap>, usize, usize)> {
        check_size(image.height(), image.width())?;
        let x = normalize(&pad_to_multiple(&image.to_planar::<f32>(), SIZE_MULTIPLE));
        Ok((self.encoder.forward(&x, 5), image.height(), image.width()))
    }

    /// Style statistics for every placement of the current spec.
    pub fn transfer_context(&self, style: &Image) -> Result<TransferContext> {
        let (stages, _, _) = self.encode_padded(style)?;
        self.context_from_stages(&stages)
    }

    fn context_from_stages(&self, stages: &[FeatureMap]) -> Result<TransferContext> {
        let mut ctx = TransferContext::default();
        let wants_eig = self.spec.transfer_kind == TransferKind::Wct;
        for p in self.spec.placements() {
            let feature = match p {
                Placement::Bottleneck => self.decoder.bottleneck(stages, None),
                Placement::DecoderStage(k) => stages[4 - k as usize].clone(),
                Placement::Skip(i) => instance_norm(&stages[i as usize - 1], EPS),
            };
            ctx.targets.insert(
                p,
                StyleTarget {
                    stats: channel_stats(&feature),
                    eigensystem: wants_eig.then(|| cov_eigensystem(&feature, EPS_RANK)),
                },
            );
        }
        Ok(ctx)
    }

    fn apply_transfer(&self, target: &StyleTarget, feature: &FeatureMap) -> Result<FeatureMap> {
        match self.spec.transfer_kind {
            TransferKind::None => Ok(feature.clone()),
            TransferKind::Adain => adain(feature, &target.stats, EPS),
            TransferKind::Wct => wct(
                feature,
                target.eigensystem.as_ref().expect("WCT context carries eigensystems"),
                EPS_RANK,
            ),
        }
    }

    /// One decoder pass over already-encoded content; crops and clamps the result.
    fn decode(
        &self,
        stages: &[FeatureMap],
        height: usize,
        width: usize,
        ctx: Option<&TransferContext>,
        beta: f32,
        counts: &mut PassCounts,
        bottleneck_probe: Option<&mut Option<FeatureMap>>,
    ) -> Result<Image> {
        let mut probe = bottleneck_probe;
        let mut hook = |p: Placement, f: FeatureMap| -> Result<FeatureMap> {
            let out = match ctx.and_then(|c| c.targets.get(&p)) {
                Some(target) => {
                    counts.transfer_applications += 1;
                    let t = self.apply_transfer(target, &f)?;
                    blend(&t, &f, beta)?
                }
                None => f,
            };
            if p == Placement::Bottleneck {
                if let Some(slot) = probe.as_deref_mut() {
                    *slot = Some(out.clone());
                }
            }
            Ok(out)
        };
        let y = self.decoder.forward(stages, &mut hook)?;
        counts.decoder_passes += 1;
        Ok(Image::from_planar(&y.crop(height, width)).clamped())
    }

    /// Single-pass stylization.
    pub fn stylize(&self, content: &Image, style: &Image, beta: f32) -> Result<Image> {
        Ok(self.stylize_counted(content, style, beta)?.0)
    }

    /// [`Model::stylize`] with pass/transfer instrumentation.
    pub fn stylize_counted(&self, content: &Image, style: &Image, beta: f32) -> Result<(Image, PassCounts)> {
        self.stylize_inner(content, style, beta, None)
    }

    /// The bottleneck feature after its transfer + blend, for inspecting β-linearity.
    pub fn stylized_bottleneck(&self, content: &Image, style: &Image, beta: f32) -> Result<FeatureMap> {
        let mut slot = None;
        self.stylize_inner(content, style, beta, Some(&mut slot))?;
        slot.ok_or_else(|| Error::InvalidArgument("no bottleneck transfer in this spec".into()))
    }

    fn stylize_inner(
        &self,
        content: &Image,
        style: &Image,
        beta: f32,
        probe: Option<&mut Option<FeatureMap>>,
    ) -> Result<(Image, PassCounts)> {
        if !self.trained && !self.allow_untrained {
            return Err(Error::UntrainedModel);
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::InvalidArgument(format!("beta must be in [0,1], got {beta}")));
        }
        let mut counts = PassCounts::default();
        let (content_stages, h, w) = self.encode_padded(content)?;
        counts.encoder_passes += 1;
        let (style_stages, _, _) = self.encode_padded(style)?;
        counts.encoder_passes += 1;
        let ctx = self.context_from_stages(&style_stages)?;
        let img = self.decode(&content_stages, h, w, Some(&ctx), beta, &mut counts, probe)?;
        Ok((img, counts))
    }

    /// Transfer-free forward pass (the graph training optimizes), clamped to [0, 1].
    pub fn reconstruct(&self, image: &Image) -> Result<Image> {
        let (stages, h, w) = self.encode_padded(image)?;
        self.decode(&stages, h, w, None, 1.0, &mut PassCounts::default(), None)
    }

    /// Multi-round baseline: style statistics computed once, then `rounds`
    /// consecutive encode → transfer → decode passes, each feeding the next.
    pub fn stylize_rounds(&self, content: &Image, style: &Image, beta: f32, rounds: usize) -> Result<(Image, PassCounts)> {
        if !self.trained && !self.allow_untrained {
            return Err(Error::UntrainedModel);
        }
        let mut counts = PassCounts::default();
        let (style_stages, _, _) = self.encode_padded(style)?;
        counts.encoder_passes += 1;
        let ctx = self.context_from_stages(&style_stages)?;
        let mut current = content.clone();
        for _ in 0..rounds {
            let (stages, h, w) = self.encode_padded(&current)?;
            counts.encoder_passes += 1;
            current = self.decode(&stages, h, w, Some(&ctx), beta, &mut counts, None)?;
        }
        Ok((current, counts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::WeightArchive;
    use std::sync::OnceLock;

    fn encoder() -> Arc<Encoder> {
        static ENC: OnceLock<Arc<Encoder>> = OnceLock::new();
        ENC.get_or_init(|| Arc::new(Encoder::from_archive(&WeightArchive::synthetic_vgg19(11)).unwrap()))
            .clone()
    }

    fn test_image(h: usize, w: usize, phase: f32) -> Image {
        Image::from_fn(h, w, |y, x| {
            let (yf, xf) = (y as f32, x as f32);
            [
                0.5 + 0.4 * (0.3 * xf + phase).sin(),
                0.5 + 0.4 * (0.2 * yf - phase).cos(),
                ((xf + yf) / (h + w) as f32).fract(),
            ]
        })
    }

    #[test]
    fn spec_invariants_are_enforced() {
        assert!(ArchitectureSpec::artnet().validate().is_ok());
        assert!(ArchitectureSpec::photonet().validate().is_ok());
        let mut bad = ArchitectureSpec::artnet();
        bad.use_ns = true;
        assert!(matches!(bad.validate(), Err(Error::InvalidSpec(_))));
        let mut bad = ArchitectureSpec::photonet();
        bad.use_ns = false;
        assert!(matches!(bad.validate(), Err(Error::InvalidSpec(m)) if m.contains("MSTInf")));
        let mut bad = ArchitectureSpec::vanilla();
        bad.use_fa = true;
        assert!(bad.validate().is_err());
        let bad = ArchitectureSpec::artnet().with_plan(vec![8, 8, 8, 8]);
        assert!(bad.validate().is_err());
        assert!(ArchitectureSpec::artnet()
            .with_plan(vec![8, 8, 8, 8])
            .with_mst(Mst::None)
            .validate()
            .is_ok());
    }

    #[test]
    fn placement_sets() {
        let count = |mst| ArchitectureSpec::photonet().with_mst(mst).placements().len();
        assert_eq!(count(Mst::None), 1);
        assert_eq!(count(Mst::Mst3), 3);
        assert_eq!(count(Mst::Mst5), 5);
        assert_eq!(count(Mst::MstInf), 9);
        assert!(ArchitectureSpec::artnet()
            .with_transfer(TransferKind::None)
            .placements()
            .is_empty());
        assert_eq!(
            ArchitectureSpec::artnet().placements(),
            vec![Placement::Bottleneck, Placement::DecoderStage(1), Placement::DecoderStage(2)]
        );
    }

    #[test]
    fn build_shapes() {
        let art = Model::build(ArchitectureSpec::artnet(), encoder(), 0).unwrap();
        let fa = art.decoder.fa.as_ref().unwrap();
        assert_eq!((fa.in_channels, fa.out_channels), (FA_CHANNELS, 512));
        let photo = Model::build(ArchitectureSpec::photonet(), encoder(), 0).unwrap();
        let ins: Vec<_> = photo.decoder.ns.iter().map(|c| (c.in_channels, c.out_channels)).collect();
        assert_eq!(ins, vec![(1024, 512), (512, 256), (256, 128), (128, 64)]);
        let mut bad = ArchitectureSpec::artnet();
        bad.use_ns = true;
        assert!(matches!(Model::build(bad, encoder(), 0), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn parameter_names_depend_only_on_spec() {
        let a = Model::build(ArchitectureSpec::photonet(), encoder(), 1).unwrap();
        let b = Model::build(ArchitectureSpec::photonet(), encoder(), 2).unwrap();
        let names = |m: &Model| {
            m.decoder
                .named_params()
                .into_iter()
                .map(|(n, s, _)| (n, s))
                .collect::<Vec<_>>()
        };
        assert_eq!(names(&a), names(&b));
        assert_ne!(a.decoder, b.decoder);
        assert!(a.decoder.is_finite());
        assert!(a.decoder.named_params().iter().any(|(n, _, _)| n == "ns4.weight"));
    }

    #[test]
    fn aggregation_shapes_and_constant_inputs() {
        let model = Model::build(ArchitectureSpec::artnet(), encoder(), 3).unwrap();
        let stages = model.encoder().encode(&test_image(64, 64, 0.0), 5).unwrap();
        assert_eq!(model.aggregate_features(&stages).unwrap().shape(), [512, 4, 4]);

        let zeros = StageFeatures::new(
            STAGE_CHANNELS
                .iter()
                .enumerate()
                .map(|(i, &c)| Tensor::zeros(c, 16 >> i, 16 >> i))
                .collect(),
        );
        let mut model = model;
        let bias: Vec<f32> = (0..512).map(|i| (i as f32 - 256.0) / 100.0).collect();
        model.decoder.fa.as_mut().unwrap().bias = bias.clone();
        let fused = model.aggregate_features(&zeros).unwrap();
        for c in 0..512 {
            assert!(fused.channel(c).iter().all(|&v| v == bias[c].max(0.0)));
        }

        let vanilla = Model::build(ArchitectureSpec::vanilla(), encoder(), 3).unwrap();
        assert!(matches!(vanilla.aggregate_features(&stages), Err(Error::FaSpecMismatch)));
    }

    #[test]
    fn output_size_matches_input() {
        let model = Model::build(ArchitectureSpec::photonet(), encoder(), 4).unwrap();
        let out = model.reconstruct(&test_image(32, 48, 0.3)).unwrap();
        assert_eq!((out.height(), out.width()), (32, 48));
        // non-multiples are padded internally and cropped back
        let out = model.reconstruct(&test_image(20, 37, 0.3)).unwrap();
        assert_eq!((out.height(), out.width()), (20, 37));
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn untrained_models_need_an_override() {
        let model = Model::build(ArchitectureSpec::artnet(), encoder(), 5).unwrap();
        let img = test_image(32, 32, 0.0);
        assert!(matches!(model.stylize(&img, &img, 1.0), Err(Error::UntrainedModel)));
        assert!(model.allow_untrained().stylize(&img, &img, 1.0).is_ok());
    }

    #[test]
    fn beta_zero_is_bitwise_reconstruction() {
        for spec in [ArchitectureSpec::artnet(), ArchitectureSpec::photonet().with_transfer(TransferKind::Adain)] {
            let model = Model::build(spec, encoder(), 6).unwrap().allow_untrained();
            let content = test_image(32, 32, 0.0);
            let style = test_image(48, 32, 1.7);
            let a = model.stylize(&content, &style, 0.0).unwrap();
            let b = model.reconstruct(&content).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn transfer_and_pass_counts() {
        let content = test_image(32, 32, 0.0);
        let style = test_image(32, 32, 2.0);
        for (mst, expected) in [(Mst::Mst3, 3), (Mst::Mst5, 5), (Mst::MstInf, 9)] {
            let spec = ArchitectureSpec::photonet().with_mst(mst).with_transfer(TransferKind::Adain);
            let model = Model::build(spec, encoder(), 7).unwrap().allow_untrained();
            let (_, counts) = model.stylize_counted(&content, &style, 1.0).unwrap();
            assert_eq!(
                counts,
                PassCounts {
                    encoder_passes: 2,
                    decoder_passes: 1,
                    transfer_applications: expected
                }
            );
        }
        let vanilla = Model::build(ArchitectureSpec::vanilla(), encoder(), 7).unwrap().allow_untrained();
        let (_, counts) = vanilla.stylize_rounds(&content, &style, 1.0, 5).unwrap();
        assert_eq!(counts.encoder_passes, 6);
        assert_eq!(counts.decoder_passes, 5);
        assert_eq!(counts.transfer_applications, 5);
    }

    #[test]
    fn bottleneck_feature_is_linear_in_beta() {
        let model = Model::build(ArchitectureSpec::artnet(), encoder(), 8).unwrap().allow_untrained();
        let content = test_image(32, 32, 0.0);
        let style = test_image(32, 32, 2.5);
        let f0 = model.stylized_bottleneck(&content, &style, 0.0).unwrap();
        let fh = model.stylized_bottleneck(&content, &style, 0.5).unwrap();
        let f1 = model.stylized_bottleneck(&content, &style, 1.0).unwrap();
        for ((a, b), m) in f0.data().iter().zip(f1.data()).zip(fh.data()) {
            assert!((0.5 * (a + b) - m).abs() <= 1e-5 * (1.0 + m.abs()));
        }
    }

    #[test]
    fn wct_with_style_equal_to_content_is_near_reconstruction() {
        // centered features lie in the span of their own covariance, so coloring
        // with the content's own statistics undoes the whitening
        let model = Model::build(ArchitectureSpec::vanilla(), encoder(), 9).unwrap().allow_untrained();
        let img = test_image(64, 64, 0.4);
        let styl = model.stylize(&img, &img, 1.0).unwrap();
        let rec = model.reconstruct(&img).unwrap();
        let mad: f32 = styl.data().iter().zip(rec.data()).map(|(a, b)| (a - b).abs()).sum::<f32>()
            / styl.data().len() as f32;
        assert!(mad < 2e-2, "mean abs diff {mad}");
    }
}
