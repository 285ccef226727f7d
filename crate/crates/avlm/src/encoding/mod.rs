//! Raw frames and audio segments to the projected multimodal prefix:
//! per-frame patch encoding, CLS-based temporal tokens, temporally pooled
//! spatial tokens, per-segment auditory tokens, then linear projection and
//! ordered assembly (temporal, spatial, audio).

use std::cell::Cell;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_block_params, transformer_block, Ctx};
use crate::numerics::param::ParamStore;
use crate::numerics::tape::Var;
use crate::numerics::{lit, Scalar, Tensor};

/// Which branches a sample carries, as written in its modality token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "VIS")]
    Vis,
    #[serde(rename = "AUD")]
    Aud,
    #[serde(rename = "AUD_VIS")]
    AudVis,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Vis, Modality::Aud, Modality::AudVis];

    pub fn token(self) -> &'static str {
        match self {
            Modality::Vis => "<VIS>",
            Modality::Aud => "<AUD>",
            Modality::AudVis => "<AUD_VIS>",
        }
    }

    pub fn needs_visual(self) -> bool {
        matches!(self, Modality::Vis | Modality::AudVis)
    }

    pub fn needs_audio(self) -> bool {
        matches!(self, Modality::Aud | Modality::AudVis)
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Vis => "VIS",
            Modality::Aud => "AUD",
            Modality::AudVis => "AUD_VIS",
        })
    }
}

/// T frames of H×W RGB pixels in [0,1]; an image is a 1-frame video.
#[derive(Clone, Debug)]
pub struct VideoFrames<S: Scalar = f32> {
    data: Tensor<S>,
}

impl<S: Scalar> VideoFrames<S> {
    pub fn new(data: Tensor<S>) -> Result<Self> {
        match data.shape() {
            [_, _, _, 3] => {}
            other => {
                return Err(Error::Shape {
                    op: "video_frames",
                    detail: format!("expected [T, H, W, 3], got {other:?}"),
                })
            }
        }
        if data.data().iter().any(|&v| v < S::zero() || v > S::one()) {
            return Err(Error::Shape {
                op: "video_frames",
                detail: "pixel values must lie in [0, 1]".into(),
            });
        }
        Ok(Self { data })
    }

    pub fn t(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn h(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn w(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn data(&self) -> &Tensor<S> {
        &self.data
    }

    pub fn cast<T: Scalar>(&self) -> VideoFrames<T> {
        VideoFrames { data: self.data.cast() }
    }
}

/// K equal-length waveform segments partitioning a clip.
#[derive(Clone, Debug)]
pub struct AudioSegments<S: Scalar = f32> {
    data: Tensor<S>,
    sample_rate: u32,
}

impl<S: Scalar> AudioSegments<S> {
    pub fn new(data: Tensor<S>, sample_rate: u32) -> Result<Self> {
        if data.rank() != 2 {
            return Err(Error::Shape {
                op: "audio_segments",
                detail: format!("expected [K, M], got {:?}", data.shape()),
            });
        }
        Ok(Self { data, sample_rate })
    }

    pub fn k(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn samples_per_segment(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn data(&self) -> &Tensor<S> {
        &self.data
    }

    pub fn cast<T: Scalar>(&self) -> AudioSegments<T> {
        AudioSegments { data: self.data.cast(), sample_rate: self.sample_rate }
    }
}

/// A sample's raw media plus its modality tag.
#[derive(Clone, Debug)]
pub struct MediaSample<S: Scalar = f32> {
    pub frames: Option<VideoFrames<S>>,
    pub audio: Option<AudioSegments<S>>,
    pub modality: Modality,
}

/// Splits each frame into non-overlapping P×P patches, flattened
/// channel-last, patches ordered row-major within the frame.
pub fn patchify<S: Scalar>(frames: &VideoFrames<S>, p: usize) -> Result<Tensor<S>> {
    let (t, h, w) = (frames.t(), frames.h(), frames.w());
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Shape {
            op: "patchify",
            detail: format!("frame dims H={h}, W={w} not divisible by patch size P={p}"),
        });
    }
    let (ph, pw) = (h / p, w / p);
    let n = ph * pw;
    let patch_len = p * p * 3;
    let src = frames.data().data();
    let mut out = Vec::with_capacity(t * n * patch_len);
    for ti in 0..t {
        for py in 0..ph {
            for px in 0..pw {
                for dy in 0..p {
                    for dx in 0..p {
                        let y = py * p + dy;
                        let x = px * p + dx;
                        let base = ((ti * h + y) * w + x) * 3;
                        out.extend_from_slice(&src[base..base + 3]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![t, n, patch_len], out)
}

/// Per-frame CLS states and patch states from the visual encoder.
pub struct FrameEmbeddings {
    /// [T × D]: row t is the frame-t CLS state.
    pub cls: Var,
    /// One [N × D] var per frame, in frame order.
    pub patches: Vec<Var>,
}

/// Reduced token sets feeding the projectors; components present per the
/// sample's modality tag.
pub struct ReducedTokens {
    pub temporal: Option<Var>,
    pub spatial: Option<Var>,
    pub audio: Option<Var>,
}

/// Contiguous, non-overlapping spans of the assembled prefix, always in
/// temporal / spatial / audio order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrefixLayout {
    pub temporal: Option<Range<usize>>,
    pub spatial: Option<Range<usize>>,
    pub audio: Option<Range<usize>>,
    pub len: usize,
}

/// The ordered projected token sequence fed to the LM.
pub struct MultimodalPrefix {
    pub tokens: Var,
    pub layout: PrefixLayout,
}

/// Geometry and widths of the toy encoders and projectors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch: usize,
    pub d_vis: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    /// Patches per frame; fixed at init so positional embeddings can be sized.
    pub n_patches: usize,
    pub d_t: usize,
    pub d_s: usize,
    pub d_a: usize,
    pub d_l: usize,
    pub audio_bins: usize,
}

/// Visual and audio encoders plus the three projectors. The encoders are
/// randomly initialized; whether anything trains is the schedule's call.
pub struct Encoders {
    pub cfg: EncoderConfig,
    visual_calls: Cell<u64>,
    audio_calls: Cell<u64>,
}

impl Encoders {
    pub fn new(cfg: EncoderConfig) -> Self {
        Self { cfg, visual_calls: Cell::new(0), audio_calls: Cell::new(0) }
    }

    pub fn visual_calls(&self) -> u64 {
        self.visual_calls.get()
    }

    pub fn audio_calls(&self) -> u64 {
        self.audio_calls.get()
    }

    /// Registers every encoder and projector parameter. Names fall under
    /// "encoder.visual.*", "encoder.audio.*", and "projector.*" so freeze
    /// schedules can select them by prefix.
    pub fn init_params<S: Scalar>(&self, store: &mut ParamStore<S>, rng: &mut impl rand::Rng) {
        let c = &self.cfg;
        let std = 0.02;
        let in_dim = c.patch * c.patch * 3;
        store.insert("encoder.visual.patch_embed.W", Tensor::randn(&[in_dim, c.d_vis], std, rng));
        store.insert("encoder.visual.patch_embed.b", Tensor::zeros(&[c.d_vis]));
        store.insert("encoder.visual.cls", Tensor::randn(&[1, c.d_vis], std, rng));
        store.insert("encoder.visual.pos", Tensor::randn(&[c.n_patches + 1, c.d_vis], std, rng));
        for l in 0..c.enc_layers {
            init_block_params(store, &format!("encoder.visual.block{l}"), c.d_vis, 4, std, rng);
        }
        store.insert("encoder.visual.ln_out.g", Tensor::full(&[c.d_vis], S::one()));
        store.insert("encoder.visual.ln_out.b", Tensor::zeros(&[c.d_vis]));

        store.insert("encoder.audio.fc1.W", Tensor::randn(&[c.audio_bins, c.d_a], std, rng));
        store.insert("encoder.audio.fc1.b", Tensor::zeros(&[c.d_a]));
        store.insert("encoder.audio.fc2.W", Tensor::randn(&[c.d_a, c.d_a], std, rng));
        store.insert("encoder.audio.fc2.b", Tensor::zeros(&[c.d_a]));

        store.insert("projector.visual_temporal.W", Tensor::randn(&[c.d_t, c.d_l], std, rng));
        store.insert("projector.visual_temporal.b", Tensor::zeros(&[c.d_l]));
        store.insert("projector.visual_spatial.W", Tensor::randn(&[c.d_s, c.d_l], std, rng));
        store.insert("projector.visual_spatial.b", Tensor::zeros(&[c.d_l]));
        store.insert("projector.audio.W", Tensor::randn(&[c.d_a, c.d_l], std, rng));
        store.insert("projector.audio.b", Tensor::zeros(&[c.d_l]));
    }

    /// Runs each frame independently through embed + CLS + transformer.
    /// No information crosses frames.
    pub fn encode_frames<S: Scalar>(
        &self,
        ctx: &mut Ctx<'_, S>,
        patches: &Tensor<S>,
    ) -> Result<FrameEmbeddings> {
        self.visual_calls.set(self.visual_calls.get() + 1);
        let c = &self.cfg;
        let (t, n, in_dim) = match patches.shape() {
            [t, n, d] => (*t, *n, *d),
            other => {
                return Err(Error::Shape {
                    op: "encode_frames",
                    detail: format!("expected [T, N, P*P*3], got {other:?}"),
                })
            }
        };
        if in_dim != c.patch * c.patch * 3 || n != c.n_patches {
            return Err(Error::Shape {
                op: "encode_frames",
                detail: format!(
                    "patch tensor {:?} does not match encoder config (N={}, P={})",
                    patches.shape(),
                    c.n_patches,
                    c.patch
                ),
            });
        }
        let mut cls_rows = Vec::with_capacity(t);
        let mut frame_patches = Vec::with_capacity(t);
        for ti in 0..t {
            let frame = Tensor::new(
                vec![n, in_dim],
                patches.data()[ti * n * in_dim..(ti + 1) * n * in_dim].to_vec(),
            )?;
            let x = ctx.tape.constant(frame);
            let embedded = ctx.linear(x, "encoder.visual.patch_embed")?;
            let cls = ctx.param("encoder.visual.cls")?;
            let with_cls = ctx.tape.concat_rows(&[cls, embedded])?;
            let pos = ctx.param("encoder.visual.pos")?;
            let mut h = ctx.tape.add(with_cls, pos)?;
            for l in 0..c.enc_layers {
                h = transformer_block(ctx, h, &format!("encoder.visual.block{l}"), c.enc_heads, false)?;
            }
            let h = ctx.layer_norm(h, "encoder.visual.ln_out")?;
            cls_rows.push(ctx.tape.slice_rows(h, 0, 1)?);
            frame_patches.push(ctx.tape.slice_rows(h, 1, n + 1)?);
        }
        let cls = ctx.tape.concat_rows(&cls_rows)?;
        Ok(FrameEmbeddings { cls, patches: frame_patches })
    }

    /// Temporal tokens: the per-frame CLS states, order preserved.
    pub fn temporal_tokens<S: Scalar>(&self, _ctx: &mut Ctx<'_, S>, emb: &FrameEmbeddings) -> Var {
        emb.cls
    }

    /// Spatial tokens: patch states pooled by arithmetic mean over time.
    pub fn spatial_tokens<S: Scalar>(&self, ctx: &mut Ctx<'_, S>, emb: &FrameEmbeddings) -> Result<Var> {
        ctx.tape.mean_tensors(&emb.patches)
    }

    /// One auditory token per segment: log-magnitude spectral features
    /// through a 2-layer MLP, order preserved.
    pub fn encode_audio<S: Scalar>(
        &self,
        ctx: &mut Ctx<'_, S>,
        segments: &AudioSegments<S>,
    ) -> Result<Var> {
        self.audio_calls.set(self.audio_calls.get() + 1);
        let feats = spectral_features(segments, self.cfg.audio_bins)?;
        let x = ctx.tape.constant(feats);
        let h = ctx.linear(x, "encoder.audio.fc1")?;
        let h = ctx.tape.gelu(h)?;
        ctx.linear(h, "encoder.audio.fc2")
    }

    /// Projects each present component to D_l and concatenates in
    /// temporal / spatial / audio order.
    pub fn assemble_prefix<S: Scalar>(
        &self,
        ctx: &mut Ctx<'_, S>,
        reduced: &ReducedTokens,
        modality: Modality,
    ) -> Result<MultimodalPrefix> {
        let want_visual = modality.needs_visual();
        let want_audio = modality.needs_audio();
        let mut problems = Vec::new();
        if want_visual && (reduced.temporal.is_none() || reduced.spatial.is_none()) {
            problems.push("temporal/spatial tokens required but absent");
        }
        if !want_visual && (reduced.temporal.is_some() || reduced.spatial.is_some()) {
            problems.push("visual tokens present but not required by tag");
        }
        if want_audio && reduced.audio.is_none() {
            problems.push("audio tokens required but absent");
        }
        if !want_audio && reduced.audio.is_some() {
            problems.push("audio tokens present but not required by tag");
        }
        if !problems.is_empty() {
            return Err(Error::ModalityMismatch(format!(
                "{} for modality {}",
                problems.join("; "),
                modality
            )));
        }

        let mut sections = Vec::new();
        let mut layout = PrefixLayout { temporal: None, spatial: None, audio: None, len: 0 };
        let mut cursor = 0usize;
        if let Some(e_t) = reduced.temporal {
            let h_t = ctx.linear(e_t, "projector.visual_temporal")?;
            let rows = ctx.tape.value(h_t).dims2()?.0;
            layout.temporal = Some(cursor..cursor + rows);
            cursor += rows;
            sections.push(h_t);
        }
        if let Some(e_s) = reduced.spatial {
            let h_s = ctx.linear(e_s, "projector.visual_spatial")?;
            let rows = ctx.tape.value(h_s).dims2()?.0;
            layout.spatial = Some(cursor..cursor + rows);
            cursor += rows;
            sections.push(h_s);
        }
        if let Some(e_a) = reduced.audio {
            let h_a = ctx.linear(e_a, "projector.audio")?;
            let rows = ctx.tape.value(h_a).dims2()?.0;
            layout.audio = Some(cursor..cursor + rows);
            cursor += rows;
            sections.push(h_a);
        }
        layout.len = cursor;
        let tokens = ctx.tape.concat_rows(&sections)?;
        Ok(MultimodalPrefix { tokens, layout })
    }

    /// Full media-to-prefix path for one sample, activating only the
    /// branches its modality tag names.
    pub fn encode_sample<S: Scalar>(
        &self,
        ctx: &mut Ctx<'_, S>,
        sample: &MediaSample<S>,
    ) -> Result<MultimodalPrefix> {
        let modality = sample.modality;
        let mut reduced = ReducedTokens { temporal: None, spatial: None, audio: None };
        if modality.needs_visual() {
            let frames = sample.frames.as_ref().ok_or_else(|| {
                Error::ModalityMismatch(format!("modality {modality} requires frames"))
            })?;
            let patches = patchify(frames, self.cfg.patch)?;
            let emb = self.encode_frames(ctx, &patches)?;
            reduced.temporal = Some(self.temporal_tokens(ctx, &emb));
            reduced.spatial = Some(self.spatial_tokens(ctx, &emb)?);
        } else if sample.frames.is_some() {
            return Err(Error::ModalityMismatch(format!(
                "frames attached to a {modality} sample"
            )));
        }
        if modality.needs_audio() {
            let audio = sample.audio.as_ref().ok_or_else(|| {
                Error::ModalityMismatch(format!("modality {modality} requires audio"))
            })?;
            reduced.audio = Some(self.encode_audio(ctx, audio)?);
        } else if sample.audio.is_some() {
            return Err(Error::ModalityMismatch(format!(
                "audio attached to a {modality} sample"
            )));
        }
        self.assemble_prefix(ctx, &reduced, modality)
    }
}

/// Log-magnitude spectral features: each segment is projected onto
/// 1..=bins whole cycles per segment; feature = ln(1 + normalized magnitude).
/// A fixed transform, not learned, so it stays off the tape.
pub fn spectral_features<S: Scalar>(segments: &AudioSegments<S>, bins: usize) -> Result<Tensor<S>> {
    let k = segments.k();
    let m = segments.samples_per_segment();
    if m < 2 * bins {
        return Err(Error::Shape {
            op: "spectral_features",
            detail: format!("segment length {m} too short for {bins} spectral bins"),
        });
    }
    let two_pi = lit::<S>(std::f64::consts::TAU);
    let mf = lit::<S>(m as f64);
    let norm = lit::<S>(2.0 / m as f64);
    let mut out = Vec::with_capacity(k * bins);
    for seg in segments.data().data().chunks(m) {
        for j in 1..=bins {
            let jf = lit::<S>(j as f64);
            let mut c = S::zero();
            let mut s = S::zero();
            for (i, &x) in seg.iter().enumerate() {
                let phase = two_pi * jf * lit::<S>(i as f64) / mf;
                c = c + x * phase.cos();
                s = s + x * phase.sin();
            }
            let mag = norm * (c * c + s * s).sqrt();
            out.push((S::one() + mag).ln());
        }
    }
    Tensor::new(vec![k, bins], out)
}

#[cfg(test)]
mod tests;
