use super::*;
use crate::nn::Ctx;
use crate::numerics::gradcheck::grad_check;
use crate::numerics::param::Binder;
use crate::numerics::tape::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_cfg(n_patches: usize) -> EncoderConfig {
    EncoderConfig {
        patch: 8,
        d_vis: 16,
        enc_layers: 2,
        enc_heads: 2,
        n_patches,
        d_t: 16,
        d_s: 16,
        d_a: 16,
        d_l: 16,
        audio_bins: 8,
    }
}

fn setup<S: Scalar>(cfg: EncoderConfig, seed: u64) -> (Encoders, ParamStore<S>) {
    let enc = Encoders::new(cfg);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    enc.init_params(&mut store, &mut rng);
    (enc, store)
}

fn uniform_frames<S: Scalar>(t: usize, h: usize, w: usize, seed: u64) -> VideoFrames<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<S> = (0..t * h * w * 3).map(|_| lit(rng.gen::<f64>())).collect();
    VideoFrames::new(Tensor::new(vec![t, h, w, 3], data).unwrap()).unwrap()
}

fn sine_audio<S: Scalar>(k: usize, m: usize, cycles: f64) -> AudioSegments<S> {
    let data: Vec<S> = (0..k * m)
        .map(|i| {
            let pos = (i % m) as f64;
            lit((std::f64::consts::TAU * cycles * pos / m as f64).sin())
        })
        .collect();
    AudioSegments::new(Tensor::new(vec![k, m], data).unwrap(), 1600).unwrap()
}

#[test]
fn patchify_shape_is_forced_by_arithmetic() {
    let frames = uniform_frames::<f32>(1, 32, 32, 0);
    let patches = patchify(&frames, 8).unwrap();
    assert_eq!(patches.shape(), &[1, 16, 192]);
}

#[test]
fn patchify_constant_frame_gives_constant_patches() {
    let frames =
        VideoFrames::<f32>::new(Tensor::new(vec![1, 16, 16, 3], vec![0.25; 16 * 16 * 3]).unwrap()).unwrap();
    let patches = patchify(&frames, 8).unwrap();
    assert!(patches.data().iter().all(|&v| v == 0.25));
}

#[test]
fn patchify_rejects_non_divisible_dims() {
    let frames =
        VideoFrames::<f32>::new(Tensor::new(vec![1, 30, 32, 3], vec![0.0; 30 * 32 * 3]).unwrap()).unwrap();
    let err = patchify(&frames, 8).unwrap_err().to_string();
    assert!(err.contains("30") && err.contains("32") && err.contains("8"), "{err}");
}

#[test]
fn identical_frames_encode_identically() {
    let (enc, store) = setup::<f32>(toy_cfg(4), 1);
    let one = uniform_frames::<f32>(1, 16, 16, 2);
    let mut doubled = one.data().data().to_vec();
    doubled.extend_from_slice(one.data().data());
    let frames = VideoFrames::new(Tensor::new(vec![2, 16, 16, 3], doubled).unwrap()).unwrap();
    let patches = patchify(&frames, 8).unwrap();
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let mut ctx = Ctx::new(&mut tape, &store, &mut binder);
    let emb = enc.encode_frames(&mut ctx, &patches).unwrap();
    let cls = tape.value(emb.cls);
    assert_eq!(cls.shape(), &[2, 16]);
    assert_eq!(cls.row(0), cls.row(1));
    assert_eq!(tape.value(emb.patches[0]), tape.value(emb.patches[1]));
}

#[test]
fn single_frame_has_single_cls_row() {
    let (enc, store) = setup::<f32>(toy_cfg(4), 1);
    let frames = uniform_frames::<f32>(1, 16, 16, 3);
    let patches = patchify(&frames, 8).unwrap();
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let mut ctx = Ctx::new(&mut tape, &store, &mut binder);
    let emb = enc.encode_frames(&mut ctx, &patches).unwrap();
    assert_eq!(tape.value(emb.cls).shape(), &[1, 16]);
}

#[test]
fn permuting_frames_permutes_cls_rows() {
    let (enc, store) = setup::<f32>(toy_cfg(4), 1);
    let f = uniform_frames::<f32>(3, 16, 16, 4);
    let run = |order: &[usize]| -> Vec<Vec<f32>> {
        let mut data = Vec::new();
        let frame_len = 16 * 16 * 3;
        for &i in order {
            data.extend_from_slice(&f.data().data()[i * frame_len..(i + 1) * frame_len]);
        }
        let frames = VideoFrames::new(Tensor::new(vec![3, 16, 16, 3], data).unwrap()).unwrap();
        let patches = patchify(&frames, 8).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let mut ctx = Ctx::new(&mut tape, &store, &mut binder);
        let emb = enc.encode_frames(&mut ctx, &patches).unwrap();
        (0..3).map(|i| tape.value(emb.cls).row(i).to_vec()).collect()
    };
    let base = run(&[0, 1, 2]);
    let perm = run(&[2, 0, 1]);
    assert_eq!(perm[0], base[2]);
    assert_eq!(perm[1], base[0]);
    assert_eq!(perm[2], base[1]);
}

#[test]
fn temporal_tokens_preserve_count_and_order() {
    // 32 frames is the full-scale default; the toy geometry keeps D small.
    let (enc, store) = setup::<f32>(toy_cfg(4), 5);
    let frames = uniform_frames::<f32>(32, 16, 16, 6);
    let patches = patchify(&frames, 8).unwrap();
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let mut ctx = Ctx::new(&mut tape, &store, &mut binder);
    let emb = enc.encode_frames(&mut ctx, &patches).unwrap();
    let e_t = enc.temporal_tokens(&mut ctx, &emb);
    assert_eq!(tape.value(e_t).shape(), &[32, 16]);

    // reversing frame order reverses token rows
    let mut rev = Vec::new();
    let frame_len = 16 * 16 * 3;
    for i in (0..32).rev() {
        rev.extend_from_slice(&frames.data().data()[i * frame_len..(i + 1) * frame_len]);
    }
    let rev_frames = VideoFrames::new(Tensor::new(vec![32, 16, 16, 3], rev).unwrap()).unwrap();
    let rev_patches = patchify(&rev_frames, 8).unwrap();
    let mut tape2 = Tape::new();
    let mut binder2 = Binder::new();
    let mut ctx2 = Ctx::new(&mut tape2, &store, &mut binder2);
    let emb2 = enc.encode_frames(&mut ctx2, &rev_patches).unwrap();
    let e_t2 = enc.temporal_tokens(&mut ctx2, &emb2);
    for i in 0..32 {
        assert_eq!(tape.value(e_t).row(i), tape2.value(e_t2).row(31 - i));
    }
}

#[test]
fn spatial_tokens_of_single_frame_equal_its_patches() {
    let (enc, store) = setup::<f32>(toy_cfg(4), 7);
    let frames = uniform_frames::<f32>(1, 16, 16, 8);
    let patches = patchify(&frames, 8).unwrap();
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let mut ctx = Ctx::new(&mut tape, &store, &mut binder);
    let emb = enc.encode_frames(&mut ctx, &patches).unwrap();
    let e_s = enc.spatial_tokens(&mut ctx, &emb).unwrap();
    assert_eq!(tape.value(e_s), tape.value(emb.patches[0]));
}

#[test]
fn spatial_tokens_match_sum_and_divide_oracle() {
    let (enc, store) = setup::<f32>(toy_cfg(4), 9);
    let frames = uniform_frames::<f32>(3, 16, 16, 10);
    let patches = patchify(&frames, 8).unwrap();
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let mut ctx = Ctx::new(&mut tape, &store, &mut binder);
    let emb = enc.encode_frames(&mut ctx, &patches).unwrap();
    let e_s = enc.spatial_tokens(&mut ctx, &emb).unwrap();
    // independent oracle: explicit sum over frames, then divide
    let n = tape.value(emb.patches[0]).numel();
    let mut oracle = vec![0.0f32; n];
    for &p in &emb.patches {
        for (o, &v) in oracle.iter_mut().zip(tape.value(p).data()) {
            *o += v;
        }
    }
    for o in oracle.iter_mut() {
        *o /= 3.0;
    }
    for (a, b) in tape.value(e_s).data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn audio_tokens_one_per_segment() {
    let (enc, store) = setup::<f32>(toy_cfg(4), 11);
    for k in [1usize, 4] {
        let audio = sine_audio::<f32>(k, 64, 3.0);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let mut ctx = Ctx::new(&mut tape, &store, &mut binder);
        let e_a = enc.encode_audio(&mut ctx, &audio).unwrap();
        assert_eq!(tape.value(e_a).shape(), &[k, 16]);
    }
}

#[test]
fn identical_segments_map_to_identical_rows() {
    let (enc, store) = setup::<f32>(toy_cfg(4), 12);
    let audio = sine_audio::<f32>(2, 64, 5.0); // both segments identical by construction
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let mut ctx = Ctx::new(&mut tape, &store, &mut binder);
    let e_a = enc.encode_audio(&mut ctx, &audio).unwrap();
    assert_eq!(tape.value(e_a).row(0), tape.value(e_a).row(1));
}

#[test]
fn audio_segment_length_mismatch_errors() {
    let (enc, store) = setup::<f32>(toy_cfg(4), 13);
    // 10 samples per segment cannot support 8 spectral bins
    let audio = AudioSegments::<f32>::new(Tensor::new(vec![2, 10], vec![0.0; 20]).unwrap(), 1600).unwrap();
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let mut ctx = Ctx::new(&mut tape, &store, &mut binder);
    assert!(enc.encode_audio(&mut ctx, &audio).is_err());
}

fn leaf_tokens<S: Scalar>(tape: &mut Tape<S>, rows: usize, cols: usize, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tape.constant(Tensor::randn(&[rows, cols], 1.0, &mut rng))
}

#[test]
fn assemble_prefix_orders_spans_temporal_spatial_audio() {
    let (enc, store) = setup::<f32>(toy_cfg(16), 14);
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let mut ctx = Ctx::new(&mut tape, &store, &mut binder);
    let reduced = ReducedTokens {
        temporal: Some(leaf_tokens(ctx.tape, 32, 16, 1)),
        spatial: Some(leaf_tokens(ctx.tape, 16, 16, 2)),
        audio: Some(leaf_tokens(ctx.tape, 4, 16, 3)),
    };
    let prefix = enc.assemble_prefix(&mut ctx, &reduced, Modality::AudVis).unwrap();
    assert_eq!(tape.value(prefix.tokens).shape(), &[52, 16]);
    assert_eq!(prefix.layout.temporal, Some(0..32));
    assert_eq!(prefix.layout.spatial, Some(32..48));
    assert_eq!(prefix.layout.audio, Some(48..52));
    assert_eq!(prefix.layout.len, 52);
}

#[test]
fn assemble_prefix_vis_and_aud_lengths() {
    let (enc, store) = setup::<f32>(toy_cfg(16), 15);
    {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let mut ctx = Ctx::new(&mut tape, &store, &mut binder);
        let reduced = ReducedTokens {
            temporal: Some(leaf_tokens(ctx.tape, 32, 16, 1)),
            spatial: Some(leaf_tokens(ctx.tape, 16, 16, 2)),
            audio: None,
        };
        let prefix = enc.assemble_prefix(&mut ctx, &reduced, Modality::Vis).unwrap();
        assert_eq!(prefix.layout.len, 48);
        assert_eq!(prefix.layout.audio, None);
    }
    {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let mut ctx = Ctx::new(&mut tape, &store, &mut binder);
        let reduced = ReducedTokens {
            temporal: None,
            spatial: None,
            audio: Some(leaf_tokens(ctx.tape, 4, 16, 3)),
        };
        let prefix = enc.assemble_prefix(&mut ctx, &reduced, Modality::Aud).unwrap();
        assert_eq!(prefix.layout.len, 4);
    }
}

#[test]
fn assemble_prefix_rejects_missing_and_extra_components() {
    let (enc, store) = setup::<f32>(toy_cfg(16), 16);
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let mut ctx = Ctx::new(&mut tape, &store, &mut binder);
    let audio_only = ReducedTokens {
        temporal: None,
        spatial: None,
        audio: Some(leaf_tokens(ctx.tape, 4, 16, 3)),
    };
    assert!(matches!(
        enc.assemble_prefix(&mut ctx, &audio_only, Modality::Vis),
        Err(Error::ModalityMismatch(_))
    ));
    let with_extra = ReducedTokens {
        temporal: Some(leaf_tokens(ctx.tape, 2, 16, 1)),
        spatial: Some(leaf_tokens(ctx.tape, 16, 16, 2)),
        audio: Some(leaf_tokens(ctx.tape, 4, 16, 3)),
    };
    assert!(matches!(
        enc.assemble_prefix(&mut ctx, &with_extra, Modality::Vis),
        Err(Error::ModalityMismatch(_))
    ));
}

#[test]
fn prefix_length_law_over_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let t = rng.gen_range(1..6);
        let n = rng.gen_range(1..8);
        let k = rng.gen_range(1..5);
        let mut cfg = toy_cfg(n);
        cfg.n_patches = n;
        let (enc, store) = setup::<f32>(cfg, rng.gen());
        for modality in Modality::ALL {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let mut ctx = Ctx::new(&mut tape, &store, &mut binder);
            let reduced = ReducedTokens {
                temporal: modality.needs_visual().then(|| leaf_tokens(ctx.tape, t, 16, 1)),
                spatial: modality.needs_visual().then(|| leaf_tokens(ctx.tape, n, 16, 2)),
                audio: modality.needs_audio().then(|| leaf_tokens(ctx.tape, k, 16, 3)),
            };
            let prefix = enc.assemble_prefix(&mut ctx, &reduced, modality).unwrap();
            let expected = match modality {
                Modality::Vis => t + n,
                Modality::Aud => k,
                Modality::AudVis => t + n + k,
            };
            assert_eq!(prefix.layout.len, expected);
            assert_eq!(tape.value(prefix.tokens).shape()[0], expected);
        }
    }
}

#[test]
fn editing_one_frame_touches_only_its_temporal_row_and_the_pool() {
    let (enc, store) = setup::<f32>(toy_cfg(4), 18);
    let base = uniform_frames::<f32>(3, 16, 16, 19);
    let mut edited_data = base.data().data().to_vec();
    let frame_len = 16 * 16 * 3;
    for v in &mut edited_data[frame_len..2 * frame_len] {
        *v = (*v * 0.5 + 0.25).min(1.0);
    }
    let edited = VideoFrames::new(Tensor::new(vec![3, 16, 16, 3], edited_data).unwrap()).unwrap();

    let encode = |frames: &VideoFrames<f32>| {
        let patches = patchify(frames, 8).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let mut ctx = Ctx::new(&mut tape, &store, &mut binder);
        let emb = enc.encode_frames(&mut ctx, &patches).unwrap();
        let e_s = enc.spatial_tokens(&mut ctx, &emb).unwrap();
        let cls = tape.value(emb.cls).clone();
        let pooled = tape.value(e_s).clone();
        let per_frame: Vec<Tensor<f32>> = emb.patches.iter().map(|&p| tape.value(p).clone()).collect();
        (cls, pooled, per_frame)
    };

    let (cls_a, pool_a, frames_a) = encode(&base);
    let (cls_b, pool_b, frames_b) = encode(&edited);
    assert_eq!(cls_a.row(0), cls_b.row(0));
    assert_eq!(cls_a.row(2), cls_b.row(2));
    assert_ne!(cls_a.row(1), cls_b.row(1));
    // pool difference is exactly the edited frame's contribution / T
    for i in 0..pool_a.numel() {
        let expected = (frames_b[1].data()[i] - frames_a[1].data()[i]) / 3.0;
        let actual = pool_b.data()[i] - pool_a.data()[i];
        assert!((expected - actual).abs() < 1e-5, "{expected} vs {actual}");
    }
    assert_eq!(frames_a[0], frames_b[0]);
    assert_eq!(frames_a[2], frames_b[2]);
}

#[test]
fn encode_sample_is_bitwise_deterministic() {
    let (enc, store) = setup::<f32>(toy_cfg(4), 20);
    let sample = MediaSample {
        frames: Some(uniform_frames::<f32>(2, 16, 16, 21)),
        audio: Some(sine_audio::<f32>(2, 64, 4.0)),
        modality: Modality::AudVis,
    };
    let run = || {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let mut ctx = Ctx::new(&mut tape, &store, &mut binder);
        let prefix = enc.encode_sample(&mut ctx, &sample).unwrap();
        tape.value(prefix.tokens)
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<u32>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn projection_gradients_match_finite_differences() {
    let cfg = toy_cfg(4);
    let (enc, store) = setup::<f64>(cfg, 22);
    let sample = MediaSample {
        frames: Some(uniform_frames::<f64>(2, 16, 16, 23)),
        audio: Some(sine_audio::<f64>(1, 64, 2.0)),
        modality: Modality::AudVis,
    };
    for pname in ["projector.visual_temporal.W", "projector.visual_spatial.W", "projector.audio.W", "projector.audio.b"] {
        let x = store.get(pname).unwrap().value.clone();
        let err = grad_check(
            |tape, var| {
                let mut binder = Binder::new();
                binder.override_param(pname, var);
                let mut ctx = Ctx::new(tape, &store, &mut binder);
                let prefix = enc.encode_sample(&mut ctx, &sample)?;
                let sq = ctx.tape.mul(prefix.tokens, prefix.tokens)?;
                ctx.tape.sum_all(sq)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{pname}: finite-difference error {err}");
    }
}
