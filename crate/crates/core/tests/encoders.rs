use clover_core::encoders::{CloverModel, ModelConfig, VideoClip, Vocab};
use clover_core::masking::VideoMaskSpec;
use clover_core::substrate::{grad_check, grad_check_coords, Rng, Segment, Tensor};
use clover_core::CloverError;

fn random_clip(c: &ModelConfig, frames: usize, seed: u64) -> VideoClip {
    let mut rng = Rng::new(seed, 9);
    let n = frames * c.height * c.width * c.channels;
    VideoClip::new(
        frames,
        c.height,
        c.width,
        c.channels,
        (0..n).map(|_| rng.uniform() as f32).collect(),
    )
    .unwrap()
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

#[test]
fn default_clip_yields_sixty_four_tokens() {
    let c = ModelConfig::default();
    let model = CloverModel::<f32>::new(c.clone(), 1).unwrap();
    let out = model.encode_video(&random_clip(&c, 4, 0), None).unwrap();
    assert_eq!(out.tokens.shape(), &[64, 64]);
    assert_eq!(out.pooled.len(), 64);
}

#[test]
fn encoding_is_deterministic() {
    let c = ModelConfig::default();
    let a = CloverModel::<f32>::new(c.clone(), 5).unwrap();
    let b = CloverModel::<f32>::new(c.clone(), 5).unwrap();
    let clip = random_clip(&c, 4, 3);
    assert_eq!(
        a.encode_video(&clip, None).unwrap(),
        b.encode_video(&clip, None).unwrap()
    );
    let other = CloverModel::<f32>::new(c, 6).unwrap();
    assert_ne!(
        a.encode_video(&clip, None).unwrap().pooled,
        other.encode_video(&clip, None).unwrap().pooled
    );
}

#[test]
fn padding_does_not_change_text_outputs() {
    let c = ModelConfig::default();
    let model = CloverModel::<f64>::new(c, 2).unwrap();
    let vocab = Vocab::default();
    let bare = vocab.encode(&words("a red square rising"), None).unwrap();
    let padded = vocab
        .encode(&words("a red square rising"), Some(12))
        .unwrap();
    let a = model.encode_text(&bare).unwrap();
    let b = model.encode_text(&padded).unwrap();
    for (x, y) in a.pooled.iter().zip(&b.pooled) {
        assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
    }
    for r in 0..bare.len() {
        for (x, y) in a.tokens.row(r).iter().zip(b.tokens.row(r)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn fusion_concatenates_video_then_text() {
    let c = ModelConfig::default();
    let model = CloverModel::<f32>::new(c.clone(), 3).unwrap();
    let vocab = Vocab::default();
    let text = vocab
        .encode(&words("a blue circle spinning"), Some(8))
        .unwrap();
    let v = model.encode_video(&random_clip(&c, 4, 1), None).unwrap();
    let t = model.encode_text(&text).unwrap();
    let fused = model.fuse_pair(&v, &t).unwrap();
    assert_eq!(fused.tokens.shape(), &[64 + 8, 64]);
    assert_eq!(fused.cls_row, 64);
    let norm: f32 = fused
        .pooled_fusion
        .iter()
        .map(|x| x * x)
        .sum::<f32>()
        .sqrt();
    assert!((norm - 1.0).abs() < 1e-5);
}

#[test]
fn fused_output_ignores_padded_text_positions() {
    let c = ModelConfig::micro();
    let model = CloverModel::<f64>::new(c.clone(), 4).unwrap();
    let vocab = Vocab::default();
    let v = model.encode_video(&random_clip(&c, 2, 2), None).unwrap();
    let bare = model
        .encode_text(&vocab.encode(&words("a red bar falling"), None).unwrap())
        .unwrap();
    let padded = model
        .encode_text(&vocab.encode(&words("a red bar falling"), Some(9)).unwrap())
        .unwrap();
    let a = model.fuse_pair(&v, &bare).unwrap();
    let b = model.fuse_pair(&v, &padded).unwrap();
    for (x, y) in a.pooled_fusion.iter().zip(&b.pooled_fusion) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn pooled_outputs_are_unit_norm() {
    let c = ModelConfig::default();
    let model = CloverModel::<f64>::new(c.clone(), 7).unwrap();
    let vocab = Vocab::default();
    for seed in 0..3 {
        let v = model
            .encode_video(&random_clip(&c, 1 + seed as usize, seed), None)
            .unwrap();
        let t = model
            .encode_text(
                &vocab
                    .encode(&words("a green triangle resting"), Some(10))
                    .unwrap(),
            )
            .unwrap();
        for p in [&v.pooled, &t.pooled] {
            let n: f64 = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn fully_masked_clip_ignores_pixels() {
    let c = ModelConfig::default();
    let model = CloverModel::<f64>::new(c.clone(), 8).unwrap();
    let (gh, gw) = c.grid();
    let full = VideoMaskSpec::full(gh, gw);
    let a = model
        .encode_video(&random_clip(&c, 4, 10), Some(&full))
        .unwrap();
    let b = model
        .encode_video(&random_clip(&c, 4, 11), Some(&full))
        .unwrap();
    assert_eq!(a, b);
    let c1 = model.encode_video(&random_clip(&c, 4, 10), None).unwrap();
    assert_ne!(a.pooled, c1.pooled);
}

#[test]
fn masking_changes_only_through_masked_positions() {
    let c = ModelConfig::default();
    let model = CloverModel::<f64>::new(c.clone(), 9).unwrap();
    let mask = VideoMaskSpec {
        grid_h: 4,
        grid_w: 4,
        spatial_indices: vec![5],
    };
    let clip = random_clip(&c, 4, 4);
    let mut edited = clip.clone();
    // Change pixels inside patch (row 1, col 1) of frame 2 only.
    for y in 8..16 {
        for x in 8..16 {
            let i = edited.index(2, y, x, 0);
            edited.pixels[i] += 1.0;
        }
    }
    assert_eq!(
        model.encode_video(&clip, Some(&mask)).unwrap(),
        model.encode_video(&edited, Some(&mask)).unwrap()
    );
}

#[test]
fn batched_encoding_matches_single_samples() {
    let c = ModelConfig::micro();
    let model = CloverModel::<f64>::new(c.clone(), 12).unwrap();
    let vocab = Vocab::default();
    let clips = [random_clip(&c, 2, 1), random_clip(&c, 1, 2)];
    let texts = [
        vocab.encode(&words("a red bar falling"), Some(7)).unwrap(),
        vocab
            .encode(&words("a small white circle sliding left"), Some(7))
            .unwrap(),
    ];
    let g = model.graph();
    let v = model
        .encode_videos(&g, &[&clips[0], &clips[1]], &[None, None])
        .unwrap();
    let t = model.encode_texts(&g, &[&texts[0], &texts[1]]).unwrap();
    let f = model.fuse(&g, &v, &t, &[(1, 0), (0, 1)]).unwrap();
    let single_v = model.encode_video(&clips[1], None).unwrap();
    let single_t = model.encode_text(&texts[0]).unwrap();
    let single_f = model.fuse_pair(&single_v, &single_t).unwrap();
    let pooled = f.pooled.value().clone();
    for (x, y) in pooled.row(0).iter().zip(&single_f.pooled_fusion) {
        assert!((x - y).abs() < 1e-12);
    }
    let vp = v.pooled.value().clone();
    for (x, y) in vp.row(1).iter().zip(&single_v.pooled) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn geometry_mismatches_name_the_field() {
    let c = ModelConfig::default();
    let model = CloverModel::<f32>::new(c.clone(), 1).unwrap();
    let wrong_h = VideoClip::zeros(4, 16, 32, 3);
    let err = model.encode_video(&wrong_h, None).unwrap_err();
    assert!(
        matches!(
            err,
            CloverError::Invalid {
                field: "height",
                ..
            }
        ),
        "{err}"
    );
    let wrong_c = VideoClip::zeros(4, 32, 32, 1);
    assert!(model
        .encode_video(&wrong_c, None)
        .unwrap_err()
        .to_string()
        .contains("channels"));
    let too_long = VideoClip::zeros(5, 32, 32, 3);
    assert!(model
        .encode_video(&too_long, None)
        .unwrap_err()
        .to_string()
        .contains("frames"));

    let micro = CloverModel::<f32>::new(ModelConfig::micro(), 1).unwrap();
    let v = micro
        .encode_video(&random_clip(&ModelConfig::micro(), 2, 0), None)
        .unwrap();
    let vocab = Vocab::default();
    let t = model
        .encode_text(&vocab.encode(&words("a red bar"), None).unwrap())
        .unwrap();
    let err = micro.fuse_pair(&v, &t).unwrap_err();
    assert!(
        matches!(err, CloverError::Invalid { field: "dim", .. }),
        "{err}"
    );
}

#[test]
fn interior_padding_is_rejected() {
    let model = CloverModel::<f32>::new(ModelConfig::default(), 1).unwrap();
    let vocab = Vocab::default();
    let mut t = vocab.encode(&words("a red bar"), Some(6)).unwrap();
    t.ids.swap(2, 4);
    assert!(model.encode_text(&t).is_err());
}

/// Scalar probe: weighted sum of the fused pooled vector.
fn probe_weights(n: usize) -> Tensor<f64> {
    let mut rng = Rng::new(77, 0);
    Tensor::new(vec![1, n], (0..n).map(|_| rng.normal()).collect()).unwrap()
}

#[test]
fn pixel_gradients_pass_finite_differences() {
    let c = ModelConfig::micro();
    let model = CloverModel::<f64>::new(c.clone(), 21).unwrap();
    let vocab = Vocab::default();
    let text = vocab
        .encode(&words("a red square rising"), Some(6))
        .unwrap();
    let clip = random_clip(&c, 2, 5);
    let point: Vec<f64> = clip.pixels.iter().map(|&p| p as f64).collect();
    let mask = VideoMaskSpec {
        grid_h: 2,
        grid_w: 2,
        spatial_indices: vec![3],
    };
    let w = probe_weights(c.dim);
    let eval = |x: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
        let g = model.graph();
        let px = g.input(Tensor::new(vec![1, x.len()], x.to_vec()).unwrap());
        let v = model
            .encode_video_pixels(&g, px, &[2], &[Some(&mask)])
            .unwrap();
        let t = model.encode_texts(&g, &[&text]).unwrap();
        let f = model.fuse(&g, &v, &t, &[(0, 0)]).unwrap();
        let loss = f
            .pooled
            .mul(g.constant(w.clone()))
            .sum()
            .add(v.pooled.sum());
        let grad = if want_grad {
            g.backward(loss).wrt(px).into_data()
        } else {
            Vec::new()
        };
        (loss.item(), grad)
    };
    let (_, grad) = eval(&point, true);
    let report = grad_check(|x| eval(x, false).0, &point, &grad, 1e-5).unwrap();
    assert!(report.passes(1e-3), "{report:?}");
    // Pixels under the masked patch receive no gradient.
    let masked = clip.index(0, 4, 4, 0);
    assert_eq!(grad[masked], 0.0);
}

#[test]
fn text_embedding_gradients_pass_finite_differences() {
    let c = ModelConfig::micro();
    let model = CloverModel::<f64>::new(c.clone(), 22).unwrap();
    let mut rng = Rng::new(3, 3);
    let (len, keys) = (6, 4);
    let point: Vec<f64> = (0..len * c.dim).map(|_| rng.normal()).collect();
    let w = probe_weights(c.dim);
    let eval = |x: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
        let g = model.graph();
        let emb = g.input(Tensor::new(vec![len, c.dim], x.to_vec()).unwrap());
        let out = model
            .encode_text_embeddings(
                &g,
                emb,
                vec![Segment {
                    start: 0,
                    len,
                    keys,
                }],
            )
            .unwrap();
        let loss = out.pooled.mul(g.constant(w.clone())).sum();
        let grad = if want_grad {
            g.backward(loss).wrt(emb).into_data()
        } else {
            Vec::new()
        };
        (loss.item(), grad)
    };
    let (_, grad) = eval(&point, true);
    let report = grad_check(|x| eval(x, false).0, &point, &grad, 1e-5).unwrap();
    assert!(report.passes(1e-3), "{report:?}");
    // Padded rows are never attended to and are not pooled.
    assert!(grad[keys * c.dim..].iter().all(|&v| v == 0.0));
}

#[test]
fn video_token_gradients_through_fusion_pass_finite_differences() {
    let c = ModelConfig::micro();
    let model = CloverModel::<f64>::new(c.clone(), 23).unwrap();
    let mut rng = Rng::new(4, 4);
    let (kv, lt) = (8, 5);
    let point: Vec<f64> = (0..kv * c.dim).map(|_| rng.normal()).collect();
    let text: Vec<f64> = (0..lt * c.dim).map(|_| rng.normal()).collect();
    let w = probe_weights(c.dim);
    let eval = |x: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
        let g = model.graph();
        let vt = g.input(Tensor::new(vec![kv, c.dim], x.to_vec()).unwrap());
        let tt = g.constant(Tensor::new(vec![lt, c.dim], text.clone()).unwrap());
        let out = model
            .fuse_tokens(
                &g,
                vt,
                &[Segment {
                    start: 0,
                    len: kv,
                    keys: kv,
                }],
                tt,
                &[Segment {
                    start: 0,
                    len: lt,
                    keys: 4,
                }],
                &[(0, 0)],
            )
            .unwrap();
        let loss = out.pooled.mul(g.constant(w.clone())).sum();
        let grad = if want_grad {
            g.backward(loss).wrt(vt).into_data()
        } else {
            Vec::new()
        };
        (loss.item(), grad)
    };
    let (_, grad) = eval(&point, true);
    let report = grad_check(|x| eval(x, false).0, &point, &grad, 1e-5).unwrap();
    assert!(report.passes(1e-3), "{report:?}");
}

#[test]
fn parameter_gradients_pass_finite_differences() {
    let c = ModelConfig::micro();
    let model = CloverModel::<f64>::new(c.clone(), 24).unwrap();
    let vocab = Vocab::default();
    let text = vocab
        .encode(&words("a red square rising"), Some(6))
        .unwrap();
    let clip = random_clip(&c, 2, 6);
    let w = probe_weights(c.dim);
    let loss_of = |m: &CloverModel<f64>, want: bool| -> (f64, Vec<f64>) {
        let g = m.graph();
        let v = m.encode_videos(&g, &[&clip], &[None]).unwrap();
        let t = m.encode_texts(&g, &[&text]).unwrap();
        let f = m.fuse(&g, &v, &t, &[(0, 0)]).unwrap();
        let loss = f
            .pooled
            .mul(g.constant(w.clone()))
            .sum()
            .add(t.pooled.sum());
        let grad = if want {
            let grads = g.backward(loss);
            let by_name = g.param_grads(&grads);
            m.params
                .iter()
                .flat_map(|(n, p)| {
                    by_name
                        .get(n)
                        .map(|t| t.data().to_vec())
                        .unwrap_or(vec![0.0; p.len()])
                })
                .collect()
        } else {
            Vec::new()
        };
        (loss.item(), grad)
    };
    let (_, grad) = loss_of(&model, true);
    let point = model.params.flatten();
    let mut probe = model.clone();
    let coords: Vec<usize> = (0..point.len()).step_by(7).collect();
    let report = grad_check_coords(
        |x| {
            probe.params.unflatten(x).unwrap();
            loss_of(&probe, false).0
        },
        &point,
        &grad,
        1e-5,
        &coords,
    )
    .unwrap();
    assert!(report.passes(1e-3), "{report:?}");
}
