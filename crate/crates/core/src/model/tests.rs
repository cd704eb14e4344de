use super::*;
use crate::pretext::{build_pretext_sample, synth_image, PretextConfig, SceneSpec};

fn tiny(n: usize, m: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ffn_dim: 32,
        num_queries: n,
        num_patches: m,
        max_patches: n,
        backbone_channels: 8,
        num_classes: 3,
        patch_side: 12,
        flags: ModelFlags::default(),
    }
}

fn scene(seed: u64, side: usize) -> ImageRaster {
    let spec = SceneSpec { width: side, height: side, ..SceneSpec::default() };
    synth_image(seed, &spec).unwrap().image
}

fn patches(img: &ImageRaster, m: usize) -> Vec<ImageRaster> {
    (0..m).map(|k| img.crop(k, k, 12, 12).unwrap()).collect()
}

#[test]
fn backbone_downsamples_by_eight() {
    let model = Model::new(ModelConfig::default(), HeadMode::Pretext, 1).unwrap();
    let mut t = Tape::new();
    let p = model.bind(&mut t, true);
    let f = model.backbone_forward(&mut t, &p, &scene(0, 64)).unwrap();
    assert_eq!(t.shape(f), &[64, 8, 8]);
    let odd = ImageRaster::filled(48, 40, [1, 2, 3]);
    let f = model.backbone_forward(&mut t, &p, &odd).unwrap();
    assert_eq!(t.shape(f), &[64, 5, 6]);
    let small = ImageRaster::filled(7, 32, [0, 0, 0]);
    assert!(matches!(model.backbone_forward(&mut t, &p, &small), Err(Error::Input(_))));
}

#[test]
fn constant_image_gives_constant_interior_features() {
    let model = Model::new(ModelConfig::default(), HeadMode::Pretext, 2).unwrap();
    let mut t = Tape::new();
    let p = model.bind(&mut t, true);
    let f = model.backbone_forward(&mut t, &p, &ImageRaster::filled(64, 64, [200, 40, 90])).unwrap();
    let v = t.value(f);
    for c in 0..64 {
        let r = v.get(&[c, 1, 1]);
        for y in 1..8 {
            for x in 1..8 {
                assert_eq!(v.get(&[c, y, x]), r);
            }
        }
    }
}

#[test]
fn frozen_backbone_gets_no_gradient() {
    let model = Model::new(tiny(4, 2), HeadMode::Pretext, 3).unwrap();
    for freeze in [true, false] {
        let mut t = Tape::new();
        let p = model.bind(&mut t, freeze);
        let img = scene(1, 16);
        let out = model.forward_patches(&mut t, &p, &img, &patches(&img, 2), 0).unwrap();
        let loss = t.sum(out.layers[0].boxes);
        t.backward(loss).unwrap();
        let grads = p.grads(&t);
        for (id, g) in model.params().ids().zip(&grads) {
            let name = model.params().name(id);
            if Model::is_backbone(name) {
                assert_eq!(g.is_some(), !freeze, "{name}");
            }
        }
    }
}

#[test]
fn patch_feature_is_deterministic_and_c_wide() {
    let model = Model::new(tiny(4, 2), HeadMode::Pretext, 4).unwrap();
    let mut t = Tape::new();
    let p = model.bind(&mut t, true);
    let zero = ImageRaster::filled(16, 16, [0, 0, 0]);
    let a = model.patch_feature(&mut t, &p, &zero).unwrap();
    let b = model.patch_feature(&mut t, &p, &zero).unwrap();
    assert_eq!(t.shape(a), &[8]);
    assert_eq!(t.value(a), t.value(b));
}

#[test]
fn group_assignment_order() {
    let model = Model::new(tiny(6, 2), HeadMode::Pretext, 5).unwrap();
    let mut t = Tape::new();
    let p = model.bind(&mut t, true);
    let perm: Vec<usize> = (0..6).collect();
    let f0 = t.constant(Tensor::vector((0..8).map(|i| i as f64).collect()));
    let f1 = t.constant(Tensor::vector((0..8).map(|i| -(i as f64) * 2.0).collect()));
    let x = model.assign_groups(&mut t, &p, &[f0, f1], &perm).unwrap();
    let q = model.params().get(model.query_embed).clone();
    let w = model.params().get(model.patch_proj).clone();
    let v = t.value(x).clone();
    for i in 0..6 {
        let f = if i < 3 { t.value(f0) } else { t.value(f1) };
        let proj = Tensor::new(vec![1, 8], f.data().to_vec()).unwrap().matmul(&w).unwrap();
        for j in 0..16 {
            assert!((v.get(&[i, j]) - q.get(&[i, j]) - proj.get(&[0, j])).abs() < 1e-12);
        }
    }

    // zero features leave the (permuted) query embeddings
    let z = t.constant(Tensor::zeros(&[8]));
    let perm = vec![5, 4, 3, 2, 1, 0];
    let x = model.assign_groups(&mut t, &p, &[z, z], &perm).unwrap();
    for (i, &e) in perm.iter().enumerate() {
        assert_eq!(t.value(x).row(i), q.row(e));
    }

    // a single patch reaches every query
    let x = model.assign_groups(&mut t, &p, &[f0], &(0..6).collect::<Vec<_>>()).unwrap();
    let base = t.value(x).clone();
    for i in 0..6 {
        for j in 0..16 {
            let added = base.get(&[i, j]) - q.get(&[i, j]);
            let first = base.get(&[0, j]) - q.get(&[0, j]);
            assert!((added - first).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_layer_encoder_is_projection_plus_position() {
    let mut cfg = tiny(4, 2);
    cfg.enc_layers = 0;
    let model = Model::new(cfg, HeadMode::Pretext, 6).unwrap();
    let mut t = Tape::new();
    let p = model.bind(&mut t, true);
    let fm = Tensor::uniform(&[8, 2, 3], 1.0, &mut rng_for(0));
    let fv = t.constant(fm.clone());
    let mem = model.encode(&mut t, &p, fv).unwrap().tokens;
    assert_eq!(t.shape(mem), &[6, 16]);
    let tokens = fm.reshape(&[8, 6]).unwrap().transpose2().unwrap();
    let w = model.params().by_name("input_proj.w").unwrap();
    let b = model.params().by_name("input_proj.b").unwrap();
    let pe = sine_position_encoding(2, 3, 16);
    let proj = tokens.matmul(w).unwrap();
    for r in 0..6 {
        for c in 0..16 {
            let want = proj.get(&[r, c]) + b.data()[c] + pe.get(&[r, c]);
            assert!((t.value(mem).get(&[r, c]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn encoder_layers_are_permutation_equivariant() {
    let model = Model::new(tiny(4, 2), HeadMode::Pretext, 7).unwrap();
    let mut t = Tape::new();
    let p = model.bind(&mut t, true);
    let x = Tensor::uniform(&[6, 16], 1.0, &mut rng_for(1));
    let mut swapped = x.clone();
    let (r1, r4) = (x.row(1).to_vec(), x.row(4).to_vec());
    swapped.data_mut()[16..32].copy_from_slice(&r4);
    swapped.data_mut()[64..80].copy_from_slice(&r1);
    let pe = sine_position_encoding(2, 3, 16);
    let mut pe_swapped = pe.clone();
    pe_swapped.data_mut()[16..32].copy_from_slice(pe.row(4));
    pe_swapped.data_mut()[64..80].copy_from_slice(pe.row(1));
    let a = t.constant(x);
    let b = t.constant(swapped);
    let (pa, pb) = (t.constant(pe), t.constant(pe_swapped));
    let ya = model.encoder[0].forward(&mut t, &p, a, pa).unwrap();
    let yb = model.encoder[0].forward(&mut t, &p, b, pb).unwrap();
    let (ya, yb) = (t.value(ya), t.value(yb));
    for (i, j) in [(0, 0), (1, 4), (4, 1), (5, 5)] {
        for c in 0..16 {
            assert!((ya.get(&[i, c]) - yb.get(&[j, c])).abs() < 1e-12);
        }
    }
}

fn decoder_setup(n: usize, m: usize, seed: u64) -> (Model, Tensor, Tensor) {
    let mut model = Model::new(tiny(n, m), HeadMode::Pretext, seed).unwrap();
    model.jitter(0.1, seed);
    let mut rng = rng_for(seed + 1);
    let memory = Tensor::uniform(&[6, 32], 1.0, &mut rng);
    let inputs = Tensor::uniform(&[n, 16], 1.0, &mut rng);
    (model, memory, inputs)
}

fn memory_vars(t: &mut Tape, m: Tensor) -> Memory {
    let tokens = t.constant(Tensor::new(vec![6, 16], m.data()[..96].to_vec()).unwrap());
    let pos = t.constant(Tensor::new(vec![6, 16], m.data()[96..].to_vec()).unwrap());
    Memory { tokens, pos }
}

#[test]
fn masked_groups_are_independent() {
    let (n, m) = (100, 10);
    let (model, memory, inputs) = decoder_setup(n, m, 8);
    let mask = build_attention_mask(n, m).unwrap();
    let mut perturbed = inputs.clone();
    // rewrite every input of group 3
    for v in &mut perturbed.data_mut()[30 * 16..40 * 16] {
        *v = -*v + 0.5;
    }
    let mut t = Tape::new();
    let p = model.bind(&mut t, true);
    let mem = memory_vars(&mut t, memory);
    let a = t.constant(inputs);
    let b = t.constant(perturbed);
    let ta = model.decode(&mut t, &p, mem, a, Some(&mask)).unwrap();
    let tb = model.decode(&mut t, &p, mem, b, Some(&mask)).unwrap();

    for w in &ta[0].self_weights {
        let w = t.value(*w);
        for i in 0..n {
            for j in 0..n {
                if group_of(i, n, m) != group_of(j, n, m) {
                    assert_eq!(w.get(&[i, j]), 0.0);
                }
            }
        }
    }
    for (va, vb) in [(ta[0].self_attention, tb[0].self_attention), (ta[0].output, tb[0].output)] {
        let (va, vb) = (t.value(va), t.value(vb));
        for i in 0..n {
            let same = va.row(i) == vb.row(i);
            assert_eq!(same, group_of(i, n, m) != 3, "query {i}");
        }
    }
}

#[test]
fn absent_mask_matches_zero_mask() {
    let (model, memory, inputs) = decoder_setup(6, 1, 9);
    let mut t = Tape::new();
    let p = model.bind(&mut t, true);
    let mem = memory_vars(&mut t, memory);
    let x = t.constant(inputs);
    let a = model.decode(&mut t, &p, mem, x, None).unwrap();
    let zero = build_attention_mask(6, 1).unwrap();
    let b = model.decode(&mut t, &p, mem, x, Some(&zero)).unwrap();
    assert_eq!(t.value(a[0].output), t.value(b[0].output));
}

#[test]
fn single_query_attends_to_itself() {
    let (model, memory, inputs) = decoder_setup(1, 1, 10);
    let mut t = Tape::new();
    let p = model.bind(&mut t, true);
    let mem = memory_vars(&mut t, memory);
    let x = t.constant(inputs);
    let tr = model.decode(&mut t, &p, mem, x, None).unwrap();
    for w in &tr[0].self_weights {
        assert_eq!(t.value(*w).data(), &[1.0]);
    }
}

#[test]
fn pretext_forward_shapes_and_determinism() {
    let mut cfg = tiny(4, 2);
    cfg.dec_layers = 2;
    let model = Model::new(cfg, HeadMode::Pretext, 11).unwrap();
    let img = scene(5, 24);
    for m in [1, 2, 4] {
        let mut t = Tape::new();
        let p = model.bind(&mut t, true);
        let out = model.forward_patches(&mut t, &p, &img, &patches(&img, m), 3).unwrap();
        assert_eq!(out.layers.len(), 2);
        for l in &out.layers {
            assert_eq!(t.shape(l.class_logits), &[4, 2]);
            assert_eq!(t.shape(l.boxes), &[4, 4]);
            assert_eq!(t.shape(l.rec_features), &[4, 8]);
            assert!(t.value(l.boxes).data().iter().all(|&b| b > 0.0 && b < 1.0));
        }
        let mut t2 = Tape::new();
        let p2 = model.bind(&mut t2, true);
        let again = model.forward_patches(&mut t2, &p2, &img, &patches(&img, m), 3).unwrap();
        assert_eq!(t.value(out.layers[1].boxes), t2.value(again.layers[1].boxes));
    }
    let mut t = Tape::new();
    let p = model.bind(&mut t, true);
    assert!(model.forward_patches(&mut t, &p, &img, &patches(&img, 3), 0).is_err());
    assert!(matches!(model.forward_patches(&mut t, &p, &img, &patches(&img, 5), 0), Err(Error::Capacity { .. })));
}

#[test]
fn single_query_patch_replicated_over_three_queries() {
    let model = Model::new(tiny(3, 1), HeadMode::Pretext, 12).unwrap();
    let cfg = PretextConfig {
        num_patches: 1,
        max_patches: 3,
        short_range: [24, 32],
        long_max: 32,
        ..PretextConfig::default()
    };
    let sample = build_pretext_sample(&scene(3, 32), &cfg, 77).unwrap();
    let mut t = Tape::new();
    let p = model.bind(&mut t, true);
    let out = model.forward_pretrain(&mut t, &p, &sample).unwrap();
    assert_eq!(out.patch_features.len(), 1);
    assert_eq!(t.shape(out.layers[0].boxes), &[3, 4]);
}

#[test]
fn detection_forward() {
    let model = Model::new(tiny(4, 2), HeadMode::Detection, 13).unwrap();
    let img = scene(8, 32);
    let run = || {
        let mut t = Tape::new();
        let p = model.bind(&mut t, false);
        let out = model.forward_detect(&mut t, &p, &img).unwrap();
        let last = out.last().unwrap();
        assert_eq!(t.shape(last.class_logits), &[4, 4]);
        t.value(last.boxes).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn class_head_reset_changes_width() {
    let mut model = Model::new(tiny(4, 2), HeadMode::Pretext, 14).unwrap();
    assert_eq!(model.params().by_name("head.class.w").unwrap().shape(), &[16, 2]);
    model.reset_class_head(HeadMode::Detection, 1);
    assert_eq!(model.params().by_name("head.class.w").unwrap().shape(), &[16, 4]);
    assert_eq!(model.mode(), HeadMode::Detection);
}

#[test]
fn config_meta_round_trip_and_validation() {
    let cfg = ModelConfig::default();
    assert_eq!(ModelConfig::from_meta(&cfg.to_meta()).unwrap(), cfg);
    let bad = ModelConfig { n_heads: 3, ..ModelConfig::default() };
    assert!(bad.validate().is_err());
    let bad = ModelConfig { num_patches: 3, ..ModelConfig::default() };
    assert!(bad.validate().is_err());
    assert!(ModelConfig::from_meta(&Tensor::vector(vec![1.5; 16])).is_err());
}
