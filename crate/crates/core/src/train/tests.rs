use super::*;
use serde_json::json;

fn tiny(mode: &str) -> TrainConfig {
    TrainConfig::from_value(&json!({
        "mode": mode,
        "epochs": 3,
        "lr_drop_epoch": 2,
        "batch_size": 4,
        "d_model": 16,
        "n_heads": 2,
        "enc_layers": 1,
        "dec_layers": 1,
        "ffn_dim": 32,
        "num_queries": 4,
        "num_patches": 2,
        "max_patches": 4,
        "backbone_channels": 8,
        "patch_side": 8,
        "image_size": 32,
        "short_side_min": 32,
        "short_side_max": 40,
        "long_side_max": 48,
        "train_images": 10,
        "val_images": 4,
        "max_objects": 3,
    }))
    .unwrap()
}

#[test]
fn loss_decreases_over_two_epochs() {
    let cfg = TrainConfig::from_value(&json!({"epochs": 2, "lr_drop_epoch": 1, "train_images": 64})).unwrap();
    let t = pretrain(&cfg).unwrap();
    let totals = crate::eval::series(t.records(), "train", "loss_total");
    assert_eq!(totals.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 2]);
    assert!(totals[1].1 < totals[0].1, "{totals:?}");
    for m in ["loss_cls", "loss_box", "loss_rec"] {
        assert_eq!(crate::eval::series(t.records(), "train", m).len(), 2);
    }
}

#[test]
fn frozen_backbone_gets_no_optimizer_state() {
    let cfg = tiny("pretrain");
    let before = initial_model(&cfg, HeadMode::Pretext).unwrap();
    let t = pretrain(&cfg).unwrap();
    assert!(t.optimizer().moments.keys().all(|n| !Model::is_backbone(n)));
    assert!(!t.optimizer().moments.is_empty());
    for (name, v) in before.params().iter().filter(|(n, _)| Model::is_backbone(n)) {
        assert_eq!(t.model().params().by_name(name).unwrap(), v);
    }

    let open = TrainConfig { freeze_backbone: false, ..cfg };
    let t = pretrain(&open).unwrap();
    assert!(t.optimizer().moments.keys().any(|n| Model::is_backbone(n)));
    let moved = before
        .params()
        .iter()
        .filter(|(n, _)| Model::is_backbone(n))
        .any(|(n, v)| t.model().params().by_name(n).unwrap() != v);
    assert!(moved);
}

#[test]
fn runs_are_bitwise_reproducible() {
    let cfg = tiny("pretrain");
    let a = pretrain(&cfg).unwrap();
    let b = pretrain(&cfg).unwrap();
    assert_eq!(a.checkpoint().unwrap().encode(), b.checkpoint().unwrap().encode());
    assert_eq!(a.records(), b.records());
    let other = TrainConfig { seed: 1, ..cfg };
    let c = pretrain(&other).unwrap();
    assert_ne!(a.checkpoint().unwrap().encode(), c.checkpoint().unwrap().encode());
}

#[test]
fn resume_continues_exactly() {
    let cfg = tiny("pretrain");
    let mut full = Trainer::new(&cfg).unwrap();
    // stop mid-epoch: 10 images in batches of 4 take 3 steps per epoch
    for _ in 0..4 {
        full.step().unwrap();
    }
    let ck = Checkpoint::decode(&full.checkpoint().unwrap().encode()).unwrap();
    let mut resumed = Trainer::resume(&cfg, &ck, full.records().to_vec()).unwrap();
    assert_eq!(resumed.steps(), 4);
    let a = full.step().unwrap();
    let b = resumed.step().unwrap();
    assert_eq!(a, b);
    full.run().unwrap();
    resumed.run().unwrap();
    assert_eq!(full.records(), resumed.records());
    assert_eq!(full.checkpoint().unwrap().encode(), resumed.checkpoint().unwrap().encode());

    let fine = tiny("finetune");
    assert!(Trainer::resume(&fine, &ck, vec![]).is_err());
}

#[test]
fn step_limit_stops_mid_epoch() {
    let cfg = TrainConfig { max_steps: Some(2), ..tiny("pretrain") };
    let t = pretrain(&cfg).unwrap();
    assert_eq!((t.steps(), t.epoch()), (2, 0));
    assert!(t.records().is_empty());
}

#[test]
fn finetune_from_pretrained_and_scratch() {
    let dir = tempfile::tempdir().unwrap();
    let pre = pretrain(&tiny("pretrain")).unwrap();
    pre.save(dir.path()).unwrap();
    let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    let stored = Model::stored_params(&ck);

    let mut cfg = tiny("finetune");
    cfg.init_checkpoint = Some(dir.path().join(CHECKPOINT_FILE));
    let t = Trainer::new(&cfg).unwrap();
    for (name, v) in stored.iter().filter(|(n, _)| !Model::is_class_head(n)) {
        assert_eq!(t.model().params().by_name(name), Some(v), "{name}");
    }
    let k = t.model().params().by_name("head.class.w").unwrap();
    assert_eq!(k.shape(), &[16, 4]);

    let t = finetune(&cfg).unwrap();
    let ap = crate::eval::series(t.records(), "val", "ap50");
    assert_eq!(ap.len(), 3);
    assert!(ap.iter().all(|p| (0.0..=1.0).contains(&p.1)));

    cfg.init_checkpoint = None;
    finetune(&cfg).unwrap();

    let wide = TrainConfig { d_model: 32, init_checkpoint: Some(dir.path().join(CHECKPOINT_FILE)), ..tiny("finetune") };
    match Trainer::new(&wide) {
        Err(Error::Load(names)) => {
            assert!(names.iter().any(|n| n == "query_embed"), "{names:?}");
            assert!(names.iter().all(|n| !Model::is_class_head(n)));
        }
        other => panic!("expected a load error, got {:?}", other.err()),
    }
    let missing = TrainConfig { init_checkpoint: Some(dir.path().join("absent.ckpt")), ..tiny("finetune") };
    assert!(Trainer::new(&missing).err().unwrap().to_string().contains("absent.ckpt"));
}

#[test]
fn parameter_groups_use_their_own_rates() {
    let cfg = TrainConfig { lr_transformer: 1e-2, lr_backbone: 1e-4, weight_decay: 0.0, ..tiny("finetune") };
    let before = initial_model(&cfg, HeadMode::Detection).unwrap();
    let mut t = Trainer::new(&cfg).unwrap();
    t.step().unwrap();
    let max_delta = |backbone: bool| {
        before
            .params()
            .iter()
            .filter(|(n, _)| Model::is_backbone(n) == backbone)
            .flat_map(|(n, v)| {
                let after = t.model().params().by_name(n).unwrap();
                v.data().iter().zip(after.data()).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    };
    // a first Adam step moves every coordinate with a gradient by about lr
    let bb = max_delta(true);
    let tr = max_delta(false);
    assert!(bb > 0.5e-4 && bb <= 1e-4 * (1.0 + 1e-9), "{bb}");
    assert!(tr > 0.5e-2 && tr <= 1e-2 * (1.0 + 1e-9), "{tr}");
}

#[test]
fn mode_mismatch_and_empty_data() {
    assert!(pretrain(&tiny("finetune")).is_err());
    assert!(finetune(&tiny("pretrain")).is_err());
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(crate::pretext::MANIFEST_FILE), "").unwrap();
    let cfg = TrainConfig { data_dir: Some(dir.path().to_path_buf()), ..tiny("pretrain") };
    assert!(matches!(Trainer::new(&cfg), Err(Error::Input(_))));
}

#[test]
fn tiny_ablation_emits_every_row_and_comparison() {
    let v = json!({
        "epochs": 2, "lr_drop_epoch": 1, "batch_size": 4, "d_model": 16, "n_heads": 2, "enc_layers": 1,
        "dec_layers": 1, "ffn_dim": 32, "num_queries": 4, "num_patches": 2, "max_patches": 4,
        "backbone_channels": 8, "patch_side": 8, "image_size": 32, "short_side_min": 32,
        "short_side_max": 40, "long_side_max": 48, "train_images": 4, "val_images": 2, "max_objects": 3,
        "finetune.epochs": 2, "finetune.lr_drop_epoch": 1
    });
    let cfg = AblationConfig::from_value(&v).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let r = ablation_matrix(&cfg, Some(dir.path())).unwrap();
    let cases: Vec<&str> = r.rows.iter().map(|r| r.case.as_str()).collect();
    assert_eq!(cases, vec!["scratch", "a", "b", "c", "d"]);
    for row in &r.rows[1..] {
        assert_eq!(row.backbone_unchanged, row.freeze_backbone);
    }
    let titles: Vec<&str> = r.comparisons.iter().map(|c| c.title.as_str()).collect();
    assert!(titles.contains(&"attention_mask") && titles.contains(&"query_shuffle"));
    for c in &r.comparisons {
        assert!(c.absent.is_empty());
        assert_eq!(c.rows.len(), 2);
    }
    let table = std::fs::read_to_string(dir.path().join(TABLE_FILE)).unwrap();
    assert_eq!(table.lines().count(), 6);
    assert!(dir.path().join("compare_attention_mask.csv").exists());
    assert!(dir.path().join("runs/finetune_scratch").join(CURVES_FILE).exists());
}
