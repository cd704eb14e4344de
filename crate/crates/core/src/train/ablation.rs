use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde_json::{Map, Value};

use super::{initial_model, TrainConfig, TrainMode, Trainer, SCHEDULE_KEYS};
use crate::error::{Error, Result};
use crate::eval::{compare, series, Comparison, CurveRecord};
use crate::model::{HeadMode, Model, ModelFlags};

pub const TABLE_FILE: &str = "table.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

/// Prefix marking a key that only applies to the fine-tuning half.
pub const FINETUNE_PREFIX: &str = "finetune.";

/// One pre-training variant over frozen CNN × feature reconstruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationCase {
    pub label: &'static str,
    pub freeze_backbone: bool,
    pub use_reconstruction: bool,
}

pub const ABLATION_CASES: [AblationCase; 4] = [
    AblationCase { label: "a", freeze_backbone: false, use_reconstruction: false },
    AblationCase { label: "b", freeze_backbone: true, use_reconstruction: false },
    AblationCase { label: "c", freeze_backbone: false, use_reconstruction: true },
    AblationCase { label: "d", freeze_backbone: true, use_reconstruction: true },
];

/// Pre-training and fine-tuning settings for an ablation study.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl AblationConfig {
    /// Reads a flat object. Plain keys configure pre-training and, except
    /// for schedule keys, fine-tuning too; `finetune.`-prefixed keys apply
    /// to fine-tuning only.
    pub fn from_value(v: &Value) -> Result<Self> {
        let obj = v.as_object().ok_or_else(|| Error::Config("ablation config must be a JSON object".into()))?;
        let mut plain = Map::new();
        let mut fine = Map::new();
        for (k, v) in obj {
            match k.strip_prefix(FINETUNE_PREFIX) {
                Some(rest) => {
                    if rest == "mode" {
                        return Err(Error::Config(format!("key `{k}` cannot be set")));
                    }
                    fine.insert(rest.to_string(), v.clone());
                }
                None => {
                    plain.insert(k.clone(), v.clone());
                }
            }
        }
        if plain.get("mode").is_some_and(|m| m != "pretrain") {
            return Err(Error::Config("key `mode`: an ablation pre-trains first".into()));
        }
        let pretrain = TrainConfig::from_value(&Value::Object(plain.clone()))?;
        let mut finetune = TrainConfig::defaults(TrainMode::Finetune);
        let mut merged: Map<String, Value> =
            plain.into_iter().filter(|(k, _)| !SCHEDULE_KEYS.contains(&k.as_str())).collect();
        for (k, v) in &fine {
            if !TrainConfig::is_key(k) {
                return Err(Error::Config(format!("unknown key `{FINETUNE_PREFIX}{k}`")));
            }
            merged.insert(k.clone(), v.clone());
        }
        finetune.apply(&merged)?;
        Ok(AblationConfig { pretrain, finetune })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        Self::from_value(&v)
    }
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub case: String,
    /// `None` for the scratch baseline.
    pub freeze_backbone: Option<bool>,
    pub use_reconstruction: Option<bool>,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Whether pre-training left the backbone bitwise untouched.
    pub backbone_unchanged: Option<bool>,
}

#[derive(Clone, Debug, Default)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub comparisons: Vec<Comparison>,
    /// Curve records of every run, by run name.
    pub curves: BTreeMap<String, Vec<CurveRecord>>,
}

impl AblationReport {
    pub fn table_csv(&self) -> String {
        let mut s = String::from("case,frozen_cnn,feature_reconstruction,ap,ap50,ap75,backbone_unchanged\n");
        let flag = |f: Option<bool>| f.map_or("-".to_string(), |b| u8::from(b).to_string());
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{}",
                r.case,
                flag(r.freeze_backbone),
                flag(r.use_reconstruction),
                r.ap,
                r.ap50,
                r.ap75,
                flag(r.backbone_unchanged)
            )
            .unwrap();
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::from("case   frozen  rec   AP      AP50    AP75\n");
        let mark = |f: Option<bool>| match f {
            Some(true) => "yes",
            Some(false) => "no",
            None => "-",
        };
        for r in &self.rows {
            writeln!(
                s,
                "{:<6} {:<7} {:<5} {:.4}  {:.4}  {:.4}",
                r.case,
                mark(r.freeze_backbone),
                mark(r.use_reconstruction),
                r.ap,
                r.ap50,
                r.ap75
            )
            .unwrap();
        }
        for c in &self.comparisons {
            s.push('\n');
            s.push_str(&c.summary());
        }
        s
    }

    /// Writes the table, the summary, every comparison and each run's curves.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let put = |name: &str, text: &str| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        put(TABLE_FILE, &self.table_csv())?;
        put(SUMMARY_FILE, &self.summary())?;
        for c in &self.comparisons {
            put(&format!("compare_{}.csv", c.title), &c.to_csv())?;
        }
        for (name, records) in &self.curves {
            crate::eval::write_csv(&dir.join("runs").join(name).join(super::CURVES_FILE), records)?;
        }
        Ok(())
    }
}

struct PretrainRun {
    trainer: Trainer,
    backbone_unchanged: bool,
}

fn backbone_unchanged(before: &Model, after: &Model) -> bool {
    before.params().iter().filter(|(n, _)| Model::is_backbone(n)).all(|(n, t)| {
        after
            .params()
            .by_name(n)
            .is_some_and(|u| u.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()))
    })
}

fn run_pretrain(cfg: &TrainConfig) -> Result<PretrainRun> {
    let before = initial_model(cfg, HeadMode::Pretext)?;
    let mut trainer = Trainer::from_weights(cfg, None)?;
    trainer.run()?;
    let backbone_unchanged = backbone_unchanged(&before, trainer.model());
    Ok(PretrainRun { trainer, backbone_unchanged })
}

fn final_ap(t: &Trainer) -> (f64, f64, f64) {
    let last = |m: &str| series(t.records(), "val", m).last().map_or(0.0, |p| p.1);
    (last("ap"), last("ap50"), last("ap75"))
}

fn with_flags(cfg: &TrainConfig, f: impl FnOnce(&mut ModelFlags)) -> TrainConfig {
    let mut flags = cfg.flags();
    f(&mut flags);
    let mut c = cfg.clone();
    c.freeze_backbone = flags.freeze_backbone;
    c.use_attention_mask = flags.use_attention_mask;
    c.use_query_shuffle = flags.use_query_shuffle;
    c.use_reconstruction = flags.use_reconstruction;
    c.aux_losses = flags.aux_losses;
    c
}

/// Pre-trains the four frozen-CNN × reconstruction variants, fine-tunes each
/// plus a scratch baseline, and pairs pre-training runs that differ only in
/// the attention mask, the query shuffle, or the number of query patches.
///
/// With `out`, each run's checkpoint and curves are written below it as they
/// finish.
pub fn ablation_matrix(cfg: &AblationConfig, out: Option<&Path>) -> Result<AblationReport> {
    let pre = &cfg.pretrain;
    let mut report = AblationReport::default();
    let mut pretrained: BTreeMap<String, PretrainRun> = BTreeMap::new();
    let save = |name: &str, t: &Trainer| -> Result<()> {
        match out {
            Some(dir) => t.save(&dir.join("runs").join(name)),
            None => Ok(()),
        }
    };

    let mut variants: Vec<(String, TrainConfig)> = ABLATION_CASES
        .iter()
        .map(|c| {
            let cfg = with_flags(pre, |f| {
                f.freeze_backbone = c.freeze_backbone;
                f.use_reconstruction = c.use_reconstruction;
            });
            (format!("pretrain_{}", c.label), cfg)
        })
        .collect();
    variants.push(("pretrain_base".into(), pre.clone()));
    variants.push(("pretrain_mask_off".into(), with_flags(pre, |f| f.use_attention_mask = false)));
    variants.push(("pretrain_mask_on".into(), with_flags(pre, |f| f.use_attention_mask = true)));
    variants.push(("pretrain_shuffle_off".into(), with_flags(pre, |f| f.use_query_shuffle = false)));
    variants.push(("pretrain_shuffle_on".into(), with_flags(pre, |f| f.use_query_shuffle = true)));
    let single = TrainConfig { num_patches: 1, ..pre.clone() };
    variants.push(("pretrain_single_patch".into(), single));

    // identical configurations are trained once and shared
    let mut alias: BTreeMap<String, String> = BTreeMap::new();
    for (name, vcfg) in &variants {
        if let Some((first, _)) = variants.iter().find(|(n, c)| c == vcfg && pretrained.contains_key(n)) {
            alias.insert(name.clone(), first.clone());
            continue;
        }
        let run = run_pretrain(vcfg)?;
        save(name, &run.trainer)?;
        report.curves.insert(name.clone(), run.trainer.records().to_vec());
        pretrained.insert(name.clone(), run);
        alias.insert(name.clone(), name.clone());
    }
    let get = |name: &str| &pretrained[&alias[name]];

    let mut finetuned: BTreeMap<String, Trainer> = BTreeMap::new();
    let mut fine_runs: Vec<(String, Option<String>)> =
        ABLATION_CASES.iter().map(|c| (c.label.to_string(), Some(format!("pretrain_{}", c.label)))).collect();
    fine_runs.push(("scratch".into(), None));
    fine_runs.push(("base".into(), Some("pretrain_base".into())));
    fine_runs.push(("single_patch".into(), Some("pretrain_single_patch".into())));
    for (label, source) in &fine_runs {
        let init = source.as_ref().map(|s| get(s).trainer.model().params().clone());
        let mut t = Trainer::from_weights(&cfg.finetune, init.as_ref())?;
        t.run()?;
        let name = format!("finetune_{label}");
        save(&name, &t)?;
        report.curves.insert(name, t.records().to_vec());
        finetuned.insert(label.clone(), t);
    }

    let mut rows = vec![{
        let (ap, ap50, ap75) = final_ap(&finetuned["scratch"]);
        AblationRow {
            case: "scratch".into(),
            freeze_backbone: None,
            use_reconstruction: None,
            ap,
            ap50,
            ap75,
            backbone_unchanged: None,
        }
    }];
    for c in &ABLATION_CASES {
        let (ap, ap50, ap75) = final_ap(&finetuned[c.label]);
        rows.push(AblationRow {
            case: c.label.into(),
            freeze_backbone: Some(c.freeze_backbone),
            use_reconstruction: Some(c.use_reconstruction),
            ap,
            ap50,
            ap75,
            backbone_unchanged: Some(get(&format!("pretrain_{}", c.label)).backbone_unchanged),
        });
    }
    report.rows = rows;

    let curves = |name: &str| Some(get(name).trainer.records());
    report.comparisons.push(compare(
        "attention_mask",
        ("mask_off", curves("pretrain_mask_off")),
        ("mask_on", curves("pretrain_mask_on")),
        "train",
        "loss_total",
    ));
    report.comparisons.push(compare(
        "query_shuffle",
        ("shuffle_off", curves("pretrain_shuffle_off")),
        ("shuffle_on", curves("pretrain_shuffle_on")),
        "train",
        "loss_total",
    ));
    report.comparisons.push(compare(
        "query_patches",
        ("single_patch", Some(finetuned["single_patch"].records())),
        ("multi_patch", Some(finetuned["base"].records())),
        "val",
        "ap50",
    ));
    report.comparisons.push(compare(
        "pretraining",
        ("scratch", Some(finetuned["scratch"].records())),
        ("pretrained", Some(finetuned["base"].records())),
        "val",
        "ap50",
    ));
    if let Some(dir) = out {
        report.write(dir)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn split_config() {
        let c = AblationConfig::from_value(&json!({
            "epochs": 3, "lr_drop_epoch": 2, "d_model": 32, "finetune.epochs": 5, "finetune.lr_drop_epoch": 4
        }))
        .unwrap();
        assert_eq!((c.pretrain.epochs, c.finetune.epochs), (3, 5));
        assert_eq!(c.finetune.mode, TrainMode::Finetune);
        assert_eq!(c.finetune.d_model, 32);
        let e = AblationConfig::from_value(&json!({"finetune.bogus": 1})).unwrap_err().to_string();
        assert!(e.contains("finetune.bogus"), "{e}");
        assert!(AblationConfig::from_value(&json!({"mode": "finetune"})).is_err());
    }

    #[test]
    fn cases_cover_the_grid() {
        let mut seen: Vec<(bool, bool)> =
            ABLATION_CASES.iter().map(|c| (c.freeze_backbone, c.use_reconstruction)).collect();
        seen.sort();
        assert_eq!(seen, vec![(false, false), (false, true), (true, false), (true, true)]);
    }
}
