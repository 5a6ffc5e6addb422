//! End-to-end drivers: k-fold training with JSONL logging, corpus
//! evaluation, single-image captioning, and attention export. The CLI is a
//! thin argument layer over these functions, and the integration tests call
//! them directly.
//!
//! Determinism contract: every random choice draws from a stream derived
//! from `(config.seed, stable label)` — fold assignment, per-fold parameter
//! init, batch order, augmentation, and noise corruption all have their own
//! labels — so a (seed, config, data) triple fully determines logs,
//! checkpoints, and captions.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::data::image::{load_and_augment, ImagePrep};
use crate::data::{build_vocab, kfold_split, DataError, Dataset};
use crate::decoder::{Decoder, DecoderConfig, DecoderError};
use crate::encoder::{Encoder, EncoderError};
use crate::infer::{beam_search, export_attention, greedy_decode, DecodeConfig, InferError};
use crate::metrics::{bleu4, BleuReport, MetricsError, Smoothing};
use crate::objective::{combined_loss, ObjectiveError};
use crate::optim::{cawr_factor, Adam, AdamConfig, OptimError, ParamGroup};
use crate::rng::{component_rng, stream_seed};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("failed to write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("non-finite loss at fold {fold} step {step}; aborting")]
    NonFinite { fold: usize, step: usize },
}

impl HarnessError {
    /// Process exit code: 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::NonFinite { .. } => 3,
            HarnessError::Data(_)
            | HarnessError::Checkpoint(_)
            | HarnessError::Metrics(_)
            | HarnessError::Io { .. } => 2,
            _ => 1,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint_paths: Vec<PathBuf>,
    pub log_path: PathBuf,
}

struct LogWriter {
    path: PathBuf,
    file: std::io::BufWriter<std::fs::File>,
}

impl LogWriter {
    fn create(path: PathBuf) -> Result<Self, HarnessError> {
        let file = std::fs::File::create(&path).map_err(|source| HarnessError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(LogWriter {
            file: std::io::BufWriter::new(file),
            path,
        })
    }

    fn line(&mut self, value: &serde_json::Value) -> Result<(), HarnessError> {
        let io_err = |source| HarnessError::Io {
            path: self.path.clone(),
            source,
        };
        serde_json::to_writer(&mut self.file, value)
            .map_err(|e| io_err(std::io::Error::other(e)))?;
        self.file.write_all(b"\n").map_err(io_err)?;
        self.file.flush().map_err(io_err)
    }
}

/// Train `config.folds` models on `data_dir`, writing `fold{f}.vckp`
/// checkpoints and `train_log.jsonl` under `out_dir`. With `folds = 1` the
/// whole dataset trains a single model; otherwise each fold's vocabulary is
/// built from its training folds only.
pub fn train(
    config: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<TrainOutcome, HarnessError> {
    config.validate()?;
    let dataset = Dataset::load_with(data_dir, config.ablation.preprocess)?;
    std::fs::create_dir_all(out_dir).map_err(|source| HarnessError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;

    let mut log = LogWriter::create(out_dir.join("train_log.jsonl"))?;
    log.line(&json!({"event": "config", "config": config}))?;

    let n = dataset.records.len();
    let fold_plan: Vec<(Vec<usize>, usize)> = if config.folds == 1 {
        vec![((0..n).collect(), 0)]
    } else {
        let split = kfold_split(n, config.folds, stream_seed(config.seed, "kfold"))?;
        (0..config.folds)
            .map(|f| (split.train_indices(f), split.val_indices(f).len()))
            .collect()
    };

    let noise_cfg = config.effective_noise();
    let prep = ImagePrep {
        image_size: config.encoder.image_size,
    };
    let mut checkpoint_paths = Vec::new();

    for (fold, (train_idx, val_len)) in fold_plan.into_iter().enumerate() {
        let train_captions: Vec<String> = train_idx
            .iter()
            .map(|&i| dataset.records[i].caption.clone())
            .collect();
        let vocab = build_vocab(&train_captions, 1)?;

        let encoder = Encoder::<f32>::new(
            config.encoder.clone(),
            &mut component_rng(config.seed, &format!("fold{fold}.encoder.init")),
        )?;
        let decoder = Decoder::<f32>::new(
            DecoderConfig {
                vocab_size: vocab.size(),
                enc_dim: config.encoder.out_dim(),
                ..config.decoder.clone()
            },
            &mut component_rng(config.seed, &format!("fold{fold}.decoder.init")),
        )?;

        let mut adam = Adam::new(
            vec![
                ParamGroup {
                    name: "encoder".into(),
                    base_lr: config.optim.lr_encoder,
                    params: encoder.named_params(),
                },
                ParamGroup {
                    name: "decoder".into(),
                    base_lr: config.optim.lr_decoder,
                    params: decoder.named_params(),
                },
            ],
            AdamConfig {
                weight_decay: config.optim.weight_decay,
                ..AdamConfig::default()
            },
        )?;

        let steps_per_epoch = train_idx.len().div_ceil(config.batch_size);
        let sched = config.sched.resolved(steps_per_epoch);
        let mut order_rng = component_rng(config.seed, &format!("fold{fold}.order"));
        let mut augment_rng = component_rng(config.seed, &format!("fold{fold}.augment"));
        let mut noise_rng = component_rng(config.seed, &format!("fold{fold}.noise"));

        log.line(&json!({
            "event": "fold_start",
            "fold": fold,
            "train_samples": train_idx.len(),
            "val_samples": val_len,
            "vocab_size": vocab.size(),
            "steps_per_epoch": steps_per_epoch,
        }))?;

        let mut step = 0usize;
        for epoch in 0..config.epochs {
            let mut order = train_idx.clone();
            use rand::seq::SliceRandom;
            order.shuffle(&mut order_rng);

            for batch in order.chunks(config.batch_size) {
                adam.zero_grads();
                let (mut main_sum, mut fake_sum, mut total_sum) = (0.0f64, 0.0f64, 0.0f64);
                let mut fake_seen = false;
                for &i in batch {
                    let record = &dataset.records[i];
                    let image = load_and_augment(
                        &dataset.image_path(record),
                        prep,
                        config.ablation.augment,
                        &mut augment_rng,
                    )?;
                    let enc = encoder.encode(&image)?;
                    let tokens = vocab.encode(&record.caption);
                    let loss =
                        combined_loss(&decoder, &enc, &tokens, &noise_cfg, &mut noise_rng)?;
                    let total = loss.total_value();
                    if !total.is_finite() {
                        log.line(&json!({
                            "event": "non_finite",
                            "fold": fold,
                            "step": step,
                            "record": record.id,
                        }))?;
                        return Err(HarnessError::NonFinite { fold, step });
                    }
                    main_sum += f64::from(loss.main_value());
                    if let Some(fake) = loss.fake_value() {
                        fake_sum += f64::from(fake);
                        fake_seen = true;
                    }
                    total_sum += f64::from(total);
                    // Scaling by 1/batch makes the accumulated gradients a
                    // batch mean rather than a sum.
                    loss.total.scale(1.0 / batch.len() as f32).backward()?;
                }
                let factor = cawr_factor(step, &sched)?;
                adam.step(factor)?;

                let denom = batch.len() as f64;
                log.line(&json!({
                    "event": "step",
                    "step": step,
                    "fold": fold,
                    "epoch": epoch,
                    "lr_factor": factor,
                    "main": main_sum / denom,
                    "fake": if fake_seen { Some(fake_sum / denom) } else { None },
                    "total": total_sum / denom,
                }))?;
                step += 1;
            }
        }

        let ckpt_name = format!("fold{fold}.vckp");
        let ckpt_path = out_dir.join(&ckpt_name);
        Checkpoint::from_model(config, &vocab, fold, &encoder, &decoder).save(&ckpt_path)?;
        // Only the file name goes in the log: logs must be byte-identical
        // across runs that differ solely in output location.
        log.line(&json!({
            "event": "fold_end",
            "fold": fold,
            "steps": step,
            "checkpoint": ckpt_name,
        }))?;
        checkpoint_paths.push(ckpt_path);
    }

    Ok(TrainOutcome {
        checkpoint_paths,
        log_path: log.path,
    })
}

/// Decode one preprocessed image with the checkpointed model. Width 1 takes
/// the dedicated greedy path; wider widths run beam search.
fn decode_image(
    encoder: &Encoder<f32>,
    decoder: &Decoder<f32>,
    ckpt: &Checkpoint,
    image_path: &Path,
    decode: &DecodeConfig,
) -> Result<Vec<u32>, HarnessError> {
    let prep = ImagePrep {
        image_size: ckpt.config.encoder.image_size,
    };
    // Eval-mode preprocessing draws nothing from the stream; the rng only
    // satisfies the shared transform signature.
    let mut rng = component_rng(ckpt.config.seed, "eval.image");
    let image = load_and_augment(image_path, prep, false, &mut rng)?;
    let enc = encoder.encode(&image)?;
    if decode.beam_width == 1 {
        Ok(greedy_decode(decoder, &enc, decode.max_len)?.0)
    } else {
        Ok(beam_search(decoder, &enc, decode)?.tokens)
    }
}

pub fn caption_image(
    ckpt: &Checkpoint,
    image_path: &Path,
    decode: &DecodeConfig,
) -> Result<String, HarnessError> {
    decode.validate()?;
    let (encoder, decoder) = ckpt.build_model()?;
    let tokens = decode_image(&encoder, &decoder, ckpt, image_path, decode)?;
    Ok(ckpt.vocab.decode(&tokens))
}

pub struct EvalOutcome {
    pub report: BleuReport,
    /// `(id, hypothesis, reference)` per record, in dataset order.
    pub pairs: Vec<(String, String, String)>,
}

/// Decode every dataset image and score corpus BLEU4 against the cleaned
/// references.
pub fn eval(
    ckpt: &Checkpoint,
    data_dir: &Path,
    decode: &DecodeConfig,
) -> Result<EvalOutcome, HarnessError> {
    decode.validate()?;
    let dataset = Dataset::load_with(data_dir, ckpt.config.ablation.preprocess)?;
    let (encoder, decoder) = ckpt.build_model()?;

    let mut pairs = Vec::with_capacity(dataset.records.len());
    for record in &dataset.records {
        let tokens = decode_image(
            &encoder,
            &decoder,
            ckpt,
            &dataset.image_path(record),
            decode,
        )?;
        pairs.push((
            record.id.clone(),
            ckpt.vocab.decode(&tokens),
            record.caption.clone(),
        ));
    }

    let tokenize = |s: &String| -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    };
    let hyps: Vec<Vec<String>> = pairs.iter().map(|(_, h, _)| tokenize(h)).collect();
    let refs: Vec<Vec<String>> = pairs.iter().map(|(_, _, r)| tokenize(r)).collect();
    let report = bleu4(&hyps, &refs, Smoothing::None)?;
    Ok(EvalOutcome { report, pairs })
}

/// Greedy-decode one image and write a PGM attention map per generated
/// token. Returns the written paths in step order.
pub fn attention_maps(
    ckpt: &Checkpoint,
    image_path: &Path,
    out_dir: &Path,
    max_len: usize,
) -> Result<Vec<PathBuf>, HarnessError> {
    let (encoder, decoder) = ckpt.build_model()?;
    let prep = ImagePrep {
        image_size: ckpt.config.encoder.image_size,
    };
    let mut rng = component_rng(ckpt.config.seed, "eval.image");
    let image = load_and_augment(image_path, prep, false, &mut rng)?;
    let enc = encoder.encode(&image)?;
    let (tokens, alphas) = greedy_decode(&decoder, &enc, max_len)?;
    let labels: Vec<String> = tokens[1..]
        .iter()
        .map(|&id| {
            ckpt.vocab
                .token(id)
                .unwrap_or("unk")
                .replace(['<', '>'], "")
        })
        .collect();
    Ok(export_attention(
        &alphas,
        &labels,
        enc.grid_h,
        enc.grid_w,
        ckpt.config.encoder.image_size,
        out_dir,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::image::{encode_ppm, PpmImage};
    use crate::encoder::EncoderConfig;

    /// Four 8×8 single-color images with three-word captions.
    fn write_toy_dataset(root: &Path) {
        let colors: [(&str, [u8; 3]); 4] = [
            ("đỏ", [220, 30, 30]),
            ("xanh", [30, 220, 30]),
            ("lam", [30, 30, 220]),
            ("vàng", [220, 220, 30]),
        ];
        let mut jsonl = String::new();
        for (i, (word, rgb)) in colors.iter().enumerate() {
            let pixels: Vec<u8> = std::iter::repeat(*rgb).take(64).flatten().collect();
            let img = PpmImage {
                width: 8,
                height: 8,
                maxval: 255,
                pixels,
            };
            let file = format!("img{i}.ppm");
            std::fs::write(root.join(&file), encode_ppm(&img)).unwrap();
            jsonl.push_str(&format!(
                "{}\n",
                json!({"id": format!("s{i}"), "file": file, "caption": format!("khối màu {word}")})
            ));
        }
        std::fs::write(root.join("captions.jsonl"), jsonl).unwrap();
    }

    fn toy_run_config() -> RunConfig {
        RunConfig {
            encoder: EncoderConfig {
                image_size: 8,
                patch_size: 2,
                embed_dim: 4,
                stages: vec![(1, 2)],
                window_size: 2,
                mlp_ratio: 2.0,
                use_relative_bias: true,
            },
            decoder: DecoderConfig {
                embed_dim: 8,
                hidden_dim: 12,
                layers: 1,
                ..DecoderConfig::default()
            },
            batch_size: 2,
            epochs: 2,
            folds: 1,
            seed: 11,
            ..RunConfig::default()
        }
    }

    #[test]
    fn train_writes_logs_and_a_loadable_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let out = dir.path().join("out");
        std::fs::create_dir_all(&data).unwrap();
        write_toy_dataset(&data);

        let outcome = train(&toy_run_config(), &data, &out).unwrap();
        assert_eq!(outcome.checkpoint_paths.len(), 1);

        let log = std::fs::read_to_string(&outcome.log_path).unwrap();
        let events: Vec<serde_json::Value> = log
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(events[0]["event"], "config");
        let steps: Vec<&serde_json::Value> =
            events.iter().filter(|e| e["event"] == "step").collect();
        // 4 samples, batch 2, 2 epochs → 4 steps.
        assert_eq!(steps.len(), 4);
        for s in &steps {
            assert!(s["lr_factor"].as_f64().unwrap() <= 1.0);
            assert!(s["total"].as_f64().unwrap().is_finite());
            assert!(s["main"].as_f64().unwrap() > 0.0);
        }

        let ckpt = Checkpoint::load(&outcome.checkpoint_paths[0]).unwrap();
        assert_eq!(ckpt.fold, 0);
        // Specials + {khối, màu, đỏ, xanh, lam, vàng}.
        assert_eq!(ckpt.vocab.size(), 10);
        ckpt.build_model().unwrap();
    }

    #[test]
    fn identical_seeds_give_identical_logs_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        std::fs::create_dir_all(&data).unwrap();
        write_toy_dataset(&data);

        let cfg = toy_run_config();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        let a = train(&cfg, &data, &out_a).unwrap();
        let b = train(&cfg, &data, &out_b).unwrap();

        assert_eq!(
            std::fs::read(&a.log_path).unwrap(),
            std::fs::read(&b.log_path).unwrap(),
            "same seed must reproduce the log byte-for-byte"
        );
        assert_eq!(
            std::fs::read(&a.checkpoint_paths[0]).unwrap(),
            std::fs::read(&b.checkpoint_paths[0]).unwrap()
        );

        let mut other = cfg;
        other.seed = 12;
        let out_c = dir.path().join("c");
        let c = train(&other, &data, &out_c).unwrap();
        assert_ne!(
            std::fs::read(&a.log_path).unwrap(),
            std::fs::read(&c.log_path).unwrap(),
            "a different seed must change the trajectory"
        );
    }

    #[test]
    fn zero_epochs_checkpoints_the_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let out = dir.path().join("out");
        std::fs::create_dir_all(&data).unwrap();
        write_toy_dataset(&data);

        let mut cfg = toy_run_config();
        cfg.epochs = 0;
        let outcome = train(&cfg, &data, &out).unwrap();
        let ckpt = Checkpoint::load(&outcome.checkpoint_paths[0]).unwrap();

        // The checkpoint must hold exactly the seeded initialization.
        let encoder = Encoder::<f32>::new(
            cfg.encoder.clone(),
            &mut component_rng(cfg.seed, "fold0.encoder.init"),
        )
        .unwrap();
        let expected: std::collections::HashMap<String, Vec<f32>> = encoder
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.to_vec()))
            .collect();
        for (name, tensor) in &ckpt.params {
            if let Some(want) = expected.get(name) {
                assert_eq!(&tensor.to_vec(), want, "{name} drifted without training");
            }
        }
        let log = std::fs::read_to_string(&outcome.log_path).unwrap();
        assert!(!log.lines().any(|l| l.contains("\"event\":\"step\"")));
    }

    #[test]
    fn kfold_training_builds_per_fold_vocabularies() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let out = dir.path().join("out");
        std::fs::create_dir_all(&data).unwrap();
        write_toy_dataset(&data);

        let mut cfg = toy_run_config();
        cfg.folds = 2;
        cfg.epochs = 1;
        let outcome = train(&cfg, &data, &out).unwrap();
        assert_eq!(outcome.checkpoint_paths.len(), 2);
        for (f, path) in outcome.checkpoint_paths.iter().enumerate() {
            let ckpt = Checkpoint::load(path).unwrap();
            assert_eq!(ckpt.fold, f);
            // Each fold trains on 2 of 4 color words + "khối màu" + specials.
            assert_eq!(ckpt.vocab.size(), 8);
        }
    }

    #[test]
    fn caption_eval_and_attention_run_from_a_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let out = dir.path().join("out");
        std::fs::create_dir_all(&data).unwrap();
        write_toy_dataset(&data);

        let outcome = train(&toy_run_config(), &data, &out).unwrap();
        let ckpt = Checkpoint::load(&outcome.checkpoint_paths[0]).unwrap();
        let decode = DecodeConfig {
            beam_width: 2,
            max_len: 8,
        };

        let text = caption_image(&ckpt, &data.join("img0.ppm"), &decode).unwrap();
        let text_again = caption_image(&ckpt, &data.join("img0.ppm"), &decode).unwrap();
        assert_eq!(text, text_again, "captioning must be deterministic");

        let eval_out = eval(&ckpt, &data, &decode).unwrap();
        assert_eq!(eval_out.pairs.len(), 4);
        assert!((0.0..=1.0).contains(&eval_out.report.bleu4));
        assert_eq!(eval_out.pairs[0].0, "s0");

        let maps = attention_maps(&ckpt, &data.join("img1.ppm"), &out.join("maps"), 8).unwrap();
        assert!(!maps.is_empty());
        for p in &maps {
            let bytes = std::fs::read(p).unwrap();
            assert!(bytes.starts_with(b"P5\n"));
        }
    }

    #[test]
    fn bad_data_and_bad_beam_map_to_distinct_exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nothing");
        let err = train(&toy_run_config(), &missing, &dir.path().join("o")).unwrap_err();
        assert_eq!(err.exit_code(), 2);

        let nonfinite = HarnessError::NonFinite { fold: 0, step: 3 };
        assert_eq!(nonfinite.exit_code(), 3);

        let mut cfg = toy_run_config();
        cfg.batch_size = 0;
        let err = train(&cfg, &missing, &dir.path().join("o")).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
