//! The three-stage training recipe: CTC encoder pre-training, LM decoder
//! pre-training, and RNN-T fine-tuning with partial transfer, plus
//! evaluation reports and run manifests.

use super::config::{Stage, TrainingConfig, UnitsConfig};
use super::data::{Dataset, Utterance};
use crate::ctc::{combine_hierarchical, ctc_loss, CtcPosteriorGrid};
use crate::decode::{beam_search, greedy_stream_decode, word_error_rate, DecodeConfig, EncodedRnnt};
use crate::error::{Error, Result};
use crate::lattice::TargetSequence;
use crate::lm::{lm_train_step, LmModel};
use crate::nnet::{
    add_assign, clip_global_norm, load_partial, sgd_step, Checkpoint, CheckpointMeta, EncoderNet,
    Joint, Linear, NameMap, Parameterized, PredictionNet, RnntModel,
};
use crate::units::{grapheme_index, grapheme_inventory, UnitFamily};
use crate::wordpiece::{segment_sentence, WordpieceVocab};
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

/// Resolves each unit family to vocabulary, targets, and word rendering.
/// The phoneme family stands for the task's abstract latent classes.
#[derive(Debug, Clone)]
pub struct UnitResolver {
    latent_vocab: Option<usize>,
    wordpiece: Option<WordpieceVocab>,
}

impl UnitResolver {
    pub fn from_units_config(units: &UnitsConfig) -> Result<Self> {
        let wordpiece = match &units.vocab_path {
            Some(path) => Some(WordpieceVocab::load(path)?),
            None => None,
        };
        Ok(Self {
            latent_vocab: units.vocab_size,
            wordpiece,
        })
    }

    pub fn new(latent_vocab: Option<usize>, wordpiece: Option<WordpieceVocab>) -> Self {
        Self {
            latent_vocab,
            wordpiece,
        }
    }

    pub fn vocab(&self, family: UnitFamily) -> Result<usize> {
        match family {
            UnitFamily::Phoneme => self
                .latent_vocab
                .ok_or_else(|| Error::Invalid("latent vocabulary size not configured".into())),
            UnitFamily::Grapheme => Ok(grapheme_inventory().len()),
            UnitFamily::Wordpiece => self
                .wordpiece
                .as_ref()
                .map(|w| w.size())
                .ok_or_else(|| Error::Invalid("wordpiece vocabulary not loaded".into())),
        }
    }

    /// Stable identifier of the unit inventory, recorded in checkpoints and
    /// checked before embedding transfer.
    pub fn vocab_hash(&self, family: UnitFamily) -> Result<String> {
        Ok(match family {
            UnitFamily::Phoneme => {
                let v = self.vocab(family)?;
                hex::encode(Sha256::digest(format!("latent-{v}").as_bytes()))
            }
            UnitFamily::Grapheme => {
                let inv: String = grapheme_inventory().into_iter().collect();
                hex::encode(Sha256::digest(inv.as_bytes()))
            }
            UnitFamily::Wordpiece => self
                .wordpiece
                .as_ref()
                .ok_or_else(|| Error::Invalid("wordpiece vocabulary not loaded".into()))?
                .hash(),
        })
    }

    pub fn targets(&self, family: UnitFamily, utt: &Utterance) -> Result<TargetSequence> {
        let vocab = self.vocab(family)?;
        let labels = match family {
            UnitFamily::Phoneme => utt.latent.clone(),
            UnitFamily::Grapheme => utt
                .transcript
                .chars()
                .map(|c| {
                    grapheme_index(c).ok_or_else(|| {
                        Error::Invalid(format!("transcript character {c:?} outside inventory"))
                    })
                })
                .collect::<Result<_>>()?,
            UnitFamily::Wordpiece => segment_sentence(
                &utt.transcript,
                self.wordpiece.as_ref().expect("checked by vocab()"),
            )?,
        };
        TargetSequence::new(labels, vocab)
    }

    /// Renders a decoded label sequence as words for WER scoring.
    pub fn words_from_labels(&self, family: UnitFamily, labels: &[usize]) -> Vec<String> {
        match family {
            UnitFamily::Phoneme => labels.iter().map(|l| l.to_string()).collect(),
            UnitFamily::Grapheme => {
                let inv = grapheme_inventory();
                let text: String = labels.iter().map(|&l| inv[l]).collect();
                text.split(' ')
                    .filter(|w| !w.is_empty())
                    .map(str::to_string)
                    .collect()
            }
            UnitFamily::Wordpiece => {
                let vocab = self.wordpiece.as_ref().expect("wordpiece vocab loaded");
                crate::wordpiece::detokenize(labels, vocab)
                    .split(' ')
                    .filter(|w| !w.is_empty())
                    .map(str::to_string)
                    .collect()
            }
        }
    }

    /// Reference words of an utterance for WER scoring.
    pub fn reference_words(&self, family: UnitFamily, utt: &Utterance) -> Vec<String> {
        match family {
            UnitFamily::Phoneme => utt.latent.iter().map(|l| l.to_string()).collect(),
            _ => utt
                .transcript
                .split(' ')
                .filter(|w| !w.is_empty())
                .map(str::to_string)
                .collect(),
        }
    }
}

/// Encoder plus per-tap CTC heads, the pre-training artifact. Heads are
/// discarded on transfer into an RNN-T encoder.
#[derive(Debug, Clone)]
pub struct CtcEncoderModel {
    pub encoder: EncoderNet,
    pub heads: Vec<Linear>,
}

impl CtcEncoderModel {
    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            heads: self.heads.iter().map(Linear::zeros_like).collect(),
        }
    }
}

impl Parameterized for CtcEncoderModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.encoder.visit(&format!("{prefix}encoder/"), f);
        for (i, head) in self.heads.iter().enumerate() {
            head.visit(&format!("{prefix}tap{i}/"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.encoder.visit_mut(&format!("{prefix}encoder/"), f);
        for (i, head) in self.heads.iter_mut().enumerate() {
            head.visit_mut(&format!("{prefix}tap{i}/"), f);
        }
    }
}

/// Builds a fresh, seeded RNN-T model from a config.
pub fn build_rnnt_model(cfg: &TrainingConfig, resolver: &UnitResolver) -> Result<RnntModel> {
    let vocab = resolver.vocab(cfg.units.family)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let encoder = EncoderNet::init(
        cfg.model.feature_dim,
        &cfg.model.encoder_widths,
        cfg.model.time_conv,
        &mut rng,
    )?;
    let embed_dim = cfg.model.embed_dim.unwrap_or(cfg.model.decoder_widths[0]);
    let prediction = PredictionNet::init(vocab, embed_dim, &cfg.model.decoder_widths, &mut rng)?;
    let joint = Joint::init(
        encoder.output_dim(),
        prediction.output_dim(),
        cfg.model.joint_width,
        vocab + 1,
        &mut rng,
    );
    Ok(RnntModel {
        encoder,
        prediction,
        joint,
    })
}

pub fn build_ctc_model(cfg: &TrainingConfig, resolver: &UnitResolver) -> Result<CtcEncoderModel> {
    let spec = cfg.hierarchical_spec()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let encoder = EncoderNet::init(
        cfg.model.feature_dim,
        &cfg.model.encoder_widths,
        cfg.model.time_conv,
        &mut rng,
    )?;
    let mut heads = Vec::new();
    for tap in spec.taps() {
        let width = cfg.model.encoder_widths[tap.depth - 1];
        heads.push(Linear::init(width, resolver.vocab(tap.units)? + 1, &mut rng));
    }
    Ok(CtcEncoderModel { encoder, heads })
}

pub fn build_lm_model(cfg: &TrainingConfig, resolver: &UnitResolver) -> Result<LmModel> {
    let vocab = resolver.vocab(cfg.units.family)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    LmModel::init(vocab, cfg.model.embed_dim, &cfg.model.decoder_widths, &mut rng)
}

/// Applies the pre-training transfers into a fresh RNN-T model per the
/// recipe: CTC checkpoint -> encoder (tap heads discarded), LM checkpoint
/// -> prediction network (softmax head discarded, embedding hash-gated).
/// Returns one report line per model tensor: "transferred" or "fresh".
pub fn apply_transfers(
    model: &mut RnntModel,
    encoder_source: Option<&Checkpoint>,
    decoder_source: Option<&Checkpoint>,
    model_vocab_hash: &str,
) -> Result<Vec<String>> {
    let mut transferred = std::collections::BTreeSet::new();
    if let Some(ckpt) = encoder_source {
        let map = NameMap::new().rule("encoder/", "encoder/").discard("tap");
        let report = load_partial(ckpt, model, &map, Some(model_vocab_hash))?;
        transferred.extend(report.transferred.into_iter().map(|(_, dst)| dst));
    }
    if let Some(ckpt) = decoder_source {
        let map = NameMap::new()
            .rule("lstm", "prediction/lstm")
            .rule("embedding/", "prediction/embedding/")
            .discard("softmax/");
        let report = load_partial(ckpt, model, &map, Some(model_vocab_hash))?;
        transferred.extend(report.transferred.into_iter().map(|(_, dst)| dst));
    }
    let mut lines = Vec::new();
    model.visit("", &mut |name, _, _| {
        let status = if transferred.contains(name) {
            "transferred"
        } else {
            "fresh"
        };
        lines.push(format!("{name}\t{status}"));
    });
    Ok(lines)
}

fn batches(
    n: usize,
    batch_size: usize,
    steps: usize,
    seed: u64,
) -> impl Iterator<Item = Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a17_ba7c);
    let mut cursor = n; // force an initial shuffle
    (0..steps).map(move |_| {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        batch
    })
}

/// RNN-T training loop: synchronous SGD with global-norm clipping. Returns
/// the per-step mean loss curve.
pub fn train_rnnt_model(
    cfg: &TrainingConfig,
    model: &mut RnntModel,
    train: &[Utterance],
    resolver: &UnitResolver,
) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let opt = &cfg.optimizer;
    let mut losses = Vec::with_capacity(opt.steps);
    let mut velocity = model.zeros_like();
    for batch in batches(train.len(), opt.batch_size, opt.steps, cfg.seed) {
        let mut grads = model.zeros_like();
        let mut loss_sum = 0.0;
        for &i in &batch {
            let utt = &train[i];
            let target = resolver.targets(cfg.units.family, utt)?;
            let step = model.loss_and_grads(&utt.frames, &target)?;
            loss_sum += step.loss;
            add_assign(&mut grads, &step.grads);
        }
        let scale = 1.0 / batch.len() as f64;
        crate::nnet::scale(&mut grads, scale);
        clip_global_norm(&mut grads, opt.clip_norm);
        crate::nnet::scale(&mut velocity, opt.momentum);
        add_assign(&mut velocity, &grads);
        sgd_step(model, &velocity, opt.learning_rate);
        losses.push(loss_sum * scale);
    }
    Ok(losses)
}

/// Hierarchical-CTC training loop over the encoder and tap heads.
/// Infeasible (too-short) utterances contribute nothing to the gradient.
pub fn train_ctc_model(
    cfg: &TrainingConfig,
    model: &mut CtcEncoderModel,
    train: &[Utterance],
    resolver: &UnitResolver,
) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let spec = cfg.hierarchical_spec()?;
    let opt = &cfg.optimizer;
    let mut losses = Vec::with_capacity(opt.steps);
    let mut velocity = model.zeros_like();
    for batch in batches(train.len(), opt.batch_size, opt.steps, cfg.seed) {
        let mut grads = model.zeros_like();
        let mut loss_sum = 0.0;
        let mut feasible = 0usize;
        for &bi in &batch {
            let utt = &train[bi];
            let (enc_out, cache) = model.encoder.forward(&utt.frames)?;
            let mut tap_losses = Vec::with_capacity(spec.taps().len());
            let mut tap_activations = Vec::with_capacity(spec.taps().len());
            let mut all_feasible = true;
            for (tap, head) in spec.taps().iter().zip(&model.heads) {
                let acts = model.encoder.tap_activations(&cache, tap.depth)?;
                let mut logits = Vec::with_capacity(acts.len() * head.w.nrows());
                for a in acts {
                    logits.extend(head.forward(a)?.iter());
                }
                let grid =
                    CtcPosteriorGrid::from_logits(acts.len(), head.w.nrows() - 1, logits)?;
                let target = resolver.targets(tap.units, utt)?;
                match ctc_loss(&grid, &target)? {
                    crate::ctc::CtcOutcome::Feasible { loss, logit_grad } => {
                        tap_losses.push((loss, logit_grad));
                        tap_activations.push(acts.to_vec());
                    }
                    crate::ctc::CtcOutcome::Infeasible => {
                        all_feasible = false;
                        break;
                    }
                }
            }
            if !all_feasible {
                continue;
            }
            feasible += 1;
            let (total, scaled_grads) = combine_hierarchical(&tap_losses, &spec)?;
            loss_sum += total;
            let mut injected: Vec<(usize, Vec<Array1<f64>>)> = Vec::new();
            for ((tap, head), (acts, logit_grad)) in spec
                .taps()
                .iter()
                .zip(&model.heads)
                .zip(tap_activations.iter().zip(&scaled_grads))
            {
                let width = head.w.nrows();
                let head_grad = &mut grads.heads[injected.len()];
                let mut d_acts = Vec::with_capacity(acts.len());
                for (t, a) in acts.iter().enumerate() {
                    let d_logits =
                        Array1::from_vec(logit_grad[t * width..(t + 1) * width].to_vec());
                    d_acts.push(head.backward(head_grad, a, &d_logits));
                }
                injected.push((tap.depth, d_acts));
            }
            let zero_final = vec![Array1::zeros(model.encoder.output_dim()); enc_out.len()];
            let (enc_grads, _) = model.encoder.backward(&cache, zero_final, &injected);
            add_assign(&mut grads.encoder, &enc_grads);
        }
        if feasible > 0 {
            let scale = 1.0 / feasible as f64;
            crate::nnet::scale(&mut grads, scale);
            clip_global_norm(&mut grads, opt.clip_norm);
            crate::nnet::scale(&mut velocity, opt.momentum);
            add_assign(&mut velocity, &grads);
            sgd_step(model, &velocity, opt.learning_rate);
            losses.push(loss_sum * scale);
        } else {
            losses.push(f64::INFINITY);
        }
    }
    Ok(losses)
}

/// LM training loop over segmented transcripts.
pub fn train_lm_model(
    cfg: &TrainingConfig,
    model: &mut LmModel,
    train: &[Utterance],
    resolver: &UnitResolver,
) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let opt = &cfg.optimizer;
    let sequences: Vec<Vec<usize>> = train
        .iter()
        .map(|u| {
            resolver
                .targets(cfg.units.family, u)
                .map(|t| t.labels().to_vec())
        })
        .collect::<Result<_>>()?;
    let mut losses = Vec::with_capacity(opt.steps);
    let mut velocity = model.zeros_like();
    for batch in batches(sequences.len(), opt.batch_size, opt.steps, cfg.seed) {
        let refs: Vec<Vec<usize>> = batch.iter().map(|&i| sequences[i].clone()).collect();
        let (loss, mut grads) = lm_train_step(model, &refs)?;
        clip_global_norm(&mut grads, opt.clip_norm);
        crate::nnet::scale(&mut velocity, opt.momentum);
        add_assign(&mut velocity, &grads);
        sgd_step(model, &velocity, opt.learning_rate);
        losses.push(loss);
    }
    Ok(losses)
}

/// Everything a stage run produces.
pub struct StageResult {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
    /// Step-0 transfer report (rnnt stage only).
    pub transfer_lines: Vec<String>,
    pub rnnt_model: Option<RnntModel>,
}

/// Runs one training stage in memory.
pub fn run_stage(cfg: &TrainingConfig, dataset: &Dataset) -> Result<StageResult> {
    let resolver = UnitResolver::from_units_config(&cfg.units)?;
    let family = cfg.units.family;
    let hash = resolver.vocab_hash(family)?;
    match cfg.stage {
        Stage::Ctc => {
            let mut model = build_ctc_model(cfg, &resolver)?;
            let losses = train_ctc_model(cfg, &mut model, &dataset.train, &resolver)?;
            Ok(StageResult {
                checkpoint: Checkpoint::from_model(
                    &model,
                    CheckpointMeta {
                        unit_family: family.to_string(),
                        vocab_hash: hash,
                    },
                ),
                losses,
                transfer_lines: Vec::new(),
                rnnt_model: None,
            })
        }
        Stage::Lm => {
            let mut model = build_lm_model(cfg, &resolver)?;
            let losses = train_lm_model(cfg, &mut model, &dataset.train, &resolver)?;
            Ok(StageResult {
                checkpoint: Checkpoint::from_model(
                    &model,
                    CheckpointMeta {
                        unit_family: family.to_string(),
                        vocab_hash: hash,
                    },
                ),
                losses,
                transfer_lines: Vec::new(),
                rnnt_model: None,
            })
        }
        Stage::Rnnt => {
            let mut model = build_rnnt_model(cfg, &resolver)?;
            let encoder_src = cfg
                .transfer
                .encoder_source
                .as_ref()
                .map(|p| Checkpoint::load(p))
                .transpose()?;
            let decoder_src = cfg
                .transfer
                .decoder_source
                .as_ref()
                .map(|p| Checkpoint::load(p))
                .transpose()?;
            let transfer_lines = apply_transfers(
                &mut model,
                encoder_src.as_ref(),
                decoder_src.as_ref(),
                &hash,
            )?;
            let losses = train_rnnt_model(cfg, &mut model, &dataset.train, &resolver)?;
            Ok(StageResult {
                checkpoint: Checkpoint::from_model(
                    &model,
                    CheckpointMeta {
                        unit_family: family.to_string(),
                        vocab_hash: hash,
                    },
                ),
                losses,
                transfer_lines,
                rnnt_model: Some(model),
            })
        }
    }
}

/// Runs a stage and writes the run directory: metrics.csv (append-only),
/// checkpoint.ckpt, transfer_report.txt, and a manifest sufficient to
/// reproduce the run.
pub fn run_stage_to_dir(
    cfg: &TrainingConfig,
    dataset: &Dataset,
    run_dir: &Path,
) -> Result<StageResult> {
    std::fs::create_dir_all(run_dir)?;
    let result = run_stage(cfg, dataset)?;

    let metrics_path = run_dir.join("metrics.csv");
    let mut metrics = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)?,
    );
    writeln!(metrics, "step,loss")?;
    for (i, loss) in result.losses.iter().enumerate() {
        writeln!(metrics, "{},{:.17e}", i, loss)?;
    }
    metrics.flush()?;

    let ckpt_path = run_dir.join("checkpoint.ckpt");
    result.checkpoint.save(&ckpt_path)?;

    if !result.transfer_lines.is_empty() {
        let tmp = run_dir.join("transfer_report.txt.tmp");
        std::fs::write(&tmp, result.transfer_lines.join("\n") + "\n")?;
        std::fs::rename(tmp, run_dir.join("transfer_report.txt"))?;
    }

    let ckpt_hash = hex::encode(Sha256::digest(std::fs::read(&ckpt_path)?));
    let manifest = serde_json::json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "stage": match cfg.stage { Stage::Ctc => "ctc", Stage::Lm => "lm", Stage::Rnnt => "rnnt" },
        "checkpoint_sha256": ckpt_hash,
        "steps": result.losses.len(),
    });
    let tmp = run_dir.join("manifest.json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(&manifest).expect("json"))?;
    std::fs::rename(tmp, run_dir.join("manifest.json"))?;
    Ok(result)
}

/// One decoded utterance in an evaluation report.
#[derive(Debug, Clone)]
pub struct UttResult {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub wer: f64,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_words: usize,
    /// Edit distance over raw label sequences / reference label count.
    pub label_error_rate: f64,
    pub utterances: Vec<UttResult>,
}

/// Decodes a split and scores it against the ground truth.
pub fn evaluate(
    model: &RnntModel,
    utterances: &[Utterance],
    resolver: &UnitResolver,
    family: UnitFamily,
    decode_cfg: &DecodeConfig,
    use_beam: bool,
) -> Result<EvalReport> {
    let mut errors = (0usize, 0usize, 0usize);
    let mut ref_words_total = 0usize;
    let mut label_edits = 0usize;
    let mut label_refs = 0usize;
    let mut results = Vec::with_capacity(utterances.len());
    for utt in utterances {
        let encoded = EncodedRnnt::new(model, &utt.frames)?;
        let (labels, score) = if use_beam {
            let nbest = beam_search(&encoded, decode_cfg, 1);
            match nbest.into_iter().next() {
                Some(h) => (h.labels, h.score),
                None => (Vec::new(), f64::NEG_INFINITY),
            }
        } else {
            let (labels, _) = greedy_stream_decode(&encoded, decode_cfg, None);
            (labels, 0.0)
        };
        let hyp_words = resolver.words_from_labels(family, &labels);
        let ref_words = resolver.reference_words(family, utt);
        let report = word_error_rate(&ref_words, &hyp_words);
        errors.0 += report.substitutions;
        errors.1 += report.insertions;
        errors.2 += report.deletions;
        ref_words_total += ref_words.len();

        let ref_labels = resolver.targets(family, utt)?;
        let label_report = word_error_rate(ref_labels.labels(), &labels);
        label_edits += label_report.errors();
        label_refs += ref_labels.len();

        results.push(UttResult {
            id: utt.id.clone(),
            reference: ref_words.join(" "),
            hypothesis: hyp_words.join(" "),
            score,
        });
    }
    let total_errors = errors.0 + errors.1 + errors.2;
    Ok(EvalReport {
        wer: total_errors as f64 / ref_words_total.max(1) as f64,
        substitutions: errors.0,
        insertions: errors.1,
        deletions: errors.2,
        reference_words: ref_words_total,
        label_error_rate: label_edits as f64 / label_refs.max(1) as f64,
        utterances: results,
    })
}
