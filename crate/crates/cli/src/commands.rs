use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use absa_seq::checkpoint::Checkpoint;
use absa_seq::corpus::{build_vocabulary, load_dataset, load_sentences, AnnotatedExample, Triplet};
use absa_seq::encoder::load_pretrained;
use absa_seq::evaluation::EvalReport;
use absa_seq::model::Model;
use absa_seq::training::{check_model_gradients, predict as predict_all, prepare, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{existing_file, RunConfig};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train.log";
pub const DEV_REPORT_FILE: &str = "dev_report.json";

fn write_error(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::runtime(format!("cannot write {}: {e}", path.display()))
}

fn non_empty(field: &str, examples: Vec<AnnotatedExample>) -> Result<Vec<AnnotatedExample>, CliError> {
    if examples.is_empty() {
        return Err(CliError::field(field, "dataset is empty"));
    }
    Ok(examples)
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, Model), CliError> {
    let path = existing_file("--checkpoint", Some(path))?;
    let ck = Checkpoint::load(&path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    let model = ck.model().map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    Ok((ck, model))
}

fn optional_config(path: Option<&Path>) -> Result<Option<RunConfig>, CliError> {
    let Some(path) = path else { return Ok(None) };
    let config = RunConfig::load(path)?;
    config.validate()?;
    Ok(Some(config))
}

fn max_aspects(config: Option<&RunConfig>) -> usize {
    config.map_or(TrainConfig::default().max_aspects, |c| c.training.max_aspects)
}

fn greedy(ck: &Checkpoint, model: &Model, examples: &[AnnotatedExample], max_aspects: usize) -> Result<Vec<Vec<Triplet>>, CliError> {
    let sentences: Vec<_> = examples.iter().map(|ex| ck.vocab.index(ex.tokens())).collect();
    Ok(predict_all(model, &ck.params, &sentences, max_aspects)?)
}

pub fn train(config_path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), CliError> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(seed) = seed {
        config.training.seed = seed;
    }
    config.validate()?;
    let train_path = existing_file("paths.train", config.paths.train.as_deref())?;
    let dev_path = existing_file("paths.dev", config.paths.dev.as_deref())?;
    let pretrained = match &config.paths.pretrained {
        Some(p) => Some(existing_file("paths.pretrained", Some(p))?),
        None => None,
    };
    let out_dir = out
        .or_else(|| config.paths.checkpoint_dir.clone())
        .ok_or_else(|| CliError::field("paths.checkpoint_dir", "is required (or pass --out)"))?;

    let train_set = non_empty("paths.train", load_dataset(&train_path)?)?;
    let dev_set = non_empty("paths.dev", load_dataset(&dev_path)?)?;
    let vocab = build_vocabulary(&train_set, config.data.min_word_freq)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.training.seed);
    let (model, mut params) = Model::init::<f32, _>(config.model(), &vocab, &mut rng)?;
    if let Some(path) = &pretrained {
        let filled = load_pretrained(path, &vocab, &mut params, model.encoder.word_table)?;
        println!("pretrained vectors: {filled} of {} words", vocab.words.len());
    }

    fs::create_dir_all(&out_dir).map_err(write_error(&out_dir))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(write_error(&log_path))?);
    let train_data = prepare(&vocab, &train_set);
    let dev_data = prepare(&vocab, &dev_set);
    let mut trainer = Trainer::new(model, params, config.training.clone())?;
    let mut log_failure = None;
    let summary = trainer.fit(&train_data, &dev_data, |entry| {
        println!("{entry}");
        if let Err(e) = writeln!(log, "{entry}") {
            log_failure.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_failure {
        return Err(write_error(&log_path)(e));
    }
    log.flush().map_err(write_error(&log_path))?;
    println!("best_epoch={} best_dev_f1={:.4}", summary.best_epoch, summary.best_dev_f1);

    let ck = Checkpoint {
        config: trainer.model.config.clone(),
        vocab,
        params: trainer.params,
    };
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    ck.save(&ck_path).map_err(|e| CliError::runtime(e.to_string()))?;
    println!("checkpoint={}", ck_path.display());

    let predicted = greedy(&ck, &trainer.model, &dev_set, config.training.max_aspects)?;
    let gold: Vec<Vec<Triplet>> = dev_set.iter().map(|ex| ex.triplets().to_vec()).collect();
    let report = EvalReport::compute(&predicted, &gold)?;
    let report_path = out_dir.join(DEV_REPORT_FILE);
    fs::write(&report_path, report.to_json()).map_err(write_error(&report_path))?;
    print!("{report}");
    Ok(())
}

pub fn evaluate(
    checkpoint: &Path,
    data: Option<PathBuf>,
    config_path: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let config = optional_config(config_path)?;
    let data = match data {
        Some(d) => existing_file("--data", Some(&d))?,
        None => existing_file("paths.test", config.as_ref().and_then(|c| c.paths.test.as_deref()))?,
    };
    let (ck, model) = load_checkpoint(checkpoint)?;
    let examples = non_empty("--data", load_dataset(&data)?)?;
    let predicted = greedy(&ck, &model, &examples, max_aspects(config.as_ref()))?;
    let gold: Vec<Vec<Triplet>> = examples.iter().map(|ex| ex.triplets().to_vec()).collect();
    let report = EvalReport::compute(&predicted, &gold)?;
    print!("{report}");
    if let Some(out) = out {
        fs::write(out, report.to_json()).map_err(write_error(out))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Prediction<'a> {
    triplets: &'a [Triplet],
}

pub fn predict(checkpoint: &Path, data: &Path, config_path: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
    let config = optional_config(config_path)?;
    let data = existing_file("--data", Some(data))?;
    let (ck, model) = load_checkpoint(checkpoint)?;
    let sentences = load_sentences(&data)?;
    let predicted = greedy(&ck, &model, &sentences, max_aspects(config.as_ref()))?;
    let mut sink: Box<dyn Write> = match out {
        Some(path) => Box::new(BufWriter::new(File::create(path).map_err(write_error(path))?)),
        None => Box::new(io::stdout().lock()),
    };
    let target = out.unwrap_or(Path::new("<stdout>"));
    for triplets in &predicted {
        let line = serde_json::to_string(&Prediction { triplets }).expect("triplets serialize");
        writeln!(sink, "{line}").map_err(write_error(target))?;
    }
    sink.flush().map_err(write_error(target))
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn gradcheck(config_path: &Path, seed: Option<u64>, corrupt: Option<f64>) -> Result<(), CliError> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(seed) = seed {
        config.gradcheck.seed = seed;
    }
    config.validate()?;
    let data = existing_file("paths.gradcheck", config.paths.gradcheck.as_deref())?;
    let examples = non_empty("paths.gradcheck", load_dataset(&data)?)?;
    let report = check_model_gradients(&config.model(), &examples, &config.gradcheck, corrupt)?;
    println!("components={}", report.components);
    println!("max_relative_error={:.6e}", report.max_relative_error);
    println!("worst_param={}", report.worst_param.as_deref().unwrap_or("none"));
    println!("worst_index={}", report.worst_index);
    println!("worst_analytic={:.6e}", report.worst_analytic);
    println!("worst_numeric={:.6e}", report.worst_numeric);
    if report.max_relative_error < GRADCHECK_TOLERANCE {
        println!("result=pass");
        Ok(())
    } else {
        println!("result=fail");
        Err(CliError::runtime(format!(
            "gradient check failed: relative error {:.3e} on {} exceeds {GRADCHECK_TOLERANCE:e}",
            report.max_relative_error,
            report.worst_param.as_deref().unwrap_or("none")
        )))
    }
}
