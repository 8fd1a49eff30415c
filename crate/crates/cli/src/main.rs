//! Command-line frontend for the visual-prompt pipeline.
//!
//! Every stage reads and writes the versioned JSON artifacts from
//! `vprompt_core::io`, so stages can be re-run, swapped out, or diffed. All
//! randomness flows from one seed; running a command twice with the same
//! inputs produces byte-identical output files.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid input (parse or
//! validation), 3 runtime failure (I/O, internal errors, or a gradient check
//! above tolerance).

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use vprompt_core::io;
use vprompt_core::testbed::{generate, make_paired_tasks, split_dataset, TestbedSpec};
use vprompt_core::{
    build_similarity_dictionary, combined_inference, construct_prompts, detect,
    end_to_end_gradient_check, evaluate, train_visual_prompts, Dataset, Error, SeededRng,
    SimilarityDictionary, TrainConfig, Vocabulary,
};

#[derive(Parser)]
#[command(
    name = "vprompt",
    version,
    about = "Learn visual prompts against frozen region features"
)]
struct Cli {
    /// Override the seed from the config or spec file
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// JSON config file: a training config, or a testbed spec for `gen`
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (created if missing)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task: vocabulary plus train/eval datasets
    Gen {
        /// Generate two tasks with disjoint categories and a shared
        /// vocabulary, under `a/` and `b/`
        #[arg(long)]
        paired: bool,
        /// Images in the train split (default: two thirds)
        #[arg(long)]
        train_images: Option<usize>,
    },
    /// Build one similarity dictionary per dataset category
    BuildDict {
        /// Dataset providing the context queries
        #[arg(long)]
        data: PathBuf,
        /// Vocabulary to mine entries from
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Construct prompts from the vocabulary prior and train them
    Train {
        /// Training dataset
        #[arg(long)]
        data: PathBuf,
        /// Vocabulary for the construction prior
        #[arg(long)]
        vocab: PathBuf,
        /// Dictionaries file; without it, training runs with empty
        /// dictionaries (no negative prompts)
        #[arg(long)]
        dicts: Option<PathBuf>,
    },
    /// Score a dataset with trained prompts and report detection metrics
    Eval {
        /// Evaluation dataset
        #[arg(long)]
        data: PathBuf,
        /// Prompts file to evaluate
        #[arg(long)]
        prompts: PathBuf,
    },
    /// Evaluate prompt sets separately and on the union of their datasets
    Combine {
        /// Prompts file, once per task (paired with --data by position)
        #[arg(long, required = true)]
        prompts: Vec<PathBuf>,
        /// Evaluation dataset, once per task
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
    },
    /// Check analytic gradients against finite differences end to end
    Gradcheck {
        /// Dataset to check on (first four images are used)
        #[arg(long)]
        data: PathBuf,
        /// Vocabulary for the construction prior
        #[arg(long)]
        vocab: PathBuf,
        /// Dictionaries file (defaults to empty dictionaries)
        #[arg(long)]
        dicts: Option<PathBuf>,
        /// Largest acceptable relative error
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

/// An error plus the exit code it maps to.
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::Runtime(_) => 3,
            _ => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(f) = run(cli) {
        eprintln!("error: {}", f.message);
        std::process::exit(f.code);
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Gen { paired, train_images } => gen(&cli, *paired, *train_images),
        Command::BuildDict { data, vocab } => build_dict(&cli, data, vocab),
        Command::Train { data, vocab, dicts } => train(&cli, data, vocab, dicts.as_deref()),
        Command::Eval { data, prompts } => eval(&cli, data, prompts),
        Command::Combine { prompts, data } => combine(&cli, prompts, data),
        Command::Gradcheck { data, vocab, dicts, tolerance } => {
            gradcheck(&cli, data, vocab, dicts.as_deref(), *tolerance)
        }
    }
}

/// The output directory, created on demand.
fn out_dir(cli: &Cli) -> Result<&Path, Failure> {
    let out = cli
        .out
        .as_deref()
        .ok_or_else(|| usage("--out is required for this command"))?;
    std::fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.display().to_string(),
        source,
    })?;
    Ok(out)
}

/// Training config from --config (defaults otherwise), with --seed applied
/// on top so the echo in every report shows the effective seed.
fn train_config(cli: &Cli) -> Result<TrainConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => io::load_train_config(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn split_and_save(dataset: &Dataset, train_images: usize, dir: &Path) -> Result<(), Failure> {
    let (train, eval) = split_dataset(dataset, train_images)?;
    io::save_dataset(dir.join("train.json"), &train)?;
    io::save_dataset(dir.join("eval.json"), &eval)?;
    Ok(())
}

fn gen(cli: &Cli, paired: bool, train_images: Option<usize>) -> Result<(), Failure> {
    let out = out_dir(cli)?;
    let mut spec = match &cli.config {
        Some(path) => io::load_testbed_spec(path)?,
        None => TestbedSpec::default(),
    };
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let train_images = train_images.unwrap_or(spec.images * 2 / 3);
    let mut rng = SeededRng::new(spec.seed);
    if paired {
        let (a, b) = make_paired_tasks(&spec, &mut rng)?;
        io::save_vocabulary(out.join("vocabulary.json"), &a.vocabulary)?;
        for (task, name) in [(&a, "a"), (&b, "b")] {
            let dir = out.join(name);
            std::fs::create_dir_all(&dir).map_err(|source| Error::Io {
                path: dir.display().to_string(),
                source,
            })?;
            split_and_save(&task.dataset, train_images, &dir)?;
        }
        println!(
            "wrote paired tasks ({} categories each) under {}",
            a.dataset.categories.len(),
            out.display()
        );
    } else {
        let task = generate(&spec, &mut rng)?;
        io::save_vocabulary(out.join("vocabulary.json"), &task.vocabulary)?;
        split_and_save(&task.dataset, train_images, out)?;
        println!(
            "wrote {} categories, {} train / {} eval images under {}",
            task.dataset.categories.len(),
            train_images,
            spec.images - train_images,
            out.display()
        );
    }
    Ok(())
}

fn build_dict(cli: &Cli, data: &Path, vocab: &Path) -> Result<(), Failure> {
    let out = out_dir(cli)?;
    let config = train_config(cli)?;
    let dataset = io::load_dataset(data)?;
    let vocabulary = load_vocabulary_for(vocab, &dataset)?;
    let mut dictionaries = Vec::with_capacity(dataset.categories.len());
    for category in &dataset.categories {
        // a category must not mine its own name as a negative
        let dict = build_similarity_dictionary(
            &dataset,
            &vocabulary,
            category.id,
            config.top_k,
            config.nms_threshold,
            config.similarity_mode,
            std::slice::from_ref(&category.name),
        )?;
        dictionaries.push(dict);
    }
    io::save_dictionaries(out.join("dictionaries.json"), &dictionaries, dataset.dimension)?;
    let sizes: Vec<String> =
        dictionaries.iter().map(|d| format!("{}:{}", d.category_id, d.len())).collect();
    println!("wrote dictionaries ({}) under {}", sizes.join(", "), out.display());
    Ok(())
}

fn load_vocabulary_for(path: &Path, dataset: &Dataset) -> Result<Vocabulary, Failure> {
    let vocabulary = io::load_vocabulary(path)?;
    if vocabulary.dim() != dataset.dimension {
        return Err(Error::DimensionMismatch {
            expected: dataset.dimension,
            got: vocabulary.dim(),
            context: "vocabulary vs dataset".into(),
        }
        .into());
    }
    Ok(vocabulary)
}

fn load_dictionaries_for(
    path: Option<&Path>,
    dataset: &Dataset,
) -> Result<Vec<SimilarityDictionary>, Failure> {
    match path {
        Some(path) => {
            let (dictionaries, dimension) = io::load_dictionaries(path)?;
            if dimension != dataset.dimension {
                return Err(Error::DimensionMismatch {
                    expected: dataset.dimension,
                    got: dimension,
                    context: "dictionaries vs dataset".into(),
                }
                .into());
            }
            Ok(dictionaries)
        }
        None => Ok(dataset
            .categories
            .iter()
            .map(|c| SimilarityDictionary::empty(c.id))
            .collect()),
    }
}

fn train(cli: &Cli, data: &Path, vocab: &Path, dicts: Option<&Path>) -> Result<(), Failure> {
    let out = out_dir(cli)?;
    let config = train_config(cli)?;
    let dataset = io::load_dataset(data)?;
    let vocabulary = load_vocabulary_for(vocab, &dataset)?;
    let dictionaries = load_dictionaries_for(dicts, &dataset)?;

    let mut rng = SeededRng::new(config.seed);
    let initial = construct_prompts(&dataset.categories, &vocabulary, &config, &mut rng)?;
    let report = train_visual_prompts(&dataset, &initial, &dictionaries, &config, &mut rng)?;
    io::save_prompts(out.join("prompts.json"), &report.prompts)?;
    io::save_train_report(out.join("train_report.json"), &report)?;
    match report.epoch_losses.last() {
        Some(stats) => println!(
            "trained {} prompts for {} epochs, final alignment loss {:.6}",
            report.prompts.len(),
            report.epoch_losses.len(),
            stats.alignment
        ),
        None => println!("no epochs requested; prompts saved as constructed"),
    }
    Ok(())
}

fn eval(cli: &Cli, data: &Path, prompts: &Path) -> Result<(), Failure> {
    let out = out_dir(cli)?;
    let dataset = io::load_dataset(data)?;
    let prompts = io::load_prompts(prompts)?;
    let detections = detect(&dataset, &prompts)?;
    let report = evaluate(&detections, &dataset)?;
    io::save_eval_report(out.join("eval_report.json"), &report)?;
    println!("mAP {:.4}  mAP50 {:.4}", report.map, report.map50);
    Ok(())
}

fn combine(cli: &Cli, prompts: &[PathBuf], data: &[PathBuf]) -> Result<(), Failure> {
    let out = out_dir(cli)?;
    if prompts.len() != data.len() {
        return Err(usage(format!(
            "--prompts and --data must be given the same number of times ({} vs {})",
            prompts.len(),
            data.len()
        )));
    }
    let prompt_sets = prompts
        .iter()
        .map(io::load_prompts)
        .collect::<vprompt_core::Result<Vec<_>>>()?;
    let datasets = data
        .iter()
        .map(io::load_dataset)
        .collect::<vprompt_core::Result<Vec<_>>>()?;
    let report = combined_inference(&prompt_sets, &datasets)?;
    io::save_combined_report(out.join("combined_report.json"), &report)?;
    println!(
        "mean solo mAP {:.4}  combined mAP {:.4}  drop {:.4}",
        report.mean_solo_map, report.combined.map, report.map_drop
    );
    Ok(())
}

fn gradcheck(
    cli: &Cli,
    data: &Path,
    vocab: &Path,
    dicts: Option<&Path>,
    tolerance: f64,
) -> Result<(), Failure> {
    let config = train_config(cli)?;
    let dataset = io::load_dataset(data)?;
    let vocabulary = load_vocabulary_for(vocab, &dataset)?;
    let dictionaries = load_dictionaries_for(dicts, &dataset)?;

    let mut rng = SeededRng::new(config.seed);
    let prompts = construct_prompts(&dataset.categories, &vocabulary, &config, &mut rng)?;
    let report =
        end_to_end_gradient_check(&dataset, &prompts, &dictionaries, &config, &mut rng)?;
    println!(
        "max relative error {:.3e} over {} parameters (tolerance {tolerance:.1e})",
        report.max_relative_error, report.checked_parameters
    );
    if report.max_relative_error > tolerance {
        return Err(Failure {
            code: 3,
            message: format!(
                "gradient check failed: {:.3e} exceeds tolerance {tolerance:.1e}",
                report.max_relative_error
            ),
        });
    }
    Ok(())
}
