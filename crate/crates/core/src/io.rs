//! On-disk JSON formats. Every artifact file is a flat envelope
//! `{"format": <kind>, "version": 1, ...}` so a loader can reject the wrong
//! kind or an unreadable version before touching the payload, and
//! data-carrying files state their embedding dimension explicitly. Saving is
//! deterministic: pretty-printed JSON with a trailing newline, field order
//! fixed by the struct definitions, floats in shortest round-trip form —
//! saving the same value twice yields byte-identical files.
//!
//! Loading is strict in three layers: JSON syntax errors report the 1-based
//! line and column, unknown or missing fields are rejected, and the decoded
//! payload is semantically validated with the offending field path attached
//! to the file path.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{Category, Dataset, ImageSample};
use crate::dictionary::{SimilarityDictionary, VocabEntry, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{CombinedReport, EvalReport};
use crate::prompt::VisualPrompt;
use crate::testbed::TestbedSpec;
use crate::trainer::{TrainConfig, TrainReport};

/// Version stamped into every file this build writes.
pub const FORMAT_VERSION: u32 = 1;

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io { path: path_str(path), source })
}

fn parse<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path_str(path),
        line: e.line(),
        column: e.column(),
        message: classify(&e),
    })
}

/// serde_json prefixes its own messages with location info only in Display;
/// strip the " at line L column C" tail since the variant carries it.
fn classify(e: &serde_json::Error) -> String {
    let text = e.to_string();
    match text.rfind(" at line ") {
        Some(cut) => text[..cut].to_string(),
        None => text,
    }
}

/// The leading fields common to every artifact file. Decoded first, ignoring
/// the rest of the payload, so a wrong-kind file is reported as a format
/// mismatch rather than a storm of unknown-field errors.
#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
}

fn load_file<T: DeserializeOwned>(path: &Path, expected: &str) -> Result<T> {
    let text = read(path)?;
    let header: Header = parse(path, &text)?;
    if header.format != expected {
        return Err(Error::FormatMismatch {
            path: path_str(path),
            expected: expected.into(),
            found: header.format,
        });
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path_str(path),
            found: header.version,
            expected: FORMAT_VERSION,
        });
    }
    parse(path, &text)
}

/// Rewrites a semantic validation error so it names the file it came from,
/// keeping the field path (`images[3].proposals[1].box`, a parameter name,
/// ...) as the location.
fn attach_path(path: &Path, err: Error) -> Error {
    let (location, message) = match err {
        Error::DimensionMismatch { expected, got, context } => {
            (context, format!("expected dimension {expected}, got {got}"))
        }
        Error::UnknownCategory { id, context } => (context, format!("unknown category id {id}")),
        Error::DuplicateCategory { id, context } => {
            (context, format!("category id {id} appears more than once"))
        }
        Error::InvalidParameter { name, message } => (name, message),
        Error::InvalidBox { x1, y1, x2, y2, context } => {
            (context, format!("invalid box [{x1}, {y1}, {x2}, {y2}]"))
        }
        Error::ZeroNorm(context) => (context, "zero-norm embedding".into()),
        Error::NonFinite(context) => (context, "non-finite value".into()),
        Error::EmptyInput(message) => ("payload".into(), message),
        other => return other,
    };
    Error::InvariantViolation { path: path_str(path), location, message }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Runtime(format!("could not serialize {}: {e}", path_str(path))))?;
    text.push('\n');
    fs::write(path, text).map_err(|source| Error::Io { path: path_str(path), source })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabularyFile {
    format: String,
    version: u32,
    dimension: usize,
    entries: Vec<VocabEntry>,
}

pub fn save_vocabulary(path: impl AsRef<Path>, vocabulary: &Vocabulary) -> Result<()> {
    let path = path.as_ref();
    vocabulary.validate().map_err(|e| attach_path(path, e))?;
    write_json(
        path,
        &VocabularyFile {
            format: "vocabulary".into(),
            version: FORMAT_VERSION,
            dimension: vocabulary.dim(),
            entries: vocabulary.entries.clone(),
        },
    )
}

pub fn load_vocabulary(path: impl AsRef<Path>) -> Result<Vocabulary> {
    let path = path.as_ref();
    let file: VocabularyFile = load_file(path, "vocabulary")?;
    let vocabulary = Vocabulary { entries: file.entries };
    vocabulary.validate().map_err(|e| attach_path(path, e))?;
    if vocabulary.dim() != file.dimension {
        return Err(Error::InvariantViolation {
            path: path_str(path),
            location: "dimension".into(),
            message: format!(
                "declared dimension {} but entries have dimension {}",
                file.dimension,
                vocabulary.dim()
            ),
        });
    }
    Ok(vocabulary)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    format: String,
    version: u32,
    dimension: usize,
    categories: Vec<Category>,
    images: Vec<ImageSample>,
}

pub fn save_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    dataset.validate().map_err(|e| attach_path(path, e))?;
    write_json(
        path,
        &DatasetFile {
            format: "dataset".into(),
            version: FORMAT_VERSION,
            dimension: dataset.dimension,
            categories: dataset.categories.clone(),
            images: dataset.images.clone(),
        },
    )
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file: DatasetFile = load_file(path, "dataset")?;
    let dataset = Dataset {
        dimension: file.dimension,
        categories: file.categories,
        images: file.images,
    };
    dataset.validate().map_err(|e| attach_path(path, e))?;
    Ok(dataset)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DictionariesFile {
    format: String,
    version: u32,
    dimension: usize,
    dictionaries: Vec<SimilarityDictionary>,
}

/// Dictionaries may legitimately be empty, so the embedding dimension is
/// stored alongside them rather than inferred.
pub fn save_dictionaries(
    path: impl AsRef<Path>,
    dictionaries: &[SimilarityDictionary],
    dimension: usize,
) -> Result<()> {
    let path = path.as_ref();
    validate_dictionaries(dictionaries, dimension).map_err(|e| attach_path(path, e))?;
    write_json(
        path,
        &DictionariesFile {
            format: "dictionaries".into(),
            version: FORMAT_VERSION,
            dimension,
            dictionaries: dictionaries.to_vec(),
        },
    )
}

pub fn load_dictionaries(path: impl AsRef<Path>) -> Result<(Vec<SimilarityDictionary>, usize)> {
    let path = path.as_ref();
    let file: DictionariesFile = load_file(path, "dictionaries")?;
    validate_dictionaries(&file.dictionaries, file.dimension)
        .map_err(|e| attach_path(path, e))?;
    Ok((file.dictionaries, file.dimension))
}

fn validate_dictionaries(dictionaries: &[SimilarityDictionary], dimension: usize) -> Result<()> {
    if dimension == 0 {
        return Err(Error::param("dimension", "must be >= 1"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for (i, dict) in dictionaries.iter().enumerate() {
        if !seen.insert(dict.category_id) {
            return Err(Error::DuplicateCategory {
                id: dict.category_id.0,
                context: format!("dictionaries[{i}]"),
            });
        }
        dict.validate()?;
        for (j, entry) in dict.entries.iter().enumerate() {
            if entry.embedding.dim() != dimension {
                return Err(Error::dim(
                    dimension,
                    entry.embedding.dim(),
                    format!("dictionaries[{i}].entries[{j}]"),
                ));
            }
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptsFile {
    format: String,
    version: u32,
    dimension: usize,
    prompts: Vec<VisualPrompt>,
}

pub fn save_prompts(path: impl AsRef<Path>, prompts: &[VisualPrompt]) -> Result<()> {
    let path = path.as_ref();
    let dimension = validate_prompts(prompts).map_err(|e| attach_path(path, e))?;
    write_json(
        path,
        &PromptsFile {
            format: "prompts".into(),
            version: FORMAT_VERSION,
            dimension,
            prompts: prompts.to_vec(),
        },
    )
}

pub fn load_prompts(path: impl AsRef<Path>) -> Result<Vec<VisualPrompt>> {
    let path = path.as_ref();
    let file: PromptsFile = load_file(path, "prompts")?;
    let dimension = validate_prompts(&file.prompts).map_err(|e| attach_path(path, e))?;
    if dimension != file.dimension {
        return Err(Error::InvariantViolation {
            path: path_str(path),
            location: "dimension".into(),
            message: format!(
                "declared dimension {} but prompts have dimension {dimension}",
                file.dimension
            ),
        });
    }
    Ok(file.prompts)
}

fn validate_prompts(prompts: &[VisualPrompt]) -> Result<usize> {
    let first = prompts
        .first()
        .ok_or_else(|| Error::EmptyInput("a prompts file needs at least one prompt".into()))?;
    let dimension = first.dim();
    let mut seen = std::collections::BTreeSet::new();
    for (i, prompt) in prompts.iter().enumerate() {
        if !seen.insert(prompt.category_id) {
            return Err(Error::DuplicateCategory {
                id: prompt.category_id.0,
                context: format!("prompts[{i}]"),
            });
        }
        if prompt.vectors.is_empty() {
            return Err(Error::EmptyInput(format!("prompts[{i}] has no rows")));
        }
        for (m, row) in prompt.vectors.iter().enumerate() {
            if row.dim() != dimension {
                return Err(Error::dim(dimension, row.dim(), format!("prompts[{i}].vectors[{m}]")));
            }
            if row.values().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("prompts[{i}].vectors[{m}]")));
            }
        }
    }
    Ok(dimension)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainReportFile {
    format: String,
    version: u32,
    dimension: usize,
    report: TrainReport,
}

pub fn save_train_report(path: impl AsRef<Path>, report: &TrainReport) -> Result<()> {
    let path = path.as_ref();
    let dimension = validate_prompts(&report.prompts).map_err(|e| attach_path(path, e))?;
    write_json(
        path,
        &TrainReportFile {
            format: "train_report".into(),
            version: FORMAT_VERSION,
            dimension,
            report: report.clone(),
        },
    )
}

pub fn load_train_report(path: impl AsRef<Path>) -> Result<TrainReport> {
    let path = path.as_ref();
    let file: TrainReportFile = load_file(path, "train_report")?;
    validate_prompts(&file.report.prompts).map_err(|e| attach_path(path, e))?;
    Ok(file.report)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalReportFile {
    format: String,
    version: u32,
    report: EvalReport,
}

pub fn save_eval_report(path: impl AsRef<Path>, report: &EvalReport) -> Result<()> {
    write_json(
        path.as_ref(),
        &EvalReportFile {
            format: "eval_report".into(),
            version: FORMAT_VERSION,
            report: report.clone(),
        },
    )
}

pub fn load_eval_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    let path = path.as_ref();
    let file: EvalReportFile = load_file(path, "eval_report")?;
    Ok(file.report)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CombinedReportFile {
    format: String,
    version: u32,
    report: CombinedReport,
}

pub fn save_combined_report(path: impl AsRef<Path>, report: &CombinedReport) -> Result<()> {
    write_json(
        path.as_ref(),
        &CombinedReportFile {
            format: "combined_report".into(),
            version: FORMAT_VERSION,
            report: report.clone(),
        },
    )
}

pub fn load_combined_report(path: impl AsRef<Path>) -> Result<CombinedReport> {
    let path = path.as_ref();
    let file: CombinedReportFile = load_file(path, "combined_report")?;
    Ok(file.report)
}

/// Config files are hand-written inputs rather than artifacts, so they are a
/// bare [`TrainConfig`] object: absent fields take their defaults, unknown
/// fields are rejected as typos.
pub fn load_train_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    let config: TrainConfig = parse(path, &read(path)?)?;
    config.validate().map_err(|e| attach_path(path, e))?;
    Ok(config)
}

pub fn save_train_config(path: impl AsRef<Path>, config: &TrainConfig) -> Result<()> {
    let path = path.as_ref();
    config.validate().map_err(|e| attach_path(path, e))?;
    write_json(path, config)
}

/// Testbed specs are hand-written inputs like configs: a bare
/// [`TestbedSpec`] object with defaults for absent fields.
pub fn load_testbed_spec(path: impl AsRef<Path>) -> Result<TestbedSpec> {
    let path = path.as_ref();
    let spec: TestbedSpec = parse(path, &read(path)?)?;
    spec.validate().map_err(|e| attach_path(path, e))?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CategoryId;
    use crate::embedding::SeededRng;
    use crate::testbed::{generate, TestbedSpec};
    use crate::trainer::construct_prompts;

    fn small_task() -> crate::testbed::GeneratedTask {
        let spec = TestbedSpec {
            dimension: 6,
            categories: 2,
            images: 8,
            proposals_per_image: (2, 3),
            vocab_fillers: 4,
            confusers_per_category: 2,
            ..TestbedSpec::default()
        };
        generate(&spec, &mut SeededRng::new(17)).unwrap()
    }

    #[test]
    fn every_artifact_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let task = small_task();
        let config = TrainConfig { n_vectors: 3, epochs: 2, ..TrainConfig::default() };
        let mut rng = SeededRng::new(5);
        let prompts =
            construct_prompts(&task.dataset.categories, &task.vocabulary, &config, &mut rng)
                .unwrap();
        let dicts: Vec<SimilarityDictionary> = task
            .dataset
            .categories
            .iter()
            .map(|c| {
                crate::dictionary::build_similarity_dictionary(
                    &task.dataset,
                    &task.vocabulary,
                    c.id,
                    config.top_k,
                    config.nms_threshold,
                    config.similarity_mode,
                    &[],
                )
                .unwrap()
            })
            .collect();
        let report = crate::trainer::train_visual_prompts(
            &task.dataset,
            &prompts,
            &dicts,
            &config,
            &mut rng,
        )
        .unwrap();
        let detections = crate::eval::detect(&task.dataset, &report.prompts).unwrap();
        let eval = crate::eval::evaluate(&detections, &task.dataset).unwrap();
        let combined =
            crate::eval::combined_inference(&[report.prompts.clone()], &[task.dataset.clone()])
                .unwrap();

        let p = |name: &str| dir.path().join(name);
        save_vocabulary(p("vocab.json"), &task.vocabulary).unwrap();
        assert_eq!(load_vocabulary(p("vocab.json")).unwrap(), task.vocabulary);

        save_dataset(p("data.json"), &task.dataset).unwrap();
        assert_eq!(load_dataset(p("data.json")).unwrap(), task.dataset);

        save_dictionaries(p("dicts.json"), &dicts, task.dataset.dimension).unwrap();
        let (loaded, dim) = load_dictionaries(p("dicts.json")).unwrap();
        assert_eq!((loaded, dim), (dicts, task.dataset.dimension));

        save_prompts(p("prompts.json"), &report.prompts).unwrap();
        assert_eq!(load_prompts(p("prompts.json")).unwrap(), report.prompts);

        save_train_report(p("train.json"), &report).unwrap();
        assert_eq!(load_train_report(p("train.json")).unwrap(), report);

        save_eval_report(p("eval.json"), &eval).unwrap();
        assert_eq!(load_eval_report(p("eval.json")).unwrap(), eval);

        save_combined_report(p("combined.json"), &combined).unwrap();
        assert_eq!(load_combined_report(p("combined.json")).unwrap(), combined);

        save_train_config(p("config.json"), &config).unwrap();
        assert_eq!(load_train_config(p("config.json")).unwrap(), config);
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let task = small_task();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        save_dataset(&a, &task.dataset).unwrap();
        save_dataset(&b, &task.dataset).unwrap();
        let bytes_a = std::fs::read(&a).unwrap();
        assert_eq!(bytes_a, std::fs::read(&b).unwrap());
        assert_eq!(bytes_a.last(), Some(&b'\n'));
    }

    #[test]
    fn syntax_errors_report_line_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.json");
        std::fs::write(&path, "{\n  \"format\": \"dataset\",\n  \"version\": oops\n}\n").unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { line, column, .. }) => {
                assert_eq!(line, 3);
                assert!(column > 1);
            }
            other => panic!("expected a parse error, got {other:?}"),
        }
        // truncated file
        std::fs::write(&path, "{\"format\": \"dataset\"").unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Parse { .. })));
        // unknown field
        let task = small_task();
        save_dataset(&path, &task.dataset).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let sneaky = text.replacen("\"dimension\"", "\"dimensions\"", 1);
        std::fs::write(&path, sneaky).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn wrong_kind_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let task = small_task();
        let path = dir.path().join("vocab.json");
        save_vocabulary(&path, &task.vocabulary).unwrap();
        match load_dataset(&path) {
            Err(Error::FormatMismatch { expected, found, .. }) => {
                assert_eq!(expected, "dataset");
                assert_eq!(found, "vocabulary");
            }
            other => panic!("expected a format mismatch, got {other:?}"),
        }
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen("\"version\": 1", "\"version\": 2", 1)).unwrap();
        match load_vocabulary(&path) {
            Err(Error::VersionMismatch { found, expected, .. }) => {
                assert_eq!((found, expected), (2, 1));
            }
            other => panic!("expected a version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn semantic_violations_carry_the_field_path() {
        let dir = tempfile::tempdir().unwrap();
        let task = small_task();
        let path = dir.path().join("data.json");
        save_dataset(&path, &task.dataset).unwrap();
        // corrupt one box corner so x2 < x1
        let text = std::fs::read_to_string(&path).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        let mut value = value;
        value["images"][0]["proposals"][0]["box"]["x2"] = serde_json::json!(-5.0);
        std::fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
        match load_dataset(&path) {
            Err(Error::InvariantViolation { location, .. }) => {
                assert!(
                    location.contains("images[0].proposals[0]"),
                    "location was {location}"
                );
            }
            other => panic!("expected an invariant violation, got {other:?}"),
        }
        // declared dimension disagrees with the payload
        save_dataset(&path, &task.dataset).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen("\"dimension\": 6", "\"dimension\": 7", 1)).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::InvariantViolation { .. })));
    }

    #[test]
    fn missing_files_surface_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.json");
        assert!(matches!(load_dataset(&missing), Err(Error::Io { .. })));
        assert!(matches!(load_vocabulary(&missing), Err(Error::Io { .. })));
        assert!(matches!(load_train_config(&missing), Err(Error::Io { .. })));
    }

    #[test]
    fn prompt_files_reject_structural_problems() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prompts.json");
        assert!(matches!(save_prompts(&path, &[]), Err(Error::InvariantViolation { .. })));

        let task = small_task();
        let mut rng = SeededRng::new(9);
        let config = TrainConfig { n_vectors: 2, ..TrainConfig::default() };
        let prompts =
            construct_prompts(&task.dataset.categories, &task.vocabulary, &config, &mut rng)
                .unwrap();
        let duplicated = vec![prompts[0].clone(), prompts[0].clone()];
        assert!(save_prompts(&path, &duplicated).is_err());

        // dictionary files with clashing category ids are also rejected
        let dicts = vec![
            SimilarityDictionary::empty(CategoryId(1)),
            SimilarityDictionary::empty(CategoryId(1)),
        ];
        assert!(save_dictionaries(&path, &dicts, 6).is_err());
    }

    #[test]
    fn partial_config_files_fill_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, "{\"epochs\": 3, \"seed\": 42}\n").unwrap();
        let config = load_train_config(&path).unwrap();
        assert_eq!(config.epochs, 3);
        assert_eq!(config.seed, 42);
        assert_eq!(config.n_vectors, TrainConfig::default().n_vectors);

        std::fs::write(&path, "{\"learning_rate\": -1.0}\n").unwrap();
        assert!(matches!(load_train_config(&path), Err(Error::InvariantViolation { .. })));

        std::fs::write(&path, "{\"epoch\": 3}\n").unwrap();
        assert!(matches!(load_train_config(&path), Err(Error::Parse { .. })));
    }
}
