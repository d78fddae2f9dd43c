//! On-disk feature store: `trials.jsonl` (one metadata line per trial) and
//! `tensors/<object>_<trial>.bin`.

use std::fs;
use std::io::Write;
use std::path::Path;

use clamp_core::features::{ContactEvents, FeatureTensor, FeaturizedTrial, TrialSummary};
use clamp_core::ingest::LabelRecord;
use clamp_core::{ClampError, Embodiment};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, CliResult};

pub const INDEX: &str = "trials.jsonl";
pub const TENSOR_DIR: &str = "tensors";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    file: String,
    object_id: String,
    trial_index: usize,
    labels: LabelRecord,
    embodiment: Embodiment,
    valid_len: usize,
    events: ContactEvents,
    summary: TrialSummary,
}

pub fn tensor_name(object_id: &str, trial_index: usize) -> String {
    format!("{TENSOR_DIR}/{object_id}_{trial_index}.bin")
}

pub fn write_store(dir: &Path, trials: &[FeaturizedTrial]) -> CliResult<()> {
    fs::create_dir_all(dir.join(TENSOR_DIR)).map_err(|e| io_err(dir, e))?;
    let index_path = dir.join(INDEX);
    let mut index = Vec::new();
    for t in trials {
        let file = tensor_name(&t.object_id, t.trial_index);
        t.tensor.write(dir.join(&file))?;
        let entry = Entry {
            file,
            object_id: t.object_id.clone(),
            trial_index: t.trial_index,
            labels: t.labels.clone(),
            embodiment: t.tensor.embodiment,
            valid_len: t.tensor.valid_len,
            events: t.events.clone(),
            summary: t.summary.clone(),
        };
        serde_json::to_writer(&mut index, &entry).map_err(ClampError::from)?;
        index.push(b'\n');
    }
    let mut f = fs::File::create(&index_path).map_err(|e| io_err(&index_path, e))?;
    f.write_all(&index).map_err(|e| io_err(&index_path, e))?;
    Ok(())
}

pub fn read_store(dir: &Path) -> CliResult<Vec<FeaturizedTrial>> {
    let index_path = dir.join(INDEX);
    let text = fs::read_to_string(&index_path).map_err(|e| io_err(&index_path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let entry: Entry = serde_json::from_str(line).map_err(|e| ClampError::Parse {
            file: index_path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let tensor = FeatureTensor::read(dir.join(&entry.file))?;
        if tensor.embodiment != entry.embodiment || tensor.valid_len != entry.valid_len {
            return Err(CliError::Usage(format!(
                "{}: tensor header disagrees with {INDEX} line {}",
                entry.file,
                i + 1
            )));
        }
        out.push(FeaturizedTrial {
            object_id: entry.object_id,
            trial_index: entry.trial_index,
            labels: entry.labels,
            tensor,
            events: entry.events,
            summary: entry.summary,
        });
    }
    if out.is_empty() {
        return Err(CliError::Core(ClampError::Empty(format!("feature store {}", dir.display()))));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clamp_core::dataset::{generate_benchmark, BenchmarkSpec};
    use clamp_core::features::FeatureConfig;

    #[test]
    fn round_trip_is_exact() {
        let spec = BenchmarkSpec { objects_per_material: 1, trials_per_object: 2, seed: 4, ..BenchmarkSpec::default() };
        let trials = generate_benchmark(&spec, &FeatureConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_store(dir.path(), &trials).unwrap();
        assert_eq!(read_store(dir.path()).unwrap(), trials);
    }

    #[test]
    fn missing_store_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_store(dir.path()).is_err());
    }
}
