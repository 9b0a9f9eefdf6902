//! On-disk layout under the data directory:
//!
//! ```text
//! splits/{split_id}.tasksplit
//! trajectories/{session_id}/level{index:03}-{task_seed}.bldc
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use bldc_core::{Dataset, TaskSplit};

use crate::error::ApiError;

/// Split ids become file names, so only a conservative alphabet is allowed.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

pub fn split_path(data_dir: &Path, split_id: &str) -> PathBuf {
    data_dir.join("splits").join(format!("{split_id}.tasksplit"))
}

pub fn trajectory_dir(data_dir: &Path, session_id: &str) -> PathBuf {
    data_dir.join("trajectories").join(session_id)
}

pub fn trajectory_path(data_dir: &Path, session_id: &str, level: usize, task_seed: u64) -> PathBuf {
    trajectory_dir(data_dir, session_id).join(format!("level{level:03}-{task_seed}.bldc"))
}

pub fn save_split(data_dir: &Path, split_id: &str, split: &TaskSplit) -> Result<PathBuf, ApiError> {
    if !valid_id(split_id) {
        return Err(ApiError::BadRequest(format!("invalid split id '{split_id}'")));
    }
    let path = split_path(data_dir, split_id);
    fs::create_dir_all(path.parent().expect("split path has a parent"))?;
    fs::write(&path, split.to_text())?;
    Ok(path)
}

pub fn load_split(data_dir: &Path, split_id: &str) -> Result<TaskSplit, ApiError> {
    if !valid_id(split_id) {
        return Err(ApiError::BadRequest(format!("invalid split id '{split_id}'")));
    }
    let path = split_path(data_dir, split_id);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(ApiError::NotFound(format!("unknown split '{split_id}'")))
        }
        Err(e) => return Err(e.into()),
    };
    Ok(TaskSplit::from_text(&text)?)
}

pub fn save_trajectory(path: &Path, dataset: &Dataset) -> Result<(), ApiError> {
    fs::create_dir_all(path.parent().expect("trajectory path has a parent"))?;
    dataset.save(path)?;
    Ok(())
}
