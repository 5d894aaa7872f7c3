use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::adapters::Adapter;
use super::{serialize_scene_graph, SceneGraph, SceneGraphError};

/// Physical layout of a dataset on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    /// A directory of `*.json` documents, one per image, read in file-name order.
    #[default]
    Dir,
    /// A single file with one document per non-empty line.
    Lines,
}

impl FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dir" => Ok(DatasetFormat::Dir),
            "lines" => Ok(DatasetFormat::Lines),
            other => Err(format!(
                "unknown dataset format `{other}` (expected dir|lines)"
            )),
        }
    }
}

impl std::fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetFormat::Dir => "dir",
            DatasetFormat::Lines => "lines",
        })
    }
}

fn io_err(path: &Path, source: std::io::Error) -> SceneGraphError {
    SceneGraphError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads raw documents paired with a location string for error reporting.
pub fn read_documents(
    path: &Path,
    format: DatasetFormat,
) -> Result<Vec<(String, String)>, SceneGraphError> {
    match format {
        DatasetFormat::Dir => {
            let mut files: Vec<_> = fs::read_dir(path)
                .map_err(|e| io_err(path, e))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && p.extension().is_some_and(|ext| ext == "json"))
                .collect();
            files.sort();
            files
                .into_iter()
                .map(|p| {
                    let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
                    Ok((p.display().to_string(), text))
                })
                .collect()
        }
        DatasetFormat::Lines => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            Ok(text
                .lines()
                .enumerate()
                .filter(|(_, line)| !line.trim().is_empty())
                .map(|(i, line)| (format!("{}:{}", path.display(), i + 1), line.to_string()))
                .collect())
        }
    }
}

/// Loads and validates every scene graph in a dataset.
pub fn load_dataset(
    path: &Path,
    format: DatasetFormat,
    adapter: Adapter,
) -> Result<Vec<SceneGraph>, SceneGraphError> {
    read_documents(path, format)?
        .into_iter()
        .map(|(location, text)| adapter.parse(&text).map_err(|e| e.at(location)))
        .collect()
}

/// Writes graphs as a line-delimited canonical dataset.
pub fn write_lines(graphs: &[SceneGraph], out: &mut impl Write) -> std::io::Result<()> {
    for g in graphs {
        writeln!(out, "{}", serialize_scene_graph(g))?;
    }
    Ok(())
}
