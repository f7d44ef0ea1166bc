//! On-disk dataset: a TSV manifest, pose files and split lists.
//!
//! Manifest rows are `sample_id \t signer_id \t relative_pose_path \t glosses`
//! with no header. Split files hold one sample id per line.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{load_pose_file, DataError, PoseSequence};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.txt", self.name())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(DataError::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub sample_id: String,
    pub signer_id: String,
    pub pose_path: String,
    pub glosses: String,
}

impl ManifestRow {
    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.sample_id, self.signer_id, self.pose_path, self.glosses)
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>, DataError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(DataError::Manifest(format!("line {}: expected 4 tab-separated fields", n + 1)));
            }
            if f[3].split_whitespace().next().is_none() {
                return Err(DataError::Manifest(format!("line {}: empty gloss sequence", n + 1)));
            }
            Ok(ManifestRow {
                sample_id: f[0].to_owned(),
                signer_id: f[1].to_owned(),
                pose_path: f[2].to_owned(),
                glosses: f[3].to_owned(),
            })
        })
        .collect()
}

pub fn write_manifest(rows: &[ManifestRow]) -> String {
    rows.iter().map(|r| r.to_line() + "\n").collect()
}

/// A loaded training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub sample_id: String,
    pub signer_id: String,
    pub pose: PoseSequence,
    pub glosses: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub splits: HashMap<Split, Vec<String>>,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, DataError> {
        let root = root.as_ref().to_path_buf();
        let mpath = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| DataError::io(&mpath, e))?;
        let rows = parse_manifest(&text)?;
        let mut splits = HashMap::new();
        for split in Split::ALL {
            let p = root.join(split.file_name());
            if p.exists() {
                let text = fs::read_to_string(&p).map_err(|e| DataError::io(&p, e))?;
                let ids = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned).collect();
                splits.insert(split, ids);
            }
        }
        Ok(Dataset { root, rows, splits })
    }

    pub fn row(&self, sample_id: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.sample_id == sample_id)
    }

    pub fn split_ids(&self, split: Split) -> Result<&[String], DataError> {
        self.splits
            .get(&split)
            .map(Vec::as_slice)
            .ok_or_else(|| DataError::Manifest(format!("split `{split}` not found in {}", self.root.display())))
    }

    pub fn load_example(&self, row: &ManifestRow) -> Result<Example, DataError> {
        let pose = load_pose_file(self.root.join(&row.pose_path))?.with_ids(&row.signer_id, &row.sample_id);
        Ok(Example {
            sample_id: row.sample_id.clone(),
            signer_id: row.signer_id.clone(),
            pose,
            glosses: row.glosses.clone(),
        })
    }

    /// Loads every example of `split`, in split-file order.
    pub fn load_split(&self, split: Split) -> Result<Vec<Example>, DataError> {
        let index: HashMap<&str, &ManifestRow> = self.rows.iter().map(|r| (r.sample_id.as_str(), r)).collect();
        self.split_ids(split)?
            .iter()
            .map(|id| {
                let row = index
                    .get(id.as_str())
                    .ok_or_else(|| DataError::Manifest(format!("split `{split}` names unknown sample `{id}`")))?;
                self.load_example(row)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_and_errors() {
        let rows = vec![ManifestRow {
            sample_id: "s1".into(),
            signer_id: "signer00".into(),
            pose_path: "poses/s1.pose".into(),
            glosses: "HE FRIEND".into(),
        }];
        let text = write_manifest(&rows);
        assert_eq!(text, "s1\tsigner00\tposes/s1.pose\tHE FRIEND\n");
        assert_eq!(parse_manifest(&text).unwrap(), rows);
        assert!(parse_manifest("a\tb\tc\n").is_err());
        assert!(parse_manifest("a\tb\tc\t  \n").is_err());
    }

    #[test]
    fn split_names() {
        assert_eq!("dev".parse::<Split>().unwrap(), Split::Dev);
        assert!("val".parse::<Split>().is_err());
        assert_eq!(Split::Test.file_name(), "test.txt");
    }
}
