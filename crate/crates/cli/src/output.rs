//! Run directories and stamped output files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

/// A record tagged with the config hash and seed that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    pub seed: u64,
    #[serde(flatten)]
    pub inner: T,
}

const STAMP_KEYS: [&str; 2] = ["config_hash", "seed"];

pub struct RunDir {
    pub path: PathBuf,
    pub hash: String,
    pub seed: u64,
}

impl RunDir {
    /// `explicit`, or `<root>/<UTC timestamp>-<short hash>`.
    pub fn create(explicit: Option<&Path>, root: &Path, hash: &str, seed: u64) -> Result<RunDir> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => root.join(format!(
                "{}-{}",
                chrono::Utc::now().format("%Y%m%dT%H%M%SZ"),
                &hash[..12.min(hash.len())]
            )),
        };
        std::fs::create_dir_all(&path).with_context(|| format!("cannot create {}", path.display()))?;
        Ok(RunDir {
            path,
            hash: hash.to_string(),
            seed,
        })
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path.join(name);
        std::fs::write(&p, text).with_context(|| format!("cannot write {}", p.display()))
    }

    pub fn write_jsonl<T: Serialize + Clone>(&self, name: &str, items: &[T]) -> Result<()> {
        if let Some(first) = items.first() {
            let v = serde_json::to_value(first)?;
            if STAMP_KEYS.iter().any(|k| v.get(k).is_some()) {
                bail!("{name}: records already carry a stamp field");
            }
        }
        let stamped: Vec<Stamped<T>> = items
            .iter()
            .map(|i| Stamped {
                config_hash: self.hash.clone(),
                seed: self.seed,
                inner: i.clone(),
            })
            .collect();
        self.write(name, &emosim::persist::to_jsonl_string(&stamped))
    }

    /// A `seed` field equal to the run seed is folded into the stamp.
    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut inner = serde_json::to_value(value)?;
        if let Some(obj) = inner.as_object_mut() {
            if obj.contains_key("config_hash") {
                bail!("{name}: value already carries a config hash");
            }
            match obj.remove("seed") {
                Some(seed) if seed != self.seed => bail!("{name}: seed {seed} differs from run seed {}", self.seed),
                _ => {}
            }
        }
        let stamped = Stamped {
            config_hash: self.hash.clone(),
            seed: self.seed,
            inner,
        };
        let mut text = serde_json::to_string_pretty(&stamped)?;
        text.push('\n');
        self.write(name, &text)
    }

    /// Text report with a two-line header.
    pub fn write_text(&self, name: &str, body: &str) -> Result<()> {
        self.write(
            name,
            &format!("config_hash: {}\nseed: {}\n\n{body}", self.hash, self.seed),
        )
    }

    /// CSV with `config_hash,seed` prepended to every record.
    pub fn write_csv(&self, name: &str, csv_text: &str) -> Result<()> {
        let mut out = String::new();
        for (i, line) in csv_text.lines().enumerate() {
            if i == 0 {
                out.push_str("config_hash,seed,");
            } else {
                out.push_str(&format!("{},{},", self.hash, self.seed));
            }
            out.push_str(line);
            out.push('\n');
        }
        self.write(name, &out)
    }

    pub fn write_snapshot(&self, snapshot: &str) -> Result<()> {
        self.write(
            "config.snapshot",
            &format!("# config_hash: {}\n# seed: {}\n{snapshot}", self.hash, self.seed),
        )
    }

    pub fn write_raw(&self, name: &str, text: &str) -> Result<()> {
        self.write(name, text)
    }
}

/// Reads stamped JSONL and checks every line carries the same stamp.
pub fn read_stamped<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(String, u64, Vec<T>)> {
    let rows: Vec<Stamped<T>> =
        emosim::persist::read_jsonl(path).with_context(|| format!("cannot load {}", path.display()))?;
    let Some(first) = rows.first() else {
        bail!("{} is empty", path.display());
    };
    let (hash, seed) = (first.config_hash.clone(), first.seed);
    if rows.iter().any(|r| r.config_hash != hash || r.seed != seed) {
        bail!("{} mixes outputs of different runs", path.display());
    }
    Ok((hash, seed, rows.into_iter().map(|r| r.inner).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_jsonl_are_stamped() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::create(Some(&dir.path().join("r")), dir.path(), "abc", 9).unwrap();
        run.write_csv("x.csv", "a,b\n1,2\n").unwrap();
        assert_eq!(
            std::fs::read_to_string(run.path.join("x.csv")).unwrap(),
            "config_hash,seed,a,b\nabc,9,1,2\n"
        );
        #[derive(Clone, Serialize, Deserialize, PartialEq, Debug)]
        struct Row {
            v: u32,
        }
        run.write_jsonl("x.jsonl", &[Row { v: 1 }, Row { v: 2 }]).unwrap();
        let (h, s, rows) = read_stamped::<Row>(&run.path.join("x.jsonl")).unwrap();
        assert_eq!((h.as_str(), s), ("abc", 9));
        assert_eq!(rows, [Row { v: 1 }, Row { v: 2 }]);
    }

    #[test]
    fn default_dir_name_has_hash_suffix() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::create(None, dir.path(), "0123456789abcdef", 1).unwrap();
        let name = run.path.file_name().unwrap().to_string_lossy().to_string();
        assert!(name.ends_with("-0123456789ab"), "{name}");
    }
}
