use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};

pub const FILE: &str = "manifest.txt";

/// `key = value` record of one command invocation, written to the output
/// directory before any work starts.
#[derive(Clone, Debug)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Manifest {
            entries: vec![
                ("command".into(), command.into()),
                ("build".into(), build_id()),
                ("started_unix".into(), secs.to_string()),
            ],
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    pub fn extend(&mut self, items: impl IntoIterator<Item = (String, String)>) -> &mut Self {
        self.entries.extend(items);
        self
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(FILE);
        fs::write(&path, self.render()).with_context(|| format!("writing {}", path.display()))
    }
}

/// Package version plus the source revision when the build saw one.
pub fn build_id() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), option_env!("STN_ICNN_REVISION").unwrap_or("unknown"))
}
