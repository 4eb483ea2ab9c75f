use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

/// Record of one command invocation. The only place wall-clock values appear.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<String>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub tool_version: &'static str,
    pub started_unix_s: f64,
    pub wall_time_s: f64,
}

pub struct ManifestBuilder {
    manifest: RunManifest,
    clock: Instant,
}

impl ManifestBuilder {
    pub fn start(command: &str, config: Option<&Path>, seed: u64, threads: Option<usize>) -> Self {
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        ManifestBuilder {
            manifest: RunManifest {
                command: command.to_string(),
                config: config.map(|p| p.display().to_string()),
                seed,
                threads,
                inputs: Vec::new(),
                outputs: Vec::new(),
                tool_version: env!("CARGO_PKG_VERSION"),
                started_unix_s: started,
                wall_time_s: 0.0,
            },
            clock: Instant::now(),
        }
    }

    pub fn input(&mut self, p: &Path) {
        self.manifest.inputs.push(p.display().to_string());
    }

    pub fn output(&mut self, p: &Path) {
        self.manifest.outputs.push(p.display().to_string());
    }

    pub fn finish(mut self, path: &Path) -> anyhow::Result<()> {
        self.manifest.wall_time_s = self.clock.elapsed().as_secs_f64();
        write_atomic(path, serde_json::to_string_pretty(&self.manifest)?.as_bytes())
    }
}

/// Manifest location for a file output: `<out>.manifest.json`.
pub fn beside(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(|e| anyhow::Error::new(e).context(format!("writing {}", path.display())))
}
