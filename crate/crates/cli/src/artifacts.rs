//! Output-directory handling. Every command writes its files into a staging
//! directory (`<out>.partial.<pid>`) and publishes it with one atomic rename,
//! so an interrupted run never leaves a half-written report under the
//! requested path. The resolved configuration and the build's version string
//! land in every directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{FileConfig, Provenance, CONFIG_VERSION};
use crate::error::{runtime, usage, CliResult};

/// Package version plus a git-describable revision baked in at build time.
pub const TOOL_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "+",
    env!("LONGTMLE_GIT_DESCRIBE")
);

/// Test hook: when this environment variable is nonempty the process aborts
/// right before the atomic publish, simulating an interrupt. The requested
/// output directory must not appear in that case.
pub const CRASH_ENV: &str = "LONGTMLE_TEST_CRASH";

/// Exit status of a crash-hook abort, distinct from every real error path.
pub const CRASH_EXIT: i32 = 86;

pub struct OutDir {
    staging: PathBuf,
    target: PathBuf,
    published: bool,
}

impl OutDir {
    pub fn create(target: &Path) -> CliResult<OutDir> {
        if target.exists() {
            return Err(usage(format!(
                "output directory {} already exists; remove it or choose another --out",
                target.display()
            )));
        }
        if let Some(parent) = target.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let name = target
            .file_name()
            .ok_or_else(|| usage(format!("{} is not a usable directory name", target.display())))?;
        let staging = target.with_file_name(format!(
            "{}.partial.{}",
            name.to_string_lossy(),
            std::process::id()
        ));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir(&staging)?;
        Ok(OutDir {
            staging,
            target: target.to_path_buf(),
            published: false,
        })
    }

    /// The staging directory files are written into before publication.
    pub fn path(&self) -> &Path {
        &self.staging
    }

    /// Writes one file into the staging directory.
    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
        fs::write(self.staging.join(name), contents.as_ref())
            .map_err(|e| runtime(format!("writing {name}: {e}")))
    }

    /// Serializes the fully resolved configuration, stamped with the tool
    /// version and the command that ran.
    pub fn write_resolved_config(&self, command: &str, cfg: &FileConfig) -> CliResult<()> {
        let mut stamped = cfg.clone();
        stamped.config_version = Some(CONFIG_VERSION);
        stamped.provenance = Some(Provenance {
            version: Some(TOOL_VERSION.to_string()),
            command: Some(command.to_string()),
        });
        let body = toml::to_string_pretty(&stamped)
            .map_err(|e| runtime(format!("serializing resolved config: {e}")))?;
        let text = format!(
            "# Fully resolved {command} configuration (defaults applied, flags folded in).\n\
             # Rerunning with `--config` on this file reproduces the outputs.\n{body}"
        );
        self.write("resolved_config.toml", text)
    }

    /// Atomically publishes the staging directory under the requested name.
    pub fn publish(mut self) -> CliResult<PathBuf> {
        if std::env::var_os(CRASH_ENV).is_some_and(|v| !v.is_empty()) {
            eprintln!(
                "{CRASH_ENV} set: aborting before publishing {}",
                self.target.display()
            );
            std::process::exit(CRASH_EXIT);
        }
        fs::rename(&self.staging, &self.target).map_err(|e| {
            runtime(format!(
                "publishing {} -> {}: {e}",
                self.staging.display(),
                self.target.display()
            ))
        })?;
        self.published = true;
        Ok(self.target.clone())
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        if !self.published {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}
