use std::process::Command;

/// Embeds a git-describable revision so every output directory can state
/// exactly which build produced it.
fn main() {
    println!("cargo:rerun-if-changed=build.rs");
    let describe = Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|out| out.status.success())
        .map(|out| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "untracked".to_string());
    println!("cargo:rustc-env=LONGTMLE_GIT_DESCRIBE={describe}");
}
