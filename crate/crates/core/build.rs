use std::process::Command;

fn main() {
    // Embed `git describe` when available so artifacts can state which build
    // produced them; fall back to the crate version outside a git checkout.
    let described = Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|out| out.status.success())
        .and_then(|out| String::from_utf8(out.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    let version = match described {
        Some(git) => format!("{}+{git}", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    };
    println!("cargo:rustc-env=NOINJECT_BUILD_VERSION={version}");
    println!("cargo:rerun-if-changed=build.rs");
}
