//! Runs every subcommand twice under the same seed and compares the outputs byte
//! for byte.

use std::fs;
use std::path::Path;
use std::process::Command;

pub const TINY_CONFIG: &str = r#"
data_dir = "data"
output_dir = "out"
n_images = 60
n_identities = 6
stages = ["dae", "gan", "joint"]
batch_size = 6
n_critic = 2
epochs_dae = 1
epochs_gan = 1
epochs_gan_decay = 0
epochs_joint = 1
epochs_joint_decay = 0
max_batches_per_epoch = 2
dae_channels = [8, 8, 8, 8]
gen_base_channels = 4
gen_res_blocks = 1
dis_base_channels = 4
extractor_epochs = 1
classifier_epochs = 1
n_client = 6
n_impostor = 6
"#;

fn run(bin: &str, dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(bin)
        .args(args)
        .current_dir(dir)
        .env_remove("TDBGAN_OUTPUT_ROOT")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

/// Relative path and contents of every file below `dir`, sorted.
pub fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(entries) = fs::read_dir(&d) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap_or_default()));
            }
        }
    }
    out.sort();
    out
}

/// Names of the commands whose two runs differed; `Err` if a command failed.
pub fn check(bin: &str, dir: &Path) -> Result<Vec<String>, String> {
    fs::write(dir.join("run.toml"), TINY_CONFIG).map_err(|e| e.to_string())?;
    let mut differing = Vec::new();
    let mut twice = |name: &str, args: &dyn Fn(&str) -> Vec<String>| -> Result<(), String> {
        let mut trees = Vec::new();
        for rep in ["a", "b"] {
            let out = format!("{name}_{rep}");
            let a = args(&out);
            run(bin, dir, &a.iter().map(String::as_str).collect::<Vec<_>>())?;
            trees.push(tree(&dir.join(&out)));
        }
        if trees[0] != trees[1] || trees[0].is_empty() {
            differing.push(name.to_string());
        }
        Ok(())
    };
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    twice("synth", &|o| s(&["synth-data", "--config", "run.toml", "--output", o]))?;
    run(bin, dir, &["synth-data", "--config", "run.toml"])?;
    twice("train", &|o| s(&["train", "--config", "run.toml", "--output", o]))?;
    let ck = "train_a/checkpoint.tdb";
    twice("edit", &|o| {
        s(&["edit", "--checkpoint", ck, "--image", "data/images/00001.png", "--target", "smile=1", "--target", "glasses=1", "--grid", "--output", o])
    })?;
    twice("eval-verify", &|o| s(&["eval-verify", "--config", "run.toml", "--checkpoint", ck, "--output", o]))?;
    twice("eval-cls", &|o| s(&["eval-cls", "--config", "run.toml", "--checkpoint", ck, "--output", o]))?;
    twice("compare-curves", &|o| {
        s(&["compare-curves", "--a", "train_a/losses.csv", "--b", "train_b/losses.csv", "--output", &format!("{o}/cmp.csv")])
    })?;
    Ok(differing)
}
