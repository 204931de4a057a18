#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

/// A small f64 model trained on a handful of scenes.
pub const TINY: &str = "\
# tiny model for fast end-to-end runs
precision = f64
model.mode = dynamic
model.queries = 8
model.ratio = 2
model.basic_queries = 16
model.dim = 16
model.heads = 2
model.encoder_layers = 1
model.decoder_layers = 1
model.ff_dim = 32
model.backbone = 8,8,16
model.image_size = 32
model.coeff_hidden = 32
schedule.epochs = 2
schedule.batch_size = 4
data.train_scenes = 8
data.val_scenes = 8
";

/// [`TINY`] with some keys overridden (later lines win by replacement).
pub fn tiny_with(overrides: &[(&str, &str)]) -> String {
    let mut lines: Vec<String> = TINY.lines().map(str::to_string).collect();
    for (key, value) in overrides {
        let line = format!("{key} = {value}");
        match lines.iter_mut().find(|l| l.split('=').next().map(str::trim) == Some(*key)) {
            Some(l) => *l = line,
            None => lines.push(line),
        }
    }
    lines.join("\n") + "\n"
}

pub fn write_config(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

pub fn dynquery(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynquery")).args(args).output().unwrap()
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}
