//! Toy corpora and helpers shared by the CLI test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sepconv::synthetic::{translating_sequence, Texture};
use sepconv::Image;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sepconv"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn sepconv")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Write `frames` translating views of texture `seed` into `dir`.
pub fn write_sequence(
    dir: &Path,
    seed: u64,
    size: (usize, usize),
    frames: usize,
    velocity: (f64, f64),
) -> Vec<Image> {
    std::fs::create_dir_all(dir).unwrap();
    let seq = translating_sequence(&Texture::random(seed), size.0, size.1, frames, velocity);
    for (i, f) in seq.iter().enumerate() {
        f.save(dir.join(format!("{i:05}.png"))).unwrap();
    }
    seq.iter().map(Image::quantized).collect()
}

/// Sequences of moving textures, one folder each.
pub fn toy_corpus(root: &Path, sequences: usize, frames: usize, size: usize) -> PathBuf {
    let velocities = [
        (1.0, 2.0),
        (-2.0, 1.0),
        (0.0, -3.0),
        (2.5, 0.5),
        (-1.0, -1.5),
        (3.0, -2.0),
    ];
    for s in 0..sequences {
        write_sequence(
            &root.join(format!("seq{s:02}")),
            40 + s as u64,
            (size, size),
            frames,
            velocities[s % velocities.len()],
        );
    }
    root.to_path_buf()
}

/// Reduced network, small patches, short epochs.
pub fn write_toy_config(path: &Path, dataset: &Path, checkpoints: &Path) {
    let text = format!(
        "version = 1\n\
         encoder_channels = 4,8,8,16,16\n\
         kernel_size = 7\n\
         batch_size = 4\n\
         learning_rate = 0.001\n\
         epochs = 1\n\
         preview_count = 2\n\
         patch_size = 64\n\
         max_patches = 4\n\
         crop = 64\n\
         validation_fraction = 0.2\n\
         dataset = {}\n\
         checkpoint_dir = {}\n",
        dataset.display(),
        checkpoints.display()
    );
    std::fs::write(path, text).unwrap();
}
