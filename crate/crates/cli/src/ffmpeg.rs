//! Video containers are handled by an external `ffmpeg`/`ffprobe`; frames
//! are exchanged as PNG sequences.

use std::path::Path;
use std::process::Command;

use crate::failure::Failure;

const VIDEO_EXTENSIONS: [&str; 9] = [
    "mp4", "mkv", "avi", "mov", "webm", "m4v", "mpg", "mpeg", "flv",
];

pub fn is_video_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| VIDEO_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn run(cmd: &mut Command, what: &str) -> Result<std::process::Output, String> {
    let out = cmd.output().map_err(|e| {
        format!("cannot run {what} ({e}); install ffmpeg or pass a directory of frames instead")
    })?;
    if !out.status.success() {
        return Err(format!(
            "{what} failed: {}",
            String::from_utf8_lossy(&out.stderr)
                .lines()
                .last()
                .unwrap_or("")
        ));
    }
    Ok(out)
}

/// Frame rate of the first video stream.
pub fn probe_fps(video: &Path) -> Result<f64, Failure> {
    let out = run(
        Command::new("ffprobe")
            .args([
                "-v",
                "error",
                "-select_streams",
                "v:0",
                "-show_entries",
                "stream=r_frame_rate",
                "-of",
                "default=noprint_wrappers=1:nokey=1",
            ])
            .arg(video),
        "ffprobe",
    )
    .map_err(Failure::Input)?;
    let text = String::from_utf8_lossy(&out.stdout);
    let rate = text.trim();
    let fps = match rate.split_once('/') {
        Some((n, d)) => n
            .parse::<f64>()
            .ok()
            .zip(d.parse::<f64>().ok())
            .map(|(n, d)| n / d),
        None => rate.parse().ok(),
    };
    fps.filter(|f| f.is_finite() && *f > 0.0)
        .ok_or_else(|| Failure::Input(format!("cannot read the frame rate of {}", video.display())))
}

/// Decode every frame of `video` into `dir/frame_%06d.png`.
pub fn extract_frames(video: &Path, dir: &Path) -> Result<(), Failure> {
    run(
        Command::new("ffmpeg")
            .args(["-v", "error", "-i"])
            .arg(video)
            .args(["-vsync", "passthrough"])
            .arg(dir.join("frame_%06d.png")),
        "ffmpeg",
    )
    .map(|_| ())
    .map_err(Failure::Input)
}

/// Encode `dir/frame_%06d.png` at `fps` into `out`, copying the audio of
/// `audio_from` when possible.
pub fn encode_frames(
    dir: &Path,
    fps: f64,
    audio_from: Option<&Path>,
    out: &Path,
) -> Result<(), Failure> {
    let encode = |with_audio: bool| {
        let mut cmd = Command::new("ffmpeg");
        cmd.args(["-v", "error", "-y", "-framerate", &format!("{fps}"), "-i"])
            .arg(dir.join("frame_%06d.png"));
        if let (true, Some(src)) = (with_audio, audio_from) {
            cmd.arg("-i").arg(src).args([
                "-map",
                "0:v",
                "-map",
                "1:a?",
                "-c:a",
                "copy",
                "-shortest",
            ]);
        }
        cmd.args(["-pix_fmt", "yuv420p"]).arg(out);
        run(&mut cmd, "ffmpeg")
    };
    match encode(audio_from.is_some()) {
        Ok(_) => Ok(()),
        Err(e) if audio_from.is_some() => {
            log::warn!(
                "audio could not be copied into {} ({e}); writing video only",
                out.display()
            );
            encode(false).map(|_| ()).map_err(Failure::Output)
        }
        Err(e) => Err(Failure::Output(e)),
    }
}
