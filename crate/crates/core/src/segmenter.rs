//! Uniform, non-overlapping temporal segmentation and frame extraction.
//!
//! A video is first sampled at a fixed rate (`sample_fps`), giving
//! `N = floor(duration_s * sample_fps)` sampled frames. These are chunked into
//! consecutive groups of `frames_per_segment`; a trailing partial group is kept
//! only when it has at least `keep_tail_min` frames. At least one segment is always
//! produced.
//!
//! Extraction maps each sampled frame to the nearest native frame and runs an
//! external decoder once per segment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::VideoManifestEntry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub sample_fps: f64,
    pub frames_per_segment: usize,
    pub keep_tail_min: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self::with_length(16)
    }
}

impl SegmentConfig {
    /// Config at 8 fps with the given segment length and a tail threshold of half a segment.
    pub fn with_length(frames_per_segment: usize) -> Self {
        Self {
            sample_fps: 8.0,
            frames_per_segment,
            keep_tail_min: (frames_per_segment / 2).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_fps.is_finite() && self.sample_fps > 0.0) {
            return Err(Error::Config(format!("sample_fps must be positive, got {}", self.sample_fps)));
        }
        if self.frames_per_segment == 0 {
            return Err(Error::Config("frames_per_segment must be at least 1".into()));
        }
        if self.keep_tail_min == 0 || self.keep_tail_min > self.frames_per_segment {
            return Err(Error::Config(format!(
                "keep_tail_min must be in 1..={}, got {}",
                self.frames_per_segment, self.keep_tail_min
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub index: usize,
    /// Indices into the sampled-frame stream.
    pub frame_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub video_id: String,
    pub sample_fps: f64,
    pub segments: Vec<Segment>,
}

impl SegmentPlan {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Number of frames obtained by sampling `duration_s` seconds at `fps`.
pub fn sampled_frame_count(duration_s: f64, fps: f64) -> usize {
    // the epsilon absorbs products like 2.9999999999999996 that should be whole
    (duration_s * fps + 1e-9).floor().max(0.0) as usize
}

pub fn plan_segments(entry: &VideoManifestEntry, cfg: &SegmentConfig) -> Result<SegmentPlan> {
    cfg.validate()?;
    let n = sampled_frame_count(entry.duration_s, cfg.sample_fps);
    let bounds = segment_bounds(n, cfg.frames_per_segment, cfg.keep_tail_min).ok_or_else(|| {
        Error::Invalid(format!("video `{}` too short to sample", entry.video_id))
    })?;
    let segments = bounds
        .into_iter()
        .enumerate()
        .map(|(index, (start, end))| Segment {
            index,
            frame_indices: (start..end).collect(),
        })
        .collect();
    Ok(SegmentPlan {
        video_id: entry.video_id.clone(),
        sample_fps: cfg.sample_fps,
        segments,
    })
}

/// Half-open `[start, end)` ranges of the planned segments, or `None` when `n == 0`.
pub fn segment_bounds(n: usize, len: usize, keep_tail_min: usize) -> Option<Vec<(usize, usize)>> {
    if n == 0 || len == 0 {
        return None;
    }
    let full = n / len;
    let tail = n % len;
    let mut out: Vec<(usize, usize)> = (0..full).map(|i| (i * len, (i + 1) * len)).collect();
    if tail > 0 && tail >= keep_tail_min {
        out.push((full * len, n));
    }
    if out.is_empty() {
        out.push((0, n));
    }
    Some(out)
}

/// Segment count for a video without materialising the plan.
pub fn segment_count(entry: &VideoManifestEntry, cfg: &SegmentConfig) -> Result<usize> {
    Ok(plan_segments(entry, cfg)?.len())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameBatch {
    pub video_id: String,
    /// Segment index, or a label such as `direct` for whole-video sampling.
    pub label: String,
    pub frames: Vec<PathBuf>,
}

/// External decoder invocation. Arguments may contain the placeholders
/// `{input}`, `{output}` (an image path pattern with a `%d` counter starting at 0),
/// `{timestamps}` (comma-separated seconds), `{frame_numbers}` (comma-separated native
/// frame numbers) and `{select}` (an ffmpeg `select` expression over those frame numbers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub program: String,
    pub args: Vec<String>,
    /// Extension of the lossless raster format the decoder writes.
    pub image_ext: String,
}

fn default_image_ext() -> String {
    "png".into()
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            program: "ffmpeg".into(),
            args: [
                "-nostdin", "-loglevel", "error", "-y", "-i", "{input}", "-vf", "select={select}",
                "-vsync", "0", "-start_number", "0", "{output}",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            image_ext: default_image_ext(),
        }
    }
}

/// Native frame number nearest to `t` seconds, clamped into the video.
pub fn nearest_native_frame(entry: &VideoManifestEntry, t: f64) -> u64 {
    let total = sampled_frame_count(entry.duration_s, entry.native_fps).max(1) as u64;
    let n = (t * entry.native_fps).round().max(0.0) as u64;
    n.min(total - 1)
}

/// Timestamps (seconds) of the sampled frames in a segment.
pub fn segment_timestamps(segment: &Segment, sample_fps: f64) -> Vec<f64> {
    segment
        .frame_indices
        .iter()
        .map(|&i| i as f64 / sample_fps)
        .collect()
}

/// `count` timestamps spread uniformly over the whole video (bin centres).
pub fn uniform_timestamps(entry: &VideoManifestEntry, count: usize) -> Vec<f64> {
    let step = entry.duration_s / count as f64;
    (0..count).map(|k| (k as f64 + 0.5) * step).collect()
}

pub fn extract_frames(
    entry: &VideoManifestEntry,
    segment: &Segment,
    sample_fps: f64,
    decoder: &DecoderConfig,
    workdir: &Path,
) -> Result<FrameBatch> {
    let timestamps = segment_timestamps(segment, sample_fps);
    extract_at(entry, &timestamps, &segment.index.to_string(), decoder, workdir)
}

/// Decodes the frames nearest to `timestamps` into
/// `{workdir}/{video_id}_{label}_{k}.{ext}`, overwriting any previous files.
pub fn extract_at(
    entry: &VideoManifestEntry,
    timestamps: &[f64],
    label: &str,
    decoder: &DecoderConfig,
    workdir: &Path,
) -> Result<FrameBatch> {
    std::fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;

    let natives: Vec<u64> = timestamps.iter().map(|&t| nearest_native_frame(entry, t)).collect();
    // the decoder emits each selected frame once, so ask for unique frames and fan out afterwards
    let mut unique: Vec<u64> = natives.clone();
    unique.sort_unstable();
    unique.dedup();
    let position: BTreeMap<u64, usize> = unique.iter().enumerate().map(|(i, &n)| (n, i)).collect();

    let tmp = workdir.join(format!(".decode_{}_{}", entry.video_id, label));
    let _ = std::fs::remove_dir_all(&tmp);
    std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let result = run_decoder(entry, &unique, decoder, &tmp).and_then(|()| {
        let mut frames = Vec::with_capacity(natives.len());
        for (k, native) in natives.iter().enumerate() {
            let src = tmp.join(format!("frame_{}.{}", position[native], decoder.image_ext));
            if !src.is_file() {
                return Err(Error::Decode {
                    status: "ok".into(),
                    diagnostics: format!("decoder did not produce {}", src.display()),
                });
            }
            let dst = workdir.join(format!("{}_{}_{}.{}", entry.video_id, label, k, decoder.image_ext));
            std::fs::copy(&src, &dst).map_err(|e| Error::io(&dst, e))?;
            frames.push(dst);
        }
        Ok(frames)
    });
    let _ = std::fs::remove_dir_all(&tmp);

    Ok(FrameBatch {
        video_id: entry.video_id.clone(),
        label: label.to_owned(),
        frames: result?,
    })
}

fn run_decoder(entry: &VideoManifestEntry, natives: &[u64], decoder: &DecoderConfig, tmp: &Path) -> Result<()> {
    let timestamps = natives
        .iter()
        .map(|&n| format!("{:.6}", n as f64 / entry.native_fps))
        .collect::<Vec<_>>()
        .join(",");
    let frame_numbers = natives.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
    let select = natives
        .iter()
        .map(|n| format!("eq(n\\,{n})"))
        .collect::<Vec<_>>()
        .join("+");
    let output = tmp.join(format!("frame_%d.{}", decoder.image_ext));
    let input = entry.path.to_string_lossy();
    let output = output.to_string_lossy();

    let args: Vec<String> = decoder
        .args
        .iter()
        .map(|a| {
            a.replace("{input}", &input)
                .replace("{output}", &output)
                .replace("{timestamps}", &timestamps)
                .replace("{frame_numbers}", &frame_numbers)
                .replace("{select}", &select)
        })
        .collect();

    let out = Command::new(&decoder.program).args(&args).output().map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Config(format!("frame decoder `{}` not found", decoder.program))
        } else {
            Error::Decode {
                status: "spawn failed".into(),
                diagnostics: e.to_string(),
            }
        }
    })?;
    if !out.status.success() {
        let stderr = String::from_utf8_lossy(&out.stderr);
        return Err(Error::Decode {
            status: out.status.to_string(),
            diagnostics: stderr.chars().take(2000).collect(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(duration_s: f64) -> VideoManifestEntry {
        VideoManifestEntry {
            video_id: "v".into(),
            path: "v.mp4".into(),
            duration_s,
            native_fps: 30.0,
            scene_id: "s".into(),
        }
    }

    fn sizes(plan: &SegmentPlan) -> Vec<usize> {
        plan.segments.iter().map(|s| s.frame_indices.len()).collect()
    }

    #[test]
    fn twenty_four_seconds_gives_twelve_full_segments() {
        let plan = plan_segments(&entry(24.0), &SegmentConfig::default()).unwrap();
        assert_eq!(sizes(&plan), vec![16; 12]);
    }

    #[test]
    fn tail_of_eight_is_kept() {
        // 25 s at 8 fps = 200 frames
        let plan = plan_segments(&entry(25.0), &SegmentConfig::default()).unwrap();
        assert_eq!(plan.len(), 13);
        assert_eq!(*sizes(&plan).last().unwrap(), 8);
        assert_eq!(plan.segments[12].frame_indices, (192..200).collect::<Vec<_>>());
    }

    #[test]
    fn short_tail_is_dropped() {
        // 199 = 12 * 16 + 7
        assert_eq!(segment_bounds(199, 16, 8).unwrap().len(), 12);
        assert_eq!(segment_bounds(199, 16, 7).unwrap().len(), 13);
        let bounds = segment_bounds(200, 16, 9).unwrap();
        assert_eq!(bounds.len(), 12);
        assert_eq!(bounds.last(), Some(&(176, 192)));
    }

    #[test]
    fn very_short_video_gives_single_segment() {
        assert_eq!(segment_bounds(10, 16, 8).unwrap(), vec![(0, 10)]);
        assert_eq!(segment_bounds(5, 16, 8).unwrap(), vec![(0, 5)]);
    }

    #[test]
    fn zero_frames_is_an_error() {
        let err = plan_segments(&entry(0.1), &SegmentConfig::default()).unwrap_err();
        assert!(err.to_string().contains("too short to sample"));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = SegmentConfig {
            keep_tail_min: 17,
            ..SegmentConfig::default()
        };
        assert!(plan_segments(&entry(10.0), &cfg).is_err());
        cfg.frames_per_segment = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn nearest_native_frame_is_clamped() {
        let e = entry(2.0);
        assert_eq!(nearest_native_frame(&e, 0.0), 0);
        assert_eq!(nearest_native_frame(&e, 0.125), 4);
        assert_eq!(nearest_native_frame(&e, 5.0), 59);
    }

    #[test]
    fn missing_decoder_is_config_error_without_leftovers() {
        let dir = tempfile::tempdir().unwrap();
        let plan = plan_segments(&entry(4.0), &SegmentConfig::default()).unwrap();
        let decoder = DecoderConfig {
            program: "definitely-not-a-decoder-binary".into(),
            ..DecoderConfig::default()
        };
        let err = extract_frames(&entry(4.0), &plan.segments[0], 8.0, &decoder, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
