#![allow(dead_code)]

use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::Value;
use sha2::{Digest, Sha256};

use sns_core::backends::{
    completion_body, wire_image_count, wire_user_text, BackendConfig, Cassette, CassetteMode, Client, FnTransport, Transport,
};
use sns_core::ingest::{Answer, AnswerOption, Category, OptionLetter, Question, VideoManifestEntry};
use sns_core::segmenter::DecoderConfig;

/// Shell decoder that writes, for every requested frame, the input file's bytes
/// followed by the frame number. Stands in for ffmpeg.
pub fn fake_decoder(dir: &Path) -> DecoderConfig {
    let script = dir.join("fake_decoder.sh");
    std::fs::write(
        &script,
        "#!/bin/sh\nin=\"$1\"; out=\"$2\"; i=0\nfor n in $(echo \"$3\" | tr ',' ' '); do\n  f=$(printf \"$out\" \"$i\")\n  { cat \"$in\"; echo \"frame $n\"; } > \"$f\" || exit 1\n  i=$((i+1))\ndone\n",
    )
    .unwrap();
    std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();
    DecoderConfig {
        program: script.to_string_lossy().into_owned(),
        args: vec!["{input}".into(), "{output}".into(), "{frame_numbers}".into()],
        image_ext: "png".into(),
    }
}

pub fn video(dir: &Path, id: &str, duration_s: f64) -> VideoManifestEntry {
    let path = dir.join(format!("{id}.mp4"));
    std::fs::write(&path, format!("video {id}\n")).unwrap();
    VideoManifestEntry {
        video_id: id.into(),
        path,
        duration_s,
        native_fps: 30.0,
        scene_id: format!("scene-{id}"),
    }
}

pub fn letter(c: char) -> OptionLetter {
    OptionLetter::from_char(c).unwrap()
}

pub fn mcq(id: &str, video_id: &str, category: Category, gold: char) -> Question {
    Question {
        question_id: id.into(),
        video_id: video_id.into(),
        text: format!("Standing by the sofa in {video_id}, where is object {id}?"),
        category,
        answer: Answer::Mcq {
            options: ["left", "right", "behind", "front"]
                .iter()
                .zip("ABCD".chars())
                .map(|(t, c)| AnswerOption {
                    letter: letter(c),
                    text: format!("{t} of the {id} landmark"),
                })
                .collect(),
            gold: letter(gold),
        },
    }
}

fn images_digest(body: &Value) -> String {
    let mut h = Sha256::new();
    for m in body["messages"].as_array().into_iter().flatten() {
        for p in m["content"].as_array().into_iter().flatten() {
            if let Some(u) = p["image_url"]["url"].as_str() {
                h.update(u.as_bytes());
            }
        }
    }
    hex::encode(h.finalize())[..8].to_string()
}

/// VLM that returns a tagged narrative derived from the frames it was shown.
pub fn scripted_vlm_transport() -> Arc<dyn Transport> {
    Arc::new(FnTransport(|body: &Value| {
        let d = images_digest(body);
        let n = wire_image_count(body);
        Ok((
            200,
            completion_body(&format!(
                "<scene> A living room with a sofa and {n} views tagged {d}. <camera> The camera pans left then dollies forward."
            )),
        ))
    }))
}

/// Proxy whose answer letter is a function of the prompt text and a salt.
pub fn scripted_proxy_transport(salt: &'static str) -> Arc<dyn Transport> {
    Arc::new(FnTransport(move |body: &Value| {
        let text = wire_user_text(body);
        let h = Sha256::digest(format!("{salt}{text}").as_bytes());
        let c = (b'A' + h[0] % 4) as char;
        Ok((200, completion_body(&format!("<think>layout reasoning</think> <answer>{c}</answer>"))))
    }))
}

pub fn backend(model: &str, cassette: Option<PathBuf>) -> BackendConfig {
    BackendConfig {
        model: model.into(),
        cassette,
        backoff_ms: 1,
        ..BackendConfig::default()
    }
}

pub fn recording_client(cfg: BackendConfig, transport: Arc<dyn Transport>) -> Client {
    let path = cfg.cassette.clone().expect("cassette path");
    let cassette = Arc::new(Cassette::open(&path, CassetteMode::Record).unwrap());
    Client::with_transport(cfg, transport, Some(cassette))
}

pub fn replay_client(cfg: BackendConfig) -> Client {
    let path = cfg.cassette.clone().expect("cassette path");
    Client::offline(cfg, Arc::new(Cassette::open(&path, CassetteMode::Replay).unwrap()))
}

pub fn categories() -> [Category; 4] {
    [Category::RelDir, Category::RelDist, Category::ApprOrder, Category::RoutePlan]
}

/// TOML string literal.
pub fn q(p: &Path) -> String {
    format!("{:?}", p.to_string_lossy())
}

/// Client that calls `transport` directly, without a cassette.
pub fn passthrough_client(model: &str, transport: Arc<dyn Transport>) -> Client {
    Client::with_transport(backend(model, None), transport, None)
}

/// Videos with the given durations and `per_video` multiple-choice questions each,
/// cycling through the four categories and gold letters.
pub fn mini_bench(dir: &Path, durations: &[f64], per_video: usize) -> (Vec<VideoManifestEntry>, Vec<Question>) {
    let videos: Vec<_> = durations
        .iter()
        .enumerate()
        .map(|(i, &d)| video(dir, &format!("v{i}"), d))
        .collect();
    let mut questions = Vec::new();
    for v in &videos {
        for k in 0..per_video {
            let n = questions.len();
            questions.push(mcq(&format!("q{n:03}"), &v.video_id, categories()[n % 4].clone(), "ABCD".as_bytes()[(n * 7 + k) % 4] as char));
        }
    }
    (videos, questions)
}

pub fn write_bench(dir: &Path, videos: &[VideoManifestEntry], questions: &[Question]) -> (PathBuf, PathBuf) {
    let m = dir.join("manifest.jsonl");
    let q = dir.join("questions.jsonl");
    sns_core::ingest::save_video_manifest(&m, videos).unwrap();
    sns_core::ingest::save_question_set(&q, questions).unwrap();
    (m, q)
}

/// Run configuration with the fake decoder; `body` is appended verbatim.
pub fn write_config(dir: &Path, decoder: &DecoderConfig, body: &str) -> PathBuf {
    let args: Vec<String> = decoder.args.iter().map(|a| format!("{a:?}")).collect();
    let text = format!(
        "seed = 7\nparallel = 2\n{body}\n[decoder]\nprogram = {:?}\nargs = [{}]\n",
        decoder.program,
        args.join(", ")
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

pub fn sns_bin() -> std::process::Command {
    let mut c = std::process::Command::new(env!("CARGO_BIN_EXE_sns"));
    c.env("RUST_LOG", "error");
    c
}
