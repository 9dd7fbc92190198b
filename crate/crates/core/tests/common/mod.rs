#![allow(dead_code)]

pub mod synth;

use std::path::{Path, PathBuf};

use figqa::corpus::{load_corpus, Corpus};
use figqa::prompting::render_bundle;
use figqa::retrieval::FewShotSelection;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn prompt_cases() -> Corpus {
    load_corpus(&fixture("prompt_cases.jsonl"), None).expect("prompt fixture loads")
}

fn selection(ids: &[&str]) -> FewShotSelection {
    FewShotSelection {
        example_ids: ids.iter().map(|s| s.to_string()).collect(),
        similarities: vec![0.0; ids.len()],
        pool_size: ids.len(),
    }
}

/// (golden file name, rendered text) for every prompt case, plus one
/// two-shot bundle.
pub fn rendered_prompts() -> Vec<(String, String)> {
    let corpus = prompt_cases();
    let mut out: Vec<(String, String)> = corpus
        .instances()
        .iter()
        .map(|inst| {
            let b = render_bundle(inst, &selection(&[]), &corpus).expect("renders");
            (format!("{}.txt", inst.instance_id), b.to_text())
        })
        .collect();
    let query = corpus.get("p3").unwrap();
    let b = render_bundle(query, &selection(&["p1", "p5"]), &corpus).expect("renders");
    out.push(("p3_two_shot.txt".to_string(), b.to_text()));
    out
}

/// Names of golden files whose content differs from the current rendering.
pub fn golden_mismatches() -> Vec<String> {
    rendered_prompts()
        .into_iter()
        .filter(|(name, text)| std::fs::read(golden_dir().join(name)).ok().as_deref() != Some(text.as_bytes()))
        .map(|(name, _)| name)
        .collect()
}

/// Copy of the fixture directory so commands can write caches next to it.
pub fn project_copy() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for entry in std::fs::read_dir(fixture("")).unwrap() {
        let entry = entry.unwrap();
        if entry.file_type().unwrap().is_file() {
            std::fs::copy(entry.path(), dir.path().join(entry.file_name())).unwrap();
        }
    }
    dir
}

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs the binary with `project.toml` from `dir`.
pub fn figqa(dir: &Path, args: &[&str]) -> Output {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_figqa"))
        .current_dir(dir)
        .arg("--project")
        .arg(dir.join("project.toml"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("FIGQA_PROJECT")
        .output()
        .unwrap();
    Output {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub const PLAN_CONFIGS: [&str; 4] = [
    "internvl:1s_q_img_f_blip",
    "internvl:1s_q_f",
    "pixtral:2s_q_f",
    "pixtral:2s_q_img_f",
];
