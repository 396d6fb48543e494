//! `export-dataset`: ED-style CSV to seq2seq instruction files.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use emosim::dataset::{export_seq2seq, first_person, ingest_ed, split, to_tsv, ColumnMap, EdConversation, ExportOptions};
use emosim::dialogue::{extract_context, SeMode};
use emosim::domain::SelfEmotion;
use emosim::emotion::{generate_profile_event, generate_random_event, render_label_emotion, sample_label};
use emosim::genesis::generate_speaker_profiles;
use emosim::seeds::derive_seed;
use emosim::Engine;

use crate::Session;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelfEmotionLine {
    pub conversation_id: String,
    pub self_emotion: SelfEmotion,
}

fn generate_one(conv: &EdConversation, mode: SeMode, engine: &Engine, seed: u64) -> Result<Option<SelfEmotion>> {
    if mode == SeMode::None {
        return Ok(None);
    }
    if mode == SeMode::Label {
        let label = sample_label(&engine.labels, &mut ChaCha8Rng::seed_from_u64(seed));
        return Ok(Some(render_label_emotion("Me", &label)?));
    }
    let context = extract_context(&conv.transcript)?;
    let me = generate_speaker_profiles(&context, engine)?.me;
    Ok(Some(match mode {
        SeMode::ProfileEvent => generate_profile_event(&me, engine, None)?,
        _ => generate_random_event(&me, engine, None)?,
    }))
}

pub fn run(s: &Session) -> Result<()> {
    let c = &s.loaded.config;
    let d = c.dataset.as_ref().context("config has no [dataset] block")?;
    let columns = match &d.columns_path {
        Some(p) => {
            let path = s.loaded.resolve(p);
            ColumnMap::from_toml(&std::fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?)?
        }
        None => ColumnMap::default(),
    };
    let ingest = ingest_ed(&s.loaded.resolve(&d.ed_path), &columns)?;
    let mode = c.se_mode.unwrap_or(SeMode::None);
    let with_se = d.with_se.unwrap_or(mode != SeMode::None);

    let mut conversations = ingest.conversations;
    let mut generated = Vec::new();
    let mut se_failures = Vec::new();
    let mut lookup = BTreeMap::new();
    if with_se {
        match &d.self_emotions_path {
            Some(p) => {
                let lines: Vec<SelfEmotionLine> = emosim::persist::read_jsonl(&s.loaded.resolve(p))?;
                for l in lines {
                    lookup.insert(l.conversation_id, first_person(&l.self_emotion));
                }
            }
            None => {
                anyhow::ensure!(mode != SeMode::None, "with_se needs se_mode or dataset.self_emotions_path");
                for (i, conv) in conversations.iter().enumerate() {
                    let id = conv.transcript.id.clone();
                    match generate_one(conv, mode, &s.engine, derive_seed(c.seed, &[i as u64])) {
                        Ok(Some(se)) => {
                            lookup.insert(id.clone(), first_person(&se));
                            generated.push(SelfEmotionLine {
                                conversation_id: id,
                                self_emotion: se,
                            });
                        }
                        Ok(None) => {}
                        Err(e) => {
                            tracing::warn!(conversation = %id, error = %e, "self-emotion generation failed");
                            se_failures.push(id);
                        }
                    }
                }
            }
        }
        let before = conversations.len();
        conversations.retain(|conv| lookup.contains_key(&conv.transcript.id));
        if conversations.len() < before {
            tracing::warn!(dropped = before - conversations.len(), "conversations without self-emotion");
        }
    }

    let opts = ExportOptions {
        with_se,
        eos_token: d.eos_token.clone(),
        token_budget: d.token_budget,
    };
    let instances = export_seq2seq(&conversations, &opts, &lookup)?;
    let (splits, manifest) = split(&instances, d.ratios, c.seed)?;
    for (name, part) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        s.run.write_jsonl(&format!("{name}.jsonl"), part)?;
        s.run.write_raw(&format!("{name}.tsv"), &to_tsv(part))?;
    }
    s.run.write_json("split_manifest.json", &manifest)?;
    if !generated.is_empty() {
        s.run.write_jsonl("self_emotions.jsonl", &generated)?;
    }

    let mut text = String::new();
    let _ = writeln!(text, "conversations: {}", conversations.len());
    let _ = writeln!(text, "skipped rows: {}", ingest.skipped_rows);
    let _ = writeln!(text, "self-emotion: {}", if with_se { mode.as_str() } else { "off" });
    let _ = writeln!(text, "self-emotion failures (filtered): {}", se_failures.len());
    let _ = writeln!(text, "instances: {}", instances.len());
    let mut csv = String::from("split,conversations,instances\n");
    for (name, ids, part) in [
        ("train", &manifest.train, &splits.train),
        ("val", &manifest.val, &splits.val),
        ("test", &manifest.test, &splits.test),
    ] {
        let _ = writeln!(text, "{name}: {} conversations, {} instances", ids.len(), part.len());
        let _ = writeln!(csv, "{name},{},{}", ids.len(), part.len());
    }
    s.run.write_text("report.txt", &text)?;
    s.run.write_csv("report.csv", &csv)?;
    Ok(())
}
