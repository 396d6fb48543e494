#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use emosim::domain::{AgentProfile, EmotionLabel, StrategyChoice, StrategyPool, Transcript, Valence};
use emosim::genesis::{GroupMember, GroupRole, ProfilePair, Topic};
use emosim::dialogue::FixedContextCase;

type Handler = dyn Fn(usize, &serde_json::Value) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server: one request per connection, answered by a
/// handler that sees the hit number and the parsed JSON body.
pub struct StubServer {
    pub url: String,
    hits: Arc<AtomicUsize>,
}

impl StubServer {
    pub fn start(handler: impl Fn(usize, &serde_json::Value) -> (u16, String) + Send + Sync + 'static) -> StubServer {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub server");
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::new(handler);
        let counter = hits.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let n = counter.fetch_add(1, Ordering::SeqCst);
                let handler = handler.clone();
                thread::spawn(move || serve(stream, n, handler.as_ref()));
            }
        });
        StubServer { url, hits }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

fn serve(stream: TcpStream, n: usize, handler: &Handler) {
    let mut reader = BufReader::new(stream.try_clone().expect("clone stream"));
    let mut length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0; length];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let json: serde_json::Value = serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null);
    let (status, payload) = handler(n, &json);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} STUB\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
    let _ = stream.flush();
}

/// Chat-completions style success body.
pub fn chat_body(text: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 10, "completion_tokens": 5}
    })
    .to_string()
}

pub fn prompt_of(body: &serde_json::Value) -> String {
    body["messages"]
        .as_array()
        .map(|ms| {
            ms.iter()
                .filter_map(|m| m["content"].as_str())
                .collect::<Vec<_>>()
                .join("\n")
        })
        .unwrap_or_default()
}

pub fn profile(name: &str) -> AgentProfile {
    serde_json::from_value(serde_json::json!({
        "name": name, "age": 34, "innate": ["curious", "kind"], "occupation": "nurse",
        "origin": "Canada", "gender": "female",
        "description": format!("{name} once moved abroad alone and had to start over.")
    }))
    .unwrap()
}

/// A conversation of `len` alternating utterances; the first agent reply
/// after the context is annotated with `human` strategies.
pub fn case(id: usize, len: usize, human: &[&str]) -> FixedContextCase {
    let pool = StrategyPool::default();
    let mut t = Transcript::new(format!("conv-{id:02}"));
    for i in 0..len {
        let who = if i % 2 == 0 { "friend" } else { "me" };
        t.push(who, who, &format!("case {id} utterance {i}"));
    }
    let mut c = FixedContextCase::new(
        t,
        EmotionLabel {
            label: "anxious".into(),
            valence: Valence::Negative,
        },
        ProfilePair {
            friend: profile("Maya Chen"),
            me: profile("Sophia Turner"),
        },
    )
    .unwrap();
    let reply = c.context.len();
    if let Some(u) = c.source_conversation.utterances[reply..].iter_mut().find(|u| u.speaker_id == "me") {
        u.strategies = Some(StrategyChoice::from_names(human.iter().copied(), &pool).unwrap());
    }
    c
}

pub const POSITIONS: [&str; 6] = [
    "project manager",
    "structural engineer",
    "architect",
    "interior designer",
    "financial analyst",
    "sustainability consultant",
];

pub fn group() -> Vec<GroupMember> {
    POSITIONS
        .iter()
        .enumerate()
        .map(|(i, pos)| GroupMember {
            id: format!("m{}", i + 1),
            profile: profile(&format!("Member{i} Lastname")),
            role: if i == 0 { GroupRole::Leader } else { GroupRole::Member },
            position: pos.to_string(),
            goal: format!("make sure the {pos} concerns are addressed"),
            self_emotion: None,
        })
        .collect()
}

pub fn topic(steps: usize) -> Topic {
    Topic::new(
        "House design",
        (1..=steps).map(|i| format!("Agree on design element {i}")).collect(),
    )
    .unwrap()
}
