use std::sync::Arc;

use crate::domain::StrategyPool;
use crate::emotion::LabelPool;
use crate::gateway::{ChatBackend, ChatMessage, ChatRequest, GatewayError, DEFAULT_TEMPERATURE, JUDGE_TEMPERATURE};
use crate::templates::TemplateRegistry;

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSettings {
    pub model: String,
    pub temperature: f32,
    pub judge_temperature: f32,
    pub max_tokens: u32,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        GenerationSettings {
            model: "gpt-4".into(),
            temperature: DEFAULT_TEMPERATURE,
            judge_temperature: JUDGE_TEMPERATURE,
            max_tokens: 1024,
        }
    }
}

/// Everything a pipeline needs to prompt a model: the backend, the prompt
/// templates, the strategy and label pools, and sampling settings.
#[derive(Clone)]
pub struct Engine {
    backend: Arc<dyn ChatBackend>,
    pub templates: TemplateRegistry,
    pub strategies: StrategyPool,
    pub labels: LabelPool,
    pub settings: GenerationSettings,
}

impl Engine {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Engine {
            backend,
            templates: TemplateRegistry::default(),
            strategies: StrategyPool::default(),
            labels: LabelPool::default(),
            settings: GenerationSettings::default(),
        }
    }

    pub fn backend(&self) -> &dyn ChatBackend {
        self.backend.as_ref()
    }

    pub fn with_labels(mut self, labels: LabelPool) -> Self {
        self.labels = labels;
        self
    }

    pub fn with_templates(mut self, templates: TemplateRegistry) -> Self {
        self.templates = templates;
        self
    }

    pub fn with_settings(mut self, settings: GenerationSettings) -> Self {
        self.settings = settings;
        self
    }

    /// Sends `prompt` as a single user message.
    pub fn ask(&self, tag: &str, prompt: String, temperature: f32) -> Result<String, GatewayError> {
        let mut req = ChatRequest::new(&self.settings.model, tag, vec![ChatMessage::user(prompt)]);
        req.temperature = temperature;
        req.max_tokens = self.settings.max_tokens;
        Ok(self.backend.complete(&req)?.text)
    }

    /// Asks and parses; a parse failure triggers exactly one more request.
    pub fn ask_parsed<T, E>(
        &self,
        tag: &str,
        prompt: String,
        temperature: f32,
        parse: impl Fn(&str) -> Result<T, E>,
    ) -> Result<T, E>
    where
        E: From<GatewayError> + std::fmt::Display,
    {
        let first = self.ask(tag, prompt.clone(), temperature)?;
        match parse(&first) {
            Ok(v) => Ok(v),
            Err(e) => {
                tracing::warn!(tag, error = %e, "unparseable completion, retrying once");
                let second = self.ask(tag, prompt, temperature)?;
                parse(&second)
            }
        }
    }
}
