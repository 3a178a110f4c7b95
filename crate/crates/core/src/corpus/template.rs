use serde::{Deserialize, Serialize};

use super::{CorpusError, Sample};

pub const PLACEHOLDER: &str = "[SAMPLE]";

/// A prompt wrapper around a sample; `body` holds exactly one [`PLACEHOLDER`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTemplate")]
pub struct PromptTemplate {
    id: String,
    body: String,
}

#[derive(Deserialize)]
struct RawTemplate {
    id: String,
    body: String,
}

impl TryFrom<RawTemplate> for PromptTemplate {
    type Error = CorpusError;

    fn try_from(raw: RawTemplate) -> Result<Self, Self::Error> {
        PromptTemplate::new(raw.id, raw.body)
    }
}

impl PromptTemplate {
    pub fn new(id: impl Into<String>, body: impl Into<String>) -> Result<Self, CorpusError> {
        let id = id.into();
        let body = body.into();
        let n = body.matches(PLACEHOLDER).count();
        if n != 1 {
            return Err(CorpusError::Template(format!(
                "template {id:?} must contain {PLACEHOLDER} exactly once, found {n}"
            )));
        }
        Ok(PromptTemplate { id, body })
    }

    /// The detection template used unless configured otherwise.
    pub fn default_statement() -> Self {
        PromptTemplate::new("default", "Here is a statement: [SAMPLE] \n Is the above statement correct? Answer:")
            .expect("builtin template is valid")
    }

    /// The placeholder-only template; rendering is the identity.
    pub fn bare() -> Self {
        PromptTemplate::new("bare", PLACEHOLDER).expect("builtin template is valid")
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn render_text(&self, text: &str) -> String {
        self.body.replacen(PLACEHOLDER, text, 1)
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::default_statement()
    }
}

/// Substitutes the sample text verbatim into the template.
pub fn render_template(template: &PromptTemplate, sample: &Sample) -> String {
    template.render_text(&sample.text)
}

const BUILTIN: &[(&str, &str)] = &[
    ("bare", "[SAMPLE]"),
    ("default", "Here is a statement: [SAMPLE] \n Is the above statement correct? Answer:"),
    ("statement-correct", "Here is a statement: [SAMPLE] Is the above statement correct? Answer:"),
    ("text-real", "[SAMPLE] Is the above text real? Answer:"),
    ("here-text-real", "Here is a text: [SAMPLE] Is the above text real? Answer:"),
    ("here-text-correct", "Here is a text: [SAMPLE] Is the above text correct? Answer:"),
    (
        "consider-statement",
        "Consider the following statement: [SAMPLE]  Is the statement above true or false? Your answer:",
    ),
    ("consider-text", "Consider the following text: [SAMPLE]  Is the text above true or false? Your answer:"),
    ("statement-true-false", "[SAMPLE] Is the statement above true or false? Your answer:"),
    ("yes-no", "[SAMPLE] Is this correct? Indicate 'Yes' or 'No': "),
];

/// Ordered, id-addressed collection of prompt templates.
#[derive(Debug, Clone, Default)]
pub struct TemplateRegistry {
    templates: Vec<PromptTemplate>,
}

impl TemplateRegistry {
    pub fn empty() -> Self {
        TemplateRegistry::default()
    }

    /// The bare template, the default detection template and the eight
    /// ablation variants.
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(id, body)| PromptTemplate::new(*id, *body).expect("builtin template is valid"))
            .collect();
        TemplateRegistry { templates }
    }

    /// Adds a template, replacing any existing one with the same id in place.
    pub fn register(&mut self, template: PromptTemplate) {
        match self.templates.iter_mut().find(|t| t.id == template.id) {
            Some(slot) => *slot = template,
            None => self.templates.push(template),
        }
    }

    pub fn get(&self, id: &str) -> Option<&PromptTemplate> {
        self.templates.iter().find(|t| t.id == id)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.templates.iter().map(|t| t.id.as_str()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.iter()
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    /// Keeps only the listed ids, in the listed order.
    pub fn select(&self, ids: &[String]) -> Result<TemplateRegistry, CorpusError> {
        let mut out = TemplateRegistry::empty();
        for id in ids {
            let t = self.get(id).ok_or_else(|| CorpusError::Template(format!("unknown template id {id:?}")))?;
            out.register(t.clone());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_template_renders_statement() {
        let s = Sample::from_text("The sky is blue.", None).unwrap();
        assert_eq!(
            render_template(&PromptTemplate::default_statement(), &s),
            "Here is a statement: The sky is blue. \n Is the above statement correct? Answer:"
        );
    }

    #[test]
    fn bare_template_is_identity() {
        let s = Sample::from_text("abc", None).unwrap();
        assert_eq!(render_template(&PromptTemplate::bare(), &s), "abc");
    }

    #[test]
    fn placeholder_count_enforced() {
        assert!(PromptTemplate::new("none", "no slot").is_err());
        assert!(PromptTemplate::new("two", "[SAMPLE] and [SAMPLE]").is_err());
    }

    #[test]
    fn sample_text_inserted_verbatim() {
        // A placeholder inside the sample text must not be re-expanded.
        let t = PromptTemplate::new("t", "<[SAMPLE]>").unwrap();
        assert_eq!(t.render_text("  [SAMPLE] x "), "<  [SAMPLE] x >");
    }

    #[test]
    fn builtin_registry_has_ten_templates_with_bare() {
        let r = TemplateRegistry::builtin();
        assert_eq!(r.len(), 10);
        assert!(r.get("bare").is_some());
        assert_eq!(r.get("default").unwrap(), &PromptTemplate::default_statement());
    }

    #[test]
    fn deserialize_validates() {
        let ok: PromptTemplate = serde_json::from_str(r#"{"id":"a","body":"x [SAMPLE]"}"#).unwrap();
        assert_eq!(ok.id(), "a");
        assert!(serde_json::from_str::<PromptTemplate>(r#"{"id":"a","body":"x"}"#).is_err());
    }
}
