//! `synth`: emit data-synthesis prompts, optionally post them to a generic
//! text-generation endpoint and import the numbered replies.

use std::time::Duration;

use memprobe::corpus::{parse_synthesis_response, render_synthesis_prompt, sample_exemplars, LabeledDataset, Sample};
use memprobe::derive_seed;

use crate::{load_labeled, write_json, write_text, CliError, CliResult, Ctx, SynthArgs};

pub const ENDPOINT_VAR: &str = "MIA_SYNTH_ENDPOINT";
pub const TOKEN_VAR: &str = "MIA_SYNTH_TOKEN";

/// Pulls the generated text out of a response body: a top-level `text`
/// field, a chat or completion `choices` array, or the raw body.
pub fn response_text(body: &str) -> String {
    let Ok(v) = serde_json::from_str::<serde_json::Value>(body) else {
        return body.to_string();
    };
    if let Some(t) = v.get("text").and_then(|t| t.as_str()) {
        return t.to_string();
    }
    if let Some(first) = v.get("choices").and_then(|c| c.get(0)) {
        if let Some(t) = first.pointer("/message/content").and_then(|t| t.as_str()) {
            return t.to_string();
        }
        if let Some(t) = first.get("text").and_then(|t| t.as_str()) {
            return t.to_string();
        }
    }
    match v {
        serde_json::Value::String(s) => s,
        _ => body.to_string(),
    }
}

fn post(endpoint: &str, token: Option<&str>, model: &str, prompt: &str, timeout: Duration) -> Result<String, String> {
    let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
    let mut req = agent.post(endpoint);
    if let Some(t) = token {
        req = req.header("Authorization", &format!("Bearer {t}"));
    }
    let payload = serde_json::json!({
        "model": model,
        "prompt": prompt,
        "messages": [{ "role": "user", "content": prompt }],
    });
    let mut resp = req.send_json(&payload).map_err(|e| e.to_string())?;
    resp.body_mut().read_to_string().map_err(|e| e.to_string())
}

pub fn cmd_synth(ctx: &Ctx, a: &SynthArgs) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let count = a.count.unwrap_or(cfg.synth.count);
    let prompts = a.prompts.unwrap_or(cfg.synth.prompts);
    if count == 0 || prompts == 0 {
        return Err(CliError::usage("synth count and prompts must be positive"));
    }
    let seed_set = load_labeled(&a.input)?;
    let base = cfg.seed("synth");
    let mut rendered = Vec::with_capacity(prompts);
    for i in 0..prompts {
        let exemplars = sample_exemplars(&seed_set, derive_seed(base, &i.to_string()))?;
        rendered.push(render_synthesis_prompt(&exemplars, count)?);
    }
    let separator = "\n\n----\n\n";
    write_text(&ctx.out.join("synth_prompts.txt"), &(rendered.join(separator) + "\n"))?;
    log::info!("wrote {} synthesis prompt(s)", rendered.len());

    let endpoint = std::env::var(ENDPOINT_VAR).ok().filter(|e| !e.is_empty());
    let mut meta = serde_json::json!({
        "command": "synth",
        "cli_overrides": ctx.overrides,
        "input": a.input.display().to_string(),
        "count": count,
        "prompts": prompts,
        "synth_seed": base,
        "endpoint": endpoint.is_some(),
    });
    let Some(endpoint) = endpoint else {
        write_json(&ctx.out.join("synth.json"), &meta)?;
        return Ok(());
    };
    let token = std::env::var(TOKEN_VAR).ok().filter(|t| !t.is_empty());
    let timeout = Duration::from_secs(cfg.synth.timeout_secs);
    let mut samples: Vec<Sample> = Vec::new();
    let mut failures = Vec::new();
    let mut skipped = 0;
    for (i, prompt) in rendered.iter().enumerate() {
        match post(&endpoint, token.as_deref(), &cfg.synth.model, prompt, timeout) {
            Ok(body) => {
                let parsed = parse_synthesis_response(&response_text(&body));
                skipped += parsed.skipped_lines;
                if parsed.samples.is_empty() {
                    log::warn!("prompt {i}: response contained no numbered data points");
                    failures.push(format!("prompt {i}: no numbered data points"));
                }
                samples.extend(parsed.samples);
            }
            Err(e) => {
                log::warn!("prompt {i}: request failed: {e}");
                failures.push(format!("prompt {i}: {e}"));
            }
        }
    }
    let mut seen = std::collections::HashSet::new();
    samples.retain(|s| seen.insert(s.id.clone()));
    let n = samples.len();
    let ds = LabeledDataset::new("synth", samples)?;
    ds.write_jsonl(&ctx.out.join("synth.jsonl"))?;
    meta["samples"] = n.into();
    meta["skipped_lines"] = skipped.into();
    meta["failures"] = failures.into();
    write_json(&ctx.out.join("synth.json"), &meta)?;
    log::info!("imported {n} synthetic sample(s)");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn response_shapes() {
        assert_eq!(response_text(r#"{"text":"6. a"}"#), "6. a");
        assert_eq!(response_text(r#"{"choices":[{"message":{"content":"6. b"}}]}"#), "6. b");
        assert_eq!(response_text(r#"{"choices":[{"text":"6. c"}]}"#), "6. c");
        assert_eq!(response_text("6. raw\n7. body"), "6. raw\n7. body");
        assert_eq!(response_text(r#"{"other":1}"#), r#"{"other":1}"#);
    }
}
