//! Prompt template and strict response parsing.

use std::fmt::Write as _;

use super::ArbitrationRequest;

pub const PROMPT_VERSION: &str = "cot-v1";

fn quoted(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

/// Renders the chain-of-thought prompt for `request`.
pub fn build_prompt(request: &ArbitrationRequest) -> String {
    let k = request.candidates.len();
    let mut out = String::new();
    let _ = writeln!(out, "[prompt-version: {}]", request.prompt_version);
    let _ = writeln!(
        out,
        "You are an expert pomologist verifying the identity of the fruit in the attached image. \
         A visual ensemble has narrowed the answer to exactly {k} candidate categories. \
         Your answer MUST be one of these candidates."
    );
    out.push('\n');
    let _ = writeln!(out, "Candidates:");
    for (rank, d) in request.descriptors.iter().enumerate() {
        let _ = writeln!(out, "### Candidate {}: {}", rank + 1, d.class_name);
        let _ = writeln!(out, "Description: {}", d.description.trim());
    }
    out.push('\n');
    out.push_str(
        "Reason step by step:\n\
         1. Extract the discriminative visual attributes of the fruit (for example skin glossiness, \
         surface pattern, colour, shape, calyx structure).\n\
         2. Match the extracted attributes against each candidate description. Note every attribute \
         that contradicts a candidate; contradictions count against it.\n\
         3. Choose the candidate with the strongest match and the fewest contradictions.\n\n",
    );
    let names: Vec<String> = request.descriptors.iter().map(|d| quoted(&d.class_name)).collect();
    let _ = writeln!(
        out,
        "Respond with a single JSON object and nothing else, following this schema:"
    );
    let _ = writeln!(
        out,
        "{{\"choice\": <one of [{}]>, \"reason\": <string>}}",
        names.join(", ")
    );
    if let Some(first) = names.first() {
        let _ = writeln!(
            out,
            "Example: {{\"choice\": {first}, \"reason\": \"attributes match the description\"}}"
        );
    }
    out
}

/// First JSON object embedded in `raw`.
fn first_json_object(raw: &str) -> Option<serde_json::Map<String, serde_json::Value>> {
    raw.match_indices('{').find_map(|(pos, _)| {
        let mut stream = serde_json::Deserializer::from_str(&raw[pos..]).into_iter::<serde_json::Value>();
        match stream.next() {
            Some(Ok(serde_json::Value::Object(map))) => Some(map),
            _ => None,
        }
    })
}

/// Maps the response's `"choice"` onto a candidate class index.
///
/// Names match case-insensitively after trimming. Returns `None` when there is
/// no JSON object, the choice is missing, or it names no candidate.
pub fn parse_response(raw: &str, request: &ArbitrationRequest) -> Option<usize> {
    let obj = first_json_object(raw)?;
    let choice = obj.get("choice")?.as_str()?.trim().to_lowercase();
    request
        .descriptors
        .iter()
        .zip(&request.candidates)
        .find(|(d, _)| d.class_name.trim().to_lowercase() == choice)
        .map(|(_, &c)| c)
}
