use std::sync::LazyLock;

use regex::{Captures, Regex};

use crate::paramspace::Params;

static PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}").unwrap());

/// Placeholder names referenced by `text`, in order of first appearance.
pub fn placeholders(text: &str) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for cap in PLACEHOLDER.captures_iter(text) {
        let name = &cap[1];
        if !names.iter().any(|n| n == name) {
            names.push(name.to_string());
        }
    }
    names
}

/// Substitutes every `{{NAME}}` with the case's parameter value.
///
/// Returns the first placeholder that has no matching parameter.
pub fn render(text: &str, params: &Params) -> Result<String, String> {
    if let Some(missing) = placeholders(text)
        .into_iter()
        .find(|n| !params.contains_key(n))
    {
        return Err(missing);
    }
    Ok(PLACEHOLDER
        .replace_all(text, |cap: &Captures| params[&cap[1]].to_string())
        .into_owned())
}
