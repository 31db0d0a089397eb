pub(crate) fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

pub(crate) const STYLE: &str = "body{font-family:system-ui,sans-serif;margin:2em auto;max-width:1100px;padding:0 1em;color:#222}
table{border-collapse:collapse;margin:1em 0;font-size:.9em}
th,td{border:1px solid #ccc;padding:.25em .6em;text-align:left}
th{background:#f3f3f3}
.badge{display:inline-block;padding:.1em .5em;border-radius:.6em;font-size:.85em;color:#fff}
.Pending{background:#888}.Running{background:#1f77b4}.Succeeded{background:#2ca02c}
.Failed{background:#d62728}.Cancelled{background:#ff7f0e}.Pass{background:#2ca02c}.Fail{background:#d62728}
.note{color:#666;font-style:italic}
svg.chart text{font-size:11px;font-family:sans-serif}
pre{background:#f7f7f7;padding:.6em}
";

pub(crate) fn page(title: &str, body: &str) -> String {
    format!(
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>{}</title>\n<style>\n{STYLE}</style>\n</head>\n<body>\n{body}</body>\n</html>\n",
        escape(title)
    )
}

pub(crate) fn table<S: AsRef<str>>(header: &[S], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut s = String::from("<table>\n<thead><tr>");
    for h in header {
        s.push_str(&format!("<th>{}</th>", escape(h.as_ref())));
    }
    s.push_str("</tr></thead>\n<tbody>\n");
    for row in rows {
        s.push_str("<tr>");
        for cell in row {
            // Cells are pre-rendered HTML.
            s.push_str(&format!("<td>{cell}</td>"));
        }
        s.push_str("</tr>\n");
    }
    s.push_str("</tbody>\n</table>\n");
    s
}

pub(crate) fn badge(class: &str, text: &str) -> String {
    format!("<span class=\"badge {}\">{}</span>", escape(class), escape(text))
}

/// Minimal rendering of `description.md`: `#` headings and paragraphs,
/// everything else escaped verbatim. Links stay plain text so reports never
/// point outside the study.
pub(crate) fn description(text: &str) -> String {
    let mut out = String::new();
    for block in text.split("\n\n") {
        let block = block.trim_matches('\n');
        if block.trim().is_empty() {
            continue;
        }
        let hashes = block.chars().take_while(|&c| c == '#').count();
        if (1..=6).contains(&hashes) && !block.contains('\n') {
            let level = (hashes + 2).min(6);
            out.push_str(&format!(
                "<h{level}>{}</h{level}>\n",
                escape(block[hashes..].trim())
            ));
        } else if block.lines().all(|l| l.starts_with("    ") || l.starts_with('\t')) || block.starts_with("```") {
            out.push_str(&format!("<pre>{}</pre>\n", escape(block)));
        } else {
            out.push_str(&format!("<p>{}</p>\n", escape(block)));
        }
    }
    out
}
