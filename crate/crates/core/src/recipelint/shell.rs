//! Just enough shell splitting to find simple commands in `%post`.

/// One simple command with the line it starts on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(super) struct Command {
    pub line: usize,
    pub text: String,
    pub words: Vec<String>,
}

/// Joins `\` continuations, drops comments and splits on `&&`, `||`, `;`
/// and `|` outside quotes.
pub(super) fn commands(body: &[(usize, &str)]) -> Vec<Command> {
    let mut logical: Vec<(usize, String)> = Vec::new();
    let mut pending: Option<(usize, String)> = None;
    for &(line, raw) in body {
        let (start, mut acc) = pending.take().unwrap_or((line, String::new()));
        let trimmed = raw.trim_end();
        match trimmed.strip_suffix('\\') {
            Some(head) => {
                acc.push_str(head);
                acc.push(' ');
                pending = Some((start, acc));
            }
            None => {
                acc.push_str(trimmed);
                logical.push((start, acc));
            }
        }
    }
    logical.extend(pending);

    let mut out = Vec::new();
    for (line, text) in logical {
        for piece in split_commands(&text) {
            let piece = piece.trim();
            if piece.is_empty() {
                continue;
            }
            let words = shlex::split(piece)
                .unwrap_or_else(|| piece.split_whitespace().map(str::to_string).collect());
            let words = strip_prefixes(words);
            if words.is_empty() {
                continue;
            }
            out.push(Command {
                line,
                text: piece.to_string(),
                words,
            });
        }
    }
    out
}

fn split_commands(text: &str) -> Vec<String> {
    let mut pieces = Vec::new();
    let mut cur = String::new();
    let mut quote: Option<char> = None;
    let mut chars = text.chars().peekable();
    let mut prev_space = true;
    while let Some(c) = chars.next() {
        match quote {
            Some(q) => {
                cur.push(c);
                if c == q {
                    quote = None;
                } else if c == '\\' && q == '"' {
                    if let Some(n) = chars.next() {
                        cur.push(n);
                    }
                }
            }
            None => match c {
                '\'' | '"' => {
                    quote = Some(c);
                    cur.push(c);
                }
                '\\' => {
                    cur.push(c);
                    if let Some(n) = chars.next() {
                        cur.push(n);
                    }
                }
                '#' if prev_space => break,
                ';' | '|' | '&' => {
                    // `&&`, `||` and a lone `&` all end the command.
                    if chars.peek() == Some(&c) {
                        chars.next();
                    }
                    pieces.push(std::mem::take(&mut cur));
                }
                _ => cur.push(c),
            },
        }
        prev_space = c.is_whitespace() || matches!(c, ';' | '|' | '&');
    }
    pieces.push(cur);
    pieces
}

/// Drops `sudo`, `env` and leading `VAR=value` assignments.
fn strip_prefixes(words: Vec<String>) -> Vec<String> {
    let mut i = 0;
    while i < words.len() {
        let w = &words[i];
        let assignment = w
            .split_once('=')
            .is_some_and(|(k, _)| !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'));
        if w == "sudo" || w == "env" || w == "exec" || assignment {
            i += 1;
        } else {
            break;
        }
    }
    words[i..].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_and_joins() {
        let body = [
            (4, "  apt-get update && \\"),
            (5, "    DEBIAN_FRONTEND=noninteractive apt-get install -y gcc # compiler"),
            (6, "  echo 'a && b'; ls | wc -l"),
        ];
        let cmds = commands(&body);
        let words: Vec<(usize, String)> = cmds.iter().map(|c| (c.line, c.words[0].clone())).collect();
        assert_eq!(
            words,
            [
                (4, "apt-get".to_string()),
                (4, "apt-get".to_string()),
                (6, "echo".to_string()),
                (6, "ls".to_string()),
                (6, "wc".to_string()),
            ]
        );
        assert_eq!(cmds[1].words, ["apt-get", "install", "-y", "gcc"]);
        assert_eq!(cmds[2].words, ["echo", "a && b"]);
    }
}
