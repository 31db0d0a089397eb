use std::sync::OnceLock;

use regex::Regex;

fn doi_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^10\.\d{4,9}/\S+$").expect("valid regex"))
}

const DOI_RESOLVERS: [&str; 4] = [
    "https://doi.org/",
    "http://doi.org/",
    "https://dx.doi.org/",
    "http://dx.doi.org/",
];

/// Bare DOI of `pid` if it is a DOI in any accepted spelling: `10.x/y`,
/// `doi:10.x/y` or a doi.org URL.
pub fn doi_of(pid: &str) -> Option<&str> {
    let pid = pid.trim();
    let bare = DOI_RESOLVERS
        .iter()
        .find_map(|p| pid.strip_prefix(p))
        .or_else(|| pid.strip_prefix("doi:"))
        .unwrap_or(pid);
    doi_regex().is_match(bare).then_some(bare)
}

/// A PID is a DOI or an http(s) URL.
pub fn is_valid_pid(pid: &str) -> bool {
    let pid = pid.trim();
    if doi_of(pid).is_some() {
        return true;
    }
    let looks_doi = pid.starts_with("10.")
        || pid.starts_with("doi:")
        || DOI_RESOLVERS.iter().any(|p| pid.starts_with(p));
    if looks_doi {
        return false;
    }
    ["https://", "http://"].iter().any(|scheme| {
        pid.strip_prefix(scheme)
            .is_some_and(|rest| !rest.is_empty() && !rest.contains(char::is_whitespace))
    })
}

/// Comparison form: DOIs lower-cased without resolver prefix.
pub fn normalize_pid(pid: &str) -> String {
    match doi_of(pid) {
        Some(doi) => doi.to_ascii_lowercase(),
        None => pid.trim().to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doi_spellings() {
        for pid in [
            "10.48328/tudatalib-921.2",
            "https://doi.org/10.48328/tudatalib-921.2",
            "doi:10.48328/tudatalib-921.2",
        ] {
            assert_eq!(doi_of(pid), Some("10.48328/tudatalib-921.2"), "{pid}");
            assert!(is_valid_pid(pid));
        }
        assert_eq!(
            normalize_pid("https://doi.org/10.48328/TUDATALIB-921.2"),
            "10.48328/tudatalib-921.2"
        );
    }

    #[test]
    fn rejects_bad_dois() {
        for pid in ["10.123/x", "10.48328/", "doi:abc", "https://doi.org/nope", "tudatalib", ""] {
            assert!(!is_valid_pid(pid), "{pid}");
        }
    }

    #[test]
    fn urls() {
        assert!(is_valid_pid("https://tudatalib.ulb.tu-darmstadt.de/handle/tudatalib/3522"));
        assert!(!is_valid_pid("ftp://example.org/x"));
        assert!(!is_valid_pid("https://"));
    }
}
