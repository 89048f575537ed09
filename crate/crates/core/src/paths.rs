//! Workspace-relative path rules.
//!
//! Every path that crosses a trust boundary (generator output, mock transcript
//! mutations, repository context) must be a plain forward-slash relative path
//! that cannot climb out of the workspace.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathViolation {
    Empty,
    Absolute,
    Traversal,
    Backslash,
    HomeRelative,
    EmptySegment,
    ControlCharacter,
}

impl fmt::Display for PathViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PathViolation::Empty => "empty path",
            PathViolation::Absolute => "absolute path",
            PathViolation::Traversal => "path traversal segment `..`",
            PathViolation::Backslash => "backslash separator",
            PathViolation::HomeRelative => "home-relative path",
            PathViolation::EmptySegment => "empty path segment",
            PathViolation::ControlCharacter => "control character in path",
        };
        f.write_str(s)
    }
}

/// Checks that `path` is workspace-relative.
pub fn check_relative(path: &str) -> Result<(), PathViolation> {
    if path.is_empty() {
        return Err(PathViolation::Empty);
    }
    if path.chars().any(|c| c.is_control()) {
        return Err(PathViolation::ControlCharacter);
    }
    if path.starts_with('/') || path.starts_with('\\') || has_drive_prefix(path) {
        return Err(PathViolation::Absolute);
    }
    // Traversal is reported before the separator complaint so mixed-separator
    // escapes name the real problem.
    if path.split(['/', '\\']).any(|seg| seg == "..") {
        return Err(PathViolation::Traversal);
    }
    if path.contains('\\') {
        return Err(PathViolation::Backslash);
    }
    if path.starts_with('~') {
        return Err(PathViolation::HomeRelative);
    }
    let trimmed = path.strip_suffix('/').unwrap_or(path);
    if trimmed.split('/').any(|seg| seg.is_empty()) {
        return Err(PathViolation::EmptySegment);
    }
    Ok(())
}

pub fn is_relative(path: &str) -> bool {
    check_relative(path).is_ok()
}

fn has_drive_prefix(path: &str) -> bool {
    let b = path.as_bytes();
    b.len() >= 2 && b[0].is_ascii_alphabetic() && b[1] == b':'
}

/// True when `path` equals `dir` or lies beneath it.
pub fn is_under(path: &str, dir: &str) -> bool {
    let dir = dir.trim_end_matches('/');
    path == dir || (path.starts_with(dir) && path.as_bytes().get(dir.len()) == Some(&b'/'))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_plain_relative() {
        for p in ["output/coverage.xml", "logs/tool.log", "repo_under_test/click/tests/x.py", ".coverage", "output/"] {
            assert!(is_relative(p), "{p}");
        }
    }

    #[test]
    fn rejects_hostile() {
        let cases = [
            ("/etc/passwd", PathViolation::Absolute),
            ("\\\\server\\share", PathViolation::Absolute),
            ("C:\\Windows", PathViolation::Absolute),
            ("c:relative", PathViolation::Absolute),
            ("../x", PathViolation::Traversal),
            ("output/../../etc", PathViolation::Traversal),
            ("output\\..\\x", PathViolation::Traversal),
            ("output\\x", PathViolation::Backslash),
            ("~/x", PathViolation::HomeRelative),
            ("a//b", PathViolation::EmptySegment),
            ("", PathViolation::Empty),
            ("a\0b", PathViolation::ControlCharacter),
        ];
        for (p, v) in cases {
            assert_eq!(check_relative(p), Err(v), "{p:?}");
        }
    }

    #[test]
    fn under() {
        assert!(is_under("repo_under_test/click/a.py", "repo_under_test/click"));
        assert!(!is_under("repo_under_test/clicker/a.py", "repo_under_test/click"));
        assert!(is_under("output", "output/"));
    }
}
