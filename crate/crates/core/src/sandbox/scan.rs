//! Static deny-list scan of guest programs. The scan is pattern based and
//! never executes the source.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::lexer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BlockReason {
    DeleteFile,
    MoveRenameFile,
    PathEscape,
    ProcessSpawn,
    NetworkAccess,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyVerdict {
    pub allowed: bool,
    pub blocked_reasons: Vec<BlockReason>,
}

impl SafetyVerdict {
    fn from_reasons(mut reasons: Vec<BlockReason>) -> Self {
        reasons.sort();
        reasons.dedup();
        Self {
            allowed: reasons.is_empty(),
            blocked_reasons: reasons,
        }
    }
}

struct Rules {
    code: Vec<(BlockReason, Regex)>,
    escape_literal: Regex,
}

fn rules() -> &'static Rules {
    static RULES: OnceLock<Rules> = OnceLock::new();
    RULES.get_or_init(|| {
        let table: &[(BlockReason, &str)] = &[
            (BlockReason::DeleteFile, r"\bos\s*\.\s*(remove|unlink|rmdir|removedirs)\b"),
            (BlockReason::DeleteFile, r"\bshutil\s*\.\s*rmtree\b"),
            (BlockReason::DeleteFile, r"\.\s*(unlink|rmdir)\s*\("),
            (BlockReason::DeleteFile, r"\bfrom\s+os\s+import\b[^\n]*\b(remove|unlink|rmdir|removedirs)\b"),
            (BlockReason::DeleteFile, r"\bfrom\s+shutil\s+import\b[^\n]*\brmtree\b"),
            (BlockReason::DeleteFile, r"\bsend2trash\b"),
            (BlockReason::MoveRenameFile, r"\bos\s*\.\s*(rename|renames|replace)\b"),
            (BlockReason::MoveRenameFile, r"\bshutil\s*\.\s*move\b"),
            (BlockReason::MoveRenameFile, r"\.\s*rename\s*\("),
            (BlockReason::MoveRenameFile, r"\bfrom\s+os\s+import\b[^\n]*\b(rename|renames|replace)\b"),
            (BlockReason::MoveRenameFile, r"\bfrom\s+shutil\s+import\b[^\n]*\bmove\b"),
            (BlockReason::ProcessSpawn, r"\bsubprocess\b"),
            (BlockReason::ProcessSpawn, r"\bos\s*\.\s*(system|popen|fork|forkpty|kill|killpg|spawn\w*|exec\w*|posix_spawn\w*)\b"),
            (BlockReason::ProcessSpawn, r"\bfrom\s+os\s+import\b[^\n]*\b(system|popen|fork|spawn\w*|exec\w*|posix_spawn\w*)\b"),
            (BlockReason::ProcessSpawn, r"\b(import|from)\s+(pty|multiprocessing|pexpect)\b"),
            (BlockReason::ProcessSpawn, r"\bcreate_subprocess_\w+\b"),
            (BlockReason::NetworkAccess, r"\b(import|from)\s+(socket|urllib|urllib3|requests|httpx|http|ftplib|smtplib|aiohttp|telnetlib|paramiko|websocket\w*)\b"),
            (BlockReason::NetworkAccess, r"\bsocket\s*\.\s*\w+"),
            (BlockReason::NetworkAccess, r"\burlopen\b"),
            (BlockReason::PathEscape, r"\bos\s*\.\s*(chdir|chroot|fchdir)\b"),
            (BlockReason::PathEscape, r"\bexpanduser\b"),
            (BlockReason::PathEscape, r"\bPath\s*\.\s*home\s*\("),
        ];
        Rules {
            code: table
                .iter()
                .map(|(r, p)| (*r, Regex::new(p).expect("static pattern")))
                .collect(),
            escape_literal: Regex::new(r"^\s*(/|~|[A-Za-z]:[\\/]|\\\\)|(^|[\\/])\.\.([\\/]|$)")
                .expect("static pattern"),
        }
    })
}

/// Module names whose appearance as a bare string literal signals a dynamic
/// import (`__import__("subprocess")`, `importlib.import_module("socket")`).
fn literal_module(s: &str) -> Option<BlockReason> {
    match s.trim() {
        "subprocess" | "pty" | "multiprocessing" | "pexpect" => Some(BlockReason::ProcessSpawn),
        "socket" | "urllib" | "urllib.request" | "requests" | "httpx" | "http.client"
        | "ftplib" | "smtplib" | "aiohttp" => Some(BlockReason::NetworkAccess),
        "shutil" => Some(BlockReason::DeleteFile),
        _ => None,
    }
}

/// Deterministic verdict over guest source. Comments are ignored; string
/// literals are checked only for path escapes and dynamic-import names.
pub fn scan_guest_program(src: &str) -> SafetyVerdict {
    let rules = rules();
    let (code, strings) = match lexer::code_view(src) {
        Ok(view) => view,
        // unlexable source: scan the raw text, which can only over-block
        Err(_) => (src.to_string(), Vec::new()),
    };
    let mut reasons: Vec<BlockReason> = rules
        .code
        .iter()
        .filter(|(_, re)| re.is_match(&code))
        .map(|(r, _)| *r)
        .collect();
    for s in &strings {
        if rules.escape_literal.is_match(s) {
            reasons.push(BlockReason::PathEscape);
        }
        if let Some(r) = literal_module(s) {
            reasons.push(r);
        }
    }
    SafetyVerdict::from_reasons(reasons)
}
