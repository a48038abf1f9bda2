//! Guest source normalization: dedent, rewrite of the prompt-declared image
//! name to the session copy, and splicing of the clamping helper into crop
//! calls. Also renders the prelude that every step program starts with.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::lexer::{self, SegmentKind};
use super::{DEGENERATE_WARNING, ZERO_AREA_WARNING};

pub const PRELUDE_MARKER: &str = "# --- sandbox prelude ---";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizeContext {
    /// Image filename as declared to the policy in the prompt.
    pub declared_image: String,
    /// Absolute path of the session's input copy.
    pub input_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("guest source could not be normalized (unterminated literal at byte {offset})")]
pub struct NormalizationFailed {
    pub offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl CropBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn is_zero_area(&self) -> bool {
        self.x1 == self.x2 || self.y1 == self.y2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClampedBox {
    pub bbox: CropBox,
    /// Clamping collapsed the box and it was padded to one pixel.
    pub degenerate: bool,
}

/// Confine a crop box to `[0,width] x [0,height]`. Inverted corners are
/// reordered; a box that collapses to zero width or height is padded by one
/// pixel and flagged. Same semantics as the guest-side helper.
///
/// Panics if `width` or `height` is zero.
pub fn clamp_box(b: CropBox, width: u32, height: u32) -> ClampedBox {
    assert!(width > 0 && height > 0, "image dimensions must be positive");
    let (w, h) = (width as f64, height as f64);
    let (mut x1, mut x2) = (b.x1.min(b.x2).clamp(0.0, w), b.x1.max(b.x2).clamp(0.0, w));
    let (mut y1, mut y2) = (b.y1.min(b.y2).clamp(0.0, h), b.y1.max(b.y2).clamp(0.0, h));
    let mut degenerate = false;
    if x1 == x2 {
        if x2 < w {
            x2 += 1.0;
        } else {
            x1 -= 1.0;
        }
        degenerate = true;
    }
    if y1 == y2 {
        if y2 < h {
            y2 += 1.0;
        } else {
            y1 -= 1.0;
        }
        degenerate = true;
    }
    ClampedBox {
        bbox: CropBox::new(x1, y1, x2, y2),
        degenerate,
    }
}

fn dedent(src: &str) -> String {
    let indent = src
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.len() - l.trim_start_matches([' ', '\t']).len())
        .min()
        .unwrap_or(0);
    if indent == 0 {
        return src.to_string();
    }
    let mut out = String::with_capacity(src.len());
    for line in src.split_inclusive('\n') {
        if line.trim().is_empty() {
            out.push_str(line.trim_start_matches([' ', '\t']));
        } else {
            out.push_str(&line[indent..]);
        }
    }
    out
}

fn crop_call_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"([\w\)\]])\s*\.\s*crop\s*\(").expect("static pattern"))
}

fn names_declared_image(content: &str, declared: &str) -> bool {
    if declared.is_empty() {
        return false;
    }
    let c = content.trim();
    c == declared || c.strip_prefix("./") == Some(declared) || c.ends_with(&format!("/{declared}"))
}

/// Python string literal for `s`. JSON string escapes are valid Python.
pub(crate) fn py_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization")
}

/// Patch guest source so it runs inside the session: common indentation is
/// removed, literals naming the declared image point at the session copy and
/// crop calls go through the clamping helper.
pub fn normalize_guest_program(
    src: &str,
    ctx: &NormalizeContext,
) -> Result<String, NormalizationFailed> {
    let src = dedent(src);
    let segments = lexer::lex(&src).map_err(|e| NormalizationFailed { offset: e.offset })?;
    let mut out = String::with_capacity(src.len() + 64);
    for seg in segments {
        let text = &src[seg.span.clone()];
        match seg.kind {
            SegmentKind::Code => {
                out.push_str(&crop_call_re().replace_all(text, "${1}._sandbox_crop("));
            }
            SegmentKind::Comment => out.push_str(text),
            SegmentKind::Str => {
                let prefix = &src[seg.span.start..seg.inner.start];
                let plain = !prefix.chars().any(|c| matches!(c, 'b' | 'B' | 'f' | 'F'));
                if plain && names_declared_image(&src[seg.inner.clone()], &ctx.declared_image) {
                    out.push_str(&py_str(&ctx.input_path));
                } else {
                    out.push_str(text);
                }
            }
        }
    }
    Ok(out)
}

/// Guest prelude: pre-imports, pre-bound image variables and the clamping
/// helper. `shim` (guest-side conveniences) is appended verbatim when given.
pub(crate) fn render_prelude(step: usize, out_dir: &str, input_path: &str, shim: Option<&str>) -> String {
    let mut p = format!(
        r#"{PRELUDE_MARKER}
import io as _sandbox_io
import os as _sandbox_os
import sys as _sandbox_sys
import math
import os
import random
_sandbox_step = {step}
_sandbox_out = {out}
_sandbox_replaying = False
image_path = {input}
try:
    import numpy as np
except Exception:
    pass
try:
    import cv2
except Exception:
    pass
try:
    from PIL import Image
except Exception:
    Image = None
if Image is not None:
    try:
        image = Image.open(image_path)
        image.load()
    except Exception:
        pass


def _sandbox_clamp_box(box, size):
    w, h = int(size[0]), int(size[1])
    x1, y1, x2, y2 = [float(v) for v in box]
    if x1 == x2 or y1 == y2:
        print({zero} + " " + repr(tuple(box)), file=_sandbox_sys.stderr)
    x1, x2 = min(max(min(x1, x2), 0.0), w), min(max(max(x1, x2), 0.0), w)
    y1, y2 = min(max(min(y1, y2), 0.0), h), min(max(max(y1, y2), 0.0), h)
    padded = False
    if x1 == x2:
        if x2 < w:
            x2 += 1
        else:
            x1 -= 1
        padded = True
    if y1 == y2:
        if y2 < h:
            y2 += 1
        else:
            y1 -= 1
        padded = True
    if padded:
        print({degen}, file=_sandbox_sys.stderr)
    return tuple(int(v) if v == int(v) else v for v in (x1, y1, x2, y2))


if Image is not None:
    def _sandbox_crop(self, box=None, *args, **kwargs):
        if box is not None:
            box = _sandbox_clamp_box(box, self.size)
        return self.crop(box, *args, **kwargs)

    Image.Image._sandbox_crop = _sandbox_crop
"#,
        out = py_str(out_dir),
        input = py_str(input_path),
        zero = py_str(ZERO_AREA_WARNING),
        degen = py_str(DEGENERATE_WARNING),
    );
    if let Some(shim) = shim {
        p.push_str("# --- shim ---\n");
        p.push_str(shim);
        if !shim.ends_with('\n') {
            p.push('\n');
        }
    }
    p.push_str("# --- end prelude ---\n");
    p
}

struct InferRules {
    assign_tuple: Regex,
    assign_one: Regex,
    assign_box: Regex,
    crop_tuple: Regex,
    crop_name: Regex,
    slice: Regex,
}

fn infer_rules() -> &'static InferRules {
    static RULES: OnceLock<InferRules> = OnceLock::new();
    const NUM: &str = r"-?\d+(?:\.\d+)?";
    const TERM: &str = r"-?[\w.]+";
    RULES.get_or_init(|| InferRules {
        assign_tuple: Regex::new(&format!(
            r"^\s*\(?\s*(\w+(?:\s*,\s*\w+)+)\s*\)?\s*=\s*[\(\[]?\s*({NUM}(?:\s*,\s*{NUM})+)\s*[\)\]]?\s*$"
        ))
        .unwrap(),
        assign_one: Regex::new(&format!(r"^\s*(\w+)\s*=\s*({NUM})\s*$")).unwrap(),
        assign_box: Regex::new(&format!(
            r"^\s*(\w+)\s*=\s*[\(\[]\s*({TERM})\s*,\s*({TERM})\s*,\s*({TERM})\s*,\s*({TERM})\s*,?\s*[\)\]]\s*$"
        ))
        .unwrap(),
        crop_tuple: Regex::new(&format!(
            r"\.\s*crop\s*\(\s*(?:box\s*=\s*)?[\(\[]\s*({TERM})\s*,\s*({TERM})\s*,\s*({TERM})\s*,\s*({TERM})\s*,?\s*[\)\]]\s*\)"
        ))
        .unwrap(),
        crop_name: Regex::new(r"\.\s*crop\s*\(\s*(?:box\s*=\s*)?([A-Za-z_]\w*)\s*\)").unwrap(),
        slice: Regex::new(&format!(
            r"\[\s*({TERM})\s*:\s*({TERM})\s*,\s*({TERM})\s*:\s*({TERM})\s*(?:,[^\]]*)?\]"
        ))
        .unwrap(),
    })
}

/// Crop boxes that can be resolved statically from guest source: literal or
/// name-bound `.crop(...)` boxes and `[y1:y2, x1:x2]` array slices. Boxes
/// built from arithmetic or function calls are not inferred.
pub fn infer_crop_boxes(src: &str) -> Vec<CropBox> {
    let rules = infer_rules();
    let code = match lexer::code_view(src) {
        Ok((code, _)) => code,
        Err(_) => return Vec::new(),
    };
    let mut scalars: HashMap<String, f64> = HashMap::new();
    let mut boxes: HashMap<String, [String; 4]> = HashMap::new();
    let mut found = Vec::new();
    for line in code.lines() {
        let resolve = |t: &str, scalars: &HashMap<String, f64>| -> Option<f64> {
            t.parse::<f64>().ok().or_else(|| scalars.get(t).copied())
        };
        let resolve4 = |ts: [&str; 4], scalars: &HashMap<String, f64>| -> Option<[f64; 4]> {
            Some([
                resolve(ts[0], scalars)?,
                resolve(ts[1], scalars)?,
                resolve(ts[2], scalars)?,
                resolve(ts[3], scalars)?,
            ])
        };
        for c in rules.crop_tuple.captures_iter(line) {
            if let Some(v) = resolve4([&c[1], &c[2], &c[3], &c[4]], &scalars) {
                found.push(CropBox::new(v[0], v[1], v[2], v[3]));
            }
        }
        for c in rules.crop_name.captures_iter(line) {
            if let Some(ts) = boxes.get(&c[1]) {
                if let Some(v) = resolve4([&ts[0], &ts[1], &ts[2], &ts[3]], &scalars) {
                    found.push(CropBox::new(v[0], v[1], v[2], v[3]));
                }
            }
        }
        for c in rules.slice.captures_iter(line) {
            if let Some(v) = resolve4([&c[1], &c[2], &c[3], &c[4]], &scalars) {
                // rows first: [y1:y2, x1:x2]
                found.push(CropBox::new(v[2], v[0], v[3], v[1]));
            }
        }
        if let Some(c) = rules.assign_tuple.captures(line) {
            let names: Vec<&str> = c[1].split(',').map(str::trim).collect();
            let vals: Vec<f64> = c[2].split(',').filter_map(|v| v.trim().parse().ok()).collect();
            if names.len() == vals.len() {
                for (n, v) in names.into_iter().zip(vals) {
                    scalars.insert(n.to_string(), v);
                }
            }
        } else if let Some(c) = rules.assign_one.captures(line) {
            if let Ok(v) = c[2].parse() {
                scalars.insert(c[1].to_string(), v);
            }
        } else if let Some(c) = rules.assign_box.captures(line) {
            boxes.insert(
                c[1].to_string(),
                [c[2].to_string(), c[3].to_string(), c[4].to_string(), c[5].to_string()],
            );
        }
    }
    found
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> NormalizeContext {
        NormalizeContext {
            declared_image: "12.jpg".into(),
            input_path: "/ws/s1/input/12.jpg".into(),
        }
    }

    #[test]
    fn clamp_examples() {
        let c = clamp_box(CropBox::new(1600.0, 1000.0, 2500.0, 3000.0), 2251, 1500);
        assert_eq!(c.bbox, CropBox::new(1600.0, 1000.0, 2251.0, 1500.0));
        assert!(!c.degenerate);
        let c = clamp_box(CropBox::new(0.0, 0.0, 100.0, 100.0), 500, 500);
        assert_eq!(c.bbox, CropBox::new(0.0, 0.0, 100.0, 100.0));
        let c = clamp_box(CropBox::new(-5.0, -5.0, 10.0, 10.0), 500, 500);
        assert_eq!(c.bbox, CropBox::new(0.0, 0.0, 10.0, 10.0));
    }

    #[test]
    fn clamp_pads_degenerate_boxes() {
        let c = clamp_box(CropBox::new(10.0, 10.0, 10.0, 300.0), 500, 500);
        assert!(c.degenerate);
        assert_eq!(c.bbox, CropBox::new(10.0, 10.0, 11.0, 300.0));
        let c = clamp_box(CropBox::new(600.0, 0.0, 700.0, 50.0), 500, 500);
        assert!(c.degenerate);
        assert_eq!(c.bbox, CropBox::new(499.0, 0.0, 500.0, 50.0));
    }

    #[test]
    fn rewrites_declared_image_literals() {
        let out = normalize_guest_program("image_path = \"12.jpg\"\nother = '13.jpg'\n", &ctx()).unwrap();
        assert!(out.contains("image_path = \"/ws/s1/input/12.jpg\""));
        assert!(out.contains("other = '13.jpg'"));
        let out = normalize_guest_program("p = './12.jpg'\nq = f'12.jpg'", &ctx()).unwrap();
        assert!(out.contains("p = \"/ws/s1/input/12.jpg\""));
        assert!(out.contains("q = f'12.jpg'"));
    }

    #[test]
    fn splices_crop_calls_outside_strings() {
        let src = "c = image.crop((1, 2, 3, 4))\ns = 'x.crop(1)'  # y.crop(\nd = Image.open(p).crop(b)";
        let out = normalize_guest_program(src, &ctx()).unwrap();
        assert!(out.contains("c = image._sandbox_crop((1, 2, 3, 4))"));
        assert!(out.contains("'x.crop(1)'"));
        assert!(out.contains("# y.crop("));
        assert!(out.contains("Image.open(p)._sandbox_crop(b)"));
        assert!(!normalize_guest_program("def crop(a):\n    pass", &ctx()).unwrap().contains("_sandbox"));
    }

    #[test]
    fn dedents_uniform_indentation() {
        let out = normalize_guest_program("    x = 1\n\n    print(x)\n", &ctx()).unwrap();
        assert_eq!(out, "x = 1\n\nprint(x)\n");
    }

    #[test]
    fn unlexable_source_fails() {
        assert!(normalize_guest_program("x = 'open", &ctx()).is_err());
    }

    #[test]
    fn prelude_binds_helpers() {
        let p = render_prelude(2, "/ws/out", "/ws/in/12.jpg", Some("SHIM = 1"));
        assert_eq!(p.matches(PRELUDE_MARKER).count(), 1);
        assert!(p.contains("image_path = \"/ws/in/12.jpg\""));
        assert!(p.contains("_sandbox_step = 2"));
        assert!(p.contains("SHIM = 1\n# --- end prelude ---"));
    }

    #[test]
    fn infers_literal_named_and_sliced_boxes() {
        let src = "x1, y1, x2, y2 = 1100, 850, 1300, 950\ncropped = image[y1:y2, x1:x2]\n";
        assert_eq!(infer_crop_boxes(src), vec![CropBox::new(1100.0, 850.0, 1300.0, 950.0)]);
        let src = "c = image.crop((10, 10, 10, 300))";
        let boxes = infer_crop_boxes(src);
        assert_eq!(boxes, vec![CropBox::new(10.0, 10.0, 10.0, 300.0)]);
        assert!(boxes[0].is_zero_area());
        let src = "box = (0, 0, w, 5)\nw = 7\nc = im.crop(box)";
        assert_eq!(infer_crop_boxes(src), vec![CropBox::new(0.0, 0.0, 7.0, 5.0)]);
        assert!(infer_crop_boxes("c = im.crop((a + 1, 0, 5, 5))").is_empty());
    }
}
