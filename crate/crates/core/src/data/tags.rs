//! BIO / BIOES tag conversion and span extraction.

use log::warn;

/// Splits `B-PER` into `('B', "PER")`; `O` and anything unprefixed yield
/// `('O', "")`.
pub fn split_tag(tag: &str) -> (char, &str) {
    let mut chars = tag.chars();
    match (chars.next(), chars.next()) {
        (Some(p @ ('B' | 'I' | 'E' | 'S')), Some('-')) => (p, &tag[2..]),
        _ => ('O', ""),
    }
}

fn join(prefix: char, ty: &str) -> String {
    if prefix == 'O' {
        "O".to_string()
    } else {
        format!("{prefix}-{ty}")
    }
}

/// A tag that had to be rewritten because it did not continue a span.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Repair {
    pub index: usize,
    pub original: String,
}

/// Converts BIO to BIOES. An `I-X` that does not continue a span of type
/// `X` starts a new span, as if it were `B-X`; each such repair is logged
/// and returned.
pub fn bio_to_bioes<S: AsRef<str>>(tags: &[S]) -> (Vec<String>, Vec<Repair>) {
    let mut repairs = Vec::new();
    // First normalise to well-formed BIO.
    let mut bio: Vec<(char, String)> = Vec::with_capacity(tags.len());
    for (i, t) in tags.iter().enumerate() {
        let t = t.as_ref();
        let (p, ty) = split_tag(t);
        let p = match p {
            'I' if !matches!(bio.last(), Some((q, prev)) if *q != 'O' && prev == ty) => {
                warn!("tag {i} ({t}) does not continue a span; treated as B-{ty}");
                repairs.push(Repair { index: i, original: t.to_string() });
                'B'
            }
            'E' => 'I',
            'S' => 'B',
            other => other,
        };
        bio.push((p, ty.to_string()));
    }
    let mut out = Vec::with_capacity(bio.len());
    for (i, (p, ty)) in bio.iter().enumerate() {
        let continues = matches!(bio.get(i + 1), Some((q, next)) if *q == 'I' && next == ty);
        let prefix = match (p, continues) {
            ('B', true) => 'B',
            ('B', false) => 'S',
            ('I', true) => 'I',
            ('I', false) => 'E',
            _ => 'O',
        };
        out.push(join(prefix, ty));
    }
    (out, repairs)
}

/// BIOES to BIO: `S` becomes `B` and `E` becomes `I`.
pub fn bioes_to_bio<S: AsRef<str>>(tags: &[S]) -> Vec<String> {
    tags.iter()
        .map(|t| {
            let (p, ty) = split_tag(t.as_ref());
            let p = match p {
                'S' => 'B',
                'E' => 'I',
                other => other,
            };
            join(p, ty)
        })
        .collect()
}

/// Every `B`/`I` is followed by `I`/`E` of the same type, and every `I`/`E`
/// is preceded by `B`/`I` of the same type.
pub fn is_bioes_well_formed<S: AsRef<str>>(tags: &[S]) -> bool {
    let mut open: Option<&str> = None;
    for t in tags {
        let t = t.as_ref();
        let (p, ty) = split_tag(t);
        if p == 'O' && t != "O" {
            return false;
        }
        match (p, open) {
            ('B' | 'S' | 'O', Some(_)) => return false,
            ('I' | 'E', None) => return false,
            ('I' | 'E', Some(o)) if o != ty => return false,
            _ => {}
        }
        open = match p {
            'B' | 'I' => Some(ty),
            _ => None,
        };
    }
    open.is_none()
}

/// Labelled spans `(start, end_exclusive, type)` under strict BIOES: only
/// `S-X` and complete `B-X I-X* E-X` runs count.
pub fn bioes_spans<S: AsRef<str>>(tags: &[S]) -> Vec<(usize, usize, String)> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, t) in tags.iter().enumerate() {
        let (p, ty) = split_tag(t.as_ref());
        match p {
            'S' => {
                spans.push((i, i + 1, ty.to_string()));
                open = None;
            }
            'B' => open = Some((i, ty)),
            'I' => {
                if !matches!(open, Some((_, o)) if o == ty) {
                    open = None;
                }
            }
            'E' => {
                if let Some((s, o)) = open {
                    if o == ty {
                        spans.push((s, i + 1, ty.to_string()));
                    }
                }
                open = None;
            }
            _ => open = None,
        }
    }
    spans
}
