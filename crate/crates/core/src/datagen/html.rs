use super::TableSpec;
use crate::error::{Error, Result};

pub fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(i) = rest.find('&') {
        out.push_str(&rest[..i]);
        let tail = &rest[i..];
        let end = tail
            .find(';')
            .ok_or_else(|| Error::Invalid(format!("unterminated entity in {s:?}")))?;
        let ent = &tail[1..end];
        match ent {
            "amp" => out.push('&'),
            "lt" => out.push('<'),
            "gt" => out.push('>'),
            "quot" => out.push('"'),
            "apos" | "#39" => out.push('\''),
            "nbsp" => out.push(' '),
            _ => {
                let code = ent
                    .strip_prefix("#x")
                    .map(|h| u32::from_str_radix(h, 16))
                    .or_else(|| ent.strip_prefix('#').map(|d| d.parse::<u32>()))
                    .and_then(|r| r.ok())
                    .and_then(char::from_u32)
                    .ok_or_else(|| Error::Invalid(format!("unknown entity &{ent};")))?;
                out.push(code);
            }
        }
        rest = &tail[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// `<table><tr><td>...</td></tr></table>` with no whitespace between tags.
pub fn table_to_html(spec: &TableSpec) -> String {
    let mut out = String::from("<table>");
    for row in &spec.cells {
        out.push_str("<tr>");
        for cell in row {
            out.push_str("<td>");
            out.push_str(&escape_html(cell));
            out.push_str("</td>");
        }
        out.push_str("</tr>");
    }
    out.push_str("</table>");
    out
}

/// Parses the cell grid back out of table markup. Accepts `<th>` as a cell,
/// attributes on tags, and whitespace between tags; ignores `<thead>` and
/// `<tbody>` wrappers.
pub fn parse_html_table(html: &str) -> Result<Vec<Vec<String>>> {
    let bad = |m: String| Error::Invalid(format!("table markup: {m}"));
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut cell: Option<String> = None;
    let mut in_table = false;
    let mut closed = false;
    let mut rest = html;
    while !rest.is_empty() {
        let Some(lt) = rest.find('<') else {
            match cell.as_mut() {
                Some(c) => c.push_str(rest),
                None if rest.trim().is_empty() => {}
                None => return Err(bad(format!("stray text {rest:?}"))),
            }
            break;
        };
        let text = &rest[..lt];
        match cell.as_mut() {
            Some(c) => c.push_str(text),
            None if text.trim().is_empty() => {}
            None => return Err(bad(format!("stray text {text:?}"))),
        }
        let gt = rest[lt..]
            .find('>')
            .ok_or_else(|| bad("unterminated tag".into()))?
            + lt;
        let tag = rest[lt + 1..gt].trim();
        let (closing, name) = match tag.strip_prefix('/') {
            Some(t) => (true, t.trim()),
            None => (false, tag),
        };
        let name = name
            .split(|c: char| c.is_whitespace() || c == '/')
            .next()
            .unwrap_or("")
            .to_ascii_lowercase();
        match (name.as_str(), closing) {
            ("table", false) if !in_table && !closed => in_table = true,
            ("table", true) if in_table && cell.is_none() => {
                in_table = false;
                closed = true;
            }
            ("thead" | "tbody", _) if in_table => {}
            ("tr", false) if in_table && cell.is_none() => rows.push(Vec::new()),
            ("tr", true) if in_table && cell.is_none() => {}
            ("td" | "th", false) if cell.is_none() && !rows.is_empty() => cell = Some(String::new()),
            ("td" | "th", true) if cell.is_some() => {
                let raw = cell.take().expect("open cell");
                rows.last_mut()
                    .expect("row is open")
                    .push(unescape(raw.trim())?);
            }
            _ => return Err(bad(format!("unexpected tag <{tag}>"))),
        }
        rest = &rest[gt + 1..];
    }
    if !closed || cell.is_some() {
        return Err(bad("missing </table>".into()));
    }
    Ok(rows)
}
