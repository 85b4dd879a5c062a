//! Artifact emitters and checkers: hand-emitted SVG line charts and
//! validation of emitted JSON/CSV against the schema files shipped in
//! `schemas/`. Image output reuses [`crate::pyramid::ppm`].

use serde_json::Value;

use crate::error::{Error, Result};

/// One chart series: a label and `(x, y)` points in data coordinates.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Emit a minimal SVG line chart (axes, per-series polyline and label).
/// No charting dependency: the output is a fixed 640x420 canvas with a
/// linear mapping of the data bounding box onto the plot area.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (width, height) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 50.0);
    let (pw, ph) = (width - left - right, height - top - bottom);
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x0 < x1) {
        x1 = x0 + 1.0;
    }
    if !(y0 < y1) {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"];
    let mut svg = format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{tx}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
            "<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
            "<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>\n",
            "<text x=\"{tx}\" y=\"{xl}\" text-anchor=\"middle\">{x_label}</text>\n",
            "<text x=\"16\" y=\"{ty}\" text-anchor=\"middle\" ",
            "transform=\"rotate(-90 16 {ty})\">{y_label}</text>\n",
        ),
        w = width,
        h = height,
        tx = left + pw / 2.0,
        title = title,
        l = left,
        r = left + pw,
        t = top,
        b = top + ph,
        xl = height - 12.0,
        x_label = x_label,
        ty = top + ph / 2.0,
        y_label = y_label,
    );
    for (i, bound) in [(x0, y0), (x1, y1)].iter().enumerate() {
        let (bx, by) = *bound;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{bx:.3e}</text>\n",
            px(bx),
            top + ph + 16.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{by:.3e}</text>\n",
            left - 4.0,
            py(by) + if i == 0 { 0.0 } else { 10.0 }
        ));
    }
    for (i, s) in series.iter().enumerate() {
        let color = colors[i % colors.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{}</text>\n",
            left + pw - 150.0,
            top + 14.0 * (i + 1) as f64,
            s.label
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

// ---------------------------------------------------------------------------
// Schema validation

/// Validate `value` against a schema document (the subset of JSON Schema
/// used by the files in `schemas/`: `type`, `properties`, `required`,
/// `items`, `enum`). Returns the first violation as an error.
pub fn validate_json(schema: &Value, value: &Value) -> Result<()> {
    validate_at(schema, value, "$")
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn type_matches(expected: &str, v: &Value) -> bool {
    match expected {
        "integer" => v.as_i64().is_some() || v.as_u64().is_some(),
        "number" => v.is_number(),
        other => other == type_name(v),
    }
}

fn validate_at(schema: &Value, value: &Value, path: &str) -> Result<()> {
    let fail = |msg: String| Err(Error::Config(format!("schema violation at {path}: {msg}")));
    if let Some(t) = schema.get("type").and_then(Value::as_str) {
        if !type_matches(t, value) {
            return fail(format!("expected {t}, got {}", type_name(value)));
        }
    }
    if let Some(allowed) = schema.get("enum").and_then(Value::as_array) {
        if !allowed.contains(value) {
            return fail(format!("value {value} not in enum"));
        }
    }
    if let Some(required) = schema.get("required").and_then(Value::as_array) {
        for name in required.iter().filter_map(Value::as_str) {
            if value.get(name).is_none() {
                return fail(format!("missing required property '{name}'"));
            }
        }
    }
    if let Some(props) = schema.get("properties").and_then(Value::as_object) {
        if let Some(obj) = value.as_object() {
            for (name, sub) in props {
                if let Some(v) = obj.get(name) {
                    validate_at(sub, v, &format!("{path}.{name}"))?;
                }
            }
        }
    }
    if let Some(items) = schema.get("items") {
        if let Some(arr) = value.as_array() {
            for (i, v) in arr.iter().enumerate() {
                validate_at(items, v, &format!("{path}[{i}]"))?;
            }
        }
    }
    Ok(())
}

/// Validate CSV text against a schema file consisting of the expected
/// header on its first non-comment line: the header must match exactly
/// and every record must have the same field count.
pub fn validate_csv(schema_text: &str, csv: &str) -> Result<()> {
    let expected = schema_text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .ok_or_else(|| Error::Config("csv schema file has no header line".to_string()))?;
    let mut lines = csv.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config("empty csv".to_string()))?;
    if header != expected {
        return Err(Error::Config(format!(
            "csv header '{header}' does not match schema '{expected}'"
        )));
    }
    let n = expected.split(',').count();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let got = line.split(',').count();
        if got != n {
            return Err(Error::Config(format!(
                "csv record {} has {got} fields, expected {n}",
                i + 1
            )));
        }
    }
    Ok(())
}
