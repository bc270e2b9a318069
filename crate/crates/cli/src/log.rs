/// Writes one structured `event=<name> key=value ...` line to stderr.
pub fn event(name: &str, fields: &[(&str, String)]) {
    let mut line = format!("event={name}");
    for (k, v) in fields {
        line.push(' ');
        line.push_str(k);
        line.push('=');
        if v.is_empty() || v.contains(char::is_whitespace) || v.contains('"') {
            line.push_str(&format!("{v:?}"));
        } else {
            line.push_str(v);
        }
    }
    eprintln!("{line}");
}
