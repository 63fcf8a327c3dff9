//! Emission helpers for the YAML subset used by `brick.yaml` and `brick.lock`.
//!
//! Parsing goes through `serde_yaml`; emission is done by hand so that the
//! canonical form is stable and byte-for-byte reproducible.

use super::ModelError;

/// Renders a string scalar, plain when unambiguous and double-quoted otherwise.
pub(crate) fn scalar(s: &str) -> String {
    if is_plain_safe(s) {
        s.to_string()
    } else {
        serde_json::to_string(s).expect("strings always serialize")
    }
}

fn is_plain_safe(s: &str) -> bool {
    let Some(first) = s.chars().next() else {
        return false;
    };
    let charset_ok = (first.is_ascii_alphanumeric() || matches!(first, '_' | '.' | '/'))
        && !s.ends_with(' ')
        && s.chars().all(|c| {
            c.is_ascii_alphanumeric() || matches!(c, ' ' | '_' | '-' | '.' | '/' | '@' | '+' | '=' | ',')
        });
    // Rules out plain scalars that YAML would read as bool, null or number.
    charset_ok
        && matches!(
            serde_yaml::from_str::<serde_yaml::Value>(s),
            Ok(serde_yaml::Value::String(ref parsed)) if parsed == s
        )
}

pub(crate) fn syntax(err: serde_yaml::Error) -> ModelError {
    ModelError::Syntax(err.to_string())
}

pub(crate) fn utf8(bytes: &[u8]) -> Result<&str, ModelError> {
    std::str::from_utf8(bytes).map_err(|e| ModelError::Syntax(format!("input is not UTF-8: {e}")))
}
