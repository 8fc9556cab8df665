use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Applies `key=value` pairs to a config through its JSON form.
///
/// Keys are dotted paths into the serialized struct (`pose.rotation`). Values are
/// parsed as JSON first and taken as a bare string otherwise, so `rho=3`,
/// `patch_sizes=[21,15,9]` and `weighting=uniform` all work.
pub fn apply<T: Serialize + DeserializeOwned>(config: &T, pairs: &[String]) -> Result<T, String> {
    let mut doc = serde_json::to_value(config).map_err(|e| e.to_string())?;
    for pair in pairs {
        let (key, raw) = pair
            .split_once('=')
            .ok_or_else(|| format!("override `{pair}` is not key=value"))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| format!("unknown config key `{key}`"))?;
        }
        *slot = value;
    }
    serde_json::from_value(doc).map_err(|e| format!("bad override: {e}"))
}
