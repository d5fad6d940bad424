//! `--config FILE` support: each `key = value` line becomes `--key value`
//! right after the subcommand name, so flags given on the command line
//! still win.

use std::ffi::OsString;

use diffusion_influence::kv::KeyValues;

/// Options that come before the subcommand and take a value.
const GLOBAL_VALUED: &[&str] = &["--threads", "--config"];

pub fn expand_args(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let mut config = None;
    let mut out = Vec::with_capacity(args.len());
    let mut sub_at = None;
    let mut i = 0;
    while i < args.len() {
        let a = args[i].to_string_lossy().into_owned();
        if i > 0 && sub_at.is_none() {
            if a == "--config" {
                let path = args.get(i + 1).ok_or("--config needs a file")?;
                config = Some(path.clone());
                i += 2;
                continue;
            }
            if let Some(path) = a.strip_prefix("--config=") {
                config = Some(path.into());
                i += 1;
                continue;
            }
            if GLOBAL_VALUED.contains(&a.as_str()) {
                out.push(args[i].clone());
                if let Some(v) = args.get(i + 1) {
                    out.push(v.clone());
                }
                i += 2;
                continue;
            }
            if !a.starts_with('-') {
                sub_at = Some(out.len());
            }
        }
        out.push(args[i].clone());
        i += 1;
    }

    let Some(path) = config else {
        return Ok(out);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| format!("cannot read config {}: {e}", path.to_string_lossy()))?;
    let kv = KeyValues::parse(&text).map_err(|e| e.to_string())?;
    let at = sub_at.ok_or("--config given without a subcommand")? + 1;
    let mut injected = Vec::new();
    for (k, v) in kv.iter() {
        let flag = format!("--{}", k.replace('_', "-"));
        match v {
            "true" => injected.push(OsString::from(flag)),
            "false" => {}
            _ => {
                injected.push(OsString::from(flag));
                injected.push(OsString::from(v));
            }
        }
    }
    out.splice(at..at, injected);
    Ok(out)
}
