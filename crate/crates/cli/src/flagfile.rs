//! `key = value` flag files. Each key is a long flag name without the dashes.

use std::ffi::OsString;

/// Flags that take no value; `true` turns them on, `false` leaves them off.
const SWITCHES: [&str; 3] = ["svg", "force", "eigs"];

pub fn parse(text: &str) -> Result<Vec<OsString>, String> {
    let mut args = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| format!("line {}: expected `key = value`, got `{line}`", lineno + 1))?;
        if key.is_empty() || key.starts_with('-') || key == "config" {
            return Err(format!("line {}: invalid key `{key}`", lineno + 1));
        }
        if SWITCHES.contains(&key) {
            match value {
                "true" => args.push(format!("--{key}").into()),
                "false" => {}
                other => return Err(format!("line {}: `{key}` takes true or false, got `{other}`", lineno + 1)),
            }
        } else {
            args.push(format!("--{key}").into());
            args.push(value.into());
        }
    }
    Ok(args)
}

/// Path given by `--config <path>` or `--config=<path>`, if any.
pub fn find_config(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(path) = s.strip_prefix("--config=") {
            return Some(path.into());
        }
    }
    None
}

/// Inserts the flag-file arguments right after the subcommand so that flags
/// given on the command line, which come later, override them.
pub fn splice(args: Vec<OsString>, from_file: Vec<OsString>) -> Vec<OsString> {
    if args.len() < 2 || args[1].to_string_lossy().starts_with('-') {
        return args;
    }
    let mut out = Vec::with_capacity(args.len() + from_file.len());
    out.extend_from_slice(&args[..2]);
    out.extend(from_file);
    out.extend_from_slice(&args[2..]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strs(v: &[OsString]) -> Vec<String> {
        v.iter().map(|s| s.to_string_lossy().into_owned()).collect()
    }

    #[test]
    fn parses_pairs_switches_and_comments() {
        let args = parse("# fig6\np = 3\nlambda = 3,2,1  # SNRs\n\nsvg = true\nforce = false\n").unwrap();
        assert_eq!(strs(&args), ["--p", "3", "--lambda", "3,2,1", "--svg"]);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(parse("p 3").is_err());
        assert!(parse("= 3").is_err());
        assert!(parse("svg = yes").is_err());
        assert!(parse("config = other.conf").is_err());
    }

    #[test]
    fn file_flags_come_before_command_line_flags() {
        let args: Vec<OsString> = ["stl", "simulate", "--p", "2"].iter().map(Into::into).collect();
        let out = splice(args, vec!["--p".into(), "3".into()]);
        assert_eq!(strs(&out), ["stl", "simulate", "--p", "3", "--p", "2"]);
    }

    #[test]
    fn finds_config_in_both_spellings() {
        let a: Vec<OsString> = ["stl", "simulate", "--config", "x.conf"].iter().map(Into::into).collect();
        assert_eq!(find_config(&a), Some("x.conf".into()));
        let b: Vec<OsString> = ["stl", "simulate", "--config=y.conf"].iter().map(Into::into).collect();
        assert_eq!(find_config(&b), Some("y.conf".into()));
    }
}
