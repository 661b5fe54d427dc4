use std::collections::BTreeMap;

use scenescout::metrics::Direction;
use scenescout::scene::{Rgb, SceneSpec};
use scenescout::scoring::{ExternalScorer, SalientPixelScorer, Scorer};

use crate::CliError;

/// Parses repeated `k=v` flags. Later keys override earlier ones.
pub fn parse_args(raw: &[String]) -> Result<BTreeMap<String, String>, CliError> {
    raw.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::config(format!("--scorer-arg `{kv}` is not of the form key=value")))
        })
        .collect()
}

fn parse_color(s: &str) -> Result<Rgb, CliError> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(CliError::config(format!("--scorer-arg color `{s}` must be R,G,B")));
    }
    let mut c = [0u8; 3];
    for (slot, p) in c.iter_mut().zip(parts) {
        *slot =
            p.trim().parse().map_err(|_| CliError::config(format!("--scorer-arg color `{s}`: `{p}` is not 0-255")))?;
    }
    Ok(Rgb(c))
}

/// Builds the named image scorer.
///
/// * `salient`: `color=R,G,B` (default: first sphere's colour), `tolerance=N` (default 0)
/// * `external`: `cmd=PATH`, optional `direction=max|min`
pub fn build(name: &str, args: &BTreeMap<String, String>, scene: &SceneSpec) -> Result<Box<dyn Scorer>, CliError> {
    let allowed: &[&str] = match name {
        "salient" => &["color", "tolerance"],
        "external" => &["cmd", "direction"],
        other => return Err(CliError::config(format!("--scorer: unknown scorer `{other}` (salient, external)"))),
    };
    if let Some(k) = args.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(CliError::config(format!("--scorer-arg: `{k}` is not a parameter of `{name}`")));
    }
    match name {
        "salient" => {
            let target = match args.get("color") {
                Some(c) => parse_color(c)?,
                None => scene.spheres[0].color,
            };
            let tolerance = match args.get("tolerance") {
                Some(t) => {
                    t.parse().map_err(|_| CliError::config(format!("--scorer-arg tolerance `{t}` is not 0-255")))?
                }
                None => 0,
            };
            Ok(Box::new(SalientPixelScorer { target, tolerance }))
        }
        _ => {
            let cmd = args
                .get("cmd")
                .ok_or_else(|| CliError::config("--scorer-arg cmd=PATH is required for the external scorer"))?;
            let mut scorer = ExternalScorer::new(cmd);
            scorer.direction = match args.get("direction").map(String::as_str) {
                None | Some("max") => Direction::Maximize,
                Some("min") => Direction::Minimize,
                Some(d) => return Err(CliError::config(format!("--scorer-arg direction `{d}` must be max or min"))),
            };
            Ok(Box::new(scorer))
        }
    }
}
