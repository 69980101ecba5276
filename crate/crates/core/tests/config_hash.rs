use std::collections::BTreeSet;

use bbdfml::config::RunConfig;
use serde_json::Value;

/// Every scalar leaf of the JSON encoding, as a path of keys and indices.
fn leaves(v: &Value, path: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    match v {
        Value::Object(m) => {
            for (k, c) in m {
                path.push(k.clone());
                leaves(c, path, out);
                path.pop();
            }
        }
        Value::Array(a) => {
            for (i, c) in a.iter().enumerate() {
                path.push(i.to_string());
                leaves(c, path, out);
                path.pop();
            }
        }
        _ => out.push(path.clone()),
    }
}

fn at<'a>(v: &'a mut Value, path: &[String]) -> &'a mut Value {
    path.iter().fold(v, |node, p| match node {
        Value::Object(m) => m.get_mut(p).unwrap(),
        Value::Array(a) => &mut a[p.parse::<usize>().unwrap()],
        _ => unreachable!(),
    })
}

fn mutated(v: &Value, k: u64) -> Option<Value> {
    Some(match v {
        Value::Bool(b) => Value::Bool(!b),
        Value::Number(n) if n.is_u64() => Value::from(n.as_u64().unwrap() + k),
        Value::Number(n) => Value::from(n.as_f64().unwrap() * (1.0 + 1e-3 * k as f64) + 1e-9),
        Value::String(s) if s.chars().all(|c| c.is_ascii_uppercase()) || s == "zo" || s == "fo" || s == "dense" || s == "conv" => {
            return None
        }
        Value::String(s) => Value::String(format!("{s}{k}")),
        _ => return None,
    })
}

#[test]
fn hash_changes_with_every_field_mutation() {
    let base = RunConfig::desk();
    let doc = serde_json::to_value(&base).unwrap();
    let mut paths = Vec::new();
    leaves(&doc, &mut Vec::new(), &mut paths);
    let mut hashes = BTreeSet::from([base.hash()]);
    let mut n = 0;
    for k in 1..=4 {
        for p in &paths {
            let mut d = doc.clone();
            let Some(new) = mutated(at(&mut d, p), k) else { continue };
            if matches!(new, Value::Bool(_)) && k > 1 {
                continue;
            }
            *at(&mut d, p) = new;
            let Ok(cfg) = serde_json::from_value::<RunConfig>(d) else { continue };
            assert!(hashes.insert(cfg.hash()), "collision after mutating {}", p.join("."));
            n += 1;
        }
    }
    assert!(n >= 100, "only {n} mutations");
    assert_eq!(RunConfig::desk().hash(), base.hash());
}
