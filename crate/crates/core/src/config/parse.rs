use serde_yaml::value::TaggedValue;
use serde_yaml::{Mapping, Value};

use crate::error::{Error, Result};
use crate::params::kind_of;

/// Parse config text: aliases are expanded into independent copies and
/// every `!join` is evaluated.
pub fn parse_config(text: &str) -> Result<Value> {
    let raw: Value = serde_yaml::from_str(text).map_err(|e| syntax_error(text, &e))?;
    eval_tags(raw)
}

fn syntax_error(text: &str, e: &serde_yaml::Error) -> Error {
    let (line, column) = e.location().map(|l| (l.line(), l.column())).unwrap_or((0, 0));
    let msg = e.to_string();
    if msg.contains("unknown anchor") {
        if let Some(anchor) = anchor_at(text, line, column) {
            return Error::UnresolvedAlias { anchor };
        }
    }
    Error::Syntax { line, column, message: msg }
}

/// Name of the alias (`*name`) at or after a 1-based position.
fn anchor_at(text: &str, line: usize, column: usize) -> Option<String> {
    let l = text.lines().nth(line.checked_sub(1)?)?;
    let start = l.char_indices().map(|(i, _)| i).nth(column.saturating_sub(1)).unwrap_or(0);
    let rest = &l[start..];
    let star = rest.find('*')?;
    let name: String =
        rest[star + 1..].chars().take_while(|c| !c.is_whitespace() && !matches!(c, ',' | ']' | '}')).collect();
    (!name.is_empty()).then_some(name)
}

fn eval_tags(v: Value) -> Result<Value> {
    Ok(match v {
        Value::Sequence(s) => Value::Sequence(s.into_iter().map(eval_tags).collect::<Result<_>>()?),
        Value::Mapping(m) => {
            let mut out = Mapping::new();
            for (k, v) in m {
                out.insert(eval_tags(k)?, eval_tags(v)?);
            }
            Value::Mapping(out)
        }
        Value::Tagged(t) => {
            let TaggedValue { tag, value } = *t;
            if tag == "join" || tag == "!join" {
                match eval_tags(value)? {
                    Value::Sequence(parts) => Value::String(join_tag(&parts)?),
                    other => {
                        return Err(Error::TypeErrorJoin {
                            index: 0,
                            found: format!("{} (the tag expects a list)", kind_of(&other)),
                        })
                    }
                }
            } else {
                return Err(Error::UnknownTag(tag.to_string()));
            }
        }
        other => other,
    })
}

/// Concatenate scalars without separator; numbers use their shortest
/// round-trip decimal form.
pub fn join_tag(parts: &[Value]) -> Result<String> {
    let mut out = String::new();
    for (index, p) in parts.iter().enumerate() {
        match p {
            Value::String(s) => out.push_str(s),
            Value::Bool(b) => out.push_str(&b.to_string()),
            Value::Number(n) => match (n.as_i64(), n.as_u64(), n.as_f64()) {
                (Some(i), _, _) => out.push_str(&i.to_string()),
                (_, Some(u), _) => out.push_str(&u.to_string()),
                (_, _, Some(f)) => out.push_str(&f.to_string()),
                _ => unreachable!("a YAML number is an integer or a float"),
            },
            other => return Err(Error::TypeErrorJoin { index, found: kind_of(other).to_string() }),
        }
    }
    Ok(out)
}

/// Canonical text form of a config tree.
pub fn emit(v: &Value) -> String {
    serde_yaml::to_string(v).expect("a YAML value always serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn join_with_alias() {
        let v = parse_config("name: &teacher 'resnet34'\nckpt: !join ['./', *teacher, '.pt']\n").unwrap();
        assert_eq!(v["ckpt"], Value::String("./resnet34.pt".into()));
    }

    #[test]
    fn nested_join_through_anchor() {
        let text = "a: &root !join ['~/d/', 'x']\nb: !join [*root, '/train']\n";
        let v = parse_config(text).unwrap();
        assert_eq!(v["b"].as_str(), Some("~/d/x/train"));
    }

    #[test]
    fn join_numbers_and_errors() {
        let v = parse_config("a: !join ['lr', 0.1, '-', 3, true]").unwrap();
        assert_eq!(v["a"].as_str(), Some("lr0.1-3true"));
        assert_eq!(parse_config("a: !join []").unwrap()["a"].as_str(), Some(""));
        assert!(matches!(parse_config("a: !join ['x', [1]]"), Err(Error::TypeErrorJoin { index: 1, .. })));
        assert!(matches!(parse_config("a: !nope 1"), Err(Error::UnknownTag(_))));
    }

    #[test]
    fn unresolved_alias_names_anchor() {
        match parse_config("a: 1\nb: *missing\n") {
            Err(Error::UnresolvedAlias { anchor }) => assert_eq!(anchor, "missing"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_error_has_position() {
        match parse_config("a: [1, 2\nb: 3\n") {
            Err(Error::Syntax { line, .. }) => assert!(line >= 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn aliases_are_copies() {
        let mut v = parse_config("a: &x {k: 1}\nb: *x\n").unwrap();
        v["a"]["k"] = Value::from(2);
        assert_eq!(v["b"]["k"], Value::from(1));
    }
}
