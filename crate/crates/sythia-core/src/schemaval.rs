//! Structural validation of tool specs and of concrete tool calls against
//! them. Validation is detect-only: values are never coerced, and every
//! argument outside the declared properties is rejected.
//!
//! Type lattice: integers conform to "number"; booleans never do; null
//! conforms only to "null".

use std::fmt;

use serde_json::{Map, Value};

use crate::model::{FunctionSpec, TypeDescriptor, TypeKind};
use crate::sigparse::CallExpr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum ViolationCode {
    MissingRequired,
    TypeMismatch,
    ExtraneousField,
    UnknownFunction,
    BadSpec,
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationCode::MissingRequired => "MISSING_REQUIRED",
            ViolationCode::TypeMismatch => "TYPE_MISMATCH",
            ViolationCode::ExtraneousField => "EXTRANEOUS_FIELD",
            ViolationCode::UnknownFunction => "UNKNOWN_FUNCTION",
            ViolationCode::BadSpec => "BAD_SPEC",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub path: String,
    pub message: String,
}

impl Violation {
    fn new(code: ViolationCode, path: impl Into<String>, message: impl Into<String>) -> Self {
        Violation {
            code,
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}: {}", self.code, self.path, self.message)
    }
}

/// Non-fatal spec findings (e.g. arrays without an item descriptor).
#[derive(Debug, Clone, PartialEq)]
pub struct SpecWarning {
    pub path: String,
    pub message: String,
}

/// A concrete tool call to validate: either named arguments (the wire form)
/// or a positional call expression bound to the spec's property order.
#[derive(Debug, Clone, PartialEq)]
pub enum ToolCall {
    Named { name: String, arguments: Map<String, Value> },
    Positional(CallExpr),
}

impl ToolCall {
    pub fn name(&self) -> &str {
        match self {
            ToolCall::Named { name, .. } => name,
            ToolCall::Positional(call) => &call.name,
        }
    }
}

/// Structural conformance of a value to a type descriptor, including array
/// item descriptors and numeric minimum.
pub fn conforms(value: &Value, descriptor: &TypeDescriptor) -> bool {
    match descriptor.kind {
        TypeKind::String => value.is_string(),
        TypeKind::Boolean => value.is_boolean(),
        TypeKind::Null => value.is_null(),
        TypeKind::Integer => match value.as_i64() {
            Some(n) => descriptor.minimum.map_or(true, |min| (n as f64) >= min),
            None => value.as_u64().is_some(),
        },
        TypeKind::Number => match value {
            Value::Number(n) => {
                let f = n.as_f64().unwrap_or(f64::NAN);
                descriptor.minimum.map_or(true, |min| f >= min)
            }
            _ => false,
        },
        TypeKind::Array => match value.as_array() {
            Some(items) => match &descriptor.items {
                Some(item_desc) => items.iter().all(|v| conforms(v, item_desc)),
                None => true,
            },
            None => false,
        },
        TypeKind::Object => value.is_object(),
    }
}

/// Validate a spec document itself: required ⊆ properties, kind "object",
/// and defaults conforming to their own descriptors.
pub fn validate_spec(spec: &FunctionSpec) -> Vec<Violation> {
    let mut violations = Vec::new();
    if spec.kind != "object" {
        violations.push(Violation::new(
            ViolationCode::BadSpec,
            format!("{}.type", spec.name),
            format!("expected \"object\", found \"{}\"", spec.kind),
        ));
    }
    for (i, required) in spec.required.iter().enumerate() {
        if !spec.properties.contains_key(required) {
            violations.push(Violation::new(
                ViolationCode::BadSpec,
                format!("{}.required[{i}]", spec.name),
                format!("required parameter '{required}' has no property definition"),
            ));
        }
    }
    for (param, descriptor) in &spec.properties {
        if let Some(default) = &descriptor.default {
            if !conforms(default, descriptor) {
                violations.push(Violation::new(
                    ViolationCode::BadSpec,
                    format!("{}.properties.{param}.default", spec.name),
                    format!("default {default} does not conform to type {}", descriptor.kind),
                ));
            }
        }
    }
    sort_violations(&mut violations);
    violations
}

/// Non-violation findings on a spec, per the array-items convention: a
/// missing `items` leaves element types unconstrained and is only flagged.
pub fn lint_spec(spec: &FunctionSpec) -> Vec<SpecWarning> {
    let mut warnings = Vec::new();
    for (param, descriptor) in &spec.properties {
        if descriptor.kind == TypeKind::Array && descriptor.items.is_none() {
            warnings.push(SpecWarning {
                path: format!("{}.properties.{param}", spec.name),
                message: "array without item descriptor; element types unconstrained".to_string(),
            });
        }
    }
    warnings
}

/// Validate a concrete call against a spec: name match, required presence,
/// per-field type conformance, and no extraneous fields. Empty result means
/// the call is schema-valid.
pub fn validate_call(call: &ToolCall, spec: &FunctionSpec) -> Vec<Violation> {
    let mut violations = Vec::new();

    if call.name() != spec.name {
        violations.push(Violation::new(
            ViolationCode::UnknownFunction,
            "name",
            format!("call names '{}' but spec is '{}'", call.name(), spec.name),
        ));
    }

    let arguments: Map<String, Value> = match call {
        ToolCall::Named { arguments, .. } => arguments.clone(),
        ToolCall::Positional(expr) => {
            if expr.args.len() > spec.properties.len() {
                violations.push(Violation::new(
                    ViolationCode::ExtraneousField,
                    format!("arguments[{}]", spec.properties.len()),
                    format!(
                        "{} positional argument(s) for {} declared parameter(s)",
                        expr.args.len(),
                        spec.properties.len()
                    ),
                ));
            }
            spec.properties
                .keys()
                .zip(expr.args.iter())
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect()
        }
    };

    for required in &spec.required {
        if !arguments.contains_key(required) {
            violations.push(Violation::new(
                ViolationCode::MissingRequired,
                format!("arguments.{required}"),
                format!("required argument '{required}' is missing"),
            ));
        }
    }

    for (name, value) in &arguments {
        match spec.properties.get(name) {
            Some(descriptor) => {
                if !conforms(value, descriptor) {
                    violations.push(Violation::new(
                        ViolationCode::TypeMismatch,
                        format!("arguments.{name}"),
                        format!("value does not conform to type {}", descriptor.kind),
                    ));
                }
            }
            None => violations.push(Violation::new(
                ViolationCode::ExtraneousField,
                format!("arguments.{name}"),
                format!("argument '{name}' is not declared in the spec"),
            )),
        }
    }

    sort_violations(&mut violations);
    violations
}

fn sort_violations(violations: &mut [Violation]) {
    violations.sort_by(|a, b| a.path.cmp(&b.path).then(a.code.cmp(&b.code)));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::OutputSpec;
    use indexmap::IndexMap;
    use serde_json::json;

    fn study_spec() -> FunctionSpec {
        let mut properties = IndexMap::new();
        properties.insert(
            "study_id".to_string(),
            TypeDescriptor::new(TypeKind::String).with_description("Study identifier."),
        );
        FunctionSpec {
            name: "fetch_real_time_genomic_data".to_string(),
            properties,
            required: vec!["study_id".to_string()],
            kind: "object".to_string(),
            description: "Fetch real-time genomic data for a study.".to_string(),
            output: OutputSpec {
                kind: TypeKind::Object,
                description: "Genomic payload.".to_string(),
                items: None,
            },
        }
    }

    fn named(name: &str, args: Value) -> ToolCall {
        ToolCall::Named {
            name: name.to_string(),
            arguments: args.as_object().unwrap().clone(),
        }
    }

    #[test]
    fn sample_call_is_valid() {
        let call = named("fetch_real_time_genomic_data", json!({"study_id": "active_study_123"}));
        assert!(validate_call(&call, &study_spec()).is_empty());
    }

    #[test]
    fn missing_required_flagged() {
        let call = named("fetch_real_time_genomic_data", json!({}));
        let violations = validate_call(&call, &study_spec());
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].code, ViolationCode::MissingRequired);
        assert!(violations[0].message.contains("study_id"));
    }

    #[test]
    fn extraneous_field_flagged() {
        let call = named(
            "fetch_real_time_genomic_data",
            json!({"study_id": "active_study_123", "verbose": true}),
        );
        let violations = validate_call(&call, &study_spec());
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].code, ViolationCode::ExtraneousField);
        assert!(violations[0].path.ends_with("verbose"));
    }

    #[test]
    fn name_mismatch_flagged() {
        let call = named("other_tool", json!({"study_id": "s"}));
        let violations = validate_call(&call, &study_spec());
        assert!(violations.iter().any(|v| v.code == ViolationCode::UnknownFunction));
    }

    #[test]
    fn bad_spec_required_not_subset() {
        let mut spec = study_spec();
        spec.required.push("x".to_string());
        let violations = validate_spec(&spec);
        assert!(violations
            .iter()
            .any(|v| v.code == ViolationCode::BadSpec && v.path.contains("required[1]")));
    }

    #[test]
    fn bad_spec_default_type_conflict() {
        let mut spec = study_spec();
        let mut desc = TypeDescriptor::new(TypeKind::Boolean);
        desc.default = Some(json!(5));
        spec.properties.insert("flag".to_string(), desc);
        let violations = validate_spec(&spec);
        assert!(violations.iter().any(|v| v.path.contains("flag.default")));
    }

    #[test]
    fn conforms_type_lattice() {
        let number_min0 = {
            let mut d = TypeDescriptor::new(TypeKind::Number);
            d.minimum = Some(0.0);
            d
        };
        assert!(conforms(&json!(42), &number_min0));
        assert!(!conforms(&json!(-1), &number_min0));
        assert!(!conforms(&json!(true), &TypeDescriptor::new(TypeKind::Number)));
        assert!(conforms(&json!(3), &TypeDescriptor::new(TypeKind::Number)));
        assert!(!conforms(&json!(3.5), &TypeDescriptor::new(TypeKind::Integer)));
        assert!(conforms(&json!(null), &TypeDescriptor::new(TypeKind::Null)));
        assert!(!conforms(&json!(null), &TypeDescriptor::new(TypeKind::String)));

        // array of objects with additionalProperties: true
        let mut items = TypeDescriptor::new(TypeKind::Object);
        items.additional_properties = Some(true);
        let mut array = TypeDescriptor::new(TypeKind::Array);
        array.items = Some(Box::new(items));
        assert!(conforms(&json!([{"a": 1}]), &array));
        assert!(!conforms(&json!([1]), &array));
    }

    #[test]
    fn array_without_items_is_a_lint_not_violation() {
        let mut spec = study_spec();
        spec.properties
            .insert("tags".to_string(), TypeDescriptor::new(TypeKind::Array));
        assert!(validate_spec(&spec).is_empty());
        assert_eq!(lint_spec(&spec).len(), 1);
        let call = named(
            "fetch_real_time_genomic_data",
            json!({"study_id": "s", "tags": [1, "two", null]}),
        );
        assert!(validate_call(&call, &spec).is_empty());
    }

    #[test]
    fn violations_ordered_by_path() {
        let call = named("fetch_real_time_genomic_data", json!({"a_extra": 1, "z_extra": 2}));
        let violations = validate_call(&call, &study_spec());
        let paths: Vec<&str> = violations.iter().map(|v| v.path.as_str()).collect();
        let mut sorted = paths.clone();
        sorted.sort();
        assert_eq!(paths, sorted);
    }

    #[test]
    fn positional_call_binds_in_property_order() {
        let call = ToolCall::Positional(crate::sigparse::parse_call("fetch_real_time_genomic_data('active_study_123')").unwrap());
        assert!(validate_call(&call, &study_spec()).is_empty());
    }

    proptest::proptest! {
        // Soundness vs a brute-force per-field checker on small specs.
        #[test]
        fn matches_bruteforce_checker(
            present in proptest::collection::vec(proptest::bool::ANY, 3),
            values in proptest::collection::vec(0usize..4, 3),
            extra in proptest::bool::ANY,
        ) {
            let mut properties = IndexMap::new();
            properties.insert("s".to_string(), TypeDescriptor::new(TypeKind::String));
            properties.insert("n".to_string(), TypeDescriptor::new(TypeKind::Number));
            properties.insert("b".to_string(), TypeDescriptor::new(TypeKind::Boolean));
            let spec = FunctionSpec {
                name: "probe".to_string(),
                properties,
                required: vec!["s".to_string(), "n".to_string()],
                kind: "object".to_string(),
                description: String::new(),
                output: OutputSpec { kind: TypeKind::Object, description: String::new(), items: None },
            };
            let domain = [json!("text"), json!(7), json!(true), json!(null)];
            let mut arguments = Map::new();
            for (i, key) in ["s", "n", "b"].iter().enumerate() {
                if present[i] {
                    arguments.insert(key.to_string(), domain[values[i]].clone());
                }
            }
            if extra {
                arguments.insert("ghost".to_string(), json!(1));
            }
            let call = ToolCall::Named { name: "probe".to_string(), arguments: arguments.clone() };
            let violations = validate_call(&call, &spec);

            // oracle: exhaustive per-field check
            let mut ok = !extra;
            for req in &spec.required {
                if !arguments.contains_key(req) { ok = false; }
            }
            for (k, v) in &arguments {
                match spec.properties.get(k) {
                    Some(d) => { if !conforms(v, d) { ok = false; } }
                    None => { ok = false; }
                }
            }
            proptest::prop_assert_eq!(violations.is_empty(), ok);
        }
    }
}
