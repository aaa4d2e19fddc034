//! Architecture spec document parsing (UTF-8 JSON).

use alloc::string::String;
use alloc::vec::Vec;

use serde::Deserialize;

use super::{
    ArchSpec, BudgetRatio, CellPolicy, GroupSpec, KernelDims, LayerKind, LayerSpec, PlanError,
    PlanResult,
};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DocRoot {
    layers: Vec<DocLayer>,
    groups: Vec<DocGroup>,
    #[serde(default)]
    budget_b: Option<DocBudget>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DocLayer {
    id: String,
    kernel: [usize; 4],
    stride: usize,
    #[serde(default)]
    pad: usize,
    kind: LayerKind,
    #[serde(default)]
    stage: Option<String>,
    warehouse_group: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DocGroup {
    name: String,
    cell_policy: DocPolicy,
    #[serde(default)]
    cell_dims: Option<[usize; 4]>,
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case")]
enum DocPolicy {
    Gcd,
    GcdHalf,
    Explicit,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DocBudget {
    Ratio(String),
    Number(f64),
}

/// Parse and validate an architecture document.
///
/// Rejects duplicate layer ids, references to undeclared warehouse groups,
/// non-positive kernel dimensions or strides, depthwise kernels with more
/// than one channel, and `explicit` groups without `cell_dims`.
pub fn parse_arch_spec(text: &str) -> PlanResult<ArchSpec> {
    let doc: DocRoot = serde_json::from_str(text).map_err(|e| PlanError::Syntax {
        line: e.line(),
        column: e.column(),
        msg: alloc::format!("{e}"),
    })?;

    let mut groups = Vec::with_capacity(doc.groups.len());
    for g in doc.groups {
        let policy = match g.cell_policy {
            DocPolicy::Gcd => CellPolicy::Gcd,
            DocPolicy::GcdHalf => CellPolicy::GcdHalf,
            DocPolicy::Explicit => match g.cell_dims {
                Some(d) => CellPolicy::Explicit(KernelDims::from(d)),
                None => {
                    return Err(PlanError::InvalidLayer {
                        layer: g.name,
                        msg: "explicit cell policy requires cell_dims".into(),
                    })
                }
            },
        };
        if groups.iter().any(|e: &GroupSpec| e.name == g.name) {
            return Err(PlanError::InvalidLayer {
                layer: g.name,
                msg: "duplicate group name".into(),
            });
        }
        groups.push(GroupSpec { name: g.name, cell_policy: policy });
    }

    let mut layers = Vec::with_capacity(doc.layers.len());
    for l in doc.layers {
        if layers.iter().any(|e: &LayerSpec| e.id == l.id) {
            return Err(PlanError::DuplicateLayerId(l.id));
        }
        if !groups.iter().any(|g| g.name == l.warehouse_group) {
            return Err(PlanError::UnknownGroup { layer: l.id, group: l.warehouse_group });
        }
        let kernel = KernelDims::from(l.kernel);
        if kernel.volume() == 0 {
            return Err(PlanError::InvalidLayer {
                layer: l.id,
                msg: alloc::format!("kernel dims must be positive, got {kernel}"),
            });
        }
        if l.stride == 0 {
            return Err(PlanError::InvalidLayer { layer: l.id, msg: "stride must be positive".into() });
        }
        if matches!(l.kind, LayerKind::Depthwise) && kernel.c != 1 {
            return Err(PlanError::InvalidLayer {
                layer: l.id,
                msg: alloc::format!("depthwise kernel must have c = 1, got {}", kernel.c),
            });
        }
        let stage = l.stage.unwrap_or_else(|| l.warehouse_group.clone());
        layers.push(LayerSpec {
            id: l.id,
            kernel,
            stride: l.stride,
            pad: l.pad,
            kind: l.kind,
            stage,
            warehouse_group: l.warehouse_group,
        });
    }

    let budget_b = match doc.budget_b {
        None => None,
        Some(DocBudget::Ratio(s)) => Some(BudgetRatio::from_str_ratio(&s)?),
        Some(DocBudget::Number(v)) => Some(BudgetRatio::from_f64(v)?),
    };

    Ok(ArchSpec { layers, groups, budget_b })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "layers": [
            { "id": "c1", "kernel": [4, 2, 3, 3], "stride": 1, "pad": 1,
              "kind": "standard", "warehouse_group": "g" }
        ],
        "groups": [ { "name": "g", "cell_policy": "gcd" } ],
        "budget_b": "1"
    }"#;

    #[test]
    fn minimal_document_parses() {
        let arch = parse_arch_spec(MINIMAL).unwrap();
        assert_eq!(arch.layers.len(), 1);
        assert_eq!(arch.groups.len(), 1);
        assert_eq!(arch.layers[0].stage, "g");
        assert_eq!(arch.budget_b.unwrap().to_f64(), 1.0);
    }

    #[test]
    fn bundled_resnet18_has_four_groups_and_nineteen_layers() {
        let arch = parse_arch_spec(crate::RESNET18_SPEC_JSON).unwrap();
        assert_eq!(arch.groups.len(), 4);
        assert_eq!(arch.layers.len(), 19);
        assert_eq!(arch.group_layers("stage1").len(), 6);
        assert_eq!(arch.group_layers("stage4").len(), 3);
    }

    #[test]
    fn missing_group_reference_is_named() {
        let text = MINIMAL.replace("\"warehouse_group\": \"g\"", "\"warehouse_group\": \"nope\"");
        match parse_arch_spec(&text).unwrap_err() {
            PlanError::UnknownGroup { layer, group } => {
                assert_eq!(layer, "c1");
                assert_eq!(group, "nope");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duplicate_layer_id_rejected() {
        let text = MINIMAL.replace(
            "\"groups\"",
            r#""extra": null, "groups""#,
        );
        // unknown field -> syntax error with position
        match parse_arch_spec(&text).unwrap_err() {
            PlanError::Syntax { line, .. } => assert!(line > 0),
            other => panic!("unexpected error {other:?}"),
        }

        let dup = r#"{
            "layers": [
                { "id": "c1", "kernel": [4,2,3,3], "stride": 1, "kind": "standard", "warehouse_group": "g" },
                { "id": "c1", "kernel": [4,2,3,3], "stride": 1, "kind": "standard", "warehouse_group": "g" }
            ],
            "groups": [ { "name": "g", "cell_policy": "gcd" } ]
        }"#;
        assert!(matches!(
            parse_arch_spec(dup).unwrap_err(),
            PlanError::DuplicateLayerId(id) if id == "c1"
        ));
    }

    #[test]
    fn unknown_kind_is_a_syntax_error_with_line() {
        let text = MINIMAL.replace("standard", "mystery");
        match parse_arch_spec(&text).unwrap_err() {
            PlanError::Syntax { line, msg, .. } => {
                assert!(line >= 1);
                assert!(msg.contains("mystery"), "{msg}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn budget_accepts_ratio_string_and_number() {
        let a = parse_arch_spec(&MINIMAL.replace("\"1\"", "\"3/4\"")).unwrap();
        assert_eq!(a.budget_b.unwrap().to_f64(), 0.75);
        let b = parse_arch_spec(&MINIMAL.replace("\"1\"", "0.5")).unwrap();
        assert_eq!(b.budget_b.unwrap(), BudgetRatio::new(1, 2).unwrap());
        assert!(parse_arch_spec(&MINIMAL.replace("\"1\"", "-2")).is_err());
    }

    #[test]
    fn depthwise_requires_single_channel_kernels() {
        let text = MINIMAL.replace("standard", "depthwise");
        assert!(matches!(
            parse_arch_spec(&text).unwrap_err(),
            PlanError::InvalidLayer { .. }
        ));
        let ok = text.replace("[4, 2, 3, 3]", "[4, 1, 3, 3]");
        assert_eq!(parse_arch_spec(&ok).unwrap().layers[0].in_channels(), 4);
    }
}
