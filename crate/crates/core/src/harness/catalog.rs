//! Formula catalogs used by the tests and the acceptance suite.

use serde_json::json;

use crate::logic::{Formula, GnfQuery, QuerySpec};

/// Tree-signature formulas over labels `a`, `b`, with their free-variable
/// order (parameters first, output last).
pub fn tree_formulas() -> Vec<(Formula, Vec<String>)> {
    let items: &[(&str, &[&str])] = &[
        (r#"["P_b","y"]"#, &["x", "y"]),
        (r#"["or",["P_b","y"],["P_b","x"]]"#, &["x", "y"]),
        (r#"["=","x","y"]"#, &["x", "y"]),
        (r#"["exists","z",["and",["P_b","z"],["anc","z","y"]]]"#, &["x", "y"]),
        (r#"["exists","z",["S1","y","z"]]"#, &["x", "y"]),
        (r#"["forall","z",["implies",["anc","z","y"],["P_a","z"]]]"#, &["x", "y"]),
        (r#"["exists-set","X",["and",["X","y"],["forall","u",["implies",["X","u"],["P_b","u"]]]]]"#, &["x", "y"]),
        (r#"["or",["P_b","x1"],["P_b","x2"],["P_b","y"]]"#, &["x1", "x2", "y"]),
        (r#"["or",["=","x1","y"],["P_b","y"]]"#, &["x1", "x2", "y"]),
        (r#"["anc","x","y"]"#, &["x", "y"]),
        (r#"["S2","x","y"]"#, &["x", "y"]),
        (r#"["iff",["P_b","x1"],["P_b","y"]]"#, &["x1", "x2", "y"]),
        (
            r#"["exists-set","X",["and",["X","x"],["not",["X","y"]],["forall",["u","v"],["implies",["and",["X","u"],["S1","u","v"]],["X","v"]]]]]"#,
            &["x", "y"],
        ),
    ];
    items
        .iter()
        .map(|(f, vars)| {
            (
                Formula::from_json(f).expect("catalog formula parses"),
                vars.iter().map(|v| v.to_string()).collect(),
            )
        })
        .collect()
}

/// Unary queries over graphs with symmetric `E`.
pub fn mso_queries() -> Vec<QuerySpec> {
    let items = [
        json!({"r": 1, "formula": ["E", "x", "y"]}),
        json!({"r": 1, "formula": ["dist<=", "x", "y", 2]}),
        json!({"r": 0, "formula": ["exists", "z", ["and", ["E", "y", "z"], ["forall", "u", ["implies", ["E", "z", "u"], ["=", "u", "y"]]]]]}),
        json!({"r": 2, "formula": ["and", ["E", "x1", "y"], ["E", "x2", "y"]]}),
        // y is a neighbour of x and x's neighbourhood splits into two independent sets, y in the first
        json!({"r": 1, "formula": ["exists-set-within", "X", "w", ["E", "x", "w"],
            ["and", ["X", "y"],
                ["forall", ["u", "v"], ["implies", ["and", ["X", "u"], ["X", "v"]], ["not", ["E", "u", "v"]]]],
                ["forall", ["u", "v"], ["implies",
                    ["and", ["E", "x", "u"], ["not", ["X", "u"]], ["E", "x", "v"], ["not", ["X", "v"]]],
                    ["not", ["E", "u", "v"]]]]]]}),
    ];
    items
        .iter()
        .map(|v| QuerySpec::from_json(&v.to_string()).expect("catalog query parses"))
        .collect()
}

/// Parameterless query selecting every non-isolated element.
pub fn has_neighbour() -> QuerySpec {
    QuerySpec::from_json(r#"{"r": 0, "formula": ["exists", "z", ["E", "y", "z"]]}"#).expect("query parses")
}

/// Gaifman-normal-form packages with radius at most 1 and one parameter.
pub fn gnf_queries() -> Vec<GnfQuery> {
    let items = [
        json!({"r": 1, "rho": 1, "locals": [["E", "x", "y"]]}),
        json!({"r": 1, "rho": 1,
            "locals": [["exists", ["z", "u"], ["and", ["E", "y", "z"], ["E", "y", "u"], ["not", ["=", "z", "u"]]]],
                       ["dist<=", "x", "y", 1]],
            "combiner": ["and", ["slot", 1], ["not", ["slot", 2]]]}),
        json!({"r": 1, "rho": 1, "locals": [["exists", "z", ["and", ["E", "x", "z"], ["E", "z", "y"]]]]}),
        json!({"r": 1, "rho": 1,
            "locals": [["dist<=", "x", "y", 1]],
            "sentences": [["exists", ["u", "v"], ["E", "u", "v"]]],
            "combiner": ["and", ["not", ["slot", 1]], ["slot", 2]]}),
    ];
    items
        .iter()
        .map(|v| GnfQuery::from_value(v).expect("catalog package parses"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalogs_parse() {
        assert!(tree_formulas().len() >= 10);
        assert_eq!(mso_queries().len(), 5);
        assert!(mso_queries().iter().all(|q| q.r() <= 2));
        assert!(gnf_queries().iter().all(|g| g.r == 1 && g.rho <= 1));
    }
}
