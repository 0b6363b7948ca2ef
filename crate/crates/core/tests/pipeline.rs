//! File round trips and end-to-end pipelines through the public API.

use relmark::harness::acceptance::{city_query, employee_table};
use relmark::harness::catalog::gnf_queries;
use relmark::harness::{generate, Generator};
use relmark::logic::QuerySpec;
use relmark::scheme_fo::{band_plan, build_plan_fo, FoOptions};
use relmark::scheme_mso::{
    detect, embed, parse_mark, plan_mso, record_answers, AnswerFile, AnswerOracle, MsoOptions, Plan, PlanStrategy,
};
use relmark::structures::WeightedStructure;
use relmark::Error;

fn direct() -> MsoOptions {
    MsoOptions {
        strategy: PlanStrategy::Direct,
        ..MsoOptions::default()
    }
}

#[test]
fn structure_json_round_trips() {
    let s = employee_table();
    let back = WeightedStructure::from_json(&s.to_json()).unwrap();
    assert!(back.same_by_ids(&s));
    assert_eq!(back.weights(), s.weights());
}

#[test]
fn plan_json_round_trips() {
    let s = employee_table();
    let plan = plan_mso(&s, &city_query(), &direct()).unwrap();
    let back = Plan::from_json(&plan.to_json(&s), &s).unwrap();
    assert_eq!(back.to_json(&s), plan.to_json(&s));
}

#[test]
fn answers_file_detects_offline() {
    let s = employee_table();
    let plan = plan_mso(&s, &city_query(), &direct()).unwrap();
    let bits = parse_mark("01").unwrap();
    let marked = s.with_weights(embed(&s, &plan, &bits).unwrap().weights());
    let file = record_answers(&plan, &marked).unwrap();
    let text = serde_json::to_string(&file).unwrap();
    let file: AnswerFile = serde_json::from_str(&text).unwrap();
    let oracle = AnswerOracle::new(&file, &s).unwrap();
    assert_eq!(detect(&s, &plan, &oracle, None).unwrap(), bits);
}

#[test]
fn overlong_mark_is_rejected() {
    let s = employee_table();
    let plan = plan_mso(&s, &city_query(), &direct()).unwrap();
    let err = embed(&s, &plan, &parse_mark("101").unwrap()).unwrap_err();
    assert!(matches!(err, Error::MarkTooLong { len: 3, capacity: 2 }));
}

#[test]
fn mso_query_spec_round_trips() {
    let q = city_query();
    assert_eq!(QuerySpec::from_json(&q.to_json()).unwrap(), q);
}

#[test]
fn fo_plan_carries_band_data() {
    let s = generate(Generator::Grid, 60, 5).unwrap();
    let plan = build_plan_fo(&s, &gnf_queries()[0], &FoOptions::default()).unwrap();
    let b = band_plan(&plan).unwrap();
    assert_eq!(b.theta, 6);
    assert_eq!(b.uc, plan.capacity.candidates);
    let back = Plan::from_json(&plan.to_json(&s), &s).unwrap();
    assert_eq!(band_plan(&back), Some(b));
}
