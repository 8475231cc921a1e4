mod common;

use common::{first_difference, golden, molecule_bond_prompts, normalize_shuffle};

#[test]
fn molecule_bond_prompts_match_golden_files() {
    for (name, prompt) in molecule_bond_prompts() {
        let diff = first_difference(&normalize_shuffle(&golden(name)), &normalize_shuffle(&prompt));
        assert!(diff.is_none(), "{name}: {}\n---\n{prompt}", diff.unwrap());
    }
}

#[test]
fn shuffle_changes_only_order() {
    use mcs_sql::bench_data::{load_benchmark, Split};
    use mcs_sql::linking::build_table_prompt;

    let bench = load_benchmark(&common::desk_dir().join("benchmark"), Split::Dev).unwrap();
    let ex = bench.example("2").unwrap();
    let schema = bench.schema("toxicology").unwrap();
    let prompts: Vec<String> = (0..8).map(|s| build_table_prompt(schema, &ex.question, ex.evidence(), s)).collect();
    assert!(prompts.iter().any(|p| p != &prompts[0]), "no seed changed the table order");
    for p in &prompts {
        assert_eq!(normalize_shuffle(p), normalize_shuffle(&prompts[0]));
    }
}
