#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mcs_sql::exec::{normalize_and_fingerprint, Cell, ResultSemantics};
use mcs_sql::{CandidateQuery, ExecStatus, ExecutionOutcome, RunConfig};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

pub fn desk_dir() -> PathBuf {
    workspace_root().join("fixtures/desk")
}

pub fn desk_config() -> RunConfig {
    RunConfig::from_file(&desk_dir().join("config.json")).unwrap()
}

pub fn desk_expected() -> serde_json::Value {
    let text = std::fs::read_to_string(desk_dir().join("expected.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

pub fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    let text = std::fs::read_to_string(path).unwrap();
    text.strip_suffix('\n').unwrap_or(&text).to_string()
}

/// Puts schema lines in a canonical order so prompts rendered under
/// different shuffles compare equal: runs of `# table ( ... )` lines and
/// runs of `# a.b = c.d` lines are sorted, as are the columns inside
/// each table line.
pub fn normalize_shuffle(prompt: &str) -> String {
    let is_table = |l: &str| l.starts_with("# ") && l.contains(" ( ") && l.ends_with(" )");
    let is_fk = |l: &str| l.starts_with("# ") && l.contains(" = ") && !l.contains('(');
    let canon_table = |l: &str| {
        let open = l.find(" ( ").unwrap();
        let mut cols: Vec<&str> = l[open + 3..l.len() - 2].split(", ").collect();
        cols.sort_unstable();
        format!("{}( {} )", &l[..open + 1], cols.join(", "))
    };
    let lines: Vec<&str> = prompt.split('\n').collect();
    let mut out = Vec::with_capacity(lines.len());
    let mut i = 0;
    while i < lines.len() {
        let kind: Option<&dyn Fn(&str) -> bool> = if is_table(lines[i]) {
            Some(&is_table)
        } else if is_fk(lines[i]) {
            Some(&is_fk)
        } else {
            None
        };
        match kind {
            Some(pred) => {
                let mut run = Vec::new();
                while i < lines.len() && pred(lines[i]) {
                    run.push(if is_table(lines[i]) { canon_table(lines[i]) } else { lines[i].to_string() });
                    i += 1;
                }
                run.sort();
                out.extend(run);
            }
            None => {
                out.push(lines[i].to_string());
                i += 1;
            }
        }
    }
    out.join("\n")
}

/// One synthetic candidate pool: group id per candidate (`None` for a
/// failed execution) plus the generated queries and outcomes.
pub struct SyntheticPool {
    pub groups: Vec<Option<usize>>,
    pub times: Vec<f64>,
    pub candidates: Vec<CandidateQuery>,
    pub outcomes: Vec<ExecutionOutcome>,
}

pub fn group_fingerprint(g: usize) -> mcs_sql::ResultFingerprint {
    normalize_and_fingerprint(&[vec![Cell::Int(g as i64), Cell::Text(format!("g{g}"))]], ResultSemantics::Multiset)
}

pub fn pool_from_groups(groups: &[Option<usize>], times: &[f64]) -> SyntheticPool {
    let mut candidates = Vec::new();
    let mut outcomes = Vec::new();
    for (i, (g, t)) in groups.iter().zip(times).enumerate() {
        candidates.push(CandidateQuery {
            sql: format!("SELECT {i}"),
            prompt_index: i / 20,
            sample_index: i % 20,
            reasoning: String::new(),
        });
        outcomes.push(match g {
            Some(g) => ExecutionOutcome {
                status: ExecStatus::Ok,
                fingerprint: Some(group_fingerprint(*g)),
                row_count: Some(1),
                exec_time_ms: Some(*t),
                error: None,
            },
            None => ExecutionOutcome {
                status: ExecStatus::RuntimeError,
                fingerprint: None,
                row_count: None,
                exec_time_ms: None,
                error: Some("no such table".into()),
            },
        });
    }
    SyntheticPool {
        groups: groups.to_vec(),
        times: times.to_vec(),
        candidates,
        outcomes,
    }
}

pub fn random_pool(rng: &mut ChaCha8Rng) -> SyntheticPool {
    let size = rng.random_range(1..=200);
    let n_groups = rng.random_range(1..=size.min(30));
    let error_rate = rng.random_range(0.0..0.3);
    let mut groups = Vec::with_capacity(size);
    let mut times = Vec::with_capacity(size);
    for _ in 0..size {
        groups.push(if rng.random::<f64>() < error_rate {
            None
        } else {
            Some(rng.random_range(0..n_groups))
        });
        // Coarse times so equal times, and with them the tie-break, occur.
        times.push(rng.random_range(1..40) as f64 * 0.25);
    }
    pool_from_groups(&groups, &times)
}

pub fn random_pools(count: usize, seed: u64) -> Vec<SyntheticPool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_pool(&mut rng)).collect()
}

/// Group sizes and minimum times computed directly from a pool's plan.
pub fn group_stats(pool: &SyntheticPool) -> BTreeMap<usize, (usize, f64)> {
    let mut stats: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for (g, t) in pool.groups.iter().zip(&pool.times) {
        if let Some(g) = g {
            let e = stats.entry(*g).or_insert((0, f64::INFINITY));
            e.0 += 1;
            e.1 = e.1.min(*t);
        }
    }
    stats
}

/// Query pairs over the desk databases with the expected verdict:
/// `true` when both must produce the same result.
pub const EQUIVALENCE_SUITE: &[(&str, &str, &str, bool)] = &[
    ("toxicology", "SELECT molecule_id FROM molecule", "SELECT molecule_id FROM molecule ORDER BY molecule_id DESC", true),
    ("toxicology", "SELECT bond_id, bond_type FROM bond", "SELECT bond_id, bond_type FROM bond ORDER BY bond_type, bond_id", true),
    ("toxicology", "SELECT bond_id, bond_type FROM bond", "SELECT bond_type, bond_id FROM bond", false),
    ("toxicology", "SELECT T1.label, T2.bond_type FROM molecule AS T1 JOIN bond AS T2 ON T1.molecule_id = T2.molecule_id",
        "SELECT T1.label, T2.bond_type FROM bond AS T2 JOIN molecule AS T1 ON T2.molecule_id = T1.molecule_id", true),
    ("toxicology", "SELECT molecule_id FROM molecule", "SELECT molecule_id, label FROM molecule", false),
    ("toxicology", "SELECT molecule_id FROM molecule WHERE label = '+'", "SELECT molecule_id FROM molecule WHERE label = '-'", false),
    ("toxicology", "SELECT molecule_id FROM molecule WHERE label = '+'", "SELECT molecule_id FROM molecule WHERE label IN ('+')", true),
    ("toxicology", "SELECT COUNT(*) FROM bond", "SELECT COUNT(bond_id) FROM bond", true),
    ("toxicology", "SELECT COUNT(*) FROM bond", "SELECT COUNT(DISTINCT molecule_id) FROM bond", false),
    ("toxicology", "SELECT molecule_id FROM bond", "SELECT DISTINCT molecule_id FROM bond", false),
    ("toxicology", "SELECT DISTINCT molecule_id FROM bond", "SELECT molecule_id FROM bond GROUP BY molecule_id", true),
    ("toxicology", "SELECT CAST(SUM(bond_type = '#') AS REAL) * 100 / COUNT(*) FROM bond",
        "SELECT CAST(COUNT(CASE WHEN bond_type = '#' THEN 1 END) AS REAL) * 100 / COUNT(bond_id) FROM bond", true),
    ("toxicology", "SELECT element FROM atom WHERE molecule_id = 'TR000'", "SELECT element FROM atom WHERE molecule_id = 'TR001'", false),
    ("toxicology", "SELECT atom_id FROM atom WHERE element = 'c' AND molecule_id = 'TR000'",
        "SELECT atom_id FROM atom WHERE molecule_id = 'TR000' AND element = 'c'", true),
    ("formula_1", "SELECT forename, surname FROM drivers WHERE nationality = 'German'",
        "SELECT forename, surname FROM drivers WHERE nationality = 'German' ORDER BY surname DESC", true),
    ("formula_1", "SELECT forename, surname FROM drivers", "SELECT surname, forename FROM drivers", false),
    ("formula_1", "SELECT MIN(year) FROM races", "SELECT year FROM races ORDER BY year LIMIT 1", true),
    ("formula_1", "SELECT MIN(year) FROM races", "SELECT MAX(year) FROM races", false),
    ("formula_1", "SELECT T1.surname FROM drivers AS T1 JOIN results AS T2 ON T1.driverId = T2.driverId WHERE T2.raceId = 1",
        "SELECT surname FROM drivers WHERE driverId IN (SELECT driverId FROM results WHERE raceId = 1)", true),
    ("formula_1", "SELECT COUNT(*) FROM drivers WHERE nationality = 'Finnish'", "SELECT COUNT(*) FROM drivers", false),
    ("formula_1", "SELECT driverId FROM drivers", "SELECT driverId FROM drivers UNION ALL SELECT driverId FROM drivers WHERE 0", true),
    ("formula_1", "SELECT driverId FROM results", "SELECT driverId FROM results UNION SELECT driverId FROM results", false),
    ("formula_1", "SELECT 1.0", "SELECT 1", true),
    ("formula_1", "SELECT NULL", "SELECT ''", false),
];

/// The five prompts of the molecule/bond example, rendered from the desk
/// fixture: (golden file name, prompt).
pub fn molecule_bond_prompts() -> Vec<(&'static str, String)> {
    use std::collections::BTreeSet;

    use mcs_sql::bench_data::{load_benchmark, Split};
    use mcs_sql::fewshot::{build_mask_prompt, FewShotItem};
    use mcs_sql::generate::{build_generation_prompt, ExampleContext};
    use mcs_sql::linking::{build_column_prompt, build_table_prompt};
    use mcs_sql::select::build_mcs_prompt;
    use mcs_sql::{FewShotList, LinkedSchema};

    let bench = load_benchmark(&desk_dir().join("benchmark"), Split::Dev).unwrap();
    let ex = bench.example("2").unwrap();
    let schema = bench.schema("toxicology").unwrap();
    let db_path = bench.db_path("toxicology").unwrap();
    let tables: BTreeSet<String> = ["molecule".to_string(), "bond".to_string()].into();
    let linked = LinkedSchema::from_tables(schema, &tables);
    let ctx = ExampleContext {
        example: ex,
        schema,
        linked: &linked,
        db_path,
    };
    let fewshot = FewShotList {
        variant_index: 0,
        recipe: "question".into(),
        items: vec![
            FewShotItem {
                example_id: "a".into(),
                question: "Among all the customers, what is the percentage of the customer's nation being Germany?".into(),
                evidence: Some("DIVIDE(COUNT(c_custkey when n_name = 'GERMANY'), COUNT(c_custkey)) as percentage;".into()),
                gold_sql: "SELECT CAST(SUM(IIF(T2.n_name = 'GERMANY', 1, 0)) AS REAL) * 100 / COUNT(T1.c_custkey) FROM customer AS T1 INNER JOIN nation AS T2 ON T1.c_nationkey = T2.n_nationkey".into(),
            },
            FewShotItem {
                example_id: "b".into(),
                question: "Among the schools whose donators are teachers, what is the percentage of schools that are in Brooklyn?".into(),
                evidence: Some("donors are teachers refers to is_teacher_acct = 't'; Brooklyn is school_city; percentage = Divide(Count(school_city-'Brooklyn'),Count(school_city))*100".into()),
                gold_sql: "SELECT CAST(SUM(CASE WHEN T1.school_city LIKE 'Brooklyn' THEN 1 ELSE 0 END) AS REAL) * 100 / COUNT(T1.teacher_acctid) FROM projects AS T1 INNER JOIN donations AS T2 ON T1.projectid = T2.projectid WHERE T2.is_teacher_acct = 't'".into(),
            },
        ],
    };
    let candidates = [
        "SELECT CAST(COUNT(CASE WHEN bond_type = '#' THEN 1 ELSE NULL END) AS REAL) * 100 / COUNT(*) FROM bond".to_string(),
        "SELECT CAST(COUNT(DISTINCT CASE WHEN bond_type = '#' THEN molecule_id ELSE NULL END) AS REAL) * 100\n  / COUNT(DISTINCT molecule_id) FROM bond".to_string(),
    ];
    vec![
        ("table_link.txt", build_table_prompt(schema, &ex.question, ex.evidence(), 17)),
        ("column_link.txt", build_column_prompt(schema, &tables, &ex.question, ex.evidence(), 17)),
        ("mask.txt", build_mask_prompt(schema, Some(&linked), &ex.question, ex.evidence())),
        ("generate.txt", build_generation_prompt(&ctx, &fewshot, 3).unwrap()),
        ("select.txt", build_mcs_prompt(&candidates, &ctx, &fewshot, 3).unwrap()),
    ]
}

/// Line-level diff summary, empty when equal.
pub fn first_difference(expected: &str, actual: &str) -> Option<String> {
    let (e, a): (Vec<&str>, Vec<&str>) = (expected.split('\n').collect(), actual.split('\n').collect());
    for i in 0..e.len().max(a.len()) {
        if e.get(i) != a.get(i) {
            return Some(format!("line {}: expected {:?}, got {:?}", i + 1, e.get(i), a.get(i)));
        }
    }
    None
}
