use std::path::{Path, PathBuf};

use rusqlite::Connection;

use crate::bench_data::{BenchmarkExample, ColumnDef, ColumnRef, DbSchema, Difficulty, ForeignKey, TableDef};

fn col(name: &str, desc: &str) -> ColumnDef {
    ColumnDef {
        name: name.into(),
        declared_type: "TEXT".into(),
        description: desc.into(),
    }
}

fn fk(a: &str, b: &str, c: &str, d: &str) -> ForeignKey {
    ForeignKey {
        from: ColumnRef { table: a.into(), column: b.into() },
        to: ColumnRef { table: c.into(), column: d.into() },
    }
}

pub(crate) fn toxicology_schema() -> DbSchema {
    DbSchema::new(
        "toxicology",
        vec![
            TableDef {
                name: "molecule".into(),
                columns: vec![
                    col("molecule_id", "unique id of molecule"),
                    col("label", "whether this molecule is carcinogenic or not"),
                ],
            },
            TableDef {
                name: "connected".into(),
                columns: vec![col("atom_id", ""), col("atom_id2", ""), col("bond_id", "")],
            },
            TableDef {
                name: "bond".into(),
                columns: vec![
                    col("bond_id", "unique id representing bonds"),
                    col("molecule_id", "identifying the molecule in which the bond appears"),
                    col("bond_type", "type of the bond"),
                ],
            },
            TableDef {
                name: "atom".into(),
                columns: vec![col("atom_id", ""), col("molecule_id", ""), col("element", "")],
            },
        ],
        vec![
            fk("atom", "molecule_id", "molecule", "molecule_id"),
            fk("bond", "molecule_id", "molecule", "molecule_id"),
            fk("connected", "bond_id", "bond", "bond_id"),
            fk("connected", "atom_id2", "atom", "atom_id"),
            fk("connected", "atom_id", "atom", "atom_id"),
        ],
    )
    .unwrap()
}

pub(crate) fn toxicology_db(dir: &Path) -> PathBuf {
    let path = dir.join("toxicology.sqlite");
    let conn = Connection::open(&path).unwrap();
    conn.execute_batch(
        "CREATE TABLE molecule (molecule_id TEXT PRIMARY KEY, label TEXT);
         CREATE TABLE connected (atom_id TEXT, atom_id2 TEXT, bond_id TEXT);
         CREATE TABLE bond (bond_id TEXT PRIMARY KEY, molecule_id TEXT, bond_type TEXT);
         CREATE TABLE atom (atom_id TEXT PRIMARY KEY, molecule_id TEXT, element TEXT);
         INSERT INTO molecule VALUES ('TR000','+'),('TR001','+'),('TR002','-'),('TR003','-');
         INSERT INTO bond VALUES ('TR000_1_2','TR000','-'),('TR000_2_3','TR000','-'),('TR000_2_4','TR000','-'),
                                 ('TR001_1_2','TR001','#'),('TR002_1_2','TR002','='),('TR003_1_2','TR003','-');
         INSERT INTO atom VALUES ('TR000_1','TR000','cl'),('TR000_2','TR000','c'),('TR001_1','TR001','c');
         INSERT INTO connected VALUES ('TR000_1','TR000_2','TR000_1_2');",
    )
    .unwrap();
    path
}

pub(crate) fn example(id: &str, question: &str, evidence: Option<&str>, gold: &str) -> BenchmarkExample {
    BenchmarkExample {
        example_id: id.into(),
        db_id: "toxicology".into(),
        question: question.into(),
        evidence: evidence.map(Into::into),
        gold_sql: gold.into(),
        difficulty: Difficulty::Simple,
    }
}

pub(crate) const TRIPLE_BOND_QUESTION: &str =
    "Among all chemical compounds identified in the database, what percent of compounds form a triple-bond.";
pub(crate) const TRIPLE_BOND_EVIDENCE: &str = "triple bond refers to bond_type = '#';";
