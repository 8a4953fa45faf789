#![allow(dead_code)]

use std::path::Path;

use namedis::records::{write_records, RawRecord};

fn rec(id: usize, year: i32, who: &str, coauthors: &[&str], title: &str, venue: &str) -> RawRecord {
    RawRecord {
        id: format!("r{id}"),
        name_ref: "Wei Wang".into(),
        year,
        coauthors: coauthors.iter().map(|s| s.to_string()).collect(),
        title: title.into(),
        venue: venue.into(),
        true_label: Some(who.into()),
    }
}

/// Two authors with several papers each in 2001..=2004, then a stream in
/// 2005..=2006 that adds a third author.
pub fn records() -> Vec<RawRecord> {
    let mut out = Vec::new();
    let db = ["Jiawei Han", "Jian Pei", "Philip Yu"];
    let cv = ["Li Fei-Fei", "Pietro Perona", "Andrew Zisserman"];
    let bio = ["Eric Lander", "David Haussler"];
    let mut id = 0;
    for year in 2001..=2006 {
        for k in 0..3 {
            out.push(rec(
                id,
                year,
                "A",
                &[db[k], db[(k + 1) % 3]],
                "frequent pattern mining in databases",
                "SIGMOD",
            ));
            id += 1;
            out.push(rec(
                id,
                year,
                "B",
                &[cv[k], cv[(k + 2) % 3]],
                "object recognition in images",
                "CVPR",
            ));
            id += 1;
        }
        if year >= 2005 {
            for who in bio {
                out.push(rec(id, year, "C", &[who], "genome sequence assembly", "RECOMB"));
                id += 1;
            }
        }
    }
    out
}

pub fn write_dataset(path: &Path) {
    let f = std::fs::File::create(path).unwrap();
    write_records(std::io::BufWriter::new(f), &records()).unwrap();
}
