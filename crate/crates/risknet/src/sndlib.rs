//! Reader for the SNDLib native text format (NODES and LINKS sections).
//!
//! Node names are mapped to dense router ids in order of appearance. Link
//! lengths are derived from the node coordinates: great-circle kilometers
//! when the coordinates look like (longitude, latitude), plain Euclidean
//! distance otherwise, floored at 1 km either way. Backup capacities start
//! at zero; provisioning fills them in later. DEMANDS and all other
//! sections are ignored.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::topology::{Link, Topology};

const EARTH_RADIUS_KM: f64 = 6371.0;

/// Parses an SNDLib native document into a [`Topology`].
pub fn import_sndlib(text: &str) -> Result<Topology> {
    let mut node_names: Vec<String> = Vec::new();
    let mut node_index: HashMap<String, usize> = HashMap::new();
    let mut coords: Vec<(f64, f64)> = Vec::new();
    let mut raw_links: Vec<(usize, usize, usize)> = Vec::new(); // (a, b, line_no)
    let mut seen_pairs: HashMap<(usize, usize), usize> = HashMap::new();

    #[derive(PartialEq)]
    enum Section {
        None,
        Nodes,
        Links,
        Other,
    }
    let mut section = Section::None;
    let mut saw_nodes = false;
    let mut saw_links = false;

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with('?') {
            continue;
        }
        if section == Section::None {
            if let Some(name) = line.strip_suffix('(').map(str::trim) {
                section = match name {
                    "NODES" => {
                        saw_nodes = true;
                        Section::Nodes
                    }
                    "LINKS" => {
                        saw_links = true;
                        Section::Links
                    }
                    _ => Section::Other,
                };
                continue;
            }
            return Err(Error::parse(line_no, format!("expected a section header, got {line:?}")));
        }
        if line == ")" {
            section = Section::None;
            continue;
        }
        match section {
            Section::Nodes => {
                let (name, x, y) = parse_node_line(line, line_no)?;
                if node_index.contains_key(&name) {
                    return Err(Error::parse(line_no, format!("duplicate node {name:?}")));
                }
                node_index.insert(name.clone(), node_names.len());
                node_names.push(name);
                coords.push((x, y));
            }
            Section::Links => {
                let (a_name, b_name) = parse_link_line(line, line_no)?;
                let a = *node_index
                    .get(&a_name)
                    .ok_or_else(|| Error::parse(line_no, format!("unknown node {a_name:?}")))?;
                let b = *node_index
                    .get(&b_name)
                    .ok_or_else(|| Error::parse(line_no, format!("unknown node {b_name:?}")))?;
                if a == b {
                    return Err(Error::parse(line_no, "self-loop link"));
                }
                let key = (a.min(b), a.max(b));
                if let Some(first) = seen_pairs.insert(key, line_no) {
                    return Err(Error::parse(
                        line_no,
                        format!("duplicate link between {a_name:?} and {b_name:?} (first at line {first})"),
                    ));
                }
                raw_links.push((a, b, line_no));
            }
            Section::Other => {}
            Section::None => unreachable!(),
        }
    }

    if !saw_nodes {
        return Err(Error::parse(0, "missing NODES section"));
    }
    if !saw_links {
        return Err(Error::parse(0, "missing LINKS section"));
    }
    if node_names.is_empty() {
        return Err(Error::parse(0, "NODES section is empty"));
    }

    let geographic = coords
        .iter()
        .all(|&(x, y)| (-180.0..=180.0).contains(&x) && (-90.0..=90.0).contains(&y));
    let links = raw_links
        .iter()
        .enumerate()
        .map(|(id, &(a, b, _))| {
            let d = if geographic {
                great_circle_km(coords[a], coords[b])
            } else {
                let (ax, ay) = coords[a];
                let (bx, by) = coords[b];
                ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
            };
            Link { id, a, b, length_km: d.max(1.0), backup_capacity: 0.0 }
        })
        .collect();
    Topology::new(node_names.len(), links)
}

/// `name ( x y )`
fn parse_node_line(line: &str, line_no: usize) -> Result<(String, f64, f64)> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != 5 || toks[1] != "(" || toks[4] != ")" {
        return Err(Error::parse(line_no, format!("malformed node line {line:?}")));
    }
    let x: f64 = toks[2]
        .parse()
        .map_err(|_| Error::parse(line_no, format!("bad coordinate {:?}", toks[2])))?;
    let y: f64 = toks[3]
        .parse()
        .map_err(|_| Error::parse(line_no, format!("bad coordinate {:?}", toks[3])))?;
    Ok((toks[0].to_string(), x, y))
}

/// `name ( nodeA nodeB ) ...` — everything after the endpoint group is ignored.
fn parse_link_line(line: &str, line_no: usize) -> Result<(String, String)> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() < 5 || toks[1] != "(" || toks[4] != ")" {
        return Err(Error::parse(line_no, format!("malformed link line {line:?}")));
    }
    Ok((toks[2].to_string(), toks[3].to_string()))
}

/// Haversine distance between (lon, lat) points, in kilometers.
fn great_circle_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lon1, lat1) = (a.0.to_radians(), a.1.to_radians());
    let (lon2, lat2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().asin()
}

#[cfg(test)]
mod tests {
    use super::*;

    const ABILENE: &str = include_str!("../tests/data/abilene.txt");

    #[test]
    fn minimal_two_node_document() {
        let doc = "NODES (\n a ( 0.0 0.0 )\n b ( 1.0 1.0 )\n)\nLINKS (\n l1 ( a b ) 0 0 0 ( 1 1 )\n)\n";
        let t = import_sndlib(doc).unwrap();
        assert_eq!(t.n_routers(), 2);
        assert_eq!(t.n_links(), 1);
    }

    #[test]
    fn missing_links_section_is_error() {
        let doc = "NODES (\n a ( 0.0 0.0 )\n b ( 1.0 1.0 )\n)\n";
        let err = import_sndlib(doc).unwrap_err();
        assert!(err.to_string().contains("LINKS"), "{err}");
    }

    #[test]
    fn duplicate_link_names_line() {
        let doc = "NODES (\n a ( 0.0 0.0 )\n b ( 1.0 1.0 )\n)\nLINKS (\n l1 ( a b ) 0\n l2 ( b a ) 0\n)\n";
        let err = import_sndlib(doc).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 7, .. }), "{err}");
    }

    #[test]
    fn unparseable_line_names_line() {
        let doc = "NODES (\n a ( 0.0 )\n)\nLINKS (\n)\n";
        let err = import_sndlib(doc).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn abilene_counts() {
        let t = import_sndlib(ABILENE).unwrap();
        assert_eq!(t.n_routers(), 12);
        assert_eq!(t.n_links(), 15);
    }

    #[test]
    fn abilene_lengths_are_great_circle() {
        let t = import_sndlib(ABILENE).unwrap();
        // NYCMng (-73.9667, 40.7833) <-> WASHng (-77.026842, 38.897303):
        // roughly 330 km apart on the ground.
        let link = t
            .links()
            .iter()
            .find(|l| {
                let (a, b) = (l.a.min(l.b), l.a.max(l.b));
                (a, b) == (8, 11)
            })
            .unwrap();
        assert!(
            (250.0..450.0).contains(&link.length_km),
            "NYC-Washington length {} km",
            link.length_km
        );
        for l in t.links() {
            assert!(l.length_km >= 1.0);
            assert_eq!(l.backup_capacity, 0.0);
        }
    }
}
