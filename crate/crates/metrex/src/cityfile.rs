//! The city file format: a versioned JSON document with a `regions` array
//! and sparse `flows` triples `[from, to, trips_per_day]`. Distances are
//! km, flows trips/day.

use std::path::Path;

use serde::{Deserialize, Serialize};

use metrex_core::city::{flows_from_triples, City, Region};

use crate::error::{CliError, CliResult};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CityDoc {
    format: u32,
    regions: Vec<RegionDoc>,
    flows: Vec<(usize, usize, f64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    initial_lines: Vec<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionDoc {
    id: usize,
    x_km: f64,
    y_km: f64,
    population: f64,
    poi: Vec<f64>,
}

pub fn save_city(city: &City, path: &Path) -> CliResult<()> {
    let regions = city
        .regions()
        .iter()
        .map(|r| RegionDoc {
            id: r.id,
            x_km: r.x,
            y_km: r.y,
            population: r.population,
            poi: r.poi.clone(),
        })
        .collect();
    let mut flows = Vec::new();
    let k = city.len();
    for i in 0..k {
        for j in 0..k {
            let f = city.flow(i, j);
            if i != j && f != 0.0 {
                flows.push((i, j, f));
            }
        }
    }
    let doc = CityDoc {
        format: 1,
        regions,
        flows,
        initial_lines: city.initial_lines().to_vec(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

pub fn load_city(path: &Path) -> CliResult<City> {
    let text = std::fs::read_to_string(path)?;
    let doc: CityDoc = serde_json::from_str(&text)?;
    if doc.format != 1 {
        return Err(CliError::Validation(format!(
            "unsupported city file format {}, expected 1",
            doc.format
        )));
    }
    let regions: Vec<Region> = doc
        .regions
        .into_iter()
        .map(|r| Region {
            id: r.id,
            x: r.x_km,
            y: r.y_km,
            population: r.population,
            poi: r.poi,
        })
        .collect();
    let k = regions.len();
    let flows = flows_from_triples(k, &doc.flows)?;
    let city = City::new(regions, flows)?;
    if doc.initial_lines.is_empty() {
        Ok(city)
    } else {
        Ok(city.with_initial_lines(doc.initial_lines)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use metrex_core::city::{generate_city, GenParams};

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("city.json");
        let city = generate_city(12, 5, &GenParams::default()).unwrap();
        save_city(&city, &path).unwrap();
        let back = load_city(&path).unwrap();
        assert_eq!(city, back);
    }

    #[test]
    fn negative_flow_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            r#"{"format":1,"regions":[
                {"id":0,"x_km":0,"y_km":0,"population":1,"poi":[]},
                {"id":1,"x_km":1,"y_km":0,"population":1,"poi":[]}],
                "flows":[[0,1,-1.0]]}"#,
        )
        .unwrap();
        match load_city(&path) {
            Err(CliError::Core(metrex_core::Error::Validation(msg))) => {
                assert!(msg.contains("-1"));
            }
            other => panic!("expected validation error, got {:?}", other),
        }
    }

    #[test]
    fn duplicate_region_id_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.json");
        std::fs::write(
            &path,
            r#"{"format":1,"regions":[
                {"id":0,"x_km":0,"y_km":0,"population":1,"poi":[]},
                {"id":0,"x_km":1,"y_km":0,"population":1,"poi":[]}],
                "flows":[]}"#,
        )
        .unwrap();
        assert!(load_city(&path).is_err());
    }

    #[test]
    fn malformed_json_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.json");
        std::fs::write(&path, "{\"format\":1,\n\"regions\": [oops]}").unwrap();
        match load_city(&path) {
            Err(CliError::Json(e)) => {
                let msg = e.to_string();
                assert!(msg.contains("line"), "missing location in: {}", msg);
            }
            other => panic!("expected parse error, got {:?}", other),
        }
    }

    #[test]
    fn initial_lines_roundtrip_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lines.json");
        let city = generate_city(12, 5, &GenParams::default())
            .unwrap()
            .with_initial_lines(vec![vec![0, 1, 2], vec![5, 6]])
            .unwrap();
        save_city(&city, &path).unwrap();
        let back = load_city(&path).unwrap();
        assert_eq!(back.initial_lines().len(), 2);
        // A line referencing a missing region fails validation.
        std::fs::write(
            &path,
            r#"{"format":1,"regions":[
                {"id":0,"x_km":0,"y_km":0,"population":1,"poi":[]},
                {"id":1,"x_km":1,"y_km":0,"population":1,"poi":[]}],
                "flows":[],"initial_lines":[[0,7]]}"#,
        )
        .unwrap();
        assert!(load_city(&path).is_err());
    }
}
