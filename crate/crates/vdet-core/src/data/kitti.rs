//! Label-file parsing: one object per line, 15+ whitespace-separated fields
//! (type, truncated, occluded, alpha, bbox x4, dimensions x3, location x3,
//! rotation_y). Only type, truncated, occluded, and the bbox are consumed.

use super::{Annotation, DataError};
use crate::boxes::Box2;

pub const DONT_CARE: &str = "DontCare";

pub fn parse_kitti_labels(text: &str) -> Result<Vec<Annotation>, DataError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 15 {
            return Err(DataError::Parse {
                line: lineno,
                msg: format!("expected at least 15 fields, found {}", fields.len()),
            });
        }
        let num = |idx: usize, what: &str| -> Result<f64, DataError> {
            fields[idx].parse().map_err(|_| DataError::Parse {
                line: lineno,
                msg: format!("bad {what} value {:?}", fields[idx]),
            })
        };
        // DontCare rows conventionally carry -1 in both attribute fields;
        // -1 occlusion maps to "unknown" (3)
        let truncated = num(1, "truncated")?.max(0.0);
        let occluded_f = num(2, "occluded")?;
        let occluded = if occluded_f == -1.0 { 3 } else { occluded_f as i64 };
        if occluded_f.fract() != 0.0 || !(0..=3).contains(&occluded) {
            return Err(DataError::Parse {
                line: lineno,
                msg: format!("occluded must be one of -1, 0..3, found {:?}", fields[2]),
            });
        }
        let bbox = Box2::new(num(4, "left")?, num(5, "top")?, num(6, "right")?, num(7, "bottom")?);
        if !bbox.is_valid() {
            return Err(DataError::Parse {
                line: lineno,
                msg: format!("degenerate box {bbox:?}"),
            });
        }
        let class_name = fields[0].to_string();
        let dont_care = class_name == DONT_CARE;
        out.push(Annotation {
            class_name,
            class: None,
            truncated,
            occluded: occluded as u8,
            bbox,
            dont_care,
        });
    }
    Ok(out)
}

/// Writes annotations back in label-file form. Unconsumed fields are filled
/// with the conventional placeholders.
pub fn serialize_kitti_labels(annotations: &[Annotation]) -> String {
    let mut out = String::new();
    for a in annotations {
        out.push_str(&format!(
            "{} {:.2} {} -10.00 {:.2} {:.2} {:.2} {:.2} 0.00 0.00 0.00 0.00 0.00 0.00 0.00\n",
            a.class_name, a.truncated, a.occluded, a.bbox.left, a.bbox.top, a.bbox.right, a.bbox.bottom,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str =
        "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59";

    #[test]
    fn parses_reference_line() {
        let anns = parse_kitti_labels(SAMPLE).unwrap();
        assert_eq!(anns.len(), 1);
        let a = &anns[0];
        assert_eq!(a.class_name, "Car");
        assert_eq!(a.truncated, 0.0);
        assert_eq!(a.occluded, 0);
        assert_eq!(a.bbox, Box2::new(587.01, 173.33, 614.12, 200.12));
        assert!(!a.dont_care);
    }

    #[test]
    fn empty_file_is_empty_list() {
        assert!(parse_kitti_labels("").unwrap().is_empty());
        assert!(parse_kitti_labels("\n\n  \n").unwrap().is_empty());
    }

    #[test]
    fn short_line_names_its_line_number() {
        let text = format!("{SAMPLE}\nVan 0.00 0 -1.58 1 2 3 4 5 6 7 8 9 10");
        let err = parse_kitti_labels(&text).unwrap_err();
        match err {
            DataError::Parse { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("14"), "{msg}");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn dont_care_is_retained_and_marked() {
        let text = "DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10";
        let anns = parse_kitti_labels(text).unwrap();
        assert_eq!(anns.len(), 1);
        assert!(anns[0].dont_care);
        assert!(anns[0].is_ignore());
        assert_eq!(anns[0].occluded, 3);
        assert_eq!(anns[0].truncated, 0.0);
    }

    #[test]
    fn roundtrip_preserves_consumed_fields() {
        let anns = parse_kitti_labels(SAMPLE).unwrap();
        let text = serialize_kitti_labels(&anns);
        let again = parse_kitti_labels(&text).unwrap();
        assert_eq!(anns, again);
    }
}
