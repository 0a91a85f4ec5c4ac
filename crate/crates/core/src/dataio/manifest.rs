use std::collections::HashSet;
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! vocabulary {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "unknown {} {other:?} (expected one of {})",
                        stringify!($name),
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

vocabulary!(
    /// Image collection a record came from.
    Source {
        Cohen => "cohen",
        Rsna => "rsna",
        Actualmed => "actualmed",
        Figure1 => "figure1",
        Radiopaedia => "radiopaedia",
        Eurorad => "eurorad",
        Hamimi => "hamimi",
        Bontrager => "bontrager",
        Other => "other",
    }
);

vocabulary!(
    /// Clinical labels plus the source labels produced by
    /// [`relabel_by_source`](super::relabel_by_source).
    Label {
        LungOpacity => "lung_opacity",
        Covid19 => "covid19",
        Normal => "normal",
        Cohen => "cohen",
        Rsna => "rsna",
        Other => "other",
    }
);

vocabulary!(
    Projection {
        Pa => "PA",
        Ap => "AP",
        ApPortable => "AP_portable",
    }
);

vocabulary!(
    Split {
        Train => "train",
        Val => "val",
        Test => "test",
    }
);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub patient_id: String,
    pub source: Source,
    pub class_label: Label,
    pub projection: Projection,
    pub split: Option<Split>,
    /// Label before any relabelling; not persisted in the CSV.
    #[serde(skip)]
    pub original_label: Option<Label>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
}

const HEADER: [&str; 6] = ["id", "image_path", "patient_id", "source", "class_label", "projection"];

impl Manifest {
    pub fn new(records: Vec<SampleRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::arg(format!("duplicate record id {:?}", r.id)));
            }
        }
        Ok(Manifest { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_split(&self) -> bool {
        self.records.iter().any(|r| r.split.is_some())
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == Some(split))
            .collect()
    }

    /// Distinct labels in first-appearance order.
    pub fn labels(&self) -> Vec<Label> {
        let mut out = Vec::new();
        for r in &self.records {
            if !out.contains(&r.class_label) {
                out.push(r.class_label);
            }
        }
        out
    }

    /// Writes the CSV form. The `split` column is present when any record
    /// carries a split.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let with_split = self.has_split();
        let mut header: Vec<&str> = HEADER.to_vec();
        if with_split {
            header.push("split");
        }
        let csv_err = |e: csv::Error| Error::arg(format!("csv: {e}"));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.records {
            let path = r.image_path.to_string_lossy();
            let mut row = vec![
                r.id.as_str(),
                path.as_ref(),
                r.patient_id.as_str(),
                r.source.as_str(),
                r.class_label.as_str(),
                r.projection.as_str(),
            ];
            if with_split {
                row.push(r.split.map(Split::as_str).unwrap_or(""));
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::arg(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Parses manifest CSV text. `origin` names the input in error messages.
pub fn parse_manifest<R: Read>(reader: R, origin: &Path) -> Result<Manifest> {
    let parse_err = |line: u64, detail: String| Error::Parse {
        path: origin.to_path_buf(),
        line: line as usize,
        detail,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let names: Vec<&str> = header.iter().collect();
    let with_split = match names.as_slice() {
        n if n == HEADER => false,
        n if n.len() == 7 && n[..6] == HEADER && n[6] == "split" => true,
        _ => {
            return Err(parse_err(
                1,
                format!("header must be {}[,split], got {}", HEADER.join(","), names.join(",")),
            ))
        }
    };
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| row.get(i).unwrap_or("").trim();
        let id = field(0).to_string();
        if id.is_empty() {
            return Err(parse_err(line, "empty id".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(parse_err(line, format!("duplicate id {id:?}")));
        }
        let split = if with_split && !field(6).is_empty() {
            Some(field(6).parse().map_err(|e| parse_err(line, e))?)
        } else {
            None
        };
        records.push(SampleRecord {
            id,
            image_path: PathBuf::from(field(1)),
            patient_id: field(2).to_string(),
            source: field(3).parse().map_err(|e| parse_err(line, e))?,
            class_label: field(4).parse().map_err(|e| parse_err(line, e))?,
            projection: field(5).parse().map_err(|e| parse_err(line, e))?,
            split,
            original_label: None,
        });
    }
    Ok(Manifest { records })
}

/// Loads a manifest and checks that every referenced image exists
/// (relative paths resolve against the manifest's directory).
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let manifest = parse_manifest(file, path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for (i, r) in manifest.records.iter().enumerate() {
        let p = resolve(base, &r.image_path);
        if !p.is_file() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                detail: format!("image {} does not exist", p.display()),
            });
        }
    }
    Ok(manifest)
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    std::fs::write(path, manifest.to_csv()?).map_err(|e| Error::io(path, e))
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Replaces clinical labels with source labels: `cohen`, `rsna` or `other`.
/// The first relabelling stores the original label.
pub fn relabel_by_source(manifest: &Manifest) -> Manifest {
    let records = manifest
        .records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.original_label.get_or_insert(r.class_label);
            r.class_label = match r.source {
                Source::Cohen => Label::Cohen,
                Source::Rsna => Label::Rsna,
                _ => Label::Other,
            };
            r
        })
        .collect();
    Manifest { records }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "id,image_path,patient_id,source,class_label,projection\n\
        a,images/a.pgm,p1,cohen,covid19,PA\n\
        b,images/b.pgm,p1,cohen,covid19,AP\n\
        c,images/c.pgm,p2,rsna,normal,AP_portable\n";

    #[test]
    fn header_only_is_empty() {
        let m = parse_manifest(&HEADER.join(",").into_bytes()[..], Path::new("m.csv")).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn duplicate_id_cites_line() {
        let mut text = String::from("id,image_path,patient_id,source,class_label,projection\n");
        for i in 0..5 {
            text += &format!("r{i},x.pgm,p{i},rsna,normal,PA\n");
        }
        text += "r2,x.pgm,p9,rsna,normal,PA\n";
        match parse_manifest(text.as_bytes(), Path::new("m.csv")) {
            Err(Error::Parse { line, detail, .. }) => {
                assert_eq!(line, 7);
                assert!(detail.contains("duplicate"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_vocabulary_is_parse_error() {
        let text = "id,image_path,patient_id,source,class_label,projection\na,x,p,mars,normal,PA\n";
        assert!(matches!(
            parse_manifest(text.as_bytes(), Path::new("m.csv")),
            Err(Error::Parse { line: 2, .. })
        ));
        let text = "id,image_path,patient_id,source,class_label,projection\na,x,p,rsna,sick,PA\n";
        assert!(parse_manifest(text.as_bytes(), Path::new("m.csv")).is_err());
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("images")).unwrap();
        for n in ["a", "b", "c"] {
            std::fs::write(dir.path().join(format!("images/{n}.pgm")), b"").unwrap();
        }
        let path = dir.path().join("manifest.csv");
        std::fs::write(&path, FIXTURE).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.len(), 3);
        let out = dir.path().join("again.csv");
        save_manifest(&m, &out).unwrap();
        assert_eq!(load_manifest(&out).unwrap(), m);
        assert_eq!(std::fs::read_to_string(&out).unwrap(), FIXTURE);
    }

    #[test]
    fn missing_image_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::write(&path, FIXTURE).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn relabel_maps_sources_and_is_idempotent() {
        let m = parse_manifest(FIXTURE.as_bytes(), Path::new("m.csv")).unwrap();
        let mut extra = m.records[2].clone();
        extra.id = "d".into();
        extra.source = Source::Figure1;
        let m = Manifest::new([m.records.clone(), vec![extra]].concat()).unwrap();
        let r = relabel_by_source(&m);
        let labels: Vec<Label> = r.records.iter().map(|r| r.class_label).collect();
        assert_eq!(labels, [Label::Cohen, Label::Cohen, Label::Rsna, Label::Other]);
        assert_eq!(r.records[0].original_label, Some(Label::Covid19));
        assert_eq!(relabel_by_source(&r), r);
    }
}
