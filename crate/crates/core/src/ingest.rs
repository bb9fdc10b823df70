//! Backbone structures: PDB parsing and the JSON-Lines dataset format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Backbone atom slots, in storage order.
pub const ATOM_N: usize = 0;
pub const ATOM_CA: usize = 1;
pub const ATOM_C: usize = 2;
pub const ATOM_O: usize = 3;

pub type Vec3 = [f64; 3];
/// N, Cα, C, O coordinates of one residue in Å.
pub type Backbone = [Vec3; 4];

/// The 20 canonical residues, in the order used for one-hot encodings.
pub const AMINO_ACIDS: [u8; 20] = *b"ACDEFGHIKLMNPQRSTVWY";
/// One-hot width: 20 canonical residues plus `X`.
pub const AA_VOCAB: usize = 21;

/// One-hot slot of a residue code; unknown codes share the last slot.
pub fn aa_index(code: u8) -> usize {
    AMINO_ACIDS.iter().position(|&a| a == code).unwrap_or(AMINO_ACIDS.len())
}

pub fn three_to_one(name: &str) -> u8 {
    match name {
        "ALA" => b'A',
        "CYS" => b'C',
        "ASP" => b'D',
        "GLU" => b'E',
        "PHE" => b'F',
        "GLY" => b'G',
        "HIS" => b'H',
        "ILE" => b'I',
        "LYS" => b'K',
        "LEU" => b'L',
        "MET" => b'M',
        "ASN" => b'N',
        "PRO" => b'P',
        "GLN" => b'Q',
        "ARG" => b'R',
        "SER" => b'S',
        "THR" => b'T',
        "VAL" => b'V',
        "TRP" => b'W',
        "TYR" => b'Y',
        _ => b'X',
    }
}

pub fn one_to_three(code: u8) -> &'static str {
    match code {
        b'A' => "ALA",
        b'C' => "CYS",
        b'D' => "ASP",
        b'E' => "GLU",
        b'F' => "PHE",
        b'G' => "GLY",
        b'H' => "HIS",
        b'I' => "ILE",
        b'K' => "LYS",
        b'L' => "LEU",
        b'M' => "MET",
        b'N' => "ASN",
        b'P' => "PRO",
        b'Q' => "GLN",
        b'R' => "ARG",
        b'S' => "SER",
        b'T' => "THR",
        b'V' => "VAL",
        b'W' => "TRP",
        b'Y' => "TYR",
        _ => "UNK",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Protein {
    pub id: String,
    /// One-letter codes, 20 canonical plus `X`.
    pub sequence: String,
    pub coords: Vec<Backbone>,
    pub chain_id: String,
}

impl Protein {
    pub fn new(
        id: impl Into<String>,
        sequence: impl Into<String>,
        coords: Vec<Backbone>,
        chain_id: impl Into<String>,
    ) -> Result<Self> {
        let p = Self {
            id: id.into(),
            sequence: sequence.into(),
            coords,
            chain_id: chain_id.into(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.is_empty() {
            return Err(Error::Dataset(format!("protein {} has no residues", self.id)));
        }
        if self.sequence.len() != self.coords.len() {
            return Err(Error::Dataset(format!(
                "protein {}: sequence length {} but {} coordinate rows",
                self.id,
                self.sequence.len(),
                self.coords.len()
            )));
        }
        if let Some(c) = self.sequence.bytes().find(|c| *c != b'X' && !AMINO_ACIDS.contains(c)) {
            return Err(Error::Dataset(format!(
                "protein {}: invalid residue code {:?}",
                self.id, c as char
            )));
        }
        if self.coords.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Dataset(format!("protein {}: non-finite coordinate", self.id)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn residue(&self, i: usize) -> u8 {
        self.sequence.as_bytes()[i]
    }

    pub fn ca(&self, i: usize) -> Vec3 {
        self.coords[i][ATOM_CA]
    }

    pub fn ca_trace(&self) -> Vec<Vec3> {
        self.coords.iter().map(|r| r[ATOM_CA]).collect()
    }
}

/// A protein with one class id per residue (0 = no modification).
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedProtein {
    pub protein: Protein,
    pub labels: Vec<usize>,
}

impl AnnotatedProtein {
    pub fn new(protein: Protein, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let a = Self { protein, labels };
        a.validate(num_classes)?;
        Ok(a)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.protein.validate()?;
        if self.labels.len() != self.protein.len() {
            return Err(Error::Dataset(format!(
                "protein {}: {} labels for {} residues",
                self.protein.id,
                self.labels.len(),
                self.protein.len()
            )));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!(
                "protein {}: label {} not below num_classes {}",
                self.protein.id, l, num_classes
            )));
        }
        Ok(())
    }
}

/// Result of [`parse_backbone`]: the protein plus the dropped-residue tally.
#[derive(Clone, Debug)]
pub struct ParsedBackbone {
    pub protein: Protein,
    /// Residues skipped because one of N, CA, C, O was missing.
    pub incomplete_residues: usize,
}

fn column(line: &str, from: usize, to: usize) -> &str {
    // 1-based inclusive PDB columns; lines may be shorter than 80 chars
    let start = (from - 1).min(line.len());
    let end = to.min(line.len());
    line.get(start..end).unwrap_or("")
}

/// Reads backbone atoms from fixed-column PDB text.
///
/// Only `ATOM` records for N/CA/C/O with altLoc blank or `A` are used, and
/// only the first model. With `chain == None` the first chain seen is taken.
pub fn parse_backbone(pdb_text: &str, chain: Option<&str>) -> Result<ParsedBackbone> {
    if pdb_text.trim().is_empty() {
        return Err(Error::Parse {
            line: None,
            msg: "empty input".into(),
        });
    }
    let mut id = String::from("unknown");
    let mut chosen: Option<String> = chain.map(str::to_string);
    // (resSeq, iCode) -> (resName, atoms)
    let mut residues: BTreeMap<(i64, char), (String, [Option<Vec3>; 4])> = BTreeMap::new();

    for (lineno, line) in pdb_text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.starts_with("HEADER") {
            let code = column(line, 63, 66).trim();
            if !code.is_empty() {
                id = code.to_string();
            }
            continue;
        }
        if line.starts_with("ENDMDL") {
            break;
        }
        if !line.starts_with("ATOM  ") {
            continue;
        }
        let slot = match column(line, 13, 16).trim() {
            "N" => ATOM_N,
            "CA" => ATOM_CA,
            "C" => ATOM_C,
            "O" => ATOM_O,
            _ => continue,
        };
        let alt = column(line, 17, 17);
        if !(alt.trim().is_empty() || alt == "A") {
            continue;
        }
        let chain_id = column(line, 22, 22).to_string();
        match &chosen {
            Some(c) if c.trim() != chain_id.trim() => continue,
            Some(_) => {}
            None => chosen = Some(chain_id.clone()),
        }
        let res_name = column(line, 18, 20).trim().to_string();
        let res_seq: i64 = column(line, 23, 26)
            .trim()
            .parse()
            .map_err(|_| Error::parse(lineno, "malformed residue sequence number"))?;
        let icode = column(line, 27, 27).chars().next().unwrap_or(' ');
        if line.len() < 54 {
            return Err(Error::parse(lineno, "ATOM record too short for coordinates"));
        }
        let mut xyz = [0.0; 3];
        for (k, (a, b)) in [(31, 38), (39, 46), (47, 54)].into_iter().enumerate() {
            let v: f64 = column(line, a, b)
                .trim()
                .parse()
                .map_err(|_| Error::parse(lineno, "malformed coordinate field"))?;
            if !v.is_finite() {
                return Err(Error::parse(lineno, "non-finite coordinate"));
            }
            xyz[k] = v;
        }
        let entry = residues
            .entry((res_seq, icode))
            .or_insert_with(|| (res_name, [None; 4]));
        if entry.1[slot].is_none() {
            entry.1[slot] = Some(xyz);
        }
    }

    let mut sequence = String::new();
    let mut coords = Vec::new();
    let mut incomplete = 0;
    for (name, atoms) in residues.into_values() {
        match atoms {
            [Some(n), Some(ca), Some(c), Some(o)] => {
                sequence.push(three_to_one(&name) as char);
                coords.push([n, ca, c, o]);
            }
            _ => incomplete += 1,
        }
    }
    if coords.is_empty() {
        return Err(Error::Parse {
            line: None,
            msg: "no complete backbone residues".into(),
        });
    }
    let chain_id = chosen.unwrap_or_default().trim().to_string();
    Ok(ParsedBackbone {
        protein: Protein::new(id, sequence, coords, chain_id)?,
        incomplete_residues: incomplete,
    })
}

/// Renders backbone atoms as PDB `ATOM` records (used for fixtures and export).
pub fn write_pdb(p: &Protein) -> String {
    const NAMES: [&str; 4] = [" N  ", " CA ", " C  ", " O  "];
    const ELEMENTS: [&str; 4] = ["N", "C", "C", "O"];
    let chain = p.chain_id.chars().next().unwrap_or('A');
    let mut out = String::new();
    let mut serial = 1;
    for (i, res) in p.coords.iter().enumerate() {
        let name = one_to_three(p.residue(i));
        for (k, xyz) in res.iter().enumerate() {
            out.push_str(&format!(
                "ATOM  {:>5} {} {:>3} {}{:>4}    {:>8.3}{:>8.3}{:>8.3}  1.00  0.00          {:>2}\n",
                serial,
                NAMES[k],
                name,
                chain,
                i + 1,
                xyz[0],
                xyz[1],
                xyz[2],
                ELEMENTS[k]
            ));
            serial += 1;
        }
    }
    out.push_str("END\n");
    out
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    sequence: String,
    coords: Vec<Backbone>,
    #[serde(default)]
    labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    chain_id: Option<String>,
}

/// Writes floats as `{:.16e}`: 17 significant digits.
struct SeventeenDigits;

impl serde_json::ser::Formatter for SeventeenDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

pub(crate) fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SeventeenDigits);
    value.serialize(&mut ser).map_err(|e| Error::Dataset(e.to_string()))?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn write_dataset_to<W: Write>(records: &[AnnotatedProtein], mut w: W) -> Result<()> {
    for r in records {
        let rec = Record {
            id: r.protein.id.clone(),
            sequence: r.protein.sequence.clone(),
            coords: r.protein.coords.clone(),
            labels: r.labels.clone(),
            chain_id: Some(r.protein.chain_id.clone()),
        };
        writeln!(w, "{}", to_json_line(&rec)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(records: &[AnnotatedProtein], path: impl AsRef<Path>) -> Result<()> {
    let f = File::create(path)?;
    write_dataset_to(records, BufWriter::new(f))
}

pub fn read_dataset_from<R: BufRead>(r: R, num_classes: usize) -> Result<Vec<AnnotatedProtein>> {
    let mut out = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Dataset(format!("line {lineno}: {e}")))?;
        let protein = Protein {
            id: rec.id,
            sequence: rec.sequence,
            coords: rec.coords,
            chain_id: rec.chain_id.unwrap_or_else(|| "A".into()),
        };
        let ap = AnnotatedProtein {
            protein,
            labels: rec.labels,
        };
        ap.validate(num_classes).map_err(|e| match e {
            Error::Dataset(m) => Error::Dataset(format!("line {lineno}: {m}")),
            other => other,
        })?;
        out.push(ap);
    }
    Ok(out)
}

pub fn read_dataset(path: impl AsRef<Path>, num_classes: usize) -> Result<Vec<AnnotatedProtein>> {
    let f = File::open(path)?;
    read_dataset_from(BufReader::new(f), num_classes)
}

/// Proteins of a JSONL dataset; `labels` may be absent and are ignored.
pub fn read_proteins_from<R: BufRead>(r: R) -> Result<Vec<Protein>> {
    let mut out = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Dataset(format!("line {lineno}: {e}")))?;
        let protein = Protein {
            id: rec.id,
            sequence: rec.sequence,
            coords: rec.coords,
            chain_id: rec.chain_id.unwrap_or_else(|| "A".into()),
        };
        protein.validate().map_err(|e| match e {
            Error::Dataset(m) => Error::Dataset(format!("line {lineno}: {m}")),
            other => other,
        })?;
        out.push(protein);
    }
    Ok(out)
}

pub fn read_proteins(path: impl AsRef<Path>) -> Result<Vec<Protein>> {
    let f = File::open(path)?;
    read_proteins_from(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atom(serial: usize, name: &str, res: &str, seq: i32, xyz: Vec3) -> String {
        format!(
            "ATOM  {:>5} {:<4} {:>3} A{:>4}    {:>8.3}{:>8.3}{:>8.3}  1.00  0.00           {}\n",
            serial,
            format!(" {name}").chars().take(4).collect::<String>(),
            res,
            seq,
            xyz[0],
            xyz[1],
            xyz[2],
            &name[..1]
        )
    }

    /// Three glycines along x, 3.8 Å apart.
    fn gly3(skip_ca_of: Option<i32>) -> String {
        let mut s = String::from("HEADER    TEST                                    01-JAN-00   1GLY\n");
        s.push_str("REMARK   1 fixture\n");
        let mut serial = 1;
        for r in 1..=3 {
            let x0 = (r - 1) as f64 * 3.8;
            for (name, off) in [
                ("N", [-1.2, 0.6, 0.0]),
                ("CA", [0.0, 0.0, 0.0]),
                ("C", [1.2, 0.7, 0.0]),
                ("O", [1.3, 1.9, 0.1]),
            ] {
                if name == "CA" && Some(r) == skip_ca_of {
                    continue;
                }
                s.push_str(&atom(serial, name, "GLY", r, [x0 + off[0], off[1], off[2]]));
                serial += 1;
            }
        }
        s
    }

    #[test]
    fn glycine_fixture() {
        let p = parse_backbone(&gly3(None), None).unwrap();
        assert_eq!(p.protein.len(), 3);
        assert_eq!(p.protein.sequence, "GGG");
        assert_eq!(p.protein.id, "1GLY");
        assert_eq!(p.incomplete_residues, 0);
        assert_eq!(p.protein.coords[1][ATOM_CA], [3.8, 0.0, 0.0]);
        assert_eq!(p.protein.coords[2][ATOM_O], [8.9, 1.9, 0.1]);
    }

    #[test]
    fn missing_ca_drops_residue() {
        let p = parse_backbone(&gly3(Some(2)), None).unwrap();
        assert_eq!(p.protein.len(), 2);
        assert_eq!(p.incomplete_residues, 1);
    }

    #[test]
    fn empty_input_is_parse_error() {
        assert!(matches!(parse_backbone("", None), Err(Error::Parse { .. })));
        assert!(matches!(
            parse_backbone("REMARK nothing\n", None),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn bad_coordinate_reports_line() {
        let mut text = gly3(None);
        text = text.replacen("   3.800", "   3.8x0", 1);
        match parse_backbone(&text, None) {
            Err(Error::Parse { line: Some(l), .. }) => assert_eq!(l, 8),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_atom_lines_are_ignored() {
        let base = parse_backbone(&gly3(None), None).unwrap().protein;
        let noisy: String = gly3(None)
            .lines()
            .flat_map(|l| {
                [
                    format!("{l}\n"),
                    "REMARK 999 noise\nHETATM    1  O   HOH A 900       1.000   1.000   1.000\n".into(),
                ]
            })
            .collect();
        let p = parse_backbone(&noisy, None).unwrap().protein;
        assert_eq!(p, base);
    }

    #[test]
    fn alt_loc_b_is_skipped_and_order_is_by_residue_number() {
        let mut text = String::new();
        let mut serial = 1;
        for r in [5, 2] {
            for name in ["N", "CA", "C", "O"] {
                text.push_str(&atom(serial, name, "ALA", r, [r as f64, serial as f64, 0.0]));
                serial += 1;
            }
        }
        // altLoc B copy of residue 2 CA must not override the first
        let mut alt = atom(99, "CA", "ALA", 2, [50.0, 50.0, 50.0]);
        alt.replace_range(16..17, "B");
        text.push_str(&alt);
        let p = parse_backbone(&text, None).unwrap().protein;
        assert_eq!(p.sequence, "AA");
        assert_eq!(p.coords[0][ATOM_CA][0], 2.0);
        assert_eq!(p.coords[1][ATOM_CA][0], 5.0);
    }

    #[test]
    fn chain_filter() {
        let text = gly3(None).replace(" A ", " B ");
        assert!(parse_backbone(&text, Some("A")).is_err());
        assert_eq!(parse_backbone(&text, Some("B")).unwrap().protein.chain_id, "B");
    }

    #[test]
    fn pdb_writer_round_trips() {
        let p = parse_backbone(&gly3(None), None).unwrap().protein;
        let again = parse_backbone(&write_pdb(&p), None).unwrap().protein;
        assert_eq!(again.coords, p.coords);
        assert_eq!(again.sequence, p.sequence);
    }

    fn sample(id: &str, n: usize) -> AnnotatedProtein {
        let coords = (0..n)
            .map(|i| {
                let x = i as f64 * 3.8;
                [
                    [x - 1.0, 0.5, 0.1],
                    [x, 0.0, 0.0],
                    [x + 1.0, 0.6, 0.0],
                    [x + 1.1, 1.8, 0.1],
                ]
            })
            .collect();
        let seq: String = (0..n).map(|i| AMINO_ACIDS[i % 20] as char).collect();
        AnnotatedProtein::new(Protein::new(id, seq, coords, "A").unwrap(), vec![0; n], 26).unwrap()
    }

    #[test]
    fn single_record_round_trip() {
        let mut buf = Vec::new();
        write_dataset_to(&[sample("p1", 4)], &mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 1);
        let back = read_dataset_from(buf.as_slice(), 26).unwrap();
        assert_eq!(back, vec![sample("p1", 4)]);
    }

    #[test]
    fn empty_dataset_writes_empty_file() {
        let mut buf = Vec::new();
        write_dataset_to(&[], &mut buf).unwrap();
        assert!(buf.is_empty());
    }

    #[test]
    fn short_labels_are_rejected_with_line() {
        let mut buf = Vec::new();
        let mut bad = sample("p2", 3);
        bad.labels.pop();
        write_dataset_to(&[sample("p1", 3), bad], &mut buf).unwrap();
        let err = read_dataset_from(buf.as_slice(), 26).unwrap_err();
        assert!(matches!(&err, Error::Dataset(m) if m.starts_with("line 2")), "{err}");
    }

    #[test]
    fn missing_key_is_dataset_error() {
        let line = br#"{"id":"x","sequence":"A","coords":[[[0,0,0],[1,0,0],[1,1,0],[2,1,0]]]}"#;
        let err = read_dataset_from(&line[..], 26).unwrap_err();
        assert!(matches!(&err, Error::Dataset(m) if m.contains("labels")), "{err}");
    }

    #[test]
    fn non_finite_is_rejected() {
        let line = br#"{"id":"x","sequence":"A","coords":[[[0,0,0],[1,0,0],[1,1,0],[2,1,1e999]]],"labels":[0]}"#;
        assert!(matches!(read_dataset_from(&line[..], 26), Err(Error::Dataset(_))));
    }
}
