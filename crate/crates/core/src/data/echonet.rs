//! Readers and writers for the EchoNet-Dynamic CSV layouts.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{simpson_geometry, Chord, ChordSet, Phase};

pub const FILELIST_COLUMNS: [&str; 9] = [
    "FileName",
    "EF",
    "ESV",
    "EDV",
    "FrameHeight",
    "FrameWidth",
    "FPS",
    "NumberOfFrames",
    "Split",
];
pub const TRACING_COLUMNS: [&str; 6] = ["FileName", "X1", "Y1", "X2", "Y2", "Frame"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "TRAIN",
            Split::Val => "VAL",
            Split::Test => "TEST",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TRAIN" => Ok(Split::Train),
            "VAL" => Ok(Split::Val),
            "TEST" => Ok(Split::Test),
            other => Err(Error::FormatError(format!("unknown split {other:?}"))),
        }
    }
}

/// One FileList row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub file_name: String,
    pub ef: f64,
    pub esv: Option<f64>,
    pub edv: Option<f64>,
    pub frame_height: usize,
    pub frame_width: usize,
    pub fps: f64,
    pub number_of_frames: usize,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EchonetIndex {
    pub train: Vec<IndexEntry>,
    pub val: Vec<IndexEntry>,
    pub test: Vec<IndexEntry>,
}

impl EchonetIndex {
    pub fn split(&self, split: Split) -> &[IndexEntry] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&mut self, e: IndexEntry) {
        match e.split {
            Split::Train => self.train.push(e),
            Split::Val => self.val.push(e),
            Split::Test => self.test.push(e),
        }
    }
}

/// Strips a trailing video extension so FileList and tracing ids compare equal.
pub fn clip_stem(name: &str) -> &str {
    let name = name.trim();
    match name.rsplit_once('.') {
        Some((stem, ext)) if ext.eq_ignore_ascii_case("avi") => stem,
        _ => name,
    }
}

struct Table {
    reader: csv::Reader<Box<dyn Read>>,
    columns: Vec<usize>,
}

impl Table {
    fn open(source: Box<dyn Read>, wanted: &[&str]) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(source);
        let headers = reader
            .headers()
            .map_err(|e| Error::FormatError(format!("header: {e}")))?
            .clone();
        let columns = wanted
            .iter()
            .map(|w| {
                headers
                    .iter()
                    .position(|h| h == *w)
                    .ok_or_else(|| Error::FormatError(format!("missing column {w}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { reader, columns })
    }

    /// Yields `(line number, fields in `wanted` order)`.
    fn rows(self) -> impl Iterator<Item = Result<(u64, Vec<String>)>> {
        let columns = self.columns;
        self.reader.into_records().map(move |rec| {
            let rec = rec.map_err(|e| Error::FormatError(e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            let fields = columns
                .iter()
                .map(|&c| {
                    rec.get(c)
                        .map(str::to_string)
                        .ok_or_else(|| Error::FormatError(format!("row {line}: too few fields")))
                })
                .collect::<Result<_>>()?;
            Ok((line, fields))
        })
    }
}

fn parse<T: FromStr>(line: u64, column: &str, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::FormatError(format!("row {line}: bad {column} value {s:?}")))
}

fn parse_optional(line: u64, column: &str, s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse(line, column, s).map(Some)
    }
}

pub fn read_echonet_index(source: impl Read + 'static) -> Result<EchonetIndex> {
    let mut index = EchonetIndex::default();
    for row in Table::open(Box::new(source), &FILELIST_COLUMNS)?.rows() {
        let (line, f) = row?;
        let ef: f64 = parse(line, "EF", &f[1])?;
        if !(ef > 0.0 && ef < 100.0) {
            return Err(Error::LabelError(format!(
                "row {line}: EF {ef} outside (0, 100)"
            )));
        }
        index.push(IndexEntry {
            file_name: f[0].clone(),
            ef,
            esv: parse_optional(line, "ESV", &f[2])?,
            edv: parse_optional(line, "EDV", &f[3])?,
            frame_height: parse(line, "FrameHeight", &f[4])?,
            frame_width: parse(line, "FrameWidth", &f[5])?,
            fps: parse(line, "FPS", &f[6])?,
            number_of_frames: parse(line, "NumberOfFrames", &f[7])?,
            split: f[8]
                .parse()
                .map_err(|e: Error| Error::FormatError(format!("row {line}: {e}")))?,
        });
    }
    Ok(index)
}

pub fn load_echonet_index(path: &Path) -> Result<EchonetIndex> {
    let file =
        std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_echonet_index(file)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_echonet_index<'a>(
    mut w: impl Write,
    entries: impl IntoIterator<Item = &'a IndexEntry>,
) -> Result<()> {
    writeln!(w, "{}", FILELIST_COLUMNS.join(","))?;
    for e in entries {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            e.file_name,
            e.ef,
            fmt_opt(e.esv),
            fmt_opt(e.edv),
            e.frame_height,
            e.frame_width,
            e.fps,
            e.number_of_frames,
            e.split
        )?;
    }
    Ok(())
}

/// The two traced frames of one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tracing {
    pub ed: ChordSet,
    pub es: ChordSet,
    pub ed_frame: usize,
    pub es_frame: usize,
}

struct FrameRows {
    frame: usize,
    chords: Vec<Chord>,
}

/// Reads every tracing in the file, keyed by clip stem in order of first
/// appearance. `landmarks` fixes the chord count per frame; `None` only
/// requires the two frames to agree.
pub fn read_all_tracings(
    source: impl Read + 'static,
    landmarks: Option<usize>,
) -> Result<Vec<(String, Tracing)>> {
    let mut files: Vec<(String, Vec<FrameRows>)> = Vec::new();
    for row in Table::open(Box::new(source), &TRACING_COLUMNS)?.rows() {
        let (line, f) = row?;
        let id = clip_stem(&f[0]).to_string();
        let mut c = [0.0f64; 4];
        for (k, name) in TRACING_COLUMNS[1..5].iter().enumerate() {
            c[k] = parse(line, name, &f[k + 1])?;
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::FormatError(format!(
                "row {line}: non-finite coordinate"
            )));
        }
        let frame: usize = parse(line, "Frame", &f[5])?;
        let pos = match files.iter().position(|(n, _)| *n == id) {
            Some(p) => p,
            None => {
                files.push((id, Vec::new()));
                files.len() - 1
            }
        };
        let frames = &mut files[pos].1;
        match frames.iter_mut().find(|fr| fr.frame == frame) {
            Some(fr) => fr.chords.push(Chord::from_coords(c)),
            None => frames.push(FrameRows {
                frame,
                chords: vec![Chord::from_coords(c)],
            }),
        }
    }
    files
        .into_iter()
        .map(|(id, frames)| {
            let t = assemble(&id, frames, landmarks)?;
            Ok((id, t))
        })
        .collect()
}

fn assemble(id: &str, frames: Vec<FrameRows>, landmarks: Option<usize>) -> Result<Tracing> {
    if frames.len() != 2 {
        return Err(Error::FormatError(format!(
            "{id}: expected 2 traced frames, found {}",
            frames.len()
        )));
    }
    let expected = landmarks.unwrap_or(frames[0].chords.len());
    for fr in &frames {
        if fr.chords.len() != expected {
            return Err(Error::FormatError(format!(
                "{id}: frame {} has {} chords, expected {expected}",
                fr.frame,
                fr.chords.len()
            )));
        }
    }
    let mut it = frames.into_iter();
    let (a, b) = (it.next().unwrap(), it.next().unwrap());
    let va = simpson_geometry(&ChordSet::new(Phase::Ed, a.chords.clone()))?.total_volume;
    let vb = simpson_geometry(&ChordSet::new(Phase::Ed, b.chords.clone()))?.total_volume;
    let (ed, es) = if va >= vb { (a, b) } else { (b, a) };
    Ok(Tracing {
        ed: ChordSet::new(Phase::Ed, ed.chords),
        es: ChordSet::new(Phase::Es, es.chords),
        ed_frame: ed.frame,
        es_frame: es.frame,
    })
}

pub fn load_tracings(path: &Path, source_id: &str, landmarks: usize) -> Result<Tracing> {
    let file =
        std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let wanted = clip_stem(source_id);
    read_all_tracings(file, Some(landmarks))?
        .into_iter()
        .find(|(id, _)| id == wanted)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::FormatError(format!("no tracings for {source_id}")))
}

/// Writes tracings with shortest round-trip float formatting, so reading
/// them back yields identical bits.
pub fn write_tracings<'a>(
    mut w: impl Write,
    entries: impl IntoIterator<Item = (&'a str, &'a Tracing)>,
) -> Result<()> {
    writeln!(w, "{}", TRACING_COLUMNS.join(","))?;
    for (id, t) in entries {
        for (set, frame) in [(&t.ed, t.ed_frame), (&t.es, t.es_frame)] {
            for c in &set.chords {
                let [x1, y1, x2, y2] = c.coords();
                writeln!(w, "{id},{x1:?},{y1:?},{x2:?},{y2:?},{frame}")?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "FileName,EF,ESV,EDV,FrameHeight,FrameWidth,FPS,NumberOfFrames,Split\n";

    fn index(text: &str) -> Result<EchonetIndex> {
        read_echonet_index(std::io::Cursor::new(text.to_string()))
    }

    #[test]
    fn parses_filelist() {
        let idx = index(&format!(
            "{HEADER}0X1,55.0,30,70,112,112,50,200,TRAIN\n0X2,40,,,112,112,50,100,test\n"
        ))
        .unwrap();
        assert_eq!(idx.train.len(), 1);
        assert_eq!(idx.train[0].ef, 55.0);
        assert_eq!(idx.train[0].edv, Some(70.0));
        assert_eq!(idx.test[0].esv, None);
        assert!(idx.val.is_empty());
    }

    #[test]
    fn filelist_errors() {
        assert!(index(HEADER).unwrap().is_empty());
        assert!(matches!(
            index(&format!("{HEADER}a,120,1,2,112,112,50,10,TRAIN\n")),
            Err(Error::LabelError(_))
        ));
        match index("FileName,EF,ESV,EDV,FrameHeight,FrameWidth,FPS,Split\n") {
            Err(Error::FormatError(m)) => assert!(m.contains("NumberOfFrames")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn filelist_round_trip() {
        let idx = index(&format!(
            "{HEADER}0X1,55.25,30.5,70.125,112,112,50,200,TRAIN\n0X2,40,,,112,112,50,100,VAL\n"
        ))
        .unwrap();
        let mut buf = Vec::new();
        write_echonet_index(&mut buf, idx.train.iter().chain(&idx.val)).unwrap();
        assert_eq!(index(&String::from_utf8(buf).unwrap()).unwrap(), idx);
    }

    fn rows(id: &str, frame: usize, half: f64, n: usize) -> String {
        (0..n)
            .map(|i| {
                let y = i as f64;
                format!("{id},{},{y},{},{y},{frame}\n", 50.0 - half, 50.0 + half)
            })
            .collect()
    }

    #[test]
    fn larger_volume_frame_is_ed() {
        let text = format!(
            "FileName,X1,Y1,X2,Y2,Frame\n{}{}",
            rows("0X1.avi", 10, 3.0, 4),
            rows("0X1.avi", 40, 5.0, 4)
        );
        let all = read_all_tracings(std::io::Cursor::new(text), Some(4)).unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].0, "0X1");
        let t = &all[0].1;
        assert_eq!((t.ed_frame, t.es_frame), (40, 10));
        assert_eq!(t.ed.phase, Phase::Ed);
    }

    #[test]
    fn tracing_errors() {
        let short = format!(
            "FileName,X1,Y1,X2,Y2,Frame\n{}{}",
            rows("a", 10, 3.0, 4),
            rows("a", 40, 5.0, 3)
        );
        match read_all_tracings(std::io::Cursor::new(short), Some(4)) {
            Err(Error::FormatError(m)) => assert!(m.contains("frame 40")),
            other => panic!("{other:?}"),
        }
        let three = format!(
            "FileName,X1,Y1,X2,Y2,Frame\n{}{}{}",
            rows("a", 1, 3.0, 3),
            rows("a", 2, 3.0, 3),
            rows("a", 3, 3.0, 3)
        );
        assert!(read_all_tracings(std::io::Cursor::new(three), None).is_err());
        let bad = "FileName,X1,Y1,X2,Y2,Frame\na,1,2,x,4,5\n".to_string();
        match read_all_tracings(std::io::Cursor::new(bad), None) {
            Err(Error::FormatError(m)) => assert!(m.contains("row 2"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
