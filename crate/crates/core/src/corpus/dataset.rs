use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::corpus::world::{World, WorldSpec};
use crate::error::{Error, Result};
use crate::fsutil::{self, put_f64s, put_u32, put_u64, Cursor};
use crate::numerics::Tensor;
use crate::sequence::{BoundingBox, Clip, Region, VideoTextSample};

pub const DATASET_MAGIC: &[u8; 5] = b"ABTD1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub split: Split,
    pub sample: VideoTextSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub world: WorldSpec,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoTextSample> {
        self.records.iter().filter(move |r| r.split == split).map(|r| &r.sample)
    }

    pub fn samples(&self, split: Split) -> Vec<VideoTextSample> {
        self.split(split).cloned().collect()
    }

    /// Records of one split, keeping the world header.
    pub fn subset(&self, split: Split) -> Dataset {
        Dataset {
            world: self.world.clone(),
            records: self.records.iter().filter(|r| r.split == split).cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Generates `num_train` training then `num_val` validation samples with
/// disjoint ids.
pub fn generate(spec: &WorldSpec) -> Result<Dataset> {
    let world = World::new(spec)?;
    let records = (0..spec.num_train + spec.num_val)
        .map(|i| Record {
            split: if i < spec.num_train { Split::Train } else { Split::Val },
            sample: world.sample(i as u64),
        })
        .collect();
    Ok(Dataset { world: spec.clone(), records })
}

fn header_line(ds: &Dataset) -> String {
    let mut parts: Vec<String> = ds.world.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
    parts.push(format!("records={}", ds.records.len()));
    parts.join(" ")
}

fn put_tensor(body: &mut Vec<u8>, t: &Tensor) {
    put_u32(body, t.len() as u32).unwrap();
    put_f64s(body, t.data()).unwrap();
}

fn encode_record(r: &Record) -> Vec<u8> {
    let s = &r.sample;
    let mut b = Vec::new();
    put_u64(&mut b, s.id).unwrap();
    b.push(r.split.tag());
    b.push(s.match_label);
    put_u32(&mut b, s.word_ids.len() as u32).unwrap();
    for &w in &s.word_ids {
        put_u32(&mut b, w).unwrap();
    }
    for &g in &s.word_segments {
        put_u32(&mut b, g).unwrap();
    }
    put_u32(&mut b, s.sentence_breaks.len() as u32).unwrap();
    for &x in &s.sentence_breaks {
        put_u32(&mut b, x as u32).unwrap();
    }
    put_u32(&mut b, s.clips.len() as u32).unwrap();
    for c in &s.clips {
        put_u32(&mut b, c.action_label).unwrap();
        put_tensor(&mut b, &c.action_feature);
        put_u32(&mut b, c.frames.len() as u32).unwrap();
        for f in &c.frames {
            put_u32(&mut b, f.len() as u32).unwrap();
            for reg in f {
                put_u32(&mut b, reg.object_label).unwrap();
                let bx = &reg.bbox;
                put_f64s(&mut b, &[bx.x1, bx.y1, bx.x2, bx.y2, bx.frame_width, bx.frame_height]).unwrap();
                put_tensor(&mut b, &reg.feature);
                put_tensor(&mut b, &reg.teacher);
            }
        }
    }
    b
}

/// Serializes a dataset. Layout:
///
/// ```text
/// "ABTD1\n"
/// key=value pairs separated by spaces, ending with records=N, then "\n"
/// N records, each: u32 body_len, body
///
/// body:
///   u64 id, u8 split (0 train, 1 val), u8 match_label
///   u32 n_words, n_words x u32 word id, n_words x u32 segment
///   u32 n_breaks, n_breaks x u32 word index
///   u32 n_clips, per clip:
///     u32 action_label, u32 d_a, d_a x f64 feature
///     u32 n_frames, per frame: u32 n_regions, per region:
///       u32 object_label, 6 x f64 (x1, y1, x2, y2, W, H)
///       u32 d_r, d_r x f64 feature, u32 C, C x f64 teacher
/// ```
/// Integers and floats are little-endian.
pub fn write_dataset_to(ds: &Dataset, w: &mut dyn Write) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(b"\n")?;
    w.write_all(header_line(ds).as_bytes())?;
    w.write_all(b"\n")?;
    for r in &ds.records {
        let body = encode_record(r);
        put_u32(w, body.len() as u32)?;
        w.write_all(&body)?;
    }
    Ok(())
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, |w| write_dataset_to(ds, w))
}

fn read_tensor(c: &mut Cursor<'_>) -> Result<Tensor> {
    let n = c.u32()? as usize;
    Ok(Tensor::vector(c.f64s(n)?))
}

fn decode_body(c: &mut Cursor<'_>) -> Result<Record> {
    let id = c.u64()?;
    let split = Split::from_tag(c.u8()?).ok_or_else(|| c.err("unknown split tag"))?;
    let match_label = c.u8()?;
    let n = c.u32()? as usize;
    if c.remaining() / 8 < n {
        return Err(c.err("word count exceeds record"));
    }
    let word_ids = (0..n).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
    let word_segments = (0..n).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
    let nb = c.u32()? as usize;
    let sentence_breaks = (0..nb).map(|_| c.u32().map(|x| x as usize)).collect::<Result<Vec<_>>>()?;
    let nc = c.u32()? as usize;
    let mut clips = Vec::with_capacity(nc.min(1024));
    for _ in 0..nc {
        let action_label = c.u32()?;
        let action_feature = read_tensor(c)?;
        let nf = c.u32()? as usize;
        let mut frames = Vec::with_capacity(nf.min(1024));
        for _ in 0..nf {
            let nr = c.u32()? as usize;
            let mut regions = Vec::with_capacity(nr.min(64));
            for _ in 0..nr {
                let object_label = c.u32()?;
                let v = c.f64s(6)?;
                let bbox = BoundingBox { x1: v[0], y1: v[1], x2: v[2], y2: v[3], frame_width: v[4], frame_height: v[5] };
                let feature = read_tensor(c)?;
                let teacher = read_tensor(c)?;
                regions.push(Region { feature, bbox, teacher, object_label });
            }
            frames.push(regions);
        }
        clips.push(Clip { action_feature, action_label, frames });
    }
    Ok(Record {
        split,
        sample: VideoTextSample { id, word_ids, word_segments, sentence_breaks, clips, match_label },
    })
}

/// Parses a whole dataset; any malformed or missing byte fails the read.
pub fn read_dataset_from(r: &mut dyn Read) -> Result<Dataset> {
    let buf = fsutil::read_all(r)?;
    let mut c = Cursor::new(&buf, "line 1");
    if c.line()?.as_bytes() != DATASET_MAGIC {
        return Err(c.err("bad magic, not a dataset file"));
    }
    c.set_location("line 2");
    let header = c.line()?;
    let mut world = WorldSpec::default();
    let mut count = None;
    let mut seen = Vec::new();
    for pair in header.split(' ').filter(|p| !p.is_empty()) {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::parse("line 2", format!("expected key=value, got `{pair}`")))?;
        seen.push(k);
        if k == "records" {
            count = Some(v.parse::<usize>().map_err(|_| Error::parse("line 2", "bad record count"))?);
        } else {
            world.set(k, v).map_err(|e| Error::parse("line 2", e.to_string()))?;
        }
    }
    if let Some(missing) = WorldSpec::KEYS.iter().find(|k| !seen.contains(k)) {
        return Err(Error::parse("line 2", format!("missing header key `{missing}`")));
    }
    let count = count.ok_or_else(|| Error::parse("line 2", "missing header key `records`"))?;
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        c.set_location(format!("record {i}"));
        let len = c.u32()? as usize;
        let body = c.bytes(len)?;
        let mut bc = Cursor::new(body, format!("record {i}"));
        let rec = decode_body(&mut bc)?;
        if bc.remaining() != 0 {
            return Err(bc.err("record body has trailing bytes"));
        }
        rec.sample
            .validate()
            .map_err(|e| Error::parse(format!("record {i}"), e.to_string()))?;
        records.push(rec);
    }
    if c.remaining() != 0 {
        return Err(c.err(format!("{} bytes after the last record", c.remaining())));
    }
    Ok(Dataset { world, records })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    read_dataset_from(&mut fs::File::open(path)?)
}
