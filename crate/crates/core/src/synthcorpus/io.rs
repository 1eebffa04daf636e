//! Line-delimited JSON persistence.
//!
//! ```text
//! {"format":"cirl-corpus","version":1,"seed":42,"config":{...}}
//! {"type":"candidate","id":0,"scene":{"objects":[{"shape":..,"color":..,"size":..}],"background":..}}
//! {"type":"subset","id":0,"members":[0,1,2,3,4,5]}
//! {"type":"triplet","split":"train","index":0,"reference":{..},"edits":[{"op":"add",..}],"target_id":4,"nonce":4294967296}
//! ```
//! Candidates come first, then subsets, then train, val and test triplets.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusConfig, Scene, Split, Triplet};
use crate::error::{Error, Result};

pub const FORMAT: &str = "cirl-corpus";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    seed: u64,
    config: CorpusConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Record {
    Candidate {
        id: usize,
        scene: Scene,
    },
    Subset {
        id: usize,
        members: Vec<usize>,
    },
    Triplet {
        split: Split,
        index: usize,
        #[serde(flatten)]
        triplet: Triplet,
    },
}

pub fn write_corpus<W: Write>(corpus: &Corpus, mut w: W) -> Result<()> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        seed: corpus.seed,
        config: corpus.config,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let line = |r: &Record, w: &mut W| -> Result<()> {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
        Ok(())
    };
    for (id, scene) in corpus.candidates.iter().enumerate() {
        line(
            &Record::Candidate {
                id,
                scene: scene.clone(),
            },
            &mut w,
        )?;
    }
    for (id, members) in corpus.subsets.iter().enumerate() {
        line(
            &Record::Subset {
                id,
                members: members.clone(),
            },
            &mut w,
        )?;
    }
    for split in [Split::Train, Split::Val, Split::Test] {
        for (index, t) in corpus.split(split).iter().enumerate() {
            line(
                &Record::Triplet {
                    split,
                    index,
                    triplet: t.clone(),
                },
                &mut w,
            )?;
        }
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(r: R) -> Result<Corpus> {
    let mut lines = r.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::CorpusFormat("empty file".into()))??;
    let header: Header = serde_json::from_str(&first)?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::CorpusFormat(format!(
            "unsupported header {:?} v{}",
            header.format, header.version
        )));
    }
    let mut corpus = Corpus {
        config: header.config,
        seed: header.seed,
        candidates: Vec::new(),
        subsets: Vec::new(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::CorpusFormat(format!("line {}: {e}", n + 2)))?;
        let order = |got: usize, want: usize, what: &str| {
            if got == want {
                Ok(())
            } else {
                Err(Error::CorpusFormat(format!("{what} id {got} out of order (expected {want})")))
            }
        };
        match rec {
            Record::Candidate { id, scene } => {
                order(id, corpus.candidates.len(), "candidate")?;
                corpus.candidates.push(scene);
            }
            Record::Subset { id, members } => {
                order(id, corpus.subsets.len(), "subset")?;
                corpus.subsets.push(members);
            }
            Record::Triplet {
                split,
                index,
                triplet,
            } => {
                let list = match split {
                    Split::Train => &mut corpus.train,
                    Split::Val => &mut corpus.val,
                    Split::Test => &mut corpus.test,
                };
                order(index, list.len(), "triplet")?;
                list.push(triplet);
            }
        }
    }
    let n = corpus.candidates.len();
    let all_trips = corpus.train.iter().chain(&corpus.val).chain(&corpus.test);
    if let Some(t) = all_trips.clone().find(|t| t.target_id >= n) {
        return Err(Error::CorpusFormat(format!("target id {} out of range", t.target_id)));
    }
    let mut seen = vec![false; n];
    for m in corpus.subsets.iter().flatten() {
        if *m >= n || std::mem::replace(&mut seen[*m], true) {
            return Err(Error::CorpusFormat(format!("subset member {m} invalid or repeated")));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::CorpusFormat("subsets do not cover every candidate".into()));
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcorpus::gen_corpus;

    fn cfg() -> CorpusConfig {
        CorpusConfig {
            candidates: 60,
            triplets_per_subset: 2,
            val_subsets: 1,
            test_subsets: 1,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = gen_corpus(&cfg(), 42).unwrap();
        let mut a = Vec::new();
        write_corpus(&c, &mut a).unwrap();
        let back = read_corpus(a.as_slice()).unwrap();
        assert_eq!(back, c);
        let mut b = Vec::new();
        write_corpus(&back, &mut b).unwrap();
        assert_eq!(a, b);
        let first = std::str::from_utf8(&a).unwrap().lines().next().unwrap();
        assert!(first.starts_with(r#"{"format":"cirl-corpus","version":1,"seed":42"#));
    }

    #[test]
    fn rejects_wrong_header_and_bad_records() {
        assert!(read_corpus(&b"{\"format\":\"x\",\"version\":1,\"seed\":1,\"config\":{}}\n"[..]).is_err());
        let c = gen_corpus(&cfg(), 1).unwrap();
        let mut buf = Vec::new();
        write_corpus(&c, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let tampered = text.replacen("\"type\":\"subset\",\"id\":0", "\"type\":\"subset\",\"id\":3", 1);
        assert!(read_corpus(tampered.as_bytes()).is_err());
    }
}
