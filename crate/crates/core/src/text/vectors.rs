use std::path::Path;

use vqg_tensor::init::{normal, Rng};
use vqg_tensor::Tensor;

use super::Vocabulary;
use crate::error::{read_to_string, Error, Result};

/// Standard deviation of the random fallback for tokens without a vector.
pub const FALLBACK_STD: f64 = 0.02;

/// Vocabulary-aligned `V×D` embedding matrix.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub matrix: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadReport {
    pub matched: usize,
    pub vocab_size: usize,
    /// Fraction of vocabulary rows filled from the file.
    pub coverage: f64,
}

pub fn load_pretrained_vectors(path: &Path, vocab: &Vocabulary, width: usize, rng: &mut Rng) -> Result<(EmbeddingTable, LoadReport)> {
    parse_pretrained_vectors(&read_to_string(path)?, path, vocab, width, rng)
}

/// Reads GloVe-style text (`token f1 ... fD` per line). A leading
/// word2vec-style `count width` header line is tolerated. Rows for tokens
/// absent from the file are drawn from N(0, 0.02).
pub fn parse_pretrained_vectors(
    text: &str,
    path: &Path,
    vocab: &Vocabulary,
    width: usize,
    rng: &mut Rng,
) -> Result<(EmbeddingTable, LoadReport)> {
    let mut matrix = normal(rng, &[vocab.len(), width], FALLBACK_STD);
    let mut filled = vec![false; vocab.len()];
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            continue;
        }
        if fields.len() != width + 1 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("expected a token and {width} floats, found {} fields", fields.len()),
            });
        }
        let values = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: "unparseable or non-finite float".into(),
            })?;
        let Some(id) = vocab.get(fields[0]) else { continue };
        if filled[id] {
            continue;
        }
        filled[id] = true;
        matrix.data_mut()[id * width..(id + 1) * width].copy_from_slice(&values);
    }
    let matched = filled.iter().filter(|&&f| f).count();
    let report = LoadReport {
        matched,
        vocab_size: vocab.len(),
        coverage: matched as f64 / vocab.len() as f64,
    };
    Ok((EmbeddingTable { matrix, trainable: true }, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use vqg_tensor::init::seeded;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["লাল নীল"], &[])
    }

    #[test]
    fn empty_file_falls_back_everywhere() {
        let v = vocab();
        let (t, r) = parse_pretrained_vectors("", Path::new("v.txt"), &v, 3, &mut seeded(1)).unwrap();
        assert_eq!(r.coverage, 0.0);
        assert_eq!(t.matrix.shape(), &[v.len(), 3]);
    }

    #[test]
    fn full_coverage() {
        let v = vocab();
        let text: String = v
            .tokens()
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t} {i} 0.5 -1\n"))
            .collect();
        let (t, r) = parse_pretrained_vectors(&text, Path::new("v.txt"), &v, 3, &mut seeded(1)).unwrap();
        assert_eq!(r.coverage, 1.0);
        let id = v.get("নীল").unwrap();
        assert_eq!(t.matrix.row(id), &[id as f64, 0.5, -1.0]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let v = vocab();
        let text = "লাল 0.1 0.2 0.3\nxyz 0.1 0.2\n";
        let err = parse_pretrained_vectors(text, Path::new("v.txt"), &v, 3, &mut seeded(1)).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let wide = "xyz 0.1 0.2\n";
        assert!(parse_pretrained_vectors(wide, Path::new("v.txt"), &v, 300, &mut seeded(1)).is_err());
    }

    #[test]
    fn header_line_is_skipped() {
        let v = vocab();
        let text = "2 3\nলাল 1 2 3\n";
        let (_, r) = parse_pretrained_vectors(text, Path::new("v.txt"), &v, 3, &mut seeded(1)).unwrap();
        assert_eq!(r.matched, 1);
    }
}
