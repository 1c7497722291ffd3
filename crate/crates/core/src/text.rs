//! Tokenization and the language encoder producing `T: (L, C_lang)` per sample.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::config::ModelConfig;
use crate::data::{Color, Shape, SizeClass};
use crate::error::{Error, Result};
use crate::nn::{key_mask_bias, Init, LayerNorm, Mlp, ParamStore, SelfAttention};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Word list; the line number of a token in a vocabulary file is its id.
/// Line 0 is PAD and line 1 is UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Tokenize(
                "vocabulary needs PAD and UNK entries".into(),
            ));
        }
        let index = tokens
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Self { tokens, index })
    }

    /// Vocabulary covering the synthetic expression grammar.
    pub fn builtin() -> Self {
        let mut tokens: Vec<String> = ["<pad>", "<unk>", "the", "a", "on", "in", "at", "of", "to"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend(["left", "right", "top", "bottom", "center", "middle"].map(String::from));
        tokens.extend(SizeClass::ALL.iter().map(|s| s.word().to_string()));
        tokens.extend(Color::ALL.iter().map(|c| c.word().to_string()));
        tokens.extend(Shape::ALL.iter().map(|s| s.word().to_string()));
        Self::from_tokens(tokens).expect("builtin vocabulary is well formed")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(|l| l.trim().to_string()).collect())
            .map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }
}

/// Exactly `L` ids with a parallel validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub attn_mask: Vec<bool>,
}

/// Lowercase whitespace tokenization, clipped to `len` and right-padded with PAD.
pub fn tokenize(expression: &str, len: usize, vocab: &Vocab) -> Result<TokenSeq> {
    let lower = expression.to_lowercase();
    let words: Vec<&str> = lower.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::Tokenize("empty expression".into()));
    }
    if len == 0 {
        return Err(Error::Tokenize("sequence length must be >= 1".into()));
    }
    let mut ids: Vec<u32> = words.iter().take(len).map(|w| vocab.id(w)).collect();
    let real = ids.len();
    ids.resize(len, PAD_ID);
    let attn_mask = (0..len).map(|i| i < real).collect();
    Ok(TokenSeq { ids, attn_mask })
}

/// Batched language features: `features (B, L, C_lang)`, `mask (B, L)` with 1 for real tokens.
#[derive(Debug, Clone)]
pub struct LanguageFeature {
    pub features: Tensor,
    pub mask: Tensor,
}

#[derive(Clone)]
struct TextBlock {
    attn: SelfAttention,
    ln1: LayerNorm,
    mlp: Mlp,
    ln2: LayerNorm,
}

/// Embedding table, optional learned positions, then post-norm transformer blocks.
#[derive(Clone)]
pub struct TextEncoder {
    pub embedding: Tensor,
    position: Option<Tensor>,
    blocks: Vec<TextBlock>,
    vocab_size: usize,
    len: usize,
}

impl TextEncoder {
    pub fn new(ps: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let ps = ps.pp("text");
        let c = cfg.lang_dim;
        let embedding = ps.param("embedding", &[cfg.vocab_size, c], Init::Uniform(1.0))?;
        let position = if cfg.text_position_embedding {
            Some(ps.param("position", &[cfg.lang_len, c], Init::Uniform(0.1))?)
        } else {
            None
        };
        let blocks = (0..cfg.text_depth)
            .map(|i| {
                let b = ps.pp(format!("block{i}"));
                Ok(TextBlock {
                    attn: SelfAttention::new(&b, "attn", c, cfg.heads)?,
                    ln1: LayerNorm::new(&b, "ln1", c)?,
                    mlp: Mlp::new(&b, "mlp", c, cfg.mlp_ratio * c)?,
                    ln2: LayerNorm::new(&b, "ln2", c)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            embedding,
            position,
            blocks,
            vocab_size: cfg.vocab_size,
            len: cfg.lang_len,
        })
    }

    /// Token ids and masks of a batch as tensors.
    pub fn batch_tensors(&self, seqs: &[&TokenSeq], dtype: DType) -> Result<(Tensor, Tensor)> {
        let mut ids = Vec::with_capacity(seqs.len() * self.len);
        let mut mask = Vec::with_capacity(seqs.len() * self.len);
        for s in seqs {
            if s.ids.len() != self.len || s.attn_mask.len() != self.len {
                return Err(Error::Dimension(format!(
                    "token sequence length {} != {}",
                    s.ids.len(),
                    self.len
                )));
            }
            if !s.attn_mask.iter().any(|&m| m) {
                return Err(Error::Tokenize("sequence has no real tokens".into()));
            }
            if let Some(&bad) = s.ids.iter().find(|&&id| id as usize >= self.vocab_size) {
                return Err(Error::Tokenize(format!(
                    "token id {bad} outside vocabulary of {}",
                    self.vocab_size
                )));
            }
            ids.extend_from_slice(&s.ids);
            mask.extend(s.attn_mask.iter().map(|&m| if m { 1f64 } else { 0.0 }));
        }
        let b = seqs.len();
        let ids = Tensor::from_vec(ids, (b, self.len), &Device::Cpu)?;
        let mask = Tensor::from_vec(mask, (b, self.len), &Device::Cpu)?.to_dtype(dtype)?;
        Ok((ids, mask))
    }

    pub fn encode(&self, seqs: &[&TokenSeq]) -> Result<LanguageFeature> {
        let (ids, mask) = self.batch_tensors(seqs, self.embedding.dtype())?;
        self.forward(&ids, &mask)
    }

    pub fn forward(&self, ids: &Tensor, mask: &Tensor) -> Result<LanguageFeature> {
        let (b, l) = ids.dims2()?;
        let c = self.embedding.dim(1)?;
        let mut x = self
            .embedding
            .index_select(&ids.flatten_all()?, 0)?
            .reshape((b, l, c))?;
        if let Some(pos) = &self.position {
            x = x.broadcast_add(pos)?;
        }
        let bias = key_mask_bias(mask)?;
        for blk in &self.blocks {
            x = blk
                .ln1
                .forward(&(&x + blk.attn.forward(&x, Some(&bias))?)?)?;
            x = blk.ln2.forward(&(&x + blk.mlp.forward(&x)?)?)?;
        }
        let features = x.broadcast_mul(&mask.unsqueeze(2)?)?;
        Ok(LanguageFeature {
            features,
            mask: mask.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;

    #[test]
    fn short_expression_is_padded() {
        let v = Vocab::builtin();
        let t = tokenize("the red circle", 20, &v).unwrap();
        assert_eq!(t.ids.len(), 20);
        assert_eq!(&t.ids[..3], &[v.id("the"), v.id("red"), v.id("circle")]);
        assert!(t.ids[3..].iter().all(|&i| i == PAD_ID));
        let mut expected = vec![true; 3];
        expected.extend(vec![false; 17]);
        assert_eq!(t.attn_mask, expected);
    }

    #[test]
    fn long_expression_is_clipped_at_20() {
        let v = Vocab::builtin();
        let sentence = vec!["red"; 25].join(" ");
        let t = tokenize(&sentence, 20, &v).unwrap();
        assert_eq!(t.ids, vec![v.id("red"); 20]);
        assert!(t.attn_mask.iter().all(|&m| m));
    }

    #[test]
    fn unknown_words_and_case() {
        let v = Vocab::builtin();
        let t = tokenize("The ZEPPELIN", 4, &v).unwrap();
        assert_eq!(t.ids, vec![v.id("the"), UNK_ID, PAD_ID, PAD_ID]);
        assert_eq!(
            tokenize("the red circle", 20, &v).unwrap(),
            tokenize("the red circle", 20, &v).unwrap()
        );
        assert!(tokenize("   ", 20, &v).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::builtin();
        v.write(&path).unwrap();
        let back = Vocab::from_file(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("<pad>"), UNK_ID, "PAD is not a word");
    }

    fn encoder(position: bool) -> (TextEncoder, ModelConfig) {
        let cfg = ModelConfig {
            text_position_embedding: position,
            ..ModelConfig::default()
        };
        let ps = ParamStore::new(DType::F64, 3);
        (TextEncoder::new(&ps, &cfg).unwrap(), cfg)
    }

    #[test]
    fn output_shape_and_padding_rows() {
        let (enc, _) = encoder(true);
        let v = Vocab::builtin();
        let t = tokenize("circle", 20, &v).unwrap();
        let out = enc.encode(&[&t]).unwrap();
        assert_eq!(out.features.dims(), &[1, 20, 64]);
        let rows = out.features.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let nonzero: Vec<bool> = rows.iter().map(|r| r.iter().any(|&x| x != 0.0)).collect();
        assert_eq!(nonzero.iter().filter(|&&b| b).count(), 1);
        assert!(nonzero[0]);
    }

    #[test]
    fn out_of_range_id_rejected() {
        let (enc, _) = encoder(true);
        let mut t = tokenize("circle", 20, &Vocab::builtin()).unwrap();
        t.ids[0] = 10_000;
        assert!(matches!(enc.encode(&[&t]), Err(Error::Tokenize(_))));
    }

    #[test]
    fn pad_placement_is_irrelevant_without_positions() {
        let (enc, _) = encoder(false);
        let v = Vocab::builtin();
        let a = tokenize("the red circle", 20, &v).unwrap();
        // Same real tokens, with padding interleaved.
        let mut b = TokenSeq {
            ids: vec![PAD_ID; 20],
            attn_mask: vec![false; 20],
        };
        for (slot, &id) in [2usize, 7, 15].iter().zip(&a.ids[..3]) {
            b.ids[*slot] = id;
            b.attn_mask[*slot] = true;
        }
        let fa = to_f64_vec(&enc.encode(&[&a]).unwrap().features).unwrap();
        let fb = to_f64_vec(&enc.encode(&[&b]).unwrap().features).unwrap();
        let row = |f: &[f64], r: usize| f[r * 64..(r + 1) * 64].to_vec();
        for (ra, rb) in [(0usize, 2usize), (1, 7), (2, 15)] {
            let (x, y) = (row(&fa, ra), row(&fb, rb));
            let diff = x
                .iter()
                .zip(&y)
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12, "row {ra} vs {rb}: {diff}");
        }
    }
}
