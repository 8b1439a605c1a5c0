//! On-disk formats: BPE vocabularies, checkpoints, training traces,
//! evaluation reports, formality lexicons and plain-text corpora.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use style_forge_core::eval::{EvalReport, FormalityLexicon, SMOOTHING};
use style_forge_core::model::{Adam, AdamConfig, AttentionMode, EncoderDecoder, LanguageModel, TransformerConfig};
use style_forge_core::tokenizer::{MergeTable, Tokenizer, Vocabulary};
use style_forge_core::transfer::TraceRow;

use crate::error::{CliError, CliResult};

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_bytes(path: &Path, data: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    // Write-then-rename so an interrupted run never leaves a torn file.
    let tmp = path.with_extension("partial");
    fs::write(&tmp, data).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// One sentence per line; blank lines are kept so line numbers stay aligned.
pub fn read_lines(path: &Path) -> CliResult<Vec<String>> {
    Ok(read_text(path)?.lines().map(str::to_string).collect())
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> CliResult<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(l.as_ref());
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

/// Provenance stamped on every artifact.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

/// ```text
/// BPE v1 <vocab size>
/// config_hash=<hex>
/// seed=<n>
/// <token>            one line per id, in id order
/// merges <count>
/// <left> <right>     one line per merge, in rank order
/// ```
pub fn write_bpe(path: &Path, tok: &Tokenizer, stamp: &Stamp) -> CliResult<()> {
    let mut out = format!("BPE v1 {}\nconfig_hash={}\nseed={}\n", tok.vocab_size(), stamp.config_hash, stamp.seed);
    for t in tok.vocab.tokens() {
        out.push_str(t);
        out.push('\n');
    }
    out.push_str(&format!("merges {}\n", tok.merges.len()));
    for (l, r) in tok.merges.pairs() {
        out.push_str(&format!("{l} {r}\n"));
    }
    write_bytes(path, out.as_bytes())
}

pub fn read_bpe(path: &Path) -> CliResult<(Tokenizer, Stamp)> {
    let text = read_text(path)?;
    let bad = |m: &str| CliError::format(path, m);
    let mut lines = text.lines();
    let n: usize = lines
        .next()
        .and_then(|h| h.strip_prefix("BPE v1 "))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| bad("missing `BPE v1 <n>` header"))?;
    let mut stamp_kv = BTreeMap::new();
    for _ in 0..2 {
        let (k, v) = lines.next().and_then(|l| l.split_once('=')).ok_or_else(|| bad("truncated header"))?;
        stamp_kv.insert(k, v);
    }
    let stamp = stamp_from(&stamp_kv).ok_or_else(|| bad("header lacks config_hash/seed"))?;
    let tokens: Vec<String> = lines.by_ref().take(n).map(str::to_string).collect();
    if tokens.len() != n {
        return Err(bad("fewer tokens than the header declares"));
    }
    let m: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("merges "))
        .and_then(|m| m.parse().ok())
        .ok_or_else(|| bad("missing `merges <n>` line"))?;
    let mut pairs = Vec::with_capacity(m);
    for l in lines.by_ref().take(m) {
        let (a, b) = l.split_once(' ').ok_or_else(|| bad("merge line is not `<left> <right>`"))?;
        pairs.push((a.to_string(), b.to_string()));
    }
    if pairs.len() != m {
        return Err(bad("fewer merges than declared"));
    }
    let vocab = Vocabulary::from_tokens(tokens).map_err(|e| bad(&e.to_string()))?;
    Ok((Tokenizer { vocab, merges: MergeTable::from_pairs(pairs) }, stamp))
}

fn stamp_from(kv: &BTreeMap<&str, &str>) -> Option<Stamp> {
    Some(Stamp { config_hash: kv.get("config_hash")?.to_string(), seed: kv.get("seed")?.parse().ok()? })
}

pub const CKPT_MAGIC: &str = "STYLEFORGE-CKPT v1";

/// A parsed checkpoint: ordered `key=value` metadata plus named tensors.
///
/// ```text
/// STYLEFORGE-CKPT v1
/// key=value                       metadata, one per line
/// tensor <name> <d0,d1,..> <offset>
/// end
/// <f32 little-endian data; offsets count floats from here>
/// ```
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str, path: &Path) -> CliResult<&str> {
        self.get(key).ok_or_else(|| CliError::format(path, format!("checkpoint lacks `{key}`")))
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.tensors.iter().find(|t| t.0 == name).map(|t| t.2.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{CKPT_MAGIC}\n");
        for (k, v) in &self.meta {
            head.push_str(&format!("{k}={v}\n"));
        }
        let mut offset = 0;
        for (name, shape, data) in &self.tensors {
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            head.push_str(&format!("tensor {name} {} {offset}\n", dims.join(",")));
            offset += data.len();
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        out.reserve(offset * 4);
        for (_, _, data) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> CliResult<Self> {
        let bad = |m: String| CliError::format(path, m);
        let mut ck = Checkpoint::default();
        let mut pos = 0;
        let mut index = Vec::new();
        let mut first = true;
        loop {
            let nl = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| bad("header not terminated".into()))?;
            let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| bad("header is not UTF-8".into()))?;
            pos += nl + 1;
            if first {
                if line != CKPT_MAGIC {
                    return Err(bad(format!("not a checkpoint (expected `{CKPT_MAGIC}`)")));
                }
                first = false;
                continue;
            }
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("tensor ") {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 3 {
                    return Err(bad(format!("bad tensor line `{line}`")));
                }
                let shape: Vec<usize> = f[1]
                    .split(',')
                    .map(|d| d.parse().map_err(|_| bad(format!("bad shape in `{line}`"))))
                    .collect::<CliResult<_>>()?;
                let offset: usize = f[2].parse().map_err(|_| bad(format!("bad offset in `{line}`")))?;
                index.push((f[0].to_string(), shape, offset));
            } else {
                let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad header line `{line}`")))?;
                ck.meta.insert(k.into(), v.into());
            }
        }
        let data = &bytes[pos..];
        if data.len() % 4 != 0 {
            return Err(bad("data section is not whole f32 values".into()));
        }
        let floats: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        for (name, shape, offset) in index {
            let len: usize = shape.iter().product();
            let slice = floats
                .get(offset..offset + len)
                .ok_or_else(|| bad(format!("tensor {name} runs past the end of the data")))?;
            ck.tensors.push((name, shape, slice.to_vec()));
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        write_bytes(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    fn put_config(&mut self, c: &TransformerConfig) {
        self.set("model.num_layers", c.num_layers);
        self.set("model.hidden_size", c.hidden_size);
        self.set("model.num_heads", c.num_heads);
        self.set("model.dropout", c.dropout);
        self.set("model.max_positions", c.max_positions);
        self.set("model.vocab_size", c.vocab_size);
    }

    pub fn config(&self, path: &Path) -> CliResult<TransformerConfig> {
        let num = |k: &str| -> CliResult<usize> {
            self.require(k, path)?.parse().map_err(|_| CliError::format(path, format!("bad `{k}`")))
        };
        Ok(TransformerConfig {
            num_layers: num("model.num_layers")?,
            hidden_size: num("model.hidden_size")?,
            num_heads: num("model.num_heads")?,
            dropout: self
                .require("model.dropout", path)?
                .parse()
                .map_err(|_| CliError::format(path, "bad `model.dropout`"))?,
            max_positions: num("model.max_positions")?,
            vocab_size: num("model.vocab_size")?,
        })
    }

    fn put_params(&mut self, specs: &[style_forge_core::model::TensorSpec], data: &[f32]) {
        for s in specs {
            self.tensors.push((s.name.clone(), s.shape.clone(), s.slot.of(data).to_vec()));
        }
    }

    fn put_adam(&mut self, opt: &Adam<f32>) {
        let (m, v) = opt.moments();
        self.set("adam.t", opt.steps());
        self.tensors.push(("adam.m".into(), vec![m.len()], m.to_vec()));
        self.tensors.push(("adam.v".into(), vec![v.len()], v.to_vec()));
    }

    /// Adam state stored alongside the parameters, if any.
    pub fn adam(&self, cfg: AdamConfig, path: &Path) -> CliResult<Option<Adam<f32>>> {
        let (Some(m), Some(v), Some(t)) = (self.tensor("adam.m"), self.tensor("adam.v"), self.get("adam.t")) else {
            return Ok(None);
        };
        let t = t.parse().map_err(|_| CliError::format(path, "bad `adam.t`"))?;
        Ok(Some(Adam::from_state(cfg, m.to_vec(), v.to_vec(), t)?))
    }

    fn params(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.tensors.iter().filter(|t| !t.0.starts_with("adam.")).map(|t| (t.0.as_str(), t.2.as_slice()))
    }

    pub fn from_lm(lm: &LanguageModel<f32>, opt: Option<&Adam<f32>>) -> Self {
        let mut ck = Checkpoint::default();
        ck.set("kind", "lm");
        ck.set("mode", lm.mode().name());
        ck.put_config(lm.config());
        ck.set("params_hash", lm.fingerprint());
        ck.put_params(lm.params().specs(), lm.params().data());
        if let Some(o) = opt {
            ck.put_adam(o);
        }
        ck
    }

    pub fn to_lm(&self, path: &Path) -> CliResult<LanguageModel<f32>> {
        if self.get("kind") != Some("lm") {
            return Err(CliError::format(path, "not a language-model checkpoint"));
        }
        let mode = AttentionMode::parse(self.require("mode", path)?)
            .ok_or_else(|| CliError::format(path, "unknown attention mode"))?;
        let mut lm = LanguageModel::zeros(self.config(path)?, mode)?;
        lm.params_mut().load(self.params())?;
        Ok(lm)
    }

    pub fn from_encdec(ed: &EncoderDecoder<f32>, opt: Option<&Adam<f32>>) -> Self {
        let mut ck = Checkpoint::default();
        ck.set("kind", "encdec");
        ck.put_config(ed.config());
        ck.set("params_hash", ed.fingerprint());
        ck.put_params(ed.params().specs(), ed.params().data());
        if let Some(o) = opt {
            ck.put_adam(o);
        }
        ck
    }

    pub fn to_encdec(&self, path: &Path) -> CliResult<EncoderDecoder<f32>> {
        if self.get("kind") != Some("encdec") {
            return Err(CliError::format(path, "not an encoder-decoder checkpoint"));
        }
        let mut ed = EncoderDecoder::zeros(self.config(path)?)?;
        ed.params_mut().load(self.params())?;
        Ok(ed)
    }

    pub fn stamp(&mut self, stamp: &Stamp) {
        self.set("config_hash", &stamp.config_hash);
        self.set("seed", stamp.seed);
    }
}

/// One line per step of space-separated `key=value` pairs.
pub fn trace_line(row: &TraceRow, tok: &Tokenizer) -> String {
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",");
    let sample = row
        .samples
        .first()
        .and_then(|s| tok.decode(s).ok())
        .map(|s| s.replace(' ', "_"))
        .unwrap_or_default();
    format!(
        "step={} total={:.6} l_dae={:.6} l_styles={} mean_advantage={} dropped={} sample={}",
        row.step,
        row.total,
        row.l_dae,
        join(&row.l_styles),
        join(&row.mean_advantages),
        row.dropped,
        sample
    )
}

/// Parse a trace line back into its fields.
pub fn parse_trace_line(line: &str) -> BTreeMap<String, String> {
    line.split(' ').filter_map(|kv| kv.split_once('=')).map(|(k, v)| (k.into(), v.into())).collect()
}

/// Keep the first `steps` rows of a trace (used when resuming).
pub fn truncate_trace(path: &Path, steps: usize) -> CliResult<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<String> = read_lines(path)?
        .into_iter()
        .filter(|l| parse_trace_line(l).get("step").and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s <= steps))
        .collect();
    write_lines(path, &kept)
}

pub fn append_line(path: &Path, line: &str) -> CliResult<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| CliError::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| CliError::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |x| format!("{x:.4}"))
}

/// Key-value text form of an evaluation report.
pub fn report_text(r: &EvalReport, stamp: &Stamp) -> String {
    let mut out = format!("config_hash={}\nseed={}\nsentences={}\n", stamp.config_hash, stamp.seed, r.sentences);
    for a in &r.style_accuracy {
        out.push_str(&format!("style_accuracy.{}.{}={:.2}\n", a.dimension, a.label, a.accuracy));
    }
    out.push_str(&format!("joint_accuracy={}\n", opt(r.joint_accuracy)));
    out.push_str(&format!("lexical_formality={}\n", opt(r.lexical_formality)));
    out.push_str(&format!("self_bleu={:.4}\n", r.self_bleu));
    out.push_str(&format!("ref_bleu={}\n", opt(r.ref_bleu)));
    out.push_str(&format!("fluency_perplexity={}\n", opt(r.fluency_perplexity)));
    out.push_str(&format!("bleu_smoothing={SMOOTHING}\nbleu_lowercase={}\n", r.bleu_lowercase));
    out
}

/// Single-line JSON form of an evaluation report.
pub fn report_json(r: &EvalReport, stamp: &Stamp) -> String {
    let styles: serde_json::Map<String, serde_json::Value> = r
        .style_accuracy
        .iter()
        .map(|a| (format!("{}.{}", a.dimension, a.label), serde_json::json!(a.accuracy)))
        .collect();
    serde_json::json!({
        "config_hash": stamp.config_hash,
        "seed": stamp.seed,
        "sentences": r.sentences,
        "style_accuracy": styles,
        "joint_accuracy": r.joint_accuracy,
        "lexical_formality": r.lexical_formality,
        "self_bleu": r.self_bleu,
        "ref_bleu": r.ref_bleu,
        "fluency_perplexity": r.fluency_perplexity,
        "bleu_smoothing": SMOOTHING,
        "bleu_lowercase": r.bleu_lowercase,
    })
    .to_string()
}

/// `word<TAB>score` per line.
pub fn read_lexicon(path: &Path) -> CliResult<FormalityLexicon> {
    let mut entries = Vec::new();
    for (n, line) in read_text(path)?.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (w, s) = line
            .split_once('\t')
            .ok_or_else(|| CliError::format(path, format!("line {}: expected word<TAB>score", n + 1)))?;
        let s: f64 = s.trim().parse().map_err(|_| CliError::format(path, format!("line {}: bad score", n + 1)))?;
        entries.push((w.to_string(), s));
    }
    FormalityLexicon::new(entries).map_err(|e| CliError::format(path, e.to_string()))
}

/// A small hand-built formality lexicon (positive = formal).
pub const BUILTIN_LEXICON: &str = include_str!("../data/formality_lexicon.tsv");

#[cfg(test)]
mod tests {
    use super::*;
    use style_forge_core::model::AdamConfig;

    fn stamp() -> Stamp {
        Stamp { config_hash: "abc".into(), seed: 4 }
    }

    #[test]
    fn bpe_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.bpe");
        let tok = Tokenizer::train(&["low lower lowest", "new newer"], 20).unwrap();
        write_bpe(&p, &tok, &stamp()).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(&format!("BPE v1 {}\n", tok.vocab_size())));
        let (back, s) = read_bpe(&p).unwrap();
        assert_eq!(back, tok);
        assert_eq!(s, stamp());
    }

    #[test]
    fn checkpoint_roundtrip_keeps_params_and_optimizer() {
        let cfg = TransformerConfig { num_layers: 1, hidden_size: 8, num_heads: 2, dropout: 0.0, max_positions: 8, vocab_size: 12 };
        let lm = LanguageModel::<f32>::new(cfg, AttentionMode::Causal, 3).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), lm.param_count());
        let mut p = lm.params().data().to_vec();
        let g = vec![0.5; p.len()];
        opt.step(&mut p, &g);
        let mut ck = Checkpoint::from_lm(&lm, Some(&opt));
        ck.stamp(&stamp());
        ck.set("step", 17);
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("x")).unwrap();
        assert_eq!(back, ck);
        let lm2 = back.to_lm(Path::new("x")).unwrap();
        assert_eq!(lm2.fingerprint(), lm.fingerprint());
        assert_eq!(lm2.mode(), AttentionMode::Causal);
        let opt2 = back.adam(AdamConfig::default(), Path::new("x")).unwrap().unwrap();
        assert_eq!(opt2.moments(), opt.moments());
        assert_eq!(opt2.steps(), 1);
        assert!(back.to_encdec(Path::new("x")).is_err());
    }

    #[test]
    fn corrupt_checkpoints_are_format_errors() {
        let p = Path::new("c");
        assert_eq!(Checkpoint::from_bytes(b"nope\n", p).unwrap_err().exit_code(), 2);
        let bad = format!("{CKPT_MAGIC}\ntensor w 2,2 0\nend\n");
        assert!(Checkpoint::from_bytes(bad.as_bytes(), p).is_err());
        let mut trunc = format!("{CKPT_MAGIC}\nkind=lm\n").into_bytes();
        trunc.extend_from_slice(&[0, 0]);
        assert!(Checkpoint::from_bytes(&trunc, p).is_err());
    }

    #[test]
    fn shipped_lexicon_parses() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lex.tsv");
        fs::write(&p, BUILTIN_LEXICON).unwrap();
        let lex = read_lexicon(&p).unwrap();
        assert!(lex.len() >= 20);
        fs::write(&p, "word 1.0\n").unwrap();
        assert!(read_lexicon(&p).is_err());
    }

    #[test]
    fn trace_lines_parse_back() {
        let tok = Tokenizer::train(&["a b"], 2).unwrap();
        let row = TraceRow {
            step: 3,
            l_dae: 1.5,
            l_styles: vec![0.25, -1.0],
            total: 0.75,
            mean_advantages: vec![0.1, 0.2],
            dropped: 0,
            samples: vec![],
        };
        let kv = parse_trace_line(&trace_line(&row, &tok));
        assert_eq!(kv["step"], "3");
        assert_eq!(kv["l_styles"], "0.250000,-1.000000");
    }
}
