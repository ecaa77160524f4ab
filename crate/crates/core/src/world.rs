//! Synthetic generative world of (content text, style prompt, speech tokens).
//!
//! Each character of the content maps to a fixed pair of base units; each
//! speech token is `style_id * base_units + unit`. Style occupies the high
//! digit and content the low digit, so both factors are recoverable exactly
//! from clean speech.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompts::PromptTemplates;
use crate::rng::CounterRng;

/// Characters that may appear in content text.
pub const CHAR_VOCAB: &str = "abcdefghijklmnopqrstuvwxyz ";

/// Stands in for a character the oracle cannot invert unambiguously.
pub const FAILURE_MARK: char = '?';

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_styles: usize,
    pub base_units: usize,
    pub units_per_char: usize,
    pub noise_rate: f64,
    pub min_chars: usize,
    pub max_chars: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_styles: 8,
            base_units: 64,
            units_per_char: 2,
            noise_rate: 0.02,
            min_chars: 4,
            max_chars: 24,
            seed: 0,
        }
    }
}

impl WorldConfig {
    /// Speech vocabulary size `n_styles * base_units`.
    pub fn vocab_size(&self) -> usize {
        self.n_styles * self.base_units
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_styles == 0 || self.base_units == 0 || self.units_per_char == 0 {
            return Err(Error::Config("world sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!("noise_rate {} outside [0, 1]", self.noise_rate)));
        }
        if self.min_chars == 0 || self.min_chars > self.max_chars {
            return Err(Error::Config("content length range is empty".into()));
        }
        let chars = CHAR_VOCAB.chars().count() as u64;
        let patterns = (self.base_units as u64).checked_pow(self.units_per_char as u32);
        if patterns.map(|p| p < chars).unwrap_or(false) {
            return Err(Error::Config("too few unit patterns for the character set".into()));
        }
        Ok(())
    }
}

/// Fixed character → unit-sequence table derived from the world seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitTable {
    units_per_char: usize,
    rows: BTreeMap<char, Vec<u32>>,
}

impl UnitTable {
    /// Draws one distinct unit pattern per character in `CHAR_VOCAB` order,
    /// redrawing any pattern already taken.
    pub fn generate(cfg: &WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = CounterRng::new(cfg.seed, "unit-table");
        let mut rows = BTreeMap::new();
        let mut taken = std::collections::HashSet::new();
        for c in CHAR_VOCAB.chars() {
            loop {
                let units: Vec<u32> = (0..cfg.units_per_char)
                    .map(|_| rng.below(cfg.base_units as u64) as u32)
                    .collect();
                if taken.insert(units.clone()) {
                    rows.insert(c, units);
                    break;
                }
            }
        }
        Ok(Self {
            units_per_char: cfg.units_per_char,
            rows,
        })
    }

    pub fn units_per_char(&self) -> usize {
        self.units_per_char
    }

    pub fn char_to_units(&self, c: char) -> Result<&[u32]> {
        self.rows
            .get(&c)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidInput(format!("character {c:?} is not in the world vocabulary")))
    }

    /// Inverts a unit group: exact match, else the unique nearest pattern by
    /// Hamming distance, else `None` (ambiguous).
    pub fn invert(&self, units: &[u32]) -> Option<char> {
        let mut best: Option<(usize, char)> = None;
        let mut tie = false;
        for (&c, row) in &self.rows {
            let dist = row.iter().zip(units).filter(|(a, b)| a != b).count();
            match best {
                Some((d, _)) if dist > d => {}
                Some((d, _)) if dist == d => tie = true,
                _ => {
                    best = Some((dist, c));
                    tie = false;
                }
            }
        }
        match best {
            Some((0, c)) => Some(c),
            Some((_, c)) if !tie => Some(c),
            _ => None,
        }
    }

    /// One line per character: `<char-code> <unit> <unit> ...`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (c, units) in &self.rows {
            let _ = write!(s, "{}", *c as u32);
            for u in units {
                let _ = write!(s, " {u}");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = BTreeMap::new();
        let mut width = None;
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let nums: Vec<u32> = line
                .split_whitespace()
                .map(|t| t.parse::<u32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Data(format!("unit table line {}: {e}", n + 1)))?;
            let (&code, units) = nums
                .split_first()
                .ok_or_else(|| Error::Data(format!("unit table line {} is empty", n + 1)))?;
            let c = char::from_u32(code)
                .ok_or_else(|| Error::Data(format!("unit table line {}: bad char", n + 1)))?;
            if *width.get_or_insert(units.len()) != units.len() || units.is_empty() {
                return Err(Error::Data(format!("unit table line {}: ragged row", n + 1)));
            }
            rows.insert(c, units.to_vec());
        }
        let units_per_char = width.ok_or_else(|| Error::Data("unit table is empty".into()))?;
        Ok(Self { units_per_char, rows })
    }
}

/// Deterministic table lookup of one character.
pub fn char_to_units(c: char, cfg: &WorldConfig) -> Result<Vec<u32>> {
    Ok(UnitTable::generate(cfg)?.char_to_units(c)?.to_vec())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyUtterance {
    pub utt_id: String,
    pub text: String,
    pub style_id: usize,
    pub prompt: String,
    pub speech: Vec<u32>,
}

/// Samples one utterance. Also returns how many tokens were corrupted.
pub fn sample_utterance_counted(
    rng: &mut CounterRng,
    cfg: &WorldConfig,
    table: &UnitTable,
    templates: &PromptTemplates,
    utt_id: String,
) -> Result<(ToyUtterance, usize)> {
    if templates.len() < cfg.n_styles {
        return Err(Error::Config(format!(
            "{} prompt templates for {} styles",
            templates.len(),
            cfg.n_styles
        )));
    }
    let chars: Vec<char> = CHAR_VOCAB.chars().collect();
    let len = rng.range_inclusive(cfg.min_chars as u64, cfg.max_chars as u64) as usize;
    let text: String = (0..len)
        .map(|_| chars[rng.below(chars.len() as u64) as usize])
        .collect();
    let style_id = rng.below(cfg.n_styles as u64) as usize;
    let vocab = cfg.vocab_size() as u64;
    let mut speech = Vec::with_capacity(len * cfg.units_per_char);
    let mut corrupted = 0;
    for c in text.chars() {
        for &u in table.char_to_units(c)? {
            let clean = (style_id * cfg.base_units) as u32 + u;
            if rng.bernoulli(cfg.noise_rate) {
                speech.push(rng.below(vocab) as u32);
                corrupted += 1;
            } else {
                speech.push(clean);
            }
        }
    }
    Ok((
        ToyUtterance {
            utt_id,
            text,
            style_id,
            prompt: templates.get(style_id).unwrap_or_default().to_string(),
            speech,
        },
        corrupted,
    ))
}

pub fn sample_utterance(
    rng: &mut CounterRng,
    cfg: &WorldConfig,
    table: &UnitTable,
    templates: &PromptTemplates,
    utt_id: String,
) -> Result<ToyUtterance> {
    Ok(sample_utterance_counted(rng, cfg, table, templates, utt_id)?.0)
}

/// Clean speech for `text` in `style_id`, without noise.
pub fn render_clean(text: &str, style_id: usize, cfg: &WorldConfig, table: &UnitTable) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for c in text.chars() {
        for &u in table.char_to_units(c)? {
            out.push((style_id * cfg.base_units) as u32 + u);
        }
    }
    Ok(out)
}

/// Majority vote of `token / base_units`; ties go to the lowest style.
pub fn oracle_style_of(speech: &[u32], cfg: &WorldConfig) -> Result<usize> {
    if speech.is_empty() {
        return Err(Error::InvalidInput("empty speech".into()));
    }
    let mut counts = vec![0usize; cfg.n_styles.max(1)];
    for &t in speech {
        let s = t as usize / cfg.base_units;
        if s < counts.len() {
            counts[s] += 1;
        }
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    Ok(counts.iter().position(|&c| c == best).unwrap_or(0))
}

/// Inverts speech to text, one character per unit group. Ambiguous groups
/// become [`FAILURE_MARK`].
pub fn oracle_text_of(speech: &[u32], cfg: &WorldConfig, table: &UnitTable) -> Result<String> {
    let k = table.units_per_char();
    if speech.is_empty() || speech.len() % k != 0 {
        return Err(Error::InvalidInput(format!(
            "speech length {} is not a positive multiple of {k}",
            speech.len()
        )));
    }
    Ok(speech
        .chunks(k)
        .map(|group| {
            let units: Vec<u32> = group.iter().map(|&t| t % cfg.base_units as u32).collect();
            table.invert(&units).unwrap_or(FAILURE_MARK)
        })
        .collect())
}

/// Levenshtein distance over characters.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 10_000.0 / 11_000.0,
            dev: 500.0 / 11_000.0,
            test: 500.0 / 11_000.0,
        }
    }
}

impl SplitRatios {
    /// Split sizes summing to `n`; train and dev are rounded, test takes the rest.
    pub fn sizes(&self, n: usize) -> Result<[usize; 3]> {
        let total = self.train + self.dev + self.test;
        if [self.train, self.dev, self.test].iter().any(|r| *r < 0.0) || total <= 0.0 {
            return Err(Error::Config("split ratios must be non-negative with a positive sum".into()));
        }
        let train = ((n as f64) * self.train / total).round() as usize;
        let dev = (((n as f64) * self.dev / total).round() as usize).min(n - train.min(n));
        let train = train.min(n);
        Ok([train, dev, n - train - dev])
    }
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "dev", "test"];

/// Paths of a persisted corpus.
#[derive(Debug, Clone)]
pub struct CorpusFiles {
    pub dir: PathBuf,
}

impl CorpusFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.jsonl"))
    }

    pub fn unit_table(&self) -> PathBuf {
        self.dir.join("unit_table.txt")
    }

    pub fn prompts(&self) -> PathBuf {
        self.dir.join("prompts.txt")
    }

    pub fn world_config(&self) -> PathBuf {
        self.dir.join("world.json")
    }

    pub fn load_world(&self) -> Result<WorldConfig> {
        let p = self.world_config();
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn load_table(&self) -> Result<UnitTable> {
        let p = self.unit_table();
        UnitTable::parse(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)
    }

    pub fn load_prompts(&self) -> Result<PromptTemplates> {
        PromptTemplates::load(&self.prompts())
    }

    pub fn load_split(&self, name: &str) -> Result<Vec<ToyUtterance>> {
        read_jsonl(&self.split(name))
    }
}

#[derive(Debug, Clone)]
pub struct CorpusSummary {
    pub sizes: [usize; 3],
    pub corrupted_tokens: usize,
    pub total_tokens: usize,
}

/// Generates `n` utterances and writes splits, the unit table, the prompt
/// templates and the world config under `dir`. Pure in `(n, cfg)`.
pub fn make_corpus(
    n: usize,
    cfg: &WorldConfig,
    ratios: &SplitRatios,
    templates: &PromptTemplates,
    dir: &Path,
) -> Result<CorpusSummary> {
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    let table = UnitTable::generate(cfg)?;
    let sizes = ratios.sizes(n)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = CorpusFiles::new(dir);
    let base = CounterRng::new(cfg.seed, "utterances");
    let mut corrupted_tokens = 0;
    let mut total_tokens = 0;
    let mut index = 0u64;
    for (name, &size) in SPLIT_NAMES.iter().zip(&sizes) {
        let mut lines = String::new();
        for _ in 0..size {
            let mut rng = base.fork_index(index);
            let id = format!("utt{index:06}");
            let (utt, bad) = sample_utterance_counted(&mut rng, cfg, &table, templates, id)?;
            corrupted_tokens += bad;
            total_tokens += utt.speech.len();
            lines.push_str(&serde_json::to_string(&utt)?);
            lines.push('\n');
            index += 1;
        }
        write_file(&files.split(name), lines.as_bytes())?;
    }
    write_file(&files.unit_table(), table.to_text().as_bytes())?;
    write_file(&files.prompts(), templates.to_text().as_bytes())?;
    write_file(&files.world_config(), serde_json::to_string_pretty(cfg)?.as_bytes())?;
    Ok(CorpusSummary {
        sizes,
        corrupted_tokens,
        total_tokens,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(noise: f64) -> (WorldConfig, UnitTable, PromptTemplates) {
        let cfg = WorldConfig {
            noise_rate: noise,
            ..Default::default()
        };
        let table = UnitTable::generate(&cfg).unwrap();
        (cfg, table, PromptTemplates::builtin())
    }

    #[test]
    fn char_units_are_deterministic_and_in_range() {
        let cfg = WorldConfig::default();
        for c in CHAR_VOCAB.chars() {
            let a = char_to_units(c, &cfg).unwrap();
            assert_eq!(a, char_to_units(c, &cfg).unwrap());
            assert!(a.iter().all(|&u| u < 64));
        }
        assert!(char_to_units('#', &cfg).is_err());
    }

    #[test]
    fn clean_utterances_invert_exactly() {
        let (cfg, table, tpl) = setup(0.0);
        let mut rng = CounterRng::new(5, "t");
        for i in 0..200 {
            let u = sample_utterance(&mut rng, &cfg, &table, &tpl, format!("u{i}")).unwrap();
            assert_eq!(u.speech.len(), 2 * u.text.len());
            assert!(u.speech.iter().all(|&t| t as usize / 64 == u.style_id));
            assert_eq!(oracle_style_of(&u.speech, &cfg).unwrap(), u.style_id);
            assert_eq!(oracle_text_of(&u.speech, &cfg, &table).unwrap(), u.text);
            assert_eq!(u.prompt, tpl.get(u.style_id).unwrap());
        }
    }

    #[test]
    fn single_corruption_is_local() {
        let (cfg, table, _) = setup(0.0);
        let text = "hello world";
        let clean = render_clean(text, 3, &cfg, &table).unwrap();
        for pos in 0..clean.len() {
            for replacement in [0u32, 77, 511] {
                let mut bad = clean.clone();
                bad[pos] = replacement;
                let out = oracle_text_of(&bad, &cfg, &table).unwrap();
                let wrong = out.chars().zip(text.chars()).filter(|(a, b)| a != b).count();
                assert!(wrong <= 1, "{out:?}");
            }
        }
    }

    #[test]
    fn oracle_edge_cases() {
        let (cfg, table, _) = setup(0.0);
        assert_eq!(oracle_style_of(&[0, 0, 0], &cfg).unwrap(), 0);
        assert!(oracle_style_of(&[], &cfg).is_err());
        assert!(oracle_text_of(&[1, 2, 3], &cfg, &table).is_err());
    }

    #[test]
    fn edit_distance_basics() {
        assert_eq!(edit_distance("kitten", "sitting"), 3);
        assert_eq!(edit_distance("", "abc"), 3);
        assert_eq!(edit_distance("abc", "abc"), 0);
    }

    #[test]
    fn split_sizes_follow_ratios() {
        let r = SplitRatios { train: 0.8, dev: 0.1, test: 0.1 };
        assert_eq!(r.sizes(10).unwrap(), [8, 1, 1]);
        let s = r.sizes(7).unwrap();
        assert_eq!(s.iter().sum::<usize>(), 7);
        assert_eq!(SplitRatios::default().sizes(11_000).unwrap(), [10_000, 500, 500]);
    }

    #[test]
    fn unit_table_text_round_trip() {
        let (_, table, _) = setup(0.0);
        assert_eq!(UnitTable::parse(&table.to_text()).unwrap(), table);
    }
}
