//! Synthetic grounded yes/no benchmark.
//!
//! A scene is a short list of distinct objects; the question asks whether one
//! query object is present. Object frequencies are Zipf-skewed and objects
//! cluster into topics, so some absent objects are "popular" and some co-occur
//! strongly with what is in the scene. Negatives are drawn per split:
//!
//! * `random`: any absent object, uniformly
//! * `popular`: an absent object among the `popular_k` most frequent
//! * `adversarial`: an absent object among the `adversarial_k` with the highest
//!   co-occurrence with the scene's objects
//!
//! Token layout: `[BOS, scene.., SEP, query, Q, answer]`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("infeasible data config: {0}")]
    Config(String),
    #[error("malformed token sequence: {0}")]
    Tokens(String),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset json (line {line}): {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Random,
    Popular,
    Adversarial,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Random, Split::Popular, Split::Adversarial];

    pub fn name(self) -> &'static str {
        match self {
            Split::Random => "random",
            Split::Popular => "popular",
            Split::Adversarial => "adversarial",
        }
    }
}

/// Integer vocabulary: five special tokens, then one token per object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub pad: usize,
    pub bos: usize,
    pub sep: usize,
    pub query: usize,
    pub yes: usize,
    pub no: usize,
    pub object_offset: usize,
    pub n_objects: usize,
    pub size: usize,
}

impl Vocabulary {
    pub fn new(n_objects: usize) -> Self {
        Self {
            pad: 0,
            bos: 1,
            sep: 2,
            query: 3,
            yes: 4,
            no: 5,
            object_offset: 6,
            n_objects,
            size: 6 + n_objects,
        }
    }

    pub fn object_token(&self, object: usize) -> usize {
        self.object_offset + object
    }

    pub fn token_object(&self, token: usize) -> Option<usize> {
        (token >= self.object_offset && token < self.size).then(|| token - self.object_offset)
    }

    pub fn answer_token(&self, label: Label) -> usize {
        match label {
            Label::Yes => self.yes,
            Label::No => self.no,
        }
    }

    pub fn token_label(&self, token: usize) -> Option<Label> {
        if token == self.yes {
            Some(Label::Yes)
        } else if token == self.no {
            Some(Label::No)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneQAExample {
    pub id: usize,
    pub scene: Vec<usize>,
    pub query: usize,
    /// ground truth: yes iff `query` is in `scene`
    pub label: Label,
    /// answer written into the token sequence; differs from `label` only for bias-flipped examples
    pub target: Label,
    pub split: Split,
}

impl SceneQAExample {
    pub fn tokens(&self, vocab: &Vocabulary) -> Vec<usize> {
        let mut t = self.prompt_tokens(vocab);
        t.push(vocab.answer_token(self.target));
        t
    }

    /// Everything up to and including the question marker; the next token is the answer.
    pub fn prompt_tokens(&self, vocab: &Vocabulary) -> Vec<usize> {
        let mut t = Vec::with_capacity(self.scene.len() + 5);
        t.push(vocab.bos);
        t.extend(self.scene.iter().map(|&o| vocab.object_token(o)));
        t.push(vocab.sep);
        t.push(vocab.object_token(self.query));
        t.push(vocab.query);
        t
    }

    /// Parses a full token sequence back into scene, query and answer.
    pub fn parse_tokens(tokens: &[usize], vocab: &Vocabulary) -> Result<(Vec<usize>, usize, Label), DataError> {
        let bad = |why: &str| DataError::Tokens(format!("{why}: {tokens:?}"));
        if tokens.len() < 5 || tokens[0] != vocab.bos {
            return Err(bad("missing BOS or too short"));
        }
        let n = tokens.len();
        if tokens[n - 4] != vocab.sep || tokens[n - 2] != vocab.query {
            return Err(bad("separator or question marker misplaced"));
        }
        let scene = tokens[1..n - 4]
            .iter()
            .map(|&t| vocab.token_object(t).ok_or_else(|| bad("non-object in scene")))
            .collect::<Result<Vec<_>, _>>()?;
        let query = vocab.token_object(tokens[n - 3]).ok_or_else(|| bad("non-object query"))?;
        let answer = vocab.token_label(tokens[n - 1]).ok_or_else(|| bad("answer is not yes/no"))?;
        Ok((scene, query, answer))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitMix {
    pub random: f64,
    pub popular: f64,
    pub adversarial: f64,
}

impl SplitMix {
    pub fn only(split: Split) -> Self {
        let mut m = Self {
            random: 0.0,
            popular: 0.0,
            adversarial: 0.0,
        };
        match split {
            Split::Random => m.random = 1.0,
            Split::Popular => m.popular = 1.0,
            Split::Adversarial => m.adversarial = 1.0,
        }
        m
    }

    pub fn even() -> Self {
        Self {
            random: 1.0,
            popular: 1.0,
            adversarial: 1.0,
        }
    }

    /// Example counts per split; weights are normalized, rounding goes to the last nonzero split.
    fn counts(&self, n: usize) -> Result<[usize; 3], DataError> {
        let w = [self.random, self.popular, self.adversarial];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(DataError::Config("split_mix weights must be non-negative with a positive sum".into()));
        }
        let total: f64 = w.iter().sum();
        let mut c = [0usize; 3];
        let last = w.iter().rposition(|x| *x > 0.0).unwrap();
        let mut used = 0;
        for i in 0..3 {
            if i != last {
                c[i] = ((w[i] / total) * n as f64).round() as usize;
                used += c[i];
            }
        }
        c[last] = n.saturating_sub(used);
        Ok(c)
    }
}

/// Label flipping applied to negatives when building a biased corpus.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSpec {
    /// probability that a popular-split negative is written with answer "yes"
    pub popular_flip: f64,
    /// same for adversarial-split negatives
    #[serde(default)]
    pub adversarial_flip: f64,
}

impl BiasSpec {
    pub fn none() -> Self {
        Self::default()
    }
}

/// Shape of the object world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub n_objects: usize,
    pub scene_len: usize,
    pub n_topics: usize,
    /// sampling weight multiplier for objects of the scene's topic
    pub topic_boost: f64,
    pub zipf_exponent: f64,
    pub popular_k: usize,
    pub adversarial_k: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            n_objects: 64,
            scene_len: 4,
            n_topics: 8,
            topic_boost: 6.0,
            zipf_exponent: 1.0,
            popular_k: 8,
            adversarial_k: 3,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: String| Err(DataError::Config(m));
        if self.scene_len == 0 || self.scene_len >= self.n_objects {
            return err(format!(
                "scene_len {} must be in 1..n_objects ({})",
                self.scene_len, self.n_objects
            ));
        }
        if self.popular_k <= self.scene_len || self.popular_k > self.n_objects {
            return err(format!(
                "popular_k {} must exceed scene_len {} and not exceed n_objects",
                self.popular_k, self.scene_len
            ));
        }
        if self.adversarial_k == 0 || self.adversarial_k > self.n_objects - self.scene_len {
            return err("adversarial_k must be in 1..=n_objects-scene_len".into());
        }
        if self.n_topics == 0 || !(self.topic_boost > 0.0) || !self.zipf_exponent.is_finite() {
            return err("n_topics, topic_boost and zipf_exponent must be positive and finite".into());
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.n_objects)
    }

    fn topic(&self, object: usize) -> usize {
        object % self.n_topics
    }
}

/// Frequency and co-occurrence counts over a set of scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub frequency: Vec<usize>,
    /// `cooccurrence[a][b]`: scenes containing both `a` and `b` (`a != b`)
    pub cooccurrence: Vec<Vec<usize>>,
    /// the `popular_k` most frequent objects, most frequent first, ties by id
    pub popular: Vec<usize>,
}

impl CorpusStats {
    pub fn from_scenes(scenes: &[Vec<usize>], n_objects: usize, popular_k: usize) -> Self {
        let mut frequency = vec![0; n_objects];
        let mut cooccurrence = vec![vec![0; n_objects]; n_objects];
        for s in scenes {
            for &a in s {
                frequency[a] += 1;
                for &b in s {
                    if a != b {
                        cooccurrence[a][b] += 1;
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..n_objects).collect();
        order.sort_by(|&a, &b| frequency[b].cmp(&frequency[a]).then(a.cmp(&b)));
        order.truncate(popular_k);
        Self {
            frequency,
            cooccurrence,
            popular: order,
        }
    }

    /// Summed co-occurrence of `object` with every object of `scene`.
    pub fn scene_affinity(&self, scene: &[usize], object: usize) -> usize {
        scene.iter().map(|&s| self.cooccurrence[s][object]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub examples: Vec<SceneQAExample>,
    pub stats: CorpusStats,
}

fn sample_scene(world: &WorldSpec, rng: &mut rng::Rng) -> Vec<usize> {
    let topic = rng.random_range(0..world.n_topics);
    let objects: Vec<usize> = (0..world.n_objects).collect();
    let weight = |&o: &usize| {
        let base = ((o + 1) as f64).powf(-world.zipf_exponent);
        if world.topic(o) == topic {
            base * world.topic_boost
        } else {
            base
        }
    };
    let mut scene: Vec<usize> = objects
        .choose_multiple_weighted(rng, world.scene_len, weight)
        .expect("positive finite weights")
        .copied()
        .collect();
    scene.shuffle(rng);
    scene
}

fn pick_negative(
    split: Split,
    scene: &[usize],
    world: &WorldSpec,
    stats: &CorpusStats,
    rng: &mut rng::Rng,
) -> usize {
    let absent = |o: &usize| !scene.contains(o);
    let pool: Vec<usize> = match split {
        Split::Random => (0..world.n_objects).filter(absent).collect(),
        Split::Popular => stats.popular.iter().copied().filter(absent).collect(),
        Split::Adversarial => {
            let mut cands: Vec<usize> = (0..world.n_objects).filter(absent).collect();
            cands.sort_by(|&a, &b| {
                stats
                    .scene_affinity(scene, b)
                    .cmp(&stats.scene_affinity(scene, a))
                    .then(a.cmp(&b))
            });
            cands.truncate(world.adversarial_k);
            cands
        }
    };
    *pool.choose(rng).expect("validated world leaves an absent candidate")
}

/// Builds `n_examples` examples. Each split gets an exact yes/no balance
/// (`floor(n/2)` positives); bias flips apply to negatives only.
pub fn generate_dataset(
    world: &WorldSpec,
    n_examples: usize,
    mix: SplitMix,
    bias: BiasSpec,
    seed: u64,
) -> Result<Dataset, DataError> {
    world.validate()?;
    for p in [bias.popular_flip, bias.adversarial_flip] {
        if !(0.0..=1.0).contains(&p) {
            return Err(DataError::Config("bias flip probabilities must lie in [0, 1]".into()));
        }
    }
    let counts = mix.counts(n_examples)?;
    let mut rng = rng::derive(seed, 0xDA7A);
    let scenes: Vec<Vec<usize>> = (0..n_examples).map(|_| sample_scene(world, &mut rng)).collect();
    let stats = CorpusStats::from_scenes(&scenes, world.n_objects, world.popular_k);

    let mut plan: Vec<(Split, Label)> = Vec::with_capacity(n_examples);
    for (split, &count) in Split::ALL.iter().zip(&counts) {
        let pos = count / 2;
        plan.extend(std::iter::repeat_n((*split, Label::Yes), pos));
        plan.extend(std::iter::repeat_n((*split, Label::No), count - pos));
    }
    plan.shuffle(&mut rng);

    let coin = Uniform::new(0.0, 1.0).expect("unit interval");
    let examples = scenes
        .into_iter()
        .zip(plan)
        .enumerate()
        .map(|(id, (scene, (split, label)))| {
            let query = match label {
                Label::Yes => *scene.choose(&mut rng).expect("non-empty scene"),
                Label::No => pick_negative(split, &scene, world, &stats, &mut rng),
            };
            let flip = match (label, split) {
                (Label::No, Split::Popular) => bias.popular_flip,
                (Label::No, Split::Adversarial) => bias.adversarial_flip,
                _ => 0.0,
            };
            let target = if flip > 0.0 && coin.sample(&mut rng) < flip {
                Label::Yes
            } else {
                label
            };
            SceneQAExample {
                id,
                scene,
                query,
                label,
                target,
                split,
            }
        })
        .collect();
    Ok(Dataset {
        vocab: world.vocabulary(),
        examples,
        stats,
    })
}

impl Dataset {
    pub fn by_split(&self) -> BTreeMap<Split, Vec<&SceneQAExample>> {
        let mut out: BTreeMap<Split, Vec<&SceneQAExample>> = BTreeMap::new();
        for e in &self.examples {
            out.entry(e.split).or_default().push(e);
        }
        out
    }

    /// Copy with every target reset to its ground-truth label.
    pub fn with_true_targets(&self) -> Self {
        let mut out = self.clone();
        for e in &mut out.examples {
            e.target = e.label;
        }
        out
    }

    /// Writes one JSON object per line plus `<stem>.vocab.json` beside it.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), DataError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.examples {
            serde_json::to_writer(&mut f, e).map_err(|source| DataError::Json { line: e.id + 1, source })?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        let manifest = serde_json::to_string_pretty(&self.vocab).expect("vocabulary serializes");
        std::fs::write(vocab_manifest_path(path), manifest)?;
        Ok(())
    }

    /// Reads examples and manifest written by [`Dataset::write_jsonl`]; statistics are recomputed.
    pub fn read_jsonl(path: &Path, popular_k: usize) -> Result<Self, DataError> {
        let vocab: Vocabulary = serde_json::from_slice(&std::fs::read(vocab_manifest_path(path))?)
            .map_err(|source| DataError::Json { line: 0, source })?;
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut examples = Vec::new();
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: SceneQAExample =
                serde_json::from_str(&line).map_err(|source| DataError::Json { line: i + 1, source })?;
            examples.push(e);
        }
        let scenes: Vec<Vec<usize>> = examples.iter().map(|e| e.scene.clone()).collect();
        let stats = CorpusStats::from_scenes(&scenes, vocab.n_objects, popular_k.min(vocab.n_objects));
        Ok(Self {
            vocab,
            examples,
            stats,
        })
    }
}

pub fn vocab_manifest_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("vocab.json")
}
