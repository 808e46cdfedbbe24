//! Synthetic symbol→label mapping episodes.
//!
//! Layout of a rendered episode with `k` demonstrations:
//!
//! ```text
//! [sym, MAP_SEP, label] × k, sym_query, ANSWER_SEP, answer
//! ```
//!
//! so a rendered sequence has `3k + 2 + 1` tokens. Symbols occupy token ids
//! `0..num_symbols`, labels follow, then the two separators.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::numcore::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MappingMode {
    /// Fresh injective symbol→label map per episode.
    EpisodicRandom,
    /// One global map derived from the task seed.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coverage {
    QueryInDemos,
    QueryHeldOut,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub num_symbols: usize,
    pub num_labels: usize,
    pub k_shots: usize,
    pub mapping: MappingMode,
    pub coverage: Coverage,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            num_symbols: 16,
            num_labels: 8,
            k_shots: 8,
            mapping: MappingMode::EpisodicRandom,
            coverage: Coverage::QueryInDemos,
            seed: 1,
        }
    }
}

const FIXED_MAP_STREAM: u64 = 0xF1ED;
const TRAIN_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;
const TEST_STREAM: u64 = 3;

impl TaskSpec {
    pub fn map_sep(&self) -> usize {
        self.num_symbols + self.num_labels
    }

    pub fn answer_sep(&self) -> usize {
        self.num_symbols + self.num_labels + 1
    }

    /// Smallest vocabulary that holds every token of this task.
    pub fn vocab_needed(&self) -> usize {
        self.num_symbols + self.num_labels + 2
    }

    pub fn label_token(&self, label: usize) -> usize {
        self.num_symbols + label
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_labels < 2 {
            return Err(config_err("task.num_labels must be >= 2"));
        }
        let symbols_needed = self.k_shots + usize::from(self.coverage == Coverage::QueryHeldOut);
        if symbols_needed > self.num_symbols {
            return Err(config_err(format!(
                "{} distinct symbols needed but only {} exist",
                symbols_needed, self.num_symbols
            )));
        }
        if self.mapping == MappingMode::EpisodicRandom && symbols_needed > self.num_labels {
            return Err(config_err(format!(
                "an injective map of {symbols_needed} symbols into {} labels does not exist",
                self.num_labels
            )));
        }
        Ok(())
    }

    /// The global map used in fixed mode: a shuffled, label-balanced assignment.
    pub fn fixed_map(&self) -> Vec<usize> {
        let mut rng = Rng::derive(self.seed, FIXED_MAP_STREAM);
        let mut labels: Vec<usize> = (0..self.num_symbols).map(|i| i % self.num_labels).collect();
        rng.shuffle(&mut labels);
        labels
    }

    pub fn train_rng(&self) -> Rng {
        Rng::derive(self.seed, TRAIN_STREAM)
    }

    pub fn val_rng(&self) -> Rng {
        Rng::derive(self.seed, VAL_STREAM)
    }

    pub fn test_rng(&self) -> Rng {
        Rng::derive(self.seed, TEST_STREAM)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub demos: Vec<(usize, usize)>,
    pub query: usize,
    pub answer: usize,
    pub rendered: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Token ids needed to render an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub num_symbols: usize,
    pub map_sep: usize,
    pub answer_sep: usize,
}

impl From<&TaskSpec> for Layout {
    fn from(s: &TaskSpec) -> Self {
        Self {
            num_symbols: s.num_symbols,
            map_sep: s.map_sep(),
            answer_sep: s.answer_sep(),
        }
    }
}

/// Number of tokens in the query segment (query symbol + answer separator).
pub const QUERY_SEGMENT: usize = 2;

pub fn rendered_len(shots: usize, answer_len: usize) -> usize {
    3 * shots + QUERY_SEGMENT + answer_len
}

impl Episode {
    /// Renders with the first `shots` demonstrations. Returns the tokens and a
    /// mask marking answer positions.
    pub fn render(&self, layout: Layout, shots: usize) -> (Vec<usize>, Vec<bool>) {
        let shots = shots.min(self.demos.len());
        let mut tokens = Vec::with_capacity(rendered_len(shots, 1));
        for &(s, l) in &self.demos[..shots] {
            tokens.extend_from_slice(&[s, layout.map_sep, layout.num_symbols + l]);
        }
        tokens.push(self.query);
        tokens.push(layout.answer_sep);
        tokens.push(layout.num_symbols + self.answer);
        let mut mask = vec![false; tokens.len()];
        *mask.last_mut().expect("nonempty") = true;
        (tokens, mask)
    }

    /// Teacher-forced model input and next-token targets for `shots` demos.
    pub fn training_pair(&self, layout: Layout, shots: usize) -> (Vec<usize>, Vec<Option<usize>>) {
        let (tokens, mask) = self.render(layout, shots);
        let inputs = tokens[..tokens.len() - 1].to_vec();
        let targets = (1..tokens.len())
            .map(|i| mask[i].then_some(tokens[i]))
            .collect();
        (inputs, targets)
    }

    /// Prompt (everything before the answer) for `shots` demos.
    pub fn prompt(&self, layout: Layout, shots: usize) -> Vec<usize> {
        let (tokens, mask) = self.render(layout, shots);
        let first_answer = mask.iter().position(|&m| m).expect("answer present");
        tokens[..first_answer].to_vec()
    }

    pub fn answer_tokens(&self, layout: Layout) -> Vec<usize> {
        vec![layout.num_symbols + self.answer]
    }

    /// Index of the first query-segment token in a rendering with `shots` demos.
    pub fn query_offset(&self, shots: usize) -> usize {
        3 * shots.min(self.demos.len())
    }
}

fn sample_distinct(rng: &mut Rng, n: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    // Partial Fisher-Yates.
    for i in 0..k {
        let j = i + rng.below(n - i);
        all.swap(i, j);
    }
    all.truncate(k);
    all
}

/// Draws one episode.
pub fn gen_episode(spec: &TaskSpec, rng: &mut Rng) -> Result<Episode> {
    gen_episode_with_map(spec, rng, None)
}

fn gen_episode_with_map(spec: &TaskSpec, rng: &mut Rng, fixed: Option<&[usize]>) -> Result<Episode> {
    spec.validate()?;
    let k = spec.k_shots;
    let held_out = spec.coverage == Coverage::QueryHeldOut;
    let symbols = sample_distinct(rng, spec.num_symbols, k + usize::from(held_out));
    let (demo_syms, query) = if held_out {
        (&symbols[..k], symbols[k])
    } else if k == 0 {
        (&symbols[..0], rng.below(spec.num_symbols))
    } else {
        (&symbols[..], symbols[rng.below(k)])
    };
    let (demos, answer) = match spec.mapping {
        MappingMode::EpisodicRandom => {
            let mut labels = sample_distinct(rng, spec.num_labels, demo_syms.len() + usize::from(held_out));
            let answer = match demo_syms.iter().position(|&s| s == query) {
                Some(p) => labels[p],
                None if held_out => labels.pop().expect("one label reserved for the query"),
                None => rng.below(spec.num_labels),
            };
            let demos = demo_syms.iter().copied().zip(labels).collect();
            (demos, answer)
        }
        MappingMode::Fixed => {
            let owned;
            let map = match fixed {
                Some(m) => m,
                None => {
                    owned = spec.fixed_map();
                    &owned
                }
            };
            let demos = demo_syms.iter().map(|&s| (s, map[s])).collect();
            (demos, map[query])
        }
    };
    let mut ep = Episode {
        demos,
        query,
        answer,
        rendered: Vec::new(),
        mask: Vec::new(),
    };
    let (rendered, mask) = ep.render(Layout::from(spec), k);
    ep.rendered = rendered;
    ep.mask = mask;
    Ok(ep)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    /// Frequency of each answer label.
    pub label_freq: Vec<f64>,
    /// Fraction of episodes whose query symbol appears among the demos.
    pub coverage_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
    pub stats: DatasetStats,
}

pub fn gen_dataset(spec: &TaskSpec, count: usize, rng: &mut Rng) -> Result<Dataset> {
    if count == 0 {
        return Err(config_err("dataset count must be positive"));
    }
    spec.validate()?;
    let fixed = (spec.mapping == MappingMode::Fixed).then(|| spec.fixed_map());
    let episodes = (0..count)
        .map(|_| gen_episode_with_map(spec, rng, fixed.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    let stats = dataset_stats(spec, &episodes);
    Ok(Dataset { episodes, stats })
}

pub fn dataset_stats(spec: &TaskSpec, episodes: &[Episode]) -> DatasetStats {
    let mut counts = vec![0usize; spec.num_labels];
    let mut covered = 0usize;
    for e in episodes {
        counts[e.answer] += 1;
        if e.demos.iter().any(|&(s, _)| s == e.query) {
            covered += 1;
        }
    }
    let n = episodes.len().max(1) as f64;
    DatasetStats {
        label_freq: counts.iter().map(|&c| c as f64 / n).collect(),
        coverage_rate: covered as f64 / n,
    }
}

/// Train and validation sets from disjoint seed streams.
pub fn gen_split(spec: &TaskSpec, train: usize, val: usize) -> Result<(Dataset, Dataset)> {
    let tr = gen_dataset(spec, train, &mut spec.train_rng())?;
    let va = gen_dataset(spec, val, &mut spec.val_rng())?;
    Ok((tr, va))
}

/// Fraction of `b`'s rendered sequences that also occur in `a`.
pub fn collision_rate(a: &[Episode], b: &[Episode]) -> f64 {
    let seen: HashSet<&[usize]> = a.iter().map(|e| e.rendered.as_slice()).collect();
    let hits = b.iter().filter(|e| seen.contains(e.rendered.as_slice())).count();
    hits as f64 / b.len().max(1) as f64
}

/// Scans the demos for the query symbol.
pub fn lookup_oracle(ep: &Episode) -> Option<usize> {
    ep.demos.iter().find(|&&(s, _)| s == ep.query).map(|&(_, l)| l)
}

/// One JSON record per line.
pub fn dump_episodes<W: Write>(mut w: W, episodes: &[Episode]) -> Result<()> {
    for e in episodes {
        serde_json::to_writer(&mut w, e).map_err(|e| Error::Parse(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_episodes<R: BufRead>(r: R) -> Result<Vec<Episode>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Sequence families used to pretrain the base model. All share the episode
/// layout with `spec.k_shots` demonstrations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretrainKind {
    /// An ordinary episode; only the answer is supervised.
    Episode,
    /// Distinct symbols labelled by a global map; every label is supervised.
    GlobalMap,
    /// A fresh injective map over a few symbols, with demo symbols drawn
    /// with replacement; every label of a repeated symbol is supervised, as
    /// is the answer.
    Repeats,
}

/// Model input and next-token targets for one pretraining sequence.
pub fn pretrain_sequence(
    spec: &TaskSpec,
    kind: PretrainKind,
    global_map: &[usize],
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
    let layout = Layout::from(spec);
    let k = spec.k_shots;
    if kind == PretrainKind::Episode {
        return Ok(gen_episode(spec, rng)?.training_pair(layout, k));
    }
    if k == 0 || k > spec.num_symbols || global_map.len() != spec.num_symbols {
        return Err(config_err("pretraining needs 1..=num_symbols shots and a full global map"));
    }
    let (demos, query, answer, supervise): (Vec<(usize, usize)>, usize, usize, Vec<bool>) = match kind {
        PretrainKind::GlobalMap => {
            let syms = sample_distinct(rng, spec.num_symbols, k);
            let demos: Vec<_> = syms.iter().map(|&s| (s, global_map[s])).collect();
            let q = syms[rng.below(k)];
            (demos, q, global_map[q], vec![true; k])
        }
        _ => {
            let m_max = spec.num_labels.min(spec.num_symbols).min(k.max(2));
            if m_max < 2 {
                return Err(config_err("repeat sequences need at least two symbols"));
            }
            let m = 2 + rng.below(m_max - 1);
            let syms = sample_distinct(rng, spec.num_symbols, m);
            let labels = sample_distinct(rng, spec.num_labels, m);
            let mut seen = vec![false; m];
            let mut demos = Vec::with_capacity(k);
            let mut sup = Vec::with_capacity(k);
            for _ in 0..k {
                let j = rng.below(m);
                demos.push((syms[j], labels[j]));
                sup.push(seen[j]);
                seen[j] = true;
            }
            let seen_idx: Vec<usize> = (0..m).filter(|&j| seen[j]).collect();
            let j = seen_idx[rng.below(seen_idx.len())];
            (demos, syms[j], labels[j], sup)
        }
    };
    let mut tokens = Vec::with_capacity(rendered_len(k, 1));
    let mut mask = Vec::with_capacity(rendered_len(k, 1));
    for (&(s, l), &sup) in demos.iter().zip(&supervise) {
        tokens.extend_from_slice(&[s, layout.map_sep, layout.num_symbols + l]);
        mask.extend_from_slice(&[false, false, sup]);
    }
    tokens.extend_from_slice(&[query, layout.answer_sep, layout.num_symbols + answer]);
    mask.extend_from_slice(&[false, false, true]);
    let targets = (1..tokens.len()).map(|i| mask[i].then_some(tokens[i])).collect();
    tokens.pop();
    Ok((tokens, targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;
    use proptest::prelude::*;

    fn fixed_spec() -> TaskSpec {
        TaskSpec {
            mapping: MappingMode::Fixed,
            coverage: Coverage::QueryHeldOut,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn same_rng_state_same_episode() {
        let spec = fixed_spec();
        let a = gen_episode(&spec, &mut Rng::new(5)).unwrap();
        let b = gen_episode(&spec, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lookup_oracle_solves_in_demo_episodes() {
        let spec = TaskSpec::default();
        let mut rng = Rng::new(3);
        for _ in 0..2000 {
            let e = gen_episode(&spec, &mut rng).unwrap();
            assert_eq!(lookup_oracle(&e), Some(e.answer));
        }
    }

    #[test]
    fn zero_shot_episodic_answers_are_uniform() {
        // Any demo-blind predictor (here: always label 0, or the query's own id)
        // stays within chance + 3 sigma.
        let spec = TaskSpec { k_shots: 0, ..TaskSpec::default() };
        let n = 10_000;
        let ds = gen_dataset(&spec, n, &mut Rng::new(8)).unwrap();
        let p = 1.0 / spec.num_labels as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let const_acc = ds.episodes.iter().filter(|e| e.answer == 0).count() as f64 / n as f64;
        let query_acc = ds.episodes.iter().filter(|e| e.answer == e.query % spec.num_labels).count() as f64 / n as f64;
        assert!(const_acc <= p + 3.0 * sigma, "{const_acc}");
        assert!(query_acc <= p + 3.0 * sigma, "{query_acc}");
    }

    #[test]
    fn label_balance_and_coverage() {
        let spec = TaskSpec::default();
        let ds = gen_dataset(&spec, 1000, &mut Rng::new(1)).unwrap();
        for f in &ds.stats.label_freq {
            assert!((0.08..=0.17).contains(f), "{f}");
        }
        assert_eq!(ds.stats.coverage_rate, 1.0);
        let held = gen_dataset(&fixed_spec(), 500, &mut Rng::new(1)).unwrap();
        assert_eq!(held.stats.coverage_rate, 0.0);
    }

    #[test]
    fn splits_are_disjoint_for_episodic_data() {
        let spec = TaskSpec::default();
        let (tr, va) = gen_split(&spec, 2000, 500).unwrap();
        assert_ne!(tr.episodes[0], va.episodes[0]);
        assert_eq!(collision_rate(&tr.episodes, &va.episodes), 0.0);
    }

    #[test]
    fn fixed_map_is_balanced_and_consistent() {
        let spec = fixed_spec();
        let map = spec.fixed_map();
        let mut counts = vec![0; spec.num_labels];
        for &l in &map {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 2));
        let ds = gen_dataset(&spec, 300, &mut Rng::new(2)).unwrap();
        for e in &ds.episodes {
            assert_eq!(e.answer, map[e.query]);
            assert!(e.demos.iter().all(|&(s, l)| map[s] == l));
        }
    }

    #[test]
    fn unsatisfiable_specs_are_rejected() {
        let held_out_episodic = TaskSpec {
            coverage: Coverage::QueryHeldOut,
            ..TaskSpec::default()
        };
        assert!(matches!(gen_episode(&held_out_episodic, &mut Rng::new(0)), Err(Error::Config(_))));
        let one_label = TaskSpec { num_labels: 1, ..TaskSpec::default() };
        assert!(gen_episode(&one_label, &mut Rng::new(0)).is_err());
        assert!(gen_dataset(&TaskSpec::default(), 0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn dump_and_load_round_trip() {
        let ds = gen_dataset(&TaskSpec::default(), 20, &mut Rng::new(4)).unwrap();
        let mut buf = Vec::new();
        dump_episodes(&mut buf, &ds.episodes).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 20);
        assert!(text.lines().next().unwrap().contains("\"rendered\""));
        assert_eq!(load_episodes(buf.as_slice()).unwrap(), ds.episodes);
    }

    proptest! {
        #[test]
        fn rendered_length_and_consistency(seed in any::<u64>(), k in 0usize..=8, fixed in any::<bool>()) {
            let spec = TaskSpec {
                k_shots: k,
                mapping: if fixed { MappingMode::Fixed } else { MappingMode::EpisodicRandom },
                ..TaskSpec::default()
            };
            let e = gen_episode(&spec, &mut Rng::new(seed)).unwrap();
            prop_assert_eq!(e.rendered.len(), rendered_len(k, 1));
            prop_assert_eq!(e.rendered.len(), 3 * k + 2 + 1);
            prop_assert_eq!(*e.rendered.last().unwrap(), spec.label_token(e.answer));
            prop_assert_eq!(e.mask.iter().filter(|&&m| m).count(), 1);
            if fixed {
                prop_assert_eq!(e.answer, spec.fixed_map()[e.query]);
            } else if k > 0 {
                prop_assert_eq!(lookup_oracle(&e), Some(e.answer));
                let labels: HashSet<usize> = e.demos.iter().map(|d| d.1).collect();
                prop_assert_eq!(labels.len(), k);
            }
            let (inp, tg) = e.training_pair(Layout::from(&spec), k);
            prop_assert_eq!(inp.len(), e.rendered.len() - 1);
            prop_assert_eq!(tg.last().copied().flatten(), Some(spec.label_token(e.answer)));
        }
    }
}
