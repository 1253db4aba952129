//! Bag-of-SFA-symbols material classification.
//!
//! A waveform is cut into overlapping windows; each window is reduced to a
//! short word by quantizing a few low Fourier coefficients against
//! per-coefficient bin edges learned from training data (equi-depth
//! "multiple coefficient binning").  Runs of identical consecutive words
//! are collapsed, the remaining words are counted into a bag, and queries
//! are labeled by the nearest training bag under an asymmetric squared
//! histogram distance with 1-NN.
//!
//! One deliberate simplification: a single window/word/alphabet
//! parametrization per model instead of an ensemble over window lengths.
//! Grid searches stay possible by training several models.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::signal::Waveform;

#[derive(Debug, Error, PartialEq)]
pub enum BossError {
    /// A series is shorter than the analysis window.
    #[error("series of {len} samples is shorter than the {window_len}-sample window")]
    SeriesTooShort { len: usize, window_len: usize },
    /// Classification was attempted against a model with no training bags.
    #[error("model contains no training bags")]
    EmptyModel,
    /// The evaluation protocol needs at least two classes with at least
    /// four examples each.
    #[error("insufficient data for evaluation: {reason}")]
    InsufficientData { reason: String },
}

/// Symbolic-Fourier-approximation parameters.
///
/// `word_len` counts quantized values, two per retained Fourier bin
/// (real and imaginary part), so a word covers bins `1 ..= word_len/2`.
/// The DC bin is always skipped: with `normalize_windows` it is zero
/// anyway, and without it it only encodes the window offset.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SfaParams {
    /// Sliding-window length in samples.
    pub window_len: usize,
    /// Values per word; even, and at most `window_len`.
    pub word_len: usize,
    /// Symbols per value, 2 ..= 8.
    pub alphabet: usize,
    /// Z-normalize every window (mean 0, unit variance) before the DFT,
    /// which makes classification invariant to amplitude scaling.
    pub normalize_windows: bool,
}

impl SfaParams {
    /// Checked constructor.
    ///
    /// # Panics
    /// Panics when `word_len` is odd, zero, longer than the window or
    /// longer than 20 values (words are packed 3 bits per symbol into a
    /// `u64`), or when `alphabet` leaves 2 ..= 8.
    pub fn new(window_len: usize, word_len: usize, alphabet: usize, normalize_windows: bool) -> Self {
        assert!(word_len >= 2 && word_len % 2 == 0, "word length must be even and positive");
        assert!(word_len <= window_len, "word length cannot exceed the window");
        assert!(word_len <= 20, "words are packed into 64 bits, 3 bits per symbol");
        assert!((2..=8).contains(&alphabet), "alphabet must be 2 ..= 8");
        assert!(window_len >= 2, "window must hold at least two samples");
        SfaParams { window_len, word_len, alphabet, normalize_windows }
    }

    /// Default parametrization for a series of `n` samples: an eighth of
    /// the series (at least 16 samples), 8-value words, 4 symbols,
    /// normalized windows.
    pub fn for_series_len(n: usize) -> Self {
        SfaParams::new((n / 8).max(16), 8, 4, true)
    }

    fn check_len(&self, series: &Waveform) -> Result<(), BossError> {
        if series.len() < self.window_len {
            return Err(BossError::SeriesTooShort {
                len: series.len(),
                window_len: self.window_len,
            });
        }
        Ok(())
    }
}

/// Per-coefficient quantization boundaries learned from training windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Binning {
    /// `word_len` rows of `alphabet - 1` strictly increasing edges.
    pub edges: Vec<Vec<f64>>,
    /// Marks coefficients whose equi-depth edges collapsed (ties in the
    /// training distribution) and were replaced by equi-width edges.
    pub degenerate: Vec<bool>,
}

impl Binning {
    /// True if any coefficient needed the equi-width fallback.
    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }

    fn word(&self, feats: &[f64]) -> u64 {
        let mut word = 0u64;
        for (c, (x, edges)) in feats.iter().zip(&self.edges).enumerate() {
            let sym = edges.partition_point(|e| e <= x) as u64;
            word |= sym << (3 * c);
        }
        word
    }
}

/// Word bag of one series: SFA word → occurrence count (after collapsing
/// consecutive duplicates).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BossHistogram {
    counts: BTreeMap<u64, u32>,
}

impl BossHistogram {
    /// Count for `word`, zero if absent.
    pub fn get(&self, word: u64) -> u32 {
        self.counts.get(&word).copied().unwrap_or(0)
    }

    /// Number of distinct words.
    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    /// Total number of counted windows.
    pub fn total(&self) -> u64 {
        self.counts.values().map(|&c| u64::from(c)).sum()
    }

    /// Iterate over `(word, count)` pairs in word order.
    pub fn iter(&self) -> impl Iterator<Item = (u64, u32)> + '_ {
        self.counts.iter().map(|(&w, &c)| (w, c))
    }

    fn from_words(words: impl IntoIterator<Item = u64>) -> Self {
        let mut counts = BTreeMap::new();
        let mut prev = None;
        for w in words {
            // Numerosity reduction: a word repeated by consecutive windows
            // counts once, so slow sections do not drown out transients.
            if prev != Some(w) {
                *counts.entry(w).or_insert(0) += 1;
                prev = Some(w);
            }
        }
        BossHistogram { counts }
    }
}

/// A trained classifier: parameters, learned binning and one labeled bag
/// per training series.
#[derive(Debug, Clone)]
pub struct BossModel {
    pub params: SfaParams,
    pub binning: Binning,
    pub train_bags: Vec<(String, BossHistogram)>,
}

impl BossModel {
    /// Fit the binning on `train` and bag every training series.
    pub fn fit(train: &[(Waveform, String)], params: SfaParams) -> Result<Self, BossError> {
        let binning = sfa_fit(train, &params)?;
        let mut model = BossModel { params, binning, train_bags: Vec::new() };
        for (w, label) in train {
            let bag = boss_transform(w, &model)?;
            model.train_bags.push((label.clone(), bag));
        }
        Ok(model)
    }
}

/// Confusion counts accumulated over repeated random splits.
///
/// `counts[i][j]` is how often a test series of class `labels[i]` was
/// labeled `labels[j]`, summed over all trials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    pub trial_count: u32,
}

impl ConfusionMatrix {
    /// Fraction of correctly labeled test series over all trials.
    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.labels.len()).map(|i| self.counts[i][i]).sum();
        let total: u64 = self.counts.iter().flatten().sum();
        if total == 0 {
            return 0.0;
        }
        correct as f64 / total as f64
    }
}

/// Fourier features of every window of `series`: per window, the real and
/// imaginary parts of bins `1 ..= word_len/2`, interleaved.
///
/// The DFT is evaluated directly; with at most ten retained bins that is
/// cheaper and simpler than an FFT per window.
fn window_features(series: &Waveform, p: &SfaParams) -> Vec<Vec<f64>> {
    let w = p.window_len;
    let bins = p.word_len / 2;
    let mut out = Vec::with_capacity(series.len() - w + 1);
    let mut window = vec![0.0f64; w];
    for start in 0..=series.len() - w {
        let raw = &series.samples[start..start + w];
        if p.normalize_windows {
            let mean = raw.iter().sum::<f64>() / w as f64;
            let var = raw.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w as f64;
            let std = var.sqrt();
            if std < 1e-12 {
                // A flat window carries no shape; map it to all zeros
                // rather than amplifying numerical dust.
                window.iter_mut().for_each(|x| *x = 0.0);
            } else {
                for (dst, x) in window.iter_mut().zip(raw) {
                    *dst = (x - mean) / std;
                }
            }
        } else {
            window.copy_from_slice(raw);
        }

        let mut feats = Vec::with_capacity(p.word_len);
        for k in 1..=bins {
            let step = -2.0 * std::f64::consts::PI * k as f64 / w as f64;
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (j, &x) in window.iter().enumerate() {
                let (s, c) = (step * j as f64).sin_cos();
                re += x * c;
                im += x * s;
            }
            feats.push(re);
            feats.push(im);
        }
        out.push(feats);
    }
    out
}

/// Equi-depth edges per coefficient over all training windows, with an
/// equi-width fallback where ties make the depth quantiles collapse.
fn edges_from_columns(mut columns: Vec<Vec<f64>>, alphabet: usize) -> Binning {
    let mut edges = Vec::with_capacity(columns.len());
    let mut degenerate = Vec::with_capacity(columns.len());
    for col in columns.iter_mut() {
        col.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = col.len();
        let depth: Vec<f64> = (1..alphabet).map(|j| col[j * n / alphabet]).collect();
        let strictly_increasing = depth.windows(2).all(|p| p[0] < p[1]);
        if strictly_increasing {
            edges.push(depth);
            degenerate.push(false);
        } else {
            // Fall back to equal-width bins over the observed range (or a
            // unit range around a constant coefficient).
            let (mut lo, mut hi) = (col[0], col[n - 1]);
            if lo == hi {
                lo -= 0.5;
                hi += 0.5;
            }
            let width = (hi - lo) / alphabet as f64;
            edges.push((1..alphabet).map(|j| lo + j as f64 * width).collect());
            degenerate.push(true);
        }
    }
    Binning { edges, degenerate }
}

/// Learn per-coefficient quantization edges from the training set.
pub fn sfa_fit(train: &[(Waveform, String)], p: &SfaParams) -> Result<Binning, BossError> {
    let mut columns = vec![Vec::new(); p.word_len];
    for (series, _) in train {
        p.check_len(series)?;
        for feats in window_features(series, p) {
            for (col, x) in columns.iter_mut().zip(&feats) {
                col.push(*x);
            }
        }
    }
    Ok(edges_from_columns(columns, p.alphabet))
}

/// Bag a series against a trained model's binning.
pub fn boss_transform(series: &Waveform, model: &BossModel) -> Result<BossHistogram, BossError> {
    model.params.check_len(series)?;
    let words = window_features(series, &model.params)
        .into_iter()
        .map(|f| model.binning.word(&f));
    Ok(BossHistogram::from_words(words))
}

/// Asymmetric squared bag distance: sums `(a[w] - b[w])²` over the words
/// *present in `a`* only, so words unique to `b` cost nothing.
pub fn boss_distance(a: &BossHistogram, b: &BossHistogram) -> f64 {
    a.iter()
        .map(|(w, ca)| {
            let d = f64::from(ca) - f64::from(b.get(w));
            d * d
        })
        .sum()
}

/// Label a query series by its nearest training bag (1-NN under
/// [`boss_distance`], ties to the earliest training entry).
pub fn classify<'m>(model: &'m BossModel, series: &Waveform) -> Result<&'m str, BossError> {
    if model.train_bags.is_empty() {
        return Err(BossError::EmptyModel);
    }
    let query = boss_transform(series, model)?;
    let mut best: Option<(&str, f64)> = None;
    for (label, bag) in &model.train_bags {
        let d = boss_distance(&query, bag);
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((label, d));
        }
    }
    Ok(best.expect("non-empty model").0)
}

/// Repeated stratified split evaluation.
///
/// Per trial: shuffle each class with its own slice of randomness, put
/// `split_ratio` of it (rounded, at least one series on each side) into
/// the training set, fit, classify the held-out rest, and accumulate the
/// confusion counts.  Deterministic for a fixed `seed`; the per-trial
/// seeds are drawn up front so trials could be farmed out in parallel.
pub fn evaluate(
    dataset: &[(Waveform, String)],
    p: &SfaParams,
    trials: u32,
    split_ratio: f64,
    seed: u64,
) -> Result<ConfusionMatrix, BossError> {
    assert!(split_ratio > 0.0 && split_ratio < 1.0, "split ratio must lie in (0, 1)");
    assert!(trials >= 1, "at least one trial");

    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (series, label)) in dataset.iter().enumerate() {
        p.check_len(series)?;
        by_class.entry(label).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(BossError::InsufficientData {
            reason: format!("need at least 2 classes, have {}", by_class.len()),
        });
    }
    if let Some((label, members)) = by_class.iter().find(|(_, m)| m.len() < 4) {
        return Err(BossError::InsufficientData {
            reason: format!("class {label:?} has {} examples, need at least 4", members.len()),
        });
    }

    let labels: Vec<String> = by_class.keys().map(|s| s.to_string()).collect();
    let index_of: BTreeMap<&str, usize> =
        labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();

    // The window features do not depend on the split, so compute them once
    // per series instead of once per trial.
    let features: Vec<Vec<Vec<f64>>> =
        dataset.iter().map(|(series, _)| window_features(series, p)).collect();
    let bag_of = |idx: usize, binning: &Binning| -> BossHistogram {
        BossHistogram::from_words(features[idx].iter().map(|f| binning.word(f)))
    };

    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let trial_seeds: Vec<u64> = (0..trials).map(|_| master.random()).collect();

    let mut counts = vec![vec![0u64; labels.len()]; labels.len()];
    for trial_seed in trial_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for members in by_class.values() {
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng);
            let keep = ((members.len() as f64 * split_ratio).round() as usize)
                .clamp(1, members.len() - 1);
            train_idx.extend_from_slice(&shuffled[..keep]);
            test_idx.extend_from_slice(&shuffled[keep..]);
        }

        let columns = {
            let mut cols = vec![Vec::new(); p.word_len];
            for &i in &train_idx {
                for feats in &features[i] {
                    for (col, x) in cols.iter_mut().zip(feats) {
                        col.push(*x);
                    }
                }
            }
            cols
        };
        let binning = edges_from_columns(columns, p.alphabet);
        let train_bags: Vec<(usize, BossHistogram)> = train_idx
            .iter()
            .map(|&i| (index_of[dataset[i].1.as_str()], bag_of(i, &binning)))
            .collect();

        for &i in &test_idx {
            let query = bag_of(i, &binning);
            let mut best: Option<(usize, f64)> = None;
            for (class, bag) in &train_bags {
                let d = boss_distance(&query, bag);
                if best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((*class, d));
                }
            }
            let predicted = best.expect("non-empty training split").0;
            counts[index_of[dataset[i].1.as_str()]][predicted] += 1;
        }
    }

    Ok(ConfusionMatrix { labels, counts, trial_count: trials })
}
