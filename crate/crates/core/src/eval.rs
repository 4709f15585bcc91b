//! Zero-shot classification, ranking metrics and similarity maps.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TEMPLATE_VOCAB};
use crate::error::{Error, Result};
use crate::lora::Modality;
use crate::model::{prepare_image, Model};
use crate::tensor::Tensor;

const SLOT: &str = "{disease}";

/// A caption pattern with one class slot, realized on the toy vocabulary as
/// `prefix ++ class tokens ++ suffix`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub pattern: String,
    pub prefix: Vec<usize>,
    pub suffix: Vec<usize>,
}

impl PromptTemplate {
    pub fn new(pattern: &str, prefix: Vec<usize>, suffix: Vec<usize>) -> Result<Self> {
        let slots = pattern.matches(SLOT).count();
        if slots != 1 {
            return Err(Error::InvalidConfig(format!(
                "template `{pattern}` must contain exactly one {SLOT} slot, found {slots}"
            )));
        }
        if let Some(&id) = prefix.iter().chain(&suffix).find(|&&id| id >= TEMPLATE_VOCAB) {
            return Err(Error::InvalidConfig(format!(
                "template token {id} is outside the reserved range 0..{TEMPLATE_VOCAB}"
            )));
        }
        Ok(Self {
            pattern: pattern.to_string(),
            prefix,
            suffix,
        })
    }

    pub fn realize(&self, class_tokens: &[usize]) -> Vec<usize> {
        let mut ids = self.prefix.clone();
        ids.extend_from_slice(class_tokens);
        ids.extend_from_slice(&self.suffix);
        ids
    }

    pub fn render(&self, class_name: &str) -> String {
        self.pattern.replace(SLOT, class_name)
    }
}

/// The two templates used for evaluation.
pub fn default_templates() -> Vec<PromptTemplate> {
    vec![
        PromptTemplate::new("a synthetic image of {disease}", vec![0, 1, 2, 3], vec![]).expect("valid template"),
        PromptTemplate::new("findings suggesting {disease}", vec![4, 5], vec![]).expect("valid template"),
    ]
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One unit row per class: the re-normalized mean of the unit text
/// embeddings of every realized template.
pub fn class_text_embeddings(model: &Model, classes: &[Vec<usize>], templates: &[PromptTemplate]) -> Result<Tensor> {
    if templates.is_empty() {
        return Err(Error::InvalidConfig("at least one prompt template is required".into()));
    }
    if classes.is_empty() {
        return Err(Error::InvalidConfig("at least one class is required".into()));
    }
    let mut rows = Vec::with_capacity(classes.len());
    for tokens in classes {
        if let Some(&id) = tokens.iter().find(|&&id| id < TEMPLATE_VOCAB) {
            return Err(Error::InvalidConfig(format!("class token {id} lies in the reserved template range")));
        }
        let mut mean = vec![0.0; model.config.text.model_dim];
        for t in templates {
            let e = model.embed_text(&t.realize(tokens))?;
            mean.iter_mut().zip(&e).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= templates.len() as f64);
        normalize(&mut mean);
        rows.push(mean);
    }
    Ok(Tensor::from_rows(&rows))
}

/// Cosine scores of unit image embeddings against unit class rows.
pub fn classify_embeddings(image_embeds: &[Vec<f64>], class_embeds: &Tensor) -> Vec<Vec<f64>> {
    image_embeds
        .iter()
        .map(|e| (0..class_embeds.rows()).map(|c| dot(e, class_embeds.row(c))).collect())
        .collect()
}

/// Scores every image against every class embedding.
pub fn zero_shot_classify(model: &Model, images: &[Tensor], class_embeds: &Tensor) -> Result<Vec<Vec<f64>>> {
    let embeds = images.iter().map(|g| model.embed_image(g)).collect::<Result<Vec<_>>>()?;
    Ok(classify_embeddings(&embeds, class_embeds))
}

/// Argmax per row; ties go to the lowest index.
pub fn predict(scores: &[Vec<f64>]) -> Vec<usize> {
    scores
        .iter()
        .map(|row| {
            let mut best = 0;
            for (c, &s) in row.iter().enumerate() {
                if s > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Metric("accuracy of an empty set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Fraction of positive/negative pairs ranked correctly, ties counting ½.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), positive.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("scores must be finite".into()));
    }
    let pos = positive.iter().filter(|&&p| p).count() as u64;
    let neg = positive.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!("need both classes, got {pos} positives and {neg} negatives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the number of correctly ordered pairs, so ties stay integral.
    let mut half_units: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if positive[order[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        half_units += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Ok(half_units as f64 / (2 * pos * neg) as f64)
}

/// Unweighted mean of one-vs-rest AUCs. Classes without positives or
/// without negatives are skipped with a warning and listed in the result.
pub fn macro_auc(scores: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<(f64, Vec<usize>)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} score rows for {} labels", scores.len(), labels.len())));
    }
    if let Some(row) = scores.iter().find(|r| r.len() != num_classes) {
        return Err(Error::Metric(format!("score row has {} entries, expected {num_classes}", row.len())));
    }
    let mut total = 0.0;
    let mut used = 0;
    let mut excluded = Vec::new();
    for c in 0..num_classes {
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let pos = positive.iter().filter(|&&p| p).count();
        if pos == 0 || pos == labels.len() {
            warn!("class {c} has {pos} of {} samples; excluded from AUC", labels.len());
            excluded.push(c);
            continue;
        }
        let column: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        total += auc_binary(&column, &positive)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Metric("every class is degenerate; AUC undefined".into()));
    }
    Ok((total / used as f64, excluded))
}

/// `confusion[label][prediction]` counts.
pub fn confusion(predictions: &[usize], labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        m[l][p] += 1;
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_classes: usize,
    /// `scores[sample][class]`.
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    pub auc: f64,
    pub auc_excluded_classes: Vec<usize>,
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_scores(scores: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if scores.iter().flatten().any(|s| !s.is_finite()) {
            return Err(Error::Metric("non-finite class score".into()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Metric(format!("label {l} out of range for {num_classes} classes")));
        }
        let predictions = predict(&scores);
        let accuracy = accuracy(&predictions, &labels)?;
        let (auc, auc_excluded_classes) = macro_auc(&scores, &labels, num_classes)?;
        let confusion = confusion(&predictions, &labels, num_classes);
        Ok(Self {
            num_classes,
            scores,
            labels,
            predictions,
            accuracy,
            auc,
            auc_excluded_classes,
            confusion,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Metric(format!("malformed report: {e}")))
    }

    pub fn summary(&self) -> String {
        format!("samples {} acc {:.4} auc {:.4}", self.labels.len(), self.accuracy, self.auc)
    }
}

/// Zero-shot evaluation of `model` on every sample of `data`.
pub fn evaluate(model: &Model, data: &Dataset, templates: &[PromptTemplate]) -> Result<EvalReport> {
    let c = data.config.num_classes;
    let classes: Vec<Vec<usize>> = (0..c).map(|k| data.config.class_tokens(k)).collect();
    let class_embeds = class_text_embeddings(model, &classes, templates)?;
    let images: Vec<Tensor> = data.samples.iter().map(|s| s.image.clone()).collect();
    let scores = zero_shot_classify(model, &images, &class_embeds)?;
    EvalReport::from_scores(scores, data.labels(), c)
}

/// Cosine similarity of each refined patch token with a text query, on the
/// patch grid in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    pub side: usize,
    pub raw: Vec<f64>,
    /// Min-max scaled to [0, 1]; all zeros when the map is constant.
    pub normalized: Vec<f64>,
}

impl SimilarityMap {
    pub fn from_raw(side: usize, raw: Vec<f64>) -> Self {
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let normalized = if hi > lo {
            raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![0.0; raw.len()]
        };
        Self { side, raw, normalized }
    }

    pub fn to_text_grid(&self, normalized: bool) -> String {
        let values = if normalized { &self.normalized } else { &self.raw };
        let mut out = String::new();
        for row in values.chunks(self.side) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "{}", cells.join(" "));
        }
        out
    }

    /// Binary greyscale PGM of the normalized map.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.side, self.side).into_bytes();
        out.extend(self.normalized.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    /// Mean over `locations` minus mean over every other patch.
    pub fn localization_margin(&self, locations: &[usize]) -> f64 {
        let mut inside = (0.0, 0usize);
        let mut outside = (0.0, 0usize);
        for (i, v) in self.raw.iter().enumerate() {
            let acc = if locations.contains(&i) { &mut inside } else { &mut outside };
            acc.0 += v;
            acc.1 += 1;
        }
        inside.0 / inside.1.max(1) as f64 - outside.0 / outside.1.max(1) as f64
    }
}

/// Similarity map of `grid` against a unit text embedding `query`.
pub fn similarity_map(model: &Model, grid: &Tensor, query: &[f64]) -> Result<SimilarityMap> {
    let side = grid.shape()[0];
    let input = prepare_image(&model.frozen.image, grid)?;
    let (tokens, _) = model.refine(Modality::Image, &input)?;
    if query.len() != tokens.cols() {
        return Err(Error::shape("similarity_map", &[&[query.len()], tokens.shape()]));
    }
    let mut q = query.to_vec();
    normalize(&mut q);
    let raw = (1..tokens.rows())
        .map(|i| {
            let mut t = tokens.row(i).to_vec();
            if normalize(&mut t) == 0.0 {
                0.0
            } else {
                dot(&t, &q)
            }
        })
        .collect();
    Ok(SimilarityMap::from_raw(side, raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_auc(scores: &[f64], positive: &[bool]) -> f64 {
        let mut correct = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if positive[i] && !positive[j] {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        correct += 1.0;
                    } else if scores[i] == scores[j] {
                        correct += 0.5;
                    }
                }
            }
        }
        correct / pairs
    }

    fn small_model() -> Model {
        let mut cfg = ModelConfig::toy();
        cfg.d_prime = 8;
        Model::new(cfg, 3).unwrap()
    }

    #[test]
    fn template_validation() {
        assert!(PromptTemplate::new("no slot", vec![], vec![]).is_err());
        assert!(PromptTemplate::new("{disease} and {disease}", vec![], vec![]).is_err());
        assert!(PromptTemplate::new("x {disease}", vec![TEMPLATE_VOCAB], vec![]).is_err());
        let t = PromptTemplate::new("a {disease} b", vec![1], vec![2]).unwrap();
        assert_eq!(t.realize(&[9, 10]), vec![1, 9, 10, 2]);
        assert_eq!(t.render("effusion"), "a effusion b");
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 0, 1], &[1, 1, 1]).unwrap(), 2.0 / 3.0);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_binary(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(auc_binary(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert_eq!(auc_binary(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(auc_binary(&[0.5, 0.5], &[true, true]).is_err());
    }

    #[test]
    fn auc_of_random_scores_is_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        let labels: Vec<bool> = (0..10_000).map(|i| i % 2 == 0).collect();
        assert!((auc_binary(&scores, &labels).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn macro_auc_excludes_degenerate_classes() {
        let scores = vec![vec![0.9, 0.1, 0.0], vec![0.2, 0.8, 0.0]];
        let (auc, excluded) = macro_auc(&scores, &[0, 1], 3).unwrap();
        assert_eq!(auc, 1.0);
        assert_eq!(excluded, vec![2]);
        assert!(macro_auc(&[vec![1.0]], &[0], 1).is_err());
    }

    #[test]
    fn predict_breaks_ties_low() {
        assert_eq!(predict(&[vec![0.3, 0.3, 0.1], vec![0.0, 0.5, 0.5]]), vec![0, 1]);
    }

    #[test]
    fn orthonormal_classes() {
        let classes = Tensor::identity(3);
        let scores = classify_embeddings(&[vec![0.0, 0.0, 1.0]], &classes);
        assert_eq!(scores[0][2], 1.0);
        assert_eq!(predict(&scores), vec![2]);
        let same = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(predict(&classify_embeddings(&[vec![0.6, 0.8], vec![0.0, 1.0]], &same)), vec![0, 0]);
    }

    #[test]
    fn report_json_round_trip() {
        let r = EvalReport::from_scores(
            vec![vec![0.1, 0.7], vec![0.3, 0.2], vec![1.0 / 3.0, 0.0]],
            vec![1, 0, 0],
            2,
        )
        .unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.confusion, vec![vec![2, 0], vec![0, 1]]);
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn class_embeddings_average_templates() {
        let model = small_model();
        let t = default_templates();
        let classes = vec![vec![8, 9, 10], vec![11, 12, 13]];
        let one = class_text_embeddings(&model, &classes, &t[..1]).unwrap();
        let direct = model.embed_text(&t[0].realize(&classes[1])).unwrap();
        for (a, b) in one.row(1).iter().zip(&direct) {
            assert!((a - b).abs() < 1e-15);
        }
        let dup = class_text_embeddings(&model, &classes, &[t[0].clone(), t[0].clone()]).unwrap();
        for (a, b) in dup.data().iter().zip(one.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let both = class_text_embeddings(&model, &classes, &t).unwrap();
        for c in 0..2 {
            let a = model.embed_text(&t[0].realize(&classes[c])).unwrap();
            let b = model.embed_text(&t[1].realize(&classes[c])).unwrap();
            let mean: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect();
            let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (got, m) in both.row(c).iter().zip(&mean) {
                assert!((got - m / norm).abs() < 1e-12);
            }
            assert!((dot(both.row(c), both.row(c)) - 1.0).abs() < 1e-10);
        }
        assert!(class_text_embeddings(&model, &classes, &[]).is_err());
        assert!(class_text_embeddings(&model, &[vec![1]], &t).is_err());
        assert!(class_text_embeddings(&model, &[vec![10_000]], &t).is_err());
    }

    #[test]
    fn similarity_map_shapes_and_normalization() {
        let model = small_model();
        let side = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = Tensor::new(
            vec![side, side, 8],
            (0..side * side * 8).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let q = model.embed_text(&[8, 9, 10]).unwrap();
        let map = similarity_map(&model, &grid, &q).unwrap();
        assert_eq!(map.raw.len(), side * side);
        assert!(map.normalized.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(map.normalized.contains(&0.0) && map.normalized.contains(&1.0));
        let pgm = map.to_pgm();
        assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
        assert_eq!(pgm.len(), b"P5\n4 4\n255\n".len() + 16);
        assert_eq!(map.to_text_grid(false).lines().count(), side);
    }

    #[test]
    fn orthogonal_query_gives_zero_map() {
        let map = SimilarityMap::from_raw(2, vec![0.0; 4]);
        assert_eq!(map.normalized, vec![0.0; 4]);
        assert_eq!(map.localization_margin(&[0]), 0.0);
        let m = SimilarityMap::from_raw(2, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.localization_margin(&[0]), 1.0);
    }

    proptest! {
        #[test]
        fn auc_matches_brute_force(raw in proptest::collection::vec((0u8..20, proptest::bool::ANY), 2..60)) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 7.0).collect();
            let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
            let pos = labels.iter().filter(|&&l| l).count();
            if pos > 0 && pos < labels.len() {
                prop_assert_eq!(auc_binary(&scores, &labels).unwrap(), brute_auc(&scores, &labels));
            }
        }

        #[test]
        fn auc_invariant_under_monotone_maps(raw in proptest::collection::vec((-50i32..50, proptest::bool::ANY), 2..60)) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64).collect();
            let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
            let pos = labels.iter().filter(|&&l| l).count();
            if pos > 0 && pos < labels.len() {
                let base = auc_binary(&scores, &labels).unwrap();
                let cubed: Vec<f64> = scores.iter().map(|s| s * s * s + 2.0 * s).collect();
                let exp: Vec<f64> = scores.iter().map(|s| (s / 10.0).exp()).collect();
                prop_assert_eq!(auc_binary(&cubed, &labels).unwrap(), base);
                prop_assert_eq!(auc_binary(&exp, &labels).unwrap(), base);
            }
        }

        #[test]
        fn binary_macro_equals_plain(raw in proptest::collection::vec((0u8..30, 0usize..2), 2..40)) {
            let p: Vec<f64> = raw.iter().map(|(s, _)| *s as f64).collect();
            let labels: Vec<usize> = raw.iter().map(|(_, l)| *l).collect();
            let ones = labels.iter().filter(|&&l| l == 1).count();
            if ones > 0 && ones < labels.len() {
                let scores: Vec<Vec<f64>> = p.iter().map(|&x| vec![-x, x]).collect();
                let positive: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
                prop_assert_eq!(macro_auc(&scores, &labels, 2).unwrap().0, auc_binary(&p, &positive).unwrap());
            }
        }

        #[test]
        fn argmax_invariant_under_positive_scaling(
            rows in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 1..20),
            scale in 0.01f64..100.0,
        ) {
            let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x * scale).collect()).collect();
            prop_assert_eq!(predict(&rows), predict(&scaled));
        }

        #[test]
        fn accuracy_matches_counting(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..50)) {
            let (p, l): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let acc = accuracy(&p, &l).unwrap();
            let mut hits = 0;
            for i in 0..p.len() {
                if p[i] == l[i] {
                    hits += 1;
                }
            }
            prop_assert!((0.0..=1.0).contains(&acc));
            prop_assert_eq!(acc, hits as f64 / p.len() as f64);
        }
    }
}
