//! Bias-aware evaluation.
//!
//! Each test sample is answered twice: once with its own image (accuracy
//! `F_a`) and once with the image of a randomly drawn test sample (accuracy
//! `F_q`). A model that leans on question priors loses little when the image
//! is swapped, so a large drop `F_a − F_q` is evidence of visual grounding.
//! [`f_m_metric`] folds accuracy and drop into their harmonic mean.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::datagen::{self, Answer, DatasetSplit, Image, QuestionType, SplitKind, Template};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::real::Real;
use crate::rng;

/// Samples per inference call.
pub const EVAL_BATCH: usize = 256;

/// Anything that maps `(image, question tokens)` batches to answer ids.
pub trait Predictor {
    fn predict(&self, images: &[&Image], tokens: &[&[usize]]) -> Result<Vec<usize>>;
}

impl<T: Real> Predictor for ModelParams<T> {
    fn predict(&self, images: &[&Image], tokens: &[&[usize]]) -> Result<Vec<usize>> {
        model::predict(self, images, tokens)
    }
}

fn parse_template(tokens: &[usize]) -> Result<Template> {
    let text = datagen::detokenize(tokens)?;
    Template::parse(&text).ok_or_else(|| Error::InvalidConfig(alloc::format!("unrecognized question `{text}`")))
}

/// Answers from the scene recovered out of the pixels.
#[derive(Debug, Clone, Copy)]
pub struct OraclePredictor {
    pub grid_size: usize,
}

impl Default for OraclePredictor {
    fn default() -> Self {
        Self {
            grid_size: datagen::GRID_SIZE,
        }
    }
}

impl Predictor for OraclePredictor {
    fn predict(&self, images: &[&Image], tokens: &[&[usize]]) -> Result<Vec<usize>> {
        images
            .iter()
            .zip(tokens)
            .map(|(img, t)| {
                let scene = datagen::decode_scene(img, self.grid_size)?;
                Ok(parse_template(t)?.answer(&scene).id())
            })
            .collect()
    }
}

/// Answers from the question alone: a fixed, token-dependent pick among the
/// answers valid for the question's type.
#[derive(Debug, Clone, Copy, Default)]
pub struct ImageBlindPredictor;

impl Predictor for ImageBlindPredictor {
    fn predict(&self, images: &[&Image], tokens: &[&[usize]]) -> Result<Vec<usize>> {
        if images.len() != tokens.len() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{} images for {} questions",
                images.len(),
                tokens.len()
            )));
        }
        tokens
            .iter()
            .map(|t| {
                let answers = parse_template(t)?.question_type().answers();
                let key = t.iter().fold(0usize, |acc, &w| acc.wrapping_mul(31).wrapping_add(w));
                Ok(answers[key % answers.len()].id())
            })
            .collect()
    }
}

/// Always the same answer.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor(pub Answer);

impl Predictor for ConstantPredictor {
    fn predict(&self, _images: &[&Image], tokens: &[&[usize]]) -> Result<Vec<usize>> {
        Ok(alloc::vec![self.0.id(); tokens.len()])
    }
}

/// Per-sample correctness under one evaluation regime.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcomes {
    pub correct: Vec<bool>,
    pub tallies: [Tally; 4],
}

/// Sample and correct counts for one question type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Tally {
    pub n: usize,
    pub correct: usize,
}

impl Tally {
    pub fn accuracy(self) -> Option<f64> {
        (self.n > 0).then(|| self.correct as f64 / self.n as f64)
    }
}

impl Outcomes {
    /// Accuracy per type in [`QuestionType::ALL`] order; `None` for empty types.
    pub fn accuracy_by_type(&self) -> [Option<f64>; 4] {
        self.tallies.map(Tally::accuracy)
    }

    /// Types with no samples.
    pub fn empty_types(&self) -> Vec<Error> {
        QuestionType::ALL
            .iter()
            .filter(|t| self.tallies[t.index()].n == 0)
            .map(|&t| Error::EmptyType(t))
            .collect()
    }
}

fn require_test_split(dataset: &DatasetSplit) -> Result<()> {
    if dataset.kind != SplitKind::TestBalanced {
        return Err(Error::WrongSplit {
            expected: SplitKind::TestBalanced.name(),
            found: dataset.kind.name(),
        });
    }
    Ok(())
}

fn run<P: Predictor + ?Sized>(predictor: &P, dataset: &DatasetSplit, image_of: &[usize]) -> Result<Outcomes> {
    let mut correct = Vec::with_capacity(dataset.len());
    let mut tallies = [Tally::default(); 4];
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let images: Vec<&Image> = chunk.iter().map(|&i| &dataset.samples[image_of[i]].image).collect();
        let tokens: Vec<&[usize]> = chunk
            .iter()
            .map(|&i| dataset.samples[i].question_tokens.as_slice())
            .collect();
        let preds = predictor.predict(&images, &tokens)?;
        if preds.len() != chunk.len() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "predictor returned {} answers for {} samples",
                preds.len(),
                chunk.len()
            )));
        }
        for (&i, p) in chunk.iter().zip(preds) {
            let s = &dataset.samples[i];
            let ok = p == s.answer_id;
            let t = &mut tallies[s.question_type.index()];
            t.n += 1;
            t.correct += usize::from(ok);
            correct.push(ok);
        }
    }
    Ok(Outcomes { correct, tallies })
}

/// Accuracy with each sample's own image.
pub fn evaluate_standard<P: Predictor + ?Sized>(predictor: &P, dataset: &DatasetSplit) -> Result<Outcomes> {
    require_test_split(dataset)?;
    let own: Vec<usize> = (0..dataset.len()).collect();
    run(predictor, dataset, &own)
}

/// For each sample, the index of the sample whose image replaces its own:
/// uniform over the split, with replacement, self-assignment allowed.
pub fn random_image_assignment(n: usize, shuffle_seed: u64) -> Vec<usize> {
    let mut r = rng::stream(shuffle_seed, rng::DOMAIN_EVAL, &[n as u64]);
    (0..n).map(|_| r.gen_range(0..n)).collect()
}

/// Accuracy with each image swapped per [`random_image_assignment`].
pub fn evaluate_random_image<P: Predictor + ?Sized>(
    predictor: &P,
    dataset: &DatasetSplit,
    shuffle_seed: u64,
) -> Result<Outcomes> {
    require_test_split(dataset)?;
    run(
        predictor,
        dataset,
        &random_image_assignment(dataset.len(), shuffle_seed),
    )
}

/// Harmonic mean of accuracy `f_a` and drop `f_a − f_q`:
/// `2(f_a² − f_a f_q) / (2 f_a − f_q)`. Degenerate inputs map to 0.
pub fn f_m_metric(f_a: f64, f_q: f64) -> f64 {
    if is_degenerate(f_a, f_q) {
        return 0.0;
    }
    2.0 * (f_a * f_a - f_a * f_q) / (2.0 * f_a - f_q)
}

/// `f_a = 0` or `f_q ≥ f_a`: there is no positive drop to reward.
pub fn is_degenerate(f_a: f64, f_q: f64) -> bool {
    f_a <= 0.0 || f_q >= f_a
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Row {
    pub n: usize,
    pub f_a: f64,
    pub f_q: f64,
    pub drop: f64,
    pub f_m: f64,
    pub degenerate: bool,
}

impl Row {
    pub fn new(n: usize, f_a: f64, f_q: f64) -> Self {
        Self {
            n,
            f_a,
            f_q,
            drop: f_a - f_q,
            f_m: f_m_metric(f_a, f_q),
            degenerate: is_degenerate(f_a, f_q),
        }
    }

    /// Row for a type with no samples.
    pub fn empty() -> Self {
        Self {
            n: 0,
            f_a: 0.0,
            f_q: 0.0,
            drop: 0.0,
            f_m: 0.0,
            degenerate: true,
        }
    }

    /// Unweighted mean of the rows' `f_a` and `f_q`, with `n` summed.
    /// Empty rows are skipped.
    pub fn average(rows: &[Row]) -> Result<Row> {
        let live: Vec<&Row> = rows.iter().filter(|r| r.n > 0).collect();
        if live.is_empty() {
            return Err(Error::EmptyReport);
        }
        let k = live.len() as f64;
        let f_a = live.iter().map(|r| r.f_a).sum::<f64>() / k;
        let f_q = live.iter().map(|r| r.f_q).sum::<f64>() / k;
        Ok(Row::new(live.iter().map(|r| r.n).sum(), f_a, f_q))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReportRows {
    pub presence: Row,
    pub count: Row,
    pub comparison: Row,
    pub rural_urban: Row,
    pub average: Row,
    pub overall: Row,
}

impl ReportRows {
    pub const LABELS: [&'static str; 6] = ["presence", "count", "comparison", "rural_urban", "average", "overall"];

    /// Rows in [`Self::LABELS`] order.
    pub fn as_array(&self) -> [Row; 6] {
        [
            self.presence,
            self.count,
            self.comparison,
            self.rural_urban,
            self.average,
            self.overall,
        ]
    }

    pub fn by_type(&self, t: QuestionType) -> Row {
        self.as_array()[t.index()]
    }
}

/// Builds the report rows from the two regimes' tallies.
pub fn aggregate(standard: &Outcomes, random_image: &Outcomes) -> Result<ReportRows> {
    let mut per_type = [Row::empty(); 4];
    let (mut n, mut ca, mut cq) = (0usize, 0usize, 0usize);
    for t in QuestionType::ALL {
        let a = standard.tallies[t.index()];
        let q = random_image.tallies[t.index()];
        if a.n != q.n {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{t}: {} standard vs {} random-image samples",
                a.n,
                q.n
            )));
        }
        if a.n == 0 {
            continue;
        }
        per_type[t.index()] = Row::new(a.n, a.correct as f64 / a.n as f64, q.correct as f64 / q.n as f64);
        n += a.n;
        ca += a.correct;
        cq += q.correct;
    }
    let average = Row::average(&per_type)?;
    let overall = Row::new(n, ca as f64 / n as f64, cq as f64 / n as f64);
    let [presence, count, comparison, rural_urban] = per_type;
    Ok(ReportRows {
        presence,
        count,
        comparison,
        rural_urban,
        average,
        overall,
    })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsReport {
    pub dataset_id: String,
    pub checkpoint_id: String,
    pub shuffle_seed: u64,
    pub rows: ReportRows,
}

/// Runs both regimes and aggregates. Empty question types come back as
/// warnings alongside the report.
pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    dataset: &DatasetSplit,
    shuffle_seed: u64,
) -> Result<(ReportRows, Vec<Error>)> {
    let standard = evaluate_standard(predictor, dataset)?;
    let random = evaluate_random_image(predictor, dataset, shuffle_seed)?;
    let rows = aggregate(&standard, &random)?;
    Ok((rows, standard.empty_types()))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ComparisonRow {
    pub label: String,
    pub a: Row,
    pub b: Row,
    /// `b − a`.
    pub delta_f_a: f64,
    pub delta_drop: f64,
    pub delta_f_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Comparison {
    pub dataset_id: String,
    pub checkpoint_a: String,
    pub checkpoint_b: String,
    pub rows: Vec<ComparisonRow>,
}

/// Side-by-side rows of two reports on the same dataset.
pub fn compare_runs(a: &MetricsReport, b: &MetricsReport) -> Result<Comparison> {
    if a.dataset_id != b.dataset_id {
        return Err(Error::DatasetMismatch(a.dataset_id.clone(), b.dataset_id.clone()));
    }
    let rows = ReportRows::LABELS
        .iter()
        .zip(a.rows.as_array().into_iter().zip(b.rows.as_array()))
        .map(|(label, (ra, rb))| ComparisonRow {
            label: String::from(*label),
            a: ra,
            b: rb,
            delta_f_a: rb.f_a - ra.f_a,
            delta_drop: rb.drop - ra.drop,
            delta_f_m: rb.f_m - ra.f_m,
        })
        .collect();
    Ok(Comparison {
        dataset_id: a.dataset_id.clone(),
        checkpoint_a: a.checkpoint_id.clone(),
        checkpoint_b: b.checkpoint_id.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_split;
    use proptest::prelude::*;

    fn round4(x: f64) -> f64 {
        (x * 1e4).round() / 1e4
    }

    // (F_a, drop, printed F_m) for both methods: four types, average, overall.
    const TABLE: [(f64, f64, f64); 12] = [
        (0.9011, 0.0450, 0.0857),
        (0.6959, 0.1707, 0.2742),
        (0.8738, 0.0150, 0.0295),
        (0.9000, 0.3900, 0.5442),
        (0.8427, 0.1552, 0.2621),
        (0.8297, 0.0735, 0.1350),
        (0.8994, 0.0852, 0.1557),
        (0.6779, 0.2355, 0.3496),
        (0.8718, 0.1130, 0.2001),
        (0.8600, 0.4300, 0.5733),
        (0.8273, 0.2035, 0.3267),
        (0.8227, 0.1250, 0.2170),
    ];

    #[test]
    fn metric_examples() {
        assert_eq!(round4(f_m_metric(0.9011, 0.8561)), 0.0857);
        assert_eq!(round4(f_m_metric(0.8994, 0.8142)), 0.1557);
        assert!((f_m_metric(0.8, 0.0) - 0.8).abs() < 1e-15);
        assert_eq!(f_m_metric(0.8, 0.8), 0.0);
        assert!(is_degenerate(0.8, 0.8) && is_degenerate(0.0, 0.0) && is_degenerate(0.5, 0.7));
        assert_eq!(f_m_metric(0.5, 0.7), 0.0);
    }

    #[test]
    fn tabulated_values_within_tolerance() {
        for (f_a, drop, printed) in TABLE {
            let v = f_m_metric(f_a, f_a - drop);
            assert!((v - printed).abs() <= 5e-5, "({f_a}, {drop}) -> {v}, printed {printed}");
        }
    }

    #[test]
    fn average_row_is_unweighted() {
        let rows = [0.8994, 0.6779, 0.8718, 0.8600].map(|f_a| Row::new(100, f_a, 0.5));
        let avg = Row::average(&rows).unwrap();
        assert_eq!(round4(avg.f_a), 0.8273);
        assert_eq!(avg.n, 400);
        let single = Row::new(7, 0.6, 0.4);
        assert_eq!(Row::average(&[single, Row::empty()]).unwrap(), single);
        assert_eq!(Row::average(&[Row::empty()]), Err(Error::EmptyReport));
        // Average-row F_m comes from the row's own inputs.
        assert_eq!(round4(Row::new(1, 0.8273, 0.8273 - 0.2035).f_m), 0.3267);
    }

    fn test_split(n: usize) -> DatasetSplit {
        generate_split(n, SplitKind::TestBalanced, 0.9, 11).unwrap()
    }

    #[test]
    fn oracle_scores_perfectly() {
        let d = test_split(80);
        let out = evaluate_standard(&OraclePredictor::default(), &d).unwrap();
        assert!(out.correct.iter().all(|&c| c));
        let (rows, warnings) = evaluate(&OraclePredictor::default(), &d, 3).unwrap();
        assert!(warnings.is_empty());
        for r in &rows.as_array() {
            assert_eq!(r.f_a, 1.0);
        }
    }

    #[test]
    fn tallies_partition_the_split() {
        let d = test_split(120);
        let out = evaluate_standard(&ImageBlindPredictor, &d).unwrap();
        assert_eq!(out.tallies.iter().map(|t| t.n).sum::<usize>(), d.len());
        let correct = out.correct.iter().filter(|&&c| c).count();
        assert_eq!(out.tallies.iter().map(|t| t.correct).sum::<usize>(), correct);
    }

    #[test]
    fn constant_on_binary_type_is_near_chance() {
        let d = test_split(1000);
        let out = evaluate_standard(&ConstantPredictor(Answer::Yes), &d).unwrap();
        let t = out.tallies[QuestionType::Presence.index()];
        assert!(t.n >= 200);
        assert!((t.accuracy().unwrap() - 0.5).abs() <= 0.03);
    }

    #[test]
    fn image_blind_fixed_point() {
        let d = test_split(200);
        let (rows, _) = evaluate(&ImageBlindPredictor, &d, 9).unwrap();
        for r in rows.as_array() {
            assert_eq!(r.f_q, r.f_a);
            assert!(r.degenerate);
        }
    }

    #[test]
    fn random_image_is_seeded() {
        let d = test_split(100);
        let a = evaluate_random_image(&OraclePredictor::default(), &d, 4).unwrap();
        let b = evaluate_random_image(&OraclePredictor::default(), &d, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(random_image_assignment(100, 4), random_image_assignment(100, 5));
        let std = evaluate_standard(&OraclePredictor::default(), &d).unwrap();
        assert!(a.correct.iter().filter(|&&c| c).count() < std.correct.len());
    }

    #[test]
    fn rejects_training_split() {
        let d = generate_split(10, SplitKind::TrainBiased, 0.9, 1).unwrap();
        assert!(matches!(
            evaluate_standard(&ConstantPredictor(Answer::No), &d),
            Err(Error::WrongSplit { .. })
        ));
    }

    #[test]
    fn empty_type_is_reported_and_skipped() {
        let mut d = test_split(60);
        d.samples.retain(|s| s.question_type != QuestionType::Count);
        let (rows, warnings) = evaluate(&OraclePredictor::default(), &d, 1).unwrap();
        assert_eq!(warnings, [Error::EmptyType(QuestionType::Count)]);
        assert_eq!(rows.count, Row::empty());
        assert_eq!(rows.average.n, d.len());
        d.samples.clear();
        assert_eq!(
            evaluate(&OraclePredictor::default(), &d, 1).map(|_| ()),
            Err(Error::EmptyReport)
        );
    }

    fn report(id: &str, rows: [(f64, f64); 6]) -> MetricsReport {
        let r = rows.map(|(f_a, drop)| Row::new(100, f_a, f_a - drop));
        MetricsReport {
            dataset_id: String::from(id),
            checkpoint_id: String::from("ckpt"),
            shuffle_seed: 0,
            rows: ReportRows {
                presence: r[0],
                count: r[1],
                comparison: r[2],
                rural_urban: r[3],
                average: r[4],
                overall: r[5],
            },
        }
    }

    #[test]
    fn comparison_deltas() {
        let pick = |k: usize| core::array::from_fn(|i| (TABLE[6 * k + i].0, TABLE[6 * k + i].1));
        let a = report("d", pick(0));
        let b = report("d", pick(1));
        let c = compare_runs(&a, &b).unwrap();
        let labels: Vec<&str> = c.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ReportRows::LABELS);
        let count = &c.rows[1];
        assert!((count.delta_f_a - (0.6779 - 0.6959)).abs() < 1e-12);
        assert!((count.delta_drop - (0.2355 - 0.1707)).abs() < 1e-12);
        assert!((count.delta_f_m - (f_m_metric(0.6779, 0.4424) - f_m_metric(0.6959, 0.5252))).abs() < 1e-12);
        let same = compare_runs(&a, &a).unwrap();
        assert!(same
            .rows
            .iter()
            .all(|r| r.delta_f_a == 0.0 && r.delta_drop == 0.0 && r.delta_f_m == 0.0));
        assert!(matches!(
            compare_runs(&a, &report("e", pick(1))),
            Err(Error::DatasetMismatch(..))
        ));
    }

    proptest! {
        #[test]
        fn matches_harmonic_mean(f_a in 1e-3f64..=1.0, frac in 0.0f64..0.999) {
            let f_q = f_a * frac;
            let drop = f_a - f_q;
            let hm = 2.0 * f_a * drop / (f_a + drop);
            prop_assert!((f_m_metric(f_a, f_q) - hm).abs() <= 1e-12);
            prop_assert!(f_m_metric(f_a, f_q) <= f_a + 1e-15);
            prop_assert!(f_m_metric(f_a, f_q) > 0.0);
        }

        #[test]
        fn increases_as_random_accuracy_falls(f_a in 1e-2f64..=1.0, x in 0.0f64..1.0, y in 0.0f64..1.0) {
            let (lo, hi) = if x < y { (x, y) } else { (y, x) };
            prop_assume!(hi - lo > 1e-9);
            prop_assert!(f_m_metric(f_a, f_a * lo) > f_m_metric(f_a, f_a * hi));
        }
    }
}
