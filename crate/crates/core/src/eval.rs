//! Pairwise fine-grained evaluation on synthetic contrast sets.
//!
//! Items come in Winoground shape — two images, two captions, caption `i`
//! matching image `i` only — plus a bundle of perturbed variants of caption 0
//! for ARO-style tests. A [`Scorer`] maps one (image, caption) pair to a
//! deterministic score in `[0, 1]`; the harness turns pairwise comparisons
//! into percentages.
//!
//! Metric naming follows the evaluation protocol this mirrors: the **image
//! score** is the percent of samples where the model picks the correct *text*
//! for each image, the **text score** is the percent where it picks the
//! correct *image* for each text, and the **group score** requires both
//! jointly. (Several published uses of these metrics swap the first two
//! labels; we keep the protocol's own wording rather than guessing intent.)
//!
//! All comparisons are strict: a tie counts as a failure. Scoring takes `&self`
//! everywhere, so a harness may fan items out across threads without any
//! coordination; the implementations here run sequentially.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::data::EvalItem;
use crate::error::{Error, Result};
use crate::model::{Model, ModelV};
use crate::negatives::PerturbRule;
use crate::scalar::{as_f64, lit, Real};
use crate::tape::Tape;
use crate::tensor::{dot, Tensor};
use crate::train::project_values;

// ---- scorer interface ------------------------------------------------------------

/// Which caption of an item a score request refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptionRef {
    /// `item.captions[i]`.
    Item(usize),
    /// `item.aro[i].tokens`, a perturbation of caption 0.
    Perturbed(usize),
}

/// Scores one (image, caption) pair of an eval item. Implementations must be
/// deterministic and must not mutate anything (`&self` only).
pub trait Scorer {
    fn score(&self, item: &EvalItem, image: usize, caption: CaptionRef) -> Result<f64>;

    /// Short label for reports.
    fn name(&self) -> String;
}

fn caption_tokens_of<'a>(item: &'a EvalItem, caption: CaptionRef) -> Result<&'a [u16]> {
    match caption {
        CaptionRef::Item(i) => item
            .captions
            .get(i)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Index(format!("caption {i} of item {}", item.id))),
        CaptionRef::Perturbed(i) => item
            .aro
            .get(i)
            .map(|p| p.tokens.as_slice())
            .ok_or_else(|| Error::Index(format!("perturbation {i} of item {}", item.id))),
    }
}

fn image_pixels_of(item: &EvalItem, image: usize) -> Result<&[f64]> {
    item.images
        .get(image)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::Index(format!("image {image} of item {}", item.id)))
}

// ---- model scorer ----------------------------------------------------------------

/// Which head produces the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreMode {
    /// Matching probability from the fused joint CLS (default).
    #[default]
    ItmProbability,
    /// Affine-rescaled contrastive cosine similarity (ablation path).
    ItcSimilarity,
}

/// Scores pairs with a trained (or freshly initialized) model snapshot. Holds
/// shared references only, so evaluation cannot mutate the model, the visual
/// dictionary, or anything else.
pub struct ModelScorer<'a, T: Real> {
    model: &'a Model<T>,
    book: &'a Codebook<T>,
    mode: ScoreMode,
}

impl<'a, T: Real> ModelScorer<'a, T> {
    pub fn new(model: &'a Model<T>, book: &'a Codebook<T>, mode: ScoreMode) -> Result<Self> {
        if book.m() == 0 || book.c() != model.cfg.embed_dim {
            return Err(Error::Config(format!(
                "codebook is {}×{}, model embeds in {}",
                book.m(),
                book.c(),
                model.cfg.embed_dim
            )));
        }
        Ok(ModelScorer { model, book, mode })
    }

    fn patches(&self, image: &[f64]) -> Result<Tensor<T>> {
        let cfg = &self.model.cfg;
        let want = cfg.num_patches * cfg.patch_feat;
        if image.len() != want {
            return Err(Error::Shape {
                op: "pair_score",
                lhs: vec![cfg.num_patches, cfg.patch_feat],
                rhs: vec![image.len()],
            });
        }
        Tensor::from_vec(
            vec![cfg.num_patches, cfg.patch_feat],
            image.iter().map(|&x| lit::<T>(x)).collect(),
        )
    }

    /// ITM matching probability for one pair: the inference analogue of the
    /// positive-pair training path, with local patch states replaced by their
    /// quantized dictionary entries.
    pub fn itm_probability(&self, image: &[f64], caption: &[u16]) -> Result<f64> {
        let cfg = &self.model.cfg;
        let patches = self.patches(image)?;
        let mut tape = Tape::new();
        let mv = self.model.bind(&mut tape, false);
        let pvar = tape.constant(patches);
        let seq = mv.vision.forward(&mut tape, pvar)?;
        let (cls_row, locals) = ModelV::split_cls(&mut tape, seq)?;
        let assignments = self.book.quantize(tape.value(locals))?;
        let mut quantized = self.book.lookup_rows(&assignments)?;
        if cfg.fusion_posemb {
            let pe = self.model.vision.posemb();
            for (q, p) in quantized.data_mut().iter_mut().zip(pe.data()) {
                *q += *p;
            }
        }
        let qv = tape.constant(quantized);
        let tokens = tape.concat_rows(&[cls_row, qv])?;
        let enc = mv.text.forward(&mut tape, caption)?;
        let fused = mv.fusion.forward(&mut tape, enc.seq, Some(tokens), &enc.mask)?;
        let joint_cls = tape.slice_rows(fused, 0, 1)?;
        let logits = mv.itm_head.forward(&mut tape, joint_cls)?;
        let p = tape.softmax_rows(logits, T::one())?;
        // Class 1 = match.
        Ok(as_f64(tape.value(p).row(0)[1]))
    }

    /// Contrastive cosine similarity of the pair's joint projections, in
    /// `[-1, 1]`.
    pub fn itc_cosine(&self, image: &[f64], caption: &[u16]) -> Result<f64> {
        let patches = self.patches(image)?;
        let (v_cls, _) = self.model.encode_image_values(&patches)?;
        let (t_cls, _) = self.model.encode_text_values(caption)?;
        let v = project_values(&self.model.proj_v, &v_cls)?;
        let t = project_values(&self.model.proj_t, &t_cls)?;
        Ok(as_f64(dot(&v, &t)))
    }

    /// The configured score in `[0, 1]`.
    pub fn pair_score(&self, image: &[f64], caption: &[u16]) -> Result<f64> {
        let s = match self.mode {
            ScoreMode::ItmProbability => self.itm_probability(image, caption)?,
            ScoreMode::ItcSimilarity => (self.itc_cosine(image, caption)? + 1.0) / 2.0,
        };
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Contract(format!("pair score {s} outside [0, 1]")));
        }
        Ok(s)
    }
}

impl<T: Real> Scorer for ModelScorer<'_, T> {
    fn score(&self, item: &EvalItem, image: usize, caption: CaptionRef) -> Result<f64> {
        self.pair_score(image_pixels_of(item, image)?, caption_tokens_of(item, caption)?)
    }

    fn name(&self) -> String {
        match self.mode {
            ScoreMode::ItmProbability => "model-itm".into(),
            ScoreMode::ItcSimilarity => "model-itc".into(),
        }
    }
}

// ---- reference scorers -----------------------------------------------------------

/// Reads the construction metadata: 1 for the true pairing, 0 otherwise.
pub struct OracleScorer;

impl Scorer for OracleScorer {
    fn score(&self, item: &EvalItem, image: usize, caption: CaptionRef) -> Result<f64> {
        image_pixels_of(item, image)?;
        caption_tokens_of(item, caption)?;
        Ok(match caption {
            CaptionRef::Item(ci) if ci == image => 1.0,
            _ => 0.0,
        })
    }

    fn name(&self) -> String {
        "oracle".into()
    }
}

/// The oracle inverted: 0 for the true pairing, 1 otherwise.
pub struct AntiOracleScorer;

impl Scorer for AntiOracleScorer {
    fn score(&self, item: &EvalItem, image: usize, caption: CaptionRef) -> Result<f64> {
        Ok(1.0 - OracleScorer.score(item, image, caption)?)
    }

    fn name(&self) -> String {
        "anti-oracle".into()
    }
}

/// The same fixed score for every pair; every comparison ties and fails.
pub struct ConstantScorer(pub f64);

impl Scorer for ConstantScorer {
    fn score(&self, item: &EvalItem, image: usize, caption: CaptionRef) -> Result<f64> {
        image_pixels_of(item, image)?;
        caption_tokens_of(item, caption)?;
        Ok(self.0)
    }

    fn name(&self) -> String {
        "constant".into()
    }
}

/// Uniform(0,1) scores, i.i.d. per (item, image, caption) triple and
/// reproducible under the seed: each triple gets its own derived stream, so
/// scoring order cannot change any value.
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn score(&self, item: &EvalItem, image: usize, caption: CaptionRef) -> Result<f64> {
        image_pixels_of(item, image)?;
        caption_tokens_of(item, caption)?;
        let code = match caption {
            CaptionRef::Item(ci) => ci as u64,
            CaptionRef::Perturbed(pi) => 2 + pi as u64,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((item.id << 5) | ((image as u64) << 4) | code);
        Ok(rng.gen::<f64>())
    }

    fn name(&self) -> String {
        "random".into()
    }
}

// ---- metrics ---------------------------------------------------------------------

/// Winoground-style percentages. See the module docs for the naming
/// convention (image = correct text for each image, text = correct image for
/// each text).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinogroundScores {
    pub text: f64,
    pub image: f64,
    pub group: f64,
}

/// ARO-style accuracy for one perturbation rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleAccuracy {
    pub rule: String,
    /// Items that carried at least one perturbation of this rule.
    pub items: usize,
    /// Percentage over those items; absent when no item carried the rule.
    pub accuracy: Option<f64>,
}

/// ARO-style accuracies: overall plus the per-rule breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AroScores {
    /// Percent of items whose true caption outscores every perturbation.
    pub overall: f64,
    pub by_rule: Vec<RuleAccuracy>,
}

/// The full report for one scorer over one item set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub scorer: String,
    pub items: usize,
    pub winoground: WinogroundScores,
    pub aro: AroScores,
}

fn pct(hits: usize, total: usize) -> f64 {
    100.0 * hits as f64 / total as f64
}

/// Both-comparisons-correct percentages over the items; ties fail.
pub fn winoground_metrics<S: Scorer + ?Sized>(
    scorer: &S,
    items: &[EvalItem],
) -> Result<WinogroundScores> {
    if items.is_empty() {
        return Err(Error::Contract("winoground_metrics needs at least one item".into()));
    }
    let (mut text_ok, mut image_ok, mut group_ok) = (0usize, 0usize, 0usize);
    for item in items {
        let s00 = scorer.score(item, 0, CaptionRef::Item(0))?;
        let s01 = scorer.score(item, 0, CaptionRef::Item(1))?;
        let s10 = scorer.score(item, 1, CaptionRef::Item(0))?;
        let s11 = scorer.score(item, 1, CaptionRef::Item(1))?;
        // Correct text for each image.
        let image = s00 > s01 && s11 > s10;
        // Correct image for each text.
        let text = s00 > s10 && s11 > s01;
        image_ok += image as usize;
        text_ok += text as usize;
        group_ok += (image && text) as usize;
    }
    let n = items.len();
    let scores = WinogroundScores {
        text: pct(text_ok, n),
        image: pct(image_ok, n),
        group: pct(group_ok, n),
    };
    debug_assert!(scores.group <= scores.text.min(scores.image) + 1e-12);
    Ok(scores)
}

/// Percent of items whose true caption strictly outscores every perturbed
/// caption (judged against image 0), plus the per-rule breakdown.
pub fn aro_style_accuracy<S: Scorer + ?Sized>(scorer: &S, items: &[EvalItem]) -> Result<AroScores> {
    if items.is_empty() {
        return Err(Error::Contract("aro_style_accuracy needs at least one item".into()));
    }
    let mut overall_ok = 0usize;
    let mut rule_total = [0usize; PerturbRule::ALL.len()];
    let mut rule_ok = [0usize; PerturbRule::ALL.len()];
    for item in items {
        if item.aro.is_empty() {
            return Err(Error::Contract(format!("item {} has no perturbed captions", item.id)));
        }
        let truth = scorer.score(item, 0, CaptionRef::Item(0))?;
        let mut all_beaten = true;
        let mut rule_beaten = [true; PerturbRule::ALL.len()];
        let mut rule_seen = [false; PerturbRule::ALL.len()];
        for (pi, p) in item.aro.iter().enumerate() {
            let s = scorer.score(item, 0, CaptionRef::Perturbed(pi))?;
            let beaten = truth > s;
            all_beaten &= beaten;
            let r = PerturbRule::ALL.iter().position(|&x| x == p.rule).expect("known rule");
            rule_seen[r] = true;
            rule_beaten[r] &= beaten;
        }
        overall_ok += all_beaten as usize;
        for r in 0..PerturbRule::ALL.len() {
            if rule_seen[r] {
                rule_total[r] += 1;
                rule_ok[r] += rule_beaten[r] as usize;
            }
        }
    }
    let by_rule = PerturbRule::ALL
        .iter()
        .enumerate()
        .map(|(r, rule)| RuleAccuracy {
            rule: rule.name().to_string(),
            items: rule_total[r],
            accuracy: (rule_total[r] > 0).then(|| pct(rule_ok[r], rule_total[r])),
        })
        .collect();
    Ok(AroScores { overall: pct(overall_ok, items.len()), by_rule })
}

/// Runs both metric families and assembles the report.
pub fn evaluate<S: Scorer + ?Sized>(scorer: &S, items: &[EvalItem]) -> Result<ScoreReport> {
    Ok(ScoreReport {
        scorer: scorer.name(),
        items: items.len(),
        winoground: winoground_metrics(scorer, items)?,
        aro: aro_style_accuracy(scorer, items)?,
    })
}

impl ScoreReport {
    /// Machine-readable single-line record.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scorer: {}    items: {}", self.scorer, self.items)?;
        writeln!(f, "  pairwise contrast (both comparisons strict):")?;
        writeln!(f, "    {:<14} {:>6.2}%   (correct image for each text)", "text score", self.winoground.text)?;
        writeln!(f, "    {:<14} {:>6.2}%   (correct text for each image)", "image score", self.winoground.image)?;
        writeln!(f, "    {:<14} {:>6.2}%   (both jointly)", "group score", self.winoground.group)?;
        writeln!(f, "  caption perturbations (true caption must beat every variant):")?;
        writeln!(f, "    {:<14} {:>6.2}%", "overall", self.aro.overall)?;
        for r in &self.aro.by_rule {
            match r.accuracy {
                Some(a) => {
                    writeln!(f, "    {:<14} {a:>6.2}%   ({} items)", r.rule, r.items)?
                }
                None => writeln!(f, "    {:<14}      –   (0 items)", r.rule)?,
            }
        }
        Ok(())
    }
}
