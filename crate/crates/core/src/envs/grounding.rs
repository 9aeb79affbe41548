use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{prior_policy, template_sequence, Environment, PriorSpec, COORD_SLOTS, NOUN_SLOT, TEMPLATE_LEN};
use crate::error::{LabError, Result};
use crate::geometry::BoundingBox;
use crate::policy::FactoredPolicy;
use crate::rewards::{extract_box, format_reward, RewardBreakdown};
use crate::rng::{domain, stream, StreamRng};
use crate::vocab::{TokenClass, TokenId, Vocabulary};

const JITTER_RETRIES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingQuery {
    pub gt: BoundingBox,
    pub noun: usize,
}

/// Box localization on a `grid x grid` board. Each episode scores the answer
/// against a ground truth whose edges are independently perturbed by up to
/// `jitter` cells, modelling inconsistent annotation.
#[derive(Debug, Clone)]
pub struct GroundingEnv {
    grid: u32,
    jitter: u32,
    vocab: Vocabulary,
    queries: Vec<GroundingQuery>,
    prior: PriorSpec,
    /// Every valid jittered ground truth per query; rejection sampling makes
    /// each equally likely.
    jitter_sets: Vec<Vec<BoundingBox>>,
}

impl GroundingEnv {
    pub fn new(grid: u32, jitter: u32, nouns: usize, queries: Vec<GroundingQuery>, prior: PriorSpec) -> Result<Self> {
        if grid == 0 {
            return Err(LabError::config("env.grid", "must be positive"));
        }
        if nouns == 0 {
            return Err(LabError::config("env.nouns", "need at least one noun token"));
        }
        if queries.is_empty() {
            return Err(LabError::config("env.queries", "need at least one query"));
        }
        for q in &queries {
            let [x1, y1, x2, y2] = q.gt.coords();
            BoundingBox::new(x1, y1, x2, y2, grid)?;
            if q.noun >= nouns {
                return Err(LabError::config("env.nouns", format!("query noun {} out of range", q.noun)));
            }
        }
        let jitter_sets = queries.iter().map(|q| jitter_set(&q.gt, jitter, grid)).collect();
        Ok(Self {
            grid,
            jitter,
            vocab: Vocabulary::new(nouns, grid),
            queries,
            prior,
            jitter_sets,
        })
    }

    /// Draws `count` ground-truth boxes with sides in `[min_side, max_side]`,
    /// kept at least `jitter` cells away from the border.
    pub fn generate(
        grid: u32,
        count: usize,
        jitter: u32,
        nouns: usize,
        min_side: u32,
        max_side: u32,
        seed: u64,
        prior: PriorSpec,
    ) -> Result<Self> {
        if min_side == 0 || min_side > max_side {
            return Err(LabError::config("env.min_side", "need 0 < min_side <= max_side"));
        }
        if max_side + 2 * jitter > grid {
            return Err(LabError::config("env.max_side", format!("max_side + 2*jitter must fit in grid {grid}")));
        }
        if nouns == 0 {
            return Err(LabError::config("env.nouns", "need at least one noun token"));
        }
        let mut rng = stream(seed, &[domain::QUERIES]);
        let queries = (0..count)
            .map(|i| {
                let w = rng.gen_range(min_side..=max_side);
                let h = rng.gen_range(min_side..=max_side);
                let x1 = rng.gen_range(jitter..=grid - jitter - w);
                let y1 = rng.gen_range(jitter..=grid - jitter - h);
                Ok(GroundingQuery {
                    gt: BoundingBox::new(x1, y1, x1 + w, y1 + h, grid)?,
                    noun: i % nouns,
                })
            })
            .collect::<Result<_>>()?;
        Self::new(grid, jitter, nouns, queries, prior)
    }

    pub fn grid(&self) -> u32 {
        self.grid
    }

    pub fn jitter(&self) -> u32 {
        self.jitter
    }

    pub fn queries(&self) -> &[GroundingQuery] {
        &self.queries
    }

    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    pub fn jitter_candidates(&self, query: usize) -> &[BoundingBox] {
        &self.jitter_sets[query]
    }

    /// One annotation draw: each edge moves by a uniform offset in
    /// `[-jitter, jitter]`, redrawn until the box is valid.
    pub fn jittered_gt(&self, query: usize, rng: &mut StreamRng) -> BoundingBox {
        let gt = self.queries[query].gt;
        if self.jitter == 0 {
            return gt;
        }
        let j = i64::from(self.jitter);
        let [x1, y1, x2, y2] = gt.coords().map(i64::from);
        for _ in 0..JITTER_RETRIES {
            let mut d = || rng.gen_range(-j..=j);
            if let Some(b) = BoundingBox::checked(x1 + d(), y1 + d(), x2 + d(), y2 + d(), self.grid) {
                return b;
            }
        }
        gt
    }
}

fn jitter_set(gt: &BoundingBox, jitter: u32, grid: u32) -> Vec<BoundingBox> {
    let j = i64::from(jitter);
    let [x1, y1, x2, y2] = gt.coords().map(i64::from);
    let mut out = Vec::new();
    for a in -j..=j {
        for b in -j..=j {
            for c in -j..=j {
                for d in -j..=j {
                    if let Some(bx) = BoundingBox::checked(x1 + a, y1 + b, x2 + c, y2 + d, grid) {
                        out.push(bx);
                    }
                }
            }
        }
    }
    out
}

impl Environment for GroundingEnv {
    fn name(&self) -> &'static str {
        "grounding"
    }

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn num_queries(&self) -> usize {
        self.queries.len()
    }

    fn seq_len(&self) -> usize {
        TEMPLATE_LEN
    }

    fn slot_classes(&self) -> Vec<TokenClass> {
        let seq = self.reference_sequence(0);
        seq.iter().map(|&t| self.vocab.class(t).expect("template token")).collect()
    }

    fn answer_slots(&self) -> Vec<usize> {
        COORD_SLOTS.to_vec()
    }

    fn reference_sequence(&self, query: usize) -> Vec<TokenId> {
        let q = &self.queries[query];
        template_sequence(&self.vocab, q.noun, q.gt.coords())
    }

    fn reward(&self, query: usize, tokens: &[TokenId], rng: &mut StreamRng) -> RewardBreakdown {
        let gt = self.jittered_gt(query, rng);
        let predicted = extract_box(tokens, &self.vocab, self.grid);
        RewardBreakdown::new(
            crate::rewards::accuracy_reward(predicted.as_ref(), &gt),
            format_reward(tokens, &self.vocab),
        )
    }

    fn expected_reward(&self, query: usize, tokens: &[TokenId]) -> f64 {
        let format = format_reward(tokens, &self.vocab);
        let Some(pred) = extract_box(tokens, &self.vocab, self.grid) else {
            return format;
        };
        let set = &self.jitter_sets[query];
        format + set.iter().map(|gt| pred.iou(gt)).sum::<f64>() / set.len() as f64
    }

    fn clean_score(&self, query: usize, tokens: &[TokenId]) -> f64 {
        extract_box(tokens, &self.vocab, self.grid).map_or(0.0, |b| b.iou(&self.queries[query].gt))
    }

    fn expected_clean_score(&self, policy: &FactoredPolicy, query: usize) -> f64 {
        let reference = self.reference_sequence(query);
        // Structural slots must hold their tag; the noun slot any non-tag token.
        let mut format_prob = 1.0;
        for t in 0..TEMPLATE_LEN {
            if COORD_SLOTS.contains(&t) {
                continue;
            }
            let probs = policy.probs(query, t);
            format_prob *= if t == NOUN_SLOT {
                (0..self.vocab.len())
                    .filter(|&id| self.vocab.class(id) != Some(TokenClass::Structural))
                    .map(|id| probs[id])
                    .sum::<f64>()
            } else {
                probs[reference[t]]
            };
        }
        let coord_probs: Vec<Vec<f64>> = COORD_SLOTS
            .iter()
            .map(|&t| {
                let probs = policy.probs(query, t);
                (0..=self.grid).map(|v| probs[self.vocab.number(v)]).collect()
            })
            .collect();
        let gt = self.queries[query].gt;
        let mut expected = 0.0;
        for x1 in 0..=self.grid {
            for x2 in x1 + 1..=self.grid {
                let px = coord_probs[0][x1 as usize] * coord_probs[2][x2 as usize];
                for y1 in 0..=self.grid {
                    for y2 in y1 + 1..=self.grid {
                        let b = BoundingBox::new(x1, y1, x2, y2, self.grid).expect("enumerated box is valid");
                        expected += px * coord_probs[1][y1 as usize] * coord_probs[3][y2 as usize] * b.iou(&gt);
                    }
                }
            }
        }
        format_prob * expected
    }

    fn initial_policy(&self) -> Result<FactoredPolicy> {
        let refs: Vec<Vec<TokenId>> = (0..self.queries.len()).map(|q| self.reference_sequence(q)).collect();
        prior_policy(&self.vocab, &refs, &self.prior)
    }
}
