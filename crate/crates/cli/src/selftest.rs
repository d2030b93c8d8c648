//! Property suites run by `deepmatch selftest`.

use deepmatch::autograd::{find_tie_free_instance, gradcheck, Attachment, GradcheckConfig, GradcheckInstance, ParamId};
use deepmatch::decoder::{decode, decode_oracle, mismatched_cells};
use deepmatch::descriptors::{Extractor, ExtractorParams, GrayImage};
use deepmatch::io::{generate_pair, MotionKind, SyntheticSpec, TextureKind};
use deepmatch::pipeline::Model;
use deepmatch::pyramid::{build_from_scores, PyramidState};
use deepmatch::training::{LossConfig, PairSample};
use deepmatch::{GeometryConfig, Result, ScoreMap, Stage, SENTINEL};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one property suite.
#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub failures: Vec<String>,
    pub notes: Vec<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn small_geometry(levels: usize, range0: usize) -> GeometryConfig {
    GeometryConfig {
        levels,
        range0,
        alpha0: 4,
        beta0: 2,
        gamma0: 1,
        delta0: 4,
        eta0: 1,
    }
}

/// Pyramid over a random level-0 map: ~10% SENTINEL, ~10% exact zeros.
pub fn random_pyramid(seed: u64) -> Result<PyramidState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.random_range(1..=6);
    let cols = rng.random_range(1..=6);
    let range0 = rng.random_range(1..=8);
    let levels = rng.random_range(1..=3);
    let span = 2 * range0 + 1;
    let data = (0..rows * cols * span * span)
        .map(|_| {
            let u: f64 = rng.random();
            if u < 0.1 {
                SENTINEL
            } else if u < 0.2 {
                0.0
            } else {
                rng.random()
            }
        })
        .collect();
    let s0 = ScoreMap::from_vec(rows, cols, range0, Stage::Full(0), data)?;
    let exponents: Vec<f64> = (0..levels).map(|_| rng.random_range(0.8..2.0)).collect();
    build_from_scores(s0, &small_geometry(levels, range0), &exponents)
}

/// Decoder against exhaustive path enumeration on `count` random pyramids.
pub fn oracle_suite(seed: u64, count: usize) -> SuiteReport {
    let mut report = SuiteReport {
        name: "decoder-oracle equivalence",
        cases: count,
        ..Default::default()
    };
    for i in 0..count as u64 {
        let case = seed.wrapping_add(i);
        let outcome = random_pyramid(case).and_then(|pyr| {
            let fast = decode(&pyr)?;
            let slow = decode_oracle(&pyr)?;
            mismatched_cells(fast.q0(), &slow)
        });
        match outcome {
            Ok(0) => {}
            Ok(n) => report.failures.push(format!("pyramid seed {case}: {n} mismatched cells")),
            Err(e) => report.failures.push(format!("pyramid seed {case}: {e}")),
        }
    }
    report
}

/// One 16x16 gradcheck instance (L=2, trainable descriptors).
pub fn gradcheck_instance(seed: u64) -> Result<GradcheckInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = generate_pair(&SyntheticSpec {
        width: 16,
        height: 16,
        texture: TextureKind::SmoothNoise,
        motion: MotionKind::Translation {
            dx: rng.random_range(-2..=2),
            dy: rng.random_range(-2..=2),
        },
        magnitude: 2.0,
        max_displacement: 4.0,
        seed,
    })?;
    let mut model = Model::new(
        small_geometry(2, 4),
        Extractor::Trainable(ExtractorParams::init([4, 6, 8], seed)),
    );
    model.exponents = vec![rng.random_range(1.1..1.8), rng.random_range(1.1..1.8)];
    Ok(GradcheckInstance {
        model,
        sample: PairSample {
            image0: GrayImage::from(&pair.image0),
            image1: GrayImage::from(&pair.image1),
            flow: pair.flow,
        },
        loss: LossConfig {
            attachment: Attachment::Decoded(0),
            sigma: 2.0,
            normalize: false,
        },
    })
}

/// Every exponent and `weights` sampled descriptor weights on `count`
/// tie-free instances.
pub fn gradcheck_suite(seed: u64, count: usize, weights: usize) -> SuiteReport {
    let cfg = GradcheckConfig::default();
    let tolerance = 1e-4;
    let mut report = SuiteReport {
        name: "gradient check",
        cases: count,
        ..Default::default()
    };
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    for i in 0..count as u64 {
        let start = seed.wrapping_add(i).wrapping_mul(1000);
        let run = || -> Result<_> {
            let (found, inst) = find_tie_free_instance(gradcheck_instance, start, 100, &cfg)?;
            let n = inst.model.extractor.params().map_or(0, |p| p.len());
            let mut rng = ChaCha8Rng::seed_from_u64(found);
            let mut params: Vec<ParamId> = (0..inst.model.exponents.len()).map(ParamId::Exponent).collect();
            params.extend(sample(&mut rng, n, weights.min(n)).into_iter().map(ParamId::Extractor));
            Ok((found, gradcheck(&inst, &params, &cfg)?))
        };
        match run() {
            Ok((found, r)) => {
                checked += r.checked();
                skipped += r.skipped();
                worst = worst.max(r.max_rel_error());
                for e in r.entries.iter().filter(|e| !e.tie_skipped && e.rel_error > tolerance) {
                    report.failures.push(format!(
                        "instance seed {found}, {:?}: analytic {:.6e} vs numeric {:.6e} (rel {:.2e})",
                        e.param, e.analytic, e.numeric, e.rel_error
                    ));
                }
            }
            Err(e) => report.failures.push(format!("instance from seed {start}: {e}")),
        }
    }
    if checked == 0 {
        report.failures.push("no gradient entry was checked".into());
    }
    report.notes.push(format!(
        "{checked} entries checked, {skipped} tie-skipped, max relative error {worst:.2e}"
    ));
    report
}
