#![allow(dead_code)]

use std::io::Write;
use std::sync::{Arc, OnceLock};

use semlab::attacks::{run_attack, AttackConfig, AttackError, GradientOracle, ScoreOracle, WhiteBoxOracle};
use semlab::ensemble::{build_collection, AcaRecord, CollectionRecipe, ModelCollection};
use semlab::kernel::Tensor;
use semlab::nets::{GradTarget, Model, NetError};
use semlab::rng::RngStream;
use semlab::smoothing::{Classifier, FnClassifier};
use semlab::threat::{Engagement, ThreatError};
use semlab::workbench::config::RunConfig;
use semlab::workbench::dataset::{gen_dataset, SyntheticDataset};

/// Default dataset and a collection trained with the default recipe, built once per test binary.
pub struct Setup {
    pub cfg: RunConfig,
    pub data: SyntheticDataset,
    pub recipe: CollectionRecipe,
    pub collection: Arc<ModelCollection>,
    pub table: Vec<AcaRecord>,
}

pub fn setup() -> &'static Setup {
    static CELL: OnceLock<Setup> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = RunConfig::default();
        let data = gen_dataset(&cfg.dataset).unwrap();
        let recipe = cfg.recipe();
        let (c, table) = build_collection(&recipe, &data.train, &data.test, cfg.exec).unwrap();
        Setup {
            cfg,
            data,
            recipe,
            collection: Arc::new(c),
            table,
        }
    })
}

/// Writes straight to the process stdout so the line shows even when test output is captured.
pub fn report(criterion: u32, pass: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "criterion {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = out.flush();
}

pub struct ModelOracle<'a>(pub &'a Model);

impl WhiteBoxOracle for ModelOracle<'_> {
    fn grad(&mut self, x: &Tensor, target: GradTarget) -> Result<Tensor, AttackError> {
        self.0.input_grad(x, target).map_err(AttackError::Net)
    }
}

pub struct ModelScores<'a>(pub &'a Model);

impl ScoreOracle for ModelScores<'_> {
    fn scores(&mut self, x: &Tensor) -> Result<Vec<f64>, AttackError> {
        self.0.predict_proba(x).map_err(AttackError::Net)
    }
}

type LinearFn = Box<dyn Fn(&Tensor, &mut RngStream) -> Result<usize, NetError> + Send + Sync>;

/// Two-class linear defense `w.x + b > 0 => 1`, attacked through its exact gradient.
pub struct LinearEngagement {
    pub w: Vec<f64>,
    pub b: f64,
    classifier: FnClassifier<LinearFn>,
}

impl LinearEngagement {
    pub fn new(w: Vec<f64>, b: f64) -> Self {
        let (wc, bc) = (w.clone(), b);
        let f: LinearFn = Box::new(move |x, _| {
            Ok(usize::from(wc.iter().zip(x.data()).map(|(a, v)| a * v).sum::<f64>() + bc > 0.0))
        });
        Self {
            w,
            b,
            classifier: FnClassifier::new(2, f),
        }
    }

    pub fn margin(&self, x: &Tensor) -> f64 {
        self.w.iter().zip(x.data()).map(|(a, v)| a * v).sum::<f64>() + self.b
    }
}

struct LinearGrad<'a>(&'a [f64]);

impl WhiteBoxOracle for LinearGrad<'_> {
    fn grad(&mut self, _x: &Tensor, t: GradTarget) -> Result<Tensor, AttackError> {
        // the class-1 loss falls along +w
        let s = if t.class() == 1 { -1.0 } else { 1.0 };
        Ok(Tensor::vector(self.0.iter().map(|v| s * v).collect()))
    }
}

impl Engagement for LinearEngagement {
    fn attack(&self, cfg: &AttackConfig, x: &Tensor, y: usize, rng: &mut RngStream) -> Result<Tensor, ThreatError> {
        Ok(run_attack(cfg, GradientOracle::White(&mut LinearGrad(&self.w)), x, y, rng)?)
    }

    fn defense(&self) -> &dyn Classifier {
        &self.classifier
    }

    fn label(&self) -> String {
        "linear".into()
    }
}
