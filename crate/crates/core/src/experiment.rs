//! Train-and-evaluate runs shared by the CLI and the test suites: scoring a
//! frame set with a model, and the feature-group / branch / radius grid.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::eval::{evaluate, EvalFrame, EvalReport};
use crate::features::{extract_frame_features, FeatureGroups};
use crate::infer::Rescorer;
use crate::net::GaceModel;
use crate::par;
use crate::trainer::{
    build_training_set, check_channels, train, Frame, TrainConfig, TrainError, TrainingSet,
};

/// Frames for evaluation, with detection scores optionally replaced.
pub fn eval_frames(frames: &[Frame], scores: Option<&[Vec<f64>]>) -> Vec<EvalFrame> {
    frames
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let mut dets = f.detections.clone();
            if let Some(s) = scores {
                for (d, s) in dets.iter_mut().zip(&s[k]) {
                    d.score = *s;
                }
            }
            EvalFrame::new(
                f.frame_id.clone(),
                dets,
                f.ground_truth.clone().unwrap_or_default(),
            )
        })
        .collect()
}

/// New scores for every frame, in frame order.
pub fn rescore_all(model: &GaceModel, frames: &[Frame]) -> Result<Vec<Vec<f64>>, TrainError> {
    for f in frames {
        check_channels(&model.norm, &f.points).map_err(|source| TrainError::Channels {
            frame: f.frame_id.clone(),
            source,
        })?;
    }
    let net = Rescorer::new(model);
    Ok(par::map(frames, |f| {
        net.scores(&extract_frame_features(
            &f.detections,
            &f.points.points,
            &model.norm,
        ))
    }))
}

/// Trains on `train`, rescores `eval` and returns the evaluation report.
pub fn train_and_evaluate(
    store: &TrainingSet,
    eval: &[Frame],
    cfg: &TrainConfig,
    class_names: &[String],
) -> Result<(GaceModel, EvalReport), TrainError> {
    let model = train(store, cfg)?;
    let scores = rescore_all(&model, eval)?;
    let report = evaluate(
        &eval_frames(eval, Some(&scores)),
        class_names,
        &cfg.thresholds.0,
    );
    Ok((model, report))
}

/// One grid cell: which instance groups are visible and whether the
/// contextual branch runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub groups: FeatureGroups,
    pub context: bool,
    pub radius: f64,
}

impl Variant {
    pub fn full(radius: f64) -> Self {
        Self {
            name: "instance+context".into(),
            groups: FeatureGroups::all(),
            context: true,
            radius,
        }
    }

    pub fn instance_only(radius: f64) -> Self {
        Self {
            name: "instance-only".into(),
            groups: FeatureGroups::all(),
            context: false,
            radius,
        }
    }

    /// Box properties feed the neighbor encoder; no point-derived inputs.
    pub fn context_only(radius: f64) -> Self {
        Self {
            name: "context-only".into(),
            groups: FeatureGroups {
                box_properties: true,
                ..FeatureGroups::none()
            },
            context: true,
            radius,
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.groups = self.groups;
        cfg.branches.context = self.context;
        cfg.radius = self.radius;
        cfg
    }
}

/// Feature-group build-up without context, then the branch comparison.
pub fn feature_grid(radius: f64) -> Vec<Variant> {
    let g = |box_properties, num_points, viewing_angle, point_statistics| FeatureGroups {
        box_properties,
        num_points,
        viewing_angle,
        point_statistics,
    };
    let inst = |name: &str, groups| Variant {
        name: name.into(),
        groups,
        context: false,
        radius,
    };
    vec![
        inst("box", g(true, false, false, false)),
        inst("box+points", g(true, true, false, false)),
        inst("box+points+angle", g(true, true, true, false)),
        Variant::instance_only(radius),
        Variant::context_only(radius),
        Variant::full(radius),
    ]
}

/// Full model at each radius.
pub fn radius_sweep(radii: &[f64]) -> Vec<Variant> {
    radii
        .iter()
        .map(|&r| Variant {
            name: format!("r={r}"),
            ..Variant::full(r)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub variant: Variant,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub baseline: EvalReport,
    pub rows: Vec<GridRow>,
}

impl GridReport {
    pub fn row(&self, name: &str) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.variant.name == name)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let names: Vec<&str> = self
            .baseline
            .classes
            .iter()
            .map(|c| c.class_name.as_str())
            .collect();
        let _ = write!(s, "{:<20} {:>6}", "variant", "radius");
        for n in &names {
            let _ = write!(s, " {:>10}", n);
        }
        let _ = writeln!(s, " {:>7} {:>8}", "mAP", "mAP@R40");
        let mut line = |name: &str, radius: String, r: &EvalReport| {
            let _ = write!(s, "{:<20} {:>6}", name, radius);
            for c in &r.classes {
                let _ = write!(s, " {:>10.2}", 100.0 * c.ap);
            }
            let _ = writeln!(s, " {:>7.2} {:>8.2}", 100.0 * r.map, 100.0 * r.map_r40);
        };
        line("baseline", "-".into(), &self.baseline);
        for row in &self.rows {
            line(
                &row.variant.name,
                format!("{}", row.variant.radius),
                &row.report,
            );
        }
        s
    }
}

/// Trains one model per variant. Feature caches are shared between
/// variants with the same radius.
pub fn run_grid<I>(
    train_frames: I,
    eval: &[Frame],
    base: &TrainConfig,
    variants: &[Variant],
    class_names: &[String],
) -> Result<GridReport, TrainError>
where
    I: Fn() -> Vec<Frame>,
{
    let baseline = evaluate(&eval_frames(eval, None), class_names, &base.thresholds.0);
    let mut stores: BTreeMap<u64, TrainingSet> = BTreeMap::new();
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let cfg = v.apply(base);
        let key = cfg.radius.to_bits();
        if let Entry::Vacant(slot) = stores.entry(key) {
            let frames = train_frames();
            slot.insert(build_training_set(
                frames.into_iter().map(Ok::<_, TrainError>),
                &cfg.norm_config(),
                &cfg.thresholds,
            )?);
        }
        let (_, report) = train_and_evaluate(&stores[&key], eval, &cfg, class_names)?;
        log::info!("{}: mAP {:.2}", v.name, 100.0 * report.map);
        rows.push(GridRow {
            variant: v.clone(),
            report,
        });
    }
    Ok(GridReport { baseline, rows })
}
