//! TAP-Vid style evaluation: query extraction and AJ / <delta_avg / OA.
//!
//! Metrics are computed per video over all evaluated (query, frame) pairs and
//! then averaged over videos. Distance thresholds are `{1, 2, 4, 8, 16}`
//! pixels at 256 resolution, rescaled to the working resolution, and a
//! prediction counts as within a threshold when its distance is strictly
//! smaller. Occlusion is predicted by a positive logit.
//!
//! Jaccard at a threshold is `TP / (TP + FP + FN)` with
//!
//! - TP: gt visible, predicted visible, within the threshold;
//! - FP: predicted visible, but gt occluded or farther than the threshold;
//! - FN: gt visible, but predicted occluded or farther than the threshold.
//!
//! A visible-but-far prediction is therefore both an FP and an FN.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::SCALE_REFERENCE;
use crate::synthdata::io::Clip;
use crate::tracker::{predict_chunked, IterationOutput, ModelParams, TrackerError};
use crate::types::{distance, GroundTruthTrack, QueryPoint};

pub const THRESHOLDS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];
/// Strided mode queries every visible multiple of this frame index.
pub const QUERY_STRIDE: usize = 5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("clip {0} has no ground-truth tracks")]
    Unlabeled(usize),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    Strided,
    QFirst,
}

impl std::str::FromStr for QueryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strided" => Ok(Self::Strided),
            "q_first" | "first" => Ok(Self::QFirst),
            other => Err(format!("unknown query mode {other:?} (strided|q_first)")),
        }
    }
}

impl std::fmt::Display for QueryMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Strided => "strided",
            Self::QFirst => "q_first",
        })
    }
}

/// Queries for one track: every visible frame `t` with `t % 5 == 0`
/// (strided), or the first visible frame (q_first). Fully occluded tracks
/// give no queries.
pub fn extract_queries(gt: &GroundTruthTrack, mode: QueryMode) -> Vec<QueryPoint> {
    let at = |t: usize| QueryPoint::new(gt.positions[t][0], gt.positions[t][1], t);
    match mode {
        QueryMode::Strided => gt.visible_frames().filter(|t| t % QUERY_STRIDE == 0).map(at).collect(),
        QueryMode::QFirst => gt.visible_frames().next().map(at).into_iter().collect(),
    }
}

/// Frames scored for a query: all frames, or from the query frame onward.
fn evaluated(mode: QueryMode, query_t: usize, t: usize) -> bool {
    match mode {
        QueryMode::Strided => true,
        QueryMode::QFirst => t >= query_t,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    /// Threshold at 256 scale.
    pub threshold: f64,
    pub position_accuracy: f64,
    pub jaccard: f64,
}

/// Metrics for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub aj: f64,
    pub delta_avg: f64,
    pub oa: f64,
    pub thresholds: Vec<ThresholdMetrics>,
    /// Evaluated (query, frame) pairs.
    pub points: usize,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub aj: f64,
    pub delta_avg: f64,
    pub oa: f64,
    pub thresholds: Vec<ThresholdMetrics>,
    pub points: usize,
    pub videos: usize,
    /// Tracks skipped for having no query under the mode.
    pub skipped_tracks: usize,
    pub mode: QueryMode,
    pub resolution: f64,
}

impl MetricsReport {
    pub fn position_accuracy(&self, threshold: f64) -> Option<f64> {
        self.thresholds.iter().find(|t| t.threshold == threshold).map(|t| t.position_accuracy)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics for one video. `preds[i]` answers `queries[i]`, whose ground truth
/// is `gts[i]`.
pub fn video_metrics(
    preds: &[IterationOutput],
    gts: &[GroundTruthTrack],
    queries: &[QueryPoint],
    mode: QueryMode,
    resolution: f64,
) -> Result<VideoMetrics, EvalError> {
    if preds.len() != gts.len() || gts.len() != queries.len() {
        return Err(EvalError::LengthMismatch(format!("{} predictions, {} tracks, {} queries", preds.len(), gts.len(), queries.len())));
    }
    let scale = resolution / SCALE_REFERENCE;
    let mut occ_correct = 0;
    let mut points = 0;
    let mut visible = 0;
    let mut within = [0usize; 5];
    let mut tp = [0usize; 5];
    let mut fp = [0usize; 5];
    for ((pred, gt), q) in preds.iter().zip(gts).zip(queries) {
        if pred.frames() != gt.len() || q.t >= gt.len() {
            return Err(EvalError::LengthMismatch(format!("prediction has {} frames, track {}", pred.frames(), gt.len())));
        }
        for t in 0..gt.len() {
            if !evaluated(mode, q.t, t) {
                continue;
            }
            points += 1;
            let gt_vis = !gt.occluded[t];
            let pred_vis = !pred.occluded(t);
            occ_correct += (gt_vis == pred_vis) as usize;
            visible += gt_vis as usize;
            let d = distance(pred.positions[t], gt.positions[t]);
            for (k, thr) in THRESHOLDS.iter().enumerate() {
                let close = d < thr * scale;
                if gt_vis && close {
                    within[k] += 1;
                    if pred_vis {
                        tp[k] += 1;
                    }
                }
                if pred_vis && !(gt_vis && close) {
                    fp[k] += 1;
                }
            }
        }
    }
    let thresholds: Vec<ThresholdMetrics> = THRESHOLDS
        .iter()
        .enumerate()
        .map(|(k, &thr)| {
            let fn_ = visible - tp[k];
            ThresholdMetrics {
                threshold: thr,
                position_accuracy: ratio(within[k], visible),
                jaccard: ratio(tp[k], tp[k] + fp[k] + fn_),
            }
        })
        .collect();
    let n = THRESHOLDS.len() as f64;
    Ok(VideoMetrics {
        aj: thresholds.iter().map(|t| t.jaccard).sum::<f64>() / n,
        delta_avg: thresholds.iter().map(|t| t.position_accuracy).sum::<f64>() / n,
        oa: ratio(occ_correct, points),
        thresholds,
        points,
        queries: queries.len(),
    })
}

/// Average per-video metrics into one report.
pub fn aggregate(videos: &[VideoMetrics], mode: QueryMode, resolution: f64, skipped_tracks: usize) -> MetricsReport {
    let used: Vec<&VideoMetrics> = videos.iter().filter(|v| v.points > 0).collect();
    let m = used.len().max(1) as f64;
    let mean = |f: &dyn Fn(&VideoMetrics) -> f64| used.iter().map(|v| f(v)).sum::<f64>() / m;
    let thresholds = THRESHOLDS
        .iter()
        .enumerate()
        .map(|(k, &thr)| ThresholdMetrics {
            threshold: thr,
            position_accuracy: mean(&|v| v.thresholds[k].position_accuracy),
            jaccard: mean(&|v| v.thresholds[k].jaccard),
        })
        .collect();
    MetricsReport {
        aj: mean(&|v| v.aj),
        delta_avg: mean(&|v| v.delta_avg),
        oa: mean(&|v| v.oa),
        thresholds,
        points: used.iter().map(|v| v.points).sum(),
        videos: used.len(),
        skipped_tracks,
        mode,
        resolution,
    }
}

/// One entry per video: final predictions, tracks, and queries.
pub struct VideoResult {
    pub preds: Vec<IterationOutput>,
    pub gts: Vec<GroundTruthTrack>,
    pub queries: Vec<QueryPoint>,
}

pub fn compute_metrics(videos: &[VideoResult], mode: QueryMode, resolution: f64) -> Result<(MetricsReport, Vec<VideoMetrics>), EvalError> {
    let per = videos
        .iter()
        .map(|v| video_metrics(&v.preds, &v.gts, &v.queries, mode, resolution))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((aggregate(&per, mode, resolution, 0), per))
}

/// Queries for every track of a clip, with the track each query belongs to.
pub fn clip_queries(tracks: &[GroundTruthTrack], mode: QueryMode) -> (Vec<QueryPoint>, Vec<GroundTruthTrack>, usize) {
    let mut qs = Vec::new();
    let mut gts = Vec::new();
    let mut skipped = 0;
    for tr in tracks {
        let q = extract_queries(tr, mode);
        if q.is_empty() {
            skipped += 1;
        }
        for qi in q {
            qs.push(qi);
            gts.push(tr.clone());
        }
    }
    (qs, gts, skipped)
}

/// Run the model on labeled clips and score it.
pub fn evaluate(params: &ModelParams, clips: &[Clip], mode: QueryMode, chunk: usize) -> Result<(MetricsReport, Vec<VideoMetrics>), EvalError> {
    let mut per = Vec::with_capacity(clips.len());
    let mut skipped = 0;
    let mut resolution = SCALE_REFERENCE;
    for (i, clip) in clips.iter().enumerate() {
        let tracks = clip.tracks.as_ref().ok_or(EvalError::Unlabeled(i))?;
        resolution = clip.video.height().max(clip.video.width()) as f64;
        let (qs, gts, s) = clip_queries(tracks, mode);
        skipped += s;
        if qs.is_empty() {
            continue;
        }
        let preds: Vec<IterationOutput> = predict_chunked(params, &clip.video, &qs, chunk)?.into_iter().map(|p| p.last().clone()).collect();
        per.push(video_metrics(&preds, &gts, &qs, mode, resolution)?);
    }
    Ok((aggregate(&per, mode, resolution, skipped), per))
}

/// Per-video CSV breakdown.
pub fn metrics_csv(per: &[VideoMetrics]) -> String {
    let mut s = String::from("video,queries,points,aj,delta_avg,oa");
    for thr in THRESHOLDS {
        let _ = write!(s, ",pos_acc_{thr},jaccard_{thr}");
    }
    s.push('\n');
    for (i, v) in per.iter().enumerate() {
        let _ = write!(s, "{i},{},{},{},{},{}", v.queries, v.points, v.aj, v.delta_avg, v.oa);
        for t in &v.thresholds {
            let _ = write!(s, ",{},{}", t.position_accuracy, t.jaccard);
        }
        s.push('\n');
    }
    s
}
