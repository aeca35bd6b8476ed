use rayon::prelude::*;

use crate::augcodec::{
    apply_trace, image_size, prepare_original, sample_trace, AugmentationTrace, Image, LayoutDescriptor, PolicyPair, View,
};
use crate::error::Result;
use crate::seeding;

/// Domain tag separating augmentation streams from other seeded draws.
pub const AUGMENT_STREAM: u64 = 0x0a06_5eed;

/// Views of `N` source images: entries `0..N` are first views, `N..2N`
/// second views, matching the loss layout.
#[derive(Debug, Clone)]
pub struct ViewBatch {
    pub views: Vec<Image>,
    pub originals: Vec<Image>,
    pub traces: Vec<AugmentationTrace>,
    /// Normalized trace encodings aligned with `views`.
    pub codes: Vec<Vec<f64>>,
}

impl ViewBatch {
    pub fn images(&self) -> usize {
        self.originals.len()
    }
}

/// Samples and applies two transformations per image. The stream for image
/// `offset + i` at `step` depends on nothing else, so batches are
/// reproducible regardless of worker scheduling.
pub fn generate_views(
    images: &[Image],
    policies: &PolicyPair,
    layout: &LayoutDescriptor,
    seed: u64,
    step: u64,
    offset: usize,
) -> Result<ViewBatch> {
    let per_image: Vec<_> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let size = image_size(img);
            let mut out = Vec::with_capacity(2);
            for (k, view) in [View::First, View::Second].into_iter().enumerate() {
                let policy = policies.get(view);
                let mut rng = seeding::rng(seed, &[AUGMENT_STREAM, step, (offset + i) as u64, k as u64]);
                let trace = sample_trace(policy, size, &mut rng);
                let pixels = apply_trace(img, &trace, policy)?;
                let code = layout.encode_normalized(&trace)?;
                out.push((pixels, trace, code));
            }
            let original = prepare_original(img, policies.get(View::First))?;
            Ok((out, original))
        })
        .collect::<Result<_>>()?;

    let n = images.len();
    let mut batch = ViewBatch {
        views: Vec::with_capacity(2 * n),
        originals: Vec::with_capacity(n),
        traces: Vec::with_capacity(2 * n),
        codes: Vec::with_capacity(2 * n),
    };
    for k in 0..2 {
        for (views, _) in &per_image {
            let (pixels, trace, code) = &views[k];
            batch.views.push(pixels.clone());
            batch.traces.push(*trace);
            batch.codes.push(code.clone());
        }
    }
    batch.originals = per_image.into_iter().map(|(_, o)| o).collect();
    Ok(batch)
}
