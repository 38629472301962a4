//! Fusion of per-view skeletons in the reference camera's frame.

use crate::align::{apply, invert, procrustes, AlignMode, SimilarityTransform};
use crate::camera::{relative_rotation, PinholeCam};
use crate::error::{Error, Result};
use crate::handmodel::Skeleton;

/// Result of [`fuse`].
#[derive(Clone, Debug, PartialEq)]
pub struct Fusion {
    /// Equal-weight mean of the aligned skeletons, in the reference frame.
    pub fused: Skeleton,
    /// Per view, the transform from that view's frame to the reference frame.
    pub transforms: Vec<SimilarityTransform>,
}

/// Aligns every view to `reference` and averages.
///
/// With cameras, view `i` is rotated by `R_ref R_i^T`; without, by the
/// rotation-only Procrustes fit of its skeleton onto the reference one.
pub fn fuse(skeletons: &[Skeleton], cams: Option<&[PinholeCam]>, reference: usize) -> Result<Fusion> {
    if skeletons.is_empty() {
        return Err(Error::config("fusion", "at least one view required"));
    }
    if reference >= skeletons.len() {
        return Err(Error::config("fusion.reference", "reference view out of range"));
    }
    if let Some(c) = cams {
        if c.len() != skeletons.len() {
            return Err(Error::config("fusion.cams", "one camera per view required"));
        }
    }
    let transforms = (0..skeletons.len())
        .map(|i| {
            if i == reference {
                return Ok(SimilarityTransform::identity());
            }
            match cams {
                Some(c) => Ok(SimilarityTransform::from_rotation(relative_rotation(
                    &c[reference],
                    &c[i],
                ))),
                None => procrustes(&skeletons[i].0, &skeletons[reference].0, AlignMode::RotationOnly)
                    .map_err(|e| Error::View {
                        view: i,
                        source: Box::new(e),
                    }),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut fused = Skeleton::default();
    for (s, t) in skeletons.iter().zip(&transforms) {
        for (f, p) in fused.iter_mut().zip(apply(t, &s.0)) {
            *f += p;
        }
    }
    let k = skeletons.len() as f64;
    for f in fused.iter_mut() {
        *f /= k;
    }
    Ok(Fusion { fused, transforms })
}

/// The fused skeleton expressed in the frame of the view `t` was computed for.
pub fn to_view(fused: &Skeleton, t: &SimilarityTransform) -> Skeleton {
    let pts = apply(&invert(t), &fused.0);
    Skeleton::from_rows(&pts.iter().map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>())
        .expect("21 joints")
}
