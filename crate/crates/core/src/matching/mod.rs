//! Bipartite matching of object tokens to segments, mask-classification
//! losses, and the phrase-object contrastive loss.

mod hungarian;
mod losses;

pub use hungarian::{brute_force_assignment, hungarian, tie_tolerance, Assignment, BRUTE_FORCE_MAX_SIDE, BRUTE_FORCE_MIN_SIDE};
pub use losses::{
    ground_truth_matching, mask_cls_loss, match_cost, matching_predictions, pocl, pocl_col_form, pocl_row_form, total_loss,
    upsample_mask_logits, GSquash, GroundTruth, GtPhrase, GtSegment, LossConfig, LossOutput, QueryTarget, NO_OBJECT_WEIGHT,
};
