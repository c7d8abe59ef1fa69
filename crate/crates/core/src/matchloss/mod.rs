//! Bipartite matching between ground truths and queries, and the set
//! losses trained against it.

mod giou;
mod hungarian;
mod loss;

pub use giou::{giou, iou, to_corners, BoxCxCyWh};
pub use hungarian::{hungarian, CostMatrix, MatchResult};
pub use loss::{
    batch_loss, focal_sum, giou_graph, layer_losses, matching_cost, total_loss, HoiInstance, LossBreakdown,
    LossConfig, LossTerms, LossVars, SetLoss,
};

impl HoiInstance {
    pub fn validate(&self, num_obj: usize, num_int: usize) -> crate::Result<()> {
        for b in [&self.human_box, &self.object_box] {
            if !(b[2] > 0.0 && b[3] > 0.0) || b.iter().any(|v| !v.is_finite()) {
                return Err(crate::Error::InvalidBox(*b));
            }
        }
        if self.obj_class >= num_obj {
            return Err(crate::Error::ClassRange { index: self.obj_class, limit: num_obj });
        }
        if self.int_class >= num_int {
            return Err(crate::Error::ClassRange { index: self.int_class, limit: num_int });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
