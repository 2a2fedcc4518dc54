#pragma once

#include "unsq/tensor.hpp"
#include "unsq/unet.hpp"

namespace unsq {

// Micro-averaged foreground IoU: intersection and union pooled over the whole
// split. Both masks all-background counts as 1.0.
double iou(const TensorXd& pred_mask, const TensorXd& true_mask);

// Mean of foreground and background IoU (each with the both-empty rule).
double iou_class_averaged(const TensorXd& pred_mask, const TensorXd& true_mask);

// Per-pixel argmax of the temperature-1 softmax; a tie goes to background.
TensorXd predict_mask_from_logits(const TensorXd& logits);

// Batched eval-mode forward + argmax over a stack of images.
TensorXd predict_mask(UnetModel<double>& model, const TensorXd& images, Eigen::Index batch_size = 8);

}  // namespace unsq
