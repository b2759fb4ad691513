#pragma once

#include <span>

#include "dsfed/models.hpp"
#include "dsfed/synth.hpp"
#include "dsfed/tensor.hpp"

namespace dsfed {

struct MetricResult {
  double dice = 0;
  double iou = 0;
  std::size_t n_samples = 0;
};

// Both metrics score 1.0 when prediction and ground truth are both empty.
double dice(const Tensor& pred_mask, const Tensor& gt_mask);
double iou(const Tensor& pred_mask, const Tensor& gt_mask);

/// Foreground where prob >= threshold.
Tensor binarize(const Tensor& prob_map, double threshold = 0.5);

MetricResult evaluate(const ModelParams& model, std::span<const TaskSample> test, double threshold = 0.5);

/// Same as evaluate() for (image, mask) pairs given separately.
MetricResult evaluate_pairs(const ModelParams& model, std::span<const Tensor> images, std::span<const Tensor> masks,
                            double threshold = 0.5);

}  // namespace dsfed
