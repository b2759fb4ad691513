#include "dsfed/metrics.hpp"

#include <stdexcept>

namespace dsfed {

namespace {

struct Overlap {
  double inter = 0, pred = 0, gt = 0;
};

Overlap count_overlap(const Tensor& pred, const Tensor& gt, const char* who) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError(std::string(who) + ": shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
  }
  Overlap o;
  auto p = pred.data(), g = gt.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if ((p[i] != 0.0 && p[i] != 1.0) || (g[i] != 0.0 && g[i] != 1.0)) {
      throw std::invalid_argument(std::string(who) + ": masks must be binary; threshold predictions first");
    }
    o.inter += p[i] * g[i];
    o.pred += p[i];
    o.gt += g[i];
  }
  return o;
}

}  // namespace

double dice(const Tensor& pred_mask, const Tensor& gt_mask) {
  const auto o = count_overlap(pred_mask, gt_mask, "dice");
  if (o.pred + o.gt == 0) return 1.0;
  return 2.0 * o.inter / (o.pred + o.gt);
}

double iou(const Tensor& pred_mask, const Tensor& gt_mask) {
  const auto o = count_overlap(pred_mask, gt_mask, "iou");
  const double uni = o.pred + o.gt - o.inter;
  if (uni == 0) return 1.0;
  return o.inter / uni;
}

Tensor binarize(const Tensor& prob_map, double threshold) {
  std::vector<double> out(prob_map.size());
  auto d = prob_map.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = d[i] >= threshold ? 1.0 : 0.0;
  return Tensor::from(prob_map.shape(), std::move(out));
}

MetricResult evaluate_pairs(const ModelParams& model, std::span<const Tensor> images, std::span<const Tensor> masks,
                            double threshold) {
  if (images.empty()) throw std::invalid_argument("evaluate: empty test set");
  if (images.size() != masks.size()) throw std::invalid_argument("evaluate: image/mask count mismatch");
  const Tensor params = Tensor::from({model.values.size()}, model.values);
  MetricResult r;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Tensor pred = binarize(forward(model.spec, params, images[i]), threshold);
    r.dice += dice(pred, masks[i]);
    r.iou += iou(pred, masks[i]);
  }
  r.n_samples = images.size();
  r.dice /= static_cast<double>(r.n_samples);
  r.iou /= static_cast<double>(r.n_samples);
  return r;
}

MetricResult evaluate(const ModelParams& model, std::span<const TaskSample> test, double threshold) {
  std::vector<Tensor> images, masks;
  for (const auto& s : test) {
    images.push_back(s.image);
    masks.push_back(s.mask);
  }
  return evaluate_pairs(model, images, masks, threshold);
}

}  // namespace dsfed
