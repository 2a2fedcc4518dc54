#include "unsq/metrics.hpp"

#include "unsq/data.hpp"

namespace unsq {

namespace {

struct PixelCounts {
  std::int64_t inter_fg = 0, union_fg = 0;
  std::int64_t inter_bg = 0, union_bg = 0;
};

PixelCounts count_pixels(const TensorXd& pred, const TensorXd& truth) {
  if (!(pred.shape() == truth.shape())) {
    throw ShapeError("iou: shape mismatch " + pred.shape().str() + " vs " + truth.shape().str());
  }
  PixelCounts c;
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    const double p = pred.data()[i], t = truth.data()[i];
    if ((p != 0.0 && p != 1.0) || (t != 0.0 && t != 1.0)) {
      throw Error("iou: non-binary mask value at flat index " + std::to_string(i));
    }
    const bool pf = p == 1.0, tf = t == 1.0;
    c.inter_fg += (pf && tf) ? 1 : 0;
    c.union_fg += (pf || tf) ? 1 : 0;
    c.inter_bg += (!pf && !tf) ? 1 : 0;
    c.union_bg += (!pf || !tf) ? 1 : 0;
  }
  return c;
}

double ratio_or_one(std::int64_t inter, std::int64_t uni) {
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace

double iou(const TensorXd& pred_mask, const TensorXd& true_mask) {
  const PixelCounts c = count_pixels(pred_mask, true_mask);
  return ratio_or_one(c.inter_fg, c.union_fg);
}

double iou_class_averaged(const TensorXd& pred_mask, const TensorXd& true_mask) {
  const PixelCounts c = count_pixels(pred_mask, true_mask);
  return 0.5 * (ratio_or_one(c.inter_fg, c.union_fg) + ratio_or_one(c.inter_bg, c.union_bg));
}

TensorXd predict_mask_from_logits(const TensorXd& logits) {
  const Shape s = logits.shape();
  if (s.c != 2) throw ShapeError("predict_mask: expected 2 channels, got " + std::to_string(s.c));
  auto out = TensorXd::zeros(Shape{s.n, 1, s.h, s.w});
  const Eigen::Index plane = s.plane();
  for (Eigen::Index n = 0; n < s.n; ++n) {
    const double* z0 = logits.data() + (n * 2 + 0) * plane;
    const double* z1 = logits.data() + (n * 2 + 1) * plane;
    double* m = out.data() + n * plane;
    for (Eigen::Index i = 0; i < plane; ++i) m[i] = z1[i] > z0[i] ? 1.0 : 0.0;
  }
  return out;
}

TensorXd predict_mask(UnetModel<double>& model, const TensorXd& images, Eigen::Index batch_size) {
  const Shape s = images.shape();
  auto out = TensorXd::zeros(Shape{s.n, 1, s.h, s.w});
  Tape<double> tape(false);
  for (Eigen::Index start = 0; start < s.n; start += batch_size) {
    const Eigen::Index end = std::min(s.n, start + batch_size);
    std::vector<Eigen::Index> idx;
    for (Eigen::Index i = start; i < end; ++i) idx.push_back(i);
    const TensorXd logits = model.forward(tape, gather_batch(images, idx), Mode::Eval);
    const TensorXd masks = predict_mask_from_logits(logits);
    std::copy_n(masks.data(), masks.size(), out.data() + start * s.plane());
  }
  return out;
}

}  // namespace unsq
