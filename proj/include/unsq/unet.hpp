#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "unsq/layers.hpp"
#include "unsq/serialize.hpp"

namespace unsq {

enum class ParamCountMode { Plain, PaperCompat };

// A 5-level U-net parameterized by the starting channel depth C: contracting
// level l has width C*2^l (bottom level reaches 16C), the expansive path
// mirrors back down to C, and a final 1x1 conv maps to the 2 class channels.
struct UnetConfig {
  Eigen::Index start_channels = 64;
  Eigen::Index levels = 5;
  Eigen::Index in_channels = 1;
  Eigen::Index out_classes = 2;
  bool batch_norm_contracting = false;
  ParamCountMode param_count_mode = ParamCountMode::Plain;

  void validate() const {
    if (start_channels < 1) throw Error("unet config: start_channels must be >= 1");
    if (levels != 5) throw Error("unet config: levels is fixed at 5");
    if (in_channels < 1) throw Error("unet config: in_channels must be >= 1");
    if (out_classes != 2) throw Error("unet config: out_classes is fixed at 2");
  }
};

template <typename Scalar>
struct DoubleConv {
  ConvParams<Scalar> conv1, conv2;
  std::optional<BatchNormParams<Scalar>> bn1, bn2;
};

template <typename Scalar>
struct UpStage {
  ConvParams<Scalar> upconv;
  DoubleConv<Scalar> block;
};

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> tensor;
};

template <typename Scalar>
struct UnetModel {
  UnetConfig config;
  std::uint64_t build_seed = 0;
  std::array<DoubleConv<Scalar>, 4> down;
  DoubleConv<Scalar> bottom;
  std::array<UpStage<Scalar>, 4> up;  // up[0] is the deepest stage
  ConvParams<Scalar> head;

  static DoubleConv<Scalar> make_block(Eigen::Index c_in, Eigen::Index c_out, bool bn,
                                       std::mt19937_64& rng) {
    DoubleConv<Scalar> b;
    b.conv1 = ConvParams<Scalar>::he_init(c_out, c_in, 3, rng);
    b.conv2 = ConvParams<Scalar>::he_init(c_out, c_out, 3, rng);
    if (bn) {
      b.bn1 = BatchNormParams<Scalar>::init(c_out);
      b.bn2 = BatchNormParams<Scalar>::init(c_out);
    }
    return b;
  }

  static UnetModel build(const UnetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    UnetModel m;
    m.config = cfg;
    m.build_seed = seed;
    std::mt19937_64 rng(seed);
    const Eigen::Index C = cfg.start_channels;
    Eigen::Index in_c = cfg.in_channels;
    for (int l = 0; l < 4; ++l) {
      const Eigen::Index width = C << l;
      m.down[static_cast<std::size_t>(l)] = make_block(in_c, width, cfg.batch_norm_contracting, rng);
      in_c = width;
    }
    m.bottom = make_block(8 * C, 16 * C, cfg.batch_norm_contracting, rng);
    Eigen::Index prev = 16 * C;
    for (int i = 0; i < 4; ++i) {
      const Eigen::Index width = prev / 2;
      auto& stage = m.up[static_cast<std::size_t>(i)];
      stage.upconv = ConvParams<Scalar>::he_init(width, prev, 2, rng);
      stage.block = make_block(2 * width, width, false, rng);
      prev = width;
    }
    m.head = ConvParams<Scalar>::he_init(cfg.out_classes, C, 1, rng);
    return m;
  }

  Tensor<Scalar> run_block(Tape<Scalar>& tape, DoubleConv<Scalar>& b, const Tensor<Scalar>& in, Mode mode) {
    Tensor<Scalar> x = conv2d(tape, in, b.conv1, Padding::Same);
    if (b.bn1) x = batch_norm2d(tape, x, *b.bn1, mode);
    x = relu(tape, x);
    x = conv2d(tape, x, b.conv2, Padding::Same);
    if (b.bn2) x = batch_norm2d(tape, x, *b.bn2, mode);
    return relu(tape, x);
  }

  // Eval mode reads batch-norm running statistics and mutates nothing.
  Tensor<Scalar> forward(Tape<Scalar>& tape, const Tensor<Scalar>& batch, Mode mode) {
    const Shape s = batch.shape();
    if (s.c != config.in_channels) {
      throw ShapeError("unet forward: input has " + std::to_string(s.c) + " channels, model expects " +
                       std::to_string(config.in_channels));
    }
    if (s.h % 16 != 0 || s.w % 16 != 0) {
      throw ShapeError("unet forward: spatial dims must be divisible by 16, got " + std::to_string(s.h) +
                       "x" + std::to_string(s.w));
    }
    std::array<Tensor<Scalar>, 4> skips;
    Tensor<Scalar> x = batch;
    for (int l = 0; l < 4; ++l) {
      x = run_block(tape, down[static_cast<std::size_t>(l)], x, mode);
      skips[static_cast<std::size_t>(l)] = x;
      x = max_pool2d(tape, x).output;
    }
    x = run_block(tape, bottom, x, mode);
    for (int i = 0; i < 4; ++i) {
      auto& stage = up[static_cast<std::size_t>(i)];
      x = conv_transpose2d(tape, x, stage.upconv);
      x = concat_channels(tape, skips[static_cast<std::size_t>(3 - i)], x);
      x = run_block(tape, stage.block, x, mode);
    }
    return conv2d(tape, x, head, Padding::Same);
  }

  // Trainable tensors in a fixed traversal order; every tensor appears once.
  std::vector<Tensor<Scalar>> parameters() {
    std::vector<Tensor<Scalar>> out;
    auto add_block = [&out](DoubleConv<Scalar>& b) {
      out.push_back(b.conv1.weight);
      out.push_back(b.conv1.bias);
      if (b.bn1) {
        out.push_back(b.bn1->gamma);
        out.push_back(b.bn1->beta);
      }
      out.push_back(b.conv2.weight);
      out.push_back(b.conv2.bias);
      if (b.bn2) {
        out.push_back(b.bn2->gamma);
        out.push_back(b.bn2->beta);
      }
    };
    for (auto& b : down) add_block(b);
    add_block(bottom);
    for (auto& stage : up) {
      out.push_back(stage.upconv.weight);
      out.push_back(stage.upconv.bias);
      add_block(stage.block);
    }
    out.push_back(head.weight);
    out.push_back(head.bias);
    return out;
  }

  // All persistent state (parameters plus batch-norm running statistics).
  std::vector<NamedTensor<Scalar>> named_tensors() {
    std::vector<NamedTensor<Scalar>> out;
    auto add_conv = [&out](const std::string& prefix, ConvParams<Scalar>& c) {
      out.push_back({prefix + ".weight", c.weight});
      out.push_back({prefix + ".bias", c.bias});
    };
    auto add_bn = [&out](const std::string& prefix, BatchNormParams<Scalar>& bn) {
      out.push_back({prefix + ".gamma", bn.gamma});
      out.push_back({prefix + ".beta", bn.beta});
      out.push_back({prefix + ".running_mean", bn.running_mean});
      out.push_back({prefix + ".running_var", bn.running_var});
    };
    auto add_block = [&](const std::string& prefix, DoubleConv<Scalar>& b) {
      add_conv(prefix + ".conv1", b.conv1);
      if (b.bn1) add_bn(prefix + ".bn1", *b.bn1);
      add_conv(prefix + ".conv2", b.conv2);
      if (b.bn2) add_bn(prefix + ".bn2", *b.bn2);
    };
    for (int l = 0; l < 4; ++l) add_block("down" + std::to_string(l), down[static_cast<std::size_t>(l)]);
    add_block("bottom", bottom);
    for (int i = 0; i < 4; ++i) {
      const std::string prefix = "up" + std::to_string(i);
      add_conv(prefix + ".upconv", up[static_cast<std::size_t>(i)].upconv);
      add_block(prefix + ".block", up[static_cast<std::size_t>(i)].block);
    }
    add_conv("head", head);
    return out;
  }

  // Conv sites in traversal order (introspection and counting).
  std::vector<const ConvParams<Scalar>*> conv_sites() const {
    std::vector<const ConvParams<Scalar>*> out;
    auto add_block = [&out](const DoubleConv<Scalar>& b) {
      out.push_back(&b.conv1);
      out.push_back(&b.conv2);
    };
    for (const auto& b : down) add_block(b);
    add_block(bottom);
    for (const auto& stage : up) {
      out.push_back(&stage.upconv);
      add_block(stage.block);
    }
    out.push_back(&head);
    return out;
  }

  std::int64_t enumerated_param_count(ParamCountMode mode) {
    if (mode == ParamCountMode::Plain) {
      std::int64_t total = 0;
      for (auto& p : parameters()) total += p.size();
      return total;
    }
    // paper-compat: conv tensors plus 2 per-channel parameters on every 3x3
    // conv of both paths, independent of where batch norm actually sits
    std::int64_t total = 0;
    for (const auto* c : conv_sites()) {
      total += c->weight.size() + c->bias.size();
      if (c->kh() == 3 && c->kw() == 3) total += 2 * c->out_channels();
    }
    return total;
  }

  UnetModel clone() {
    UnetModel copy = *this;
    auto deep = [](ConvParams<Scalar>& c) {
      c.weight = c.weight.clone(c.weight.requires_grad());
      c.bias = c.bias.clone(c.bias.requires_grad());
    };
    auto deep_block = [&deep](DoubleConv<Scalar>& b) {
      deep(b.conv1);
      deep(b.conv2);
      for (auto* bn : {&b.bn1, &b.bn2}) {
        if (*bn) {
          (*bn)->gamma = (*bn)->gamma.clone(true);
          (*bn)->beta = (*bn)->beta.clone(true);
          (*bn)->running_mean = (*bn)->running_mean.clone(false);
          (*bn)->running_var = (*bn)->running_var.clone(false);
        }
      }
    };
    for (auto& b : copy.down) deep_block(b);
    deep_block(copy.bottom);
    for (auto& stage : copy.up) {
      deep(stage.upconv);
      deep_block(stage.block);
    }
    deep(copy.head);
    return copy;
  }
};

// Closed-form parameter count for the 5-level plan. `plain` sums
// k^2*c_in*c_out + c_out over every conv (plus gamma/beta on contracting
// 3x3 convs when batch norm is enabled); `paper-compat` instead adds 2
// per-channel parameters on every 3x3 conv of both paths.
inline std::int64_t count_params(const UnetConfig& cfg) {
  cfg.validate();
  const std::int64_t C = cfg.start_channels;
  auto conv = [](std::int64_t k, std::int64_t ci, std::int64_t co) { return k * k * ci * co + co; };
  std::int64_t total = 0, all_3x3_channels = 0, contracting_channels = 0;
  std::int64_t prev = cfg.in_channels;
  for (int l = 0; l <= 4; ++l) {
    const std::int64_t width = C << l;
    total += conv(3, prev, width) + conv(3, width, width);
    contracting_channels += 2 * width;
    all_3x3_channels += 2 * width;
    prev = width;
  }
  for (int l = 3; l >= 0; --l) {
    const std::int64_t width = C << l;
    total += conv(2, 2 * width, width);
    total += conv(3, 2 * width, width) + conv(3, width, width);
    all_3x3_channels += 2 * width;
  }
  total += conv(1, C, cfg.out_classes);
  if (cfg.param_count_mode == ParamCountMode::PaperCompat) return total + 2 * all_3x3_channels;
  if (cfg.batch_norm_contracting) total += 2 * contracting_channels;
  return total;
}

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'U', 'N', 'S', 'Q', 'C', 'K', 'P', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace detail

template <typename Scalar>
std::string serialize_checkpoint(UnetModel<Scalar>& model) {
  detail::ByteWriter w;
  w.buf.append(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  w.raw<std::uint32_t>(detail::kCheckpointVersion);
  w.raw<std::int64_t>(model.config.start_channels);
  w.raw<std::int64_t>(model.config.levels);
  w.raw<std::int64_t>(model.config.in_channels);
  w.raw<std::int64_t>(model.config.out_classes);
  w.raw<std::uint8_t>(model.config.batch_norm_contracting ? 1 : 0);
  w.raw<std::uint64_t>(model.build_seed);
  auto named = model.named_tensors();
  w.raw<std::uint32_t>(static_cast<std::uint32_t>(named.size()));
  for (auto& [name, t] : named) {
    w.str(name);
    const Shape s = t.shape();
    w.raw<std::int64_t>(s.n);
    w.raw<std::int64_t>(s.c);
    w.raw<std::int64_t>(s.h);
    w.raw<std::int64_t>(s.w);
    for (Eigen::Index i = 0; i < t.size(); ++i) w.raw<double>(static_cast<double>(t.data()[i]));
  }
  return std::move(w.buf);
}

template <typename Scalar>
std::uint64_t state_hash(UnetModel<Scalar>& model) {
  const std::string bytes = serialize_checkpoint(model);
  return fnv1a64(bytes.data(), bytes.size());
}

template <typename Scalar>
void save_checkpoint(UnetModel<Scalar>& model, const std::filesystem::path& path) {
  detail::write_file_bytes(path, serialize_checkpoint(model), "save_checkpoint");
}

template <typename Scalar = double>
UnetModel<Scalar> load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file_bytes(path, "load_checkpoint");
  detail::ByteReader r(bytes, "load_checkpoint");
  if (bytes.size() < sizeof(detail::kCheckpointMagic) ||
      std::memcmp(bytes.data(), detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic)) != 0) {
    throw CheckpointError("load_checkpoint: " + path.string() + " is not a checkpoint file");
  }
  r.pos = sizeof(detail::kCheckpointMagic);
  const auto version = r.raw<std::uint32_t>();
  if (version != detail::kCheckpointVersion) {
    throw CheckpointVersionError("load_checkpoint: unsupported version " + std::to_string(version) +
                                 " (expected " + std::to_string(detail::kCheckpointVersion) + ")");
  }
  UnetConfig cfg;
  cfg.start_channels = r.raw<std::int64_t>();
  cfg.levels = r.raw<std::int64_t>();
  cfg.in_channels = r.raw<std::int64_t>();
  cfg.out_classes = r.raw<std::int64_t>();
  cfg.batch_norm_contracting = r.raw<std::uint8_t>() != 0;
  const auto seed = r.raw<std::uint64_t>();
  auto model = UnetModel<Scalar>::build(cfg, seed);
  auto named = model.named_tensors();
  const auto count = r.raw<std::uint32_t>();
  if (count != named.size()) {
    throw CheckpointShapeError("load_checkpoint: expected " + std::to_string(named.size()) +
                               " tensors for this config, file has " + std::to_string(count));
  }
  for (auto& [name, t] : named) {
    const std::string stored = r.str();
    if (stored != name) {
      throw CheckpointError("load_checkpoint: expected tensor '" + name + "', file has '" + stored + "'");
    }
    Shape s;
    s.n = r.raw<std::int64_t>();
    s.c = r.raw<std::int64_t>();
    s.h = r.raw<std::int64_t>();
    s.w = r.raw<std::int64_t>();
    if (!(s == t.shape())) {
      throw CheckpointShapeError("load_checkpoint: tensor '" + name + "' has shape " + s.str() +
                                 ", config requires " + t.shape().str());
    }
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(r.raw<double>());
  }
  if (!r.done()) throw CheckpointError("load_checkpoint: trailing bytes after last tensor");
  return model;
}

}  // namespace unsq
