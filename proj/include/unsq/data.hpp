#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "unsq/tensor.hpp"

namespace unsq {

// Synthetic EM-like binary segmentation: smooth textured background with
// elliptical foreground blobs at a distinct intensity plus additive noise.
struct SynthConfig {
  Eigen::Index num_images = 32;  // per split
  Eigen::Index h = 64;
  Eigen::Index w = 64;
  double foreground_fraction = 0.0532;  // ~1/18.8, yields w_f near 17.8
  int min_blobs = 1;
  int max_blobs = 6;
  double min_radius = 3.0;
  double max_radius = 10.0;
  double noise_std = 0.05;
  double background_level = 0.30;
  double foreground_level = 0.85;
  double texture_amplitude = 0.08;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ManifestEntry {
  std::string image;
  std::string mask;
  Eigen::Index h = 0;
  Eigen::Index w = 0;
};

struct DatasetManifest {
  std::filesystem::path root;  // directory holding manifest.json; not serialized
  std::string split = "train";
  std::vector<ManifestEntry> entries;
  std::int64_t foreground_pixels = 0;
  std::int64_t background_pixels = 0;
  bool synthetic = false;
  SynthConfig generator;
  std::uint64_t content_hash = 0;
};

struct Dataset {
  TensorXd images;  // n x 1 x h x w, values in [0,1]
  TensorXd masks;   // n x 1 x h x w, values in {0,1}
  DatasetManifest manifest;

  Eigen::Index size() const { return images.defined() ? images.shape().n : 0; }
};

// 8-bit binary PGM (P5) rasters.
struct PgmImage {
  Eigen::Index h = 0;
  Eigen::Index w = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

void write_pgm(const std::filesystem::path& path, const PgmImage& img);
PgmImage read_pgm(const std::filesystem::path& path);

// Writes img_NNNN.pgm / msk_NNNN.pgm plus manifest.json into dir.
DatasetManifest generate_synthetic(const SynthConfig& config, const std::filesystem::path& dir,
                                   const std::string& split);

DatasetManifest read_manifest(const std::filesystem::path& manifest_path);
void write_manifest(const DatasetManifest& manifest);

// Loads and validates: referenced files exist, hash matches, masks strictly
// binary, dims shared and divisible by 16, statistics recomputable.
Dataset load_dataset(const std::filesystem::path& manifest_path);

// Deterministic per-(seed, epoch) permutation carved into batches; the final
// partial batch is included.
std::vector<Eigen::Index> epoch_permutation(Eigen::Index n, std::uint64_t seed, std::int64_t epoch,
                                            bool shuffle);
std::vector<std::vector<Eigen::Index>> epoch_batches(Eigen::Index n, Eigen::Index batch_size,
                                                     std::uint64_t seed, std::int64_t epoch, bool shuffle);

class BatchStream {
 public:
  BatchStream(Eigen::Index n, Eigen::Index batch_size, std::uint64_t seed, bool shuffle);
  const std::vector<Eigen::Index>& next();
  std::int64_t epoch() const { return epoch_; }

 private:
  Eigen::Index n_;
  Eigen::Index batch_size_;
  std::uint64_t seed_;
  bool shuffle_;
  std::int64_t epoch_ = -1;
  std::size_t cursor_ = 0;
  std::vector<std::vector<Eigen::Index>> batches_;
};

TensorXd gather_batch(const TensorXd& t, const std::vector<Eigen::Index>& indices);

// Teacher probability maps for a split, aligned with dataset order. Persisted
// per sample in a tiny raster container (PGM cannot hold probabilities):
// magic "UNSQSFT1", version, channel count, dims, little-endian 64-bit reals.
struct SoftTargetSet {
  TensorXd probs;  // n x 2 x h x w
  double temperature = 1.0;
  std::uint64_t teacher_hash = 0;
  std::uint64_t set_hash = 0;  // hash over the encoded rasters

  Eigen::Index size() const { return probs.defined() ? probs.shape().n : 0; }
};

std::string encode_soft_raster(const double* data, Eigen::Index c, Eigen::Index h, Eigen::Index w);
std::uint64_t soft_set_hash(const TensorXd& probs);
void save_soft_targets(const SoftTargetSet& set, const std::filesystem::path& dir);
SoftTargetSet load_soft_targets(const std::filesystem::path& dir);

namespace detail {

// Unbiased bounded draw (rejection on the top of the 64-bit range), used by
// the hand-rolled Fisher-Yates so shuffles do not depend on library internals.
inline std::uint64_t bounded_rand(std::mt19937_64& rng, std::uint64_t bound) {
  const std::uint64_t threshold = (0 - bound) % bound;
  for (;;) {
    const std::uint64_t r = rng();
    if (r >= threshold) return r % bound;
  }
}

template <typename T>
void fisher_yates(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[static_cast<std::size_t>(bounded_rand(rng, i))]);
  }
}

}  // namespace detail

}  // namespace unsq
