#include "unsq/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "unsq/serialize.hpp"

namespace unsq {

using nlohmann::json;

void SynthConfig::validate() const {
  if (num_images < 1) throw DataError("synth config: num_images must be >= 1");
  if (h < 16 || w < 16 || h % 16 != 0 || w % 16 != 0) {
    throw BadDimensionsError("synth config: h and w must be multiples of 16, got " + std::to_string(h) +
                             "x" + std::to_string(w));
  }
  if (!(foreground_fraction > 0.0 && foreground_fraction < 0.5)) {
    throw DataError("synth config: foreground_fraction must be in (0, 0.5)");
  }
  if (foreground_fraction * static_cast<double>(h * w) < 1.0) {
    throw DataError("synth config: foreground_fraction * h * w must be >= 1");
  }
  if (min_blobs < 1 || max_blobs < min_blobs) throw DataError("synth config: bad blob count range");
  if (!(min_radius >= 1.0) || max_radius < min_radius) throw DataError("synth config: bad radius range");
  if (2.0 * max_radius >= static_cast<double>(std::min(h, w))) {
    throw DataError("synth config: max_radius does not fit in the image");
  }
  if (noise_std < 0 || texture_amplitude < 0) throw DataError("synth config: negative noise/texture");
  const double target = foreground_fraction * static_cast<double>(h * w);
  const double max_area = static_cast<double>(max_blobs) * 3.15 * max_radius * max_radius;
  if (max_area < 0.8 * target) {
    throw DataError("synth config: unreachable foreground fraction " + std::to_string(foreground_fraction) +
                    " with at most " + std::to_string(max_blobs) + " blobs of radius <= " +
                    std::to_string(max_radius));
  }
}

void write_pgm(const std::filesystem::path& path, const PgmImage& img) {
  if (static_cast<Eigen::Index>(img.pixels.size()) != img.h * img.w) {
    throw DataError("write_pgm: pixel buffer does not match dims");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("write_pgm: cannot open " + path.string());
  out << "P5\n" << img.w << " " << img.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw DataError("write_pgm: write failed for " + path.string());
}

namespace {

int pgm_token(std::istream& in) {
  // skips whitespace and '#' comment lines, returns the next integer
  for (;;) {
    const int c = in.peek();
    if (c == std::char_traits<char>::eof()) break;
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(static_cast<unsigned char>(c))) {
      in.get();
    } else {
      break;
    }
  }
  int v = -1;
  in >> v;
  return in ? v : -1;
}

}  // namespace

PgmImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("read_pgm: cannot open " + path.string());
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || m1 != '5') throw DataError("read_pgm: " + path.string() + " is not a binary PGM (P5)");
  PgmImage img;
  img.w = pgm_token(in);
  img.h = pgm_token(in);
  const int maxval = pgm_token(in);
  if (img.w <= 0 || img.h <= 0 || maxval != 255) {
    throw DataError("read_pgm: unsupported header in " + path.string());
  }
  in.get();  // single whitespace after maxval
  img.pixels.resize(static_cast<std::size_t>(img.h * img.w));
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
    throw DataError("read_pgm: truncated pixel data in " + path.string());
  }
  return img;
}

namespace {

double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double uniform_in(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * unit_uniform(rng);
}

struct Ellipse {
  double cy, cx, ry, rx, theta;
};

// Rasterizes the ellipse interior onto the mask, returns pixels newly set.
std::int64_t rasterize(const Ellipse& e, Eigen::Index h, Eigen::Index w, std::vector<std::uint8_t>& mask) {
  const double r = std::max(e.ry, e.rx);
  const Eigen::Index y0 = std::max<Eigen::Index>(0, static_cast<Eigen::Index>(std::floor(e.cy - r)));
  const Eigen::Index y1 = std::min<Eigen::Index>(h - 1, static_cast<Eigen::Index>(std::ceil(e.cy + r)));
  const Eigen::Index x0 = std::max<Eigen::Index>(0, static_cast<Eigen::Index>(std::floor(e.cx - r)));
  const Eigen::Index x1 = std::min<Eigen::Index>(w - 1, static_cast<Eigen::Index>(std::ceil(e.cx + r)));
  const double ct = std::cos(e.theta), st = std::sin(e.theta);
  std::int64_t added = 0;
  for (Eigen::Index y = y0; y <= y1; ++y) {
    for (Eigen::Index x = x0; x <= x1; ++x) {
      const double dy = static_cast<double>(y) - e.cy;
      const double dx = static_cast<double>(x) - e.cx;
      const double u = (dx * ct + dy * st) / e.rx;
      const double v = (-dx * st + dy * ct) / e.ry;
      if (u * u + v * v <= 1.0) {
        auto& px = mask[static_cast<std::size_t>(y * w + x)];
        if (px == 0) {
          px = 1;
          ++added;
        }
      }
    }
  }
  return added;
}

std::int64_t draw_blobs(const SynthConfig& cfg, std::mt19937_64& rng, std::vector<std::uint8_t>& mask) {
  const double target = cfg.foreground_fraction * static_cast<double>(cfg.h * cfg.w);
  std::int64_t fg = 0;
  int blobs = 0;
  while (blobs < cfg.max_blobs && (blobs < cfg.min_blobs || static_cast<double>(fg) < 0.93 * target)) {
    const double remaining = std::max(target - static_cast<double>(fg), 1.0);
    const double cap = std::clamp(std::sqrt(remaining * 1.6 / 3.141592653589793), cfg.min_radius,
                                  cfg.max_radius);
    Ellipse e;
    e.ry = uniform_in(rng, cfg.min_radius, cap);
    e.rx = uniform_in(rng, cfg.min_radius, cap);
    e.theta = uniform_in(rng, 0.0, 3.141592653589793);
    const double r = std::max(e.ry, e.rx);
    e.cy = uniform_in(rng, r, static_cast<double>(cfg.h) - r);
    e.cx = uniform_in(rng, r, static_cast<double>(cfg.w) - r);
    if (blobs >= cfg.min_blobs && 3.141592653589793 * e.ry * e.rx > 1.8 * remaining) break;
    fg += rasterize(e, cfg.h, cfg.w, mask);
    ++blobs;
  }
  return fg;
}

std::string sample_name(const char* stem, Eigen::Index i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%04lld.pgm", stem, static_cast<long long>(i));
  return buf;
}

std::uint64_t hash_files(const std::filesystem::path& root, const std::vector<ManifestEntry>& entries) {
  std::uint64_t h = fnv1a64(nullptr, 0);
  for (const auto& e : entries) {
    for (const auto* name : {&e.image, &e.mask}) {
      const std::string bytes = unsq::detail::read_file_bytes(root / *name, "dataset hash");
      h = fnv1a64(bytes.data(), bytes.size(), h);
    }
  }
  return h;
}

json config_to_json(const SynthConfig& c) {
  return json{{"num_images", c.num_images},
              {"h", c.h},
              {"w", c.w},
              {"foreground_fraction", c.foreground_fraction},
              {"min_blobs", c.min_blobs},
              {"max_blobs", c.max_blobs},
              {"min_radius", c.min_radius},
              {"max_radius", c.max_radius},
              {"noise_std", c.noise_std},
              {"background_level", c.background_level},
              {"foreground_level", c.foreground_level},
              {"texture_amplitude", c.texture_amplitude},
              {"seed", c.seed}};
}

SynthConfig config_from_json(const json& j) {
  SynthConfig c;
  c.num_images = j.at("num_images").get<Eigen::Index>();
  c.h = j.at("h").get<Eigen::Index>();
  c.w = j.at("w").get<Eigen::Index>();
  c.foreground_fraction = j.at("foreground_fraction").get<double>();
  c.min_blobs = j.at("min_blobs").get<int>();
  c.max_blobs = j.at("max_blobs").get<int>();
  c.min_radius = j.at("min_radius").get<double>();
  c.max_radius = j.at("max_radius").get<double>();
  c.noise_std = j.at("noise_std").get<double>();
  c.background_level = j.at("background_level").get<double>();
  c.foreground_level = j.at("foreground_level").get<double>();
  c.texture_amplitude = j.at("texture_amplitude").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

DatasetManifest generate_synthetic(const SynthConfig& config, const std::filesystem::path& dir,
                                   const std::string& split) {
  config.validate();
  std::filesystem::create_directories(dir);
  // the split name participates in the stream seed so train/test differ
  std::mt19937_64 rng(config.seed ^ fnv1a64(split.data(), split.size()));

  DatasetManifest m;
  m.root = dir;
  m.split = split;
  m.synthetic = true;
  m.generator = config;

  const Eigen::Index hw = config.h * config.w;
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(hw));
  std::vector<std::uint8_t> image(static_cast<std::size_t>(hw));
  std::normal_distribution<double> noise(0.0, 1.0);

  for (Eigen::Index i = 0; i < config.num_images; ++i) {
    std::fill(mask.begin(), mask.end(), 0);
    const std::int64_t fg = draw_blobs(config, rng, mask);
    m.foreground_pixels += fg;
    m.background_pixels += hw - fg;

    const double f1 = 1.0 + std::floor(uniform_in(rng, 0.0, 3.0));
    const double f2 = 1.0 + std::floor(uniform_in(rng, 0.0, 3.0));
    const double p1 = unit_uniform(rng), p2 = unit_uniform(rng);
    for (Eigen::Index y = 0; y < config.h; ++y) {
      for (Eigen::Index x = 0; x < config.w; ++x) {
        const std::size_t idx = static_cast<std::size_t>(y * config.w + x);
        const double tex =
            0.5 * std::sin(6.283185307179586 * (f1 * static_cast<double>(x) / static_cast<double>(config.w) + p1)) +
            0.5 * std::sin(6.283185307179586 * (f2 * static_cast<double>(y) / static_cast<double>(config.h) + p2));
        double v = (mask[idx] ? config.foreground_level : config.background_level) +
                   config.texture_amplitude * tex;
        if (config.noise_std > 0) v += config.noise_std * noise(rng);
        v = std::clamp(v, 0.0, 1.0);
        image[idx] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }

    ManifestEntry e;
    e.image = sample_name("img", i);
    e.mask = sample_name("msk", i);
    e.h = config.h;
    e.w = config.w;
    write_pgm(dir / e.image, PgmImage{config.h, config.w, image});
    std::vector<std::uint8_t> mask255(mask.size());
    for (std::size_t k = 0; k < mask.size(); ++k) mask255[k] = mask[k] ? 255 : 0;
    write_pgm(dir / e.mask, PgmImage{config.h, config.w, mask255});
    m.entries.push_back(std::move(e));
  }

  const double realized = static_cast<double>(m.foreground_pixels) /
                          static_cast<double>(m.foreground_pixels + m.background_pixels);
  if (std::abs(realized - config.foreground_fraction) > 0.20 * config.foreground_fraction) {
    throw DataError("generate_synthetic: realized foreground fraction " + std::to_string(realized) +
                    " misses target " + std::to_string(config.foreground_fraction) +
                    " by more than 20%; blob constraints make the target unreachable");
  }

  m.content_hash = hash_files(dir, m.entries);
  write_manifest(m);
  return m;
}

void write_manifest(const DatasetManifest& manifest) {
  json j;
  j["format"] = "unsqueeze-dataset/1";
  j["split"] = manifest.split;
  j["entries"] = json::array();
  for (const auto& e : manifest.entries) {
    j["entries"].push_back(json{{"image", e.image}, {"mask", e.mask}, {"h", e.h}, {"w", e.w}});
  }
  j["foreground_pixels"] = manifest.foreground_pixels;
  j["background_pixels"] = manifest.background_pixels;
  j["synthetic"] = manifest.synthetic;
  if (manifest.synthetic) j["generator"] = config_to_json(manifest.generator);
  j["content_hash"] = to_hex(manifest.content_hash);
  std::ofstream out(manifest.root / "manifest.json", std::ios::trunc);
  if (!out) throw DataError("write_manifest: cannot open " + (manifest.root / "manifest.json").string());
  out << j.dump(2) << "\n";
}

DatasetManifest read_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw MissingFileError("read_manifest: cannot open " + manifest_path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError("read_manifest: " + manifest_path.string() + ": " + e.what());
  }
  DatasetManifest m;
  try {
    if (j.at("format").get<std::string>() != "unsqueeze-dataset/1") {
      throw DataError("read_manifest: unknown format in " + manifest_path.string());
    }
    m.root = manifest_path.parent_path();
    m.split = j.at("split").get<std::string>();
    for (const auto& je : j.at("entries")) {
      ManifestEntry e;
      e.image = je.at("image").get<std::string>();
      e.mask = je.at("mask").get<std::string>();
      e.h = je.at("h").get<Eigen::Index>();
      e.w = je.at("w").get<Eigen::Index>();
      m.entries.push_back(std::move(e));
    }
    m.foreground_pixels = j.at("foreground_pixels").get<std::int64_t>();
    m.background_pixels = j.at("background_pixels").get<std::int64_t>();
    m.synthetic = j.at("synthetic").get<bool>();
    if (m.synthetic) m.generator = config_from_json(j.at("generator"));
    m.content_hash = std::stoull(j.at("content_hash").get<std::string>(), nullptr, 16);
  } catch (const json::exception& e) {
    throw DataError("read_manifest: bad schema in " + manifest_path.string() + ": " + e.what());
  }
  return m;
}

Dataset load_dataset(const std::filesystem::path& manifest_path) {
  DatasetManifest m = read_manifest(manifest_path);
  if (m.entries.empty()) throw DataError("load_dataset: empty dataset in " + manifest_path.string());

  for (const auto& e : m.entries) {
    for (const auto* name : {&e.image, &e.mask}) {
      if (!std::filesystem::exists(m.root / *name)) {
        throw MissingFileError("load_dataset: missing file " + (m.root / *name).string());
      }
    }
  }
  const std::uint64_t actual = hash_files(m.root, m.entries);
  if (actual != m.content_hash) {
    throw HashMismatchError("load_dataset: content hash " + to_hex(actual) + " does not match manifest " +
                            to_hex(m.content_hash));
  }

  const Eigen::Index h = m.entries.front().h, w = m.entries.front().w;
  if (h % 16 != 0 || w % 16 != 0) {
    throw BadDimensionsError("load_dataset: dims " + std::to_string(h) + "x" + std::to_string(w) +
                             " are not divisible by 16");
  }
  const Eigen::Index n = static_cast<Eigen::Index>(m.entries.size());
  auto images = TensorXd::zeros(Shape{n, 1, h, w});
  auto masks = TensorXd::zeros(Shape{n, 1, h, w});
  std::int64_t fg = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& e = m.entries[static_cast<std::size_t>(i)];
    const PgmImage img = read_pgm(m.root / e.image);
    const PgmImage msk = read_pgm(m.root / e.mask);
    if (img.h != h || img.w != w || msk.h != h || msk.w != w || e.h != h || e.w != w) {
      throw BadDimensionsError("load_dataset: " + e.image + " dims differ from the rest of the split");
    }
    double* ip = images.data() + i * h * w;
    double* mp = masks.data() + i * h * w;
    for (Eigen::Index k = 0; k < h * w; ++k) {
      ip[k] = static_cast<double>(img.pixels[static_cast<std::size_t>(k)]) / 255.0;
      const std::uint8_t mv = msk.pixels[static_cast<std::size_t>(k)];
      if (mv != 0 && mv != 255) {
        throw NonBinaryMaskError("load_dataset: non-binary mask value " + std::to_string(mv) + " in " +
                                 e.mask + " at pixel " + std::to_string(k));
      }
      mp[k] = mv ? 1.0 : 0.0;
      fg += mv ? 1 : 0;
    }
  }
  if (fg != m.foreground_pixels || (n * h * w - fg) != m.background_pixels) {
    throw DataError("load_dataset: recomputed pixel statistics disagree with the manifest");
  }
  Dataset ds;
  ds.images = images;
  ds.masks = masks;
  ds.manifest = std::move(m);
  return ds;
}

std::vector<Eigen::Index> epoch_permutation(Eigen::Index n, std::uint64_t seed, std::int64_t epoch,
                                            bool shuffle) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  if (shuffle) {
    std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(epoch + 1)));
    detail::fisher_yates(order, rng);
  }
  return order;
}

std::vector<std::vector<Eigen::Index>> epoch_batches(Eigen::Index n, Eigen::Index batch_size,
                                                     std::uint64_t seed, std::int64_t epoch, bool shuffle) {
  if (batch_size < 1) throw DataError("epoch_batches: batch_size must be >= 1");
  const auto order = epoch_permutation(n, seed, epoch, shuffle);
  std::vector<std::vector<Eigen::Index>> batches;
  for (Eigen::Index start = 0; start < n; start += batch_size) {
    const Eigen::Index end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

BatchStream::BatchStream(Eigen::Index n, Eigen::Index batch_size, std::uint64_t seed, bool shuffle)
    : n_(n), batch_size_(batch_size), seed_(seed), shuffle_(shuffle) {
  if (n < 1) throw DataError("BatchStream: empty dataset");
  if (batch_size < 1) throw DataError("BatchStream: batch_size must be >= 1");
}

const std::vector<Eigen::Index>& BatchStream::next() {
  if (epoch_ < 0 || cursor_ >= batches_.size()) {
    epoch_ += 1;
    batches_ = epoch_batches(n_, batch_size_, seed_, epoch_, shuffle_);
    cursor_ = 0;
  }
  return batches_[cursor_++];
}

TensorXd gather_batch(const TensorXd& t, const std::vector<Eigen::Index>& indices) {
  const Shape s = t.shape();
  const Eigen::Index per = s.c * s.plane();
  auto out = TensorXd::zeros(Shape{static_cast<Eigen::Index>(indices.size()), s.c, s.h, s.w});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Eigen::Index i = indices[k];
    if (i < 0 || i >= s.n) throw DataError("gather_batch: index " + std::to_string(i) + " out of range");
    std::copy_n(t.data() + i * per, per, out.data() + static_cast<Eigen::Index>(k) * per);
  }
  return out;
}

namespace {

constexpr char kSoftMagic[8] = {'U', 'N', 'S', 'Q', 'S', 'F', 'T', '1'};
constexpr std::uint32_t kSoftVersion = 1;

std::string soft_name(Eigen::Index i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "soft_%04lld.usr", static_cast<long long>(i));
  return buf;
}

}  // namespace

std::string encode_soft_raster(const double* data, Eigen::Index c, Eigen::Index h, Eigen::Index w) {
  unsq::detail::ByteWriter wr;
  wr.buf.append(kSoftMagic, sizeof(kSoftMagic));
  wr.raw<std::uint32_t>(kSoftVersion);
  wr.raw<std::uint32_t>(static_cast<std::uint32_t>(c));
  wr.raw<std::int64_t>(h);
  wr.raw<std::int64_t>(w);
  for (Eigen::Index i = 0; i < c * h * w; ++i) wr.raw<double>(data[i]);
  return std::move(wr.buf);
}

std::uint64_t soft_set_hash(const TensorXd& probs) {
  const Shape s = probs.shape();
  std::uint64_t h = fnv1a64(nullptr, 0);
  for (Eigen::Index i = 0; i < s.n; ++i) {
    const std::string bytes = encode_soft_raster(probs.data() + i * s.c * s.plane(), s.c, s.h, s.w);
    h = fnv1a64(bytes.data(), bytes.size(), h);
  }
  return h;
}

void save_soft_targets(const SoftTargetSet& set, const std::filesystem::path& dir) {
  const Shape s = set.probs.shape();
  if (s.c != 2) throw DataError("save_soft_targets: expected 2 channels, got " + std::to_string(s.c));
  std::filesystem::create_directories(dir);
  json j;
  j["format"] = "unsqueeze-soft/1";
  j["temperature"] = set.temperature;
  j["teacher_hash"] = to_hex(set.teacher_hash);
  j["files"] = json::array();
  for (Eigen::Index i = 0; i < s.n; ++i) {
    const std::string name = soft_name(i);
    unsq::detail::write_file_bytes(dir / name,
                                   encode_soft_raster(set.probs.data() + i * s.c * s.plane(), s.c, s.h, s.w),
                                   "save_soft_targets");
    j["files"].push_back(name);
  }
  j["content_hash"] = to_hex(soft_set_hash(set.probs));
  std::ofstream out(dir / "soft_manifest.json", std::ios::trunc);
  if (!out) throw DataError("save_soft_targets: cannot open " + (dir / "soft_manifest.json").string());
  out << j.dump(2) << "\n";
}

SoftTargetSet load_soft_targets(const std::filesystem::path& dir) {
  std::ifstream in(dir / "soft_manifest.json");
  if (!in) throw MissingFileError("load_soft_targets: cannot open " + (dir / "soft_manifest.json").string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError(std::string("load_soft_targets: bad manifest: ") + e.what());
  }
  SoftTargetSet set;
  std::vector<std::string> files;
  try {
    if (j.at("format").get<std::string>() != "unsqueeze-soft/1") {
      throw DataError("load_soft_targets: unknown format");
    }
    set.temperature = j.at("temperature").get<double>();
    set.teacher_hash = std::stoull(j.at("teacher_hash").get<std::string>(), nullptr, 16);
    set.set_hash = std::stoull(j.at("content_hash").get<std::string>(), nullptr, 16);
    files = j.at("files").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw DataError(std::string("load_soft_targets: bad schema: ") + e.what());
  }
  if (files.empty()) throw DataError("load_soft_targets: empty set");

  TensorXd probs;
  for (std::size_t i = 0; i < files.size(); ++i) {
    const std::string bytes = unsq::detail::read_file_bytes(dir / files[i], "load_soft_targets");
    unsq::detail::ByteReader r(bytes, "load_soft_targets");
    if (bytes.size() < sizeof(kSoftMagic) || std::memcmp(bytes.data(), kSoftMagic, sizeof(kSoftMagic)) != 0) {
      throw DataError("load_soft_targets: " + files[i] + " is not a soft-target raster");
    }
    r.pos = sizeof(kSoftMagic);
    if (r.raw<std::uint32_t>() != kSoftVersion) throw DataError("load_soft_targets: unsupported version");
    const auto c = static_cast<Eigen::Index>(r.raw<std::uint32_t>());
    const auto h = r.raw<std::int64_t>();
    const auto w = r.raw<std::int64_t>();
    if (c != 2 || h <= 0 || w <= 0) throw DataError("load_soft_targets: bad dims in " + files[i]);
    if (!probs.defined()) {
      probs = TensorXd::zeros(Shape{static_cast<Eigen::Index>(files.size()), c, h, w});
    } else if (h != probs.shape().h || w != probs.shape().w) {
      throw BadDimensionsError("load_soft_targets: " + files[i] + " dims differ from the rest of the set");
    }
    double* dst = probs.data() + static_cast<Eigen::Index>(i) * c * h * w;
    for (Eigen::Index k = 0; k < c * h * w; ++k) dst[k] = r.raw<double>();
    if (!r.done()) throw DataError("load_soft_targets: trailing bytes in " + files[i]);
  }
  set.probs = probs;
  const std::uint64_t actual = soft_set_hash(probs);
  if (actual != set.set_hash) {
    throw HashMismatchError("load_soft_targets: content hash " + to_hex(actual) +
                            " does not match manifest " + to_hex(set.set_hash));
  }
  return set;
}

}  // namespace unsq
