#include "mimi/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "mimi/checkpoint.hpp"
#include "mimi/format.hpp"
#include "mimi/rng.hpp"

namespace mimi {

// ---------------------------------------------------------------------------
// Dataset

Dataset::Dataset(std::string name, std::size_t channels, std::size_t side,
                 std::vector<float> pixels, std::vector<int> labels)
    : name_(std::move(name)),
      channels_(channels),
      side_(side),
      pixels_(std::move(pixels)),
      labels_(std::move(labels)) {
  if (channels_ == 0 || side_ == 0) throw ShapeError("dataset: empty image geometry");
  if (pixels_.size() % image_numel() != 0) {
    throw ShapeError("dataset: " + std::to_string(pixels_.size()) +
                     " pixels do not divide into images of " + std::to_string(image_numel()));
  }
  count_ = pixels_.size() / image_numel();
  if (!labels_.empty() && labels_.size() != count_) {
    throw ShapeError("dataset: " + std::to_string(labels_.size()) + " labels for " +
                     std::to_string(count_) + " images");
  }
  stats_ = compute_stats(pixels_, channels_, side_);
}

std::size_t Dataset::num_classes() const {
  if (labels_.empty()) return 0;
  return static_cast<std::size_t>(*std::max_element(labels_.begin(), labels_.end())) + 1;
}

std::span<const float> Dataset::image(std::size_t i) const {
  if (i >= count_) throw std::out_of_range("dataset: image index " + std::to_string(i));
  return std::span<const float>(pixels_).subspan(i * image_numel(), image_numel());
}

Tensor Dataset::image_tensor(std::size_t i) const {
  const auto img = image(i);
  return Tensor::from_data({channels_, side_, side_}, {img.begin(), img.end()});
}

ChannelStats compute_stats(std::span<const float> pixels, std::size_t channels,
                           std::size_t side) {
  ChannelStats s{std::vector<double>(channels, 0.0), std::vector<double>(channels, 0.0)};
  const std::size_t plane = side * side;
  const std::size_t images = pixels.size() / (channels * plane);
  if (images == 0) return s;
  const double count = double(images * plane);
  for (std::size_t c = 0; c < channels; ++c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < images; ++i) {
      const float* p = pixels.data() + (i * channels + c) * plane;
      for (std::size_t k = 0; k < plane; ++k) acc += p[k];
    }
    const double mean = acc / count;
    double var = 0.0;
    for (std::size_t i = 0; i < images; ++i) {
      const float* p = pixels.data() + (i * channels + c) * plane;
      for (std::size_t k = 0; k < plane; ++k) var += (p[k] - mean) * (p[k] - mean);
    }
    s.mean[c] = mean;
    s.stddev[c] = std::sqrt(var / count);
  }
  return s;
}

Dataset normalize(const Dataset& dataset) {
  const auto& st = dataset.stats();
  const std::size_t plane = dataset.side() * dataset.side();
  std::vector<float> out(dataset.pixels().begin(), dataset.pixels().end());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    for (std::size_t c = 0; c < dataset.channels(); ++c) {
      const double sd = st.stddev[c] > 1e-12 ? st.stddev[c] : 1.0;
      float* p = out.data() + (i * dataset.channels() + c) * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        p[k] = static_cast<float>((p[k] - st.mean[c]) / sd);
      }
    }
  }
  return Dataset(dataset.name(), dataset.channels(), dataset.side(), std::move(out),
                 {dataset.labels().begin(), dataset.labels().end()});
}

// ---------------------------------------------------------------------------
// File formats

DataFormat parse_format(std::string_view name) {
  if (name == "idx") return DataFormat::idx;
  if (name == "raw" || name == "raw-tensor") return DataFormat::raw_tensor;
  if (name == "synthetic" || name == "synthetic-spec") return DataFormat::synthetic;
  throw std::invalid_argument("unknown data format '" + std::string(name) +
                              "' (expected idx, raw-tensor or synthetic)");
}

Dataset load_dataset(const std::string& source, DataFormat format) {
  switch (format) {
    case DataFormat::idx:
      return load_idx(source);
    case DataFormat::raw_tensor:
      return load_raw(source);
    case DataFormat::synthetic:
      return synth_generate(source);
  }
  throw std::invalid_argument("load_dataset: bad format");
}

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  if (off + 4 > b.size()) throw FormatError("idx: truncated header", b.size());
  return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
         (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

struct IdxArray {
  std::vector<std::size_t> dims;
  std::size_t payload_offset;
};

IdxArray parse_idx_header(const std::vector<unsigned char>& b) {
  const std::uint32_t magic = be32(b, 0);
  if ((magic >> 16) != 0 || ((magic >> 8) & 0xff) != 0x08) {
    throw FormatError("idx: unsupported magic (only unsigned-byte payloads)", 0);
  }
  const std::size_t rank = magic & 0xff;
  if (rank == 0 || rank > 4) throw FormatError("idx: unsupported rank " + std::to_string(rank), 3);
  IdxArray a{{}, 4 + 4 * rank};
  for (std::size_t i = 0; i < rank; ++i) a.dims.push_back(be32(b, 4 + 4 * i));
  std::size_t n = 1;
  for (auto d : a.dims) n *= d;
  if (b.size() < a.payload_offset + n) {
    throw FormatError("idx: payload needs " + std::to_string(n) + " bytes, file has " +
                          std::to_string(b.size() - a.payload_offset),
                      b.size());
  }
  if (b.size() > a.payload_offset + n) {
    throw FormatError("idx: trailing bytes after payload", a.payload_offset + n);
  }
  return a;
}

void put_be32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{char(v >> 24), char((v >> 16) & 0xff), char((v >> 8) & 0xff),
                              char(v & 0xff)};
  out.write(b.data(), 4);
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images,
                 const std::optional<std::filesystem::path>& labels) {
  const auto bytes = read_file(images);
  const auto a = parse_idx_header(bytes);
  std::size_t n = 0, c = 1, h = 0, w = 0;
  if (a.dims.size() == 3) {
    n = a.dims[0], h = a.dims[1], w = a.dims[2];
  } else if (a.dims.size() == 4) {
    n = a.dims[0], c = a.dims[1], h = a.dims[2], w = a.dims[3];
  } else {
    throw FormatError("idx: image files need 3 or 4 dimensions", 3);
  }
  if (h != w || h == 0 || n == 0 || c == 0) {
    throw ShapeError("idx: images must be non-empty and square, got " + std::to_string(h) +
                     "x" + std::to_string(w));
  }
  std::vector<float> pixels(n * c * h * w);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    pixels[i] = float(bytes[a.payload_offset + i]) / 255.0f;
  }
  std::vector<int> label_values;
  if (labels) {
    const auto lb = read_file(*labels);
    const auto la = parse_idx_header(lb);
    if (la.dims.size() != 1 || la.dims[0] != n) {
      throw ShapeError("idx: label file does not hold one label per image");
    }
    for (std::size_t i = 0; i < n; ++i) label_values.push_back(lb[la.payload_offset + i]);
  }
  return Dataset(images.filename().string(), c, h, std::move(pixels), std::move(label_values));
}

void save_idx(const std::filesystem::path& images, const Dataset& dataset,
              const std::optional<std::filesystem::path>& labels) {
  std::ofstream out(images, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + images.string());
  const bool gray = dataset.channels() == 1;
  put_be32(out, gray ? 0x00000803u : 0x00000804u);
  put_be32(out, static_cast<std::uint32_t>(dataset.size()));
  if (!gray) put_be32(out, static_cast<std::uint32_t>(dataset.channels()));
  put_be32(out, static_cast<std::uint32_t>(dataset.side()));
  put_be32(out, static_cast<std::uint32_t>(dataset.side()));
  for (float v : dataset.pixels()) {
    out.put(static_cast<char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  }
  if (labels) {
    std::ofstream lo(*labels, std::ios::binary);
    put_be32(lo, 0x00000801u);
    put_be32(lo, static_cast<std::uint32_t>(dataset.size()));
    for (int l : dataset.labels()) lo.put(static_cast<char>(l));
  }
}

Dataset load_raw(const std::filesystem::path& path) {
  const auto tensors = load_tensors(path);
  const Tensor* images = find_tensor(tensors, "images");
  if (!images) throw FormatError("raw-tensor: no tensor named 'images'", 0);
  if (images->rank() != 4 || images->dim(2) != images->dim(3)) {
    throw ShapeError("raw-tensor: 'images' must be [n,c,s,s], got " + shape_str(images->shape()));
  }
  std::vector<int> labels;
  if (const Tensor* l = find_tensor(tensors, "labels")) {
    if (l->numel() != images->dim(0)) throw ShapeError("raw-tensor: label count mismatch");
    for (float v : l->data()) labels.push_back(static_cast<int>(v));
  }
  return Dataset(path.filename().string(), images->dim(1), images->dim(2),
                 {images->data().begin(), images->data().end()}, std::move(labels));
}

void save_raw(const std::filesystem::path& path, const Dataset& dataset) {
  NamedTensors ts;
  ts.emplace_back("images", Tensor::from_data({dataset.size(), dataset.channels(), dataset.side(),
                                               dataset.side()},
                                              {dataset.pixels().begin(), dataset.pixels().end()}));
  if (dataset.has_labels()) {
    std::vector<float> l(dataset.labels().begin(), dataset.labels().end());
    ts.emplace_back("labels", Tensor::from_data({dataset.size()}, std::move(l)));
  }
  save_tensors(path, ts);
}

// ---------------------------------------------------------------------------
// Synthetic data

SyntheticSpec SyntheticSpec::parse(std::string_view text) {
  const auto parts = split_list(text, ',');
  if (parts.empty()) throw std::invalid_argument("synthetic spec: empty");
  SyntheticSpec s;
  if (parts[0] == "blobs") {
    s.family = Family::blobs;
  } else if (parts[0] == "stripes") {
    s.family = Family::stripes;
  } else if (parts[0] == "mixed") {
    s.family = Family::mixed;
  } else {
    throw std::invalid_argument("synthetic spec: unknown family '" + parts[0] +
                                "' (expected blobs, stripes or mixed)");
  }
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const auto eq = parts[i].find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("synthetic spec: expected key=value, got '" + parts[i] + "'");
    }
    const std::string key = parts[i].substr(0, eq);
    const std::string value = parts[i].substr(eq + 1);
    const std::string ctx = "synthetic spec key '" + key + "'";
    if (key == "n") {
      s.n = parse_u64(value, ctx);
    } else if (key == "side") {
      s.side = parse_u64(value, ctx);
    } else if (key == "classes") {
      s.classes = parse_u64(value, ctx);
    } else if (key == "channels") {
      s.channels = parse_u64(value, ctx);
    } else if (key == "seed") {
      s.seed = parse_u64(value, ctx);
    } else {
      throw std::invalid_argument("synthetic spec: unknown key '" + key + "'");
    }
  }
  if (s.n == 0 || s.side < 4 || s.classes == 0 || s.channels == 0) {
    throw std::invalid_argument("synthetic spec: n, classes, channels must be positive and side >= 4");
  }
  return s;
}

std::string SyntheticSpec::str() const {
  const char* fam = family == Family::blobs ? "blobs" : family == Family::stripes ? "stripes" : "mixed";
  return std::string(fam) + ",n=" + std::to_string(n) + ",side=" + std::to_string(side) +
         ",classes=" + std::to_string(classes) + ",channels=" + std::to_string(channels) +
         ",seed=" + std::to_string(seed);
}

namespace {

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Roughly one small blob per 8x8 area so the unpredictable content is spread
// evenly over the image; class shifts blob count and width slightly.
void draw_blobs(std::size_t cls, std::size_t channels, std::size_t side, Rng& rng, float* out) {
  // One Gaussian blob per 8x8 cell, placed uniformly inside its cell. Width
  // grows with the class.
  const std::size_t cells = std::max<std::size_t>(1, side / 8);
  const double cell = double(side) / double(cells);
  const double sigma = cell / 8.0 * (1.5 + 0.15 * double(cls % 5));
  std::vector<std::array<double, 2>> centers;
  for (std::size_t gy = 0; gy < cells; ++gy) {
    for (std::size_t gx = 0; gx < cells; ++gx) {
      const double x = (double(gx) + uniform(rng, 0.0, 1.0)) * cell;
      const double y = (double(gy) + uniform(rng, 0.0, 1.0)) * cell;
      centers.push_back({x, y});
    }
  }
  std::vector<double> tint(channels);
  for (auto& t : tint) t = channels == 1 ? 1.0 : uniform(rng, 0.6, 1.0);
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        double v = 0.1;
        for (const auto& [bx, by] : centers) {
          const double dx = double(x) + 0.5 - bx, dy = double(y) + 0.5 - by;
          v += 0.8 * tint[c] * std::exp(-(dx * dx + dy * dy) * inv);
        }
        out[(c * side + y) * side + x] = static_cast<float>(std::min(v, 1.0));
      }
    }
  }
}

// 0.5 + 0.35 sin(2 pi f (x cos t + y sin t) / side + phase) + 0.05 u with a
// uniform phase, so every pixel has expectation exactly 0.5.
void draw_stripes(std::size_t cls, std::size_t classes, std::size_t channels, std::size_t side,
                  Rng& rng, float* out) {
  const double freq = 1.0 + double(cls % 4);
  const double theta = M_PI * double(cls) / double(classes) + uniform(rng, -0.15, 0.15);
  const double phase = uniform(rng, 0.0, 2.0 * M_PI);
  const double ct = std::cos(theta), st = std::sin(theta);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        const double arg =
            2.0 * M_PI * freq * (double(x) * ct + double(y) * st) / double(side) + phase + 0.5 * double(c);
        const double v = 0.5 + 0.35 * std::sin(arg) + 0.05 * uniform(rng, -1.0, 1.0);
        out[(c * side + y) * side + x] = static_cast<float>(v);
      }
    }
  }
}

}  // namespace

Dataset synth_generate(std::string_view spec) { return synth_generate(SyntheticSpec::parse(spec)); }

Dataset synth_generate(const SyntheticSpec& spec) {
  const std::size_t numel = spec.channels * spec.side * spec.side;
  std::vector<float> pixels(spec.n * numel);
  std::vector<int> labels(spec.n);
  const std::uint64_t family_seed = mix_seed(spec.seed, static_cast<std::uint64_t>(spec.family));
  std::vector<float> scratch(numel);
  for (std::size_t i = 0; i < spec.n; ++i) {
    Rng rng(mix_seed(family_seed, i));
    const std::size_t cls = i % spec.classes;
    labels[i] = static_cast<int>(cls);
    float* out = pixels.data() + i * numel;
    switch (spec.family) {
      case SyntheticSpec::Family::blobs:
        draw_blobs(cls, spec.channels, spec.side, rng, out);
        break;
      case SyntheticSpec::Family::stripes:
        draw_stripes(cls, spec.classes, spec.channels, spec.side, rng, out);
        break;
      case SyntheticSpec::Family::mixed:
        draw_blobs(cls, spec.channels, spec.side, rng, out);
        draw_stripes(cls, spec.classes, spec.channels, spec.side, rng, scratch.data());
        for (std::size_t k = 0; k < numel; ++k) out[k] = 0.5f * (out[k] + scratch[k]);
        break;
    }
  }
  return Dataset(spec.str(), spec.channels, spec.side, std::move(pixels), std::move(labels));
}

// ---------------------------------------------------------------------------
// Splitting

InsufficientDataError::InsufficientDataError(std::size_t required, std::size_t available)
    : std::invalid_argument("split: requires " + std::to_string(required) +
                            " items but the dataset has " + std::to_string(available)),
      required_(required),
      available_(available) {}

SplitIndices split(std::size_t dataset_size, const SplitSpec& spec) {
  if (spec.total() > dataset_size) throw InsufficientDataError(spec.total(), dataset_size);
  std::vector<std::size_t> perm(dataset_size);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(spec.seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  SplitIndices out;
  auto it = perm.begin();
  auto take = [&](std::size_t n, std::vector<std::size_t>& dst) {
    dst.assign(it, it + static_cast<std::ptrdiff_t>(n));
    it += static_cast<std::ptrdiff_t>(n);
  };
  take(spec.shadow_train, out.shadow_train);
  take(spec.shadow_test, out.shadow_test);
  take(spec.target_train, out.target_train);
  take(spec.target_test, out.target_test);
  out.rest.assign(it, perm.end());
  return out;
}

}  // namespace mimi
