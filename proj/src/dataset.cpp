#include "skd/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "skd/checkpoint.hpp"
#include "skd/rng.hpp"

namespace skd::data {

namespace {

const char* kClassNames[8] = {"square",      "diamond", "circle", "ring",
                              "triangle_up", "triangle_down", "plus", "cross"};

bool inside_shape(int cls, double dx, double dy, double s) {
  switch (cls) {
    case 0:  // square
      return std::max(std::abs(dx), std::abs(dy)) <= 0.55 * s;
    case 1:  // diamond
      return std::abs(dx) + std::abs(dy) <= 0.75 * s;
    case 2:  // circle
      return dx * dx + dy * dy <= 0.36 * s * s;
    case 3: {  // ring
      const double r2 = dx * dx + dy * dy;
      return r2 <= 0.40 * s * s && r2 >= 0.12 * s * s;
    }
    case 4:  // triangle, apex up
      return dy <= 0.45 * s && std::abs(dx) <= (dy + 0.55 * s) * 0.6;
    case 5:  // triangle, apex down
      return dy >= -0.45 * s && std::abs(dx) <= (0.55 * s - dy) * 0.6;
    case 6:  // plus
      return (std::abs(dx) <= 0.18 * s && std::abs(dy) <= 0.62 * s) ||
             (std::abs(dy) <= 0.18 * s && std::abs(dx) <= 0.62 * s);
    default: {  // cross: plus rotated 45 degrees
      const double u = (dx + dy) * 0.7071067811865476;
      const double v = (dx - dy) * 0.7071067811865476;
      return (std::abs(u) <= 0.18 * s && std::abs(v) <= 0.62 * s) ||
             (std::abs(v) <= 0.18 * s && std::abs(u) <= 0.62 * s);
    }
  }
}

// 2x2 supersampled membership, in [0,1]
double coverage(int cls, double px, double py, double cx, double cy, double s) {
  static const double off[2] = {-0.25, 0.25};
  double acc = 0.0;
  for (double ox : off)
    for (double oy : off)
      acc += inside_shape(cls, px + ox - cx, py + oy - cy, s) ? 1.0 : 0.0;
  return acc * 0.25;
}

void render_sample(int cls, Rng& rng, index_t size, index_t channels, float* out) {
  const double cx = size / 2.0 + (rng.uniform() * 6.0 - 3.0);
  const double cy = size / 2.0 + (rng.uniform() * 6.0 - 3.0);
  const double s = 7.0 + rng.uniform() * 3.5;
  const double amp = 0.65 + rng.uniform() * 0.3;
  const double base = 0.05 + rng.uniform() * 0.1;

  // label-free clutter: a few gaussian bumps
  const index_t nblobs = 2 + rng.below(3);
  std::vector<double> bx(nblobs), by(nblobs), bs(nblobs), ba(nblobs);
  for (index_t i = 0; i < nblobs; ++i) {
    bx[i] = rng.uniform() * size;
    by[i] = rng.uniform() * size;
    bs[i] = 2.0 + rng.uniform() * 3.0;
    ba[i] = 0.08 + rng.uniform() * 0.14;
  }

  std::vector<double> gray(size * size);
  for (index_t y = 0; y < size; ++y)
    for (index_t x = 0; x < size; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      double v = base;
      for (index_t i = 0; i < nblobs; ++i) {
        const double ddx = px - bx[i], ddy = py - by[i];
        v += ba[i] * std::exp(-(ddx * ddx + ddy * ddy) / (2.0 * bs[i] * bs[i]));
      }
      v += amp * coverage(cls, px, py, cx, cy, s);
      gray[y * size + x] = v;
    }

  std::vector<double> tint(channels);
  for (index_t ch = 0; ch < channels; ++ch) tint[ch] = channels == 1 ? 1.0 : 0.7 + rng.uniform() * 0.3;
  for (index_t ch = 0; ch < channels; ++ch)
    for (index_t i = 0; i < size * size; ++i) {
      double v = gray[i] * tint[ch] + rng.normal() * 0.04;
      out[ch * size * size + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
}

void fill_split(Dataset& ds, Rng& rng, index_t per_class, index_t offset) {
  // class round-robin keeps every prefix balanced
  for (index_t i = 0; i < per_class; ++i)
    for (index_t c = 0; c < ds.num_classes; ++c) {
      const index_t idx = offset + i * ds.num_classes + c;
      ds.labels[idx] = static_cast<int>(c);
      render_sample(static_cast<int>(c), rng, ds.image_size, ds.channels,
                    ds.images.data() + idx * ds.pixels());
    }
}

}  // namespace

Dataset gen_data(std::uint64_t seed, const GenCounts& counts, index_t channels) {
  require(counts.train_per_class >= 1 && counts.val_per_class >= 1 && counts.test_per_class >= 1,
          "gen_data: per-class counts must be >= 1");
  Dataset ds;
  ds.channels = channels;
  ds.seed = seed;
  ds.class_names.assign(kClassNames, kClassNames + 8);
  const index_t n_train = counts.train_per_class * ds.num_classes;
  const index_t n_val = counts.val_per_class * ds.num_classes;
  const index_t n_test = counts.test_per_class * ds.num_classes;
  const index_t total = n_train + n_val + n_test;
  ds.images.assign(total * ds.pixels(), 0.0f);
  ds.labels.assign(total, 0);
  ds.train = {0, n_train};
  ds.val = {n_train, n_train + n_val};
  ds.test = {n_train + n_val, total};

  Rng rng(seed ^ 0x5d4c'0a17'99d3'21b1ULL);
  fill_split(ds, rng, counts.train_per_class, ds.train.begin);
  fill_split(ds, rng, counts.val_per_class, ds.val.begin);
  fill_split(ds, rng, counts.test_per_class, ds.test.begin);
  return ds;
}

std::vector<index_t> sample_proxy(const Dataset& ds, index_t size, std::uint64_t seed) {
  require(size >= 1 && size <= ds.train.size(), "sample_proxy: size must be in [1, train size]");
  Rng rng(seed ^ 0xa02f'7c11'3e58'd6c9ULL);
  auto picks = rng.sample_without_replacement(ds.train.size(), size);
  for (auto& p : picks) p += ds.train.begin;
  return picks;
}

vit::Batch to_batch(const Dataset& ds, const std::vector<index_t>& indices) {
  vit::Batch b;
  b.count = indices.size();
  b.pixels = ds.pixels();
  b.images.resize(b.count * b.pixels);
  b.labels.resize(b.count);
  for (index_t i = 0; i < indices.size(); ++i) {
    require(indices[i] < ds.count(), "to_batch: index out of range");
    const float* src = ds.images.data() + indices[i] * ds.pixels();
    double* dst = b.images.data() + i * b.pixels;
    for (index_t p = 0; p < b.pixels; ++p) dst[p] = static_cast<double>(src[p]);
    b.labels[i] = ds.labels[indices[i]];
  }
  return b;
}

vit::Batch split_batch(const Dataset& ds, const Split& split) {
  std::vector<index_t> idx(split.size());
  for (index_t i = 0; i < idx.size(); ++i) idx[i] = split.begin + i;
  return to_batch(ds, idx);
}

void save_dataset(const Dataset& ds, const std::string& path) {
  io::Container c;
  c.meta["kind"] = "dataset";
  c.meta["image_size"] = ds.image_size;
  c.meta["channels"] = ds.channels;
  c.meta["num_classes"] = ds.num_classes;
  c.meta["class_names"] = ds.class_names;
  c.meta["seed"] = ds.seed;
  c.meta["splits"] = {{"train", {ds.train.begin, ds.train.end}},
                      {"val", {ds.val.begin, ds.val.end}},
                      {"test", {ds.test.begin, ds.test.end}}};

  io::TensorBlob imgs;
  imgs.dtype = "f32";
  imgs.shape = {ds.count(), ds.channels, ds.image_size, ds.image_size};
  imgs.bytes.resize(ds.images.size() * sizeof(float));
  std::memcpy(imgs.bytes.data(), ds.images.data(), imgs.bytes.size());
  c.order.push_back("images");
  c.tensors.emplace("images", std::move(imgs));

  io::TensorBlob labels;
  labels.dtype = "i64";
  labels.shape = {ds.count()};
  std::vector<std::int64_t> l64(ds.labels.begin(), ds.labels.end());
  labels.bytes.resize(l64.size() * sizeof(std::int64_t));
  std::memcpy(labels.bytes.data(), l64.data(), labels.bytes.size());
  c.order.push_back("labels");
  c.tensors.emplace("labels", std::move(labels));

  io::write_container(path, c);
}

Dataset load_dataset(const std::string& path) {
  io::Container c = io::read_container(path);
  require(c.meta.value("kind", "") == "dataset", "dataset: not a dataset container");
  Dataset ds;
  ds.image_size = c.meta.at("image_size").get<index_t>();
  ds.channels = c.meta.at("channels").get<index_t>();
  ds.num_classes = c.meta.at("num_classes").get<index_t>();
  ds.class_names = c.meta.at("class_names").get<std::vector<std::string>>();
  ds.seed = c.meta.at("seed").get<std::uint64_t>();
  const auto& sp = c.meta.at("splits");
  ds.train = {sp.at("train")[0].get<index_t>(), sp.at("train")[1].get<index_t>()};
  ds.val = {sp.at("val")[0].get<index_t>(), sp.at("val")[1].get<index_t>()};
  ds.test = {sp.at("test")[0].get<index_t>(), sp.at("test")[1].get<index_t>()};

  const auto& imgs = c.tensors.at("images");
  require(imgs.dtype == "f32" && imgs.shape.size() == 4, "dataset: bad images tensor");
  ds.images.resize(imgs.numel());
  std::memcpy(ds.images.data(), imgs.bytes.data(), imgs.bytes.size());
  const auto& labels = c.tensors.at("labels");
  require(labels.dtype == "i64", "dataset: bad labels tensor");
  std::vector<std::int64_t> l64(labels.numel());
  std::memcpy(l64.data(), labels.bytes.data(), labels.bytes.size());
  ds.labels.assign(l64.begin(), l64.end());
  require(ds.labels.size() * ds.pixels() == ds.images.size(), "dataset: tensor sizes disagree");
  return ds;
}

}  // namespace skd::data
