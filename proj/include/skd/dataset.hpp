#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "skd/common.hpp"
#include "skd/vit.hpp"

namespace skd::data {

// Procedural 8-class shape images (square, diamond, circle, ring, the two
// triangle orientations, plus, cross) over cluttered backgrounds. The clutter
// carries variance but no label signal.
struct GenCounts {
  index_t train_per_class = 500;
  index_t val_per_class = 100;
  index_t test_per_class = 100;
};

struct Split {
  index_t begin = 0, end = 0;
  index_t size() const { return end - begin; }
};

struct Dataset {
  index_t image_size = 32;
  index_t channels = 1;
  index_t num_classes = 8;
  std::vector<float> images;  // [N, channels, image_size, image_size]
  std::vector<int> labels;    // [N]
  Split train, val, test;
  std::vector<std::string> class_names;
  std::uint64_t seed = 0;

  index_t count() const { return labels.size(); }
  index_t pixels() const { return channels * image_size * image_size; }
};

Dataset gen_data(std::uint64_t seed, const GenCounts& counts, index_t channels = 1);

// Uniform without replacement from the train split.
std::vector<index_t> sample_proxy(const Dataset& ds, index_t size, std::uint64_t seed);

vit::Batch to_batch(const Dataset& ds, const std::vector<index_t>& indices);
vit::Batch split_batch(const Dataset& ds, const Split& split);  // whole split as one batch

void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace skd::data
