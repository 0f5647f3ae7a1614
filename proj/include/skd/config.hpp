#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "skd/common.hpp"
#include "skd/dataset.hpp"
#include "skd/piad.hpp"
#include "skd/train.hpp"
#include "skd/vit.hpp"
#include "skd/wpac.hpp"

namespace skd::config {

// INI-style text: [section] headers with key = value lines, '#' comments.
// Sections: arch, train, wpac, piad, experiment. Unknown keys are rejected.
struct Config {
  vit::ArchConfig arch;
  train::TrainConfig train;
  wpac::WpacOptions wpac;
  index_t wpac_proxy_size = 256;
  piad::PiadConfig piad;
  struct Experiment {
    index_t seeds = 5;
    std::vector<double> ratios = {0.25, 0.5, 0.75};
    data::GenCounts counts;
    index_t channels = 1;
  } experiment;
};

Config defaults();
Config parse(const std::string& text);
Config load(const std::string& path);

// every effective value in a fixed order; equal configs produce equal text
std::string canonical_dump(const Config& c);

std::uint64_t fnv1a64(const std::string& s);
std::string config_hash(const Config& c);  // 16 hex chars

}  // namespace skd::config
