#include "skd/config.hpp"

#include <fstream>
#include <sstream>

namespace skd::config {

Config defaults() { return Config{}; }

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

index_t to_count(const std::string& v, const std::string& key) {
  try {
    const long long n = std::stoll(v);
    require(n >= 0, "config: " + key + " must be non-negative");
    return static_cast<index_t>(n);
  } catch (const std::logic_error&) {
    throw ValidationError("config: bad integer for " + key + ": '" + v + "'");
  }
}

double to_real(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    require(used == v.size(), "config: trailing characters after number for " + key);
    return x;
  } catch (const std::logic_error&) {
    throw ValidationError("config: bad number for " + key + ": '" + v + "'");
  }
}

bool to_bool(const std::string& v, const std::string& key) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw ValidationError("config: bad boolean for " + key + ": '" + v + "'");
}

std::vector<double> to_ratio_list(const std::string& v, const std::string& key) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(to_real(item, key));
  }
  require(!out.empty(), "config: " + key + " must list at least one ratio");
  return out;
}

void apply(Config& c, const std::string& section, const std::string& key,
           const std::string& value) {
  const std::string full = section + "." + key;
  if (section == "arch") {
    if (key == "image_size") c.arch.image_size = to_count(value, full);
    else if (key == "patch_size") c.arch.patch_size = to_count(value, full);
    else if (key == "channels") c.arch.channels = to_count(value, full);
    else if (key == "depth") c.arch.depth = to_count(value, full);
    else if (key == "embed_dim") c.arch.embed_dim = to_count(value, full);
    else if (key == "heads") c.arch.heads = to_count(value, full);
    else if (key == "mlp_hidden") c.arch.mlp_hidden = to_count(value, full);
    else if (key == "num_classes") c.arch.num_classes = to_count(value, full);
    else throw ValidationError("config: unknown key " + full);
  } else if (section == "train") {
    if (key == "epochs") c.train.epochs = to_count(value, full);
    else if (key == "batch_size") c.train.batch_size = to_count(value, full);
    else if (key == "lr") c.train.lr = to_real(value, full);
    else if (key == "momentum") c.train.momentum = to_real(value, full);
    else if (key == "cosine") c.train.cosine = to_bool(value, full);
    else throw ValidationError("config: unknown key " + full);
  } else if (section == "wpac") {
    if (key == "weighting") c.wpac.weighting = wpac::weighting_from_string(value);
    else if (key == "rand_tokens") c.wpac.rand_tokens = to_count(value, full);
    else if (key == "ridge") c.wpac.ridge = to_real(value, full);
    else if (key == "batch_size") c.wpac.batch_size = to_count(value, full);
    else if (key == "proxy_size") c.wpac_proxy_size = to_count(value, full);
    else throw ValidationError("config: unknown key " + full);
  } else if (section == "piad") {
    if (key == "target_ratio") c.piad.target_ratio = to_real(value, full);
    else if (key == "progressive_epochs") c.piad.progressive_epochs = to_count(value, full);
    else if (key == "epochs") c.piad.epochs = to_count(value, full);
    else if (key == "lr") c.piad.lr = to_real(value, full);
    else if (key == "momentum") c.piad.momentum = to_real(value, full);
    else if (key == "cosine") c.piad.cosine = to_bool(value, full);
    else if (key == "batch_size") c.piad.batch_size = to_count(value, full);
    else if (key == "proxy_size") c.piad.proxy_size = to_count(value, full);
    else if (key == "truncation_includes_zero")
      c.piad.truncation_includes_zero = to_bool(value, full);
    else throw ValidationError("config: unknown key " + full);
  } else if (section == "experiment") {
    if (key == "seeds") c.experiment.seeds = to_count(value, full);
    else if (key == "ratios") c.experiment.ratios = to_ratio_list(value, full);
    else if (key == "train_per_class") c.experiment.counts.train_per_class = to_count(value, full);
    else if (key == "val_per_class") c.experiment.counts.val_per_class = to_count(value, full);
    else if (key == "test_per_class") c.experiment.counts.test_per_class = to_count(value, full);
    else if (key == "channels") c.experiment.channels = to_count(value, full);
    else throw ValidationError("config: unknown key " + full);
  } else {
    throw ValidationError("config: unknown section [" + section + "]");
  }
}

}  // namespace

Config parse(const std::string& text) {
  Config c = defaults();
  std::istringstream in(text);
  std::string line, section;
  index_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      require(line.back() == ']', "config: unterminated section at line " + std::to_string(lineno));
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    require(eq != std::string::npos, "config: expected key = value at line " + std::to_string(lineno));
    require(!section.empty(), "config: key before any [section] at line " + std::to_string(lineno));
    apply(c, section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  c.arch.validate();
  return c;
}

Config load(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

std::string canonical_dump(const Config& c) {
  std::ostringstream out;
  out.precision(17);
  out << "[arch]\n"
      << "channels = " << c.arch.channels << "\n"
      << "depth = " << c.arch.depth << "\n"
      << "embed_dim = " << c.arch.embed_dim << "\n"
      << "heads = " << c.arch.heads << "\n"
      << "image_size = " << c.arch.image_size << "\n"
      << "mlp_hidden = " << c.arch.mlp_hidden << "\n"
      << "num_classes = " << c.arch.num_classes << "\n"
      << "patch_size = " << c.arch.patch_size << "\n";
  out << "[train]\n"
      << "batch_size = " << c.train.batch_size << "\n"
      << "cosine = " << (c.train.cosine ? 1 : 0) << "\n"
      << "epochs = " << c.train.epochs << "\n"
      << "lr = " << c.train.lr << "\n"
      << "momentum = " << c.train.momentum << "\n";
  out << "[wpac]\n"
      << "batch_size = " << c.wpac.batch_size << "\n"
      << "proxy_size = " << c.wpac_proxy_size << "\n"
      << "rand_tokens = " << c.wpac.rand_tokens << "\n"
      << "ridge = " << c.wpac.ridge << "\n"
      << "weighting = " << wpac::to_string(c.wpac.weighting) << "\n";
  out << "[piad]\n"
      << "batch_size = " << c.piad.batch_size << "\n"
      << "cosine = " << (c.piad.cosine ? 1 : 0) << "\n"
      << "epochs = " << c.piad.epochs << "\n"
      << "lr = " << c.piad.lr << "\n"
      << "momentum = " << c.piad.momentum << "\n"
      << "progressive_epochs = " << c.piad.progressive_epochs << "\n"
      << "proxy_size = " << c.piad.proxy_size << "\n"
      << "target_ratio = " << c.piad.target_ratio << "\n"
      << "truncation_includes_zero = " << (c.piad.truncation_includes_zero ? 1 : 0) << "\n";
  out << "[experiment]\n"
      << "channels = " << c.experiment.channels << "\n"
      << "ratios = ";
  for (index_t i = 0; i < c.experiment.ratios.size(); ++i)
    out << (i ? "," : "") << c.experiment.ratios[i];
  out << "\n"
      << "seeds = " << c.experiment.seeds << "\n"
      << "test_per_class = " << c.experiment.counts.test_per_class << "\n"
      << "train_per_class = " << c.experiment.counts.train_per_class << "\n"
      << "val_per_class = " << c.experiment.counts.val_per_class << "\n";
  return out.str();
}

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const Config& c) {
  const std::uint64_t h = fnv1a64(canonical_dump(c));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace skd::config
