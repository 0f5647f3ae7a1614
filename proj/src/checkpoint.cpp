#include "skd/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace skd::io {

static_assert(std::endian::native == std::endian::little,
              "container blobs are little-endian; big-endian hosts need byte swaps");

namespace {

std::array<std::uint32_t, 256> make_crc_table() {
  std::array<std::uint32_t, 256> table{};
  for (std::uint32_t i = 0; i < 256; ++i) {
    std::uint32_t c = i;
    for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
    table[i] = c;
  }
  return table;
}

constexpr char kMagic[4] = {'S', 'K', 'D', 'C'};
constexpr std::uint32_t kVersion = 1;

index_t dtype_size(const std::string& dt) {
  if (dt == "f64" || dt == "i64") return 8;
  if (dt == "f32") return 4;
  throw ValidationError("container: unknown dtype '" + dt + "'");
}

}  // namespace

std::uint32_t crc32(const void* data, std::size_t len, std::uint32_t seed) {
  static const auto table = make_crc_table();
  std::uint32_t c = seed ^ 0xffffffffu;
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) c = table[(c ^ p[i]) & 0xffu] ^ (c >> 8);
  return c ^ 0xffffffffu;
}

void write_container(const std::string& path, const Container& c) {
  nlohmann::json header = c.meta;
  header["format"] = "skdc";
  nlohmann::json dir = nlohmann::json::array();
  index_t offset = 0;
  for (const auto& name : c.order) {
    const auto& t = c.tensors.at(name);
    require(t.bytes.size() == t.numel() * dtype_size(t.dtype),
            "container: tensor '" + name + "' byte count does not match shape");
    dir.push_back({{"name", name}, {"dtype", t.dtype}, {"shape", t.shape}, {"offset", offset}});
    offset += t.bytes.size();
  }
  header["tensors"] = dir;
  const std::string htext = header.dump();

  std::vector<char> out;
  out.reserve(16 + htext.size() + offset + 4);
  out.insert(out.end(), kMagic, kMagic + 4);
  const std::uint32_t ver = kVersion;
  const std::uint64_t hlen = htext.size();
  out.insert(out.end(), reinterpret_cast<const char*>(&ver), reinterpret_cast<const char*>(&ver) + 4);
  out.insert(out.end(), reinterpret_cast<const char*>(&hlen),
             reinterpret_cast<const char*>(&hlen) + 8);
  out.insert(out.end(), htext.begin(), htext.end());
  for (const auto& name : c.order) {
    const auto& t = c.tensors.at(name);
    out.insert(out.end(), t.bytes.begin(), t.bytes.end());
  }
  const std::uint32_t crc = crc32(out.data(), out.size());
  out.insert(out.end(), reinterpret_cast<const char*>(&crc), reinterpret_cast<const char*>(&crc) + 4);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), "container: cannot open '" + path + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  require(f.good(), "container: write failed for '" + path + "'");
}

Container read_container(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "container: cannot open '" + path + "'");
  std::vector<char> raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  require(raw.size() >= 20, "container: file too short");

  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, raw.data() + raw.size() - 4, 4);
  const std::uint32_t actual = crc32(raw.data(), raw.size() - 4);
  require(stored_crc == actual, "container: checksum mismatch (corrupt or truncated file)");

  require(std::memcmp(raw.data(), kMagic, 4) == 0, "container: bad magic");
  std::uint32_t ver;
  std::memcpy(&ver, raw.data() + 4, 4);
  require(ver == kVersion, "container: unsupported version " + std::to_string(ver));
  std::uint64_t hlen;
  std::memcpy(&hlen, raw.data() + 8, 8);
  require(16 + hlen + 4 <= raw.size(), "container: header length out of range");

  Container c;
  try {
    c.meta = nlohmann::json::parse(raw.begin() + 16, raw.begin() + 16 + hlen);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("container: malformed header: ") + e.what());
  }
  const char* data = raw.data() + 16 + hlen;
  const index_t data_len = raw.size() - 16 - hlen - 4;
  require(c.meta.contains("tensors"), "container: header missing tensor directory");
  for (const auto& entry : c.meta["tensors"]) {
    TensorBlob t;
    const std::string name = entry.at("name").get<std::string>();
    t.dtype = entry.at("dtype").get<std::string>();
    t.shape = entry.at("shape").get<std::vector<index_t>>();
    const index_t offset = entry.at("offset").get<index_t>();
    const index_t nbytes = t.numel() * dtype_size(t.dtype);
    require(offset + nbytes <= data_len, "container: tensor '" + name + "' overruns file");
    t.bytes.assign(data + offset, data + offset + nbytes);
    c.order.push_back(name);
    c.tensors.emplace(name, std::move(t));
  }
  c.meta.erase("tensors");
  return c;
}

namespace {

nlohmann::json arch_to_json(const vit::ArchConfig& a) {
  return {{"image_size", a.image_size}, {"patch_size", a.patch_size}, {"channels", a.channels},
          {"depth", a.depth},           {"embed_dim", a.embed_dim},   {"heads", a.heads},
          {"mlp_hidden", a.mlp_hidden}, {"num_classes", a.num_classes}};
}

vit::ArchConfig arch_from_json(const nlohmann::json& j) {
  vit::ArchConfig a;
  a.image_size = j.at("image_size").get<index_t>();
  a.patch_size = j.at("patch_size").get<index_t>();
  a.channels = j.at("channels").get<index_t>();
  a.depth = j.at("depth").get<index_t>();
  a.embed_dim = j.at("embed_dim").get<index_t>();
  a.heads = j.at("heads").get<index_t>();
  a.mlp_hidden = j.at("mlp_hidden").get<index_t>();
  a.num_classes = j.at("num_classes").get<index_t>();
  return a;
}

}  // namespace

void save_model(const vit::Model& m, const std::string& path) {
  vit::validate_shapes(m);
  Container c;
  c.meta["kind"] = "model";
  c.meta["arch"] = arch_to_json(m.arch);
  std::vector<index_t> attn_dims, mlp_dims;
  for (const auto& blk : m.blocks) {
    attn_dims.push_back(blk.attn_dim);
    mlp_dims.push_back(blk.mlp_dim);
  }
  c.meta["block_attn_dims"] = attn_dims;
  c.meta["block_mlp_dims"] = mlp_dims;
  vit::for_each_tensor(m, [&](const std::string& name, const std::vector<double>& v,
                              const std::vector<index_t>& shape) {
    TensorBlob t;
    t.dtype = "f64";
    t.shape = shape;
    t.bytes.resize(v.size() * sizeof(double));
    std::memcpy(t.bytes.data(), v.data(), t.bytes.size());
    c.order.push_back(name);
    c.tensors.emplace(name, std::move(t));
  });
  write_container(path, c);
}

vit::Model load_model(const std::string& path) {
  Container c = read_container(path);
  require(c.meta.value("kind", "") == "model", "checkpoint: not a model container");
  vit::ArchConfig arch = arch_from_json(c.meta.at("arch"));
  vit::Model m = vit::make_model(arch);
  const auto attn_dims = c.meta.at("block_attn_dims").get<std::vector<index_t>>();
  const auto mlp_dims = c.meta.at("block_mlp_dims").get<std::vector<index_t>>();
  require(attn_dims.size() == arch.depth && mlp_dims.size() == arch.depth,
          "checkpoint: per-block dim lists do not match depth");
  for (index_t b = 0; b < arch.depth; ++b) {
    auto& blk = m.blocks[b];
    blk.attn_dim = attn_dims[b];
    blk.mlp_dim = mlp_dims[b];
    const index_t d = arch.embed_dim;
    for (auto& hd : blk.heads) {
      hd.wq.assign(blk.attn_dim * d, 0.0);
      hd.wk.assign(blk.attn_dim * d, 0.0);
      hd.wv.assign(blk.attn_dim * d, 0.0);
      hd.bq.assign(blk.attn_dim, 0.0);
      hd.bk.assign(blk.attn_dim, 0.0);
      hd.bv.assign(blk.attn_dim, 0.0);
      hd.wo.assign(d * blk.attn_dim, 0.0);
    }
    blk.w1.assign(blk.mlp_dim * d, 0.0);
    blk.b1.assign(blk.mlp_dim, 0.0);
    blk.w2.assign(d * blk.mlp_dim, 0.0);
  }
  vit::for_each_tensor(m, [&](const std::string& name, std::vector<double>& v,
                              const std::vector<index_t>& shape) {
    auto it = c.tensors.find(name);
    require(it != c.tensors.end(), "checkpoint: missing tensor '" + name + "'");
    const TensorBlob& t = it->second;
    require(t.dtype == "f64", "checkpoint: tensor '" + name + "' has dtype " + t.dtype);
    require(t.shape == shape, "checkpoint: tensor '" + name + "' shape mismatch against arch");
    std::memcpy(v.data(), t.bytes.data(), t.bytes.size());
  });
  vit::validate_shapes(m);
  return m;
}

}  // namespace skd::io
