// Binary checkpoint container.
//
// Layout: magic, format version, a JSON manifest (configs plus a section
// table with byte offsets and FNV-1a content hashes), then the section blobs.
// Tensors are little-endian f32 arrays with shape headers. Save/load round
// trips are byte-exact; hash verification runs on every load.
#pragma once

#include <json.hpp>

#include <cstring>
#include <fstream>
#include <map>

#include "star/tensor.hpp"

namespace star::io {

inline uint64_t fnv1a(const void* data, size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = 0xcbf29ce484222325ULL;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hash_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Section {
  std::vector<NamedTensor> tensors;

  std::string serialize() const {
    std::string out;
    auto put_u32 = [&](uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); };
    for (const auto& t : tensors) {
      put_u32(static_cast<uint32_t>(t.name.size()));
      out.append(t.name);
      put_u32(static_cast<uint32_t>(t.shape.size()));
      for (int d : t.shape) put_u32(static_cast<uint32_t>(d));
      out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
    }
    return out;
  }

  static Section deserialize(const std::string& blob, const std::string& name) {
    Section s;
    size_t at = 0;
    auto need = [&](size_t n) {
      if (at + n > blob.size())
        throw IntegrityError("checkpoint section '" + name + "' is truncated");
    };
    auto get_u32 = [&]() {
      need(4);
      uint32_t v;
      std::memcpy(&v, blob.data() + at, 4);
      at += 4;
      return v;
    };
    while (at < blob.size()) {
      NamedTensor t;
      uint32_t name_len = get_u32();
      need(name_len);
      t.name.assign(blob.data() + at, name_len);
      at += name_len;
      uint32_t ndim = get_u32();
      long long count = 1;
      for (uint32_t i = 0; i < ndim; ++i) {
        t.shape.push_back(static_cast<int>(get_u32()));
        count *= t.shape.back();
      }
      need(static_cast<size_t>(count) * sizeof(float));
      t.data.resize(static_cast<size_t>(count));
      std::memcpy(t.data.data(), blob.data() + at, t.data.size() * sizeof(float));
      at += t.data.size() * sizeof(float);
      s.tensors.push_back(std::move(t));
    }
    return s;
  }
};

struct Checkpoint {
  nlohmann::json config = nlohmann::json::object();
  std::map<std::string, Section> sections;  // sorted name order on disk

  static constexpr char kMagic[9] = "STARCKP1";

  std::map<std::string, std::string> section_hashes() const {
    std::map<std::string, std::string> out;
    for (const auto& [name, sec] : sections) {
      auto blob = sec.serialize();
      out[name] = hash_hex(fnv1a(blob.data(), blob.size()));
    }
    return out;
  }

  void save(const std::string& path) const {
    std::vector<std::pair<std::string, std::string>> blobs;
    for (const auto& [name, sec] : sections) blobs.emplace_back(name, sec.serialize());
    nlohmann::json manifest;
    manifest["format"] = 1;
    manifest["config"] = config;
    nlohmann::json table = nlohmann::json::object();
    size_t offset = 0;
    for (const auto& [name, blob] : blobs) {
      table[name] = {{"offset", offset},
                     {"bytes", blob.size()},
                     {"hash", hash_hex(fnv1a(blob.data(), blob.size()))},
                     {"tensors", sections.at(name).tensors.size()}};
      offset += blob.size();
    }
    manifest["sections"] = table;
    std::string mjson = manifest.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IntegrityError("cannot open checkpoint for write: " + path);
    f.write(kMagic, 8);
    uint32_t mlen = static_cast<uint32_t>(mjson.size());
    f.write(reinterpret_cast<const char*>(&mlen), 4);
    f.write(mjson.data(), static_cast<std::streamsize>(mjson.size()));
    for (const auto& [name, blob] : blobs)
      f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IntegrityError("cannot open checkpoint: " + path);
    std::string all((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (all.size() < 12 || all.compare(0, 8, kMagic) != 0)
      throw IntegrityError("not a checkpoint file: " + path);
    uint32_t mlen;
    std::memcpy(&mlen, all.data() + 8, 4);
    if (12 + static_cast<size_t>(mlen) > all.size())
      throw IntegrityError("checkpoint manifest truncated: " + path);
    nlohmann::json manifest;
    try {
      manifest = nlohmann::json::parse(all.substr(12, mlen));
    } catch (const nlohmann::json::exception& e) {
      throw IntegrityError(std::string("checkpoint manifest unreadable: ") + e.what());
    }
    Checkpoint ck;
    ck.config = manifest.value("config", nlohmann::json::object());
    size_t data_start = 12 + mlen;
    for (auto& [name, entry] : manifest.at("sections").items()) {
      size_t off = entry.at("offset").get<size_t>();
      size_t bytes = entry.at("bytes").get<size_t>();
      if (data_start + off + bytes > all.size())
        throw IntegrityError("checkpoint section '" + name + "' is truncated");
      std::string blob = all.substr(data_start + off, bytes);
      auto hash = hash_hex(fnv1a(blob.data(), blob.size()));
      if (hash != entry.at("hash").get<std::string>())
        throw IntegrityError("checkpoint section '" + name + "' failed its hash check");
      ck.sections[name] = Section::deserialize(blob, name);
    }
    return ck;
  }
};

// Splits "section.rest.of.name" at the first dot; parameters register under
// their section via the models' for_each_* visitors.
template <class Visitor>
struct SectionCollector {
  Checkpoint* ck;

  void operator()(const std::string& full_name, const TensorT<float>& t) const {
    auto dot = full_name.find('.');
    std::string section = full_name.substr(0, dot);
    std::string rest = dot == std::string::npos ? full_name : full_name.substr(dot + 1);
    ck->sections[section].tensors.push_back({rest, t.shape(), t.data()});
  }
};

inline void collect_param(Checkpoint& ck, const std::string& full_name, const TensorT<float>& t) {
  auto dot = full_name.find('.');
  std::string section = full_name.substr(0, dot);
  std::string rest = dot == std::string::npos ? full_name : full_name.substr(dot + 1);
  ck.sections[section].tensors.push_back({rest, t.shape(), t.data()});
}

// Copies stored data into a registered parameter, shape-checked.
inline void restore_param(const Checkpoint& ck, const std::string& full_name, TensorT<float>& t) {
  auto dot = full_name.find('.');
  std::string section = full_name.substr(0, dot);
  std::string rest = dot == std::string::npos ? full_name : full_name.substr(dot + 1);
  auto sec = ck.sections.find(section);
  if (sec == ck.sections.end())
    throw IntegrityError("checkpoint has no section '" + section + "'");
  for (const auto& nt : sec->second.tensors) {
    if (nt.name != rest) continue;
    if (nt.shape != t.shape())
      throw IntegrityError("checkpoint tensor '" + full_name + "' shape " + shape_str(nt.shape) +
                           " vs model " + shape_str(t.shape()));
    t.raw_data() = nt.data;
    return;
  }
  throw IntegrityError("checkpoint is missing tensor '" + full_name + "'");
}

}  // namespace star::io
