// Append-only JSON Lines metrics stream.
#pragma once

#include <json.hpp>

#include <chrono>
#include <fstream>

#include "star/common.hpp"

namespace star::io {

class MetricsWriter {
 public:
  MetricsWriter() = default;

  // Wall time is optional so that seeded reruns can produce byte-identical
  // metrics files.
  MetricsWriter(std::string path, bool include_wall_time)
      : path_(std::move(path)), wall_(include_wall_time) {
    if (!path_.empty()) {
      out_.open(path_, std::ios::app);
      if (!out_) throw IntegrityError("cannot open metrics file: " + path_);
      start_ = std::chrono::steady_clock::now();
    }
  }

  bool active() const { return out_.is_open(); }

  void record(int stage, long long step, nlohmann::json fields) {
    if (!out_.is_open()) return;
    fields["stage"] = stage;
    fields["step"] = step;
    if (wall_) {
      auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                    std::chrono::steady_clock::now() - start_)
                    .count();
      fields["wall_time_ms"] = ms;
    }
    out_ << fields.dump() << "\n";
    out_.flush();
  }

 private:
  std::string path_;
  bool wall_ = true;
  std::ofstream out_;
  std::chrono::steady_clock::time_point start_;
};

inline std::vector<nlohmann::json> read_metrics(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IntegrityError("cannot open metrics file: " + path);
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    out.push_back(nlohmann::json::parse(line));
  }
  return out;
}

}  // namespace star::io
