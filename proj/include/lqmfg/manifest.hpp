#pragma once

#include <openssl/evp.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <json.hpp>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lqmfg/errors.hpp"

namespace lqmfg {

inline constexpr const char* kToolVersion = "1.0.0";

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256: digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return os.str();
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string utc_timestamp(std::chrono::system_clock::time_point tp) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(tp);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

/// One manifest.json per output directory. The config is copied next to it as
/// config.json and `config_sha256` is the digest of that copy's bytes.
class RunManifest {
 public:
  RunManifest(std::string out_dir, std::string subcommand)
      : dir_(std::move(out_dir)), subcommand_(std::move(subcommand)), started_(std::chrono::system_clock::now()) {
    std::filesystem::create_directories(dir_);
  }

  void set_flag(const std::string& name, nlohmann::json value) { flags_[name] = std::move(value); }

  void store_config(const std::string& text) {
    const std::string path = (std::filesystem::path(dir_) / "config.json").string();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParseError("cannot write '" + path + "'");
    out << text;
    out.close();
    digest_ = sha256_hex(text);
    add_output("config.json");
  }

  std::string path(const std::string& file) const { return (std::filesystem::path(dir_) / file).string(); }

  void add_output(const std::string& file) {
    for (const auto& f : outputs_)
      if (f == file) return;
    outputs_.push_back(file);
  }

  void fail(const std::string& stage, const std::string& reason) { failures_.push_back({{"stage", stage}, {"reason", reason}}); }
  bool failed() const { return !failures_.empty(); }
  const std::string& config_digest() const { return digest_; }

  void write() const {
    nlohmann::json doc;
    doc["tool"] = "lqmfg";
    doc["tool_version"] = kToolVersion;
    doc["subcommand"] = subcommand_;
    doc["flags"] = flags_;
    doc["config_sha256"] = digest_;
    doc["started_utc"] = utc_timestamp(started_);
    doc["finished_utc"] = utc_timestamp(std::chrono::system_clock::now());
    doc["outputs"] = outputs_;
    doc["status"] = failed() ? "FAILED" : "OK";
    doc["failures"] = failures_;
    std::ofstream out(path("manifest.json"), std::ios::binary);
    if (!out) throw ParseError("cannot write manifest in '" + dir_ + "'");
    out << doc.dump(2) << '\n';
  }

 private:
  std::string dir_;
  std::string subcommand_;
  std::chrono::system_clock::time_point started_;
  nlohmann::json flags_ = nlohmann::json::object();
  std::string digest_;
  std::vector<std::string> outputs_;
  nlohmann::json failures_ = nlohmann::json::array();
};

}  // namespace lqmfg
