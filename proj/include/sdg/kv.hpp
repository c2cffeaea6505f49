#pragma once

#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sdg/error.hpp"

namespace sdg {

// Ordered key=value text files (manifests, run results, config echoes).
class KvFile {
 public:
  void set(const std::string& key, const std::string& value) {
    if (auto it = index_.find(key); it != index_.end()) {
      entries_[it->second].second = value;
      return;
    }
    index_[key] = entries_.size();
    entries_.emplace_back(key, value);
  }

  template <class T>
  void set_num(const std::string& key, const T& value) {
    std::ostringstream os;
    os.precision(17);
    os << value;
    set(key, os.str());
  }

  bool has(const std::string& key) const { return index_.count(key) > 0; }

  const std::string& get(const std::string& key) const {
    auto it = index_.find(key);
    require(it != index_.end(), cat("missing key '", key, "'"));
    return entries_[it->second].second;
  }

  std::string get_or(const std::string& key, const std::string& fallback) const {
    auto it = index_.find(key);
    return it == index_.end() ? fallback : entries_[it->second].second;
  }

  double get_double(const std::string& key) const { return std::stod(get(key)); }
  long long get_int(const std::string& key) const { return std::stoll(get(key)); }

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  std::string to_string() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
    return out;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), cat("cannot write ", path));
    out << to_string();
    require(out.good(), cat("write failed for ", path));
  }

  static KvFile parse(const std::string& text, const std::string& origin = "<memory>") {
    KvFile kv;
    std::size_t line_no = 0, pos = 0;
    while (pos <= text.size()) {
      const std::size_t eol = text.find('\n', pos);
      std::string line = text.substr(pos, eol == std::string::npos ? std::string::npos : eol - pos);
      pos = eol == std::string::npos ? text.size() + 1 : eol + 1;
      ++line_no;
      const auto strip = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
      };
      line = strip(line);
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      require(eq != std::string::npos, cat(origin, ":", line_no, ": expected 'key = value', got '", line, "'"));
      kv.set(strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
    }
    return kv;
  }

  static KvFile load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), cat("cannot open ", path));
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse(text, path);
  }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace sdg
