#include "bilm/typology.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "bilm/error.hpp"

namespace bilm::typology {
namespace {

std::vector<std::string> split(const std::string& line, char delim) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, delim)) {
    cells.push_back(cell);
  }
  // getline drops a trailing empty cell.
  if (!line.empty() && line.back() == delim) {
    cells.emplace_back();
  }
  return cells;
}

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

}  // namespace

bool WalsProfile::reported(const std::string& feature) const {
  const auto it = features.find(feature);
  return it != features.end() && it->second.has_value();
}

std::vector<WalsProfile> load_feature_matrix(std::istream& in, char delimiter) {
  std::string header_line;
  while (std::getline(in, header_line) && trim(header_line).empty()) {
  }
  if (trim(header_line).empty()) {
    throw ValidationError("feature matrix: missing header row");
  }
  if (!header_line.empty() && header_line.back() == '\r') {
    header_line.pop_back();
  }
  if (delimiter == '\0') {
    delimiter = header_line.find('\t') != std::string::npos ? '\t' : ',';
  }
  const std::vector<std::string> header = split(header_line, delimiter);
  if (header.size() < 2) {
    throw ValidationError("feature matrix: header needs a language column and at least one feature");
  }
  std::vector<std::string> feature_ids;
  std::set<std::string> seen_features;
  for (size_t i = 1; i < header.size(); ++i) {
    std::string id = trim(header[i]);
    if (id.empty() || !seen_features.insert(id).second) {
      throw ValidationError("feature matrix: empty or duplicate feature id '" + id + "'");
    }
    feature_ids.push_back(std::move(id));
  }

  std::vector<WalsProfile> profiles;
  std::set<std::string> seen_languages;
  std::string line;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    if (trim(line).empty()) {
      continue;
    }
    const std::vector<std::string> cells = split(line, delimiter);
    if (cells.size() != header.size()) {
      throw ValidationError("feature matrix line " + std::to_string(line_no) + ": expected " +
                            std::to_string(header.size()) + " cells, got " +
                            std::to_string(cells.size()));
    }
    WalsProfile profile;
    profile.language = trim(cells[0]);
    if (profile.language.empty()) {
      throw ValidationError("feature matrix line " + std::to_string(line_no) +
                            ": missing language code");
    }
    if (!seen_languages.insert(profile.language).second) {
      throw ValidationError("feature matrix: duplicate language '" + profile.language + "'");
    }
    for (size_t i = 0; i < feature_ids.size(); ++i) {
      std::string value = trim(cells[i + 1]);
      if (value.empty()) {
        profile.features.emplace(feature_ids[i], std::nullopt);
      } else {
        profile.features.emplace(feature_ids[i], std::move(value));
      }
    }
    profiles.push_back(std::move(profile));
  }
  return profiles;
}

std::vector<WalsProfile> load_feature_matrix_file(const std::string& path, char delimiter) {
  std::ifstream in(path);
  if (!in) {
    throw ValidationError("cannot open feature matrix " + path);
  }
  return load_feature_matrix(in, delimiter);
}

std::vector<std::string> filter_shared_features(std::span<const WalsProfile> profiles) {
  if (profiles.empty()) {
    return {};
  }
  std::vector<std::string> shared;
  for (const auto& [feature, value] : profiles.front().features) {
    const bool everywhere = std::all_of(profiles.begin(), profiles.end(),
                                        [&](const WalsProfile& p) { return p.reported(feature); });
    if (everywhere) {
      shared.push_back(feature);
    }
  }
  // std::map iteration is already lexicographic.
  return shared;
}

int syntactic_distance(const WalsProfile& a, const WalsProfile& b,
                       std::span<const std::string> shared) {
  int distance = 0;
  for (const std::string& feature : shared) {
    if (!a.reported(feature) || !b.reported(feature)) {
      throw ValidationError("feature " + feature + " is unreported for " +
                            (a.reported(feature) ? b.language : a.language));
    }
    if (*a.features.at(feature) != *b.features.at(feature)) {
      ++distance;
    }
  }
  return distance;
}

DistanceMatrix compute_distance_matrix(std::span<const WalsProfile> profiles) {
  const std::vector<std::string> shared = filter_shared_features(profiles);
  DistanceMatrix m;
  m.shared_feature_count = static_cast<int>(shared.size());
  const size_t n = profiles.size();
  m.distances.assign(n, std::vector<int>(n, 0));
  for (const auto& p : profiles) {
    m.languages.push_back(p.language);
  }
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) {
      const int d = syntactic_distance(profiles[i], profiles[j], shared);
      m.distances[i][j] = d;
      m.distances[j][i] = d;
    }
  }
  return m;
}

int DistanceMatrix::at(std::string_view a, std::string_view b) const {
  const auto ia = std::find(languages.begin(), languages.end(), a);
  const auto ib = std::find(languages.begin(), languages.end(), b);
  if (ia == languages.end() || ib == languages.end()) {
    throw ValidationError("distance matrix: unknown language '" +
                          std::string(ia == languages.end() ? a : b) + "'");
  }
  return distances[static_cast<size_t>(ia - languages.begin())]
                  [static_cast<size_t>(ib - languages.begin())];
}

nlohmann::json DistanceMatrix::to_json() const {
  return nlohmann::json{{"languages", languages},
                        {"distances", distances},
                        {"shared_feature_count", shared_feature_count}};
}

std::string DistanceMatrix::to_text() const {
  size_t width = 4;
  for (const auto& l : languages) {
    width = std::max(width, l.size() + 1);
  }
  for (const auto& row : distances) {
    for (int d : row) {
      width = std::max(width, std::to_string(d).size() + 1);
    }
  }
  std::ostringstream out;
  out << std::setw(static_cast<int>(width)) << "";
  for (const auto& l : languages) {
    out << std::setw(static_cast<int>(width)) << l;
  }
  out << '\n';
  for (size_t i = 0; i < languages.size(); ++i) {
    out << std::setw(static_cast<int>(width)) << languages[i];
    for (int d : distances[i]) {
      out << std::setw(static_cast<int>(width)) << d;
    }
    out << '\n';
  }
  out << "shared features: " << shared_feature_count << '\n';
  return out.str();
}

std::vector<WalsProfile> load_bundled_fixture() {
  std::istringstream in{std::string(bundled_fixture())};
  return load_feature_matrix(in, '\t');
}

}  // namespace bilm::typology
