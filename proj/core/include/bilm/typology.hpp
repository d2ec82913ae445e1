#pragma once

// Syntactic distance between languages from a categorical feature matrix.
//
// A distance is the number of disagreeing features among those reported for
// every language in the comparison set.

#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace bilm::typology {

struct WalsProfile {
  std::string language;
  // std::nullopt marks an unreported value.
  std::map<std::string, std::optional<std::string>> features;

  bool reported(const std::string& feature) const;
};

struct DistanceMatrix {
  std::vector<std::string> languages;
  std::vector<std::vector<int>> distances;
  int shared_feature_count = 0;

  int at(std::string_view a, std::string_view b) const;
  nlohmann::json to_json() const;
  // Aligned columns, one row per language.
  std::string to_text() const;
};

// Parses a delimiter-separated matrix. The header row holds feature ids and the
// first column holds language codes. delimiter == '\0' autodetects tab vs comma.
std::vector<WalsProfile> load_feature_matrix(std::istream& in, char delimiter = '\0');
std::vector<WalsProfile> load_feature_matrix_file(const std::string& path, char delimiter = '\0');

// Feature ids reported in every profile, sorted lexicographically.
std::vector<std::string> filter_shared_features(std::span<const WalsProfile> profiles);

int syntactic_distance(const WalsProfile& a, const WalsProfile& b,
                       std::span<const std::string> shared);

DistanceMatrix compute_distance_matrix(std::span<const WalsProfile> profiles);

// Six-language stand-in matrix (en, de, es, el, ko, tr). It is synthetic: the
// values are constructed so that distances to English are 9/11/14/17/27 over
// 75 shared features. It is not real WALS data.
std::string_view bundled_fixture();
std::vector<WalsProfile> load_bundled_fixture();

}  // namespace bilm::typology
