#pragma once

// Long-format result tables joining run metrics with typological distance.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bilm/pipeline.hpp"
#include "bilm/typology.hpp"

namespace bilm::pipeline {

struct ReportRow {
  std::string experiment_id;
  std::string l1;
  std::string l2;
  int64_t onset = 0;
  std::string mode;
  std::string prime_mode;
  std::string metric;
  double value = 0.0;
  std::optional<int> distance;  // l1-l2 distance when both are in the matrix
  std::string manifest_hash;
  uint64_t seed = 0;
};

// One row per metric per run. Throws ValidationError for an empty input or when
// runs report different (metric, prime_mode) sets.
std::vector<ReportRow> report_rows(std::span<const RunResult> results,
                                   const typology::DistanceMatrix& distances);

std::string report_csv(std::span<const ReportRow> rows);

}  // namespace bilm::pipeline
