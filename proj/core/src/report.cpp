#include "bilm/report.hpp"

#include <algorithm>
#include <set>

#include "bilm/csv.hpp"
#include "bilm/error.hpp"

namespace bilm::pipeline {

namespace {

std::set<std::pair<std::string, std::string>> schema(const RunResult& r) {
  std::set<std::pair<std::string, std::string>> out;
  for (const auto& m : r.metrics) {
    out.emplace(m.metric, m.prime_mode);
  }
  return out;
}

std::optional<int> lookup_distance(const typology::DistanceMatrix& d, const std::string& a,
                                   const std::string& b) {
  const auto has = [&](const std::string& x) {
    return std::find(d.languages.begin(), d.languages.end(), x) != d.languages.end();
  };
  if (!has(a) || !has(b)) {
    return std::nullopt;
  }
  return d.at(a, b);
}

}  // namespace

std::vector<ReportRow> report_rows(std::span<const RunResult> results,
                                   const typology::DistanceMatrix& distances) {
  if (results.empty()) {
    throw ValidationError("report: no results");
  }
  const auto reference = schema(results.front());
  for (const RunResult& r : results) {
    if (schema(r) != reference) {
      throw ValidationError("report: run '" + r.experiment_id + "' reports a different metric set than '" +
                            results.front().experiment_id + "'");
    }
  }
  std::vector<ReportRow> rows;
  for (const RunResult& r : results) {
    const std::optional<int> distance = lookup_distance(distances, r.l1, r.l2);
    for (const Metric& m : r.metrics) {
      rows.push_back({r.experiment_id, r.l1, r.l2, r.onset, r.schedule_mode, m.prime_mode, m.metric,
                      m.value, distance, r.manifest_hash, m.seed});
    }
  }
  return rows;
}

std::string report_csv(std::span<const ReportRow> rows) {
  std::string out =
      "experiment_id,l1,l2,onset,mode,prime_mode,metric,value,distance,manifest_hash,seed\n";
  for (const ReportRow& r : rows) {
    out += csv_field(r.experiment_id) + ',' + csv_field(r.l1) + ',' + csv_field(r.l2) + ',' +
           std::to_string(r.onset) + ',' + csv_field(r.mode) + ',' +
           csv_field(r.prime_mode.empty() ? "n/a" : r.prime_mode) + ',' + csv_field(r.metric) +
           ',' + csv_number(r.value) + ',' + (r.distance ? std::to_string(*r.distance) : "") +
           ',' + r.manifest_hash + ',' + std::to_string(r.seed) + '\n';
  }
  return out;
}

}  // namespace bilm::pipeline
