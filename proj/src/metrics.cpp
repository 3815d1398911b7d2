#include "metrics.hpp"

#include <cstdio>

namespace gatedformer {

namespace {
std::string format_g6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}
}  // namespace

std::string format_csv_row(const MetricsRecord& r) {
  std::string row = std::to_string(r.step);
  row += ',';
  row += std::to_string(r.epoch);
  row += ',';
  row += r.split;
  row += ',';
  row += format_g6(r.loss);
  row += ',';
  row += format_g6(r.ppl);
  row += ',';
  row += format_g6(r.bpc);
  row += ',';
  row += format_g6(r.lr);
  row += ',';
  row += format_g6(r.wall_ms);
  return row;
}

std::string metrics_to_csv(const std::vector<MetricsRecord>& records) {
  std::string out = kMetricsCsvHeader;
  out += '\n';
  for (const MetricsRecord& r : records) {
    out += format_csv_row(r);
    out += '\n';
  }
  return out;
}

}  // namespace gatedformer
