#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace gatedformer {

inline double to_bpc(double loss_nats) { return loss_nats / std::log(2.0); }
inline double to_ppl(double loss_nats) { return std::exp(loss_nats); }

// One training/evaluation measurement row. Losses are mean token NLL in
// nats; ppl and bpc are derived at reporting time.
struct MetricsRecord {
  int64_t step = 0;
  int64_t epoch = 0;
  std::string split;  // train | valid | test
  double loss = 0.0;
  double ppl = 0.0;
  double bpc = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;

  static MetricsRecord from_loss(int64_t step, int64_t epoch, std::string split, double loss,
                                 double lr, double wall_ms) {
    return {step, epoch, std::move(split), loss, to_ppl(loss), to_bpc(loss), lr, wall_ms};
  }
};

inline constexpr const char* kMetricsCsvHeader = "step,epoch,split,loss,ppl,bpc,lr,wall_ms";

// Floats rendered with 6 significant digits.
std::string format_csv_row(const MetricsRecord& record);

std::string metrics_to_csv(const std::vector<MetricsRecord>& records);

}  // namespace gatedformer
