#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rrdet/decoder.h"

namespace rrdet::audit {

struct AuditRow {
  std::string layer;
  std::string group;  // MSA / Dyn / Out / Head / Others
  bool extra;         // absent from the plain cascade architecture
  int64_t params;
};

/// Closed-form per-layer parameter counts for one decoder stage plus the
/// decoder-wide totals implied by the sharing policy. Counts are exact
/// integers; derived from layer shapes, never from an instantiated model.
struct ParamAudit {
  std::string sharing;
  int64_t stage_count = 0;
  int64_t weight_copies = 0;  // independent stage-weight sets under the policy
  std::vector<AuditRow> rows;
  int64_t stage_total = 0;           // all rows
  int64_t baseline_stage_total = 0;  // rows with extra == false
  int64_t proposals = 0;             // learned initial proposal features
  int64_t decoder_total = 0;         // weight_copies * stage_total + proposals

  int64_t group_total(const std::string& group) const;
};

ParamAudit count_params(const DecoderConfig& cfg);

/// Aligned human-readable table: per-layer rows, group subtotals, decoder
/// totals. Millions are rounded to one decimal next to the exact integers.
std::string param_table(const ParamAudit& a);

/// CSV with header layer,group,params_exact,params_millions.
std::string param_csv(const ParamAudit& a);

struct FlopRow {
  std::string name;
  int64_t macs;
};

/// Analytic multiply-accumulate counts for one forward pass of the decoder.
/// Resolution enters only as a report label: every term depends on the
/// proposal count and channel widths, not on the image size.
struct FlopEstimate {
  int64_t n_proposals = 0;
  int64_t image_size = 0;
  std::vector<FlopRow> per_stage;
  int64_t stage_total = 0;
  int64_t total = 0;  // stage_total * n_stages
};

FlopEstimate estimate_flops(const DecoderConfig& cfg, int64_t n_proposals, int64_t image_size);

std::string flop_table(const FlopEstimate& e);
std::string flop_csv(const FlopEstimate& e);

}  // namespace rrdet::audit
