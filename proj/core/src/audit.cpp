#include "rrdet/audit.h"

#include <cmath>
#include <iomanip>
#include <sstream>

namespace rrdet::audit {

namespace {

int64_t linear(int64_t in, int64_t out) { return in * out + out; }
int64_t layer_norm(int64_t width) { return 2 * width; }

std::string millions(int64_t v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << v / 1e6;
  return os.str();
}

int64_t copies_for(Sharing s, int64_t n_stages) {
  switch (s) {
    case Sharing::kCascade: return n_stages;
    case Sharing::kSharedAll: return 1;
    case Sharing::kFirstIndependent: return 2;
  }
  throw std::invalid_argument("unknown sharing policy");
}

}  // namespace

int64_t ParamAudit::group_total(const std::string& group) const {
  int64_t total = 0;
  for (const auto& r : rows)
    if (r.group == group) total += r.params;
  return total;
}

ParamAudit count_params(const DecoderConfig& cfg) {
  cfg.validate();
  const int64_t c = cfg.c, d = cfg.d, f = cfg.ffn_dim, k = cfg.n_classes;

  ParamAudit a;
  a.stage_count = cfg.n_stages;
  a.weight_copies = copies_for(cfg.sharing, cfg.n_stages);
  switch (cfg.sharing) {
    case Sharing::kCascade: a.sharing = "cascade"; break;
    case Sharing::kSharedAll: a.sharing = "shared_all"; break;
    case Sharing::kFirstIndependent: a.sharing = "first_independent"; break;
  }

  a.rows.push_back({"self_attention", "MSA", false, 4 * linear(c, c)});
  a.rows.push_back({"dyn", "Dyn", false, linear(c, 2 * c * d)});
  a.rows.push_back({"out", "Out", false, linear(49 * c, c)});
  a.rows.push_back({"class_head", "Head", false, linear(c, k)});
  a.rows.push_back({"box_head", "Head", false, 2 * linear(c, c) + linear(c, 4)});
  a.rows.push_back({"ffn", "Others", false, linear(c, f) + linear(f, c)});
  // attention, conv (two widths), and ffn normalization layers
  a.rows.push_back({"norms", "Others", false, 3 * layer_norm(c) + layer_norm(d)});
  if (cfg.use_box_pe) {
    a.rows.push_back({"box_pe", "Others", true, linear(2 * c, c) + linear(c, c)});
    a.rows.push_back({"geometry_heads", "Others", true,
                      2 * linear(c, c) + linear(c, c / 4) + linear(c / 4, 2)});
  }
  if (cfg.use_centerness) {
    int64_t params = 0;
    switch (cfg.centerness_variant) {
      case pe::MaskVariant::kStatic: params = 0; break;
      case pe::MaskVariant::kLearnable: params = 49; break;
      case pe::MaskVariant::kAdjust: params = linear(c, 2); break;
    }
    a.rows.push_back({"centerness", "Others", true, params});
  }

  for (const auto& r : a.rows) {
    a.stage_total += r.params;
    if (!r.extra) a.baseline_stage_total += r.params;
  }
  a.proposals = cfg.n_proposals * c;
  a.decoder_total = a.weight_copies * a.stage_total + a.proposals;
  return a;
}

std::string param_table(const ParamAudit& a) {
  std::ostringstream os;
  os << "sharing: " << a.sharing << "   stages: " << a.stage_count
     << "   weight copies: " << a.weight_copies << "\n\n";
  os << std::left << std::setw(18) << "layer" << std::setw(8) << "group" << std::right
     << std::setw(14) << "params" << std::setw(8) << "M" << "\n";
  os << std::string(48, '-') << "\n";
  for (const auto& r : a.rows) {
    os << std::left << std::setw(18) << (r.extra ? "+ " + r.layer : r.layer) << std::setw(8)
       << r.group << std::right << std::setw(14) << r.params << std::setw(8)
       << millions(r.params) << "\n";
  }
  os << std::string(48, '-') << "\n";
  for (const char* g : {"MSA", "Dyn", "Out", "Head", "Others"}) {
    const int64_t t = a.group_total(g);
    os << std::left << std::setw(26) << (std::string("group ") + g) << std::right << std::setw(14)
       << t << std::setw(8) << millions(t) << "\n";
  }
  os << std::string(48, '-') << "\n";
  os << std::left << std::setw(26) << "stage total" << std::right << std::setw(14)
     << a.stage_total << std::setw(8) << millions(a.stage_total) << "\n";
  os << std::left << std::setw(26) << "stage total (baseline)" << std::right << std::setw(14)
     << a.baseline_stage_total << std::setw(8) << millions(a.baseline_stage_total) << "\n";
  os << std::left << std::setw(26) << "proposal features" << std::right << std::setw(14)
     << a.proposals << std::setw(8) << millions(a.proposals) << "\n";
  os << std::left << std::setw(26) << "decoder total" << std::right << std::setw(14)
     << a.decoder_total << std::setw(8) << millions(a.decoder_total) << "\n";
  return os.str();
}

std::string param_csv(const ParamAudit& a) {
  std::ostringstream os;
  os << "layer,group,params_exact,params_millions\n";
  for (const auto& r : a.rows)
    os << r.layer << ',' << r.group << ',' << r.params << ',' << millions(r.params) << "\n";
  os << "stage_total,," << a.stage_total << ',' << millions(a.stage_total) << "\n";
  os << "stage_total_baseline,," << a.baseline_stage_total << ','
     << millions(a.baseline_stage_total) << "\n";
  os << "proposal_features,," << a.proposals << ',' << millions(a.proposals) << "\n";
  os << "decoder_total,," << a.decoder_total << ',' << millions(a.decoder_total) << "\n";
  return os.str();
}

FlopEstimate estimate_flops(const DecoderConfig& cfg, int64_t n_proposals, int64_t image_size) {
  cfg.validate();
  if (n_proposals < 0) throw std::invalid_argument("n_proposals must be nonnegative");
  if (image_size < 1) throw std::invalid_argument("image_size must be positive");
  const int64_t n = n_proposals, c = cfg.c, d = cfg.d, f = cfg.ffn_dim;
  const int64_t depth = cfg.in_stage_depth;

  FlopEstimate e;
  e.n_proposals = n;
  e.image_size = image_size;
  e.per_stage.push_back({"self_attention", 4 * n * c * c + 2 * n * n * c});
  e.per_stage.push_back({"dyn", depth * (2 * n * c * c * d)});
  e.per_stage.push_back({"dynamic_convs", depth * (n * 49 * (c * d + d * c))});
  e.per_stage.push_back({"out", depth * (n * 49 * c * c)});
  e.per_stage.push_back({"ffn", 2 * n * c * f});
  for (const auto& r : e.per_stage) e.stage_total += r.macs;
  e.total = e.stage_total * cfg.n_stages;
  return e;
}

std::string flop_table(const FlopEstimate& e) {
  std::ostringstream os;
  os << "proposals: " << e.n_proposals << "   image size: " << e.image_size << "\n\n";
  os << std::left << std::setw(18) << "component" << std::right << std::setw(16) << "MACs/stage"
     << "\n";
  os << std::string(34, '-') << "\n";
  for (const auto& r : e.per_stage)
    os << std::left << std::setw(18) << r.name << std::right << std::setw(16) << r.macs << "\n";
  os << std::string(34, '-') << "\n";
  os << std::left << std::setw(18) << "stage total" << std::right << std::setw(16)
     << e.stage_total << "\n";
  os << std::left << std::setw(18) << "forward total" << std::right << std::setw(16) << e.total
     << "\n";
  return os.str();
}

std::string flop_csv(const FlopEstimate& e) {
  std::ostringstream os;
  os << "component,macs_per_stage\n";
  for (const auto& r : e.per_stage) os << r.name << ',' << r.macs << "\n";
  os << "stage_total," << e.stage_total << "\n";
  os << "forward_total," << e.total << "\n";
  return os.str();
}

}  // namespace rrdet::audit
