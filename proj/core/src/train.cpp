#include "rrdet/train.h"

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "rrdet/eval.h"

namespace rrdet {

using nlohmann::json;

DetectionModel::DetectionModel(const DecoderConfig& cfg, uint64_t seed, Dtype dt) : reg(dt) {
  cfg.validate();
  Rng root(seed);
  backbone = std::make_unique<BackboneFPN>(reg, "backbone", cfg.c, root);
  decoder = std::make_unique<Decoder>(reg, cfg, root);
}

std::vector<StagePrediction> DetectionModel::forward(const Tensor& image, int64_t stages) const {
  const auto& s = image.shape();
  if (s.size() != 3 || s[0] != 3) throw std::invalid_argument("forward: image must be (3, H, W)");
  ad::Var x = ad::reshape(ad::constant(image), {1, 3, s[1], s[2]});
  return decoder->run(backbone->forward(x), stages);
}

AdamW::AdamW(ParamRegistry& reg, Hyper hyper) : reg_(reg), hyper_(hyper) {
  for (const auto& [name, v] : reg.all()) {
    m_.push_back(Tensor::zeros(v.shape(), Dtype::f64));
    v_.push_back(Tensor::zeros(v.shape(), Dtype::f64));
  }
}

double AdamW::clip_gradients(double max_norm) {
  double sq = 0.0;
  for (const auto& [name, p] : reg_.all()) {
    const Tensor& g = p.node()->grad;
    if (!g.defined()) continue;
    for (int64_t i = 0; i < g.numel(); ++i) {
      const double gi = g.get(i);
      sq += gi * gi;
    }
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (const auto& [name, p] : reg_.all()) {
      Tensor& g = p.node()->grad;
      if (!g.defined()) continue;
      for (int64_t i = 0; i < g.numel(); ++i) g.set(i, g.get(i) * scale);
    }
  }
  return norm;
}

void AdamW::step(double lr) {
  ++t_;
  const double b1 = hyper_.beta1, b2 = hyper_.beta2;
  const double corr1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double corr2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const auto& params = reg_.all();
  for (size_t idx = 0; idx < params.size(); ++idx) {
    const ad::Var& p = params[idx].second;
    Tensor& value = p.node()->value;
    const Tensor& grad = p.node()->grad;
    Tensor& m = m_[idx];
    Tensor& v = v_[idx];
    for (int64_t i = 0; i < value.numel(); ++i) {
      const double g = grad.defined() ? grad.get(i) : 0.0;
      const double mi = b1 * m.get(i) + (1.0 - b1) * g;
      const double vi = b2 * v.get(i) + (1.0 - b2) * g * g;
      m.set(i, mi);
      v.set(i, vi);
      double x = value.get(i) * (1.0 - lr * hyper_.weight_decay);
      x -= lr * (mi / corr1) / (std::sqrt(vi / corr2) + hyper_.eps);
      value.set(i, x);
    }
  }
}

void TrainConfig::validate() const {
  decoder.validate();
  if (iterations < 1) throw std::invalid_argument("iterations must be positive");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  if (base_lr < 0) throw std::invalid_argument("base_lr must be nonnegative");
  if (clip_norm <= 0) throw std::invalid_argument("clip_norm must be positive");
  for (int64_t d : decay_iters)
    if (d <= 0 || d >= iterations)
      throw std::invalid_argument("decay iterations must lie inside (0, iterations)");
  if (eval_every < 0 || checkpoint_every < 0)
    throw std::invalid_argument("intervals must be nonnegative");
  if (eval_every > 0 && eval_scenes < 1)
    throw std::invalid_argument("eval_scenes must be positive when eval_every is set");
  if (source == DataSource::kCocoJson && coco_path.empty())
    throw std::invalid_argument("coco_path required for the coco_json source");
}

double TrainConfig::lr_at(int64_t iter) const {
  double lr = base_lr;
  for (int64_t d : decay_iters)
    if (iter >= d) lr *= decay_factor;
  return lr;
}

std::string sharing_name(Sharing s) {
  switch (s) {
    case Sharing::kCascade: return "cascade";
    case Sharing::kSharedAll: return "shared_all";
    case Sharing::kFirstIndependent: return "first_independent";
  }
  throw std::invalid_argument("unknown sharing policy");
}

Sharing sharing_from_name(const std::string& name) {
  if (name == "cascade") return Sharing::kCascade;
  if (name == "shared_all") return Sharing::kSharedAll;
  if (name == "first_independent") return Sharing::kFirstIndependent;
  throw std::invalid_argument("unknown sharing policy: " + name);
}

namespace {

const char* variant_name(pe::MaskVariant v) {
  switch (v) {
    case pe::MaskVariant::kStatic: return "static";
    case pe::MaskVariant::kLearnable: return "learnable";
    case pe::MaskVariant::kAdjust: return "adjust";
  }
  throw std::invalid_argument("unknown mask variant");
}

pe::MaskVariant variant_from_name(const std::string& name) {
  if (name == "static") return pe::MaskVariant::kStatic;
  if (name == "learnable") return pe::MaskVariant::kLearnable;
  if (name == "adjust") return pe::MaskVariant::kAdjust;
  throw std::invalid_argument("unknown mask variant: " + name);
}

json decoder_to_json(const DecoderConfig& d) {
  return json{{"c", d.c},
              {"d", d.d},
              {"n_stages", d.n_stages},
              {"n_heads", d.n_heads},
              {"ffn_dim", d.ffn_dim},
              {"in_stage_depth", d.in_stage_depth},
              {"sharing", sharing_name(d.sharing)},
              {"use_box_pe", d.use_box_pe},
              {"use_centerness", d.use_centerness},
              {"centerness_variant", variant_name(d.centerness_variant)},
              {"n_classes", d.n_classes},
              {"n_proposals", d.n_proposals},
              {"detach_boxes", d.detach_boxes}};
}

DecoderConfig decoder_from_json(const json& j) {
  DecoderConfig d;
  d.c = j.at("c").get<int64_t>();
  d.d = j.at("d").get<int64_t>();
  d.n_stages = j.at("n_stages").get<int64_t>();
  d.n_heads = j.at("n_heads").get<int64_t>();
  d.ffn_dim = j.at("ffn_dim").get<int64_t>();
  d.in_stage_depth = j.at("in_stage_depth").get<int64_t>();
  d.sharing = sharing_from_name(j.at("sharing").get<std::string>());
  d.use_box_pe = j.at("use_box_pe").get<bool>();
  d.use_centerness = j.at("use_centerness").get<bool>();
  d.centerness_variant = variant_from_name(j.at("centerness_variant").get<std::string>());
  d.n_classes = j.at("n_classes").get<int64_t>();
  d.n_proposals = j.at("n_proposals").get<int64_t>();
  d.detach_boxes = j.at("detach_boxes").get<bool>();
  return d;
}

}  // namespace

std::string train_config_to_json(const TrainConfig& cfg) {
  json j{{"seed", cfg.seed},
         {"iterations", cfg.iterations},
         {"batch_size", cfg.batch_size},
         {"base_lr", cfg.base_lr},
         {"decay_factor", cfg.decay_factor},
         {"decay_iters", cfg.decay_iters},
         {"clip_norm", cfg.clip_norm},
         {"beta1", cfg.adamw.beta1},
         {"beta2", cfg.adamw.beta2},
         {"adam_eps", cfg.adamw.eps},
         {"weight_decay", cfg.adamw.weight_decay},
         {"lambda_cls", cfg.loss.lambda_cls},
         {"lambda_l1", cfg.loss.lambda_l1},
         {"lambda_giou", cfg.loss.lambda_giou},
         {"focal_alpha", cfg.loss.focal_alpha},
         {"focal_gamma", cfg.loss.focal_gamma},
         {"decoder", decoder_to_json(cfg.decoder)},
         {"dtype", cfg.dtype == Dtype::f64 ? "f64" : "f32"},
         {"source", cfg.source == DataSource::kSynthetic ? "synthetic" : "coco_json"},
         {"coco_path", cfg.coco_path},
         {"checkpoint_every", cfg.checkpoint_every},
         {"eval_every", cfg.eval_every},
         {"eval_scenes", cfg.eval_scenes},
         {"out_dir", cfg.out_dir}};
  return j.dump();
}

TrainConfig train_config_from_json(const std::string& text) {
  const json j = json::parse(text);
  TrainConfig cfg;
  cfg.seed = j.at("seed").get<uint64_t>();
  cfg.iterations = j.at("iterations").get<int64_t>();
  cfg.batch_size = j.at("batch_size").get<int64_t>();
  cfg.base_lr = j.at("base_lr").get<double>();
  cfg.decay_factor = j.at("decay_factor").get<double>();
  cfg.decay_iters = j.at("decay_iters").get<std::vector<int64_t>>();
  cfg.clip_norm = j.at("clip_norm").get<double>();
  cfg.adamw.beta1 = j.at("beta1").get<double>();
  cfg.adamw.beta2 = j.at("beta2").get<double>();
  cfg.adamw.eps = j.at("adam_eps").get<double>();
  cfg.adamw.weight_decay = j.at("weight_decay").get<double>();
  cfg.loss.lambda_cls = j.at("lambda_cls").get<double>();
  cfg.loss.lambda_l1 = j.at("lambda_l1").get<double>();
  cfg.loss.lambda_giou = j.at("lambda_giou").get<double>();
  cfg.loss.focal_alpha = j.at("focal_alpha").get<double>();
  cfg.loss.focal_gamma = j.at("focal_gamma").get<double>();
  cfg.decoder = decoder_from_json(j.at("decoder"));
  cfg.dtype = j.at("dtype").get<std::string>() == "f64" ? Dtype::f64 : Dtype::f32;
  cfg.source =
      j.at("source").get<std::string>() == "coco_json" ? DataSource::kCocoJson : DataSource::kSynthetic;
  cfg.coco_path = j.at("coco_path").get<std::string>();
  cfg.checkpoint_every = j.at("checkpoint_every").get<int64_t>();
  cfg.eval_every = j.at("eval_every").get<int64_t>();
  cfg.eval_scenes = j.at("eval_scenes").get<int64_t>();
  cfg.out_dir = j.at("out_dir").get<std::string>();
  return cfg;
}

std::string RunManifest::to_json() const {
  json j{{"version", version},       {"seed", seed},
         {"iteration", iteration},   {"sharing", sharing},
         {"config", config_json},    {"param_hash", param_hash},
         {"created_unix", created_unix}};
  return j.dump();
}

RunManifest RunManifest::from_json(const std::string& text) {
  const json j = json::parse(text);
  RunManifest mf;
  mf.version = j.at("version").get<int64_t>();
  mf.seed = j.at("seed").get<uint64_t>();
  mf.iteration = j.at("iteration").get<int64_t>();
  mf.sharing = j.at("sharing").get<std::string>();
  mf.config_json = j.at("config").get<std::string>();
  mf.param_hash = j.at("param_hash").get<std::string>();
  mf.created_unix = j.at("created_unix").get<int64_t>();
  return mf;
}

namespace {

constexpr char kMagic[8] = {'R', 'R', 'D', 'K', 'P', 'T', '0', '1'};

uint64_t fnv1a(uint64_t h, const unsigned char* bytes, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  return h;
}

size_t tensor_bytes(const Tensor& t) {
  return static_cast<size_t>(t.numel()) * (t.dtype() == Dtype::f64 ? 8 : 4);
}

const unsigned char* tensor_data(const Tensor& t) {
  return t.dtype() == Dtype::f64
             ? reinterpret_cast<const unsigned char*>(t.data<double>())
             : reinterpret_cast<const unsigned char*>(t.data<float>());
}

unsigned char* tensor_data_mut(Tensor& t) {
  return t.dtype() == Dtype::f64 ? reinterpret_cast<unsigned char*>(t.data<double>())
                                 : reinterpret_cast<unsigned char*>(t.data<float>());
}

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

std::string hash_hex(uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace

uint64_t param_hash(const DetectionModel& model) {
  uint64_t h = 1469598103934665603ull;
  for (const auto& [name, p] : model.reg.all()) {
    h = fnv1a(h, reinterpret_cast<const unsigned char*>(name.data()), name.size());
    h = fnv1a(h, tensor_data(p.node()->value), tensor_bytes(p.node()->value));
  }
  return h;
}

void save_checkpoint(const std::string& path, const DetectionModel& model, const RunManifest& mf,
                     const AdamW* opt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  out.write(kMagic, sizeof(kMagic));
  const std::string manifest = mf.to_json();
  write_pod<uint64_t>(out, manifest.size());
  out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));

  const auto& params = model.reg.all();
  write_pod<uint64_t>(out, params.size());
  for (const auto& [name, p] : params) {
    const Tensor& t = p.node()->value;
    write_pod<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<uint8_t>(out, t.dtype() == Dtype::f64 ? 1 : 0);
    write_pod<uint32_t>(out, static_cast<uint32_t>(t.shape().size()));
    for (int64_t e : t.shape()) write_pod<uint64_t>(out, static_cast<uint64_t>(e));
    write_pod<uint64_t>(out, tensor_bytes(t));
    out.write(reinterpret_cast<const char*>(tensor_data(t)),
              static_cast<std::streamsize>(tensor_bytes(t)));
  }

  write_pod<uint8_t>(out, opt ? 1 : 0);
  if (opt) {
    write_pod<uint64_t>(out, static_cast<uint64_t>(opt->steps_taken()));
    for (size_t i = 0; i < params.size(); ++i) {
      for (const Tensor* t : {&opt->moments_m()[i], &opt->moments_v()[i]}) {
        write_pod<uint64_t>(out, tensor_bytes(*t));
        out.write(reinterpret_cast<const char*>(tensor_data(*t)),
                  static_cast<std::streamsize>(tensor_bytes(*t)));
      }
    }
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

RunManifest peek_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const uint64_t len = read_pod<uint64_t>(in);
  std::string manifest(len, '\0');
  in.read(manifest.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("checkpoint: truncated manifest in " + path);
  return RunManifest::from_json(manifest);
}

RunManifest load_checkpoint(const std::string& path, DetectionModel& model, AdamW* opt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const uint64_t mlen = read_pod<uint64_t>(in);
  std::string manifest(mlen, '\0');
  in.read(manifest.data(), static_cast<std::streamsize>(mlen));
  if (!in) throw std::runtime_error("checkpoint: truncated manifest");
  RunManifest mf = RunManifest::from_json(manifest);

  const auto& params = model.reg.all();
  const uint64_t n = read_pod<uint64_t>(in);
  if (n != params.size())
    throw std::runtime_error("checkpoint: parameter count mismatch (file " + std::to_string(n) +
                             ", model " + std::to_string(params.size()) + ")");
  for (const auto& [name, p] : params) {
    const uint32_t nlen = read_pod<uint32_t>(in);
    std::string fname(nlen, '\0');
    in.read(fname.data(), nlen);
    if (fname != name)
      throw std::runtime_error("checkpoint: parameter order mismatch at " + name + " vs " + fname);
    const uint8_t dt = read_pod<uint8_t>(in);
    Tensor& t = p.node()->value;
    if ((dt == 1) != (t.dtype() == Dtype::f64))
      throw std::runtime_error("checkpoint: dtype mismatch at " + name);
    const uint32_t rank = read_pod<uint32_t>(in);
    Shape shape(rank);
    for (uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int64_t>(read_pod<uint64_t>(in));
    if (shape != t.shape()) throw std::runtime_error("checkpoint: shape mismatch at " + name);
    const uint64_t nbytes = read_pod<uint64_t>(in);
    if (nbytes != tensor_bytes(t)) throw std::runtime_error("checkpoint: size mismatch at " + name);
    in.read(reinterpret_cast<char*>(tensor_data_mut(t)), static_cast<std::streamsize>(nbytes));
    if (!in) throw std::runtime_error("checkpoint: truncated data at " + name);
  }

  const uint8_t has_opt = read_pod<uint8_t>(in);
  if (opt) {
    if (!has_opt) throw std::runtime_error("checkpoint: no optimizer state in " + path);
    opt->set_steps(static_cast<int64_t>(read_pod<uint64_t>(in)));
    for (size_t i = 0; i < params.size(); ++i) {
      for (Tensor* t : {&opt->moments_m()[i], &opt->moments_v()[i]}) {
        const uint64_t nbytes = read_pod<uint64_t>(in);
        if (nbytes != tensor_bytes(*t))
          throw std::runtime_error("checkpoint: optimizer blob size mismatch");
        in.read(reinterpret_cast<char*>(tensor_data_mut(*t)),
                static_cast<std::streamsize>(nbytes));
        if (!in) throw std::runtime_error("checkpoint: truncated optimizer state");
      }
    }
  }

  const std::string expect = mf.param_hash;
  const std::string got = hash_hex(param_hash(model));
  if (!expect.empty() && expect != got)
    throw std::runtime_error("checkpoint: parameter hash mismatch (file " + expect + ", loaded " +
                             got + ")");
  return mf;
}

uint64_t train_scene_seed(uint64_t run_seed, int64_t iter, int64_t batch, int64_t slot) {
  return run_seed * 0x100000000ull + static_cast<uint64_t>(iter * batch + slot);
}

uint64_t eval_scene_seed(uint64_t run_seed, int64_t index) {
  return run_seed * 0x100000000ull + 0x80000000ull + static_cast<uint64_t>(index);
}

namespace {

std::string fmt_g(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

RunManifest make_manifest(const TrainConfig& cfg, const DetectionModel& model, int64_t iteration) {
  RunManifest mf;
  mf.seed = cfg.seed;
  mf.iteration = iteration;
  mf.sharing = sharing_name(cfg.decoder.sharing);
  mf.config_json = train_config_to_json(cfg);
  mf.param_hash = hash_hex(param_hash(model));
  mf.created_unix = static_cast<int64_t>(
      std::chrono::duration_cast<std::chrono::seconds>(
          std::chrono::system_clock::now().time_since_epoch())
          .count());
  return mf;
}

TrainResult run_training(const TrainConfig& cfg, DetectionModel& model, AdamW& opt,
                         int64_t start_iter) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  const std::string metrics_path = cfg.out_dir + "/metrics.csv";
  const std::string curve_path = cfg.out_dir + "/convergence.csv";
  const std::string ckpt_path = cfg.out_dir + "/checkpoint.rrdet";
  const int64_t n_stages = cfg.decoder.n_stages;

  std::ofstream metrics(metrics_path, start_iter == 0 ? std::ios::trunc : std::ios::app);
  if (!metrics) throw std::runtime_error("cannot write " + metrics_path);
  if (start_iter == 0) {
    metrics << "iteration,lr,total_loss";
    for (int64_t t = 0; t < n_stages; ++t)
      metrics << ",stage" << t << "_cls,stage" << t << "_l1,stage" << t << "_giou";
    metrics << ",wall_seconds\n";
  }
  std::ofstream curve;
  std::vector<SyntheticScene> eval_set;
  if (cfg.eval_every > 0) {
    curve.open(curve_path, start_iter == 0 ? std::ios::trunc : std::ios::app);
    if (start_iter == 0) curve << "iteration,ap\n";
    eval_set.reserve(cfg.eval_scenes);
    for (int64_t i = 0; i < cfg.eval_scenes; ++i)
      eval_set.push_back(generate_synthetic_scene(eval_scene_seed(cfg.seed, i), cfg.dtype));
  }

  const auto t0 = std::chrono::steady_clock::now();
  double last_loss = 0.0;
  for (int64_t iter = start_iter; iter < cfg.iterations; ++iter) {
    const double lr = cfg.lr_at(iter);
    ad::Var batch_loss;
    std::vector<double> comp(static_cast<size_t>(n_stages) * 3, 0.0);
    for (int64_t slot = 0; slot < cfg.batch_size; ++slot) {
      const SyntheticScene scene =
          generate_synthetic_scene(train_scene_seed(cfg.seed, iter, cfg.batch_size, slot),
                                   cfg.dtype);
      const std::vector<StagePrediction> preds = model.forward(scene.image);
      const LossBreakdown lb = set_criterion(preds, scene.gt, cfg.loss);
      batch_loss = slot == 0 ? lb.total : ad::add(batch_loss, lb.total);
      for (int64_t t = 0; t < n_stages; ++t) {
        comp[t * 3 + 0] += lb.stages[t].cls.value().get(0) / cfg.batch_size;
        comp[t * 3 + 1] += lb.stages[t].l1.value().get(0) / cfg.batch_size;
        comp[t * 3 + 2] += lb.stages[t].giou.value().get(0) / cfg.batch_size;
      }
    }
    batch_loss = ad::mul_scalar(batch_loss, 1.0 / static_cast<double>(cfg.batch_size));
    last_loss = batch_loss.value().get(0);
    if (!std::isfinite(last_loss)) {
      std::string detail;
      for (int64_t t = 0; t < n_stages; ++t)
        detail += "stage" + std::to_string(t) + " cls=" + fmt_g(comp[t * 3]) +
                  " l1=" + fmt_g(comp[t * 3 + 1]) + " giou=" + fmt_g(comp[t * 3 + 2]) + "; ";
      throw TrainDivergence(iter, detail);
    }

    ad::backward(batch_loss);
    opt.clip_gradients(cfg.clip_norm);
    opt.step(lr);

    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    metrics << iter << ',' << fmt_g(lr) << ',' << fmt_g(last_loss);
    for (double v : comp) metrics << ',' << fmt_g(v);
    metrics << ',' << std::fixed << std::setprecision(3) << wall << '\n';
    metrics.unsetf(std::ios::fixed);
    metrics.flush();

    const bool last = iter + 1 == cfg.iterations;
    if (cfg.eval_every > 0 && ((iter + 1) % cfg.eval_every == 0 || last)) {
      const APReport rep = evaluate_scenes(model, eval_set);
      curve << (iter + 1) << ',' << fmt_g(rep.ap) << '\n';
      curve.flush();
    }
    if (last || (cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0))
      save_checkpoint(ckpt_path, model, make_manifest(cfg, model, iter + 1), &opt);
  }

  TrainResult res;
  res.iterations_run = cfg.iterations - start_iter;
  res.final_loss = last_loss;
  res.checkpoint_path = ckpt_path;
  res.metrics_path = metrics_path;
  if (cfg.eval_every > 0) res.curve_path = curve_path;
  return res;
}

}  // namespace

TrainResult train(const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.source == DataSource::kCocoJson)
    throw std::invalid_argument(
        "training reads only the synthetic source; the coco_json source is ingestion-only");
  DetectionModel model(cfg.decoder, cfg.seed, cfg.dtype);
  AdamW opt(model.reg, cfg.adamw);
  return run_training(cfg, model, opt, 0);
}

TrainResult train_resume(const TrainConfig& cfg, const std::string& checkpoint_path) {
  cfg.validate();
  DetectionModel model(cfg.decoder, cfg.seed, cfg.dtype);
  AdamW opt(model.reg, cfg.adamw);
  const RunManifest mf = load_checkpoint(checkpoint_path, model, &opt);
  if (mf.iteration >= cfg.iterations)
    throw std::invalid_argument("checkpoint is already at or past the configured iterations");
  return run_training(cfg, model, opt, mf.iteration);
}

}  // namespace rrdet
