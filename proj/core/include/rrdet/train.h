#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "rrdet/data.h"
#include "rrdet/decoder.h"
#include "rrdet/features.h"
#include "rrdet/matching.h"

namespace rrdet {

/// Backbone + decoder sharing a single parameter registry; the unit that
/// trains, checkpoints, and evaluates.
struct DetectionModel {
  ParamRegistry reg;
  std::unique_ptr<BackboneFPN> backbone;
  std::unique_ptr<Decoder> decoder;

  DetectionModel(const DecoderConfig& cfg, uint64_t seed, Dtype dt);

  /// image: (3, H, W) with dims divisible by 32; stages = -1 means all.
  std::vector<StagePrediction> forward(const Tensor& image, int64_t stages = -1) const;
};

/// Decoupled weight decay Adam. Moment state is float64 regardless of the
/// parameter dtype, so updates are bit-reproducible across runs.
class AdamW {
 public:
  struct Hyper {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 1e-4;
  };

  AdamW(ParamRegistry& reg, Hyper hyper);

  /// Scales all gradients so their global L2 norm is at most max_norm;
  /// returns the pre-clip norm. Missing gradients count as zero.
  double clip_gradients(double max_norm);
  void step(double lr);
  int64_t steps_taken() const { return t_; }

  const Hyper& hyper() const { return hyper_; }
  // checkpoint access: moments are stored in registry order
  std::vector<Tensor>& moments_m() { return m_; }
  std::vector<Tensor>& moments_v() { return v_; }
  const std::vector<Tensor>& moments_m() const { return m_; }
  const std::vector<Tensor>& moments_v() const { return v_; }
  void set_steps(int64_t t) { t_ = t; }

 private:
  ParamRegistry& reg_;
  Hyper hyper_;
  std::vector<Tensor> m_, v_;
  int64_t t_ = 0;
};

enum class DataSource { kSynthetic, kCocoJson };

struct TrainConfig {
  uint64_t seed = 1;
  int64_t iterations = 2000;
  int64_t batch_size = 8;
  double base_lr = 2.5e-5;
  double decay_factor = 0.1;
  std::vector<int64_t> decay_iters = {1600};
  double clip_norm = 1.0;
  AdamW::Hyper adamw;
  LossWeights loss;
  DecoderConfig decoder;
  Dtype dtype = Dtype::f32;
  DataSource source = DataSource::kSynthetic;
  std::string coco_path;
  int64_t checkpoint_every = 0;  // 0: only at the end
  int64_t eval_every = 0;        // 0: no mid-run evaluation
  int64_t eval_scenes = 32;
  std::string out_dir = ".";

  void validate() const;  // throws std::invalid_argument
  double lr_at(int64_t iter) const;
};

/// Raised when the training loss stops being finite; carries the iteration
/// and a readable component breakdown.
struct TrainDivergence : std::runtime_error {
  int64_t iteration;
  TrainDivergence(int64_t it, const std::string& detail)
      : std::runtime_error("non-finite loss at iteration " + std::to_string(it) + ": " + detail),
        iteration(it) {}
};

/// Identifying header stored inside every checkpoint.
struct RunManifest {
  int64_t version = 1;
  uint64_t seed = 0;
  int64_t iteration = 0;
  std::string sharing;     // "cascade" / "shared_all" / "first_independent"
  std::string config_json; // full TrainConfig snapshot
  std::string param_hash;  // FNV-1a 64 over parameter bytes, hex
  int64_t created_unix = 0;

  std::string to_json() const;
  static RunManifest from_json(const std::string& text);
};

std::string sharing_name(Sharing s);
Sharing sharing_from_name(const std::string& name);

std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);

/// Binary container: manifest plus named little-endian parameter blobs and,
/// optionally, optimizer moments. Loading into a model whose registry names
/// or shapes differ is an error.
void save_checkpoint(const std::string& path, const DetectionModel& model, const RunManifest& mf,
                     const AdamW* opt);
RunManifest load_checkpoint(const std::string& path, DetectionModel& model, AdamW* opt);
/// Reads only the manifest.
RunManifest peek_checkpoint(const std::string& path);

uint64_t param_hash(const DetectionModel& model);

/// Deterministic scene seed for one training slot or evaluation index; the
/// two index spaces never collide.
uint64_t train_scene_seed(uint64_t run_seed, int64_t iter, int64_t batch, int64_t slot);
uint64_t eval_scene_seed(uint64_t run_seed, int64_t index);

struct TrainResult {
  int64_t iterations_run = 0;
  double final_loss = 0.0;
  std::string checkpoint_path;
  std::string metrics_path;
  std::string curve_path;  // (iteration, AP) rows when eval_every > 0
};

/// Runs the schedule from scratch, appending one metrics row per iteration:
/// iteration, lr, total_loss, per-stage cls/l1/giou, wall_seconds.
TrainResult train(const TrainConfig& cfg);
/// Continues an interrupted run bit-exactly from its checkpoint.
TrainResult train_resume(const TrainConfig& cfg, const std::string& checkpoint_path);

}  // namespace rrdet
