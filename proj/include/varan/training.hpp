#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "varan/config.hpp"
#include "varan/model.hpp"
#include "varan/synthdata.hpp"

namespace varan {

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay

struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::int64_t step = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
};

AdamState make_adam(const OptimConfig& optim);

class NonFiniteGradientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One bias-corrected update of every parameter that has a gradient:
///   p <- p - lr * wd * p
///   p <- p - lr * m_hat / (sqrt(v_hat) + eps)
/// Gradients are checked before anything moves; a non-finite entry throws
/// NonFiniteGradientError naming the parameter and leaves params and state
/// untouched.
void adam_step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads, AdamState& state);

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  ModelState state;
  nlohmann::ordered_json config;  // RunConfig echo
  std::int64_t step = 0;
  double best_val_metric = 0.0;   // validation accuracy
};

class KindMismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Also throws KindMismatchError when the stored kind differs.
Checkpoint load_checkpoint(const std::filesystem::path& path, ModelKind expected);

// ---------------------------------------------------------------------------
// Training and evaluation

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EvalResult {
  EvalMetrics metrics;
  Prediction prediction;  // whole split, in split order
};

EvalResult evaluate(const RunConfig& config, const ModelState& state, const SplitData& split,
                    std::size_t chunk = 256);

struct TrainResult {
  Checkpoint checkpoint;  // parameters with the best validation accuracy
  std::vector<nlohmann::ordered_json> metrics;
  EvalMetrics test;
};

/// Epoch loop with a validation pass at step 0 and after every epoch; the
/// earliest best validation accuracy wins. The batch order of epoch e comes
/// from derive_seed(seed, kBatchOrderStream + e). Every metric record is
/// also written to `metrics_out` as one JSON line when given.
TrainResult train(const RunConfig& config, const SynthDataset& data, ModelKind kind,
                  std::ostream* metrics_out = nullptr);

/// Names in `state.params` whose gradient on the given batch is all zeros.
std::vector<std::string> zero_gradient_params(const RunConfig& config, const ModelState& state, const Tensor& stack,
                                              std::span<const Label> labels);

inline constexpr std::uint64_t kInitStream = 1;
inline constexpr std::uint64_t kBatchOrderStream = 1000;

/// Wide analysis export: `sample_id,true_regime,argmax_layer,w_1..w_n`
/// (1-based layers). Needs a varan model.
void export_weight_analysis(const RunConfig& config, const Checkpoint& checkpoint, const SplitData& split,
                            const std::filesystem::path& out);

}  // namespace varan
