#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "interagent/attention.hpp"
#include "interagent/representation.hpp"

namespace interagent::interdit {

using numerics::Graph;
using numerics::ParamStore;
using numerics::Value;

constexpr int kVocabSize = 64;      // token-hash buckets of the command embedder
constexpr int kHistoryTokens = 16;  // 12 strided + 4 most recent frames

/// Architecture hyperparameters. Everything that changes tensor shapes or the
/// wire interpretation of artifacts participates in digest().
struct ModelConfig {
  int joints = 5;
  int dof = 8;
  representation::ExteroKind extero = representation::ExteroKind::FIG;
  int d_model = 64;
  int blocks = 2;
  int heads = 4;
  int cond_layers = 2;  // per block, alternating history/other-agent targets
  int ffn_mult = 4;
  int horizon = 4;    // m, frames predicted per window
  int history = 364;  // h, raw FIFO depth
  int diffusion_steps = 50;
  attention::SparseConfig sparse;  // applies when extero == SIG

  Eigen::Index proprio_dim() const { return representation::Proprio::flat_size(joints); }
  Eigen::Index extero_dim() const {
    return representation::Extero::flat_size(extero, joints);
  }
  Eigen::Index action_dim() const { return dof; }
  Eigen::Index frame_dim() const { return proprio_dim() + extero_dim() + action_dim(); }
  Eigen::Index hist_frame_dim() const { return proprio_dim() + extero_dim(); }

  void validate() const;
  uint64_t digest() const;
};

/// Downsampled window of an agent's own past [x_p, x_e] frames.
struct HistoryContext {
  Mat frames;  // kHistoryTokens x hist_frame_dim, normalized

  /// Indices picked from a full h-deep buffer: 12 uniform strides over the
  /// first h-4 slots plus the 4 most recent.
  static std::vector<Eigen::Index> downsample_indices(Eigen::Index h);
  /// buffer rows ordered oldest -> newest, exactly h of them.
  static HistoryContext from_buffer(const Mat& buffer);
};

/// Hidden features of the three modality streams for one agent.
struct StreamStates {
  Value proprio, extero, action;  // each horizon x d_model
};

// ---- parameter table ------------------------------------------------------

struct ParamShape {
  std::string name;
  Eigen::Index rows = 0, cols = 0;
  bool zero_init = false;  // modulation projections start at zero
};

/// The full named-parameter layout for a config, without allocating anything.
std::vector<ParamShape> param_spec(const ModelConfig& cfg);

/// Allocate and deterministically initialize all parameters.
ParamStore init_params(const ModelConfig& cfg, uint64_t seed);

// ---- text conditioning ------------------------------------------------------

/// FNV-1a bucket of one lowercased token.
int token_bucket(const std::string& word);

/// 1 x kVocabSize row averaging the command's token buckets; the empty
/// command yields the all-zero row (the null condition).
Mat token_selection(const std::string& command);

/// Deterministic command embedding: selection row times the learned table.
Value text_embed(Graph& g, Value table, const std::string& command);

// ---- the network ------------------------------------------------------------

class InterDiT {
 public:
  InterDiT(ModelConfig cfg, ParamStore params);

  const ModelConfig& config() const { return cfg_; }
  const ParamStore& params() const { return params_; }
  ParamStore& params() { return params_; }

  /// Twin weight-shared denoiser. Windows are normalized m x frame_dim
  /// matrices; the returned pair predicts the clean windows in the same
  /// layout. Gumbel noise (SIG training) draws from rng when provided.
  std::pair<Value, Value> forward(Graph& g, Value window1, Value window2, int t,
                                  const std::string& command, bool mask_text,
                                  const HistoryContext& s1, const HistoryContext& s2,
                                  std::mt19937_64* gumbel_rng = nullptr) const;

  /// Input projections only: one agent's window to its three streams.
  /// Exposed for the stream-separation checks.
  StreamStates encode_streams(Graph& g, Value window,
                              std::mt19937_64* gumbel_rng = nullptr) const;

  /// Condition row: timestep embedding plus (possibly masked) text embedding.
  Value condition(Graph& g, int t, const std::string& command, bool mask_text) const;

 private:
  ModelConfig cfg_;
  ParamStore params_;
};

// ---- checkpoints ------------------------------------------------------------

struct Checkpoint {
  ParamStore params;
  uint64_t config_digest = 0;
  uint64_t step = 0;
};

/// Little-endian binary table: magic "IDTC", version, config digest, step,
/// then name -> shape -> float32 payload per parameter.
void save_checkpoint(const std::string& path, const ParamStore& params,
                     uint64_t config_digest, uint64_t step);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace interagent::interdit
