#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "interagent/interdit.hpp"
#include "interagent/simworld.hpp"

namespace interagent::diffusion {

using interdit::HistoryContext;
using interdit::InterDiT;
using numerics::Graph;
using numerics::ParamStore;
using numerics::Value;
using representation::NormStats;

// ---- noise schedule -------------------------------------------------------

enum class ScheduleKind { kCosine, kLinear };

struct NoiseSchedule {
  int steps = 0;              // N
  Eigen::VectorXd beta;       // [0..N], beta[0] = 0
  Eigen::VectorXd alpha;      // 1 - beta
  Eigen::VectorXd alpha_bar;  // cumulative product, alpha_bar[0] = 1
};

NoiseSchedule make_schedule(int steps, ScheduleKind kind = ScheduleKind::kCosine);

/// X_t = sqrt(alpha_bar_t) X0 + sqrt(1 - alpha_bar_t) eps
Mat q_sample(const Mat& x0, const NoiseSchedule& sched, int t, const Mat& eps);

// ---- denoiser interface -----------------------------------------------------

/// Graph-level twin denoiser. The production implementation wraps
/// InterDiT::forward; tests plug in oracles.
using Denoiser = std::function<std::pair<Value, Value>(
    Graph&, Value x1t, Value x2t, int t, const std::string& command, bool mask_text,
    const HistoryContext& s1, const HistoryContext& s2)>;

Denoiser make_denoiser(const InterDiT& model, std::mt19937_64* gumbel_rng = nullptr);

// ---- training ---------------------------------------------------------------

struct Sample {
  Mat x1, x2;  // clean normalized windows, m x frame_dim
  HistoryContext s1, s2;
  std::string command;
};

struct LossResult {
  double loss = 0.0;
  std::map<std::string, Mat> grads;  // mean over the batch, keyed by leaf name
};

/// Eq-style behavior-cloning loss: mean over the batch of the per-agent-mean
/// Frobenius norm of (X0 - denoise(q_sample(X0, t))), with the command
/// masked to the null embedding at cfg_mask_rate per sample. Per-sample draws
/// come from streams derived from (seed, sample index), so the result is
/// independent of evaluation order.
double training_loss(const Denoiser& denoiser, const std::vector<Sample>& batch,
                     const NoiseSchedule& sched, uint64_t seed, double cfg_mask_rate,
                     LossResult* grads_out = nullptr,
                     std::vector<uint8_t>* mask_log = nullptr, int threads = 1);

// ---- optimizer --------------------------------------------------------------

struct OptimizerConfig {
  double peak_lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 2e-5;
  double eps = 1e-8;
  int warmup_steps = 100;
  int total_steps = 2000;
};

/// Decoupled-weight-decay adaptive optimizer with warmup + cosine decay.
/// Parameters and moments are rounded to float32 after every step so the
/// in-memory training state always equals its checkpointed image; resuming is
/// therefore bitwise-exact.
class AdamW {
 public:
  AdamW(const ParamStore& params, OptimizerConfig cfg);

  double lr_at(int step) const;
  void step(ParamStore& params, const std::map<std::string, Mat>& grads, int step_index);

  const std::map<std::string, Mat>& moment1() const { return m_; }
  const std::map<std::string, Mat>& moment2() const { return v_; }
  void restore_moments(std::map<std::string, Mat> m, std::map<std::string, Mat> v);
  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  std::map<std::string, Mat> m_, v_;
};

// ---- sampling ---------------------------------------------------------------

struct SampleOpts {
  double guidance = 3.5;
  bool ancestral = true;  // DDPM posterior noise; off = deterministic re-noising
  const NormStats* denorm = nullptr;  // when set, outputs are denormalized
};

/// Classifier-free guidance on the clean-signal prediction:
/// out = null + s (cond - null). s == 1 short-circuits to the conditional.
std::pair<Mat, Mat> cfg_predict(const Denoiser& denoiser, const Mat& x1t, const Mat& x2t,
                                int t, const std::string& command, const HistoryContext& s1,
                                const HistoryContext& s2, double guidance);

/// Iterative denoising from pure noise over the full schedule.
std::pair<Mat, Mat> sample(const Denoiser& denoiser, const NoiseSchedule& sched,
                           const std::string& command, const HistoryContext& s1,
                           const HistoryContext& s2, Eigen::Index rows, Eigen::Index cols,
                           const SampleOpts& opts, std::mt19937_64& rng);

/// Inpainting variant: after every clean prediction, agent 1's proprioception
/// block is overwritten with the normalized ground truth before re-noising;
/// actions are never substituted. fixed_proprio_raw must cover the window.
std::pair<Mat, Mat> reactive_sample(const Denoiser& denoiser, const NoiseSchedule& sched,
                                    const Mat& fixed_proprio_raw, const std::string& command,
                                    const HistoryContext& s1, const HistoryContext& s2,
                                    Eigen::Index rows, Eigen::Index cols, const NormStats& stats,
                                    double guidance, bool ancestral, std::mt19937_64& rng);

// ---- closed-loop control ----------------------------------------------------

/// FIFO of the last `capacity` frames; short histories are left-padded by
/// repeating the oldest frame.
class FifoHistory {
 public:
  FifoHistory(Eigen::Index capacity, Eigen::Index frame_dim);

  void push(const Eigen::VectorXd& frame);
  Eigen::Index real_frames() const { return real_; }
  Eigen::Index capacity() const { return buffer_.rows(); }
  /// Full buffer, oldest first, padded to capacity.
  const Mat& padded() const { return buffer_; }

 private:
  Mat buffer_;
  Eigen::Index real_ = 0;
};

enum class RolloutMode { kReplanEveryFrame, kExecuteHorizon };

struct RolloutResult {
  std::array<Mat, 2> frames;  // per agent: steps x frame_dim, raw units
  int sampler_calls = 0;
};

struct ControllerOpts {
  std::string command;
  double guidance = 3.5;
  RolloutMode mode = RolloutMode::kExecuteHorizon;
  bool ancestral = true;
  representation::ExteroKind extero = representation::ExteroKind::FIG;
};

/// Closed-loop autoregressive control of both simulated agents. Aborts with
/// SimFault when the simulation diverges.
RolloutResult rollout(simworld::SimWorld& sim, const InterDiT& model, const NormStats& stats,
                      const NoiseSchedule& sched, const ControllerOpts& opts, int steps,
                      std::mt19937_64& rng);

/// Reactive control: agent 1 replays `fixed_frames` ([x_p, x_e] raw rows)
/// kinematically from `placement` (x, y, yaw) while agent 2 responds in sim.
RolloutResult react_rollout(simworld::SimState agent2, const simworld::BodySpec& spec,
                            const InterDiT& model, const NormStats& stats,
                            const NoiseSchedule& sched, const ControllerOpts& opts,
                            const Mat& fixed_frames, const Vec3& placement, int steps,
                            std::mt19937_64& rng);

/// Derives the per-step RNG stream: mix of a base seed and an index.
uint64_t substream_seed(uint64_t seed, uint64_t index);

/// Slice of per-dimension stats (for the [x_p, x_e] prefix of a frame).
NormStats slice_stats(const NormStats& stats, Eigen::Index offset, Eigen::Index len);

}  // namespace interagent::diffusion
