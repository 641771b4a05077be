#include "interagent/diffusion.hpp"

#include <atomic>
#include <cmath>
#include <thread>

#include "interagent/representation.hpp"

namespace interagent::diffusion {

using namespace numerics;
using representation::normalize_rows;
using representation::denormalize_rows;

NoiseSchedule make_schedule(int steps, ScheduleKind kind) {
  if (steps < 2) throw ConfigError("noise schedule needs at least 2 steps");
  NoiseSchedule s;
  s.steps = steps;
  s.beta = Eigen::VectorXd::Zero(steps + 1);
  s.alpha = Eigen::VectorXd::Ones(steps + 1);
  s.alpha_bar = Eigen::VectorXd::Ones(steps + 1);

  if (kind == ScheduleKind::kCosine) {
    const double off = 0.008;
    auto f = [&](double t) {
      double v = std::cos((t / steps + off) / (1.0 + off) * M_PI / 2.0);
      return v * v;
    };
    const double f0 = f(0.0);
    double prev = 1.0;
    for (int t = 1; t <= steps; ++t) {
      double ab = f(static_cast<double>(t)) / f0;
      double beta = std::min(1.0 - ab / prev, 0.999);
      s.beta(t) = beta;
      prev = ab;
    }
  } else {
    // the classic 1e-4..0.02 ramp, rescaled from its 1000-step calibration
    const double scale = 1000.0 / steps;
    const double lo = std::min(1e-4 * scale, 0.999), hi = std::min(0.02 * scale, 0.999);
    for (int t = 1; t <= steps; ++t)
      s.beta(t) = lo + (hi - lo) * static_cast<double>(t - 1) / std::max(1, steps - 1);
  }

  for (int t = 1; t <= steps; ++t) {
    s.alpha(t) = 1.0 - s.beta(t);
    s.alpha_bar(t) = s.alpha_bar(t - 1) * s.alpha(t);
    if (!(s.beta(t) > 0.0) || !(s.beta(t) < 1.0))
      throw ConfigError("noise schedule produced beta outside (0,1)");
  }
  if (s.alpha_bar(steps) >= 0.01)
    throw ConfigError("noise schedule does not reach the noise floor (alpha_bar_N >= 0.01)");
  return s;
}

Mat q_sample(const Mat& x0, const NoiseSchedule& sched, int t, const Mat& eps) {
  if (t < 0 || t > sched.steps) throw ContractError("q_sample: t outside [0, N]");
  if (eps.rows() != x0.rows() || eps.cols() != x0.cols())
    throw DimensionError("q_sample: eps shape mismatch");
  double ab = sched.alpha_bar(t);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

Denoiser make_denoiser(const InterDiT& model, std::mt19937_64* gumbel_rng) {
  return [&model, gumbel_rng](Graph& g, Value x1t, Value x2t, int t, const std::string& command,
                              bool mask_text, const HistoryContext& s1,
                              const HistoryContext& s2) {
    return model.forward(g, x1t, x2t, t, command, mask_text, s1, s2, gumbel_rng);
  };
}

uint64_t substream_seed(uint64_t seed, uint64_t index) {
  uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ull;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBull;
  z ^= z >> 31;
  return z;
}

namespace {

Mat randn(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> n(0.0, 1.0);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

void run_indexed(int n, int threads, const std::function<void(int)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::atomic<int> next{0};
  int workers = std::min(threads, n);
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&]() {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  for (auto& t : pool) t.join();
}

}  // namespace

double training_loss(const Denoiser& denoiser, const std::vector<Sample>& batch,
                     const NoiseSchedule& sched, uint64_t seed, double cfg_mask_rate,
                     LossResult* grads_out, std::vector<uint8_t>* mask_log, int threads) {
  if (batch.empty()) throw DataError("training_loss: empty batch");
  const int n = static_cast<int>(batch.size());
  std::vector<double> losses(static_cast<size_t>(n), 0.0);
  std::vector<std::map<std::string, Mat>> grads(static_cast<size_t>(n));
  std::vector<uint8_t> masks(static_cast<size_t>(n), 0);

  run_indexed(n, threads, [&](int i) {
    const Sample& smp = batch[static_cast<size_t>(i)];
    std::mt19937_64 rng(substream_seed(seed, static_cast<uint64_t>(i)));
    std::uniform_int_distribution<int> t_draw(1, sched.steps);
    int t = t_draw(rng);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    bool mask = u(rng) < cfg_mask_rate;
    masks[static_cast<size_t>(i)] = mask ? 1 : 0;
    Mat eps1 = randn(rng, smp.x1.rows(), smp.x1.cols());
    Mat eps2 = randn(rng, smp.x2.rows(), smp.x2.cols());

    Graph g;
    Value x1t = g.constant(q_sample(smp.x1, sched, t, eps1));
    Value x2t = g.constant(q_sample(smp.x2, sched, t, eps2));
    auto [y1, y2] = denoiser(g, x1t, x2t, t, smp.command, mask, smp.s1, smp.s2);
    Value r1 = frobenius_norm(sub(y1, g.constant(smp.x1)));
    Value r2 = frobenius_norm(sub(y2, g.constant(smp.x2)));
    Value loss = scale(add(r1, r2), 0.5);
    losses[static_cast<size_t>(i)] = loss.val()(0, 0);
    if (grads_out) {
      g.backward(loss);
      grads[static_cast<size_t>(i)] = g.named_grads();
    }
  });

  double total = 0.0;
  for (double l : losses) total += l;  // fixed reduction order
  total /= n;

  if (grads_out) {
    grads_out->loss = total;
    grads_out->grads.clear();
    for (int i = 0; i < n; ++i)
      for (auto& [name, g] : grads[static_cast<size_t>(i)]) {
        auto it = grads_out->grads.find(name);
        if (it == grads_out->grads.end())
          grads_out->grads.emplace(name, g / n);
        else
          it->second += g / n;
      }
  }
  if (mask_log) mask_log->insert(mask_log->end(), masks.begin(), masks.end());
  return total;
}

// ---- optimizer --------------------------------------------------------------

namespace {

void quantize_f32(Mat& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i)
    m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
}

}  // namespace

AdamW::AdamW(const ParamStore& params, OptimizerConfig cfg) : cfg_(cfg) {
  for (const auto& [name, t] : params) {
    m_.emplace(name, Mat::Zero(t.value.rows(), t.value.cols()));
    v_.emplace(name, Mat::Zero(t.value.rows(), t.value.cols()));
  }
}

double AdamW::lr_at(int step) const {
  if (step < cfg_.warmup_steps)
    return cfg_.peak_lr * static_cast<double>(step + 1) / cfg_.warmup_steps;
  if (cfg_.total_steps <= cfg_.warmup_steps) return cfg_.peak_lr;
  double frac = static_cast<double>(step - cfg_.warmup_steps) /
                (cfg_.total_steps - cfg_.warmup_steps);
  return cfg_.peak_lr * 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, frac)));
}

void AdamW::step(ParamStore& params, const std::map<std::string, Mat>& grads, int step_index) {
  const double lr = lr_at(step_index);
  const double t = static_cast<double>(step_index) + 1.0;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
  for (auto& [name, tensor] : params) {
    Mat& m = m_.at(name);
    Mat& v = v_.at(name);
    auto git = grads.find(name);
    Mat g = git != grads.end() ? git->second
                               : Mat::Zero(tensor.value.rows(), tensor.value.cols());
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    Mat update = (m / bc1).array() / ((v / bc2).array().sqrt() + cfg_.eps);
    tensor.value -= lr * (update + cfg_.weight_decay * tensor.value);
    quantize_f32(tensor.value);
    quantize_f32(m);
    quantize_f32(v);
  }
}

void AdamW::restore_moments(std::map<std::string, Mat> m, std::map<std::string, Mat> v) {
  m_ = std::move(m);
  v_ = std::move(v);
}

// ---- sampling ---------------------------------------------------------------

std::pair<Mat, Mat> cfg_predict(const Denoiser& denoiser, const Mat& x1t, const Mat& x2t,
                                int t, const std::string& command, const HistoryContext& s1,
                                const HistoryContext& s2, double guidance) {
  if (guidance < 0.0) throw ContractError("cfg_predict: guidance must be >= 0");
  auto run = [&](bool mask_text) {
    Graph g;
    auto [y1, y2] = denoiser(g, g.constant(x1t), g.constant(x2t), t, command, mask_text, s1, s2);
    return std::pair<Mat, Mat>(y1.val(), y2.val());
  };
  if (guidance == 1.0) return run(false);  // scale-1 identity, bit-exact
  auto [n1, n2] = run(true);
  auto [c1, c2] = run(false);
  return {n1 + guidance * (c1 - n1), n2 + guidance * (c2 - n2)};
}

namespace {

std::pair<Mat, Mat> sample_impl(const Denoiser& denoiser, const NoiseSchedule& sched,
                                const std::string& command, const HistoryContext& s1,
                                const HistoryContext& s2, Eigen::Index rows, Eigen::Index cols,
                                double guidance, bool ancestral, const NormStats* denorm,
                                const Mat* fixed_norm_proprio, std::mt19937_64& rng) {
  Mat x1 = randn(rng, rows, cols);
  Mat x2 = randn(rng, rows, cols);
  Mat out1, out2;
  for (int t = sched.steps; t >= 1; --t) {
    auto [p1, p2] = cfg_predict(denoiser, x1, x2, t, command, s1, s2, guidance);
    if (fixed_norm_proprio)
      p1.leftCols(fixed_norm_proprio->cols()) = *fixed_norm_proprio;
    if (t == 1) {
      out1 = p1;
      out2 = p2;
      break;
    }
    const double ab_t = sched.alpha_bar(t), ab_p = sched.alpha_bar(t - 1);
    const double beta = sched.beta(t), alpha = sched.alpha(t);
    const double c0 = std::sqrt(ab_p) * beta / (1.0 - ab_t);
    const double ct = std::sqrt(alpha) * (1.0 - ab_p) / (1.0 - ab_t);
    const double sigma = std::sqrt((1.0 - ab_p) / (1.0 - ab_t) * beta);
    Mat z1 = ancestral ? randn(rng, rows, cols) : Mat::Zero(rows, cols);
    Mat z2 = ancestral ? randn(rng, rows, cols) : Mat::Zero(rows, cols);
    x1 = c0 * p1 + ct * x1 + sigma * z1;
    x2 = c0 * p2 + ct * x2 + sigma * z2;
  }
  if (denorm) {
    out1 = denormalize_rows(out1, *denorm);
    out2 = denormalize_rows(out2, *denorm);
  }
  return {out1, out2};
}

}  // namespace

std::pair<Mat, Mat> sample(const Denoiser& denoiser, const NoiseSchedule& sched,
                           const std::string& command, const HistoryContext& s1,
                           const HistoryContext& s2, Eigen::Index rows, Eigen::Index cols,
                           const SampleOpts& opts, std::mt19937_64& rng) {
  return sample_impl(denoiser, sched, command, s1, s2, rows, cols, opts.guidance,
                     opts.ancestral, opts.denorm, nullptr, rng);
}

std::pair<Mat, Mat> reactive_sample(const Denoiser& denoiser, const NoiseSchedule& sched,
                                    const Mat& fixed_proprio_raw, const std::string& command,
                                    const HistoryContext& s1, const HistoryContext& s2,
                                    Eigen::Index rows, Eigen::Index cols, const NormStats& stats,
                                    double guidance, bool ancestral, std::mt19937_64& rng) {
  if (fixed_proprio_raw.rows() < rows)
    throw DataError("reactive_sample: fixed trajectory shorter than the window");
  NormStats pstats = slice_stats(stats, 0, fixed_proprio_raw.cols());
  Mat fixed_norm = normalize_rows(fixed_proprio_raw.topRows(rows), pstats);
  auto [y1, y2] = sample_impl(denoiser, sched, command, s1, s2, rows, cols, guidance, ancestral,
                              &stats, &fixed_norm, rng);
  // raw overwrite keeps the replayed block bit-exact through de/normalization
  y1.leftCols(fixed_proprio_raw.cols()) = fixed_proprio_raw.topRows(rows);
  return {y1, y2};
}

NormStats slice_stats(const NormStats& stats, Eigen::Index offset, Eigen::Index len) {
  NormStats s;
  s.mean = stats.mean.segment(offset, len);
  s.std = stats.std.segment(offset, len);
  return s;
}

// ---- closed-loop control ----------------------------------------------------

FifoHistory::FifoHistory(Eigen::Index capacity, Eigen::Index frame_dim)
    : buffer_(Mat::Zero(capacity, frame_dim)) {}

void FifoHistory::push(const Eigen::VectorXd& frame) {
  if (frame.size() != buffer_.cols()) throw DimensionError("fifo: frame width mismatch");
  if (real_ == 0) {
    buffer_.rowwise() = frame.transpose();  // left-pad with the only frame we have
    real_ = 1;
    return;
  }
  const Eigen::Index h = buffer_.rows();
  for (Eigen::Index r = 0; r + 1 < h; ++r) buffer_.row(r) = buffer_.row(r + 1);
  buffer_.row(h - 1) = frame.transpose();
  if (real_ < h) ++real_;
}

RolloutResult rollout(simworld::SimWorld& sim, const InterDiT& model, const NormStats& stats,
                      const NoiseSchedule& sched, const ControllerOpts& opts, int steps,
                      std::mt19937_64& rng) {
  const auto& cfg = model.config();
  const auto& spec = sim.spec();
  const Eigen::Index dp = cfg.proprio_dim(), de = cfg.extero_dim(), da = cfg.action_dim();
  const Eigen::Index frame_dim = dp + de + da;
  const Eigen::Index hist_dim = dp + de;
  const int m = cfg.horizon;
  NormStats hist_stats = slice_stats(stats, 0, hist_dim);
  Denoiser den = make_denoiser(model);

  RolloutResult result;
  result.frames[0] = Mat::Zero(steps, frame_dim);
  result.frames[1] = Mat::Zero(steps, frame_dim);
  FifoHistory fifo0(cfg.history, hist_dim), fifo1(cfg.history, hist_dim);
  std::array<Mat, 2> plan;
  int plan_row = 0;

  for (int n = 0; n < steps; ++n) {
    auto f0 = representation::make_frame(sim.agent(0), spec);
    auto f1 = representation::make_frame(sim.agent(1), spec);
    Eigen::VectorXd xp0 = representation::encode_proprio(sim.agent(0), spec).flatten();
    Eigen::VectorXd xp1 = representation::encode_proprio(sim.agent(1), spec).flatten();
    Eigen::VectorXd xe0 = representation::build_extero(opts.extero, f0, f1, spec).values;
    Eigen::VectorXd xe1 = representation::build_extero(opts.extero, f1, f0, spec).values;
    Eigen::VectorXd h0(hist_dim), h1(hist_dim);
    h0 << xp0, xe0;
    h1 << xp1, xe1;
    fifo0.push(h0);
    fifo1.push(h1);

    bool replan = opts.mode == RolloutMode::kReplanEveryFrame || n % m == 0;
    if (replan) {
      HistoryContext s1 = HistoryContext::from_buffer(normalize_rows(fifo0.padded(), hist_stats));
      HistoryContext s2 = HistoryContext::from_buffer(normalize_rows(fifo1.padded(), hist_stats));
      SampleOpts so;
      so.guidance = opts.guidance;
      so.ancestral = opts.ancestral;
      so.denorm = &stats;
      auto [w1, w2] = sample(den, sched, opts.command, s1, s2, m, frame_dim, so, rng);
      plan = {w1, w2};
      ++result.sampler_calls;
      plan_row = 0;
    }

    simworld::ActuatorCmd cmd0, cmd1;
    cmd0.target = plan[0].row(plan_row).segment(dp + de, da).transpose();
    cmd1.target = plan[1].row(plan_row).segment(dp + de, da).transpose();
    // keep predicted targets inside the body's limits
    int d = 0;
    for (const auto& joint : spec.joints)
      for (size_t a = 0; a < joint.axes.size(); ++a, ++d) {
        cmd0.target(d) = std::clamp(cmd0.target(d), joint.lo[a], joint.hi[a]);
        cmd1.target(d) = std::clamp(cmd1.target(d), joint.lo[a], joint.hi[a]);
      }
    plan_row = opts.mode == RolloutMode::kReplanEveryFrame ? 0 : (plan_row + 1) % m;

    result.frames[0].row(n) << xp0.transpose(), xe0.transpose(), cmd0.target.transpose();
    result.frames[1].row(n) << xp1.transpose(), xe1.transpose(), cmd1.target.transpose();
    sim.step_pair(cmd0, cmd1, simworld::kDefaultDt);  // throws SimFault on divergence
  }
  return result;
}

RolloutResult react_rollout(simworld::SimState agent2, const simworld::BodySpec& spec,
                            const InterDiT& model, const NormStats& stats,
                            const NoiseSchedule& sched, const ControllerOpts& opts,
                            const Mat& fixed_frames, const Vec3& placement, int steps,
                            std::mt19937_64& rng) {
  const auto& cfg = model.config();
  const Eigen::Index dp = cfg.proprio_dim(), de = cfg.extero_dim(), da = cfg.action_dim();
  const Eigen::Index frame_dim = dp + de + da;
  const Eigen::Index hist_dim = dp + de;
  const int m = cfg.horizon;
  if (fixed_frames.rows() < steps)
    throw DataError("react: fixed trajectory shorter than the requested steps");
  if (fixed_frames.cols() < dp)
    throw DimensionError("react: fixed trajectory lacks the proprio block");
  NormStats hist_stats = slice_stats(stats, 0, hist_dim);
  Denoiser den = make_denoiser(model);

  RolloutResult result;
  result.frames[0] = Mat::Zero(steps, frame_dim);
  result.frames[1] = Mat::Zero(steps, frame_dim);
  FifoHistory fifo0(cfg.history, hist_dim), fifo1(cfg.history, hist_dim);
  std::array<Mat, 2> plan;
  int plan_base = 0;

  for (int n = 0; n < steps; ++n) {
    Eigen::VectorXd xp1 = fixed_frames.row(n).head(dp).transpose();
    auto frame1 = representation::frame_from_proprio(xp1, spec, placement);
    auto frame2 = representation::make_frame(agent2, spec);
    Eigen::VectorXd xe1 = representation::build_extero(opts.extero, frame1, frame2, spec).values;
    Eigen::VectorXd xp2 = representation::encode_proprio(agent2, spec).flatten();
    Eigen::VectorXd xe2 = representation::build_extero(opts.extero, frame2, frame1, spec).values;
    Eigen::VectorXd h1(hist_dim), h2(hist_dim);
    h1 << xp1, xe1;
    h2 << xp2, xe2;
    fifo0.push(h1);
    fifo1.push(h2);

    if (n % m == 0) {
      plan_base = std::min<int>(n, static_cast<int>(fixed_frames.rows()) - m);
      Mat fixed_window = fixed_frames.middleRows(plan_base, m).leftCols(dp);
      HistoryContext s1 = HistoryContext::from_buffer(normalize_rows(fifo0.padded(), hist_stats));
      HistoryContext s2 = HistoryContext::from_buffer(normalize_rows(fifo1.padded(), hist_stats));
      auto [w1, w2] = reactive_sample(den, sched, fixed_window, opts.command, s1, s2, m,
                                      frame_dim, stats, opts.guidance, opts.ancestral, rng);
      plan = {w1, w2};
      ++result.sampler_calls;
    }
    int row = n - plan_base;

    simworld::ActuatorCmd cmd2;
    cmd2.target = plan[1].row(row).segment(dp + de, da).transpose();
    int d = 0;
    for (const auto& joint : spec.joints)
      for (size_t a = 0; a < joint.axes.size(); ++a, ++d)
        cmd2.target(d) = std::clamp(cmd2.target(d), joint.lo[a], joint.hi[a]);

    // the replayed agent's proprio is copied through untouched; its actions
    // are the model's own predictions, never the replay
    result.frames[0].row(n) << xp1.transpose(), xe1.transpose(),
        plan[0].row(row).segment(dp + de, da);
    result.frames[1].row(n) << xp2.transpose(), xe2.transpose(), cmd2.target.transpose();
    agent2 = simworld::step(agent2, cmd2, spec, simworld::kDefaultDt);
  }
  return result;
}

}  // namespace interagent::diffusion
