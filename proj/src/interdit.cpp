#include "interagent/interdit.hpp"

#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace interagent::interdit {

using namespace numerics;
using namespace attention;

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; big-endian hosts are unsupported");

namespace {

constexpr const char* kStreams[3] = {"p", "e", "a"};

uint64_t fnv1a(const std::string& bytes, uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

void ModelConfig::validate() const {
  if (joints < 2) throw ConfigError("model: at least 2 joints");
  if (dof < 1) throw ConfigError("model: at least 1 actuated dof");
  if (d_model % 2 != 0) throw ConfigError("model: d_model must be even");
  if (heads < 1 || d_model % heads != 0)
    throw ConfigError("model: d_model must divide evenly into heads");
  if (blocks < 1 || cond_layers < 1) throw ConfigError("model: blocks and cond_layers >= 1");
  if (horizon < 1) throw ConfigError("model: horizon >= 1");
  if (history < kHistoryTokens) throw ConfigError("model: history must cover 16 tokens");
  if (diffusion_steps < 2) throw ConfigError("model: at least 2 diffusion steps");
  if (extero == representation::ExteroKind::SIG &&
      (!(sparse.sparsity_ratio > 0.0) || sparse.sparsity_ratio > 1.0))
    throw ConfigError("model: SIG sparsity ratio must lie in (0,1]");
}

uint64_t ModelConfig::digest() const {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "J=%d;dof=%d;ex=%d;d=%d;blk=%d;H=%d;cond=%d;ffn=%d;m=%d;h=%d;N=%d;sm=%d;sr=%.17g;st=%.17g",
                joints, dof, static_cast<int>(extero), d_model, blocks, heads, cond_layers,
                ffn_mult, horizon, history, diffusion_steps, static_cast<int>(sparse.mode),
                sparse.sparsity_ratio, sparse.gumbel_temperature);
  return fnv1a(buf);
}

std::vector<Eigen::Index> HistoryContext::downsample_indices(Eigen::Index h) {
  if (h < kHistoryTokens) throw ContractError("history buffer shorter than 16 frames");
  std::vector<Eigen::Index> idx;
  idx.reserve(kHistoryTokens);
  const Eigen::Index strided = h - 4;
  for (Eigen::Index i = 0; i < 12; ++i) idx.push_back(i * strided / 12);
  for (Eigen::Index i = h - 4; i < h; ++i) idx.push_back(i);
  return idx;
}

HistoryContext HistoryContext::from_buffer(const Mat& buffer) {
  HistoryContext ctx;
  auto idx = downsample_indices(buffer.rows());
  ctx.frames.resize(kHistoryTokens, buffer.cols());
  for (int i = 0; i < kHistoryTokens; ++i)
    ctx.frames.row(i) = buffer.row(idx[static_cast<size_t>(i)]);
  return ctx;
}

std::vector<ParamShape> param_spec(const ModelConfig& cfg) {
  cfg.validate();
  const Eigen::Index d = cfg.d_model;
  const Eigen::Index dp = cfg.proprio_dim(), de = cfg.extero_dim(), da = cfg.action_dim();
  const Eigen::Index stream_in[3] = {dp, de, da};
  const Eigen::Index hist_d = cfg.hist_frame_dim();

  std::vector<ParamShape> spec;
  auto add = [&](const std::string& name, Eigen::Index r, Eigen::Index c, bool zero = false) {
    spec.push_back({name, r, c, zero});
  };
  auto add_attn = [&](const std::string& prefix, Eigen::Index q_in, Eigen::Index kv_in) {
    add(prefix + ".wq", q_in, d);
    add(prefix + ".wk", kv_in, d);
    add(prefix + ".wv", kv_in, d);
    add(prefix + ".wo", d, d);
  };

  for (int s = 0; s < 3; ++s) {
    add(std::string("in.") + kStreams[s] + ".w", stream_in[s], d);
    add(std::string("in.") + kStreams[s] + ".b", 1, d);
  }
  if (cfg.extero == representation::ExteroKind::SIG) add_attn("in.e.sig", d, 3);

  add("temb.w1", d, d);
  add("temb.b1", 1, d);
  add("temb.w2", d, d);
  add("temb.b2", 1, d);
  add("text.table", kVocabSize, d);

  const int sublayers = 1 + cfg.cond_layers + 1;  // fusion, cond..., ffn
  for (int b = 0; b < cfg.blocks; ++b) {
    std::string blk = "blk" + std::to_string(b) + ".";
    for (int s = 0; s < 3; ++s) {
      add(blk + "fuse.pre." + kStreams[s] + ".w", d, d);
      add(blk + "fuse.pre." + kStreams[s] + ".b", 1, d);
      add(blk + "post." + kStreams[s] + ".w", d, d);
      add(blk + "post." + kStreams[s] + ".b", 1, d);
    }
    add_attn(blk + "fuse.attn", d, d);
    for (int c = 0; c < cfg.cond_layers; ++c)
      add_attn(blk + "cond" + std::to_string(c) + ".attn", d, c % 2 == 0 ? hist_d : d);
    for (int s = 0; s < 3; ++s) {
      add(blk + "ffn." + kStreams[s] + ".w1", d, d * cfg.ffn_mult);
      add(blk + "ffn." + kStreams[s] + ".b1", 1, d * cfg.ffn_mult);
      add(blk + "ffn." + kStreams[s] + ".w2", d * cfg.ffn_mult, d);
      add(blk + "ffn." + kStreams[s] + ".b2", 1, d);
    }
    for (int sub = 0; sub < sublayers; ++sub)
      for (int s = 0; s < 3; ++s) {
        std::string m = blk + "mod" + std::to_string(sub) + "." + kStreams[s];
        add(m + ".w", d, 3 * d, /*zero=*/true);
        add(m + ".b", 1, 3 * d, /*zero=*/true);
      }
  }
  const Eigen::Index head_out[3] = {dp, de, da};
  for (int s = 0; s < 3; ++s) {
    add(std::string("head.") + kStreams[s] + ".w", d, head_out[s]);
    add(std::string("head.") + kStreams[s] + ".b", 1, head_out[s]);
  }
  return spec;
}

ParamStore init_params(const ModelConfig& cfg, uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamStore store;
  for (const ParamShape& p : param_spec(cfg)) {
    Mat m = Mat::Zero(p.rows, p.cols);
    bool is_bias = p.rows == 1 && p.name.size() > 1 &&
                   (p.name.rfind(".b") == p.name.size() - 2 ||
                    p.name.rfind(".b1") == p.name.size() - 3 ||
                    p.name.rfind(".b2") == p.name.size() - 3);
    if (!p.zero_init && !is_bias) {
      double limit = std::sqrt(6.0 / static_cast<double>(p.rows + p.cols));
      std::uniform_real_distribution<double> u(-limit, limit);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
    }
    store.emplace(p.name, Tensor(std::move(m), true));
  }
  return store;
}

int token_bucket(const std::string& word) {
  std::string lower;
  for (char c : word) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  return static_cast<int>(fnv1a(lower) % kVocabSize);
}

Mat token_selection(const std::string& command) {
  Mat row = Mat::Zero(1, kVocabSize);
  std::vector<std::string> tokens;
  std::string cur;
  for (char c : command) {
    if (std::isalnum(static_cast<unsigned char>(c)))
      cur.push_back(c);
    else if (!cur.empty()) {
      tokens.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(cur);
  if (tokens.empty()) return row;  // null condition
  for (const std::string& t : tokens) row(0, token_bucket(t)) += 1.0;
  row /= static_cast<double>(tokens.size());
  return row;
}

Value text_embed(Graph& g, Value table, const std::string& command) {
  return matmul(g.constant(token_selection(command)), table);
}

// ---------------------------------------------------------------------------

namespace {

struct Bound {
  Graph* g = nullptr;
  const ParamStore* store = nullptr;
  std::map<std::string, Value>* cache = nullptr;

  Value operator()(const std::string& name) const {
    auto it = cache->find(name);
    if (it != cache->end()) return it->second;
    Value v = g->param(*store, name);
    cache->emplace(name, v);
    return v;
  }
};

Value bound_linear(const Bound& P, Value x, const std::string& prefix) {
  return numerics::linear(x, P(prefix + ".w"), P(prefix + ".b"));
}

AttnParams bound_attn(const Bound& P, const std::string& prefix, int heads, int d_model) {
  AttnParams a;
  a.w_q = P(prefix + ".wq");
  a.w_k = P(prefix + ".wk");
  a.w_v = P(prefix + ".wv");
  a.w_o = P(prefix + ".wo");
  a.head_count = heads;
  a.head_dim = d_model / heads;
  return a;
}

Mat sinusoid_features(int t, int d) {
  Mat row(1, d);
  const int half = d / 2;
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
    row(0, i) = std::sin(t * freq);
    row(0, half + i) = std::cos(t * freq);
  }
  return row;
}

struct Streams3 {
  Value s[3];
};

}  // namespace

InterDiT::InterDiT(ModelConfig cfg, ParamStore params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
  for (const ParamShape& p : param_spec(cfg_)) {
    auto it = params_.find(p.name);
    if (it == params_.end()) throw ContractError("missing parameter: " + p.name);
    if (it->second.value.rows() != p.rows || it->second.value.cols() != p.cols)
      throw ContractError("parameter shape mismatch: " + p.name);
  }
}

Value InterDiT::condition(Graph& g, int t, const std::string& command, bool mask_text) const {
  std::map<std::string, Value> cache;
  Bound P{&g, &params_, &cache};
  Value sins = g.constant(sinusoid_features(t, cfg_.d_model));
  // two-layer map over the sinusoid features
  Value h = numerics::linear(sins, P("temb.w1"), P("temb.b1"));
  Value t_emb = numerics::linear(silu(h), P("temb.w2"), P("temb.b2"));
  if (mask_text || command.empty()) return t_emb;  // the null condition: text part is exactly zero
  Value c_text = text_embed(g, P("text.table"), command);
  return add(t_emb, c_text);
}

StreamStates InterDiT::encode_streams(Graph& g, Value window,
                                      std::mt19937_64* gumbel_rng) const {
  std::map<std::string, Value> cache;
  Bound P{&g, &params_, &cache};
  const Eigen::Index dp = cfg_.proprio_dim(), de = cfg_.extero_dim(), da = cfg_.action_dim();
  if (window.cols() != dp + de + da || window.rows() != cfg_.horizon)
    throw DimensionError("encode_streams: window must be horizon x frame_dim");
  Value xp = slice_cols(window, 0, dp);
  Value xe = slice_cols(window, dp, de);
  Value xa = slice_cols(window, dp + de, da);

  StreamStates st;
  st.proprio = bound_linear(P, xp, "in.p");
  st.action = bound_linear(P, xa, "in.a");
  Value f = bound_linear(P, xe, "in.e");
  if (cfg_.extero == representation::ExteroKind::SIG) {
    Value edges = reshape(xe, cfg_.horizon * cfg_.joints * cfg_.joints, 3);
    AttnParams sig = bound_attn(P, "in.e.sig", cfg_.heads, cfg_.d_model);
    SparseConfig sp = cfg_.sparse;
    sp.joints = cfg_.joints;
    st.extero = add(f, sparse_edge_attention(f, edges, sig, sp, gumbel_rng));
  } else {
    st.extero = f;
  }
  return st;
}

std::pair<Value, Value> InterDiT::forward(Graph& g, Value window1, Value window2, int t,
                                          const std::string& command, bool mask_text,
                                          const HistoryContext& s1, const HistoryContext& s2,
                                          std::mt19937_64* gumbel_rng) const {
  std::map<std::string, Value> cache;
  Bound P{&g, &params_, &cache};
  const Eigen::Index d = cfg_.d_model;
  const Eigen::Index m = cfg_.horizon;
  if (s1.frames.rows() != kHistoryTokens || s2.frames.rows() != kHistoryTokens ||
      s1.frames.cols() != cfg_.hist_frame_dim() || s2.frames.cols() != cfg_.hist_frame_dim())
    throw DimensionError("forward: history context must be 16 x hist_frame_dim");
  if (t < 0 || t > cfg_.diffusion_steps)
    throw ContractError("forward: timestep outside the schedule range");

  Value cond = condition(g, t, command, mask_text);
  StreamStates enc1 = encode_streams(g, window1, gumbel_rng);
  StreamStates enc2 = encode_streams(g, window2, gumbel_rng);
  Streams3 h[2] = {{enc1.proprio, enc1.extero, enc1.action},
                   {enc2.proprio, enc2.extero, enc2.action}};
  Value hist[2] = {g.constant(s1.frames), g.constant(s2.frames)};

  for (int b = 0; b < cfg_.blocks; ++b) {
    const std::string blk = "blk" + std::to_string(b) + ".";
    auto mods_of = [&](int sublayer) {
      std::array<Modulation, 3> mods;
      for (int s = 0; s < 3; ++s) {
        AdaLNParams ap{P(blk + "mod" + std::to_string(sublayer) + "." + kStreams[s] + ".w"),
                       P(blk + "mod" + std::to_string(sublayer) + "." + kStreams[s] + ".b")};
        mods[static_cast<size_t>(s)] = adaln_modulation(cond, ap, d);
      }
      return mods;
    };

    // inter-stream fusion attention, both agents through the same weights
    auto fuse_mods = mods_of(0);
    AttnParams fuse_attn = bound_attn(P, blk + "fuse.attn", cfg_.heads, cfg_.d_model);
    for (int agent = 0; agent < 2; ++agent) {
      std::vector<Value> zs;
      for (int s = 0; s < 3; ++s) {
        Value u = adaln_premod(h[agent].s[s], fuse_mods[static_cast<size_t>(s)]);
        zs.push_back(bound_linear(P, u, blk + "fuse.pre." + kStreams[s]));
      }
      Value zcat = concat_rows(zs);
      Value att = multi_head_attention(zcat, zcat, fuse_attn);
      for (int s = 0; s < 3; ++s) {
        Value out = bound_linear(P, slice_rows(att, s * m, m), blk + "post." + kStreams[s]);
        h[agent].s[s] = adaln_residual(h[agent].s[s], out, fuse_mods[static_cast<size_t>(s)]);
      }
    }

    // context-aware conditioning attention; each agent reads the other's
    // post-fusion features, so snapshot them first
    Value other_of[2] = {concat_rows({h[1].s[0], h[1].s[1], h[1].s[2]}),
                         concat_rows({h[0].s[0], h[0].s[1], h[0].s[2]})};
    for (int c = 0; c < cfg_.cond_layers; ++c) {
      auto mods = mods_of(1 + c);
      AttnParams cond_attn = bound_attn(P, blk + "cond" + std::to_string(c) + ".attn",
                                        cfg_.heads, cfg_.d_model);
      for (int agent = 0; agent < 2; ++agent) {
        std::vector<Value> us;
        for (int s = 0; s < 3; ++s)
          us.push_back(adaln_premod(h[agent].s[s], mods[static_cast<size_t>(s)]));
        Value target = c % 2 == 0 ? hist[agent] : other_of[agent];
        Value att = multi_head_attention(concat_rows(us), target, cond_attn);
        for (int s = 0; s < 3; ++s) {
          Value out = bound_linear(P, slice_rows(att, s * m, m), blk + "post." + kStreams[s]);
          h[agent].s[s] = adaln_residual(h[agent].s[s], out, mods[static_cast<size_t>(s)]);
        }
      }
    }

    // per-stream feed-forward
    auto ffn_mods = mods_of(1 + cfg_.cond_layers);
    for (int agent = 0; agent < 2; ++agent)
      for (int s = 0; s < 3; ++s) {
        Value u = adaln_premod(h[agent].s[s], ffn_mods[static_cast<size_t>(s)]);
        Value w1 = P(blk + "ffn." + kStreams[s] + ".w1");
        Value b1 = P(blk + "ffn." + kStreams[s] + ".b1");
        Value w2 = P(blk + "ffn." + kStreams[s] + ".w2");
        Value b2 = P(blk + "ffn." + kStreams[s] + ".b2");
        Value out = numerics::linear(gelu(numerics::linear(u, w1, b1)), w2, b2);
        h[agent].s[s] = adaln_residual(h[agent].s[s], out, ffn_mods[static_cast<size_t>(s)]);
      }
  }

  auto decode = [&](const Streams3& hs) {
    Value yp = bound_linear(P, hs.s[0], "head.p");
    Value ye = bound_linear(P, hs.s[1], "head.e");
    Value ya = bound_linear(P, hs.s[2], "head.a");
    return concat_cols({yp, ye, ya});
  };
  return {decode(h[0]), decode(h[1])};
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
void write_pod(std::ofstream& f, const T& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!f) throw FormatError("checkpoint: truncated file");
  return v;
}

constexpr char kCkptMagic[4] = {'I', 'D', 'T', 'C'};
constexpr uint32_t kCkptVersion = 1;

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& params,
                     uint64_t config_digest, uint64_t step) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("checkpoint: cannot open for writing: " + path);
  f.write(kCkptMagic, 4);
  write_pod(f, kCkptVersion);
  write_pod(f, config_digest);
  write_pod(f, step);
  write_pod(f, static_cast<uint32_t>(params.size()));
  for (const auto& [name, tensor] : params) {
    write_pod(f, static_cast<uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod(f, static_cast<uint32_t>(tensor.value.rows()));
    write_pod(f, static_cast<uint32_t>(tensor.value.cols()));
    for (Eigen::Index i = 0; i < tensor.value.size(); ++i)
      write_pod(f, static_cast<float>(tensor.value.data()[i]));
  }
  if (!f) throw DataError("checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("checkpoint: cannot open: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kCkptMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic bytes");
  uint32_t version = read_pod<uint32_t>(f);
  if (version != kCkptVersion) throw FormatError("checkpoint: unsupported version");
  Checkpoint ck;
  ck.config_digest = read_pod<uint64_t>(f);
  ck.step = read_pod<uint64_t>(f);
  uint32_t count = read_pod<uint32_t>(f);
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t len = read_pod<uint32_t>(f);
    std::string name(len, '\0');
    f.read(name.data(), len);
    uint32_t rows = read_pod<uint32_t>(f);
    uint32_t cols = read_pod<uint32_t>(f);
    Mat m(rows, cols);
    for (Eigen::Index k = 0; k < m.size(); ++k)
      m.data()[k] = static_cast<double>(read_pod<float>(f));
    ck.params.emplace(std::move(name), Tensor(std::move(m), true));
  }
  return ck;
}

}  // namespace interagent::interdit
