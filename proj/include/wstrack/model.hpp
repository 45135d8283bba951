#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "wstrack/convlstm.hpp"
#include "wstrack/conv.hpp"
#include "wstrack/rng.hpp"
#include "wstrack/serialize.hpp"
#include "wstrack/tensor.hpp"

namespace wstrack {

inline constexpr int kNumTools = 7;

enum class ToolClass : int {
  Grasper = 0,
  Bipolar,
  Hook,
  Scissors,
  Clipper,
  Irrigator,
  SpecimenBag,
};

inline const char* tool_name(int id) {
  static const char* names[kNumTools] = {"Grasper",  "Bipolar",   "Hook",       "Scissors",
                                         "Clipper",  "Irrigator", "SpecimenBag"};
  if (id < 0 || id >= kNumTools) throw std::invalid_argument("tool_name: id out of range");
  return names[id];
}

enum class MapKind { spatial, spatio_temporal };

// Per-frame stack of per-class localization maps. After multi-map
// reduction, channel i belongs to tool class i.
struct HeatMapStack {
  Tensor4 maps;
  int frame_index = 0;
  MapKind kind = MapKind::spatial;
};

// ---------------------------------------------------------------------------
// Configuration

enum class Variant { RC_M1, RC_M1_mask, RC_M4, RC_M4_mask, RCCL, RCLC, RCL };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::RC_M1: return "R+C_M1";
    case Variant::RC_M1_mask: return "R+C_M1_mask";
    case Variant::RC_M4: return "R+C_M4";
    case Variant::RC_M4_mask: return "R+C_M4_mask";
    case Variant::RCCL: return "R+C+CL";
    case Variant::RCLC: return "R+CL+C";
    case Variant::RCL: return "R+CL";
  }
  throw std::invalid_argument("variant_name: bad variant");
}

inline Variant variant_from_name(const std::string& s) {
  for (Variant v : {Variant::RC_M1, Variant::RC_M1_mask, Variant::RC_M4, Variant::RC_M4_mask,
                    Variant::RCCL, Variant::RCLC, Variant::RCL})
    if (s == variant_name(v)) return v;
  throw std::invalid_argument("unknown model variant '" + s + "'");
}

inline bool has_convlstm(Variant v) {
  return v == Variant::RCCL || v == Variant::RCLC || v == Variant::RCL;
}
inline bool is_masked_variant(Variant v) {
  return v == Variant::RC_M1_mask || v == Variant::RC_M4_mask;
}
inline bool uses_multimap(Variant v) { return v == Variant::RC_M4 || v == Variant::RC_M4_mask; }

struct WildcatConfig {
  int k_plus = 1;
  int k_minus = 1;
  double alpha = 0.6;
};

struct BackboneConfig {
  struct Stage {
    int blocks = 1;
    int channels = 16;
    int stride = 1;
  };
  int stem_channels = 16;
  std::vector<Stage> stages;

  void validate() const {
    if (stages.size() < 2) throw std::invalid_argument("BackboneConfig: need at least 2 stages");
    for (const auto& s : stages)
      if (s.blocks < 1 || s.channels < 1 || s.stride < 1)
        throw std::invalid_argument("BackboneConfig: bad stage");
    // higher-resolution maps on the last two stages
    if (stages[stages.size() - 1].stride != 1 || stages[stages.size() - 2].stride != 1)
      throw std::invalid_argument("BackboneConfig: last two stages must use stride 1");
  }

  int out_channels() const { return stages.back().channels; }

  // Stand-in for the paper-scale residual backbone.
  static BackboneConfig paper() {
    return BackboneConfig{16, {{2, 16, 2}, {2, 32, 2}, {2, 64, 1}, {2, 64, 1}}};
  }
  // Narrow configuration sized for CPU desk runs.
  static BackboneConfig desk() {
    return BackboneConfig{8, {{1, 8, 2}, {1, 16, 2}, {1, 16, 1}, {1, 16, 1}}};
  }
};

struct ModelConfig {
  Variant variant = Variant::RC_M1;
  BackboneConfig backbone = BackboneConfig::paper();
  int multimap_m = 4;
  WildcatConfig pooling;
  int num_classes = kNumTools;
  int cl_hidden = 64;   // hidden width for R+CL+C; terminal CL units use num_classes
  int cl_kernel = 3;
  bool cl_residual = true;

  bool has_cl() const { return has_convlstm(variant); }
  bool masked() const { return is_masked_variant(variant); }
  int head_out_channels() const {
    return uses_multimap(variant) ? multimap_m * num_classes : num_classes;
  }
};

// ---------------------------------------------------------------------------
// Class weights (median-frequency balancing)

struct ClassWeights {
  std::vector<double> w;
  double median_freq = 0.0;
  std::vector<double> freqs;
};

// F_c = positive-frame count per class, m = median of the counts,
// w_c = m / F_c. Every class must occur at least once.
inline ClassWeights compute_class_weights(const std::vector<std::vector<uint8_t>>& labels) {
  if (labels.empty()) throw std::invalid_argument("compute_class_weights: empty label set");
  const size_t C = labels[0].size();
  std::vector<double> freqs(C, 0.0);
  for (const auto& row : labels) {
    if (row.size() != C) throw std::invalid_argument("compute_class_weights: ragged labels");
    for (size_t c = 0; c < C; ++c) {
      if (row[c] > 1) throw std::invalid_argument("compute_class_weights: labels must be binary");
      freqs[c] += row[c];
    }
  }
  for (size_t c = 0; c < C; ++c)
    if (freqs[c] == 0.0)
      throw std::runtime_error("compute_class_weights: class " + std::to_string(c) +
                               " has no positive frames in the training set");
  std::vector<double> sorted = freqs;
  std::sort(sorted.begin(), sorted.end());
  double median = (C % 2 == 1) ? sorted[C / 2] : 0.5 * (sorted[C / 2 - 1] + sorted[C / 2]);
  ClassWeights cw;
  cw.freqs = freqs;
  cw.median_freq = median;
  cw.w.resize(C);
  for (size_t c = 0; c < C; ++c) cw.w[c] = median / freqs[c];
  return cw;
}

// ---------------------------------------------------------------------------
// Wildcat spatial pooling

struct WildcatCache {
  // selected flat pixel indices per (sample, channel)
  std::vector<std::vector<int>> top, bottom;
};

// score_c = mean(top k+ of channel c) + alpha * mean(bottom k- of channel c).
// Returns n*c scores, row-major. Ties break toward lower pixel index.
inline std::vector<double> wildcat_pool(const Tensor4& maps, const WildcatConfig& cfg,
                                        WildcatCache* cache = nullptr) {
  const int npix = maps.h * maps.w;
  if (cfg.k_plus < 1 || cfg.k_minus < 1)
    throw std::invalid_argument("wildcat_pool: k_plus and k_minus must be >= 1");
  if (cfg.k_plus + cfg.k_minus > npix)
    throw std::invalid_argument("wildcat_pool: k_plus + k_minus exceeds pixels per channel");
  if (cfg.alpha < 0.0 || cfg.alpha > 1.0)
    throw std::invalid_argument("wildcat_pool: alpha must lie in [0, 1]");

  std::vector<double> scores(size_t(maps.n) * maps.c, 0.0);
  if (cache) {
    cache->top.assign(size_t(maps.n) * maps.c, {});
    cache->bottom.assign(size_t(maps.n) * maps.c, {});
  }
  std::vector<int> idx(size_t(npix));
  for (int s = 0; s < maps.n; ++s) {
    for (int ch = 0; ch < maps.c; ++ch) {
      const double* p = maps.channel(s, ch);
      std::iota(idx.begin(), idx.end(), 0);
      auto desc = [p](int a, int b) { return p[a] != p[b] ? p[a] > p[b] : a < b; };
      std::partial_sort(idx.begin(), idx.begin() + cfg.k_plus, idx.end(), desc);
      double top_sum = 0.0;
      for (int k = 0; k < cfg.k_plus; ++k) top_sum += p[idx[size_t(k)]];
      std::vector<int> top(idx.begin(), idx.begin() + cfg.k_plus);

      std::iota(idx.begin(), idx.end(), 0);
      auto asc = [p](int a, int b) { return p[a] != p[b] ? p[a] < p[b] : a < b; };
      std::partial_sort(idx.begin(), idx.begin() + cfg.k_minus, idx.end(), asc);
      double bot_sum = 0.0;
      for (int k = 0; k < cfg.k_minus; ++k) bot_sum += p[idx[size_t(k)]];

      scores[size_t(s) * maps.c + ch] =
          top_sum / cfg.k_plus + cfg.alpha * bot_sum / cfg.k_minus;
      if (cache) {
        cache->top[size_t(s) * maps.c + ch] = std::move(top);
        cache->bottom[size_t(s) * maps.c + ch] =
            std::vector<int>(idx.begin(), idx.begin() + cfg.k_minus);
      }
    }
  }
  return scores;
}

inline Tensor4 wildcat_backward(const std::vector<double>& dscores, const Tensor4& maps,
                                const WildcatConfig& cfg, const WildcatCache& cache) {
  Tensor4 dmaps = zeros_like(maps);
  for (int s = 0; s < maps.n; ++s) {
    for (int ch = 0; ch < maps.c; ++ch) {
      double g = dscores[size_t(s) * maps.c + ch];
      double* d = dmaps.channel(s, ch);
      for (int i : cache.top[size_t(s) * maps.c + ch]) d[i] += g / cfg.k_plus;
      for (int i : cache.bottom[size_t(s) * maps.c + ch]) d[i] += g * cfg.alpha / cfg.k_minus;
    }
  }
  return dmaps;
}

// ---------------------------------------------------------------------------
// Multi-map reduction: average pooling over consecutive groups of m channels.

inline Tensor4 multimap_reduce(const Tensor4& maps, int m) {
  if (m < 1) throw std::invalid_argument("multimap_reduce: m must be >= 1");
  if (maps.c % m != 0)
    throw std::invalid_argument("multimap_reduce: " + std::to_string(maps.c) +
                                " channels not divisible by m=" + std::to_string(m));
  if (m == 1) return maps;
  Tensor4 out(maps.n, maps.c / m, maps.h, maps.w);
  const int64_t plane = int64_t(maps.h) * maps.w;
  for (int s = 0; s < maps.n; ++s)
    for (int oc = 0; oc < out.c; ++oc) {
      double* dst = out.channel(s, oc);
      for (int j = 0; j < m; ++j) {
        const double* src = maps.channel(s, oc * m + j);
        for (int64_t k = 0; k < plane; ++k) dst[k] += src[k];
      }
      for (int64_t k = 0; k < plane; ++k) dst[k] /= m;
    }
  return out;
}

inline Tensor4 multimap_reduce_backward(const Tensor4& dout, int m, int in_channels) {
  Tensor4 dmaps(dout.n, in_channels, dout.h, dout.w);
  const int64_t plane = int64_t(dout.h) * dout.w;
  for (int s = 0; s < dout.n; ++s)
    for (int oc = 0; oc < dout.c; ++oc) {
      const double* src = dout.channel(s, oc);
      for (int j = 0; j < m; ++j) {
        double* dst = dmaps.channel(s, oc * m + j);
        for (int64_t k = 0; k < plane; ++k) dst[k] = src[k] / m;
      }
    }
  return dmaps;
}

// ---------------------------------------------------------------------------
// Presence decision and weighted presence loss

struct PresenceDecision {
  std::vector<double> probs;
  std::vector<uint8_t> present;
};

// probs = sigmoid(logits); present_c <=> logit_c >= 0, which is exactly
// prob_c >= 0.5 with the boundary included.
inline PresenceDecision presence_from_logits(std::span<const double> logits) {
  PresenceDecision out;
  out.probs.reserve(logits.size());
  out.present.reserve(logits.size());
  for (double z : logits) {
    out.probs.push_back(sigmoid(z));
    out.present.push_back(z >= 0.0 ? 1 : 0);
  }
  return out;
}

inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

struct BceResult {
  double loss = 0.0;
  std::vector<std::vector<double>> dlogits;
};

// Weighted presence cross-entropy in stable logit form, summed over classes
// and averaged over the batch. The class weight multiplies the positive
// (y=1) term only; a weight of exactly zero disables the class entirely.
inline BceResult weighted_bce_loss(const std::vector<std::vector<double>>& logits,
                                   const std::vector<std::vector<uint8_t>>& labels,
                                   std::span<const double> weights) {
  if (logits.empty() || logits.size() != labels.size())
    throw std::invalid_argument("weighted_bce_loss: batch size mismatch");
  const size_t C = weights.size();
  BceResult r;
  r.dlogits.assign(logits.size(), std::vector<double>(C, 0.0));
  const double inv_n = 1.0 / double(logits.size());
  for (size_t n = 0; n < logits.size(); ++n) {
    if (logits[n].size() != C || labels[n].size() != C)
      throw std::invalid_argument("weighted_bce_loss: class count mismatch at row " +
                                  std::to_string(n));
    for (size_t c = 0; c < C; ++c) {
      uint8_t y = labels[n][c];
      if (y > 1) throw std::invalid_argument("weighted_bce_loss: labels must be binary");
      double z = logits[n][c];
      if (y == 1) {
        r.loss += inv_n * weights[c] * softplus(-z);
        r.dlogits[n][c] = inv_n * weights[c] * (sigmoid(z) - 1.0);
      } else if (weights[c] != 0.0) {
        r.loss += inv_n * softplus(z);
        r.dlogits[n][c] = inv_n * sigmoid(z);
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Patch masking augmentation

// Partition the frame into a patch x patch grid (edge cells clipped) and
// replace each cell with the dataset-mean pixel independently with
// probability p.
inline Tensor4 patch_mask(const Tensor4& frame, SeededRng& rng, int patch = 16, double p = 0.5,
                          std::span<const double> fill = {}) {
  if (patch < 1 || patch > frame.h || patch > frame.w)
    throw std::invalid_argument("patch_mask: patch must fit in the frame");
  if (!fill.empty() && int(fill.size()) != frame.c)
    throw std::invalid_argument("patch_mask: fill pixel has wrong channel count");
  Tensor4 out = frame;
  const int gy = (frame.h + patch - 1) / patch;
  const int gx = (frame.w + patch - 1) / patch;
  for (int s = 0; s < frame.n; ++s)
    for (int py = 0; py < gy; ++py)
      for (int px = 0; px < gx; ++px) {
        if (!rng.bernoulli(p)) continue;
        int y1 = std::min(frame.h, (py + 1) * patch);
        int x1 = std::min(frame.w, (px + 1) * patch);
        for (int ch = 0; ch < frame.c; ++ch) {
          double f = fill.empty() ? 0.0 : fill[size_t(ch)];
          double* dst = out.channel(s, ch);
          for (int y = py * patch; y < y1; ++y)
            for (int x = px * patch; x < x1; ++x) dst[y * frame.w + x] = f;
        }
      }
  return out;
}

// ---------------------------------------------------------------------------
// Layers

struct Conv2dLayer {
  Parameter w;  // (out_c, in_c, kh, kw)
  Parameter b;  // (1, out_c, 1, 1)
  int stride = 1;
  int padding = 0;

  static Conv2dLayer create(const std::string& name, int out_c, int in_c, int k, int stride,
                            int padding, SeededRng& rng) {
    Conv2dLayer l;
    Tensor4 kw(out_c, in_c, k, k);
    double s = std::sqrt(2.0 / (double(in_c) * k * k));
    for (double& v : kw.v) v = rng.normal(0.0, s);
    l.w = Parameter(name + ".w", std::move(kw));
    l.b = Parameter(name + ".b", Tensor4(1, out_c, 1, 1));
    l.stride = stride;
    l.padding = padding;
    return l;
  }

  Tensor4 forward(const Tensor4& x) const {
    return conv2d(x, w.value, std::span<const double>(b.value.v), stride, padding);
  }

  Tensor4 backward(const Tensor4& gout, const Tensor4& x) {
    Conv2dGrads g = conv2d_backward(gout, x, w.value, stride, padding);
    w.grad += g.dkernel;
    for (size_t i = 0; i < g.dbias.size(); ++i) b.grad.v[i] += g.dbias[i];
    return std::move(g.dx);
  }

  std::vector<Parameter*> params() { return {&w, &b}; }
};

// conv-relu-conv with additive skip; 1x1 projection when the shape changes.
struct ResidualBlock {
  Conv2dLayer conv1, conv2;
  std::optional<Conv2dLayer> proj;

  struct Cache {
    Tensor4 x, z1, a1, s;
  };

  static ResidualBlock create(const std::string& name, int in_c, int out_c, int stride,
                              SeededRng& rng) {
    ResidualBlock b;
    b.conv1 = Conv2dLayer::create(name + ".conv1", out_c, in_c, 3, stride, 1, rng);
    b.conv2 = Conv2dLayer::create(name + ".conv2", out_c, out_c, 3, 1, 1, rng);
    if (stride != 1 || in_c != out_c)
      b.proj = Conv2dLayer::create(name + ".proj", out_c, in_c, 1, stride, 0, rng);
    return b;
  }

  Tensor4 forward(const Tensor4& x, Cache* cache) const {
    Tensor4 z1 = conv1.forward(x);
    Tensor4 a1 = activation(z1, Act::relu);
    Tensor4 s = conv2.forward(a1);
    s += proj ? proj->forward(x) : x;
    Tensor4 out = activation(s, Act::relu);
    if (cache) {
      cache->x = x;
      cache->z1 = std::move(z1);
      cache->a1 = std::move(a1);
      cache->s = std::move(s);
    }
    return out;
  }

  Tensor4 backward(const Tensor4& gout, const Cache& cache) {
    Tensor4 ds = relu_backward(gout, cache.s);
    Tensor4 da1 = conv2.backward(ds, cache.a1);
    Tensor4 dz1 = relu_backward(da1, cache.z1);
    Tensor4 dx = conv1.backward(dz1, cache.x);
    if (proj)
      dx += proj->backward(ds, cache.x);
    else
      dx += ds;
    return dx;
  }

  std::vector<Parameter*> params() {
    std::vector<Parameter*> out = conv1.params();
    for (auto* p : conv2.params()) out.push_back(p);
    if (proj)
      for (auto* p : proj->params()) out.push_back(p);
    return out;
  }
};

struct Backbone {
  BackboneConfig cfg;
  Conv2dLayer stem;
  std::vector<ResidualBlock> blocks;

  struct Cache {
    Tensor4 x, stem_z;
    std::vector<ResidualBlock::Cache> block_caches;
  };

  static Backbone create(const BackboneConfig& cfg, SeededRng& rng) {
    cfg.validate();
    Backbone bb;
    bb.cfg = cfg;
    bb.stem = Conv2dLayer::create("backbone.stem", cfg.stem_channels, 3, 3, 1, 1, rng);
    int in_c = cfg.stem_channels;
    for (size_t si = 0; si < cfg.stages.size(); ++si) {
      const auto& st = cfg.stages[si];
      for (int bi = 0; bi < st.blocks; ++bi) {
        std::string name =
            "backbone.s" + std::to_string(si) + ".b" + std::to_string(bi);
        int stride = bi == 0 ? st.stride : 1;
        bb.blocks.push_back(ResidualBlock::create(name, in_c, st.channels, stride, rng));
        in_c = st.channels;
      }
    }
    return bb;
  }

  Tensor4 forward(const Tensor4& x, Cache* cache) const {
    Tensor4 z = stem.forward(x);
    Tensor4 a = activation(z, Act::relu);
    if (cache) {
      cache->x = x;
      cache->stem_z = z;
      cache->block_caches.resize(blocks.size());
    }
    for (size_t i = 0; i < blocks.size(); ++i)
      a = blocks[i].forward(a, cache ? &cache->block_caches[i] : nullptr);
    return a;
  }

  Tensor4 backward(const Tensor4& gout, const Cache& cache) {
    Tensor4 g = gout;
    for (size_t i = blocks.size(); i-- > 0;) g = blocks[i].backward(g, cache.block_caches[i]);
    Tensor4 dz = relu_backward(g, cache.stem_z);
    return stem.backward(dz, cache.x);
  }

  std::pair<int, int> out_dims(int h, int w) const {
    // stem is stride 1; each stage's first block carries the stage stride
    for (const auto& st : cfg.stages) {
      h = conv_out_dim(h, 3, st.stride, 1);
      w = conv_out_dim(w, 3, st.stride, 1);
      for (int bi = 1; bi < st.blocks; ++bi) {
        h = conv_out_dim(h, 3, 1, 1);
        w = conv_out_dim(w, 3, 1, 1);
      }
    }
    return {h, w};
  }

  int out_channels() const { return cfg.out_channels(); }

  std::vector<Parameter*> params() {
    std::vector<Parameter*> out = stem.params();
    for (auto& b : blocks)
      for (auto* p : b.params()) out.push_back(p);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Model: backbone + localization head + optional ConvLSTM, wired per variant.

class Model {
 public:
  Model(ModelConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
    SeededRng rng(init_seed);
    backbone_ = Backbone::create(cfg_.backbone, rng);
    const int bb_c = backbone_.out_channels();
    switch (cfg_.variant) {
      case Variant::RC_M1:
      case Variant::RC_M1_mask:
      case Variant::RC_M4:
      case Variant::RC_M4_mask:
        head_ = Conv2dLayer::create("head", cfg_.head_out_channels(), bb_c, 1, 1, 0, rng);
        break;
      case Variant::RCCL:
        head_ = Conv2dLayer::create("head", cfg_.num_classes, bb_c, 1, 1, 0, rng);
        cl_ = ConvLSTMCellParams::create("cl", cfg_.num_classes, cfg_.num_classes, cfg_.cl_kernel,
                                         rng);
        break;
      case Variant::RCLC:
        cl_ = ConvLSTMCellParams::create("cl", bb_c, cfg_.cl_hidden, cfg_.cl_kernel, rng);
        head_ = Conv2dLayer::create("head", cfg_.num_classes, cfg_.cl_hidden, 1, 1, 0, rng);
        break;
      case Variant::RCL:
        cl_ = ConvLSTMCellParams::create("cl", bb_c, cfg_.num_classes, cfg_.cl_kernel, rng);
        break;
    }
  }

  const ModelConfig& config() const { return cfg_; }

  int map_channels() const { return cfg_.num_classes; }

  int cl_channels() const {
    if (!cfg_.has_cl()) throw std::logic_error("cl_channels: variant has no ConvLSTM");
    return cl_->hidden_channels();
  }

  // Residual skip from the CL input to its output; only possible when the
  // channel counts line up.
  bool cl_residual_active() const {
    return cfg_.has_cl() && cfg_.cl_residual && cl_->in_channels() == cl_->hidden_channels();
  }

  std::pair<int, int> map_dims(int frame_h, int frame_w) const {
    return backbone_.out_dims(frame_h, frame_w);
  }

  ConvLSTMState initial_state(int frame_h, int frame_w) const {
    auto [mh, mw] = map_dims(frame_h, frame_w);
    return ConvLSTMState::zero(1, cl_channels(), mh, mw);
  }

  struct WindowCache {
    // baseline path
    Backbone::Cache bb_batch;
    Tensor4 bb_out_batch, head_out_batch;
    // sequence path
    std::vector<Backbone::Cache> bb;
    std::vector<Tensor4> head_in;
    std::vector<CellCache> cl;
    WildcatCache wildcat;
    Tensor4 pooled_maps;  // maps the pooling saw, stacked over frames
  };

  struct ForwardResult {
    std::vector<HeatMapStack> maps;
    std::vector<std::vector<double>> logits;
    ConvLSTMState state;  // valid only for CL variants
  };

  // Frames are (1, 3, h, w) tensors forming a chronological window. The
  // recurrent state must be supplied exactly when the variant has a CL unit.
  ForwardResult forward(const std::vector<Tensor4>& frames, const ConvLSTMState* state,
                        WindowCache* cache = nullptr) const {
    if (frames.empty()) throw std::invalid_argument("Model::forward: empty window");
    for (const auto& f : frames)
      if (!f.same_shape(frames[0]))
        throw std::invalid_argument("Model::forward: frames must share shape");
    if (cfg_.has_cl() && state == nullptr)
      throw std::invalid_argument("Model::forward: variant " + std::string(variant_name(cfg_.variant)) +
                                  " requires a ConvLSTM state");
    if (!cfg_.has_cl() && state != nullptr)
      throw std::invalid_argument("Model::forward: state supplied to baseline variant " +
                                  std::string(variant_name(cfg_.variant)));
    return cfg_.has_cl() ? forward_sequence(frames, *state, cache)
                         : forward_batch(frames, cache);
  }

  // Gradients w.r.t. the per-frame logits flow back through pooling, head,
  // CL and (unless skipped for a frozen phase) the backbone.
  void backward(const std::vector<std::vector<double>>& dlogits, WindowCache& cache,
                bool through_backbone = true) {
    if (cfg_.has_cl())
      backward_sequence(dlogits, cache, through_backbone);
    else
      backward_batch(dlogits, cache, through_backbone);
  }

  std::vector<Parameter*> params() {
    std::vector<Parameter*> out = backbone_.params();
    if (head_)
      for (auto* p : head_->params()) out.push_back(p);
    if (cl_)
      for (auto* p : cl_->params()) out.push_back(p);
    return out;
  }

  std::vector<Parameter*> backbone_params() { return backbone_.params(); }

  std::vector<Parameter*> temporal_params() {
    std::vector<Parameter*> out;
    if (head_)
      for (auto* p : head_->params()) out.push_back(p);
    if (cl_)
      for (auto* p : cl_->params()) out.push_back(p);
    return out;
  }

  void zero_grads() {
    for (auto* p : params()) p->zero_grad();
  }

  Checkpoint to_checkpoint(uint64_t seed, int epoch, const std::string& phase) {
    Checkpoint ck;
    ck.variant = variant_name(cfg_.variant);
    ck.seed = seed;
    ck.epoch = epoch;
    ck.phase = phase;
    for (auto* p : params()) ck.params.emplace_back(p->name, p->value);
    return ck;
  }

  // Strict load: every parameter of this model must be present with the
  // right shape.
  void load(const Checkpoint& ck) {
    for (auto* p : params()) {
      const Tensor4* t = ck.find(p->name);
      if (!t) throw std::runtime_error("checkpoint missing parameter " + p->name);
      if (!t->same_shape(p->value))
        throw std::runtime_error("checkpoint shape mismatch for " + p->name + ": " +
                                 t->shape_str() + " vs " + p->value.shape_str());
      p->value = *t;
    }
  }

  // Adopt whatever overlaps by name and shape; returns the adopted names.
  // Used to seed a CL variant from a trained baseline checkpoint.
  std::vector<std::string> load_compatible(const Checkpoint& ck) {
    std::vector<std::string> adopted;
    for (auto* p : params()) {
      const Tensor4* t = ck.find(p->name);
      if (t && t->same_shape(p->value)) {
        p->value = *t;
        adopted.push_back(p->name);
      }
    }
    return adopted;
  }

 private:
  ForwardResult forward_batch(const std::vector<Tensor4>& frames, WindowCache* cache) const {
    // stack the window into one batch for the convolutions
    const Tensor4& f0 = frames[0];
    Tensor4 batch(int(frames.size()), f0.c, f0.h, f0.w);
    for (size_t t = 0; t < frames.size(); ++t)
      std::copy(frames[t].v.begin(), frames[t].v.end(),
                batch.v.begin() + int64_t(t) * f0.size());

    Backbone::Cache bb_cache;
    Tensor4 feat = backbone_.forward(batch, cache ? &bb_cache : nullptr);
    Tensor4 head_out = head_->forward(feat);
    Tensor4 maps = uses_multimap(cfg_.variant) ? multimap_reduce(head_out, cfg_.multimap_m)
                                               : head_out;

    WildcatCache wc;
    std::vector<double> scores = wildcat_pool(maps, cfg_.pooling, cache ? &wc : nullptr);

    ForwardResult r;
    for (size_t t = 0; t < frames.size(); ++t) {
      Tensor4 m(1, maps.c, maps.h, maps.w);
      std::copy(maps.channel(int(t), 0), maps.channel(int(t), 0) + int64_t(maps.c) * maps.h * maps.w,
                m.v.begin());
      r.maps.push_back(HeatMapStack{std::move(m), int(t), MapKind::spatial});
      r.logits.emplace_back(scores.begin() + int64_t(t) * maps.c,
                            scores.begin() + int64_t(t + 1) * maps.c);
    }
    if (cache) {
      cache->bb_batch = std::move(bb_cache);
      cache->bb_out_batch = std::move(feat);
      cache->head_out_batch = std::move(head_out);
      cache->wildcat = std::move(wc);
      cache->pooled_maps = std::move(maps);
    }
    return r;
  }

  void backward_batch(const std::vector<std::vector<double>>& dlogits, WindowCache& cache,
                      bool through_backbone) {
    const Tensor4& maps = cache.pooled_maps;
    std::vector<double> dscores(size_t(maps.n) * maps.c, 0.0);
    for (int t = 0; t < maps.n; ++t)
      for (int c = 0; c < maps.c; ++c) dscores[size_t(t) * maps.c + c] = dlogits[size_t(t)][size_t(c)];
    Tensor4 dmaps = wildcat_backward(dscores, maps, cfg_.pooling, cache.wildcat);
    Tensor4 dhead = uses_multimap(cfg_.variant)
                        ? multimap_reduce_backward(dmaps, cfg_.multimap_m, cache.head_out_batch.c)
                        : std::move(dmaps);
    Tensor4 dfeat = head_->backward(dhead, cache.bb_out_batch);
    if (through_backbone) backbone_.backward(dfeat, cache.bb_batch);
  }

  ForwardResult forward_sequence(const std::vector<Tensor4>& frames, const ConvLSTMState& state,
                                 WindowCache* cache) const {
    const size_t T = frames.size();
    if (cache) {
      cache->bb.resize(T);
      cache->head_in.resize(T);
    }

    std::vector<Tensor4> cl_inputs(T);
    for (size_t t = 0; t < T; ++t) {
      Tensor4 feat = backbone_.forward(frames[t], cache ? &cache->bb[t] : nullptr);
      if (cfg_.variant == Variant::RCCL) {
        Tensor4 m = head_->forward(feat);
        if (cache) cache->head_in[t] = std::move(feat);
        cl_inputs[t] = std::move(m);
      } else {
        cl_inputs[t] = std::move(feat);
      }
    }

    auto [cl_outs, final_state] =
        unroll(cl_inputs, state, *cl_, cache ? &cache->cl : nullptr);
    const bool residual = cl_residual_active();

    // stack per-frame maps so one pooling call covers the window
    std::vector<Tensor4> maps(T);
    for (size_t t = 0; t < T; ++t) {
      Tensor4 m = residual ? cl_outs[t] + cl_inputs[t] : std::move(cl_outs[t]);
      if (cfg_.variant == Variant::RCLC) {
        maps[t] = head_->forward(m);
        if (cache) cache->head_in[t] = std::move(m);
      } else {
        maps[t] = std::move(m);
      }
    }

    Tensor4 stacked(int(T), maps[0].c, maps[0].h, maps[0].w);
    for (size_t t = 0; t < T; ++t)
      std::copy(maps[t].v.begin(), maps[t].v.end(), stacked.v.begin() + int64_t(t) * maps[0].size());
    WildcatCache wc;
    std::vector<double> scores = wildcat_pool(stacked, cfg_.pooling, cache ? &wc : nullptr);

    const MapKind kind = cfg_.variant == Variant::RCLC ? MapKind::spatial : MapKind::spatio_temporal;
    ForwardResult r;
    for (size_t t = 0; t < T; ++t) {
      r.maps.push_back(HeatMapStack{std::move(maps[t]), int(t), kind});
      r.logits.emplace_back(scores.begin() + int64_t(t) * stacked.c,
                            scores.begin() + int64_t(t + 1) * stacked.c);
    }
    r.state = std::move(final_state);
    if (cache) {
      cache->wildcat = std::move(wc);
      cache->pooled_maps = std::move(stacked);
    }
    return r;
  }

  void backward_sequence(const std::vector<std::vector<double>>& dlogits, WindowCache& cache,
                         bool through_backbone) {
    const size_t T = cache.cl.size();
    const Tensor4& stacked = cache.pooled_maps;
    std::vector<double> dscores(size_t(stacked.n) * stacked.c, 0.0);
    for (size_t t = 0; t < T; ++t)
      for (int c = 0; c < stacked.c; ++c)
        dscores[t * size_t(stacked.c) + size_t(c)] = dlogits[t][size_t(c)];
    Tensor4 dstacked = wildcat_backward(dscores, stacked, cfg_.pooling, cache.wildcat);

    const bool residual = cl_residual_active();
    std::vector<Tensor4> dcl_out(T);
    std::vector<Tensor4> dcl_in_extra(T);  // residual path contribution
    for (size_t t = 0; t < T; ++t) {
      Tensor4 dmap(1, stacked.c, stacked.h, stacked.w);
      std::copy(dstacked.channel(int(t), 0),
                dstacked.channel(int(t), 0) + int64_t(stacked.c) * stacked.h * stacked.w,
                dmap.v.begin());
      if (cfg_.variant == Variant::RCLC) dmap = head_->backward(dmap, cache.head_in[t]);
      if (residual) dcl_in_extra[t] = dmap;
      dcl_out[t] = std::move(dmap);
    }

    std::vector<Tensor4> dcl_in = unroll_backward(dcl_out, cache.cl, *cl_);
    for (size_t t = 0; t < T; ++t)
      if (residual) dcl_in[t] += dcl_in_extra[t];

    for (size_t t = 0; t < T; ++t) {
      Tensor4 dfeat = cfg_.variant == Variant::RCCL
                          ? head_->backward(dcl_in[t], cache.head_in[t])
                          : std::move(dcl_in[t]);
      if (through_backbone) backbone_.backward(dfeat, cache.bb[t]);
    }
  }

  ModelConfig cfg_;
  Backbone backbone_;
  std::optional<Conv2dLayer> head_;
  std::optional<ConvLSTMCellParams> cl_;
};

}  // namespace wstrack
