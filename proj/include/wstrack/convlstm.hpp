#pragma once

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "wstrack/conv.hpp"
#include "wstrack/rng.hpp"
#include "wstrack/tensor.hpp"

namespace wstrack {

// Hidden/cell map pair carried across timesteps. After any cell_step every
// hidden element lies in (-1, 1): it is a sigmoid gate times a tanh.
struct ConvLSTMState {
  Tensor4 hidden;
  Tensor4 cell;

  static ConvLSTMState zero(int n, int c, int h, int w) {
    return ConvLSTMState{Tensor4(n, c, h, w), Tensor4(n, c, h, w)};
  }
};

// Gate order everywhere: input, forget, candidate, output.
enum GateIdx { kGateI = 0, kGateF = 1, kGateG = 2, kGateO = 3 };

// Four gate convolutions over the cell input plus four over the hidden map.
// Gate kernels share spatial size; zero padding keeps spatial dims.
struct ConvLSTMCellParams {
  std::array<Parameter, 4> wx;  // (hidden_c, in_c, k, k)
  std::array<Parameter, 4> wh;  // (hidden_c, hidden_c, k, k)
  std::array<Parameter, 4> b;   // (1, hidden_c, 1, 1)

  int in_channels() const { return wx[0].value.c; }
  int hidden_channels() const { return wx[0].value.n; }
  int kernel() const { return wx[0].value.h; }
  int padding() const { return kernel() / 2; }

  static ConvLSTMCellParams create(const std::string& prefix, int in_c, int hidden_c, int k,
                                   SeededRng& rng) {
    static const char* gate_names[4] = {"i", "f", "g", "o"};
    ConvLSTMCellParams p;
    double sx = std::sqrt(2.0 / (double(in_c) * k * k));
    double sh = std::sqrt(2.0 / (double(hidden_c) * k * k));
    for (int g = 0; g < 4; ++g) {
      Tensor4 kx(hidden_c, in_c, k, k);
      for (double& v : kx.v) v = rng.normal(0.0, sx);
      Tensor4 kh(hidden_c, hidden_c, k, k);
      for (double& v : kh.v) v = rng.normal(0.0, sh);
      p.wx[g] = Parameter(prefix + ".wx_" + gate_names[g], std::move(kx));
      p.wh[g] = Parameter(prefix + ".wh_" + gate_names[g], std::move(kh));
      p.b[g] = Parameter(prefix + ".b_" + gate_names[g], Tensor4(1, hidden_c, 1, 1));
    }
    // forget gate biased open so early training keeps memory
    p.b[kGateF].value.fill(1.0);
    return p;
  }

  // All-zero parameters; the algebraic edge cases in the tests start here.
  static ConvLSTMCellParams zeros(const std::string& prefix, int in_c, int hidden_c, int k) {
    static const char* gate_names[4] = {"i", "f", "g", "o"};
    ConvLSTMCellParams p;
    for (int g = 0; g < 4; ++g) {
      p.wx[g] = Parameter(prefix + ".wx_" + gate_names[g], Tensor4(hidden_c, in_c, k, k));
      p.wh[g] = Parameter(prefix + ".wh_" + gate_names[g], Tensor4(hidden_c, hidden_c, k, k));
      p.b[g] = Parameter(prefix + ".b_" + gate_names[g], Tensor4(1, hidden_c, 1, 1));
    }
    return p;
  }

  std::vector<Parameter*> params() {
    std::vector<Parameter*> out;
    for (int g = 0; g < 4; ++g) {
      out.push_back(&wx[g]);
      out.push_back(&wh[g]);
      out.push_back(&b[g]);
    }
    return out;
  }
};

struct CellCache {
  Tensor4 x, h_prev, c_prev;
  Tensor4 i, f, g, o, c_new;
};

namespace detail {

inline void add_bias_inplace(Tensor4& t, const Tensor4& bias) {
  for (int s = 0; s < t.n; ++s)
    for (int ic = 0; ic < t.c; ++ic) {
      double b = bias.v[size_t(ic)];
      double* p = t.channel(s, ic);
      for (int64_t k = 0; k < int64_t(t.h) * t.w; ++k) p[k] += b;
    }
}

inline std::vector<double> channel_sums(const Tensor4& t) {
  std::vector<double> sums(size_t(t.c), 0.0);
  for (int s = 0; s < t.n; ++s)
    for (int ic = 0; ic < t.c; ++ic) {
      const double* p = t.channel(s, ic);
      double acc = 0.0;
      for (int64_t k = 0; k < int64_t(t.h) * t.w; ++k) acc += p[k];
      sums[size_t(ic)] += acc;
    }
  return sums;
}

}  // namespace detail

// One ConvLSTM step:
//   i,f,o = sigmoid(conv(x) + conv(h) + b),  g = tanh(conv(x) + conv(h) + b)
//   c' = f.c + i.g,  h' = o.tanh(c'),  output = h'
inline std::pair<Tensor4, ConvLSTMState> cell_step(const Tensor4& x, const ConvLSTMState& state,
                                                   const ConvLSTMCellParams& params,
                                                   CellCache* cache = nullptr) {
  if (x.h != state.hidden.h || x.w != state.hidden.w || x.n != state.hidden.n)
    throw std::invalid_argument("cell_step: input " + x.shape_str() + " does not align with state " +
                                state.hidden.shape_str());
  state.hidden.require_same_shape(state.cell, "cell_step state");
  const int pad = params.padding();

  std::array<Tensor4, 4> z;
  for (int g = 0; g < 4; ++g) {
    z[g] = conv2d(x, params.wx[g].value, {}, 1, pad);
    z[g] += conv2d(state.hidden, params.wh[g].value, {}, 1, pad);
    detail::add_bias_inplace(z[g], params.b[g].value);
  }
  Tensor4 gi = activation(z[kGateI], Act::sigmoid);
  Tensor4 gf = activation(z[kGateF], Act::sigmoid);
  Tensor4 gg = activation(z[kGateG], Act::tanh);
  Tensor4 go = activation(z[kGateO], Act::sigmoid);

  Tensor4 c_new = hadamard(gf, state.cell) + hadamard(gi, gg);
  Tensor4 h_new = hadamard(go, activation(c_new, Act::tanh));

  if (cache) {
    cache->x = x;
    cache->h_prev = state.hidden;
    cache->c_prev = state.cell;
    cache->i = gi;
    cache->f = gf;
    cache->g = gg;
    cache->o = go;
    cache->c_new = c_new;
  }
  return {h_new, ConvLSTMState{h_new, std::move(c_new)}};
}

// Backward through one step. dh/dc are gradients w.r.t. the step's hidden
// and cell outputs; parameter grads accumulate in place. Returns gradients
// w.r.t. x, h_prev, c_prev.
struct CellStepGrads {
  Tensor4 dx, dh_prev, dc_prev;
};

inline CellStepGrads cell_backward(const Tensor4& dh, const Tensor4& dc, const CellCache& cache,
                                   ConvLSTMCellParams& params) {
  const int pad = params.padding();
  Tensor4 tanh_c = activation(cache.c_new, Act::tanh);

  // output gate and cell path
  Tensor4 dgo = hadamard(dh, tanh_c);
  Tensor4 dcell = dc;
  for (size_t k = 0; k < dcell.v.size(); ++k)
    dcell.v[k] += dh.v[k] * cache.o.v[k] * (1.0 - tanh_c.v[k] * tanh_c.v[k]);

  Tensor4 dgf = hadamard(dcell, cache.c_prev);
  Tensor4 dgi = hadamard(dcell, cache.g);
  Tensor4 dgg = hadamard(dcell, cache.i);
  Tensor4 dc_prev = hadamard(dcell, cache.f);

  // through the gate nonlinearities
  std::array<Tensor4, 4> dz;
  dz[kGateI] = zeros_like(dgi);
  dz[kGateF] = zeros_like(dgf);
  dz[kGateG] = zeros_like(dgg);
  dz[kGateO] = zeros_like(dgo);
  for (size_t k = 0; k < dgi.v.size(); ++k) {
    dz[kGateI].v[k] = dgi.v[k] * cache.i.v[k] * (1.0 - cache.i.v[k]);
    dz[kGateF].v[k] = dgf.v[k] * cache.f.v[k] * (1.0 - cache.f.v[k]);
    dz[kGateG].v[k] = dgg.v[k] * (1.0 - cache.g.v[k] * cache.g.v[k]);
    dz[kGateO].v[k] = dgo.v[k] * cache.o.v[k] * (1.0 - cache.o.v[k]);
  }

  CellStepGrads out{zeros_like(cache.x), zeros_like(cache.h_prev), std::move(dc_prev)};
  for (int g = 0; g < 4; ++g) {
    Conv2dGrads gx = conv2d_backward(dz[g], cache.x, params.wx[g].value, 1, pad);
    out.dx += gx.dx;
    params.wx[g].grad += gx.dkernel;

    Conv2dGrads gh = conv2d_backward(dz[g], cache.h_prev, params.wh[g].value, 1, pad);
    out.dh_prev += gh.dx;
    params.wh[g].grad += gh.dkernel;

    std::vector<double> bs = detail::channel_sums(dz[g]);
    for (int ic = 0; ic < int(bs.size()); ++ic) params.b[g].grad.v[size_t(ic)] += bs[size_t(ic)];
  }
  return out;
}

// Sequential unroll. Gradients flow through the full window and stop at
// `init` (truncated BPTT); callers re-seed the next window with
// propagate_state on the returned final state.
inline std::pair<std::vector<Tensor4>, ConvLSTMState> unroll(const std::vector<Tensor4>& xs,
                                                             const ConvLSTMState& init,
                                                             const ConvLSTMCellParams& params,
                                                             std::vector<CellCache>* caches = nullptr) {
  if (xs.empty()) throw std::invalid_argument("unroll: empty sequence");
  if (caches) caches->resize(xs.size());
  std::vector<Tensor4> outputs;
  outputs.reserve(xs.size());
  ConvLSTMState state = init;
  for (size_t t = 0; t < xs.size(); ++t) {
    auto [out, next] = cell_step(xs[t], state, params, caches ? &(*caches)[t] : nullptr);
    outputs.push_back(std::move(out));
    state = std::move(next);
  }
  return {std::move(outputs), std::move(state)};
}

// BPTT over the cached window. douts[t] is the gradient w.r.t. outputs[t].
// Returns per-timestep input gradients; parameter grads accumulate in place.
inline std::vector<Tensor4> unroll_backward(const std::vector<Tensor4>& douts,
                                            std::vector<CellCache>& caches,
                                            ConvLSTMCellParams& params) {
  if (douts.size() != caches.size())
    throw std::invalid_argument("unroll_backward: gradient count != cached steps");
  const size_t T = caches.size();
  std::vector<Tensor4> dxs(T);
  Tensor4 dh = zeros_like(caches[T - 1].h_prev);
  Tensor4 dc = zeros_like(caches[T - 1].c_prev);
  for (size_t t = T; t-- > 0;) {
    Tensor4 dh_total = douts[t] + dh;
    CellStepGrads g = cell_backward(dh_total, dc, caches[t], params);
    dxs[t] = std::move(g.dx);
    dh = std::move(g.dh_prev);
    dc = std::move(g.dc_prev);
  }
  return dxs;
}

// Detached copy of a window's final state, used to seed the next window.
// No gradient linkage survives: the value is copied and the caches of the
// previous window are gone by the time the next one runs.
inline ConvLSTMState propagate_state(const ConvLSTMState& final_state) { return final_state; }

// Cross-batch state registry, single writer per video stream. Hands out the
// stored state only when the requested window starts exactly where the last
// one ended; anything else resets to zeros and records an event.
class StateRegistry {
 public:
  struct Event {
    std::string video_id;
    int frame_index;
    std::string what;
  };

  ConvLSTMState fetch(const std::string& video_id, int start_frame, int n, int c, int h, int w) {
    auto it = entries_.find(video_id);
    if (it == entries_.end()) {
      if (start_frame != 0)
        events_.push_back({video_id, start_frame, "new video stream starting mid-sequence; state reset"});
      return ConvLSTMState::zero(n, c, h, w);
    }
    if (it->second.next_frame != start_frame) {
      events_.push_back({video_id, start_frame,
                         "non-consecutive window (expected frame " +
                             std::to_string(it->second.next_frame) + "); state reset"});
      entries_.erase(it);
      return ConvLSTMState::zero(n, c, h, w);
    }
    return propagate_state(it->second.state);
  }

  void store(const std::string& video_id, int end_frame_exclusive, const ConvLSTMState& state) {
    entries_[video_id] = Entry{propagate_state(state), end_frame_exclusive};
  }

  void reset() { entries_.clear(); }
  const std::vector<Event>& events() const { return events_; }

 private:
  struct Entry {
    ConvLSTMState state;
    int next_frame = 0;
  };
  std::map<std::string, Entry> entries_;
  std::vector<Event> events_;
};

}  // namespace wstrack
